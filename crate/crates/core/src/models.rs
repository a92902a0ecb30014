//! Trained model state: the embedder, the identity head, the verification
//! threshold, and the gallery of enrolled embeddings.
//!
//! Weight files are written under fresh generation-numbered names before the
//! `models/current` document is switched to point at them, so a reader never
//! sees a half-written bundle.

use crate::classifier::{argmax, head_spec, train_head, ClassifierHead, HeadHyper, Prediction};
use crate::docstore::{Collection, Document, DocumentStore};
use crate::enrollment::TrainingSets;
use crate::error::PipelineError;
use crate::haar::{load_cascade, save_cascade, HaarCascade};
use crate::neural::{load_weights, save_weights, LayerSpec, Network};
use crate::siamese::{
    calibrate_tau, embed, pair_distance, train_siamese_with, Embedding, FaceChip, SiameseHyper, EMBEDDING_DIM,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

pub const CASCADE_FILE: &str = "cascade.json";
pub const CURRENT_MODEL_ID: &str = "current";

/// Stored in `models/current`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub kind: String,
    pub generation: u64,
    /// Decimal rendering of the verification threshold.
    pub tau: String,
    pub theta: f64,
    pub hidden: usize,
    pub class_ids: Vec<String>,
    pub chip_side: u32,
    pub embedder_spec: Vec<LayerSpec>,
    pub report: TrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub persons: usize,
    pub chips: usize,
    pub pairs: usize,
    pub final_pair_loss: f64,
    pub mean_same_distance: f64,
    pub mean_diff_distance: f64,
    pub tau: f64,
    pub tau_error_rate: f64,
    pub head_train_accuracy: f64,
}

/// Settings consumed by [`train_models`].
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub embedder_spec: Vec<LayerSpec>,
    pub siamese: SiameseHyper,
    pub head: HeadHyper,
    pub theta: f64,
}

#[derive(Debug, Clone)]
pub struct Recognition {
    pub embedding: Embedding,
    pub prediction: Prediction,
    /// L1 distance to the closest enrolled embedding of the head's top class.
    pub gallery_distance: f64,
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub embedder: Network,
    pub head: ClassifierHead,
    pub tau: f64,
    /// Enrolled embeddings keyed by person id.
    pub gallery: BTreeMap<String, Vec<Embedding>>,
}

impl ModelBundle {
    pub fn chip_side(&self) -> u32 {
        self.embedder.input_shape()[1] as u32
    }

    /// Embeds and classifies a chip. A name survives only when the head is
    /// at least `theta` confident and the embedding lies within `tau` of one
    /// of that person's enrolled embeddings.
    pub fn recognize(&self, chip: &FaceChip) -> Result<Recognition, PipelineError> {
        let embedding = embed(&self.embedder, chip)?;
        let mut prediction = self.head.predict(&embedding)?;
        let top = argmax(&prediction.probs);
        let gallery_distance = self.gallery[&self.head.class_ids()[top]]
            .iter()
            .map(|g| pair_distance(&embedding, g))
            .fold(f64::INFINITY, f64::min);
        if gallery_distance >= self.tau {
            prediction.top_id = None;
        }
        Ok(Recognition { embedding, prediction, gallery_distance })
    }
}

/// Trains the embedder on `sets.pairs`, calibrates tau on the same pairs,
/// then trains the head on the embeddings of every labeled chip.
pub fn train_models(
    sets: &TrainingSets,
    settings: &TrainSettings,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(ModelBundle, TrainReport), PipelineError> {
    let mut final_loss = f64::NAN;
    let embedder = train_siamese_with(&sets.pairs, &settings.embedder_spec, &settings.siamese, |e, loss| {
        final_loss = loss;
        on_epoch(e, loss);
    })?;
    let calibration = calibrate_tau(&embedder, &sets.pairs)?;

    let (mut same, mut diff) = (Vec::new(), Vec::new());
    let mut cache: BTreeMap<*const FaceChip, Embedding> = BTreeMap::new();
    let mut embed_cached = |chip: &std::sync::Arc<FaceChip>| -> Result<Embedding, PipelineError> {
        let key = std::sync::Arc::as_ptr(chip);
        if let Some(e) = cache.get(&key) {
            return Ok(e.clone());
        }
        let e = embed(&embedder, chip)?;
        cache.insert(key, e.clone());
        Ok(e)
    };
    for p in &sets.pairs {
        let d = pair_distance(&embed_cached(&p.a)?, &embed_cached(&p.b)?);
        if p.same { same.push(d) } else { diff.push(d) }
    }
    let mut embeddings = Vec::with_capacity(sets.labeled.len());
    let mut labels = Vec::with_capacity(sets.labeled.len());
    let mut gallery: BTreeMap<String, Vec<Embedding>> = BTreeMap::new();
    for (chip, id) in &sets.labeled {
        let e = embed_cached(chip)?;
        gallery.entry(id.clone()).or_default().push(e.clone());
        embeddings.push(e);
        labels.push(id.clone());
    }
    let labeled_len = embeddings.len();
    for (chip, id) in &sets.augmented {
        embeddings.push(embed_cached(chip)?);
        labels.push(id.clone());
    }
    let head = train_head(&embeddings, &labels, &settings.head, settings.theta)?;
    let correct = embeddings[..labeled_len]
        .iter()
        .zip(&labels[..labeled_len])
        .map(|(e, l)| Ok(&head.class_ids()[argmax(&head.predict(e)?.probs)] == l))
        .collect::<Result<Vec<bool>, PipelineError>>()?
        .into_iter()
        .filter(|&hit| hit)
        .count();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let report = TrainReport {
        persons: gallery.len(),
        chips: sets.labeled.len(),
        pairs: sets.pairs.len(),
        final_pair_loss: final_loss,
        mean_same_distance: mean(&same),
        mean_diff_distance: mean(&diff),
        tau: calibration.tau,
        tau_error_rate: calibration.error_rate,
        head_train_accuracy: correct as f64 / labeled_len.max(1) as f64,
    };
    Ok((ModelBundle { embedder, head, tau: calibration.tau, gallery }, report))
}

fn write_synced(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    if let Some(dir) = path.parent() {
        File::open(dir)?.sync_all()?;
    }
    Ok(())
}

fn file_names(generation: u64) -> [String; 3] {
    [
        format!("embedder-{generation:04}.prsn"),
        format!("head-{generation:04}.prsn"),
        format!("gallery-{generation:04}.json"),
    ]
}

pub fn load_meta(store: &dyn DocumentStore) -> Result<Option<BundleMeta>, PipelineError> {
    match store.get(Collection::Models, CURRENT_MODEL_ID)? {
        Some(doc) => Ok(Some(doc.parse()?)),
        None => Ok(None),
    }
}

/// Persists a bundle as the next generation and returns the metadata now
/// stored under `models/current`. Older generations are removed afterwards.
pub fn save_bundle(
    store: &dyn DocumentStore,
    models_dir: &Path,
    bundle: &ModelBundle,
    report: &TrainReport,
) -> Result<BundleMeta, PipelineError> {
    fs::create_dir_all(models_dir)?;
    let previous = load_meta(store)?;
    let generation = previous.as_ref().map_or(1, |m| m.generation + 1);
    let [embedder_file, head_file, gallery_file] = file_names(generation);
    write_synced(&models_dir.join(embedder_file), &save_weights(&bundle.embedder))?;
    write_synced(&models_dir.join(head_file), &save_weights(bundle.head.net()))?;
    let gallery: BTreeMap<&String, Vec<&[f32]>> =
        bundle.gallery.iter().map(|(k, v)| (k, v.iter().map(Embedding::as_slice).collect())).collect();
    write_synced(&models_dir.join(gallery_file), &serde_json::to_vec(&gallery)?)?;

    let hidden = bundle.head.net().params()[0].as_ref().map_or(0, |p| p.bias.len());
    let meta = BundleMeta {
        kind: "bundle".into(),
        generation,
        tau: bundle.tau.to_string(),
        theta: bundle.head.theta(),
        hidden,
        class_ids: bundle.head.class_ids().to_vec(),
        chip_side: bundle.chip_side(),
        embedder_spec: bundle.embedder.spec().to_vec(),
        report: report.clone(),
    };
    let doc = Document::from_serializable(CURRENT_MODEL_ID, &meta)?;
    if previous.is_some() {
        store.update(Collection::Models, doc)?;
    } else {
        store.insert(Collection::Models, doc)?;
    }
    if let Some(prev) = previous {
        for name in file_names(prev.generation) {
            let _ = fs::remove_file(models_dir.join(name));
        }
    }
    Ok(meta)
}

/// Loads the bundle named by `models/current`, if any. `theta` overrides the
/// stored rejection threshold when given.
pub fn load_bundle(
    store: &dyn DocumentStore,
    models_dir: &Path,
    theta: Option<f64>,
) -> Result<Option<ModelBundle>, PipelineError> {
    let Some(meta) = load_meta(store)? else { return Ok(None) };
    let [embedder_file, head_file, gallery_file] = file_names(meta.generation);
    let side = meta.chip_side as usize;
    let embedder = load_weights(&fs::read(models_dir.join(embedder_file))?, &meta.embedder_spec, &[3, side, side])?;
    let head_net = load_weights(
        &fs::read(models_dir.join(head_file))?,
        &head_spec(meta.hidden, meta.class_ids.len()),
        &[EMBEDDING_DIM],
    )?;
    let head = ClassifierHead::new(head_net, meta.class_ids.clone(), theta.unwrap_or(meta.theta))?;
    let tau: f64 = meta
        .tau
        .parse()
        .map_err(|_| PipelineError::ModelsNotReady(format!("stored tau {:?} is not a number", meta.tau)))?;
    let raw: BTreeMap<String, Vec<Vec<f32>>> = serde_json::from_slice(&fs::read(models_dir.join(gallery_file))?)?;
    let mut gallery = BTreeMap::new();
    for (id, vs) in raw {
        let es = vs.into_iter().map(Embedding::new).collect::<Result<Vec<_>, _>>()?;
        gallery.insert(id, es);
    }
    if meta.class_ids.iter().any(|id| gallery.get(id).is_none_or(Vec::is_empty)) {
        return Err(PipelineError::ModelsNotReady("gallery does not cover every class".into()));
    }
    Ok(Some(ModelBundle { embedder, head, tau, gallery }))
}

pub fn save_cascade_file(models_dir: &Path, cascade: &HaarCascade) -> Result<(), PipelineError> {
    fs::create_dir_all(models_dir)?;
    write_synced(&models_dir.join(CASCADE_FILE), &save_cascade(cascade))
}

pub fn load_cascade_file(models_dir: &Path) -> Result<Option<HaarCascade>, PipelineError> {
    match fs::read(models_dir.join(CASCADE_FILE)) {
        Ok(bytes) => Ok(Some(load_cascade(&bytes)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

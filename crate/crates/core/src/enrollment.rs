//! Person registration, sample capture, and training-set assembly.
//!
//! Samples live at `<samples>/<person_id>/sample_NNN.ppm`. A sample file is
//! written and synced before the person's `sample_count` is bumped; files
//! at or beyond the count are leftovers of an interrupted capture and are
//! removed by [`repair_samples`].

use crate::docstore::{Collection, Document, DocumentStore, StoreError};
use crate::error::PipelineError;
use crate::haar::{detect_faces, DetectParams, HaarCascade};
use crate::image::{decode_pnm, Image, Rect, RgbImage};
use crate::siamese::{align_face, FaceChip, PairSample};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PersonStatus {
    Enrolling,
    Ready,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonRecord {
    pub person_id: String,
    pub name: String,
    pub sample_count: u64,
    pub status: PersonStatus,
}

#[derive(Deserialize)]
struct PersonBody {
    name: String,
    sample_count: u64,
    status: PersonStatus,
}

impl PersonRecord {
    fn from_doc(doc: &Document) -> Result<Self, PipelineError> {
        let b: PersonBody = doc.parse()?;
        Ok(PersonRecord { person_id: doc.id.clone(), name: b.name, sample_count: b.sample_count, status: b.status })
    }

    fn to_doc(&self) -> Document {
        let body = json!({"name": self.name, "sample_count": self.sample_count, "status": self.status});
        Document::new(self.person_id.clone(), body.as_object().unwrap().clone())
    }
}

pub fn valid_person_id(id: &str) -> bool {
    crate::docstore::valid_person_id(id)
}

pub fn register_person(store: &dyn DocumentStore, id: &str, name: &str) -> Result<PersonRecord, PipelineError> {
    if !valid_person_id(id) {
        return Err(PipelineError::InvalidId(id.to_string()));
    }
    if name.trim().is_empty() {
        return Err(PipelineError::InvalidInput("name must not be empty".into()));
    }
    let rec = PersonRecord {
        person_id: id.to_string(),
        name: name.to_string(),
        sample_count: 0,
        status: PersonStatus::Enrolling,
    };
    match store.insert(Collection::Persons, rec.to_doc()) {
        Ok(_) => Ok(rec),
        Err(StoreError::DuplicateId { .. }) => Err(PipelineError::DuplicateId(id.to_string())),
        Err(e) => Err(e.into()),
    }
}

pub fn get_person(store: &dyn DocumentStore, id: &str) -> Result<PersonRecord, PipelineError> {
    match store.get(Collection::Persons, id)? {
        Some(doc) => PersonRecord::from_doc(&doc),
        None => Err(PipelineError::PersonNotFound(id.to_string())),
    }
}

pub fn list_persons(store: &dyn DocumentStore) -> Result<Vec<PersonRecord>, PipelineError> {
    store.query(Collection::Persons, &[])?.iter().map(PersonRecord::from_doc).collect()
}

pub fn sample_path(samples_dir: &Path, person_id: &str, index: u64) -> PathBuf {
    samples_dir.join(person_id).join(format!("sample_{index:03}.ppm"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureOutcome {
    pub stored: bool,
    pub sample_count: u64,
    pub chip_path: PathBuf,
    #[serde(rename = "box")]
    pub face_box: Rect,
}

/// Settings for turning a frame into a stored chip.
#[derive(Debug, Clone, Copy)]
pub struct CaptureParams<'a> {
    pub cascade: &'a HaarCascade,
    pub detect: &'a DetectParams,
    pub nms_iou: f64,
    pub chip_side: u32,
}

/// Detects exactly one face, aligns it, and appends it as the next sample.
/// Callers serialize captures for the same person.
pub fn capture_sample(
    store: &dyn DocumentStore,
    samples_dir: &Path,
    person_id: &str,
    frame: &Image,
    params: CaptureParams<'_>,
) -> Result<CaptureOutcome, PipelineError> {
    let person = get_person(store, person_id)?;
    if person.status == PersonStatus::Ready {
        return Err(PipelineError::AlreadyReady(person_id.to_string()));
    }
    let faces = detect_faces(&frame.to_gray(), params.cascade, params.detect, params.nms_iou)?;
    let face_box = match faces.as_slice() {
        [] => return Err(PipelineError::NoFace),
        [one] => one.rect,
        many => return Err(PipelineError::MultipleFaces(many.len())),
    };
    let chip = align_face(frame, face_box, params.chip_side)?;
    let dir = samples_dir.join(person_id);
    fs::create_dir_all(&dir)?;
    let path = sample_path(samples_dir, person_id, person.sample_count);
    let tmp = path.with_extension("ppm.tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(&chip.encode_pnm())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, &path)?;
    File::open(&dir)?.sync_all()?;
    let count = store.increment(Collection::Persons, person_id, "sample_count", 1)?;
    Ok(CaptureOutcome { stored: true, sample_count: count as u64, chip_path: path, face_box })
}

pub fn finalize_enrollment(store: &dyn DocumentStore, person_id: &str, k_min: u64) -> Result<PersonRecord, PipelineError> {
    let mut person = get_person(store, person_id)?;
    if person.status == PersonStatus::Ready {
        return Ok(person);
    }
    if person.sample_count < k_min {
        return Err(PipelineError::InsufficientSamples { have: person.sample_count, need: k_min });
    }
    person.status = PersonStatus::Ready;
    store.patch(Collection::Persons, person_id, person.to_doc().body)?;
    Ok(person)
}

/// Deletes sample files that the store does not count, including stray
/// temporaries. Returns the removed paths.
pub fn repair_samples(store: &dyn DocumentStore, samples_dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut removed = Vec::new();
    for person in list_persons(store)? {
        let dir = samples_dir.join(&person.person_id);
        let Ok(entries) = fs::read_dir(&dir) else { continue };
        for entry in entries {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let index = name.strip_prefix("sample_").and_then(|n| n.strip_suffix(".ppm")).and_then(|n| n.parse::<u64>().ok());
            let keep = index.is_some_and(|i| i < person.sample_count && path == sample_path(samples_dir, &person.person_id, i));
            if !keep {
                fs::remove_file(&path)?;
                removed.push(path);
            }
        }
    }
    removed.sort();
    Ok(removed)
}

pub fn load_chip(path: &Path) -> Result<FaceChip, PipelineError> {
    let img = decode_pnm(&fs::read(path)?)?;
    Ok(FaceChip::from_image(&img.to_rgb())?)
}

pub struct TrainingSets {
    pub pairs: Vec<PairSample>,
    /// Every stored chip, once, with its owner.
    pub labeled: Vec<(Arc<FaceChip>, String)>,
    /// Perturbed copies of stored chips, used as extra training samples.
    pub augmented: Vec<(Arc<FaceChip>, String)>,
}

/// Random geometric and photometric perturbation applied to stored chips to
/// widen the within-person spread seen in training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augment {
    /// Perturbed copies made of each stored chip.
    pub copies: usize,
    /// Shift amplitude as a fraction of the chip side.
    pub shift: f32,
    /// Relative zoom amplitude.
    pub scale: f32,
    /// Brightness offset amplitude in channel units.
    pub brightness: f32,
}

impl Default for Augment {
    fn default() -> Self {
        Augment { copies: 4, shift: 0.08, scale: 0.15, brightness: 15.0 }
    }
}

impl Augment {
    pub const NONE: Augment = Augment { copies: 0, shift: 0.0, scale: 0.0, brightness: 0.0 };
}

/// Resamples `img` zoomed by `zoom` about its center, shifted by
/// `(dx, dy)` pixels, and offset in brightness. Edges are clamped.
pub fn perturb_chip(img: &RgbImage, zoom: f32, dx: f32, dy: f32, brightness: f32) -> RgbImage {
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
    let mut out = RgbImage::filled(w, h, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            let sx = ((x as f32 + 0.5 - cx) / zoom + cx - dx - 0.5).clamp(0.0, (w - 1) as f32);
            let sy = ((y as f32 + 0.5 - cy) / zoom + cy - dy - 0.5).clamp(0.0, (h - 1) as f32);
            let (x0, y0) = (sx.floor() as u32, sy.floor() as u32);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f32, sy - y0 as f32);
            let (a, b, c, d) = (img.get(x0, y0), img.get(x1, y0), img.get(x0, y1), img.get(x1, y1));
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let top = a[ch] as f32 * (1.0 - fx) + b[ch] as f32 * fx;
                let bottom = c[ch] as f32 * (1.0 - fx) + d[ch] as f32 * fx;
                px[ch] = (top * (1.0 - fy) + bottom * fy + brightness).round().clamp(0.0, 255.0) as u8;
            }
            out.set(x, y, px);
        }
    }
    out
}

fn augment_chip(img: &RgbImage, aug: &Augment, rng: &mut impl Rng) -> RgbImage {
    let side = img.width() as f32;
    let mut sym = |amp: f32| if amp > 0.0 { rng.random_range(-amp..amp) } else { 0.0 };
    let zoom = 1.0 + sym(aug.scale);
    let (dx, dy) = (sym(aug.shift) * side, sym(aug.shift) * side);
    perturb_chip(img, zoom, dx, dy, sym(aug.brightness))
}

/// Loads every `*.ppm` chip in `dir` in file-name order; a missing
/// directory is an empty cohort.
pub fn load_cohort(dir: &Path) -> Result<Vec<Arc<FaceChip>>, PipelineError> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().is_some_and(|x| x == "ppm") {
            paths.push(path);
        }
    }
    paths.sort();
    paths.iter().map(|p| load_chip(p).map(Arc::new)).collect()
}

/// Every stored chip of every ready person, plus all within-person pairs and
/// as many seeded cross-person pairs.
///
/// Extra pairs follow. Each augmented copy is paired once with a random chip
/// of its owner and once with a random chip of someone else. Each cohort
/// chip (a face of nobody enrolled) is paired as a negative with two random
/// enrolled chips.
pub fn build_training_sets(
    store: &dyn DocumentStore,
    samples_dir: &Path,
    seed: u64,
    augment: &Augment,
    cohort: &[Arc<FaceChip>],
) -> Result<TrainingSets, PipelineError> {
    let ready: Vec<PersonRecord> =
        list_persons(store)?.into_iter().filter(|p| p.status == PersonStatus::Ready).collect();
    if ready.len() < 2 {
        return Err(PipelineError::NotEnoughPersons(ready.len()));
    }
    let mut by_person: Vec<Vec<Arc<FaceChip>>> = Vec::with_capacity(ready.len());
    let mut labeled = Vec::new();
    let mut aug_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa06_3e47);
    let mut variants: Vec<(Arc<FaceChip>, usize)> = Vec::new();
    for (k, p) in ready.iter().enumerate() {
        let mut chips = Vec::with_capacity(p.sample_count as usize);
        for i in 0..p.sample_count {
            let img = decode_pnm(&fs::read(sample_path(samples_dir, &p.person_id, i))?)?.to_rgb();
            let chip = Arc::new(FaceChip::from_image(&img)?);
            labeled.push((chip.clone(), p.person_id.clone()));
            chips.push(chip);
            for _ in 0..augment.copies {
                variants.push((Arc::new(FaceChip::from_image(&augment_chip(&img, augment, &mut aug_rng))?), k));
            }
        }
        by_person.push(chips);
    }
    let mut pairs = Vec::new();
    for chips in &by_person {
        for i in 0..chips.len() {
            for j in i + 1..chips.len() {
                pairs.push(PairSample { a: chips[i].clone(), b: chips[j].clone(), same: true });
            }
        }
    }
    let positives = pairs.len();
    let owners: Vec<usize> = by_person.iter().enumerate().filter(|(_, c)| !c.is_empty()).map(|(k, _)| k).collect();
    if owners.len() < 2 {
        return Err(PipelineError::NotEnoughPersons(owners.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..positives {
        let a = *owners.choose(&mut rng).unwrap();
        let b = loop {
            let b = *owners.choose(&mut rng).unwrap();
            if b != a {
                break b;
            }
        };
        pairs.push(PairSample {
            a: by_person[a].choose(&mut rng).unwrap().clone(),
            b: by_person[b].choose(&mut rng).unwrap().clone(),
            same: false,
        });
    }
    let mut augmented = Vec::with_capacity(variants.len());
    for (chip, k) in variants {
        let Some(mate) = by_person[k].choose(&mut rng) else { continue };
        let other = loop {
            let o = *owners.choose(&mut rng).unwrap();
            if o != k {
                break o;
            }
        };
        pairs.push(PairSample { a: chip.clone(), b: mate.clone(), same: true });
        pairs.push(PairSample { a: chip.clone(), b: by_person[other].choose(&mut rng).unwrap().clone(), same: false });
        augmented.push((chip, ready[k].person_id.clone()));
    }
    for chip in cohort {
        for _ in 0..2 {
            let k = *owners.choose(&mut rng).unwrap();
            pairs.push(PairSample { a: chip.clone(), b: by_person[k].choose(&mut rng).unwrap().clone(), same: false });
        }
    }
    Ok(TrainingSets { pairs, labeled, augmented })
}

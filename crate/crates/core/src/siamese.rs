//! Face chips, embeddings, L1 pair distance, and shared-weight pair training.

use crate::image::{Image, ImageError, Rect, RgbImage};
use crate::neural::{Gradients, LayerSpec, Network, NeuralError, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

pub const EMBEDDING_DIM: usize = 128;
pub const DEFAULT_CHIP_SIDE: u32 = 160;

#[derive(Debug, Error, PartialEq)]
pub enum SiameseError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("pairs must contain both same and different labels")]
    DegenerateLabels,
    #[error("invalid chip: {0}")]
    InvalidChip(String),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
}

/// Network input: `[3, side, side]`, channels scaled to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceChip {
    tensor: Tensor,
}

impl FaceChip {
    /// Scales each channel byte by `v / 127.5 - 1`.
    pub fn from_image(img: &RgbImage) -> Result<Self, SiameseError> {
        if img.width() != img.height() {
            return Err(SiameseError::InvalidChip(format!("{}x{} is not square", img.width(), img.height())));
        }
        let side = img.width() as usize;
        let plane = side * side;
        let mut data = vec![0.0f32; 3 * plane];
        for (i, px) in img.pixels().chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f32 / 127.5 - 1.0;
            }
        }
        Ok(FaceChip { tensor: Tensor::new(vec![3, side, side], data)? })
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self, SiameseError> {
        match *tensor.shape() {
            [3, h, w] if h == w => {}
            _ => return Err(SiameseError::InvalidChip(format!("shape {:?}", tensor.shape()))),
        }
        if !tensor.data().iter().all(|v| (-1.0..=1.0).contains(v)) {
            return Err(SiameseError::InvalidChip("values outside [-1, 1]".into()));
        }
        Ok(FaceChip { tensor })
    }

    pub fn side(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }
}

/// Squares `face_box` about its center, clamps the square into the image,
/// crops, and resamples to `side x side` color.
pub fn align_face(img: &Image, face_box: Rect, side: u32) -> Result<RgbImage, SiameseError> {
    let (iw, ih) = (img.width(), img.height());
    if !face_box.fits(iw, ih) || face_box.w == 0 || face_box.h == 0 {
        return Err(ImageError::OutOfBounds { rect: face_box, width: iw, height: ih }.into());
    }
    if side == 0 {
        return Err(SiameseError::InvalidChip("side must be positive".into()));
    }
    let sq = face_box.w.max(face_box.h).min(iw).min(ih);
    // Doubled center keeps the arithmetic integral.
    let place = |origin: u32, len: u32, limit: u32| -> u32 {
        let start = (2 * origin as i64 + len as i64 - sq as i64).div_euclid(2);
        start.clamp(0, (limit - sq) as i64) as u32
    };
    let square = Rect::new(place(face_box.x, face_box.w, iw), place(face_box.y, face_box.h, ih), sq, sq);
    Ok(img.crop(square)?.to_rgb().resize_bilinear(side, side))
}

pub fn preprocess(img: &Image, face_box: Rect, side: u32) -> Result<FaceChip, SiameseError> {
    FaceChip::from_image(&align_face(img, face_box, side)?)
}

/// A unit-length 128-d face code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(v: Vec<f32>) -> Result<Self, SiameseError> {
        if v.len() != EMBEDDING_DIM {
            return Err(NeuralError::ShapeMismatch(format!("embedding length {}", v.len())).into());
        }
        let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-5 {
            return Err(NeuralError::ShapeMismatch(format!("embedding norm {norm}")).into());
        }
        Ok(Embedding(v))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.0.clone())
    }
}

/// Checks that `net` is an embedder: ends in `dense(128) -> l2_normalize`.
pub fn check_embedder(net: &Network) -> Result<(), SiameseError> {
    match net.spec() {
        [.., LayerSpec::Dense { out_features: EMBEDDING_DIM }, LayerSpec::L2Normalize] => Ok(()),
        _ => Err(NeuralError::ShapeMismatch("embedder must end in dense(128) -> l2_normalize".into()).into()),
    }
}

pub fn embed(net: &Network, chip: &FaceChip) -> Result<Embedding, SiameseError> {
    check_embedder(net)?;
    Embedding::new(net.predict(&chip.tensor)?.into_data())
}

/// Sum of absolute coordinate differences.
pub fn pair_distance(a: &Embedding, b: &Embedding) -> f64 {
    l1(&a.0, &b.0)
}

fn l1(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Same,
    Different,
}

pub fn verify(a: &Embedding, b: &Embedding, tau: f64) -> Verdict {
    if pair_distance(a, b) < tau {
        Verdict::Same
    } else {
        Verdict::Different
    }
}

/// `label*d + (1-label)*max(0, m-d)` and its derivative in `d`.
pub fn contrastive_loss(d: f64, same: bool, margin: f64) -> (f64, f64) {
    if same {
        (d, 1.0)
    } else if d < margin {
        (margin - d, -1.0)
    } else {
        (0.0, 0.0)
    }
}

#[derive(Debug, Clone)]
pub struct PairSample {
    pub a: Arc<FaceChip>,
    pub b: Arc<FaceChip>,
    pub same: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SiameseHyper {
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    pub margin: f64,
    pub seed: u64,
}

impl Default for SiameseHyper {
    fn default() -> Self {
        SiameseHyper { epochs: 30, lr: 0.05, batch: 16, margin: 1.0, seed: 1 }
    }
}

/// conv(8,3,s2,p1) relu pool2 conv(16,3,s2,p1) relu pool2 conv(32,3,s2,p1)
/// relu flatten dense(128) l2.
pub fn default_embedder_spec() -> Vec<LayerSpec> {
    let conv = |out_channels| LayerSpec::Conv2d { out_channels, kernel: 3, stride: 2, padding: 1 };
    let pool = LayerSpec::MaxPool2d { window: 2, stride: 2 };
    vec![
        conv(8),
        LayerSpec::Relu,
        pool,
        conv(16),
        LayerSpec::Relu,
        pool,
        conv(32),
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::Dense { out_features: EMBEDDING_DIM },
        LayerSpec::L2Normalize,
    ]
}

/// Gradients of the contrastive loss for one pair, through both branches of
/// the single shared network. Returns the pair's loss too.
pub fn pair_gradients(net: &Network, pair: &PairSample, margin: f64) -> Result<(Gradients, f64), SiameseError> {
    let (ya, cache_a) = net.forward(pair.a.tensor())?;
    let (yb, cache_b) = net.forward(pair.b.tensor())?;
    let d = l1(ya.data(), yb.data());
    let (loss, dl_dd) = contrastive_loss(d, pair.same, margin);
    let ga: Vec<f32> = ya
        .data()
        .iter()
        .zip(yb.data())
        .map(|(a, b)| {
            let s = if a > b {
                1.0
            } else if a < b {
                -1.0
            } else {
                0.0
            };
            s * dl_dd as f32
        })
        .collect();
    let gb: Vec<f32> = ga.iter().map(|v| -v).collect();
    let shape = ya.shape().to_vec();
    let (mut grads, _) = net.backward(&cache_a, &Tensor::new(shape.clone(), ga)?)?;
    let (grads_b, _) = net.backward(&cache_b, &Tensor::new(shape, gb)?)?;
    grads.accumulate(&grads_b);
    Ok((grads, loss))
}

/// Mini-batch SGD on the mean pair loss. Batch order comes from a ChaCha
/// stream seeded with `hyper.seed`, which also seeds the weights.
pub fn train_siamese(
    dataset: &[PairSample],
    spec: &[LayerSpec],
    hyper: &SiameseHyper,
) -> Result<Network, SiameseError> {
    train_siamese_with(dataset, spec, hyper, |_, _| {})
}

/// [`train_siamese`] with a callback receiving `(epoch, mean loss)`.
pub fn train_siamese_with(
    dataset: &[PairSample],
    spec: &[LayerSpec],
    hyper: &SiameseHyper,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Network, SiameseError> {
    if !dataset.iter().any(|p| p.same) || !dataset.iter().any(|p| !p.same) {
        return Err(SiameseError::DegenerateLabels);
    }
    if hyper.batch == 0 || !hyper.lr.is_finite() || hyper.lr < 0.0 || !(hyper.margin > 0.0) {
        return Err(SiameseError::InvalidHyper(format!("{hyper:?}")));
    }
    let side = dataset[0].a.side();
    if dataset.iter().any(|p| p.a.side() != side || p.b.side() != side) {
        return Err(SiameseError::InvalidChip("chips of mixed sizes".into()));
    }
    let mut net = Network::init(spec, &[3, side, side], hyper.seed)?;
    check_embedder(&net)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(hyper.batch) {
            let mut acc = Gradients::zeros_like(&net);
            for &i in batch {
                let (g, loss) = pair_gradients(&net, &dataset[i], hyper.margin)?;
                acc.accumulate(&g);
                total += loss;
            }
            acc.scale(1.0 / batch.len() as f32);
            net.sgd_step(&acc, hyper.lr)?;
        }
        on_epoch(epoch, total / dataset.len() as f64);
    }
    Ok(net)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauCalibration {
    pub tau: f64,
    pub error_rate: f64,
}

/// Picks the cut among midpoints of consecutive distinct distances (plus one
/// cut below and one above all of them) that minimizes misclassification
/// under `same iff d < tau`. Ties go to the smaller tau.
pub fn calibrate_tau_from_distances(scored: &[(f64, bool)]) -> Result<TauCalibration, SiameseError> {
    let n_same = scored.iter().filter(|s| s.1).count();
    if n_same == 0 || n_same == scored.len() {
        return Err(SiameseError::DegenerateLabels);
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let lo = sorted[0].0;
    let hi = sorted[sorted.len() - 1].0;

    // tau below every distance: everything is "different".
    let mut best_tau = if lo > 0.0 { lo / 2.0 } else { f64::MIN_POSITIVE };
    let mut errors = if lo > 0.0 { n_same } else { usize::MAX };
    let mut misplaced = n_same as i64;
    let mut i = 0;
    while i < sorted.len() {
        let d = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == d {
            misplaced += if sorted[i].1 { -1 } else { 1 };
            i += 1;
        }
        let cut = if i < sorted.len() { d + (sorted[i].0 - d) / 2.0 } else { hi + 1.0 };
        if (misplaced as usize) < errors {
            errors = misplaced as usize;
            best_tau = cut;
        }
    }
    Ok(TauCalibration { tau: best_tau, error_rate: errors as f64 / scored.len() as f64 })
}

pub fn calibrate_tau(net: &Network, pairs: &[PairSample]) -> Result<TauCalibration, SiameseError> {
    let mut scored = Vec::with_capacity(pairs.len());
    for p in pairs {
        scored.push((pair_distance(&embed(net, &p.a)?, &embed(net, &p.b)?), p.same));
    }
    calibrate_tau_from_distances(&scored)
}

//! Softmax identity head over embeddings, with max-probability rejection.

use crate::neural::{Gradients, LayerSpec, Network, NeuralError, Tensor};
use crate::siamese::{Embedding, EMBEDDING_DIM};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_THETA: f64 = 0.6;
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum ClassifierError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("need at least two classes, got {0}")]
    DegenerateLabels(usize),
    #[error("{embeddings} embeddings but {labels} labels")]
    LengthMismatch { embeddings: usize, labels: usize },
    #[error("invalid head: {0}")]
    Invalid(String),
}

/// `exp(x - max) / sum(exp(x - max))`, evaluated in double precision.
pub fn softmax(logits: &[f32]) -> Result<Vec<f64>, NeuralError> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NeuralError::NonFiniteValue("logits"));
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Mean-free cross-entropy of one sample: loss and d(loss)/d(logits).
pub fn cross_entropy(logits: &[f32], target: usize) -> Result<(f64, Vec<f32>), NeuralError> {
    let p = softmax(logits)?;
    let loss = -p[target].max(f64::MIN_POSITIVE).ln();
    let grad = p.iter().enumerate().map(|(i, &pi)| (pi - if i == target { 1.0 } else { 0.0 }) as f32).collect();
    Ok((loss, grad))
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadHyper {
    pub epochs: usize,
    pub lr: f32,
    pub hidden: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for HeadHyper {
    fn default() -> Self {
        HeadHyper { epochs: 200, lr: 0.1, hidden: DEFAULT_HIDDEN, batch: 16, seed: 1 }
    }
}

pub fn head_spec(hidden: usize, classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Dense { out_features: hidden },
        LayerSpec::Relu,
        LayerSpec::Dense { out_features: classes },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    /// `None` when the top probability is below the rejection threshold.
    pub top_id: Option<String>,
    pub top_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    net: Network,
    class_ids: Vec<String>,
    theta: f64,
}

impl ClassifierHead {
    pub fn new(net: Network, class_ids: Vec<String>, theta: f64) -> Result<Self, ClassifierError> {
        if class_ids.is_empty() {
            return Err(ClassifierError::Invalid("no classes".into()));
        }
        if class_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ClassifierError::Invalid("class ids must be unique and sorted".into()));
        }
        if !(theta > 0.0 && theta < 1.0) {
            return Err(ClassifierError::Invalid(format!("theta {theta} outside (0, 1)")));
        }
        match (net.input_shape(), net.output_shape().as_slice()) {
            ([EMBEDDING_DIM], &[p]) if p == class_ids.len() => {}
            (input, output) => {
                return Err(ClassifierError::Invalid(format!(
                    "network maps {input:?} -> {output:?} but {} classes are named",
                    class_ids.len()
                )))
            }
        }
        Ok(ClassifierHead { net, class_ids, theta })
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn class_ids(&self) -> &[String] {
        &self.class_ids
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn with_theta(mut self, theta: f64) -> Result<Self, ClassifierError> {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(ClassifierError::Invalid(format!("theta {theta} outside (0, 1)")));
        }
        self.theta = theta;
        Ok(self)
    }

    pub fn logits(&self, e: &Embedding) -> Result<Vec<f32>, ClassifierError> {
        Ok(self.net.predict(&e.to_tensor())?.into_data())
    }

    pub fn predict(&self, e: &Embedding) -> Result<Prediction, ClassifierError> {
        let probs = softmax(&self.logits(e)?)?;
        let top = argmax(&probs);
        let top_prob = probs[top];
        let top_id = (top_prob >= self.theta).then(|| self.class_ids[top].clone());
        Ok(Prediction { probs, top_id, top_prob })
    }
}

/// Mini-batch SGD on mean cross-entropy. Classes are the distinct labels in
/// lexicographic order.
pub fn train_head(
    embeddings: &[Embedding],
    labels: &[String],
    hyper: &HeadHyper,
    theta: f64,
) -> Result<ClassifierHead, ClassifierError> {
    if embeddings.len() != labels.len() {
        return Err(ClassifierError::LengthMismatch { embeddings: embeddings.len(), labels: labels.len() });
    }
    let mut class_ids: Vec<String> = labels.to_vec();
    class_ids.sort();
    class_ids.dedup();
    if class_ids.len() < 2 {
        return Err(ClassifierError::DegenerateLabels(class_ids.len()));
    }
    if hyper.batch == 0 || hyper.hidden == 0 {
        return Err(ClassifierError::Invalid(format!("{hyper:?}")));
    }
    let targets: Vec<usize> = labels.iter().map(|l| class_ids.binary_search(l).unwrap()).collect();
    let mut net = Network::init(&head_spec(hyper.hidden, class_ids.len()), &[EMBEDDING_DIM], hyper.seed)?;
    let inputs: Vec<Tensor> = embeddings.iter().map(Embedding::to_tensor).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch) {
            let mut acc = Gradients::zeros_like(&net);
            for &i in batch {
                let (logits, cache) = net.forward(&inputs[i])?;
                let (_, g) = cross_entropy(logits.data(), targets[i])?;
                let (grads, _) = net.backward(&cache, &Tensor::from_vec(g))?;
                acc.accumulate(&grads);
            }
            acc.scale(1.0 / batch.len() as f32);
            net.sgd_step(&acc, hyper.lr)?;
        }
    }
    ClassifierHead::new(net, class_ids, theta)
}

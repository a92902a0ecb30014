//! Decision stumps and discrete AdaBoost over Haar features.

use super::{
    feature_value_unchecked, window_stddev_unchecked, CascadeStage, HaarCascade, HaarError,
    HaarFeature, WeakClassifier,
};
use crate::image::{IntegralImage, Rect};

/// Threshold sentinel standing in for an infinite cut.
const SENTINEL: f64 = f64::MAX;
const EPS_CLAMP: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stump {
    pub threshold: f64,
    pub polarity: i8,
    pub weighted_error: f64,
}

impl Stump {
    /// Predicts the positive class when `polarity * response < polarity * threshold`.
    pub fn fires(&self, response: f64) -> bool {
        let p = self.polarity as f64;
        p * response < p * self.threshold
    }
}

fn check_labels(labels: &[i8]) -> Result<(), HaarError> {
    if let Some(bad) = labels.iter().find(|&&l| l != 1 && l != -1) {
        return Err(HaarError::InvalidSamples(format!("label {bad} is not +1 or -1")));
    }
    let has_pos = labels.contains(&1);
    let has_neg = labels.contains(&-1);
    if has_pos && has_neg {
        Ok(())
    } else {
        Err(HaarError::DegenerateLabels)
    }
}

/// Exhaustive weighted stump search.
///
/// Candidate thresholds are the midpoints between consecutive distinct
/// responses plus the two sentinels `-f64::MAX` and `f64::MAX`. Ties go to
/// the smaller threshold, then to polarity +1.
pub fn train_stump(responses: &[f64], labels: &[i8], weights: &[f64]) -> Result<Stump, HaarError> {
    if responses.len() != labels.len() || responses.len() != weights.len() {
        return Err(HaarError::InvalidSamples("responses, labels and weights differ in length".into()));
    }
    if responses.len() < 2 {
        return Err(HaarError::InvalidSamples("need at least two samples".into()));
    }
    if responses.iter().any(|r| !r.is_finite()) {
        return Err(HaarError::InvalidSamples("non-finite response".into()));
    }
    check_labels(labels)?;
    let order = sorted_order(responses);
    Ok(best_stump_sorted(responses, &order, labels, weights))
}

fn sorted_order(responses: &[f64]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..responses.len() as u32).collect();
    order.sort_by(|&a, &b| responses[a as usize].total_cmp(&responses[b as usize]));
    order
}

fn best_stump_sorted(responses: &[f64], order: &[u32], labels: &[i8], weights: &[f64]) -> Stump {
    // totals accumulated in the same order as the scan so the final candidate
    // sees exactly the same sums
    let (mut pos_total, mut neg_total) = (0.0, 0.0);
    for &i in order {
        let i = i as usize;
        if labels[i] > 0 {
            pos_total += weights[i];
        } else {
            neg_total += weights[i];
        }
    }

    let mut best = Stump { threshold: -SENTINEL, polarity: 1, weighted_error: f64::INFINITY };
    let mut consider = |threshold: f64, pos_below: f64, neg_below: f64| {
        let err_plus = neg_below + (pos_total - pos_below);
        if err_plus < best.weighted_error {
            best = Stump { threshold, polarity: 1, weighted_error: err_plus };
        }
        let err_minus = (neg_total - neg_below) + pos_below;
        if err_minus < best.weighted_error {
            best = Stump { threshold, polarity: -1, weighted_error: err_minus };
        }
    };

    consider(-SENTINEL, 0.0, 0.0);
    let (mut pos_below, mut neg_below) = (0.0, 0.0);
    let n = order.len();
    let mut k = 0;
    while k < n {
        let v = responses[order[k] as usize];
        while k < n && responses[order[k] as usize] == v {
            let i = order[k] as usize;
            if labels[i] > 0 {
                pos_below += weights[i];
            } else {
                neg_below += weights[i];
            }
            k += 1;
        }
        if k < n {
            let next = responses[order[k] as usize];
            consider(v * 0.5 + next * 0.5, pos_below, neg_below);
        }
    }
    consider(SENTINEL, pos_below, neg_below);
    best
}

/// Two-rectangle horizontal and vertical features and three-rectangle
/// horizontal features, positions and sizes on a 2 px grid, truncated at
/// `cap` features.
pub fn feature_bank(base_w: u32, base_h: u32, cap: usize) -> Vec<HaarFeature> {
    let mut bank = Vec::new();
    let steps = |limit: u32| (2..=limit).step_by(2);
    let positions = |extent: u32, limit: u32| (0..=limit.saturating_sub(extent)).step_by(2);

    for half_w in steps(base_w / 2) {
        for h in steps(base_h) {
            for y in positions(h, base_h) {
                for x in positions(2 * half_w, base_w) {
                    bank.push(HaarFeature::two_horizontal(x, y, half_w, h));
                }
            }
        }
    }
    for w in steps(base_w) {
        for half_h in steps(base_h / 2) {
            for y in positions(2 * half_h, base_h) {
                for x in positions(w, base_w) {
                    bank.push(HaarFeature::two_vertical(x, y, w, half_h));
                }
            }
        }
    }
    for third_w in steps(base_w / 3) {
        for h in steps(base_h) {
            for y in positions(h, base_h) {
                for x in positions(3 * third_w, base_w) {
                    bank.push(HaarFeature::three_horizontal(x, y, third_w, h));
                }
            }
        }
    }
    bank.truncate(cap);
    bank
}

struct ResponseTable {
    // responses[f * n + i]: variance-normalized response of feature f on sample i
    responses: Vec<f64>,
    order: Vec<u32>,
    n: usize,
}

impl ResponseTable {
    fn build(samples: &[(IntegralImage, i8)], bank: &[HaarFeature], base: (u32, u32)) -> Self {
        let n = samples.len();
        let window = Rect::new(0, 0, base.0, base.1);
        let stddevs: Vec<f64> = samples.iter().map(|(ii, _)| window_stddev_unchecked(ii, window)).collect();
        let mut responses = Vec::with_capacity(bank.len() * n);
        let mut order = Vec::with_capacity(bank.len() * n);
        for f in bank {
            let start = responses.len();
            for ((ii, _), sd) in samples.iter().zip(&stddevs) {
                responses.push(feature_value_unchecked(ii, f, window, base.0, base.1) / sd);
            }
            order.extend(sorted_order(&responses[start..]));
        }
        ResponseTable { responses, order, n }
    }

    fn feature(&self, f: usize) -> (&[f64], &[u32]) {
        let range = f * self.n..(f + 1) * self.n;
        (&self.responses[range.clone()], &self.order[range])
    }
}

fn check_samples(samples: &[(IntegralImage, i8)]) -> Result<(u32, u32), HaarError> {
    let first = samples.first().ok_or(HaarError::DegenerateLabels)?;
    let base = (first.0.width(), first.0.height());
    if samples.iter().any(|(ii, _)| (ii.width(), ii.height()) != base) {
        return Err(HaarError::InvalidSamples("training windows differ in size".into()));
    }
    let labels: Vec<i8> = samples.iter().map(|s| s.1).collect();
    check_labels(&labels)?;
    Ok(base)
}

/// Incremental discrete AdaBoost over a fixed feature bank.
///
/// Responses of every bank feature on every sample are computed once and
/// presorted, so each round is a linear scan per feature.
pub struct AdaBoost<'a> {
    samples: &'a [(IntegralImage, i8)],
    bank: &'a [HaarFeature],
    base: (u32, u32),
    labels: Vec<i8>,
    table: ResponseTable,
    weights: Vec<f64>,
    weak: Vec<WeakClassifier>,
}

impl<'a> AdaBoost<'a> {
    pub fn new(samples: &'a [(IntegralImage, i8)], bank: &'a [HaarFeature]) -> Result<Self, HaarError> {
        if bank.is_empty() {
            return Err(HaarError::EmptyFeatureBank);
        }
        let base = check_samples(samples)?;
        if let Some(f) = bank.iter().find(|f| !f.fits(base.0, base.1)) {
            return Err(HaarError::InvariantViolation(format!("feature {f:?} exceeds the training window")));
        }
        let n = samples.len();
        Ok(AdaBoost {
            samples,
            bank,
            base,
            labels: samples.iter().map(|s| s.1).collect(),
            table: ResponseTable::build(samples, bank, base),
            weights: vec![1.0 / n as f64; n],
            weak: Vec::new(),
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Adds the weak classifier with the lowest weighted error, then
    /// reweights and renormalizes the samples.
    pub fn round(&mut self) -> &WeakClassifier {
        let mut best: Option<(usize, Stump)> = None;
        for f in 0..self.bank.len() {
            let (responses, order) = self.table.feature(f);
            let stump = best_stump_sorted(responses, order, &self.labels, &self.weights);
            if best.is_none_or(|(_, b)| stump.weighted_error < b.weighted_error) {
                best = Some((f, stump));
            }
        }
        let (f, stump) = best.expect("feature bank is nonempty");
        let eps = stump.weighted_error.clamp(EPS_CLAMP, 1.0 - EPS_CLAMP);
        let alpha = 0.5 * ((1.0 - eps) / eps).ln();

        let (responses, _) = self.table.feature(f);
        for (i, w) in self.weights.iter_mut().enumerate() {
            let h = if stump.fires(responses[i]) { 1.0 } else { -1.0 };
            *w *= (-alpha * self.labels[i] as f64 * h).exp();
        }
        let total: f64 = self.weights.iter().sum();
        self.weights.iter_mut().for_each(|w| *w /= total);

        self.weak.push(WeakClassifier {
            feature: self.bank[f].clone(),
            threshold: stump.threshold,
            polarity: stump.polarity,
            alpha,
        });
        self.weak.last().unwrap()
    }

    /// Closes the stage. The threshold is the smallest stage response over
    /// the positives, so every training positive passes.
    pub fn finish(self) -> CascadeStage {
        let mut stage = CascadeStage { weak: self.weak, threshold: 0.0 };
        let base = self.base;
        let window = Rect::new(0, 0, base.0, base.1);
        // measured with the detection-time evaluation so positives pass bit-exactly
        stage.threshold = self
            .samples
            .iter()
            .filter(|s| s.1 > 0)
            .map(|(ii, _)| stage.response(ii, window, window_stddev_unchecked(ii, window), base))
            .fold(f64::INFINITY, f64::min);
        stage
    }
}

/// Trains one boosted stage with `rounds` rounds of discrete AdaBoost.
///
/// Samples are integral images of base-window crops, all the same size.
pub fn adaboost_train(
    samples: &[(IntegralImage, i8)],
    feature_bank: &[HaarFeature],
    rounds: usize,
) -> Result<CascadeStage, HaarError> {
    if rounds == 0 {
        return Err(HaarError::InvalidSamples("at least one boosting round is required".into()));
    }
    let mut boost = AdaBoost::new(samples, feature_bank)?;
    for _ in 0..rounds {
        boost.round();
    }
    Ok(boost.finish())
}

/// Trains successive stages, each on the positives plus the negatives that
/// survived all earlier stages. Stops early once no negatives survive.
pub fn train_cascade(
    positives: &[IntegralImage],
    negatives: &[IntegralImage],
    feature_bank: &[HaarFeature],
    stage_rounds: &[usize],
) -> Result<HaarCascade, HaarError> {
    let first = positives.first().ok_or(HaarError::DegenerateLabels)?;
    let base = (first.width(), first.height());
    let window = Rect::new(0, 0, base.0, base.1);
    let mut surviving: Vec<&IntegralImage> = negatives.iter().collect();
    let mut stages: Vec<CascadeStage> = Vec::new();
    for &rounds in stage_rounds {
        if surviving.is_empty() && !stages.is_empty() {
            break;
        }
        let samples: Vec<(IntegralImage, i8)> = positives
            .iter()
            .map(|p| (p.clone(), 1))
            .chain(surviving.iter().map(|&n| (n.clone(), -1)))
            .collect();
        let stage = adaboost_train(&samples, feature_bank, rounds)?;
        surviving.retain(|ii| {
            let sd = window_stddev_unchecked(ii, window);
            stage.response(ii, window, sd, base) >= stage.threshold
        });
        stages.push(stage);
    }
    HaarCascade::new(base.0, base.1, stages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::haar::eval_cascade;
    use crate::image::{integral, GrayImage};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separable_pair() {
        let s = train_stump(&[0.0, 1.0], &[-1, 1], &[0.5, 0.5]).unwrap();
        assert_eq!(s.weighted_error, 0.0);
        assert!(s.fires(1.0) && !s.fires(0.0));
    }

    #[test]
    fn no_split_available() {
        let s = train_stump(&[2.0; 4], &[1, -1, -1, -1], &[0.25; 4]).unwrap();
        assert_eq!(s.weighted_error, 0.25);
        // W+ is reached first at the -inf sentinel with polarity +1
        assert_eq!((s.threshold, s.polarity), (-f64::MAX, 1));
    }

    #[test]
    fn degenerate_labels() {
        assert_eq!(train_stump(&[0.0, 1.0], &[1, 1], &[0.5, 0.5]), Err(HaarError::DegenerateLabels));
    }

    // O(n^2) oracle: every candidate threshold scored by direct summation.
    fn brute_stump(responses: &[f64], labels: &[i8], weights: &[f64]) -> Stump {
        let mut distinct: Vec<f64> = responses.to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let mut candidates = vec![-f64::MAX];
        candidates.extend(distinct.windows(2).map(|p| p[0] * 0.5 + p[1] * 0.5));
        candidates.push(f64::MAX);
        let mut best = Stump { threshold: 0.0, polarity: 1, weighted_error: f64::INFINITY };
        for &t in &candidates {
            for pol in [1i8, -1] {
                let cand = Stump { threshold: t, polarity: pol, weighted_error: 0.0 };
                let err: f64 = (0..responses.len())
                    .filter(|&i| cand.fires(responses[i]) != (labels[i] > 0))
                    .map(|i| weights[i])
                    .sum();
                if err < best.weighted_error {
                    best = Stump { weighted_error: err, ..cand };
                }
            }
        }
        best
    }

    #[test]
    fn matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = 50;
            // dyadic weights summing to exactly 1 keep every partial sum exact
            let counts: Vec<u64> = (0..n).map(|_| rng.random_range(1..1000)).collect();
            let total: u64 = counts.iter().sum();
            let scale = 1u64 << 20;
            let mut scaled: Vec<u64> = counts.iter().map(|c| c * scale / total).collect();
            let deficit = scale - scaled.iter().sum::<u64>();
            scaled[0] += deficit;
            let weights: Vec<f64> = scaled.iter().map(|&c| c as f64 / scale as f64).collect();
            let responses: Vec<f64> = (0..n).map(|_| rng.random_range(0..20) as f64 * 0.25).collect();
            let mut labels: Vec<i8> = (0..n).map(|_| if rng.random_bool(0.4) { 1 } else { -1 }).collect();
            labels[0] = 1;
            labels[1] = -1;
            assert_eq!(train_stump(&responses, &labels, &weights).unwrap(), brute_stump(&responses, &labels, &weights));
        }
    }

    #[test]
    fn bank_size_and_validity() {
        let bank = feature_bank(24, 24, 20_000);
        assert_eq!(bank.len(), 2808 + 2808 + 1716);
        assert!(bank.iter().all(|f| f.fits(24, 24) && HaarFeature::new(f.rects().to_vec()).is_ok()));
        assert_eq!(feature_bank(24, 24, 100).len(), 100);
    }

    fn toy_set() -> Vec<(IntegralImage, i8)> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut samples = Vec::new();
        for _ in 0..20 {
            let lo = rng.random_range(0..60u8);
            let hi = rng.random_range(180..=255u8);
            let pos = GrayImage::from_fn(12, 12, |x, _| if x < 6 { lo } else { hi });
            samples.push((integral(&pos), 1));
            let flat = GrayImage::filled(12, 12, rng.random_range(0..=255u8));
            samples.push((integral(&flat), -1));
        }
        samples
    }

    fn stage_error(stage: &CascadeStage, samples: &[(IntegralImage, i8)]) -> f64 {
        let cascade = HaarCascade::new(12, 12, vec![stage.clone()]).unwrap();
        let wrong = samples
            .iter()
            .filter(|(ii, y)| eval_cascade(ii, &cascade, Rect::new(0, 0, 12, 12)).unwrap().0 != (*y > 0))
            .count();
        wrong as f64 / samples.len() as f64
    }

    #[test]
    fn separable_toy_training() {
        let samples = toy_set();
        let bank = feature_bank(12, 12, 20_000);
        let one = adaboost_train(&samples, &bank, 1).unwrap();
        assert_eq!(stage_error(&one, &samples), 0.0);

        let mut last = f64::INFINITY;
        for t in 1..=4 {
            let stage = adaboost_train(&samples, &bank, t).unwrap();
            let cascade = HaarCascade::new(12, 12, vec![stage.clone()]).unwrap();
            for (ii, y) in &samples {
                if *y > 0 {
                    assert!(eval_cascade(ii, &cascade, Rect::new(0, 0, 12, 12)).unwrap().0);
                }
            }
            let err = stage_error(&stage, &samples);
            assert!(err <= last);
            last = err;
        }
    }

    #[test]
    fn weights_stay_normalized() {
        let samples = toy_set();
        let bank = feature_bank(12, 12, 20_000);
        let mut boost = AdaBoost::new(&samples, &bank).unwrap();
        boost.round();
        assert!((boost.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        boost.round();
        assert!((boost.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adaboost_errors() {
        let samples = toy_set();
        assert_eq!(adaboost_train(&samples, &[], 3), Err(HaarError::EmptyFeatureBank));
        let positives: Vec<_> = samples.iter().filter(|s| s.1 > 0).cloned().collect();
        let bank = feature_bank(12, 12, 50);
        assert_eq!(adaboost_train(&positives, &bank, 3), Err(HaarError::DegenerateLabels));
    }

    #[test]
    fn cascade_training_passes_all_positives() {
        let samples = toy_set();
        let pos: Vec<_> = samples.iter().filter(|s| s.1 > 0).map(|s| s.0.clone()).collect();
        let neg: Vec<_> = samples.iter().filter(|s| s.1 < 0).map(|s| s.0.clone()).collect();
        let bank = feature_bank(12, 12, 20_000);
        let cascade = train_cascade(&pos, &neg, &bank, &[2, 3]).unwrap();
        assert!(!cascade.stages().is_empty());
        for ii in &pos {
            assert!(eval_cascade(ii, &cascade, Rect::new(0, 0, 12, 12)).unwrap().0);
        }
    }
}

//! Haar-like features, boosted cascades and multi-scale sliding-window
//! detection.

mod format;
mod nms;
mod train;

pub use format::{load_cascade, save_cascade};
pub use nms::nms;
pub use train::{adaboost_train, feature_bank, train_cascade, train_stump, AdaBoost, Stump};

use crate::image::{GrayImage, ImageError, IntegralImage, Rect};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Canonical detection window side.
pub const DEFAULT_BASE: u32 = 24;

#[derive(Debug, Error, PartialEq)]
pub enum HaarError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("image {width}x{height} smaller than the {base_w}x{base_h} detection window")]
    ImageTooSmall { width: u32, height: u32, base_w: u32, base_h: u32 },
    #[error("training labels contain a single class")]
    DegenerateLabels,
    #[error("feature bank is empty")]
    EmptyFeatureBank,
    #[error("invalid training samples: {0}")]
    InvalidSamples(String),
    #[error("cascade parse error: {0}")]
    Parse(String),
    #[error("cascade invariant violated: {0}")]
    InvariantViolation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedRect {
    pub rect: Rect,
    pub weight: f64,
}

/// Weighted sum of two or three rectangles inside the base window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaarFeature {
    rects: Vec<WeightedRect>,
}

impl HaarFeature {
    pub fn new(rects: Vec<WeightedRect>) -> Result<Self, HaarError> {
        if !(2..=3).contains(&rects.len()) {
            return Err(HaarError::InvariantViolation(format!(
                "feature has {} rectangles, expected 2 or 3",
                rects.len()
            )));
        }
        let mut balance = 0.0;
        for r in &rects {
            if r.rect.w == 0 || r.rect.h == 0 {
                return Err(HaarError::InvariantViolation("empty feature rectangle".into()));
            }
            if !r.weight.is_finite() {
                return Err(HaarError::InvariantViolation("non-finite feature weight".into()));
            }
            balance += r.weight * r.rect.area() as f64;
        }
        if balance.abs() > 1e-9 {
            return Err(HaarError::InvariantViolation(format!(
                "feature weights do not cancel on flat input (sum {balance})"
            )));
        }
        Ok(HaarFeature { rects })
    }

    /// Left half weighted -1, right half +1.
    pub fn two_horizontal(x: u32, y: u32, half_w: u32, h: u32) -> Self {
        HaarFeature {
            rects: vec![
                WeightedRect { rect: Rect::new(x, y, half_w, h), weight: -1.0 },
                WeightedRect { rect: Rect::new(x + half_w, y, half_w, h), weight: 1.0 },
            ],
        }
    }

    /// Top half weighted -1, bottom half +1.
    pub fn two_vertical(x: u32, y: u32, w: u32, half_h: u32) -> Self {
        HaarFeature {
            rects: vec![
                WeightedRect { rect: Rect::new(x, y, w, half_h), weight: -1.0 },
                WeightedRect { rect: Rect::new(x, y + half_h, w, half_h), weight: 1.0 },
            ],
        }
    }

    /// Outer thirds weighted -1, center third +2.
    pub fn three_horizontal(x: u32, y: u32, third_w: u32, h: u32) -> Self {
        HaarFeature {
            rects: vec![
                WeightedRect { rect: Rect::new(x, y, third_w, h), weight: -1.0 },
                WeightedRect { rect: Rect::new(x + third_w, y, third_w, h), weight: 2.0 },
                WeightedRect { rect: Rect::new(x + 2 * third_w, y, third_w, h), weight: -1.0 },
            ],
        }
    }

    pub fn rects(&self) -> &[WeightedRect] {
        &self.rects
    }

    pub fn fits(&self, base_w: u32, base_h: u32) -> bool {
        self.rects.iter().all(|r| r.rect.fits(base_w, base_h))
    }
}

/// Maps a feature rectangle from base-window coordinates into `window`.
///
/// Edges are scaled independently and rounded to the nearest pixel, then
/// clamped inside the window; a rectangle never collapses below one pixel.
pub fn scale_rect(r: Rect, window: Rect, base_w: u32, base_h: u32) -> Rect {
    let sx = window.w as f64 / base_w as f64;
    let sy = window.h as f64 / base_h as f64;
    let (x0, x1) = scale_span(r.x, r.w, sx, window.w);
    let (y0, y1) = scale_span(r.y, r.h, sy, window.h);
    Rect::new(window.x + x0, window.y + y0, x1 - x0, y1 - y0)
}

fn scale_span(start: u32, len: u32, scale: f64, limit: u32) -> (u32, u32) {
    let mut lo = ((start as f64 * scale).round() as u32).min(limit - 1);
    let mut hi = (((start + len) as f64 * scale).round() as u32).min(limit);
    if hi <= lo {
        hi = lo + 1;
        if hi > limit {
            lo = limit - 1;
            hi = limit;
        }
    }
    (lo, hi)
}

/// Area-normalized response of `f` over `window`.
///
/// Each rectangle contributes its pixel sum rescaled to the rectangle's
/// nominal base-window area, so zero-sum features give exactly zero on flat
/// input at every scale. At the base scale this is the plain weighted sum
/// divided by the window area.
pub fn feature_value(
    ii: &IntegralImage,
    f: &HaarFeature,
    window: Rect,
    base_w: u32,
    base_h: u32,
) -> Result<f64, HaarError> {
    if !window.fits(ii.width(), ii.height()) {
        return Err(ImageError::OutOfBounds { rect: window, width: ii.width(), height: ii.height() }
            .into());
    }
    Ok(feature_value_unchecked(ii, f, window, base_w, base_h))
}

#[inline]
fn feature_value_unchecked(
    ii: &IntegralImage,
    f: &HaarFeature,
    window: Rect,
    base_w: u32,
    base_h: u32,
) -> f64 {
    let mut acc = 0.0;
    for wr in &f.rects {
        let scaled = scale_rect(wr.rect, window, base_w, base_h);
        let sum = ii.rect_sum_unchecked(scaled, false) as f64;
        acc += wr.weight * (sum * wr.rect.area() as f64 / scaled.area() as f64);
    }
    acc / (base_w as f64 * base_h as f64)
}

/// Pixel standard deviation over the window, floored at 1.
pub fn window_stddev(ii: &IntegralImage, window: Rect) -> Result<f64, HaarError> {
    if !window.fits(ii.width(), ii.height()) {
        return Err(ImageError::OutOfBounds { rect: window, width: ii.width(), height: ii.height() }
            .into());
    }
    Ok(window_stddev_unchecked(ii, window))
}

fn window_stddev_unchecked(ii: &IntegralImage, window: Rect) -> f64 {
    let n = window.area() as u128;
    let s = ii.rect_sum_unchecked(window, false) as u128;
    let sq = ii.rect_sum_unchecked(window, true) as u128;
    // n^2 * variance, exact
    let scaled_var = (n * sq).saturating_sub(s * s);
    let sd = (scaled_var as f64).sqrt() / n as f64;
    if sd < 1.0 {
        1.0
    } else {
        sd
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakClassifier {
    pub feature: HaarFeature,
    pub threshold: f64,
    pub polarity: i8,
    pub alpha: f64,
}

impl WeakClassifier {
    /// Vote fires when `polarity * value < polarity * threshold * stddev`.
    #[inline]
    pub fn fires(&self, value: f64, stddev: f64) -> bool {
        let p = self.polarity as f64;
        p * value < p * self.threshold * stddev
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeStage {
    pub weak: Vec<WeakClassifier>,
    pub threshold: f64,
}

impl CascadeStage {
    fn response(&self, ii: &IntegralImage, window: Rect, stddev: f64, base: (u32, u32)) -> f64 {
        let mut acc = 0.0;
        for w in &self.weak {
            let v = feature_value_unchecked(ii, &w.feature, window, base.0, base.1);
            if w.fires(v, stddev) {
                acc += w.alpha;
            }
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HaarCascade {
    base_w: u32,
    base_h: u32,
    stages: Vec<CascadeStage>,
}

impl HaarCascade {
    pub fn new(base_w: u32, base_h: u32, stages: Vec<CascadeStage>) -> Result<Self, HaarError> {
        if base_w == 0 || base_h == 0 {
            return Err(HaarError::InvariantViolation("base window must be positive".into()));
        }
        if stages.is_empty() {
            return Err(HaarError::InvariantViolation("cascade has no stages".into()));
        }
        for (si, stage) in stages.iter().enumerate() {
            if stage.weak.is_empty() {
                return Err(HaarError::InvariantViolation(format!("stage {si} has no weak classifiers")));
            }
            if stage.threshold.is_nan() {
                return Err(HaarError::InvariantViolation(format!("stage {si} threshold is NaN")));
            }
            for w in &stage.weak {
                if w.polarity != 1 && w.polarity != -1 {
                    return Err(HaarError::InvariantViolation(format!(
                        "polarity {} not in {{-1, +1}}",
                        w.polarity
                    )));
                }
                if !(w.alpha >= 0.0 && w.alpha.is_finite()) {
                    return Err(HaarError::InvariantViolation(format!("vote weight {} invalid", w.alpha)));
                }
                if w.threshold.is_nan() {
                    return Err(HaarError::InvariantViolation("weak threshold is NaN".into()));
                }
                // re-check feature invariants, which may come from untrusted input
                HaarFeature::new(w.feature.rects.clone())?;
                if !w.feature.fits(base_w, base_h) {
                    return Err(HaarError::InvariantViolation(format!(
                        "feature {:?} exceeds the {base_w}x{base_h} base window",
                        w.feature.rects
                    )));
                }
            }
        }
        Ok(HaarCascade { base_w, base_h, stages })
    }

    pub fn base_w(&self) -> u32 {
        self.base_w
    }

    pub fn base_h(&self) -> u32 {
        self.base_h
    }

    pub fn stages(&self) -> &[CascadeStage] {
        &self.stages
    }

    pub fn eval(&self, ii: &IntegralImage, window: Rect) -> Result<(bool, f64), HaarError> {
        eval_cascade(ii, self, window)
    }
}

/// Runs the stages in order with early rejection.
///
/// Returns whether the window was accepted and the margin (response minus
/// threshold) of the last stage evaluated.
pub fn eval_cascade(
    ii: &IntegralImage,
    cascade: &HaarCascade,
    window: Rect,
) -> Result<(bool, f64), HaarError> {
    let stddev = window_stddev(ii, window)?;
    Ok(eval_unchecked(ii, cascade, window, stddev))
}

fn eval_unchecked(ii: &IntegralImage, cascade: &HaarCascade, window: Rect, stddev: f64) -> (bool, f64) {
    let base = (cascade.base_w, cascade.base_h);
    let mut margin = 0.0;
    for stage in &cascade.stages {
        let response = stage.response(ii, window, stddev, base);
        margin = response - stage.threshold;
        if response < stage.threshold {
            return (false, margin);
        }
    }
    (true, margin)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub rect: Rect,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectParams {
    pub scale_factor: f64,
    /// Smallest window side considered; 0 means the cascade base size.
    pub min_size: u32,
    pub step_fraction: f64,
    /// Largest window side considered; 0 means unbounded.
    pub max_size: u32,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams { scale_factor: 1.2, min_size: 0, step_fraction: 0.1, max_size: 0 }
    }
}

/// Window sizes visited by [`detect_multiscale`], smallest first.
pub fn window_sizes(
    width: u32,
    height: u32,
    cascade: &HaarCascade,
    params: &DetectParams,
) -> Vec<(u32, u32)> {
    assert!(params.scale_factor > 1.0, "scale factor must exceed 1");
    let mut sizes: Vec<(u32, u32)> = Vec::new();
    let mut factor = 1.0f64;
    loop {
        let w = (cascade.base_w as f64 * factor).round() as u32;
        let h = (cascade.base_h as f64 * factor).round() as u32;
        if w > width || h > height || (params.max_size > 0 && w.min(h) > params.max_size) {
            break;
        }
        if w.min(h) >= params.min_size && sizes.last() != Some(&(w, h)) {
            sizes.push((w, h));
        }
        factor *= params.scale_factor;
    }
    sizes
}

/// Every window visited by [`detect_multiscale`], in visiting order:
/// scale-major, then row-major.
pub fn sliding_windows(
    width: u32,
    height: u32,
    cascade: &HaarCascade,
    params: &DetectParams,
) -> Vec<Rect> {
    let mut out = Vec::new();
    for (w, h) in window_sizes(width, height, cascade, params) {
        let stride = ((params.step_fraction * w as f64).round() as u32).max(1);
        let mut y = 0;
        while y + h <= height {
            let mut x = 0;
            while x + w <= width {
                out.push(Rect::new(x, y, w, h));
                x += stride;
            }
            y += stride;
        }
    }
    out
}

/// All windows accepted by the cascade, before suppression.
pub fn detect_multiscale(
    img: &GrayImage,
    cascade: &HaarCascade,
    params: &DetectParams,
) -> Result<Vec<Detection>, HaarError> {
    if img.width() < cascade.base_w || img.height() < cascade.base_h {
        return Err(HaarError::ImageTooSmall {
            width: img.width(),
            height: img.height(),
            base_w: cascade.base_w,
            base_h: cascade.base_h,
        });
    }
    let ii = IntegralImage::new(img);
    let dets = sliding_windows(img.width(), img.height(), cascade, params)
        .into_iter()
        .filter_map(|rect| {
            let sd = window_stddev_unchecked(&ii, rect);
            let (accepted, score) = eval_unchecked(&ii, cascade, rect, sd);
            accepted.then_some(Detection { rect, score })
        })
        .collect();
    Ok(dets)
}

/// Detection followed by non-maximum suppression.
pub fn detect_faces(
    img: &GrayImage,
    cascade: &HaarCascade,
    params: &DetectParams,
    iou_threshold: f64,
) -> Result<Vec<Detection>, HaarError> {
    Ok(nms(detect_multiscale(img, cascade, params)?, iou_threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::integral;

    fn always_accept(base: u32) -> HaarCascade {
        let weak = WeakClassifier {
            feature: HaarFeature::two_horizontal(0, 0, base / 2, base),
            threshold: f64::MAX,
            polarity: 1,
            alpha: 1.0,
        };
        HaarCascade::new(base, base, vec![CascadeStage { weak: vec![weak], threshold: 0.0 }]).unwrap()
    }

    fn always_reject(base: u32) -> HaarCascade {
        let mut c = always_accept(base);
        c.stages[0].threshold = f64::MAX;
        c
    }

    #[test]
    fn constant_image_gives_zero_response() {
        let ii = integral(&GrayImage::filled(40, 40, 173));
        let f = HaarFeature::three_horizontal(2, 4, 6, 10);
        for window in [Rect::new(0, 0, 24, 24), Rect::new(3, 5, 31, 29), Rect::new(10, 1, 30, 37)] {
            assert_eq!(feature_value(&ii, &f, window, 24, 24).unwrap(), 0.0);
        }
    }

    #[test]
    fn step_edge_is_positive() {
        let img = GrayImage::from_fn(24, 24, |x, _| if x < 12 { 0 } else { 255 });
        let ii = integral(&img);
        let f = HaarFeature::two_horizontal(0, 0, 12, 24);
        assert!(feature_value(&ii, &f, Rect::new(0, 0, 24, 24), 24, 24).unwrap() > 0.0);
    }

    #[test]
    fn ramp_feature_matches_direct_sum() {
        // pixels[y][x] = x on a 4x4 window, feature {(0,0,2,4,-1),(2,0,2,4,+1)}
        let img = GrayImage::from_fn(4, 4, |x, _| x as u8);
        let ii = integral(&img);
        let f = HaarFeature::two_horizontal(0, 0, 2, 4);
        let column_sum = |x: u32| 4 * x;
        let left = column_sum(0) + column_sum(1);
        let right = column_sum(2) + column_sum(3);
        let expected = (right as f64 - left as f64) / 16.0;
        assert_eq!(feature_value(&ii, &f, Rect::new(0, 0, 4, 4), 4, 4).unwrap(), expected);
        assert_eq!(expected, 1.0);
    }

    #[test]
    fn feature_out_of_bounds() {
        let ii = integral(&GrayImage::filled(10, 10, 0));
        let f = HaarFeature::two_horizontal(0, 0, 2, 4);
        assert!(feature_value(&ii, &f, Rect::new(5, 5, 8, 8), 4, 4).is_err());
    }

    #[test]
    fn stddev_examples() {
        let ii = integral(&GrayImage::filled(8, 8, 77));
        assert_eq!(window_stddev(&ii, Rect::new(0, 0, 8, 8)).unwrap(), 1.0);

        let checker = GrayImage::from_fn(8, 8, |x, y| if (x + y) % 2 == 0 { 0 } else { 255 });
        let ii = integral(&checker);
        assert_eq!(window_stddev(&ii, Rect::new(0, 0, 8, 8)).unwrap(), 127.5);
        assert_eq!(window_stddev(&ii, Rect::new(1, 1, 2, 2)).unwrap(), 127.5);
        assert!(window_stddev(&ii, Rect::new(7, 7, 2, 1)).is_err());
    }

    #[test]
    fn vacuous_cascades() {
        let img = GrayImage::from_fn(30, 30, |x, y| (x * 7 + y * 3) as u8);
        let ii = integral(&img);
        let window = Rect::new(2, 3, 24, 24);
        assert!(always_accept(24).eval(&ii, window).unwrap().0);
        assert!(!always_reject(24).eval(&ii, window).unwrap().0);
    }

    #[test]
    fn single_window_detection() {
        let img = GrayImage::from_fn(24, 24, |x, y| (x ^ y) as u8);
        let dets = detect_multiscale(&img, &always_accept(24), &DetectParams::default()).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].rect, Rect::new(0, 0, 24, 24));
        let dets = detect_multiscale(&img, &always_reject(24), &DetectParams::default()).unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn too_small_image() {
        let img = GrayImage::filled(20, 30, 0);
        assert!(matches!(
            detect_multiscale(&img, &always_accept(24), &DetectParams::default()),
            Err(HaarError::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn window_sizes_respect_bounds() {
        let c = always_accept(24);
        let sizes = window_sizes(64, 50, &c, &DetectParams::default());
        assert_eq!(sizes, vec![(24, 24), (29, 29), (35, 35), (41, 41), (50, 50)]);
        let params = DetectParams { min_size: 30, max_size: 45, ..Default::default() };
        assert_eq!(window_sizes(64, 50, &c, &params), vec![(35, 35), (41, 41)]);
    }

    #[test]
    fn invalid_cascades_rejected() {
        assert!(matches!(HaarCascade::new(24, 24, vec![]), Err(HaarError::InvariantViolation(_))));
        let mut stage = always_accept(24).stages[0].clone();
        stage.weak[0].feature = HaarFeature::two_horizontal(20, 0, 4, 4);
        assert!(HaarCascade::new(24, 24, vec![stage.clone()]).is_err());
        stage.weak[0].feature = HaarFeature::two_horizontal(0, 0, 4, 4);
        stage.weak[0].alpha = -1.0;
        assert!(HaarCascade::new(24, 24, vec![stage]).is_err());
    }

    #[test]
    fn unbalanced_feature_rejected() {
        let rects = vec![
            WeightedRect { rect: Rect::new(0, 0, 2, 2), weight: -1.0 },
            WeightedRect { rect: Rect::new(2, 0, 3, 2), weight: 1.0 },
        ];
        assert!(HaarFeature::new(rects).is_err());
    }

    #[test]
    fn scaled_rect_stays_inside_window() {
        let w = Rect::new(5, 7, 29, 31);
        for x in 0..24 {
            for len in 1..=(24 - x) {
                let r = scale_rect(Rect::new(x, x.min(23), len, 1), w, 24, 24);
                assert!(r.w >= 1 && r.h >= 1);
                assert!(r.x >= w.x && r.right() <= w.right());
                assert!(r.y >= w.y && r.bottom() <= w.bottom());
            }
        }
    }
}

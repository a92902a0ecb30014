//! Textual cascade files.
//!
//! ```json
//! {"format_version":1,"base_w":24,"base_h":24,
//!  "stages":[{"threshold":1.5,
//!             "weak":[{"threshold":0.1,"polarity":1,"alpha":0.8,
//!                      "rects":[[0,0,12,24,-1.0],[12,0,12,24,1.0]]}]}]}
//! ```
//!
//! Numbers are rendered with the shortest representation that parses back to
//! the same value, so save/load is exact.

use super::{CascadeStage, HaarCascade, HaarError, HaarFeature, WeakClassifier, WeightedRect};
use crate::image::Rect;
use serde::{Deserialize, Serialize};

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CascadeFile {
    format_version: u32,
    base_w: u32,
    base_h: u32,
    stages: Vec<StageFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageFile {
    threshold: f64,
    weak: Vec<WeakFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeakFile {
    threshold: f64,
    polarity: i8,
    alpha: f64,
    rects: Vec<(u32, u32, u32, u32, f64)>,
}

pub fn save_cascade(c: &HaarCascade) -> Vec<u8> {
    let file = CascadeFile {
        format_version: FORMAT_VERSION,
        base_w: c.base_w,
        base_h: c.base_h,
        stages: c
            .stages
            .iter()
            .map(|s| StageFile {
                threshold: s.threshold,
                weak: s
                    .weak
                    .iter()
                    .map(|w| WeakFile {
                        threshold: w.threshold,
                        polarity: w.polarity,
                        alpha: w.alpha,
                        rects: w
                            .feature
                            .rects()
                            .iter()
                            .map(|r| (r.rect.x, r.rect.y, r.rect.w, r.rect.h, r.weight))
                            .collect(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec_pretty(&file).expect("cascade serialization cannot fail");
    out.push(b'\n');
    out
}

pub fn load_cascade(bytes: &[u8]) -> Result<HaarCascade, HaarError> {
    let file: CascadeFile = serde_json::from_slice(bytes).map_err(|e| HaarError::Parse(e.to_string()))?;
    if file.format_version != FORMAT_VERSION {
        return Err(HaarError::Parse(format!("unsupported format_version {}", file.format_version)));
    }
    let mut stages = Vec::with_capacity(file.stages.len());
    for s in file.stages {
        let mut weak = Vec::with_capacity(s.weak.len());
        for w in s.weak {
            let rects = w
                .rects
                .into_iter()
                .map(|(x, y, rw, rh, weight)| WeightedRect { rect: Rect::new(x, y, rw, rh), weight })
                .collect();
            weak.push(WeakClassifier {
                feature: HaarFeature::new(rects)?,
                threshold: w.threshold,
                polarity: w.polarity,
                alpha: w.alpha,
            });
        }
        stages.push(CascadeStage { weak, threshold: s.threshold });
    }
    HaarCascade::new(file.base_w, file.base_h, stages)
}

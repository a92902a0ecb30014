//! A scripted, fully synthetic attendance run: three people to enroll, an
//! impostor cohort, and a 60-frame session in which two of the enrolled
//! people and one stranger walk past the camera.
//!
//! Everything here is deterministic, so the same run can be driven through
//! the library, the HTTP service, or the CLI and compared byte for byte.

use crate::config::EngineConfig;
use crate::haar::DetectParams;
use crate::image::{Rect, RgbImage};
use crate::siamese::align_face;
use crate::synth::{scene, CascadeRecipe, FaceStyle};
use chrono::{DateTime, TimeZone, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FACE_SIDE: u32 = 48;
pub const CHIP_SIDE: u32 = 40;
pub const FRAME_COUNT: usize = 60;
pub const FRAME_INTERVAL_S: i64 = 2;
/// 2023-11-14T22:13:20Z
pub const SESSION_START_UNIX: i64 = 1_700_000_000;
pub const SESSION_NAME: &str = "Morning lecture";
pub const DEBOUNCE_S: u64 = 30;
pub const COHORT_SIZE: usize = 40;

#[derive(Debug, Clone)]
pub struct DemoPerson {
    pub id: &'static str,
    pub name: &'static str,
    pub style: FaceStyle,
}

pub fn persons() -> Vec<DemoPerson> {
    vec![
        DemoPerson { id: "s001", name: "Ada Lovelace", style: FaceStyle::identity(0) },
        DemoPerson { id: "s002", name: "Hopper, Grace", style: FaceStyle::identity(1) },
        DemoPerson { id: "s003", name: "Alan Turing", style: FaceStyle::identity(2) },
    ]
}

/// Engine settings sized for the demo: five samples per person and 40 px
/// chips.
pub fn config() -> EngineConfig {
    EngineConfig {
        k_min: 5,
        chip_side: CHIP_SIDE,
        detect: DetectParams { scale_factor: 1.2, min_size: 36, step_fraction: 0.1, max_size: 60 },
        debounce_s: DEBOUNCE_S,
        ..EngineConfig::default()
    }
}

pub fn cascade_recipe() -> CascadeRecipe {
    CascadeRecipe::default()
}

/// Candidate enrollment frames for person `k`, in capture order. Each holds
/// one face; a few may still be rejected by the detector.
pub fn enrollment_frames(k: usize) -> Vec<RgbImage> {
    let style = &persons()[k].style;
    (1..=10u64)
        .map(|a| {
            let x = 20 + (a * 17 % 80) as u32;
            let y = 10 + (a * 11 % 50) as u32;
            scene(160, 120, &[(style.clone(), Rect::new(x, y, FACE_SIDE, FACE_SIDE))], 1000 * k as u64 + a)
        })
        .collect()
}

/// Aligned chips of random non-enrolled faces, cropped at their planted
/// boxes.
pub fn cohort_chips() -> Vec<RgbImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    (0..COHORT_SIZE as u64)
        .map(|a| {
            let rect = Rect::new(40 + (a * 13 % 50) as u32, 20 + (a * 7 % 40) as u32, FACE_SIDE, FACE_SIDE);
            let img = scene(160, 120, &[(FaceStyle::random(&mut rng), rect)], 5000 + a);
            align_face(&img.into(), rect, CHIP_SIDE).expect("planted box lies inside the frame")
        })
        .collect()
}

/// Who is in frame `f`: indices into [`persons`], `None` for the stranger.
pub fn frame_cast(f: usize) -> Vec<(Option<usize>, Rect)> {
    let mut cast = Vec::new();
    if !(20..40).contains(&f) {
        cast.push((Some(0), Rect::new(4 + (f % 7) as u32 * 2, 30, FACE_SIDE, FACE_SIDE)));
    }
    if f % 4 == 1 {
        cast.push((None, Rect::new(90 + (f % 3) as u32 * 4, 60, FACE_SIDE, FACE_SIDE)));
    }
    if (10..50).contains(&f) {
        cast.push((Some(1), Rect::new(176 + (f % 5) as u32 * 3, 40 + (f % 4) as u32, FACE_SIDE, FACE_SIDE)));
    }
    cast
}

pub fn frame_time(f: usize) -> DateTime<Utc> {
    Utc.timestamp_opt(SESSION_START_UNIX + f as i64 * FRAME_INTERVAL_S, 0).unwrap()
}

pub fn session_frame(f: usize) -> RgbImage {
    let people = persons();
    let faces: Vec<(FaceStyle, Rect)> = frame_cast(f)
        .into_iter()
        .map(|(who, r)| (who.map_or_else(FaceStyle::stranger, |k| people[k].style.clone()), r))
        .collect();
    scene(240, 120, &faces, 777 + f as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cast_never_overlaps() {
        for f in 0..FRAME_COUNT {
            let cast = frame_cast(f);
            for i in 0..cast.len() {
                for j in i + 1..cast.len() {
                    assert_eq!(cast[i].1.intersection_area(&cast[j].1), 0, "frame {f}");
                }
                assert!(cast[i].1.fits(240, 120));
            }
        }
    }

    #[test]
    fn fixtures_are_deterministic() {
        assert_eq!(session_frame(7), session_frame(7));
        assert_eq!(enrollment_frames(1), enrollment_frames(1));
        assert_eq!(cohort_chips()[3], cohort_chips()[3]);
    }
}

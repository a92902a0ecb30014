//! Procedural face-like fixtures for tests, demos, and desk-scale training.
//!
//! Every face shares the same layout (bright oval, dark eyes, dark mouth) so a
//! single detector can find all of them; identities differ in tint, hair,
//! geometry, and a striped skin texture.

use crate::haar::{feature_bank, train_cascade, HaarCascade, HaarError};
use crate::image::{integral, GrayImage, Rect, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct FaceStyle {
    pub skin: [f32; 3],
    pub hair: [f32; 3],
    pub eye_sep: f32,
    pub eye_y: f32,
    pub eye_r: f32,
    pub mouth_y: f32,
    pub mouth_w: f32,
    pub stripe_freq: f32,
    pub stripe_angle: f32,
    pub stripe_amp: f32,
}

const SKINS: [[f32; 3]; 6] = [
    [235.0, 200.0, 170.0],
    [200.0, 225.0, 240.0],
    [240.0, 225.0, 150.0],
    [215.0, 185.0, 225.0],
    [190.0, 235.0, 195.0],
    [245.0, 180.0, 185.0],
];

const HAIRS: [[f32; 3]; 6] = [
    [40.0, 30.0, 20.0],
    [150.0, 110.0, 40.0],
    [20.0, 20.0, 70.0],
    [110.0, 40.0, 30.0],
    [70.0, 70.0, 70.0],
    [30.0, 80.0, 40.0],
];

impl FaceStyle {
    /// Style number `k`; the first six differ in every attribute.
    pub fn identity(k: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + k);
        let i = k as usize;
        FaceStyle {
            skin: SKINS[i % SKINS.len()],
            hair: HAIRS[(i * 5 + 1) % HAIRS.len()],
            eye_sep: 0.34 + 0.05 * (i % 3) as f32 + rng.random_range(0.0..0.02),
            eye_y: 0.40 + 0.03 * (i % 2) as f32,
            eye_r: 0.07 + 0.015 * ((i / 2) % 2) as f32,
            mouth_y: 0.74 + 0.03 * ((i + 1) % 2) as f32,
            mouth_w: 0.26 + 0.08 * ((i / 3) % 2) as f32 + rng.random_range(0.0..0.02),
            stripe_freq: 3.0 + 2.0 * (i % 3) as f32,
            stripe_angle: std::f32::consts::PI * (i as f32 * 0.37).fract(),
            stripe_amp: 18.0 + 4.0 * (i % 2) as f32,
        }
    }

    /// A face unlike any `identity(k)` style for small `k`.
    pub fn stranger() -> Self {
        FaceStyle {
            skin: [175.0, 175.0, 175.0],
            hair: [200.0, 60.0, 160.0],
            eye_sep: 0.46,
            eye_y: 0.45,
            eye_r: 0.09,
            mouth_y: 0.70,
            mouth_w: 0.42,
            stripe_freq: 9.0,
            stripe_angle: 1.2,
            stripe_amp: 30.0,
        }
    }

    /// A random style, for detector training.
    pub fn random(rng: &mut impl Rng) -> Self {
        let color = |rng: &mut dyn rand::RngCore, lo: f32, hi: f32| {
            [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
        };
        FaceStyle {
            skin: color(rng, 160.0, 250.0),
            hair: color(rng, 10.0, 210.0),
            eye_sep: rng.random_range(0.32..0.48),
            eye_y: rng.random_range(0.38..0.46),
            eye_r: rng.random_range(0.06..0.095),
            mouth_y: rng.random_range(0.70..0.78),
            mouth_w: rng.random_range(0.24..0.44),
            stripe_freq: rng.random_range(2.0..10.0),
            stripe_angle: rng.random_range(0.0..std::f32::consts::PI),
            stripe_amp: rng.random_range(0.0..30.0),
        }
    }
}

/// Per-sample variation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    /// Uniform per-pixel noise amplitude.
    pub noise: f32,
    /// Uniform global brightness offset amplitude.
    pub brightness: f32,
    /// Center shift amplitude, as a fraction of the face size.
    pub shift: f32,
    /// Relative scale amplitude.
    pub scale: f32,
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter { noise: 12.0, brightness: 12.0, shift: 0.03, scale: 0.04 }
    }
}

impl Jitter {
    pub const NONE: Jitter = Jitter { noise: 0.0, brightness: 0.0, shift: 0.0, scale: 0.0 };
}

fn symmetric(rng: &mut impl Rng, amp: f32) -> f32 {
    if amp > 0.0 {
        rng.random_range(-amp..amp)
    } else {
        0.0
    }
}

fn quantize(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Draws a face filling `rect` of `canvas`. Pixels outside the face oval keep
/// the canvas content.
pub fn paint_face(canvas: &mut RgbImage, rect: Rect, style: &FaceStyle, jitter: Jitter, rng: &mut impl Rng) {
    let dx = symmetric(rng, jitter.shift);
    let dy = symmetric(rng, jitter.shift);
    let k = 1.0 + symmetric(rng, jitter.scale);
    let light = symmetric(rng, jitter.brightness);
    let (sin, cos) = style.stripe_angle.sin_cos();
    for py in rect.y..rect.bottom().min(canvas.height()) {
        for px in rect.x..rect.right().min(canvas.width()) {
            // Unit face coordinates, centered at 0.5.
            let u = ((px as f32 + 0.5 - rect.x as f32) / rect.w as f32 - 0.5 - dx) / k + 0.5;
            let v = ((py as f32 + 0.5 - rect.y as f32) / rect.h as f32 - 0.5 - dy) / k + 0.5;
            let ou = (u - 0.5) / 0.44;
            let ov = (v - 0.52) / 0.47;
            if ou * ou + ov * ov > 1.0 {
                continue;
            }
            let mut c = if v < 0.22 {
                style.hair
            } else {
                let t = ((u * cos + v * sin) * style.stripe_freq * std::f32::consts::TAU).sin();
                style.skin.map(|s| s + style.stripe_amp * t)
            };
            let eye = |cx: f32| {
                let (a, b) = ((u - cx) / style.eye_r, (v - style.eye_y) / (style.eye_r * 0.7));
                a * a + b * b <= 1.0
            };
            let in_mouth = (u - 0.5).abs() <= style.mouth_w / 2.0 && (v - style.mouth_y).abs() <= 0.04;
            if eye(0.5 - style.eye_sep / 2.0) || eye(0.5 + style.eye_sep / 2.0) {
                c = [25.0, 25.0, 35.0];
            } else if in_mouth {
                c = [70.0, 25.0, 30.0];
            }
            let px_rgb = c.map(|ch| quantize(ch + light + symmetric(rng, jitter.noise)));
            canvas.set(px, py, px_rgb);
        }
    }
}

/// A face alone on a square tile with a plain dark surround.
pub fn render_face(style: &FaceStyle, side: u32, jitter: Jitter, rng: &mut impl Rng) -> RgbImage {
    let mut img = RgbImage::filled(side, side, [60, 60, 60]);
    paint_face(&mut img, Rect::new(0, 0, side, side), style, jitter, rng);
    img
}

/// Low-contrast textured backdrop: a smooth gradient, a few soft blobs, and
/// pixel noise. Deterministic in `seed`.
pub fn background(width: u32, height: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f32; 3] = [rng.random_range(50.0..110.0), rng.random_range(50.0..110.0), rng.random_range(50.0..110.0)];
    let (gx, gy) = (rng.random_range(-0.4f32..0.4), rng.random_range(-0.4f32..0.4));
    let blobs: Vec<(f32, f32, f32, f32)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.0..width as f32),
                rng.random_range(0.0..height as f32),
                rng.random_range(6.0..20.0f32),
                rng.random_range(-30.0..30.0f32),
            )
        })
        .collect();
    let mut img = RgbImage::filled(width, height, [0, 0, 0]);
    for y in 0..height {
        for x in 0..width {
            let mut lift = gx * x as f32 + gy * y as f32;
            for &(bx, by, r, amp) in &blobs {
                let d2 = ((x as f32 - bx).powi(2) + (y as f32 - by).powi(2)) / (r * r);
                lift += amp * (-d2).exp();
            }
            let n = rng.random_range(-6.0f32..6.0);
            img.set(x, y, base.map(|b| quantize(b + lift + n)));
        }
    }
    img
}

/// A frame with faces painted at the given boxes over [`background`].
pub fn scene(width: u32, height: u32, faces: &[(FaceStyle, Rect)], seed: u64) -> RgbImage {
    let mut img = background(width, height, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xface);
    for (style, rect) in faces {
        paint_face(&mut img, *rect, style, Jitter::default(), &mut rng);
    }
    img
}

/// A `side x side` gray patch that is not a centered face: backdrop crops,
/// noise, gradients, stripes, or an off-center face fragment.
pub fn non_face(side: u32, rng: &mut impl Rng) -> GrayImage {
    match rng.random_range(0..5) {
        0 => background(side, side, rng.random()).to_gray(),
        1 => {
            let lo = rng.random_range(0..200u32);
            let span = rng.random_range(1..=(255 - lo).min(120));
            GrayImage::from_fn(side, side, |_, _| (lo + rng.random_range(0..span)) as u8)
        }
        2 => {
            let (a, b, c) = (rng.random_range(-6.0f32..6.0), rng.random_range(-6.0f32..6.0), rng.random_range(40.0..200.0));
            GrayImage::from_fn(side, side, |x, y| quantize(c + a * x as f32 + b * y as f32))
        }
        3 => {
            let period = rng.random_range(2..8u32);
            let (lo, hi) = (rng.random_range(0..120u8), rng.random_range(130..=255u8));
            let vertical = rng.random::<bool>();
            GrayImage::from_fn(side, side, |x, y| if (if vertical { x } else { y }) / period % 2 == 0 { lo } else { hi })
        }
        _ => {
            // A face pushed far enough off-center that it should not count.
            let mut canvas = background(side * 2, side * 2, rng.random());
            paint_face(&mut canvas, Rect::new(side / 2, side / 2, side, side), &FaceStyle::random(rng), Jitter::default(), rng);
            let (ox, oy) = loop {
                let o = (rng.random_range(0..=side), rng.random_range(0..=side));
                if o.0.abs_diff(side / 2) > side / 3 || o.1.abs_diff(side / 2) > side / 3 {
                    break o;
                }
            };
            canvas.crop(Rect::new(ox, oy, side, side)).unwrap().to_gray()
        }
    }
}

/// A `side x side` gray face centered on its tile, random style.
pub fn face_patch(side: u32, rng: &mut impl Rng) -> GrayImage {
    let mut canvas = background(side, side, rng.random());
    let style = FaceStyle::random(rng);
    let jitter = Jitter { shift: 0.08, scale: 0.1, ..Jitter::default() };
    paint_face(&mut canvas, Rect::new(0, 0, side, side), &style, jitter, rng);
    canvas.to_gray()
}

/// Recipe for a detector trained purely on [`face_patch`] and [`non_face`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeRecipe {
    pub seed: u64,
    pub side: u32,
    pub positives: usize,
    pub negatives: usize,
    pub stage_rounds: Vec<usize>,
    pub bank_cap: usize,
}

impl Default for CascadeRecipe {
    fn default() -> Self {
        CascadeRecipe { seed: 42, side: 24, positives: 300, negatives: 600, stage_rounds: vec![20], bank_cap: 20_000 }
    }
}

pub fn synthetic_cascade(recipe: &CascadeRecipe) -> Result<HaarCascade, HaarError> {
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let pos: Vec<_> = (0..recipe.positives).map(|_| integral(&face_patch(recipe.side, &mut rng))).collect();
    let neg: Vec<_> = (0..recipe.negatives).map(|_| integral(&non_face(recipe.side, &mut rng))).collect();
    let bank = feature_bank(recipe.side, recipe.side, recipe.bank_cap);
    train_cascade(&pos, &neg, &bank, &recipe.stage_rounds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic() {
        let a = render_face(&FaceStyle::identity(2), 40, Jitter::default(), &mut ChaCha8Rng::seed_from_u64(1));
        let b = render_face(&FaceStyle::identity(2), 40, Jitter::default(), &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert_eq!(scene(64, 48, &[(FaceStyle::stranger(), Rect::new(4, 4, 30, 30))], 3), scene(64, 48, &[(FaceStyle::stranger(), Rect::new(4, 4, 30, 30))], 3));
    }

    #[test]
    fn faces_have_dark_eyes_on_bright_skin() {
        let img = render_face(&FaceStyle::identity(0), 100, Jitter::NONE, &mut ChaCha8Rng::seed_from_u64(0)).to_gray();
        let s = FaceStyle::identity(0);
        let eye = img.get(((0.5 - s.eye_sep / 2.0) * 100.0) as u32, (s.eye_y * 100.0) as u32);
        let cheek = img.get(50, 60);
        assert!(eye < 60 && cheek > 120, "eye {eye} cheek {cheek}");
    }

    #[test]
    fn identities_are_distinct() {
        let styles: Vec<_> = (0..6).map(FaceStyle::identity).chain([FaceStyle::stranger()]).collect();
        for i in 0..styles.len() {
            for j in i + 1..styles.len() {
                assert_ne!(styles[i], styles[j]);
            }
        }
    }

    #[test]
    fn patches_have_requested_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let n = non_face(24, &mut rng);
            assert_eq!((n.width(), n.height()), (24, 24));
        }
        assert_eq!(face_patch(24, &mut rng).width(), 24);
    }
}

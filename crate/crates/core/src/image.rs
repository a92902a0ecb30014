//! Raster images, PNM codec, color conversion, geometric ops and integral
//! images.
//!
//! Everything here is a plain value type: construction validates the
//! invariants and every operation is a pure function.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("malformed PNM header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("rectangle {rect:?} out of bounds for {width}x{height} image")]
    OutOfBounds { rect: Rect, width: u32, height: u32 },
    #[error("invalid dimensions {0}x{1}")]
    InvalidDimensions(u32, u32),
}

/// Axis-aligned rectangle, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Rect { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.w > 0
            && self.h > 0
            && self.x as u64 + self.w as u64 <= width as u64
            && self.y as u64 + self.h as u64 <= height as u64
    }

    pub fn intersection_area(&self, other: &Rect) -> u64 {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        if x1 <= x0 || y1 <= y0 {
            0
        } else {
            (x1 - x0) as u64 * (y1 - y0) as u64
        }
    }

    /// Intersection over union; 0 for disjoint boxes.
    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    fn check(&self, width: u32, height: u32) -> Result<(), ImageError> {
        if self.fits(width, height) {
            Ok(())
        } else {
            Err(ImageError::OutOfBounds { rect: *self, width, height })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

fn check_len(width: u32, height: u32, channels: usize, len: usize) -> Result<(), ImageError> {
    if width == 0 || height == 0 {
        return Err(ImageError::InvalidDimensions(width, height));
    }
    let expected = width as usize * height as usize * channels;
    if len != expected {
        return Err(ImageError::TruncatedPayload { expected, found: len });
    }
    Ok(())
}

impl GrayImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, ImageError> {
        check_len(width, height, 1, pixels.len())?;
        Ok(GrayImage { width, height, pixels })
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        GrayImage { width, height, pixels: vec![value; width as usize * height as usize] }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> u8) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut pixels = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        GrayImage { width, height, pixels }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        self.pixels[y as usize * self.width as usize + x as usize] = v;
    }

    pub fn crop(&self, r: Rect) -> Result<Self, ImageError> {
        r.check(self.width, self.height)?;
        let pixels = crop_raw(&self.pixels, self.width, 1, r);
        Ok(GrayImage { width: r.w, height: r.h, pixels })
    }

    pub fn resize_bilinear(&self, out_w: u32, out_h: u32) -> Self {
        let pixels = resize_raw(&self.pixels, self.width, self.height, 1, out_w, out_h);
        GrayImage { width: out_w, height: out_h, pixels }
    }

    /// Replicates luminance into three channels.
    pub fn to_rgb(&self) -> RgbImage {
        let pixels = self.pixels.iter().flat_map(|&v| [v, v, v]).collect();
        RgbImage { width: self.width, height: self.height, pixels }
    }

    pub fn encode_pnm(&self) -> Vec<u8> {
        encode_raw("P5", self.width, self.height, &self.pixels)
    }
}

impl RgbImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, ImageError> {
        check_len(width, height, 3, pixels.len())?;
        Ok(RgbImage { width, height, pixels })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let n = width as usize * height as usize;
        let pixels = std::iter::repeat_n(rgb, n).flatten().collect();
        RgbImage { width, height, pixels }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// BT.601 luma, `round(0.299 R + 0.587 G + 0.114 B)` with halves
    /// rounded up. Computed in exact integer arithmetic.
    pub fn to_gray(&self) -> GrayImage {
        let pixels = self
            .pixels
            .chunks_exact(3)
            .map(|p| {
                let acc = 299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32;
                ((acc + 500) / 1000).min(255) as u8
            })
            .collect();
        GrayImage { width: self.width, height: self.height, pixels }
    }

    pub fn crop(&self, r: Rect) -> Result<Self, ImageError> {
        r.check(self.width, self.height)?;
        let pixels = crop_raw(&self.pixels, self.width, 3, r);
        Ok(RgbImage { width: r.w, height: r.h, pixels })
    }

    pub fn resize_bilinear(&self, out_w: u32, out_h: u32) -> Self {
        let pixels = resize_raw(&self.pixels, self.width, self.height, 3, out_w, out_h);
        RgbImage { width: out_w, height: out_h, pixels }
    }

    pub fn encode_pnm(&self) -> Vec<u8> {
        encode_raw("P6", self.width, self.height, &self.pixels)
    }
}

/// Either kind of decoded raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Image {
    Gray(GrayImage),
    Rgb(RgbImage),
}

impl Image {
    pub fn width(&self) -> u32 {
        match self {
            Image::Gray(g) => g.width(),
            Image::Rgb(c) => c.width(),
        }
    }

    pub fn height(&self) -> u32 {
        match self {
            Image::Gray(g) => g.height(),
            Image::Rgb(c) => c.height(),
        }
    }

    pub fn to_gray(&self) -> GrayImage {
        match self {
            Image::Gray(g) => g.clone(),
            Image::Rgb(c) => c.to_gray(),
        }
    }

    pub fn to_rgb(&self) -> RgbImage {
        match self {
            Image::Gray(g) => g.to_rgb(),
            Image::Rgb(c) => c.clone(),
        }
    }

    pub fn crop(&self, r: Rect) -> Result<Image, ImageError> {
        Ok(match self {
            Image::Gray(g) => Image::Gray(g.crop(r)?),
            Image::Rgb(c) => Image::Rgb(c.crop(r)?),
        })
    }

    pub fn resize_bilinear(&self, out_w: u32, out_h: u32) -> Image {
        match self {
            Image::Gray(g) => Image::Gray(g.resize_bilinear(out_w, out_h)),
            Image::Rgb(c) => Image::Rgb(c.resize_bilinear(out_w, out_h)),
        }
    }

    pub fn encode_pnm(&self) -> Vec<u8> {
        match self {
            Image::Gray(g) => g.encode_pnm(),
            Image::Rgb(c) => c.encode_pnm(),
        }
    }
}

impl From<GrayImage> for Image {
    fn from(g: GrayImage) -> Self {
        Image::Gray(g)
    }
}

impl From<RgbImage> for Image {
    fn from(c: RgbImage) -> Self {
        Image::Rgb(c)
    }
}

fn crop_raw(src: &[u8], src_w: u32, channels: usize, r: Rect) -> Vec<u8> {
    let row_len = r.w as usize * channels;
    let mut out = Vec::with_capacity(row_len * r.h as usize);
    for y in r.y..r.bottom() {
        let start = (y as usize * src_w as usize + r.x as usize) * channels;
        out.extend_from_slice(&src[start..start + row_len]);
    }
    out
}

// Sample positions for one axis: (low index, high index, weight of high).
fn axis_samples(src_len: u32, dst_len: u32) -> Vec<(usize, usize, f64)> {
    let scale = src_len as f64 / dst_len as f64;
    let max = (src_len - 1) as f64;
    (0..dst_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let lo = s.floor();
            let hi = (lo + 1.0).min(max);
            (lo as usize, hi as usize, s - lo)
        })
        .collect()
}

fn resize_raw(src: &[u8], w: u32, h: u32, channels: usize, out_w: u32, out_h: u32) -> Vec<u8> {
    assert!(out_w > 0 && out_h > 0, "resize target must be positive");
    if w == out_w && h == out_h {
        return src.to_vec();
    }
    let xs = axis_samples(w, out_w);
    let ys = axis_samples(h, out_h);
    let stride = w as usize * channels;
    let mut out = Vec::with_capacity(out_w as usize * out_h as usize * channels);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..channels {
                let p = |x: usize, y: usize| src[y * stride + x * channels + c] as f64;
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

fn encode_raw(magic: &str, w: u32, h: u32, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Decodes binary PGM (`P5`) or PPM (`P6`) with maxval 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image, ImageError> {
    let mut pos = 0usize;
    let magic = header_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(ImageError::MalformedHeader(format!("bad magic {other:?}"))),
    };
    let width = header_number(bytes, &mut pos)?;
    let height = header_number(bytes, &mut pos)?;
    let maxval = header_number(bytes, &mut pos)?;
    if width == 0 || height == 0 {
        return Err(ImageError::MalformedHeader(format!("nonpositive dimensions {width}x{height}")));
    }
    if maxval != 255 {
        return Err(ImageError::MalformedHeader(format!("maxval {maxval} is not 255")));
    }
    // exactly one whitespace byte separates maxval from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(ImageError::MalformedHeader("missing separator after maxval".into())),
    }
    let expected = width as usize * height as usize * channels;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(ImageError::TruncatedPayload { expected, found: payload.len() });
    }
    let pixels = payload[..expected].to_vec();
    Ok(if channels == 1 {
        Image::Gray(GrayImage { width, height, pixels })
    } else {
        Image::Rgb(RgbImage { width, height, pixels })
    })
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String, ImageError> {
    loop {
        match bytes.get(*pos) {
            None => return Err(ImageError::MalformedHeader("unexpected end of header".into())),
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' || b == b'\r' {
                        break;
                    }
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
        }
    }
    let start = *pos;
    while let Some(&b) = bytes.get(*pos) {
        if b.is_ascii_whitespace() || b == b'#' {
            break;
        }
        *pos += 1;
    }
    if *pos == bytes.len() {
        return Err(ImageError::MalformedHeader("unexpected end of header".into()));
    }
    String::from_utf8(bytes[start..*pos].to_vec())
        .map_err(|_| ImageError::MalformedHeader("non-ASCII header token".into()))
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Result<u32, ImageError> {
    let tok = header_token(bytes, pos)?;
    tok.parse::<u32>()
        .map_err(|_| ImageError::MalformedHeader(format!("expected a number, found {tok:?}")))
}

/// Zero-padded cumulative sum tables over a gray image.
///
/// `sums[y][x]` holds the sum of all pixels strictly above and to the left
/// of `(x, y)`, so row 0 and column 0 are zero and any rectangle sum is four
/// lookups without branches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntegralImage {
    width: u32,
    height: u32,
    sums: Vec<u64>,
    sq_sums: Vec<u64>,
}

impl IntegralImage {
    pub fn new(img: &GrayImage) -> Self {
        let (w, h) = (img.width as usize, img.height as usize);
        let stride = w + 1;
        let mut sums = vec![0u64; stride * (h + 1)];
        let mut sq_sums = vec![0u64; stride * (h + 1)];
        for y in 0..h {
            let mut row = 0u64;
            let mut row_sq = 0u64;
            for x in 0..w {
                let v = img.pixels[y * w + x] as u64;
                row += v;
                row_sq += v * v;
                let i = (y + 1) * stride + x + 1;
                sums[i] = sums[i - stride] + row;
                sq_sums[i] = sq_sums[i - stride] + row_sq;
            }
        }
        IntegralImage { width: img.width, height: img.height, sums, sq_sums }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Table entry at `(x, y)` with `x <= width`, `y <= height`.
    pub fn sum_at(&self, x: u32, y: u32) -> u64 {
        self.sums[y as usize * (self.width as usize + 1) + x as usize]
    }

    pub fn sq_sum_at(&self, x: u32, y: u32) -> u64 {
        self.sq_sums[y as usize * (self.width as usize + 1) + x as usize]
    }

    pub fn rect_sum(&self, r: Rect, squared: bool) -> Result<u64, ImageError> {
        r.check(self.width, self.height)?;
        Ok(self.rect_sum_unchecked(r, squared))
    }

    #[inline]
    pub(crate) fn rect_sum_unchecked(&self, r: Rect, squared: bool) -> u64 {
        let table = if squared { &self.sq_sums } else { &self.sums };
        let stride = self.width as usize + 1;
        let (x0, y0) = (r.x as usize, r.y as usize);
        let (x1, y1) = (x0 + r.w as usize, y0 + r.h as usize);
        table[y1 * stride + x1] + table[y0 * stride + x0]
            - table[y0 * stride + x1]
            - table[y1 * stride + x0]
    }
}

pub fn integral(img: &GrayImage) -> IntegralImage {
    IntegralImage::new(img)
}

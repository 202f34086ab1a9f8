//! Procedural datasets: two moons, and captioned 16x16 shapes with attribute oracles.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::{self, FlowRng};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 16;
pub const SIZE_RANGE: (f32, f32) = (2.0, 6.0);
pub const BRIGHTNESS_RANGE: (f32, f32) = (0.3, 1.0);
/// `large` iff size is at least this.
pub const LARGE_THRESHOLD: f32 = 4.0;
/// `bright` iff brightness is at least this.
pub const BRIGHT_THRESHOLD: f32 = 0.65;
/// Centre coordinates on both axes; keeps every shape inside the frame.
pub const POSITION_RANGE: (f32, f32) = (6.0, 10.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("blank image (max {0:e}): measurement undefined")]
    Blank(f32),
    #[error("expected a 1x{IMAGE_SIZE}x{IMAGE_SIZE} image, got {0:?}")]
    Shape(Vec<usize>),
}

/// Two interleaved unit half circles, alternating between the moons.
pub fn two_moons(n: usize, noise_sd: f32, seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    let mut data = Vec::with_capacity(2 * n);
    for i in 0..n {
        let theta = r.random::<f64>() * PI;
        let (x, y) = if i % 2 == 0 {
            (theta.cos(), theta.sin())
        } else {
            (1.0 - theta.cos(), 0.5 - theta.sin())
        };
        data.push(x as f32);
        data.push(y as f32);
    }
    if noise_sd > 0.0 {
        let eps = rng::normal_vec(&mut r, 2 * n);
        for (d, e) in data.iter_mut().zip(eps) {
            *d += noise_sd * e;
        }
    }
    Tensor::new([n, 2], data).expect("finite by construction")
}

/// Mean of the noiseless two-moons distribution.
pub const TWO_MOONS_CENTROID: [f64; 2] = [0.5, 0.25];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
}

impl ShapeKind {
    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeAttrs {
    pub shape: ShapeKind,
    /// Radius for circles, half side for squares, in pixels.
    pub size: f32,
    pub brightness: f32,
    pub x: f32,
    pub y: f32,
}

impl ShapeAttrs {
    pub fn large(&self) -> bool {
        self.size >= LARGE_THRESHOLD
    }

    pub fn bright(&self) -> bool {
        self.brightness >= BRIGHT_THRESHOLD
    }

    pub fn left(&self) -> bool {
        self.x < IMAGE_SIZE as f32 / 2.0
    }

    pub fn caption(&self) -> String {
        format!(
            "a {} {} {} {}",
            if self.large() { "large" } else { "small" },
            if self.bright() { "bright" } else { "dim" },
            self.shape.word(),
            if self.left() { "left" } else { "right" }
        )
    }

    /// Whether the caption word `label` describes these attributes.
    pub fn has_label(&self, label: &str) -> Option<bool> {
        Some(match label {
            "large" => self.large(),
            "small" => !self.large(),
            "bright" => self.bright(),
            "dim" => !self.bright(),
            "circle" => self.shape == ShapeKind::Circle,
            "square" => self.shape == ShapeKind::Square,
            "left" => self.left(),
            "right" => !self.left(),
            _ => return None,
        })
    }

    fn draw(r: &mut FlowRng) -> Self {
        let shape = if r.random_bool(0.5) { ShapeKind::Circle } else { ShapeKind::Square };
        let size = r.random_range(SIZE_RANGE.0..SIZE_RANGE.1);
        let brightness = r.random_range(BRIGHTNESS_RANGE.0..BRIGHTNESS_RANGE.1);
        let x = r.random_range(POSITION_RANGE.0..POSITION_RANGE.1);
        let y = r.random_range(POSITION_RANGE.0..POSITION_RANGE.1);
        Self {
            shape,
            size,
            brightness,
            x,
            y,
        }
    }
}

pub const LABELS: [&str; 8] = ["large", "small", "bright", "dim", "circle", "square", "left", "right"];

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSample {
    /// `[1, 16, 16]` in `[0, 1]`.
    pub image: Tensor,
    pub attrs: ShapeAttrs,
    pub caption: String,
    pub seed: u64,
    pub index: u64,
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

const SUPERSAMPLE: usize = 16;

/// Pure function of the attributes: per-pixel area coverage times brightness.
pub fn render(attrs: &ShapeAttrs) -> Tensor {
    let n = IMAGE_SIZE;
    let (cx, cy, s) = (attrs.x as f64, attrs.y as f64, attrs.size as f64);
    let mut data = vec![0.0f32; n * n];
    for row in 0..n {
        for col in 0..n {
            let (x0, y0) = (col as f64, row as f64);
            let cover = match attrs.shape {
                ShapeKind::Square => overlap(x0, x0 + 1.0, cx - s, cx + s) * overlap(y0, y0 + 1.0, cy - s, cy + s),
                ShapeKind::Circle => {
                    let mut hits = 0usize;
                    for i in 0..SUPERSAMPLE {
                        for j in 0..SUPERSAMPLE {
                            let px = x0 + (j as f64 + 0.5) / SUPERSAMPLE as f64;
                            let py = y0 + (i as f64 + 0.5) / SUPERSAMPLE as f64;
                            if (px - cx).powi(2) + (py - cy).powi(2) <= s * s {
                                hits += 1;
                            }
                        }
                    }
                    hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
                }
            };
            data[row * n + col] = (cover * attrs.brightness as f64) as f32;
        }
    }
    Tensor::new([1, n, n], data).expect("finite by construction")
}

/// Sample `i` of the dataset with `seed`, drawn from its own stream.
pub fn shape_sample(seed: u64, index: u64) -> ShapeSample {
    let attrs = ShapeAttrs::draw(&mut rng::stream(seed, index));
    ShapeSample {
        image: render(&attrs),
        caption: attrs.caption(),
        attrs,
        seed,
        index,
    }
}

pub fn gen_shapes(n: usize, seed: u64) -> Vec<ShapeSample> {
    (0..n as u64).map(|i| shape_sample(seed, i)).collect()
}

/// SHA-256 over images, attributes and captions in order.
pub fn shapes_digest(samples: &[ShapeSample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.image.to_le_bytes());
        let a = &s.attrs;
        h.update([a.shape as u8]);
        for v in [a.size, a.brightness, a.x, a.y] {
            h.update(v.to_le_bytes());
        }
        h.update((s.caption.len() as u64).to_le_bytes());
        h.update(s.caption.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Pixels at or above this fraction of the maximum count as shape interior
/// for the brightness oracle.
pub const INTERIOR_FRACTION: f32 = 0.97;
/// Pixels at or above this fraction of the maximum count toward the mass.
pub const MASS_FRACTION: f32 = 0.05;
/// Squareness separating circles (below) from squares.
pub const SQUARE_THRESHOLD: f64 = 0.24;

fn pixels(image: &Tensor) -> Result<(&[f32], f32), OracleError> {
    if image.shape() != [1, IMAGE_SIZE, IMAGE_SIZE] {
        return Err(OracleError::Shape(image.shape().to_vec()));
    }
    let max = image.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max < 1e-3 {
        return Err(OracleError::Blank(max));
    }
    Ok((image.data(), max))
}

/// Mean of pixels at or above `INTERIOR_FRACTION * max`.
pub fn brightness_oracle(image: &Tensor) -> Result<f64, OracleError> {
    let (px, max) = pixels(image)?;
    let thr = INTERIOR_FRACTION * max;
    let (sum, count) = px
        .iter()
        .filter(|&&v| v >= thr)
        .fold((0.0f64, 0usize), |(s, c), &v| (s + v as f64, c + 1));
    Ok(sum / count as f64)
}

/// Thresholded mass, its centroid, and the interior brightness.
fn mass(image: &Tensor) -> Result<(f64, f64, f64, f64), OracleError> {
    let (px, max) = pixels(image)?;
    let thr = MASS_FRACTION * max;
    let (mut m, mut mx, mut my) = (0.0f64, 0.0f64, 0.0f64);
    for (i, &v) in px.iter().enumerate() {
        if v >= thr {
            let (r, c) = (i / IMAGE_SIZE, i % IMAGE_SIZE);
            m += v as f64;
            mx += v as f64 * (c as f64 + 0.5);
            my += v as f64 * (r as f64 + 0.5);
        }
    }
    Ok((m, mx / m, my / m, brightness_oracle(image)?))
}

/// Four-fold angular moment of the thresholded mass about its centroid:
/// `-sum v (dx^4 - 6 dx^2 dy^2 + dy^4) / sum v (dx^2 + dy^2)^2`, with pixel
/// centres as positions. 0 for a disc, 3/7 for an axis-aligned square.
pub fn squareness_oracle(image: &Tensor) -> Result<f64, OracleError> {
    let (_, cx, cy, _) = mass(image)?;
    let (px, max) = pixels(image)?;
    let thr = MASS_FRACTION * max;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (i, &v) in px.iter().enumerate() {
        if v < thr {
            continue;
        }
        let dx = (i % IMAGE_SIZE) as f64 + 0.5 - cx;
        let dy = (i / IMAGE_SIZE) as f64 + 0.5 - cy;
        let (x2, y2) = (dx * dx, dy * dy);
        num += v as f64 * (x2 * x2 - 6.0 * x2 * y2 + y2 * y2);
        den += v as f64 * (x2 + y2) * (x2 + y2);
    }
    Ok(-num / den)
}

pub fn shape_oracle(image: &Tensor) -> Result<ShapeKind, OracleError> {
    Ok(if squareness_oracle(image)? < SQUARE_THRESHOLD {
        ShapeKind::Circle
    } else {
        ShapeKind::Square
    })
}

/// Radius or half side from the thresholded area `A = mass / brightness`:
/// `sqrt(A / pi)` for circles, `sqrt(A) / 2` for squares.
pub fn size_oracle(image: &Tensor) -> Result<f64, OracleError> {
    let (m, _, _, b) = mass(image)?;
    let area = m / b;
    Ok(match shape_oracle(image)? {
        ShapeKind::Circle => (area / PI).sqrt(),
        ShapeKind::Square => area.sqrt() / 2.0,
    })
}

/// Horizontal centroid in pixels.
pub fn position_oracle(image: &Tensor) -> Result<f64, OracleError> {
    Ok(mass(image)?.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Size,
    Brightness,
    Shape,
    Position,
}

pub fn attribute_oracle(image: &Tensor, attribute: Attribute) -> Result<f64, OracleError> {
    match attribute {
        Attribute::Size => size_oracle(image),
        Attribute::Brightness => brightness_oracle(image),
        Attribute::Shape => squareness_oracle(image),
        Attribute::Position => position_oracle(image),
    }
}

/// Labels the oracles assign to an image, mirroring [`ShapeAttrs::has_label`].
pub fn oracle_labels(image: &Tensor) -> Result<ShapeAttrs, OracleError> {
    Ok(ShapeAttrs {
        shape: shape_oracle(image)?,
        size: size_oracle(image)? as f32,
        brightness: brightness_oracle(image)? as f32,
        x: position_oracle(image)? as f32,
        y: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blank_image_is_an_error() {
        let z = Tensor::zeros([1, 16, 16]);
        assert!(matches!(size_oracle(&z), Err(OracleError::Blank(_))));
        assert!(brightness_oracle(&z).is_err());
    }

    #[test]
    fn captions_follow_template() {
        let s = shape_sample(1, 0);
        let words: Vec<&str> = s.caption.split(' ').collect();
        assert_eq!(words.len(), 5);
        assert_eq!(words[0], "a");
    }

    #[test]
    fn square_render_is_exact_coverage() {
        let a = ShapeAttrs {
            shape: ShapeKind::Square,
            size: 2.0,
            brightness: 0.5,
            x: 8.0,
            y: 8.0,
        };
        let img = render(&a);
        let total: f32 = img.data().iter().sum();
        assert_eq!(total, 16.0 * 0.5);
    }
}

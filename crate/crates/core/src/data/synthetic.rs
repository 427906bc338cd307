//! Synthetic scenes where two classes are told apart only by what lies
//! below them.
//!
//! Images are a grid of texture blocks. In every block column a stack of
//! "context" blocks (water-like or road-like) fills the bottom rows; the
//! blocks directly above the stack usually hold an object, `object_rows`
//! blocks tall, whose texture is the same for both ambiguous classes: a
//! boat when water lies below, a car when road does. The remaining blocks
//! carry background textures. Context types are drawn independently per
//! column. Objects are taller than the receptive field of a small feature
//! extractor, so the upper part of an object can only be labeled by
//! relating it to patches further down.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabelMask, Sample};
use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_images: usize,
    pub height: usize,
    pub width: usize,
    pub block_rows: usize,
    pub block_cols: usize,
    pub num_classes: usize,
    /// Standard deviation of per-pixel Gaussian noise, in 0-255 units.
    pub noise: f64,
    /// Probability that a context stack carries an object on top.
    pub object_probability: f64,
    /// Height of an object in blocks.
    pub object_rows: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_images: 200,
            height: 64,
            width: 32,
            block_rows: 8,
            block_cols: 2,
            num_classes: 6,
            noise: 25.0,
            object_probability: 0.8,
            object_rows: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassRole {
    /// Context block that makes the object above it class `AmbiguousA`.
    ContextA,
    ContextB,
    AmbiguousA,
    AmbiguousB,
    Background(usize),
}

impl SynthSpec {
    pub const CONTEXT_A: u8 = 0;
    pub const CONTEXT_B: u8 = 1;
    pub const AMBIGUOUS_A: u8 = 2;
    pub const AMBIGUOUS_B: u8 = 3;

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 4 {
            return Err(Error::InvalidArgument(format!(
                "synthetic data needs at least 4 classes (2 context + 2 ambiguous), got {}",
                self.num_classes
            )));
        }
        if self.num_classes > 255 {
            return Err(Error::InvalidArgument("at most 255 classes fit in a mask".into()));
        }
        if self.block_rows < 2 || self.block_cols < 1 {
            return Err(Error::InvalidArgument("need at least 2 block rows and 1 block column".into()));
        }
        if self.object_rows == 0 || self.object_rows >= self.block_rows {
            return Err(Error::InvalidArgument("object_rows must lie in [1, block_rows)".into()));
        }
        if self.height < self.block_rows || self.width < self.block_cols {
            return Err(Error::InvalidArgument("blocks must be at least one pixel".into()));
        }
        if !(0.0..=1.0).contains(&self.object_probability) || !(self.noise >= 0.0) {
            return Err(Error::InvalidArgument("object_probability must be in [0, 1], noise >= 0".into()));
        }
        Ok(())
    }

    pub fn role(&self, class: u8) -> ClassRole {
        match class {
            Self::CONTEXT_A => ClassRole::ContextA,
            Self::CONTEXT_B => ClassRole::ContextB,
            Self::AMBIGUOUS_A => ClassRole::AmbiguousA,
            Self::AMBIGUOUS_B => ClassRole::AmbiguousB,
            c => ClassRole::Background(c as usize - 4),
        }
    }

    pub fn ambiguous_classes() -> [usize; 2] {
        [Self::AMBIGUOUS_A as usize, Self::AMBIGUOUS_B as usize]
    }

    pub fn class_names(&self) -> Vec<String> {
        const NAMES: [&str; 6] = ["water", "road", "boat", "car", "sky", "grass"];
        (0..self.num_classes)
            .map(|i| NAMES.get(i).map_or_else(|| format!("background{}", i - 4), |s| (*s).to_owned()))
            .collect()
    }

    fn background_count(&self) -> usize {
        self.num_classes - 4
    }
}

enum Pattern {
    Flat,
    HorizontalStripes,
    VerticalStripes,
    Checker,
    Blotches,
}

struct Texture {
    base: [f64; 3],
    pattern: Pattern,
    amplitude: f64,
}

fn texture(role: ClassRole) -> Texture {
    let (base, pattern, amplitude) = match role {
        ClassRole::ContextA => ([50.0, 100.0, 170.0], Pattern::HorizontalStripes, 25.0),
        ClassRole::ContextB => ([120.0, 115.0, 110.0], Pattern::VerticalStripes, 25.0),
        // both ambiguous classes share one texture
        ClassRole::AmbiguousA | ClassRole::AmbiguousB => ([200.0, 80.0, 60.0], Pattern::Checker, 25.0),
        ClassRole::Background(0) => ([150.0, 190.0, 235.0], Pattern::Flat, 0.0),
        ClassRole::Background(1) => ([100.0, 170.0, 90.0], Pattern::Blotches, 30.0),
        ClassRole::Background(i) => {
            let h = i as f64 * 2.399;
            (
                [
                    128.0 + 90.0 * h.sin(),
                    128.0 + 90.0 * (h + 2.1).sin(),
                    128.0 + 90.0 * (h + 4.2).sin(),
                ],
                Pattern::Flat,
                0.0,
            )
        }
    };
    Texture {
        base,
        pattern,
        amplitude,
    }
}

impl Texture {
    fn offset(&self, r: usize, c: usize, phase: (usize, usize)) -> f64 {
        let (r, c) = (r + phase.0, c + phase.1);
        let sign = |b: bool| if b { 1.0 } else { -1.0 };
        self.amplitude
            * match self.pattern {
                Pattern::Flat => 0.0,
                Pattern::HorizontalStripes => sign((r / 2) % 2 == 0),
                Pattern::VerticalStripes => sign((c / 2) % 2 == 0),
                Pattern::Checker => sign((r + c) % 2 == 0),
                Pattern::Blotches => {
                    let t = std::f64::consts::TAU / 12.0;
                    (r as f64 * t).sin() * (c as f64 * t).sin()
                }
            }
    }
}

/// Block layout for one image: `block_rows x block_cols` class indices.
fn layout<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Vec<u8> {
    let (rows, cols) = (spec.block_rows, spec.block_cols);
    let mut blocks = vec![0u8; rows * cols];
    let background = |rng: &mut R| 4 + rng.random_range(0..spec.background_count().max(1)) as u8;
    for c in 0..cols {
        let top = rng.random_range(rows / 2..rows);
        let has_object = rng.random_bool(spec.object_probability);
        let water = rng.random_bool(0.5);
        let (context, object) = if water {
            (SynthSpec::CONTEXT_A, SynthSpec::AMBIGUOUS_A)
        } else {
            (SynthSpec::CONTEXT_B, SynthSpec::AMBIGUOUS_B)
        };
        for r in 0..rows {
            blocks[r * cols + c] = if r >= top {
                context
            } else if has_object && r + spec.object_rows >= top {
                object
            } else if spec.background_count() == 0 {
                // with only four classes the sky is a second context stack
                context
            } else {
                background(rng)
            };
        }
    }
    blocks
}

pub fn gen_synthetic<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Result<Vec<Sample>> {
    spec.validate()?;
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let (h, w) = (spec.height, spec.width);
    let textures: Vec<Texture> = (0..spec.num_classes as u8).map(|k| texture(spec.role(k))).collect();
    (0..spec.num_images)
        .map(|i| {
            let blocks = layout(spec, rng);
            let phase = (rng.random_range(0..4), rng.random_range(0..4));
            let mut labels = Vec::with_capacity(h * w);
            let mut pixels = Vec::with_capacity(h * w * 3);
            for r in 0..h {
                let br = r * spec.block_rows / h;
                for c in 0..w {
                    let label = blocks[br * spec.block_cols + c * spec.block_cols / w];
                    let t = &textures[label as usize];
                    let off = t.offset(r, c, phase);
                    labels.push(label);
                    for &b in &t.base {
                        let v: f64 = b + off + noise.sample(rng);
                        pixels.push(v.clamp(0.0, 255.0).round() / 255.0);
                    }
                }
            }
            Sample::new(
                format!("synth_{i:04}"),
                Tensor::new(vec![h, w, 3], pixels)?,
                LabelMask::new(h, w, labels)?,
            )
        })
        .collect()
}

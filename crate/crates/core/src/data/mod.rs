//! Samples, Netpbm and manifest I/O, the synthetic contextual dataset and
//! segmentation metrics.

mod manifest;
mod metrics;
pub mod netpbm;
mod synthetic;

pub use manifest::{load_dataset, save_dataset};
pub use metrics::{evaluate, ConfusionMatrix, Evaluation, MetricReport};
pub use synthetic::{gen_synthetic, ClassRole, SynthSpec};

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Mask value excluded from losses and metrics.
pub const VOID: u8 = 255;

/// Per-pixel class indices, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape("LabelMask", height * width, labels.len()));
        }
        Ok(LabelMask { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        LabelMask {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    /// Non-void classes occurring in the mask.
    pub fn classes_present(&self) -> BTreeSet<u8> {
        self.labels.iter().copied().filter(|&l| l != VOID).collect()
    }

    pub fn flip_horizontal(&self) -> LabelMask {
        let mut labels = Vec::with_capacity(self.labels.len());
        for row in self.labels.chunks(self.width) {
            labels.extend(row.iter().rev());
        }
        LabelMask { labels, ..*self }
    }

    /// Nearest-neighbour resize on the align-corners grid used by the
    /// bilinear image resize.
    pub fn resize_nearest(&self, height: usize, width: usize) -> LabelMask {
        let src = |i: usize, n_out: usize, n_in: usize| {
            if n_out <= 1 {
                0
            } else {
                ((i * (n_in - 1)) as f64 / (n_out - 1) as f64).round() as usize
            }
        };
        let mut labels = Vec::with_capacity(height * width);
        for r in 0..height {
            let sr = src(r, height, self.height);
            for c in 0..width {
                labels.push(self.get(sr, src(c, width, self.width)));
            }
        }
        LabelMask { height, width, labels }
    }

    /// Rejects labels that are neither a class below `num_classes` nor void.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l != VOID && l as usize >= num_classes) {
            Some(&l) => Err(Error::InvalidArgument(format!(
                "mask label {l} is not a class below {num_classes} or void"
            ))),
            None => Ok(()),
        }
    }
}

/// An RGB image in `[0, 1]` with its ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub mask: LabelMask,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor, mask: LabelMask) -> Result<Self> {
        let (h, w, c) = image.dims3()?;
        if c != 3 {
            return Err(Error::shape("Sample image channels", 3, c));
        }
        if (h, w) != (mask.height, mask.width) {
            return Err(Error::shape(
                "Sample mask",
                format!("{h}x{w}"),
                format!("{}x{}", mask.height, mask.width),
            ));
        }
        Ok(Sample {
            id: id.into(),
            image,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.mask.height
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }
}

/// Horizontal mirror of an `H x W x C` tensor.
pub fn flip_image(image: &Tensor) -> Result<Tensor> {
    let (h, w, c) = image.dims3()?;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for r in 0..h {
        for col in (0..w).rev() {
            let i = (r * w + col) * c;
            out.extend_from_slice(&src[i..i + c]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

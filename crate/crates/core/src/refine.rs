//! Second prediction stage: upsample the coarse marginals to image size and
//! sharpen boundaries with a windowed, color-sensitive Potts mean field.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabelMask;
use crate::error::{Error, Result};
use crate::nn::{bilinear_resize, softmax, Tensor};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub enabled: bool,
    pub window_radius: usize,
    /// Spatial bandwidth in pixels.
    pub spatial_bandwidth: f64,
    /// Color bandwidth in 0-255 units.
    pub color_bandwidth: f64,
    pub potts_weight: f64,
    pub iterations: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            enabled: true,
            window_radius: 5,
            spatial_bandwidth: 3.0,
            color_bandwidth: 10.0,
            potts_weight: 3.0,
            iterations: 5,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_radius == 0 {
            return Err(Error::Config("refine window_radius must be >= 1".into()));
        }
        if !(self.spatial_bandwidth > 0.0 && self.color_bandwidth > 0.0) {
            return Err(Error::Config("refine bandwidths must be positive".into()));
        }
        if !(self.potts_weight >= 0.0) {
            return Err(Error::Config("refine potts_weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Log of the coarse marginals (floored at [`PROB_FLOOR`]), bilinearly
/// resized to `image_h x image_w`.
pub fn upsample_scores(coarse: &Tensor, image_h: usize, image_w: usize) -> Result<Tensor> {
    let (h, w, k) = coarse.dims3()?;
    let logs = coarse.data().iter().map(|&q| q.max(PROB_FLOOR).ln()).collect();
    let logs = Tensor::new(vec![h, w, k], logs)?;
    if (h, w) == (image_h, image_w) {
        return Ok(logs);
    }
    bilinear_resize(&logs, image_h, image_w)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
        .0
}

/// Per-pixel argmax of an `H x W x K` tensor; ties go to the lower class.
pub fn argmax_labels(scores: &Tensor) -> Result<LabelMask> {
    let (h, w, k) = scores.dims3()?;
    LabelMask::new(h, w, scores.data().chunks(k).map(|r| argmax(r) as u8).collect())
}

/// Pixel marginals after `config.iterations` synchronous Potts mean-field
/// sweeps, starting from `softmax(scores)`. `after_sweep` sees each field.
pub fn refine_marginals(
    scores: &Tensor,
    image: &Tensor,
    config: &RefineConfig,
    mut after_sweep: impl FnMut(&[f64]),
) -> Result<Vec<f64>> {
    config.validate()?;
    let (h, w, k) = scores.dims3()?;
    let (ih, iw, ic) = image.dims3()?;
    if (h, w) != (ih, iw) {
        return Err(Error::shape("local_refine", format!("{ih}x{iw}"), format!("{h}x{w}")));
    }
    let mut q: Vec<f64> = scores.data().chunks(k).flat_map(softmax).collect();
    let r = config.window_radius as isize;
    let inv_s = 1.0 / (2.0 * config.spatial_bandwidth * config.spatial_bandwidth);
    let inv_c = 1.0 / (2.0 * config.color_bandwidth * config.color_bandwidth);
    let rgb = image.data();
    for _ in 0..config.iterations {
        let prev = q;
        q = (0..h * w)
            .into_par_iter()
            .flat_map_iter(|i| {
                let (row, col) = ((i / w) as isize, (i % w) as isize);
                let ci = &rgb[i * ic..(i + 1) * ic];
                let mut s = scores.data()[i * k..(i + 1) * k].to_vec();
                for dr in -r..=r {
                    let rr = row + dr;
                    if rr < 0 || rr >= h as isize {
                        continue;
                    }
                    for dc in -r..=r {
                        let cc = col + dc;
                        if cc < 0 || cc >= w as isize || (dr == 0 && dc == 0) {
                            continue;
                        }
                        let j = rr as usize * w + cc as usize;
                        let cj = &rgb[j * ic..(j + 1) * ic];
                        let color: f64 = ci.iter().zip(cj).map(|(a, b)| (255.0 * (a - b)).powi(2)).sum();
                        let weight =
                            config.potts_weight * (-((dr * dr + dc * dc) as f64) * inv_s - color * inv_c).exp();
                        if weight == 0.0 {
                            continue;
                        }
                        // Potts: paying `weight` whenever labels differ is, up to a
                        // constant, a reward of `weight * Q_j(y)` for agreeing.
                        for (sy, qy) in s.iter_mut().zip(&prev[j * k..(j + 1) * k]) {
                            *sy += weight * qy;
                        }
                    }
                }
                softmax(&s)
            })
            .collect();
        after_sweep(&q);
    }
    Ok(q)
}

/// Final per-pixel labels: refined when enabled, plain argmax otherwise.
pub fn local_refine(scores: &Tensor, image: &Tensor, config: &RefineConfig) -> Result<LabelMask> {
    if !config.enabled || config.iterations == 0 {
        let (h, w, _) = scores.dims3()?;
        let (ih, iw, _) = image.dims3()?;
        if (h, w) != (ih, iw) {
            return Err(Error::shape("local_refine", format!("{ih}x{iw}"), format!("{h}x{w}")));
        }
        return argmax_labels(scores);
    }
    let (h, w, k) = scores.dims3()?;
    let q = refine_marginals(scores, image, config, |_| {})?;
    LabelMask::new(h, w, q.chunks(k).map(|r| argmax(r) as u8).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant_image(h: usize, w: usize, v: f64) -> Tensor {
        Tensor::filled(&[h, w, 3], v)
    }

    #[test]
    fn identity_upsample_is_log() {
        let coarse = Tensor::new(vec![1, 2, 2], vec![0.25, 0.75, 1.0, 0.0]).unwrap();
        let up = upsample_scores(&coarse, 1, 2).unwrap();
        assert_eq!(up.data(), &[0.25f64.ln(), 0.75f64.ln(), 0.0, PROB_FLOOR.ln()]);
    }

    #[test]
    fn uniform_marginals_give_constant_map_and_class_zero() {
        let coarse = Tensor::filled(&[2, 2, 3], 1.0 / 3.0);
        let up = upsample_scores(&coarse, 8, 8).unwrap();
        let v = up.data()[0];
        assert!(up.data().iter().all(|&x| (x - v).abs() < 1e-15));
        assert!(argmax_labels(&up).unwrap().labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn upsample_matches_channelwise_bilinear_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let coarse = Tensor::new(vec![2, 2, 2], (0..8).map(|_| rng.random_range(0.01..1.0)).collect()).unwrap();
        let up = upsample_scores(&coarse, 8, 8).unwrap();
        for ch in 0..2 {
            let l = |r: usize, c: usize| coarse.at3(r, c, ch).ln();
            for r in 0..8 {
                for c in 0..8 {
                    let (y, x) = (r as f64 / 7.0, c as f64 / 7.0);
                    let want = (1.0 - y) * ((1.0 - x) * l(0, 0) + x * l(0, 1)) + y * ((1.0 - x) * l(1, 0) + x * l(1, 1));
                    assert!((up.at3(r, c, ch) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_weight_or_disabled_is_plain_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores = Tensor::new(vec![6, 5, 3], (0..90).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let image = Tensor::new(vec![6, 5, 3], (0..90).map(|_| rng.random::<f64>()).collect()).unwrap();
        let plain = argmax_labels(&scores).unwrap();
        let zero = RefineConfig {
            potts_weight: 0.0,
            ..RefineConfig::default()
        };
        assert_eq!(local_refine(&scores, &image, &zero).unwrap(), plain);
        let off = RefineConfig {
            enabled: false,
            ..RefineConfig::default()
        };
        assert_eq!(local_refine(&scores, &image, &off).unwrap(), plain);
        assert!(local_refine(&scores, &constant_image(5, 5, 0.0), &off).is_err());
    }

    #[test]
    fn confident_scores_on_flat_image_are_kept() {
        let (h, w) = (10, 10);
        let mut data = Vec::new();
        for r in 0..h {
            for _ in 0..w {
                data.extend(if r < 5 { [20.0, 0.0] } else { [0.0, 20.0] });
            }
        }
        let scores = Tensor::new(vec![h, w, 2], data).unwrap();
        let image = constant_image(h, w, 0.5);
        let out = local_refine(&scores, &image, &RefineConfig::default()).unwrap();
        assert_eq!(out, argmax_labels(&scores).unwrap());
    }

    #[test]
    fn marginals_stay_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scores = Tensor::new(vec![7, 6, 4], (0..168).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let image = Tensor::new(vec![7, 6, 3], (0..126).map(|_| rng.random::<f64>()).collect()).unwrap();
        let mut sweeps = 0;
        refine_marginals(&scores, &image, &RefineConfig::default(), |q| {
            sweeps += 1;
            for row in q.chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        })
        .unwrap();
        assert_eq!(sweeps, 5);
    }

    /// Two color regions split by a vertical edge; the coarse scores put the
    /// boundary in the wrong place on alternating rows. Refinement moves
    /// labels to the color edge.
    #[test]
    fn refinement_reduces_boundary_errors() {
        let (h, w) = (16, 16);
        let mut image = Vec::new();
        let mut truth = Vec::new();
        let mut scores = Vec::new();
        for r in 0..h {
            let dither = if r % 2 == 0 { 6 } else { 10 };
            for c in 0..w {
                let left = c < 8;
                image.extend(if left { [0.9, 0.2, 0.2] } else { [0.2, 0.2, 0.9] });
                truth.push(u8::from(!left));
                scores.extend(if c < dither { [1.0, 0.0] } else { [0.0, 1.0] });
            }
        }
        let image = Tensor::new(vec![h, w, 3], image).unwrap();
        let scores = Tensor::new(vec![h, w, 2], scores).unwrap();
        let errors = |m: &LabelMask| m.labels().iter().zip(&truth).filter(|(a, b)| a != b).count();
        let before = errors(&argmax_labels(&scores).unwrap());
        let after = errors(&local_refine(&scores, &image, &RefineConfig::default()).unwrap());
        assert!(before > 0);
        assert!(after < before, "{after} >= {before}");
    }
}

//! Multi-scale convolutional feature extractor.
//!
//! The input image is resized to every configured scale; each resized image
//! runs through a trunk shared by all scales and a head specific to its
//! scale, and the head output is widened by sliding pyramid pooling. The
//! per-scale maps are then bilinearly brought to the size of the largest one
//! and concatenated along channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    bilinear_resize, bilinear_resize_backward, concat_channels, join, maxpool_backward, maxpool_forward,
    sequential, split_channels, GradBuffer, LayerParams, ParamGroup, Parameterized, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrunkBlock {
    pub layers: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatMapConfig {
    pub scales: Vec<f64>,
    pub trunk_blocks: Vec<TrunkBlock>,
    pub head_layers: usize,
    pub base_channels: usize,
    pub pyramid_windows: Vec<usize>,
    pub downsample_factor: usize,
}

impl Default for FeatMapConfig {
    fn default() -> Self {
        FeatMapConfig {
            scales: vec![1.2, 0.8, 0.4],
            trunk_blocks: vec![
                TrunkBlock { layers: 2, channels: 16 },
                TrunkBlock { layers: 2, channels: 32 },
                TrunkBlock { layers: 2, channels: 32 },
            ],
            head_layers: 2,
            base_channels: 16,
            pyramid_windows: vec![5, 9],
            downsample_factor: 4,
        }
    }
}

impl FeatMapConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("featmap: {msg}")));
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return bad(format!("scales must be nonempty and positive, got {:?}", self.scales));
        }
        if let Some(w) = self.pyramid_windows.iter().find(|&&w| w < 3 || w % 2 == 0) {
            return bad(format!("pyramid windows must be odd and >= 3, got {w}"));
        }
        if !self.downsample_factor.is_power_of_two() {
            return bad(format!(
                "downsample_factor must be a power of two, got {}",
                self.downsample_factor
            ));
        }
        if self.pools() > self.trunk_blocks.len() {
            return bad(format!(
                "downsample_factor {} needs {} trunk blocks, have {}",
                self.downsample_factor,
                self.pools(),
                self.trunk_blocks.len()
            ));
        }
        if self.trunk_blocks.iter().any(|b| b.layers == 0 || b.channels == 0) {
            return bad("trunk blocks need at least one layer and one channel".into());
        }
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        Ok(())
    }

    /// Number of stride-2 poolings in the trunk.
    pub fn pools(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    /// Channels of the fused feature map.
    pub fn output_channels(&self) -> usize {
        self.base_channels * (self.pyramid_windows.len() + 1) * self.scales.len()
    }

    fn largest_scale(&self) -> f64 {
        self.scales.iter().copied().fold(f64::MIN, f64::max)
    }

    /// Spatial size of the fused map for an `height x width` image.
    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let s = self.largest_scale();
        (
            scaled_extent(height, s).div_ceil(self.downsample_factor),
            scaled_extent(width, s).div_ceil(self.downsample_factor),
        )
    }

    /// Channel count feeding the scale heads.
    fn trunk_channels(&self) -> usize {
        self.trunk_blocks.last().map_or(3, |b| b.channels)
    }
}

pub fn scaled_extent(n: usize, scale: f64) -> usize {
    ((n as f64 * scale).round() as usize).max(1)
}

/// `H x W x d` grid of node features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    values: Tensor,
}

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        let (h, w, _) = values.dims3()?;
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument("feature map must be at least 1x1".into()));
        }
        Ok(FeatureMap { values })
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    /// Channel column at node index `node` (row-major position).
    pub fn column(&self, node: usize) -> &[f64] {
        let d = self.channels();
        &self.values.data()[node * d..(node + 1) * d]
    }
}

/// Stride-1 same-padded max pooling at every window, concatenated after the
/// source map: `[fm, pool_1(fm), ..., pool_m(fm)]`.
pub fn sliding_pyramid_pool(fm: &FeatureMap, windows: &[usize]) -> Result<FeatureMap> {
    Ok(FeatureMap::new(pyramid_forward(fm.values(), windows)?.0)?)
}

fn pyramid_forward(x: &Tensor, windows: &[usize]) -> Result<(Tensor, Vec<Vec<usize>>)> {
    if let Some(w) = windows.iter().find(|&&w| w % 2 == 0) {
        return Err(Error::InvalidArgument(format!("pyramid window {w} is not odd")));
    }
    let mut pooled = Vec::with_capacity(windows.len());
    let mut argmaxes = Vec::with_capacity(windows.len());
    for &w in windows {
        let p = maxpool_forward(x, w, 1)?;
        pooled.push(p.output);
        argmaxes.push(p.argmax);
    }
    let mut parts = vec![x];
    parts.extend(pooled.iter());
    Ok((concat_channels(&parts)?, argmaxes))
}

fn pyramid_backward(x_shape: &[usize], argmaxes: &[Vec<usize>], grad: &Tensor) -> Result<Tensor> {
    let c = x_shape[2];
    let parts = split_channels(grad, &vec![c; argmaxes.len() + 1])?;
    let mut iter = parts.into_iter();
    let mut g = iter.next().expect("source part");
    for (part, argmax) in iter.zip(argmaxes) {
        g.add_assign(&maxpool_backward(x_shape, argmax, &part)?)?;
    }
    Ok(g)
}

/// Parameters of one feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatMapNet {
    pub trunk: Vec<LayerParams>,
    pub heads: Vec<Vec<LayerParams>>,
}

impl FeatMapNet {
    pub fn new<R: Rng + ?Sized>(config: &FeatMapConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut trunk = Vec::new();
        let mut c_in = 3;
        for (i, block) in config.trunk_blocks.iter().enumerate() {
            for _ in 0..block.layers {
                trunk.push(LayerParams::conv3x3(c_in, block.channels, ParamGroup::Pretrained, rng));
                trunk.push(LayerParams::relu());
                c_in = block.channels;
            }
            if i < config.pools() {
                trunk.push(LayerParams::maxpool(2, 2));
            }
        }
        let heads = config
            .scales
            .iter()
            .map(|_| {
                let mut head = Vec::new();
                let mut c = config.trunk_channels();
                for _ in 0..config.head_layers {
                    head.push(LayerParams::conv3x3(c, config.base_channels, ParamGroup::New, rng));
                    head.push(LayerParams::relu());
                    c = config.base_channels;
                }
                head
            })
            .collect();
        Ok(FeatMapNet { trunk, heads })
    }
}

impl Parameterized for FeatMapNet {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamGroup)) {
        self.trunk.visit_params(&join(prefix, "trunk"), f);
        for (s, head) in self.heads.iter().enumerate() {
            head.visit_params(&join(prefix, &format!("heads.{s}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamGroup)) {
        self.trunk.visit_params_mut(&join(prefix, "trunk"), f);
        for (s, head) in self.heads.iter_mut().enumerate() {
            head.visit_params_mut(&join(prefix, &format!("heads.{s}")), f);
        }
    }
}

struct ScaleCache {
    trunk: sequential::StackCache,
    head: sequential::StackCache,
    head_shape: Vec<usize>,
    pyramid_argmax: Vec<Vec<usize>>,
    pooled_hw: (usize, usize),
}

/// Everything the backward pass needs from a forward pass.
pub struct FeatCache {
    scales: Vec<ScaleCache>,
    widths: Vec<usize>,
}

/// Forward pass keeping the activations for [`backward`].
pub fn extract_features_cached(
    image: &Tensor,
    net: &FeatMapNet,
    config: &FeatMapConfig,
) -> Result<(FeatureMap, FeatCache)> {
    config.validate()?;
    let (h, w, c) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape("extract_features", "3 color channels", c));
    }
    if net.heads.len() != config.scales.len() {
        return Err(Error::shape("extract_features heads", config.scales.len(), net.heads.len()));
    }
    for &s in &config.scales {
        let (sh, sw) = (scaled_extent(h, s), scaled_extent(w, s));
        if sh.min(sw) < config.downsample_factor {
            return Err(Error::InvalidArgument(format!(
                "{h}x{w} image at scale {s} is {sh}x{sw}, smaller than the downsample factor {}",
                config.downsample_factor
            )));
        }
    }
    let (out_h, out_w) = config.output_size(h, w);

    let mut caches = Vec::with_capacity(config.scales.len());
    let mut per_scale = Vec::with_capacity(config.scales.len());
    for (&s, head) in config.scales.iter().zip(&net.heads) {
        let resized = bilinear_resize(image, scaled_extent(h, s), scaled_extent(w, s))?;
        let trunk = sequential::forward_cached(&net.trunk, resized)?;
        let head_cache = sequential::forward_cached(head, trunk.output().clone())?;
        let head_out = head_cache.output();
        let (pooled, argmax) = pyramid_forward(head_out, &config.pyramid_windows)?;
        let (ph, pw, _) = pooled.dims3()?;
        per_scale.push(bilinear_resize(&pooled, out_h, out_w)?);
        caches.push(ScaleCache {
            head_shape: head_out.shape().to_vec(),
            trunk,
            head: head_cache,
            pyramid_argmax: argmax,
            pooled_hw: (ph, pw),
        });
    }
    let widths = per_scale.iter().map(|t| t.shape()[2]).collect();
    let refs: Vec<&Tensor> = per_scale.iter().collect();
    let fused = concat_channels(&refs)?;
    debug_assert!(fused.is_finite());
    Ok((FeatureMap::new(fused)?, FeatCache { scales: caches, widths }))
}

pub fn extract_features(image: &Tensor, net: &FeatMapNet, config: &FeatMapConfig) -> Result<FeatureMap> {
    Ok(extract_features_cached(image, net, config)?.0)
}

/// Back-propagates the gradient w.r.t. the fused feature map into the
/// extractor parameters (names relative to the net: `trunk.*`, `heads.*`).
pub fn backward(net: &FeatMapNet, cache: &FeatCache, grad: &Tensor) -> Result<GradBuffer> {
    let mut grads = GradBuffer::new();
    let parts = split_channels(grad, &cache.widths)?;
    for (s, (part, sc)) in parts.into_iter().zip(&cache.scales).enumerate() {
        let g_pooled = bilinear_resize_backward(&part, sc.pooled_hw.0, sc.pooled_hw.1)?;
        let g_head = pyramid_backward(&sc.head_shape, &sc.pyramid_argmax, &g_pooled)?;
        let g_trunk = sequential::backward(&net.heads[s], &sc.head, g_head, &format!("heads.{s}"), &mut grads, true)?
            .expect("head input gradient requested");
        sequential::backward(&net.trunk, &sc.trunk, g_trunk, "trunk", &mut grads, false)?;
    }
    grads.count = 1;
    Ok(grads)
}

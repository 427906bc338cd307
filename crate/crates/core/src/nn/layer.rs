use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Dense,
    Conv3x3,
    Relu,
    Maxpool,
    Softmax,
    BilinearResize,
    Concat,
}

impl LayerKind {
    pub fn has_params(self) -> bool {
        matches!(self, LayerKind::Dense | LayerKind::Conv3x3)
    }
}

/// Learning-rate group of a parameter block.
///
/// `Pretrained` marks the layers that would be initialized from a
/// pretrained backbone at full scale (the shared trunk); everything else is
/// `New`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    Pretrained,
    New,
}

impl ParamGroup {
    pub fn id(self) -> usize {
        match self {
            ParamGroup::Pretrained => 0,
            ParamGroup::New => 1,
        }
    }

    pub fn from_id(id: usize) -> Option<Self> {
        match id {
            0 => Some(ParamGroup::Pretrained),
            1 => Some(ParamGroup::New),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Pretrained => "pretrained",
            ParamGroup::New => "new",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const HYPER_WINDOW: &str = "window";
pub const HYPER_STRIDE: &str = "stride";
pub const HYPER_PADDING: &str = "padding";
pub const HYPER_GROUP: &str = "group";

/// One layer: its kind, its parameter tensors (empty for parameter-free
/// kinds) and named integer hyper-parameters.
///
/// Dense weights are `[n_out, n_in]`; conv weights are `[3, 3, c_in, c_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub kind: LayerKind,
    pub weights: Tensor,
    pub bias: Tensor,
    pub hyper: BTreeMap<String, usize>,
}

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn uniform_tensor<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..=bound);
    }
    t
}

impl LayerParams {
    fn parameter_free(kind: LayerKind) -> Self {
        LayerParams {
            kind,
            weights: Tensor::empty(),
            bias: Tensor::empty(),
            hyper: BTreeMap::new(),
        }
    }

    pub fn dense<R: Rng + ?Sized>(n_in: usize, n_out: usize, group: ParamGroup, rng: &mut R) -> Self {
        let bound = glorot_bound(n_in, n_out);
        let mut layer = LayerParams {
            kind: LayerKind::Dense,
            weights: uniform_tensor(&[n_out, n_in], bound, rng),
            bias: Tensor::zeros(&[n_out]),
            hyper: BTreeMap::new(),
        };
        layer.set_group(group);
        layer
    }

    pub fn conv3x3<R: Rng + ?Sized>(c_in: usize, c_out: usize, group: ParamGroup, rng: &mut R) -> Self {
        let bound = glorot_bound(9 * c_in, 9 * c_out);
        let mut layer = LayerParams {
            kind: LayerKind::Conv3x3,
            weights: uniform_tensor(&[3, 3, c_in, c_out], bound, rng),
            bias: Tensor::zeros(&[c_out]),
            hyper: BTreeMap::new(),
        };
        layer.hyper.insert(HYPER_STRIDE.into(), 1);
        layer.hyper.insert(HYPER_PADDING.into(), 1);
        layer.set_group(group);
        layer
    }

    pub fn relu() -> Self {
        Self::parameter_free(LayerKind::Relu)
    }

    pub fn maxpool(window: usize, stride: usize) -> Self {
        let mut layer = Self::parameter_free(LayerKind::Maxpool);
        layer.hyper.insert(HYPER_WINDOW.into(), window);
        layer.hyper.insert(HYPER_STRIDE.into(), stride);
        layer
    }

    pub fn hyper(&self, key: &str) -> Option<usize> {
        self.hyper.get(key).copied()
    }

    pub fn group(&self) -> ParamGroup {
        self.hyper(HYPER_GROUP)
            .and_then(ParamGroup::from_id)
            .unwrap_or(ParamGroup::New)
    }

    pub fn set_group(&mut self, group: ParamGroup) {
        self.hyper.insert(HYPER_GROUP.into(), group.id());
    }

    /// Input and output widths of a dense layer.
    pub fn dense_dims(&self) -> Result<(usize, usize)> {
        match (self.kind, self.weights.shape()) {
            (LayerKind::Dense, &[n_out, n_in]) if self.bias.shape() == [n_out] => Ok((n_in, n_out)),
            _ => Err(Error::shape(
                "dense",
                "weights [n_out, n_in] with bias [n_out]",
                format!("{:?} / {:?}", self.weights.shape(), self.bias.shape()),
            )),
        }
    }

    /// Input and output channel counts of a conv layer.
    pub fn conv_dims(&self) -> Result<(usize, usize)> {
        match (self.kind, self.weights.shape()) {
            (LayerKind::Conv3x3, &[3, 3, c_in, c_out]) if self.bias.shape() == [c_out] => Ok((c_in, c_out)),
            _ => Err(Error::shape(
                "conv3x3",
                "weights [3, 3, c_in, c_out] with bias [c_out]",
                format!("{:?} / {:?}", self.weights.shape(), self.bias.shape()),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LayerKind::Dense => self.dense_dims().map(drop),
            LayerKind::Conv3x3 => self.conv_dims().map(drop),
            LayerKind::Maxpool => {
                let window = self.hyper(HYPER_WINDOW).unwrap_or(0);
                let stride = self.hyper(HYPER_STRIDE).unwrap_or(0);
                if window == 0 || stride == 0 {
                    return Err(Error::InvalidArgument(format!(
                        "maxpool needs window >= 1 and stride >= 1, got {window}/{stride}"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_within_glorot_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = LayerParams::dense(10, 6, ParamGroup::New, &mut rng);
        let bound = glorot_bound(10, 6);
        assert!(layer.weights.data().iter().all(|w| w.abs() <= bound));
        assert!(layer.bias.data().iter().all(|&b| b == 0.0));
        assert_eq!(layer.dense_dims().unwrap(), (10, 6));
    }

    #[test]
    fn maxpool_validation() {
        assert!(LayerParams::maxpool(0, 1).validate().is_err());
        assert!(LayerParams::maxpool(3, 0).validate().is_err());
        assert!(LayerParams::maxpool(3, 1).validate().is_ok());
    }

    #[test]
    fn group_round_trips_through_hyper() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = LayerParams::conv3x3(2, 3, ParamGroup::Pretrained, &mut rng);
        assert_eq!(layer.group(), ParamGroup::Pretrained);
        assert_eq!(layer.conv_dims().unwrap(), (2, 3));
    }
}

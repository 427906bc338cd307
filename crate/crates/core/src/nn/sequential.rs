use super::ops::{self, PoolOutput};
use super::layer::{HYPER_STRIDE, HYPER_WINDOW};
use super::{join, GradBuffer, LayerKind, LayerParams, Tensor};
use crate::error::{Error, Result};

/// Activations recorded by [`forward_cached`] for the backward pass.
#[derive(Clone, Debug)]
pub struct StackCache {
    /// Input of every layer, then the final output.
    activations: Vec<Tensor>,
    /// Argmax records for pooling layers, indexed by layer position.
    pool_argmax: Vec<Option<Vec<usize>>>,
}

impl StackCache {
    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("cache holds at least the input")
    }
}

pub fn forward(layers: &[LayerParams], input: &Tensor) -> Result<Tensor> {
    let mut x = input.clone();
    for layer in layers {
        x = ops::layer_forward(&x, layer)?;
    }
    Ok(x)
}

pub fn forward_cached(layers: &[LayerParams], input: Tensor) -> Result<StackCache> {
    let mut activations = Vec::with_capacity(layers.len() + 1);
    let mut pool_argmax = Vec::with_capacity(layers.len());
    activations.push(input);
    for layer in layers {
        layer.validate()?;
        let x = activations.last().expect("nonempty");
        let (y, argmax) = match layer.kind {
            LayerKind::Maxpool => {
                let PoolOutput { output, argmax } = ops::maxpool_forward(
                    x,
                    layer.hyper(HYPER_WINDOW).unwrap_or(1),
                    layer.hyper(HYPER_STRIDE).unwrap_or(1),
                )?;
                (output, Some(argmax))
            }
            _ => (ops::layer_forward(x, layer)?, None),
        };
        activations.push(y);
        pool_argmax.push(argmax);
    }
    Ok(StackCache {
        activations,
        pool_argmax,
    })
}

/// Back-propagates `upstream` (gradient w.r.t. the stack output) through the
/// layers, returning parameter gradients named `{prefix}.{i}.weights|bias`
/// and, when requested, the gradient w.r.t. the stack input.
pub fn backward(
    layers: &[LayerParams],
    cache: &StackCache,
    upstream: Tensor,
    prefix: &str,
    grads: &mut GradBuffer,
    need_input_grad: bool,
) -> Result<Option<Tensor>> {
    if cache.activations.len() != layers.len() + 1 {
        return Err(Error::shape("stack backward", layers.len() + 1, cache.activations.len()));
    }
    let mut g = upstream;
    for (i, layer) in layers.iter().enumerate().rev() {
        let input = &cache.activations[i];
        let output = &cache.activations[i + 1];
        let want_input = need_input_grad || i > 0;
        let next = match layer.kind {
            LayerKind::Dense => {
                let lg = ops::dense_backward(input, layer, &g)?;
                let name = join(prefix, &i.to_string());
                grads.accumulate(join(&name, "weights"), &lg.weights)?;
                grads.accumulate(join(&name, "bias"), &lg.bias)?;
                lg.input
            }
            LayerKind::Conv3x3 => {
                let lg = ops::conv3x3_backward(input, layer, &g, want_input)?;
                let name = join(prefix, &i.to_string());
                grads.accumulate(join(&name, "weights"), &lg.weights)?;
                grads.accumulate(join(&name, "bias"), &lg.bias)?;
                lg.input
            }
            LayerKind::Relu => Some(ops::relu_backward(output, &g)),
            LayerKind::Maxpool => {
                let argmax = cache.pool_argmax[i].as_ref().expect("pool layer records argmax");
                Some(ops::maxpool_backward(input.shape(), argmax, &g)?)
            }
            LayerKind::Softmax => {
                let gs = ops::softmax_backward(output.data(), g.data());
                Some(Tensor::new(output.shape().to_vec(), gs)?)
            }
            LayerKind::BilinearResize | LayerKind::Concat => {
                return Err(Error::InvalidArgument(format!("{:?} is not a stack layer", layer.kind)))
            }
        };
        match next {
            Some(t) => g = t,
            None => return Ok(None),
        }
    }
    Ok(Some(g))
}

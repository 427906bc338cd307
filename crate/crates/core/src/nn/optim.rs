use std::collections::BTreeMap;

use super::{LayerParams, ParamGroup, Tensor};
use crate::error::{Error, Result};

/// Anything that owns named parameter blocks.
///
/// Block names are stable, dot-separated paths (`unary.0.net.hidden.weights`)
/// shared by gradient buffers and checkpoints.
pub trait Parameterized {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamGroup));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamGroup));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, t, _| n += t.len());
        n
    }

    fn param_sq_norm(&self) -> f64 {
        let mut n = 0.0;
        self.visit_params("", &mut |_, t, _| n += t.sq_norm());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Parameterized for LayerParams {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamGroup)) {
        if self.kind.has_params() {
            let group = self.group();
            f(&join(prefix, "weights"), &self.weights, group);
            f(&join(prefix, "bias"), &self.bias, group);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamGroup)) {
        if self.kind.has_params() {
            let group = self.group();
            f(&join(prefix, "weights"), &mut self.weights, group);
            f(&join(prefix, "bias"), &mut self.bias, group);
        }
    }
}

impl Parameterized for Vec<LayerParams> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamGroup)) {
        for (i, layer) in self.iter().enumerate() {
            layer.visit_params(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamGroup)) {
        for (i, layer) in self.iter_mut().enumerate() {
            layer.visit_params_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Accumulated gradients keyed by parameter block name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradBuffer {
    grads: BTreeMap<String, Tensor>,
    /// Number of gradient contributions merged into this buffer.
    pub count: usize,
}

impl GradBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `grad` into the block `name`, creating it on first use.
    pub fn accumulate(&mut self, name: impl Into<String>, grad: &Tensor) -> Result<()> {
        let name = name.into();
        match self.grads.get_mut(&name) {
            Some(existing) => existing.add_assign(grad),
            None => {
                self.grads.insert(name, grad.clone());
                Ok(())
            }
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.grads.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Merges every block of `other` into `self` and adds the counts.
    pub fn merge(&mut self, other: &GradBuffer) -> Result<()> {
        for (name, grad) in &other.grads {
            self.accumulate(name.clone(), grad)?;
        }
        self.count += other.count;
        Ok(())
    }

    /// Merges `other` with every block name prefixed by `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &GradBuffer) -> Result<()> {
        for (name, grad) in &other.grads {
            self.accumulate(join(prefix, name), grad)?;
        }
        self.count += other.count;
        Ok(())
    }

    /// Blocks whose name starts with `prefix.`, with the prefix stripped.
    pub fn sub_buffer(&self, prefix: &str) -> GradBuffer {
        let lead = format!("{prefix}.");
        GradBuffer {
            grads: self
                .grads
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&lead).map(|s| (s.to_owned(), v.clone())))
                .collect(),
            count: self.count,
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            g.scale(factor);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.grads.values().map(Tensor::sq_norm).sum()
    }
}

/// Learning rate per parameter group.
pub type GroupRates = BTreeMap<ParamGroup, f64>;

/// One plain SGD step with weight decay on every block present in `grads`:
/// `w <- w - lr_group * (g + weight_decay * w)`.
///
/// Blocks without a gradient entry are left untouched.
pub fn sgd_step<P: Parameterized + ?Sized>(
    params: &mut P,
    grads: &GradBuffer,
    rates: &GroupRates,
    weight_decay: f64,
) -> Result<()> {
    apply_update(params, grads, rates, |_, w, g, lr| {
        for (w, g) in w.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * (g + weight_decay * *w);
        }
    })
}

/// SGD with heavy-ball momentum and weight decay. Velocities persist per
/// block between steps: `v <- mu * v + (g + weight_decay * w)`,
/// `w <- w - lr_group * v`. With `mu = 0` this is [`sgd_step`].
#[derive(Clone, Debug, Default)]
pub struct Momentum {
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Momentum {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Momentum {
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    pub fn step<P: Parameterized + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &GradBuffer,
        rates: &GroupRates,
        weight_decay: f64,
    ) -> Result<()> {
        let mu = self.momentum;
        let velocity = &mut self.velocity;
        apply_update(params, grads, rates, |name, w, g, lr| {
            let v = velocity
                .entry(name.to_owned())
                .or_insert_with(|| Tensor::zeros(w.shape()));
            for ((w, g), v) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *v = mu * *v + (g + weight_decay * *w);
                *w -= lr * *v;
            }
        })
    }
}

/// Shared validation and dispatch of an update over the blocks in `grads`.
fn apply_update<P: Parameterized + ?Sized>(
    params: &mut P,
    grads: &GradBuffer,
    rates: &GroupRates,
    mut update: impl FnMut(&str, &mut Tensor, &Tensor, f64),
) -> Result<()> {
    if rates.values().any(|&r| !(r > 0.0)) {
        return Err(Error::InvalidArgument("learning rates must be positive".into()));
    }
    let mut failure = None;
    params.visit_params_mut("", &mut |name, tensor, group| {
        if failure.is_some() {
            return;
        }
        let Some(grad) = grads.get(name) else {
            return;
        };
        let Some(&lr) = rates.get(&group) else {
            failure = Some(Error::MissingGroupRate(group.to_string()));
            return;
        };
        if grad.shape() != tensor.shape() {
            failure = Some(Error::shape(
                "sgd_step",
                format!("{name} {:?}", tensor.shape()),
                format!("{:?}", grad.shape()),
            ));
            return;
        }
        update(name, tensor, grad, lr);
    });
    failure.map_or(Ok(()), Err)
}

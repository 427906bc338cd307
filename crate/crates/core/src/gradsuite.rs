//! Finite-difference gradient suite over every layer kind, the feature
//! extractor, the piecewise loss and the exact negative log-likelihood.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{LabelMask, Sample};
use crate::error::Result;
use crate::featmap::{self, FeatMapConfig, FeatMapNet, TrunkBlock};
use crate::graph::{RangeBoxSpec, RelationKind};
use crate::model::{ModelConfig, ModelParams};
use crate::nn::ops::{self, dot};
use crate::nn::{grad_check, grad_check_terms, sequential, GradBuffer, GradCheckConfig, GradCheckReport, LayerParams, ParamGroup, Parameterized, Tensor};
use crate::training::{full_nll_loss_and_grads, piecewise_loss_and_grads};

/// Named tensors treated as parameters, so input gradients can be checked
/// with the same machinery as weights.
#[derive(Clone, Debug)]
struct Inputs(Vec<(String, Tensor)>);

impl Parameterized for Inputs {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamGroup)) {
        for (name, t) in &self.0 {
            f(&crate::nn::join(prefix, name), t, ParamGroup::New);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamGroup)) {
        for (name, t) in &mut self.0 {
            f(&crate::nn::join(prefix, name), t, ParamGroup::New);
        }
    }
}

impl Inputs {
    fn get(&self, name: &str) -> &Tensor {
        &self.0.iter().find(|(n, _)| n == name).expect("known input").1
    }
}

/// Layer plus its input, checked jointly.
#[derive(Clone, Debug)]
struct LayerAndInput {
    layers: Vec<LayerParams>,
    input: Tensor,
}

impl Parameterized for LayerAndInput {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamGroup)) {
        self.layers.visit_params(&crate::nn::join(prefix, "layers"), f);
        f(&crate::nn::join(prefix, "input"), &self.input, ParamGroup::New);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamGroup)) {
        self.layers.visit_params_mut(&crate::nn::join(prefix, "layers"), f);
        f(&crate::nn::join(prefix, "input"), &mut self.input, ParamGroup::New);
    }
}

/// Uniform entries in `[-1, 1]` kept at least `margin` away from zero, so
/// ReLU kinks and pooling ties are not straddled by the finite differences.
fn random_tensor(shape: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(margin..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// One finished check.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

fn stack_check(layers: Vec<LayerParams>, input_shape: &[usize], rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let params = LayerAndInput {
        layers,
        input: random_tensor(input_shape, 0.05, rng),
    };
    let out_len = sequential::forward(&params.layers, &params.input)?.len();
    let target = random_tensor(&[out_len], 0.0, rng);
    grad_check(
        &params,
        |p: &LayerAndInput| {
            let cache = sequential::forward_cached(&p.layers, p.input.clone())?;
            let out = cache.output();
            let mut grads = GradBuffer::new();
            let up = Tensor::new(out.shape().to_vec(), target.data().to_vec())?;
            let gin = sequential::backward(&p.layers, &cache, up, "layers", &mut grads, true)?;
            grads.insert("input", gin.expect("input gradient requested"));
            Ok((dot(out.data(), target.data()), grads))
        },
        cfg,
    )
}

fn check_dense(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    stack_check(vec![LayerParams::dense(5, 3, ParamGroup::New, rng)], &[5], rng, cfg)
}

fn check_conv(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    stack_check(vec![LayerParams::conv3x3(2, 3, ParamGroup::Pretrained, rng)], &[4, 5, 2], rng, cfg)
}

fn check_relu(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    stack_check(vec![LayerParams::relu()], &[3, 4, 2], rng, cfg)
}

fn check_maxpool(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    stack_check(vec![LayerParams::maxpool(3, 1), LayerParams::maxpool(2, 2)], &[5, 6, 2], rng, cfg)
}

fn check_softmax_xent(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let params = Inputs(vec![("scores".into(), random_tensor(&[6], 0.0, rng))]);
    let target = rng.random_range(0..6);
    grad_check(
        &params,
        |p: &Inputs| {
            let (loss, g) = ops::softmax_cross_entropy(p.get("scores").data(), target);
            let mut grads = GradBuffer::new();
            grads.insert("scores", Tensor::from_vec(g));
            Ok((loss, grads))
        },
        cfg,
    )
}

fn check_bilinear(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let params = Inputs(vec![("image".into(), random_tensor(&[3, 4, 2], 0.0, rng))]);
    let target = random_tensor(&[7, 5, 2], 0.0, rng);
    grad_check(
        &params,
        |p: &Inputs| {
            let out = ops::bilinear_resize(p.get("image"), 7, 5)?;
            let mut grads = GradBuffer::new();
            grads.insert("image", ops::bilinear_resize_backward(&target, 3, 4)?);
            Ok((dot(out.data(), target.data()), grads))
        },
        cfg,
    )
}

fn check_concat(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let params = Inputs(vec![
        ("a".into(), random_tensor(&[3, 2, 2], 0.0, rng)),
        ("b".into(), random_tensor(&[3, 2, 3], 0.0, rng)),
    ]);
    let target = random_tensor(&[3, 2, 5], 0.0, rng);
    grad_check(
        &params,
        |p: &Inputs| {
            let out = ops::concat_channels(&[p.get("a"), p.get("b")])?;
            let parts = ops::split_channels(&target, &[2, 3])?;
            let mut grads = GradBuffer::new();
            grads.insert("a", parts[0].clone());
            grads.insert("b", parts[1].clone());
            Ok((dot(out.data(), target.data()), grads))
        },
        cfg,
    )
}

fn toy_featmap() -> FeatMapConfig {
    FeatMapConfig {
        scales: vec![1.0, 0.5],
        trunk_blocks: vec![TrunkBlock { layers: 1, channels: 3 }; 2],
        head_layers: 1,
        base_channels: 2,
        pyramid_windows: vec![3],
        downsample_factor: 2,
    }
}

/// Replaces the zero-initialized biases with random values. With zero biases
/// a unit whose receptive field is all zeros sits exactly on its ReLU kink,
/// where no finite difference can match the one-sided analytic gradient.
fn randomize_biases<P: Parameterized>(params: &mut P, rng: &mut ChaCha8Rng) {
    params.visit_params_mut("", &mut |name, t, _| {
        if name.ends_with("bias") {
            for v in t.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    });
}

fn check_featmap(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let fcfg = toy_featmap();
    let mut net = FeatMapNet::new(&fcfg, rng)?;
    randomize_biases(&mut net, rng);
    let image = random_tensor(&[8, 7, 3], 0.0, rng);
    let (fm, _) = featmap::extract_features_cached(&image, &net, &fcfg)?;
    let target = random_tensor(fm.values().shape(), 0.0, rng);
    grad_check_terms(
        &net,
        |n: &FeatMapNet| {
            let (fm, cache) = featmap::extract_features_cached(&image, n, &fcfg)?;
            let grads = featmap::backward(n, &cache, &target)?;
            let terms = fm.values().data().iter().zip(target.data()).map(|(a, b)| a * b).collect();
            Ok((terms, grads))
        },
        cfg,
    )
}

/// Small model and labeled image used by the loss checks.
pub fn toy_problem(num_classes: usize, seed: u64) -> Result<(ModelParams, Sample)> {
    let config = ModelConfig {
        num_classes,
        hidden_units: 4,
        relations: vec![
            RangeBoxSpec::new(RelationKind::Surrounding, 1.0),
            RangeBoxSpec::new(RelationKind::AboveBelow, 1.0),
        ],
        featmap: toy_featmap(),
        ..ModelConfig::default()
    };
    let model = ModelParams::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (h, w) = (6, 6);
    let image = Tensor::new(vec![h, w, 3], (0..h * w * 3).map(|_| rng.random::<f64>()).collect())?;
    let labels = (0..h * w).map(|_| rng.random_range(0..num_classes) as u8).collect();
    Ok((model, Sample::new("toy", image, LabelMask::new(h, w, labels)?)?))
}

fn check_piecewise(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (mut model, sample) = toy_problem(3, seed)?;
    randomize_biases(&mut model, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5));
    grad_check_terms(
        &model,
        |m: &ModelParams| {
            let (l, g) = piecewise_loss_and_grads(m, &sample)?;
            Ok((l.unary_terms.iter().copied().chain(l.pairwise_terms.iter().map(|t| t.1)).collect(), g))
        },
        cfg,
    )
}

fn check_full_nll(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (mut model, sample) = toy_problem(2, seed)?;
    randomize_biases(&mut model, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5));
    grad_check(&model, |m: &ModelParams| full_nll_loss_and_grads(m, &sample), cfg)
}

/// Names of the checks, in execution order.
pub const CHECKS: [&str; 10] = [
    "dense", "conv3x3", "relu", "maxpool", "softmax_xent", "bilinear", "concat", "featmap", "piecewise", "full_nll",
];

/// Runs every check once per seed.
pub fn run_suite(seeds: &[u64], cfg: &GradCheckConfig) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for name in CHECKS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let report = match name {
                "dense" => check_dense(&mut rng, cfg)?,
                "conv3x3" => check_conv(&mut rng, cfg)?,
                "relu" => check_relu(&mut rng, cfg)?,
                "maxpool" => check_maxpool(&mut rng, cfg)?,
                "softmax_xent" => check_softmax_xent(&mut rng, cfg)?,
                "bilinear" => check_bilinear(&mut rng, cfg)?,
                "concat" => check_concat(&mut rng, cfg)?,
                "featmap" => check_featmap(&mut rng, cfg)?,
                "piecewise" => check_piecewise(seed, cfg)?,
                _ => check_full_nll(seed, cfg)?,
            };
            out.push(SuiteEntry { name, seed, report });
        }
    }
    Ok(out)
}

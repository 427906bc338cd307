//! End-to-end prediction, evaluation and the ablation / ensemble studies.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::{evaluate, gen_synthetic, Evaluation, LabelMask, Sample, SynthSpec};
use crate::error::Result;
use crate::featmap::{FeatMapConfig, TrunkBlock};
use crate::graph::{RangeBoxSpec, RelationKind};
use crate::inference::{coarse_score_map, mean_field};
use crate::model::ModelParams;
use crate::nn::Tensor;
use crate::refine::{local_refine, upsample_scores, RefineConfig};
use crate::training::{train, LearningRates, StepStats, TrainConfig};

pub struct Prediction {
    pub labels: LabelMask,
    /// Node marginals on the feature-map grid, `h x w x K`.
    pub coarse: Tensor,
}

/// Mean-field marginals, upsampling and (optionally) refinement.
pub fn predict(model: &ModelParams, image: &Tensor, train: &TrainConfig, refine: &RefineConfig) -> Result<Prediction> {
    let (h, w, _) = image.dims3()?;
    let fwd = model.potentials(image)?;
    let q = mean_field(&fwd.table, &fwd.graph, train.mean_field_iterations, train.mean_field_damping)?;
    let coarse = coarse_score_map(&q, &fwd.graph, fwd.graph.height, fwd.graph.width)?;
    let scores = upsample_scores(&coarse, h, w)?;
    Ok(Prediction {
        labels: local_refine(&scores, image, refine)?,
        coarse,
    })
}

pub fn predict_all(model: &ModelParams, samples: &[Sample], train: &TrainConfig, refine: &RefineConfig) -> Result<Vec<Prediction>> {
    samples
        .par_iter()
        .map(|s| predict(model, &s.image, train, refine))
        .collect()
}

pub fn evaluate_model(model: &ModelParams, samples: &[Sample], train: &TrainConfig, refine: &RefineConfig) -> Result<Evaluation> {
    let preds = predict_all(model, samples, train, refine)?;
    let labels: Vec<LabelMask> = preds.into_iter().map(|p| p.labels).collect();
    let truth: Vec<LabelMask> = samples.iter().map(|s| s.mask.clone()).collect();
    evaluate(&labels, &truth, model.num_classes())
}

/// Builds a model from `config` and trains it.
pub fn train_model(config: &RunConfig, data: &[Sample], log: Option<&mut dyn Write>) -> Result<(ModelParams, Vec<StepStats>)> {
    config.validate()?;
    let mut model = ModelParams::new(config.model.clone(), config.seed)?;
    let stats = train(&mut model, data, &config.train, log)?;
    Ok((model, stats))
}

/// Settings for the synthetic ablation and ensemble studies: a feature
/// extractor small enough to train on one CPU core in minutes, an
/// above/below range box tall enough to reach from the top of an object to
/// the context under it, and a pairwise weight that offsets the number of
/// edges meeting at a node.
pub fn synthetic_study_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.hidden_units = 32;
    cfg.model.pairwise_weight = 0.1;
    cfg.model.relations = vec![
        RangeBoxSpec::new(RelationKind::Surrounding, 0.4),
        RangeBoxSpec::new(RelationKind::AboveBelow, 0.75),
    ];
    cfg.model.featmap = FeatMapConfig {
        scales: vec![1.0, 0.8],
        trunk_blocks: vec![TrunkBlock { layers: 1, channels: 8 }; 2],
        head_layers: 1,
        base_channels: 8,
        pyramid_windows: vec![5],
        downsample_factor: 4,
    };
    cfg.train.epochs = 30;
    cfg.train.batch_size = 4;
    cfg.train.weight_decay = 1e-4;
    cfg.train.mean_field_iterations = 10;
    cfg.train.learning_rates = LearningRates { pretrained: 0.01, new: 0.01 };
    cfg.refine.color_bandwidth = 40.0;
    cfg
}

/// Training and test sets drawn from `config.synth` with `config.seed`:
/// `synth.num_images` training images, then a quarter as many test images.
pub fn synthetic_split(config: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let n = config.synth.num_images;
    let spec = SynthSpec {
        num_images: n + (n / 4).max(1),
        ..config.synth.clone()
    };
    let mut data = gen_synthetic(&spec, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
    let test = data.split_off(n);
    Ok((data, test))
}

/// Row names of the ablation table.
pub const ABLATION_ROWS: [&str; 5] = ["baseline", "+pyramid", "+multiscale", "+refine", "+pairwise"];

/// The cumulative config deltas of the ablation, starting from `base`:
/// single scale, no pyramid pooling, no refinement and no pairwise
/// potentials, then adding each back in turn.
pub fn ablation_configs(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let mut cfg = base.clone();
    cfg.model.featmap.scales = vec![1.0];
    cfg.model.featmap.pyramid_windows.clear();
    cfg.model.relations.clear();
    cfg.refine.enabled = false;
    let mut rows = vec![(ABLATION_ROWS[0], cfg.clone())];
    cfg.model.featmap.pyramid_windows = base.model.featmap.pyramid_windows.clone();
    rows.push((ABLATION_ROWS[1], cfg.clone()));
    cfg.model.featmap.scales = base.model.featmap.scales.clone();
    rows.push((ABLATION_ROWS[2], cfg.clone()));
    cfg.refine.enabled = true;
    rows.push((ABLATION_ROWS[3], cfg.clone()));
    cfg.model.relations = base.model.relations.clone();
    rows.push((ABLATION_ROWS[4], cfg));
    rows
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: &'static str,
    pub evaluation: Evaluation,
    /// Mean IoU over the two context-ambiguous synthetic classes.
    pub ambiguous_iou: f64,
}

fn ambiguous_iou(e: &Evaluation) -> f64 {
    e.confusion.mean_iou_over(&SynthSpec::ambiguous_classes()).unwrap_or(0.0)
}

/// Trains and evaluates every ablation row. Rows that differ only in
/// inference settings share one trained model.
pub fn run_ablation(base: &RunConfig, train_set: &[Sample], test_set: &[Sample]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    let mut previous: Option<(RunConfig, ModelParams)> = None;
    for (name, cfg) in ablation_configs(base) {
        let model = match &previous {
            Some((prev, model)) if prev.model == cfg.model && prev.train == cfg.train && prev.seed == cfg.seed => model.clone(),
            _ => train_model(&cfg, train_set, None)?.0,
        };
        let evaluation = evaluate_model(&model, test_set, &cfg.train, &cfg.refine)?;
        log::info!("ablation {name}: iou {:.4}", evaluation.iou);
        rows.push(AblationRow {
            name,
            ambiguous_iou: ambiguous_iou(&evaluation),
            evaluation,
        });
        previous = Some((cfg, model));
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("setting\tpixel_acc\tmean_acc\tiou\tambiguous_iou\n");
    for r in rows {
        let e = &r.evaluation;
        s.push_str(&format!(
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
            r.name, e.pixel_acc, e.mean_acc, e.iou, r.ambiguous_iou
        ));
    }
    s
}

/// Two unary potentials against one unary plus one pairwise potential
/// (the above/below relation when `base` has it).
pub fn ensemble_configs(base: &RunConfig) -> (RunConfig, RunConfig) {
    let mut two_unary = base.clone();
    two_unary.model.unary_count = 2;
    two_unary.model.relations.clear();
    let mut with_pairwise = base.clone();
    with_pairwise.model.unary_count = 1;
    let relation = base
        .model
        .relations
        .iter()
        .find(|r| r.kind == RelationKind::AboveBelow)
        .or(base.model.relations.first())
        .copied();
    with_pairwise.model.relations = relation.into_iter().collect();
    (two_unary, with_pairwise)
}

#[derive(Clone, Debug)]
pub struct EnsembleComparison {
    pub seeds: Vec<u64>,
    pub two_unary_iou: Vec<f64>,
    pub unary_pairwise_iou: Vec<f64>,
}

impl EnsembleComparison {
    pub fn means(&self) -> (f64, f64) {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        (mean(&self.two_unary_iou), mean(&self.unary_pairwise_iou))
    }
}

pub fn run_ensemble_comparison(base: &RunConfig, seeds: &[u64], train_set: &[Sample], test_set: &[Sample]) -> Result<EnsembleComparison> {
    let (two, pair) = ensemble_configs(base);
    let mut out = EnsembleComparison {
        seeds: seeds.to_vec(),
        two_unary_iou: Vec::new(),
        unary_pairwise_iou: Vec::new(),
    };
    for &seed in seeds {
        for (cfg, sink) in [(&two, &mut out.two_unary_iou), (&pair, &mut out.unary_pairwise_iou)] {
            let mut cfg = cfg.clone();
            cfg.set_seed(seed);
            let (model, _) = train_model(&cfg, train_set, None)?;
            sink.push(evaluate_model(&model, test_set, &cfg.train, &cfg.refine)?.iou);
        }
    }
    Ok(out)
}

//! Piecewise-likelihood training, the exact negative log-likelihood on tiny
//! graphs, the asynchronous sub-iteration schedule and data augmentation.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{flip_image, LabelMask, Sample, VOID};
use crate::error::{Error, Result};
use crate::featmap::{self, scaled_extent, FeatCache, FeatureMap};
use crate::graph::{CrfGraph, Edge, RelationKind};
use crate::inference::exact_inference;
use crate::model::ModelParams;
use crate::nn::{bilinear_resize, softmax_cross_entropy, GradBuffer, GroupRates, Momentum, ParamGroup, Parameterized, Tensor};
use crate::potentials::{
    energy, pairwise_backward_batch, pairwise_forward_batch, unary_backward_batch, unary_forward_batch, PotentialTable,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    /// Feature-extractor trunk.
    pub pretrained: f64,
    /// Extractor heads, Unary-Net and Pairwise-Net.
    pub new: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            pretrained: 0.0001,
            new: 0.001,
        }
    }
}

impl LearningRates {
    pub fn group_rates(&self) -> GroupRates {
        GroupRates::from([(ParamGroup::Pretrained, self.pretrained), (ParamGroup::New, self.new)])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augmentation {
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip: bool,
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation {
            scale_min: 0.7,
            scale_max: 1.2,
            flip: true,
        }
    }
}

impl Augmentation {
    pub fn none() -> Self {
        Augmentation {
            scale_min: 1.0,
            scale_max: 1.0,
            flip: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub weight_decay: f64,
    pub momentum: f64,
    pub learning_rates: LearningRates,
    pub epochs: usize,
    /// Images per outer iteration.
    pub batch_size: usize,
    /// Pairwise connections per asynchronous sub-iteration.
    pub sub_iteration_edge_budget: usize,
    /// Mean-field sweeps and damping used at prediction time.
    pub mean_field_iterations: usize,
    pub mean_field_damping: f64,
    pub augmentation: Augmentation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weight_decay: 0.0005,
            momentum: 0.9,
            learning_rates: LearningRates::default(),
            epochs: 1,
            batch_size: 1,
            sub_iteration_edge_budget: 2000,
            mean_field_iterations: 3,
            mean_field_damping: 0.0,
            augmentation: Augmentation::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.augmentation;
        let problems = [
            (!(self.weight_decay >= 0.0), "weight_decay must be >= 0"),
            (!(0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1)"),
            (self.batch_size == 0, "batch_size must be >= 1"),
            (self.sub_iteration_edge_budget == 0, "sub_iteration_edge_budget must be >= 1"),
            (self.mean_field_iterations == 0, "mean_field_iterations must be >= 1"),
            (!(0.0..1.0).contains(&self.mean_field_damping), "mean_field_damping must lie in [0, 1)"),
            (!(a.scale_min > 0.0 && a.scale_min <= a.scale_max), "need 0 < scale_min <= scale_max"),
            (
                !(self.learning_rates.pretrained > 0.0 && self.learning_rates.new > 0.0),
                "learning rates must be positive",
            ),
        ];
        match problems.iter().find(|(bad, _)| *bad) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }
}

/// Per-factor negative log-likelihoods of the piecewise objective.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FactorLoss {
    /// One term per (unary potential, labeled node).
    pub unary_terms: Vec<f64>,
    /// One term per labeled edge.
    pub pairwise_terms: Vec<(RelationKind, f64)>,
    pub total: f64,
}

impl FactorLoss {
    pub fn unary_sum(&self) -> f64 {
        self.unary_terms.iter().sum()
    }

    pub fn pairwise_sum(&self, kind: RelationKind) -> f64 {
        self.pairwise_terms.iter().filter(|t| t.0 == kind).map(|t| t.1).sum()
    }

    pub fn pairwise_count(&self, kind: RelationKind) -> usize {
        self.pairwise_terms.iter().filter(|t| t.0 == kind).count()
    }
}

/// Which factor families a loss includes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Factors {
    All,
    UnaryOnly,
    PairwiseOnly,
}

/// Ground-truth label of each feature-map node: the most frequent mask
/// value in the node's cell (ties to the lower value), `None` when that is
/// void.
pub fn node_labels(mask: &LabelMask, height: usize, width: usize) -> Vec<Option<usize>> {
    let span = |i: usize, n: usize, total: usize| {
        let lo = (i * total / n).min(total - 1);
        (lo, ((i + 1) * total / n).max(lo + 1))
    };
    let mut counts = [0u32; 256];
    let mut labels = Vec::with_capacity(height * width);
    for r in 0..height {
        let (r0, r1) = span(r, height, mask.height());
        for c in 0..width {
            let (c0, c1) = span(c, width, mask.width());
            counts.fill(0);
            for rr in r0..r1 {
                for cc in c0..c1 {
                    counts[mask.get(rr, cc) as usize] += 1;
                }
            }
            let best = (0..256).fold(0, |b, v| if counts[v] > counts[b] { v } else { b });
            labels.push((best != VOID as usize).then_some(best));
        }
    }
    labels
}

fn labeled_pairs(graph: &CrfGraph, kind: RelationKind, labels: &[Option<usize>]) -> Vec<usize> {
    graph
        .edges_of(kind)
        .filter(|(_, e)| labels[e.p].is_some() && labels[e.q].is_some())
        .map(|(i, _)| i)
        .collect()
}

/// Unary piece of one potential: summed cross-entropy and its gradients
/// (`net.*`, `featmap.*` relative to the potential).
fn unary_piece(
    net: &crate::potentials::Mlp,
    featnet: &featmap::FeatMapNet,
    fm: &FeatureMap,
    cache: &FeatCache,
    labels: &[Option<usize>],
    model: &ModelParams,
) -> Result<(Vec<f64>, GradBuffer)> {
    let k = model.num_classes();
    let batch = unary_forward_batch(net, fm)?;
    let mut terms = Vec::new();
    let mut d_scores = vec![0.0; batch.scores.len()];
    for (p, label) in labels.iter().enumerate() {
        if let Some(y) = *label {
            let (loss, g) = softmax_cross_entropy(&batch.scores[p * k..(p + 1) * k], y);
            terms.push(loss);
            d_scores[p * k..(p + 1) * k].copy_from_slice(&g);
        }
    }
    let (net_grads, d_fm) = unary_backward_batch(net, fm, &batch, &d_scores)?;
    let mut grads = GradBuffer::new();
    grads.merge_prefixed("net", &net_grads)?;
    grads.merge_prefixed("featmap", &featmap::backward(featnet, cache, &d_fm)?)?;
    Ok((terms, grads))
}

/// Pairwise cross-entropy over the edges `edge_ids` of one relation:
/// terms, net gradients and the feature-map gradient.
fn pairwise_piece(
    net: &crate::potentials::Mlp,
    fm: &FeatureMap,
    graph: &CrfGraph,
    edge_ids: &[usize],
    labels: &[Option<usize>],
    k: usize,
) -> Result<(Vec<f64>, GradBuffer, Tensor)> {
    let pairs: Vec<(usize, usize)> = edge_ids.iter().map(|&i| (graph.edges[i].p, graph.edges[i].q)).collect();
    let batch = pairwise_forward_batch(net, fm, &pairs)?;
    let kk = k * k;
    let mut terms = Vec::with_capacity(pairs.len());
    let mut d_scores = vec![0.0; batch.scores.len()];
    for (j, &(p, q)) in pairs.iter().enumerate() {
        let (yp, yq) = (labels[p].expect("labeled edge"), labels[q].expect("labeled edge"));
        let (loss, g) = softmax_cross_entropy(&batch.scores[j * kk..(j + 1) * kk], yp * k + yq);
        terms.push(loss);
        d_scores[j * kk..(j + 1) * kk].copy_from_slice(&g);
    }
    let (grads, d_fm) = pairwise_backward_batch(net, fm, &batch, &d_scores)?;
    Ok((terms, grads, d_fm))
}

/// Piecewise objective of one sample: `-log P_U(y_p)` per labeled node and
/// unary potential plus `-log P_V(y_p, y_q)` per labeled edge, each a
/// softmax over the raw network scores. Returns summed (not averaged)
/// loss and gradients.
pub fn piecewise_loss_and_grads(model: &ModelParams, sample: &Sample) -> Result<(FactorLoss, GradBuffer)> {
    piecewise_loss_and_grads_with(model, sample, Factors::All)
}

pub fn piecewise_loss_and_grads_with(
    model: &ModelParams,
    sample: &Sample,
    factors: Factors,
) -> Result<(FactorLoss, GradBuffer)> {
    let graph = model.graph_for(sample.height(), sample.width())?;
    let labels = node_labels(&sample.mask, graph.height, graph.width);
    let fcfg = &model.config.featmap;
    let k = model.num_classes();
    let mut loss = FactorLoss::default();
    let mut grads = GradBuffer::new();
    if factors != Factors::PairwiseOnly {
        for (i, u) in model.unaries.iter().enumerate() {
            let (fm, cache) = featmap::extract_features_cached(&sample.image, &u.featmap, fcfg)?;
            let (terms, g) = unary_piece(&u.net, &u.featmap, &fm, &cache, &labels, model)?;
            loss.unary_terms.extend(terms);
            grads.merge_prefixed(&format!("unary.{i}"), &g)?;
        }
    }
    if factors != Factors::UnaryOnly {
        for pw in &model.pairwise {
            let ids = labeled_pairs(&graph, pw.kind, &labels);
            if ids.is_empty() {
                continue;
            }
            let (fm, cache) = featmap::extract_features_cached(&sample.image, &pw.featmap, fcfg)?;
            let (terms, net_grads, d_fm) = pairwise_piece(&pw.net, &fm, &graph, &ids, &labels, k)?;
            loss.pairwise_terms.extend(terms.into_iter().map(|t| (pw.kind, t)));
            let prefix = format!("pairwise.{}", pw.kind);
            grads.merge_prefixed(&format!("{prefix}.net"), &net_grads)?;
            grads.merge_prefixed(
                &format!("{prefix}.featmap"),
                &featmap::backward(&pw.featmap, &cache, &d_fm)?,
            )?;
        }
    }
    if loss.unary_terms.is_empty() && loss.pairwise_terms.is_empty() {
        return Err(Error::EmptyLoss);
    }
    loss.total = loss.unary_sum() + loss.pairwise_terms.iter().map(|t| t.1).sum::<f64>();
    Ok((loss, grads))
}

/// Exact `E(y) + log Z` over the labeled nodes and the factors among them,
/// with its gradient with respect to every table entry (zero for dropped
/// factors): node/edge marginal minus the observed indicator.
pub fn full_nll_table(table: &PotentialTable, graph: &CrfGraph, labels: &[Option<usize>]) -> Result<(f64, PotentialTable)> {
    table.check_graph(graph)?;
    if labels.len() != graph.num_nodes() {
        return Err(Error::shape("full_nll labels", graph.num_nodes(), labels.len()));
    }
    let k = table.num_classes;
    let kk = k * k;
    let mut remap = vec![usize::MAX; labels.len()];
    let kept: Vec<usize> = (0..labels.len()).filter(|&p| labels[p].is_some()).collect();
    if kept.is_empty() {
        return Err(Error::EmptyLoss);
    }
    for (i, &p) in kept.iter().enumerate() {
        remap[p] = i;
    }
    let kept_edges: Vec<usize> = (0..graph.edges.len())
        .filter(|&e| labels[graph.edges[e].p].is_some() && labels[graph.edges[e].q].is_some())
        .collect();
    let sub_graph = CrfGraph::from_edges(
        kept.len(),
        kept_edges
            .iter()
            .map(|&e| {
                let edge = &graph.edges[e];
                Edge {
                    p: remap[edge.p],
                    q: remap[edge.q],
                    kind: edge.kind,
                }
            })
            .collect(),
        k,
    )?;
    let mut sub = PotentialTable::zeros(kept.len(), kept_edges.len(), k);
    for (i, &p) in kept.iter().enumerate() {
        sub.unary[i * k..(i + 1) * k].copy_from_slice(table.unary(p));
    }
    for (j, &e) in kept_edges.iter().enumerate() {
        sub.pairwise[j * kk..(j + 1) * kk].copy_from_slice(table.pairwise(e));
    }
    let y: Vec<usize> = kept.iter().map(|&p| labels[p].expect("kept")).collect();
    let exact = exact_inference(&sub, &sub_graph)?;
    let loss = energy(&y, &sub, &sub_graph)? + exact.log_partition;

    let mut grad = PotentialTable::zeros(graph.num_nodes(), graph.edges.len(), k);
    for (i, &p) in kept.iter().enumerate() {
        let g = &mut grad.unary[p * k..(p + 1) * k];
        g.copy_from_slice(exact.marginals.node(i));
        g[y[i]] -= 1.0;
    }
    for (j, &e) in kept_edges.iter().enumerate() {
        let g = &mut grad.pairwise[e * kk..(e + 1) * kk];
        g.copy_from_slice(&exact.pairwise_marginals[j * kk..(j + 1) * kk]);
        let edge = &sub_graph.edges[j];
        g[y[edge.p] * k + y[edge.q]] -= 1.0;
    }
    Ok((loss, grad))
}

/// Exact negative log-likelihood `E(y, x) + log Z(x)` of one sample under
/// the full model, back-propagated into every network.
pub fn full_nll_loss_and_grads(model: &ModelParams, sample: &Sample) -> Result<(f64, GradBuffer)> {
    let fwd = model.potentials(&sample.image)?;
    let labels = node_labels(&sample.mask, fwd.graph.height, fwd.graph.width);
    let (loss, d_table) = full_nll_table(&fwd.table, &fwd.graph, &labels)?;
    let k = model.num_classes();
    let kk = k * k;
    let mut grads = GradBuffer::new();
    let uw = model.config.unary_weight;
    let d_unary: Vec<f64> = d_table.unary.iter().map(|g| uw * g).collect();
    for (i, (u, (fm, cache))) in model.unaries.iter().zip(&fwd.unary_maps).enumerate() {
        let batch = unary_forward_batch(&u.net, fm)?;
        let (net_grads, d_fm) = unary_backward_batch(&u.net, fm, &batch, &d_unary)?;
        grads.merge_prefixed(&format!("unary.{i}.net"), &net_grads)?;
        grads.merge_prefixed(&format!("unary.{i}.featmap"), &featmap::backward(&u.featmap, cache, &d_fm)?)?;
    }
    let pw_weight = model.config.pairwise_weight;
    for (pw, (fm, cache)) in model.pairwise.iter().zip(&fwd.pairwise_maps) {
        let ids: Vec<usize> = fwd.graph.edges_of(pw.kind).map(|(i, _)| i).collect();
        let pairs: Vec<(usize, usize)> = ids.iter().map(|&i| (fwd.graph.edges[i].p, fwd.graph.edges[i].q)).collect();
        let batch = pairwise_forward_batch(&pw.net, fm, &pairs)?;
        let mut d_scores = Vec::with_capacity(ids.len() * kk);
        for &i in &ids {
            d_scores.extend(d_table.pairwise[i * kk..(i + 1) * kk].iter().map(|g| pw_weight * g));
        }
        let (net_grads, d_fm) = pairwise_backward_batch(&pw.net, fm, &batch, &d_scores)?;
        let prefix = format!("pairwise.{}", pw.kind);
        grads.merge_prefixed(&format!("{prefix}.net"), &net_grads)?;
        grads.merge_prefixed(&format!("{prefix}.featmap"), &featmap::backward(&pw.featmap, cache, &d_fm)?)?;
    }
    Ok((loss, grads))
}

/// Random rescale (bilinear image, nearest-neighbour mask) followed by a
/// horizontal flip with probability one half.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, aug: &Augmentation, rng: &mut R) -> Result<Sample> {
    let scale = if aug.scale_min < aug.scale_max {
        rng.random_range(aug.scale_min..=aug.scale_max)
    } else {
        aug.scale_min
    };
    let flip = aug.flip && rng.random_bool(0.5);
    let (h, w) = (scaled_extent(sample.height(), scale), scaled_extent(sample.width(), scale));
    let (mut image, mut mask) = if (h, w) == (sample.height(), sample.width()) {
        (sample.image.clone(), sample.mask.clone())
    } else {
        (bilinear_resize(&sample.image, h, w)?, sample.mask.resize_nearest(h, w))
    };
    if flip {
        image = flip_image(&image)?;
        mask = mask.flip_horizontal();
    }
    Sample::new(sample.id.clone(), image, mask)
}

/// Summary of one outer iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub unary_loss_mean: f64,
    pub pairwise_loss_mean: Vec<(RelationKind, f64)>,
    pub sub_iterations: usize,
    pub param_norm: f64,
}

struct ImageState {
    graph: CrfGraph,
    labels: Vec<Option<usize>>,
    unary_terms: Vec<f64>,
    unary_grads: GradBuffer,
    pair_maps: Vec<(FeatureMap, FeatCache)>,
}

fn prepare_image(model: &ModelParams, sample: &Sample) -> Result<ImageState> {
    let graph = model.graph_for(sample.height(), sample.width())?;
    let labels = node_labels(&sample.mask, graph.height, graph.width);
    let fcfg = &model.config.featmap;
    let mut unary_terms = Vec::new();
    let mut unary_grads = GradBuffer::new();
    for (i, u) in model.unaries.iter().enumerate() {
        let (fm, cache) = featmap::extract_features_cached(&sample.image, &u.featmap, fcfg)?;
        let (terms, g) = unary_piece(&u.net, &u.featmap, &fm, &cache, &labels, model)?;
        unary_terms.extend(terms);
        unary_grads.merge_prefixed(&format!("unary.{i}"), &g)?;
    }
    let pair_maps = model
        .pairwise
        .iter()
        .map(|pw| featmap::extract_features_cached(&sample.image, &pw.featmap, fcfg))
        .collect::<Result<_>>()?;
    Ok(ImageState {
        graph,
        labels,
        unary_terms,
        unary_grads,
        pair_maps,
    })
}

/// One outer iteration of the asynchronous schedule.
///
/// Feature maps are computed once. For each relation, the labeled edges of
/// the whole batch are shuffled and cut into sub-iterations of at most
/// `sub_iteration_edge_budget` edges; the Pairwise-Net is updated after each
/// sub-iteration while feature-map gradients are collected. Finally one
/// update is applied to every feature extractor and Unary-Net. Gradients
/// are averaged over the factors they come from; `optimizer` carries the
/// momentum state between updates.
pub fn train_step_async<R: Rng + ?Sized>(
    batch: &[Sample],
    model: &mut ModelParams,
    config: &TrainConfig,
    optimizer: &mut Momentum,
    rng: &mut R,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let rates = config.learning_rates.group_rates();
    let k = model.num_classes();
    let frozen: &ModelParams = model;
    let states = batch
        .par_iter()
        .map(|s| prepare_image(frozen, s))
        .collect::<Result<Vec<_>>>()?;

    let mut deferred = GradBuffer::new();
    let unary_count: usize = states.iter().map(|s| s.unary_terms.len()).sum();
    let unary_loss: f64 = states.iter().flat_map(|s| &s.unary_terms).sum();
    if unary_count > 0 {
        for s in &states {
            deferred.merge(&s.unary_grads)?;
        }
        deferred.scale(1.0 / unary_count as f64);
    }

    let mut pairwise_loss_mean = Vec::new();
    let mut sub_iterations = 0;
    for j in 0..model.pairwise.len() {
        let kind = model.pairwise[j].kind;
        let mut order: Vec<(usize, usize)> = states
            .iter()
            .enumerate()
            .flat_map(|(img, s)| labeled_pairs(&s.graph, kind, &s.labels).into_iter().map(move |e| (img, e)))
            .collect();
        if order.is_empty() {
            continue;
        }
        order.shuffle(rng);
        let total = order.len();
        let mut d_maps: Vec<Option<Tensor>> = vec![None; states.len()];
        let mut loss_sum = 0.0;
        let net_prefix = format!("pairwise.{kind}.net");
        for chunk in order.chunks(config.sub_iteration_edge_budget) {
            let net = &model.pairwise[j].net;
            let pieces = states
                .par_iter()
                .enumerate()
                .map(|(img, state)| {
                    let ids: Vec<usize> = chunk.iter().filter(|c| c.0 == img).map(|c| c.1).collect();
                    if ids.is_empty() {
                        return Ok(None);
                    }
                    pairwise_piece(net, &state.pair_maps[j].0, &state.graph, &ids, &state.labels, k).map(Some)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut net_grads = GradBuffer::new();
            for (img, piece) in pieces.into_iter().enumerate() {
                let Some((terms, g, d_fm)) = piece else {
                    continue;
                };
                loss_sum += terms.iter().sum::<f64>();
                net_grads.merge(&g)?;
                match &mut d_maps[img] {
                    Some(acc) => acc.add_assign(&d_fm)?,
                    slot => *slot = Some(d_fm),
                }
            }
            net_grads.scale(1.0 / chunk.len() as f64);
            let mut named = GradBuffer::new();
            named.merge_prefixed(&net_prefix, &net_grads)?;
            optimizer.step(model, &named, &rates, config.weight_decay)?;
            sub_iterations += 1;
        }
        pairwise_loss_mean.push((kind, loss_sum / total as f64));
        let featnet = &model.pairwise[j].featmap;
        let extractor_grads = states
            .par_iter()
            .zip(d_maps)
            .filter_map(|(s, d)| d.map(|d| featmap::backward(featnet, &s.pair_maps[j].1, &d)))
            .collect::<Result<Vec<_>>>()?;
        let mut sum = GradBuffer::new();
        for g in &extractor_grads {
            sum.merge(g)?;
        }
        sum.scale(1.0 / total as f64);
        deferred.merge_prefixed(&format!("pairwise.{kind}.featmap"), &sum)?;
    }
    optimizer.step(model, &deferred, &rates, config.weight_decay)?;
    Ok(StepStats {
        unary_loss_mean: if unary_count > 0 { unary_loss / unary_count as f64 } else { 0.0 },
        pairwise_loss_mean,
        sub_iterations,
        param_norm: model.param_sq_norm().sqrt(),
    })
}

/// Tab-separated training log header for a model's relations.
pub fn log_header(model: &ModelParams) -> String {
    let mut cols = vec!["iteration".to_owned(), "unary_loss".to_owned()];
    cols.extend(model.pairwise.iter().map(|p| format!("pairwise_loss.{}", p.kind)));
    cols.extend(["param_norm".to_owned(), "wall_seconds".to_owned()]);
    cols.join("\t")
}

fn log_line(iteration: usize, stats: &StepStats, model: &ModelParams, seconds: f64) -> String {
    let mut cols = vec![iteration.to_string(), format!("{:.6}", stats.unary_loss_mean)];
    for p in &model.pairwise {
        let v = stats.pairwise_loss_mean.iter().find(|(k, _)| *k == p.kind).map(|(_, v)| *v);
        cols.push(v.map_or_else(|| "NA".to_owned(), |v| format!("{v:.6}")));
    }
    cols.push(format!("{:.6}", stats.param_norm));
    cols.push(format!("{seconds:.3}"));
    cols.join("\t")
}

/// Runs `config.epochs` passes over `data` in seeded shuffled order, one
/// augmented batch per outer iteration. Writes one log line per iteration.
pub fn train(
    model: &mut ModelParams,
    data: &[Sample],
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<StepStats>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Momentum::new(config.momentum)?;
    let start = Instant::now();
    let mut history = Vec::new();
    let log_io = |e| Error::io("<training log>", e);
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{}", log_header(model)).map_err(log_io)?;
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for ids in order.chunks(config.batch_size) {
            let batch = ids
                .iter()
                .map(|&i| augment(&data[i], &config.augmentation, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let stats = train_step_async(&batch, model, config, &mut optimizer, &mut rng)?;
            if let Some(w) = log.as_deref_mut() {
                let line = log_line(history.len(), &stats, model, start.elapsed().as_secs_f64());
                writeln!(w, "{line}").map_err(log_io)?;
            }
            log::debug!("iteration {} unary {:.4}", history.len(), stats.unary_loss_mean);
            history.push(stats);
        }
    }
    Ok(history)
}

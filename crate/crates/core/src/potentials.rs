//! Unary-Net and Pairwise-Net heads, potential tables and the CRF energy.
//!
//! Networks output scores `z`; potentials are their negations, so
//! `U(y_p) = -z_p[y_p]` and `V(y_p, y_q) = -z_pq[y_p, y_q]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::featmap::FeatureMap;
use crate::graph::CrfGraph;
use crate::nn::ops::{axpy, dot};
use crate::nn::{dense_forward, join, GradBuffer, LayerParams, ParamGroup, Parameterized, Tensor};

/// Fully connected head: `dense -> relu -> dense`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub hidden: LayerParams,
    pub output: LayerParams,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(n_in: usize, n_hidden: usize, n_out: usize, rng: &mut R) -> Self {
        Mlp {
            hidden: LayerParams::dense(n_in, n_hidden, ParamGroup::New, rng),
            output: LayerParams::dense(n_hidden, n_out, ParamGroup::New, rng),
        }
    }

    pub fn input_width(&self) -> usize {
        self.hidden.weights.shape()[1]
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden.weights.shape()[0]
    }

    pub fn output_width(&self) -> usize {
        self.output.weights.shape()[0]
    }

    /// Direct layer-by-layer evaluation on one input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let h = dense_forward(&Tensor::from_vec(input.to_vec()), &self.hidden)?;
        let h = crate::nn::ops::relu_forward(&h);
        Ok(dense_forward(&h, &self.output)?.into_data())
    }
}

impl Parameterized for Mlp {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamGroup)) {
        self.hidden.visit_params(&join(prefix, "hidden"), f);
        self.output.visit_params(&join(prefix, "output"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamGroup)) {
        self.hidden.visit_params_mut(&join(prefix, "hidden"), f);
        self.output.visit_params_mut(&join(prefix, "output"), f);
    }
}

fn check_position(fm: &FeatureMap, (row, col): (usize, usize)) -> Result<usize> {
    if row >= fm.height() || col >= fm.width() {
        return Err(Error::OutOfRange {
            row,
            col,
            height: fm.height(),
            width: fm.width(),
        });
    }
    Ok(row * fm.width() + col)
}

/// Feature vector of the node at `pos`.
pub fn node_feature(fm: &FeatureMap, pos: (usize, usize)) -> Result<Vec<f64>> {
    let idx = check_position(fm, pos)?;
    Ok(fm.column(idx).to_vec())
}

/// Concatenation `[feat(p) | feat(q)]` of the two endpoint features, in edge order.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeFeature(pub Vec<f64>);

pub fn edge_feature(fm: &FeatureMap, p: (usize, usize), q: (usize, usize)) -> Result<EdgeFeature> {
    if p == q {
        return Err(Error::InvalidArgument(format!("edge endpoints coincide at {p:?}")));
    }
    let (ip, iq) = (check_position(fm, p)?, check_position(fm, q)?);
    let mut v = fm.column(ip).to_vec();
    v.extend_from_slice(fm.column(iq));
    Ok(EdgeFeature(v))
}

pub fn unary_scores(feature: &[f64], net: &Mlp) -> Result<Vec<f64>> {
    if feature.len() != net.input_width() {
        return Err(Error::shape("unary_scores", net.input_width(), feature.len()));
    }
    net.forward(feature)
}

/// `K x K` score matrix, row-major: entry `(a, b)` scores the first endpoint
/// taking label `a` and the second label `b`.
pub fn pairwise_scores(ef: &EdgeFeature, net: &Mlp) -> Result<Vec<f64>> {
    if ef.0.len() != net.input_width() {
        return Err(Error::shape("pairwise_scores", net.input_width(), ef.0.len()));
    }
    net.forward(&ef.0)
}

/// Per-node and per-edge scores for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialTable {
    pub num_classes: usize,
    /// `n x K`, row per node.
    pub unary: Vec<f64>,
    /// `m x K^2`, row per edge (graph edge order), row-major `K x K` blocks.
    pub pairwise: Vec<f64>,
}

impl PotentialTable {
    pub fn zeros(num_nodes: usize, num_edges: usize, num_classes: usize) -> Self {
        PotentialTable {
            num_classes,
            unary: vec![0.0; num_nodes * num_classes],
            pairwise: vec![0.0; num_edges * num_classes * num_classes],
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.unary.len() / self.num_classes
    }

    pub fn num_edges(&self) -> usize {
        self.pairwise.len() / (self.num_classes * self.num_classes)
    }

    pub fn unary(&self, node: usize) -> &[f64] {
        let k = self.num_classes;
        &self.unary[node * k..(node + 1) * k]
    }

    pub fn pairwise(&self, edge: usize) -> &[f64] {
        let kk = self.num_classes * self.num_classes;
        &self.pairwise[edge * kk..(edge + 1) * kk]
    }

    pub fn check_graph(&self, graph: &CrfGraph) -> Result<()> {
        let k = self.num_classes;
        if k == 0 || graph.num_classes != k {
            return Err(Error::shape("potential table classes", graph.num_classes, k));
        }
        if self.unary.len() != graph.num_nodes() * k {
            return Err(Error::shape("potential table nodes", graph.num_nodes() * k, self.unary.len()));
        }
        if self.pairwise.len() != graph.edges.len() * k * k {
            return Err(Error::shape("potential table edges", graph.edges.len() * k * k, self.pairwise.len()));
        }
        if self.unary.iter().chain(&self.pairwise).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("potential table holds non-finite scores".into()));
        }
        Ok(())
    }
}

/// `E(y) = sum_p -z_p[y_p] + sum_(p,q) -z_pq[y_p, y_q]`.
pub fn energy(labels: &[usize], table: &PotentialTable, graph: &CrfGraph) -> Result<f64> {
    if labels.len() != graph.num_nodes() {
        return Err(Error::shape("energy labeling", graph.num_nodes(), labels.len()));
    }
    let k = table.num_classes;
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} outside [0, {k})")));
    }
    let mut e = 0.0;
    for (p, &y) in labels.iter().enumerate() {
        e -= table.unary(p)[y];
    }
    for (i, edge) in graph.edges.iter().enumerate() {
        e -= table.pairwise(i)[labels[edge.p] * k + labels[edge.q]];
    }
    Ok(e)
}

/// Row-wise `dense -> relu -> dense` over the nodes of a feature map, keeping
/// hidden activations for the backward pass.
#[derive(Clone, Debug)]
pub struct NodeBatch {
    pub hidden: Vec<f64>,
    pub scores: Vec<f64>,
}

pub fn unary_forward_batch(net: &Mlp, fm: &FeatureMap) -> Result<NodeBatch> {
    let d = fm.channels();
    if d != net.input_width() {
        return Err(Error::shape("unary net input", net.input_width(), d));
    }
    let n = fm.height() * fm.width();
    let hw = net.hidden_width();
    let mut hidden = vec![0.0; n * hw];
    for (p, h) in hidden.chunks_mut(hw).enumerate() {
        dense_rows(&net.hidden, fm.column(p), h);
        relu_in_place(h);
    }
    let scores = output_rows(&net.output, &hidden);
    Ok(NodeBatch { hidden, scores })
}

/// Gradient of a loss whose derivative w.r.t. the node scores is `d_scores`
/// (`n x K`). Returns net gradients (`hidden.*`, `output.*`) and the feature
/// map gradient.
pub fn unary_backward_batch(
    net: &Mlp,
    fm: &FeatureMap,
    batch: &NodeBatch,
    d_scores: &[f64],
) -> Result<(GradBuffer, Tensor)> {
    let k = net.output_width();
    let hw = net.hidden_width();
    let d = fm.channels();
    if d_scores.len() != batch.scores.len() {
        return Err(Error::shape("unary backward", batch.scores.len(), d_scores.len()));
    }
    let mut g_w1 = vec![0.0; hw * d];
    let mut g_b1 = vec![0.0; hw];
    let mut g_w2 = vec![0.0; k * hw];
    let mut g_b2 = vec![0.0; k];
    let mut d_fm = Tensor::zeros(fm.values().shape());
    let w1 = net.hidden.weights.data();
    let w2 = net.output.weights.data();
    let mut dh = vec![0.0; hw];
    for (p, dz) in d_scores.chunks(k).enumerate() {
        if dz.iter().all(|&v| v == 0.0) {
            continue;
        }
        let h = &batch.hidden[p * hw..(p + 1) * hw];
        head_backward(w2, h, dz, &mut g_w2, &mut g_b2, &mut dh);
        let x = fm.column(p);
        let dx = &mut d_fm.data_mut()[p * d..(p + 1) * d];
        for (j, &g) in dh.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            g_b1[j] += g;
            axpy(g, x, &mut g_w1[j * d..(j + 1) * d]);
            axpy(g, &w1[j * d..(j + 1) * d], dx);
        }
    }
    Ok((mlp_grads(net, g_w1, g_b1, g_w2, g_b2)?, d_fm))
}

/// Pairwise-Net over a list of `(p, q)` edges. The first dense layer acting
/// on `[f_p | f_q]` is split into per-node projections `A f_p` and `B f_q`,
/// so each edge only pays for the addition and the output layer.
#[derive(Clone, Debug)]
pub struct EdgeBatch {
    pub edges: Vec<(usize, usize)>,
    pub hidden: Vec<f64>,
    pub scores: Vec<f64>,
}

pub fn pairwise_forward_batch(net: &Mlp, fm: &FeatureMap, edges: &[(usize, usize)]) -> Result<EdgeBatch> {
    let d = fm.channels();
    if 2 * d != net.input_width() {
        return Err(Error::shape("pairwise net input", net.input_width(), 2 * d));
    }
    let hw = net.hidden_width();
    let (first, second) = node_projections(net, fm);
    let b1 = net.hidden.bias.data();
    let mut hidden = vec![0.0; edges.len() * hw];
    for (h, &(p, q)) in hidden.chunks_mut(hw).zip(edges) {
        let a = &first[p * hw..(p + 1) * hw];
        let b = &second[q * hw..(q + 1) * hw];
        for j in 0..hw {
            h[j] = (a[j] + b[j] + b1[j]).max(0.0);
        }
    }
    let scores = output_rows(&net.output, &hidden);
    Ok(EdgeBatch {
        edges: edges.to_vec(),
        hidden,
        scores,
    })
}

pub fn pairwise_backward_batch(
    net: &Mlp,
    fm: &FeatureMap,
    batch: &EdgeBatch,
    d_scores: &[f64],
) -> Result<(GradBuffer, Tensor)> {
    let kk = net.output_width();
    let hw = net.hidden_width();
    let d = fm.channels();
    let n = fm.height() * fm.width();
    if d_scores.len() != batch.scores.len() {
        return Err(Error::shape("pairwise backward", batch.scores.len(), d_scores.len()));
    }
    let mut g_w2 = vec![0.0; kk * hw];
    let mut g_b2 = vec![0.0; kk];
    let mut g_b1 = vec![0.0; hw];
    // gradients w.r.t. the per-node projections
    let mut d_first = vec![0.0; n * hw];
    let mut d_second = vec![0.0; n * hw];
    let w2 = net.output.weights.data();
    let mut dh = vec![0.0; hw];
    for (e, dz) in d_scores.chunks(kk).enumerate() {
        if dz.iter().all(|&v| v == 0.0) {
            continue;
        }
        let h = &batch.hidden[e * hw..(e + 1) * hw];
        head_backward(w2, h, dz, &mut g_w2, &mut g_b2, &mut dh);
        let (p, q) = batch.edges[e];
        for j in 0..hw {
            g_b1[j] += dh[j];
            d_first[p * hw + j] += dh[j];
            d_second[q * hw + j] += dh[j];
        }
    }
    let w1 = net.hidden.weights.data();
    let mut g_w1 = vec![0.0; hw * 2 * d];
    let mut d_fm = Tensor::zeros(fm.values().shape());
    for node in 0..n {
        let x = fm.column(node);
        let dx = &mut d_fm.data_mut()[node * d..(node + 1) * d];
        for j in 0..hw {
            let row = &w1[j * 2 * d..(j + 1) * 2 * d];
            let (ga, gb) = (d_first[node * hw + j], d_second[node * hw + j]);
            if ga != 0.0 {
                axpy(ga, x, &mut g_w1[j * 2 * d..j * 2 * d + d]);
                axpy(ga, &row[..d], dx);
            }
            if gb != 0.0 {
                axpy(gb, x, &mut g_w1[j * 2 * d + d..(j + 1) * 2 * d]);
                axpy(gb, &row[d..], dx);
            }
        }
    }
    Ok((mlp_grads(net, g_w1, g_b1, g_w2, g_b2)?, d_fm))
}

fn node_projections(net: &Mlp, fm: &FeatureMap) -> (Vec<f64>, Vec<f64>) {
    let d = fm.channels();
    let hw = net.hidden_width();
    let n = fm.height() * fm.width();
    let w1 = net.hidden.weights.data();
    let mut first = vec![0.0; n * hw];
    let mut second = vec![0.0; n * hw];
    for node in 0..n {
        let x = fm.column(node);
        for j in 0..hw {
            let row = &w1[j * 2 * d..(j + 1) * 2 * d];
            first[node * hw + j] = dot(&row[..d], x);
            second[node * hw + j] = dot(&row[d..], x);
        }
    }
    (first, second)
}

fn dense_rows(layer: &LayerParams, x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    let w = layer.weights.data();
    for (j, (o, b)) in out.iter_mut().zip(layer.bias.data()).enumerate() {
        *o = b + dot(&w[j * n_in..(j + 1) * n_in], x);
    }
}

fn relu_in_place(h: &mut [f64]) {
    for v in h {
        *v = v.max(0.0);
    }
}

fn output_rows(layer: &LayerParams, hidden: &[f64]) -> Vec<f64> {
    let (hw, k) = (layer.weights.shape()[1], layer.weights.shape()[0]);
    let rows = hidden.len() / hw;
    let mut scores = vec![0.0; rows * k];
    for (h, z) in hidden.chunks(hw).zip(scores.chunks_mut(k)) {
        dense_rows(layer, h, z);
    }
    scores
}

/// Output-layer backward for one row; writes the hidden pre-activation
/// gradient (relu applied) into `dh`.
fn head_backward(w2: &[f64], h: &[f64], dz: &[f64], g_w2: &mut [f64], g_b2: &mut [f64], dh: &mut [f64]) {
    let hw = h.len();
    dh.fill(0.0);
    for (o, &g) in dz.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        g_b2[o] += g;
        axpy(g, h, &mut g_w2[o * hw..(o + 1) * hw]);
        axpy(g, &w2[o * hw..(o + 1) * hw], dh);
    }
    for (g, &hv) in dh.iter_mut().zip(h) {
        if hv <= 0.0 {
            *g = 0.0;
        }
    }
}

fn mlp_grads(net: &Mlp, g_w1: Vec<f64>, g_b1: Vec<f64>, g_w2: Vec<f64>, g_b2: Vec<f64>) -> Result<GradBuffer> {
    let mut grads = GradBuffer::new();
    grads.insert("hidden.weights", Tensor::new(net.hidden.weights.shape().to_vec(), g_w1)?);
    grads.insert("hidden.bias", Tensor::new(net.hidden.bias.shape().to_vec(), g_b1)?);
    grads.insert("output.weights", Tensor::new(net.output.weights.shape().to_vec(), g_w2)?);
    grads.insert("output.bias", Tensor::new(net.output.bias.shape().to_vec(), g_b2)?);
    grads.count = 1;
    Ok(grads)
}

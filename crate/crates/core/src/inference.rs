//! Exact enumeration and mean-field inference for `P(y|x) ∝ exp(-E(y, x))`.

use crate::error::{Error, Result};
use crate::graph::CrfGraph;
use crate::nn::{log_sum_exp, softmax, Tensor};
use crate::potentials::{energy, PotentialTable};

/// Largest state space exact inference will enumerate.
pub const MAX_STATES: usize = 1 << 20;

/// Per-node categorical distributions, `n x K` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalField {
    pub num_classes: usize,
    pub probs: Vec<f64>,
}

impl MarginalField {
    pub fn uniform(num_nodes: usize, num_classes: usize) -> Self {
        MarginalField {
            num_classes,
            probs: vec![1.0 / num_classes as f64; num_nodes * num_classes],
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.probs.len() / self.num_classes
    }

    pub fn node(&self, p: usize) -> &[f64] {
        let k = self.num_classes;
        &self.probs[p * k..(p + 1) * k]
    }

    /// Largest deviation of any node's total mass from one.
    pub fn normalization_error(&self) -> f64 {
        self.probs
            .chunks(self.num_classes)
            .map(|q| (q.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExactResult {
    pub log_partition: f64,
    pub marginals: MarginalField,
    pub map_labeling: Vec<usize>,
    /// `m x K^2`, aligned with the graph's edge order.
    pub pairwise_marginals: Vec<f64>,
}

fn state_count(k: usize, n: usize) -> f64 {
    (k as f64).powi(n as i32)
}

/// Visits every labeling in lexicographic order (node 0 most significant).
pub(crate) fn for_each_labeling(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    let mut y = vec![0usize; n];
    loop {
        f(&y);
        let mut i = n;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            y[i] += 1;
            if y[i] < k {
                break;
            }
            y[i] = 0;
        }
    }
}

/// Brute-force enumeration of all `K^n` labelings.
pub fn exact_inference(table: &PotentialTable, graph: &CrfGraph) -> Result<ExactResult> {
    table.check_graph(graph)?;
    let (n, k) = (graph.num_nodes(), table.num_classes);
    let states = state_count(k, n);
    if states > MAX_STATES as f64 {
        return Err(Error::StateSpaceTooLarge {
            states,
            limit: MAX_STATES,
        });
    }
    let mut neg_energy = Vec::with_capacity(states as usize);
    let mut best = (f64::INFINITY, vec![0; n]);
    for_each_labeling(n, k, |y| {
        let e = energy(y, table, graph).expect("labeling shape checked");
        if e < best.0 {
            best = (e, y.to_vec());
        }
        neg_energy.push(-e);
    });
    let log_z = log_sum_exp(&neg_energy);
    let mut marginals = vec![0.0; n * k];
    let mut pairwise = vec![0.0; graph.edges.len() * k * k];
    let mut idx = 0;
    for_each_labeling(n, k, |y| {
        let p = (neg_energy[idx] - log_z).exp();
        idx += 1;
        for (node, &label) in y.iter().enumerate() {
            marginals[node * k + label] += p;
        }
        for (e, edge) in graph.edges.iter().enumerate() {
            pairwise[e * k * k + y[edge.p] * k + y[edge.q]] += p;
        }
    });
    Ok(ExactResult {
        log_partition: log_z,
        marginals: MarginalField {
            num_classes: k,
            probs: marginals,
        },
        map_labeling: best.1,
        pairwise_marginals: pairwise,
    })
}

/// Mean-field inference with sequential (node-order) coordinate updates,
/// starting from uniform marginals. `damping` blends the previous
/// distribution into each update.
pub fn mean_field(table: &PotentialTable, graph: &CrfGraph, iterations: usize, damping: f64) -> Result<MarginalField> {
    let mut q = MarginalField::uniform(graph.num_nodes(), table.num_classes);
    mean_field_from(table, graph, &mut q, iterations, damping, |_| {})?;
    Ok(q)
}

/// Runs `iterations` sweeps starting from `q`, calling `after_sweep` with
/// the field after every full sweep.
pub fn mean_field_from(
    table: &PotentialTable,
    graph: &CrfGraph,
    q: &mut MarginalField,
    iterations: usize,
    damping: f64,
    mut after_sweep: impl FnMut(&MarginalField),
) -> Result<()> {
    table.check_graph(graph)?;
    if iterations == 0 {
        return Err(Error::InvalidArgument("mean field needs at least one iteration".into()));
    }
    if !(0.0..1.0).contains(&damping) {
        return Err(Error::InvalidArgument(format!("damping must lie in [0, 1), got {damping}")));
    }
    if q.num_classes != table.num_classes || q.num_nodes() != graph.num_nodes() {
        return Err(Error::shape("mean field init", graph.num_nodes(), q.num_nodes()));
    }
    let k = table.num_classes;
    let incidence = graph.incidence();
    let mut s = vec![0.0; k];
    for _ in 0..iterations {
        for p in 0..graph.num_nodes() {
            s.copy_from_slice(table.unary(p));
            for &(e, first) in &incidence[p] {
                let edge = &graph.edges[e];
                let z = table.pairwise(e);
                if first {
                    let other = q.node(edge.q);
                    for (a, sa) in s.iter_mut().enumerate() {
                        *sa += (0..k).map(|b| other[b] * z[a * k + b]).sum::<f64>();
                    }
                } else {
                    let other = q.node(edge.p);
                    for (b, sb) in s.iter_mut().enumerate() {
                        *sb += (0..k).map(|a| other[a] * z[a * k + b]).sum::<f64>();
                    }
                }
            }
            let fresh = softmax(&s);
            let row = &mut q.probs[p * k..(p + 1) * k];
            for (old, new) in row.iter_mut().zip(fresh) {
                *old = (1.0 - damping) * new + damping * *old;
            }
        }
        after_sweep(q);
    }
    Ok(())
}

/// Variational free energy `F(Q) = E_Q[E] - H(Q)` of a fully factorized `Q`.
pub fn free_energy(q: &MarginalField, table: &PotentialTable, graph: &CrfGraph) -> Result<f64> {
    table.check_graph(graph)?;
    let k = table.num_classes;
    let mut f = 0.0;
    for p in 0..graph.num_nodes() {
        for (y, &qy) in q.node(p).iter().enumerate() {
            f -= qy * table.unary(p)[y];
            if qy > 0.0 {
                f += qy * qy.ln();
            }
        }
    }
    for (e, edge) in graph.edges.iter().enumerate() {
        let (qp, qq) = (q.node(edge.p), q.node(edge.q));
        let z = table.pairwise(e);
        for a in 0..k {
            for b in 0..k {
                f -= qp[a] * qq[b] * z[a * k + b];
            }
        }
    }
    Ok(f)
}

/// Per-node argmax; ties go to the lowest class index.
pub fn map_from_marginals(q: &MarginalField) -> Vec<usize> {
    q.probs
        .chunks(q.num_classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Lays node marginals out on the `height x width` feature-map grid.
pub fn coarse_score_map(q: &MarginalField, graph: &CrfGraph, height: usize, width: usize) -> Result<Tensor> {
    if q.num_nodes() != height * width || graph.num_nodes() != height * width {
        return Err(Error::shape("coarse_score_map", height * width, q.num_nodes()));
    }
    Tensor::new(vec![height, width, q.num_classes], q.probs.clone())
}

/// Inverse of [`coarse_score_map`].
pub fn field_from_score_map(map: &Tensor) -> Result<MarginalField> {
    let (_, _, k) = map.dims3()?;
    Ok(MarginalField {
        num_classes: k,
        probs: map.data().to_vec(),
    })
}

//! CRF graph over feature-map positions with range-box pairwise connections.
//!
//! Every position of an `H x W` feature map is a node (index `row * W + col`).
//! A relation kind defines a square range box of side
//! `floor(box_fraction * min(H, W))` anchored at each node: centered for the
//! surrounding relation, and sitting on top of the node (bottom edge centered
//! on it) for the above/below relation. Connections are then thinned to a
//! regular `grid x grid` lattice spanning the box.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    Surrounding,
    AboveBelow,
}

impl RelationKind {
    pub fn name(self) -> &'static str {
        match self {
            RelationKind::Surrounding => "surrounding",
            RelationKind::AboveBelow => "above_below",
        }
    }

    pub fn default_anchor(self) -> Anchor {
        match self {
            RelationKind::Surrounding => Anchor::Center,
            RelationKind::AboveBelow => Anchor::BottomCenter,
        }
    }
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    Center,
    BottomCenter,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeBoxSpec {
    pub kind: RelationKind,
    pub box_fraction: f64,
    pub anchor: Anchor,
}

impl RangeBoxSpec {
    pub fn new(kind: RelationKind, box_fraction: f64) -> Self {
        RangeBoxSpec {
            kind,
            box_fraction,
            anchor: kind.default_anchor(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.box_fraction > 0.0 && self.box_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "box_fraction must lie in (0, 1], got {}",
                self.box_fraction
            )));
        }
        if self.anchor != self.kind.default_anchor() {
            return Err(Error::Config(format!(
                "{} relation requires anchor {:?}",
                self.kind,
                self.kind.default_anchor()
            )));
        }
        Ok(())
    }

    /// Box side in cells.
    pub fn side(&self, height: usize, width: usize) -> usize {
        (self.box_fraction * height.min(width) as f64 + 1e-9).floor() as usize
    }

    /// Row and column offset ranges (inclusive) of the box around its anchor.
    ///
    /// Even sides cannot be centered; the extra cell goes to the top/left.
    pub fn offsets(&self, side: usize) -> ((isize, isize), (isize, isize)) {
        let s = side as isize;
        let cols = (-(s / 2), (s + 1) / 2 - 1);
        let rows = match self.anchor {
            Anchor::Center => cols,
            Anchor::BottomCenter => (-(s - 1), 0),
        };
        (rows, cols)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSpec {
    /// Lattice points per box axis; `None` keeps every candidate.
    pub grid: Option<usize>,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        SamplingSpec { grid: Some(5) }
    }
}

/// Ordered pairwise connection. For above/below edges `p` lies above `q`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub p: usize,
    pub q: usize,
    pub kind: RelationKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrfGraph {
    pub height: usize,
    pub width: usize,
    pub nodes: Vec<(usize, usize)>,
    pub edges: Vec<Edge>,
    pub num_classes: usize,
}

impl CrfGraph {
    /// Graph with nodes only.
    pub fn edgeless(height: usize, width: usize, num_classes: usize) -> Self {
        CrfGraph {
            height,
            width,
            nodes: (0..height).flat_map(|r| (0..width).map(move |c| (r, c))).collect(),
            edges: Vec::new(),
            num_classes,
        }
    }

    /// Arbitrary graph over `n` nodes laid out as a single row.
    pub fn from_edges(n: usize, edges: Vec<Edge>, num_classes: usize) -> Result<Self> {
        if let Some(e) = edges.iter().find(|e| e.p >= n || e.q >= n || e.p == e.q) {
            return Err(Error::InvalidArgument(format!("invalid edge {e:?} for {n} nodes")));
        }
        let mut g = Self::edgeless(1, n, num_classes);
        g.edges = edges;
        Ok(g)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn edges_of(&self, kind: RelationKind) -> impl Iterator<Item = (usize, &Edge)> {
        self.edges.iter().enumerate().filter(move |(_, e)| e.kind == kind)
    }

    /// Relation kinds present, in first-appearance order.
    pub fn kinds(&self) -> Vec<RelationKind> {
        let mut kinds = Vec::new();
        for e in &self.edges {
            if !kinds.contains(&e.kind) {
                kinds.push(e.kind);
            }
        }
        kinds
    }

    /// For every node, the edges touching it: `(edge index, node is first endpoint)`.
    pub fn incidence(&self) -> Vec<Vec<(usize, bool)>> {
        let mut adj = vec![Vec::new(); self.num_nodes()];
        for (i, e) in self.edges.iter().enumerate() {
            adj[e.p].push((i, true));
            adj[e.q].push((i, false));
        }
        adj
    }
}

fn in_map(r: isize, c: isize, height: usize, width: usize) -> bool {
    r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width
}

/// All other nodes inside the clipped range box of `(row, col)`. For the
/// above/below relation only nodes strictly above the anchor qualify.
pub fn candidate_targets(height: usize, width: usize, spec: &RangeBoxSpec, row: usize, col: usize) -> Vec<usize> {
    let side = spec.side(height, width);
    if side == 0 {
        return Vec::new();
    }
    let ((r0, r1), (c0, c1)) = spec.offsets(side);
    let mut out = Vec::new();
    for dr in r0..=r1 {
        for dc in c0..=c1 {
            if !admissible(spec, dr, dc) {
                continue;
            }
            let (r, c) = (row as isize + dr, col as isize + dc);
            if in_map(r, c, height, width) {
                out.push(r as usize * width + c as usize);
            }
        }
    }
    out
}

fn admissible(spec: &RangeBoxSpec, dr: isize, dc: isize) -> bool {
    match spec.anchor {
        Anchor::Center => (dr, dc) != (0, 0),
        Anchor::BottomCenter => dr < 0,
    }
}

/// Lattice offsets along one axis: `grid` evenly spaced points spanning
/// `(lo, hi)` around the anchor, rounded to the nearest cell.
fn lattice_axis(lo: isize, hi: isize, grid: usize, centered: bool) -> Vec<isize> {
    if grid == 1 {
        return vec![if centered { 0 } else { hi }];
    }
    (0..grid)
        .map(|i| {
            let t = i as f64 / (grid - 1) as f64;
            let v = if centered {
                // symmetric about the anchor so the middle point lands on it
                let half = (hi - lo) as f64 / 2.0;
                (-half + 2.0 * half * t).round() as isize
            } else {
                (lo as f64 + (hi - lo) as f64 * t).round() as isize
            };
            v.clamp(lo, hi)
        })
        .collect()
}

/// Lattice-sampled targets of `(row, col)`: the `grid x grid` points spanning
/// the range box, minus the anchor itself, out-of-map points and duplicates.
pub fn sample_connections(
    height: usize,
    width: usize,
    spec: &RangeBoxSpec,
    row: usize,
    col: usize,
    grid: usize,
) -> Vec<usize> {
    let side = spec.side(height, width);
    if side == 0 || grid == 0 {
        return Vec::new();
    }
    let ((r0, r1), (c0, c1)) = spec.offsets(side);
    let rows = lattice_axis(r0, r1, grid, spec.anchor == Anchor::Center);
    let cols = lattice_axis(c0, c1, grid, true);
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for &dr in &rows {
        for &dc in &cols {
            if !admissible(spec, dr, dc) {
                continue;
            }
            let (r, c) = (row as isize + dr, col as isize + dc);
            if in_map(r, c, height, width) {
                let idx = r as usize * width + c as usize;
                if seen.insert(idx) {
                    out.push(idx);
                }
            }
        }
    }
    out
}

/// Builds the typed CRF graph. Edges are grouped by spec, then by anchor
/// node in index order.
pub fn build_graph(
    height: usize,
    width: usize,
    specs: &[RangeBoxSpec],
    sampling: SamplingSpec,
    num_classes: usize,
) -> Result<CrfGraph> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("graph needs at least one node".into()));
    }
    if let Some(grid) = sampling.grid {
        if grid % 2 == 0 {
            return Err(Error::Config(format!("sampling grid must be odd, got {grid}")));
        }
    }
    let mut graph = CrfGraph::edgeless(height, width, num_classes);
    for spec in specs {
        spec.validate()?;
        for anchor in 0..height * width {
            let (row, col) = (anchor / width, anchor % width);
            let targets = match sampling.grid {
                Some(grid) => sample_connections(height, width, spec, row, col, grid),
                None => candidate_targets(height, width, spec, row, col),
            };
            for t in targets {
                let (p, q) = match spec.anchor {
                    Anchor::Center => (anchor, t),
                    // the target sits above the anchor
                    Anchor::BottomCenter => (t, anchor),
                };
                graph.edges.push(Edge { p, q, kind: spec.kind });
            }
        }
    }
    Ok(graph)
}

/// Summary statistics for the `inspect` dump.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub edges_per_kind: Vec<(RelationKind, usize)>,
    /// `(degree, node count)` over the number of edges touching each node.
    pub degree_histogram: Vec<(usize, usize)>,
}

impl CrfGraph {
    pub fn stats(&self) -> GraphStats {
        let mut edges_per_kind = Vec::new();
        for kind in self.kinds() {
            edges_per_kind.push((kind, self.edges_of(kind).count()));
        }
        let mut hist = std::collections::BTreeMap::new();
        for adj in self.incidence() {
            *hist.entry(adj.len()).or_insert(0) += 1;
        }
        GraphStats {
            nodes: self.num_nodes(),
            edges_per_kind,
            degree_histogram: hist.into_iter().collect(),
        }
    }
}

impl fmt::Display for GraphStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "nodes\t{}", self.nodes)?;
        for (kind, n) in &self.edges_per_kind {
            writeln!(f, "edges\t{kind}\t{n}")?;
        }
        writeln!(f, "degree\tnodes")?;
        for (d, n) in &self.degree_histogram {
            writeln!(f, "{d}\t{n}")?;
        }
        Ok(())
    }
}

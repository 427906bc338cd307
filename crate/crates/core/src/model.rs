//! Full model parameters: one feature extractor per potential, one
//! Unary-Net per unary potential and one Pairwise-Net per relation kind.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featmap::{self, FeatCache, FeatMapConfig, FeatMapNet, FeatureMap};
use crate::graph::{build_graph, CrfGraph, RangeBoxSpec, RelationKind, SamplingSpec};
use crate::nn::{join, Checkpoint, ParamGroup, Parameterized, Tensor};
use crate::potentials::{pairwise_forward_batch, unary_forward_batch, Mlp, PotentialTable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Number of unary potentials; more than one forms an ensemble whose
    /// scores add up in the energy.
    pub unary_count: usize,
    /// One pairwise potential per range box.
    pub relations: Vec<RangeBoxSpec>,
    pub sampling: SamplingSpec,
    /// Hidden width of the Unary-Net and Pairwise-Net heads.
    pub hidden_units: usize,
    /// Scalar applied to all unary scores in the energy.
    pub unary_weight: f64,
    /// Scalar applied to all pairwise scores in the energy.
    pub pairwise_weight: f64,
    pub featmap: FeatMapConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 6,
            unary_count: 1,
            relations: vec![
                RangeBoxSpec::new(RelationKind::Surrounding, 0.4),
                RangeBoxSpec::new(RelationKind::AboveBelow, 0.4),
            ],
            sampling: SamplingSpec::default(),
            hidden_units: 64,
            unary_weight: 1.0,
            pairwise_weight: 1.0,
            featmap: FeatMapConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.unary_count == 0 {
            return Err(Error::Config("at least one unary potential is required".into()));
        }
        if self.hidden_units == 0 {
            return Err(Error::Config("hidden_units must be positive".into()));
        }
        if !(self.unary_weight >= 0.0 && self.pairwise_weight >= 0.0) {
            return Err(Error::Config("potential weights must be non-negative".into()));
        }
        for (i, r) in self.relations.iter().enumerate() {
            r.validate()?;
            if self.relations[..i].iter().any(|o| o.kind == r.kind) {
                return Err(Error::Config(format!("duplicate relation kind {}", r.kind)));
            }
        }
        if let Some(grid) = self.sampling.grid {
            if grid % 2 == 0 {
                return Err(Error::Config(format!("sampling grid must be odd, got {grid}")));
            }
        }
        self.featmap.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnaryPotential {
    pub featmap: FeatMapNet,
    pub net: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairwisePotential {
    pub kind: RelationKind,
    pub featmap: FeatMapNet,
    pub net: Mlp,
}

impl Parameterized for UnaryPotential {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamGroup)) {
        self.featmap.visit_params(&join(prefix, "featmap"), f);
        self.net.visit_params(&join(prefix, "net"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamGroup)) {
        self.featmap.visit_params_mut(&join(prefix, "featmap"), f);
        self.net.visit_params_mut(&join(prefix, "net"), f);
    }
}

impl Parameterized for PairwisePotential {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamGroup)) {
        self.featmap.visit_params(&join(prefix, "featmap"), f);
        self.net.visit_params(&join(prefix, "net"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamGroup)) {
        self.featmap.visit_params_mut(&join(prefix, "featmap"), f);
        self.net.visit_params_mut(&join(prefix, "net"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub unaries: Vec<UnaryPotential>,
    pub pairwise: Vec<PairwisePotential>,
}

impl ModelParams {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.featmap.output_channels();
        let k = config.num_classes;
        let unaries = (0..config.unary_count)
            .map(|_| {
                Ok(UnaryPotential {
                    featmap: FeatMapNet::new(&config.featmap, &mut rng)?,
                    net: Mlp::new(d, config.hidden_units, k, &mut rng),
                })
            })
            .collect::<Result<_>>()?;
        let pairwise = config
            .relations
            .iter()
            .map(|r| {
                Ok(PairwisePotential {
                    kind: r.kind,
                    featmap: FeatMapNet::new(&config.featmap, &mut rng)?,
                    net: Mlp::new(2 * d, config.hidden_units, k * k, &mut rng),
                })
            })
            .collect::<Result<_>>()?;
        Ok(ModelParams {
            config,
            unaries,
            pairwise,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// CRF graph for an image of the given size.
    pub fn graph_for(&self, image_h: usize, image_w: usize) -> Result<CrfGraph> {
        let (h, w) = self.config.featmap.output_size(image_h, image_w);
        build_graph(h, w, &self.config.relations, self.config.sampling, self.config.num_classes)
    }

    pub fn pairwise_for(&self, kind: RelationKind) -> Option<&PairwisePotential> {
        self.pairwise.iter().find(|p| p.kind == kind)
    }

    /// Feature maps, graph and potential table for one image.
    pub fn potentials(&self, image: &Tensor) -> Result<ModelForward> {
        let (h, w, _) = image.dims3()?;
        let graph = self.graph_for(h, w)?;
        let k = self.num_classes();
        let mut table = PotentialTable::zeros(graph.num_nodes(), graph.edges.len(), k);
        let mut unary_maps = Vec::with_capacity(self.unaries.len());
        for u in &self.unaries {
            let (fm, cache) = featmap::extract_features_cached(image, &u.featmap, &self.config.featmap)?;
            let batch = unary_forward_batch(&u.net, &fm)?;
            for (t, s) in table.unary.iter_mut().zip(&batch.scores) {
                *t += self.config.unary_weight * s;
            }
            unary_maps.push((fm, cache));
        }
        let mut pairwise_maps = Vec::with_capacity(self.pairwise.len());
        for pw in &self.pairwise {
            let (fm, cache) = featmap::extract_features_cached(image, &pw.featmap, &self.config.featmap)?;
            let indices: Vec<usize> = graph.edges_of(pw.kind).map(|(i, _)| i).collect();
            let pairs: Vec<(usize, usize)> = indices.iter().map(|&i| (graph.edges[i].p, graph.edges[i].q)).collect();
            let batch = pairwise_forward_batch(&pw.net, &fm, &pairs)?;
            let kk = k * k;
            for (j, &i) in indices.iter().enumerate() {
                for (t, s) in table.pairwise[i * kk..(i + 1) * kk]
                    .iter_mut()
                    .zip(&batch.scores[j * kk..(j + 1) * kk])
                {
                    *t = self.config.pairwise_weight * s;
                }
            }
            pairwise_maps.push((fm, cache));
        }
        Ok(ModelForward {
            graph,
            table,
            unary_maps,
            pairwise_maps,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let header = toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Checkpoint::from_params(header, self))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = toml::from_str(&ck.header).map_err(|e| Error::Config(e.to_string()))?;
        let mut model = ModelParams::new(config, 0)?;
        ck.restore_into(&mut model)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.checkpoint()?
            .write_to(BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&Checkpoint::read_from(BufReader::new(file))?)
    }
}

impl Parameterized for ModelParams {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamGroup)) {
        for (i, u) in self.unaries.iter().enumerate() {
            u.visit_params(&join(prefix, &format!("unary.{i}")), f);
        }
        for p in &self.pairwise {
            p.visit_params(&join(prefix, &format!("pairwise.{}", p.kind)), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamGroup)) {
        for (i, u) in self.unaries.iter_mut().enumerate() {
            u.visit_params_mut(&join(prefix, &format!("unary.{i}")), f);
        }
        for p in self.pairwise.iter_mut() {
            let name = join(prefix, &format!("pairwise.{}", p.kind));
            p.visit_params_mut(&name, f);
        }
    }
}

/// Result of [`ModelParams::potentials`], with extractor caches kept for
/// back-propagation.
pub struct ModelForward {
    pub graph: CrfGraph,
    pub table: PotentialTable,
    pub unary_maps: Vec<(FeatureMap, FeatCache)>,
    pub pairwise_maps: Vec<(FeatureMap, FeatCache)>,
}

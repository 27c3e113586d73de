//! Scoring models: embedding table, stacked propagation layers, MLP heads.

pub mod forward;
pub mod infer;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numcore::DenseMatrix;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("unknown id: {0}")]
    Lookup(String),
}

/// Model variants selectable at train time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Relational propagation with per-relation weights on the tripartite graph.
    BundleNet,
    /// Shared-weight GCN on the tripartite graph.
    GcnTri,
    /// Shared-weight GCN on the user-bundle bipartite graph.
    GcnBi,
    /// Matrix-factorization BPR baseline: embedding dot products only.
    BprMf,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::BundleNet => "bundlenet",
            Variant::GcnTri => "gcn-tri",
            Variant::GcnBi => "gcn-bi",
            Variant::BprMf => "bpr-mf",
        }
    }

    pub fn parse(s: &str) -> Result<Variant, ModelError> {
        match s {
            "bundlenet" => Ok(Variant::BundleNet),
            "gcn-tri" => Ok(Variant::GcnTri),
            "gcn-bi" => Ok(Variant::GcnBi),
            "bpr-mf" => Ok(Variant::BprMf),
            other => Err(ModelError::Contract(format!("unknown variant '{other}'"))),
        }
    }

    /// Whether this variant propagates over a graph at all.
    pub fn propagates(&self) -> bool {
        !matches!(self, Variant::BprMf)
    }
}

/// Scoring task: user-item preference or user-bundle preference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Item,
    Bundle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Embedding size d.
    pub embed_dim: usize,
    /// Propagation depth L.
    pub layer_count: usize,
    /// Propagation output width d0.
    pub hidden_dim: usize,
    /// Head hidden width d1.
    pub head_hidden_dim: usize,
    /// d2 from the published sizes; the head emits a scalar logit, so this is
    /// a documented vestige and unused by default.
    pub head_out_dim: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::BundleNet,
            embed_dim: 32,
            layer_count: 2,
            hidden_dim: 64,
            head_hidden_dim: 256,
            head_out_dim: 128,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layer_count < 1 {
            return Err(ModelError::Contract("layer_count must be >= 1".into()));
        }
        if self.embed_dim < 1 || self.hidden_dim < 1 || self.head_hidden_dim < 1 {
            return Err(ModelError::Contract("dims must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Contract("dropout must be in [0,1)".into()));
        }
        Ok(())
    }

    /// Width of one concatenated node representation (L * d0).
    pub fn rep_dim(&self) -> usize {
        self.layer_count * self.hidden_dim
    }

    /// Head input width: two concatenated multi-layer representations.
    pub fn head_input_dim(&self) -> usize {
        2 * self.rep_dim()
    }
}

/// One propagation layer's weights.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    /// Self weight plus six relation weights, indexed by [`crate::graph::Relation`].
    Relational {
        w_self: DenseMatrix,
        w_rel: Vec<DenseMatrix>,
    },
    /// Single shared weight for the plain-GCN path.
    Shared { w: DenseMatrix },
}

/// One two-layer MLP head producing a scalar logit per pair.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w1: DenseMatrix,
    pub b1: DenseMatrix,
    pub w2: DenseMatrix,
    pub b2: DenseMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heads {
    pub item: HeadParams,
    pub bundle: HeadParams,
}

/// The full differentiable parameter set Θ, plus the node layout it is
/// defined over.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub n_users: usize,
    pub n_items: usize,
    pub n_bundles: usize,
    /// One contiguous Nxd table: users, then items, then bundles.
    pub embedding: DenseMatrix,
    pub layers: Vec<LayerParams>,
    pub heads: Option<Heads>,
}

/// One named parameter tensor; `regularize` is false for biases.
pub struct ParamRef<'a> {
    pub name: String,
    pub matrix: &'a DenseMatrix,
    pub regularize: bool,
}

impl ModelParams {
    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items + self.n_bundles
    }

    pub fn user_global(&self, u: u32) -> usize {
        u as usize
    }

    pub fn item_global(&self, i: u32) -> usize {
        self.n_users + i as usize
    }

    pub fn bundle_global(&self, b: u32) -> usize {
        self.n_users + self.n_items + b as usize
    }

    /// Glorot-uniform initialization; fully determined by seed.
    pub fn init(
        config: &ModelConfig,
        n_users: usize,
        n_items: usize,
        n_bundles: usize,
        seed: u64,
    ) -> Result<ModelParams, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = n_users + n_items + n_bundles;
        let embedding = glorot(&mut rng, n, config.embed_dim);

        let (layers, heads) = if config.variant.propagates() {
            let mut layers = Vec::with_capacity(config.layer_count);
            for l in 0..config.layer_count {
                let din = if l == 0 {
                    config.embed_dim
                } else {
                    config.hidden_dim
                };
                let dout = config.hidden_dim;
                let layer = match config.variant {
                    Variant::BundleNet => LayerParams::Relational {
                        w_self: glorot(&mut rng, din, dout),
                        w_rel: (0..6).map(|_| glorot(&mut rng, din, dout)).collect(),
                    },
                    _ => LayerParams::Shared {
                        w: glorot(&mut rng, din, dout),
                    },
                };
                layers.push(layer);
            }
            let head = |rng: &mut ChaCha8Rng| HeadParams {
                w1: glorot(rng, config.head_input_dim(), config.head_hidden_dim),
                b1: DenseMatrix::zeros(1, config.head_hidden_dim),
                w2: glorot(rng, config.head_hidden_dim, 1),
                b2: DenseMatrix::zeros(1, 1),
            };
            let heads = Heads {
                item: head(&mut rng),
                bundle: head(&mut rng),
            };
            (layers, Some(heads))
        } else {
            (Vec::new(), None)
        };

        Ok(ModelParams {
            config: config.clone(),
            n_users,
            n_items,
            n_bundles,
            embedding,
            layers,
            heads,
        })
    }

    /// All parameter tensors in a fixed canonical order.
    pub fn param_refs(&self) -> Vec<ParamRef<'_>> {
        let mut out = vec![ParamRef {
            name: "embedding".into(),
            matrix: &self.embedding,
            regularize: true,
        }];
        for (l, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerParams::Relational { w_self, w_rel } => {
                    out.push(ParamRef {
                        name: format!("layer{l}.self"),
                        matrix: w_self,
                        regularize: true,
                    });
                    for (r, w) in w_rel.iter().enumerate() {
                        out.push(ParamRef {
                            name: format!("layer{l}.rel{r}"),
                            matrix: w,
                            regularize: true,
                        });
                    }
                }
                LayerParams::Shared { w } => out.push(ParamRef {
                    name: format!("layer{l}.shared"),
                    matrix: w,
                    regularize: true,
                }),
            }
        }
        if let Some(heads) = &self.heads {
            for (prefix, h) in [("head.item", &heads.item), ("head.bundle", &heads.bundle)] {
                out.push(ParamRef {
                    name: format!("{prefix}.w1"),
                    matrix: &h.w1,
                    regularize: true,
                });
                out.push(ParamRef {
                    name: format!("{prefix}.b1"),
                    matrix: &h.b1,
                    regularize: false,
                });
                out.push(ParamRef {
                    name: format!("{prefix}.w2"),
                    matrix: &h.w2,
                    regularize: true,
                });
                out.push(ParamRef {
                    name: format!("{prefix}.b2"),
                    matrix: &h.b2,
                    regularize: false,
                });
            }
        }
        out
    }

    /// Clones of all tensors in canonical order (for the optimizer).
    pub fn to_flat(&self) -> Vec<DenseMatrix> {
        self.param_refs().iter().map(|p| p.matrix.clone()).collect()
    }

    /// Overwrite all tensors from a canonical-order flat list.
    pub fn set_from_flat(&mut self, flat: &[DenseMatrix]) -> Result<(), ModelError> {
        let expected = self.param_refs().len();
        if flat.len() != expected {
            return Err(ModelError::Shape(format!(
                "expected {expected} tensors, got {}",
                flat.len()
            )));
        }
        let mut it = flat.iter();
        let mut take = |slot: &mut DenseMatrix| -> Result<(), ModelError> {
            let src = it.next().unwrap();
            if src.shape() != slot.shape() {
                return Err(ModelError::Shape(format!(
                    "tensor shape {:?} != {:?}",
                    src.shape(),
                    slot.shape()
                )));
            }
            *slot = src.clone();
            Ok(())
        };
        take(&mut self.embedding)?;
        for layer in &mut self.layers {
            match layer {
                LayerParams::Relational { w_self, w_rel } => {
                    take(w_self)?;
                    for w in w_rel {
                        take(w)?;
                    }
                }
                LayerParams::Shared { w } => take(w)?,
            }
        }
        if let Some(heads) = &mut self.heads {
            for h in [&mut heads.item, &mut heads.bundle] {
                take(&mut h.w1)?;
                take(&mut h.b1)?;
                take(&mut h.w2)?;
                take(&mut h.b2)?;
            }
        }
        Ok(())
    }
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> DenseMatrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    DenseMatrix::from_vec(fan_in, fan_out, data).expect("finite init")
}

/// Per-layer hidden matrices and their column-wise concatenation.
#[derive(Clone, Debug)]
pub struct NodeRepresentations {
    pub per_layer: Vec<DenseMatrix>,
    pub concat: DenseMatrix,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::default();
        let a = ModelParams::init(&cfg, 3, 4, 2, 42).unwrap();
        let b = ModelParams::init(&cfg, 3, 4, 2, 42).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(&cfg, 3, 4, 2, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shapes_follow_config() {
        let cfg = ModelConfig {
            embed_dim: 8,
            hidden_dim: 16,
            layer_count: 2,
            ..Default::default()
        };
        let p = ModelParams::init(&cfg, 2, 3, 1, 0).unwrap();
        assert_eq!(p.embedding.shape(), (6, 8));
        let LayerParams::Relational { w_self, w_rel } = &p.layers[0] else {
            panic!()
        };
        assert_eq!(w_self.shape(), (8, 16));
        assert_eq!(w_rel.len(), 6);
        let LayerParams::Relational { w_self, .. } = &p.layers[1] else {
            panic!()
        };
        assert_eq!(w_self.shape(), (16, 16));
        let heads = p.heads.as_ref().unwrap();
        assert_eq!(heads.item.w1.shape(), (2 * 2 * 16, cfg.head_hidden_dim));
        assert_eq!(heads.item.w2.shape(), (cfg.head_hidden_dim, 1));
    }

    #[test]
    fn bpr_mf_has_no_layers_or_heads() {
        let cfg = ModelConfig {
            variant: Variant::BprMf,
            ..Default::default()
        };
        let p = ModelParams::init(&cfg, 2, 2, 2, 0).unwrap();
        assert!(p.layers.is_empty());
        assert!(p.heads.is_none());
        assert_eq!(p.param_refs().len(), 1);
    }

    #[test]
    fn flat_round_trip() {
        let p = ModelParams::init(&ModelConfig::default(), 2, 3, 1, 5).unwrap();
        let flat = p.to_flat();
        let mut q = ModelParams::init(&ModelConfig::default(), 2, 3, 1, 99).unwrap();
        q.set_from_flat(&flat).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = ModelConfig {
            layer_count: 0,
            ..Default::default()
        };
        assert!(ModelParams::init(&cfg, 1, 1, 1, 0).is_err());
        let cfg = ModelConfig {
            dropout: 1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}

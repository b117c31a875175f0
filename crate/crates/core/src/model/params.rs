use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::dataio::Role;
use crate::error::{Error, Result};
use crate::numerics::{AttentionWeights, Dense, Tensor};

/// Hidden width multiplier of every feed-forward sublayer.
pub const FFN_EXPANSION: usize = 4;

/// Checkpoint container version.
pub const CHECKPOINT_FORMAT: u32 = 1;

const EMBEDDING_STD: f64 = 0.02;

/// Shrinks the output layers of the mixture head so every component starts
/// near zero displacement with near-uniform weights.
const HEAD_INIT_SCALE: f64 = 0.1;

/// Starting Cholesky diagonal, normalized units.
const INITIAL_SIGMA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)`.
    FanIn(usize),
    /// `FanIn` times a factor.
    ScaledFanIn(usize, f64),
    /// `(l11, l21, l22)` triples whose realized diagonal is [`INITIAL_SIGMA`].
    CholeskyBias,
    Zeros,
    Ones,
    Normal,
}

#[derive(Clone, Debug)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeedForward<T> {
    pub up: Dense<T>,
    pub down: Dense<T>,
}

/// Pre-norm self-attention plus feed-forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderBlock<T> {
    pub attn_norm: Norm<T>,
    pub attn: AttentionWeights<T>,
    pub ffn_norm: Norm<T>,
    pub ffn: FeedForward<T>,
}

/// Relative spatial attention, formation cross-attention, feed-forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpatialLayer<T> {
    /// Relational hidden features to one bias per head.
    pub bias_head: Dense<T>,
    pub spatial_norm: Norm<T>,
    pub spatial: AttentionWeights<T>,
    pub cross_norm: Norm<T>,
    pub cross: AttentionWeights<T>,
    pub ffn_norm: Norm<T>,
    pub ffn: FeedForward<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemporalBlock<T> {
    /// `[max_frames - 1, D]`.
    pub position: T,
    pub norm: Norm<T>,
    pub attn: AttentionWeights<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MixtureHead<T> {
    pub pi_hidden: Dense<T>,
    pub pi_out: Dense<T>,
    pub mu: Dense<T>,
    pub chol: Dense<T>,
}

/// Positions of every learnable tensor in [`ModelParams::tensors`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    /// `[8, role_embed_dim]`.
    pub role_embedding: usize,
    pub encoder_in: Dense<usize>,
    pub encoder: EncoderBlock<usize>,
    pub input_proj: Dense<usize>,
    /// Shared first layer of the relational MLP, `3 -> relational_dim`.
    pub relational: Dense<usize>,
    pub layers: Vec<SpatialLayer<usize>>,
    pub temporal: TemporalBlock<usize>,
    pub final_norm: Norm<usize>,
    pub head: MixtureHead<usize>,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Dense<usize> {
        Dense {
            w: self.push(format!("{name}.w"), vec![fan_in, fan_out], Init::FanIn(fan_in)),
            b: self.push(format!("{name}.b"), vec![fan_out], Init::Zeros),
        }
    }

    fn head(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: Init) -> Dense<usize> {
        Dense {
            w: self.push(
                format!("{name}.w"),
                vec![fan_in, fan_out],
                Init::ScaledFanIn(fan_in, HEAD_INIT_SCALE),
            ),
            b: self.push(format!("{name}.b"), vec![fan_out], bias),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm<usize> {
        Norm {
            gain: self.push(format!("{name}.gain"), vec![d], Init::Ones),
            bias: self.push(format!("{name}.bias"), vec![d], Init::Zeros),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> AttentionWeights<usize> {
        AttentionWeights {
            query: self.dense(&format!("{name}.query"), d, d),
            key: self.dense(&format!("{name}.key"), d, d),
            value: self.dense(&format!("{name}.value"), d, d),
            output: self.dense(&format!("{name}.output"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize) -> FeedForward<usize> {
        FeedForward {
            up: self.dense(&format!("{name}.up"), d, FFN_EXPANSION * d),
            down: self.dense(&format!("{name}.down"), FFN_EXPANSION * d, d),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<ParamSpec>) {
    let d = cfg.hidden_dim;
    let e = cfg.role_embed_dim;
    let m = cfg.mixture_components;
    let mut b = Builder { specs: Vec::new() };
    let role_embedding = b.push("role_embedding".into(), vec![Role::COUNT, e], Init::Normal);
    let encoder_in = b.dense("encoder.in", 2 + e, d);
    let encoder = EncoderBlock {
        attn_norm: b.norm("encoder.attn_norm", d),
        attn: b.attention("encoder.attn", d),
        ffn_norm: b.norm("encoder.ffn_norm", d),
        ffn: b.ffn("encoder.ffn", d),
    };
    let input_proj = b.dense("input_proj", 2 + e, d);
    let relational = b.dense("relational", 3, cfg.relational_dim);
    let layers = (0..cfg.num_layers)
        .map(|l| {
            let p = format!("layer{l}");
            SpatialLayer {
                bias_head: b.dense(&format!("{p}.bias_head"), cfg.relational_dim, cfg.num_heads),
                spatial_norm: b.norm(&format!("{p}.spatial_norm"), d),
                spatial: b.attention(&format!("{p}.spatial"), d),
                cross_norm: b.norm(&format!("{p}.cross_norm"), d),
                cross: b.attention(&format!("{p}.cross"), d),
                ffn_norm: b.norm(&format!("{p}.ffn_norm"), d),
                ffn: b.ffn(&format!("{p}.ffn"), d),
            }
        })
        .collect();
    let temporal = TemporalBlock {
        position: b.push("temporal.position".into(), vec![cfg.max_frames - 1, d], Init::Normal),
        norm: b.norm("temporal.norm", d),
        attn: b.attention("temporal.attn", d),
    };
    let final_norm = b.norm("final_norm", d);
    let head = MixtureHead {
        pi_hidden: b.dense("head.pi_hidden", d, d),
        pi_out: b.head("head.pi_out", d, m, Init::Zeros),
        mu: b.head("head.mu", d, 2 * m, Init::Zeros),
        chol: b.head("head.chol", d, 3 * m, Init::CholeskyBias),
    };
    let layout = Layout {
        role_embedding,
        encoder_in,
        encoder,
        input_proj,
        relational,
        layers,
        temporal,
        final_norm,
        head,
    };
    (layout, b.specs)
}

/// Exact number of learnable scalars for `cfg`.
pub fn count_params(cfg: &ModelConfig) -> usize {
    build_layout(cfg)
        .1
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

/// Every learnable tensor of the network, in layout order.
#[derive(Clone, Debug)]
pub struct ModelParams {
    config: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.names == other.names && self.tensors == other.tensors
    }
}

impl ModelParams {
    /// Fan-in uniform weights, zero biases, unit norm gains and `N(0, 0.02²)`
    /// embeddings, drawn from a ChaCha8 stream seeded with `seed`. The mixture
    /// head's output weights are shrunk and its Cholesky diagonal starts at a
    /// small spread.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, EMBEDDING_STD).expect("positive std");
        let tensors = specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::FanIn(fan_in) => {
                        let a = 1.0 / (fan_in as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-a..a)).collect()
                    }
                    Init::ScaledFanIn(fan_in, scale) => {
                        let a = 1.0 / (fan_in as f64).sqrt();
                        (0..n).map(|_| scale * rng.random_range(-a..a)).collect()
                    }
                    Init::CholeskyBias => {
                        let diag = (INITIAL_SIGMA - config.covariance_floor).max(0.01).exp_m1().ln();
                        (0..n).map(|j| if j % 3 == 1 { 0.0 } else { diag }).collect()
                    }
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                };
                Tensor::new(s.shape.clone(), data).expect("spec shape matches data")
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layout,
            names: specs.into_iter().map(|s| s.name).collect(),
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let ckpt = CheckpointRef {
            format: CHECKPOINT_FORMAT,
            config: &self.config,
            params: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(name, t)| NamedRef { name, tensor: t })
                .collect(),
        };
        serde_json::to_writer(&mut w, &ckpt)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        Self::from_checkpoint(ckpt)
    }

    fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format {}", ckpt.format)));
        }
        ckpt.config.validate()?;
        let (layout, specs) = build_layout(&ckpt.config);
        if specs.len() != ckpt.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, config needs {}",
                ckpt.params.len(),
                specs.len()
            )));
        }
        let mut tensors = Vec::with_capacity(specs.len());
        for (spec, named) in specs.iter().zip(ckpt.params) {
            if spec.name != named.name || spec.shape != named.tensor.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {} {:?} does not match expected {} {:?}",
                    named.name,
                    named.tensor.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            if !named.tensor.is_finite() {
                return Err(Error::NonFinite { op: "checkpoint" });
            }
            tensors.push(named.tensor);
        }
        Ok(Self {
            config: ckpt.config,
            layout,
            names: specs.into_iter().map(|s| s.name).collect(),
            tensors,
        })
    }
}

#[derive(Serialize)]
struct NamedRef<'a> {
    name: &'a str,
    #[serde(flatten)]
    tensor: &'a Tensor,
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format: u32,
    config: &'a ModelConfig,
    params: Vec<NamedRef<'a>>,
}

#[derive(Deserialize)]
struct Named {
    name: String,
    #[serde(flatten)]
    tensor: Tensor,
}

#[derive(Deserialize)]
struct Checkpoint {
    format: u32,
    config: ModelConfig,
    params: Vec<Named>,
}

//! The desk-scale multi-task model: a small dense encoder, the expert pool,
//! one router and one sigmoid head per task.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::balance::MassSource;
use crate::error::{Error, Result};
use crate::exec::ExpertPool;
use crate::layer::{Activation, Affine};
use crate::linalg::FlopCounter;
use crate::routing::{RouterBank, RoutingBudget, RoutingMode};

/// Router init scale; near zero so early routing is almost uniform.
pub const ROUTER_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    /// Raw feature width `d`.
    pub features: usize,
    pub encoder_hidden: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub experts: usize,
    pub tasks: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("features", self.features),
            ("encoder_hidden", self.encoder_hidden),
            ("d_in", self.d_in),
            ("d_out", self.d_out),
            ("experts", self.experts),
            ("tasks", self.tasks),
        ];
        for (k, v) in named {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        Ok(())
    }
}

/// Two-layer encoder `h = W2 tanh(W1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub hidden: Affine,
    pub out: Affine,
}

impl Encoder {
    /// Returns the post-activation hidden layer and `h`.
    pub fn forward(&self, x: &[f64], counter: &mut FlopCounter) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut hidden = self.hidden.apply(x, counter)?;
        Activation::Tanh.apply_slice(&mut hidden);
        let h = self.out.apply(&hidden, counter)?;
        Ok((hidden, h))
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: Affine::zeros(self.hidden.inputs(), self.hidden.outputs()),
            out: Affine::zeros(self.out.inputs(), self.out.outputs()),
        }
    }
}

/// Every trainable parameter. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub encoder: Encoder,
    pub experts: ExpertPool,
    pub routers: RouterBank,
    pub heads: Vec<Affine>,
}

/// A named view of one contiguous parameter block.
pub struct Block<'a> {
    pub name: String,
    pub data: &'a [f64],
}

pub struct BlockMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
}

fn affine_blocks<'a>(prefix: &str, a: &'a Affine, out: &mut Vec<Block<'a>>) {
    out.push(Block {
        name: format!("{prefix}.weight"),
        data: a.weight.data(),
    });
    out.push(Block {
        name: format!("{prefix}.bias"),
        data: &a.bias,
    });
}

fn affine_blocks_mut<'a>(prefix: &str, a: &'a mut Affine, out: &mut Vec<BlockMut<'a>>) {
    out.push(BlockMut {
        name: format!("{prefix}.weight"),
        data: a.weight.data_mut(),
    });
    out.push(BlockMut {
        name: format!("{prefix}.bias"),
        data: &mut a.bias,
    });
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            experts: self.experts.zeros_like(),
            routers: self.routers.zeros_like(),
            heads: self
                .heads
                .iter()
                .map(|h| Affine::zeros(h.inputs(), h.outputs()))
                .collect(),
        }
    }

    /// Blocks in checkpoint order: encoder, experts, routers, heads.
    pub fn blocks(&self) -> Vec<Block<'_>> {
        let mut out = Vec::new();
        affine_blocks("encoder.hidden", &self.encoder.hidden, &mut out);
        affine_blocks("encoder.out", &self.encoder.out, &mut out);
        for (e, a) in self.experts.experts.iter().enumerate() {
            affine_blocks(&format!("expert{e}"), a, &mut out);
        }
        for (t, a) in self.routers.routers.iter().enumerate() {
            affine_blocks(&format!("router{t}"), a, &mut out);
        }
        for (t, a) in self.heads.iter().enumerate() {
            affine_blocks(&format!("head{t}"), a, &mut out);
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        let mut out = Vec::new();
        affine_blocks_mut("encoder.hidden", &mut self.encoder.hidden, &mut out);
        affine_blocks_mut("encoder.out", &mut self.encoder.out, &mut out);
        for (e, a) in self.experts.experts.iter_mut().enumerate() {
            affine_blocks_mut(&format!("expert{e}"), a, &mut out);
        }
        for (t, a) in self.routers.routers.iter_mut().enumerate() {
            affine_blocks_mut(&format!("router{t}"), a, &mut out);
        }
        for (t, a) in self.heads.iter_mut().enumerate() {
            affine_blocks_mut(&format!("head{t}"), a, &mut out);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.data.len()).sum()
    }

    /// All parameters concatenated in block order.
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks()
            .into_iter()
            .flat_map(|b| b.data.iter().copied())
            .collect()
    }

    /// `self += alpha · other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Params) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += alpha * s;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for b in self.blocks_mut() {
            for v in b.data.iter_mut() {
                *v *= alpha;
            }
        }
    }
}

/// Everything needed to build a model besides the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub dims: ModelDims,
    pub expert_activation: Activation,
    pub mode: RoutingMode,
    /// `λ_t`
    pub loss_weights: Vec<f64>,
    /// Stage-I pooling weights `w_t`.
    pub task_weights: Vec<f64>,
    /// `β`
    pub beta: f64,
    pub mass_source: MassSource,
}

impl ModelSpec {
    /// Progressive routing with unit weights and the default regularizer.
    pub fn progressive(dims: ModelDims, shared: usize, adaptive: usize) -> Result<Self> {
        let budget = RoutingBudget::new(shared, adaptive, dims.experts)?;
        Ok(Self {
            dims,
            expert_activation: Activation::Relu,
            mode: RoutingMode::Progressive(budget),
            loss_weights: vec![1.0; dims.tasks],
            task_weights: vec![1.0; dims.tasks],
            beta: 0.01,
            mass_source: MassSource::Sparse,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.loss_weights.len() != self.dims.tasks {
            return Err(Error::config(
                "loss_weights",
                format!("expected {} values", self.dims.tasks),
            ));
        }
        if self.task_weights.len() != self.dims.tasks {
            return Err(Error::config(
                "task_weights",
                format!("expected {} values", self.dims.tasks),
            ));
        }
        if self.loss_weights.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config("loss_weights", "must be finite and >= 0"));
        }
        if self.task_weights.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config("task_weights", "must be finite and >= 0"));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::config("beta", "must be finite and >= 0"));
        }
        match self.mode {
            RoutingMode::Dense => {}
            RoutingMode::Naive { k } => {
                if k == 0 || k > self.dims.experts {
                    return Err(Error::config(
                        "k",
                        format!("must be in 1..={}", self.dims.experts),
                    ));
                }
            }
            RoutingMode::Progressive(b) => {
                RoutingBudget::new(b.shared(), b.adaptive(), self.dims.experts)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel {
    spec: ModelSpec,
    params: Params,
    seed: u64,
}

impl MoeModel {
    /// Fan-in uniform init for encoder, experts and heads; routers near zero.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let d = spec.dims;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder {
            hidden: Affine::fan_in(d.features, d.encoder_hidden, &mut rng),
            out: Affine::fan_in(d.encoder_hidden, d.d_in, &mut rng),
        };
        let experts =
            ExpertPool::init(d.experts, d.d_in, d.d_out, spec.expert_activation, &mut rng);
        let mut routers = RouterBank::init(d.tasks, d.d_in, d.experts, ROUTER_INIT_SCALE, &mut rng);
        routers.task_weights = spec.task_weights.clone();
        let heads = (0..d.tasks)
            .map(|_| Affine::fan_in(d.d_out, 1, &mut rng))
            .collect();
        Ok(Self {
            spec,
            params: Params {
                encoder,
                experts,
                routers,
                heads,
            },
            seed,
        })
    }

    /// Assembles a model from explicit parameters (checkpoint loading).
    pub fn from_parts(spec: ModelSpec, params: Params, seed: u64) -> Result<Self> {
        spec.validate()?;
        let d = spec.dims;
        let ok = params.encoder.hidden.weight.shape() == (d.encoder_hidden, d.features)
            && params.encoder.out.weight.shape() == (d.d_in, d.encoder_hidden)
            && params.experts.len() == d.experts
            && params.experts.d_in() == d.d_in
            && params.experts.d_out() == d.d_out
            && params.routers.tasks() == d.tasks
            && params.routers.experts() == d.experts
            && params.routers.routers.iter().all(|r| r.inputs() == d.d_in)
            && params.heads.len() == d.tasks
            && params
                .heads
                .iter()
                .all(|h| h.weight.shape() == (1, d.d_out));
        if !ok {
            return Err(Error::Invalid(
                "parameter shapes disagree with model dims".into(),
            ));
        }
        Ok(Self { spec, params, seed })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn dims(&self) -> ModelDims {
        self.spec.dims
    }

    pub fn mode(&self) -> RoutingMode {
        self.spec.mode
    }

    pub fn set_mode(&mut self, mode: RoutingMode) -> Result<()> {
        let mut spec = self.spec.clone();
        spec.mode = mode;
        spec.validate()?;
        self.spec = spec;
        Ok(())
    }

    pub fn beta(&self) -> f64 {
        self.spec.beta
    }

    pub fn set_beta(&mut self, beta: f64) {
        self.spec.beta = beta;
    }

    pub fn loss_weights(&self) -> &[f64] {
        &self.spec.loss_weights
    }

    pub fn set_loss_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        let mut spec = self.spec.clone();
        spec.loss_weights = weights;
        spec.validate()?;
        self.spec = spec;
        Ok(())
    }

    pub fn mass_source(&self) -> MassSource {
        self.spec.mass_source
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Per-task active count `K`.
    pub fn per_task_experts(&self) -> usize {
        self.spec.mode.per_task(self.spec.dims.experts)
    }
}

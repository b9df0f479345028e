//! Objective, reverse-mode gradients, optimizers and the training loop.
//!
//! The objective is `L = Σ_t λ_t · mean_b BCE(y_t, ŷ_t) + β · L_lb`.
//! Routing selections are treated as constants: gradients reach the
//! routers only through the renormalized weights over each `K_t`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::balance::{
    compute_load_stats, lb_loss_gradient, skew_from_counts, LoadStats, SkewDiagnostics,
};
use crate::data::InteractionLog;
use crate::error::{Error, Result};
use crate::exec::{forward_sparse, forward_with_selections, ForwardPass};
use crate::linalg::{matvec_t_acc, outer_acc, Matrix};
use crate::metrics::{auc, gauc};
use crate::model::{ModelSpec, MoeModel, Params};
use crate::routing::Selection;

/// Prediction clamp applied before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Features and labels for a set of instances.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    /// `[b][t]`, each 0 or 1.
    pub labels: Vec<Vec<u8>>,
}

impl Batch {
    pub fn new(features: Matrix, labels: Vec<Vec<u8>>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                op: "batch",
                left: features.shape(),
                right: (labels.len(), labels.first().map_or(0, Vec::len)),
            });
        }
        Ok(Self { features, labels })
    }

    pub fn from_log(log: &InteractionLog, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * log.features());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let r = &log.records()[i];
            data.extend_from_slice(&r.features);
            labels.push(r.labels.clone());
        }
        Self::new(Matrix::new(indices.len(), log.features(), data)?, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `Σ_t λ_t · BCE(y_t, ŷ_t)` averaged over the batch. Predictions are
/// clamped to `[1e-7, 1 - 1e-7]` before the log; values outside `[0, 1]`
/// are rejected.
pub fn task_loss(
    predictions: &[Vec<f64>],
    labels: &[Vec<u8>],
    loss_weights: &[f64],
) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            op: "task loss",
            left: (predictions.len(), loss_weights.len()),
            right: (labels.len(), loss_weights.len()),
        });
    }
    if predictions.is_empty() {
        return Err(Error::Empty("task loss"));
    }
    let mut total = 0.0;
    for (b, (pred, y)) in predictions.iter().zip(labels).enumerate() {
        if pred.len() != loss_weights.len() || y.len() != loss_weights.len() {
            return Err(Error::DimensionMismatch {
                op: "task loss",
                left: (b, pred.len()),
                right: (y.len(), loss_weights.len()),
            });
        }
        for (t, ((&p, &yt), &lambda)) in pred.iter().zip(y).zip(loss_weights).enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::PredictionOutOfRange {
                    instance: b,
                    task: t,
                    value: p,
                });
            }
            if lambda == 0.0 {
                continue;
            }
            let q = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let bce = if yt == 1 { -q.ln() } else { -(1.0 - q).ln() };
            total += lambda * bce;
        }
    }
    Ok(total / predictions.len() as f64)
}

/// `L = L_task + β · L_lb`
pub fn total_loss(task: f64, l_lb: f64, beta: f64) -> f64 {
    task + beta * l_lb
}

/// Objective value together with the forward quantities it came from.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub task_loss: f64,
    pub l_lb: f64,
    pub total: f64,
    pub stats: LoadStats,
    pub pass: ForwardPass,
}

/// Forward plus objective. `selections` freezes routing.
pub fn evaluate(
    model: &MoeModel,
    batch: &Batch,
    selections: Option<&[Selection]>,
) -> Result<Evaluation> {
    let pass = match selections {
        Some(s) => forward_with_selections(&batch.features, model, s)?,
        None => forward_sparse(&batch.features, model)?,
    };
    let task = task_loss(&pass.predictions, &batch.labels, model.loss_weights())?;
    let stats = compute_load_stats(&pass.decisions, model.mass_source())?;
    let total = total_loss(task, stats.l_lb, model.beta());
    Ok(Evaluation {
        task_loss: task,
        l_lb: stats.l_lb,
        total,
        stats,
        pass,
    })
}

/// Exact gradients of `L_task + β·L_lb` for the routing recorded in `eval`.
pub fn backward(model: &MoeModel, batch: &Batch, eval: &Evaluation) -> Result<Params> {
    let pass = &eval.pass;
    let dims = model.dims();
    let b_count = batch.len();
    if pass.predictions.len() != b_count
        || pass.decisions.len() != b_count
        || pass.h.rows() != b_count
        || pass.hidden.rows() != b_count
        || pass.plan.instances() != b_count
    {
        return Err(Error::Invalid(
            "forward cache does not match the batch".into(),
        ));
    }
    let params = model.params();
    let mut grads = params.zeros_like();
    let lambda = model.loss_weights();

    // Heads: dL/dlogit = λ_t / B · (ŷ - y) inside the clamp, 0 outside.
    let mut g_reps: Vec<Vec<Vec<f64>>> = Vec::with_capacity(b_count);
    for b in 0..b_count {
        let mut per_task = Vec::with_capacity(dims.tasks);
        for (t, &lam) in lambda.iter().enumerate() {
            let p = pass.predictions[b][t];
            let y = batch.labels[b][t] as f64;
            let g_logit = if lam == 0.0 || !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                0.0
            } else {
                lam / b_count as f64 * (p - y)
            };
            let rep = &pass.task_reps[b][t];
            let head = &params.heads[t];
            let gh = &mut grads.heads[t];
            for (g, r) in gh.weight.data_mut().iter_mut().zip(rep) {
                *g += g_logit * r;
            }
            gh.bias[0] += g_logit;
            per_task.push(
                head.weight
                    .row(0)
                    .iter()
                    .map(|w| g_logit * w)
                    .collect::<Vec<f64>>(),
            );
        }
        g_reps.push(per_task);
    }

    let lb = lb_loss_gradient(&eval.stats, &pass.decisions, model.beta())?;

    // Mixture: accumulate packed-row gradients and router-logit gradients.
    let d_out = dims.d_out;
    let mut g_packed = Matrix::zeros(pass.plan.total_activations(), d_out);
    let mut g_h = Matrix::zeros(b_count, dims.d_in);
    for b in 0..b_count {
        let d = &pass.decisions[b];
        let h_b = pass.h.row(b);
        for t in 0..dims.tasks {
            let g_rep = &g_reps[b][t];
            let w = &d.weights[t];
            let kt = &d.active[t];
            let mut g_w = Vec::with_capacity(kt.len());
            for &e in kt {
                let row = pass.plan.row_of(b, e).ok_or(Error::MissingBackMap {
                    instance: b,
                    expert: e,
                })?;
                let o = pass.packed_out.row(row);
                g_w.push(g_rep.iter().zip(o).map(|(a, c)| a * c).sum::<f64>());
                for (gp, gr) in g_packed.row_mut(row).iter_mut().zip(g_rep) {
                    *gp += w[e] * gr;
                }
            }
            let inner: f64 = kt.iter().zip(&g_w).map(|(&e, g)| w[e] * g).sum();
            let mut g_z = lb[b][t].clone();
            for (&e, g) in kt.iter().zip(&g_w) {
                g_z[e] += w[e] * (g - inner);
            }
            let router = &params.routers.routers[t];
            let gr = &mut grads.routers.routers[t];
            outer_acc(&mut gr.weight, &g_z, h_b);
            for (gb, gz) in gr.bias.iter_mut().zip(&g_z) {
                *gb += gz;
            }
            matvec_t_acc(&router.weight, &g_z, g_h.row_mut(b));
        }
    }

    // Experts, segment by segment.
    let act = params.experts.activation;
    let mut g_pre = vec![0.0; d_out];
    for e in 0..dims.experts {
        let expert = &params.experts.experts[e];
        for r in pass.plan.segment(e) {
            let (b, _) = pass.plan.gather_rows()[r];
            let o = pass.packed_out.row(r);
            for ((gp, go), ov) in g_pre.iter_mut().zip(g_packed.row(r)).zip(o) {
                *gp = go * act.derivative_from_output(*ov);
            }
            let ge = &mut grads.experts.experts[e];
            outer_acc(&mut ge.weight, &g_pre, pass.h.row(b));
            for (gb, gp) in ge.bias.iter_mut().zip(&g_pre) {
                *gb += gp;
            }
            matvec_t_acc(&expert.weight, &g_pre, g_h.row_mut(b));
        }
    }

    // Encoder.
    let enc = &params.encoder;
    let mut g_hidden = vec![0.0; dims.encoder_hidden];
    for b in 0..b_count {
        let a = pass.hidden.row(b);
        let gh = g_h.row(b);
        outer_acc(&mut grads.encoder.out.weight, gh, a);
        for (gb, g) in grads.encoder.out.bias.iter_mut().zip(gh) {
            *gb += g;
        }
        g_hidden.iter_mut().for_each(|v| *v = 0.0);
        matvec_t_acc(&enc.out.weight, gh, &mut g_hidden);
        for (g, av) in g_hidden.iter_mut().zip(a) {
            *g *= 1.0 - av * av;
        }
        outer_acc(
            &mut grads.encoder.hidden.weight,
            &g_hidden,
            batch.features.row(b),
        );
        for (gb, g) in grads.encoder.hidden.bias.iter_mut().zip(&g_hidden) {
            *gb += g;
        }
    }
    Ok(grads)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    moments: Option<(Params, Params)>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            moments: None,
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => params.add_scaled(-self.learning_rate, grads),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let (m, v) = self
                    .moments
                    .get_or_insert_with(|| (grads.zeros_like(), grads.zeros_like()));
                let c1 = 1.0 - beta1.powi(self.steps as i32);
                let c2 = 1.0 - beta2.powi(self.steps as i32);
                let lr = self.learning_rate;
                for (((p, g), m), v) in params
                    .blocks_mut()
                    .into_iter()
                    .zip(grads.blocks())
                    .zip(m.blocks_mut())
                    .zip(v.blocks_mut())
                {
                    for i in 0..p.data.len() {
                        let gi = g.data[i];
                        m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * gi;
                        v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
                        let mh = m.data[i] / c1;
                        let vh = v.data[i] / c2;
                        p.data[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Finite-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so exactly-zero or tiny
/// gradients are judged on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCheck {
    pub name: String,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn max_relative_error(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_relative_error)
            .fold(0.0, f64::max)
    }

    /// Worst error among blocks whose name starts with `prefix`.
    pub fn group_max(&self, prefix: &str) -> f64 {
        self.blocks
            .iter()
            .filter(|b| b.name.starts_with(prefix))
            .map(|b| b.max_relative_error)
            .fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Central differences of the total objective with routing frozen at the
/// selections of an initial forward pass.
pub fn grad_check(model: &MoeModel, batch: &Batch, tolerance: f64) -> Result<GradCheckReport> {
    let base = evaluate(model, batch, None)?;
    let selections: Vec<Selection> = base.pass.decisions.iter().map(|d| d.selection()).collect();
    let analytic = backward(model, batch, &base)?;

    let mut probe = model.clone();
    let names: Vec<(String, usize)> = model
        .params()
        .blocks()
        .into_iter()
        .map(|b| (b.name, b.data.len()))
        .collect();
    let mut blocks = Vec::with_capacity(names.len());
    for (bi, (name, len)) in names.into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..len {
            let orig = probe.params().blocks()[bi].data[i];
            set_param(&mut probe, bi, i, orig + GRAD_CHECK_STEP);
            let plus = evaluate(&probe, batch, Some(&selections))?.total;
            set_param(&mut probe, bi, i, orig - GRAD_CHECK_STEP);
            let minus = evaluate(&probe, batch, Some(&selections))?.total;
            set_param(&mut probe, bi, i, orig);
            let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
            let a = analytic.blocks()[bi].data[i];
            worst = worst.max(relative_error(a, numeric));
        }
        blocks.push(BlockCheck {
            name,
            max_relative_error: worst,
            passed: worst < tolerance,
        });
    }
    Ok(GradCheckReport { blocks, tolerance })
}

fn set_param(model: &mut MoeModel, block: usize, index: usize, value: f64) {
    model.params_mut().blocks_mut()[block].data[index] = value;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        Ok(())
    }
}

/// One row of the per-epoch metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Means over the epoch's training batches.
    pub task_loss: f64,
    pub l_lb: f64,
    pub total_loss: f64,
    /// Evaluation-set metrics after the epoch; `None` where undefined.
    pub auc: Vec<Option<f64>>,
    pub gauc: Vec<Option<f64>>,
    pub mean_union: f64,
    pub skew: SkewDiagnostics,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MoeModel,
    pub log: Vec<EpochMetrics>,
}

/// Predictions for every record, computed in chunks.
pub fn predict(model: &MoeModel, log: &InteractionLog, chunk: usize) -> Result<Vec<Vec<f64>>> {
    Ok(assess(model, log, chunk)?.predictions)
}

/// Routing and prediction summary of a model over a whole log.
#[derive(Debug, Clone, PartialEq)]
pub struct Assessment {
    pub predictions: Vec<Vec<f64>>,
    /// Aggregated `c_e` over all records.
    pub counts: Vec<u64>,
    pub mean_union: f64,
    pub auc: Vec<Option<f64>>,
    pub gauc: Vec<Option<f64>>,
}

pub fn assess(model: &MoeModel, log: &InteractionLog, chunk: usize) -> Result<Assessment> {
    let dims = model.dims();
    let mut predictions = Vec::with_capacity(log.len());
    let mut counts = vec![0u64; dims.experts];
    let mut union_total = 0usize;
    let idx: Vec<usize> = (0..log.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let batch = Batch::from_log(log, part)?;
        let pass = forward_sparse(&batch.features, model)?;
        for d in &pass.decisions {
            union_total += d.union.len();
            for kt in &d.active {
                for &e in kt {
                    counts[e] += 1;
                }
            }
        }
        predictions.extend(pass.predictions);
    }
    let users: Vec<&str> = log.records().iter().map(|r| r.user_id.as_str()).collect();
    let mut aucs = Vec::with_capacity(dims.tasks);
    let mut gaucs = Vec::with_capacity(dims.tasks);
    for t in 0..dims.tasks {
        let scores: Vec<f64> = predictions.iter().map(|p| p[t]).collect();
        let labels: Vec<u8> = log.records().iter().map(|r| r.labels[t]).collect();
        aucs.push(auc(&scores, &labels).ok());
        gaucs.push(gauc(&scores, &labels, &users).ok());
    }
    Ok(Assessment {
        predictions,
        counts,
        mean_union: if log.is_empty() {
            0.0
        } else {
            union_total as f64 / log.len() as f64
        },
        auc: aucs,
        gauc: gaucs,
    })
}

/// Mini-batch training. Deterministic for a fixed config: the seed fixes
/// initialization and the per-epoch shuffles. Metrics are computed on
/// `eval` when given, otherwise on the training log.
pub fn train(
    data: &InteractionLog,
    eval: Option<&InteractionLog>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    let dims = config.model.dims;
    if data.features() != dims.features || data.tasks() != dims.tasks {
        return Err(Error::Invalid(format!(
            "data has {} features and {} tasks, model expects {} and {}",
            data.features(),
            data.tasks(),
            dims.features,
            dims.tasks
        )));
    }
    let mut model = MoeModel::init(config.model.clone(), config.seed)?;
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5EED));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let eval_log = eval.unwrap_or(data);
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut task_sum, mut lb_sum, mut total_sum) = (0.0, 0.0, 0.0);
        let mut steps = 0usize;
        for (step, part) in order.chunks(config.batch_size).enumerate() {
            let batch = Batch::from_log(data, part)?;
            let ev = evaluate(&model, &batch, None)?;
            if !ev.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    snapshot: format!(
                        "task_loss={} l_lb={} beta={}",
                        ev.task_loss,
                        ev.l_lb,
                        model.beta()
                    ),
                });
            }
            let grads = backward(&model, &batch, &ev)?;
            optimizer.step(model.params_mut(), &grads);
            task_sum += ev.task_loss;
            lb_sum += ev.l_lb;
            total_sum += ev.total;
            steps += 1;
        }
        let a = assess(&model, eval_log, config.batch_size.max(256))?;
        log.push(EpochMetrics {
            epoch,
            task_loss: task_sum / steps as f64,
            l_lb: lb_sum / steps as f64,
            total_loss: total_sum / steps as f64,
            auc: a.auc,
            gauc: a.gauc,
            mean_union: a.mean_union,
            skew: skew_from_counts(&a.counts),
        });
    }
    Ok(TrainOutcome { model, log })
}

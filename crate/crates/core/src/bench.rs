//! Implementations behind the `smes` subcommands. Each takes a parsed
//! [`Config`] and output paths; every file is written to a temporary name
//! and renamed into place.
//!
//! CSV reals use Rust's shortest round-trip `Display` formatting, which is
//! locale independent. Empty cells mark undefined metrics.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::balance::{compute_load_stats, skew_from_counts, MassSource};
use crate::checkpoint;
use crate::config::Config;
use crate::data::{generate, read_log, write_log, InteractionLog, SynthSpec};
use crate::error::{Error, Result};
use crate::exec::forward_sparse;
use crate::layer::Activation;
use crate::metrics::{auc, gauc};
use crate::model::{ModelDims, ModelSpec, MoeModel};
use crate::routing::{route, RoutingBudget, RoutingMode};
use crate::train::{train, Batch, EpochMetrics, OptimizerKind, TrainConfig};
use crate::workspace::{provision, replay, LoadProfile, WorkspaceDims};

const SYNTH_KEYS: &[&str] = &[
    "users",
    "records_per_user",
    "features",
    "positive_rates",
    "signal_strength",
    "correlation",
    "user_scale",
];

const MODEL_KEYS: &[&str] = &[
    "encoder_hidden",
    "d_in",
    "d_out",
    "experts",
    "routing",
    "k",
    "shared",
    "adaptive",
    "expert_sparsity",
    "activation",
    "beta",
    "mass_source",
    "loss_weights",
    "task_weights",
];

const COMMON_KEYS: &[&str] = &["seed", "workers"];

fn check_keys(cfg: &Config, groups: &[&[&str]]) -> Result<()> {
    let known: Vec<&str> = groups.iter().flat_map(|g| g.iter().copied()).collect();
    cfg.check_known(&known)
}

/// Writes `bytes` to `path` via `path.tmp` and a rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::Invalid(format!("csv buffer: {}", e.error())))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Generator spec from config keys. `tasks` fixes the task count when
/// `positive_rates` is absent.
pub fn synth_from_config(cfg: &Config, tasks: Option<usize>) -> Result<SynthSpec> {
    let d = SynthSpec::default();
    let rates = match (cfg.contains("positive_rates"), tasks) {
        (false, Some(t)) => vec![0.2; t],
        _ => cfg.get_list("positive_rates", d.positive_rates.clone())?,
    };
    let strength = cfg.get_list("signal_strength", vec![3.0])?;
    let signal_strength = match strength.len() {
        1 => vec![strength[0]; rates.len()],
        _ => strength,
    };
    let spec = SynthSpec {
        users: cfg.get("users", d.users)?,
        records_per_user: cfg.get("records_per_user", d.records_per_user)?,
        features: cfg.get("features", d.features)?,
        positive_rates: rates,
        signal_strength,
        correlation: cfg.get("correlation", d.correlation)?,
        user_scale: cfg.get("user_scale", d.user_scale)?,
        seed: cfg.get("seed", d.seed)?,
    };
    spec.validate()?;
    Ok(spec)
}

/// `K = round(s·E)` split as `K_s = ⌊K/2⌋`, `K_a = K - K_s`.
pub fn sparsity_budget(sparsity: f64, experts: usize) -> Result<RoutingBudget> {
    if !(sparsity > 0.0 && sparsity <= 1.0) {
        return Err(Error::config("expert_sparsity", "must lie in (0, 1]"));
    }
    let k = ((sparsity * experts as f64).round() as usize).max(1);
    RoutingBudget::new(k / 2, k - k / 2, experts)
}

/// Model spec from config keys for data with the given shape.
pub fn model_spec_from_config(
    cfg: &Config,
    features: usize,
    tasks: usize,
    experts: Option<usize>,
) -> Result<ModelSpec> {
    let experts = match experts {
        Some(e) => e,
        None => cfg.get("experts", 16usize)?,
    };
    let dims = ModelDims {
        features,
        encoder_hidden: cfg.get("encoder_hidden", 32)?,
        d_in: cfg.get("d_in", 16)?,
        d_out: cfg.get("d_out", 8)?,
        experts,
        tasks,
    };
    dims.validate()?;
    let mode = match cfg.get_str("routing", "progressive") {
        "dense" => RoutingMode::Dense,
        "naive" => RoutingMode::Naive {
            k: cfg.get("k", 4usize)?,
        },
        "progressive" => match cfg.get_opt::<f64>("expert_sparsity")? {
            Some(s) => RoutingMode::Progressive(sparsity_budget(s, experts)?),
            None => {
                let shared = cfg.get("shared", 2usize)?;
                let adaptive = cfg.get("adaptive", 2usize)?;
                RoutingMode::Progressive(
                    RoutingBudget::new(shared, adaptive, experts)
                        .map_err(|e| Error::config("shared", e.to_string()))?,
                )
            }
        },
        other => {
            return Err(Error::config(
                "routing",
                format!("`{other}` is not dense, naive or progressive"),
            ))
        }
    };
    let activation = Activation::parse(cfg.get_str("activation", "relu"))
        .ok_or_else(|| Error::config("activation", "expected identity, relu or tanh"))?;
    let mass_source = match cfg.get_str("mass_source", "sparse") {
        "sparse" => MassSource::Sparse,
        "dense" => MassSource::Dense,
        other => {
            return Err(Error::config(
                "mass_source",
                format!("`{other}` is not sparse or dense"),
            ))
        }
    };
    let spec = ModelSpec {
        dims,
        expert_activation: activation,
        mode,
        loss_weights: cfg.get_list("loss_weights", vec![1.0; tasks])?,
        task_weights: cfg.get_list("task_weights", vec![1.0; tasks])?,
        beta: cfg.get("beta", 0.01)?,
        mass_source,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn cmd_generate(cfg: &Config, out: &Path) -> Result<InteractionLog> {
    check_keys(cfg, &[SYNTH_KEYS, COMMON_KEYS])?;
    let log = generate(&synth_from_config(cfg, None)?)?;
    write_log(out, &log)?;
    Ok(log)
}

pub fn metrics_header(tasks: &[String]) -> Vec<String> {
    let mut h: Vec<String> = [
        "epoch",
        "task_loss",
        "l_lb",
        "total_loss",
        "mean_union",
        "cv",
        "max_mean_ratio",
        "dead_fraction",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend(tasks.iter().map(|t| format!("auc_{t}")));
    h.extend(tasks.iter().map(|t| format!("gauc_{t}")));
    h
}

fn metrics_row(m: &EpochMetrics) -> Vec<String> {
    let mut r = vec![
        m.epoch.to_string(),
        m.task_loss.to_string(),
        m.l_lb.to_string(),
        m.total_loss.to_string(),
        m.mean_union.to_string(),
        m.skew.coefficient_of_variation.to_string(),
        m.skew.max_mean_ratio.to_string(),
        m.skew.dead_fraction.to_string(),
    ];
    r.extend(m.auc.iter().map(|v| opt(*v)));
    r.extend(m.gauc.iter().map(|v| opt(*v)));
    r
}

/// Training configuration from config keys.
pub fn train_config_from(cfg: &Config, features: usize, tasks: usize) -> Result<TrainConfig> {
    let optimizer = match cfg.get_str("optimizer", "sgd") {
        "sgd" => OptimizerKind::Sgd,
        "adam" => OptimizerKind::adam(),
        other => {
            return Err(Error::config(
                "optimizer",
                format!("`{other}` is not sgd or adam"),
            ))
        }
    };
    let tc = TrainConfig {
        model: model_spec_from_config(cfg, features, tasks, None)?,
        learning_rate: cfg.get("learning_rate", 0.05)?,
        batch_size: cfg.get("batch_size", 64)?,
        epochs: cfg.get("epochs", 5)?,
        seed: cfg.get("seed", 0)?,
        optimizer,
    };
    tc.validate()?;
    Ok(tc)
}

/// Trains on `data`, writing `model.ckpt` and `metrics.csv` into `out_dir`.
pub fn cmd_train(cfg: &Config, data: &Path, out_dir: &Path) -> Result<Vec<EpochMetrics>> {
    check_keys(
        cfg,
        &[
            MODEL_KEYS,
            COMMON_KEYS,
            &[
                "learning_rate",
                "batch_size",
                "epochs",
                "optimizer",
                "validation_fraction",
            ],
        ],
    )?;
    let log = read_log(data)?;
    if log.is_empty() {
        return Err(Error::Invalid(format!("{}: no records", data.display())));
    }
    let tc = train_config_from(cfg, log.features(), log.tasks())?;
    let fraction: f64 = cfg.get("validation_fraction", 0.2)?;
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::config("validation_fraction", "must lie in [0, 1)"));
    }
    let (train_log, valid_log) = log.split_by_user(1.0 - fraction);
    let eval = if valid_log.is_empty() {
        None
    } else {
        Some(&valid_log)
    };
    let outcome = train(&train_log, eval, &tc)?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    checkpoint::save(&out_dir.join("model.ckpt"), &outcome.model)?;
    let rows: Vec<Vec<String>> = outcome.log.iter().map(metrics_row).collect();
    atomic_write(
        &out_dir.join("metrics.csv"),
        &csv_bytes(&metrics_header(log.task_names()), &rows)?,
    )?;
    Ok(outcome.log)
}

/// One row of the benchmark report.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub mode: &'static str,
    pub experts: usize,
    pub shared: usize,
    pub adaptive: usize,
    pub tasks: usize,
    pub batch_size: usize,
    pub instances: usize,
    pub params_total: usize,
    pub params_active: usize,
    pub expert_flops: u64,
    pub total_flops: u64,
    pub mean_union: f64,
    pub max_union: usize,
    pub l_lb: f64,
    pub cv: f64,
    pub auc: Vec<Option<f64>>,
    pub gauc: Vec<Option<f64>>,
    pub median_wall_ns: u128,
}

impl BenchRow {
    pub fn header(tasks: usize) -> Vec<String> {
        let mut h: Vec<String> = [
            "mode",
            "experts",
            "shared",
            "adaptive",
            "tasks",
            "batch_size",
            "instances",
            "params_total",
            "params_active",
            "expert_flops",
            "total_flops",
            "mean_union",
            "max_union",
            "l_lb",
            "cv",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        h.extend((0..tasks).map(|t| format!("auc_{t}")));
        h.extend((0..tasks).map(|t| format!("gauc_{t}")));
        h
    }

    fn cells(&self) -> Vec<String> {
        let mut r = vec![
            self.mode.to_string(),
            self.experts.to_string(),
            self.shared.to_string(),
            self.adaptive.to_string(),
            self.tasks.to_string(),
            self.batch_size.to_string(),
            self.instances.to_string(),
            self.params_total.to_string(),
            self.params_active.to_string(),
            self.expert_flops.to_string(),
            self.total_flops.to_string(),
            self.mean_union.to_string(),
            self.max_union.to_string(),
            self.l_lb.to_string(),
            self.cv.to_string(),
        ];
        r.extend(self.auc.iter().map(|v| opt(*v)));
        r.extend(self.gauc.iter().map(|v| opt(*v)));
        r
    }
}

fn measure(
    model: &MoeModel,
    batches: &[Batch],
    log: &InteractionLog,
    mode: &'static str,
    reps: usize,
    warmup: usize,
) -> Result<BenchRow> {
    let d = model.dims();
    let mut expert_flops = 0u64;
    let mut total_flops = 0u64;
    let mut union_sum = 0usize;
    let mut max_union = 0usize;
    let mut lb_sum = 0.0;
    let mut counts = vec![0u64; d.experts];
    let mut preds: Vec<Vec<f64>> = Vec::new();
    for b in batches {
        let pass = forward_sparse(&b.features, model)?;
        expert_flops += pass.flops.expert;
        total_flops += pass.flops.total();
        for u in pass.union_sizes() {
            union_sum += u;
            max_union = max_union.max(u);
        }
        let stats = compute_load_stats(&pass.decisions, model.mass_source())?;
        lb_sum += stats.l_lb;
        for (c, s) in counts.iter_mut().zip(&stats.counts) {
            *c += s;
        }
        preds.extend(pass.predictions);
    }
    let instances = preds.len();
    let users: Vec<&str> = log.records()[..instances]
        .iter()
        .map(|r| r.user_id.as_str())
        .collect();
    let mut aucs = Vec::new();
    let mut gaucs = Vec::new();
    for t in 0..d.tasks {
        let s: Vec<f64> = preds.iter().map(|p| p[t]).collect();
        let y: Vec<u8> = log.records()[..instances]
            .iter()
            .map(|r| r.labels[t])
            .collect();
        aucs.push(auc(&s, &y).ok());
        gaucs.push(gauc(&s, &y, &users).ok());
    }

    let mut times = Vec::with_capacity(reps);
    for i in 0..warmup + reps {
        let start = Instant::now();
        for b in batches {
            std::hint::black_box(forward_sparse(&b.features, model)?);
        }
        if i >= warmup {
            times.push(start.elapsed().as_nanos());
        }
    }
    times.sort_unstable();

    let per_expert = model.params().experts.params_per_expert();
    let k = model.mode().per_task(d.experts);
    let (shared, adaptive) = match model.mode() {
        RoutingMode::Progressive(b) => (b.shared(), b.adaptive()),
        RoutingMode::Naive { k } => (0, k),
        RoutingMode::Dense => (d.experts, 0),
    };
    Ok(BenchRow {
        mode,
        experts: d.experts,
        shared,
        adaptive,
        tasks: d.tasks,
        batch_size: batches.first().map_or(0, Batch::len),
        instances,
        params_total: d.experts * per_expert,
        params_active: k * per_expert,
        expert_flops,
        total_flops,
        mean_union: union_sum as f64 / instances.max(1) as f64,
        max_union,
        l_lb: lb_sum / batches.len().max(1) as f64,
        cv: skew_from_counts(&counts).coefficient_of_variation,
        auc: aucs,
        gauc: gaucs,
        median_wall_ns: times.get(times.len() / 2).copied().unwrap_or(0),
    })
}

/// Dense-vs-sparse sweep over `experts_sweep`. Writes the report to `out`
/// and wall times to `<out>.timing.csv`.
pub fn cmd_bench(cfg: &Config, out: &Path) -> Result<Vec<BenchRow>> {
    check_keys(
        cfg,
        &[
            MODEL_KEYS,
            SYNTH_KEYS,
            COMMON_KEYS,
            &[
                "experts_sweep",
                "tasks",
                "batch_size",
                "batches",
                "repetitions",
                "warmup",
                "train_epochs",
                "learning_rate",
            ],
        ],
    )?;
    let sweep: Vec<usize> = cfg.get_list("experts_sweep", vec![16, 32, 64, 128, 256])?;
    if sweep.is_empty() {
        return Err(Error::config("experts_sweep", "empty sweep"));
    }
    let tasks: usize = cfg.get("tasks", 4)?;
    let batch_size: usize = cfg.get("batch_size", 64)?;
    let n_batches: usize = cfg.get("batches", 4)?;
    let reps: usize = cfg.get("repetitions", 5)?;
    let warmup: usize = cfg.get("warmup", 1)?;
    let epochs: usize = cfg.get("train_epochs", 0)?;
    let seed: u64 = cfg.get("seed", 0)?;
    if batch_size == 0 || n_batches == 0 {
        return Err(Error::config(
            "batch_size",
            "batch_size and batches must be positive",
        ));
    }
    if reps < 5 {
        return Err(Error::config("repetitions", "at least 5 repetitions"));
    }

    let mut synth = synth_from_config(cfg, Some(tasks))?;
    if synth.tasks() != tasks {
        return Err(Error::config(
            "positive_rates",
            format!("expected {tasks} rates"),
        ));
    }
    let needed = batch_size * n_batches;
    synth.users = synth.users.max(needed.div_ceil(synth.records_per_user));
    let log = generate(&synth)?;
    let batches: Vec<Batch> = (0..n_batches)
        .map(|i| {
            Batch::from_log(
                &log,
                &(i * batch_size..(i + 1) * batch_size).collect::<Vec<_>>(),
            )
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for &experts in &sweep {
        let spec = model_spec_from_config(cfg, log.features(), tasks, Some(experts))?;
        let sparse = if epochs > 0 {
            let tc = TrainConfig {
                model: spec,
                learning_rate: cfg.get("learning_rate", 0.05)?,
                batch_size,
                epochs,
                seed,
                optimizer: OptimizerKind::Sgd,
            };
            train(&log, None, &tc)?.model
        } else {
            MoeModel::init(spec, seed)?
        };
        let mut dense = sparse.clone();
        dense.set_mode(RoutingMode::Dense)?;
        rows.push(measure(&dense, &batches, &log, "dense", reps, warmup)?);
        rows.push(measure(&sparse, &batches, &log, "smes", reps, warmup)?);
    }

    let cells: Vec<Vec<String>> = rows.iter().map(BenchRow::cells).collect();
    atomic_write(out, &csv_bytes(&BenchRow::header(tasks), &cells)?)?;
    let timing: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.mode.to_string(),
                r.experts.to_string(),
                reps.to_string(),
                r.median_wall_ns.to_string(),
            ]
        })
        .collect();
    let th = ["mode", "experts", "repetitions", "median_wall_ns"].map(String::from);
    atomic_write(&sidecar(out, ".timing.csv"), &csv_bytes(&th, &timing)?)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathologyRow {
    pub tasks: usize,
    pub logits: &'static str,
    pub mode: &'static str,
    pub mean_union: f64,
    pub max_union: usize,
    pub union_bound: usize,
    pub cv: f64,
    pub max_mean_ratio: f64,
    pub dead_fraction: f64,
}

/// Logits where each task prefers its own block of `k` experts, starting
/// at a per-instance offset, so independent top-K choices are disjoint.
pub fn adversarial_logits(tasks: usize, experts: usize, k: usize, offset: usize) -> Vec<Vec<f64>> {
    (0..tasks)
        .map(|t| {
            let mut z = vec![0.0; experts];
            for j in 0..k {
                z[(offset + t * k + j) % experts] = 1.0;
            }
            z
        })
        .collect()
}

/// Union size and load skew of naive vs progressive routing as `T` grows.
pub fn cmd_pathology(cfg: &Config, out: &Path) -> Result<Vec<PathologyRow>> {
    check_keys(
        cfg,
        &[
            COMMON_KEYS,
            &[
                "experts",
                "k",
                "shared",
                "adaptive",
                "tasks_sweep",
                "batch_size",
                "logits",
                "logit_scale",
            ],
        ],
    )?;
    let experts: usize = cfg.get("experts", 64)?;
    let shared: usize = cfg.get("shared", 2)?;
    let adaptive: usize = cfg.get("adaptive", 2)?;
    let k: usize = cfg.get("k", shared + adaptive)?;
    let sweep: Vec<usize> = cfg.get_list("tasks_sweep", vec![1, 2, 4, 8, 16])?;
    let batch: usize = cfg.get("batch_size", 256)?;
    let kinds: Vec<String> = cfg.get_list(
        "logits",
        vec!["random".to_string(), "adversarial".to_string()],
    )?;
    let scale: f64 = cfg.get("logit_scale", 1.0)?;
    let seed: u64 = cfg.get("seed", 0)?;
    let budget = RoutingBudget::new(shared, adaptive, experts)
        .map_err(|e| Error::config("shared", e.to_string()))?;
    if k == 0 || k > experts {
        return Err(Error::config("k", format!("must be in 1..={experts}")));
    }
    if batch == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    if sweep.contains(&0) {
        return Err(Error::config("tasks_sweep", "task counts must be positive"));
    }

    let mut rows = Vec::new();
    for &tasks in &sweep {
        for kind in &kinds {
            let kind: &'static str = match kind.as_str() {
                "random" => "random",
                "adversarial" => "adversarial",
                other => {
                    return Err(Error::config(
                        "logits",
                        format!("`{other}` is not random or adversarial"),
                    ))
                }
            };
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ ((tasks as u64) << 32) ^ (kind.len() as u64));
            let instances: Vec<Vec<Vec<f64>>> = (0..batch)
                .map(|_| match kind {
                    "random" => (0..tasks)
                        .map(|_| {
                            (0..experts)
                                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                                .collect()
                        })
                        .collect(),
                    _ => adversarial_logits(tasks, experts, k, rng.gen_range(0..experts)),
                })
                .collect();
            let weights = vec![1.0; tasks];
            for (mode_name, mode, bound) in [
                ("naive", RoutingMode::Naive { k }, experts.min(tasks * k)),
                (
                    "progressive",
                    RoutingMode::Progressive(budget),
                    budget.union_bound(tasks, experts),
                ),
            ] {
                let decisions = instances
                    .iter()
                    .map(|z| route(z, mode, &weights))
                    .collect::<Result<Vec<_>>>()?;
                let stats = compute_load_stats(&decisions, MassSource::Sparse)?;
                let skew = skew_from_counts(&stats.counts);
                let unions: Vec<usize> = decisions.iter().map(|d| d.union.len()).collect();
                rows.push(PathologyRow {
                    tasks,
                    logits: kind,
                    mode: mode_name,
                    mean_union: unions.iter().sum::<usize>() as f64 / batch as f64,
                    max_union: unions.iter().copied().max().unwrap_or(0),
                    union_bound: bound,
                    cv: skew.coefficient_of_variation,
                    max_mean_ratio: skew.max_mean_ratio,
                    dead_fraction: skew.dead_fraction,
                });
            }
        }
    }
    let header = [
        "tasks",
        "logits",
        "mode",
        "mean_union",
        "max_union",
        "union_bound",
        "cv",
        "max_mean_ratio",
        "dead_fraction",
    ]
    .map(String::from);
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.tasks.to_string(),
                r.logits.to_string(),
                r.mode.to_string(),
                r.mean_union.to_string(),
                r.max_union.to_string(),
                r.union_bound.to_string(),
                r.cv.to_string(),
                r.max_mean_ratio.to_string(),
                r.dead_fraction.to_string(),
            ]
        })
        .collect();
    atomic_write(out, &csv_bytes(&header, &cells)?)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProvisionRow {
    pub quantile: f64,
    pub n_act: usize,
    pub pages_per_batch: usize,
    pub concurrency: usize,
    pub recommended_pages: usize,
    pub batches: usize,
    pub wait_events: u64,
    pub infeasible: usize,
}

/// `N_act` per batch from forward passes of a freshly initialized model.
/// A `heavy_tail_fraction` of batches is `heavy_tail_factor` times larger.
pub fn profile_forward(cfg: &Config) -> Result<LoadProfile> {
    let tasks: usize = cfg.get("tasks", 4)?;
    let batch_size: usize = cfg.get("batch_size", 64)?;
    let n_batches: usize = cfg.get("batches", 100)?;
    let fraction: f64 = cfg.get("heavy_tail_fraction", 0.0)?;
    let factor: usize = cfg.get("heavy_tail_factor", 4)?;
    let seed: u64 = cfg.get("seed", 0)?;
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config("heavy_tail_fraction", "must lie in [0, 1]"));
    }
    if factor == 0 {
        return Err(Error::config("heavy_tail_factor", "must be positive"));
    }
    let mut synth = synth_from_config(cfg, Some(tasks))?;
    let largest = batch_size * factor.max(1);
    synth.users = synth.users.max(largest.div_ceil(synth.records_per_user));
    let log = generate(&synth)?;
    let spec = model_spec_from_config(cfg, log.features(), tasks, None)?;
    let model = MoeModel::init(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    let mut profile = LoadProfile::default();
    for _ in 0..n_batches {
        let size = if rng.gen_bool(fraction) {
            largest
        } else {
            batch_size
        };
        let start = rng.gen_range(0..=log.len() - size);
        let idx: Vec<usize> = (start..start + size).collect();
        let pass = forward_sparse(&Batch::from_log(&log, &idx)?.features, &model)?;
        profile.push(pass.plan.total_activations());
    }
    Ok(profile)
}

/// Profiles `N_act`, provisions at each quantile and replays the profile
/// against each provisioned pool. Writes the report to `out` and the
/// samples to `<out>.samples`, one integer per line.
pub fn cmd_profile_workspace(cfg: &Config, out: &Path) -> Result<Vec<ProvisionRow>> {
    check_keys(
        cfg,
        &[
            MODEL_KEYS,
            SYNTH_KEYS,
            COMMON_KEYS,
            &[
                "tasks",
                "batch_size",
                "batches",
                "heavy_tail_fraction",
                "heavy_tail_factor",
                "quantiles",
                "concurrency",
                "page_size",
                "elem_bytes",
                "profile",
            ],
        ],
    )?;
    let quantiles: Vec<f64> = cfg.get_list("quantiles", vec![0.5, 0.9, 0.99, 1.0])?;
    let concurrency: usize = cfg.get("concurrency", 4)?;
    let dims = WorkspaceDims {
        d_in: cfg.get("d_in", 16)?,
        d_out: cfg.get("d_out", 8)?,
        elem_bytes: cfg.get("elem_bytes", 8)?,
        page_size: cfg.get("page_size", 4096)?,
    };
    if dims.elem_bytes == 0 {
        return Err(Error::config("elem_bytes", "must be positive"));
    }
    if dims.page_size == 0 {
        return Err(Error::config("page_size", "must be positive"));
    }
    if concurrency == 0 {
        return Err(Error::config("concurrency", "must be positive"));
    }
    if let Some(q) = quantiles.iter().find(|q| !(**q > 0.0 && **q <= 1.0)) {
        return Err(Error::config("quantiles", format!("{q} outside (0, 1]")));
    }
    let profile = match cfg.raw("profile") {
        Some(p) => LoadProfile::read(Path::new(p))?,
        None => profile_forward(cfg)?,
    };
    if profile.is_empty() {
        return Err(crate::workspace::WorkspaceError::EmptyProfile.into());
    }
    let mut rows = Vec::new();
    for &q in &quantiles {
        let p = provision(&profile, q, dims, concurrency)?;
        let r = replay(profile.samples(), p.recommended_pages, concurrency, dims)?;
        rows.push(ProvisionRow {
            quantile: q,
            n_act: p.n_act,
            pages_per_batch: p.pages_per_batch,
            concurrency,
            recommended_pages: p.recommended_pages,
            batches: r.batches,
            wait_events: r.wait_events,
            infeasible: r.infeasible,
        });
    }
    let header = [
        "quantile",
        "n_act",
        "pages_per_batch",
        "concurrency",
        "recommended_pages",
        "batches",
        "wait_events",
        "infeasible",
    ]
    .map(String::from);
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.quantile.to_string(),
                r.n_act.to_string(),
                r.pages_per_batch.to_string(),
                r.concurrency.to_string(),
                r.recommended_pages.to_string(),
                r.batches.to_string(),
                r.wait_events.to_string(),
                r.infeasible.to_string(),
            ]
        })
        .collect();
    atomic_write(out, &csv_bytes(&header, &cells)?)?;
    atomic_write(&sidecar(out, ".samples"), profile.to_text().as_bytes())?;
    Ok(rows)
}

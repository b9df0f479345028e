//! Batch-level expert utilization and the cross-task load-balancing
//! regularizer `L_lb = (E/K) Σ_e f̄_e · p̄_e`.
//!
//! `f̄_e` is the fraction of the `B·T` router decisions that selected
//! expert `e`; `p̄_e` is the mean routing weight it received. Selection is
//! not differentiable, so the gradient treats `f̄` as a constant and flows
//! only through `p̄`.

use crate::error::{Error, Result};
use crate::routing::RoutingDecision;

/// Which per-task weights feed `p̄`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MassSource {
    /// Renormalized weights over `K_t` (zero outside the selection).
    #[default]
    Sparse,
    /// Full softmax over all experts.
    Dense,
}

impl MassSource {
    pub fn code(self) -> u8 {
        match self {
            MassSource::Sparse => 0,
            MassSource::Dense => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(MassSource::Sparse),
            1 => Some(MassSource::Dense),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadStats {
    /// `f̄_e`
    pub frequency: Vec<f64>,
    /// `p̄_e`
    pub mass: Vec<f64>,
    pub l_lb: f64,
    /// `c_e`: raw selection counts over all `(b, t)`.
    pub counts: Vec<u64>,
    pub batch: usize,
    pub tasks: usize,
    /// Per-task budget `K`.
    pub per_task: usize,
    pub mass_source: MassSource,
}

impl LoadStats {
    pub fn experts(&self) -> usize {
        self.counts.len()
    }
}

pub fn compute_load_stats(decisions: &[RoutingDecision], source: MassSource) -> Result<LoadStats> {
    let first = decisions.first().ok_or(Error::Empty("load stats"))?;
    let tasks = first.tasks();
    let experts = first.experts();
    let per_task = first.active.first().map_or(0, Vec::len);
    if tasks == 0 || experts == 0 || per_task == 0 {
        return Err(Error::Empty("load stats"));
    }
    let mut counts = vec![0u64; experts];
    let mut mass_sum = vec![0.0; experts];
    for d in decisions {
        if d.tasks() != tasks || d.experts() != experts {
            return Err(Error::Invalid(
                "decisions disagree on task or expert count".into(),
            ));
        }
        for (t, kt) in d.active.iter().enumerate() {
            if kt.len() != per_task {
                return Err(Error::Invalid(format!(
                    "router selected {} experts, expected {per_task}",
                    kt.len()
                )));
            }
            for &e in kt {
                counts[e] += 1;
            }
            let w = match source {
                MassSource::Sparse => &d.weights[t],
                MassSource::Dense => &d.full_probs[t],
            };
            for (m, v) in mass_sum.iter_mut().zip(w) {
                *m += v;
            }
        }
    }
    let decisions_total = (decisions.len() * tasks) as f64;
    let frequency: Vec<f64> = counts.iter().map(|&c| c as f64 / decisions_total).collect();
    let mass: Vec<f64> = mass_sum.iter().map(|m| m / decisions_total).collect();
    let l_lb = experts as f64 / per_task as f64
        * frequency.iter().zip(&mass).map(|(f, p)| f * p).sum::<f64>();
    Ok(LoadStats {
        frequency,
        mass,
        l_lb,
        counts,
        batch: decisions.len(),
        tasks,
        per_task,
        mass_source: source,
    })
}

/// `scale · ∂L_lb/∂z_{t,e}^(b)`, indexed `[b][t][e]`, with `f̄` detached.
///
/// Under [`MassSource::Sparse`] the gradient is zero for `e ∉ K_t^(b)`.
pub fn lb_loss_gradient(
    stats: &LoadStats,
    decisions: &[RoutingDecision],
    scale: f64,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let experts = stats.experts();
    if decisions.len() != stats.batch
        || decisions
            .iter()
            .any(|d| d.tasks() != stats.tasks || d.experts() != experts)
    {
        return Err(Error::Invalid(
            "load stats were computed from different decisions".into(),
        ));
    }
    let coef = scale * experts as f64 / stats.per_task as f64 / (stats.batch * stats.tasks) as f64;
    // ∂L/∂w_{t,e} is the same for every (b, t).
    let dw: Vec<f64> = stats.frequency.iter().map(|f| coef * f).collect();
    let grads = decisions
        .iter()
        .map(|d| {
            (0..stats.tasks)
                .map(|t| {
                    let mut g = vec![0.0; experts];
                    if scale == 0.0 {
                        return g;
                    }
                    match stats.mass_source {
                        MassSource::Sparse => {
                            let w = &d.weights[t];
                            let kt = &d.active[t];
                            let inner: f64 = kt.iter().map(|&e| w[e] * dw[e]).sum();
                            for &e in kt {
                                g[e] = w[e] * (dw[e] - inner);
                            }
                        }
                        MassSource::Dense => {
                            let p = &d.full_probs[t];
                            let inner: f64 = p.iter().zip(&dw).map(|(a, b)| a * b).sum();
                            for e in 0..experts {
                                g[e] = p[e] * (dw[e] - inner);
                            }
                        }
                    }
                    g
                })
                .collect()
        })
        .collect();
    Ok(grads)
}

/// Skew of the aggregated loads `c_e`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkewDiagnostics {
    /// Population standard deviation over mean.
    pub coefficient_of_variation: f64,
    pub max_mean_ratio: f64,
    /// Fraction of experts with `c_e = 0`.
    pub dead_fraction: f64,
}

pub fn skew_diagnostics(stats: &LoadStats) -> SkewDiagnostics {
    skew_from_counts(&stats.counts)
}

pub fn skew_from_counts(counts: &[u64]) -> SkewDiagnostics {
    if counts.is_empty() {
        return SkewDiagnostics {
            coefficient_of_variation: 0.0,
            max_mean_ratio: 0.0,
            dead_fraction: 0.0,
        };
    }
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<u64>() as f64 / n;
    let dead = counts.iter().filter(|&&c| c == 0).count() as f64 / n;
    if mean == 0.0 {
        return SkewDiagnostics {
            coefficient_of_variation: 0.0,
            max_mean_ratio: 0.0,
            dead_fraction: dead,
        };
    }
    let var = counts
        .iter()
        .map(|&c| (c as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let max = *counts.iter().max().unwrap() as f64;
    SkewDiagnostics {
        coefficient_of_variation: var.sqrt() / mean,
        max_mean_ratio: max / mean,
        dead_fraction: dead,
    }
}

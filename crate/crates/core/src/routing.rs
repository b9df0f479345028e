//! Expert routing: the dense multi-gate baseline, naive per-task top-K,
//! and two-stage progressive routing (shared set, then task-adaptive sets).
//!
//! All routing is per instance. A [`RoutingDecision`] records the shared
//! set `S`, each task's adaptive set `A_t`, the final sets `K_t = S ∪ A_t`,
//! their union `U`, and the renormalized sparse weights over each `K_t`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::exec::ExpertPool;
use crate::layer::Affine;
use crate::linalg::{axpy, softmax, top_k, FlopCounter};

/// Shared/adaptive split of the per-task budget `K = K_s + K_a`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingBudget {
    shared: usize,
    adaptive: usize,
}

impl RoutingBudget {
    /// Validates against an expert count.
    pub fn new(shared: usize, adaptive: usize, experts: usize) -> Result<Self> {
        let k = shared + adaptive;
        if k == 0 {
            return Err(Error::InvalidBudget(
                "K = K_s + K_a must be at least 1".into(),
            ));
        }
        if k > experts {
            return Err(Error::InvalidBudget(format!(
                "K = {k} exceeds expert count {experts}"
            )));
        }
        Ok(Self { shared, adaptive })
    }

    pub fn shared(&self) -> usize {
        self.shared
    }

    pub fn adaptive(&self) -> usize {
        self.adaptive
    }

    pub fn total(&self) -> usize {
        self.shared + self.adaptive
    }

    /// Upper bound on distinct experts per instance, `min(E, K_s + T·K_a)`.
    pub fn union_bound(&self, tasks: usize, experts: usize) -> usize {
        (self.shared + tasks * self.adaptive).min(experts)
    }
}

/// How the model selects experts for each task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingMode {
    /// Every expert for every task with full softmax gates.
    Dense,
    /// Independent per-task top-K.
    Naive { k: usize },
    /// Shared top-`K_s` from pooled scores, then per-task top-`K_a`.
    Progressive(RoutingBudget),
}

impl RoutingMode {
    /// Per-task active count `K`.
    pub fn per_task(&self, experts: usize) -> usize {
        match self {
            RoutingMode::Dense => experts,
            RoutingMode::Naive { k } => *k,
            RoutingMode::Progressive(b) => b.total(),
        }
    }
}

/// One affine router per task, producing `E` logits from `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterBank {
    pub routers: Vec<Affine>,
    /// Stage-I pooling weights `w_t`, default 1.
    pub task_weights: Vec<f64>,
}

impl RouterBank {
    pub fn new(routers: Vec<Affine>, task_weights: Vec<f64>) -> Result<Self> {
        if routers.len() != task_weights.len() {
            return Err(Error::DimensionMismatch {
                op: "router bank",
                left: (routers.len(), 1),
                right: (task_weights.len(), 1),
            });
        }
        if task_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Invalid(
                "task weights must be finite and non-negative".into(),
            ));
        }
        if let Some(first) = routers.first() {
            let shape = first.weight.shape();
            if routers.iter().any(|r| r.weight.shape() != shape) {
                return Err(Error::Invalid("routers disagree on shape".into()));
            }
        }
        Ok(Self {
            routers,
            task_weights,
        })
    }

    /// Near-zero init so that early routing is close to uniform.
    pub fn init<R: Rng + ?Sized>(
        tasks: usize,
        inputs: usize,
        experts: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let routers = (0..tasks)
            .map(|_| Affine::uniform(inputs, experts, scale, rng))
            .collect();
        Self {
            routers,
            task_weights: vec![1.0; tasks],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            routers: self
                .routers
                .iter()
                .map(|r| Affine::zeros(r.inputs(), r.outputs()))
                .collect(),
            task_weights: self.task_weights.clone(),
        }
    }

    pub fn tasks(&self) -> usize {
        self.routers.len()
    }

    pub fn experts(&self) -> usize {
        self.routers.first().map_or(0, Affine::outputs)
    }

    /// Logits `z_t` for every task.
    pub fn logits(&self, h: &[f64], counter: &mut FlopCounter) -> Result<Vec<Vec<f64>>> {
        self.routers.iter().map(|r| r.apply(h, counter)).collect()
    }
}

/// Per-instance routing outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    /// `S`, ascending.
    pub shared: Vec<usize>,
    /// `A_t` per task, ascending.
    pub adaptive: Vec<Vec<usize>>,
    /// `K_t = S ∪ A_t` per task, ascending.
    pub active: Vec<Vec<usize>>,
    /// `U = ∪_t K_t`, ascending.
    pub union: Vec<usize>,
    /// `T × E` sparse weights, exactly zero outside `K_t`.
    pub weights: Vec<Vec<f64>>,
    /// `T × E` full softmax probabilities.
    pub full_probs: Vec<Vec<f64>>,
}

/// The selection part of a decision, reusable to freeze routing while
/// parameters move (finite-difference checks).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub shared: Vec<usize>,
    pub adaptive: Vec<Vec<usize>>,
}

impl RoutingDecision {
    pub fn tasks(&self) -> usize {
        self.active.len()
    }

    pub fn experts(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn union_size(&self) -> usize {
        self.union.len()
    }

    /// Experts activated by every task.
    pub fn intersection(&self) -> Vec<usize> {
        let Some(first) = self.active.first() else {
            return Vec::new();
        };
        first
            .iter()
            .copied()
            .filter(|e| self.active.iter().all(|k| k.binary_search(e).is_ok()))
            .collect()
    }

    pub fn selection(&self) -> Selection {
        Selection {
            shared: self.shared.clone(),
            adaptive: self.adaptive.clone(),
        }
    }
}

/// Builds the decision for given `S` and `A_t`, computing `K_t`, `U` and the
/// renormalized weights from the logits.
pub fn decide(
    logits: &[Vec<f64>],
    probs: Vec<Vec<f64>>,
    selection: Selection,
) -> Result<RoutingDecision> {
    let experts = logits.first().map_or(0, Vec::len);
    if selection.adaptive.len() != logits.len() {
        return Err(Error::DimensionMismatch {
            op: "decide",
            left: (logits.len(), experts),
            right: (selection.adaptive.len(), 0),
        });
    }
    let mut in_union = vec![false; experts];
    let mut active = Vec::with_capacity(logits.len());
    let mut weights = Vec::with_capacity(logits.len());
    for (z, a) in logits.iter().zip(&selection.adaptive) {
        let mut k: Vec<usize> = selection.shared.iter().chain(a).copied().collect();
        k.sort_unstable();
        k.dedup();
        if let Some(&bad) = k.iter().find(|&&e| e >= experts) {
            return Err(Error::UnknownExpert {
                expert: bad,
                experts,
            });
        }
        for &e in &k {
            in_union[e] = true;
        }
        weights.push(sparse_weights(z, &k)?);
        active.push(k);
    }
    let union = (0..experts).filter(|&e| in_union[e]).collect();
    Ok(RoutingDecision {
        shared: selection.shared,
        adaptive: selection.adaptive,
        active,
        union,
        weights,
        full_probs: probs,
    })
}

/// `exp(z_e) / Σ_{j∈K} exp(z_j)` on `K`, zero elsewhere.
pub fn sparse_weights(logits: &[f64], selected: &[usize]) -> Result<Vec<f64>> {
    if selected.is_empty() {
        return Err(Error::Empty("sparse weights"));
    }
    let sub: Vec<f64> = selected.iter().map(|&e| logits[e]).collect();
    let p = softmax(&sub)?;
    let mut w = vec![0.0; logits.len()];
    for (&e, pv) in selected.iter().zip(p) {
        w[e] = pv;
    }
    Ok(w)
}

fn full_probs(logits: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    logits.iter().map(|z| softmax(z)).collect()
}

fn check_rectangular(logits: &[Vec<f64>]) -> Result<usize> {
    let experts = logits
        .first()
        .map(Vec::len)
        .ok_or(Error::Empty("routing logits"))?;
    if let Some(bad) = logits.iter().find(|z| z.len() != experts) {
        return Err(Error::DimensionMismatch {
            op: "routing logits",
            left: (logits.len(), experts),
            right: (1, bad.len()),
        });
    }
    Ok(experts)
}

/// Dense gating: every task activates every expert with its full softmax.
pub fn dense_route(logits: &[Vec<f64>]) -> Result<RoutingDecision> {
    let experts = check_rectangular(logits)?;
    let selection = Selection {
        shared: (0..experts).collect(),
        adaptive: vec![Vec::new(); logits.len()],
    };
    decide(logits, full_probs(logits)?, selection)
}

/// Independent per-task top-K with weights renormalized inside each `K_t`.
pub fn naive_sparse_route(logits: &[Vec<f64>], k: usize) -> Result<RoutingDecision> {
    let experts = check_rectangular(logits)?;
    if k == 0 || k > experts {
        return Err(Error::TopKTooLarge { k, len: experts });
    }
    let adaptive = logits
        .iter()
        .map(|z| top_k(z, k))
        .collect::<Result<Vec<_>>>()?;
    let selection = Selection {
        shared: Vec::new(),
        adaptive,
    };
    decide(logits, full_probs(logits)?, selection)
}

/// Pooled score `s_e = Σ_t w_t · p_{t,e}` (literal sum, not normalized by Σw).
pub fn compute_global_scores(probs: &[Vec<f64>], task_weights: &[f64]) -> Result<Vec<f64>> {
    let experts = check_rectangular(probs)?;
    if probs.len() != task_weights.len() {
        return Err(Error::DimensionMismatch {
            op: "global scores",
            left: (probs.len(), experts),
            right: (task_weights.len(), 1),
        });
    }
    let mut s = vec![0.0; experts];
    for (p, &w) in probs.iter().zip(task_weights) {
        axpy(w, p, &mut s);
    }
    Ok(s)
}

/// Two-stage routing. Stage I picks `S = top_{K_s}(s)` from pooled
/// probabilities; stage II lets each task pick `K_a` more experts by raw
/// logit from outside `S`.
pub fn progressive_route(
    logits: &[Vec<f64>],
    probs: &[Vec<f64>],
    budget: RoutingBudget,
    task_weights: &[f64],
) -> Result<RoutingDecision> {
    let experts = check_rectangular(logits)?;
    let candidates = experts.saturating_sub(budget.shared());
    if candidates < budget.adaptive() {
        return Err(Error::CandidateShortage {
            candidates,
            adaptive: budget.adaptive(),
        });
    }
    let scores = compute_global_scores(probs, task_weights)?;
    let shared = top_k(&scores, budget.shared())?;

    let mut is_shared = vec![false; experts];
    for &e in &shared {
        is_shared[e] = true;
    }
    let rest: Vec<usize> = (0..experts).filter(|&e| !is_shared[e]).collect();
    let adaptive = logits
        .iter()
        .map(|z| {
            let sub: Vec<f64> = rest.iter().map(|&e| z[e]).collect();
            Ok(top_k(&sub, budget.adaptive())?
                .into_iter()
                .map(|i| rest[i])
                .collect())
        })
        .collect::<Result<Vec<Vec<usize>>>>()?;

    decide(logits, probs.to_vec(), Selection { shared, adaptive })
}

/// Routes one instance under `mode`.
pub fn route(
    logits: &[Vec<f64>],
    mode: RoutingMode,
    task_weights: &[f64],
) -> Result<RoutingDecision> {
    match mode {
        RoutingMode::Dense => dense_route(logits),
        RoutingMode::Naive { k } => naive_sparse_route(logits, k),
        RoutingMode::Progressive(budget) => {
            let probs = full_probs(logits)?;
            progressive_route(logits, &probs, budget, task_weights)
        }
    }
}

/// Reapplies a frozen selection to fresh logits.
pub fn route_frozen(logits: &[Vec<f64>], selection: &Selection) -> Result<RoutingDecision> {
    check_rectangular(logits)?;
    decide(logits, full_probs(logits)?, selection.clone())
}

/// Dense multi-gate mixture for one representation: all `E` experts run,
/// each task mixes them with its full softmax gate.
pub fn dense_mmoe_forward(
    h: &[f64],
    experts: &ExpertPool,
    routers: &RouterBank,
    counter: &mut FlopCounter,
) -> Result<Vec<Vec<f64>>> {
    if h.len() != experts.d_in() {
        return Err(Error::DimensionMismatch {
            op: "dense mmoe",
            left: (1, h.len()),
            right: (experts.d_in(), experts.d_out()),
        });
    }
    if routers.experts() != experts.len() {
        return Err(Error::DimensionMismatch {
            op: "dense mmoe gates",
            left: (routers.tasks(), routers.experts()),
            right: (experts.len(), experts.d_out()),
        });
    }
    let outputs = (0..experts.len())
        .map(|e| experts.apply(e, h, counter))
        .collect::<Result<Vec<_>>>()?;
    let logits = routers.logits(h, counter)?;
    logits
        .iter()
        .map(|z| {
            let p = softmax(z)?;
            let mut ht = vec![0.0; experts.d_out()];
            for (o, &pe) in outputs.iter().zip(&p) {
                axpy(pe, o, &mut ht);
            }
            Ok(ht)
        })
        .collect()
}

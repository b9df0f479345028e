//! Deduplicated expert execution.
//!
//! For a batch, every instance `b` needs the experts in its union `U^(b)`
//! exactly once, no matter how many tasks selected them. The
//! [`ExecutionPlan`] packs those `(b, e)` pairs expert-major so each
//! expert owns one contiguous segment of the packed input; the grouped
//! matmul then applies `W_e` to segment `e`, and reconstruction reads the
//! packed outputs back through the back-map `π(b, e)`.

use std::ops::Range;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layer::{sigmoid, Activation, Affine};
use crate::linalg::{axpy, dot, FlopCounter, Matrix};
use crate::model::MoeModel;
use crate::routing::{route, route_frozen, RoutingDecision, Selection};

/// `E` affine experts `d_in → d_out` sharing one elementwise activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPool {
    pub experts: Vec<Affine>,
    pub activation: Activation,
}

impl ExpertPool {
    pub fn new(experts: Vec<Affine>, activation: Activation) -> Result<Self> {
        if let Some(first) = experts.first() {
            let shape = first.weight.shape();
            if let Some(bad) = experts.iter().find(|e| e.weight.shape() != shape) {
                return Err(Error::DimensionMismatch {
                    op: "expert pool",
                    left: shape,
                    right: bad.weight.shape(),
                });
            }
        }
        Ok(Self {
            experts,
            activation,
        })
    }

    pub fn init<R: Rng + ?Sized>(
        count: usize,
        d_in: usize,
        d_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            experts: (0..count)
                .map(|_| Affine::fan_in(d_in, d_out, rng))
                .collect(),
            activation,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            experts: self
                .experts
                .iter()
                .map(|e| Affine::zeros(e.inputs(), e.outputs()))
                .collect(),
            activation: self.activation,
        }
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.experts.first().map_or(0, Affine::inputs)
    }

    pub fn d_out(&self) -> usize {
        self.experts.first().map_or(0, Affine::outputs)
    }

    /// Parameters of a single expert.
    pub fn params_per_expert(&self) -> usize {
        self.experts.first().map_or(0, Affine::param_count)
    }

    /// `o_e = act(W_e x + b_e)` for one expert.
    pub fn apply(&self, expert: usize, x: &[f64], counter: &mut FlopCounter) -> Result<Vec<f64>> {
        let mut y = self.experts[expert].apply(x, counter)?;
        self.activation.apply_slice(&mut y);
        Ok(y)
    }
}

/// Packed layout for one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionPlan {
    loads: Vec<usize>,
    offsets: Vec<usize>,
    gather_rows: Vec<(usize, usize)>,
    back_map: Vec<Vec<(usize, usize)>>,
}

impl ExecutionPlan {
    /// Traffic calculation and reindexing from the per-instance unions.
    ///
    /// Rows are expert-major; inside a segment instances appear in
    /// ascending order.
    pub fn build(unions: &[Vec<usize>], experts: usize) -> Result<Self> {
        let mut loads = vec![0usize; experts];
        let mut sets = Vec::with_capacity(unions.len());
        for u in unions {
            let mut u = u.clone();
            u.sort_unstable();
            u.dedup();
            if let Some(&bad) = u.iter().find(|&&e| e >= experts) {
                return Err(Error::UnknownExpert {
                    expert: bad,
                    experts,
                });
            }
            for &e in &u {
                loads[e] += 1;
            }
            sets.push(u);
        }
        let mut offsets = Vec::with_capacity(experts + 1);
        offsets.push(0);
        for &n in &loads {
            offsets.push(offsets.last().unwrap() + n);
        }
        let total = *offsets.last().unwrap();

        let mut cursor = offsets[..experts].to_vec();
        let mut gather_rows = vec![(0, 0); total];
        let mut back_map: Vec<Vec<(usize, usize)>> =
            sets.iter().map(|u| Vec::with_capacity(u.len())).collect();
        // Visiting instances in ascending order fills each segment stably.
        for (b, u) in sets.iter().enumerate() {
            for &e in u {
                let row = cursor[e];
                cursor[e] += 1;
                gather_rows[row] = (b, e);
                back_map[b].push((e, row));
            }
        }
        Ok(Self {
            loads,
            offsets,
            gather_rows,
            back_map,
        })
    }

    /// `n_e`
    pub fn loads(&self) -> &[usize] {
        &self.loads
    }

    /// `N_act = Σ_e n_e`
    pub fn total_activations(&self) -> usize {
        self.gather_rows.len()
    }

    pub fn experts(&self) -> usize {
        self.loads.len()
    }

    pub fn instances(&self) -> usize {
        self.back_map.len()
    }

    /// Prefix sums of `n_e`, length `E + 1`.
    pub fn segment_offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn segment(&self, expert: usize) -> Range<usize> {
        self.offsets[expert]..self.offsets[expert + 1]
    }

    /// `(instance, expert)` of every packed row.
    pub fn gather_rows(&self) -> &[(usize, usize)] {
        &self.gather_rows
    }

    /// `π(b, e)`
    pub fn row_of(&self, instance: usize, expert: usize) -> Option<usize> {
        let m = self.back_map.get(instance)?;
        m.binary_search_by_key(&expert, |&(e, _)| e)
            .ok()
            .map(|i| m[i].1)
    }

    /// `(expert, row)` pairs of one instance, ascending by expert.
    pub fn instance_rows(&self, instance: usize) -> &[(usize, usize)] {
        &self.back_map[instance]
    }
}

/// Copies each activated instance representation into the packed `X`.
pub fn gather(inputs: &Matrix, plan: &ExecutionPlan) -> Result<Matrix> {
    if inputs.rows() != plan.instances() {
        return Err(Error::PlanMismatch {
            plan_rows: plan.instances(),
            input_rows: inputs.rows(),
        });
    }
    let mut data = Vec::with_capacity(plan.total_activations() * inputs.cols());
    for &(b, _) in plan.gather_rows() {
        data.extend_from_slice(inputs.row(b));
    }
    Matrix::new(plan.total_activations(), inputs.cols(), data)
}

/// Applies `W_e` (with bias and activation) to expert `e`'s contiguous
/// segment of `X`. Adds `N_act · d_in · d_out` to the counter.
pub fn grouped_gemm(
    x: &Matrix,
    pool: &ExpertPool,
    plan: &ExecutionPlan,
    counter: &mut FlopCounter,
) -> Result<Matrix> {
    if x.rows() != plan.total_activations() {
        return Err(Error::PlanMismatch {
            plan_rows: plan.total_activations(),
            input_rows: x.rows(),
        });
    }
    if plan.experts() != pool.len() {
        return Err(Error::DimensionMismatch {
            op: "grouped gemm",
            left: (plan.experts(), 0),
            right: (pool.len(), 0),
        });
    }
    if x.cols() != pool.d_in() {
        return Err(Error::DimensionMismatch {
            op: "grouped gemm",
            left: x.shape(),
            right: (pool.d_in(), pool.d_out()),
        });
    }
    let (d_in, d_out) = (pool.d_in(), pool.d_out());
    let segments: Vec<Vec<f64>> = (0..pool.len())
        .into_par_iter()
        .map(|e| {
            let expert = &pool.experts[e];
            let seg = plan.segment(e);
            let mut out = Vec::with_capacity(seg.len() * d_out);
            for r in seg {
                let xr = x.row(r);
                for (w_row, b) in expert.weight.row_iter().zip(&expert.bias) {
                    out.push(pool.activation.apply(dot(w_row, xr) + b));
                }
            }
            out
        })
        .collect();
    counter.add((plan.total_activations() * d_in * d_out) as u64);
    let out = Matrix::new(plan.total_activations(), d_out, segments.concat())
        .map_err(|_| Error::NonFinite("grouped gemm"))?;
    Ok(out)
}

/// `h_t^(b) = Σ_{e∈K_t^(b)} p_{t,e}^(b) · O[π(b, e)]`, indexed `[b][t]`.
pub fn reconstruct_task_reps(
    packed_out: &Matrix,
    plan: &ExecutionPlan,
    decisions: &[RoutingDecision],
) -> Result<Vec<Vec<Vec<f64>>>> {
    if decisions.len() != plan.instances() {
        return Err(Error::PlanMismatch {
            plan_rows: plan.instances(),
            input_rows: decisions.len(),
        });
    }
    decisions
        .iter()
        .enumerate()
        .map(|(b, d)| {
            d.active
                .iter()
                .zip(&d.weights)
                .map(|(kt, w)| {
                    let mut ht = vec![0.0; packed_out.cols()];
                    for &e in kt {
                        let row = plan.row_of(b, e).ok_or(Error::MissingBackMap {
                            instance: b,
                            expert: e,
                        })?;
                        axpy(w[e], packed_out.row(row), &mut ht);
                    }
                    Ok(ht)
                })
                .collect()
        })
        .collect()
}

/// Multiply-adds per stage of one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopBreakdown {
    pub encoder: u64,
    pub router: u64,
    pub expert: u64,
    pub head: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.encoder + self.router + self.expert + self.head
    }
}

/// Everything a forward pass produces, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Encoder hidden layer after its activation, `B × hidden`.
    pub hidden: Matrix,
    /// Shared representation `h`, `B × d_in`.
    pub h: Matrix,
    /// Router logits `[b][t][e]`.
    pub logits: Vec<Vec<Vec<f64>>>,
    pub decisions: Vec<RoutingDecision>,
    pub plan: ExecutionPlan,
    /// Packed expert outputs `O`, `N_act × d_out`.
    pub packed_out: Matrix,
    /// `h_t^(b)`, `[b][t]`.
    pub task_reps: Vec<Vec<Vec<f64>>>,
    /// `ŷ_t^(b)`, `[b][t]`.
    pub predictions: Vec<Vec<f64>>,
    pub flops: FlopBreakdown,
}

impl ForwardPass {
    pub fn union_sizes(&self) -> Vec<usize> {
        self.decisions
            .iter()
            .map(RoutingDecision::union_size)
            .collect()
    }
}

/// Full sparse forward: encoder, routing, plan, grouped matmul,
/// reconstruction and heads.
pub fn forward_sparse(features: &Matrix, model: &MoeModel) -> Result<ForwardPass> {
    forward_impl(features, model, None)
}

/// Forward with routing selections held fixed (weights still follow the
/// current logits).
pub fn forward_with_selections(
    features: &Matrix,
    model: &MoeModel,
    selections: &[Selection],
) -> Result<ForwardPass> {
    if selections.len() != features.rows() {
        return Err(Error::PlanMismatch {
            plan_rows: selections.len(),
            input_rows: features.rows(),
        });
    }
    forward_impl(features, model, Some(selections))
}

struct InstanceFront {
    hidden: Vec<f64>,
    h: Vec<f64>,
    logits: Vec<Vec<f64>>,
    decision: RoutingDecision,
    encoder_flops: u64,
    router_flops: u64,
}

fn forward_impl(
    features: &Matrix,
    model: &MoeModel,
    frozen: Option<&[Selection]>,
) -> Result<ForwardPass> {
    let dims = model.dims();
    if features.cols() != dims.features {
        return Err(Error::DimensionMismatch {
            op: "forward",
            left: features.shape(),
            right: (dims.features, dims.d_in),
        });
    }
    let params = model.params();
    let fronts: Vec<InstanceFront> = (0..features.rows())
        .into_par_iter()
        .map(|b| {
            let mut enc = FlopCounter::new();
            let (hidden, h) = params.encoder.forward(features.row(b), &mut enc)?;
            let mut rc = FlopCounter::new();
            let logits = params.routers.logits(&h, &mut rc)?;
            let decision = match frozen {
                Some(sel) => route_frozen(&logits, &sel[b])?,
                None => route(&logits, model.mode(), &params.routers.task_weights)?,
            };
            Ok(InstanceFront {
                hidden,
                h,
                logits,
                decision,
                encoder_flops: enc.multiply_adds(),
                router_flops: rc.multiply_adds(),
            })
        })
        .collect::<Result<_>>()?;

    let batch = fronts.len();
    let mut flops = FlopBreakdown::default();
    let mut hidden = Vec::with_capacity(batch * dims.encoder_hidden);
    let mut h = Vec::with_capacity(batch * dims.d_in);
    let mut logits = Vec::with_capacity(batch);
    let mut decisions = Vec::with_capacity(batch);
    for f in fronts {
        flops.encoder += f.encoder_flops;
        flops.router += f.router_flops;
        hidden.extend(f.hidden);
        h.extend(f.h);
        logits.push(f.logits);
        decisions.push(f.decision);
    }
    let hidden = Matrix::new(batch, dims.encoder_hidden, hidden)?;
    let h = Matrix::new(batch, dims.d_in, h)?;

    let unions: Vec<Vec<usize>> = decisions.iter().map(|d| d.union.clone()).collect();
    let plan = ExecutionPlan::build(&unions, dims.experts)?;
    let x = gather(&h, &plan)?;
    let mut ec = FlopCounter::new();
    let packed_out = grouped_gemm(&x, &params.experts, &plan, &mut ec)?;
    flops.expert = ec.multiply_adds();
    let task_reps = reconstruct_task_reps(&packed_out, &plan, &decisions)?;

    let mut hc = FlopCounter::new();
    let mut predictions = Vec::with_capacity(batch);
    for reps in &task_reps {
        let mut row = Vec::with_capacity(dims.tasks);
        for (head, ht) in params.heads.iter().zip(reps) {
            let logit = head.apply(ht, &mut hc)?[0];
            row.push(sigmoid(logit));
        }
        predictions.push(row);
    }
    flops.head = hc.multiply_adds();

    Ok(ForwardPass {
        hidden,
        h,
        logits,
        decisions,
        plan,
        packed_out,
        task_reps,
        predictions,
        flops,
    })
}

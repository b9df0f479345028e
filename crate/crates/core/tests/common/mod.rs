//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smes_core::layer::Activation;
use smes_core::routing::route;
use smes_core::workspace::WorkspacePool;
use smes_core::{Matrix, ModelDims, ModelSpec, MoeModel};

pub fn mat(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn affine(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    w.iter()
        .zip(b)
        .map(|(row, bi)| row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + bi)
        .collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn act(a: Activation, v: f64) -> f64 {
    match a {
        Activation::Identity => v,
        Activation::Relu => v.max(0.0),
        Activation::Tanh => v.tanh(),
    }
}

pub fn act_grad(a: Activation, y: f64) -> f64 {
    match a {
        Activation::Identity => 1.0,
        Activation::Relu => {
            if y > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Tanh => 1.0 - y * y,
    }
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Per-task execution with no sharing: every (instance, task, expert)
/// triple recomputes the expert output from scratch.
pub struct PerTaskOutput {
    pub reps: Vec<Vec<Vec<f64>>>,
    pub predictions: Vec<Vec<f64>>,
}

pub fn per_task_forward(model: &MoeModel, features: &Matrix) -> PerTaskOutput {
    let p = model.params();
    let dims = model.dims();
    let w1 = mat(&p.encoder.hidden.weight);
    let w2 = mat(&p.encoder.out.weight);
    let mut reps = Vec::new();
    let mut predictions = Vec::new();
    for b in 0..features.rows() {
        let a: Vec<f64> = affine(&w1, &p.encoder.hidden.bias, features.row(b))
            .into_iter()
            .map(f64::tanh)
            .collect();
        let h = affine(&w2, &p.encoder.out.bias, &a);
        let logits: Vec<Vec<f64>> = p
            .routers
            .routers
            .iter()
            .map(|r| affine(&mat(&r.weight), &r.bias, &h))
            .collect();
        let decision = route(&logits, model.mode(), &p.routers.task_weights).unwrap();
        let mut inst_reps = Vec::new();
        let mut inst_preds = Vec::new();
        for t in 0..dims.tasks {
            let mut rep = vec![0.0; dims.d_out];
            for &e in &decision.active[t] {
                let ex = &p.experts.experts[e];
                let o: Vec<f64> = affine(&mat(&ex.weight), &ex.bias, &h)
                    .into_iter()
                    .map(|v| act(p.experts.activation, v))
                    .collect();
                for (r, v) in rep.iter_mut().zip(&o) {
                    *r += decision.weights[t][e] * v;
                }
            }
            let head = &p.heads[t];
            inst_preds.push(sigmoid(affine(&mat(&head.weight), &head.bias, &rep)[0]));
            inst_reps.push(rep);
        }
        reps.push(inst_reps);
        predictions.push(inst_preds);
    }
    PerTaskOutput { reps, predictions }
}

/// Dense multi-gate mixture with its own forward, backward and SGD step.
#[derive(Clone)]
pub struct DenseNet {
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<Vec<f64>>,
    b2: Vec<f64>,
    ew: Vec<Vec<Vec<f64>>>,
    eb: Vec<Vec<f64>>,
    rw: Vec<Vec<Vec<f64>>>,
    rb: Vec<Vec<f64>>,
    hw: Vec<Vec<f64>>,
    hb: Vec<f64>,
    act: Activation,
}

fn zeros_like2(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    m.iter().map(|r| vec![0.0; r.len()]).collect()
}

fn sgd2(m: &mut [Vec<f64>], g: &[Vec<f64>], lr: f64) {
    for (r, gr) in m.iter_mut().zip(g) {
        for (v, gv) in r.iter_mut().zip(gr) {
            *v -= lr * gv;
        }
    }
}

fn sgd1(m: &mut [f64], g: &[f64], lr: f64) {
    for (v, gv) in m.iter_mut().zip(g) {
        *v -= lr * gv;
    }
}

fn outer(acc: &mut [Vec<f64>], u: &[f64], v: &[f64]) {
    for (row, ui) in acc.iter_mut().zip(u) {
        for (a, vj) in row.iter_mut().zip(v) {
            *a += ui * vj;
        }
    }
}

fn tmatvec(w: &[Vec<f64>], y: &[f64], out: &mut [f64]) {
    for (row, yi) in w.iter().zip(y) {
        for (o, wij) in out.iter_mut().zip(row) {
            *o += wij * yi;
        }
    }
}

impl DenseNet {
    pub fn from_model(m: &MoeModel) -> Self {
        let p = m.params();
        Self {
            w1: mat(&p.encoder.hidden.weight),
            b1: p.encoder.hidden.bias.clone(),
            w2: mat(&p.encoder.out.weight),
            b2: p.encoder.out.bias.clone(),
            ew: p.experts.experts.iter().map(|e| mat(&e.weight)).collect(),
            eb: p.experts.experts.iter().map(|e| e.bias.clone()).collect(),
            rw: p.routers.routers.iter().map(|r| mat(&r.weight)).collect(),
            rb: p.routers.routers.iter().map(|r| r.bias.clone()).collect(),
            hw: p.heads.iter().map(|h| h.weight.row(0).to_vec()).collect(),
            hb: p.heads.iter().map(|h| h.bias[0]).collect(),
            act: p.experts.activation,
        }
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let a: Vec<f64> = affine(&self.w1, &self.b1, x)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let h = affine(&self.w2, &self.b2, &a);
        let outs: Vec<Vec<f64>> = (0..self.ew.len())
            .map(|e| {
                affine(&self.ew[e], &self.eb[e], &h)
                    .into_iter()
                    .map(|v| act(self.act, v))
                    .collect()
            })
            .collect();
        (0..self.hw.len())
            .map(|t| {
                let p = softmax(&affine(&self.rw[t], &self.rb[t], &h));
                let mut r = vec![0.0; outs[0].len()];
                for (o, pe) in outs.iter().zip(&p) {
                    for (ri, oi) in r.iter_mut().zip(o) {
                        *ri += pe * oi;
                    }
                }
                sigmoid(self.hw[t].iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() + self.hb[t])
            })
            .collect()
    }

    /// Loss of the batch under current parameters (the regularizer is the
    /// constant 1 when every expert is active), then one SGD step.
    pub fn step(
        &mut self,
        xs: &[Vec<f64>],
        ys: &[Vec<u8>],
        lambda: &[f64],
        beta: f64,
        lr: f64,
    ) -> f64 {
        let bsz = xs.len() as f64;
        let n_e = self.ew.len();
        let tasks = self.hw.len();
        let mut gw1 = zeros_like2(&self.w1);
        let mut gb1 = vec![0.0; self.b1.len()];
        let mut gw2 = zeros_like2(&self.w2);
        let mut gb2 = vec![0.0; self.b2.len()];
        let mut gew: Vec<_> = self.ew.iter().map(|w| zeros_like2(w)).collect();
        let mut geb: Vec<_> = self.eb.iter().map(|b| vec![0.0; b.len()]).collect();
        let mut grw: Vec<_> = self.rw.iter().map(|w| zeros_like2(w)).collect();
        let mut grb: Vec<_> = self.rb.iter().map(|b| vec![0.0; b.len()]).collect();
        let mut ghw = zeros_like2(&self.hw);
        let mut ghb = vec![0.0; tasks];
        let mut loss = 0.0;

        for (x, y) in xs.iter().zip(ys) {
            let a: Vec<f64> = affine(&self.w1, &self.b1, x)
                .into_iter()
                .map(f64::tanh)
                .collect();
            let h = affine(&self.w2, &self.b2, &a);
            let outs: Vec<Vec<f64>> = (0..n_e)
                .map(|e| {
                    affine(&self.ew[e], &self.eb[e], &h)
                        .into_iter()
                        .map(|v| act(self.act, v))
                        .collect()
                })
                .collect();
            let d_out = outs[0].len();
            let mut g_h = vec![0.0; h.len()];
            let mut g_outs = vec![vec![0.0; d_out]; n_e];
            for t in 0..tasks {
                let p = softmax(&affine(&self.rw[t], &self.rb[t], &h));
                let mut r = vec![0.0; d_out];
                for (o, pe) in outs.iter().zip(&p) {
                    for (ri, oi) in r.iter_mut().zip(o) {
                        *ri += pe * oi;
                    }
                }
                let yhat = sigmoid(
                    self.hw[t].iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() + self.hb[t],
                );
                let q = yhat.clamp(1e-7, 1.0 - 1e-7);
                let yt = y[t] as f64;
                loss += lambda[t] * -(yt * q.ln() + (1.0 - yt) * (1.0 - q).ln());
                let g = if (1e-7..=1.0 - 1e-7).contains(&yhat) {
                    lambda[t] / bsz * (yhat - yt)
                } else {
                    0.0
                };
                for (gw, ri) in ghw[t].iter_mut().zip(&r) {
                    *gw += g * ri;
                }
                ghb[t] += g;
                let g_r: Vec<f64> = self.hw[t].iter().map(|w| g * w).collect();
                let g_p: Vec<f64> = outs
                    .iter()
                    .map(|o| o.iter().zip(&g_r).map(|(a, b)| a * b).sum())
                    .collect();
                let inner: f64 = p.iter().zip(&g_p).map(|(a, b)| a * b).sum();
                let g_z: Vec<f64> = p
                    .iter()
                    .zip(&g_p)
                    .map(|(pe, gp)| pe * (gp - inner))
                    .collect();
                outer(&mut grw[t], &g_z, &h);
                sgd1(&mut grb[t], &g_z, -1.0);
                tmatvec(&self.rw[t], &g_z, &mut g_h);
                for e in 0..n_e {
                    for (go, gr) in g_outs[e].iter_mut().zip(&g_r) {
                        *go += p[e] * gr;
                    }
                }
            }
            for e in 0..n_e {
                let g_pre: Vec<f64> = g_outs[e]
                    .iter()
                    .zip(&outs[e])
                    .map(|(g, o)| g * act_grad(self.act, *o))
                    .collect();
                outer(&mut gew[e], &g_pre, &h);
                sgd1(&mut geb[e], &g_pre, -1.0);
                tmatvec(&self.ew[e], &g_pre, &mut g_h);
            }
            outer(&mut gw2, &g_h, &a);
            sgd1(&mut gb2, &g_h, -1.0);
            let mut g_a = vec![0.0; a.len()];
            tmatvec(&self.w2, &g_h, &mut g_a);
            let g_pre: Vec<f64> = g_a
                .iter()
                .zip(&a)
                .map(|(g, av)| g * (1.0 - av * av))
                .collect();
            outer(&mut gw1, &g_pre, x);
            sgd1(&mut gb1, &g_pre, -1.0);
        }

        sgd2(&mut self.w1, &gw1, lr);
        sgd1(&mut self.b1, &gb1, lr);
        sgd2(&mut self.w2, &gw2, lr);
        sgd1(&mut self.b2, &gb2, lr);
        for e in 0..n_e {
            sgd2(&mut self.ew[e], &gew[e], lr);
            sgd1(&mut self.eb[e], &geb[e], lr);
        }
        for t in 0..tasks {
            sgd2(&mut self.rw[t], &grw[t], lr);
            sgd1(&mut self.rb[t], &grb[t], lr);
        }
        sgd2(&mut self.hw, &ghw, lr);
        sgd1(&mut self.hb, &ghb, lr);
        loss / bsz + beta
    }
}

pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0u64;
    for i in 0..scores.len() {
        if labels[i] != 1 {
            continue;
        }
        for j in 0..scores.len() {
            if labels[j] == 0 {
                pairs += 1;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs as f64
}

/// Random dims within the given caps and a progressive model over them.
pub fn random_progressive(
    rng: &mut ChaCha8Rng,
    max_e: usize,
    max_t: usize,
    max_d: usize,
) -> MoeModel {
    let experts = rng.gen_range(2..=max_e);
    let tasks = rng.gen_range(1..=max_t);
    let shared = rng.gen_range(0..experts);
    let adaptive = rng.gen_range(if shared == 0 { 1 } else { 0 }..=(experts - shared));
    let dims = ModelDims {
        features: rng.gen_range(1..=max_d),
        encoder_hidden: rng.gen_range(1..=max_d),
        d_in: rng.gen_range(1..=max_d),
        d_out: rng.gen_range(1..=max_d),
        experts,
        tasks,
    };
    let mut spec = ModelSpec::progressive(dims, shared, adaptive).unwrap();
    spec.expert_activation =
        [Activation::Relu, Activation::Tanh, Activation::Identity][rng.gen_range(0..3)];
    spec.task_weights = (0..tasks).map(|_| rng.gen_range(0.1..2.0)).collect();
    let mut m = MoeModel::init(spec, rng.gen()).unwrap();
    // Spread router logits so selections differ across tasks.
    for r in &mut m.params_mut().routers.routers {
        for v in r.weight.data_mut() {
            *v *= 200.0;
        }
    }
    m
}

pub fn random_features(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::random_uniform(rows, cols, 2.0, rng)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Runs `ops` allocate/release pairs over `workers` threads and checks
/// exclusive page ownership with a per-page atomic owner tag.
pub fn stress(seed: u64, workers: usize, ops: usize, pages: usize) {
    let pool = Arc::new(WorkspacePool::new(4096, pages).unwrap());
    let owners: Arc<Vec<AtomicU64>> = Arc::new((0..pages).map(|_| AtomicU64::new(0)).collect());
    let per_worker = ops / workers;
    let threads: Vec<_> = (0..workers)
        .map(|w| {
            let pool = Arc::clone(&pool);
            let owners = Arc::clone(&owners);
            thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + w as u64);
                for _ in 0..per_worker {
                    let n = rng.gen_range(1..=pages / 4);
                    let b = pool.allocate(n, None).unwrap();
                    let tag = b.id() + 1;
                    for p in b.start()..b.end() {
                        let prev = owners[p].swap(tag, Ordering::SeqCst);
                        assert_eq!(prev, 0, "page {p} already owned");
                    }
                    if rng.gen_bool(0.1) {
                        thread::yield_now();
                    }
                    for p in b.start()..b.end() {
                        assert_eq!(owners[p].swap(0, Ordering::SeqCst), tag);
                    }
                    pool.release(b).unwrap();
                }
            })
        })
        .collect();
    for t in threads {
        t.join().unwrap();
    }
    let s = pool.stats();
    assert_eq!(s.allocations, (per_worker * workers) as u64);
    assert_eq!(s.allocations, s.releases);
    assert_eq!((s.held_blocks, s.pages_in_use, s.waiting), (0, 0, 0));
    assert!(s.peak_pages_in_use <= pages);
    assert!(pool.held_blocks().is_empty());
}

//! Sparse-gradient bias on a block-separable quadratic.
//!
//! Each client `c` owns targets `θ*_{c,i}` for every expert block `i` and a
//! row of activation probabilities `p_{c,i}` summing to its budget `K_c`.
//! Because the objective is separable, a block's conditional gradient equals
//! its unconditional one, so the bias of the masked estimator has a closed
//! form that the Monte-Carlo and SGD experiments here can be checked against.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Rng;

const FEASIBILITY_TOL: f64 = 1e-9;

/// `[block][coordinate]`.
pub type Blocks = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticMoeObjective {
    experts: usize,
    block_dim: usize,
    /// `[client][block]` target vectors.
    targets: Vec<Vec<Vec<f64>>>,
    /// `[client][block]` inclusion probabilities.
    probs: Vec<Vec<f64>>,
    budgets: Vec<usize>,
    weights: Vec<f64>,
}

/// Per-block gradient with the activation mask that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrad {
    pub mask: Vec<bool>,
    pub grad: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasReport {
    /// `‖B_c‖²` per client.
    pub client_bias: Vec<f64>,
    /// `‖Σ_c p_c B_c‖²`.
    pub aggregate: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub plateau_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FloorResult {
    pub k: usize,
    pub initial_gap: f64,
    pub plateau_gap: f64,
    pub final_gap: f64,
    /// Non-finite iterates or a plateau above the starting gap.
    pub diverged: bool,
}

/// `η_t = η₀ / √(t + 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FloorSchedule {
    pub eta0: f64,
    pub steps: usize,
}

impl FloorSchedule {
    pub fn eta(&self, t: usize) -> f64 {
        self.eta0 / ((t + 1) as f64).sqrt()
    }
}

impl Default for FloorSchedule {
    fn default() -> Self {
        Self { eta0: 0.5, steps: 20_000 }
    }
}

fn check_row(row: &[f64], experts: usize) -> Result<usize> {
    if row.len() != experts {
        return Err(Error::dim("probability row", experts, row.len()));
    }
    if let Some(p) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidInput(format!("activation probability {p} outside [0, 1]")));
    }
    let s: f64 = row.iter().sum();
    let k = s.round();
    if (s - k).abs() > FEASIBILITY_TOL || k < 1.0 {
        return Err(Error::InvalidInput(format!(
            "activation probabilities sum to {s}, expected a positive integer budget"
        )));
    }
    Ok(k as usize)
}

/// `K/M` on every block.
pub fn balanced_probs(experts: usize, k: usize) -> Vec<f64> {
    vec![k as f64 / experts as f64; experts]
}

/// `p = 1` on blocks `offset..offset+k` (cyclic), 0 elsewhere.
pub fn imbalanced_probs(experts: usize, k: usize, offset: usize) -> Vec<f64> {
    let mut p = vec![0.0; experts];
    for j in 0..k {
        p[(offset + j) % experts] = 1.0;
    }
    p
}

/// Random feasible row: repeated proportional rescaling with capping at 1
/// until the sum is exactly `k`.
pub fn random_probs(experts: usize, k: usize, rng: &mut Rng) -> Vec<f64> {
    let mut p: Vec<f64> = (0..experts).map(|_| 1e-3 + 0.99 * rng.uniform()).collect();
    if k == experts {
        return vec![1.0; experts];
    }
    for _ in 0..100 {
        let capped: f64 = p.iter().filter(|&&v| v >= 1.0).count() as f64;
        let free: f64 = p.iter().filter(|&&v| v < 1.0).sum();
        let scale = (k as f64 - capped) / free;
        for v in p.iter_mut().filter(|v| **v < 1.0) {
            *v = (*v * scale).min(1.0);
        }
        let s: f64 = p.iter().sum();
        if (s - k as f64).abs() < 1e-13 {
            break;
        }
    }
    // absorb rounding into the largest uncapped entry
    let s: f64 = p.iter().sum();
    if let Some(j) = (0..experts).filter(|&j| p[j] < 1.0).max_by(|&a, &b| p[a].total_cmp(&p[b])) {
        p[j] = (p[j] + k as f64 - s).clamp(0.0, 1.0);
    }
    p
}

/// Madow systematic sampling: exactly `K` distinct indices, index `i`
/// included with probability `p_i`.
pub fn systematic_sample(p: &[f64], rng: &mut Rng) -> Result<Vec<usize>> {
    let k = check_row(p, p.len())?;
    let total: f64 = p.iter().sum();
    let scale = k as f64 / total;
    let u = rng.uniform();
    let mut picked = Vec::with_capacity(k);
    let mut lo = 0.0;
    let mut next = u;
    for (i, &pi) in p.iter().enumerate() {
        let hi = if i + 1 == p.len() { k as f64 } else { lo + pi * scale };
        if next < hi && picked.len() < k {
            picked.push(i);
            next += 1.0;
        }
        lo = hi;
    }
    if picked.len() != k {
        return Err(Error::Numerical(format!("systematic sampler drew {} of {k}", picked.len())));
    }
    Ok(picked)
}

impl QuadraticMoeObjective {
    pub fn new(targets: Vec<Vec<Vec<f64>>>, probs: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let clients = targets.len();
        if clients == 0 {
            return Err(Error::InvalidInput("objective needs at least one client".into()));
        }
        if probs.len() != clients || weights.len() != clients {
            return Err(Error::dim("client count", clients, format!("{} / {}", probs.len(), weights.len())));
        }
        let experts = targets[0].len();
        if experts == 0 {
            return Err(Error::InvalidInput("objective needs at least one expert".into()));
        }
        let block_dim = targets[0][0].len();
        for t in &targets {
            if t.len() != experts || t.iter().any(|b| b.len() != block_dim) {
                return Err(Error::dim("target blocks", format!("{experts}x{block_dim}"), "ragged"));
            }
        }
        let budgets = probs.iter().map(|r| check_row(r, experts)).collect::<Result<Vec<_>>>()?;
        let ws: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (ws - 1.0).abs() > FEASIBILITY_TOL {
            return Err(Error::InvalidInput(format!("client weights must be non-negative and sum to 1, got {ws}")));
        }
        Ok(Self { experts, block_dim, targets, probs, budgets, weights })
    }

    /// Gaussian targets with unit variance, equal client weights.
    pub fn random(experts: usize, block_dim: usize, probs: Vec<Vec<f64>>, rng: &mut Rng) -> Result<Self> {
        let clients = probs.len();
        let targets = (0..clients)
            .map(|_| (0..experts).map(|_| (0..block_dim).map(|_| rng.normal()).collect()).collect())
            .collect();
        Self::new(targets, probs, vec![1.0 / clients as f64; clients])
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn block_dim(&self) -> usize {
        self.block_dim
    }

    pub fn clients(&self) -> usize {
        self.targets.len()
    }

    pub fn budget(&self, client: usize) -> usize {
        self.budgets[client]
    }

    pub fn probs(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Same targets, different activation probabilities.
    pub fn with_probs(&self, probs: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(self.targets.clone(), probs, self.weights.clone())
    }

    pub fn zeros(&self) -> Vec<Vec<f64>> {
        vec![vec![0.0; self.block_dim]; self.experts]
    }

    fn check_theta(&self, theta: &[Vec<f64>]) -> Result<()> {
        if theta.len() != self.experts || theta.iter().any(|b| b.len() != self.block_dim) {
            return Err(Error::dim("theta", format!("{}x{}", self.experts, self.block_dim), "mismatch"));
        }
        Ok(())
    }

    fn check_client(&self, client: usize) -> Result<()> {
        if client >= self.clients() {
            return Err(Error::InvalidInput(format!("client {client} out of range")));
        }
        Ok(())
    }

    /// `F_c(θ) = ½ Σᵢ ‖θᵢ − θ*_{c,i}‖²`.
    pub fn client_loss(&self, theta: &[Vec<f64>], client: usize) -> f64 {
        theta
            .iter()
            .zip(&self.targets[client])
            .flat_map(|(b, t)| b.iter().zip(t).map(|(x, y)| 0.5 * (x - y) * (x - y)))
            .sum()
    }

    pub fn loss(&self, theta: &[Vec<f64>]) -> f64 {
        (0..self.clients()).map(|c| self.weights[c] * self.client_loss(theta, c)).sum()
    }

    /// Global minimizer: per block, the weighted mean of client targets.
    pub fn minimizer(&self) -> Vec<Vec<f64>> {
        let mut out = self.zeros();
        for (c, t) in self.targets.iter().enumerate() {
            for (o, b) in out.iter_mut().zip(t) {
                for (x, y) in o.iter_mut().zip(b) {
                    *x += self.weights[c] * y;
                }
            }
        }
        out
    }

    pub fn optimal_loss(&self) -> f64 {
        self.loss(&self.minimizer())
    }

    /// `∇_{θᵢ} F_c = θᵢ − θ*_{c,i}` for every block.
    pub fn client_grad(&self, theta: &[Vec<f64>], client: usize) -> Vec<Vec<f64>> {
        theta
            .iter()
            .zip(&self.targets[client])
            .map(|(b, t)| b.iter().zip(t).map(|(x, y)| x - y).collect())
            .collect()
    }

    pub fn grad(&self, theta: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut out = self.zeros();
        for c in 0..self.clients() {
            for (o, g) in out.iter_mut().zip(self.client_grad(theta, c)) {
                for (x, y) in o.iter_mut().zip(g) {
                    *x += self.weights[c] * y;
                }
            }
        }
        out
    }

    /// Sha-256 of the probability matrix (little-endian f64), first 16 hex
    /// digits.
    pub fn probs_hash(&self) -> String {
        let mut h = Sha256::new();
        for row in &self.probs {
            for p in row {
                h.update(p.to_le_bytes());
            }
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Draws an activation set of size `K_c` and masks the client gradient.
pub fn sparse_grad_sample(obj: &QuadraticMoeObjective, theta: &[Vec<f64>], client: usize, rng: &mut Rng) -> Result<SparseGrad> {
    obj.check_theta(theta)?;
    obj.check_client(client)?;
    let active = systematic_sample(&obj.probs[client], rng)?;
    let mut mask = vec![false; obj.experts];
    active.iter().for_each(|&i| mask[i] = true);
    let mut grad = obj.client_grad(theta, client);
    for (g, &m) in grad.iter_mut().zip(&mask) {
        if !m {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    Ok(SparseGrad { mask, grad })
}

/// `B_{c,i} = (1 − p_{c,i}) ∇_{θᵢ} F_c`.
pub fn exact_bias(obj: &QuadraticMoeObjective, theta: &[Vec<f64>], client: usize) -> Result<Vec<Vec<f64>>> {
    obj.check_theta(theta)?;
    obj.check_client(client)?;
    Ok(obj
        .client_grad(theta, client)
        .into_iter()
        .zip(&obj.probs[client])
        .map(|(g, p)| g.into_iter().map(|x| (1.0 - p) * x).collect())
        .collect())
}

pub fn bias_norm_sq(bias: &[Vec<f64>]) -> f64 {
    bias.iter().map(|b| sq_norm(b)).sum()
}

/// `(G²_min · M(1 − K/M)², G²_max · (M − K))` with `G²` the smallest and
/// largest squared block-gradient norms of the client at `θ`.
pub fn corollary_bounds(obj: &QuadraticMoeObjective, theta: &[Vec<f64>], client: usize) -> Result<(f64, f64)> {
    obj.check_theta(theta)?;
    obj.check_client(client)?;
    let norms: Vec<f64> = obj.client_grad(theta, client).iter().map(|g| sq_norm(g)).collect();
    let gmin = norms.iter().copied().fold(f64::INFINITY, f64::min);
    let gmax = norms.iter().copied().fold(0.0, f64::max);
    let m = obj.experts as f64;
    let k = obj.budgets[client] as f64;
    Ok((gmin * m * (1.0 - k / m).powi(2), gmax * (m - k)))
}

/// Monte-Carlo bias estimate: per-coordinate mean and standard error of
/// `∇F_c − g` over `draws` activation samples.
pub fn monte_carlo_bias(
    obj: &QuadraticMoeObjective,
    theta: &[Vec<f64>],
    client: usize,
    draws: usize,
    rng: &mut Rng,
) -> Result<(Blocks, Blocks)> {
    if draws < 2 {
        return Err(Error::InvalidInput("monte carlo needs at least two draws".into()));
    }
    let full = obj.client_grad(theta, client);
    let mut sum = obj.zeros();
    let mut sum_sq = obj.zeros();
    for _ in 0..draws {
        let s = sparse_grad_sample(obj, theta, client, rng)?;
        for i in 0..obj.experts {
            for j in 0..obj.block_dim {
                let d = full[i][j] - s.grad[i][j];
                sum[i][j] += d;
                sum_sq[i][j] += d * d;
            }
        }
    }
    let n = draws as f64;
    let mean: Vec<Vec<f64>> = sum.iter().map(|b| b.iter().map(|x| x / n).collect()).collect();
    let se = sum_sq
        .iter()
        .zip(&mean)
        .map(|(b, mb)| {
            b.iter()
                .zip(mb)
                .map(|(s2, m)| ((s2 / n - m * m).max(0.0) * n / (n - 1.0) / n).sqrt())
                .collect()
        })
        .collect();
    Ok((mean, se))
}

pub fn bias_report(obj: &QuadraticMoeObjective, theta: &[Vec<f64>]) -> Result<BiasReport> {
    let mut client_bias = Vec::with_capacity(obj.clients());
    let mut lower = Vec::with_capacity(obj.clients());
    let mut upper = Vec::with_capacity(obj.clients());
    let mut agg = obj.zeros();
    for c in 0..obj.clients() {
        let b = exact_bias(obj, theta, c)?;
        client_bias.push(bias_norm_sq(&b));
        let (lo, hi) = corollary_bounds(obj, theta, c)?;
        lower.push(lo);
        upper.push(hi);
        for (a, blk) in agg.iter_mut().zip(&b) {
            for (x, y) in a.iter_mut().zip(blk) {
                *x += obj.weights[c] * y;
            }
        }
    }
    Ok(BiasReport { client_bias, aggregate: bias_norm_sq(&agg), lower, upper, plateau_gap: None })
}

/// Masked SGD where every client contributes its sampled gradient each step.
/// With `pg = Some(ρ)` inactive blocks receive `ρ · ∇_{θᵢ}F` (the population
/// gradient) instead of zero.
fn sgd_run(obj: &QuadraticMoeObjective, schedule: FloorSchedule, pg: Option<f64>, rng: &mut Rng) -> Result<FloorResult> {
    if schedule.steps < 10 {
        return Err(Error::InvalidInput("floor experiment needs at least 10 steps".into()));
    }
    let f_star = obj.optimal_loss();
    let mut theta = obj.zeros();
    let initial_gap = obj.loss(&theta) - f_star;
    let tail_start = schedule.steps - schedule.steps / 10;
    let mut tail = 0.0;
    let mut gap = initial_gap;
    let mut diverged = false;
    for t in 0..schedule.steps {
        let population = pg.map(|_| obj.grad(&theta));
        let mut step = obj.zeros();
        for c in 0..obj.clients() {
            let s = sparse_grad_sample(obj, &theta, c, rng)?;
            for i in 0..obj.experts {
                let w = obj.weights[c];
                if s.mask[i] {
                    step[i].iter_mut().zip(&s.grad[i]).for_each(|(a, g)| *a += w * g);
                } else if let (Some(rho), Some(pop)) = (pg, &population) {
                    step[i].iter_mut().zip(&pop[i]).for_each(|(a, g)| *a += w * rho * g);
                }
            }
        }
        let eta = schedule.eta(t);
        for (b, s) in theta.iter_mut().zip(&step) {
            b.iter_mut().zip(s).for_each(|(x, g)| *x -= eta * g);
        }
        gap = obj.loss(&theta) - f_star;
        if !gap.is_finite() {
            diverged = true;
            break;
        }
        if t >= tail_start {
            tail += gap;
        }
    }
    let plateau_gap = if diverged { f64::NAN } else { tail / (schedule.steps - tail_start) as f64 };
    diverged |= plateau_gap > initial_gap;
    Ok(FloorResult { k: obj.budgets.iter().copied().max().unwrap_or(0), initial_gap, plateau_gap, final_gap: gap, diverged })
}

/// Runs biased SGD once per budget with balanced probabilities `K/M`; runs
/// are independent and execute in parallel.
pub fn run_floor_experiment(obj: &QuadraticMoeObjective, ks: &[usize], schedule: FloorSchedule, seed: u64) -> Result<Vec<FloorResult>> {
    let root = Rng::new(seed);
    ks.par_iter()
        .map(|&k| {
            if k == 0 || k > obj.experts {
                return Err(Error::InvalidInput(format!("budget {k} outside 1..={}", obj.experts)));
            }
            let probs = vec![balanced_probs(obj.experts, k); obj.clients()];
            let o = obj.with_probs(probs)?;
            // one stream shared across budgets keeps comparisons paired
            let mut rng = root.child(&[7]);
            sgd_run(&o, schedule, None, &mut rng)
        })
        .collect()
}

/// Plateau of the objective's own probabilities, no pseudo-gradient.
pub fn run_floor(obj: &QuadraticMoeObjective, schedule: FloorSchedule, seed: u64) -> Result<FloorResult> {
    sgd_run(obj, schedule, None, &mut Rng::new(seed).child(&[7]))
}

/// `(naive, pg)` plateaus on the same activation draws.
pub fn pg_floor_comparison(obj: &QuadraticMoeObjective, schedule: FloorSchedule, rho: f64, seed: u64) -> Result<(FloorResult, FloorResult)> {
    let stream = Rng::new(seed).child(&[7]);
    let naive = sgd_run(obj, schedule, None, &mut stream.clone())?;
    let pg = sgd_run(obj, schedule, Some(rho), &mut stream.clone())?;
    Ok((naive, pg))
}

/// One CSV row per budget.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasRow {
    pub k: usize,
    pub p_hash: String,
    pub lower: f64,
    pub exact_bias: f64,
    pub upper: f64,
    pub plateau_gap: f64,
}

/// Balanced-probability sweep over `ks`. Bias columns are client-weighted
/// sums at `θ = 0`; the plateau comes from the floor experiment.
pub fn bias_table(obj: &QuadraticMoeObjective, ks: &[usize], schedule: FloorSchedule, seed: u64) -> Result<Vec<BiasRow>> {
    let floors = run_floor_experiment(obj, ks, schedule, seed)?;
    let theta = obj.zeros();
    ks.iter()
        .zip(floors)
        .map(|(&k, floor)| {
            let o = obj.with_probs(vec![balanced_probs(obj.experts, k); obj.clients()])?;
            let r = bias_report(&o, &theta)?;
            let wsum = |v: &[f64]| v.iter().zip(&o.weights).map(|(a, w)| a * w).sum::<f64>();
            Ok(BiasRow {
                k,
                p_hash: o.probs_hash(),
                lower: wsum(&r.lower),
                exact_bias: wsum(&r.client_bias),
                upper: wsum(&r.upper),
                plateau_gap: floor.plateau_gap,
            })
        })
        .collect()
}

pub fn write_bias_csv<W: Write>(rows: &[BiasRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["k", "p_hash", "lower_bound", "exact_bias", "upper_bound", "plateau_gap"])?;
    for r in rows {
        w.write_record([
            r.k.to_string(),
            r.p_hash.clone(),
            r.lower.to_string(),
            r.exact_bias.to_string(),
            r.upper.to_string(),
            r.plateau_gap.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

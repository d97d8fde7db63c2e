//! The federated protocol: local training with pseudo-gradient injection,
//! FedAvg, pseudo-gradient buffers, utilization statistics and the
//! utilization-aware modulation update.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{PhiUpload, RunConfig};
use crate::costmodel::{self, ModelDims};
use crate::error::{Error, Result};
use crate::metrics::{self, RoundMetrics};
use crate::model::{ModelGradients, ModelParams, StackDims, TaskKind};
use crate::numerics::{norm2, Rng};
use crate::smoe::{AdapterGrad, LayerGradients};
use crate::synthdata::{generate_task, partition_dirichlet, SyntheticTask};

pub use crate::config::derive_sparsity;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub id: usize,
    pub beta: f64,
    pub k_c: usize,
    pub p_c: f64,
    pub rho_c: f64,
    /// Sample indices into the task.
    pub shard: Vec<usize>,
}

/// `√(K̄ / K_c)`.
pub fn rho(k_bar: f64, k_c: usize) -> f64 {
    (k_bar / k_c as f64).sqrt()
}

/// `Σ p_c K_c`.
pub fn k_bar(weights: &[f64], ks: &[usize]) -> f64 {
    weights.iter().zip(ks).map(|(p, &k)| p * k as f64).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgBuffer {
    /// `[layer][expert]` pseudo-gradients shaped like the adapters.
    pub layers: Vec<Vec<AdapterGrad>>,
    pub clip: f64,
}

impl PgBuffer {
    pub fn zeros_like(p: &ModelParams, clip: f64) -> Self {
        Self {
            layers: p
                .layers
                .iter()
                .map(|l| l.experts.iter().map(|e| AdapterGrad::zeros_like(&e.adapter)).collect())
                .collect(),
            clip,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().flatten().all(AdapterGrad::is_zero)
    }

    /// Largest per-tensor 2-norm in the buffer.
    pub fn max_norm(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .flat_map(|g| [g.b.frobenius_norm(), g.a.frobenius_norm()])
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationStats {
    /// `[layer][expert]` activation counts.
    pub counts: Vec<Vec<u64>>,
    pub tokens: u64,
    pub k_c: usize,
}

impl UtilizationStats {
    pub fn new(layers: usize, experts: usize, k_c: usize) -> Self {
        Self {
            counts: vec![vec![0; experts]; layers],
            tokens: 0,
            k_c,
        }
    }

    pub fn record(&mut self, counts: &[Vec<u64>], tokens: u64) {
        for (acc, c) in self.counts.iter_mut().zip(counts) {
            for (a, b) in acc.iter_mut().zip(c) {
                *a += b;
            }
        }
        self.tokens += tokens;
    }

    /// Every token activates exactly `K_c` experts in every layer.
    pub fn is_consistent(&self) -> bool {
        self.counts
            .iter()
            .all(|c| c.iter().sum::<u64>() == self.tokens * self.k_c as u64)
    }
}

/// Server-side hyperparameters of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub eta: f64,
    pub local_steps: usize,
    pub batch_size: usize,
    pub zeta: f64,
    pub eps: f64,
    pub k_bar: f64,
    pub u_star: f64,
    pub phi_min: f64,
    pub phi_max: f64,
    pub lambda: f64,
    /// Candidate size used by routing (all experts when DMR is off).
    pub n_p: usize,
    pub pg_enabled: bool,
    pub pg_clip: f64,
    pub dmr_enabled: bool,
    pub phi_upload: PhiUpload,
    pub kind: TaskKind,
}

impl Hyper {
    pub fn from_config(cfg: &RunConfig, k_bar: f64) -> Self {
        Self {
            eta: cfg.eta,
            local_steps: cfg.local_steps,
            batch_size: cfg.batch_size,
            zeta: cfg.zeta,
            eps: cfg.eps,
            k_bar,
            u_star: k_bar / cfg.model.experts as f64,
            phi_min: cfg.phi_min,
            phi_max: cfg.phi_max,
            lambda: cfg.lambda,
            n_p: cfg.effective_n_p(),
            pg_enabled: cfg.pg.enabled,
            pg_clip: cfg.pg.clip,
            dmr_enabled: cfg.dmr.enabled,
            phi_upload: cfg.dmr.phi_upload,
            kind: cfg.task.kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    /// Global parameters; each layer's `phi` is the server's φ state.
    pub global: ModelParams,
    pub pg: PgBuffer,
    /// Per-layer `ũ` from the latest round.
    pub global_util: Vec<Vec<f64>>,
    pub round: usize,
    pub hyper: Hyper,
}

impl ServerState {
    pub fn phi_state(&self) -> Vec<Vec<f64>> {
        self.global.layers.iter().map(|l| l.phi.clone()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: ServerState = serde_json::from_slice(&std::fs::read(path)?)?;
        s.global.validate()?;
        Ok(s)
    }
}

/// Replaces the adapter gradients of experts no token activated with
/// `ρ_c · G̃`. Router and φ gradients pass through untouched.
pub fn pg_inject(real: &LayerGradients, coverage: &[bool], pg: &[AdapterGrad], rho_c: f64) -> Result<LayerGradients> {
    if coverage.len() != real.experts.len() {
        return Err(Error::dim("pg_inject coverage", real.experts.len(), coverage.len()));
    }
    if pg.len() != real.experts.len() {
        return Err(Error::dim("pg_inject buffer", real.experts.len(), pg.len()));
    }
    let mut out = real.clone();
    for ((g, &hit), buf) in out.experts.iter_mut().zip(coverage).zip(pg) {
        g.b.check_same_shape("pg_inject", &buf.b)?;
        g.a.check_same_shape("pg_inject", &buf.a)?;
        if !hit {
            g.b = buf.b.scaled(rho_c);
            g.a = buf.a.scaled(rho_c);
            g.pseudo = true;
        }
    }
    Ok(out)
}

/// Indices of one minibatch: the whole shard in order when it fits,
/// otherwise the first `batch` entries of a fresh shuffle.
pub fn draw_minibatch(shard: &[usize], batch: usize, rng: &mut Rng) -> Vec<usize> {
    if batch >= shard.len() {
        return shard.to_vec();
    }
    let mut idx = shard.to_vec();
    rng.shuffle(&mut idx);
    idx.truncate(batch);
    idx
}

/// What a client sends back after local training.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client: usize,
    pub params: ModelParams,
    pub stats: UtilizationStats,
    /// Task loss plus φ penalty, one entry per local step.
    pub losses: Vec<f64>,
    /// Sum of the gradients actually applied, after injection.
    pub applied_grad_sum: ModelGradients,
    pub max_gate_error: f64,
}

impl ClientUpdate {
    pub fn mean_loss(&self) -> f64 {
        metrics::mean(&self.losses)
    }
}

pub fn client_local_train(
    profile: &ClientProfile,
    start: &ModelParams,
    pg: &PgBuffer,
    hyper: &Hyper,
    task: &SyntheticTask,
    rng: &mut Rng,
) -> Result<ClientUpdate> {
    if profile.shard.is_empty() {
        return Err(Error::InvalidInput(format!("client {} has an empty shard", profile.id)));
    }
    if hyper.local_steps == 0 {
        return Err(Error::Config("local_steps must be at least 1".into()));
    }
    let mut params = start.clone();
    let mut stats = UtilizationStats::new(params.layers.len(), params.num_experts(), profile.k_c);
    let mut losses = Vec::with_capacity(hyper.local_steps);
    let mut applied = ModelGradients::zeros_like(&params);
    let mut max_gate_error = 0.0f64;

    for _ in 0..hyper.local_steps {
        let idx = draw_minibatch(&profile.shard, hyper.batch_size, rng);
        let batch = task.pairs(&idx);
        let out = params.loss_and_grad(&batch, hyper.kind, profile.k_c, hyper.n_p)?;
        let mut grads = out.grads;
        let mut loss = out.loss;
        if hyper.dmr_enabled {
            loss += params.add_phi_regularization(&mut grads, hyper.phi_min, hyper.phi_max, hyper.lambda);
        }
        if hyper.pg_enabled {
            let coverage = out.activation_counts.iter().map(|c| c.iter().map(|&n| n > 0).collect::<Vec<_>>());
            for ((lg, cov), buf) in grads.layers.iter_mut().zip(coverage).zip(&pg.layers) {
                *lg = pg_inject(lg, &cov, buf, profile.rho_c)?;
            }
        }
        if !grads.is_finite() || !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss or gradient on client {}", profile.id)));
        }
        params.sgd_step(&grads, hyper.eta, hyper.dmr_enabled)?;
        accumulate(&mut applied, &grads)?;
        stats.record(&out.activation_counts, out.tokens);
        losses.push(loss);
        max_gate_error = max_gate_error.max(out.max_gate_error);
    }
    Ok(ClientUpdate {
        client: profile.id,
        params,
        stats,
        losses,
        applied_grad_sum: applied,
        max_gate_error,
    })
}

fn accumulate(acc: &mut ModelGradients, g: &ModelGradients) -> Result<()> {
    for (a, b) in acc.layers.iter_mut().zip(&g.layers) {
        for (ea, eb) in a.experts.iter_mut().zip(&b.experts) {
            ea.b.axpy(1.0, &eb.b)?;
            ea.a.axpy(1.0, &eb.a)?;
        }
        a.router.axpy(1.0, &b.router)?;
        for (x, y) in a.phi.iter_mut().zip(&b.phi) {
            *x += y;
        }
    }
    acc.head.axpy(1.0, &g.head)
}

fn check_weights(weights: &[f64]) -> Result<()> {
    let s: f64 = weights.iter().sum();
    if (s - 1.0).abs() > 1e-12 || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::InvalidInput(format!("aggregation weights must be nonnegative and sum to 1, got sum {s}")));
    }
    Ok(())
}

/// Weighted average of every trainable tensor. Frozen bases come from the
/// first parameter set.
pub fn aggregate_fedavg(params: &[&ModelParams], weights: &[f64]) -> Result<ModelParams> {
    if params.is_empty() {
        return Err(Error::InvalidInput("nothing to aggregate".into()));
    }
    if params.len() != weights.len() {
        return Err(Error::dim("aggregate_fedavg weights", params.len(), weights.len()));
    }
    check_weights(weights)?;
    let mut out = params[0].clone();
    let w0 = weights[0];
    for l in &mut out.layers {
        for e in &mut l.experts {
            e.adapter.b.scale(w0);
            e.adapter.a.scale(w0);
        }
        l.router_w.scale(w0);
        l.phi.iter_mut().for_each(|v| *v *= w0);
    }
    out.head.scale(w0);
    for (p, &w) in params.iter().zip(weights).skip(1) {
        if p.layers.len() != out.layers.len() {
            return Err(Error::dim("aggregate_fedavg layers", out.layers.len(), p.layers.len()));
        }
        for (lo, lp) in out.layers.iter_mut().zip(&p.layers) {
            if lp.experts.len() != lo.experts.len() || lp.phi.len() != lo.phi.len() {
                return Err(Error::dim("aggregate_fedavg experts", lo.experts.len(), lp.experts.len()));
            }
            for (eo, ep) in lo.experts.iter_mut().zip(&lp.experts) {
                eo.adapter.b.axpy(w, &ep.adapter.b)?;
                eo.adapter.a.axpy(w, &ep.adapter.a)?;
            }
            lo.router_w.axpy(w, &lp.router_w)?;
            for (a, b) in lo.phi.iter_mut().zip(&lp.phi) {
                *a += w * b;
            }
        }
        out.head.axpy(w, &p.head)?;
    }
    Ok(out)
}

/// `(Θ_prev − Θ_next)/(η·Γ)` per expert adapter, each tensor clipped to
/// 2-norm at most `clip`.
pub fn compute_pg_buffer(prev: &ModelParams, next: &ModelParams, eta: f64, gamma: usize, clip: f64) -> Result<PgBuffer> {
    if !(eta > 0.0) {
        return Err(Error::InvalidInput(format!("pseudo-gradient needs eta > 0, got {eta}")));
    }
    if gamma == 0 {
        return Err(Error::InvalidInput("pseudo-gradient needs at least one local step".into()));
    }
    if !(clip > 0.0) {
        return Err(Error::InvalidInput(format!("clip threshold must be positive, got {clip}")));
    }
    if prev.layers.len() != next.layers.len() {
        return Err(Error::dim("compute_pg_buffer", prev.layers.len(), next.layers.len()));
    }
    let denom = eta * gamma as f64;
    let mut layers = Vec::with_capacity(prev.layers.len());
    for (lp, ln) in prev.layers.iter().zip(&next.layers) {
        if lp.experts.len() != ln.experts.len() {
            return Err(Error::dim("compute_pg_buffer experts", lp.experts.len(), ln.experts.len()));
        }
        let mut row = Vec::with_capacity(lp.experts.len());
        for (ep, en) in lp.experts.iter().zip(&ln.experts) {
            let mut b = ep.adapter.b.clone();
            b.axpy(-1.0, &en.adapter.b)?;
            b.scale(1.0 / denom);
            let mut a = ep.adapter.a.clone();
            a.axpy(-1.0, &en.adapter.a)?;
            a.scale(1.0 / denom);
            for m in [&mut b, &mut a] {
                let n = m.frobenius_norm();
                if n > clip {
                    m.scale(clip / n);
                }
            }
            row.push(AdapterGrad { b, a, pseudo: false });
        }
        layers.push(row);
    }
    Ok(PgBuffer { layers, clip })
}

/// `ũ_i = Σ_c p_c · a_{c,i} / n_c`, per layer.
pub fn update_global_utilization(stats: &[UtilizationStats], weights: &[f64]) -> Result<Vec<Vec<f64>>> {
    let first = stats.first().ok_or_else(|| Error::InvalidInput("no utilization statistics".into()))?;
    if stats.len() != weights.len() {
        return Err(Error::dim("update_global_utilization weights", stats.len(), weights.len()));
    }
    let (layers, experts) = (first.counts.len(), first.counts.first().map_or(0, Vec::len));
    let mut u = vec![vec![0.0; experts]; layers];
    for (s, &p) in stats.iter().zip(weights) {
        if s.tokens == 0 {
            return Err(Error::InvalidInput("client reported zero tokens".into()));
        }
        if s.counts.len() != layers || s.counts.iter().any(|c| c.len() != experts) {
            return Err(Error::dim("update_global_utilization grid", format!("{layers}x{experts}"), "ragged stats"));
        }
        let n = s.tokens as f64;
        for (ul, cl) in u.iter_mut().zip(&s.counts) {
            for (ui, &a) in ul.iter_mut().zip(cl) {
                *ui += p * a as f64 / n;
            }
        }
    }
    Ok(u)
}

/// `tanh(u*/(ũ+ε) − 1)`: negative for over-used experts, positive for
/// under-used ones.
pub fn modulation_target(u: f64, u_star: f64, eps: f64) -> f64 {
    (u_star / (u + eps) - 1.0).tanh()
}

pub fn update_modulation(
    phi_prev: &[f64],
    u_tilde: &[f64],
    u_star: f64,
    eps: f64,
    zeta: f64,
    phi_min: f64,
    phi_max: f64,
) -> Result<Vec<f64>> {
    if phi_prev.len() != u_tilde.len() {
        return Err(Error::dim("update_modulation", phi_prev.len(), u_tilde.len()));
    }
    if !(0.0..=1.0).contains(&zeta) || !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("need 0 <= zeta <= 1 and eps > 0, got {zeta}, {eps}")));
    }
    Ok(phi_prev
        .iter()
        .zip(u_tilde)
        .map(|(&p, &u)| ((1.0 - zeta) * modulation_target(u, u_star, eps) + zeta * p).clamp(phi_min, phi_max))
        .collect())
}

/// Points the router rows of experts `0..hot` along each layer's mean input,
/// so those experts win most tokens from the start.
pub fn apply_router_skew(
    model: &mut ModelParams,
    task: &SyntheticTask,
    hot: usize,
    strength: f64,
    k: usize,
    n_p: usize,
) -> Result<()> {
    if hot == 0 || strength == 0.0 {
        return Ok(());
    }
    let mut inputs: Vec<Vec<f64>> = task.samples.iter().map(|s| s.x.clone()).collect();
    for li in 0..model.layers.len() {
        let dim = model.layers[li].input_dim();
        let mut mean = vec![0.0; dim];
        for h in &inputs {
            for (m, v) in mean.iter_mut().zip(h) {
                *m += v;
            }
        }
        let n = norm2(&mean);
        if n > 0.0 {
            for i in 0..hot.min(model.layers[li].num_experts()) {
                let row = model.layers[li].router_w.row_mut(i);
                for (r, m) in row.iter_mut().zip(&mean) {
                    *r += strength * m / n;
                }
            }
        }
        if li + 1 < model.layers.len() {
            inputs = inputs
                .iter()
                .map(|h| crate::smoe::smoe_forward(&model.layers[li], h, k, n_p).map(|r| r.0))
                .collect::<Result<_>>()?;
        }
    }
    Ok(())
}

/// Everything a finished run leaves behind.
#[derive(Debug, Clone)]
pub struct FedRun {
    pub metrics: Vec<RoundMetrics>,
    pub state: ServerState,
    pub profiles: Vec<ClientProfile>,
    pub task: SyntheticTask,
    /// Global parameters before the first round.
    pub initial: ModelParams,
}

/// Builds the task, partition, client profiles and initial server state.
pub fn setup(cfg: &RunConfig) -> Result<(SyntheticTask, Vec<ClientProfile>, ServerState)> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let task = generate_task(&cfg.task, &mut root.child(&[1]))?;
    let part = partition_dirichlet(&task, cfg.clients, cfg.dirichlet_alpha, &mut root.child(&[2]))?;
    let weights = part.weights();
    let ks = cfg.client_sparsity()?;
    let kb = k_bar(&weights, &ks);
    let profiles: Vec<ClientProfile> = part
        .clients
        .into_iter()
        .enumerate()
        .map(|(id, shard)| ClientProfile {
            id,
            beta: cfg.client_budget(id),
            k_c: ks[id],
            p_c: weights[id],
            rho_c: rho(kb, ks[id]),
            shard,
        })
        .collect();

    let dims = StackDims {
        input_dim: cfg.task.input_dim,
        hidden_dim: cfg.model.hidden_dim,
        output_dim: cfg.task.output_dim,
        num_layers: cfg.model.layers,
        num_experts: cfg.model.experts,
        rank: cfg.model.rank,
        alpha: cfg.model.alpha(),
    };
    let mut global = ModelParams::init(&dims, cfg.model.router_std, &mut root.child(&[3]))?;
    let k_hi = ks.iter().copied().max().unwrap_or(1);
    apply_router_skew(&mut global, &task, cfg.model.hot_experts, cfg.model.skew_strength, k_hi, cfg.effective_n_p())?;

    let layers = global.layers.len();
    let m = cfg.model.experts;
    let state = ServerState {
        pg: PgBuffer::zeros_like(&global, cfg.pg.clip),
        global,
        global_util: vec![vec![0.0; m]; layers],
        round: 0,
        hyper: Hyper::from_config(cfg, kb),
    };
    Ok((task, profiles, state))
}

fn sample_participants(cfg: &RunConfig, round: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..cfg.clients).collect();
    if cfg.participation >= 1.0 {
        return all;
    }
    let m = ((cfg.participation * cfg.clients as f64).round() as usize).clamp(1, cfg.clients);
    Rng::new(cfg.seed).child(&[4, round as u64]).shuffle(&mut all);
    all.truncate(m);
    all.sort_unstable();
    all
}

fn sim_cost_dims(cfg: &RunConfig) -> ModelDims {
    ModelDims {
        d: cfg.model.hidden_dim.max(cfg.task.input_dim) as u64,
        l: cfg.model.hidden_dim as u64,
        layers: cfg.model.layers as u64,
        experts: cfg.model.experts as u64,
        rank: cfg.model.rank as u64,
        gamma: cfg.local_steps as u64,
        batch: cfg.batch_size as u64,
        seq_len: 1,
        clients: cfg.clients as u64,
        n_p: cfg.effective_n_p() as u64,
        vocab: 0,
        lora_topk: 1,
    }
}

/// `Σ_c p_c F_c` of `model` over every client's full shard.
pub fn global_loss(model: &ModelParams, profiles: &[ClientProfile], task: &SyntheticTask, n_p: usize) -> Result<f64> {
    let mut total = 0.0;
    for p in profiles {
        total += p.p_c * model.eval_loss(&task.pairs(&p.shard), task.kind, p.k_c, n_p)?;
    }
    Ok(total)
}

/// One server round on `state`; returns the round's metrics.
pub fn run_round(
    cfg: &RunConfig,
    state: &mut ServerState,
    profiles: &[ClientProfile],
    task: &SyntheticTask,
) -> Result<RoundMetrics> {
    let t = state.round;
    let chosen = sample_participants(cfg, t);
    let mass: f64 = chosen.iter().map(|&c| profiles[c].p_c).sum();
    let weights: Vec<f64> = chosen.iter().map(|&c| profiles[c].p_c / mass).collect();
    let ks: Vec<usize> = chosen.iter().map(|&c| profiles[c].k_c).collect();
    let kb = k_bar(&weights, &ks);
    state.hyper.k_bar = kb;
    state.hyper.u_star = kb / cfg.model.experts as f64;

    let root = Rng::new(cfg.seed);
    let train = |&c: &usize| -> Result<ClientUpdate> {
        let mut profile = profiles[c].clone();
        profile.rho_c = rho(kb, profile.k_c);
        let mut rng = root.child(&[5, t as u64, c as u64]);
        client_local_train(&profile, &state.global, &state.pg, &state.hyper, task, &mut rng).map_err(|e| Error::Client {
            round: t,
            client: c,
            source: Box::new(e),
        })
    };
    let updates: Vec<ClientUpdate> = if cfg.parallel {
        chosen.par_iter().map(train).collect::<Result<_>>()?
    } else {
        chosen.iter().map(train).collect::<Result<_>>()?
    };

    let prev = state.global.clone();
    let param_refs: Vec<&ModelParams> = updates.iter().map(|u| &u.params).collect();
    let mut next = aggregate_fedavg(&param_refs, &weights)?;
    if !state.hyper.dmr_enabled || state.hyper.phi_upload == PhiUpload::Discard {
        for (ln, lp) in next.layers.iter_mut().zip(&prev.layers) {
            ln.phi.clone_from(&lp.phi);
        }
    }
    if state.hyper.pg_enabled {
        state.pg = compute_pg_buffer(&prev, &next, state.hyper.eta, state.hyper.local_steps, state.hyper.pg_clip)?;
    }
    let stats: Vec<UtilizationStats> = updates.iter().map(|u| u.stats.clone()).collect();
    let util = update_global_utilization(&stats, &weights)?;
    if state.hyper.dmr_enabled {
        let h = &state.hyper;
        for (layer, u) in next.layers.iter_mut().zip(&util) {
            layer.phi = update_modulation(&layer.phi, u, h.u_star, h.eps, h.zeta, h.phi_min, h.phi_max)?;
        }
    }
    if !next.is_finite() {
        return Err(Error::Numerical(format!("non-finite global parameters after round {t}")));
    }
    state.global = next;
    state.global_util = util;
    state.round += 1;

    let mut tiers: Vec<f64> = cfg.budgets.clone();
    tiers.sort_by(f64::total_cmp);
    tiers.dedup();
    let loss_by_budget = tiers
        .iter()
        .map(|&b| {
            let l: Vec<f64> = updates
                .iter()
                .filter(|u| profiles[u.client].beta == b)
                .map(ClientUpdate::mean_loss)
                .collect();
            (b, metrics::mean(&l))
        })
        .collect();
    let (layer_entropy, layer_gini, pearson_r) = RoundMetrics::balance(&state.global_util, &state.phi_state())?;
    let cost_dims = sim_cost_dims(cfg);
    let client_flops = chosen
        .iter()
        .map(|&c| {
            let k = profiles[c].k_c as u64;
            let f = if cfg.pg.enabled {
                costmodel::client_cost_ubsmoe(&cost_dims, k)
            } else {
                costmodel::client_cost_a3smoe(&cost_dims, k)
            };
            f.map(|f| (c, f))
        })
        .collect::<Result<Vec<_>>>()?;
    let train_loss = updates.iter().zip(&weights).map(|(u, w)| w * u.mean_loss()).sum();
    Ok(RoundMetrics {
        round: t,
        loss_by_budget,
        train_loss,
        global_loss: global_loss(&state.global, profiles, task, state.hyper.n_p)?,
        mean_entropy: metrics::mean(&layer_entropy),
        layer_entropy,
        mean_gini: metrics::mean(&layer_gini),
        layer_gini,
        pearson_r,
        client_flops,
        utilization_sum: state.global_util.iter().map(|u| u.iter().sum()).collect(),
        global_util: state.global_util.clone(),
        max_gate_error: updates.iter().map(|u| u.max_gate_error).fold(0.0, f64::max),
    })
}

/// Runs `cfg.rounds` rounds from a fresh setup.
pub fn run_federated(cfg: &RunConfig) -> Result<FedRun> {
    let (task, profiles, mut state) = setup(cfg)?;
    let initial = state.global.clone();
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        rounds.push(run_round(cfg, &mut state, &profiles, &task)?);
    }
    Ok(FedRun {
        metrics: rounds,
        state,
        profiles,
        task,
        initial,
    })
}

//! Sparse mixture-of-experts layer with low-rank adapted linear experts,
//! modulated top-k routing, and a hand-written backward pass.
//!
//! An expert maps `x ∈ R^d` to `(W0 + (α/r)·B·A)ᵀ x ∈ R^l`. Routing scores
//! are `s = W_r x`; the top-`n_p` raw scores form the candidate set whose
//! logits get the modulation `φ` added; the top-`k_c` modulated logits are
//! activated and gated by a softmax restricted to the activated set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, softmax, topk_indices, Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertAdapter {
    /// `d × r`
    pub b: Matrix,
    /// `r × l`
    pub a: Matrix,
    pub alpha: f64,
    pub rank: usize,
}

impl ExpertAdapter {
    pub fn new(b: Matrix, a: Matrix, alpha: f64) -> Result<Self> {
        let rank = b.cols();
        if rank == 0 || a.rows() != rank {
            return Err(Error::dim("ExpertAdapter::new", format!("A with {rank} rows"), a.rows()));
        }
        if rank > b.rows().min(a.cols()) {
            return Err(Error::Config(format!(
                "adapter rank {rank} exceeds min(d, l) = {}",
                b.rows().min(a.cols())
            )));
        }
        if !(alpha > 0.0) {
            return Err(Error::Config(format!("adapter alpha must be positive, got {alpha}")));
        }
        Ok(Self { b, a, alpha, rank })
    }

    /// `B = 0`, `A ~ U(-1/√d, 1/√d)`, so the initial update is exactly zero.
    pub fn init(d: usize, l: usize, rank: usize, alpha: f64, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / (d as f64).sqrt();
        let a = Matrix::random_uniform(rank, l, -bound, bound, rng);
        Self::new(Matrix::zeros(d, rank), a, alpha)
    }

    #[inline]
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Materialized `(α/r)·B·A`, `d × l`.
    pub fn delta(&self) -> Matrix {
        let mut m = crate::numerics::matmul(&self.b, &self.a).expect("adapter shapes checked at construction");
        m.scale(self.scaling());
        m
    }

    pub fn input_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.a.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    w0: Matrix,
    pub adapter: ExpertAdapter,
}

impl Expert {
    pub fn new(w0: Matrix, adapter: ExpertAdapter) -> Result<Self> {
        if w0.rows() != adapter.input_dim() || w0.cols() != adapter.output_dim() {
            return Err(Error::dim(
                "Expert::new",
                format!("{}x{}", adapter.input_dim(), adapter.output_dim()),
                format!("{}x{}", w0.rows(), w0.cols()),
            ));
        }
        Ok(Self { w0, adapter })
    }

    /// Frozen base weight, `d × l`.
    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn input_dim(&self) -> usize {
        self.w0.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w0.cols()
    }

    /// `W g` for the effective weight `W = W0 + (α/r)BA`; the input-gradient
    /// of `⟨g, expert(x)⟩`.
    fn effective_times(&self, g: &[f64]) -> Vec<f64> {
        let mut out = self.w0.matvec(g).expect("shape checked by caller");
        let ag = self.adapter.a.matvec(g).expect("shape checked by caller");
        let bag = self.adapter.b.matvec(&ag).expect("adapter shapes consistent");
        let s = self.adapter.scaling();
        for (o, v) in out.iter_mut().zip(bag) {
            *o += s * v;
        }
        out
    }
}

pub fn expert_forward(e: &Expert, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != e.input_dim() {
        return Err(Error::dim("expert_forward", e.input_dim(), x.len()));
    }
    let mut y = e.w0.tmatvec(x)?;
    let h = e.adapter.b.tmatvec(x)?;
    let low = e.adapter.a.tmatvec(&h)?;
    let s = e.adapter.scaling();
    for (yi, li) in y.iter_mut().zip(low) {
        *yi += s * li;
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoeLayerParams {
    pub experts: Vec<Expert>,
    /// `M × d`
    pub router_w: Matrix,
    /// Modulation added to candidate logits, length `M`.
    pub phi: Vec<f64>,
    pub layer_index: usize,
}

impl SmoeLayerParams {
    pub fn new(experts: Vec<Expert>, router_w: Matrix, phi: Vec<f64>, layer_index: usize) -> Result<Self> {
        let p = Self {
            experts,
            router_w,
            phi,
            layer_index,
        };
        p.validate()?;
        Ok(p)
    }

    /// Random frozen bases `W0 ~ N(0, 1/d)`, zero-start adapters, router
    /// `~ N(0, router_std²)`, `φ = 0`.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        d: usize,
        l: usize,
        num_experts: usize,
        rank: usize,
        alpha: f64,
        router_std: f64,
        layer_index: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w_std = 1.0 / (d as f64).sqrt();
        let experts = (0..num_experts)
            .map(|_| {
                let w0 = Matrix::random_normal(d, l, w_std, rng);
                Expert::new(w0, ExpertAdapter::init(d, l, rank, alpha, rng)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let router_w = Matrix::random_normal(num_experts, d, router_std, rng);
        Self::new(experts, router_w, vec![0.0; num_experts], layer_index)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.experts.len();
        if m < 2 {
            return Err(Error::Config(format!("an SMoE layer needs at least 2 experts, got {m}")));
        }
        let d = self.experts[0].input_dim();
        let l = self.experts[0].output_dim();
        for e in &self.experts {
            if e.input_dim() != d || e.output_dim() != l {
                return Err(Error::dim("SmoeLayerParams", format!("{d}x{l} experts"), format!("{}x{}", e.input_dim(), e.output_dim())));
            }
        }
        if self.router_w.shape() != (m, d) {
            return Err(Error::dim("SmoeLayerParams router", format!("{m}x{d}"), format!("{:?}", self.router_w.shape())));
        }
        if self.phi.len() != m {
            return Err(Error::dim("SmoeLayerParams phi", m, self.phi.len()));
        }
        Ok(())
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn input_dim(&self) -> usize {
        self.experts[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.experts[0].output_dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    /// Top-`n_p` raw scores, descending.
    pub candidate_set: Vec<usize>,
    /// Top-`k_c` modulated scores, descending.
    pub activation_set: Vec<usize>,
    /// Length `M`; zero outside `activation_set`.
    pub gate_weights: Vec<f64>,
    pub raw_scores: Vec<f64>,
    pub modulated_scores: Vec<f64>,
}

impl RoutingDecision {
    pub fn gate_sum(&self) -> f64 {
        self.activation_set.iter().map(|&i| self.gate_weights[i]).sum()
    }
}

fn check_routing_args(p: &SmoeLayerParams, x: &[f64], k_c: usize, n_p: usize) -> Result<()> {
    let m = p.num_experts();
    if x.len() != p.input_dim() {
        return Err(Error::dim("route_dmr", p.input_dim(), x.len()));
    }
    if k_c == 0 {
        return Err(Error::Config("k_c must be at least 1".into()));
    }
    if n_p > m {
        return Err(Error::Config(format!("candidate size n_p={n_p} exceeds expert count M={m}")));
    }
    if k_c > n_p {
        return Err(Error::Config(format!("k_c={k_c} exceeds candidate size n_p={n_p}")));
    }
    Ok(())
}

/// Modulated top-k routing for a single token.
pub fn route_dmr(p: &SmoeLayerParams, x: &[f64], k_c: usize, n_p: usize) -> Result<RoutingDecision> {
    check_routing_args(p, x, k_c, n_p)?;
    let raw = p.router_w.matvec(x)?;
    let candidates = topk_indices(&raw, n_p)?;
    let modulated = modulate(&raw, &p.phi, &candidates);
    let active = topk_indices(&modulated, k_c)?;
    let gates = restricted_softmax(&modulated, &active)?;
    Ok(RoutingDecision {
        candidate_set: candidates,
        activation_set: active,
        gate_weights: gates,
        raw_scores: raw,
        modulated_scores: modulated,
    })
}

/// Recomputes scores and gates with the candidate and activation sets held
/// fixed. This is the function the backward pass differentiates.
pub fn route_with_sets(
    p: &SmoeLayerParams,
    x: &[f64],
    candidate_set: &[usize],
    activation_set: &[usize],
) -> Result<RoutingDecision> {
    if x.len() != p.input_dim() {
        return Err(Error::dim("route_with_sets", p.input_dim(), x.len()));
    }
    let raw = p.router_w.matvec(x)?;
    let modulated = modulate(&raw, &p.phi, candidate_set);
    let gates = restricted_softmax(&modulated, activation_set)?;
    Ok(RoutingDecision {
        candidate_set: candidate_set.to_vec(),
        activation_set: activation_set.to_vec(),
        gate_weights: gates,
        raw_scores: raw,
        modulated_scores: modulated,
    })
}

fn modulate(raw: &[f64], phi: &[f64], candidates: &[usize]) -> Vec<f64> {
    let mut m = raw.to_vec();
    for &i in candidates {
        m[i] += phi[i];
    }
    m
}

fn restricted_softmax(logits: &[f64], active: &[usize]) -> Result<Vec<f64>> {
    let sub: Vec<f64> = active.iter().map(|&i| logits[i]).collect();
    let probs = softmax(&sub)?;
    let mut gates = vec![0.0; logits.len()];
    for (&i, p) in active.iter().zip(probs) {
        gates[i] = p;
    }
    Ok(gates)
}

fn mix_experts(p: &SmoeLayerParams, x: &[f64], d: &RoutingDecision) -> Result<Vec<f64>> {
    let mut y = vec![0.0; p.output_dim()];
    for &i in &d.activation_set {
        let g = d.gate_weights[i];
        for (yj, ej) in y.iter_mut().zip(expert_forward(&p.experts[i], x)?) {
            *yj += g * ej;
        }
    }
    Ok(y)
}

pub fn smoe_forward(p: &SmoeLayerParams, x: &[f64], k_c: usize, n_p: usize) -> Result<(Vec<f64>, RoutingDecision)> {
    let d = route_dmr(p, x, k_c, n_p)?;
    let y = mix_experts(p, x, &d)?;
    Ok((y, d))
}

/// Forward pass with a frozen routing pattern (finite-difference oracles).
pub fn smoe_forward_fixed(
    p: &SmoeLayerParams,
    x: &[f64],
    candidate_set: &[usize],
    activation_set: &[usize],
) -> Result<Vec<f64>> {
    let d = route_with_sets(p, x, candidate_set, activation_set)?;
    mix_experts(p, x, &d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterGrad {
    pub b: Matrix,
    pub a: Matrix,
    /// Set when the entry was replaced by an injected pseudo-gradient.
    pub pseudo: bool,
}

impl AdapterGrad {
    pub fn zeros_like(adapter: &ExpertAdapter) -> Self {
        Self {
            b: Matrix::zeros(adapter.b.rows(), adapter.b.cols()),
            a: Matrix::zeros(adapter.a.rows(), adapter.a.cols()),
            pseudo: false,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.b.is_zero() && self.a.is_zero()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGradients {
    pub experts: Vec<AdapterGrad>,
    pub router: Matrix,
    pub phi: Vec<f64>,
}

impl LayerGradients {
    pub fn zeros_like(p: &SmoeLayerParams) -> Self {
        Self {
            experts: p.experts.iter().map(|e| AdapterGrad::zeros_like(&e.adapter)).collect(),
            router: Matrix::zeros(p.router_w.rows(), p.router_w.cols()),
            phi: vec![0.0; p.num_experts()],
        }
    }

    pub fn scale(&mut self, s: f64) {
        for e in &mut self.experts {
            e.b.scale(s);
            e.a.scale(s);
        }
        self.router.scale(s);
        self.phi.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.experts.iter().all(|e| e.b.is_finite() && e.a.is_finite())
            && self.router.is_finite()
            && self.phi.iter().all(|v| v.is_finite())
    }
}

/// Output of [`smoe_backward`]: parameter gradients plus the gradient with
/// respect to the layer input (needed to chain layers).
#[derive(Debug, Clone)]
pub struct LayerBackward {
    pub grads: LayerGradients,
    pub input_grad: Vec<f64>,
}

/// Gradients of `⟨upstream, y⟩` where `y` is the layer output for `x` under
/// routing decision `d`. The discrete sets in `d` are treated as constants.
pub fn smoe_backward(p: &SmoeLayerParams, x: &[f64], d: &RoutingDecision, upstream: &[f64]) -> Result<LayerBackward> {
    let mut grads = LayerGradients::zeros_like(p);
    let input_grad = smoe_backward_accumulate(p, x, d, upstream, &mut grads)?;
    Ok(LayerBackward { grads, input_grad })
}

/// Same as [`smoe_backward`] but adds into an existing accumulator and
/// returns only the input gradient.
pub fn smoe_backward_accumulate(
    p: &SmoeLayerParams,
    x: &[f64],
    d: &RoutingDecision,
    upstream: &[f64],
    acc: &mut LayerGradients,
) -> Result<Vec<f64>> {
    let m = p.num_experts();
    if x.len() != p.input_dim() {
        return Err(Error::dim("smoe_backward input", p.input_dim(), x.len()));
    }
    if upstream.len() != p.output_dim() {
        return Err(Error::dim("smoe_backward upstream", p.output_dim(), upstream.len()));
    }
    if d.gate_weights.len() != m
        || d.raw_scores.len() != m
        || d.modulated_scores.len() != m
        || d.activation_set.iter().chain(&d.candidate_set).any(|&i| i >= m)
    {
        return Err(Error::dim("smoe_backward decision", format!("decision over {m} experts"), d.gate_weights.len()));
    }
    if acc.experts.len() != m {
        return Err(Error::dim("smoe_backward accumulator", m, acc.experts.len()));
    }

    // q_i = dL/dγ_i = ⟨g, e_i(x)⟩
    let q: Vec<f64> = d
        .activation_set
        .iter()
        .map(|&i| expert_forward(&p.experts[i], x).map(|e| dot(upstream, &e)))
        .collect::<Result<_>>()?;
    let q_bar: f64 = d.activation_set.iter().zip(&q).map(|(&i, qi)| d.gate_weights[i] * qi).sum();

    let mut input_grad = vec![0.0; p.input_dim()];
    let mut in_candidates = vec![false; m];
    for &i in &d.candidate_set {
        in_candidates[i] = true;
    }

    for (&i, &qi) in d.activation_set.iter().zip(&q) {
        let gamma = d.gate_weights[i];
        let expert = &p.experts[i];
        let s = expert.adapter.scaling();

        // adapters: dB = γ s x (A g)ᵀ, dA = γ s (Bᵀx) gᵀ
        let ag = expert.adapter.a.matvec(upstream)?;
        let h = expert.adapter.b.tmatvec(x)?;
        let eg = &mut acc.experts[i];
        eg.b.add_outer(gamma * s, x, &ag)?;
        eg.a.add_outer(gamma * s, &h, upstream)?;

        // gate logit gradient
        let dm = gamma * (qi - q_bar);
        for (r, &xj) in acc.router.row_mut(i).iter_mut().zip(x) {
            *r += dm * xj;
        }
        if in_candidates[i] {
            acc.phi[i] += dm;
        }

        // input: γ W_eff g + dm · W_r[i,:]
        for (o, v) in input_grad.iter_mut().zip(expert.effective_times(upstream)) {
            *o += gamma * v;
        }
        for (o, &w) in input_grad.iter_mut().zip(p.router_w.row(i)) {
            *o += dm * w;
        }
    }
    Ok(input_grad)
}

/// `λ(‖relu(φ_min − φ)‖² + ‖relu(φ − φ_max)‖²)` and its gradient.
pub fn phi_regularization_loss(phi: &[f64], phi_min: f64, phi_max: f64, lambda: f64) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let grad = phi
        .iter()
        .map(|&v| {
            if v < phi_min {
                let e = phi_min - v;
                loss += e * e;
                -2.0 * lambda * e
            } else if v > phi_max {
                let e = v - phi_max;
                loss += e * e;
                2.0 * lambda * e
            } else {
                0.0
            }
        })
        .collect();
    (lambda * loss, grad)
}

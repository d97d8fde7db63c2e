//! Central finite-difference checks of the SMoE backward pass.
//!
//! The numeric side only ever calls [`smoe_forward_fixed`], so it shares no
//! code with the analytic gradients it checks.

use serde::Serialize;

use crate::error::Result;
use crate::numerics::{dot, Matrix, Rng};
use crate::smoe::{route_dmr, smoe_backward_accumulate, smoe_forward_fixed, LayerGradients, RoutingDecision, SmoeLayerParams};

pub const FD_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GradcheckSpec {
    pub cases: usize,
    pub max_dim: usize,
    pub max_experts: usize,
    pub max_rank: usize,
    pub tokens: usize,
    pub seed: u64,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        Self {
            cases: 20,
            max_dim: 8,
            max_experts: 6,
            max_rank: 3,
            tokens: 3,
            seed: 42,
        }
    }
}

/// Largest relative error seen per parameter group.
#[derive(Debug, Clone, Default, Serialize)]
pub struct GradcheckReport {
    pub cases: usize,
    pub adapter_b: f64,
    pub adapter_a: f64,
    pub router: f64,
    pub phi: f64,
}

impl GradcheckReport {
    pub fn groups(&self) -> [(&'static str, f64); 4] {
        [
            ("adapter_b", self.adapter_b),
            ("adapter_a", self.adapter_a),
            ("router", self.router),
            ("phi", self.phi),
        ]
    }

    pub fn max_error(&self) -> f64 {
        self.groups().iter().map(|g| g.1).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() < TOLERANCE
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, with two exactly-zero groups counting as agreement.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let scale = dot(analytic, analytic).sqrt().max(dot(numeric, numeric).sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

struct Probe<'a> {
    tokens: &'a [(Vec<f64>, Vec<f64>, RoutingDecision)],
}

impl Probe<'_> {
    /// `Σ_t ⟨g_t, y_t⟩` with each token's routing sets frozen.
    fn loss(&self, p: &SmoeLayerParams) -> f64 {
        self.tokens
            .iter()
            .map(|(x, g, d)| {
                let y = smoe_forward_fixed(p, x, &d.candidate_set, &d.activation_set).expect("probe shapes fixed");
                dot(g, &y)
            })
            .sum()
    }

    fn central<F>(&self, p: &SmoeLayerParams, n: usize, mut poke: F) -> Vec<f64>
    where
        F: FnMut(&mut SmoeLayerParams, usize, f64),
    {
        (0..n)
            .map(|idx| {
                let mut up = p.clone();
                let mut dn = p.clone();
                poke(&mut up, idx, FD_STEP);
                poke(&mut dn, idx, -FD_STEP);
                (self.loss(&up) - self.loss(&dn)) / (2.0 * FD_STEP)
            })
            .collect()
    }
}

fn bump(m: &mut Matrix, idx: usize, h: f64) {
    m.data_mut()[idx] += h;
}

/// Random layer with nonzero adapters and modulation, sized within the spec.
pub fn random_layer(spec: &GradcheckSpec, rng: &mut Rng) -> Result<(SmoeLayerParams, usize, usize)> {
    let d = 1 + rng.index(spec.max_dim);
    let l = 1 + rng.index(spec.max_dim);
    let m = 2 + rng.index(spec.max_experts - 1);
    let r = 1 + rng.index(spec.max_rank.min(d).min(l));
    let alpha = rng.uniform_range(0.5, 2.0) * r as f64;
    let mut p = SmoeLayerParams::init(d, l, m, r, alpha, 1.0, 0, rng)?;
    for e in &mut p.experts {
        e.adapter.b = Matrix::random_normal(d, r, 0.5, rng);
    }
    p.phi = (0..m).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let n_p = 1 + rng.index(m);
    let k = 1 + rng.index(n_p);
    Ok((p, k, n_p))
}

/// Compares analytic and numeric gradients on one layer.
pub fn check_layer(p: &SmoeLayerParams, k: usize, n_p: usize, tokens: usize, rng: &mut Rng) -> Result<GradcheckReport> {
    let mut probe_tokens = Vec::with_capacity(tokens);
    let mut analytic = LayerGradients::zeros_like(p);
    for _ in 0..tokens {
        let x: Vec<f64> = (0..p.input_dim()).map(|_| rng.normal()).collect();
        let g: Vec<f64> = (0..p.output_dim()).map(|_| rng.normal()).collect();
        let d = route_dmr(p, &x, k, n_p)?;
        smoe_backward_accumulate(p, &x, &d, &g, &mut analytic)?;
        probe_tokens.push((x, g, d));
    }
    let probe = Probe { tokens: &probe_tokens };

    let mut rep = GradcheckReport {
        cases: 1,
        ..Default::default()
    };
    for (i, eg) in analytic.experts.iter().enumerate() {
        let nb = probe.central(p, eg.b.data().len(), |q, idx, h| bump(&mut q.experts[i].adapter.b, idx, h));
        rep.adapter_b = rep.adapter_b.max(relative_error(eg.b.data(), &nb));
        let na = probe.central(p, eg.a.data().len(), |q, idx, h| bump(&mut q.experts[i].adapter.a, idx, h));
        rep.adapter_a = rep.adapter_a.max(relative_error(eg.a.data(), &na));
    }
    let nr = probe.central(p, analytic.router.data().len(), |q, idx, h| bump(&mut q.router_w, idx, h));
    rep.router = relative_error(analytic.router.data(), &nr);
    let nphi = probe.central(p, p.phi.len(), |q, idx, h| q.phi[idx] += h);
    rep.phi = relative_error(&analytic.phi, &nphi);
    Ok(rep)
}

pub fn run_gradcheck(spec: &GradcheckSpec) -> Result<GradcheckReport> {
    let root = Rng::new(spec.seed);
    let mut total = GradcheckReport::default();
    for case in 0..spec.cases {
        let mut rng = root.child(&[case as u64]);
        let (p, k, n_p) = random_layer(spec, &mut rng)?;
        let r = check_layer(&p, k, n_p, spec.tokens, &mut rng)?;
        total.cases += 1;
        total.adapter_b = total.adapter_b.max(r.adapter_b);
        total.adapter_a = total.adapter_a.max(r.adapter_a);
        total.router = total.router.max(r.router);
        total.phi = total.phi.max(r.phi);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_conventions() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0], &[0.0]), 1.0);
        assert!((relative_error(&[1.0, 0.0], &[1.0, 1e-3]) - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn default_suite_passes() {
        let rep = run_gradcheck(&GradcheckSpec::default()).unwrap();
        assert_eq!(rep.cases, 20);
        assert!(rep.passed(), "{rep:?}");
    }
}

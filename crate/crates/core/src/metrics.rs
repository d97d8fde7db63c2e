//! Utilization-balance diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `−Σ uᵢ ln uᵢ` on the raw rates (no renormalization), `0·ln 0 = 0`.
pub fn utilization_entropy(u: &[f64]) -> Result<f64> {
    if let Some(v) = u.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidInput(format!("utilization rate {v} is negative or NaN")));
    }
    Ok(u.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum())
}

/// `Σᵢ Σⱼ |uᵢ − uⱼ| / (2M Σᵢ uᵢ)`.
pub fn gini(u: &[f64]) -> Result<f64> {
    if let Some(v) = u.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidInput(format!("utilization rate {v} is negative or NaN")));
    }
    let total: f64 = u.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidInput("gini of an all-zero vector is undefined".into()));
    }
    let mut acc = 0.0;
    for &a in u {
        for &b in u {
            acc += (a - b).abs();
        }
    }
    Ok(acc / (2.0 * u.len() as f64 * total))
}

/// Product-moment correlation. Zero variance is an error, not 0.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim("pearson", x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::InvalidInput("pearson needs at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidInput("pearson correlation undefined for zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// One row of per-round diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// `(budget, mean local training loss)` in ascending budget order.
    pub loss_by_budget: Vec<(f64, f64)>,
    /// Participant-weighted mean local training loss.
    pub train_loss: f64,
    /// Federated objective `Σ p_c F_c` of the aggregated model.
    pub global_loss: f64,
    pub layer_entropy: Vec<f64>,
    pub mean_entropy: f64,
    pub layer_gini: Vec<f64>,
    pub mean_gini: f64,
    /// Correlation of `φ` and `ũ` over every (layer, expert) pair; `None`
    /// when either side has zero variance.
    pub pearson_r: Option<f64>,
    /// Per participating client, analytic client FLOPs for the round.
    pub client_flops: Vec<(usize, f64)>,
    /// Per layer `Σᵢ ũᵢ`.
    pub utilization_sum: Vec<f64>,
    /// Per layer global utilization vector.
    pub global_util: Vec<Vec<f64>>,
    /// Largest `|Σγ − 1|` over every routing decision made this round.
    pub max_gate_error: f64,
}

impl RoundMetrics {
    /// Fills entropy, Gini and correlation fields from `ũ` and `φ`.
    pub fn balance(global_util: &[Vec<f64>], phi: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>, Option<f64>)> {
        let ent = global_util.iter().map(|u| utilization_entropy(u)).collect::<Result<Vec<_>>>()?;
        let gin = global_util.iter().map(|u| gini(u)).collect::<Result<Vec<_>>>()?;
        let flat_u: Vec<f64> = global_util.iter().flatten().copied().collect();
        let flat_phi: Vec<f64> = phi.iter().flatten().copied().collect();
        let r = pearson(&flat_phi, &flat_u).ok();
        Ok((ent, gin, r))
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn entropy_examples() {
        assert_eq!(utilization_entropy(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
        let uni = vec![1.0 / 64.0; 64];
        assert!((utilization_entropy(&uni).unwrap() - 64f64.ln()).abs() < 1e-12);
        assert!((utilization_entropy(&uni).unwrap() - 4.1589).abs() < 1e-4);
        assert!((utilization_entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(utilization_entropy(&[0.5, -0.1]).is_err());
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini(&[0.25; 4]).unwrap(), 0.0);
        for m in [2usize, 5, 16] {
            let mut u = vec![0.0; m];
            u[0] = 1.0;
            assert!((gini(&u).unwrap() - (m as f64 - 1.0) / m as f64).abs() < 1e-15);
        }
        assert!(gini(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn gini_matches_sorted_form() {
        // G = Σᵢ (2i − n − 1) x₍ᵢ₎ / (n Σ x), 1-based ranks over sorted values
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let mut u: Vec<f64> = (0..12).map(|_| rng.uniform()).collect();
            let g = gini(&u).unwrap();
            u.sort_by(f64::total_cmp);
            let n = u.len() as f64;
            let s: f64 = u.iter().sum();
            let sorted: f64 = u.iter().enumerate().map(|(i, x)| (2.0 * (i as f64 + 1.0) - n - 1.0) * x).sum::<f64>() / (n * s);
            assert!((g - sorted).abs() < 1e-12);
        }
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-15);
        let z: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &z).unwrap() + 1.0).abs() < 1e-15);
        // {(1,2),(2,1),(3,3)}: means 2 and 2; Sxy = 1, Sxx = 2, Syy = 2 → 0.5
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 1.0, 3.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(pearson(&[1.0, 1.0], &[2.0, 3.0]).is_err());
        assert!(pearson(&[1.0], &[2.0]).is_err());
    }

    proptest! {
        #[test]
        fn uniform_maximizes_entropy(m in 2usize..32, eps in prop::collection::vec(-1.0f64..1.0, 32)) {
            let base = 1.0 / m as f64;
            let mut u: Vec<f64> = (0..m).map(|i| base * (1.0 + 0.5 * eps[i])).collect();
            let s: f64 = u.iter().sum();
            u.iter_mut().for_each(|v| *v /= s);
            prop_assert!(utilization_entropy(&u).unwrap() <= (m as f64).ln() + 1e-12);
        }

        #[test]
        fn gini_scale_invariant(u in prop::collection::vec(0.01f64..5.0, 2..20), c in 0.01f64..100.0) {
            let scaled: Vec<f64> = u.iter().map(|v| v * c).collect();
            prop_assert!((gini(&u).unwrap() - gini(&scaled).unwrap()).abs() < 1e-12);
            let g = gini(&u).unwrap();
            prop_assert!((0.0..=1.0).contains(&g));
        }

        #[test]
        fn pearson_affine_invariance(
            pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..30),
            a in 0.1f64..10.0, b in -5.0f64..5.0,
        ) {
            let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
            if let Ok(r) = pearson(&x, &y) {
                let xa: Vec<f64> = x.iter().map(|v| a * v + b).collect();
                let xn: Vec<f64> = x.iter().map(|v| -a * v + b).collect();
                prop_assert!((pearson(&xa, &y).unwrap() - r).abs() < 1e-9);
                prop_assert!((pearson(&xn, &y).unwrap() + r).abs() < 1e-9);
            }
        }
    }
}

//! Analytic per-round computation and communication costs for heterogeneous
//! sparsity (UB-SMoE, A3SMoE) and heterogeneous LoRA-rank methods.
//!
//! Conventions: every asymptotic term gets a unit leading constant, except
//! the dense expert/FFN matmul which carries a ×2 forward/backward factor.
//! `batch` counts sequences; tokens per batch is `batch · seq_len`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d: u64,
    pub l: u64,
    pub layers: u64,
    pub experts: u64,
    /// Fixed adapter rank of the sparsity methods (`r_max` for LoRA-rank ones).
    pub rank: u64,
    pub gamma: u64,
    pub batch: u64,
    pub seq_len: u64,
    pub clients: u64,
    pub n_p: u64,
    /// Vocabulary size of the LM head, only used for end-to-end totals.
    pub vocab: u64,
    /// Experts each token passes through when LoRA-rank methods fine-tune an MoE backbone.
    pub lora_topk: u64,
}

impl ModelDims {
    /// A 16-layer, 64-expert, d = 2048 MoE shape with rank-20 adapters.
    pub fn reference() -> Self {
        Self {
            d: 2048,
            l: 2048,
            layers: 16,
            experts: 64,
            rank: 20,
            gamma: 1,
            batch: 1,
            seq_len: 256,
            clients: 8,
            n_p: 2,
            vocab: 50304,
            lora_topk: 8,
        }
    }

    fn tokens(&self) -> f64 {
        (self.batch * self.seq_len) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    UbSmoe,
    A3Smoe,
    Flora,
    HetLora,
    FlexLora,
    Florist,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::UbSmoe,
        Method::A3Smoe,
        Method::Flora,
        Method::HetLora,
        Method::FlexLora,
        Method::Florist,
    ];

    pub fn is_sparsity(self) -> bool {
        matches!(self, Method::UbSmoe | Method::A3Smoe)
    }

    pub fn tag(self) -> &'static str {
        match self {
            Method::UbSmoe => "ub-smoe",
            Method::A3Smoe => "a3smoe",
            Method::Flora => "flora",
            Method::HetLora => "hetlora",
            Method::FlexLora => "flexlora",
            Method::Florist => "florist",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidInput(format!("unknown method tag {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Upload,
    Download,
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "upload" | "up" => Ok(Direction::Upload),
            "download" | "down" => Ok(Direction::Download),
            _ => Err(Error::InvalidInput(format!("unknown direction {s:?}"))),
        }
    }
}

fn check_k(dims: &ModelDims, k_c: u64) -> Result<()> {
    if k_c == 0 || k_c > dims.experts {
        return Err(Error::InvalidInput(format!(
            "k_c must lie in 1..={}, got {k_c}",
            dims.experts
        )));
    }
    Ok(())
}

/// `Γ·B·L·2·K_c·d·l`, the part of the client cost that sparsity shrinks.
pub fn expert_term_ubsmoe(dims: &ModelDims, k_c: u64) -> Result<f64> {
    check_k(dims, k_c)?;
    Ok(dims.gamma as f64 * dims.tokens() * dims.layers as f64 * 2.0 * (k_c * dims.d * dims.l) as f64)
}

/// `Γ·B·L·M·d`, the router term.
pub fn routing_term(dims: &ModelDims) -> f64 {
    dims.gamma as f64 * dims.tokens() * (dims.layers * dims.experts * dims.d) as f64
}

/// `Γ·L·M·r(d+l)`, pseudo-gradient application over every expert.
pub fn pg_term(dims: &ModelDims) -> f64 {
    (dims.gamma * dims.layers * dims.experts * dims.rank * (dims.d + dims.l)) as f64
}

pub fn client_cost_ubsmoe(dims: &ModelDims, k_c: u64) -> Result<f64> {
    Ok(routing_term(dims) + expert_term_ubsmoe(dims, k_c)? + pg_term(dims))
}

pub fn client_cost_a3smoe(dims: &ModelDims, k_c: u64) -> Result<f64> {
    Ok(routing_term(dims) + expert_term_ubsmoe(dims, k_c)?)
}

/// `Γ·B·L(2·K·d·l + r_c(d+l))`, plus `L·r_c(d+l)` self-pruning for HetLoRA.
/// `K` is [`ModelDims::lora_topk`]; `K = 1` is the dense-FFN reading.
pub fn client_cost_lora_rank(dims: &ModelDims, r_c: u64, method: Method) -> Result<f64> {
    if method.is_sparsity() {
        return Err(Error::InvalidInput(format!("{method} is not a LoRA-rank method")));
    }
    let per_layer = 2 * dims.lora_topk * dims.d * dims.l + r_c * (dims.d + dims.l);
    let mut cost = dims.gamma as f64 * dims.tokens() * (dims.layers * per_layer) as f64;
    if method == Method::HetLora {
        cost += (dims.layers * r_c * (dims.d + dims.l)) as f64;
    }
    Ok(cost)
}

/// Client cost of `method` at budget parameter `k_or_rank` (`K_c` for the
/// sparsity family, `r_c` for the LoRA-rank family).
pub fn client_cost(dims: &ModelDims, method: Method, k_or_rank: u64) -> Result<f64> {
    match method {
        Method::UbSmoe => client_cost_ubsmoe(dims, k_or_rank),
        Method::A3Smoe => client_cost_a3smoe(dims, k_or_rank),
        _ => client_cost_lora_rank(dims, k_or_rank, method),
    }
}

/// Frozen-backbone training FLOPs shared by every method: attention
/// projections `4d²` and score/value products `2·seq·d` per layer, plus the
/// LM head `V·d`, all ×2 for forward and backward.
pub fn backbone_flops(dims: &ModelDims) -> f64 {
    let per_token = dims.layers * (4 * dims.d * dims.d + 2 * dims.seq_len * dims.d) + dims.vocab * dims.d;
    2.0 * dims.gamma as f64 * dims.tokens() * per_token as f64
}

pub fn end_to_end_flops(dims: &ModelDims, method: Method, k_or_rank: u64) -> Result<f64> {
    Ok(client_cost(dims, method, k_or_rank)? + backbone_flops(dims))
}

pub fn server_cost(dims: &ModelDims, method: Method, r_c: u64) -> f64 {
    let (c, l, m, r) = (dims.clients as f64, dims.layers as f64, dims.experts as f64, dims.rank as f64);
    let (d, f) = (dims.d as f64, dims.l as f64);
    match method {
        Method::UbSmoe => c * l * m * r * (d + f) + if c > 0.0 { l * m } else { 0.0 },
        Method::A3Smoe => c * l * m * r * (d + f),
        Method::Flora => c * l * r * (d + f),
        Method::HetLora => c * l * r * d * f,
        Method::FlexLora => c * l * (d * d * f + r * d * f),
        Method::Florist => {
            // R = Σ_c r_c with every client at r_c; truncated rank p = r
            let big_r = c * r_c as f64;
            l * big_r * big_r * (d + f + big_r) + l * r * big_r * (d + f)
        }
    }
}

pub fn comm_cost(dims: &ModelDims, method: Method, direction: Direction, r_c: u64) -> f64 {
    let (l, m, r) = (dims.layers as f64, dims.experts as f64, dims.rank as f64);
    let width = (dims.d + dims.l) as f64;
    let adapters = l * m * r * width;
    match (method, direction) {
        (Method::UbSmoe, Direction::Upload) => adapters + l * (m + 1.0),
        (Method::UbSmoe, Direction::Download) => 2.0 * adapters + l * m,
        (Method::A3Smoe, Direction::Upload) => adapters + l * m,
        (Method::A3Smoe, Direction::Download) => adapters,
        (Method::Florist, Direction::Download) => l * r * width,
        (_, _) => l * r_c as f64 * width,
    }
}

/// One row of the `cost` CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub method: Method,
    pub budget: usize,
    pub k_or_rank: u64,
    pub client_flops: f64,
    pub end_to_end_flops: f64,
    pub server_flops: f64,
    pub upload_params: f64,
    pub download_params: f64,
}

/// Every method at four budget tiers: `K_c ∈ ks` for sparsity methods and
/// `r_c ∈ ranks` for LoRA-rank methods.
pub fn cost_table(dims: &ModelDims, ks: &[u64], ranks: &[u64]) -> Result<Vec<CostRow>> {
    let mut rows = Vec::new();
    for method in Method::ALL {
        let tiers = if method.is_sparsity() { ks } else { ranks };
        for (i, &v) in tiers.iter().enumerate() {
            let r_c = if method.is_sparsity() { dims.rank } else { v };
            rows.push(CostRow {
                method,
                budget: i + 1,
                k_or_rank: v,
                client_flops: client_cost(dims, method, v)?,
                end_to_end_flops: end_to_end_flops(dims, method, v)?,
                server_flops: server_cost(dims, method, r_c),
                upload_params: comm_cost(dims, method, Direction::Upload, r_c),
                download_params: comm_cost(dims, method, Direction::Download, r_c),
            });
        }
    }
    Ok(rows)
}

pub fn write_cost_csv<W: Write>(rows: &[CostRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record([
        "method",
        "budget",
        "k_or_rank",
        "client_flops",
        "end_to_end_flops",
        "server_flops",
        "upload_params",
        "download_params",
    ])?;
    for r in rows {
        w.write_record([
            r.method.tag().to_string(),
            format!("beta{}", r.budget),
            r.k_or_rank.to_string(),
            format!("{:e}", r.client_flops),
            format!("{:e}", r.end_to_end_flops),
            format!("{:e}", r.server_flops),
            format!("{:e}", r.upload_params),
            format!("{:e}", r.download_params),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn method_tags_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.tag().parse::<Method>().unwrap(), m);
        }
        assert!("lora-xl".parse::<Method>().is_err());
        assert!("sideways".parse::<Direction>().is_err());
    }

    #[test]
    fn expert_term_reduction_is_seven_eighths() {
        let dims = ModelDims::reference();
        let r = expert_term_ubsmoe(&dims, 1).unwrap() / expert_term_ubsmoe(&dims, 8).unwrap();
        assert_eq!(r, 0.125);
        assert_eq!(1.0 - r, 0.875);
    }

    #[test]
    fn routing_and_pg_terms_ignore_k() {
        let dims = ModelDims::reference();
        let a = client_cost_ubsmoe(&dims, 1).unwrap() - expert_term_ubsmoe(&dims, 1).unwrap();
        let b = client_cost_ubsmoe(&dims, 8).unwrap() - expert_term_ubsmoe(&dims, 8).unwrap();
        assert_eq!(a, b);
        assert!(client_cost_ubsmoe(&dims, 0).is_err());
        assert!(client_cost_ubsmoe(&dims, 65).is_err());
    }

    #[test]
    fn hetlora_overhead_is_pruning_term() {
        let dims = ModelDims::reference();
        for rc in [6, 8, 12, 20] {
            let diff = client_cost_lora_rank(&dims, rc, Method::HetLora).unwrap()
                - client_cost_lora_rank(&dims, rc, Method::Flora).unwrap();
            assert_eq!(diff, (dims.layers * rc * (dims.d + dims.l)) as f64);
        }
        assert!(client_cost_lora_rank(&dims, 8, Method::UbSmoe).is_err());
    }

    #[test]
    fn zero_rank_is_dense_ffn() {
        let dims = ModelDims { lora_topk: 1, ..ModelDims::reference() };
        let c = client_cost_lora_rank(&dims, 0, Method::Flora).unwrap();
        assert_eq!(c, (dims.gamma * dims.batch * dims.seq_len * dims.layers * 2 * dims.d * dims.l) as f64);
    }

    #[test]
    fn end_to_end_tracks_reported_sparsity_column() {
        let dims = ModelDims::reference();
        let e = |k| end_to_end_flops(&dims, Method::UbSmoe, k).unwrap();
        let reported = [4.02e11, 4.72e11, 5.95e11, 8.25e11];
        for (k, rep) in [1, 2, 4].into_iter().zip(reported) {
            let ours = e(k) / e(8);
            let theirs = rep / reported[3];
            assert!((ours / theirs - 1.0).abs() < 0.15, "k={k}: {ours} vs {theirs}");
        }
    }

    #[test]
    fn reported_flops_ordering_reproduced() {
        // published end-to-end totals for both families, ascending
        let dims = ModelDims::reference();
        let mut rows = vec![
            (4.02e11f64, end_to_end_flops(&dims, Method::UbSmoe, 1).unwrap()),
            (4.72e11, end_to_end_flops(&dims, Method::UbSmoe, 2).unwrap()),
            (5.95e11, end_to_end_flops(&dims, Method::UbSmoe, 4).unwrap()),
            (8.25e11, end_to_end_flops(&dims, Method::UbSmoe, 8).unwrap()),
        ];
        for (rep, rc) in [(6.94e11, 6), (7.13e11, 8), (7.33e11, 12), (7.56e11, 20)] {
            rows.push((rep, end_to_end_flops(&dims, Method::Flora, rc).unwrap()));
        }
        let mut by_reported = rows.clone();
        by_reported.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut by_ours = rows;
        by_ours.sort_by(|a, b| a.1.total_cmp(&b.1));
        assert_eq!(by_reported, by_ours);
    }

    #[test]
    fn lora_rank_savings_are_small() {
        let dims = ModelDims::reference();
        for method in [Method::Flora, Method::HetLora, Method::FlexLora, Method::Florist] {
            let hi = client_cost_lora_rank(&dims, 20, method).unwrap();
            let lo = client_cost_lora_rank(&dims, 5, method).unwrap();
            assert!(1.0 - lo / hi < 0.10);
            let lo6 = client_cost_lora_rank(&dims, 6, method).unwrap();
            assert!(1.0 - lo6 / hi < 0.10);
        }
    }

    #[test]
    fn download_ratio_and_upload_difference() {
        let dims = ModelDims::reference();
        let ub = comm_cost(&dims, Method::UbSmoe, Direction::Download, 20);
        let a3 = comm_cost(&dims, Method::A3Smoe, Direction::Download, 20);
        let dominant = (dims.layers * dims.experts * dims.rank * (dims.d + dims.l)) as f64;
        assert_eq!((ub - (dims.layers * dims.experts) as f64) / a3, 2.0);
        assert_eq!(a3, dominant);
        assert!((ub / a3 - 2.0).abs() < 1e-4);
        let up_ub = comm_cost(&dims, Method::UbSmoe, Direction::Upload, 20);
        let up_a3 = comm_cost(&dims, Method::A3Smoe, Direction::Upload, 20);
        assert_eq!(up_ub - up_a3, dims.layers as f64);
        let none = ModelDims { layers: 0, ..dims };
        for m in Method::ALL {
            assert_eq!(comm_cost(&none, m, Direction::Upload, 8), 0.0);
            assert_eq!(comm_cost(&none, m, Direction::Download, 8), 0.0);
        }
    }

    #[test]
    fn server_cost_shapes() {
        let dims = ModelDims::reference();
        let flex = server_cost(&dims, Method::FlexLora, 20);
        let flora = server_cost(&dims, Method::Flora, 20);
        assert!(flex / flora > 100.0);
        let double = ModelDims { clients: 16, ..dims };
        let base = server_cost(&dims, Method::UbSmoe, 20) - (dims.layers * dims.experts) as f64;
        let twice = server_cost(&double, Method::UbSmoe, 20) - (dims.layers * dims.experts) as f64;
        assert_eq!(twice, 2.0 * base);
        let none = ModelDims { clients: 0, ..dims };
        for m in Method::ALL {
            assert_eq!(server_cost(&none, m, 20), 0.0);
        }
    }

    #[test]
    fn csv_has_fixed_header() {
        let rows = cost_table(&ModelDims::reference(), &[1, 2, 4, 8], &[6, 8, 12, 20]).unwrap();
        assert_eq!(rows.len(), 24);
        let mut buf = Vec::new();
        write_cost_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("method,budget,k_or_rank,client_flops,end_to_end_flops,server_flops,upload_params,download_params\n"));
        assert_eq!(text.lines().count(), 25);
        assert!(!text.contains('\r'));
    }

    fn dims_strategy() -> impl Strategy<Value = ModelDims> {
        (1u64..64, 1u64..64, 1u64..8, 2u64..16, 1u64..8, 1u64..4, 1u64..4, 1u64..8, 0u64..8).prop_map(
            |(d, l, layers, experts, rank, gamma, batch, seq_len, clients)| ModelDims {
                d,
                l,
                layers,
                experts,
                rank,
                gamma,
                batch,
                seq_len,
                clients,
                n_p: 2,
                vocab: 100,
                lora_topk: 2,
            },
        )
    }

    proptest! {
        #[test]
        fn costs_monotone_in_each_dimension(dims in dims_strategy(), which in 0usize..9, k in 1u64..=2, rc in 1u64..8) {
            let mut bigger = dims;
            match which {
                0 => bigger.d += 1,
                1 => bigger.l += 1,
                2 => bigger.layers += 1,
                3 => bigger.experts += 1,
                4 => bigger.rank += 1,
                5 => bigger.gamma += 1,
                6 => bigger.batch += 1,
                7 => bigger.seq_len += 1,
                _ => bigger.clients += 1,
            }
            for m in Method::ALL {
                let kr = if m.is_sparsity() { k } else { rc };
                prop_assert!(client_cost(&bigger, m, kr).unwrap() >= client_cost(&dims, m, kr).unwrap());
                prop_assert!(end_to_end_flops(&bigger, m, kr).unwrap() >= end_to_end_flops(&dims, m, kr).unwrap());
                prop_assert!(server_cost(&bigger, m, rc) >= server_cost(&dims, m, rc));
                for dir in [Direction::Upload, Direction::Download] {
                    prop_assert!(comm_cost(&bigger, m, dir, rc) >= comm_cost(&dims, m, dir, rc));
                }
            }
        }

        #[test]
        fn ubsmoe_strictly_increasing_in_k(dims in dims_strategy()) {
            for k in 1..dims.experts {
                prop_assert!(client_cost_ubsmoe(&dims, k + 1).unwrap() > client_cost_ubsmoe(&dims, k).unwrap());
            }
        }
    }
}

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use fedmoe::biaslab::{balanced_probs, bias_table, write_bias_csv, FloorSchedule, QuadraticMoeObjective};
use fedmoe::config::RunConfig;
use fedmoe::costmodel::{cost_table, write_cost_csv, ModelDims};
use fedmoe::federation::run_federated;
use fedmoe::gradcheck::{run_gradcheck, GradcheckSpec, TOLERANCE};
use fedmoe::numerics::Rng;
use fedmoe::{report, Error};

const OUT_DIR_ENV: &str = "FEDMOE_OUT_DIR";

#[derive(Parser)]
#[command(name = "fedmoe", version, about = "Federated sparse-MoE fine-tuning simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a federated simulation and write metrics.csv and summary.json.
    Run(RunArgs),
    /// Finite-difference check of the SMoE backward pass.
    Gradcheck(GradcheckArgs),
    /// Analytic FLOPs and communication table as CSV on stdout.
    Cost(CostArgs),
    /// Sparse-gradient bias sweep as CSV on stdout.
    BiasLab(BiasArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file; omitted fields take their defaults.
    #[arg(long, conflicts_with = "json")]
    config: Option<PathBuf>,
    /// Inline JSON config.
    #[arg(long)]
    json: Option<String>,
    /// Output directory. Falls back to the config, then $FEDMOE_OUT_DIR, then ./out.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    no_pg: bool,
    #[arg(long)]
    no_dmr: bool,
    /// Print the effective config and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    cases: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    tokens: usize,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long, default_value_t = 2048)]
    d: u64,
    #[arg(long, default_value_t = 2048)]
    l: u64,
    #[arg(long, default_value_t = 16)]
    layers: u64,
    #[arg(long, default_value_t = 64)]
    experts: u64,
    #[arg(long, default_value_t = 20)]
    rank: u64,
    #[arg(long, default_value_t = 1)]
    gamma: u64,
    #[arg(long, default_value_t = 1)]
    batch: u64,
    #[arg(long, default_value_t = 256)]
    seq_len: u64,
    #[arg(long, default_value_t = 8)]
    clients: u64,
    #[arg(long, default_value_t = 2)]
    n_p: u64,
    #[arg(long, default_value_t = 50304)]
    vocab: u64,
    #[arg(long, default_value_t = 8)]
    lora_topk: u64,
    /// Expert budgets of the sparsity methods.
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 4, 8])]
    ks: Vec<u64>,
    /// Adapter ranks of the LoRA-rank methods.
    #[arg(long, value_delimiter = ',', default_values_t = [6u64, 8, 12, 20])]
    ranks: Vec<u64>,
}

#[derive(Args)]
struct BiasArgs {
    #[arg(long, default_value_t = 4)]
    experts: usize,
    #[arg(long, default_value_t = 4)]
    block_dim: usize,
    #[arg(long, default_value_t = 4)]
    clients: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4])]
    ks: Vec<usize>,
    #[arg(long, default_value_t = 20_000)]
    steps: usize,
    #[arg(long, default_value_t = 0.5)]
    eta0: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::InvalidInput(_) | Error::Dimension { .. } | Error::Json(_) => 2,
        Error::Numerical(_) => 3,
        _ => 1,
    }
}

fn load_config(a: &RunArgs) -> fedmoe::Result<RunConfig> {
    let mut cfg = match (&a.config, &a.json) {
        (Some(p), _) => RunConfig::from_path(p)?,
        (None, Some(text)) => RunConfig::from_json(text)?,
        (None, None) => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.rounds {
        cfg.rounds = r;
    }
    if let Some(e) = a.eta {
        cfg.eta = e;
    }
    cfg.pg.enabled &= !a.no_pg;
    cfg.dmr.enabled &= !a.no_dmr;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_run(a: RunArgs) -> fedmoe::Result<u8> {
    let cfg = load_config(&a)?;
    if a.print_config {
        println!("{}", cfg.canonical_json());
        return Ok(0);
    }
    let dir = a
        .out
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let start = Instant::now();
    let run = run_federated(&cfg)?;
    report::write_run(&dir, &cfg, &run, start.elapsed().as_secs_f64())?;
    if let Some(m) = run.metrics.last() {
        eprintln!(
            "{} rounds: global loss {:.5}, mean entropy {:.4}, gini {:.4} -> {}",
            run.metrics.len(),
            m.global_loss,
            m.mean_entropy,
            m.mean_gini,
            dir.display()
        );
    }
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs) -> fedmoe::Result<u8> {
    let spec = GradcheckSpec { cases: a.cases, seed: a.seed, tokens: a.tokens, ..GradcheckSpec::default() };
    let rep = run_gradcheck(&spec)?;
    for (name, err) in rep.groups() {
        println!("{name}\t{err:e}");
    }
    if rep.passed() {
        Ok(0)
    } else {
        eprintln!("max relative error {:e} exceeds {TOLERANCE:e}", rep.max_error());
        Ok(4)
    }
}

fn cmd_cost(a: CostArgs) -> fedmoe::Result<u8> {
    let dims = ModelDims {
        d: a.d,
        l: a.l,
        layers: a.layers,
        experts: a.experts,
        rank: a.rank,
        gamma: a.gamma,
        batch: a.batch,
        seq_len: a.seq_len,
        clients: a.clients,
        n_p: a.n_p,
        vocab: a.vocab,
        lora_topk: a.lora_topk,
    };
    let rows = cost_table(&dims, &a.ks, &a.ranks)?;
    let stdout = std::io::stdout();
    write_cost_csv(&rows, stdout.lock())?;
    Ok(0)
}

fn cmd_bias_lab(a: BiasArgs) -> fedmoe::Result<u8> {
    let k0 = a.ks.first().copied().unwrap_or(1);
    if k0 == 0 || k0 > a.experts || a.clients == 0 {
        return Err(Error::InvalidInput("need clients >= 1 and budgets in 1..=experts".into()));
    }
    let mut rng = Rng::new(a.seed);
    let obj = QuadraticMoeObjective::random(a.experts, a.block_dim, vec![balanced_probs(a.experts, k0); a.clients], &mut rng)?;
    let rows = bias_table(&obj, &a.ks, FloorSchedule { eta0: a.eta0, steps: a.steps }, a.seed)?;
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    write_bias_csv(&rows, &mut lock)?;
    lock.flush()?;
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Cost(a) => cmd_cost(a),
        Cmd::BiasLab(a) => cmd_bias_lab(a),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

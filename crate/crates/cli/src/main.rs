use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedbgs_core::ledger::GasReport;
use fedbgs_core::sim::{self, FaultPlan};
use fedbgs_core::RunConfig;
use log::error;

#[derive(Parser)]
#[command(name = "fedbgs", version, about = "Segmented gossip learning over a simulated ledger")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run registration, clustering and the gossip phase.
    Run(RunArgs),
    /// Run registration and clustering only.
    Phase1(RunArgs),
    /// Run twice with --deterministic and compare ledger dumps and final models.
    Replay(RunArgs),
    /// Summarize gas per operation from a ledger dump.
    GasReport {
        /// Ledger dump written by --ledger-out.
        dump: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    peers: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Gossip phase length in scheduler ticks.
    #[arg(long)]
    ticks: Option<u64>,
    #[arg(long)]
    dp_clip: Option<f64>,
    #[arg(long)]
    dp_sigma_max: Option<f64>,
    #[arg(long)]
    dp_sigma_min: Option<f64>,
    #[arg(long)]
    trim_ratio: Option<f64>,
    #[arg(long)]
    fanout: Option<usize>,
    #[arg(long)]
    leader_period: Option<u64>,
    /// Loss increase above which a received update is penalized.
    #[arg(long)]
    penalty_loss_delta: Option<f64>,
    /// Noise label distributions before cluster assignment.
    #[arg(long)]
    cluster_dp: bool,
    /// Single-threaded, fully seeded execution.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    cas_dir: Option<PathBuf>,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    #[arg(long)]
    ledger_out: Option<PathBuf>,
    #[arg(long)]
    gas_report_out: Option<PathBuf>,
    /// Final global model bytes; its CID goes to `<path>.cid`.
    #[arg(long)]
    model_out: Option<PathBuf>,
}

impl RunArgs {
    fn to_config(&self) -> fedbgs_core::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag { cfg.$($field).+ = v; })*
            };
        }
        set!(
            peers => num_peers,
            clusters => num_clusters,
            beta => beta,
            seed => seed,
            ticks => scheduler.duration_ticks,
            dp_clip => dp.clip_threshold,
            dp_sigma_max => dp.sigma_max,
            dp_sigma_min => dp.sigma_min,
            trim_ratio => trim_ratio,
            fanout => scheduler.fanout,
            leader_period => scheduler.leader_period,
            penalty_loss_delta => penalty_loss_delta,
        );
        for (flag, dst) in [
            (&self.cas_dir, &mut cfg.output.cas_dir),
            (&self.metrics_out, &mut cfg.output.metrics_out),
            (&self.ledger_out, &mut cfg.output.ledger_out),
            (&self.gas_report_out, &mut cfg.output.gas_report_out),
            (&self.model_out, &mut cfg.output.model_out),
        ] {
            if flag.is_some() {
                dst.clone_from(flag);
            }
        }
        cfg.cluster_dp |= self.cluster_dp;
        cfg.deterministic |= self.deterministic;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(args: &RunArgs) -> fedbgs_core::Result<()> {
    let cfg = args.to_config()?;
    let (_, report) = sim::run(&cfg, &FaultPlan::default())?;
    print!("{}", report.summary());
    println!("{}", report.gas_report);
    Ok(())
}

fn phase1(args: &RunArgs) -> fedbgs_core::Result<()> {
    let cfg = args.to_config()?;
    let p1 = sim::run_phase1(&cfg)?;
    for (k, members) in p1.assignment.membership() {
        let s = p1.specs[k];
        println!("cluster {k}: rows {}..={} peers {members:?}", s.start, s.end);
    }
    if let Some(p) = &cfg.output.ledger_out {
        fs::write(p, p1.ledger.dump())?;
    }
    let report = p1.ledger.gas_report();
    if let Some(p) = &cfg.output.gas_report_out {
        fs::write(p, format!("{report}\n"))?;
    }
    println!("{report}");
    Ok(())
}

fn replay(args: &RunArgs) -> fedbgs_core::Result<bool> {
    let mut cfg = args.to_config()?;
    cfg.deterministic = true;
    let mut second = cfg.clone();
    second.output = Default::default();
    let (_, a) = sim::run(&cfg, &FaultPlan::default())?;
    let (_, b) = sim::run(&second, &FaultPlan::default())?;
    let same_dump = a.ledger_dump == b.ledger_dump;
    let same_model = a.final_model_bytes == b.final_model_bytes;
    println!("ledger dumps   {}", if same_dump { "identical" } else { "DIFFER" });
    println!("final models   {}", if same_model { "identical" } else { "DIFFER" });
    println!("final model    {}", a.final_model_cid);
    Ok(same_dump && same_model)
}

fn gas_report(dump: &PathBuf) -> fedbgs_core::Result<()> {
    let report = GasReport::from_dump(&fs::read_to_string(dump)?)?;
    println!("{report}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => run(a).map(|_| true),
        Command::Phase1(a) => phase1(a).map(|_| true),
        Command::Replay(a) => replay(a),
        Command::GasReport { dump } => gas_report(dump).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

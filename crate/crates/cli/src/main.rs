use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use moonshot_core::harness::{self, CampaignSpec, MutantOptions};
use moonshot_core::sim::explore::{explore, ExploreOptions};
use moonshot_core::{replay, run_traced, AdversaryStrategy, Mutation, SimConfig};

const EXIT_SAFE: u8 = 0;
const EXIT_ERROR: u8 = 1;
const EXIT_VIOLATION: u8 = 2;
const EXIT_SURVIVOR: u8 = 3;

#[derive(Parser)]
#[command(name = "moonshot-sim", version, about = "Simulate and check the Moonshot consensus protocol")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one seeded simulation and write its trace.
    Run(RunArgs),
    /// Run many seeds and summarize.
    Campaign(CampaignArgs),
    /// Re-execute a trace and check it byte for byte.
    Replay(ReplayArgs),
    /// Explore every interleaving up to a depth.
    Explore(ExploreArgs),
    /// Check that every protocol mutation is caught by the monitor.
    Mutants(MutantArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Protocol mutation to enable.
    #[arg(long = "mutate")]
    mutate: Option<Mutation>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Output directory for traces and reports.
    #[arg(long, env = "MOONSHOT_SIM_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    adversary: Option<AdversaryStrategy>,
}

#[derive(Args)]
struct CampaignArgs {
    #[command(flatten)]
    common: Common,
    /// Half-open seed range `A..B`.
    #[arg(long, default_value = "0..100", value_parser = parse_range)]
    seeds: Range<u64>,
    /// Strategies cycled by seed, comma separated. `generated` expands to
    /// every non-scripted strategy.
    #[arg(long, value_delimiter = ',')]
    adversary: Vec<String>,
    /// Shift the Byzantine ids with the seed.
    #[arg(long)]
    rotate_byzantine: bool,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct ReplayArgs {
    trace: PathBuf,
}

#[derive(Args)]
struct ExploreArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 10)]
    depth: usize,
    /// Also branch on timer expiry at every honest validator.
    #[arg(long)]
    timers: bool,
    #[arg(long)]
    max_states: Option<u64>,
}

#[derive(Args)]
struct MutantArgs {
    #[arg(long, default_value = "0..10000", value_parser = parse_range)]
    seeds: Range<u64>,
    #[arg(long, default_value_t = 2000)]
    max_steps: u64,
    /// Exploration depth used when no seed kills a mutation.
    #[arg(long, default_value_t = 12)]
    depth: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn parse_range(s: &str) -> Result<Range<u64>, String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected A..B, got `{s}`"))?;
    let a: u64 = a.trim().parse().map_err(|e| format!("bad range start: {e}"))?;
    let b: u64 = b.trim().parse().map_err(|e| format!("bad range end: {e}"))?;
    if a > b {
        return Err(format!("empty range `{s}`"));
    }
    Ok(a..b)
}

struct Fail(u8, String);

impl<E: std::fmt::Display> From<E> for Fail {
    fn from(e: E) -> Self {
        Fail(EXIT_ERROR, e.to_string())
    }
}

fn load(common: &Common) -> Result<SimConfig, Fail> {
    let mut cfg = match &common.config {
        Some(p) => SimConfig::load(p)?,
        None => SimConfig::default(),
    };
    if let Some(m) = common.mutate {
        cfg.mutation = Some(m);
    }
    if let Some(s) = common.max_steps {
        cfg.max_steps = s;
    }
    Ok(cfg)
}

fn write_out(dir: &Path, name: &str, text: &str) -> Result<PathBuf, Fail> {
    fs::create_dir_all(dir)?;
    let p = dir.join(name);
    fs::write(&p, text)?;
    Ok(p)
}

fn cmd_run(a: RunArgs) -> Result<u8, Fail> {
    let mut cfg = load(&a.common)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(adv) = a.adversary {
        cfg.adversary_strategy = adv;
    }
    cfg.validate()?;
    let (report, trace) = run_traced(&cfg)?;
    let text = report.render();
    print!("{text}");
    if let Some(dir) = &a.common.out {
        let t = write_out(dir, &format!("trace-{}.txt", cfg.seed), &trace)?;
        write_out(dir, &format!("report-{}.txt", cfg.seed), &text)?;
        println!("trace={}", t.display());
    }
    Ok(if report.is_safe() { EXIT_SAFE } else { EXIT_VIOLATION })
}

fn cmd_campaign(a: CampaignArgs) -> Result<u8, Fail> {
    let cfg = load(&a.common)?;
    let mut adversaries = Vec::new();
    for s in &a.adversary {
        if s.trim().eq_ignore_ascii_case("generated") {
            adversaries.extend(AdversaryStrategy::GENERATED.iter().cloned());
        } else {
            adversaries.push(s.parse::<AdversaryStrategy>()?);
        }
    }
    let spec = CampaignSpec {
        base: cfg,
        seeds: a.seeds,
        adversaries,
        rotate_byzantine: a.rotate_byzantine,
        jobs: a.jobs,
    };
    let sum = harness::campaign(&spec)?;
    let text = sum.render();
    print!("{text}");
    if let Some(dir) = &a.common.out {
        write_out(dir, "campaign.txt", &text)?;
        for &seed in &sum.violating_seeds {
            let (_, trace) = run_traced(&spec.config_for(seed))?;
            let p = write_out(dir, &format!("trace-{seed}.txt"), &trace)?;
            println!("trace={}", p.display());
        }
    }
    Ok(if sum.is_safe() { EXIT_SAFE } else { EXIT_VIOLATION })
}

fn cmd_replay(a: ReplayArgs) -> Result<u8, Fail> {
    let report = replay(&a.trace)?;
    print!("{}", report.render());
    Ok(if report.is_safe() { EXIT_SAFE } else { EXIT_VIOLATION })
}

fn cmd_explore(a: ExploreArgs) -> Result<u8, Fail> {
    let cfg = load(&a.common)?;
    let mut opts = ExploreOptions::from_config(&cfg, a.depth)?;
    opts.timers = a.timers;
    if let Some(m) = a.max_states {
        opts.max_states = m;
    }
    let report = explore(&cfg, &opts)?;
    let text = report.render();
    print!("{text}");
    if let Some(dir) = &a.common.out {
        write_out(dir, "explore.txt", &text)?;
    }
    Ok(if report.violations.is_empty() { EXIT_SAFE } else { EXIT_VIOLATION })
}

fn cmd_mutants(a: MutantArgs) -> Result<u8, Fail> {
    let opts = MutantOptions {
        seeds: a.seeds,
        max_steps: a.max_steps,
        explore_depth: a.depth,
        jobs: a.jobs,
    };
    let mut survivors = 0;
    for m in Mutation::ALL {
        let r = harness::kill_mutant(m, &opts)?;
        println!("{}", r.render());
        survivors += usize::from(r.kill.is_none());
    }
    println!("mutants killed={} survived={survivors}", Mutation::ALL.len() - survivors);
    Ok(if survivors == 0 { EXIT_SAFE } else { EXIT_SURVIVOR })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_SAFE };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Campaign(a) => cmd_campaign(a),
        Cmd::Replay(a) => cmd_replay(a),
        Cmd::Explore(a) => cmd_explore(a),
        Cmd::Mutants(a) => cmd_mutants(a),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(Fail(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use femagent_bench::grade::{load_manual_verdicts, load_references, References};
use femagent_bench::run::slug;
use femagent_bench::{
    accuracy_report, comparison_csv, grade_ledger, load_registry_unchecked, run_benchmark, RunLedger, RunOptions,
    ScalarComparator,
};
use femagent_cli::{load_problem, runs, Settings, SettingsLauncher, StrategyKind};
use femagent_core::orchestra::{AdminChannel, Headless, RosterConfig, TerminalAdmin};
use femagent_forge::offline::{self, MarkerRunner};
use femagent_forge::split::write_folds;
use femagent_forge::{ForgeEndpoints, Pipeline};
use femagent_lora::verify::{verify, VerifyConfig};
use femagent_store::{AppState, Store};
use serde_json::Value;

#[derive(Parser, Debug)]
#[command(name = "femagent", version, about = "Agentic FEniCS code generation: runs, datasets, benchmarks")]
struct Cli {
    /// Settings file with [endpoints.*], [sandbox] and per-command sections.
    #[arg(short, long, global = true, default_value = "femagent.toml")]
    config: PathBuf,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Coder/executor loop on one problem.
    Duo {
        #[command(subcommand)]
        cmd: DuoCmd,
    },
    /// Multi-agent group chat on one problem.
    Orchestra {
        #[command(subcommand)]
        cmd: OrchestraCmd,
    },
    /// Synthetic dataset pipeline.
    Forge {
        #[command(subcommand)]
        cmd: ForgeCmd,
    },
    /// Benchmark runs, grading and reports.
    Bench {
        #[command(subcommand)]
        cmd: BenchCmd,
    },
    /// Adapter arithmetic checks.
    Lora {
        #[command(subcommand)]
        cmd: LoraCmd,
    },
    /// HTTP service over a run store.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long, default_value = "store")]
        store: PathBuf,
        /// Seconds an orchestra gate waits for a posted decision before the auto-policy decides.
        #[arg(long, default_value_t = 600)]
        gate_wait: u64,
    },
}

#[derive(Subcommand, Debug)]
enum DuoCmd {
    Run {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        max_rounds: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum OrchestraCmd {
    Run {
        #[arg(long)]
        problem: PathBuf,
        /// Roster file; defaults to the [orchestra] section of the settings.
        #[arg(long)]
        roster: Option<PathBuf>,
        /// Decide every gate by the auto-policy instead of asking on the terminal.
        #[arg(long)]
        headless: bool,
        /// Seconds to wait for a terminal answer before the auto-policy decides.
        #[arg(long, default_value_t = 600)]
        gate_wait: u64,
        #[arg(long, default_value = "femagent-out")]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct OfflineFlag {
    /// Use the deterministic offline generators and execute nothing.
    #[arg(long)]
    offline: bool,
}

#[derive(Subcommand, Debug)]
enum ForgeCmd {
    /// Start a run from the [forge] section of --config.
    Run {
        #[command(flatten)]
        offline: OfflineFlag,
    },
    Resume {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        offline: OfflineFlag,
    },
    /// Write k train/validation folds of a dataset.
    Split {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "folds")]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum BenchCmd {
    Run {
        #[arg(long, value_enum)]
        strategy: Option<StrategyKind>,
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        framework_id: Option<String>,
        #[arg(long)]
        ledger: Option<PathBuf>,
        #[arg(long)]
        transcripts: Option<PathBuf>,
        #[arg(long)]
        parallelism: Option<usize>,
        /// Comma-separated problem ids; all problems when omitted.
        #[arg(long, value_delimiter = ',')]
        problems: Vec<String>,
    },
    Grade {
        #[arg(long)]
        ledger: Option<PathBuf>,
        /// Manual verdicts (JSON Lines).
        #[arg(long)]
        manual: Option<PathBuf>,
        /// Reference scalars (TOML tables per problem id).
        #[arg(long)]
        references: Option<PathBuf>,
        #[arg(long)]
        rel_tol: Option<f64>,
    },
    Report {
        #[arg(long)]
        ledger: Option<PathBuf>,
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Only this framework; every framework in the ledger when omitted.
        #[arg(long)]
        framework: Option<String>,
        /// Also store each report in this run store, under the framework's slug.
        #[arg(long)]
        store: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum LoraCmd {
    Verify {
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 48)]
        k: usize,
        #[arg(long, default_value_t = 8)]
        r: usize,
        #[arg(long, default_value_t = 16.0)]
        alpha: f64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = femagent_lora::quant::DEFAULT_BLOCK_SIZE)]
        block_size: usize,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match cli.command {
        Command::Duo { cmd } => duo(&cli.config, cmd),
        Command::Orchestra { cmd } => orchestra(&cli.config, cmd),
        Command::Forge { cmd } => forge(&cli.config, cmd),
        Command::Bench { cmd } => bench(&cli.config, cmd),
        Command::Lora { cmd } => lora(cmd),
        Command::Serve { bind, store, gate_wait } => serve(bind, &store, gate_wait),
    }
}

/// Serde name of a status enum, without the JSON quotes.
fn label(v: &impl serde::Serialize) -> String {
    match serde_json::to_value(v) {
        Ok(Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => "?".into(),
    }
}

fn session_id(problem: &str, kind: &str) -> String {
    format!("{}-{kind}-{}", slug(problem), chrono::Utc::now().format("%Y%m%dT%H%M%S"))
}

fn duo(config: &Path, cmd: DuoCmd) -> Result<()> {
    let DuoCmd::Run { problem, endpoint, max_rounds, out } = cmd;
    let settings = Settings::load(config, true)?;
    let problem = load_problem(&problem)?;
    let name = settings.pick_endpoint(endpoint.as_deref(), settings.duo.endpoint.as_deref())?;
    let mut limits = settings.duo.limits;
    if let Some(n) = max_rounds {
        limits.max_rounds = n;
    }
    let sid = session_id(&problem.id, "duo");
    let (outcome, transcript) = runs::duo_session(&settings, &name, &problem, &sid, limits, None)?;
    runs::write_session_output(&out, &transcript, outcome.final_code.as_ref().map(|c| c.source.as_str()), &outcome)?;
    println!("{sid}: {} after {} round(s); output in {}", label(&outcome.status), outcome.rounds_used, out.display());
    Ok(())
}

fn orchestra(config: &Path, cmd: OrchestraCmd) -> Result<()> {
    let OrchestraCmd::Run { problem, roster, headless, gate_wait, out } = cmd;
    let settings = Settings::load(config, true)?;
    let roster_cfg = match roster {
        Some(p) => {
            let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<RosterConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => settings.orchestra.clone(),
    };
    let admin: Arc<dyn AdminChannel> =
        if headless { Arc::new(Headless) } else { Arc::new(TerminalAdmin { wait: Duration::from_secs(gate_wait) }) };
    let problem = load_problem(&problem)?;
    let sid = session_id(&problem.id, "orchestra");
    let (outcome, transcript) = runs::orchestra_session(&settings, &roster_cfg, &problem, &sid, admin, None)?;
    let dir = out.join(&sid);
    runs::write_session_output(&dir, &transcript, outcome.final_code.as_ref().map(|c| c.source.as_str()), &outcome)?;
    println!(
        "{sid}: {} after {} selection(s), {} coder loop(s); output in {}",
        label(&outcome.status),
        outcome.selections,
        outcome.coder_loops,
        dir.display()
    );
    Ok(())
}

fn forge(config: &Path, cmd: ForgeCmd) -> Result<()> {
    let marker = MarkerRunner::new(Vec::<String>::new());
    let endpoints_for = |settings: &Settings, names, offline: bool| -> Result<ForgeEndpoints> {
        Ok(if offline { offline::endpoints() } else { ForgeEndpoints::from_registry(&settings.endpoints, names)? })
    };
    let manifest = match cmd {
        ForgeCmd::Run { offline } => {
            let settings = Settings::load(config, true)?;
            let Some(cfg) = settings.forge.clone() else { bail!("{} has no [forge] section", config.display()) };
            let endpoints = endpoints_for(&settings, &cfg.stage_endpoints, offline.offline)?;
            let sandbox = femagent_core::sandbox::Sandbox::new(cfg.sandbox.clone());
            let runner: &dyn femagent_core::sandbox::CodeRunner = if offline.offline { &marker } else { &sandbox };
            Pipeline::new(cfg, &endpoints, runner).run()?
        }
        ForgeCmd::Resume { manifest, offline } => {
            let settings = Settings::load(config, !offline.offline)?;
            let stored = femagent_forge::DatasetManifest::load(&manifest)?;
            let endpoints = endpoints_for(&settings, &stored.config.stage_endpoints, offline.offline)?;
            let sandbox = femagent_core::sandbox::Sandbox::new(stored.config.sandbox.clone());
            let runner: &dyn femagent_core::sandbox::CodeRunner = if offline.offline { &marker } else { &sandbox };
            Pipeline::resume(&manifest, &endpoints, runner)?
        }
        ForgeCmd::Split { dataset, k, seed, out } => {
            let sizes = write_folds(&dataset, &out, k, seed)?;
            println!("{k} folds of sizes {sizes:?} written to {}", out.display());
            return Ok(());
        }
    };
    let c = &manifest.counts;
    println!(
        "candidates {} (passed {}, corrected {}, discarded {}); records {}; dataset total {} in {}",
        c.candidates,
        c.passed,
        c.corrected,
        c.discarded,
        c.records,
        c.total,
        manifest.records_path.display()
    );
    for e in &manifest.stage_errors {
        eprintln!("stage error: {e:?}");
    }
    let problems = manifest.check();
    if !problems.is_empty() {
        bail!("manifest check failed: {}", problems.join("; "));
    }
    Ok(())
}

fn bench(config: &Path, cmd: BenchCmd) -> Result<()> {
    match cmd {
        BenchCmd::Run { strategy, registry, endpoint, framework_id, ledger, transcripts, parallelism, problems } => {
            let settings = Settings::load(config, true)?;
            let b = &settings.bench;
            let registry = load_registry_unchecked(registry.as_ref().unwrap_or(&b.registry))?;
            if let Err(e) = registry.check_census() {
                log::warn!("{e}");
            }
            let selected: Vec<_> = if problems.is_empty() {
                registry.problems().to_vec()
            } else {
                problems
                    .iter()
                    .map(|id| registry.get(id).cloned().with_context(|| format!("problem {id} not in the registry")))
                    .collect::<Result<_>>()?
            };
            let strategy = runs::strategy(
                &settings,
                strategy.unwrap_or(b.strategy),
                endpoint.as_deref(),
                framework_id.as_deref(),
            )?;
            let opts = RunOptions {
                ledger_path: ledger.unwrap_or_else(|| b.ledger.clone()),
                transcripts_dir: transcripts.unwrap_or_else(|| b.transcripts.clone()),
                parallelism: parallelism.unwrap_or(b.parallelism),
            };
            let ledger = run_benchmark(&selected, strategy.as_ref(), &opts)?;
            let executable = ledger.for_framework(strategy.framework_id()).filter(|e| e.executable).count();
            println!(
                "{}: {} of {} problems produced executable code; ledger {}",
                strategy.framework_id(),
                executable,
                selected.len(),
                opts.ledger_path.display()
            );
        }
        BenchCmd::Grade { ledger, manual, references, rel_tol } => {
            let settings = Settings::load(config, false)?;
            let b = &settings.bench;
            let path = ledger.unwrap_or_else(|| b.ledger.clone());
            let mut l = RunLedger::load(&path)?;
            let refs: References = match references.or_else(|| b.references.clone()) {
                Some(p) => load_references(&p)?,
                None => References::new(),
            };
            let verdicts = match manual.or_else(|| b.verdicts.clone()) {
                Some(p) => load_manual_verdicts(&p)?,
                None => Vec::new(),
            };
            let summary =
                grade_ledger(&mut l, &refs, &verdicts, &ScalarComparator { rel_tol: rel_tol.unwrap_or(b.rel_tol) });
            l.save(&path)?;
            println!(
                "graded {}; ungraded {}; conflicts {}",
                summary.graded,
                summary.ungraded.len(),
                summary.conflicts.len()
            );
            for u in &summary.ungraded {
                println!("  ungraded {u}");
            }
            for c in &summary.conflicts {
                eprintln!("  conflict {c}");
            }
            if !summary.conflicts.is_empty() {
                bail!(
                    "{} conflicting verdict(s) left unresolved; confirm the manual verdicts to override",
                    summary.conflicts.len()
                );
            }
        }
        BenchCmd::Report { ledger, registry, out, framework, store } => {
            let settings = Settings::load(config, false)?;
            let b = &settings.bench;
            let l = RunLedger::load(&ledger.unwrap_or_else(|| b.ledger.clone()))?;
            let registry = load_registry_unchecked(registry.as_ref().unwrap_or(&b.registry))?;
            let frameworks = match framework {
                Some(f) => vec![f],
                None => l.frameworks(),
            };
            if frameworks.is_empty() {
                bail!("the ledger has no entries");
            }
            let store = store.map(Store::open).transpose()?;
            let mut reports = Vec::new();
            for f in &frameworks {
                let report = accuracy_report(&l, f, &registry);
                report.write_to(&out.join(slug(f)))?;
                if let Some(s) = &store {
                    s.save_report(&slug(f), &serde_json::to_value(&report)?)?;
                }
                println!(
                    "{f}: {}% ({}/{}); ungraded {}, missing {}",
                    report.overall.percent,
                    report.overall.correct,
                    report.overall.total,
                    report.ungraded.len(),
                    report.missing.len()
                );
                reports.push(report);
            }
            std::fs::write(out.join("comparison.csv"), comparison_csv(&reports))?;
        }
    }
    Ok(())
}

fn lora(cmd: LoraCmd) -> Result<()> {
    let LoraCmd::Verify { d, k, r, alpha, trials, seed, block_size } = cmd;
    let checks = verify(&VerifyConfig { d, k, r, alpha, trials, seed, block_size })?;
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        bail!("{failed} propert{} failed", if failed == 1 { "y" } else { "ies" });
    }
    Ok(())
}

fn serve(bind: SocketAddr, store: &Path, gate_wait: u64) -> Result<()> {
    let store = Store::open(store)?;
    let base = std::env::current_dir()?;
    let state = AppState::new(store)
        .with_launcher(Arc::new(SettingsLauncher::new(base)))
        .with_gate_wait(Duration::from_secs(gate_wait));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(femagent_store::serve(bind, state))?;
    Ok(())
}

//! `myzone`: validate and run simulation scenarios, compute metrics from
//! session logs and probe the guarded-registration model.
//!
//! Exit codes: 0 success, 2 invalid input (usage, parse or validation),
//! 3 I/O failure, 4 simulation or model failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use myzone_core::chord::guard::{probe_model, GuardParams};
use myzone_core::harness::generate::{generate, GeneratorParams};
use myzone_core::harness::metrics::{impact_ratio, success_ratio, Action, Grouping, TargetMeta};
use myzone_core::harness::report::{parse_sessions, read_summary};
use myzone_core::harness::scenario::Window;
use myzone_core::harness::{run, write_report, HarnessError, Scenario};

#[derive(Parser)]
#[command(name = "myzone", version, about = "Simulation harness for the myzone overlay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario file and list every problem found.
    Validate { scenario: PathBuf },
    /// Run a scenario and write its report directory.
    Run {
        scenario: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short, default_value = "report")]
        out: PathBuf,
    },
    /// Success and impact ratios of a session log.
    Metrics {
        /// A `sessions.jsonl` file.
        log: PathBuf,
        /// Scenario used for the impact tables.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        from_ms: Option<u64>,
        #[arg(long)]
        to_ms: Option<u64>,
        #[arg(long, value_enum)]
        action: Option<ActionArg>,
    },
    /// Compare the analytic guarded-registration model with Monte Carlo.
    ProbeModel {
        #[arg(long, short)]
        r: usize,
        #[arg(long, short)]
        m: usize,
        #[arg(long)]
        p_on: f64,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        max_n: usize,
    },
    /// Print a report directory's summary as tables.
    Report { dir: PathBuf },
    /// Write a generated scenario.
    Generate {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        edges: Option<usize>,
        #[arg(long)]
        days: Option<u64>,
        /// First day without the rendezvous server; 0 disables the takedown.
        #[arg(long)]
        takedown_day: Option<u64>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ActionArg {
    Update,
    Posting,
}

enum Failure {
    Input(String),
    Io(String),
    Runtime(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Invalid(_) | HarnessError::Parse(_) => Failure::Input(e.to_string()),
            HarnessError::Io(_) => Failure::Io(e.to_string()),
            HarnessError::Setup(_) | HarnessError::Guard(_) => Failure::Runtime(e.to_string()),
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn load_scenario(path: &Path) -> Result<Scenario, Failure> {
    Scenario::from_json(&read(path)?).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn fmt_ratio(r: Option<f64>) -> String {
    r.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Validate { scenario } => {
            let s = load_scenario(&scenario)?;
            let problems = s.validate();
            if !problems.is_empty() {
                for p in &problems {
                    eprintln!("{p}");
                }
                return Err(Failure::Input(format!("{} problem(s)", problems.len())));
            }
            println!("ok: {} users, {} edges", s.users.len(), s.edges.len());
        }
        Command::Run { scenario, seed, out } => {
            let mut s = load_scenario(&scenario)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let result = run(&s)?;
            let summary = write_report(&out, &s, &result)?;
            println!(
                "{} sessions, success {}, before takedown {}, during takedown {}, report in {}",
                summary.entries,
                fmt_ratio(summary.overall),
                fmt_ratio(summary.before_takedown),
                fmt_ratio(summary.during_takedown),
                out.display()
            );
        }
        Command::Metrics {
            log,
            scenario,
            from_ms,
            to_ms,
            action,
        } => {
            let entries = parse_sessions(&read(&log)?)?;
            let window = match (from_ms, to_ms) {
                (None, None) => None,
                (from, to) => Some(Window {
                    start_ms: from.unwrap_or(0),
                    end_ms: to.unwrap_or(u64::MAX),
                }),
            };
            let action = action.map(|a| match a {
                ActionArg::Update => Action::Update,
                ActionArg::Posting => Action::Posting,
            });
            let mut out = serde_json::json!({
                "entries": entries.len(),
                "success_ratio": success_ratio(&entries, window, action),
            });
            if let Some(path) = scenario {
                let s = load_scenario(&path)?;
                let meta: BTreeMap<String, TargetMeta> = s
                    .users
                    .iter()
                    .map(|u| {
                        (
                            u.name.clone(),
                            TargetMeta {
                                mirrors: u.mirrors.len() as u32,
                                devices: u.devices.len() as u32,
                                group: u.group.clone(),
                            },
                        )
                    })
                    .collect();
                out["impact"] = serde_json::json!({
                    "by_mirror_count": impact_ratio(&entries, Grouping::MirrorCount, &meta),
                    "by_rank": impact_ratio(&entries, Grouping::Rank, &meta),
                    "by_device_count": impact_ratio(&entries, Grouping::DeviceCount, &meta),
                });
            }
            println!("{}", serde_json::to_string_pretty(&out).expect("metrics serialise"));
        }
        Command::ProbeModel {
            r,
            m,
            p_on,
            trials,
            seed,
            max_n,
        } => {
            let params = GuardParams::new(r, m, p_on);
            let probe = probe_model(&params, trials, seed, max_n).map_err(|e| Failure::Input(e.to_string()))?;
            println!("{}", serde_json::to_string_pretty(&probe).expect("probe serialises"));
        }
        Command::Report { dir } => {
            let s = read_summary(&dir.join("summary.json"))?;
            println!("sessions {}  overall {}  update {}  posting {}", s.entries, fmt_ratio(s.overall), fmt_ratio(s.update), fmt_ratio(s.posting));
            println!("before takedown {}  during takedown {}", fmt_ratio(s.before_takedown), fmt_ratio(s.during_takedown));
            println!("relay bytes {}  detections {}", s.relay_bytes_total, s.detections);
            println!();
            println!("{:>5} {:>8} {:>8}", "day", "entries", "ratio");
            for d in &s.per_day {
                println!("{:>5} {:>8} {:>8}", d.day, d.entries, fmt_ratio(d.success_ratio));
            }
            println!();
            println!("{:<14} {:>6} {:>8} {:>8} {:>8} {:>8}", "group", "users", "entries", "overall", "before", "during");
            for (name, g) in s.groups.iter().chain(s.replica_classes.iter()) {
                println!(
                    "{:<14} {:>6} {:>8} {:>8} {:>8} {:>8}",
                    if name.is_empty() { "-" } else { name },
                    g.users,
                    g.entries,
                    fmt_ratio(g.overall),
                    fmt_ratio(g.before_takedown),
                    fmt_ratio(g.during_takedown)
                );
            }
        }
        Command::Generate {
            seed,
            users,
            edges,
            days,
            takedown_day,
            out,
        } => {
            let defaults = GeneratorParams::default();
            let p = GeneratorParams {
                seed,
                users: users.unwrap_or(defaults.users),
                edges: edges.unwrap_or(defaults.edges),
                days: days.unwrap_or(defaults.days),
                takedown_day: match takedown_day {
                    Some(0) => None,
                    Some(d) => Some(d),
                    None => defaults.takedown_day,
                },
                ..defaults
            };
            let text = generate(&p).to_json();
            match out {
                Some(path) => fs::write(&path, text + "\n").map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?,
                None => println!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Io(m)) => {
            eprintln!("io error: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("failed: {m}");
            ExitCode::from(4)
        }
    }
}

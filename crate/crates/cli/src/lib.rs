//! Command implementations behind the `boxchain` binary. [`run`] takes an
//! argument vector and returns what the process would print and its exit
//! code, so tests can drive every command in-process.

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use boxchain::boxchain::{hex, parse_box_dump};
use boxchain::fixture::{self, Replay};
use boxchain::ledger::DagLedger;
use boxchain::poset::{parse_edge_list, Poset};
use boxchain::rng::Streams;
use boxchain::sim::{fmt_g, run_attack_trials, run_scenario, AttackEstimate, AttackTrialConfig, RunMetrics};
use boxchain::stochastics::{
    attack_success_prob, boxdollar_value, expected_discounted_fees, min_tau_for_bound, panjer_compound_pmf,
    poisson_cdf, poisson_pmf, IntensityForm, IntensityFunction, IntensityPiece, SeverityPmf,
};

use config::{keys_help, parse_config, ConfigFile, Mode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_ALARM: i32 = 2;
pub const EXIT_FIXTURE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "boxchain", version, about = "Antichain-box DAG ledger simulator and calculators")]
#[command(after_help = "Rates are given per minute and converted to per second internally.\n\
Exit codes: 0 ok, 1 usage or config error, 2 integrity alarm, 3 fixture mismatch.")]
pub struct Cli {
    /// Run seed; overrides the config file's seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Also write results here (CSV for `simulate`)
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Scenario file in key = value form
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for attack trials; 0 uses every core. Results do not depend on it
    #[arg(long, global = true, default_value_t = 0)]
    pub parallel_trials: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario file, or replay a ledger dump through the box protocol
    #[command(after_help = keys_help())]
    Simulate {
        /// Ledger dump to replay instead of simulating
        #[arg(long)]
        replay: Option<PathBuf>,
        /// Box time limit for --replay
        #[arg(long, default_value_t = fixture::FIXTURE_TAU)]
        tau_sec: f64,
        /// Directory for ledger.dump and boxes.dump
        #[arg(long)]
        dump_dir: Option<PathBuf>,
    },
    /// Estimate the two-box domination probability by trials
    Attack {
        /// Honest arrival rate [default: 30, or the config's]
        #[arg(long)]
        lambda_per_min: Option<f64>,
        /// Box time limit [default: 10, or the config's]
        #[arg(long)]
        tau_sec: Option<f64>,
        /// Number of trials [default: 1000000, or the config's]
        #[arg(long)]
        trials: Option<u64>,
        /// Honest agents eligible as box-genesis [default: 10]
        #[arg(long)]
        honest_agents: Option<u64>,
        /// Attacker addresses eligible as box-genesis [default: 1]
        #[arg(long)]
        attacker_agents: Option<u64>,
    },
    /// Closed-form and numerical calculators
    Stoch {
        #[command(subcommand)]
        calc: StochCommand,
    },
    /// Replay the bundled twenty-transaction DAG and check its boxes
    Fixture {
        /// Print the redundant approvals
        #[arg(long)]
        show_redundant: bool,
        /// Print the ledger and box dumps
        #[arg(long)]
        dump: bool,
    },
    /// Split an edge-list file into Mirsky antichain layers
    Decompose {
        /// File of `edge <child> <parent>` lines
        file: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum StochCommand {
    /// Poisson count probability, homogeneous or over a window of a piecewise intensity
    Pmf {
        /// Poisson mean
        #[arg(long, conflicts_with = "intensity")]
        mu: Option<f64>,
        /// Count
        #[arg(long)]
        k: u64,
        /// Pieces `start:end:const:c` or `start:end:affine:a:b`, comma separated
        #[arg(long, requires = "to")]
        intensity: Option<String>,
        /// Window start
        #[arg(long, default_value_t = 0.0)]
        from: f64,
        /// Window end
        #[arg(long)]
        to: Option<f64>,
    },
    /// Probability that no honest transaction arrives while two boxes form
    Attack {
        #[arg(long)]
        lambda_per_min: f64,
        #[arg(long)]
        tau_sec: f64,
    },
    /// Smallest box time keeping the attack probability at or below a bound
    Mintau {
        #[arg(long)]
        lambda_per_min: f64,
        #[arg(long)]
        pmax: f64,
    },
    /// Compound Poisson pmf by recursion
    Panjer {
        #[arg(long)]
        lambda: f64,
        /// Severity law `v:p,v:p,...` on positive integers
        #[arg(long)]
        sev: String,
        #[arg(long)]
        kmax: usize,
    },
    /// Expected discounted fee income over a horizon
    Fees {
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        beta: f64,
        #[arg(long)]
        t: f64,
    },
    /// Token value under interest and depreciation
    Valuation {
        #[arg(long)]
        m0: f64,
        #[arg(long)]
        r: f64,
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
        #[arg(long)]
        t: f64,
    },
}

/// What a process would emit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Outcome {
    fn ok(stdout: String) -> Self {
        Self {
            code: EXIT_OK,
            stdout,
            stderr: String::new(),
        }
    }

    fn fail(code: i32, stderr: impl Into<String>) -> Self {
        let mut stderr = stderr.into();
        if !stderr.ends_with('\n') {
            stderr.push('\n');
        }
        Self {
            code,
            stdout: String::new(),
            stderr,
        }
    }
}

struct Failure(i32, String);

type CmdResult = Result<Outcome, Failure>;

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure(EXIT_USAGE, msg.to_string())
}

pub fn run<I, T>(args: I) -> Outcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => Outcome::ok(text),
                _ => Outcome::fail(EXIT_USAGE, text),
            };
        }
    };
    execute(&cli).unwrap_or_else(|Failure(code, msg)| Outcome::fail(code, msg))
}

fn execute(cli: &Cli) -> CmdResult {
    let outcome = match &cli.command {
        Command::Simulate {
            replay,
            tau_sec,
            dump_dir,
        } => match replay {
            Some(path) => cmd_replay(cli, path, *tau_sec, dump_dir.as_deref())?,
            None => cmd_simulate(cli, dump_dir.as_deref())?,
        },
        Command::Attack {
            lambda_per_min,
            tau_sec,
            trials,
            honest_agents,
            attacker_agents,
        } => {
            let file = cli.config.as_ref().map(|p| load_config(p)).transpose()?;
            let from_file = |f: fn(&ConfigFile) -> f64| file.as_ref().map(f);
            let cfg = AttackTrialConfig {
                lambda: lambda_per_min
                    .map(|l| l / 60.0)
                    .or(from_file(|c| c.honest_rate))
                    .unwrap_or(0.5),
                tau: tau_sec.or(from_file(|c| c.scenario.tau)).unwrap_or(10.0),
                trials: trials.or(file.as_ref().map(|c| c.trials)).unwrap_or(1_000_000),
                honest_agents: honest_agents
                    .or(file.as_ref().map(|c| c.honest_agents))
                    .unwrap_or(10),
                attacker_agents: attacker_agents
                    .or(file.as_ref().map(|c| c.malicious_agents))
                    .unwrap_or(1),
            };
            let seed = cli.seed.or(file.as_ref().map(|c| c.scenario.seed)).unwrap_or(1);
            let text = attack_report(&cfg, &attack_estimate(cli, &cfg, seed)?);
            write_output(cli, &text)?;
            Outcome::ok(text)
        }
        Command::Stoch { calc } => {
            let text = cmd_stoch(calc)?;
            write_output(cli, &text)?;
            Outcome::ok(text)
        }
        Command::Fixture { show_redundant, dump } => cmd_fixture(cli, *show_redundant, *dump)?,
        Command::Decompose { file } => {
            let text = cmd_decompose(file)?;
            write_output(cli, &text)?;
            Outcome::ok(text)
        }
    };
    Ok(outcome)
}

fn load_config(path: &Path) -> Result<ConfigFile, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn write_output(cli: &Cli, text: &str) -> Result<(), Failure> {
    if let Some(path) = &cli.output {
        fs::write(path, text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn attack_estimate(cli: &Cli, cfg: &AttackTrialConfig, seed: u64) -> Result<AttackEstimate, Failure> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.parallel_trials)
        .build()
        .map_err(usage)?;
    pool.install(|| run_attack_trials(cfg, &Streams::new(seed))).map_err(usage)
}

pub fn attack_report(cfg: &AttackTrialConfig, est: &AttackEstimate) -> String {
    let mut out = String::new();
    let lines: [(&str, String); 11] = [
        ("lambda_per_min", fmt_g(cfg.lambda * 60.0)),
        ("tau_sec", fmt_g(cfg.tau)),
        ("trials", est.trials.to_string()),
        ("successes", est.successes.to_string()),
        ("rate", fmt_g(est.rate)),
        ("ci99_low", fmt_g(est.ci_low)),
        ("ci99_high", fmt_g(est.ci_high)),
        ("closed_form", fmt_g(est.closed_form)),
        ("covers", est.covers(est.closed_form).to_string()),
        ("takeovers", est.takeovers.to_string()),
        ("takeover_rate", fmt_g(est.takeover_rate)),
    ];
    for (k, v) in lines {
        let _ = writeln!(out, "{k}={v}");
    }
    out
}

fn cmd_simulate(cli: &Cli, dump_dir: Option<&Path>) -> CmdResult {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| usage("simulate needs --config <file> or --replay <dump>"))?;
    let mut file = load_config(path)?;
    if let Some(seed) = cli.seed {
        file.scenario.seed = seed;
    }
    if file.mode == Mode::Attack {
        let cfg = AttackTrialConfig {
            lambda: file.honest_rate,
            tau: file.scenario.tau,
            trials: file.trials,
            honest_agents: file.honest_agents,
            attacker_agents: file.malicious_agents,
        };
        let text = attack_report(&cfg, &attack_estimate(cli, &cfg, file.scenario.seed)?);
        write_output(cli, &text)?;
        return Ok(Outcome::ok(text));
    }
    let run = run_scenario(&file.scenario).map_err(usage)?;
    if let Some(path) = &cli.output {
        write_file(path, &format!("{}\n{}\n", RunMetrics::CSV_HEADER, run.metrics.csv_row()))?;
    }
    if let Some(dir) = dump_dir {
        fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
        write_file(&dir.join("ledger.dump"), &run.ledger.to_dump())?;
        write_file(&dir.join("boxes.dump"), &run.chain.to_dump())?;
    }
    let report = run.metrics.report();
    Ok(match &run.metrics.alarm {
        Some(alarm) => Outcome {
            code: EXIT_ALARM,
            stdout: report,
            stderr: format!("integrity alarm: {alarm}\n"),
        },
        None => Outcome::ok(report),
    })
}

fn cmd_replay(cli: &Cli, path: &Path, tau: f64, dump_dir: Option<&Path>) -> CmdResult {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let tx_lines: String = text
        .lines()
        .filter(|l| l.trim_start().starts_with("tx "))
        .map(|l| format!("{l}\n"))
        .collect();
    let box_lines: String = text
        .lines()
        .filter(|l| l.trim_start().starts_with("box "))
        .map(|l| format!("{l}\n"))
        .collect();
    let ledger = DagLedger::from_dump(&tx_lines, 0).map_err(usage)?;
    let last = ledger.transactions().map(|t| t.issue_time).fold(0.0, f64::max);
    let replay = fixture::replay(&tx_lines, tau, last + tau, cli.seed.unwrap_or(1)).map_err(usage)?;
    let mut out = boxes_text(&replay);
    let boxes = replay.chain.to_dump();
    if !box_lines.is_empty() {
        let recorded = parse_box_dump(&box_lines).map_err(usage)?;
        let replayed = parse_box_dump(&boxes).map_err(usage)?;
        let same = recorded.len() == replayed.len()
            && recorded
                .iter()
                .zip(&replayed)
                .all(|(a, b)| a.index == b.index && a.members == b.members && a.boxer == b.boxer);
        let _ = writeln!(out, "boxes_match={same}");
    }
    let _ = writeln!(out, "chain_hash={}", hex(&replay.chain.head_hash()));
    if let Some(dir) = dump_dir {
        fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
        write_file(&dir.join("ledger.dump"), &replay.ledger.to_dump())?;
        write_file(&dir.join("boxes.dump"), &boxes)?;
    }
    write_output(cli, &out)?;
    Ok(Outcome::ok(out))
}

fn join_ids(ids: &[u64], sep: &str) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(sep)
}

fn boxes_text(replay: &Replay) -> String {
    let mut out = String::new();
    for (k, members) in replay.closed_boxes().iter().enumerate() {
        let _ = writeln!(out, "B{}={{{}}}", k + 1, join_ids(members, ","));
    }
    let _ = writeln!(out, "boxers={}", join_ids(&replay.boxers(), " "));
    out
}

fn cmd_fixture(cli: &Cli, show_redundant: bool, dump: bool) -> CmdResult {
    let replay = fixture::reference_replay(cli.seed.unwrap_or(1)).map_err(|e| Failure(EXIT_FIXTURE, e.to_string()))?;
    let mut out = boxes_text(&replay);
    let tips: Vec<u64> = replay.ledger.tips().iter().copied().collect();
    let _ = writeln!(out, "tips={}", join_ids(&tips, " "));
    let poset = replay.ledger.poset().map_err(|e| Failure(EXIT_FIXTURE, e.to_string()))?;
    let width = poset.width();
    let _ = writeln!(out, "width={}", width.size);
    let _ = writeln!(out, "height={}", poset.height());
    let redundant = replay.redundant().map_err(|e| Failure(EXIT_FIXTURE, e.to_string()))?;
    if show_redundant {
        let edges: Vec<String> = redundant.iter().map(|(c, p)| format!("({c},{p})")).collect();
        let _ = writeln!(out, "redundant={}", edges.join(" "));
    }
    if dump {
        out.push_str(&replay.ledger.to_dump());
        out.push_str(&replay.chain.to_dump());
    }

    let expected: Vec<Vec<u64>> = fixture::EXPECTED_BOXES.iter().map(|b| b.to_vec()).collect();
    let mut problems = Vec::new();
    if replay.closed_boxes() != expected {
        problems.push("box membership differs");
    }
    if replay.boxers() != fixture::EXPECTED_BOXERS {
        problems.push("boxers differ");
    }
    if tips != fixture::EXPECTED_TIPS {
        problems.push("tips differ");
    }
    if redundant.into_iter().collect::<Vec<_>>() != fixture::EXPECTED_REDUNDANT {
        problems.push("redundant approvals differ");
    }
    if width.size != fixture::EXPECTED_WIDTH || poset.height() != fixture::EXPECTED_HEIGHT {
        problems.push("width or height differs");
    }
    write_output(cli, &out)?;
    if problems.is_empty() {
        Ok(Outcome::ok(out))
    } else {
        Ok(Outcome {
            code: EXIT_FIXTURE,
            stdout: out,
            stderr: format!("fixture mismatch: {}\n", problems.join(", ")),
        })
    }
}

fn cmd_decompose(path: &Path) -> Result<String, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let edges = parse_edge_list(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let poset = Poset::from_edges(&edges).map_err(usage)?;
    Ok(poset.mirsky_decompose().to_text())
}

/// Parses `start:end:const:c` / `start:end:affine:a:b` pieces.
pub fn parse_intensity(text: &str) -> Result<IntensityFunction, String> {
    let mut pieces = Vec::new();
    for part in text.split(',') {
        let f: Vec<&str> = part.trim().split(':').collect();
        let num = |s: &str| s.parse::<f64>().map_err(|_| format!("bad number {s:?} in {part:?}"));
        let form = match f.as_slice() {
            [_, _, "const", c] => IntensityForm::Constant(num(c)?),
            [_, _, "affine", a, b] => IntensityForm::Affine {
                intercept: num(a)?,
                slope: num(b)?,
            },
            _ => return Err(format!("bad intensity piece {part:?}")),
        };
        pieces.push(IntensityPiece {
            start: num(f[0])?,
            end: num(f[1])?,
            form,
        });
    }
    IntensityFunction::new(pieces).map_err(|e| e.to_string())
}

fn cmd_stoch(calc: &StochCommand) -> Result<String, Failure> {
    let mut out = String::new();
    let mut line = |k: &str, v: f64| {
        let _ = writeln!(out, "{k}={}", fmt_g(v));
    };
    match calc {
        StochCommand::Pmf {
            mu,
            k,
            intensity,
            from,
            to,
        } => {
            let mean = match (mu, intensity) {
                (Some(mu), None) => *mu,
                (None, Some(spec)) => {
                    let f = parse_intensity(spec).map_err(usage)?;
                    f.integral(*from, to.expect("clap requires --to")).map_err(usage)?
                }
                _ => return Err(usage("pmf needs --mu or --intensity with --to")),
            };
            line("mean", mean);
            line("pmf", poisson_pmf(mean, *k).map_err(usage)?);
            line("cdf", poisson_cdf(mean, *k).map_err(usage)?);
        }
        StochCommand::Attack { lambda_per_min, tau_sec } => {
            line("p_attack", attack_success_prob(lambda_per_min / 60.0, *tau_sec).map_err(usage)?);
        }
        StochCommand::Mintau { lambda_per_min, pmax } => {
            let tau = min_tau_for_bound(lambda_per_min / 60.0, *pmax).map_err(usage)?;
            line("tau_sec", tau);
            line("tau_min", tau / 60.0);
        }
        StochCommand::Panjer { lambda, sev, kmax } => {
            let severity = SeverityPmf::parse(sev).map_err(usage)?;
            let pmf = panjer_compound_pmf(*lambda, &severity, *kmax).map_err(usage)?;
            for (k, v) in pmf.values.iter().enumerate() {
                line(&format!("f{k}"), *v);
            }
            line("mass", pmf.total());
            line("mean", pmf.mean());
        }
        StochCommand::Fees { lambda, beta, t } => {
            line("expected_fees", expected_discounted_fees(*lambda, *beta, *t).map_err(usage)?);
        }
        StochCommand::Valuation { m0, r, delta, t } => {
            line("value", boxdollar_value(*m0, *r, *delta, *t));
        }
    }
    Ok(out)
}

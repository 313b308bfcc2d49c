//! Command-line front end: run scenarios, emit traces and cost reports,
//! compare measured costs with the analytic formulas, and drive the
//! fuzz/probe campaigns.

mod report;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gkm_core::rekey::CipherKind;
use gkm_core::simnet::{
    generate_scenario, run_scenario, trace_to_string, FuzzParams, RunOptions, Scenario,
};
use gkm_core::Error;
use report::CostReport;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "gkm",
    about = "Group key management simulator: MDS-coded rekeying over weight-balanced 2-3 key trees",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    /// Human-readable cost report.
    Text,
    /// Line-delimited trace records.
    Records,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a scenario and report measured versus analytic costs.
    Run(RunArgs),
    /// Random churn campaigns with balance, agreement, and secrecy probes.
    Fuzz(FuzzArgs),
    /// Rebuild the cost ledger from a previously written trace.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file (line-delimited records), or the built-in `walkthrough`
    /// sixteen-member walkthrough.
    #[arg(long, default_value = "walkthrough")]
    scenario: String,
    /// Override the scenario's randomness seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the scenario's field width.
    #[arg(long, value_parser = ["4", "8", "16"])]
    field_bits: Option<String>,
    /// Write the trace to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// What to print on stdout.
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct FuzzArgs {
    /// Total membership events across the campaign.
    #[arg(long, default_value_t = 10_000)]
    iterations: u64,
    /// First scenario seed; shards use consecutive seeds.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Field width for every shard.
    #[arg(long, value_parser = ["4", "8", "16"], default_value = "8")]
    field_bits: String,
    /// Subgroups per shard.
    #[arg(long, default_value_t = 4)]
    subgroups: u32,
    /// Initial members per subgroup.
    #[arg(long, default_value_t = 12)]
    members: u32,
    /// Events per shard before a fresh scenario starts.
    #[arg(long, default_value_t = 2_000)]
    shard: u64,
    /// Negative control: run with the deliberately broken cipher and
    /// expect the forward-secrecy probe to light up.
    #[arg(long, default_value_t = false)]
    broken_cipher: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Trace file written by `run --out`.
    #[arg(long)]
    trace: PathBuf,
    /// What to print on stdout.
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Fuzz(args) => cmd_fuzz(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::ParseError { .. } | Error::ConfigError(_) | Error::MembershipError(_) => {
                    ExitCode::from(2)
                }
                _ => ExitCode::from(1),
            }
        }
    }
}

fn load_scenario(args: &RunArgs) -> Result<Scenario, Error> {
    let mut scenario = if args.scenario == "walkthrough" {
        Scenario::walkthrough()
    } else {
        let text = std::fs::read_to_string(&args.scenario)
            .map_err(|e| Error::ConfigError(format!("cannot read {}: {e}", args.scenario)))?;
        Scenario::from_jsonl(&text)?
    };
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    if let Some(bits) = &args.field_bits {
        scenario.field_bits = bits.parse().unwrap();
    }
    Ok(scenario)
}

fn cmd_run(args: RunArgs) -> Result<ExitCode, Error> {
    let scenario = load_scenario(&args)?;
    let opts = RunOptions::default();
    let sim = run_scenario(&scenario, &opts)?;
    let trace_text = trace_to_string(&sim.trace);
    if let Some(out) = &args.out {
        std::fs::write(out, &trace_text)
            .map_err(|e| Error::ConfigError(format!("cannot write {}: {e}", out.display())))?;
    }
    match args.format {
        Format::Records => print!("{trace_text}"),
        Format::Text => {
            let report = CostReport::from_trace(&sim.trace)?;
            print!("{}", report::render_text(&report, &sim.trace));
            println!(
                "secrecy probes: sealed opens fwd {} bwd {}, stale-decode rate {:.4}, \
                 conspiracy rate {:.4}, symbolic breaches {}",
                sim.probes.fs_opens,
                sim.probes.bw_opens,
                sim.probes.fs_decode_rate(),
                sim.probes.conspiracy_rate(),
                sim.probes.symbolic_breaches
            );
            if !report.all_ok() {
                println!("RESULT: FAIL");
                return Ok(ExitCode::from(1));
            }
            println!("RESULT: PASS");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_fuzz(args: FuzzArgs) -> Result<ExitCode, Error> {
    let field_bits: u8 = args.field_bits.parse().unwrap();
    let cipher = if args.broken_cipher {
        CipherKind::BrokenNullKey
    } else {
        CipherKind::StreamMac
    };
    let mut remaining = args.iterations;
    let mut seed = args.seed;
    let mut totals = gkm_core::simnet::ProbeStats::default();
    let mut events_run = 0u64;
    let mut rebuilds = 0u64;
    let mut first_failure: Option<(u64, String)> = None;

    while remaining > 0 {
        let shard_events = remaining.min(args.shard.max(1)) as u32;
        let params = FuzzParams {
            subgroups: args.subgroups,
            initial_per_subgroup: args.members,
            events: shard_events,
            field_bits,
            max_batch: 6,
            cipher,
        };
        let scenario = generate_scenario(seed, &params);
        let opts = RunOptions {
            keep_trace: false,
            observe: true,
            // The broken-cipher control intentionally violates secrecy;
            // invariant checks would abort before the probes could report.
            check_invariants: !args.broken_cipher,
            probe_budget: 8,
        };
        match run_scenario(&scenario, &opts) {
            Ok(sim) => {
                accumulate(&mut totals, &sim.probes);
                rebuilds += sim.rebuilds;
                events_run += sim.ledger.events.len() as u64;
            }
            Err(e) => {
                first_failure = Some((seed, e.to_string()));
                break;
            }
        }
        remaining -= shard_events as u64;
        seed += 1;
    }

    let fs_rate = rate(totals.fs_decode_hits, totals.fs_decode_attempts);
    let conspiracy_rate = rate(totals.conspiracy_hits, totals.conspiracy_attempts);
    println!("fuzz campaign: {events_run} events, seeds {}..{}", args.seed, seed);
    println!("  balance/agreement/storage checks: per event, zero tolerance");
    println!(
        "  forward secrecy: {} sealed opens / {} attempts",
        totals.fs_opens, totals.fs_open_attempts
    );
    println!(
        "  stale-seed decode: {}/{} = {:.4} (chance 2^-{field_bits})",
        totals.fs_decode_hits, totals.fs_decode_attempts, fs_rate
    );
    println!(
        "  conspiracy (5 pooled seeds): {}/{} = {:.4}",
        totals.conspiracy_hits, totals.conspiracy_attempts, conspiracy_rate
    );
    println!(
        "  backward secrecy: {} sealed opens / {} attempts; decode rate {:.4}",
        totals.bw_opens,
        totals.bw_open_attempts,
        rate(totals.bw_decode_hits, totals.bw_decode_attempts)
    );
    println!("  symbolic breaches: {}", totals.symbolic_breaches);
    println!("  structural repair fallbacks: {rebuilds}");

    if args.broken_cipher {
        if totals.fs_opens > 0 {
            println!("RESULT: PASS (negative control detected the broken cipher)");
            return Ok(ExitCode::SUCCESS);
        }
        println!("RESULT: FAIL (broken cipher went undetected)");
        return Ok(ExitCode::from(1));
    }
    if let Some((seed, msg)) = first_failure {
        println!("RESULT: FAIL at seed {seed}: {msg}");
        println!("reproduce with: gkm fuzz --seed {seed} --iterations {}", args.shard);
        return Ok(ExitCode::from(1));
    }
    let limit = (2.0 * 2f64.powi(-(field_bits as i32))).max(0.01);
    let secure = totals.fs_opens == 0
        && totals.bw_opens == 0
        && totals.symbolic_breaches == 0
        && fs_rate <= limit
        && conspiracy_rate <= limit;
    if secure {
        println!("RESULT: PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("RESULT: FAIL (probe rates above tolerance)");
        Ok(ExitCode::from(1))
    }
}

fn rate(hits: u64, attempts: u64) -> f64 {
    if attempts == 0 {
        0.0
    } else {
        hits as f64 / attempts as f64
    }
}

fn accumulate(t: &mut gkm_core::simnet::ProbeStats, s: &gkm_core::simnet::ProbeStats) {
    t.fs_open_attempts += s.fs_open_attempts;
    t.fs_opens += s.fs_opens;
    t.fs_decode_attempts += s.fs_decode_attempts;
    t.fs_decode_hits += s.fs_decode_hits;
    t.bw_open_attempts += s.bw_open_attempts;
    t.bw_opens += s.bw_opens;
    t.bw_decode_attempts += s.bw_decode_attempts;
    t.bw_decode_hits += s.bw_decode_hits;
    t.conspiracy_attempts += s.conspiracy_attempts;
    t.conspiracy_hits += s.conspiracy_hits;
    t.symbolic_breaches += s.symbolic_breaches;
}

fn cmd_report(args: ReportArgs) -> Result<ExitCode, Error> {
    let text = std::fs::read_to_string(&args.trace)
        .map_err(|e| Error::ConfigError(format!("cannot read {}: {e}", args.trace.display())))?;
    let lines = report::parse_trace_file(&text)?;
    report::validate_trace(&lines)?;
    let report = CostReport::from_trace(&lines)?;
    match args.format {
        Format::Records => print!("{}", trace_to_string(&lines)),
        Format::Text => {
            print!("{}", report::render_text(&report, &lines));
            if !report.all_ok() {
                println!("RESULT: FAIL");
                return Ok(ExitCode::from(1));
            }
            println!("RESULT: PASS");
        }
    }
    Ok(ExitCode::SUCCESS)
}

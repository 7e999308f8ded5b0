//! Command-line front end: generate state pairs, compile discrimination
//! protocols, verify them exactly, and sample shot runs.
//!
//! Exit status: 0 success, 1 a verification verdict failed, 2 the arguments
//! or input files were unusable.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use usd_core::canonical::{canonicalize, form_to_json};
use usd_core::protocols::{
    compile, read_protocol_file, validate_protocol, write_protocol_file, Node, ProtocolTree,
};
use usd_core::simulate::{
    check_optimality, counts_to_json, evaluate_exact, report_to_json, run_shots, EvaluationReport,
};
use usd_core::statespace::{
    inner_product, random_pair, read_pair_file, write_pair_file, PartySpace, PureState,
};
use usd_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "usd",
    version,
    about = "Conclusive two-state discrimination protocols"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a random state pair with a prescribed overlap and write it out
    Random(RandomArgs),
    /// Build a protocol for a state-pair file and write it out
    Compile(CompileArgs),
    /// Check a protocol against a state pair exactly
    Verify(VerifyArgs),
    /// Sample protocol runs and compare frequencies with exact probabilities
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct RandomArgs {
    /// Party dimensions, comma separated, e.g. 2,2
    #[arg(long, required = true, value_delimiter = ',')]
    dims: Vec<usize>,
    /// Magnitude of the inner product between the two states, in [0, 1]
    #[arg(long)]
    overlap: f64,
    /// Generator seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output state-pair file
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompileArgs {
    /// Input state-pair file
    #[arg(short, long)]
    input: PathBuf,
    /// Output protocol file
    #[arg(short, long)]
    out: PathBuf,
    /// Also write the aligned form of the pair to this path
    #[arg(long)]
    dump_canonical: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// State-pair file the protocol is checked against
    #[arg(long)]
    states: PathBuf,
    /// Protocol file to check
    #[arg(long)]
    protocol: PathBuf,
    /// Largest acceptable distance from the conclusive-probability bound
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    /// Write the verification report as JSON to this path
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// State-pair file naming the two hypotheses
    #[arg(long)]
    states: PathBuf,
    /// Protocol file to run
    #[arg(long)]
    protocol: PathBuf,
    /// Which of the two states is prepared
    #[arg(long, value_enum)]
    hypothesis: Hypothesis,
    /// Number of independent runs
    #[arg(long, default_value_t = 100_000, value_parser = clap::value_parser!(u64).range(1..))]
    shots: u64,
    /// Base seed; run k draws from a stream keyed by (seed, k)
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the counts report as JSON to this path
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, PartialEq)]
enum Hypothesis {
    Phi,
    Psi,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Random(args) => cmd_random(args),
        Command::Compile(args) => cmd_compile(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Simulate(args) => cmd_simulate(args),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}

/// Construction and verdict failures exit 1; unusable arguments or files
/// exit 2, like the usage errors clap itself reports.
fn exit_code_for(err: &Error) -> ExitCode {
    match err {
        Error::Validation(_)
        | Error::NoConvergence { .. }
        | Error::ThetaInfeasible { .. }
        | Error::SignPrecondition { .. }
        | Error::NoPositiveOverlap(_) => ExitCode::from(1),
        _ => ExitCode::from(2),
    }
}

/// Pretty JSON with sorted keys and a trailing newline, the same shape the
/// state-pair and protocol writers use.
fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn root_branch_count(tree: &ProtocolTree) -> usize {
    match &tree.root {
        Node::Measure(m) => m.branches.len(),
        Node::Leaf(_) => 0,
    }
}

fn cmd_random(args: RandomArgs) -> Result<bool> {
    let space = PartySpace::new(args.dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (phi, psi) = random_pair(&space, args.overlap, &mut rng)?;
    write_pair_file(&args.out, &phi, &psi)?;
    let achieved = inner_product(&phi, &psi)?.norm();
    println!(
        "wrote {}: dims {:?}, overlap {:.12}",
        args.out.display(),
        space.dims(),
        achieved
    );
    Ok(true)
}

fn cmd_compile(args: CompileArgs) -> Result<bool> {
    let (phi, psi) = read_pair_file(&args.input)?;
    let tree = compile(&phi, &psi)?;
    let dump = match &args.dump_canonical {
        Some(_) => Some(form_to_json(&canonicalize(&phi, &psi, 0)?)),
        None => None,
    };
    write_protocol_file(&args.out, &tree)?;
    if let (Some(path), Some(value)) = (&args.dump_canonical, dump) {
        write_json(path, &value)?;
    }
    let report = evaluate_exact(&tree, &phi, &psi)?;
    println!(
        "wrote {}: {} root branches, mean conclusive {:.12} of bound {:.12}",
        args.out.display(),
        root_branch_count(&tree),
        report.mean_conclusive(),
        report.bound
    );
    Ok(true)
}

fn print_probability_table(report: &EvaluationReport) {
    println!("{:<14}{:>16}{:>16}", "outcome", "phi", "psi");
    let rows = [
        ("conclusive", report.conclusive_phi, report.conclusive_psi),
        ("misidentify", report.error_phi, report.error_psi),
        (
            "inconclusive",
            report.inconclusive_phi,
            report.inconclusive_psi,
        ),
    ];
    for (label, p, q) in rows {
        println!("{label:<14}{p:>16.12}{q:>16.12}");
    }
}

fn cmd_verify(args: VerifyArgs) -> Result<bool> {
    let (phi, psi) = read_pair_file(&args.states)?;
    let tree = read_protocol_file(&args.protocol)?;
    let validation = validate_protocol(&tree);
    let report = evaluate_exact(&tree, &phi, &psi)?;
    let check = check_optimality(&report, args.tol);
    let pass = validation.pass() && check.pass;

    let overlap = inner_product(&phi, &psi)?.norm();
    println!(
        "states {}: dims {:?}, overlap {:.12}",
        args.states.display(),
        phi.space().dims(),
        overlap
    );
    println!(
        "protocol {}: {} nodes, structure {}",
        args.protocol.display(),
        validation.nodes.len(),
        if validation.pass() { "pass" } else { "FAIL" }
    );
    if let Some(reason) = validation.first_failure() {
        println!("  first failure: {reason}");
    }
    print_probability_table(&report);
    println!(
        "mean conclusive {:.12} of bound {:.12}, residual {:.3e}",
        report.mean_conclusive(),
        report.bound,
        check.optimality_residual
    );
    println!("worst misidentification {:.3e}", check.max_error);
    println!(
        "verdict: {} (tolerance {:.1e})",
        if pass { "pass" } else { "FAIL" },
        args.tol
    );

    if let Some(path) = &args.report {
        let value = json!({
            "evaluation": report_to_json(&report),
            "optimality": {
                "max_error": check.max_error,
                "pass": check.pass,
                "residual": check.optimality_residual,
                "tolerance": check.tolerance,
            },
            "pass": pass,
            "validation": {
                "first_failure": validation.first_failure(),
                "nodes": validation.nodes.len(),
                "pass": validation.pass(),
            },
        });
        write_json(path, &value)?;
    }
    Ok(pass)
}

fn cmd_simulate(args: SimulateArgs) -> Result<bool> {
    let (phi, psi) = read_pair_file(&args.states)?;
    let tree = read_protocol_file(&args.protocol)?;
    let report = evaluate_exact(&tree, &phi, &psi)?;
    let prepared: &PureState = match args.hypothesis {
        Hypothesis::Phi => &phi,
        Hypothesis::Psi => &psi,
    };
    let counts = run_shots(&tree, prepared, args.shots, args.seed)?;

    // Exact outcome probabilities under the prepared hypothesis. The
    // conclusive mass sits on the correct verdict; the opposite verdict
    // carries the misidentification probability.
    let (p_phi, p_psi, p_inc) = match args.hypothesis {
        Hypothesis::Phi => (
            report.conclusive_phi,
            report.error_phi,
            report.inconclusive_phi,
        ),
        Hypothesis::Psi => (
            report.error_psi,
            report.conclusive_psi,
            report.inconclusive_psi,
        ),
    };
    let rows = [
        ("identify_phi", counts.identify_phi, p_phi),
        ("identify_psi", counts.identify_psi, p_psi),
        ("inconclusive", counts.inconclusive, p_inc),
    ];
    let shots = args.shots as f64;
    let hypothesis = match args.hypothesis {
        Hypothesis::Phi => "phi",
        Hypothesis::Psi => "psi",
    };

    println!(
        "hypothesis {hypothesis}, {} shots, seed {}",
        args.shots, args.seed
    );
    println!(
        "{:<14}{:>10}{:>14}{:>14}{:>12}{:>12}",
        "outcome", "count", "frequency", "exact", "|diff|", "allowed"
    );
    let mut pass = counts.aborted == 0;
    let mut band = Vec::new();
    for (label, count, exact) in rows {
        let frequency = count as f64 / shots;
        // Five-sigma binomial band plus one-count slack, so a single run
        // cannot trip the verdict on a probability near zero or one.
        let sigma = (exact * (1.0 - exact) / shots).sqrt();
        let allowed = 5.0 * sigma + 1.0 / shots;
        let diff = (frequency - exact).abs();
        pass &= diff <= allowed;
        println!(
            "{label:<14}{count:>10}{frequency:>14.9}{exact:>14.9}{diff:>12.3e}{allowed:>12.3e}"
        );
        band.push(json!({
            "allowed": allowed,
            "count": count,
            "exact": exact,
            "frequency": frequency,
            "outcome": label,
        }));
    }
    println!("aborted {:>16}", counts.aborted);
    println!("verdict: {}", if pass { "pass" } else { "FAIL" });

    if let Some(path) = &args.report {
        let value = json!({
            "band": band,
            "counts": counts_to_json(&counts),
            "hypothesis": hypothesis,
            "pass": pass,
        });
        write_json(path, &value)?;
    }
    Ok(pass)
}

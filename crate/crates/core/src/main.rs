//! Batch front end: obfuscate, detect, deobfuscate, compare, iocheck,
//! dot. Exit codes: 0 success, 1 analysis error, 2 usage error.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use deoblab::cff_deob::{deobfuscate_program, DeobOptions};
use deoblab::detect::detect_obfuscations;
use deoblab::ir::{build_cfg, emit_dot, parse_program, serialize_program, Program};
use deoblab::metrics::{cfg_similarity, euclidean_distance, io_equivalence, IoProtocol};
use deoblab::obf::{obfuscate, ObfConfig, Pass};

/// Documented default for every seed the tool takes.
const DEFAULT_SEED: u64 = 0xD1A0A;

#[derive(Parser)]
#[command(name = "deoblab", version, about = "Obfuscation laboratory for a mini ARM-flavored ISA")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Apply obfuscation passes and optionally dump ground truth.
    Obfuscate(ObfuscateArgs),
    /// Fingerprint which obfuscations are present (JSON).
    Detect { input: PathBuf },
    /// Run the recovery pipeline.
    Deobfuscate(DeobfuscateArgs),
    /// Score two programs against each other.
    Compare(CompareArgs),
    /// Input/output equivalence over the fixed protocol.
    Iocheck(IocheckArgs),
    /// Emit the control-flow graphs as Graphviz DOT.
    Dot {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Args)]
struct ObfuscateArgs {
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    /// Comma-separated subset of inssub,bcf,cff.
    #[arg(long, value_delimiter = ',', required = true)]
    passes: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    bcf_prob: u32,
    #[arg(long, default_value_t = 1)]
    bcf_loop: u32,
    #[arg(long, default_value_t = 0)]
    split_num: u32,
    /// Write the ground truth as JSON.
    #[arg(long)]
    ground_truth: Option<PathBuf>,
}

#[derive(Args)]
struct DeobfuscateArgs {
    input: PathBuf,
    /// Rewritten assembly (instruction substitution and bogus control
    /// flow undone; flattened functions keep their flattened bodies).
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Recovered control-flow graphs as DOT.
    #[arg(long)]
    cfg: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    saved_states: usize,
    /// Per-stage JSON report.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Sim,
    Euclid,
}

#[derive(Args)]
struct CompareArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long, value_enum)]
    metric: Metric,
}

#[derive(Args)]
struct IocheckArgs {
    a: PathBuf,
    b: PathBuf,
    /// Function to compare; defaults to the single shared function.
    #[arg(long = "fn")]
    fn_name: Option<String>,
    #[arg(long, default_value_t = 1500)]
    n: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

fn load(path: &PathBuf) -> deoblab::Result<Program> {
    parse_program(&std::fs::read_to_string(path)?)
}

/// Prints without panicking when the consumer closes the pipe early.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().write_all(text.as_bytes());
}

fn parse_passes(names: &[String]) -> Result<BTreeSet<Pass>, String> {
    let mut passes = BTreeSet::new();
    for name in names {
        match name.trim().to_ascii_lowercase().as_str() {
            "inssub" => passes.insert(Pass::InsSub),
            "bcf" => passes.insert(Pass::Bcf),
            "cff" => passes.insert(Pass::Cff),
            other => return Err(format!("unknown pass `{other}` (expected inssub, bcf, cff)")),
        };
    }
    Ok(passes)
}

fn run(cli: Cli) -> deoblab::Result<()> {
    match cli.verb {
        Verb::Obfuscate(args) => {
            let program = load(&args.input)?;
            let passes = match parse_passes(&args.passes) {
                Ok(p) => p,
                Err(msg) => {
                    eprintln!("error: {msg}");
                    std::process::exit(2);
                }
            };
            let cfg = ObfConfig {
                passes,
                seed: args.seed,
                bcf_prob: args.bcf_prob,
                bcf_loop: args.bcf_loop,
                split_num: args.split_num,
            };
            let (out, truth) = obfuscate(&program, &cfg)?;
            std::fs::write(&args.output, serialize_program(&out))?;
            if let Some(path) = args.ground_truth {
                std::fs::write(path, serde_json::to_string_pretty(&truth.to_spec_json())?)?;
            }
        }
        Verb::Detect { input } => {
            let program = load(&input)?;
            let mut reports = Vec::new();
            for name in &program.order {
                reports.push(detect_obfuscations(&program.functions[name])?);
            }
            println!("{}", serde_json::to_string_pretty(&reports)?);
        }
        Verb::Deobfuscate(args) => {
            let program = load(&args.input)?;
            let opts = DeobOptions {
                saved_states: args.saved_states,
                ..DeobOptions::default()
            };
            let (rewritten, results) = deobfuscate_program(&program, &opts)?;
            if let Some(path) = &args.output {
                std::fs::write(path, serialize_program(&rewritten))?;
            }
            if let Some(path) = &args.cfg {
                let mut dot = String::new();
                for name in &program.order {
                    let deob = &results[name];
                    let g = match &deob.reconstructed {
                        Some(g) => g.clone(),
                        None => build_cfg(&deob.rewritten),
                    };
                    dot.push_str(&format!("// function {name}\n"));
                    dot.push_str(&emit_dot(&g));
                }
                std::fs::write(path, dot)?;
            }
            // Recovered pseudo-assembly listing for flattened functions.
            let mut listing = String::new();
            for name in &program.order {
                let deob = &results[name];
                if let Some(g) = &deob.reconstructed {
                    listing.push_str(&format!("; recovered control flow of {name}\n"));
                    for node in &g.nodes {
                        listing.push_str(&format!("{}:\n", node.label));
                        for ins in &node.instructions {
                            listing.push_str(&format!("    {}\n", ins.render()));
                        }
                    }
                    listing.push('\n');
                }
            }
            emit(&listing);
            let reports: Vec<_> = program.order.iter().map(|n| &results[n].report).collect();
            let json = serde_json::to_string_pretty(&reports)?;
            match &args.report {
                Some(path) => std::fs::write(path, json)?,
                None => emit(&format!("{json}\n")),
            }
        }
        Verb::Compare(args) => {
            let pa = load(&args.a)?;
            let pb = load(&args.b)?;
            let mut entries = Vec::new();
            let mut total = 0.0;
            let mut count = 0usize;
            for name in &pa.order {
                let Some(fb) = pb.functions.get(name) else { continue };
                let fa = &pa.functions[name];
                let entry = match args.metric {
                    Metric::Euclid => {
                        let d = euclidean_distance(fa, fb);
                        total += d;
                        serde_json::json!({ "function": name, "metric": "euclid", "value": d })
                    }
                    Metric::Sim => {
                        let rep = cfg_similarity(&build_cfg(fa), &build_cfg(fb))?;
                        total += rep.sim;
                        serde_json::json!({
                            "function": name,
                            "metric": "sim",
                            "value": rep.sim,
                            "sigma": rep.sigma,
                            "nodes": [rep.n1, rep.n2],
                            "edges": [rep.e1, rep.e2],
                            "mapping": rep.mapping,
                        })
                    }
                };
                entries.push(entry);
                count += 1;
            }
            if count == 0 {
                eprintln!("error: the programs share no function names");
                std::process::exit(1);
            }
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({
                    "value": total / count as f64,
                    "functions": entries,
                }))?
            );
        }
        Verb::Iocheck(args) => {
            let pa = load(&args.a)?;
            let pb = load(&args.b)?;
            let fn_name = match args.fn_name {
                Some(name) => name,
                None => {
                    let shared: Vec<&String> = pa
                        .order
                        .iter()
                        .filter(|n| pb.functions.contains_key(*n))
                        .collect();
                    match shared.as_slice() {
                        [one] => (*one).clone(),
                        _ => {
                            eprintln!("error: pass --fn (programs share {} functions)", shared.len());
                            std::process::exit(2);
                        }
                    }
                }
            };
            let proto = IoProtocol::with_total(args.n, args.seed);
            let pct = io_equivalence(&pa, &fn_name, &pb, &fn_name, &proto)?;
            println!("{pct:.1}");
        }
        Verb::Dot { input, output } => {
            let program = load(&input)?;
            let mut dot = String::new();
            for name in &program.order {
                dot.push_str(&format!("// function {name}\n"));
                dot.push_str(&emit_dot(&build_cfg(&program.functions[name])));
            }
            std::fs::write(output, dot)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

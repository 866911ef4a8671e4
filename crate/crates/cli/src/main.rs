use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use noma_core::seqdesign::{self, GenerateOptions, PiKind, SignatureFile};
use noma_core::sim::{self, ExperimentConfig, ResultSet, RunOptions, Scenario, SimError};

#[derive(Parser)]
#[command(name = "noma", version, about = "Uplink NOMA link-level simulator")]
struct Cli {
    /// Repeat for more log output (info, debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or verify) a signature set and print its correlation report.
    Seq(SeqArgs),
    /// BLER sweep for NOMA or MU-MIMO.
    #[command(after_help = keys_help(&["scenario", "sim.", "frame.", "noma.", "mimo.", "link."]))]
    Bler(RunArgs),
    /// HARQ protocol experiment.
    #[command(after_help = keys_help(&["sim.trials", "sim.seed", "sim.batch", "harq.", "frame.", "noma.", "link.modulation", "link.tbs_bytes", "link.code."]))]
    Harq(RunArgs),
    /// Rate-based pairing workflow.
    #[command(after_help = keys_help(&["sim.trials", "sim.seed", "pairing."]))]
    Pair(RunArgs),
    /// Merge result files into one table aligned by SNR.
    Report(ReportArgs),
}

#[derive(Args)]
struct SeqArgs {
    /// Number of users K.
    #[arg(long, default_value_t = 6)]
    k: usize,
    /// Spread length L.
    #[arg(long, default_value_t = 4)]
    l: usize,
    /// Performance indicator: tsc, coherence or chordal.
    #[arg(long, default_value = "tsc")]
    pi: PiKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = seqdesign::DEFAULT_ITERS)]
    iters: usize,
    /// Signature JSON to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report on an existing signature file instead of generating.
    #[arg(long, conflicts_with = "out")]
    verify: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output stem; writes <OUT>.json and, for sweeps, <OUT>.csv.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Dotted-key overrides, e.g. sim.trials=10.
    #[arg(long = "overrides", value_name = "KEY=VALUE", num_args = 1.., action = clap::ArgAction::Append)]
    overrides: Vec<String>,
    /// Replaces sim.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core). Results do not depend on it.
    #[arg(long, env = "NOMA_WORKERS", default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Result JSON files.
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Also write the merged table as CSV.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

fn keys_help(prefixes: &[&str]) -> String {
    let keys: Vec<String> = sim::config_keys()
        .into_iter()
        .filter(|k| prefixes.iter().any(|p| k == p || (p.ends_with('.') && k.starts_with(p)) || k.starts_with(&format!("{p}."))))
        .collect();
    format!("Config keys (file or --overrides):\n  {}", keys.join("\n  "))
}

/// Exit 2 for bad input, 1 for failures while running.
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Seq(a) => seq(a),
        Command::Bler(a) => run(a, &[Scenario::BlerNoma, Scenario::BlerMuMimo]),
        Command::Harq(a) => run(a, &[Scenario::Harq]),
        Command::Pair(a) => run(a, &[Scenario::Pairing]),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn seq(a: SeqArgs) -> Result<ExitCode, Failure> {
    let (matrix, extra) = if let Some(path) = &a.verify {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(Failure::Validation)?;
        let file = SignatureFile::from_json(&text).map_err(|e| Failure::Validation(anyhow!("{}: {e}", path.display())))?;
        (file.to_matrix().map_err(|e| Failure::Validation(e.into()))?, None)
    } else {
        if a.k == 0 {
            return Err(Failure::Validation(anyhow!("--k must be >= 1")));
        }
        if a.l == 0 {
            return Err(Failure::Validation(anyhow!("--l must be >= 1")));
        }
        let opts = GenerateOptions { seed: a.seed, iters: a.iters, ..GenerateOptions::default() };
        let g = seqdesign::generate(a.k, a.l, a.pi, opts).map_err(|e| Failure::Validation(e.into()))?;
        (g.matrix.clone(), Some(g))
    };
    let r = seqdesign::verify(&matrix, seqdesign::DEFAULT_TOL);
    let (k, l) = (matrix.user_count(), matrix.spread_length());
    println!("K={k} L={l}");
    println!("tsc={:.6}", r.tsc);
    println!("welch_bound={:.6}", r.welch_bound);
    println!("wbe_gap={:.3e}", r.wbe_gap);
    println!("is_wbe={}", r.is_wbe);
    println!("mu={:.6}", r.mu);
    println!("coherence_bound={:.6}", seqdesign::coherence_bound(k, l));
    println!("min_chordal={:.6}", r.min_chordal);
    if let Some(g) = &extra {
        println!("pi={} achieved={:.6} target={:.6} converged={} iterations={}", g.pi, g.achieved, g.target, g.converged, g.iterations);
    }
    if let Some(out) = &a.out {
        let file = SignatureFile::from_matrix(&matrix, Some(a.pi), Some(a.seed));
        std::fs::write(out, file.to_json() + "\n")
            .with_context(|| format!("writing {}", out.display()))
            .map_err(Failure::Runtime)?;
        println!("wrote {}", out.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn load_config(a: &RunArgs, allowed: &[Scenario]) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &a.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig { scenario: allowed[0], ..ExperimentConfig::default() },
    };
    let mut overrides = a.overrides.clone();
    if let Some(seed) = a.seed {
        overrides.push(format!("sim.seed={seed}"));
    }
    cfg = cfg.with_overrides(&overrides)?;
    if !allowed.contains(&cfg.scenario) {
        return Err(Failure::Validation(anyhow!(
            "config scenario '{}' does not match this subcommand",
            cfg.scenario
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(a: RunArgs, allowed: &[Scenario]) -> Result<ExitCode, Failure> {
    let cfg = load_config(&a, allowed)?;
    let cancel = Arc::new(AtomicBool::new(false));
    let flag = cancel.clone();
    // a second interrupt kills the process as usual
    ctrlc::set_handler(move || {
        if flag.swap(true, Ordering::Relaxed) {
            std::process::exit(130);
        }
        eprintln!("interrupt: finishing the current batch");
    })
    .map_err(|e| Failure::Runtime(e.into()))?;
    let opts = RunOptions { workers: a.workers, cancel: Some(cancel) };
    let results = sim::run_experiment(&cfg, &opts)?;
    let out = a.out.unwrap_or_else(|| PathBuf::from(format!("results/{}", cfg.scenario)));
    for path in sim::persist(&results, &out)? {
        println!("wrote {}", path.display());
    }
    print_summary(&results);
    if let Some(t) = results.wall_clock_s {
        log::info!("wall clock {t:.2} s");
    }
    if results.truncated {
        eprintln!("TRUNCATED: interrupted, results are partial");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn print_summary(r: &ResultSet) {
    if !r.curves.is_empty() {
        let cols: Vec<Column> = r.curves.iter().map(|c| Column::from_curve(c.label.clone(), c)).collect();
        print!("{}", markdown_table(&cols));
    }
    for h in &r.harq {
        println!("\n{} ({} episodes, {} degraded)", h.protocol, h.episodes, h.degraded_episodes);
        println!("| ue | retransmissions | 95% CI | throughput (bits/slot) |");
        println!("|---|---|---|---|");
        for (u, (rt, tp)) in h.retransmissions.iter().zip(&h.throughput).enumerate() {
            println!("| {u} | {:.4} | [{:.4}, {:.4}] | {:.2} |", rt.mean, rt.ci_lo, rt.ci_hi, tp.mean);
        }
        println!(
            "delay {:.3} slots, decode cost {:.3}, total throughput {:.2}, fairness {:.4}",
            h.delay_slots.mean, h.decode_cost.mean, h.total_throughput.mean, h.fairness.mean
        );
    }
    if let Some(p) = &r.pairing {
        println!("| strong | weak | P(success) | admitted | paired | powers |");
        println!("|---|---|---|---|---|---|");
        for d in &p.report.decisions {
            let powers = d.powers.map_or("-".to_string(), |(s, w)| format!("{s:.4} / {w:.4}"));
            println!("| {} | {} | {:.4} | {} | {} | {} |", d.strong, d.weak, d.probability, d.admitted, d.paired, powers);
        }
        if let Some(u) = p.report.unpaired {
            println!("unpaired: {u}");
        }
        println!(
            "{} runs: mean CSI acquisitions {:.3}, mean pairs formed {:.3}",
            p.runs, p.csi_acquisitions.mean, p.paired.mean
        );
    }
}

/// Mean-over-UE BLER by SNR for one curve.
struct Column {
    name: String,
    snr: Vec<f64>,
    bler: Vec<f64>,
}

impl Column {
    fn from_curve(name: String, c: &sim::Curve) -> Self {
        Self {
            name,
            snr: c.points.iter().map(|p| p.snr_db).collect(),
            bler: c.points.iter().map(|p| p.mean_bler()).collect(),
        }
    }
}

fn markdown_table(cols: &[Column]) -> String {
    let mut s = format!("| snr_db | {} |\n|---|{}\n", cols.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join(" | "), "---|".repeat(cols.len()));
    for (i, snr) in cols[0].snr.iter().enumerate() {
        let row: Vec<String> = cols.iter().map(|c| format!("{:.4e}", c.bler[i])).collect();
        s += &format!("| {snr} | {} |\n", row.join(" | "));
    }
    s
}

fn report(a: ReportArgs) -> Result<ExitCode, Failure> {
    let mut cols = Vec::new();
    let mut others = Vec::new();
    for path in &a.files {
        let r = sim::load(path)?;
        let stem = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        if r.curves.is_empty() {
            others.push(r);
            continue;
        }
        for c in &r.curves {
            let name = if a.files.len() > 1 { format!("{stem}:{}", c.label) } else { c.label.clone() };
            cols.push(Column::from_curve(name, c));
        }
    }
    if let Some(first) = cols.first() {
        for c in &cols[1..] {
            if c.snr != first.snr {
                return Err(Failure::Validation(anyhow!(
                    "SNR grid of '{}' {:?} does not match '{}' {:?}",
                    c.name,
                    c.snr,
                    first.name,
                    first.snr
                )));
            }
        }
        print!("{}", markdown_table(&cols));
        if let Some(out) = &a.out {
            write_table_csv(&cols, out).map_err(Failure::Runtime)?;
            println!("wrote {}", out.display());
        }
    }
    for r in &others {
        print_summary(r);
    }
    Ok(ExitCode::SUCCESS)
}

fn write_table_csv(cols: &[Column], out: &Path) -> anyhow::Result<()> {
    let mut s = format!("snr_db,{}\n", cols.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join(","));
    for (i, snr) in cols[0].snr.iter().enumerate() {
        let row: Vec<String> = cols.iter().map(|c| c.bler[i].to_string()).collect();
        s += &format!("{snr},{}\n", row.join(","));
    }
    std::fs::write(out, s).with_context(|| format!("writing {}", out.display()))
}

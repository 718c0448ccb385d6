mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use erpdeck::error::{Error, Result};
use erpdeck::neural::{build_architecture, complexity, ARCHITECTURES};
use erpdeck::onlinesim::{
    decode_epochs, load_decoder, read_report_csv, run_comparison, save_decoder, shift_sweep, summarize,
    write_report_csv, ComparisonSummary, Decoder, MeanStd, SessionResult,
};
use erpdeck::sigproc::io::{read_epochs, read_header, read_recording, write_recording, Header};
use erpdeck::sigproc::{online_epochs, EpochTensor};
use serde::Serialize;
use serde_json::json;

use config::{ExperimentConfig, SessionKind};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "erpdeck", version, about = "Single-trial ERP decoding toolkit and speller simulator")]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic session to `<out>.meta.json` + `<out>.f32`.
    Synth {
        /// Render an online session instead of the configured one.
        #[arg(long)]
        online: bool,
    },
    /// Fit a pipeline on a recording or epoch file.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        pipeline: Option<String>,
        /// Training epochs for networks; overrides the config.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a recording single trial with a saved decoder; blocks with
    /// several repetitions count one selection per repetition.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Calibrate on one synthetic session and decode online sessions.
    Simulate,
    /// Run the pipeline × subject × repeat grid.
    Compare,
    /// Aggregates and rank tests of a comparison CSV.
    Stats { report: PathBuf },
    /// Parameters, MACs and single-trial latency of a network.
    Complexity {
        architecture: String,
        #[arg(long, default_value_t = 10)]
        runs: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            let mut msg = json!({ "error": category.as_str(), "message": e.to_string() });
            if let Error::Validation { path, .. } = &e {
                msg["path"] = json!(path);
            }
            eprintln!("{msg}");
            ExitCode::from(category.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    let out = |default: &str| cfg.out.clone().unwrap_or_else(|| PathBuf::from(default));
    match cli.command {
        Command::Synth { online } => {
            if online {
                cfg.session = SessionKind::Online;
            }
            cmd_synth(&cfg, &out("session"))
        }
        Command::Train {
            dataset,
            pipeline,
            epochs,
        } => {
            if let Some(p) = pipeline {
                cfg.pipeline = p;
            }
            if let Some(n) = epochs {
                cfg.train.epochs = n;
            }
            cfg.validate()?;
            cmd_train(&cfg, &dataset, &out("model"))
        }
        Command::Eval { dataset, model } => cmd_eval(&cfg, &dataset, &model, cfg.out.as_deref()),
        Command::Simulate => cmd_simulate(&cfg, &out("simulate")),
        Command::Compare => cmd_compare(&cfg, &out("compare")),
        Command::Stats { report } => cmd_stats(&report, cfg.out.as_deref()),
        Command::Complexity { architecture, runs } => cmd_complexity(&architecture, runs, cfg.out.as_deref()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

fn cmd_synth(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    println!("seed: {}", cfg.seed);
    let plan = cfg.session_plan()?;
    let session = match cfg.session {
        SessionKind::Calibration => plan.calibration_session(),
        SessionKind::Online => plan.online_session(0),
    };
    let rec = session.render()?;
    write_recording(&rec, out)?;
    println!("events: {}", rec.events.len());
    println!("wrote: {}", out.display());
    Ok(())
}

/// Online-length epochs from either a recording or an epoch file.
fn load_dataset(path: &Path) -> Result<EpochTensor> {
    match read_header(path)? {
        Header::Recording { .. } => online_epochs(&read_recording(path)?),
        Header::Epochs { .. } => read_epochs(path),
    }
}

fn cmd_train(cfg: &ExperimentConfig, dataset: &Path, out: &Path) -> Result<()> {
    println!("seed: {}", cfg.seed);
    let e = load_dataset(dataset)?;
    let d = Decoder::fit(&cfg.pipeline, &e, &cfg.train, &cfg.baselines, cfg.seed)?;
    let path = save_decoder(&d, out)?;
    println!("pipeline: {}", d.pipeline);
    println!("params: {}", d.param_count());
    if cfg.host_timing {
        println!("train_time_s: {:.3}", d.train_time_s);
    }
    println!("wrote: {}", path.display());
    Ok(())
}

fn timing(cfg: &ExperimentConfig, r: SessionResult) -> SessionResult {
    if cfg.host_timing {
        r
    } else {
        r.without_timing()
    }
}

fn print_report(label: &str, r: &SessionResult) {
    let m = &r.report;
    println!(
        "{label}: ba={:.4} auc={:.4} cdr={:.4} itr={:.2} bits/min",
        m.balanced_accuracy, m.auc, m.command_detection_rate, m.itr_bits_per_min
    );
}

/// Renumber blocks so that every run of `n` consecutive trials of a block
/// is its own selection.
fn single_trial_blocks(mut e: EpochTensor, n: usize) -> EpochTensor {
    let mut next = 0;
    let mut prev = None;
    let mut pos = 0;
    for b in e.blocks.iter_mut() {
        if prev != Some(*b) || pos == n {
            if prev.is_some() {
                next += 1;
            }
            prev = Some(*b);
            pos = 0;
        }
        pos += 1;
        *b = next;
    }
    e
}

fn cmd_eval(cfg: &ExperimentConfig, dataset: &Path, model: &Path, out: Option<&Path>) -> Result<()> {
    let d = load_decoder(model)?;
    let e = single_trial_blocks(load_dataset(dataset)?, cfg.online.n_commands);
    let r = timing(cfg, decode_epochs(&d, &e, &cfg.online)?);
    print_report(&d.pipeline, &r);
    if let Some(p) = out {
        write_json(p, &r)?;
        println!("wrote: {}", p.display());
    }
    Ok(())
}

fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    println!("seed: {}", cfg.seed);
    let plan = cfg.session_plan()?;
    let d = plan.train_decoder()?;
    let sessions = (0..cfg.simulate.online_sessions)
        .map(|k| Ok(timing(cfg, erpdeck::onlinesim::decode_session(&d, &plan, k)?)))
        .collect::<Result<Vec<_>>>()?;
    for (k, s) in sessions.iter().enumerate() {
        print_report(&format!("session {}", k + 1), s);
    }
    let mean = |f: fn(&SessionResult) -> f64| MeanStd::of(&sessions.iter().map(f).collect::<Vec<_>>());
    let summary = json!({
        "seed": cfg.seed,
        "pipeline": cfg.pipeline,
        "train_time_s": if cfg.host_timing { d.train_time_s } else { 0.0 },
        "mean": {
            "ba": mean(|s| s.report.balanced_accuracy),
            "auc": mean(|s| s.report.auc),
            "cdr": mean(|s| s.report.command_detection_rate),
            "itr": mean(|s| s.report.itr_bits_per_min),
        },
        "sessions": sessions,
    });
    std::fs::create_dir_all(out)?;
    write_json(&out.join("simulation.json"), &summary)?;
    save_decoder(&d, &out.join("decoder"))?;
    if !cfg.simulate.sweep_scales.is_empty() {
        let sweep = shift_sweep(&d, &plan, &cfg.simulate.sweep_scales, cfg.simulate.sweep_seeds)?;
        for p in &sweep.points {
            println!("scale {:.2}: cdr {:.4} ± {:.4}", p.scale, p.mean, p.std);
        }
        println!("spearman rho={:.4} p={:.3e}", sweep.spearman.rho, sweep.spearman.p_value);
        write_json(&out.join("sweep.json"), &sweep)?;
    }
    println!("wrote: {}", out.display());
    Ok(())
}

fn print_summary(s: &ComparisonSummary) {
    let f = |m: &MeanStd| format!("{:.4} ± {:.4}", m.mean, m.std);
    println!("{:<14} {:>18} {:>18} {:>18}", "pipeline", "auc", "cdr", "itr");
    for p in &s.pipelines {
        println!("{:<14} {:>18} {:>18} {:>18}", p.pipeline, f(&p.auc), f(&p.cdr), f(&p.itr));
    }
    for (metric, outcome) in &s.friedman {
        match outcome.ok() {
            Some(r) => println!("friedman {metric}: chi2={:.4} df={} p={:.4e}", r.chi2, r.df, r.p_value),
            None => println!("friedman {metric}: undefined"),
        }
    }
    if !s.complete {
        println!("incomplete: {} failed cells", s.failed_cells.len());
    }
}

fn cmd_compare(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    println!("seed: {}", cfg.seed);
    let report = run_comparison(&cfg.comparison(), 0)?;
    std::fs::create_dir_all(out)?;
    write_report_csv(&report.rows, &out.join("report.csv"))?;
    write_json(&out.join("summary.json"), &report.summary)?;
    print_summary(&report.summary);
    println!("wrote: {}", out.display());
    Ok(())
}

fn cmd_stats(report: &Path, out: Option<&Path>) -> Result<()> {
    let rows = read_report_csv(report)?;
    let summary = summarize(&rows, &[])?;
    print_summary(&summary);
    if let Some(p) = out {
        write_json(p, &summary)?;
        println!("wrote: {}", p.display());
    }
    Ok(())
}

fn cmd_complexity(arch: &str, runs: usize, out: Option<&Path>) -> Result<()> {
    if !ARCHITECTURES.contains(&arch) {
        return Err(Error::validation("architecture", format!("unknown architecture `{arch}`")));
    }
    let g = build_architecture(arch, 15, 205, 0)?;
    let c = complexity(&g, runs)?;
    println!("architecture: {}", c.architecture);
    println!("params: {}", c.params);
    println!("macs: {}", c.macs_analytic);
    println!("inference_ms_median: {:.4}", c.inference_ms_median);
    println!("inference_ms_mean: {:.4}", c.inference_ms_mean);
    println!("runs: {}", c.timing_runs);
    if let Some(p) = out {
        write_json(p, &c)?;
    }
    Ok(())
}

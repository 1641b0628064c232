//! Command-line front end. Subcommands bind the library crates one to one:
//! train, separate, evaluate, bench, mix, inspect, shift-test.
//!
//! Exit codes are a stable contract for scripting: 0 success, 2 usage or
//! invalid-argument error, 3 data error (unreadable or inconsistent
//! files), 4 numeric failure. Output files are written through a temp file
//! and renamed into place. All commands are deterministic given their
//! inputs and seeds; CTN_THREADS caps intra-op parallelism and defaults to
//! one thread, which is also the reference reduction order.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctn_core::model::{ModelParams, build, forward};
use ctn_core::signal::{
    AudioClip, OracleMask, Separator, export_basis, load_manifest, read_wav, report_csv,
    shift_experiment, synthesize_mixtures, write_wav_f32,
};
use ctn_core::stream::{bench_tpf, init_stream};
use ctn_core::train::{Dataset, TrainReport, fit};
use ctn_core::{Error, Result};

use ctn_cli::checkpoint;
use ctn_cli::config::load_run_config;

#[derive(Parser)]
#[command(
    name = "ctn",
    about = "Train, run, and probe a time-domain speech separator",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Exactly one way to separate: learned weights or an oracle mask built
/// from the clean references.
#[derive(Args)]
#[group(required = true, multiple = false)]
struct SeparatorArg {
    /// Checkpoint file with trained weights.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Oracle mask kind: ibm, irm, or wfm.
    #[arg(long, value_name = "KIND")]
    oracle: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit a model and write the best-validation checkpoint plus a CSV
    /// epoch report into the output directory.
    Train {
        /// Run configuration, JSON.
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        /// Training manifest; overrides paths.train_manifest.
        #[arg(long, value_name = "FILE")]
        train_manifest: Option<PathBuf>,
        /// Validation manifest; overrides paths.valid_manifest. Falls back
        /// to the training set when neither names one.
        #[arg(long, value_name = "FILE")]
        valid_manifest: Option<PathBuf>,
        /// Output directory for model.ckpt and train_report.csv.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Overrides the seed in the config for init and batch order.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Separate one mixture file into per-source WAVs.
    Separate {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Mono mixture WAV at the model sample rate.
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Sources land in <prefix>.1.wav through <prefix>.C.wav.
        #[arg(long, value_name = "PREFIX")]
        out_prefix: String,
        /// Run the causal frame-by-frame engine instead of the offline
        /// forward pass.
        #[arg(long)]
        streaming: bool,
    },
    /// Score a separator over a manifest and write a per-utterance CSV.
    Evaluate {
        #[command(flatten)]
        separator: SeparatorArg,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Report CSV destination.
        #[arg(long, value_name = "FILE")]
        report: PathBuf,
    },
    /// Measure time per frame of the streaming engine and print the
    /// real-time verdict.
    Bench {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Synthetic audio length per trial.
        #[arg(long, default_value_t = 2.0)]
        seconds: f64,
        /// Repetitions; the least-disturbed trial is reported.
        #[arg(long, default_value_t = 3)]
        trials: usize,
    },
    /// Synthesize a mixture corpus from directories of source WAVs.
    Mix {
        /// One directory per source pool, two to four of them.
        #[arg(long, value_name = "DIR", num_args = 1.., required = true)]
        sources: Vec<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Mixtures to write.
        #[arg(long)]
        count: usize,
        /// Mixing SNR range in dB; the second source is scaled.
        #[arg(long, default_value_t = 0.0)]
        snr_min: f64,
        #[arg(long, default_value_t = 5.0)]
        snr_max: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export encoder and decoder basis functions as CSVs, rows in
    /// similarity-clustered order with tap values and magnitude spectra.
    Inspect {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Re-separate one utterance at a range of input shifts and report how
    /// the score moves.
    ShiftTest {
        #[command(flatten)]
        separator: SeparatorArg,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Zero-based utterance index within the manifest.
        #[arg(long, default_value_t = 0)]
        utterance: usize,
        /// Largest shift in samples.
        #[arg(long, default_value_t = 64)]
        max_shift: usize,
        /// Shift stride in samples.
        #[arg(long, default_value_t = 8)]
        step: usize,
        /// Optional CSV destination; the table always prints to stdout.
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Shape(_) | Error::Invalid(_) => 2,
                Error::Data(_) | Error::Io(_) => 3,
                Error::Numeric(_) => 4,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.cmd {
        Cmd::Train { config, train_manifest, valid_manifest, out, seed } => {
            cmd_train(&config, train_manifest, valid_manifest, &out, seed)
        }
        Cmd::Separate { model, input, out_prefix, streaming } => {
            cmd_separate(&model, &input, &out_prefix, streaming)
        }
        Cmd::Evaluate { separator, manifest, report } => {
            cmd_evaluate(&separator, &manifest, &report)
        }
        Cmd::Bench { model, seconds, trials } => cmd_bench(&model, seconds, trials),
        Cmd::Mix { sources, out, count, snr_min, snr_max, seed } => {
            let manifest = synthesize_mixtures(&sources, &out, count, snr_min, snr_max, seed)?;
            println!("wrote {count} mixtures, manifest at {}", manifest.display());
            Ok(())
        }
        Cmd::Inspect { model, out } => {
            let params = checkpoint::load(&model)?;
            export_basis(&params, &out)?;
            println!(
                "wrote {} basis rows each to {} and {}",
                params.config.n_filters,
                out.join("encoder.csv").display(),
                out.join("decoder.csv").display()
            );
            Ok(())
        }
        Cmd::ShiftTest { separator, manifest, utterance, max_shift, step, report } => {
            cmd_shift_test(&separator, &manifest, utterance, max_shift, step, report)
        }
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CTN_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| {
                Error::Invalid(format!("CTN_THREADS must be a positive integer, got {v:?}"))
            })?;
        ctn_core::set_threads(n);
    }
    Ok(())
}

/// Read a manifest and all audio it names.
fn load_dataset(manifest: &Path) -> Result<Dataset> {
    load_manifest(manifest)?
        .iter()
        .map(|e| {
            let refs = e.references.iter().map(read_wav).collect::<Result<Vec<_>>>()?;
            Ok((read_wav(&e.mixture)?, refs))
        })
        .collect()
}

fn cmd_train(
    config_path: &Path,
    train_manifest: Option<PathBuf>,
    valid_manifest: Option<PathBuf>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_run_config(config_path)?;
    let train_path = train_manifest.or(cfg.paths.train_manifest).ok_or_else(|| {
        Error::Invalid("no training data: pass --train-manifest or set paths.train_manifest".into())
    })?;
    let train_set = load_dataset(&train_path)?;
    let valid_set = match valid_manifest.or(cfg.paths.valid_manifest) {
        Some(p) => load_dataset(&p)?,
        None => train_set.clone(),
    };

    let mut tc = cfg.train;
    if let Some(s) = seed {
        tc.seed = s;
    }
    let mut params: ModelParams<f32> = build(&cfg.model, tc.seed)?;
    println!(
        "training {} parameters on {} utterances, validating on {}",
        ctn_core::model::param_count(&cfg.model),
        train_set.len(),
        valid_set.len()
    );
    let (report, best) = fit(&mut params, &train_set, &valid_set, &tc)?;

    std::fs::create_dir_all(out)?;
    checkpoint::save(&best, &out.join("model.ckpt"))?;
    checkpoint::write_atomic(&out.join("train_report.csv"), epochs_csv(&report).as_bytes())?;
    println!(
        "{} steps over {} epochs in {:.1} s; best epoch {} at {:.2} dB validation SI-SNRi",
        report.steps,
        report.epochs.len(),
        report.wall_seconds,
        report.best_epoch,
        report.best_valid_si_snri
    );
    println!("checkpoint and report written to {}", out.display());
    Ok(())
}

/// Epoch table only: every column is deterministic for a fixed seed, so
/// the file is byte-stable across runs (wall time goes to stdout instead).
fn epochs_csv(report: &TrainReport) -> String {
    let mut out = String::from("epoch,train_loss,valid_si_snri_db,lr\n");
    for e in &report.epochs {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.8}\n",
            e.epoch, e.train_loss, e.valid_si_snri, e.lr
        ));
    }
    out
}

fn cmd_separate(model: &Path, input: &Path, out_prefix: &str, streaming: bool) -> Result<()> {
    let params = checkpoint::load(model)?;
    let mixture = read_wav(input)?;
    let estimates = if streaming {
        stream_separate(&params, &mixture)?
    } else {
        forward(&params, &mixture)?
    };
    for (i, est) in estimates.iter().enumerate() {
        let path = PathBuf::from(format!("{out_prefix}.{}.wav", i + 1));
        write_wav_atomic(&path, est)?;
        println!("{}", path.display());
    }
    Ok(())
}

/// Push the mixture through the frame-by-frame engine and crop the padded
/// tail so the result lines up with the offline forward pass.
fn stream_separate(params: &ModelParams<f32>, mixture: &AudioClip) -> Result<Vec<AudioClip>> {
    let mut state = init_stream(params)?;
    let mut outs: Vec<Vec<f32>> = vec![Vec::with_capacity(mixture.len()); params.config.sources];
    for chunk in mixture.samples.chunks(4096) {
        for (o, e) in outs.iter_mut().zip(state.push(chunk)?) {
            o.extend_from_slice(&e);
        }
    }
    for (o, e) in outs.iter_mut().zip(state.flush()?) {
        o.extend_from_slice(&e);
    }
    outs.into_iter()
        .map(|mut o| {
            o.truncate(mixture.len());
            AudioClip::new(o, mixture.sample_rate)
        })
        .collect()
}

/// 32-bit float WAV via temp-rename, like every other output file.
fn write_wav_atomic(path: &Path, clip: &AudioClip) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    write_wav_f32(tmp.path(), clip)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Checkpoint params must outlive the Separator borrowing them.
fn resolve_separator(arg: &SeparatorArg) -> Result<(Option<ModelParams<f32>>, Option<OracleMask>)> {
    match (&arg.model, &arg.oracle) {
        (Some(path), None) => Ok((Some(checkpoint::load(path)?), None)),
        (None, Some(name)) => Ok((None, Some(OracleMask::parse(name)?))),
        _ => unreachable!("clap enforces exactly one of --model/--oracle"),
    }
}

fn cmd_evaluate(separator: &SeparatorArg, manifest: &Path, report_path: &Path) -> Result<()> {
    let (params, oracle) = resolve_separator(separator)?;
    let sep = match (&params, oracle) {
        (Some(p), None) => Separator::Model(p),
        (None, Some(k)) => Separator::Oracle(k),
        _ => unreachable!(),
    };

    let entries = load_manifest(manifest)?;
    let data = entries
        .iter()
        .map(|e| {
            let refs = e.references.iter().map(read_wav).collect::<Result<Vec<_>>>()?;
            Ok((e.name.clone(), read_wav(&e.mixture)?, refs))
        })
        .collect::<Result<Vec<_>>>()?;

    let report = ctn_core::signal::evaluate(&data, &sep)?;
    checkpoint::write_atomic(report_path, report_csv(&report).as_bytes())?;
    for msg in &report.skipped {
        eprintln!("skipped: {msg}");
    }
    println!(
        "{} utterances: mean SI-SNRi {:.2} dB, mean SDRi {:.2} dB; report at {}",
        report.scores.len(),
        report.mean_si_snri,
        report.mean_sdri,
        report_path.display()
    );
    Ok(())
}

fn cmd_bench(model: &Path, seconds: f64, trials: usize) -> Result<()> {
    let params = checkpoint::load(model)?;
    let report = bench_tpf(&params, seconds, trials)?;
    println!("frames:   {}", report.frames);
    println!("mean tpf: {:.4} ms", report.mean_ms);
    println!("p95 tpf:  {:.4} ms", report.p95_ms);
    println!("hop:      {:.4} ms", report.hop_ms);
    if report.trial_means_ms.len() > 1 {
        let per_trial: Vec<String> =
            report.trial_means_ms.iter().map(|m| format!("{m:.4}")).collect();
        println!("trial means: {} ms", per_trial.join(", "));
    }
    println!(
        "verdict:  {}",
        if report.real_time { "real-time" } else { "not real-time" }
    );
    Ok(())
}

fn cmd_shift_test(
    separator: &SeparatorArg,
    manifest: &Path,
    utterance: usize,
    max_shift: usize,
    step: usize,
    report_path: Option<PathBuf>,
) -> Result<()> {
    let entries = load_manifest(manifest)?;
    let entry = entries.get(utterance).ok_or_else(|| {
        Error::Invalid(format!(
            "utterance index {utterance} out of range, manifest has {}",
            entries.len()
        ))
    })?;
    let mixture = read_wav(&entry.mixture)?;
    let references =
        entry.references.iter().map(read_wav).collect::<Result<Vec<_>>>()?;

    let (params, oracle) = resolve_separator(separator)?;
    let sep = match (&params, oracle) {
        (Some(p), None) => Separator::Model(p),
        (None, Some(k)) => Separator::Oracle(k),
        _ => unreachable!(),
    };

    let report = shift_experiment(&sep, &mixture, &references, max_shift, step)?;
    let mut csv = String::from("shift_samples,sdri_db\n");
    for (shift, sdri) in &report.trace {
        csv.push_str(&format!("{shift},{sdri:.6}\n"));
    }
    csv.push_str(&format!("std_dev,{:.6}\n", report.std_dev));
    print!("{csv}");
    if let Some(path) = report_path {
        checkpoint::write_atomic(&path, csv.as_bytes())?;
    }
    Ok(())
}

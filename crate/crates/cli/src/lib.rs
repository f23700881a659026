//! Command implementations behind the `hifi-wavegan` binary.

pub mod plot;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use hwg_core::audio::{read_manifest, read_wav, write_wav};
use hwg_core::config::{Config, Preset};
use hwg_core::eval::evaluate;
use hwg_core::features::{
    cache_features, compute_stats, extract_features, load_features, CacheOutcome, FeatureBundle,
};
use hwg_core::pulse::extract_pulse;
use hwg_core::synthesis::Vocoder;
use hwg_core::training::{checkpoint_dir, fit, latest_checkpoint, Dataset};
use hwg_core::Error;
use serde_json::{json, Value};

pub const CACHE_ENV: &str = "HIFI_WAVEGAN_CACHE";
const DEFAULT_CACHE: &str = "hwg-cache";

#[derive(Parser, Debug)]
#[command(name = "hifi-wavegan", version, about = "Pulse-conditioned GAN vocoder")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct GlobalArgs {
    /// TOML file overriding the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = PresetArg::Desk)]
    pub preset: PresetArg,
    /// Overrides the training seed; also the synthesis seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print a JSON summary on stdout.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PresetArg {
    Desk,
    Full,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Full => Preset::Full,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Extract and cache features for every WAV in a manifest.
    Extract {
        manifest: PathBuf,
        /// Cache directory (default: $HIFI_WAVEGAN_CACHE or ./hwg-cache).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on a manifest, writing checkpoints and metrics to a run directory.
    Train {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `latest` or a checkpoint path.
        #[arg(long, conflicts_with = "fresh")]
        resume: Option<String>,
        /// Start over even if the run directory has checkpoints.
        #[arg(long)]
        fresh: bool,
    },
    /// Vocode a feature file, or copy-synthesize a WAV.
    Synthesize {
        checkpoint: PathBuf,
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Copy-synthesize a manifest and score it against the originals.
    Evaluate {
        checkpoint: PathBuf,
        manifest: PathBuf,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render spectrogram, waveform and excitation panels to a PNG.
    Plot {
        /// A WAV or a cached feature file.
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Draw the waveform synthesized by this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// A failed command: message plus process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_usage() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 1,
        message: format!("{}: {e}", path.display()),
    }
}

pub fn cache_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE))
}

fn load_config(g: &GlobalArgs) -> Result<Config, Failure> {
    let preset = g.preset.into();
    let mut cfg = match &g.config {
        Some(path) => Config::load(path, preset)?,
        None => Config::preset(preset),
    };
    if let Some(seed) = g.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs a parsed command. `Ok` carries the summary printed with `--json`.
pub fn run(cli: &Cli) -> Result<Value, Failure> {
    let g = &cli.global;
    match &cli.command {
        Command::Extract { manifest, out } => cmd_extract(g, manifest, out.as_deref()),
        Command::Train {
            manifest,
            out,
            resume,
            fresh,
        } => cmd_train(g, manifest, out, resume.as_deref(), *fresh),
        Command::Synthesize { checkpoint, input, out } => cmd_synthesize(g, checkpoint, input, out),
        Command::Evaluate {
            checkpoint,
            manifest,
            out,
        } => cmd_evaluate(g, checkpoint, manifest, out.as_deref()),
        Command::Plot { input, out, checkpoint } => cmd_plot(g, input, out, checkpoint.as_deref()),
    }
}

fn cmd_extract(g: &GlobalArgs, manifest: &Path, out: Option<&Path>) -> Result<Value, Failure> {
    let cfg = load_config(g)?;
    let entries = read_manifest(manifest)?;
    let dir = cache_root(out);
    let (mut hits, mut computed) = (0usize, 0usize);
    let mut failed = Vec::new();
    for path in &entries {
        match cache_features(path, &dir, &cfg.features) {
            Ok((_, CacheOutcome::Hit)) => hits += 1,
            Ok(_) => computed += 1,
            Err(e) => {
                log::error!("{e}");
                failed.push(json!({ "path": path.display().to_string(), "error": e.to_string() }));
            }
        }
    }
    let summary = json!({
        "cache_dir": dir.display().to_string(),
        "entries": entries.len(),
        "hits": hits,
        "computed": computed,
        "failed": failed,
    });
    if !g.json {
        eprintln!(
            "{} entries: {computed} computed, {hits} cache hits, {} failed",
            entries.len(),
            failed.len()
        );
    }
    if failed.is_empty() {
        Ok(summary)
    } else {
        Err(Failure {
            code: 1,
            message: format!("{} of {} entries failed\n{summary}", failed.len(), entries.len()),
        })
    }
}

fn cmd_train(
    g: &GlobalArgs,
    manifest: &Path,
    out: &Path,
    resume: Option<&str>,
    fresh: bool,
) -> Result<Value, Failure> {
    let cfg = load_config(g)?;
    let latest = latest_checkpoint(out);
    let resume_path = match resume {
        Some("latest") => {
            if !latest.exists() {
                return Err(usage(format!("--resume latest: no checkpoint at {}", latest.display())));
            }
            Some(latest)
        }
        Some(path) => Some(PathBuf::from(path)),
        None if latest.exists() && !fresh => {
            return Err(usage(format!(
                "{} already holds a run; pass --resume latest to continue or --fresh to start over",
                out.display()
            )))
        }
        None => None,
    };
    if fresh {
        let dir = checkpoint_dir(out);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
        }
    }
    let entries = read_manifest(manifest)?;
    let data = Dataset::from_paths(&entries, &cfg, Some(&cache_root(None)))?;
    let outcome = fit(&data, &cfg, out, resume_path.as_deref(), |_| {})?;
    let last = outcome.last.as_ref();
    if !g.json {
        eprintln!(
            "trained to iteration {}; final checkpoint {}",
            outcome.iterations,
            outcome.final_checkpoint.display()
        );
    }
    Ok(json!({
        "iterations": outcome.iterations,
        "final_checkpoint": outcome.final_checkpoint.display().to_string(),
        "aux_loss": last.map(|m| m.aux_loss),
        "generator_loss": last.map(|m| m.generator_loss),
    }))
}

fn is_wav(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

fn cmd_synthesize(g: &GlobalArgs, checkpoint: &Path, input: &Path, out: &Path) -> Result<Value, Failure> {
    let vocoder = Vocoder::load(checkpoint)?;
    let seed = g.seed.unwrap_or(vocoder.config().train.seed);
    let synth = if is_wav(input) {
        let clip = read_wav(input, vocoder.config().features.sample_rate)?;
        vocoder.copy_synthesize(&clip, seed)?
    } else {
        vocoder.synthesize(&load_features(input)?, seed)?
    };
    write_wav(out, &synth.audio)?;
    let rtf = synth.real_time_factor();
    log::info!("RTF {rtf:.4} ({:.3} s for {:.3} s of audio)", synth.seconds, synth.audio.duration_seconds());
    if !g.json {
        eprintln!(
            "wrote {} ({} samples, {:.3} s); RTF {rtf:.4}",
            out.display(),
            synth.audio.len(),
            synth.audio.duration_seconds()
        );
    }
    Ok(json!({
        "out": out.display().to_string(),
        "samples": synth.audio.len(),
        "seconds": synth.audio.duration_seconds(),
        "synthesis_seconds": synth.seconds,
        "rtf": rtf,
        "parameter_count": vocoder.generator().count_parameters(),
    }))
}

fn cmd_evaluate(g: &GlobalArgs, checkpoint: &Path, manifest: &Path, out: Option<&Path>) -> Result<Value, Failure> {
    let vocoder = Vocoder::load(checkpoint)?;
    let seed = g.seed.unwrap_or(vocoder.config().train.seed);
    let rate = vocoder.config().features.sample_rate;
    let clips = read_manifest(manifest)?
        .into_iter()
        .map(|p| (p.display().to_string(), read_wav(&p, rate)))
        .collect();
    let report = evaluate(&vocoder, clips, seed)?;
    let value = serde_json::to_value(&report).expect("report serializes");
    let text = serde_json::to_string_pretty(&value).expect("report serializes");
    match out {
        Some(path) => std::fs::write(path, &text).map_err(|e| io_failure(path, e))?,
        None if !g.json => println!("{text}"),
        None => {}
    }
    Ok(value)
}

fn cmd_plot(g: &GlobalArgs, input: &Path, out: &Path, checkpoint: Option<&Path>) -> Result<Value, Failure> {
    let vocoder = checkpoint.map(Vocoder::load).transpose()?;
    let cfg = match &vocoder {
        Some(v) => v.config().clone(),
        None => load_config(g)?,
    };
    let (bundle, mut wave): (FeatureBundle, Vec<f64>) = if is_wav(input) {
        let clip = read_wav(input, cfg.features.sample_rate)?;
        (extract_features(&clip, &cfg.features)?, clip.samples)
    } else {
        (load_features(input)?, Vec::new())
    };
    let seed = g.seed.unwrap_or(cfg.train.seed);
    let stats = match &vocoder {
        Some(v) => v.stats().clone(),
        None => compute_stats(std::slice::from_ref(&bundle.mel))?,
    };
    let mel = stats.normalize(&bundle.mel)?;
    let pulse = extract_pulse(
        &mel,
        &bundle.pitch(),
        bundle.sample_rate,
        bundle.hop_length,
        cfg.pulse.noise_std,
        seed,
    )?;
    if let Some(v) = &vocoder {
        wave = v.synthesize(&bundle, seed)?.audio.samples;
    }
    let img = plot::render(&bundle.mel, &wave, &pulse.values);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    img.save(out).map_err(|e| Failure {
        code: 1,
        message: format!("{}: {e}", out.display()),
    })?;
    if !g.json {
        eprintln!("wrote {}", out.display());
    }
    Ok(json!({ "out": out.display().to_string(), "width": img.width(), "height": img.height() }))
}

//! Command-line front end. `run` is the whole program minus process exit so
//! it can be driven in-process.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::augment::{apply_params, sample_params};
use crate::config::RunConfig;
use crate::data_io::{
    decode_image, load_checkpoint, load_manifest, metrics_to_json, read_predictions_csv, save_checkpoint, save_image,
    write_metrics_json, write_predictions_csv,
};
use crate::ensemble::{align, ensemble_average, ModelOutputs, OutputKind};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::nn::Arch;
use crate::sampling::{
    balanced_class_probabilities, chi_square, class_counts, draw_epoch_indices, drawn_class_counts, SamplerSpec,
};
use crate::trainloop::{history_to_jsonl, predict_probs, train, Dataset};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "capsule-classify",
    version,
    about = "Imbalanced multi-class image classification pipeline"
)]
pub struct Cli {
    /// TOML file with defaults for any flag
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker thread cap; results do not depend on it
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write best.ckpt, history.jsonl, metrics.json
    Train {
        #[arg(long)]
        train_manifest: Option<PathBuf>,
        #[arg(long)]
        val_manifest: Option<PathBuf>,
        /// e.g. linear:192x10 or mlp:192x64x10
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Write class probabilities for every image of a manifest
    Predict {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average several prediction files
    Ensemble {
        #[arg(long, num_args = 1..)]
        preds: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a prediction file against a labeled manifest
    Eval {
        #[arg(long)]
        preds: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Also write the report here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Augment one image and write the sampled parameters next to it
    AugmentPreview {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        index: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw from the balanced sampler and test the class frequencies
    SampleCheck {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        draws: Option<usize>,
    },
}

enum Failure {
    Usage(String),
    Domain(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn required<T>(value: Option<T>, flag: &str) -> CliResult<T> {
    value.ok_or_else(|| Failure::Usage(format!("missing --{flag} (flag or config key)")))
}

/// Folds command-line flags into the file config; flags win.
fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    fn set<T: Clone>(slot: &mut Option<T>, flag: &Option<T>) {
        if flag.is_some() {
            *slot = flag.clone();
        }
    }
    match &cli.command {
        Command::Train {
            train_manifest,
            val_manifest,
            arch,
            out_dir,
        } => {
            set(&mut cfg.train.train_manifest, train_manifest);
            set(&mut cfg.train.val_manifest, val_manifest);
            set(&mut cfg.train.arch, arch);
            set(&mut cfg.train.out_dir, out_dir);
        }
        Command::Predict { ckpt, manifest, out } => {
            set(&mut cfg.predict.ckpt, ckpt);
            set(&mut cfg.predict.manifest, manifest);
            set(&mut cfg.predict.out, out);
        }
        Command::Ensemble { preds, out } => {
            if !preds.is_empty() {
                cfg.ensemble.preds = preds.clone();
            }
            set(&mut cfg.ensemble.out, out);
        }
        Command::Eval { preds, truth, out } => {
            set(&mut cfg.eval.preds, preds);
            set(&mut cfg.eval.truth, truth);
            set(&mut cfg.eval.out, out);
        }
        Command::AugmentPreview { input, index, out } => {
            set(&mut cfg.augment_preview.input, input);
            set(&mut cfg.augment_preview.index, index);
            set(&mut cfg.augment_preview.out, out);
        }
        Command::SampleCheck { manifest, draws } => {
            set(&mut cfg.sample_check.manifest, manifest);
            set(&mut cfg.sample_check.draws, draws);
        }
    }
    Ok(cfg)
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(stderr, "{text}");
            } else {
                let _ = write!(stdout, "{text}");
            }
            return code;
        }
    };
    let cfg = match resolve(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return EXIT_DOMAIN;
        }
    };
    let _ = writeln!(stderr, "# resolved config\n{}", cfg.to_toml());

    let pool = match cfg.threads {
        Some(0) => {
            let _ = writeln!(stderr, "error: --threads must be at least 1");
            return EXIT_USAGE;
        }
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    };
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return EXIT_DOMAIN;
        }
    };
    let mut buffer = Vec::new();
    let result = pool.install(|| dispatch(&cli.command, &cfg, &mut buffer));
    let _ = stdout.write_all(&buffer);
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(stderr, "usage error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Domain(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_DOMAIN
        }
    }
}

fn dispatch(command: &Command, cfg: &RunConfig, stdout: &mut Vec<u8>) -> CliResult<()> {
    match command {
        Command::Train { .. } => run_train(cfg),
        Command::Predict { .. } => run_predict(cfg),
        Command::Ensemble { .. } => run_ensemble(cfg),
        Command::Eval { .. } => run_eval(cfg, stdout),
        Command::AugmentPreview { .. } => run_augment_preview(cfg),
        Command::SampleCheck { .. } => run_sample_check(cfg, stdout),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn run_train(cfg: &RunConfig) -> CliResult<()> {
    let train_manifest = required(cfg.train.train_manifest.clone(), "train-manifest")?;
    let val_manifest = required(cfg.train.val_manifest.clone(), "val-manifest")?;
    let arch_text = required(cfg.train.arch.clone(), "arch")?;
    let out_dir = required(cfg.train.out_dir.clone(), "out-dir")?;
    let arch: Arch = arch_text.parse()?;
    let catalog = cfg.catalog()?;
    let train_cfg = cfg.train_config()?;

    let train_set = Dataset::load(&train_manifest, &catalog)?;
    let val_set = Dataset::load(&val_manifest, &catalog)?;
    let outcome = train(&train_set, &val_set, &arch, &train_cfg)?;

    create_dir(&out_dir)?;
    save_checkpoint(&out_dir.join("best.ckpt"), &outcome.best)?;
    write_file(
        &out_dir.join("history.jsonl"),
        history_to_jsonl(&outcome.history).as_bytes(),
    )?;

    // Scored from the written CSV so the report equals `predict` + `eval`.
    let preds_path = out_dir.join("val_predictions.csv");
    let probs = predict_probs(&outcome.best.model()?, &val_set, &outcome.best.input)?;
    write_predictions_csv(&preds_path, &val_set.image_ids(), probs.matrix(), &catalog)?;
    let report = score_predictions(&preds_path, &val_manifest)?;
    write_metrics_json(&out_dir.join("metrics.json"), &report)?;
    Ok(())
}

fn run_predict(cfg: &RunConfig) -> CliResult<()> {
    let ckpt_path = required(cfg.predict.ckpt.clone(), "ckpt")?;
    let manifest = required(cfg.predict.manifest.clone(), "manifest")?;
    let out = required(cfg.predict.out.clone(), "out")?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    if cfg.classes.is_some() && cfg.catalog()? != ckpt.catalog {
        return Err(Error::invalid("configured classes differ from the checkpoint's catalog").into());
    }
    let data = Dataset::load(&manifest, &ckpt.catalog)?;
    let probs = predict_probs(&ckpt.model()?, &data, &ckpt.input)?;
    write_predictions_csv(&out, &data.image_ids(), probs.matrix(), &ckpt.catalog)?;
    Ok(())
}

fn run_ensemble(cfg: &RunConfig) -> CliResult<()> {
    if cfg.ensemble.preds.is_empty() {
        return Err(Failure::Usage("missing --preds (flag or config key)".into()));
    }
    let out = required(cfg.ensemble.out.clone(), "out")?;
    let mut paths = cfg.ensemble.preds.clone();
    // Member order, and so row order, must not depend on argument order.
    paths.sort();
    let mut catalog = None;
    let mut members = Vec::with_capacity(paths.len());
    for path in &paths {
        let p = read_predictions_csv(path)?;
        match &catalog {
            None => catalog = Some(p.catalog.clone()),
            Some(c) if *c != p.catalog => {
                return Err(Error::invalid(format!(
                    "{}: class columns differ from {}",
                    path.display(),
                    paths[0].display()
                ))
                .into())
            }
            Some(_) => {}
        }
        members.push(ModelOutputs::new(
            path.display().to_string(),
            p.image_ids,
            p.probs.into_matrix(),
            OutputKind::Probabilities,
        )?);
    }
    let aligned = align(members)?;
    let ids = aligned[0].image_ids.clone();
    let avg = ensemble_average(&aligned)?;
    write_predictions_csv(&out, &ids, avg.matrix(), &catalog.expect("at least one member"))?;
    Ok(())
}

fn basename(id: &str) -> &str {
    id.rsplit(['/', '\\']).next().unwrap_or(id)
}

/// Metrics of a predictions CSV against a labeled manifest, matched by basename.
pub fn score_predictions(preds_path: &Path, truth_path: &Path) -> Result<crate::metrics::MetricsReport> {
    let preds = read_predictions_csv(preds_path)?;
    let truth = load_manifest(truth_path, &preds.catalog)?;
    let mut labels_by_id = HashMap::with_capacity(truth.len());
    for r in truth.records() {
        if labels_by_id.insert(basename(&r.image_id), r.label).is_some() {
            return Err(Error::invalid(format!(
                "{}: image name '{}' appears twice",
                truth_path.display(),
                basename(&r.image_id)
            )));
        }
    }
    if preds.image_ids.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labeled images",
            preds.image_ids.len(),
            truth.len()
        )));
    }
    let labels = preds
        .image_ids
        .iter()
        .map(|id| {
            labels_by_id.get(basename(id)).copied().ok_or_else(|| {
                Error::invalid(format!(
                    "prediction for '{id}' has no label in {}",
                    truth_path.display()
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(&preds.probs, &labels, &preds.catalog)
}

fn run_eval(cfg: &RunConfig, stdout: &mut dyn Write) -> CliResult<()> {
    let preds = required(cfg.eval.preds.clone(), "preds")?;
    let truth = required(cfg.eval.truth.clone(), "truth")?;
    let report = score_predictions(&preds, &truth)?;
    if let Some(out) = &cfg.eval.out {
        write_metrics_json(out, &report)?;
    }
    let text = serde_json::to_string_pretty(&metrics_to_json(&report)?).expect("json serializes");
    writeln!(stdout, "{text}").map_err(|e| Error::io(Path::new("<stdout>"), e))?;
    Ok(())
}

fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("json")
}

fn run_augment_preview(cfg: &RunConfig) -> CliResult<()> {
    let input = required(cfg.augment_preview.input.clone(), "in")?;
    let out = required(cfg.augment_preview.out.clone(), "out")?;
    let seed = cfg.seed.unwrap_or(0);
    let index = cfg.augment_preview.index.unwrap_or(0);
    cfg.augment.validate()?;
    let img = decode_image(&input)?;
    let params = sample_params(&cfg.augment, seed, index);
    let augmented = apply_params(&img, &cfg.augment, &params)?;
    save_image(&out, &augmented)?;
    let sidecar = json!({
        "seed": seed,
        "index": index,
        "input": input.display().to_string(),
        "params": params,
    });
    let text = serde_json::to_string_pretty(&sidecar).expect("json serializes") + "\n";
    write_file(&sidecar_path(&out), text.as_bytes())?;
    Ok(())
}

fn run_sample_check(cfg: &RunConfig, stdout: &mut dyn Write) -> CliResult<()> {
    let manifest_path = required(cfg.sample_check.manifest.clone(), "manifest")?;
    let draws = cfg.sample_check.draws.unwrap_or(100_000);
    let catalog = cfg.catalog()?;
    let manifest = load_manifest(&manifest_path, &catalog)?;
    if manifest.is_empty() {
        return Err(Error::invalid(format!("{} has no records", manifest_path.display())).into());
    }
    let k = catalog.len();
    let counts = class_counts(&manifest, k);
    let spec = SamplerSpec::balanced(&manifest, k, cfg.seed.unwrap_or(0))?;
    let indices = draw_epoch_indices(&spec, draws)?;
    let observed = drawn_class_counts(&indices, &manifest, k);
    let expected = balanced_class_probabilities(&counts);
    let classes: Vec<_> = (0..k)
        .filter(|&c| counts[c] > 0)
        .map(|c| {
            json!({
                "class": catalog.name(c),
                "records": counts[c],
                "draws": observed[c],
                "frequency": observed[c] as f64 / draws as f64,
                "expected": expected[c],
            })
        })
        .collect();
    let mut report = json!({ "draws": draws, "classes": classes });
    if counts.iter().filter(|&&c| c > 0).count() >= 2 {
        let chi = chi_square(&observed, &expected)?;
        report["chi_square"] = json!({ "statistic": chi.statistic, "dof": chi.dof, "p_value": chi.p_value });
    }
    let text = serde_json::to_string_pretty(&report).expect("json serializes");
    writeln!(stdout, "{text}").map_err(|e| Error::io(Path::new("<stdout>"), e))?;
    Ok(())
}

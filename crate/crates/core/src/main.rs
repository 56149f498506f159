//! Pipeline CLI: phantom data synthesis, classifier and generator
//! training, relevance-map generation, evaluation, and PGM slice export.
//!
//! Every subcommand reads an optional `--config` file (plain `key=value`
//! lines, `#` comments) and writes the fully-resolved configuration next
//! to its outputs, so any artifact directory records exactly how it was
//! produced. The `RELEVANCE_FORGE_SEED` environment variable overrides the
//! configured seed for all subcommands.
//!
//! Volumes are stored raw; every consumer (training, relevance, evaluation)
//! min-max normalizes each channel at load, the same way MRI sequences are
//! independently normalized before any model sees them.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use relevance_forge::config::RunConfig;
use relevance_forge::error::{Error, Result};
use relevance_forge::evaluation::{evaluate_dataset, EvalCase};
use relevance_forge::nn::model::{
    generator_mask, ClassifierSpec, GeneratorSpec, ModelParams,
};
use relevance_forge::nn::train::{
    train_classifier, train_generator, write_loss_log, write_metrics_tsv, TrainConfig,
};
use relevance_forge::phantom::{self, Split};
use relevance_forge::relevance::generate_relevance;
use relevance_forge::volume::Volume;

const EXIT_CODE_HELP: &str = "Exit codes:\n  \
    0  success\n  \
    2  config error (bad key, bad value, violated constraint)\n  \
    3  missing input file or directory\n  \
    4  format error (malformed or mismatched file contents)\n  \
    5  training divergence (non-finite loss or parameters)\n  \
    6  degenerate relevance map (constant combined scores)\n\n\
    RELEVANCE_FORGE_SEED overrides the configured seed when set.";

#[derive(Parser)]
#[command(
    name = "relevance-forge",
    version,
    about = "Weakly-supervised lesion localization via adversarial perturbation masks",
    after_help = EXIT_CODE_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a labeled phantom dataset with ground-truth masks.
    #[command(after_help = "Config keys read:\n  \
        seed, phantom.count, phantom.dim, phantom.channels, phantom.class_ratio,\n  \
        phantom.blob_radius_min, phantom.blob_radius_max, phantom.texture_contrast,\n  \
        split.train, split.val, split.test")]
    GenData {
        /// Config file (key=value lines); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for volumes, truth masks and the manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the binary volume classifier; keeps the best-AUC epoch.
    #[command(after_help = "Config keys read:\n  \
        seed, classifier.widths, classifier.lr, classifier.epochs, classifier.batch")]
    TrainClassifier {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for classifier.rnet and metrics.tsv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the mask generator against a frozen classifier.
    #[command(after_help = "Config keys read:\n  \
        seed, generator.enc_widths, generator.bottleneck, generator.lr,\n  \
        generator.epochs, generator.batch, loss.alpha, loss.beta, loss.delta,\n  \
        loss.epsilon_gap, loss.l1_mode, loss.w_perturbation, loss.w_l1,\n  \
        loss.w_indecisive")]
    TrainGenerator {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Trained classifier parameters (.rnet), kept frozen.
        #[arg(long)]
        classifier: PathBuf,
        /// Output directory for generator.rnet, metrics.tsv and loss_log.tsv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Produce a ranked relevance map for one case volume.
    #[command(after_help = "Config keys read:\n  \
        slic.k, slic.m, slic.max_iters, slic.min_size_fraction,\n  \
        relevance.bins, relevance.low_mask_is_relevant, relevance.paint")]
    Relevance {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Case volume (.rvol).
        #[arg(long)]
        case: PathBuf,
        /// Trained generator parameters (.rnet).
        #[arg(long)]
        generator: PathBuf,
        /// Output directory for the relevance map files.
        #[arg(long)]
        out: PathBuf,
        /// Also write PGM mid-slices of the combined scores.
        #[arg(long)]
        pgm: bool,
    },
    /// Score both methods against ground truth on the test split.
    #[command(after_help = "Config keys read:\n  \
        slic.k, slic.m, slic.max_iters, slic.min_size_fraction,\n  \
        relevance.bins, relevance.low_mask_is_relevant, relevance.paint")]
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Trained generator parameters (.rnet).
        #[arg(long)]
        generator: PathBuf,
        /// Trained classifier parameters (.rnet).
        #[arg(long)]
        classifier: PathBuf,
        /// Output directory for report.tsv.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads for per-case evaluation (order-independent).
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Export PGM slices from a volume file.
    #[command(after_help = "Config keys read:\n  \
        none — slice export is config-independent (the snapshot is still written)")]
    ExportSlices {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Volume to slice (.rvol).
        #[arg(long)]
        volume: PathBuf,
        /// Output directory for the PGM files.
        #[arg(long)]
        out: PathBuf,
        /// Slice axis: z, y or x.
        #[arg(long, default_value = "z")]
        axis: String,
        /// Slice index along the axis; defaults to the midpoint.
        #[arg(long)]
        index: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code())
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env_seed()?;
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out } => gen_data(&load_config(&config)?, &out),
        Command::TrainClassifier { config, data, out } => {
            cmd_train_classifier(&load_config(&config)?, &data, &out)
        }
        Command::TrainGenerator {
            config,
            data,
            classifier,
            out,
        } => cmd_train_generator(&load_config(&config)?, &data, &classifier, &out),
        Command::Relevance {
            config,
            case,
            generator,
            out,
            pgm,
        } => cmd_relevance(&load_config(&config)?, &case, &generator, &out, pgm),
        Command::Evaluate {
            config,
            data,
            generator,
            classifier,
            out,
            workers,
        } => cmd_evaluate(&load_config(&config)?, &data, &generator, &classifier, &out, workers),
        Command::ExportSlices {
            config,
            volume,
            out,
            axis,
            index,
        } => cmd_export_slices(&load_config(&config)?, &volume, &out, &axis, index),
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = cfg.phantom_spec();
    let cases = phantom::generate(&spec)?;
    let splits = phantom::split(&cases, cfg.split_fractions(), cfg.seed)?;
    ensure_dir(out)?;
    phantom::write_dataset(out, &cases, &splits)?;
    cfg.write_resolved(out)?;
    let count = |s: Split| splits.iter().filter(|&&x| x == s).count();
    println!(
        "wrote {} cases ({} train / {} val / {} test) to {}",
        cases.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        out.display()
    );
    Ok(())
}

/// (train, val) views of a loaded dataset, with class labels.
fn labeled_splits<'a>(
    cases: &'a [phantom::PhantomCase],
    splits: &[Split],
) -> (Vec<(&'a Volume, u8)>, Vec<(&'a Volume, u8)>) {
    let pick = |want: Split| {
        cases
            .iter()
            .zip(splits)
            .filter(|&(_, &s)| s == want)
            .map(|(c, _)| (&c.volume, c.label))
            .collect::<Vec<_>>()
    };
    (pick(Split::Train), pick(Split::Val))
}

/// Every consumer of case volumes sees them min-max normalized per channel,
/// mirroring how MRI sequences are prepared before training or scoring.
fn load_normalized(data: &Path) -> Result<(Vec<phantom::PhantomCase>, Vec<Split>)> {
    let (mut cases, splits) = phantom::load_dataset(data)?;
    for case in &mut cases {
        case.volume = case.volume.minmax_normalize();
    }
    Ok((cases, splits))
}

fn cmd_train_classifier(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let (cases, splits) = load_normalized(data)?;
    let first = cases
        .first()
        .ok_or_else(|| Error::Format("dataset has no cases".into()))?;
    let init = ModelParams::new_classifier(&ClassifierSpec {
        in_channels: first.volume.channels(),
        widths: cfg.classifier_widths.clone(),
        seed: cfg.seed,
    })?;
    let tc = TrainConfig {
        epochs: cfg.classifier_epochs,
        batch_size: cfg.classifier_batch,
        lr: cfg.classifier_lr,
        seed: cfg.seed,
    };
    let (train, val) = labeled_splits(&cases, &splits);
    let result = train_classifier(&init, &tc, &train, &val)?;
    ensure_dir(out)?;
    result.best.save(&out.join("classifier.rnet"))?;
    write_metrics_tsv(&out.join("metrics.tsv"), &result.rows)?;
    cfg.write_resolved(out)?;
    println!(
        "best epoch {} of {} with validation AUC {:.4}; wrote {}",
        result.best_epoch,
        cfg.classifier_epochs,
        result.best_val_auc,
        out.join("classifier.rnet").display()
    );
    Ok(())
}

fn cmd_train_generator(
    cfg: &RunConfig,
    data: &Path,
    classifier_path: &Path,
    out: &Path,
) -> Result<()> {
    let (cases, splits) = load_normalized(data)?;
    let first = cases
        .first()
        .ok_or_else(|| Error::Format("dataset has no cases".into()))?;
    let classifier = ModelParams::load(classifier_path)?;
    let init = ModelParams::new_generator(&GeneratorSpec {
        in_channels: first.volume.channels(),
        enc_widths: cfg.generator_enc_widths,
        bottleneck: cfg.generator_bottleneck,
        seed: cfg.seed,
    })?;
    let tc = TrainConfig {
        epochs: cfg.generator_epochs,
        batch_size: cfg.generator_batch,
        lr: cfg.generator_lr,
        seed: cfg.seed,
    };
    let pick = |want: Split| {
        cases
            .iter()
            .zip(&splits)
            .filter(|&(_, &s)| s == want)
            .map(|(c, _)| &c.volume)
            .collect::<Vec<_>>()
    };
    let result = train_generator(&init, &classifier, &tc, &cfg.loss, &pick(Split::Train), &pick(Split::Val))?;
    ensure_dir(out)?;
    result.best.save(&out.join("generator.rnet"))?;
    let rows: Vec<_> = result.rows.iter().map(|r| r.to_metric_row()).collect();
    write_metrics_tsv(&out.join("metrics.tsv"), &rows)?;
    write_loss_log(&out.join("loss_log.tsv"), &result.steps)?;
    cfg.write_resolved(out)?;
    let best = result
        .rows
        .iter()
        .find(|r| r.epoch == result.best_epoch)
        .expect("best epoch has a row");
    println!(
        "best epoch {} of {} with validation loss {:.6} (mean |y_p - y_np| {:.4}); wrote {}",
        result.best_epoch,
        cfg.generator_epochs,
        result.best_val_total,
        best.val_gap,
        out.join("generator.rnet").display()
    );
    Ok(())
}

fn cmd_relevance(
    cfg: &RunConfig,
    case: &Path,
    generator_path: &Path,
    out: &Path,
    pgm: bool,
) -> Result<()> {
    let volume = Volume::read(case)?.minmax_normalize();
    let generator = ModelParams::load(generator_path)?;
    let mask = generator_mask(&generator, &volume)?;
    let rm = generate_relevance(&volume, &mask, &cfg.relevance)?;
    ensure_dir(out)?;
    rm.write_dir(out, "relevance")?;
    if pgm {
        let (d, h, w) = rm.dims();
        for (axis, name, extent) in [(0, "z", d), (1, "y", h), (2, "x", w)] {
            let slice = rm.combined().extract_slice(0, axis, extent / 2)?;
            slice.write_pgm(out.join(format!("relevance.combined.mid_{name}.pgm")))?;
        }
    }
    cfg.write_resolved(out)?;
    println!(
        "wrote relevance map ({} bins over {} voxels) to {}",
        rm.bin_count(),
        rm.ranks().len(),
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(
    cfg: &RunConfig,
    data: &Path,
    generator_path: &Path,
    classifier_path: &Path,
    out: &Path,
    workers: usize,
) -> Result<()> {
    let generator = ModelParams::load(generator_path)?;
    let classifier = ModelParams::load(classifier_path)?;
    let (cases, splits) = load_normalized(data)?;
    let eval_cases: Vec<EvalCase> = cases
        .into_iter()
        .zip(&splits)
        .filter(|&(_, &s)| s == Split::Test)
        .map(|(c, _)| EvalCase {
            case_id: format!("case_{}", c.index),
            volume: c.volume,
            truth: c.truth,
        })
        .collect();
    let report = evaluate_dataset(&eval_cases, &generator, &classifier, &cfg.relevance, workers)?;
    ensure_dir(out)?;
    report.write_tsv(&out.join("report.tsv"))?;
    cfg.write_resolved(out)?;
    print!("{}", report.render_table());
    println!("wrote {}", out.join("report.tsv").display());
    Ok(())
}

fn cmd_export_slices(
    cfg: &RunConfig,
    volume_path: &Path,
    out: &Path,
    axis: &str,
    index: Option<usize>,
) -> Result<()> {
    let volume = Volume::read(volume_path)?;
    let axis_index = match axis {
        "z" => 0,
        "y" => 1,
        "x" => 2,
        other => {
            return Err(Error::Config(format!(
                "axis must be z, y or x, got {other:?}"
            )));
        }
    };
    let (d, h, w) = volume.dims();
    let extent = [d, h, w][axis_index];
    let index = index.unwrap_or(extent / 2);
    let stem = volume_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("volume");
    ensure_dir(out)?;
    for c in 0..volume.channels() {
        let slice = volume.extract_slice(c, axis_index, index)?;
        slice.write_pgm(out.join(format!("{stem}.c{c}.{axis}{index}.pgm")))?;
    }
    cfg.write_resolved(out)?;
    println!(
        "wrote {} slice(s) of {} at {axis}={index} to {}",
        volume.channels(),
        volume_path.display(),
        out.display()
    );
    Ok(())
}

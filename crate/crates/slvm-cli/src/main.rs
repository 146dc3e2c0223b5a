//! Command-line interface: fixture generation, embedding-cache
//! preparation, registry generation, training, evaluation, ablation, and
//! mask export.
//!
//! Exit codes: 0 ok, 2 config error, 3 data error, 4 freeze violation,
//! 5 divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::{SecondsFormat, Utc};
use clap::{Args, Parser, Subcommand};

use slvm::apl::{load_checkpoint, save_checkpoint, DecoderConfig, FrozenDecoder};
use slvm::cache::{feature_paths, is_valid_tensor_file};
use slvm::config::{load_config, RunConfig};
use slvm::dataset::{load_dataset, partition_folds, Dataset, FoldSplit};
use slvm::episode::{build_registry, read_registry, registry_digest, write_registry};
use slvm::error::{Error, Result};
use slvm::eval::{evaluate, export_masks, run_ablation, AblationSetup};
use slvm::features::{save_cached_embedding, EmbeddingProvider, EncoderConfig, SurrogateEncoder};
use slvm::model::{AblationFlags, SlvmModel};
use slvm::report::{write_manifest, write_report, RunManifest};
use slvm::train::train;

#[derive(Parser)]
#[command(name = "slvm", about = "Few-shot segmentation with a frozen encoder/decoder", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file (flat key = value).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured training seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut config = load_config(&self.config)?;
        if let Some(seed) = self.seed {
            config.train.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the deterministic synthetic dataset.
    MakeFixture {
        /// Output dataset root.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = slvm::fixture::DEFAULT_IMAGES)]
        images: usize,
        #[arg(long, default_value_t = slvm::fixture::DEFAULT_SIZE)]
        size: usize,
    },
    /// Precompute frozen embeddings for every dataset image.
    PrepareCache {
        #[command(flatten)]
        config: ConfigArgs,
        /// Cache directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a reproducible evaluation registry for the held-out fold.
    MakeRegistry {
        #[command(flatten)]
        config: ConfigArgs,
        /// Registry file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the prompt learner on the train folds.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (checkpoint, log, manifest).
        #[arg(long)]
        out: PathBuf,
        /// Component toggles, e.g. `apl,pgml,fsla` or `1,1,0`.
        #[arg(long, default_value = "apl,pgml,fsla")]
        flags: String,
    },
    /// Evaluate a checkpoint over an episode registry.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "apl,pgml,fsla")]
        flags: String,
        /// Override the configured binarization threshold.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Run the four-row component ablation against a shared registry.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Reuse an existing registry instead of generating one.
        #[arg(long)]
        registry: Option<PathBuf>,
    },
    /// Export thresholded predictions as 1-bit PNG masks.
    ExportMasks {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
}

fn timestamp() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn exit_code_of(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::FreezeViolation { .. } => 4,
        Error::Divergence { .. } => 5,
        _ => 3,
    }
}

fn load_protocol(config: &RunConfig) -> Result<(Dataset, FoldSplit)> {
    let root = config.resolve_data_root()?;
    let dataset = load_dataset(&root)?;
    if config.fold_sizes.iter().sum::<usize>() != dataset.class_count() {
        return Err(Error::Config(format!(
            "fold_sizes {:?} do not cover the dataset's {} classes",
            config.fold_sizes,
            dataset.class_count()
        )));
    }
    let split = partition_folds(&dataset.classes_by_name(), &config.fold_sizes, config.fold)?;
    Ok((dataset, split))
}

fn build_frozen(config: &RunConfig) -> (SurrogateEncoder, FrozenDecoder) {
    let encoder = SurrogateEncoder::build(config.encoder_seed, EncoderConfig::default());
    let decoder = FrozenDecoder::build(
        encoder.channels().0,
        config.decoder_seed,
        DecoderConfig::default(),
    );
    (encoder, decoder)
}

/// Rebuild the model a checkpoint was trained with and verify the frozen
/// fingerprints recorded at save time.
fn load_model(
    config: &RunConfig,
    checkpoint: &Path,
    flags: AblationFlags,
) -> Result<SlvmModel> {
    let (params, meta) = load_checkpoint(checkpoint)?;
    let (encoder, decoder) = build_frozen(config);
    if meta.encoder_fingerprint != encoder.fingerprint() {
        return Err(Error::Protocol(format!(
            "checkpoint was produced with encoder {}, config rebuilds {}",
            meta.encoder_fingerprint,
            encoder.fingerprint()
        )));
    }
    if meta.decoder_fingerprint != decoder.fingerprint() {
        return Err(Error::Protocol(format!(
            "checkpoint was produced with decoder {}, config rebuilds {}",
            meta.decoder_fingerprint,
            decoder.fingerprint()
        )));
    }
    Ok(SlvmModel {
        provider: Box::new(encoder),
        decoder,
        params,
        flags,
        image_size: config.train.image_size,
    })
}

struct ManifestDraft {
    command: &'static str,
    config_path: String,
    seed: u64,
    started: String,
    outputs: Vec<PathBuf>,
    digests: Vec<(String, String)>,
}

impl ManifestDraft {
    fn new(command: &'static str, config_path: &Path, seed: u64) -> Self {
        ManifestDraft {
            command,
            config_path: config_path.display().to_string(),
            seed,
            started: timestamp(),
            outputs: Vec::new(),
            digests: Vec::new(),
        }
    }

    fn finish(self, path: &Path) -> Result<()> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            config_path: self.config_path,
            seed: self.seed,
            started: self.started,
            finished: timestamp(),
            output_paths: self.outputs,
            digests: self.digests,
        };
        write_manifest(&manifest, path)
    }
}

fn cmd_make_fixture(out: &Path, seed: u64, images: usize, size: usize) -> Result<()> {
    let mut draft = ManifestDraft::new("make-fixture", Path::new("-"), seed);
    slvm::fixture::make_fixture(out, seed, images, size)?;
    println!("fixture: {images} images at {size}x{size} under {}", out.display());
    draft.outputs.push(out.to_path_buf());
    // the manifest sits beside the tree so identical seeds produce
    // byte-identical dataset directories
    let manifest_path = out.with_extension("manifest.txt");
    draft.finish(&manifest_path)
}

fn cmd_prepare_cache(args: &ConfigArgs, out: &Path) -> Result<()> {
    let config = args.load()?;
    let mut draft = ManifestDraft::new("prepare-cache", &args.config, config.train.seed);
    draft.digests.push(("config".into(), config.digest()));
    let root = config.resolve_data_root()?;
    let dataset = load_dataset(&root)?;
    let encoder = SurrogateEncoder::build(config.encoder_seed, EncoderConfig::default());
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut wrote = 0usize;
    let mut skipped = 0usize;
    for item in &dataset.items {
        let (high_path, mid_path) = feature_paths(out, &item.id);
        if is_valid_tensor_file(&high_path) && is_valid_tensor_file(&mid_path) {
            skipped += 1;
            continue;
        }
        let pair = encoder.encode(&item.id, &item.image)?;
        save_cached_embedding(&pair, out)?;
        wrote += 1;
    }
    println!(
        "cache: wrote {wrote} image(s), skipped {skipped} valid entr(ies) in {}",
        out.display()
    );
    draft.outputs.push(out.to_path_buf());
    draft
        .digests
        .push(("encoder".into(), encoder.fingerprint().to_string()));
    draft.finish(&out.join("run_manifest.txt"))
}

fn cmd_make_registry(args: &ConfigArgs, out: &Path) -> Result<()> {
    let config = args.load()?;
    let mut draft = ManifestDraft::new("make-registry", &args.config, config.train.seed);
    draft.digests.push(("config".into(), config.digest()));
    let (dataset, split) = load_protocol(&config)?;
    let entries = build_registry(
        &dataset,
        &split,
        config.train.shots,
        config.registry_size,
        config.train.seed,
    )?;
    write_registry(out, &entries)?;
    println!(
        "registry: {} episodes for fold {} ({}-shot) at {}",
        entries.len(),
        split.fold_index(),
        config.train.shots,
        out.display()
    );
    draft.outputs.push(out.to_path_buf());
    draft
        .digests
        .push(("registry".into(), registry_digest(&entries)));
    draft.finish(&out.with_extension("manifest.txt"))
}

fn cmd_train(args: &ConfigArgs, out: &Path, flags: &str) -> Result<()> {
    let config = args.load()?;
    let flags = AblationFlags::parse(flags)?;
    let mut draft = ManifestDraft::new("train", &args.config, config.train.seed);
    draft.digests.push(("config".into(), config.digest()));
    let (dataset, split) = load_protocol(&config)?;
    let (encoder, decoder) = build_frozen(&config);

    let outcome = train(&config.train, &dataset, &split, &encoder, &decoder, flags)?;

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let checkpoint_dir = out.join("checkpoint");
    save_checkpoint(
        &checkpoint_dir,
        &outcome.params,
        &outcome.encoder_fingerprint,
        &outcome.decoder_fingerprint,
    )?;
    let log_path = out.join("training_log.csv");
    outcome.log.write_csv(&log_path)?;

    let final_ls = outcome
        .log
        .epoch_mean_self_guidance(config.train.epochs - 1)
        .unwrap_or(f64::NAN);
    println!(
        "train: {} steps, final-epoch mean self-guidance loss {final_ls:.4}",
        outcome.log.len()
    );
    println!("train: checkpoint at {}", checkpoint_dir.display());

    draft.outputs.push(checkpoint_dir);
    draft.outputs.push(log_path);
    draft
        .digests
        .push(("params".into(), outcome.params.fingerprint()));
    draft
        .digests
        .push(("encoder".into(), outcome.encoder_fingerprint.clone()));
    draft
        .digests
        .push(("decoder".into(), outcome.decoder_fingerprint.clone()));
    draft.finish(&out.join("run_manifest.txt"))
}

fn cmd_eval(
    args: &ConfigArgs,
    checkpoint: &Path,
    registry_path: &Path,
    out: &Path,
    flags: &str,
    threshold: Option<f64>,
) -> Result<()> {
    let config = args.load()?;
    let flags = AblationFlags::parse(flags)?;
    let threshold = threshold.unwrap_or(config.threshold);
    let mut draft = ManifestDraft::new("eval", &args.config, config.train.seed);
    draft.digests.push(("config".into(), config.digest()));
    let (dataset, split) = load_protocol(&config)?;
    let registry = read_registry(registry_path)?;
    let model = load_model(&config, checkpoint, flags)?;

    let report = evaluate(
        &model,
        &dataset,
        &split,
        &registry,
        config.train.shots,
        threshold,
        &config.digest(),
        &registry_digest(&registry),
    )?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let report_path = out.join("report.txt");
    write_report(&report, &report_path)?;
    println!(
        "eval: fold {} mIoU {:.4} over {} episodes -> {}",
        split.fold_index(),
        report.mean_miou,
        registry.len(),
        report_path.display()
    );
    draft.outputs.push(report_path);
    draft
        .digests
        .push(("registry".into(), registry_digest(&registry)));
    draft
        .digests
        .push(("params".into(), model.params.fingerprint()));
    draft.finish(&out.join("run_manifest.txt"))
}

fn cmd_ablate(args: &ConfigArgs, out: &Path, registry_path: Option<&Path>) -> Result<()> {
    let config = args.load()?;
    let mut draft = ManifestDraft::new("ablate", &args.config, config.train.seed);
    draft.digests.push(("config".into(), config.digest()));
    let (dataset, split) = load_protocol(&config)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let registry = match registry_path {
        Some(path) => read_registry(path)?,
        None => {
            let entries = build_registry(
                &dataset,
                &split,
                config.train.shots,
                config.registry_size,
                config.train.seed,
            )?;
            let path = out.join("registry.txt");
            write_registry(&path, &entries)?;
            draft.outputs.push(path);
            entries
        }
    };
    draft
        .digests
        .push(("registry".into(), registry_digest(&registry)));

    let setup = AblationSetup {
        dataset: &dataset,
        split: &split,
        registry: &registry,
        train_config: &config.train,
        encoder_seed: config.encoder_seed,
        decoder_seed: config.decoder_seed,
        threshold: config.threshold,
        config_digest: config.digest(),
    };
    let rows = AblationFlags::study_rows();
    let reports = run_ablation(&setup, &rows)?;
    for (flags, report) in rows.iter().zip(&reports) {
        let name = format!("report_{}.txt", flags.encode().replace(',', ""));
        let path = out.join(name);
        write_report(report, &path)?;
        println!(
            "ablate: flags {} -> mean mIoU {:.4} ({})",
            flags.encode(),
            report.mean_miou,
            path.display()
        );
        draft.outputs.push(path);
    }
    draft.finish(&out.join("run_manifest.txt"))
}

fn cmd_export_masks(
    args: &ConfigArgs,
    checkpoint: &Path,
    registry_path: &Path,
    out: &Path,
    threshold: Option<f64>,
) -> Result<()> {
    let config = args.load()?;
    let threshold = threshold.unwrap_or(config.threshold);
    let mut draft = ManifestDraft::new("export-masks", &args.config, config.train.seed);
    draft.digests.push(("config".into(), config.digest()));
    let (dataset, split) = load_protocol(&config)?;
    let registry = read_registry(registry_path)?;
    let model = load_model(&config, checkpoint, AblationFlags::ALL_ON)?;
    let written = export_masks(&model, &dataset, &split, &registry, threshold, out)?;
    println!("export-masks: {} masks under {}", written.len(), out.display());
    draft
        .digests
        .push(("registry".into(), registry_digest(&registry)));
    draft.outputs.extend(written);
    draft.finish(&out.join("run_manifest.txt"))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::MakeFixture {
            out,
            seed,
            images,
            size,
        } => cmd_make_fixture(out, *seed, *images, *size),
        Command::PrepareCache { config, out } => cmd_prepare_cache(config, out),
        Command::MakeRegistry { config, out } => cmd_make_registry(config, out),
        Command::Train { config, out, flags } => cmd_train(config, out, flags),
        Command::Eval {
            config,
            checkpoint,
            registry,
            out,
            flags,
            threshold,
        } => cmd_eval(config, checkpoint, registry, out, flags, *threshold),
        Command::Ablate {
            config,
            out,
            registry,
        } => cmd_ablate(config, out, registry.as_deref()),
        Command::ExportMasks {
            config,
            checkpoint,
            registry,
            out,
            threshold,
        } => cmd_export_masks(config, checkpoint, registry, out, *threshold),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_of(&err))
        }
    }
}

//! Command-line entry points: ingestion, synthetic data, sampler audits,
//! two-stage training, evaluation and embedding export.
//!
//! Every run derives all randomness from one root seed (`--seed`, fanned out
//! to named streams) and records its full effective configuration into the
//! output directory, so any result can be replayed exactly.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 invariant violation,
//! 3 numerical failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    generate_synthetic, load_pair_index, save_dataset, AugmentPolicy, Dataset, SyntheticConfig,
    INDEX_FILE, MANIFEST_FILE, ORACLE_FILE,
};
use crate::error::{Error, Result};
use crate::evaluation::{build_eval_pairs, evaluate_model, EvaluationReport};
use crate::models::{
    Checkpoint, Encoder, EncoderSpec, FusionClassifier, ProjectionHead, TrainableMode,
};
use crate::rng::{stream_rng, stream_seed, streams};
use crate::sampler::{dry_run, Sampler};
use crate::training::{train_classifier, train_contrastive, EvalHook, Stage1Config, Stage2Config};

/// Model widths; the encoder stands in for a face backbone at desk scale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder_hidden: usize,
    /// Embedding dimension D produced by the encoder.
    pub embedding_dim: usize,
    pub head_hidden: usize,
    pub classifier_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_hidden: 64,
            embedding_dim: 512,
            head_hidden: 512,
            classifier_hidden: 256,
        }
    }
}

/// Full configuration; a TOML config file mirrors this structure and CLI
/// flags override individual values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    /// Root seed; every random stream is derived from it by name.
    pub seed: u64,
    /// Fraction of families held out for evaluation.
    pub holdout_fraction: f64,
    /// Kin decision threshold on the classifier probability.
    pub threshold: f64,
    pub model: ModelConfig,
    pub augment: AugmentPolicy,
    pub synthetic: SyntheticConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            seed: 0,
            holdout_fraction: 0.2,
            threshold: 0.5,
            model: ModelConfig::default(),
            augment: AugmentPolicy::training_default(),
            synthetic: SyntheticConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
        }
    }
}

impl AppConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = match path {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => AppConfig::default(),
        };
        config.fan_out_seed();
        Ok(config)
    }

    /// Propagates the root seed into every component seed.
    fn fan_out_seed(&mut self) {
        self.synthetic.seed = self.seed;
        self.stage1.seed = self.seed;
        self.stage2.seed = self.seed;
    }

    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.fan_out_seed();
    }

    /// Serializes the effective configuration into `dir/config.toml`.
    pub fn record(&self, dir: &Path, command: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let body = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serializing config: {e}")))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, format!("# effective config for `{command}`\n{body}"))
            .map_err(|e| Error::io(&path, e))
    }

    pub fn as_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "kinver",
    about = "Kinship verification: contrastive pretraining, fusion classification, evaluation",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed for all random streams.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a pair index + manifest and print dataset statistics.
    Ingest {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset directory holding pairs.csv, manifest.csv and optionally
        /// oracle.csv.
        #[arg(long)]
        data: PathBuf,
        /// Also write the statistics and effective config here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic family dataset with oracle features.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        families: Option<usize>,
        #[arg(long)]
        archetype_dim: Option<usize>,
    },
    /// Stream sampler batches for auditing and assert every invariant.
    SampleDryRun {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 1)]
        epochs: usize,
        /// Directory for batches.txt + the effective config; the stream goes
        /// to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Audit without printing per-pair records.
        #[arg(long)]
        quiet: bool,
    },
    /// Stage 1: supervised contrastive pretraining of encoder + head.
    TrainContrastive {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Load externally provided encoder weights instead of a fresh init.
        #[arg(long)]
        init_encoder: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        /// Whether stage 1 updates the encoder or only the head.
        #[arg(long, value_enum, default_value_t = ModeArg::Finetuned)]
        encoder_mode: ModeArg,
        #[arg(long)]
        no_augment: bool,
        #[arg(long)]
        holdout_fraction: Option<f64>,
    },
    /// Stage 2: train the binary kin classifier on fused features.
    TrainClassifier {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint providing the pretrained encoder.
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long, value_enum, default_value_t = ModeArg::Frozen)]
        encoder_mode: ModeArg,
        #[arg(long)]
        negative_ratio: Option<f64>,
        /// Accept an encoder without stage-1 provenance.
        #[arg(long)]
        allow_unpretrained: bool,
        #[arg(long)]
        no_augment: bool,
        #[arg(long)]
        holdout_fraction: Option<f64>,
        /// Record holdout accuracy into the log every N steps.
        #[arg(long)]
        eval_every: Option<usize>,
    },
    /// Evaluate a trained model: per-relationship accuracy table.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint holding encoder + classifier (stage-2 output).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Holdout)]
        split: SplitArg,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        holdout_fraction: Option<f64>,
    },
    /// Write (image_id, embedding h, projection z) records for external
    /// visualization.
    ExportEmbeddings {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint holding encoder + projection head (stage-1 output).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for embeddings.csv + the effective config.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
        #[arg(long)]
        holdout_fraction: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Frozen,
    Finetuned,
}

impl From<ModeArg> for TrainableMode {
    fn from(mode: ModeArg) -> Self {
        match mode {
            ModeArg::Frozen => TrainableMode::Frozen,
            ModeArg::Finetuned => TrainableMode::Finetuned,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Holdout,
    All,
}

/// Loads `pairs.csv` + `manifest.csv` (+ `oracle.csv` when present) from a
/// dataset directory.
pub fn load_data_dir(dir: &Path) -> Result<Dataset> {
    let index = dir.join(INDEX_FILE);
    let manifest = dir.join(MANIFEST_FILE);
    let oracle = dir.join(ORACLE_FILE);
    let features = oracle.exists().then_some(oracle.as_path());
    load_pair_index(&index, &manifest, features)
}

fn select_split(dataset: Dataset, split: SplitArg, fraction: f64, seed: u64) -> Result<Dataset> {
    match split {
        SplitArg::All => Ok(dataset),
        SplitArg::Train => Ok(dataset.split_by_family(fraction, seed)?.0),
        SplitArg::Holdout => Ok(dataset.split_by_family(fraction, seed)?.1),
    }
}

fn dataset_summary(dataset: &Dataset) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "families: {}\nindividuals: {}\nimages: {}\npairs: {}\ninput dim: {} ({})\n",
        dataset.families().len(),
        dataset.individuals().len(),
        dataset.images().len(),
        dataset.pairs().len(),
        dataset.input_dim(),
        if dataset.has_features() {
            "feature-backed"
        } else {
            "image files"
        },
    ));
    out.push_str("pairs per relationship:\n");
    for (rel, count) in dataset.pair_counts_by_type() {
        out.push_str(&format!("  {:<5} {count}\n", rel.name()));
    }
    out
}

/// Runs one parsed command; errors map to exit codes via
/// [`Error::exit_code`].
pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest { common, data, out } => {
            let config = effective_config(&common)?;
            let dataset = load_data_dir(&data)?;
            let summary = dataset_summary(&dataset);
            print!("{summary}");
            if let Some(dir) = out {
                config.record(&dir, "ingest")?;
                let path = dir.join("stats.txt");
                std::fs::write(&path, summary).map_err(|e| Error::io(&path, e))?;
            }
            Ok(())
        }

        Command::Synth {
            common,
            out,
            families,
            archetype_dim,
        } => {
            let mut config = effective_config(&common)?;
            if let Some(n) = families {
                config.synthetic.num_families = n;
            }
            if let Some(d) = archetype_dim {
                config.synthetic.archetype_dim = d;
            }
            let data = generate_synthetic(&config.synthetic)?;
            save_dataset(&data.dataset, &out)?;
            config.record(&out, "synth")?;
            print!("{}", dataset_summary(&data.dataset));
            println!("written to {}", out.display());
            Ok(())
        }

        Command::SampleDryRun {
            common,
            data,
            batch_size,
            epochs,
            out,
            quiet,
        } => {
            let config = effective_config(&common)?;
            let dataset = load_data_dir(&data)?;
            let mut sampler = Sampler::new(
                &dataset,
                batch_size,
                stream_seed(config.seed, streams::SAMPLER),
            )?;
            let stream_path = out.as_ref().map(|dir| dir.join("batches.txt"));
            let mut sink: Box<dyn Write> = match (&out, &stream_path) {
                (Some(dir), Some(path)) => {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                    config.record(dir, "sample-dry-run")?;
                    Box::new(std::io::BufWriter::new(
                        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
                    ))
                }
                _ => Box::new(std::io::stdout().lock()),
            };
            let mut batch_index = 0usize;
            let mut write_error: Option<std::io::Error> = None;
            let stats = dry_run(&mut sampler, &dataset, epochs, |epoch, batch| {
                if quiet || write_error.is_some() {
                    return;
                }
                let mut emit = || -> std::io::Result<()> {
                    writeln!(sink, "# epoch {epoch} batch {batch_index}")?;
                    for sampled in &batch.pairs {
                        let pair = &dataset.pairs()[sampled.pair];
                        writeln!(
                            sink,
                            "({}, {}, {}, {}, {})",
                            dataset.family_id(pair.family),
                            dataset.individual(pair.person1).person_id,
                            dataset.image(sampled.image_x).id,
                            dataset.individual(pair.person2).person_id,
                            dataset.image(sampled.image_y).id,
                        )?;
                    }
                    Ok(())
                };
                if let Err(e) = emit() {
                    write_error = Some(e);
                }
                batch_index += 1;
            })?;
            if let Some(e) = write_error {
                return Err(Error::io(
                    stream_path.as_deref().unwrap_or(Path::new("stdout")),
                    e,
                ));
            }
            eprintln!(
                "dry run ok: {} epochs, {} batches, {} pairs served, \
                 {} duplicate replacements, {} duplicates dropped, {} windows dropped",
                epochs,
                stats.batches_emitted,
                stats.pairs_served,
                stats.duplicate_replacements,
                stats.duplicates_dropped,
                stats.windows_dropped,
            );
            Ok(())
        }

        Command::TrainContrastive {
            common,
            data,
            out,
            init_encoder,
            steps,
            batch_size,
            learning_rate,
            temperature,
            encoder_mode,
            no_augment,
            holdout_fraction,
        } => {
            let mut config = effective_config(&common)?;
            if let Some(v) = steps {
                config.stage1.steps = v;
            }
            if let Some(v) = batch_size {
                config.stage1.batch_size = v;
            }
            if let Some(v) = learning_rate {
                config.stage1.learning_rate = v;
            }
            if let Some(v) = temperature {
                config.stage1.temperature = v;
            }
            if let Some(v) = holdout_fraction {
                config.holdout_fraction = v;
            }
            if no_augment {
                config.stage1.augment = false;
            }

            let dataset = load_data_dir(&data)?;
            let (train, _holdout) =
                dataset.split_by_family(config.holdout_fraction, config.seed)?;

            let mut encoder = match &init_encoder {
                Some(path) => {
                    let encoder = Encoder::from_pretrained(path)?;
                    if encoder.input_dim() != train.input_dim() {
                        return Err(Error::Dimension(format!(
                            "pretrained encoder expects inputs of width {}, dataset provides {}",
                            encoder.input_dim(),
                            train.input_dim()
                        )));
                    }
                    encoder
                }
                None => Encoder::toy(
                    &EncoderSpec::new(
                        train.input_dim(),
                        config.model.encoder_hidden,
                        config.model.embedding_dim,
                    ),
                    &mut stream_rng(config.seed, streams::INIT_ENCODER),
                )?,
            };
            encoder.set_mode(encoder_mode.into());
            let mut head = ProjectionHead::new(
                encoder.embedding_dim(),
                config.model.head_hidden,
                &mut stream_rng(config.seed, streams::INIT_HEAD),
            )?;
            let mut sampler = Sampler::new(
                &train,
                config.stage1.batch_size,
                stream_seed(config.seed, "sampler/stage1"),
            )?;

            let log = train_contrastive(
                &train,
                &mut sampler,
                &mut encoder,
                &mut head,
                &config.augment,
                &config.stage1,
            )?;

            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            Checkpoint::new("train-contrastive", config.seed, config.as_json())
                .with_encoder(encoder.to_state())
                .with_head(head.mlp().clone())
                .save(&out.join("stage1.ckpt"))?;
            log.write_csv(&out.join("stage1-log.csv"))?;
            config.record(&out, "train-contrastive")?;
            match log.final_loss() {
                Some(loss) => println!(
                    "stage 1 done: {} steps, final loss {loss:.6} -> {}",
                    log.len(),
                    out.display()
                ),
                None => println!("stage 1 done: 0 steps (checkpoint = initialization)"),
            }
            Ok(())
        }

        Command::TrainClassifier {
            common,
            data,
            encoder: encoder_path,
            out,
            steps,
            batch_size,
            learning_rate,
            encoder_mode,
            negative_ratio,
            allow_unpretrained,
            no_augment,
            holdout_fraction,
            eval_every,
        } => {
            let mut config = effective_config(&common)?;
            if let Some(v) = steps {
                config.stage2.steps = v;
            }
            if let Some(v) = batch_size {
                config.stage2.batch_size = v;
            }
            if let Some(v) = learning_rate {
                config.stage2.learning_rate = v;
            }
            if let Some(v) = negative_ratio {
                config.stage2.negative_ratio = v;
            }
            if let Some(v) = holdout_fraction {
                config.holdout_fraction = v;
            }
            config.stage2.encoder_mode = encoder_mode.into();
            config.stage2.allow_unpretrained_encoder = allow_unpretrained;
            if no_augment {
                config.stage2.augment = false;
            }

            let dataset = load_data_dir(&data)?;
            let (train, holdout) =
                dataset.split_by_family(config.holdout_fraction, config.seed)?;

            let ckpt = Checkpoint::load(&encoder_path)?;
            let encoder_state = ckpt.encoder.clone().ok_or_else(|| {
                Error::Checkpoint(format!("{} holds no encoder", encoder_path.display()))
            })?;
            let mut encoder = Encoder::from_state(encoder_state);
            if encoder.input_dim() != train.input_dim() {
                return Err(Error::Dimension(format!(
                    "encoder expects inputs of width {}, dataset provides {}",
                    encoder.input_dim(),
                    train.input_dim()
                )));
            }
            let mut classifier = FusionClassifier::new(
                encoder.embedding_dim(),
                config.model.classifier_hidden,
                &mut stream_rng(config.seed, streams::INIT_CLASSIFIER),
            )?;
            let mut sampler = Sampler::new(
                &train,
                config.stage2.batch_size,
                stream_seed(config.seed, "sampler/stage2"),
            )?;

            let eval_pairs = match eval_every {
                Some(_) => build_eval_pairs(&holdout, stream_seed(config.seed, streams::EVAL_PAIRS))?,
                None => Vec::new(),
            };
            let hook = eval_every.map(|every| EvalHook {
                every,
                dataset: &holdout,
                pairs: &eval_pairs,
                threshold: config.threshold,
            });

            let log = train_classifier(
                &train,
                &mut sampler,
                &mut encoder,
                &mut classifier,
                &config.augment,
                &config.stage2,
                hook.as_ref(),
            )?;

            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let mut out_ckpt = Checkpoint::new("train-classifier", config.seed, config.as_json())
                .with_encoder(encoder.to_state())
                .with_classifier(classifier.mlp().clone());
            if let Some(head) = ckpt.head {
                out_ckpt = out_ckpt.with_head(head);
            }
            out_ckpt.save(&out.join("stage2.ckpt"))?;
            log.write_csv(&out.join("stage2-log.csv"))?;
            config.record(&out, "train-classifier")?;
            println!(
                "stage 2 done: {} steps, final loss {:.6} -> {}",
                log.len(),
                log.final_loss().unwrap_or(f64::NAN),
                out.display()
            );
            Ok(())
        }

        Command::Evaluate {
            common,
            data,
            checkpoint,
            out,
            split,
            threshold,
            holdout_fraction,
        } => {
            let mut config = effective_config(&common)?;
            if let Some(v) = threshold {
                config.threshold = v;
            }
            if let Some(v) = holdout_fraction {
                config.holdout_fraction = v;
            }
            let dataset = load_data_dir(&data)?;
            let subset = select_split(dataset, split, config.holdout_fraction, config.seed)?;

            let ckpt = Checkpoint::load(&checkpoint)?;
            let encoder = Encoder::from_state(ckpt.encoder.ok_or_else(|| {
                Error::Checkpoint(format!("{} holds no encoder", checkpoint.display()))
            })?);
            let classifier = FusionClassifier::from_mlp(ckpt.classifier.ok_or_else(|| {
                Error::Checkpoint(format!("{} holds no classifier", checkpoint.display()))
            })?)?;

            let pairs = build_eval_pairs(&subset, stream_seed(config.seed, streams::EVAL_PAIRS))?;
            let report = evaluate_model(&subset, &pairs, &encoder, &classifier, config.threshold)?;
            print!("{}", report.render_table());
            if let Some(dir) = out {
                write_report(&report, &dir)?;
                config.record(&dir, "evaluate")?;
            }
            Ok(())
        }

        Command::ExportEmbeddings {
            common,
            data,
            checkpoint,
            out,
            split,
            holdout_fraction,
        } => {
            let mut config = effective_config(&common)?;
            if let Some(v) = holdout_fraction {
                config.holdout_fraction = v;
            }
            let dataset = load_data_dir(&data)?;
            let subset = select_split(dataset, split, config.holdout_fraction, config.seed)?;

            let ckpt = Checkpoint::load(&checkpoint)?;
            let encoder = Encoder::from_state(ckpt.encoder.ok_or_else(|| {
                Error::Checkpoint(format!("{} holds no encoder", checkpoint.display()))
            })?);
            let head = ProjectionHead::from_mlp(ckpt.head.ok_or_else(|| {
                Error::Checkpoint(format!(
                    "{} holds no projection head",
                    checkpoint.display()
                ))
            })?)?;

            let records = out.join("embeddings.csv");
            export_embeddings(&subset, &encoder, &head, &records)?;
            config.record(&out, "export-embeddings")?;
            println!(
                "wrote {} embedding records to {}",
                subset.images().len(),
                records.display()
            );
            Ok(())
        }
    }
}

fn effective_config(common: &CommonArgs) -> Result<AppConfig> {
    let mut config = AppConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.set_seed(seed);
    }
    config.augment.validate()?;
    Ok(config)
}

fn write_report(report: &EvaluationReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let table_path = dir.join("report.txt");
    std::fs::write(&table_path, report.render_table()).map_err(|e| Error::io(&table_path, e))?;
    report.write_csv(&dir.join("report.csv"))
}

/// Writes `image_id,h0..,z0..` rows for every image of the dataset.
fn export_embeddings(
    dataset: &Dataset,
    encoder: &Encoder,
    head: &ProjectionHead,
    path: &Path,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    let d = encoder.embedding_dim();
    let p = head.output_dim();
    let header: Vec<String> = std::iter::once("image_id".to_owned())
        .chain((0..d).map(|k| format!("h{k}")))
        .chain((0..p).map(|k| format!("z{k}")))
        .collect();
    writeln!(w, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
    for individual in dataset.individuals() {
        for &img in &individual.images {
            let input = dataset.eval_input(img)?;
            let input = input.insert_axis(ndarray::Axis(0));
            let h = encoder.encode_batch(input.view())?;
            let z = head.project(h.view())?;
            let mut fields = Vec::with_capacity(1 + d + p);
            fields.push(dataset.image(img).id.clone());
            fields.extend(h.row(0).iter().map(|v| format!("{v}")));
            fields.extend(z.row(0).iter().map(|v| format!("{v}")));
            writeln!(w, "{}", fields.join(",")).map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

/// Parses the CLI and runs it; returns the process exit code.
pub fn main_entry() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

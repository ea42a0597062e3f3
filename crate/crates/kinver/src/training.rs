//! Two-stage training: supervised contrastive pretraining of the encoder and
//! projection head, then binary-classifier training over fused embedding
//! pairs with the encoder frozen or finetuned.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AugmentPolicy, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalPair};
use crate::loss::{batch_loss_with_grad, ProjectedBatch};
use crate::models::{Encoder, FusionClassifier, ProjectionHead, TrainableMode};
use crate::nn::sigmoid;
use crate::optim::{Adam, AdamConfig, Sgd, SgdConfig};
use crate::rng::{stream_rng, streams};
use crate::sampler::{Batch, Sampler};

/// Stage-1 hyperparameters: SGD over the supervised contrastive loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub temperature: f64,
    pub batch_size: usize,
    /// Optimizer updates; one step is one update on one batch.
    pub steps: usize,
    pub seed: u64,
    /// Apply the augmentation policy to every image of every pair.
    pub augment: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            learning_rate: 5e-5,
            weight_decay: 1e-4,
            momentum: 0.9,
            temperature: 0.07,
            batch_size: 32,
            steps: 1250,
            seed: 0,
            augment: true,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Stage-2 hyperparameters: Adam over binary cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub encoder_mode: TrainableMode,
    /// Negatives per positive, drawn from in-batch cross pairs.
    pub negative_ratio: f64,
    pub seed: u64,
    pub augment: bool,
    /// Override for the stage-ordering check; stage 2 normally refuses an
    /// encoder without stage-1 provenance.
    pub allow_unpretrained_encoder: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            learning_rate: 1e-4,
            batch_size: 32,
            steps: 1500,
            encoder_mode: TrainableMode::Frozen,
            negative_ratio: 1.0,
            seed: 0,
            augment: true,
            allow_unpretrained_encoder: false,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("stage 2 needs at least 1 step".into()));
        }
        if self.negative_ratio.is_nan() || self.negative_ratio <= 0.0 {
            return Err(Error::Config(format!(
                "negative_ratio must be positive, got {}",
                self.negative_ratio
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// One optimizer step: loss, wall time since training start, and the average
/// evaluation accuracy when a snapshot was taken at this step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: f64,
    pub accuracy: Option<f64>,
}

/// Per-step training log with strictly increasing step indices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<StepRecord>,
}

impl TrainingLog {
    fn push(&mut self, record: StepRecord) {
        if let Some(last) = self.records.last() {
            assert!(record.step > last.step, "step indices must increase");
        }
        self.records.push(record);
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    /// Mean loss over records `[from, to)`.
    pub fn mean_loss(&self, from: usize, to: usize) -> f64 {
        let slice = &self.records[from..to.min(self.records.len())];
        slice.iter().map(|r| r.loss).sum::<f64>() / slice.len().max(1) as f64
    }

    /// Writes `step,loss[,accuracy]` lines under a `step,loss,accuracy`
    /// header; the accuracy field is empty for steps without a snapshot.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        );
        writeln!(w, "step,loss,accuracy").map_err(|e| Error::io(path, e))?;
        for r in &self.records {
            match r.accuracy {
                Some(acc) => writeln!(w, "{},{},{}", r.step, r.loss, acc),
                None => writeln!(w, "{},{}", r.step, r.loss),
            }
            .map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Mid-training evaluation snapshots for the log (accuracy curve data).
pub struct EvalHook<'a> {
    pub every: usize,
    pub dataset: &'a Dataset,
    pub pairs: &'a [EvalPair],
    pub threshold: f64,
}

fn batch_image_rows(batch: &Batch) -> Vec<crate::dataset::ImageIdx> {
    let mut rows = Vec::with_capacity(2 * batch.len());
    rows.extend(batch.pairs.iter().map(|p| p.image_x));
    rows.extend(batch.pairs.iter().map(|p| p.image_y));
    rows
}

fn ensure_finite(loss: f32, step: usize, batch: &Batch, dataset: &Dataset) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    Err(Error::NonFiniteLoss {
        step,
        families: batch
            .family_ids(dataset)
            .into_iter()
            .map(str::to_owned)
            .collect(),
    })
}

/// Stage 1: trains the encoder (per its trainable mode) and the projection
/// head by SGD on the supervised contrastive batch loss. Returns the loss
/// log; `steps = 0` leaves the parameters untouched and the log empty.
pub fn train_contrastive(
    dataset: &Dataset,
    sampler: &mut Sampler,
    encoder: &mut Encoder,
    head: &mut ProjectionHead,
    policy: &AugmentPolicy,
    config: &Stage1Config,
) -> Result<TrainingLog> {
    config.validate()?;
    if encoder.embedding_dim() != head.input_dim() {
        return Err(Error::Dimension(format!(
            "encoder produces {}-dim embeddings but the head expects {}",
            encoder.embedding_dim(),
            head.input_dim()
        )));
    }
    let sgd_config = SgdConfig {
        learning_rate: config.learning_rate,
        momentum: config.momentum,
        weight_decay: config.weight_decay,
    };
    let mut encoder_opt = Sgd::new(sgd_config, encoder.mlp());
    let mut head_opt = Sgd::new(sgd_config, head.mlp());
    let mut augment_rng = stream_rng(config.seed, streams::AUGMENT_STAGE1);
    let policy = config.augment.then_some(policy);

    let mut log = TrainingLog::default();
    let started = Instant::now();
    for step in 0..config.steps {
        let batch = sampler.next_batch_cycling()?;
        let rows = batch_image_rows(&batch);
        let inputs = dataset.batch_inputs(&rows, policy, &mut augment_rng)?;

        let (h, encoder_cache) = encoder.forward_cached(inputs.view())?;
        let (z, head_cache) = head.forward_cached(h.view())?;
        let projected = ProjectedBatch::from_stacked(z, config.temperature as f32)?;
        let (loss, d_z) = batch_loss_with_grad(&projected);
        ensure_finite(loss, step, &batch, dataset)?;

        let (head_grads, d_h) = head.backward(&head_cache, d_z.view());
        if encoder.mode() == TrainableMode::Finetuned {
            let (encoder_grads, _) = encoder.backward(&encoder_cache, d_h.view());
            encoder_opt.step(encoder.mlp_mut(), &encoder_grads);
        }
        head_opt.step(head.mlp_mut(), &head_grads);

        log.push(StepRecord {
            step,
            loss: f64::from(loss),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            accuracy: None,
        });
    }
    if config.steps > 0 {
        encoder.mark_stage1_trained();
    }
    Ok(log)
}

/// Row indices of one training example within the stacked embedding batch.
pub type ExampleRows = (usize, usize);

/// Positive and negative example row pairs for one stage-2 batch, in the
/// stacked layout (row i = image_x of pair i, row N+i = image_y of pair i).
/// Positives are the batch's kin pairs; negatives are sampled uniformly
/// without replacement from all cross-pair image combinations, which the
/// distinct-family batch invariant guarantees to be non-kin.
pub fn stage2_examples(
    num_pairs: usize,
    negative_ratio: f64,
    rng: &mut impl Rng,
) -> (Vec<ExampleRows>, Vec<ExampleRows>) {
    let positives: Vec<ExampleRows> = (0..num_pairs).map(|i| (i, num_pairs + i)).collect();
    let mut candidates = Vec::with_capacity(2 * num_pairs * (num_pairs - 1));
    for i in 0..num_pairs {
        for j in (i + 1)..num_pairs {
            candidates.push((i, j));
            candidates.push((i, num_pairs + j));
            candidates.push((num_pairs + i, j));
            candidates.push((num_pairs + i, num_pairs + j));
        }
    }
    let wanted = ((num_pairs as f64 * negative_ratio).round() as usize).max(1);
    let take = wanted.min(candidates.len());
    let chosen = rand::seq::index::sample(rng, candidates.len(), take);
    let negatives = chosen.into_iter().map(|k| candidates[k]).collect();
    (positives, negatives)
}

/// Stable binary cross-entropy over logits, plus its gradient.
fn bce_with_logits(logits: &Array2<f32>, labels: &Array1<f32>) -> (f32, Array2<f32>) {
    let m = logits.nrows() as f32;
    let mut total = 0.0f32;
    let mut grad = Array2::zeros(logits.raw_dim());
    for (i, (&label, row)) in labels.iter().zip(logits.rows()).enumerate() {
        let l = row[0];
        total += l.max(0.0) - l * label + (-l.abs()).exp().ln_1p();
        grad[(i, 0)] = (sigmoid(l) - label) / m;
    }
    (total / m, grad)
}

/// Stage 2: trains the binary classifier (and, in finetuned mode, the
/// encoder) with Adam on BCE over fused embedding pairs. Refuses encoders
/// without the stage-1 provenance marker unless the config overrides it.
pub fn train_classifier(
    dataset: &Dataset,
    sampler: &mut Sampler,
    encoder: &mut Encoder,
    classifier: &mut FusionClassifier,
    policy: &AugmentPolicy,
    config: &Stage2Config,
    eval: Option<&EvalHook>,
) -> Result<TrainingLog> {
    config.validate()?;
    if !encoder.stage1_trained() && !config.allow_unpretrained_encoder {
        return Err(Error::Config(
            "the encoder has not been pretrained (stage 1); rerun after \
             train-contrastive or pass allow_unpretrained_encoder"
                .into(),
        ));
    }
    if classifier.embedding_dim() != encoder.embedding_dim() {
        return Err(Error::Dimension(format!(
            "classifier expects {}-dim embeddings, encoder produces {}",
            classifier.embedding_dim(),
            encoder.embedding_dim()
        )));
    }
    encoder.set_mode(config.encoder_mode);

    let adam_config = AdamConfig::with_learning_rate(config.learning_rate);
    let mut classifier_opt = Adam::new(adam_config, classifier.mlp());
    let mut encoder_opt = Adam::new(adam_config, encoder.mlp());
    let mut augment_rng = stream_rng(config.seed, streams::AUGMENT_STAGE2);
    let mut negative_rng = stream_rng(config.seed, streams::NEGATIVES);
    let policy = config.augment.then_some(policy);

    let mut log = TrainingLog::default();
    let started = Instant::now();
    for step in 0..config.steps {
        let batch = sampler.next_batch_cycling()?;
        let n = batch.len();
        let rows = batch_image_rows(&batch);
        let inputs = dataset.batch_inputs(&rows, policy, &mut augment_rng)?;
        let (h, encoder_cache) = encoder.forward_cached(inputs.view())?;

        let (positives, negatives) = stage2_examples(n, config.negative_ratio, &mut negative_rng);
        for &(a, b) in &negatives {
            let fam_a = batch.kin_pair(dataset, a % n).family;
            let fam_b = batch.kin_pair(dataset, b % n).family;
            if fam_a == fam_b {
                return Err(Error::Invariant(format!(
                    "stage-2 negative joins two images of family {}",
                    dataset.family_id(fam_a)
                )));
            }
        }

        let examples: Vec<(usize, usize, f32)> = positives
            .iter()
            .map(|&(a, b)| (a, b, 1.0))
            .chain(negatives.iter().map(|&(a, b)| (a, b, 0.0)))
            .collect();
        let m = examples.len();
        let d = encoder.embedding_dim();
        let mut h_a = Array2::zeros((m, d));
        let mut h_b = Array2::zeros((m, d));
        let mut labels = Array1::zeros(m);
        for (row, &(a, b, label)) in examples.iter().enumerate() {
            h_a.row_mut(row).assign(&h.row(a));
            h_b.row_mut(row).assign(&h.row(b));
            labels[row] = label;
        }
        let fused = crate::models::fuse_batch(h_a.view(), h_b.view())?;
        let (logits, classifier_cache) = classifier.forward_logits_cached(fused.view())?;
        let (loss, d_logits) = bce_with_logits(&logits, &labels);
        ensure_finite(loss, step, &batch, dataset)?;

        let (classifier_grads, d_fused) =
            classifier.backward_from_logits(&classifier_cache, d_logits.view());
        if config.encoder_mode == TrainableMode::Finetuned {
            let (d_ha, d_hb) = crate::models::fuse_batch_backward(
                h_a.view(),
                h_b.view(),
                d_fused.view(),
            );
            // examples share embedding rows; gradients accumulate
            let mut d_h = Array2::zeros(h.raw_dim());
            for (row, &(a, b, _)) in examples.iter().enumerate() {
                for k in 0..d {
                    d_h[(a, k)] += d_ha[(row, k)];
                    d_h[(b, k)] += d_hb[(row, k)];
                }
            }
            let (encoder_grads, _) = encoder.backward(&encoder_cache, d_h.view());
            encoder_opt.step(encoder.mlp_mut(), &encoder_grads);
        }
        classifier_opt.step(classifier.mlp_mut(), &classifier_grads);

        let accuracy = match eval {
            Some(hook) if hook.every > 0 && (step + 1) % hook.every == 0 => {
                let report = evaluation::evaluate_model(
                    hook.dataset,
                    hook.pairs,
                    encoder,
                    classifier,
                    hook.threshold,
                )?;
                Some(report.unweighted_average)
            }
            _ => None,
        };

        log.push(StepRecord {
            step,
            loss: f64::from(loss),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            accuracy,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticConfig};
    use crate::models::EncoderSpec;
    use crate::rng::seeded_rng;

    fn synthetic() -> Dataset {
        generate_synthetic(&SyntheticConfig {
            num_families: 20,
            archetype_dim: 8,
            seed: 42,
            ..SyntheticConfig::default()
        })
        .unwrap()
        .dataset
    }

    fn toy_models(dataset: &Dataset, seed: u64) -> (Encoder, ProjectionHead) {
        let encoder = Encoder::toy(
            &EncoderSpec::new(dataset.input_dim(), 32, 16),
            &mut stream_rng(seed, streams::INIT_ENCODER),
        )
        .unwrap();
        let head =
            ProjectionHead::new(16, 32, &mut stream_rng(seed, streams::INIT_HEAD)).unwrap();
        (encoder, head)
    }

    fn stage1_test_config(steps: usize) -> Stage1Config {
        // toy-scale learning rate; paper defaults target a pretrained backbone
        Stage1Config {
            learning_rate: 0.05,
            steps,
            batch_size: 8,
            seed: 1,
            ..Stage1Config::default()
        }
    }

    #[test]
    fn zero_steps_changes_nothing_and_logs_nothing() {
        let ds = synthetic();
        let (mut encoder, mut head) = toy_models(&ds, 7);
        let before_encoder = encoder.mlp().clone();
        let before_head = head.mlp().clone();
        let mut sampler = Sampler::new(&ds, 8, 3).unwrap();
        let log = train_contrastive(
            &ds,
            &mut sampler,
            &mut encoder,
            &mut head,
            &AugmentPolicy::training_default(),
            &stage1_test_config(0),
        )
        .unwrap();
        assert!(log.is_empty());
        assert!(encoder.mlp().params_identical(&before_encoder));
        assert!(head.mlp().params_identical(&before_head));
        assert!(!encoder.stage1_trained());
    }

    #[test]
    fn contrastive_loss_decreases_over_training() {
        let ds = synthetic();
        let (mut encoder, mut head) = toy_models(&ds, 7);
        let mut sampler = Sampler::new(&ds, 8, 3).unwrap();
        let log = train_contrastive(
            &ds,
            &mut sampler,
            &mut encoder,
            &mut head,
            &AugmentPolicy::training_default(),
            &stage1_test_config(300),
        )
        .unwrap();
        assert_eq!(log.len(), 300);
        let initial = log.mean_loss(0, 50);
        let last = log.mean_loss(250, 300);
        assert!(
            last < initial,
            "no convergence: first-50 mean {initial}, last-50 mean {last}"
        );
        assert!(encoder.stage1_trained());
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let ds = synthetic();
        let run = || {
            let (mut encoder, mut head) = toy_models(&ds, 7);
            let mut sampler = Sampler::new(&ds, 8, 3).unwrap();
            let log = train_contrastive(
                &ds,
                &mut sampler,
                &mut encoder,
                &mut head,
                &AugmentPolicy::training_default(),
                &stage1_test_config(60),
            )
            .unwrap();
            (log.final_loss().unwrap(), encoder, head)
        };
        let (loss_a, enc_a, head_a) = run();
        let (loss_b, enc_b, head_b) = run();
        assert_eq!(loss_a.to_bits(), loss_b.to_bits());
        assert!(enc_a.mlp().params_identical(enc_b.mlp()));
        assert!(head_a.mlp().params_identical(head_b.mlp()));
    }

    #[test]
    fn frozen_stage1_trains_only_the_head() {
        let ds = synthetic();
        let (mut encoder, mut head) = toy_models(&ds, 7);
        encoder.set_mode(TrainableMode::Frozen);
        let before = encoder.mlp().clone();
        let before_head = head.mlp().clone();
        let mut sampler = Sampler::new(&ds, 8, 3).unwrap();
        train_contrastive(
            &ds,
            &mut sampler,
            &mut encoder,
            &mut head,
            &AugmentPolicy::training_default(),
            &stage1_test_config(10),
        )
        .unwrap();
        assert!(encoder.mlp().params_identical(&before));
        assert!(!head.mlp().params_identical(&before_head));
    }

    #[test]
    fn finetuned_stage1_updates_the_encoder() {
        let ds = synthetic();
        let (mut encoder, mut head) = toy_models(&ds, 7);
        let before = encoder.mlp().clone();
        let mut sampler = Sampler::new(&ds, 8, 3).unwrap();
        train_contrastive(
            &ds,
            &mut sampler,
            &mut encoder,
            &mut head,
            &AugmentPolicy::training_default(),
            &stage1_test_config(1),
        )
        .unwrap();
        assert!(!encoder.mlp().params_identical(&before));
    }

    #[test]
    fn stage2_requires_a_pretrained_encoder() {
        let ds = synthetic();
        let (mut encoder, _) = toy_models(&ds, 7);
        let mut classifier =
            FusionClassifier::new(16, 16, &mut seeded_rng(4)).unwrap();
        let mut sampler = Sampler::new(&ds, 8, 3).unwrap();
        let config = Stage2Config {
            steps: 1,
            batch_size: 8,
            ..Stage2Config::default()
        };
        let err = train_classifier(
            &ds,
            &mut sampler,
            &mut encoder,
            &mut classifier,
            &AugmentPolicy::training_default(),
            &config,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));

        // the explicit override unblocks it
        let config = Stage2Config {
            allow_unpretrained_encoder: true,
            ..config
        };
        train_classifier(
            &ds,
            &mut sampler,
            &mut encoder,
            &mut classifier,
            &AugmentPolicy::training_default(),
            &config,
            None,
        )
        .unwrap();
    }

    #[test]
    fn frozen_stage2_leaves_the_encoder_bitwise_identical() {
        let ds = synthetic();
        let (mut encoder, _) = toy_models(&ds, 7);
        encoder.mark_stage1_trained();
        let before = encoder.mlp().clone();
        let mut classifier =
            FusionClassifier::new(16, 16, &mut seeded_rng(4)).unwrap();
        let mut sampler = Sampler::new(&ds, 8, 3).unwrap();
        let config = Stage2Config {
            steps: 25,
            batch_size: 8,
            learning_rate: 1e-3,
            ..Stage2Config::default()
        };
        train_classifier(
            &ds,
            &mut sampler,
            &mut encoder,
            &mut classifier,
            &AugmentPolicy::training_default(),
            &config,
            None,
        )
        .unwrap();
        assert!(encoder.mlp().params_identical(&before));
    }

    #[test]
    fn finetuned_stage2_updates_the_encoder() {
        let ds = synthetic();
        let (mut encoder, _) = toy_models(&ds, 7);
        encoder.mark_stage1_trained();
        let before = encoder.mlp().clone();
        let mut classifier =
            FusionClassifier::new(16, 16, &mut seeded_rng(4)).unwrap();
        let mut sampler = Sampler::new(&ds, 8, 3).unwrap();
        let config = Stage2Config {
            steps: 5,
            batch_size: 8,
            encoder_mode: TrainableMode::Finetuned,
            ..Stage2Config::default()
        };
        train_classifier(
            &ds,
            &mut sampler,
            &mut encoder,
            &mut classifier,
            &AugmentPolicy::training_default(),
            &config,
            None,
        )
        .unwrap();
        assert!(!encoder.mlp().params_identical(&before));
    }

    #[test]
    fn negative_ratio_one_gives_one_negative_per_positive() {
        let mut rng = seeded_rng(9);
        for n in [2usize, 4, 8, 32] {
            let (pos, neg) = stage2_examples(n, 1.0, &mut rng);
            assert_eq!(pos.len(), n);
            assert_eq!(neg.len(), n);
            for &(a, b) in &neg {
                assert_ne!(a % n, b % n, "negative must join two different pairs");
            }
        }
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let logits = Array2::from_shape_vec((4, 1), vec![0.3f32, -1.5, 2.0, 0.0]).unwrap();
        let labels = Array1::from(vec![1.0f32, 0.0, 1.0, 0.0]);
        let (_, grad) = bce_with_logits(&logits, &labels);
        let h = 1e-3f32;
        for i in 0..4 {
            let mut plus = logits.clone();
            plus[(i, 0)] += h;
            let mut minus = logits.clone();
            minus[(i, 0)] -= h;
            let (lp, _) = bce_with_logits(&plus, &labels);
            let (lm, _) = bce_with_logits(&minus, &labels);
            let numeric = (lp - lm) / (2.0 * h);
            assert!(
                (grad[(i, 0)] - numeric).abs() < 1e-3,
                "component {i}: {} vs {numeric}",
                grad[(i, 0)]
            );
        }
    }
}

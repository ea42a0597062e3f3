//! Self-describing model checkpoints.
//!
//! A checkpoint is a JSON container holding whichever components a stage
//! produced (encoder, projection head, classifier), the configuration that
//! produced them, and the root seed. Floats are written in shortest
//! round-trip decimal form, so a reloaded checkpoint evaluates bit-identically.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mlp;
use super::TrainableMode;

pub const CHECKPOINT_FORMAT: &str = "kinver-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Encoder parameters plus its runtime markers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderState {
    pub mlp: Mlp<f32>,
    pub mode: TrainableMode,
    pub stage1_trained: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Subcommand or stage that wrote the file.
    pub created_by: String,
    pub root_seed: u64,
    /// Effective configuration snapshot of the producing run.
    pub config: serde_json::Value,
    pub encoder: Option<EncoderState>,
    pub head: Option<Mlp<f32>>,
    pub classifier: Option<Mlp<f32>>,
}

impl Checkpoint {
    pub fn new(created_by: impl Into<String>, root_seed: u64, config: serde_json::Value) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_owned(),
            version: CHECKPOINT_VERSION,
            created_by: created_by.into(),
            root_seed,
            config,
            encoder: None,
            head: None,
            classifier: None,
        }
    }

    pub fn with_encoder(mut self, state: EncoderState) -> Self {
        self.encoder = Some(state);
        self
    }

    pub fn with_head(mut self, head: Mlp<f32>) -> Self {
        self.head = Some(head);
        self
    }

    pub fn with_classifier(mut self, classifier: Mlp<f32>) -> Self {
        self.classifier = Some(classifier);
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(file), self)
            .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Checkpoint(format!("reading {}: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "{} is not a {CHECKPOINT_FORMAT} file (format {:?})",
                path.display(),
                ckpt.format
            )));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{} has unsupported version {} (expected {CHECKPOINT_VERSION})",
                path.display(),
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Encoder, EncoderSpec, FusionClassifier, ProjectionHead};
    use crate::rng::seeded_rng;
    use ndarray::Array2;
    use rand::Rng;

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");

        let mut rng = seeded_rng(17);
        let encoder = Encoder::toy(&EncoderSpec::new(6, 10, 8), &mut rng).unwrap();
        let head = ProjectionHead::new(8, 16, &mut rng).unwrap();
        let classifier = FusionClassifier::new(8, 12, &mut rng).unwrap();

        Checkpoint::new("test", 17, serde_json::json!({"note": "round trip"}))
            .with_encoder(encoder.to_state())
            .with_head(head.mlp().clone())
            .with_classifier(classifier.mlp().clone())
            .save(&path)
            .unwrap();

        let loaded = Checkpoint::load(&path).unwrap();
        let encoder2 = Encoder::from_state(loaded.encoder.unwrap());
        let head2 = ProjectionHead::from_mlp(loaded.head.unwrap()).unwrap();
        let classifier2 = FusionClassifier::from_mlp(loaded.classifier.unwrap()).unwrap();

        let mut rng = seeded_rng(3);
        let x = Array2::from_shape_simple_fn((4, 6), || rng.random_range(-1.0f32..1.0));
        let h1 = encoder.encode_batch(x.view()).unwrap();
        let h2 = encoder2.encode_batch(x.view()).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(
            head.project(h1.view()).unwrap(),
            head2.project(h2.view()).unwrap()
        );
        let fused = crate::models::fuse_batch(h1.view(), h1.view()).unwrap();
        assert_eq!(
            classifier.probabilities(fused.view()).unwrap(),
            classifier2.probabilities(fused.view()).unwrap()
        );
        assert!(!encoder2.stage1_trained());
    }

    #[test]
    fn wrong_format_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.ckpt");
        std::fs::write(
            &path,
            serde_json::json!({
                "format": "something-else", "version": 1, "created_by": "x",
                "root_seed": 0, "config": {}, "encoder": null, "head": null,
                "classifier": null
            })
            .to_string(),
        )
        .unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::Checkpoint(_))
        ));
    }
}

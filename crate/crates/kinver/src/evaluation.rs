//! Per-relationship-type verification accuracy.
//!
//! Evaluation pairs are balanced 1:1 per relationship type: every kin pair
//! gets a matching non-kin pair built by swapping the second individual for
//! one from a different family. Reports carry one accuracy per relationship
//! type plus two averages — the unweighted mean over types (the headline)
//! and the pair-weighted mean — since averaging conventions differ.

use std::collections::HashMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ImageIdx, RelationshipType};
use crate::error::{Error, Result};
use crate::models::{classify_pair, Encoder, FusionClassifier};
use crate::rng::{stream_rng, streams};
use crate::sampler::select_least_seen;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// One labeled evaluation pair. Non-kin pairs join individuals from distinct
/// families and carry the relationship type of the positive they mirror.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalPair {
    pub image_x: ImageIdx,
    pub image_y: ImageIdx,
    pub kin: bool,
    pub relationship: RelationshipType,
}

/// Builds a balanced evaluation list: one positive and one matched negative
/// per kin pair. Selection uses least-seen images under evaluation-local
/// counters; negatives draw a uniform other family, then a uniform individual
/// within it. Deterministic under the seed.
pub fn build_eval_pairs(dataset: &Dataset, seed: u64) -> Result<Vec<EvalPair>> {
    if dataset.pairs().is_empty() {
        return Err(Error::Config("no kin pairs to evaluate".into()));
    }
    if dataset.families().len() < 2 {
        return Err(Error::Config(
            "cannot build non-kin pairs from a single family".into(),
        ));
    }
    let mut by_family: Vec<Vec<usize>> = vec![Vec::new(); dataset.families().len()];
    for (p, individual) in dataset.individuals().iter().enumerate() {
        by_family[individual.family.0].push(p);
    }
    let populated: Vec<usize> = (0..by_family.len())
        .filter(|&f| !by_family[f].is_empty())
        .collect();

    let mut rng = stream_rng(seed, streams::EVAL_PAIRS);
    let mut counters = vec![0u64; dataset.images().len()];
    let select = |person: crate::dataset::PersonIdx, counters: &mut Vec<u64>| {
        let img = select_least_seen(dataset, person, counters);
        counters[img.0] += 1;
        img
    };

    let mut out = Vec::with_capacity(2 * dataset.pairs().len());
    for pair in dataset.pairs() {
        let image_x = select(pair.person1, &mut counters);
        let image_y = select(pair.person2, &mut counters);
        out.push(EvalPair {
            image_x,
            image_y,
            kin: true,
            relationship: pair.relationship,
        });

        // matched negative: same first individual, partner from another family
        let other_family = loop {
            let f = populated[rng.random_range(0..populated.len())];
            if f != pair.family.0 {
                break f;
            }
        };
        let partner_pool = &by_family[other_family];
        let partner =
            crate::dataset::PersonIdx(partner_pool[rng.random_range(0..partner_pool.len())]);
        let neg_x = select(pair.person1, &mut counters);
        let neg_y = select(partner, &mut counters);
        out.push(EvalPair {
            image_x: neg_x,
            image_y: neg_y,
            kin: false,
            relationship: pair.relationship,
        });
    }
    Ok(out)
}

/// Anything that scores a pair of images with a kin probability.
pub trait PairScorer: Sync {
    fn score(&self, dataset: &Dataset, image_x: ImageIdx, image_y: ImageIdx) -> Result<f64>;
}

/// The trained model: `P(kin) = d(f(x), f(y))`.
pub struct ModelScorer<'a> {
    pub encoder: &'a Encoder,
    pub classifier: &'a FusionClassifier,
}

impl PairScorer for ModelScorer<'_> {
    fn score(&self, dataset: &Dataset, image_x: ImageIdx, image_y: ImageIdx) -> Result<f64> {
        let x = dataset.eval_input(image_x)?;
        let y = dataset.eval_input(image_y)?;
        Ok(f64::from(classify_pair(
            x.view(),
            y.view(),
            self.encoder,
            self.classifier,
        )?))
    }
}

/// Accuracy over the pairs of one relationship type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeAccuracy {
    pub relationship: RelationshipType,
    pub pairs: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Table-style report: one row per relationship type (report column order)
/// plus both average conventions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rows: Vec<TypeAccuracy>,
    /// Unweighted mean accuracy over types with at least one pair.
    pub unweighted_average: f64,
    /// Pair-weighted mean (overall fraction correct).
    pub weighted_average: f64,
    pub threshold: f64,
    pub total_pairs: usize,
}

/// Scores every pair (in parallel when enabled; the reduction is ordered and
/// deterministic) and aggregates accuracy per relationship type. A pair is
/// predicted kin when its score is ≥ `threshold`.
pub fn evaluate<S: PairScorer>(
    dataset: &Dataset,
    pairs: &[EvalPair],
    scorer: &S,
    threshold: f64,
) -> Result<EvaluationReport> {
    if pairs.is_empty() {
        return Err(Error::Config("cannot evaluate an empty pair list".into()));
    }

    #[cfg(feature = "parallel")]
    let scores: Result<Vec<f64>> = pairs
        .par_iter()
        .map(|p| scorer.score(dataset, p.image_x, p.image_y))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let scores: Result<Vec<f64>> = pairs
        .iter()
        .map(|p| scorer.score(dataset, p.image_x, p.image_y))
        .collect();
    let scores = scores?;

    let mut tallies: HashMap<RelationshipType, (usize, usize)> = HashMap::new();
    for (pair, &score) in pairs.iter().zip(&scores) {
        let predicted_kin = score >= threshold;
        let entry = tallies.entry(pair.relationship).or_insert((0, 0));
        entry.0 += 1;
        if predicted_kin == pair.kin {
            entry.1 += 1;
        }
    }

    let rows: Vec<TypeAccuracy> = RelationshipType::ALL
        .iter()
        .map(|&relationship| {
            let (pairs, correct) = tallies.get(&relationship).copied().unwrap_or((0, 0));
            TypeAccuracy {
                relationship,
                pairs,
                correct,
                accuracy: if pairs > 0 {
                    correct as f64 / pairs as f64
                } else {
                    f64::NAN
                },
            }
        })
        .collect();

    let populated: Vec<&TypeAccuracy> = rows.iter().filter(|r| r.pairs > 0).collect();
    let unweighted_average =
        populated.iter().map(|r| r.accuracy).sum::<f64>() / populated.len() as f64;
    let total_pairs: usize = rows.iter().map(|r| r.pairs).sum();
    let total_correct: usize = rows.iter().map(|r| r.correct).sum();
    let weighted_average = total_correct as f64 / total_pairs as f64;

    Ok(EvaluationReport {
        rows,
        unweighted_average,
        weighted_average,
        threshold,
        total_pairs,
    })
}

/// [`evaluate`] with the trained encoder + classifier as the scorer.
pub fn evaluate_model(
    dataset: &Dataset,
    pairs: &[EvalPair],
    encoder: &Encoder,
    classifier: &FusionClassifier,
    threshold: f64,
) -> Result<EvaluationReport> {
    evaluate(
        dataset,
        pairs,
        &ModelScorer {
            encoder,
            classifier,
        },
        threshold,
    )
}

impl EvaluationReport {
    pub fn accuracy_of(&self, relationship: RelationshipType) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.relationship == relationship)
            .filter(|r| r.pairs > 0)
            .map(|r| r.accuracy)
    }

    /// Aligned table in report column order, accuracies in percent; `-`
    /// marks types without pairs. Both average conventions are shown.
    pub fn render_table(&self) -> String {
        let mut header = String::new();
        let mut accuracies = String::new();
        let mut counts = String::new();
        for row in &self.rows {
            header.push_str(&format!("{:>8}", row.relationship.name()));
            if row.pairs > 0 {
                accuracies.push_str(&format!("{:>8.1}", row.accuracy * 100.0));
            } else {
                accuracies.push_str(&format!("{:>8}", "-"));
            }
            counts.push_str(&format!("{:>8}", row.pairs));
        }
        header.push_str(&format!("{:>8}{:>16}", "Ave.", "Ave.(weighted)"));
        accuracies.push_str(&format!(
            "{:>8.1}{:>16.1}",
            self.unweighted_average * 100.0,
            self.weighted_average * 100.0
        ));
        counts.push_str(&format!("{:>8}{:>16}", self.total_pairs, self.total_pairs));
        format!(
            "{header}\n{accuracies}\n{counts}\n(accuracy %, threshold {})\n",
            self.threshold
        )
    }

    /// Machine-readable rows: `relationship,pairs,correct,accuracy` for the
    /// 11 types plus one row per average variant.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        );
        writeln!(w, "relationship,pairs,correct,accuracy").map_err(|e| Error::io(path, e))?;
        for row in &self.rows {
            let accuracy = if row.pairs > 0 {
                format!("{}", row.accuracy)
            } else {
                String::new()
            };
            writeln!(
                w,
                "{},{},{},{}",
                row.relationship, row.pairs, row.correct, accuracy
            )
            .map_err(|e| Error::io(path, e))?;
        }
        writeln!(w, "average_unweighted,,,{}", self.unweighted_average)
            .map_err(|e| Error::io(path, e))?;
        writeln!(w, "average_pair_weighted,,,{}", self.weighted_average)
            .map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

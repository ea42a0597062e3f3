//! Family/kin data model: relationship taxonomy, individuals and their
//! images, validated kin pairs, ingestion, synthetic generation and input
//! augmentation.

mod augment;
mod index;
mod synthetic;

pub use augment::{augment, augment_feature, augment_image, AugmentPolicy, FaceImage, Sample};
pub use index::{load_oracle_features, load_pair_index, save_dataset, INDEX_FILE, MANIFEST_FILE, ORACLE_FILE};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticData};

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The 11 kinship relationship labels, in report column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationshipType {
    /// brother-brother
    BB,
    /// sister-sister
    SS,
    /// brother-sister
    SIBS,
    /// father-son
    FS,
    /// father-daughter
    FD,
    /// mother-son
    MS,
    /// mother-daughter
    MD,
    /// grandfather-granddaughter
    GFGD,
    /// grandmother-granddaughter
    GMGD,
    /// grandfather-grandson
    GFGS,
    /// grandmother-grandson
    GMGS,
}

impl RelationshipType {
    pub const ALL: [RelationshipType; 11] = [
        RelationshipType::BB,
        RelationshipType::SS,
        RelationshipType::SIBS,
        RelationshipType::FS,
        RelationshipType::FD,
        RelationshipType::MS,
        RelationshipType::MD,
        RelationshipType::GFGD,
        RelationshipType::GMGD,
        RelationshipType::GFGS,
        RelationshipType::GMGS,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RelationshipType::BB => "BB",
            RelationshipType::SS => "SS",
            RelationshipType::SIBS => "SIBS",
            RelationshipType::FS => "FS",
            RelationshipType::FD => "FD",
            RelationshipType::MS => "MS",
            RelationshipType::MD => "MD",
            RelationshipType::GFGD => "GFGD",
            RelationshipType::GMGD => "GMGD",
            RelationshipType::GFGS => "GFGS",
            RelationshipType::GMGS => "GMGS",
        }
    }
}

impl fmt::Display for RelationshipType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RelationshipType {
    type Err = Error;

    /// Case-insensitive; anything outside the 11 tags is an error.
    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase();
        Self::ALL
            .iter()
            .copied()
            .find(|r| r.name() == upper)
            .ok_or_else(|| Error::Validation(format!("unknown relationship tag {s:?}")))
    }
}

/// Index of a family within a [`Dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FamilyIdx(pub usize);

/// Index of an individual within a [`Dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PersonIdx(pub usize);

/// Index of an image within a [`Dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ImageIdx(pub usize);

/// Where an image's pixels or features come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageSource {
    /// A facial image file (decoded and validated lazily).
    File(PathBuf),
    /// A row in the dataset's feature table (synthetic or precomputed).
    Feature(usize),
}

/// One facial image reference. Serving counters live in the sampler, which
/// owns all mutation after load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: String,
    pub source: ImageSource,
}

/// A person with at least one image, belonging to exactly one family.
#[derive(Debug, Clone)]
pub struct Individual {
    pub person_id: String,
    pub family: FamilyIdx,
    pub images: Vec<ImageIdx>,
}

/// A genuine blood relation between two individuals of the same family.
/// Only pairs listed in the ingested index (or emitted by the generator) are
/// kin; arbitrary same-family pairs are not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KinPair {
    pub person1: PersonIdx,
    pub person2: PersonIdx,
    pub family: FamilyIdx,
    pub relationship: RelationshipType,
}

/// Width of a flattened 112×112 RGB facial image.
pub const IMAGE_INPUT_DIM: usize = 3 * 112 * 112;

/// Immutable-after-load collection of families, individuals, images and kin
/// pairs, plus an optional per-image feature table.
#[derive(Debug, Clone)]
pub struct Dataset {
    families: Vec<String>,
    individuals: Vec<Individual>,
    images: Vec<ImageRecord>,
    pairs: Vec<KinPair>,
    features: Option<Array2<f32>>,
}

impl Dataset {
    pub fn families(&self) -> &[String] {
        &self.families
    }

    pub fn family_id(&self, f: FamilyIdx) -> &str {
        &self.families[f.0]
    }

    pub fn individuals(&self) -> &[Individual] {
        &self.individuals
    }

    pub fn individual(&self, p: PersonIdx) -> &Individual {
        &self.individuals[p.0]
    }

    pub fn person_idx(&self, person_id: &str) -> Option<PersonIdx> {
        self.individuals
            .iter()
            .position(|i| i.person_id == person_id)
            .map(PersonIdx)
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn image(&self, i: ImageIdx) -> &ImageRecord {
        &self.images[i.0]
    }

    pub fn pairs(&self) -> &[KinPair] {
        &self.pairs
    }

    pub fn has_features(&self) -> bool {
        self.features.is_some()
    }

    /// Per-image feature row; only valid for feature-backed datasets.
    pub fn feature(&self, img: ImageIdx) -> Result<ArrayView1<'_, f32>> {
        let features = self.features.as_ref().ok_or_else(|| {
            Error::Config("dataset has no feature table; inputs are image files".into())
        })?;
        match self.images[img.0].source {
            ImageSource::Feature(row) => Ok(features.row(row)),
            ImageSource::File(_) => Err(Error::Config(format!(
                "image {} is file-backed, not feature-backed",
                self.images[img.0].id
            ))),
        }
    }

    /// Model input width: the feature dimension for feature-backed datasets,
    /// the flattened image size otherwise.
    pub fn input_dim(&self) -> usize {
        match &self.features {
            Some(f) => f.ncols(),
            None => IMAGE_INPUT_DIM,
        }
    }

    /// Model input vector for one image: feature row or flattened decoded
    /// image, augmented when a policy is given.
    pub fn input_vector(
        &self,
        img: ImageIdx,
        policy: Option<&AugmentPolicy>,
        rng: &mut impl rand::Rng,
    ) -> Result<ndarray::Array1<f32>> {
        match &self.images[img.0].source {
            ImageSource::Feature(_) => {
                let feature = self.feature(img)?.to_owned();
                Ok(match policy {
                    Some(p) => augment_feature(feature.view(), p, rng),
                    None => feature,
                })
            }
            ImageSource::File(path) => {
                let face = FaceImage::from_file(path)?;
                let face = match policy {
                    Some(p) => augment_image(&face, p, rng),
                    None => face,
                };
                Ok(face.flatten())
            }
        }
    }

    /// Evaluation-mode input vector: no augmentation, no randomness.
    pub fn eval_input(&self, img: ImageIdx) -> Result<ndarray::Array1<f32>> {
        match &self.images[img.0].source {
            ImageSource::Feature(_) => Ok(self.feature(img)?.to_owned()),
            ImageSource::File(path) => Ok(FaceImage::from_file(path)?.flatten()),
        }
    }

    /// Stacks input vectors for a list of images into a `len × input_dim`
    /// matrix. Augmentation draws happen in list order, so the result is a
    /// deterministic function of the rng state.
    pub fn batch_inputs(
        &self,
        images: &[ImageIdx],
        policy: Option<&AugmentPolicy>,
        rng: &mut impl rand::Rng,
    ) -> Result<Array2<f32>> {
        let dim = self.input_dim();
        let mut out = Array2::zeros((images.len(), dim));
        for (row, &img) in images.iter().enumerate() {
            let v = self.input_vector(img, policy, rng)?;
            out.row_mut(row).assign(&v);
        }
        Ok(out)
    }

    /// Validates every dataset invariant; loaders call this before returning.
    pub fn validate(&self) -> Result<()> {
        for ind in &self.individuals {
            if ind.images.is_empty() {
                return Err(Error::Validation(format!(
                    "individual {} has no images",
                    ind.person_id
                )));
            }
        }
        let mut owner = vec![None; self.images.len()];
        for (p, ind) in self.individuals.iter().enumerate() {
            for &img in &ind.images {
                if let Some(prev) = owner[img.0] {
                    let prev: usize = prev;
                    return Err(Error::Validation(format!(
                        "image {} owned by both {} and {}",
                        self.images[img.0].id,
                        self.individuals[prev].person_id,
                        ind.person_id
                    )));
                }
                owner[img.0] = Some(p);
            }
        }
        for pair in &self.pairs {
            let p1 = &self.individuals[pair.person1.0];
            let p2 = &self.individuals[pair.person2.0];
            if pair.person1 == pair.person2 {
                return Err(Error::Validation(format!(
                    "pair of {} with itself",
                    p1.person_id
                )));
            }
            if p1.family != pair.family || p2.family != pair.family {
                return Err(Error::Validation(format!(
                    "pair ({}, {}) crosses families {} and {}",
                    p1.person_id,
                    p2.person_id,
                    self.families[p1.family.0],
                    self.families[p2.family.0],
                )));
            }
        }
        if let Some(features) = &self.features {
            for img in &self.images {
                match img.source {
                    ImageSource::Feature(row) if row < features.nrows() => {}
                    _ => {
                        return Err(Error::Validation(format!(
                            "image {} has no feature row",
                            img.id
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    /// Splits families into train and holdout partitions (seeded). Pairs,
    /// individuals, images and feature rows follow their family.
    pub fn split_by_family(&self, holdout_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&holdout_fraction) || holdout_fraction <= 0.0 {
            return Err(Error::Config(format!(
                "holdout fraction must be in (0, 1), got {holdout_fraction}"
            )));
        }
        if self.families.len() < 2 {
            return Err(Error::Config(
                "need at least 2 families to split train/holdout".into(),
            ));
        }
        let mut order: Vec<usize> = (0..self.families.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut crate::rng::stream_rng(seed, crate::rng::streams::SPLIT));
        let n_holdout = ((self.families.len() as f64 * holdout_fraction).round() as usize)
            .clamp(1, self.families.len() - 1);
        let mut is_holdout = vec![false; self.families.len()];
        for &f in order.iter().take(n_holdout) {
            is_holdout[f] = true;
        }
        Ok((
            self.subset(|f| !is_holdout[f.0]),
            self.subset(|f| is_holdout[f.0]),
        ))
    }

    /// New dataset containing only the families selected by `keep`.
    fn subset(&self, keep: impl Fn(FamilyIdx) -> bool) -> Dataset {
        let mut builder = DatasetBuilder::new();
        let mut person_map: HashMap<usize, PersonIdx> = HashMap::new();
        let mut feature_rows: Vec<usize> = Vec::new();
        for (p, ind) in self.individuals.iter().enumerate() {
            if !keep(ind.family) {
                continue;
            }
            let family_id = self.family_id(ind.family).to_owned();
            let new_p = builder
                .person(&ind.person_id, &family_id)
                .expect("subset of a valid dataset");
            person_map.insert(p, new_p);
            for &img in &ind.images {
                let rec = &self.images[img.0];
                let source = match &rec.source {
                    ImageSource::File(path) => ImageSource::File(path.clone()),
                    ImageSource::Feature(row) => {
                        feature_rows.push(*row);
                        ImageSource::Feature(feature_rows.len() - 1)
                    }
                };
                builder
                    .add_image(new_p, rec.id.clone(), source)
                    .expect("subset of a valid dataset");
            }
        }
        for pair in &self.pairs {
            if !keep(pair.family) {
                continue;
            }
            builder
                .add_pair(
                    person_map[&pair.person1.0],
                    person_map[&pair.person2.0],
                    pair.relationship,
                )
                .expect("subset of a valid dataset");
        }
        let features = self.features.as_ref().map(|f| {
            let mut out = Array2::zeros((feature_rows.len(), f.ncols()));
            for (new_row, &old_row) in feature_rows.iter().enumerate() {
                out.row_mut(new_row).assign(&f.row(old_row));
            }
            out
        });
        builder
            .finish(features)
            .expect("subset of a valid dataset")
    }

    /// Number of pairs per relationship type, in column order.
    pub fn pair_counts_by_type(&self) -> Vec<(RelationshipType, usize)> {
        RelationshipType::ALL
            .iter()
            .map(|&r| (r, self.pairs.iter().filter(|p| p.relationship == r).count()))
            .collect()
    }
}

/// Incremental, invariant-checking construction used by the loader, the
/// synthetic generator and family splits.
#[derive(Debug, Default)]
pub struct DatasetBuilder {
    families: Vec<String>,
    family_by_id: HashMap<String, FamilyIdx>,
    individuals: Vec<Individual>,
    person_by_id: HashMap<String, PersonIdx>,
    images: Vec<ImageRecord>,
    image_ids: HashMap<String, ImageIdx>,
    pairs: Vec<KinPair>,
}

impl DatasetBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn family(&mut self, family_id: &str) -> FamilyIdx {
        if let Some(&f) = self.family_by_id.get(family_id) {
            return f;
        }
        let f = FamilyIdx(self.families.len());
        self.families.push(family_id.to_owned());
        self.family_by_id.insert(family_id.to_owned(), f);
        f
    }

    /// Registers (or looks up) a person. A person seen under two different
    /// families is a validation error.
    pub fn person(&mut self, person_id: &str, family_id: &str) -> Result<PersonIdx> {
        let family = self.family(family_id);
        if let Some(&p) = self.person_by_id.get(person_id) {
            if self.individuals[p.0].family != family {
                return Err(Error::Validation(format!(
                    "individual {person_id} appears in families {} and {family_id}",
                    self.families[self.individuals[p.0].family.0]
                )));
            }
            return Ok(p);
        }
        let p = PersonIdx(self.individuals.len());
        self.individuals.push(Individual {
            person_id: person_id.to_owned(),
            family,
            images: Vec::new(),
        });
        self.person_by_id.insert(person_id.to_owned(), p);
        Ok(p)
    }

    pub fn add_image(
        &mut self,
        person: PersonIdx,
        image_id: String,
        source: ImageSource,
    ) -> Result<ImageIdx> {
        if self.image_ids.contains_key(&image_id) {
            return Err(Error::Validation(format!(
                "image {image_id} listed for more than one individual"
            )));
        }
        let idx = ImageIdx(self.images.len());
        self.images.push(ImageRecord {
            id: image_id.clone(),
            source,
        });
        self.image_ids.insert(image_id, idx);
        self.individuals[person.0].images.push(idx);
        Ok(idx)
    }

    pub fn add_pair(
        &mut self,
        person1: PersonIdx,
        person2: PersonIdx,
        relationship: RelationshipType,
    ) -> Result<()> {
        if person1 == person2 {
            return Err(Error::Validation(format!(
                "pair of {} with itself",
                self.individuals[person1.0].person_id
            )));
        }
        let f1 = self.individuals[person1.0].family;
        let f2 = self.individuals[person2.0].family;
        if f1 != f2 {
            return Err(Error::Validation(format!(
                "pair ({}, {}) crosses families {} and {}",
                self.individuals[person1.0].person_id,
                self.individuals[person2.0].person_id,
                self.families[f1.0],
                self.families[f2.0],
            )));
        }
        self.pairs.push(KinPair {
            person1,
            person2,
            family: f1,
            relationship,
        });
        Ok(())
    }

    pub fn finish(self, features: Option<Array2<f32>>) -> Result<Dataset> {
        let dataset = Dataset {
            families: self.families,
            individuals: self.individuals,
            images: self.images,
            pairs: self.pairs,
            features,
        };
        dataset.validate()?;
        Ok(dataset)
    }
}

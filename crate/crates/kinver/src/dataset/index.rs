//! On-disk pair index: a UTF-8 CSV with header `person1,person2,family,relationship`,
//! a companion manifest `person,image_path`, and an optional feature table
//! `image_id,f0,...,f{d-1}` for feature-backed datasets.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use super::{Dataset, DatasetBuilder, ImageSource, RelationshipType};

pub const INDEX_FILE: &str = "pairs.csv";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const ORACLE_FILE: &str = "oracle.csv";

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_owned(),
        line,
        message: message.into(),
    }
}

fn open_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

/// Loads and validates a pair index and its image manifest.
///
/// Individuals listed in the manifest but never paired are ignored; paired
/// individuals without a manifest entry are a validation error. When
/// `features` is given, every image must have a feature row and image inputs
/// come from the table instead of the files named in the manifest.
pub fn load_pair_index(
    index_path: &Path,
    manifest_path: &Path,
    features: Option<&Path>,
) -> Result<Dataset> {
    let mut builder = DatasetBuilder::new();

    // Pair rows bind persons to families; read them first.
    let mut reader = open_reader(index_path)?;
    {
        let headers = reader
            .headers()
            .map_err(|e| parse_err(index_path, 1, e.to_string()))?;
        let expect = ["person1", "person2", "family", "relationship"];
        let got: Vec<String> = headers.iter().map(|h| h.to_ascii_lowercase()).collect();
        if got != expect {
            return Err(parse_err(
                index_path,
                1,
                format!("expected header {expect:?}, got {got:?}"),
            ));
        }
    }
    let mut n_rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let line = i + 2; // 1-based, after the header
        let record = record.map_err(|e| parse_err(index_path, line, e.to_string()))?;
        if record.len() != 4 {
            return Err(parse_err(
                index_path,
                line,
                format!("expected 4 columns, got {}", record.len()),
            ));
        }
        let (p1, p2, family, rel) = (&record[0], &record[1], &record[2], &record[3]);
        if p1.is_empty() || p2.is_empty() || family.is_empty() {
            return Err(parse_err(index_path, line, "empty identifier"));
        }
        let relationship: RelationshipType = rel
            .parse()
            .map_err(|e: Error| parse_err(index_path, line, e.to_string()))?;
        let mut add = || -> Result<()> {
            let person1 = builder.person(p1, family)?;
            let person2 = builder.person(p2, family)?;
            builder.add_pair(person1, person2, relationship)
        };
        add().map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!(
                "{msg} ({} line {line})",
                index_path.display()
            )),
            other => other,
        })?;
        n_rows += 1;
    }
    if n_rows == 0 {
        return Err(Error::Validation(format!(
            "pair index {} contains no pairs",
            index_path.display()
        )));
    }

    // Manifest attaches images to the persons the pairs referenced.
    let mut reader = open_reader(manifest_path)?;
    {
        let headers = reader
            .headers()
            .map_err(|e| parse_err(manifest_path, 1, e.to_string()))?;
        let got: Vec<String> = headers.iter().map(|h| h.to_ascii_lowercase()).collect();
        if got != ["person", "image_path"] {
            return Err(parse_err(
                manifest_path,
                1,
                format!("expected header [\"person\", \"image_path\"], got {got:?}"),
            ));
        }
    }
    let mut feature_row = 0usize;
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| parse_err(manifest_path, line, e.to_string()))?;
        if record.len() != 2 {
            return Err(parse_err(
                manifest_path,
                line,
                format!("expected 2 columns, got {}", record.len()),
            ));
        }
        let (person_id, image_path) = (&record[0], &record[1]);
        if person_id.is_empty() || image_path.is_empty() {
            return Err(parse_err(manifest_path, line, "empty field"));
        }
        // images of never-paired individuals are irrelevant to the pipeline
        let Some(person) = builder.person_idx(person_id) else {
            continue;
        };
        let source = if features.is_some() {
            ImageSource::Feature(feature_row)
        } else {
            ImageSource::File(image_path.into())
        };
        builder
            .add_image(person, image_path.to_owned(), source)
            .map_err(|e| match e {
                Error::Validation(msg) => Error::Validation(format!(
                    "{msg} ({} line {line})",
                    manifest_path.display()
                )),
                other => other,
            })?;
        feature_row += 1;
    }

    let features = match features {
        Some(path) => Some(load_oracle_for_builder(&builder, path)?),
        None => None,
    };
    builder.finish(features)
}

impl DatasetBuilder {
    fn person_idx(&self, person_id: &str) -> Option<super::PersonIdx> {
        self.person_by_id.get(person_id).copied()
    }

    fn image_idx(&self, image_id: &str) -> Option<super::ImageIdx> {
        self.image_ids.get(image_id).copied()
    }

    fn image_count(&self) -> usize {
        self.images.len()
    }
}

/// Reads a feature table keyed by image id and aligns it to the builder's
/// image order. Every image must be covered exactly once.
fn load_oracle_for_builder(builder: &DatasetBuilder, path: &Path) -> Result<Array2<f32>> {
    let (ids, rows, dim) = read_feature_rows(path)?;
    let n_images = builder.image_count();
    let mut out = Array2::zeros((n_images, dim));
    let mut seen = vec![false; n_images];
    for (id, row) in ids.into_iter().zip(rows) {
        let Some(img) = builder.image_idx(&id) else {
            return Err(Error::Validation(format!(
                "feature table {} lists unknown image {id}",
                path.display()
            )));
        };
        if seen[img.0] {
            return Err(Error::Validation(format!(
                "feature table {} lists image {id} twice",
                path.display()
            )));
        }
        seen[img.0] = true;
        // builder assigned ImageSource::Feature rows in manifest order; remap
        for (j, v) in row.into_iter().enumerate() {
            out[(feature_row_of(builder, img), j)] = v;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Validation(format!(
            "feature table {} has no row for image {}",
            path.display(),
            builder_image_id(builder, missing)
        )));
    }
    Ok(out)
}

fn feature_row_of(builder: &DatasetBuilder, img: super::ImageIdx) -> usize {
    match builder.images[img.0].source {
        ImageSource::Feature(row) => row,
        ImageSource::File(_) => unreachable!("feature-backed load uses Feature sources"),
    }
}

fn builder_image_id(builder: &DatasetBuilder, img: usize) -> &str {
    &builder.images[img].id
}

/// Parses `image_id,f0..f{d-1}` rows; all rows must share one dimension.
pub fn load_oracle_features(path: &Path) -> Result<Vec<(String, Vec<f32>)>> {
    let (ids, rows, _) = read_feature_rows(path)?;
    Ok(ids.into_iter().zip(rows).collect())
}

fn read_feature_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<f32>>, usize)> {
    let mut reader = open_reader(path)?;
    let dim = {
        let headers = reader
            .headers()
            .map_err(|e| parse_err(path, 1, e.to_string()))?;
        if headers.len() < 2 || headers.get(0) != Some("image_id") {
            return Err(parse_err(
                path,
                1,
                "expected header image_id,f0,...,f{d-1}",
            ));
        }
        headers.len() - 1
    };
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| parse_err(path, line, e.to_string()))?;
        if record.len() != dim + 1 {
            return Err(parse_err(
                path,
                line,
                format!("expected {} columns, got {}", dim + 1, record.len()),
            ));
        }
        let mut row = Vec::with_capacity(dim);
        for field in record.iter().skip(1) {
            let v: f32 = field
                .parse()
                .map_err(|e| parse_err(path, line, format!("bad float {field:?}: {e}")))?;
            row.push(v);
        }
        ids.push(record[0].to_owned());
        rows.push(row);
    }
    if ids.is_empty() {
        return Err(Error::Validation(format!(
            "feature table {} is empty",
            path.display()
        )));
    }
    Ok((ids, rows, dim))
}

/// Writes `pairs.csv`, `manifest.csv` and (for feature-backed datasets)
/// `oracle.csv` into `dir`. The output round-trips through
/// [`load_pair_index`].
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let index_path = dir.join(INDEX_FILE);
    let mut w = BufWriter::new(File::create(&index_path).map_err(|e| Error::io(&index_path, e))?);
    writeln!(w, "person1,person2,family,relationship").map_err(|e| Error::io(&index_path, e))?;
    for pair in dataset.pairs() {
        writeln!(
            w,
            "{},{},{},{}",
            dataset.individual(pair.person1).person_id,
            dataset.individual(pair.person2).person_id,
            dataset.family_id(pair.family),
            pair.relationship,
        )
        .map_err(|e| Error::io(&index_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&index_path, e))?;

    let manifest_path = dir.join(MANIFEST_FILE);
    let mut w =
        BufWriter::new(File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?);
    writeln!(w, "person,image_path").map_err(|e| Error::io(&manifest_path, e))?;
    for ind in dataset.individuals() {
        for &img in &ind.images {
            writeln!(w, "{},{}", ind.person_id, dataset.image(img).id)
                .map_err(|e| Error::io(&manifest_path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&manifest_path, e))?;

    if dataset.has_features() {
        let oracle_path = dir.join(ORACLE_FILE);
        let mut w =
            BufWriter::new(File::create(&oracle_path).map_err(|e| Error::io(&oracle_path, e))?);
        let dim = dataset.input_dim();
        let header: Vec<String> = std::iter::once("image_id".to_owned())
            .chain((0..dim).map(|j| format!("f{j}")))
            .collect();
        writeln!(w, "{}", header.join(",")).map_err(|e| Error::io(&oracle_path, e))?;
        for ind in dataset.individuals() {
            for &img in &ind.images {
                let feature = dataset.feature(img)?;
                let mut fields = Vec::with_capacity(dim + 1);
                fields.push(dataset.image(img).id.clone());
                fields.extend(feature.iter().map(|v| format!("{v}")));
                writeln!(w, "{}", fields.join(",")).map_err(|e| Error::io(&oracle_path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&oracle_path, e))?;
    }
    Ok(())
}

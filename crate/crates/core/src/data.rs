//! Samples, datasets, and per-class frequency statistics.
//!
//! Images and captions are stored already encoded: the image encoder is
//! frozen, so a sample is just its unit image embedding, its binary label
//! vector, and the unit embedding of its caption.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecmath;

/// Tolerance on the unit-norm invariant of stored embeddings.
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub image_embedding: Vec<f64>,
    pub labels: Vec<u8>,
    pub caption_embedding: Vec<f64>,
}

impl Sample {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == 1)
            .map(|(i, _)| i)
    }
}

/// On-disk form of a dataset; validated into [`MultiLabelDataset`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    dim: usize,
    num_classes: usize,
    class_names: Vec<String>,
    samples: Vec<Sample>,
}

/// A validated multi-label dataset. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DatasetFile", into = "DatasetFile")]
pub struct MultiLabelDataset {
    samples: Vec<Sample>,
    num_classes: usize,
    class_names: Vec<String>,
    dim: usize,
}

impl TryFrom<DatasetFile> for MultiLabelDataset {
    type Error = Error;

    fn try_from(f: DatasetFile) -> Result<Self> {
        MultiLabelDataset::new(f.samples, f.num_classes, f.class_names, f.dim)
    }
}

impl From<MultiLabelDataset> for DatasetFile {
    fn from(d: MultiLabelDataset) -> Self {
        DatasetFile {
            dim: d.dim,
            num_classes: d.num_classes,
            class_names: d.class_names,
            samples: d.samples,
        }
    }
}

impl MultiLabelDataset {
    pub fn new(
        samples: Vec<Sample>,
        num_classes: usize,
        class_names: Vec<String>,
        dim: usize,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidDataset("num_classes must be positive".into()));
        }
        if dim == 0 {
            return Err(Error::InvalidDataset("dim must be positive".into()));
        }
        if class_names.len() != num_classes {
            return Err(Error::InvalidDataset(format!(
                "{} class names for {num_classes} classes",
                class_names.len()
            )));
        }
        for (k, s) in samples.iter().enumerate() {
            if s.labels.len() != num_classes {
                return Err(Error::InvalidDataset(format!(
                    "sample {k}: {} labels, expected {num_classes}",
                    s.labels.len()
                )));
            }
            if s.image_embedding.len() != dim || s.caption_embedding.len() != dim {
                return Err(Error::InvalidDataset(format!(
                    "sample {k}: embedding dimension differs from {dim}"
                )));
            }
            signed_labels(&s.labels)?;
            if !s.labels.contains(&1) {
                return Err(Error::InvalidDataset(format!("sample {k} has no positive label")));
            }
            if !vecmath::is_unit(&s.image_embedding, UNIT_NORM_TOL) {
                return Err(Error::InvalidDataset(format!(
                    "sample {k}: image embedding is not unit norm"
                )));
            }
            if !vecmath::is_unit(&s.caption_embedding, UNIT_NORM_TOL) {
                return Err(Error::InvalidDataset(format!(
                    "sample {k}: caption embedding is not unit norm"
                )));
            }
        }
        let counts = class_counts(&samples, num_classes)?;
        if let Some(i) = counts.iter().position(|&n| n == 0) {
            return Err(Error::InvalidDataset(format!(
                "class {i} ({}) has no positive samples",
                class_names[i]
            )));
        }
        Ok(Self {
            samples,
            num_classes,
            class_names,
            dim,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_counts(&self) -> Vec<usize> {
        class_counts(&self.samples, self.num_classes).expect("validated dataset is non-empty")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json { source, .. } => Error::json(path, source),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DatasetFile = serde_json::from_str(text).map_err(|e| Error::json("<dataset>", e))?;
        Self::try_from(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("dataset serializes")
    }

    /// Order-sensitive SHA-256 over every embedding coordinate's bit pattern.
    pub fn embedding_checksum(&self) -> String {
        let mut h = crate::Fingerprint::new();
        for s in &self.samples {
            h.update_f64s(&s.image_embedding);
            h.update_f64s(&s.caption_embedding);
        }
        h.finish()
    }
}

/// Maps `{0,1}` labels onto `{-1,1}` via `2y - 1`.
pub fn signed_labels(y: &[u8]) -> Result<Vec<i8>> {
    y.iter()
        .enumerate()
        .map(|(index, &value)| match value {
            0 => Ok(-1),
            1 => Ok(1),
            _ => Err(Error::InvalidLabel { index, value }),
        })
        .collect()
}

/// Number of samples in which each class is positive.
pub fn class_counts(samples: &[Sample], num_classes: usize) -> Result<Vec<usize>> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut counts = vec![0usize; num_classes];
    for s in samples {
        for (c, &y) in counts.iter_mut().zip(&s.labels) {
            *c += usize::from(y == 1);
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassGroup {
    Head,
    Medium,
    Tail,
}

impl fmt::Display for ClassGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassGroup::Head => "head",
            ClassGroup::Medium => "medium",
            ClassGroup::Tail => "tail",
        })
    }
}

/// Frequency thresholds for head/medium/tail. `count > head_min` is head,
/// `count < tail_max` is tail, and both boundary values are medium.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupThresholds {
    pub head_min: usize,
    pub tail_max: usize,
}

impl Default for GroupThresholds {
    fn default() -> Self {
        Self {
            head_min: 100,
            tail_max: 20,
        }
    }
}

pub fn group_classes(counts: &[usize], thresholds: GroupThresholds) -> Vec<ClassGroup> {
    counts
        .iter()
        .map(|&n| {
            if n > thresholds.head_min {
                ClassGroup::Head
            } else if n < thresholds.tail_max {
                ClassGroup::Tail
            } else {
                ClassGroup::Medium
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub counts: Vec<usize>,
    pub groups: Vec<ClassGroup>,
    pub thresholds: GroupThresholds,
    /// Number of training samples the counts were taken over.
    pub num_samples: usize,
}

impl ClassStats {
    pub fn from_counts(counts: Vec<usize>, num_samples: usize, thresholds: GroupThresholds) -> Self {
        let groups = group_classes(&counts, thresholds);
        Self {
            counts,
            groups,
            thresholds,
            num_samples,
        }
    }

    pub fn from_dataset(dataset: &MultiLabelDataset, thresholds: GroupThresholds) -> Self {
        Self::from_counts(dataset.class_counts(), dataset.len(), thresholds)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn members(&self, group: ClassGroup) -> impl Iterator<Item = usize> + '_ {
        self.groups
            .iter()
            .enumerate()
            .filter(move |(_, &g)| g == group)
            .map(|(i, _)| i)
    }
}

//! Labelled datasets with a seen/unseen class split, the P×K batch sampler and
//! the tuple builders consumed by the metric losses.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::confusion::ClassGroup;
use crate::error::{EcamlError, Result};

pub type Label = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Seen,
    Unseen,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Seen => "seen",
            Split::Unseen => "unseen",
        }
    }

    pub fn parse(token: &str) -> Option<Split> {
        match token {
            "seen" => Some(Split::Seen),
            "unseen" => Some(Split::Unseen),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitFilter {
    Seen,
    Unseen,
    All,
}

impl SplitFilter {
    fn admits(self, split: Split) -> bool {
        match self {
            SplitFilter::All => true,
            SplitFilter::Seen => split == Split::Seen,
            SplitFilter::Unseen => split == Split::Unseen,
        }
    }
}

/// Feature rows with one label each and a class-level seen/unseen split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<Label>,
    split: BTreeMap<Label, Split>,
}

impl Dataset {
    /// Build a dataset, enforcing: one split per class, both splits
    /// non-empty, every class with at least two samples.
    pub fn new(
        features: Array2<f64>,
        labels: Vec<Label>,
        split: BTreeMap<Label, Split>,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(EcamlError::Shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if features.ncols() == 0 {
            return Err(EcamlError::Input("dataset has zero feature columns".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(EcamlError::Input("dataset contains non-finite features".into()));
        }
        let mut counts: BTreeMap<Label, usize> = BTreeMap::new();
        for &l in &labels {
            *counts.entry(l).or_default() += 1;
        }
        for (label, &count) in &counts {
            if !split.contains_key(label) {
                return Err(EcamlError::Input(format!("class {label} has no split assignment")));
            }
            if count < 2 {
                return Err(EcamlError::Input(format!(
                    "class {label} has {count} sample(s); at least 2 are required"
                )));
            }
        }
        let split: BTreeMap<Label, Split> = split
            .into_iter()
            .filter(|(l, _)| counts.contains_key(l))
            .collect();
        for s in [Split::Seen, Split::Unseen] {
            if !split.values().any(|&v| v == s) {
                return Err(EcamlError::Input(format!("no {s} classes in dataset")));
            }
        }
        Ok(Dataset {
            features,
            labels,
            split,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn split_of(&self, label: Label) -> Option<Split> {
        self.split.get(&label).copied()
    }

    pub fn splits(&self) -> &BTreeMap<Label, Split> {
        &self.split
    }

    /// Sorted class ids admitted by `filter`.
    pub fn classes(&self, filter: SplitFilter) -> Vec<Label> {
        self.split
            .iter()
            .filter(|(_, &s)| filter.admits(s))
            .map(|(&l, _)| l)
            .collect()
    }

    /// Row indices of each admitted class, in dataset order.
    pub fn rows_by_class(&self, filter: SplitFilter) -> BTreeMap<Label, Vec<usize>> {
        let mut out: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
        for (row, &l) in self.labels.iter().enumerate() {
            if filter.admits(self.split[&l]) {
                out.entry(l).or_default().push(row);
            }
        }
        out
    }

    /// Row indices admitted by `filter`, in dataset order.
    pub fn rows(&self, filter: SplitFilter) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| filter.admits(self.split[l]))
            .map(|(i, _)| i)
            .collect()
    }

    /// Features and labels of the admitted rows.
    pub fn subset(&self, filter: SplitFilter) -> (Array2<f64>, Vec<Label>) {
        let rows = self.rows(filter);
        let features = self.features.select(Axis(0), &rows);
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        (features, labels)
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSpec {
    pub classes_per_batch: usize,
    pub instances_per_class: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec {
            classes_per_batch: 64,
            instances_per_class: 2,
        }
    }
}

impl BatchSpec {
    pub fn new(classes_per_batch: usize, instances_per_class: usize) -> Self {
        BatchSpec {
            classes_per_batch,
            instances_per_class,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes_per_batch < 2 {
            return Err(EcamlError::Config(format!(
                "classes_per_batch must be >= 2, got {}",
                self.classes_per_batch
            )));
        }
        if self.instances_per_class < 1 {
            return Err(EcamlError::Config("instances_per_class must be >= 1".into()));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.instances_per_class
    }
}

/// A sampled minibatch. Rows are laid out class by class, so group `g`
/// occupies rows `g·K .. (g+1)·K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Array2<f64>,
    pub labels: Vec<Label>,
    pub groups: Vec<ClassGroup>,
    /// Dataset row each batch row was drawn from.
    pub source_rows: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Assemble a batch from explicit dataset rows grouped by class.
    pub fn from_groups(dataset: &Dataset, rows_per_class: &[Vec<usize>]) -> Result<Self> {
        let mut source_rows = Vec::new();
        let mut groups = Vec::with_capacity(rows_per_class.len());
        for rows in rows_per_class {
            let Some(&first) = rows.first() else {
                return Err(EcamlError::Precondition("empty class group".into()));
            };
            let label = dataset.labels[first];
            if rows.iter().any(|&r| dataset.labels[r] != label) {
                return Err(EcamlError::Precondition(format!(
                    "group for class {label} mixes labels"
                )));
            }
            let start = source_rows.len();
            source_rows.extend_from_slice(rows);
            groups.push(ClassGroup::new(label, (start..source_rows.len()).collect())?);
        }
        let features = dataset.features.select(Axis(0), &source_rows);
        let labels = source_rows.iter().map(|&r| dataset.labels[r]).collect();
        Ok(Batch {
            features,
            labels,
            groups,
            source_rows,
        })
    }
}

/// Draw `P` classes, then `K` instances of each, uniformly without
/// replacement.
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    spec: &BatchSpec,
    filter: SplitFilter,
    rng: &mut R,
) -> Result<Batch> {
    spec.validate()?;
    let by_class = dataset.rows_by_class(filter);
    let eligible: Vec<&Vec<usize>> = by_class
        .values()
        .filter(|rows| rows.len() >= spec.instances_per_class)
        .collect();
    if eligible.len() < spec.classes_per_batch {
        return Err(EcamlError::Sampling(format!(
            "need {} classes with >= {} samples in the {:?} split, found {} (short by {})",
            spec.classes_per_batch,
            spec.instances_per_class,
            filter,
            eligible.len(),
            spec.classes_per_batch - eligible.len()
        )));
    }
    let chosen = index::sample(rng, eligible.len(), spec.classes_per_batch);
    let mut per_class = Vec::with_capacity(spec.classes_per_batch);
    for c in chosen.iter() {
        let rows = eligible[c];
        let picks = index::sample(rng, rows.len(), spec.instances_per_class);
        per_class.push(picks.iter().map(|i| rows[i]).collect::<Vec<_>>());
    }
    Batch::from_groups(dataset, &per_class)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NPairTuple {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabeledPair {
    pub i: usize,
    pub j: usize,
    /// Both rows share a class.
    pub same: bool,
}

/// One triplet per ordered within-class pair, with a uniformly drawn
/// negative from another class.
pub fn build_triplets<R: Rng + ?Sized>(batch: &Batch, rng: &mut R) -> Vec<Triplet> {
    if batch.groups.len() < 2 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for group in &batch.groups {
        let others: Vec<usize> = (0..batch.len())
            .filter(|&r| batch.labels[r] != group.label)
            .collect();
        for &a in &group.rows {
            for &p in &group.rows {
                if a == p {
                    continue;
                }
                let negative = others[rng.random_range(0..others.len())];
                out.push(Triplet {
                    anchor: a,
                    positive: p,
                    negative,
                });
            }
        }
    }
    out
}

/// Standard N-pair layout: the first row of each class is the anchor, the
/// second its positive; the negatives of an anchor are the positives of all
/// other classes.
pub fn build_npair_tuples(batch: &Batch) -> Result<Vec<NPairTuple>> {
    if let Some(g) = batch.groups.iter().find(|g| g.rows.len() != 2) {
        return Err(EcamlError::Precondition(format!(
            "N-pair layout needs exactly 2 instances per class; class {} has {}",
            g.label,
            g.rows.len()
        )));
    }
    let positives: Vec<usize> = batch.groups.iter().map(|g| g.rows[1]).collect();
    Ok(batch
        .groups
        .iter()
        .enumerate()
        .map(|(gi, g)| NPairTuple {
            anchor: g.rows[0],
            positive: g.rows[1],
            negatives: positives
                .iter()
                .enumerate()
                .filter(|&(gj, _)| gj != gi)
                .map(|(_, &p)| p)
                .collect(),
        })
        .collect())
}

/// Every unordered row pair with its same-class indicator.
pub fn build_contrastive_pairs(batch: &Batch) -> Vec<LabeledPair> {
    let n = batch.len();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(LabeledPair {
                i,
                j,
                same: batch.labels[i] == batch.labels[j],
            });
        }
    }
    out
}

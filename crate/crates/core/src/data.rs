//! Embedding datasets: synthetic spurious-correlation generation, split
//! assignment, validation subsampling and file I/O.

mod io;

pub use io::{
    decode_embeddings, encode_embeddings, read_embedding_csv, read_embedding_file,
    write_embedding_csv, write_embedding_file, EMBEDDING_MAGIC, EMBEDDING_VERSION,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{AfrError, Result};
use crate::numerics::{Matrix, Rng};

/// Number of spurious-attribute values in the synthetic generator.
pub const SYNTHETIC_ATTRIBUTES: usize = 2;

/// Which part of the pipeline a row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    /// Trains the stage-1 model.
    Erm,
    /// Held-out reweighting set for last-layer retraining.
    Rw,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Erm, Split::Rw, Split::Val, Split::Test];

    pub fn code(self) -> u8 {
        match self {
            Split::Erm => 0,
            Split::Rw => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Split> {
        Split::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Erm => "ERM",
            Split::Rw => "RW",
            Split::Val => "VAL",
            Split::Test => "TEST",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = AfrError;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| AfrError::invalid(format!("unknown split tag `{s}`")))
    }
}

/// Group index for a (class, attribute) pair.
#[inline]
pub fn group_index(class: usize, attribute: usize, n_attributes: usize) -> usize {
    class * n_attributes + attribute
}

/// Feature matrix plus labels, optional group labels and optional split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    groups: Option<Vec<usize>>,
    num_groups: usize,
    split_tags: Option<Vec<Split>>,
}

impl EmbeddingDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(AfrError::invalid(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(AfrError::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            groups: None,
            num_groups: 0,
            split_tags: None,
        })
    }

    pub fn with_groups(mut self, groups: Vec<usize>, num_groups: usize) -> Result<Self> {
        if groups.len() != self.len() {
            return Err(AfrError::invalid(
                "group vector length differs from row count",
            ));
        }
        if let Some(&bad) = groups.iter().find(|&&g| g >= num_groups) {
            return Err(AfrError::invalid(format!(
                "group {bad} out of range for {num_groups} groups"
            )));
        }
        self.groups = Some(groups);
        self.num_groups = num_groups;
        Ok(self)
    }

    pub fn with_split_tags(mut self, tags: Vec<Split>) -> Result<Self> {
        if tags.len() != self.len() {
            return Err(AfrError::invalid(
                "split tag vector length differs from row count",
            ));
        }
        self.split_tags = Some(tags);
        Ok(self)
    }

    /// Same rows and annotations with a new feature matrix (e.g. cached
    /// embeddings).
    pub fn with_features(&self, features: Matrix) -> Result<Self> {
        if features.rows() != self.len() {
            return Err(AfrError::invalid(
                "replacement features have the wrong row count",
            ));
        }
        Ok(Self {
            features,
            ..self.clone()
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn groups(&self) -> Option<&[usize]> {
        self.groups.as_deref()
    }

    /// Zero when the dataset carries no group labels.
    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn split_tags(&self) -> Option<&[Split]> {
        self.split_tags.as_deref()
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        match &self.split_tags {
            Some(tags) => (0..self.len()).filter(|&i| tags[i] == split).collect(),
            None => Vec::new(),
        }
    }

    /// Rows at `indices`, in that order, with all annotations.
    pub fn subset(&self, indices: &[usize]) -> EmbeddingDataset {
        EmbeddingDataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            groups: self
                .groups
                .as_ref()
                .map(|g| indices.iter().map(|&i| g[i]).collect()),
            num_groups: self.num_groups,
            split_tags: self
                .split_tags
                .as_ref()
                .map(|t| indices.iter().map(|&i| t[i]).collect()),
        }
    }

    /// Rows tagged with `split`.
    pub fn part(&self, split: Split) -> EmbeddingDataset {
        self.subset(&self.indices_of(split))
    }

    pub fn group_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_groups];
        if let Some(groups) = &self.groups {
            for &g in groups {
                counts[g] += 1;
            }
        }
        counts
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Group fractions over the whole dataset.
    pub fn group_proportions(&self) -> Vec<f64> {
        let counts = self.group_counts();
        let total: usize = counts.iter().sum();
        counts
            .iter()
            .map(|&c| {
                if total == 0 {
                    0.0
                } else {
                    c as f64 / total as f64
                }
            })
            .collect()
    }
}

/// Parameters of the Gaussian spurious-correlation generator.
///
/// Each example has a core coordinate at `±core_separation` (sign from the
/// class), a spurious coordinate at `±spurious_separation` (sign from the
/// attribute) and `dims − 2` pure-noise coordinates; all coordinates get
/// isotropic noise with standard deviation `noise_std`. Groups are
/// `class · 2 + attribute`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_total: usize,
    pub dims: usize,
    pub group_proportions: Vec<f64>,
    pub core_separation: f64,
    pub spurious_separation: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |field, reason: &str| {
            Err(AfrError::InvalidSpec {
                field,
                reason: reason.to_string(),
            })
        };
        if self.group_proportions.len() != 2 * SYNTHETIC_ATTRIBUTES {
            return fail("group_proportions", "must have exactly 4 entries");
        }
        if self
            .group_proportions
            .iter()
            .any(|&p| !(p > 0.0) || !p.is_finite())
        {
            return fail("group_proportions", "entries must be positive");
        }
        let total: f64 = self.group_proportions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return fail(
                "group_proportions",
                &format!("must sum to 1 (sum = {total})"),
            );
        }
        if self.dims < 2 {
            return fail("dims", "must be at least 2");
        }
        for (field, v) in [
            ("core_separation", self.core_separation),
            ("spurious_separation", self.spurious_separation),
            ("noise_std", self.noise_std),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return fail(field, "must be positive");
            }
        }
        Ok(())
    }
}

/// Splits `total` into integer parts proportional to `weights` using the
/// largest-remainder method (ties go to the lower index).
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Draws a synthetic two-class, four-group dataset. No split tags are set.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<EmbeddingDataset> {
    spec.validate()?;
    let counts = largest_remainder(spec.n_total, &spec.group_proportions);
    if counts.contains(&0) {
        return Err(AfrError::InvalidSpec {
            field: "n_total",
            reason: format!(
                "{} is too small to populate every group ({counts:?})",
                spec.n_total
            ),
        });
    }

    let mut rng = Rng::new(spec.seed);
    let mut order: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(g, &c)| std::iter::repeat_n(g, c))
        .collect();
    rng.shuffle(&mut order);

    let n = order.len();
    let mut data = Vec::with_capacity(n * spec.dims);
    let mut labels = Vec::with_capacity(n);
    for &g in &order {
        let class = g / SYNTHETIC_ATTRIBUTES;
        let attribute = g % SYNTHETIC_ATTRIBUTES;
        let sign = |bit: usize| if bit == 1 { 1.0 } else { -1.0 };
        data.push(sign(class) * spec.core_separation + spec.noise_std * rng.normal());
        data.push(sign(attribute) * spec.spurious_separation + spec.noise_std * rng.normal());
        for _ in 2..spec.dims {
            data.push(spec.noise_std * rng.normal());
        }
        labels.push(class);
    }
    EmbeddingDataset::new(Matrix::new(n, spec.dims, data)?, labels, 2)?
        .with_groups(order, 2 * SYNTHETIC_ATTRIBUTES)
}

/// Fractions for [`split`]. Validation and test are carved from the whole
/// dataset first; the remaining train rows are divided ERM : RW as
/// `erm_fraction : 1 − erm_fraction`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub erm_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Stratify by group (or by class when groups are absent).
    pub stratify: bool,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            erm_fraction: 0.8,
            val_fraction: 0.1,
            test_fraction: 0.2,
            stratify: true,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("erm_fraction", self.erm_fraction),
            ("val_fraction", self.val_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(AfrError::invalid(format!("{name} = {f} is outside (0, 1)")));
            }
        }
        if self.val_fraction + self.test_fraction >= 1.0 {
            return Err(AfrError::invalid(
                "val_fraction + test_fraction leaves no training rows",
            ));
        }
        Ok(())
    }
}

/// Per-stratum allocation of `round(total_size · fraction)` rows. Strata
/// with at least four members get at least one row and leave at least one.
fn allocate(sizes: &[usize], fraction: f64) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let target = (total as f64 * fraction).round() as usize;
    let weights: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
    let mut alloc = largest_remainder(target, &weights);
    for s in 0..sizes.len() {
        if sizes[s] < 4 {
            continue;
        }
        if alloc[s] == 0 {
            alloc[s] = 1;
            if let Some(d) = (0..sizes.len())
                .filter(|&d| d != s && alloc[d] > 1)
                .max_by_key(|&d| (alloc[d], std::cmp::Reverse(d)))
            {
                alloc[d] -= 1;
            }
        } else if alloc[s] >= sizes[s] {
            alloc[s] = sizes[s] - 1;
            if let Some(r) = (0..sizes.len())
                .filter(|&r| r != s && sizes[r] > alloc[r] + 1)
                .max_by_key(|&r| (sizes[r] - alloc[r], std::cmp::Reverse(r)))
            {
                alloc[r] += 1;
            }
        }
    }
    alloc
}

/// Assigns every row one of ERM / RW / VAL / TEST by seeded shuffle.
pub fn split(
    dataset: &EmbeddingDataset,
    fractions: &SplitFractions,
    rng: &mut Rng,
) -> Result<EmbeddingDataset> {
    fractions.validate()?;

    let strata_keys: Vec<usize> = if !fractions.stratify {
        vec![0; dataset.len()]
    } else if let Some(groups) = dataset.groups() {
        groups.to_vec()
    } else {
        dataset.labels().to_vec()
    };
    let n_strata = strata_keys.iter().copied().max().map_or(0, |m| m + 1);
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); n_strata];
    for (i, &k) in strata_keys.iter().enumerate() {
        strata[k].push(i);
    }
    for stratum in &mut strata {
        rng.shuffle(stratum);
    }

    let sizes: Vec<usize> = strata.iter().map(Vec::len).collect();
    let n_test = allocate(&sizes, fractions.test_fraction);
    let n_val = allocate(&sizes, fractions.val_fraction);
    let train_sizes: Vec<usize> = (0..n_strata)
        .map(|s| sizes[s].saturating_sub(n_test[s] + n_val[s]))
        .collect();
    let n_erm = allocate(&train_sizes, fractions.erm_fraction);

    let mut tags = vec![Split::Erm; dataset.len()];
    for (s, stratum) in strata.iter().enumerate() {
        let mut cursor = stratum.iter();
        for (split, count) in [
            (Split::Test, n_test[s]),
            (Split::Val, n_val[s]),
            (Split::Erm, n_erm[s]),
        ] {
            for &i in cursor.by_ref().take(count) {
                tags[i] = split;
            }
        }
        for &i in cursor {
            tags[i] = Split::Rw;
        }
    }
    dataset.clone().with_split_tags(tags)
}

/// Draws a split synthetic dataset of `spec.n_total` rows.
///
/// With `eval_group_proportions` unset this is [`generate_synthetic`]
/// followed by [`split`], so every split shares the training group mix.
/// Otherwise the validation and test rows (`val_fraction` and
/// `test_fraction` of `n_total`) come from a separate population with the
/// given group mix, and only the remaining training pool follows
/// `spec.group_proportions` before its ERM : RW division.
pub fn generate_split_synthetic(
    spec: &SyntheticSpec,
    fractions: &SplitFractions,
    eval_group_proportions: Option<&[f64]>,
    rng: &mut Rng,
) -> Result<EmbeddingDataset> {
    let Some(eval_props) = eval_group_proportions else {
        return split(&generate_synthetic(spec)?, fractions, rng);
    };
    fractions.validate()?;
    let eval_spec = |n_total, seed| SyntheticSpec {
        n_total,
        group_proportions: eval_props.to_vec(),
        seed,
        ..spec.clone()
    };
    let check = |s: &SyntheticSpec| {
        s.validate().map_err(|e| match e {
            AfrError::InvalidSpec { reason, .. } => AfrError::InvalidSpec {
                field: "eval_group_proportions",
                reason,
            },
            other => other,
        })
    };
    let n = spec.n_total;
    let n_val = (n as f64 * fractions.val_fraction).round() as usize;
    let n_test = (n as f64 * fractions.test_fraction).round() as usize;
    let mut seeds = Rng::new(spec.seed).derive(EVAL_STREAM);
    let val_spec = eval_spec(n_val, seeds.next_u64());
    let test_spec = eval_spec(n_test, seeds.next_u64());
    check(&val_spec)?;

    let pool = generate_synthetic(&SyntheticSpec {
        n_total: n - n_val - n_test,
        ..spec.clone()
    })?;
    let val = generate_synthetic(&val_spec)?;
    let test = generate_synthetic(&test_spec)?;

    let groups = pool.groups().expect("synthetic data has groups");
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); pool.num_groups()];
    for (i, &g) in groups.iter().enumerate() {
        strata[if fractions.stratify { g } else { 0 }].push(i);
    }
    for stratum in &mut strata {
        rng.shuffle(stratum);
    }
    let sizes: Vec<usize> = strata.iter().map(Vec::len).collect();
    let n_erm = allocate(&sizes, fractions.erm_fraction);
    let mut tags = vec![Split::Rw; pool.len()];
    for (stratum, &k) in strata.iter().zip(&n_erm) {
        for &i in stratum.iter().take(k) {
            tags[i] = Split::Erm;
        }
    }
    tags.extend(std::iter::repeat_n(Split::Val, val.len()));
    tags.extend(std::iter::repeat_n(Split::Test, test.len()));

    let mut data = pool.features.into_vec();
    data.extend(val.features.as_slice());
    data.extend(test.features.as_slice());
    let mut labels = pool.labels;
    labels.extend(&val.labels);
    labels.extend(&test.labels);
    let mut all_groups = pool.groups.expect("synthetic data has groups");
    all_groups.extend(val.groups.as_deref().unwrap_or_default());
    all_groups.extend(test.groups.as_deref().unwrap_or_default());
    EmbeddingDataset::new(Matrix::new(labels.len(), spec.dims, data)?, labels, 2)?
        .with_groups(all_groups, 2 * SYNTHETIC_ATTRIBUTES)?
        .with_split_tags(tags)
}

const EVAL_STREAM: u64 = 0x5e_a1;

/// Keeps `⌈fraction · N_val⌉` validation rows chosen uniformly without
/// replacement and drops the rest; other splits are untouched.
pub fn subsample_validation(
    dataset: &EmbeddingDataset,
    fraction: f64,
    rng: &mut Rng,
) -> Result<EmbeddingDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(AfrError::invalid(format!(
            "validation fraction {fraction} is outside (0, 1]"
        )));
    }
    let val = dataset.indices_of(Split::Val);
    // tolerance keeps e.g. 0.005 · 1000 at 5 rather than 6
    let keep = ((fraction * val.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    if keep == 0 {
        return Err(AfrError::invalid("validation subsample is empty"));
    }
    let mut chosen = vec![false; dataset.len()];
    for j in rng.sample_indices(val.len(), keep) {
        chosen[val[j]] = true;
    }
    let tags = dataset
        .split_tags()
        .expect("indices_of found validation rows");
    let rows: Vec<usize> = (0..dataset.len())
        .filter(|&i| tags[i] != Split::Val || chosen[i])
        .collect();
    Ok(dataset.subset(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n_total: usize, props: [f64; 4]) -> SyntheticSpec {
        SyntheticSpec {
            n_total,
            dims: 5,
            group_proportions: props.to_vec(),
            core_separation: 1.0,
            spurious_separation: 2.0,
            noise_std: 0.5,
            seed: 3,
        }
    }

    #[test]
    fn separate_eval_population() {
        let fractions = SplitFractions {
            erm_fraction: 0.8,
            val_fraction: 0.1,
            test_fraction: 0.2,
            stratify: true,
        };
        let ds = generate_split_synthetic(
            &spec(5000, [0.73, 0.04, 0.01, 0.22]),
            &fractions,
            Some(&[0.25; 4]),
            &mut Rng::new(1),
        )
        .unwrap();
        assert_eq!(ds.len(), 5000);
        assert_eq!(ds.part(Split::Val).group_counts(), vec![125; 4]);
        assert_eq!(ds.part(Split::Test).group_counts(), vec![250; 4]);
        let mut train = ds.indices_of(Split::Erm);
        train.extend(ds.indices_of(Split::Rw));
        assert_eq!(ds.subset(&train).group_counts(), vec![2555, 140, 35, 770]);
        assert_eq!(ds.indices_of(Split::Erm).len(), 2800);
    }

    #[test]
    fn shared_eval_population_is_plain_split() {
        let s = spec(400, [0.4, 0.1, 0.1, 0.4]);
        let a = generate_split_synthetic(&s, &SplitFractions::default(), None, &mut Rng::new(2))
            .unwrap();
        let b = split(
            &generate_synthetic(&s).unwrap(),
            &SplitFractions::default(),
            &mut Rng::new(2),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_eval_proportions_name_field() {
        let err = generate_split_synthetic(
            &spec(400, [0.25; 4]),
            &SplitFractions::default(),
            Some(&[0.5, 0.5, 0.5, 0.5]),
            &mut Rng::new(0),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            AfrError::InvalidSpec {
                field: "eval_group_proportions",
                ..
            }
        ));
    }

    #[test]
    fn waterbirds_group_counts() {
        let ds = generate_synthetic(&spec(5000, [0.73, 0.04, 0.01, 0.22])).unwrap();
        assert_eq!(ds.group_counts(), vec![3650, 200, 50, 1100]);
        assert_eq!(ds.len(), 5000);
        assert_eq!(ds.dim(), 5);
    }

    #[test]
    fn balanced_group_counts() {
        let ds = generate_synthetic(&spec(8, [0.25; 4])).unwrap();
        assert_eq!(ds.group_counts(), vec![2, 2, 2, 2]);
    }

    #[test]
    fn too_few_examples_rejected() {
        let err = generate_synthetic(&spec(10, [0.73, 0.04, 0.01, 0.22])).unwrap_err();
        assert!(matches!(
            err,
            AfrError::InvalidSpec {
                field: "n_total",
                ..
            }
        ));
    }

    #[test]
    fn bad_proportions_name_field() {
        let err = generate_synthetic(&spec(100, [0.5, 0.2, 0.2, 0.2])).unwrap_err();
        assert!(matches!(
            err,
            AfrError::InvalidSpec {
                field: "group_proportions",
                ..
            }
        ));
    }

    #[test]
    fn group_encodes_class_and_attribute() {
        let ds = generate_synthetic(&spec(400, [0.25; 4])).unwrap();
        for (y, g) in ds.labels().iter().zip(ds.groups().unwrap()) {
            assert_eq!(g / SYNTHETIC_ATTRIBUTES, *y);
        }
    }

    #[test]
    fn spurious_threshold_separates_majority() {
        let mut s = spec(2000, [0.73, 0.04, 0.01, 0.22]);
        s.spurious_separation = 4.0;
        s.core_separation = 0.5;
        s.noise_std = 0.3;
        let ds = generate_synthetic(&s).unwrap();
        let groups = ds.groups().unwrap();
        // brute-force the best threshold on the spurious coordinate
        let majority: Vec<usize> = (0..ds.len())
            .filter(|&i| groups[i] == 0 || groups[i] == 3)
            .collect();
        let mut best = 0.0f64;
        for t in (-40..=40).map(|k| k as f64 * 0.1) {
            let correct = majority
                .iter()
                .filter(|&&i| (ds.features().get(i, 1) > t) == (ds.labels()[i] == 1))
                .count();
            best = best.max(correct as f64 / majority.len() as f64);
        }
        assert!(best >= 0.95, "best threshold accuracy {best}");
    }

    #[test]
    fn split_eighty_twenty() {
        let ds = generate_synthetic(&spec(1250, [0.73, 0.04, 0.01, 0.22])).unwrap();
        let fr = SplitFractions {
            erm_fraction: 0.8,
            val_fraction: 0.1,
            test_fraction: 0.1,
            stratify: true,
        };
        let out = split(&ds, &fr, &mut Rng::new(1)).unwrap();
        assert_eq!(out.indices_of(Split::Erm).len(), 800);
        assert_eq!(out.indices_of(Split::Rw).len(), 200);
        assert_eq!(out.indices_of(Split::Val).len(), 125);
        assert_eq!(out.indices_of(Split::Test).len(), 125);

        let half = SplitFractions {
            erm_fraction: 0.5,
            ..fr
        };
        let out = split(&ds, &half, &mut Rng::new(1)).unwrap();
        assert_eq!(
            out.indices_of(Split::Erm).len(),
            out.indices_of(Split::Rw).len()
        );
    }

    #[test]
    fn split_is_stratified() {
        let ds = generate_synthetic(&spec(3000, [0.73, 0.04, 0.01, 0.22])).unwrap();
        let fr = SplitFractions {
            erm_fraction: 0.8,
            val_fraction: 0.1,
            test_fraction: 0.2,
            stratify: true,
        };
        let out = split(&ds, &fr, &mut Rng::new(9)).unwrap();
        let sizes = ds.group_counts();
        for (split, frac) in [(Split::Test, 0.2), (Split::Val, 0.1)] {
            let counts = out.part(split).group_counts();
            for g in 0..4 {
                let exact = sizes[g] as f64 * frac;
                assert!((counts[g] as f64 - exact).abs() <= 1.0, "{split} group {g}");
                assert!(counts[g] >= 1);
            }
        }
        let erm = out.part(Split::Erm).group_counts();
        let rw = out.part(Split::Rw).group_counts();
        for g in 0..4 {
            let train = (erm[g] + rw[g]) as f64;
            assert!((erm[g] as f64 - 0.8 * train).abs() <= 1.0);
            assert!(rw[g] >= 1);
        }
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let ds = generate_synthetic(&spec(100, [0.25; 4])).unwrap();
        let fr = SplitFractions {
            erm_fraction: 1.0,
            ..Default::default()
        };
        assert!(split(&ds, &fr, &mut Rng::new(0)).is_err());
        let fr = SplitFractions {
            val_fraction: 0.0,
            ..Default::default()
        };
        assert!(split(&ds, &fr, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn split_tags_partition_rows() {
        let ds = generate_synthetic(&spec(500, [0.4, 0.1, 0.1, 0.4])).unwrap();
        let fr = SplitFractions {
            stratify: false,
            ..Default::default()
        };
        let out = split(&ds, &fr, &mut Rng::new(5)).unwrap();
        let total: usize = Split::ALL.iter().map(|&s| out.indices_of(s).len()).sum();
        assert_eq!(total, 500);
    }

    fn with_val(n_val: usize) -> EmbeddingDataset {
        let n = n_val + 10;
        let ds = EmbeddingDataset::new(Matrix::zeros(n, 1), vec![0; n], 1).unwrap();
        let tags = (0..n)
            .map(|i| if i < n_val { Split::Val } else { Split::Test })
            .collect();
        ds.with_split_tags(tags).unwrap()
    }

    #[test]
    fn subsample_counts() {
        let ds = with_val(1000);
        let same = subsample_validation(&ds, 1.0, &mut Rng::new(0)).unwrap();
        assert_eq!(same, ds);
        let small = subsample_validation(&ds, 0.005, &mut Rng::new(0)).unwrap();
        assert_eq!(small.indices_of(Split::Val).len(), 5);
        assert_eq!(small.indices_of(Split::Test).len(), 10);
    }

    #[test]
    fn subsample_deterministic_and_validated() {
        let mut ds = with_val(200);
        let feats: Vec<f64> = (0..ds.len()).map(|i| i as f64).collect();
        ds = ds
            .with_features(Matrix::new(ds.len(), 1, feats).unwrap())
            .unwrap();
        let a = subsample_validation(&ds, 0.1, &mut Rng::new(11)).unwrap();
        let b = subsample_validation(&ds, 0.1, &mut Rng::new(11)).unwrap();
        assert_eq!(a, b);
        assert!(subsample_validation(&ds, 0.0, &mut Rng::new(0)).is_err());
        assert!(subsample_validation(&with_val(0), 0.5, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn largest_remainder_sums() {
        let c = largest_remainder(7, &[1.0, 1.0, 1.0]);
        assert_eq!(c, vec![3, 2, 2]);
        assert_eq!(c.iter().sum::<usize>(), 7);
    }
}

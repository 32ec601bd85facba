//! Seeded selection of K-shot subsets and in-context demonstrations.
//!
//! All randomness in the harness flows from an [`RngKey`]. A key is hashed
//! (SHA-256, first 8 bytes little-endian) into the seed of a ChaCha20
//! stream, so a given key produces the same draws on every platform.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Example, LanguageSplit};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RngRole {
    ShotSelection,
    ContextSelection,
    Training,
    Adaptation,
    Permutation,
    Synthesis,
}

impl RngRole {
    fn as_str(self) -> &'static str {
        match self {
            RngRole::ShotSelection => "shot-selection",
            RngRole::ContextSelection => "context-selection",
            RngRole::Training => "training",
            RngRole::Adaptation => "adaptation",
            RngRole::Permutation => "permutation",
            RngRole::Synthesis => "synthesis",
        }
    }
}

/// Names one random stream: `(experiment_id, role, seed)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RngKey {
    pub experiment_id: String,
    pub role: RngRole,
    pub seed: u64,
}

pub type Stream = ChaCha20Rng;

impl RngKey {
    pub fn new(experiment_id: impl Into<String>, role: RngRole, seed: u64) -> Self {
        RngKey {
            experiment_id: experiment_id.into(),
            role,
            seed,
        }
    }

    /// A key for an independent sub-stream, e.g. one per language.
    pub fn child(&self, tag: impl fmt::Display) -> Self {
        RngKey {
            experiment_id: format!("{}/{}", self.experiment_id, tag),
            role: self.role,
            seed: self.seed,
        }
    }

    pub fn with_role(&self, role: RngRole) -> Self {
        RngKey {
            role,
            ..self.clone()
        }
    }

    pub fn hash64(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(self.experiment_id.as_bytes());
        h.update([0u8]);
        h.update(self.role.as_str().as_bytes());
        h.update([0u8]);
        h.update(self.seed.to_le_bytes());
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
    }

    pub fn stream(&self) -> Stream {
        ChaCha20Rng::seed_from_u64(self.hash64())
    }
}

impl fmt::Display for RngKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.experiment_id, self.role.as_str(), self.seed)
    }
}

/// Uniform index in `0..n` drawn through `u64` so the result does not depend
/// on the platform's pointer width.
pub fn uniform_index(rng: &mut impl Rng, n: usize) -> usize {
    assert!(n > 0, "uniform_index over empty range");
    rng.gen_range(0..n as u64) as usize
}

/// Fisher-Yates shuffle built on [`uniform_index`].
pub fn shuffle<T>(rng: &mut impl Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = uniform_index(rng, i + 1);
        items.swap(i, j);
    }
}

/// A K-shot subset of a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotSet {
    pub lang: String,
    pub k: usize,
    pub n_classes: usize,
    /// Positions of the selected examples in the source split, in selection order.
    pub indices: Vec<usize>,
    pub examples: Vec<Example>,
    /// Bucket fill per class; equals `min(k, available)`.
    pub per_class_counts: BTreeMap<String, usize>,
    /// Members of each class bucket (indices into the source split).
    pub buckets: BTreeMap<String, Vec<usize>>,
    /// Classes with fewer than `k` training examples, with the number available.
    pub shortfalls: BTreeMap<String, usize>,
}

impl ShotSet {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Number of selected examples that carry `label`.
    pub fn coverage(&self, label: &str) -> usize {
        self.examples.iter().filter(|e| e.labels.contains(label)).count()
    }
}

/// Select K examples per class from `split.train`.
///
/// Classes are visited in canonical label order. Already-selected examples
/// carrying the class are counted into its bucket first; the bucket is then
/// topped up to `min(k, N_i)` with examples drawn uniformly without
/// replacement from the not-yet-selected examples carrying the class.
pub fn sample_k_shot(
    split: &LanguageSplit,
    label_set: &[String],
    k: usize,
    key: &RngKey,
) -> Result<ShotSet> {
    let mut shots = ShotSet {
        lang: split.lang.clone(),
        k,
        n_classes: label_set.len(),
        indices: Vec::new(),
        examples: Vec::new(),
        per_class_counts: BTreeMap::new(),
        buckets: BTreeMap::new(),
        shortfalls: BTreeMap::new(),
    };
    if k == 0 {
        for label in label_set {
            shots.per_class_counts.insert(label.clone(), 0);
            shots.buckets.insert(label.clone(), Vec::new());
        }
        return Ok(shots);
    }
    if split.train.is_empty() {
        return Err(Error::EmptySplit {
            lang: split.lang.clone(),
            k,
        });
    }

    let mut rng = key.stream();
    let mut selected = vec![false; split.train.len()];
    for label in label_set {
        let carriers: Vec<usize> = (0..split.train.len())
            .filter(|&i| split.train[i].labels.contains(label))
            .collect();
        let target = k.min(carriers.len());
        if carriers.len() < k {
            log::warn!(
                "{}: class {label:?} has {} examples, fewer than k = {k}",
                split.lang,
                carriers.len()
            );
            shots.shortfalls.insert(label.clone(), carriers.len());
        }
        let mut bucket: Vec<usize> = shots
            .indices
            .iter()
            .copied()
            .filter(|&i| split.train[i].labels.contains(label))
            .take(target)
            .collect();
        let mut pool: Vec<usize> = carriers.into_iter().filter(|&i| !selected[i]).collect();
        while bucket.len() < target {
            let pick = pool.swap_remove(uniform_index(&mut rng, pool.len()));
            selected[pick] = true;
            shots.indices.push(pick);
            bucket.push(pick);
        }
        shots.per_class_counts.insert(label.clone(), bucket.len());
        shots.buckets.insert(label.clone(), bucket);
    }
    shots.examples = shots.indices.iter().map(|&i| split.train[i].clone()).collect();
    Ok(shots)
}

/// Ordered text/label pairs prepended to an input.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Demonstrations {
    pub origin_lang: String,
    pub pairs: Vec<(String, BTreeSet<String>)>,
    /// Pool positions the pairs were drawn from.
    pub indices: Vec<usize>,
}

impl Demonstrations {
    pub fn empty(origin_lang: impl Into<String>) -> Self {
        Demonstrations {
            origin_lang: origin_lang.into(),
            pairs: Vec::new(),
            indices: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// All examples of a shot set, in an order shuffled by `key`.
    pub fn from_shots(shots: &ShotSet, key: &RngKey) -> Self {
        let mut order: Vec<usize> = (0..shots.examples.len()).collect();
        shuffle(&mut key.stream(), &mut order);
        Demonstrations {
            origin_lang: shots.lang.clone(),
            pairs: order
                .iter()
                .map(|&i| (shots.examples[i].text.clone(), shots.examples[i].labels.clone()))
                .collect(),
            indices: order.iter().map(|&i| shots.indices[i]).collect(),
        }
    }
}

/// Draw `m` demonstrations from `train`, never including `exclude`.
///
/// Without `allow_reuse` the draw is without replacement and fails when the
/// pool is too small. With it, a short pool is cycled through repeated
/// shuffled passes so every example appears before any appears twice.
pub fn sample_context(
    train: &[Example],
    m: usize,
    exclude: Option<usize>,
    allow_reuse: bool,
    key: &RngKey,
) -> Result<Demonstrations> {
    let origin_lang = train.first().map(|e| e.lang.clone()).unwrap_or_default();
    if m == 0 {
        return Ok(Demonstrations::empty(origin_lang));
    }
    let pool: Vec<usize> = (0..train.len()).filter(|&i| Some(i) != exclude).collect();
    if pool.len() < m && (!allow_reuse || pool.is_empty()) {
        return Err(Error::NotEnoughExamples {
            requested: m,
            available: pool.len(),
        });
    }
    let mut rng = key.stream();
    let mut indices = Vec::with_capacity(m);
    while indices.len() < m {
        let mut pass = pool.clone();
        let take = (m - indices.len()).min(pass.len());
        // partial Fisher-Yates: the first `take` slots become a uniform draw
        for i in 0..take {
            let j = i + uniform_index(&mut rng, pass.len() - i);
            pass.swap(i, j);
        }
        indices.extend_from_slice(&pass[..take]);
    }
    Ok(Demonstrations {
        origin_lang,
        pairs: indices
            .iter()
            .map(|&i| (train[i].text.clone(), train[i].labels.clone()))
            .collect(),
        indices,
    })
}

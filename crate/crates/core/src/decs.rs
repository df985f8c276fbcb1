//! Discriminative exemplar coreset selection.
//!
//! A coreset is a small, class-balanced set of unit-norm keys living in the
//! embedding space. Starting from randomly chosen training vectors, each key
//! is pulled towards the queries for which it is the *least* similar key of
//! the query's own class (the hardest positive). Per batch, every key that
//! received queries is blended with their mean and renormalized:
//!
//! ```text
//! k <- normalize((1 - alpha) * k + alpha * mean(assigned queries))
//! ```
//!
//! Averaging over dissimilar same-class queries washes out nuisance
//! variation that plain nearest-neighbour exemplar selection would copy.
//!
//! Sizing scales with the training set size `N`:
//!
//! ```text
//! S_c   = floor(base_size   * sqrt(N / ref_size))
//! T_opt = floor(base_epochs * sqrt(ref_size / N))
//! ```
//!
//! Both floors are evaluated in exact integer arithmetic
//! (`floor(b * sqrt(p / q)) == isqrt(b^2 * p / q)`), so the results never
//! depend on floating-point rounding.
//!
//! Randomness: initialization draws from stream
//! [`stream::CORESET_INIT`](crate::rng::stream) and epoch shuffles from
//! [`stream::EPOCH_SHUFFLE`](crate::rng::stream) of the configured seed; see
//! [`crate::rng`] for the exact Fisher–Yates procedure.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{dot, l2_norm, Dataset};
use crate::rng::{self, stream};

/// Keys must stay within this distance of unit norm.
pub const KEY_NORM_TOLERANCE: f64 = 1e-6;

/// Blends whose norm falls below this are left unapplied.
pub const DEGENERATE_BLEND_NORM: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum DecsError {
    #[error("invalid DECS config: {0}")]
    InvalidConfig(String),
    #[error("record {0:?} is not unit-norm; normalize the dataset first")]
    NotNormalized(String),
    #[error("coreset size {size} cannot hold {num_classes} balanced classes")]
    CoresetTooSmall { size: usize, num_classes: usize },
    #[error("class {0} has no members to seed its keys")]
    QuotaUnsatisfiable(usize),
    #[error("coreset has no key for class {0}")]
    NoKeyForClass(usize),
    #[error("query of class {query_class} assigned to key {key} of class {key_class}")]
    ClassMismatch {
        query_class: usize,
        key: usize,
        key_class: usize,
    },
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("assignment batch is invalid: {0}")]
    InvalidBatch(String),
    #[error("every training record seeded a key; no queries remain")]
    EmptyQueryPool,
    #[error("top-k of {k} requested but the key set has only {size} entries")]
    KTooLarge { k: usize, size: usize },
    #[error("top-k requires k >= 1")]
    ZeroK,
    #[error("invalid coreset: {0}")]
    InvalidCoreset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("coreset file parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, DecsError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecsConfig {
    pub base_size: usize,
    pub base_epochs: usize,
    pub ref_size: usize,
    pub update_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub top_k: usize,
}

impl Default for DecsConfig {
    fn default() -> Self {
        Self {
            base_size: 50,
            base_epochs: 10,
            ref_size: 1000,
            update_rate: 0.2,
            batch_size: 128,
            seed: 0,
            top_k: 5,
        }
    }
}

impl DecsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DecsError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.update_rate) {
            return bad("update_rate must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.top_k == 0 {
            return bad("top_k must be >= 1");
        }
        if self.base_size == 0 || self.base_epochs == 0 || self.ref_size == 0 {
            return bad("base_size, base_epochs and ref_size must be >= 1");
        }
        Ok(())
    }
}

/// Coreset size and number of optimization epochs; serialized as
/// `[coreset_size, epochs]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Sizing {
    pub coreset_size: usize,
    pub epochs: usize,
}

impl From<(usize, usize)> for Sizing {
    fn from((coreset_size, epochs): (usize, usize)) -> Self {
        Self {
            coreset_size,
            epochs,
        }
    }
}

impl From<Sizing> for (usize, usize) {
    fn from(s: Sizing) -> Self {
        (s.coreset_size, s.epochs)
    }
}

fn isqrt(n: u128) -> u128 {
    if n < 2 {
        return n;
    }
    let mut x = (n as f64).sqrt() as u128;
    while x * x > n {
        x -= 1;
    }
    while (x + 1) * (x + 1) <= n {
        x += 1;
    }
    x
}

/// `floor(base * sqrt(num / den))`, exactly.
fn scaled_floor(base: usize, num: usize, den: usize) -> usize {
    let b = base as u128;
    isqrt(b * b * num as u128 / den as u128) as usize
}

/// Sizing for a training set of `n` records; both values clamped to >= 1.
pub fn adaptive_size(n: usize, cfg: &DecsConfig) -> Sizing {
    let n = n.max(1);
    Sizing {
        coreset_size: scaled_floor(cfg.base_size, n, cfg.ref_size).max(1),
        epochs: scaled_floor(cfg.base_epochs, cfg.ref_size, n).max(1),
    }
}

/// [`adaptive_size`] with the coreset size raised to at least one key per class.
pub fn adaptive_size_for(n: usize, num_classes: usize, cfg: &DecsConfig) -> Sizing {
    let mut s = adaptive_size(n, cfg);
    s.coreset_size = s.coreset_size.max(num_classes);
    s
}

/// Per-class key quotas: `floor(size / C)` each, with the remainder handed out
/// one key at a time to the classes with the most records (ties go to the
/// lower class index).
pub fn class_quotas(class_counts: &[usize], size: usize) -> Vec<usize> {
    let c = class_counts.len();
    let mut quotas = vec![size / c; c];
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| class_counts[b].cmp(&class_counts[a]).then(a.cmp(&b)));
    for &class in order.iter().take(size % c) {
        quotas[class] += 1;
    }
    quotas
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coreset {
    pub dim: usize,
    pub num_classes: usize,
    pub sizing: Sizing,
    pub config: DecsConfig,
    pub keys: Vec<Vec<f64>>,
    pub key_class: Vec<usize>,
    pub init_member_ids: Vec<String>,
}

impl Coreset {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys_per_class(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &c in &self.key_class {
            counts[c] += 1;
        }
        counts
    }

    /// Largest deviation of any key from unit norm.
    pub fn max_norm_error(&self) -> f64 {
        self.keys
            .iter()
            .map(|k| (l2_norm(k) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DecsError::InvalidCoreset(m));
        let n = self.keys.len();
        if n == 0 {
            return bad("no keys".into());
        }
        if self.key_class.len() != n || self.init_member_ids.len() != n {
            return bad(format!(
                "{} keys, {} classes, {} member ids",
                n,
                self.key_class.len(),
                self.init_member_ids.len()
            ));
        }
        if let Some(k) = self.keys.iter().find(|k| k.len() != self.dim) {
            return bad(format!("key of length {} in a dim-{} coreset", k.len(), self.dim));
        }
        if let Some(&c) = self.key_class.iter().find(|&&c| c >= self.num_classes) {
            return bad(format!("key class {c} out of range"));
        }
        if self.max_norm_error() >= KEY_NORM_TOLERANCE {
            return bad("keys are not unit-norm".into());
        }
        let counts = self.keys_per_class();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        if hi - lo > 1 {
            return bad(format!("class balance violated: {counts:?}"));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let coreset: Coreset = serde_json::from_str(&text)?;
        coreset.validate()?;
        Ok(coreset)
    }
}

fn ensure_normalized(ds: &Dataset) -> Result<()> {
    match ds
        .records()
        .iter()
        .find(|r| (r.norm() - 1.0).abs() > crate::embedding::UNIT_NORM_TOLERANCE)
    {
        Some(r) => Err(DecsError::NotNormalized(r.id.clone())),
        None => Ok(()),
    }
}

/// Random class-balanced initialization with the given number of keys.
pub fn init_coreset(ds: &Dataset, coreset_size: usize, seed: u64) -> Result<Coreset> {
    let cfg = DecsConfig {
        seed,
        ..DecsConfig::default()
    };
    let sizing = Sizing {
        coreset_size,
        epochs: adaptive_size(ds.len(), &cfg).epochs,
    };
    init_with(ds, sizing, cfg)
}

fn init_with(ds: &Dataset, sizing: Sizing, config: DecsConfig) -> Result<Coreset> {
    ensure_normalized(ds)?;
    let c = ds.num_classes();
    if sizing.coreset_size < c {
        return Err(DecsError::CoresetTooSmall {
            size: sizing.coreset_size,
            num_classes: c,
        });
    }
    let members = ds.class_members();
    let quotas = class_quotas(&ds.class_counts(), sizing.coreset_size);
    let mut rng = rng::seeded(config.seed, stream::CORESET_INIT);

    let mut keys = Vec::with_capacity(sizing.coreset_size);
    let mut key_class = Vec::with_capacity(sizing.coreset_size);
    let mut init_member_ids = Vec::with_capacity(sizing.coreset_size);
    for (class, (pool, &quota)) in members.iter().zip(&quotas).enumerate() {
        if pool.is_empty() {
            return Err(DecsError::QuotaUnsatisfiable(class));
        }
        let mut picks = rng::sample_without_replacement(&mut rng, pool, quota);
        // Classes smaller than their quota are topped up with replacement.
        while picks.len() < quota {
            picks.push(pool[rng::draw_index(&mut rng, pool.len())]);
        }
        for idx in picks {
            let r = ds.get(idx);
            keys.push(r.vector.clone());
            key_class.push(class);
            init_member_ids.push(r.id.clone());
        }
    }
    Ok(Coreset {
        dim: ds.dim(),
        num_classes: c,
        sizing,
        config,
        keys,
        key_class,
        init_member_ids,
    })
}

/// Index of the same-class key with the *smallest* inner product with
/// `query`; ties resolve to the lowest key index.
pub fn assign_hardest_positive(query: &[f64], query_class: usize, coreset: &Coreset) -> Result<usize> {
    if query.len() != coreset.dim {
        return Err(DecsError::DimensionMismatch {
            expected: coreset.dim,
            found: query.len(),
        });
    }
    let mut best: Option<(usize, f64)> = None;
    for (j, key) in coreset.keys.iter().enumerate() {
        if coreset.key_class[j] != query_class {
            continue;
        }
        let sim = dot(query, key);
        if best.is_none_or(|(_, s)| sim < s) {
            best = Some((j, sim));
        }
    }
    best.map(|(j, _)| j)
        .ok_or(DecsError::NoKeyForClass(query_class))
}

/// Hardest-positive assignments for one batch of queries.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentBatch {
    /// `(query record index, key index)` in query order.
    pub pairs: Vec<(usize, usize)>,
    /// For each key, the query record indices assigned to it.
    pub groups: Vec<Vec<usize>>,
}

impl AssignmentBatch {
    pub fn assign(coreset: &Coreset, ds: &Dataset, queries: &[usize]) -> Result<Self> {
        let mut pairs = Vec::with_capacity(queries.len());
        let mut groups = vec![Vec::new(); coreset.len()];
        for &q in queries {
            let r = ds.get(q);
            let j = assign_hardest_positive(&r.vector, r.label, coreset)?;
            pairs.push((q, j));
            groups[j].push(q);
        }
        Ok(Self { pairs, groups })
    }

    /// Builds a batch from explicit pairs.
    pub fn from_pairs(num_keys: usize, pairs: Vec<(usize, usize)>) -> Result<Self> {
        let mut groups = vec![Vec::new(); num_keys];
        for &(q, j) in &pairs {
            if j >= num_keys {
                return Err(DecsError::InvalidBatch(format!("key {j} out of range")));
            }
            groups[j].push(q);
        }
        Ok(Self { pairs, groups })
    }

    fn check(&self, coreset: &Coreset, ds: &Dataset) -> Result<()> {
        if self.groups.len() != coreset.len() {
            return Err(DecsError::InvalidBatch(format!(
                "{} groups for {} keys",
                self.groups.len(),
                coreset.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for &(q, j) in &self.pairs {
            if q >= ds.len() {
                return Err(DecsError::InvalidBatch(format!("query {q} out of range")));
            }
            if !seen.insert(q) {
                return Err(DecsError::InvalidBatch(format!("query {q} assigned twice")));
            }
            let (qc, kc) = (ds.get(q).label, coreset.key_class[j]);
            if qc != kc {
                return Err(DecsError::ClassMismatch {
                    query_class: qc,
                    key: j,
                    key_class: kc,
                });
            }
        }
        Ok(())
    }
}

fn apply_ema(keys: &mut [Vec<f64>], batch: &AssignmentBatch, ds: &Dataset, alpha: f64) {
    // With alpha = 0 the blend is the key itself; renormalizing would only add rounding.
    if alpha == 0.0 {
        return;
    }
    for (j, assigned) in batch.groups.iter().enumerate() {
        if assigned.is_empty() {
            continue;
        }
        let key = &keys[j];
        let inv = 1.0 / assigned.len() as f64;
        let mut mean = vec![0.0; key.len()];
        for &q in assigned {
            for (m, x) in mean.iter_mut().zip(&ds.get(q).vector) {
                *m += x;
            }
        }
        let blend: Vec<f64> = key
            .iter()
            .zip(&mean)
            .map(|(k, m)| (1.0 - alpha) * k + alpha * (m * inv))
            .collect();
        let norm = l2_norm(&blend);
        if norm < DEGENERATE_BLEND_NORM {
            log::warn!("degenerate EMA update for key {j}: blend norm {norm:e}; key left unchanged");
            continue;
        }
        keys[j] = blend.into_iter().map(|x| x / norm).collect();
    }
}

/// One exponential-moving-average step over a batch; keys without assigned
/// queries are untouched. Returns a new coreset.
pub fn ema_update(coreset: &Coreset, batch: &AssignmentBatch, ds: &Dataset, alpha: f64) -> Result<Coreset> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(DecsError::InvalidConfig("update_rate must lie in [0, 1]".into()));
    }
    batch.check(coreset, ds)?;
    let mut next = coreset.clone();
    apply_ema(&mut next.keys, batch, ds, alpha);
    Ok(next)
}

/// Runs the full optimization. See [`optimize_with`].
pub fn optimize(ds: &Dataset, cfg: &DecsConfig) -> Result<Coreset> {
    optimize_with(ds, cfg, |_, _| {})
}

/// Sizes and initializes a coreset, then runs `T_opt` epochs. Each epoch
/// shuffles the query pool (every record that did not seed a key), cuts it
/// into batches of `batch_size`, assigns every query of a batch to its
/// hardest positive and applies one EMA step. `on_epoch` sees the coreset
/// after each epoch.
pub fn optimize_with<F>(ds: &Dataset, cfg: &DecsConfig, mut on_epoch: F) -> Result<Coreset>
where
    F: FnMut(usize, &Coreset),
{
    cfg.validate()?;
    ensure_normalized(ds)?;
    let sizing = adaptive_size_for(ds.len(), ds.num_classes(), cfg);
    let mut coreset = init_with(ds, sizing, cfg.clone())?;

    let seeded: std::collections::HashSet<&str> =
        coreset.init_member_ids.iter().map(String::as_str).collect();
    let mut pool: Vec<usize> = (0..ds.len())
        .filter(|&i| !seeded.contains(ds.get(i).id.as_str()))
        .collect();
    if pool.is_empty() {
        return Err(DecsError::EmptyQueryPool);
    }

    let mut rng = rng::seeded(cfg.seed, stream::EPOCH_SHUFFLE);
    for epoch in 0..sizing.epochs {
        rng::fisher_yates(&mut rng, &mut pool);
        for chunk in pool.chunks(cfg.batch_size) {
            let batch = AssignmentBatch::assign(&coreset, ds, chunk)?;
            apply_ema(&mut coreset.keys, &batch, ds, cfg.update_rate);
        }
        log::debug!("epoch {}/{} done", epoch + 1, sizing.epochs);
        on_epoch(epoch, &coreset);
    }
    Ok(coreset)
}

/// One retrieved key.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Neighbor {
    pub index: usize,
    pub class: usize,
    pub similarity: f64,
}

/// The `k` most similar candidates by inner product, best first, ties by
/// ascending candidate index. Returns `(index, similarity)`.
pub fn top_k_cosine<'a, I>(candidates: I, query: &[f64], k: usize) -> Vec<(usize, f64)>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
    for (i, cand) in candidates.into_iter().enumerate() {
        let sim = dot(query, cand);
        if best.len() == k && best.last().is_some_and(|&(_, s)| sim <= s) {
            continue;
        }
        // Strictly-greater comparison keeps earlier indices ahead on ties.
        let pos = best.partition_point(|&(_, s)| s >= sim);
        best.insert(pos, (i, sim));
        best.truncate(k);
    }
    best
}

pub fn retrieve_topk(coreset: &Coreset, query: &[f64], k: usize) -> Result<Vec<Neighbor>> {
    if k == 0 {
        return Err(DecsError::ZeroK);
    }
    if k > coreset.len() {
        return Err(DecsError::KTooLarge {
            k,
            size: coreset.len(),
        });
    }
    if query.len() != coreset.dim {
        return Err(DecsError::DimensionMismatch {
            expected: coreset.dim,
            found: query.len(),
        });
    }
    Ok(top_k_cosine(coreset.keys.iter().map(Vec::as_slice), query, k)
        .into_iter()
        .map(|(index, similarity)| Neighbor {
            index,
            class: coreset.key_class[index],
            similarity,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbeddingRecord;

    fn coreset(keys: Vec<Vec<f64>>, classes: Vec<usize>) -> Coreset {
        let n = keys.len();
        Coreset {
            dim: keys[0].len(),
            num_classes: classes.iter().max().unwrap() + 1,
            sizing: Sizing {
                coreset_size: n,
                epochs: 1,
            },
            config: DecsConfig::default(),
            keys,
            key_class: classes,
            init_member_ids: (0..n).map(|i| format!("m{i}")).collect(),
        }
    }

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = l2_norm(v);
        v.iter().map(|x| x / n).collect()
    }

    fn dataset(classes: &[usize], dim: usize) -> Dataset {
        let recs = classes
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let mut v = vec![0.1; dim];
                v[i % dim] += 1.0 + i as f64 * 0.01;
                EmbeddingRecord::new(format!("r{i}"), c, unit(&v))
            })
            .collect();
        Dataset::new(recs, dim, classes.iter().max().unwrap() + 1).unwrap()
    }

    #[test]
    fn sizing_examples() {
        let cfg = DecsConfig::default();
        assert_eq!(adaptive_size(1000, &cfg), Sizing::from((50, 10)));
        assert_eq!(adaptive_size(4000, &cfg), Sizing::from((100, 5)));
        assert_eq!(adaptive_size(250, &cfg), Sizing::from((25, 20)));
    }

    #[test]
    fn sizing_clamps() {
        let cfg = DecsConfig::default();
        assert_eq!(adaptive_size(1, &cfg), Sizing::from((1, 316)));
        assert_eq!(adaptive_size(0, &cfg).coreset_size, 1);
        assert_eq!(adaptive_size(10_000_000, &cfg).epochs, 1);
        assert_eq!(adaptive_size_for(1, 8, &cfg).coreset_size, 8);
    }

    #[test]
    fn isqrt_matches_float_on_small_values() {
        for n in 0u128..5000 {
            assert_eq!(isqrt(n), (n as f64).sqrt().floor() as u128);
        }
        assert_eq!(isqrt(u64::MAX as u128 * 4), (u64::MAX as u128 * 4).isqrt());
    }

    #[test]
    fn quota_examples() {
        assert_eq!(class_quotas(&[7, 9], 4), vec![2, 2]);
        assert_eq!(class_quotas(&[10, 5, 5], 4), vec![2, 1, 1]);
        assert_eq!(class_quotas(&[5, 5, 10], 5), vec![2, 1, 2]);
        assert_eq!(class_quotas(&[3, 3, 3], 4), vec![2, 1, 1]);
    }

    #[test]
    fn init_is_balanced_and_deterministic() {
        let ds = dataset(&[0, 0, 0, 0, 0, 1, 1, 1, 1, 1], 4);
        let a = init_coreset(&ds, 4, 11).unwrap();
        let b = init_coreset(&ds, 4, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.keys_per_class(), vec![2, 2]);
        let mut ids = a.init_member_ids.clone();
        ids.dedup();
        assert_eq!(ids.len(), 4);
        for (j, id) in a.init_member_ids.iter().enumerate() {
            let (_, r) = ds.find(id).unwrap();
            assert_eq!(r.label, a.key_class[j]);
            assert_eq!(r.vector, a.keys[j]);
        }
    }

    #[test]
    fn init_tops_up_small_classes_with_replacement() {
        let ds = dataset(&[0, 0, 0, 0, 0, 0, 1], 3);
        let c = init_coreset(&ds, 6, 1).unwrap();
        assert_eq!(c.keys_per_class(), vec![3, 3]);
        assert!(c.init_member_ids[3..].iter().all(|id| id == "r6"));
    }

    #[test]
    fn init_rejects_tiny_coreset_and_unnormalized_data() {
        let ds = dataset(&[0, 1, 2], 3);
        assert!(matches!(
            init_coreset(&ds, 2, 0),
            Err(DecsError::CoresetTooSmall { .. })
        ));
        let raw = Dataset::new(vec![EmbeddingRecord::new("a", 0, vec![3.0, 4.0])], 2, 1).unwrap();
        assert!(matches!(init_coreset(&raw, 1, 0), Err(DecsError::NotNormalized(_))));
    }

    #[test]
    fn hardest_positive_examples() {
        let c = coreset(vec![vec![1.0, 0.0], vec![0.6, 0.8], vec![0.0, 1.0]], vec![0, 0, 1]);
        assert_eq!(assign_hardest_positive(&[1.0, 0.0], 0, &c).unwrap(), 1);
        assert_eq!(assign_hardest_positive(&[1.0, 0.0], 1, &c).unwrap(), 2);
        let tie = coreset(vec![vec![0.0, 1.0], vec![0.0, 1.0]], vec![0, 0]);
        assert_eq!(assign_hardest_positive(&[1.0, 0.0], 0, &tie).unwrap(), 0);
        assert!(matches!(
            assign_hardest_positive(&[1.0, 0.0], 5, &c),
            Err(DecsError::NoKeyForClass(5))
        ));
    }

    #[test]
    fn ema_hand_example() {
        // key (1,0) pulled towards (0,1) at alpha 0.2: normalize(0.8, 0.2).
        let ds = Dataset::new(vec![EmbeddingRecord::new("q", 0, vec![0.0, 1.0])], 2, 1).unwrap();
        let c = coreset(vec![vec![1.0, 0.0]], vec![0]);
        let batch = AssignmentBatch::from_pairs(1, vec![(0, 0)]).unwrap();
        let next = ema_update(&c, &batch, &ds, 0.2).unwrap();
        let expected = [0.8 / 0.68f64.sqrt(), 0.2 / 0.68f64.sqrt()];
        assert!((next.keys[0][0] - 0.970_142_500_145_332).abs() < 1e-12);
        assert!((next.keys[0][1] - 0.242_535_625_036_333).abs() < 1e-12);
        assert!((next.keys[0][0] - expected[0]).abs() < 1e-15);
        assert_eq!(c.keys[0], vec![1.0, 0.0], "input must not be mutated");
    }

    #[test]
    fn ema_identity_cases() {
        let ds = dataset(&[0, 0, 1, 1], 3);
        let c = coreset(vec![unit(&[1.0, 2.0, 3.0]), unit(&[3.0, 1.0, 0.5])], vec![0, 1]);
        let batch = AssignmentBatch::assign(&c, &ds, &[0, 1]).unwrap();
        assert_eq!(ema_update(&c, &batch, &ds, 0.0).unwrap(), c);
        let next = ema_update(&c, &batch, &ds, 0.5).unwrap();
        assert_ne!(next.keys[0], c.keys[0]);
        assert_eq!(next.keys[1], c.keys[1], "key without assignments is untouched");
    }

    #[test]
    fn ema_degenerate_blend_leaves_key() {
        let ds = Dataset::new(vec![EmbeddingRecord::new("q", 0, vec![-1.0, 0.0])], 2, 1).unwrap();
        let c = coreset(vec![vec![1.0, 0.0]], vec![0]);
        let batch = AssignmentBatch::from_pairs(1, vec![(0, 0)]).unwrap();
        assert_eq!(ema_update(&c, &batch, &ds, 0.5).unwrap().keys, c.keys);
    }

    #[test]
    fn ema_rejects_cross_class_batches() {
        let ds = dataset(&[0, 1], 2);
        let c = coreset(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1]);
        let batch = AssignmentBatch::from_pairs(2, vec![(1, 0)]).unwrap();
        assert!(matches!(
            ema_update(&c, &batch, &ds, 0.2),
            Err(DecsError::ClassMismatch { .. })
        ));
        let dup = AssignmentBatch::from_pairs(2, vec![(0, 0), (0, 0)]).unwrap();
        assert!(matches!(ema_update(&c, &dup, &ds, 0.2), Err(DecsError::InvalidBatch(_))));
    }

    #[test]
    fn retrieval_examples() {
        let c = coreset(vec![vec![1.0, 0.0], vec![0.0, 1.0], unit(&[1.0, 1.0])], vec![0, 1, 0]);
        let top = retrieve_topk(&c, &[1.0, 0.0], 2).unwrap();
        assert_eq!(top[0].index, 0);
        assert_eq!(top[0].similarity, 1.0);
        assert_eq!(top[1].index, 2);
        assert!((top[1].similarity - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(
            retrieve_topk(&c, &[1.0, 0.0], 4),
            Err(DecsError::KTooLarge { k: 4, size: 3 })
        ));
        assert!(matches!(retrieve_topk(&c, &[1.0, 0.0], 0), Err(DecsError::ZeroK)));
    }

    #[test]
    fn retrieval_ties_go_to_lower_index() {
        let c = coreset(
            vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]],
            vec![0, 0, 0],
        );
        let top = retrieve_topk(&c, &[1.0, 0.0, 0.0], 3).unwrap();
        let order: Vec<usize> = top.iter().map(|n| n.index).collect();
        assert_eq!(order, vec![0, 1, 2]);
    }

    #[test]
    fn optimize_alpha_zero_equals_init() {
        let ds = dataset(&[0, 0, 0, 0, 1, 1, 1, 1, 1, 1], 4);
        let cfg = DecsConfig {
            update_rate: 0.0,
            base_size: 40,
            seed: 5,
            ..DecsConfig::default()
        };
        let sizing = adaptive_size_for(ds.len(), 2, &cfg);
        let init = init_with(&ds, sizing, cfg.clone()).unwrap();
        assert_eq!(optimize(&ds, &cfg).unwrap(), init);
    }

    #[test]
    fn optimize_needs_queries() {
        let ds = dataset(&[0, 1], 2);
        let cfg = DecsConfig {
            base_size: 1000,
            ..DecsConfig::default()
        };
        assert!(matches!(optimize(&ds, &cfg), Err(DecsError::EmptyQueryPool)));
    }

    #[test]
    fn coreset_file_round_trip() {
        let ds = dataset(&[0, 0, 0, 1, 1, 1, 2, 2, 2], 5);
        let cfg = DecsConfig {
            base_size: 60,
            seed: 3,
            ..DecsConfig::default()
        };
        let c = optimize(&ds, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("coreset.json");
        c.save(&p).unwrap();
        assert_eq!(Coreset::load(&p).unwrap(), c);
        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert!(json["sizing"].is_array());
        for field in ["dim", "num_classes", "config", "keys", "key_class", "init_member_ids"] {
            assert!(json.get(field).is_some(), "missing {field}");
        }
    }

    #[test]
    fn config_validation() {
        for cfg in [
            DecsConfig { update_rate: 1.5, ..DecsConfig::default() },
            DecsConfig { batch_size: 0, ..DecsConfig::default() },
            DecsConfig { top_k: 0, ..DecsConfig::default() },
            DecsConfig { ref_size: 0, ..DecsConfig::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
        assert!(DecsConfig::default().validate().is_ok());
    }
}

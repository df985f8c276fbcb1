//! Synthetic benchmarks and brute-force oracles.
//!
//! Synthetic data: `C` class means drawn uniformly on the unit sphere with a
//! minimum pairwise angle, plus a handful of nuisance directions shared by
//! all classes. A sample of class `c` is
//!
//! ```text
//! normalize(mean_c + spread * g / sqrt(d) + noise * sum_a z_a u_a / sqrt(A))
//! ```
//!
//! with `g ~ N(0, I_d)`, `z ~ N(0, I_A)` and `u_a` the `A` shared nuisance
//! directions, so both noise terms have expected norm close to their
//! magnitude. Because the nuisance is shared, raw nearest neighbours tend to
//! match on nuisance rather than class, while class means stay separable.
//!
//! Training sets hold `per_class` records per class; the test set holds
//! `C * per_class / 4` records (an 80/20 split overall) with classes assigned
//! round-robin.
//!
//! The oracles re-implement assignment, Top-K and the EMA step by exhaustive
//! scan and full sort, independently of [`crate::decs`].

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::decs::{AssignmentBatch, Coreset, DecsError};
use crate::embedding::{Dataset, EmbeddingError, EmbeddingRecord};
use crate::rng::{self, stream};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("cannot place {classes} class means {degrees} degrees apart in dimension {dim}")]
    SeparationUnsatisfiable {
        classes: usize,
        dim: usize,
        degrees: f64,
    },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    pub noise_directions: usize,
    pub noise_magnitude: f64,
    pub min_separation_deg: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    /// The standard benchmark: 8 classes in 64 dimensions, 2000 training
    /// and 500 test records.
    fn default() -> Self {
        Self {
            num_classes: 8,
            dim: 64,
            per_class: 250,
            spread: 1.0,
            noise_directions: 4,
            noise_magnitude: 0.5,
            min_separation_deg: 60.0,
            seed: 7,
        }
    }
}

impl SynthSpec {
    /// Nuisance at least as strong as the class spread.
    pub fn high_noise() -> Self {
        Self {
            spread: 2.0,
            noise_magnitude: 2.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidSpec(m.into()));
        if self.num_classes == 0 || self.dim == 0 || self.per_class == 0 {
            return bad("counts must be positive");
        }
        if !(self.spread >= 0.0 && self.noise_magnitude >= 0.0) {
            return bad("magnitudes must be >= 0");
        }
        if !(0.0..=180.0).contains(&self.min_separation_deg) {
            return bad("min_separation_deg must lie in [0, 180]");
        }
        Ok(())
    }

    pub fn test_size(&self) -> usize {
        self.num_classes * self.per_class / 4
    }
}

fn gaussian_vec<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, d);
        let n = crate::embedding::l2_norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

pub fn generate_synthetic(spec: &SynthSpec) -> Result<(Dataset, Dataset), HarnessError> {
    spec.validate()?;
    let d = spec.dim;
    let mut rng = rng::seeded(spec.seed, stream::SYNTH);
    let min_cos = spec.min_separation_deg.to_radians().cos();

    let mut means: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
    while means.len() < spec.num_classes {
        let placed = (0..MAX_PLACEMENT_ATTEMPTS).find_map(|_| {
            let m = unit(&mut rng, d);
            means
                .iter()
                .all(|o| crate::embedding::dot(o, &m) <= min_cos + 1e-12)
                .then_some(m)
        });
        match placed {
            Some(m) => means.push(m),
            None => {
                return Err(HarnessError::SeparationUnsatisfiable {
                    classes: spec.num_classes,
                    dim: d,
                    degrees: spec.min_separation_deg,
                })
            }
        }
    }
    let axes: Vec<Vec<f64>> = (0..spec.noise_directions).map(|_| unit(&mut rng, d)).collect();

    let spread_scale = spec.spread / (d as f64).sqrt();
    let noise_scale = if axes.is_empty() {
        0.0
    } else {
        spec.noise_magnitude / (axes.len() as f64).sqrt()
    };
    let sample = |class: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        if spread_scale == 0.0 && noise_scale == 0.0 {
            return means[class].clone();
        }
        loop {
            let mut v = means[class].clone();
            for x in v.iter_mut() {
                let g: f64 = rng.sample(StandardNormal);
                *x += spread_scale * g;
            }
            for axis in &axes {
                let z: f64 = rng.sample(StandardNormal);
                for (x, u) in v.iter_mut().zip(axis) {
                    *x += noise_scale * z * u;
                }
            }
            let n = crate::embedding::l2_norm(&v);
            if n > 1e-12 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    };

    let mut train = Vec::with_capacity(spec.num_classes * spec.per_class);
    for class in 0..spec.num_classes {
        for _ in 0..spec.per_class {
            let i = train.len();
            train.push(
                EmbeddingRecord::new(format!("train-{i:05}"), class, sample(class, &mut rng))
                    .with_image(format!("synth://train/{i:05}")),
            );
        }
    }
    let test = (0..spec.test_size())
        .map(|i| {
            let class = i % spec.num_classes;
            EmbeddingRecord::new(format!("test-{i:05}"), class, sample(class, &mut rng))
                .with_image(format!("synth://test/{i:05}"))
        })
        .collect();
    Ok((
        Dataset::new(train, d, spec.num_classes)?,
        Dataset::new(test, d, spec.num_classes)?,
    ))
}

/// Class names for synthetic tasks.
pub fn synthetic_class_names(num_classes: usize) -> Vec<String> {
    const WORDS: [&str; 16] = [
        "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliett",
        "kilo", "lima", "mike", "november", "oscar", "papa",
    ];
    (0..num_classes)
        .map(|i| match WORDS.get(i) {
            Some(w) => w.to_string(),
            None => format!("class_{i}"),
        })
        .collect()
}

/// A random coreset and labeled unit queries over the same classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallInstance {
    pub coreset: Coreset,
    pub queries: Dataset,
}

/// Random instance with `d <= 8`, at most 10 keys and at most 50 queries.
/// About a quarter of instances repeat a key, so assignment ties occur.
pub fn small_instance(seed: u64) -> SmallInstance {
    let mut rng = rng::seeded(seed, stream::SYNTH);
    let d = 1 + rng::draw_index(&mut rng, 8);
    let c = 1 + rng::draw_index(&mut rng, 3);
    let num_keys = c + rng::draw_index(&mut rng, 11 - c);
    let mut key_class: Vec<usize> = (0..num_keys).map(|j| j % c).collect();
    rng::fisher_yates(&mut rng, &mut key_class);
    let mut keys: Vec<Vec<f64>> = (0..num_keys).map(|_| unit(&mut rng, d)).collect();
    if rng::draw_index(&mut rng, 4) == 0 {
        let same_class: Vec<(usize, usize)> = (0..num_keys)
            .flat_map(|a| (0..num_keys).map(move |b| (a, b)))
            .filter(|&(a, b)| a != b && key_class[a] == key_class[b])
            .collect();
        if !same_class.is_empty() {
            let (a, b) = same_class[rng::draw_index(&mut rng, same_class.len())];
            keys[b] = keys[a].clone();
        }
    }
    let num_queries = c + rng::draw_index(&mut rng, 51 - c);
    let queries = (0..num_queries)
        .map(|i| {
            let label = if i < c { i } else { rng::draw_index(&mut rng, c) };
            EmbeddingRecord::new(format!("q{i}"), label, unit(&mut rng, d))
        })
        .collect();
    let coreset = Coreset {
        dim: d,
        num_classes: c,
        sizing: crate::decs::Sizing {
            coreset_size: num_keys,
            epochs: 1,
        },
        config: crate::decs::DecsConfig::default(),
        init_member_ids: (0..num_keys).map(|j| format!("k{j}")).collect(),
        keys,
        key_class,
    };
    SmallInstance {
        coreset,
        queries: Dataset::new(queries, d, c).expect("instance queries cover every class"),
    }
}

/// Exhaustive hardest-positive scan: full sort of same-class keys by
/// (similarity ascending, index ascending).
pub fn oracle_assign(query: &[f64], query_class: usize, coreset: &Coreset) -> Result<usize, DecsError> {
    let mut cands: Vec<(f64, usize)> = Vec::new();
    for j in 0..coreset.keys.len() {
        if coreset.key_class[j] == query_class {
            let mut s = 0.0;
            for t in 0..query.len() {
                s += query[t] * coreset.keys[j][t];
            }
            cands.push((s, j));
        }
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cands
        .first()
        .map(|&(_, j)| j)
        .ok_or(DecsError::NoKeyForClass(query_class))
}

/// Full sort of all candidates by (similarity descending, index ascending).
pub fn oracle_topk(keys: &[Vec<f64>], query: &[f64], k: usize) -> Result<Vec<(usize, f64)>, DecsError> {
    if k > keys.len() {
        return Err(DecsError::KTooLarge { k, size: keys.len() });
    }
    let mut all: Vec<(usize, f64)> = keys
        .iter()
        .enumerate()
        .map(|(i, key)| {
            let mut s = 0.0;
            for t in 0..query.len() {
                s += query[t] * key[t];
            }
            (i, s)
        })
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    Ok(all)
}

/// Direct recomputation of one EMA step from the `(query, key)` pairs.
pub fn oracle_ema(coreset: &Coreset, batch: &AssignmentBatch, ds: &Dataset, alpha: f64) -> Vec<Vec<f64>> {
    let mut out = coreset.keys.clone();
    for j in 0..coreset.keys.len() {
        let members: Vec<usize> = batch.pairs.iter().filter(|p| p.1 == j).map(|p| p.0).collect();
        if members.is_empty() || alpha == 0.0 {
            continue;
        }
        let d = coreset.dim;
        let mut blended = vec![0.0; d];
        for t in 0..d {
            let mean = members.iter().map(|&q| ds.get(q).vector[t]).sum::<f64>() / members.len() as f64;
            blended[t] = (1.0 - alpha) * coreset.keys[j][t] + alpha * mean;
        }
        let norm = blended.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < crate::decs::DEGENERATE_BLEND_NORM {
            continue;
        }
        out[j] = blended.iter().map(|x| x / norm).collect();
    }
    out
}

/// Mean over test queries of the fraction of retrieved exemplar classes
/// equal to the query's class. `select` receives the query record and its
/// index and returns the classes of the retrieved exemplars.
pub fn retrieval_purity<F>(test: &Dataset, mut select: F) -> f64
where
    F: FnMut(&EmbeddingRecord, usize) -> Vec<usize>,
{
    if test.is_empty() {
        return 0.0;
    }
    let total: f64 = test
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let classes = select(r, i);
            if classes.is_empty() {
                0.0
            } else {
                classes.iter().filter(|&&c| c == r.label).count() as f64 / classes.len() as f64
            }
        })
        .sum();
    total / test.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_spec_sizes() {
        let (train, test) = generate_synthetic(&SynthSpec::default()).unwrap();
        assert_eq!(train.len(), 2000);
        assert_eq!(test.len(), 500);
        assert!(train.is_normalized() && test.is_normalized());
        assert_eq!(train.class_counts(), vec![250; 8]);
    }

    #[test]
    fn degenerate_spec_is_the_means() {
        let spec = SynthSpec {
            spread: 0.0,
            noise_magnitude: 0.0,
            per_class: 8,
            ..SynthSpec::default()
        };
        let (train, test) = generate_synthetic(&spec).unwrap();
        let members = train.class_members();
        for idxs in members {
            for &i in &idxs {
                assert_eq!(train.get(i).vector, train.get(idxs[0]).vector);
            }
        }
        let (_, first) = train.find("train-00000").unwrap();
        assert_eq!(test.get(0).vector, first.vector);
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SynthSpec {
            per_class: 20,
            ..SynthSpec::default()
        };
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SynthSpec { seed: 8, ..spec.clone() };
        assert_ne!(generate_synthetic(&spec).unwrap().0, generate_synthetic(&other).unwrap().0);
    }

    #[test]
    fn separation_enforced() {
        let (train, _) = generate_synthetic(&SynthSpec {
            spread: 0.0,
            noise_magnitude: 0.0,
            per_class: 4,
            ..SynthSpec::default()
        })
        .unwrap();
        let means: Vec<&Vec<f64>> = train.class_members().iter().map(|m| &train.get(m[0]).vector).collect();
        for a in 0..means.len() {
            for b in a + 1..means.len() {
                assert!(crate::embedding::dot(means[a], means[b]) <= 0.5 + 1e-9);
            }
        }
        let impossible = SynthSpec {
            num_classes: 5,
            dim: 2,
            per_class: 4,
            ..SynthSpec::default()
        };
        assert!(matches!(
            generate_synthetic(&impossible),
            Err(HarnessError::SeparationUnsatisfiable { .. })
        ));
    }

    #[test]
    fn purity_bounds_and_permutation_invariance() {
        let (_, test) = generate_synthetic(&SynthSpec {
            per_class: 40,
            ..SynthSpec::default()
        })
        .unwrap();
        assert_eq!(retrieval_purity(&test, |r, _| vec![r.label; 5]), 1.0);

        let mut rng = crate::rng::seeded(1, 0);
        let c = test.num_classes();
        let p = retrieval_purity(&test, |_, _| (0..5).map(|_| crate::rng::draw_index(&mut rng, c)).collect());
        let n = (test.len() * 5) as f64;
        let q = 1.0 / c as f64;
        let sigma = (q * (1.0 - q) / n).sqrt();
        assert!((p - q).abs() < 3.0 * sigma, "purity {p} vs {q} ± {}", 3.0 * sigma);

        let mut reversed: Vec<EmbeddingRecord> = test.records().to_vec();
        reversed.reverse();
        let rev = Dataset::new(reversed, test.dim(), c).unwrap();
        let sel = |r: &EmbeddingRecord, _: usize| vec![r.label, (r.label + 1) % c, r.id.len() % c];
        assert!((retrieval_purity(&test, sel) - retrieval_purity(&rev, sel)).abs() < 1e-12);
    }

    #[test]
    fn small_instances_are_valid() {
        let mut ties = 0;
        for seed in 0..200 {
            let inst = small_instance(seed);
            inst.coreset.validate().unwrap();
            assert!(inst.coreset.dim <= 8 && inst.coreset.len() <= 10 && inst.queries.len() <= 50);
            let k = &inst.coreset.keys;
            ties += (0..k.len()).any(|a| (a + 1..k.len()).any(|b| k[a] == k[b])) as usize;
        }
        assert!(ties > 10);
    }

    #[test]
    fn class_names() {
        assert_eq!(synthetic_class_names(3), vec!["alpha", "bravo", "charlie"]);
        assert_eq!(synthetic_class_names(18)[17], "class_17");
    }
}

//! Exemplar selection arms.
//!
//! | arm      | exemplars for a query                                                  |
//! |----------|------------------------------------------------------------------------|
//! | `none`   | none                                                                   |
//! | `random` | `K` training records from `K` distinct classes (cycling when `K > C`)  |
//! | `topk`   | the `K` most similar raw training records                              |
//! | `decs`   | the `K` most similar coreset keys                                      |
//!
//! All arms list exemplars best first. Random draws use a per-query stream
//! derived from the run seed and the query's index, so results do not depend
//! on evaluation order. A coreset key is an optimized vector with no image of
//! its own; it is shown through its anchor, the most similar training record
//! of the key's class.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decs::{self, Coreset, DecsError};
use crate::embedding::{dot, Dataset, EmbeddingRecord};
use crate::prompt::Exemplar;
use crate::rng::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    None,
    Random,
    Topk,
    Decs,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::None, Arm::Random, Arm::Topk, Arm::Decs];

    pub fn name(self) -> &'static str {
        match self {
            Arm::None => "none",
            Arm::Random => "random",
            Arm::Topk => "topk",
            Arm::Decs => "decs",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown arm {s:?}; expected one of none, random, topk, decs"))
    }
}

pub trait ExemplarSelector: Send + Sync {
    /// Exemplars for `query`, best first. `query_index` identifies the query
    /// within its dataset and seeds any randomness.
    fn select(&self, query: &EmbeddingRecord, query_index: usize) -> Result<Vec<Exemplar>, DecsError>;
}

fn exemplar(rec: &EmbeddingRecord, similarity: f64) -> Exemplar {
    Exemplar {
        id: rec.id.clone(),
        image_ref: rec.image_ref.clone(),
        class: rec.label,
        similarity,
    }
}

fn check_dim(expected: usize, query: &EmbeddingRecord) -> Result<(), DecsError> {
    if query.vector.len() != expected {
        return Err(DecsError::DimensionMismatch {
            expected,
            found: query.vector.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NoExemplars;

impl ExemplarSelector for NoExemplars {
    fn select(&self, _: &EmbeddingRecord, _: usize) -> Result<Vec<Exemplar>, DecsError> {
        Ok(Vec::new())
    }
}

#[derive(Debug, Clone)]
pub struct RandomExemplars<'a> {
    train: &'a Dataset,
    members: Vec<Vec<usize>>,
    k: usize,
    seed: u64,
}

impl<'a> RandomExemplars<'a> {
    pub fn new(train: &'a Dataset, k: usize, seed: u64) -> Result<Self, DecsError> {
        if k == 0 {
            return Err(DecsError::ZeroK);
        }
        Ok(Self {
            train,
            members: train.class_members(),
            k,
            seed,
        })
    }
}

impl ExemplarSelector for RandomExemplars<'_> {
    fn select(&self, query: &EmbeddingRecord, query_index: usize) -> Result<Vec<Exemplar>, DecsError> {
        check_dim(self.train.dim(), query)?;
        let mut rng = rng::seeded(rng::derive(self.seed, query_index as u64), stream::RANDOM_ARM);
        let mut classes: Vec<usize> = (0..self.members.len()).collect();
        rng::fisher_yates(&mut rng, &mut classes);
        let mut picked: Vec<(usize, f64)> = (0..self.k)
            .map(|i| {
                let pool = &self.members[classes[i % classes.len()]];
                let idx = pool[rng::draw_index(&mut rng, pool.len())];
                (idx, dot(&query.vector, &self.train.get(idx).vector))
            })
            .collect();
        picked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(picked
            .into_iter()
            .map(|(i, s)| exemplar(self.train.get(i), s))
            .collect())
    }
}

/// Cosine Top-K over the raw training embeddings. A query that is itself a
/// training record never retrieves itself.
#[derive(Debug, Clone)]
pub struct RawTopK<'a> {
    train: &'a Dataset,
    k: usize,
}

impl<'a> RawTopK<'a> {
    pub fn new(train: &'a Dataset, k: usize) -> Result<Self, DecsError> {
        if k == 0 {
            return Err(DecsError::ZeroK);
        }
        if k >= train.len() {
            return Err(DecsError::KTooLarge { k, size: train.len() });
        }
        Ok(Self { train, k })
    }
}

impl ExemplarSelector for RawTopK<'_> {
    fn select(&self, query: &EmbeddingRecord, _: usize) -> Result<Vec<Exemplar>, DecsError> {
        check_dim(self.train.dim(), query)?;
        let hits = decs::top_k_cosine(
            self.train.records().iter().map(|r| r.vector.as_slice()),
            &query.vector,
            self.k + 1,
        );
        Ok(hits
            .into_iter()
            .filter(|&(i, _)| self.train.get(i).id != query.id)
            .take(self.k)
            .map(|(i, s)| exemplar(self.train.get(i), s))
            .collect())
    }
}

/// Top-K over coreset keys, each shown through its anchor record.
#[derive(Debug, Clone)]
pub struct CoresetExemplars<'a> {
    coreset: &'a Coreset,
    train: &'a Dataset,
    anchors: Vec<usize>,
    k: usize,
}

/// For each key, the index of the most similar training record of the same
/// class; ties go to the lower record index.
pub fn key_anchors(coreset: &Coreset, train: &Dataset) -> Result<Vec<usize>, DecsError> {
    if coreset.dim != train.dim() || coreset.num_classes != train.num_classes() {
        return Err(DecsError::InvalidCoreset(format!(
            "coreset is {}-d over {} classes, training set is {}-d over {}",
            coreset.dim,
            coreset.num_classes,
            train.dim(),
            train.num_classes()
        )));
    }
    let members = train.class_members();
    coreset
        .keys
        .iter()
        .zip(&coreset.key_class)
        .map(|(key, &c)| {
            let pool = &members[c];
            let best = decs::top_k_cosine(pool.iter().map(|&i| train.get(i).vector.as_slice()), key, 1);
            best.first().map(|&(j, _)| pool[j]).ok_or(DecsError::NoKeyForClass(c))
        })
        .collect()
}

impl<'a> CoresetExemplars<'a> {
    pub fn new(coreset: &'a Coreset, train: &'a Dataset, k: usize) -> Result<Self, DecsError> {
        if k == 0 {
            return Err(DecsError::ZeroK);
        }
        if k > coreset.len() {
            return Err(DecsError::KTooLarge { k, size: coreset.len() });
        }
        Ok(Self {
            coreset,
            train,
            anchors: key_anchors(coreset, train)?,
            k,
        })
    }

    pub fn anchors(&self) -> &[usize] {
        &self.anchors
    }
}

impl ExemplarSelector for CoresetExemplars<'_> {
    fn select(&self, query: &EmbeddingRecord, _: usize) -> Result<Vec<Exemplar>, DecsError> {
        Ok(decs::retrieve_topk(self.coreset, &query.vector, self.k)?
            .into_iter()
            .map(|n| {
                let anchor = self.train.get(self.anchors[n.index]);
                Exemplar {
                    id: anchor.id.clone(),
                    image_ref: anchor.image_ref.clone(),
                    class: n.class,
                    similarity: n.similarity,
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decs::DecsConfig;

    fn toy() -> Dataset {
        let recs = vec![
            EmbeddingRecord::new("a", 0, vec![1.0, 0.0]).with_image("img/a"),
            EmbeddingRecord::new("b", 0, vec![0.8, 0.6]).with_image("img/b"),
            EmbeddingRecord::new("c", 1, vec![0.0, 1.0]).with_image("img/c"),
            EmbeddingRecord::new("d", 1, vec![-0.6, 0.8]).with_image("img/d"),
        ];
        Dataset::new(recs, 2, 2).unwrap()
    }

    #[test]
    fn arm_names_round_trip() {
        for a in Arm::ALL {
            assert_eq!(a.name().parse::<Arm>().unwrap(), a);
        }
        assert!("topk-mean".parse::<Arm>().is_err());
    }

    #[test]
    fn raw_topk_skips_self() {
        let ds = toy();
        let sel = RawTopK::new(&ds, 2).unwrap();
        let got = sel.select(ds.get(0), 0).unwrap();
        assert_eq!(got.iter().map(|e| e.id.as_str()).collect::<Vec<_>>(), vec!["b", "c"]);
        let outside = EmbeddingRecord::new("q", 0, vec![1.0, 0.0]);
        assert_eq!(sel.select(&outside, 0).unwrap()[0].id, "a");
    }

    #[test]
    fn random_is_stratified_and_reproducible() {
        let ds = toy();
        let sel = RandomExemplars::new(&ds, 2, 9).unwrap();
        let q = ds.get(0);
        let a = sel.select(q, 3).unwrap();
        assert_eq!(a, sel.select(q, 3).unwrap());
        let mut classes: Vec<usize> = a.iter().map(|e| e.class).collect();
        classes.sort();
        assert_eq!(classes, vec![0, 1]);
        assert!(a[0].similarity >= a[1].similarity);
    }

    #[test]
    fn coreset_exemplars_use_anchor_images() {
        let ds = toy();
        let cfg = DecsConfig {
            base_size: 2,
            ref_size: 4,
            ..DecsConfig::default()
        };
        let coreset = crate::decs::init_coreset(&ds, 2, cfg.seed).unwrap();
        let sel = CoresetExemplars::new(&coreset, &ds, 2).unwrap();
        let got = sel.select(ds.get(2), 2).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].class, 1);
        for e in &got {
            let (_, rec) = ds.find(&e.id).unwrap();
            assert_eq!(rec.label, e.class);
            assert!(e.image_ref.is_some());
        }
        assert!(matches!(
            CoresetExemplars::new(&coreset, &ds, 3),
            Err(DecsError::KTooLarge { k: 3, size: 2 })
        ));
    }
}

//! Class splits and N-way K-shot episode sampling.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedstore::EmbeddingStore;
use crate::error::{Error, Result};
use crate::rng::{self, purpose};

/// Disjoint seen / validation / unseen label sets.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSplit {
    pub seen: BTreeSet<String>,
    pub valid: BTreeSet<String>,
    pub unseen: BTreeSet<String>,
}

impl ClassSplit {
    pub fn is_disjoint(&self) -> bool {
        self.seen.is_disjoint(&self.valid)
            && self.seen.is_disjoint(&self.unseen)
            && self.valid.is_disjoint(&self.unseen)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let split: ClassSplit =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !split.is_disjoint() {
            return Err(Error::Config(format!("{}: class sets overlap", path.display())));
        }
        Ok(split)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("split serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Randomly partition the store's classes into seen / valid / unseen sets of
/// the requested sizes. Leftover classes are left unassigned.
pub fn split_classes(
    store: &EmbeddingStore,
    (n_seen, n_valid, n_unseen): (usize, usize, usize),
    seed: u64,
) -> Result<ClassSplit> {
    let needed = n_seen + n_valid + n_unseen;
    let mut labels: Vec<&str> = store.labels().collect();
    if needed > labels.len() {
        return Err(Error::NotEnoughClasses {
            needed,
            available: labels.len(),
        });
    }
    labels.shuffle(&mut rng::stream(seed, purpose::SPLIT, &[]));
    let mut take = labels.into_iter().map(str::to_owned);
    Ok(ClassSplit {
        seen: take.by_ref().take(n_seen).collect(),
        valid: take.by_ref().take(n_valid).collect(),
        unseen: take.take(n_unseen).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeShape {
    /// ways
    pub n: usize,
    /// shots
    pub k: usize,
    /// queries per class
    pub q: usize,
}

impl EpisodeShape {
    pub fn new(n: usize, k: usize, q: usize) -> Result<Self> {
        if n == 0 || k == 0 || q == 0 {
            return Err(Error::Config(format!(
                "episode shape must be positive, got N={n} K={k} Q={q}"
            )));
        }
        Ok(Self { n, k, q })
    }
}

/// One labeled example inside an episode. `record` is the position in the
/// source store; `class` is the episode-local class index.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeItem {
    pub record: usize,
    pub class: usize,
    pub vector: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub way_labels: Vec<String>,
    /// Grouped by class: K items of class 0, then class 1, ...
    pub support: Vec<EpisodeItem>,
    /// Shuffled; labels are kept for scoring only.
    pub query: Vec<EpisodeItem>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.way_labels.len()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|item| item.class).collect()
    }

    /// Divide every vector by its Euclidean norm (zero vectors are left alone).
    pub fn l2_normalize(&mut self) {
        for item in self.support.iter_mut().chain(self.query.iter_mut()) {
            let norm = item.vector.norm();
            if norm > 0.0 {
                item.vector /= norm;
            }
        }
    }
}

/// Sample an episode from the `allowed` classes: N classes, then K supports and
/// Q queries per class without replacement.
pub fn sample_episode<R: Rng + ?Sized>(
    store: &EmbeddingStore,
    allowed: &BTreeSet<String>,
    shape: EpisodeShape,
    rng: &mut R,
) -> Result<Episode> {
    let EpisodeShape { n, k, q } = shape;
    if allowed.len() < n {
        return Err(Error::NotEnoughClasses {
            needed: n,
            available: allowed.len(),
        });
    }
    let mut classes = Vec::with_capacity(allowed.len());
    for label in allowed {
        let members = store.members(label).ok_or_else(|| Error::UnknownLabel(label.clone()))?;
        if members.len() < k + q {
            return Err(Error::NotEnoughSamples {
                label: label.clone(),
                needed: k + q,
                available: members.len(),
            });
        }
        classes.push((label, members));
    }

    let chosen: Vec<_> = classes.choose_multiple(rng, n).collect();
    let mut episode = Episode {
        way_labels: Vec::with_capacity(n),
        support: Vec::with_capacity(n * k),
        query: Vec::with_capacity(n * q),
    };
    for (class, (label, members)) in chosen.into_iter().enumerate() {
        episode.way_labels.push((*label).clone());
        let picked: Vec<usize> = members.choose_multiple(rng, k + q).copied().collect();
        let item = |record: usize| EpisodeItem {
            record,
            class,
            vector: DVector::from_column_slice(&store.record(record).vector),
        };
        episode.support.extend(picked[..k].iter().map(|&r| item(r)));
        episode.query.extend(picked[k..].iter().map(|&r| item(r)));
    }
    episode.query.shuffle(rng);
    Ok(episode)
}

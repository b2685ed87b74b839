//! Multi-domain retrieval corpora: training domains of (query, positive)
//! pairs, dev/test sets with qrels and frozen distractors.

mod io;
mod synthetic;

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

pub use io::{load_corpus, write_corpus, CorpusManifest, EvalEntry, TrainEntry};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    #[serde(rename = "q")]
    pub query: String,
    #[serde(rename = "p")]
    pub positive: String,
}

impl Pair {
    pub fn new(query: impl Into<String>, positive: impl Into<String>) -> Self {
        Self {
            query: query.into(),
            positive: positive.into(),
        }
    }
}

/// One training domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub id: usize,
    pub name: String,
    pub pairs: Vec<Pair>,
}

impl DomainDataset {
    pub fn size(&self) -> usize {
        self.pairs.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevQuery {
    #[serde(rename = "q")]
    pub text: String,
    pub qrels: BTreeMap<String, u32>,
}

impl DevQuery {
    pub fn has_relevant(&self) -> bool {
        self.qrels.values().any(|&g| g > 0)
    }

    /// Passage id with the highest grade (lowest id on ties).
    pub fn top_passage(&self) -> Option<&str> {
        self.qrels
            .iter()
            .filter(|(_, &g)| g > 0)
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(id, _)| id.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub text: String,
}

/// A dev or test collection: queries with qrels over a frozen passage pool.
#[derive(Debug, Clone, PartialEq)]
pub struct DevSet {
    pub id: usize,
    pub name: String,
    pub queries: Vec<DevQuery>,
    pub passages: Vec<Passage>,
    /// Training domain this set was drawn from, if known. Used by split
    /// resampling.
    pub source: Option<String>,
}

impl DevSet {
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for p in &self.passages {
            if !ids.insert(p.id.as_str()) {
                return Err(Error::Corpus(format!("{}: duplicate passage id `{}`", self.name, p.id)));
            }
        }
        for q in &self.queries {
            for id in q.qrels.keys() {
                if !ids.contains(id.as_str()) {
                    return Err(Error::Corpus(format!(
                        "{}: qrels reference unknown passage id `{id}`",
                        self.name
                    )));
                }
            }
        }
        if !self.queries.iter().any(DevQuery::has_relevant) {
            return Err(Error::Corpus(format!("{}: no query has a relevant passage", self.name)));
        }
        Ok(())
    }

    pub fn passage_text(&self, id: &str) -> Option<&str> {
        self.passages.iter().find(|p| p.id == id).map(|p| p.text.as_str())
    }

    pub fn passage_lookup(&self) -> HashMap<&str, &str> {
        self.passages.iter().map(|p| (p.id.as_str(), p.text.as_str())).collect()
    }

    /// (query, top relevant passage text) for every query with a relevant
    /// passage, in query order, together with the query index.
    pub fn pairs(&self) -> Vec<(usize, Pair)> {
        let lookup = self.passage_lookup();
        self.queries
            .iter()
            .enumerate()
            .filter_map(|(i, q)| {
                let pid = q.top_passage()?;
                Some((i, Pair::new(q.text.clone(), lookup[pid])))
            })
            .collect()
    }
}

/// A fully loaded corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<DomainDataset>,
    pub dev: Vec<DevSet>,
    pub test: Vec<DevSet>,
}

impl Corpus {
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::Corpus("no training domains".into()));
        }
        if self.dev.is_empty() {
            return Err(Error::Corpus("no dev sets".into()));
        }
        let mut names = HashSet::new();
        for d in &self.train {
            if d.pairs.is_empty() {
                return Err(Error::Corpus(format!("{}: empty training domain", d.name)));
            }
            if d.name.is_empty() || d.name.contains([',', '\n', '\r']) {
                return Err(Error::Corpus(format!("training domain name {:?} must be nonempty without commas or newlines", d.name)));
            }
            if !names.insert(("train", d.name.as_str())) {
                return Err(Error::Corpus(format!("duplicate training domain name `{}`", d.name)));
            }
        }
        for (split, sets) in [("dev", &self.dev), ("test", &self.test)] {
            for s in sets {
                if !names.insert((split, s.name.as_str())) {
                    return Err(Error::Corpus(format!("duplicate {split} set name `{}`", s.name)));
                }
                s.validate()?;
            }
        }
        Ok(())
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.train.iter().map(DomainDataset::size).collect()
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.train.iter().map(|d| d.name.clone()).collect()
    }
}

/// Draws a training batch: without replacement when the dataset is large
/// enough, uniformly with replacement otherwise.
pub fn sample_batch<'a>(dataset: &'a DomainDataset, batch_size: usize, rng: &mut Rng) -> Result<Vec<&'a Pair>> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch_size must be at least 1".into()));
    }
    let n = dataset.pairs.len();
    if n == 0 {
        return Err(Error::Corpus(format!("{}: cannot sample from an empty dataset", dataset.name)));
    }
    if batch_size > n {
        return Ok((0..batch_size).map(|_| &dataset.pairs[rng.below(n)]).collect());
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..batch_size {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    Ok(idx[..batch_size].iter().map(|&i| &dataset.pairs[i]).collect())
}

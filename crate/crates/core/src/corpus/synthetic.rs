//! Synthetic multi-domain retrieval corpus.
//!
//! Each domain owns a block of topical tokens, split into concepts. A concept
//! has a query-side and a passage-side token group; a pair draws its query
//! words from the query side and its positive from the passage side, so
//! matching them requires learning the association for that domain. Query
//! and positive also share one common "instance" token, and both carry
//! common filler tokens. Dev and test sets draw queries from their target
//! domain and mix in distractor passages from every domain.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Corpus, DevQuery, DevSet, DomainDataset, Pair, Passage};
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub domains: usize,
    pub pairs_per_domain: usize,
    /// Upper bound on distinct tokens (topical + common).
    pub vocab_size: usize,
    pub topical_per_domain: usize,
    /// Fraction of a domain's topical block shared with the next domain.
    pub overlap: f64,
    pub common_tokens: usize,
    /// Tokens per concept side.
    pub concept_width: usize,
    pub query_topical: usize,
    pub passage_topical: usize,
    pub filler: usize,
    pub dev_targets: Vec<usize>,
    pub dev_queries: usize,
    pub test_queries: usize,
    pub distractors: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            domains: 4,
            pairs_per_domain: 400,
            vocab_size: 2000,
            topical_per_domain: 96,
            overlap: 0.0,
            common_tokens: 300,
            concept_width: 3,
            query_topical: 2,
            passage_topical: 3,
            filler: 2,
            dev_targets: vec![0],
            dev_queries: 48,
            test_queries: 48,
            distractors: 200,
        }
    }
}

impl SyntheticSpec {
    fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.domains == 0 || self.pairs_per_domain == 0 {
            return bad("need at least one domain with at least one pair".into());
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return bad(format!("overlap must lie in [0, 1), got {}", self.overlap));
        }
        if self.concept_width == 0 || self.topical_per_domain < 2 * self.concept_width {
            return bad(format!(
                "topical_per_domain {} cannot hold a concept of width {}",
                self.topical_per_domain, self.concept_width
            ));
        }
        if self.query_topical == 0 || self.query_topical > self.concept_width || self.passage_topical > self.concept_width {
            return bad("query_topical/passage_topical must be in 1..=concept_width".into());
        }
        if self.common_tokens == 0 {
            return bad("common_tokens must be positive".into());
        }
        if self.dev_targets.is_empty() || self.dev_targets.iter().any(|&t| t >= self.domains) {
            return bad(format!("dev_targets {:?} must name domains in [0, {})", self.dev_targets, self.domains));
        }
        if self.dev_queries == 0 {
            return bad("dev_queries must be positive".into());
        }
        let needed = self.topical_pool() + self.common_tokens;
        if needed > self.vocab_size {
            return bad(format!(
                "vocab_size {} too small: topical partition plus common tokens need {needed}",
                self.vocab_size
            ));
        }
        Ok(())
    }

    fn shared(&self) -> usize {
        (self.overlap * self.topical_per_domain as f64).floor() as usize
    }

    fn stride(&self) -> usize {
        self.topical_per_domain - self.shared()
    }

    fn topical_pool(&self) -> usize {
        (self.domains - 1) * self.stride() + self.topical_per_domain
    }

    /// Topical token strings of `domain`.
    pub fn topical_tokens(&self, domain: usize) -> Vec<String> {
        let start = domain * self.stride();
        (start..start + self.topical_per_domain).map(|k| format!("t{k}")).collect()
    }

    pub fn domain_name(domain: usize) -> String {
        format!("domain{domain}")
    }
}

struct Generator<'a> {
    spec: &'a SyntheticSpec,
    /// Per domain, per concept: (query side, passage side).
    concepts: Vec<Vec<(Vec<String>, Vec<String>)>>,
    common: Vec<String>,
}

impl<'a> Generator<'a> {
    fn new(spec: &'a SyntheticSpec) -> Self {
        let w = spec.concept_width;
        let concepts = (0..spec.domains)
            .map(|d| {
                spec.topical_tokens(d)
                    .chunks_exact(2 * w)
                    .map(|c| (c[..w].to_vec(), c[w..].to_vec()))
                    .collect()
            })
            .collect();
        let common = (0..spec.common_tokens).map(|k| format!("c{k}")).collect();
        Self { spec, concepts, common }
    }

    fn pick<'b>(rng: &mut Rng, from: &'b [String], n: usize) -> Vec<&'b str> {
        let mut idx: Vec<usize> = (0..from.len()).collect();
        rng.shuffle(&mut idx);
        idx[..n].iter().map(|&i| from[i].as_str()).collect()
    }

    fn join(rng: &mut Rng, mut words: Vec<&str>) -> String {
        rng.shuffle(&mut words);
        words.join(" ")
    }

    fn filler<'b>(&'b self, rng: &mut Rng) -> Vec<&'b str> {
        (0..self.spec.filler).map(|_| self.common[rng.below(self.common.len())].as_str()).collect()
    }

    fn passage_only(&self, domain: usize, rng: &mut Rng) -> String {
        let concepts = &self.concepts[domain];
        let (_, pside) = &concepts[rng.below(concepts.len())];
        let mut words = Self::pick(rng, pside, self.spec.passage_topical);
        words.push(&self.common[rng.below(self.common.len())]);
        words.extend(self.filler(rng));
        Self::join(rng, words)
    }

    fn pair(&self, domain: usize, rng: &mut Rng) -> Pair {
        let concepts = &self.concepts[domain];
        let (qside, pside) = &concepts[rng.below(concepts.len())];
        let instance = self.common[rng.below(self.common.len())].as_str();
        let mut q = Self::pick(rng, qside, self.spec.query_topical);
        q.push(instance);
        q.extend(self.filler(rng));
        let mut p = Self::pick(rng, pside, self.spec.passage_topical);
        p.push(instance);
        p.extend(self.filler(rng));
        Pair::new(Self::join(rng, q), Self::join(rng, p))
    }

    fn eval_set(&self, id: usize, prefix: &str, target: usize, queries: usize, rng: &mut Rng) -> DevSet {
        let mut passages = Vec::new();
        let mut qs = Vec::new();
        for n in 0..queries {
            let pair = self.pair(target, rng);
            let pid = format!("{prefix}-rel{n}");
            passages.push(Passage {
                id: pid.clone(),
                text: pair.positive,
            });
            qs.push(DevQuery {
                text: pair.query,
                qrels: BTreeMap::from([(pid, 1)]),
            });
        }
        for n in 0..self.spec.distractors {
            let domain = rng.below(self.spec.domains);
            passages.push(Passage {
                id: format!("{prefix}-dis{n}"),
                text: self.passage_only(domain, rng),
            });
        }
        DevSet {
            id,
            name: prefix.to_string(),
            queries: qs,
            passages,
            source: Some(SyntheticSpec::domain_name(target)),
        }
    }
}

/// Generates a corpus according to `spec`. The same seed always produces the
/// same corpus.
pub fn generate_synthetic(spec: &SyntheticSpec, rng: &mut Rng) -> Result<Corpus> {
    spec.check()?;
    let g = Generator::new(spec);
    let mut train_rng = rng.split(1);
    let train = (0..spec.domains)
        .map(|d| DomainDataset {
            id: d,
            name: SyntheticSpec::domain_name(d),
            pairs: (0..spec.pairs_per_domain).map(|_| g.pair(d, &mut train_rng)).collect(),
        })
        .collect();
    let mut dev_rng = rng.split(2);
    let mut test_rng = rng.split(3);
    let mut dev = Vec::new();
    let mut test = Vec::new();
    for (id, &t) in spec.dev_targets.iter().enumerate() {
        let name = SyntheticSpec::domain_name(t);
        dev.push(g.eval_set(id, &format!("dev-{name}"), t, spec.dev_queries, &mut dev_rng));
        if spec.test_queries > 0 {
            test.push(g.eval_set(id, &format!("test-{name}"), t, spec.test_queries, &mut test_rng));
        }
    }
    let corpus = Corpus { train, dev, test };
    corpus.validate()?;
    Ok(corpus)
}

//! Train/dev resampling: for each domain that feeds a dev set, pool its
//! training pairs with the dev pairs, draw a new training set of the original
//! size and hand the remainder back to the dev set. Test sets are untouched.

use std::collections::BTreeMap;

use crate::corpus::{Corpus, DevQuery, DevSet, Pair, Passage};
use crate::error::{Error, Result};
use crate::numerics::Rng;

struct Origin {
    /// Dev set index and passage id of the positive, for dev-origin pairs.
    passage: Option<(usize, String, u32)>,
    pair: Pair,
}

fn resample_once(corpus: &Corpus, rng: &mut Rng) -> Result<Corpus> {
    let mut out = corpus.clone();
    let mut any = false;
    for (d, domain) in corpus.train.iter().enumerate() {
        let sets: Vec<usize> = corpus
            .dev
            .iter()
            .enumerate()
            .filter(|(_, s)| s.source.as_deref() == Some(domain.name.as_str()))
            .map(|(i, _)| i)
            .collect();
        if sets.is_empty() {
            continue;
        }
        any = true;
        let mut pool: Vec<Origin> = domain
            .pairs
            .iter()
            .map(|p| Origin {
                passage: None,
                pair: p.clone(),
            })
            .collect();
        let mut quota = Vec::new();
        for &si in &sets {
            let set = &corpus.dev[si];
            let judged: Vec<&DevQuery> = set.queries.iter().filter(|q| q.has_relevant()).collect();
            if judged.is_empty() {
                return Err(Error::Corpus(format!("{}: no judged queries to leave in a resampled dev set", set.name)));
            }
            quota.push(judged.len());
            for q in judged {
                let pid = q.top_passage().expect("judged query").to_string();
                pool.push(Origin {
                    pair: Pair::new(q.text.clone(), set.passage_text(&pid).expect("validated qrels")),
                    passage: Some((si, pid.clone(), q.qrels[&pid])),
                });
            }
        }
        rng.shuffle(&mut pool);
        let mut rest = pool.split_off(domain.pairs.len());
        out.train[d].pairs = pool.into_iter().map(|o| o.pair).collect();
        for (&si, &n) in sets.iter().zip(&quota) {
            let chunk: Vec<Origin> = rest.drain(..n).collect();
            out.dev[si] = rebuild_dev(&corpus.dev[si], chunk);
        }
    }
    if !any {
        return Err(Error::Corpus("no dev set names a training domain as its source".into()));
    }
    out.validate()?;
    Ok(out)
}

/// Keeps the set's unjudged queries and its distractor passages, and adds
/// one judged query per pool item.
fn rebuild_dev(orig: &DevSet, items: Vec<Origin>) -> DevSet {
    let relevant: std::collections::HashSet<&str> = orig
        .queries
        .iter()
        .flat_map(|q| q.qrels.iter().filter(|(_, g)| **g > 0).map(|(id, _)| id.as_str()))
        .collect();
    let mut passages: Vec<Passage> = orig
        .passages
        .iter()
        .filter(|p| !relevant.contains(p.id.as_str()))
        .cloned()
        .collect();
    let mut queries: Vec<DevQuery> = orig.queries.iter().filter(|q| !q.has_relevant()).cloned().collect();
    let mut used: std::collections::HashSet<String> = passages.iter().map(|p| p.id.clone()).collect();
    for (k, item) in items.into_iter().enumerate() {
        let (id, grade) = match item.passage {
            Some((_, id, g)) if !used.contains(&id) => (id, g),
            _ => {
                let mut id = format!("{}-r{k}", orig.name);
                while used.contains(&id) {
                    id.push('x');
                }
                (id, 1)
            }
        };
        used.insert(id.clone());
        passages.push(Passage {
            id: id.clone(),
            text: item.pair.positive,
        });
        queries.push(DevQuery {
            text: item.pair.query,
            qrels: BTreeMap::from([(id, grade)]),
        });
    }
    DevSet {
        id: orig.id,
        name: orig.name.clone(),
        queries,
        passages,
        source: orig.source.clone(),
    }
}

/// `folds` independent resamplings, fold `k` drawn from `rng.split(k)`.
pub fn resample_splits(corpus: &Corpus, folds: usize, rng: &Rng) -> Result<Vec<Corpus>> {
    if folds == 0 {
        return Err(Error::Invalid("folds must be at least 1".into()));
    }
    (0..folds).map(|k| resample_once(corpus, &mut rng.split(k as u64))).collect()
}

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Corpus, DevQuery, DevSet, DomainDataset, Pair, Passage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainEntry {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalEntry {
    pub name: String,
    pub passages: PathBuf,
    pub queries: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

/// Manifest listing the files of every split. Relative paths resolve against
/// the manifest's directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    #[serde(default)]
    pub train: Vec<TrainEntry>,
    #[serde(default)]
    pub dev: Vec<EvalEntry>,
    #[serde(default)]
    pub test: Vec<EvalEntry>,
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(&r).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn load_eval(base: &Path, id: usize, entry: &EvalEntry) -> Result<DevSet> {
    let passages: Vec<Passage> = read_jsonl(&base.join(&entry.passages))?;
    let queries: Vec<DevQuery> = read_jsonl(&base.join(&entry.queries))?;
    let set = DevSet {
        id,
        name: entry.name.clone(),
        queries,
        passages,
        source: entry.source.clone(),
    };
    set.validate()?;
    Ok(set)
}

/// Loads and validates the corpus a manifest describes. Dataset ids follow
/// manifest order.
pub fn load_corpus(manifest_path: &Path) -> Result<(CorpusManifest, Corpus)> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: CorpusManifest = toml::from_str(&text).map_err(|e| Error::Parse {
        path: manifest_path.to_path_buf(),
        line: e
            .span()
            .map(|s| text[..s.start].lines().count().max(1))
            .unwrap_or(0),
        message: e.message().to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let train = manifest
        .train
        .iter()
        .enumerate()
        .map(|(id, e)| {
            Ok(DomainDataset {
                id,
                name: e.name.clone(),
                pairs: read_jsonl::<Pair>(&base.join(&e.path))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dev = manifest
        .dev
        .iter()
        .enumerate()
        .map(|(id, e)| load_eval(base, id, e))
        .collect::<Result<Vec<_>>>()?;
    let test = manifest
        .test
        .iter()
        .enumerate()
        .map(|(id, e)| load_eval(base, id, e))
        .collect::<Result<Vec<_>>>()?;
    let corpus = Corpus { train, dev, test };
    corpus.validate()?;
    Ok((manifest, corpus))
}

/// Writes `corpus` under `dir` and returns the manifest path.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = CorpusManifest::default();
    for d in &corpus.train {
        let rel = PathBuf::from("train").join(format!("{}.jsonl", d.name));
        write_jsonl(&dir.join(&rel), &d.pairs)?;
        manifest.train.push(TrainEntry {
            name: d.name.clone(),
            path: rel,
        });
    }
    for (split, sets, out) in [("dev", &corpus.dev, &mut manifest.dev), ("test", &corpus.test, &mut manifest.test)] {
        for s in sets {
            let passages = PathBuf::from(split).join(format!("{}.passages.jsonl", s.name));
            let queries = PathBuf::from(split).join(format!("{}.queries.jsonl", s.name));
            write_jsonl(&dir.join(&passages), &s.passages)?;
            write_jsonl(&dir.join(&queries), &s.queries)?;
            out.push(EvalEntry {
                name: s.name.clone(),
                passages,
                queries,
                source: s.source.clone(),
            });
        }
    }
    let path = dir.join("manifest.toml");
    let text = toml::to_string(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

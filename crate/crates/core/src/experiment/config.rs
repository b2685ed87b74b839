//! Experiment configuration: TOML with one table per module, command-line
//! `key=value` overrides, and validation that reports every bad key at once.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::baselines::StrategyChoice;
use crate::corpus::SyntheticSpec;
use crate::error::{Error, Result};
use crate::meta::TrainConfig;

/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "INFDDS_OUT_DIR";
pub const DEFAULT_OUT_ROOT: &str = "runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Corpus manifest. Relative paths resolve against the config file's
    /// directory. Without a manifest the synthetic corpus is generated.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub synthetic_seed: u64,
    pub synthetic: SyntheticSpec,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synthetic_seed: 1234,
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Run directory. Defaults to `<root>/<strategy>-seed<seed>` where the
    /// root comes from the environment or `runs`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Report of a baseline run to compare against with a paired t-test.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<PathBuf>,
    /// Write a checkpoint at every evaluation, not only best and final.
    pub checkpoints: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            baseline: None,
            checkpoints: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub output: OutputConfig,
    pub train: TrainConfig,
    /// Directory relative paths in the file resolve against.
    pub base_dir: PathBuf,
}

const SECTIONS: [&str; 9] = [
    "corpus",
    "output",
    "run",
    "model",
    "optimizer",
    "init",
    "strategy",
    "meta",
    "influence",
];

/// Keys that are valid but absent from the serialized defaults.
const OPTIONAL_KEYS: [&str; 7] = [
    "corpus.manifest",
    "output.dir",
    "output.baseline",
    "init.weights",
    "strategy.tau_start",
    "strategy.tau_end",
    "strategy.switch_fraction",
];

fn to_table<T: Serialize>(v: &T) -> Table {
    match Value::try_from(v).expect("config sections serialize") {
        Value::Table(t) => t,
        other => panic!("section serialized to {other:?}"),
    }
}

impl ExperimentConfig {
    /// The config as one TOML table per section, defaults included.
    pub fn to_table(&self) -> Table {
        let mut t = Table::new();
        let mut corpus = self.corpus.clone();
        corpus.manifest = corpus
            .manifest
            .map(|m| std::path::absolute(self.resolve(&m)).unwrap_or_else(|_| self.resolve(&m)));
        t.insert("corpus".into(), Value::Table(to_table(&corpus)));
        t.insert("output".into(), Value::Table(to_table(&self.output)));
        let c = &self.train;
        t.insert("run".into(), Value::Table(to_table(&c.run)));
        t.insert("model".into(), Value::Table(to_table(&c.model)));
        t.insert("optimizer".into(), Value::Table(to_table(&c.optimizer)));
        t.insert("init".into(), Value::Table(to_table(&c.init)));
        t.insert("strategy".into(), Value::Table(to_table(&c.strategy)));
        t.insert("meta".into(), Value::Table(to_table(&c.meta)));
        t.insert("influence".into(), Value::Table(to_table(&c.influence)));
        t
    }

    /// Full config echo. Parsing it back yields the same config.
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_table()).expect("config serializes")
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0),
            message: e.message().to_string(),
        })?;
        apply_overrides(&mut table, overrides)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_table(table, base)
    }

    pub fn from_str_with(text: &str, overrides: &[String], base_dir: &Path) -> Result<Self> {
        let mut table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(vec![format!("config: {}", e.message())]))?;
        apply_overrides(&mut table, overrides)?;
        Self::from_table(table, base_dir.to_path_buf())
    }

    /// Builds a config from a parsed table, collecting unknown keys, type
    /// errors and semantic problems into one `Error::Config`.
    pub fn from_table(table: Table, base_dir: PathBuf) -> Result<Self> {
        let defaults = ExperimentConfig::default().to_table();
        let mut issues = Vec::new();
        unknown_keys(&table, &defaults, "", &mut issues);
        if !issues.is_empty() {
            return Err(Error::Config(issues));
        }
        let mut cfg = ExperimentConfig {
            base_dir,
            ..Default::default()
        };
        let take = |name: &str| table.get(name).cloned();
        section(take("corpus"), "corpus", &mut cfg.corpus, &mut issues);
        section(take("output"), "output", &mut cfg.output, &mut issues);
        let t = &mut cfg.train;
        section(take("run"), "run", &mut t.run, &mut issues);
        section(take("model"), "model", &mut t.model, &mut issues);
        section(take("optimizer"), "optimizer", &mut t.optimizer, &mut issues);
        section(take("init"), "init", &mut t.init, &mut issues);
        section(take("meta"), "meta", &mut t.meta, &mut issues);
        section(take("influence"), "influence", &mut t.influence, &mut issues);
        if let Some(v) = take("strategy") {
            match v.try_into::<StrategyChoice>() {
                Ok(s) => t.strategy = s,
                Err(e) => issues.push(format!("strategy: {}", e.message().trim())),
            }
        }
        if !issues.is_empty() {
            return Err(Error::Config(issues));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn issues(&self) -> Vec<String> {
        let mut issues = self.train.issues();
        if let Some(m) = &self.corpus.manifest {
            let p = self.resolve(m);
            if !p.is_file() {
                issues.push(format!("corpus.manifest: file `{}` not found", p.display()));
            }
        }
        issues
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Run directory: explicit `output.dir`, else a per-run directory under
    /// the environment's root or `runs`.
    pub fn out_dir(&self) -> PathBuf {
        if let Some(d) = &self.output.dir {
            return d.clone();
        }
        let root = std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT));
        root.join(format!("{}-seed{}", self.train.strategy.name(), self.train.run.seed))
    }
}

fn section<T: DeserializeOwned>(value: Option<Value>, name: &str, out: &mut T, issues: &mut Vec<String>) {
    let Some(v) = value else { return };
    match v.try_into::<T>() {
        Ok(parsed) => *out = parsed,
        Err(e) => issues.push(format!("{name}: {}", e.message().trim())),
    }
}

fn unknown_keys(user: &Table, defaults: &Table, prefix: &str, issues: &mut Vec<String>) {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match defaults.get(k) {
            Some(Value::Table(d)) => match v {
                Value::Table(u) => unknown_keys(u, d, &path, issues),
                _ => issues.push(format!("{path}: expected a table")),
            },
            Some(_) => {}
            None if prefix.is_empty() && !SECTIONS.contains(&k.as_str()) => {
                issues.push(format!("{path}: unknown section"))
            }
            None if OPTIONAL_KEYS.contains(&path.as_str()) => {}
            None => issues.push(format!("{path}: unknown key")),
        }
    }
}

/// Resolves a bare key such as `seed` to its unique `section.key` path.
fn resolve_key(key: &str, defaults: &Table) -> Result<Vec<String>> {
    if key.contains('.') {
        return Ok(key.split('.').map(str::to_string).collect());
    }
    let mut hits: Vec<&str> = SECTIONS
        .iter()
        .copied()
        .filter(|s| {
            matches!(defaults.get(*s), Some(Value::Table(t)) if t.contains_key(key))
                || OPTIONAL_KEYS.contains(&format!("{s}.{key}").as_str())
        })
        .collect();
    match hits.len() {
        1 => Ok(vec![hits.remove(0).to_string(), key.to_string()]),
        0 => Err(Error::Config(vec![format!("{key}: unknown key")])),
        _ => Err(Error::Config(vec![format!(
            "{key}: ambiguous, qualify it as one of {}",
            hits.iter().map(|s| format!("{s}.{key}")).collect::<Vec<_>>().join(", ")
        )])),
    }
}

fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut Table, path: &[String], value: Value) -> std::result::Result<(), String> {
    let (last, parents) = path.split_last().expect("nonempty key path");
    let mut node = table;
    for part in parents {
        match node.entry(part.clone()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(t) => node = t,
            _ => return Err(part.clone()),
        }
    }
    node.insert(last.clone(), value);
    Ok(())
}

/// Applies `key=value` overrides. Values parse as TOML and fall back to
/// plain strings.
pub fn apply_overrides(table: &mut Table, overrides: &[String]) -> Result<()> {
    let defaults = ExperimentConfig::default().to_table();
    let mut issues = Vec::new();
    for o in overrides {
        let Some((key, raw)) = o.split_once('=') else {
            issues.push(format!("{o}: override must look like key=value"));
            continue;
        };
        let path = match resolve_key(key.trim(), &defaults) {
            Ok(p) => p,
            Err(Error::Config(mut v)) => {
                issues.append(&mut v);
                continue;
            }
            Err(e) => return Err(e),
        };
        if let Err(part) = set_path(table, &path, parse_value(raw.trim())) {
            issues.push(format!("{key}: `{part}` is not a table"));
        }
    }
    if issues.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(issues))
    }
}

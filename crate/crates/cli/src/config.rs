//! Flat key-value sweep configuration.
//!
//! The format is one `key = value` pair per line; `#` starts a comment.
//! Command-line `--set key=value` pairs override file values. The full key
//! table is documented in the project README.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use fglm_core::bank::BankPolicy;
use fglm_core::experiment::{DataSource, ExperimentConfig, GroupingSpec, MethodGrid, SynthSpec};
use fglm_core::glm::Optimizer;

const KNOWN_KEYS: &[&str] = &[
    "data",
    "geometry",
    "standardize",
    "synth.classes",
    "synth.per_class",
    "synth.height",
    "synth.width",
    "synth.seed",
    "sigmas",
    "test_fraction",
    "epochs",
    "minibatch",
    "lr",
    "optimizer",
    "methods",
    "l2.lambdas",
    "dropout.deltas",
    "grouping.k",
    "grouping.r",
    "grouping.b",
    "grouping.policy",
    "grouping.lambdas",
];

#[derive(Debug, Clone)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
    origin: PathBuf,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                anyhow!(
                    "{}:{}: expected `key = value`, got {raw:?}",
                    path.display(),
                    lineno + 1
                )
            })?;
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                bail!("{}:{}: unknown key {key:?}", path.display(), lineno + 1);
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(FileConfig {
            values,
            origin: path.to_path_buf(),
        })
    }

    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        for set in sets {
            let (key, value) = set
                .split_once('=')
                .ok_or_else(|| anyhow!("--set needs key=value, got {set:?}"))?;
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                bail!("--set: unknown key {key:?}");
            }
            self.values
                .insert(key.to_string(), value.trim().to_string());
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn req(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| anyhow!("{}: missing required key {key:?}", self.origin.display()))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| anyhow!("{}: bad value for {key}: {s:?}", self.origin.display())),
        }
    }

    fn list_f64(&self, key: &str) -> Result<Vec<f64>> {
        let raw = self.req(key)?;
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| anyhow!("{}: bad number {s:?} in {key}", self.origin.display()))
            })
            .collect()
    }
}

pub fn parse_geometry(spec: &str) -> Result<Vec<usize>> {
    let dims: Vec<usize> = spec
        .split('x')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| anyhow!("bad geometry {spec:?}"))
        })
        .collect::<Result<_>>()?;
    if dims.is_empty() || dims.len() > 3 || dims.contains(&0) {
        bail!("geometry {spec:?} must have 1 to 3 nonzero dims, like 64x64");
    }
    Ok(dims)
}

fn grouping_variants(cfg: &FileConfig, with_l2: bool) -> Result<Vec<GroupingSpec>> {
    let ks: Vec<Option<usize>> = match cfg.get("grouping.k") {
        None => vec![None],
        Some(raw) => raw
            .split(',')
            .map(|s| {
                let s = s.trim();
                if s == "20%" || s.is_empty() {
                    Ok(None)
                } else {
                    s.parse::<usize>()
                        .map(Some)
                        .map_err(|_| anyhow!("bad grouping.k entry {s:?}"))
                }
            })
            .collect::<Result<_>>()?,
    };
    let r = cfg.parse("grouping.r", 20usize)?;
    let b = cfg.parse("grouping.b", 100usize)?;
    let policy = BankPolicy::parse(cfg.get("grouping.policy").unwrap_or("per-minibatch"))
        .map_err(|e| anyhow!(e.to_string()))?;
    let lambdas: Vec<f64> = if with_l2 {
        cfg.list_f64("grouping.lambdas")?
    } else {
        vec![0.0]
    };
    let mut variants = Vec::new();
    for &k in &ks {
        for &lambda in &lambdas {
            variants.push(GroupingSpec {
                k,
                r,
                b,
                policy,
                lambda,
            });
        }
    }
    Ok(variants)
}

/// Builds the experiment config; seeds always come from the command line.
pub fn experiment_from_config(cfg: &FileConfig, seeds: Vec<u64>) -> Result<ExperimentConfig> {
    let source = match cfg.req("data")? {
        "synth" => DataSource::Synth(SynthSpec {
            classes: cfg.parse("synth.classes", 40usize)?,
            per_class: cfg.parse("synth.per_class", 10usize)?,
            height: cfg.parse("synth.height", 64usize)?,
            width: cfg.parse("synth.width", 64usize)?,
            seed: cfg.parse("synth.seed", 7u64)?,
        }),
        path => DataSource::File(PathBuf::from(path)),
    };
    let geometry = cfg.get("geometry").map(parse_geometry).transpose()?;
    let mut methods = Vec::new();
    for method in cfg.req("methods")?.split(',') {
        match method.trim() {
            "none" => methods.push(MethodGrid::None),
            "l2" => methods.push(MethodGrid::L2 {
                lambdas: cfg.list_f64("l2.lambdas")?,
            }),
            "dropout" => methods.push(MethodGrid::Dropout {
                deltas: cfg.list_f64("dropout.deltas")?,
            }),
            "grouping" => methods.push(MethodGrid::Grouping {
                variants: grouping_variants(cfg, false)?,
            }),
            "grouping+l2" => methods.push(MethodGrid::Grouping {
                variants: grouping_variants(cfg, true)?,
            }),
            other => bail!("unknown method {other:?} in methods list"),
        }
    }
    let optimizer = Optimizer::parse(cfg.get("optimizer").unwrap_or("adam"))
        .map_err(|e| anyhow!(e.to_string()))?;
    Ok(ExperimentConfig {
        source,
        geometry,
        standardize: cfg.parse("standardize", false)?,
        sigmas: cfg.list_f64("sigmas")?,
        test_fraction: cfg.parse("test_fraction", 0.33f64)?,
        methods,
        epochs: cfg.parse("epochs", 300usize)?,
        minibatch: cfg.parse("minibatch", 32usize)?,
        learning_rate: cfg.parse("lr", 1e-4f64)?,
        optimizer,
        seeds,
    })
}

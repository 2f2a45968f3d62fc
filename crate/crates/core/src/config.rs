//! Run configuration: a flat `key=value` file with strict key checking.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::tensor::Norm;

/// Architecture switches for the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    SingleExpert,
    SharedGate,
    NoStructural,
    AdditiveFusion,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::SingleExpert,
        Variant::SharedGate,
        Variant::NoStructural,
        Variant::AdditiveFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SingleExpert => "single_expert",
            Variant::SharedGate => "shared_gate",
            Variant::NoStructural => "no_structural",
            Variant::AdditiveFusion => "additive_fusion",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}`; expected one of full, single_expert, shared_gate, no_structural, additive_fusion"
                ))
            })
    }
}

/// Shape of one adapter stack plus the data geometry it consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub n_experts: usize,
    pub k: usize,
    pub m: usize,
    pub r: usize,
    pub norm: Norm,
    pub patch: usize,
    pub channels: usize,
    pub classes: usize,
    pub variant: Variant,
}

impl ModelConfig {
    /// Copy with the variant's structural overrides applied.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        if cfg.variant == Variant::SingleExpert {
            cfg.n_experts = 1;
            cfg.k = 1;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = self.resolved();
        let positive = [
            ("d", cfg.d),
            ("L", cfg.layers),
            ("N_e", cfg.n_experts),
            ("k", cfg.k),
            ("m", cfg.m),
            ("r", cfg.r),
            ("patch", cfg.patch),
            ("C", cfg.channels),
            ("K", cfg.classes),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{key}` must be positive")));
            }
        }
        if cfg.k > cfg.n_experts {
            return Err(Error::Config(format!(
                "k={} exceeds N_e={}",
                cfg.k, cfg.n_experts
            )));
        }
        if cfg.r >= cfg.d || cfg.r > cfg.m {
            return Err(Error::Config(format!(
                "rank r={} must be below d={} and at most m={}",
                cfg.r, cfg.d, cfg.m
            )));
        }
        Ok(())
    }
}

/// Every key a config file may contain.
pub const KEYS: &[&str] = &[
    "d",
    "L",
    "N_e",
    "k",
    "m",
    "r",
    "p",
    "lambda",
    "lr",
    "weight_decay",
    "batch",
    "epochs",
    "seed",
    "patch",
    "variant",
    "H",
    "W",
    "C",
    "K",
    "n_source",
    "n_target",
    "seeds",
    "ne_list",
    "dataset_dir",
    "checkpoint_dir",
    "metrics_path",
    "out_dir",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub seeds: Vec<u64>,
    pub ne_list: Vec<usize>,
    pub dataset_dir: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    /// The default synthetic benchmark.
    fn default() -> Self {
        Self {
            model: ModelConfig {
                d: 32,
                layers: 2,
                n_experts: 6,
                k: 2,
                m: 4,
                r: 4,
                norm: Norm::L1,
                patch: 8,
                channels: 8,
                classes: 5,
                variant: Variant::Full,
            },
            lambda: 0.01,
            lr: 1e-2,
            weight_decay: 0.01,
            batch: 8,
            epochs: 20,
            seed: 0,
            height: 64,
            width: 64,
            n_source: 200,
            n_target: 100,
            seeds: vec![0, 1, 2, 3, 4],
            ne_list: vec![1, 2, 4, 6, 8],
            dataset_dir: None,
            checkpoint_dir: None,
            metrics_path: None,
            out_dir: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("key `{key}` has invalid value `{raw}`")))
}

fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses config text. Unknown keys are rejected; absent keys keep their
    /// defaults. Relative paths resolve against `base`.
    pub fn parse(text: &str, origin: &Path, base: &Path) -> Result<Self> {
        let manifest = Manifest::parse(text, origin)?;
        let mut cfg = Self::default();
        for (key, raw) in manifest.iter() {
            cfg.set(key, raw, base)?;
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, path, base)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, raw: &str, base: &Path) -> Result<()> {
        let path = |raw: &str| {
            if raw.is_empty() {
                return None;
            }
            let p = PathBuf::from(raw);
            Some(if p.is_absolute() { p } else { base.join(p) })
        };
        match key {
            "d" => self.model.d = parse(key, raw)?,
            "L" => self.model.layers = parse(key, raw)?,
            "N_e" => self.model.n_experts = parse(key, raw)?,
            "k" => self.model.k = parse(key, raw)?,
            "m" => self.model.m = parse(key, raw)?,
            "r" => self.model.r = parse(key, raw)?,
            "p" => self.model.norm = Norm::from_order(parse(key, raw)?)?,
            "patch" => self.model.patch = parse(key, raw)?,
            "C" => self.model.channels = parse(key, raw)?,
            "K" => self.model.classes = parse(key, raw)?,
            "variant" => self.model.variant = raw.parse()?,
            "lambda" => self.lambda = parse(key, raw)?,
            "lr" => self.lr = parse(key, raw)?,
            "weight_decay" => self.weight_decay = parse(key, raw)?,
            "batch" => self.batch = parse(key, raw)?,
            "epochs" => self.epochs = parse(key, raw)?,
            "seed" => self.seed = parse(key, raw)?,
            "H" => self.height = parse(key, raw)?,
            "W" => self.width = parse(key, raw)?,
            "n_source" => self.n_source = parse(key, raw)?,
            "n_target" => self.n_target = parse(key, raw)?,
            "seeds" => self.seeds = parse_list(key, raw)?,
            "ne_list" => self.ne_list = parse_list(key, raw)?,
            "dataset_dir" => self.dataset_dir = path(raw),
            "checkpoint_dir" => self.checkpoint_dir = path(raw),
            "metrics_path" => self.metrics_path = path(raw),
            "out_dir" => self.out_dir = path(raw),
            other => {
                return Err(Error::Config(format!("unknown config key `{other}`")));
            }
        }
        Ok(())
    }

    pub fn check(&self) -> Result<()> {
        self.model.validate()?;
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config("`lambda` must be finite and non-negative".into()));
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::Config("`lr` must be finite and non-negative".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("`batch` must be positive".into()));
        }
        if !self.height.is_multiple_of(self.model.patch) || !self.width.is_multiple_of(self.model.patch) {
            return Err(Error::Config(format!(
                "H={} and W={} must be divisible by patch={}",
                self.height, self.width, self.model.patch
            )));
        }
        if self.ne_list.contains(&0) {
            return Err(Error::Config("`ne_list` entries must be >= 1".into()));
        }
        Ok(())
    }

    /// Fully resolved key/value form, every key present.
    pub fn to_manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        let model = &self.model;
        m.set("d", model.d)
            .set("L", model.layers)
            .set("N_e", model.n_experts)
            .set("k", model.k)
            .set("m", model.m)
            .set("r", model.r)
            .set("p", model.norm.order())
            .set("patch", model.patch)
            .set("C", model.channels)
            .set("K", model.classes)
            .set("variant", model.variant)
            .set("lambda", self.lambda)
            .set("lr", self.lr)
            .set("weight_decay", self.weight_decay)
            .set("batch", self.batch)
            .set("epochs", self.epochs)
            .set("seed", self.seed)
            .set("H", self.height)
            .set("W", self.width)
            .set("n_source", self.n_source)
            .set("n_target", self.n_target)
            .set("seeds", join(&self.seeds))
            .set("ne_list", join(&self.ne_list));
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        m.set("dataset_dir", opt(&self.dataset_dir))
            .set("checkpoint_dir", opt(&self.checkpoint_dir))
            .set("metrics_path", opt(&self.metrics_path))
            .set("out_dir", opt(&self.out_dir));
        m
    }

    pub fn resolved_text(&self) -> String {
        self.to_manifest().to_text()
    }

    /// SHA-256 of the resolved text, excluding output paths so the hash
    /// identifies the experiment rather than where it was written.
    pub fn hash(&self) -> String {
        let mut m = self.to_manifest();
        for key in ["checkpoint_dir", "metrics_path", "out_dir", "dataset_dir"] {
            m.set(key, "");
        }
        let digest = Sha256::digest(m.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn require_path(&self, key: &str) -> Result<&Path> {
        let p = match key {
            "dataset_dir" => &self.dataset_dir,
            "checkpoint_dir" => &self.checkpoint_dir,
            "metrics_path" => &self.metrics_path,
            "out_dir" => &self.out_dir,
            _ => return Err(Error::Config(format!("`{key}` is not a path key"))),
        };
        p.as_deref()
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    /// Copy for one training run: a specific variant and seed.
    pub fn for_run(&self, variant: Variant, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.model.variant = variant;
        cfg.seed = seed;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_benchmark() {
        let cfg = RunConfig::default();
        assert_eq!((cfg.height, cfg.width, cfg.model.patch), (64, 64, 8));
        assert_eq!((cfg.model.channels, cfg.model.classes, cfg.model.d), (8, 5, 32));
        assert_eq!((cfg.model.layers, cfg.model.n_experts, cfg.model.k), (2, 6, 2));
        assert_eq!((cfg.n_source, cfg.n_target), (200, 100));
        assert_eq!(cfg.lambda, 0.01);
        assert_eq!(cfg.model.norm, Norm::L1);
    }

    #[test]
    fn parse_overrides_and_rejects_unknown() {
        let base = Path::new("/tmp/base");
        let cfg = RunConfig::parse("d=16\nvariant=shared_gate\nseeds=3,4\ndataset_dir=data\n", Path::new("c"), base).unwrap();
        assert_eq!(cfg.model.d, 16);
        assert_eq!(cfg.model.variant, Variant::SharedGate);
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!(cfg.dataset_dir.as_deref(), Some(Path::new("/tmp/base/data")));

        let err = RunConfig::parse("dd=16\n", Path::new("c"), base).unwrap_err();
        assert!(err.to_string().contains("dd"));
        assert!(RunConfig::parse("variant=nope\n", Path::new("c"), base).is_err());
        assert!(RunConfig::parse("k=7\n", Path::new("c"), base).is_err());
        assert!(RunConfig::parse("H=60\n", Path::new("c"), base).is_err());
    }

    #[test]
    fn resolved_text_roundtrips() {
        let mut cfg = RunConfig::default();
        cfg.model.variant = Variant::AdditiveFusion;
        cfg.dataset_dir = Some(PathBuf::from("/data/x"));
        let text = cfg.resolved_text();
        let back = RunConfig::parse(&text, Path::new("c"), Path::new("/")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        for key in KEYS {
            assert!(text.contains(&format!("{key}=")), "{key}");
        }
    }

    #[test]
    fn single_expert_resolution() {
        let mut cfg = RunConfig::default().model;
        cfg.variant = Variant::SingleExpert;
        let r = cfg.resolved();
        assert_eq!((r.n_experts, r.k), (1, 1));
        assert_eq!(r.d, cfg.d);
    }

    #[test]
    fn missing_path_names_key() {
        let err = RunConfig::default().require_path("dataset_dir").unwrap_err();
        assert!(err.to_string().contains("dataset_dir"));
    }
}

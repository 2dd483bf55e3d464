//! Experiment configuration: a flat `key = value` text file.
//!
//! ```text
//! # comments start with '#'
//! mode = ccp                 # baseline_proxy | ccp | sample_based
//! seed = 7
//! data.source = synth
//! data.classes = 10
//! net.dims = 16, 64, 32, 2
//! loss.kind = generalized_contrastive
//! loss.beta = 0.5
//! ccp.proxies_per_class = 4
//! ccp.pool_budget = 16
//! ```
//!
//! `preset = cub | sop` sets the proxy count and pool size used for the
//! larger image benchmarks; explicit keys override it regardless of order.
//! Unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::ccp::{AnchorMode, CcpConfig};
use crate::data::{self, Dataset};
use crate::losses::LossSpec;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    BaselineProxy,
    Ccp,
    SampleBased,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::BaselineProxy => "baseline_proxy",
            Mode::Ccp => "ccp",
            Mode::SampleBased => "sample_based",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline_proxy" | "baseline" => Ok(Mode::BaselineProxy),
            "ccp" => Ok(Mode::Ccp),
            "sample_based" => Ok(Mode::SampleBased),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synth {
        classes: usize,
        modes_per_class: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub source: DataSource,
    /// Held out as the test split when no separate test set is given.
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub max_per_class: Option<usize>,
    /// Standardize features with train-split statistics.
    pub standardize: bool,
    /// Reserved; no augmentation pipeline exists.
    pub augment: bool,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            source: DataSource::Synth {
                classes: 10,
                modes_per_class: 1,
                per_class: 100,
                dim: 16,
                spread: 0.1,
            },
            test_fraction: 0.3,
            val_fraction: 0.2,
            max_per_class: None,
            standardize: true,
            augment: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: DataSpec,
    /// Training settings before the mode is applied.
    pub train: CcpConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Ccp,
            seed: 0,
            output_dir: None,
            data: DataSpec::default(),
            train: CcpConfig {
                layer_dims: vec![16, 64, 32, 2],
                ..CcpConfig::default()
            },
        }
    }
}

/// Split a config file into `(key, value)` pairs, keeping file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(seen, _): &(String, String)| seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        Self::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_text(&text)
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let pairs: Vec<(&str, &str)> = pairs.into_iter().collect();
        let mut cfg = ExperimentConfig::default();
        if let Some((_, preset)) = pairs.iter().find(|(k, _)| *k == "preset") {
            let (p, b) = match *preset {
                "cub" | "cars" => (8, 12),
                "sop" | "inshop" => (4, 7),
                other => return Err(Error::Config(format!("unknown preset {other:?}"))),
            };
            cfg.train.proxies_per_class = p;
            cfg.train.pool_budget = b;
        }

        let mut source = "synth".to_string();
        let (mut classes, mut modes, mut per_class, mut dim, mut spread) = (10, 1, 100, 16, 0.1);
        let mut paths: [Option<PathBuf>; 4] = Default::default();
        let mut loss_kind = cfg.train.loss.kind().to_string();
        let mut loss_params: BTreeMap<&str, f64> = BTreeMap::new();

        for &(k, v) in &pairs {
            let t = &mut cfg.train;
            match k {
                "preset" => {}
                "mode" => cfg.mode = v.parse()?,
                "seed" => cfg.seed = num(k, v)?,
                "output.dir" => cfg.output_dir = Some(PathBuf::from(v)),
                "data.source" => source = v.to_string(),
                "data.classes" => classes = num(k, v)?,
                "data.modes_per_class" => modes = num(k, v)?,
                "data.per_class" => per_class = num(k, v)?,
                "data.dim" => dim = num(k, v)?,
                "data.spread" => spread = num(k, v)?,
                "data.train_images" => paths[0] = Some(v.into()),
                "data.train_labels" => paths[1] = Some(v.into()),
                "data.test_images" => paths[2] = Some(v.into()),
                "data.test_labels" => paths[3] = Some(v.into()),
                "data.test_fraction" => cfg.data.test_fraction = num(k, v)?,
                "data.val_fraction" => cfg.data.val_fraction = num(k, v)?,
                "data.max_per_class" => cfg.data.max_per_class = Some(num(k, v)?),
                "data.standardize" => cfg.data.standardize = boolean(k, v)?,
                "data.augment" => cfg.data.augment = boolean(k, v)?,
                "net.dims" => {
                    t.layer_dims = v
                        .split(',')
                        .map(|s| num(k, s.trim()))
                        .collect::<Result<_>>()?
                }
                "loss.kind" => loss_kind = v.to_string(),
                "loss.alpha" | "loss.beta" | "loss.margin" | "loss.m_plus" | "loss.m_minus"
                | "loss.lambda" => {
                    loss_params.insert(&k[5..], num(k, v)?);
                }
                "optim.lr" => t.adam.lr = num(k, v)?,
                "optim.beta1" => t.adam.beta1 = num(k, v)?,
                "optim.beta2" => t.adam.beta2 = num(k, v)?,
                "optim.eps" => t.adam.eps = num(k, v)?,
                "optim.weight_decay" => t.adam.weight_decay = num(k, v)?,
                "ccp.lambda" => t.lambda = num(k, v)?,
                "ccp.proxies_per_class" => t.proxies_per_class = num(k, v)?,
                "ccp.pool_budget" => t.pool_budget = num(k, v)?,
                "ccp.eval_every" => t.eval_every = num(k, v)?,
                "ccp.inner_patience" => t.inner_patience = num(k, v)?,
                "ccp.global_patience" => t.global_patience = num(k, v)?,
                "ccp.max_projections" => t.max_projections = num(k, v)?,
                "ccp.max_steps" => t.max_steps = num(k, v)?,
                "sampler.batch_size" => t.batch_size = num(k, v)?,
                "sampler.samples_per_class" => t.samples_per_class = num(k, v)?,
                "constraint.alpha" => t.constraint_alpha = num(k, v)?,
                "constraint.beta" => t.constraint_beta = num(k, v)?,
                other => return Err(Error::Config(format!("unknown key {other:?}"))),
            }
        }

        cfg.data.source = match source.as_str() {
            "synth" => DataSource::Synth {
                classes,
                modes_per_class: modes,
                per_class,
                dim,
                spread,
            },
            "idx" => {
                let [ti, tl, si, sl] = paths;
                let missing = |name: &str| Error::Config(format!("data.source = idx requires data.{name}"));
                if si.is_some() != sl.is_some() {
                    return Err(Error::Config("data.test_images and data.test_labels go together".into()));
                }
                DataSource::Idx {
                    train_images: ti.ok_or_else(|| missing("train_images"))?,
                    train_labels: tl.ok_or_else(|| missing("train_labels"))?,
                    test_images: si,
                    test_labels: sl,
                }
            }
            other => return Err(Error::Config(format!("unknown data.source {other:?}"))),
        };
        cfg.train.loss = LossSpec::from_kind(&loss_kind, |name| loss_params.get(name).copied())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks that do not need the data.
    pub fn validate(&self) -> Result<()> {
        self.training_config().validate()?;
        let d = &self.data;
        if d.augment {
            return Err(Error::Config("data.augment is reserved; augmentation is not implemented".into()));
        }
        if !(d.val_fraction > 0.0 && d.val_fraction < 1.0) {
            return Err(Error::Config("data.val_fraction must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&d.test_fraction) {
            return Err(Error::Config("data.test_fraction must lie in [0, 1)".into()));
        }
        if d.max_per_class == Some(0) {
            return Err(Error::Config("data.max_per_class must be positive".into()));
        }
        if let DataSource::Synth { classes, modes_per_class, per_class, dim, spread } = d.source {
            if classes < 2
                || modes_per_class == 0
                || per_class < 2
                || dim == 0
                || !(spread >= 0.0 && spread.is_finite())
            {
                return Err(Error::Config(
                    "synthetic data needs >= 2 classes, >= 1 mode, >= 2 per class, dim > 0, spread >= 0".into(),
                ));
            }
            if dim != self.train.layer_dims[0] {
                return Err(Error::Config(format!(
                    "net.dims starts with {} but data.dim is {dim}",
                    self.train.layer_dims[0]
                )));
            }
        }
        Ok(())
    }

    /// Training settings with the mode and seed applied.
    pub fn training_config(&self) -> CcpConfig {
        let mut t = self.train.clone();
        t.seed = self.seed;
        match self.mode {
            Mode::BaselineProxy => t.baseline(),
            Mode::Ccp => t,
            Mode::SampleBased => CcpConfig {
                anchors: AnchorMode::Samples,
                ..t
            },
        }
    }

    /// Load or generate the data and apply test/validation splits.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let d = &self.data;
        let mut ds = match &d.source {
            DataSource::Synth { classes, modes_per_class, per_class, dim, spread } => {
                data::synth_mixture(*classes, *modes_per_class, *per_class, *dim, *spread, self.seed)?
            }
            DataSource::Idx { train_images, train_labels, test_images, test_labels } => {
                let train = data::load_idx(train_images, train_labels)?;
                match (test_images, test_labels) {
                    (Some(i), Some(l)) => train.with_test_set(data::load_idx(i, l)?)?,
                    _ => train,
                }
            }
        };
        if ds.test.is_empty() && d.test_fraction > 0.0 {
            ds = data::holdout_test(ds, d.test_fraction, self.seed)?;
        }
        if let Some(max) = d.max_per_class {
            ds = ds.limit_per_class(max, self.seed);
        }
        ds = data::split(ds, d.val_fraction, self.seed)?;
        if d.standardize {
            ds = ds.standardize()?;
        }
        Ok(ds)
    }

    /// Every setting as `(key, value)`, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        put("mode", self.mode.as_str().into());
        put("seed", self.seed.to_string());
        if let Some(dir) = &self.output_dir {
            put("output.dir", dir.display().to_string());
        }
        match &self.data.source {
            DataSource::Synth { classes, modes_per_class, per_class, dim, spread } => {
                put("data.source", "synth".into());
                put("data.classes", classes.to_string());
                put("data.modes_per_class", modes_per_class.to_string());
                put("data.per_class", per_class.to_string());
                put("data.dim", dim.to_string());
                put("data.spread", spread.to_string());
            }
            DataSource::Idx { train_images, train_labels, test_images, test_labels } => {
                put("data.source", "idx".into());
                put("data.train_images", train_images.display().to_string());
                put("data.train_labels", train_labels.display().to_string());
                if let (Some(i), Some(l)) = (test_images, test_labels) {
                    put("data.test_images", i.display().to_string());
                    put("data.test_labels", l.display().to_string());
                }
            }
        }
        put("data.test_fraction", self.data.test_fraction.to_string());
        put("data.val_fraction", self.data.val_fraction.to_string());
        if let Some(m) = self.data.max_per_class {
            put("data.max_per_class", m.to_string());
        }
        put("data.standardize", self.data.standardize.to_string());
        put("data.augment", self.data.augment.to_string());
        let t = &self.train;
        let dims: Vec<String> = t.layer_dims.iter().map(|d| d.to_string()).collect();
        put("net.dims", dims.join(", "));
        put("loss.kind", t.loss.kind().into());
        for (name, v) in t.loss.params() {
            put(&format!("loss.{name}"), v.to_string());
        }
        put("optim.lr", t.adam.lr.to_string());
        put("optim.beta1", t.adam.beta1.to_string());
        put("optim.beta2", t.adam.beta2.to_string());
        put("optim.eps", t.adam.eps.to_string());
        put("optim.weight_decay", t.adam.weight_decay.to_string());
        put("ccp.lambda", t.lambda.to_string());
        put("ccp.proxies_per_class", t.proxies_per_class.to_string());
        put("ccp.pool_budget", t.pool_budget.to_string());
        put("ccp.eval_every", t.eval_every.to_string());
        put("ccp.inner_patience", t.inner_patience.to_string());
        put("ccp.global_patience", t.global_patience.to_string());
        put("ccp.max_projections", t.max_projections.to_string());
        put("ccp.max_steps", t.max_steps.to_string());
        put("sampler.batch_size", t.batch_size.to_string());
        put("sampler.samples_per_class", t.samples_per_class.to_string());
        put("constraint.alpha", t.constraint_alpha.to_string());
        put("constraint.beta", t.constraint_beta.to_string());
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// The `data.*` settings, used to tell whether two runs saw the same data.
    pub fn dataset_key(&self) -> Vec<(String, String)> {
        self.to_pairs()
            .into_iter()
            .filter(|(k, _)| k.starts_with("data.") || k == "seed")
            .collect()
    }
}

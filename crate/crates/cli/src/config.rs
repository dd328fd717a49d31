//! Flat `key=value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use boovae::metrics::{DiversityForm, EvalConfig, ProbeConfig};
use boovae::data::Binarize;
use boovae::prior::BoostConfig;
use boovae::trainer::TrainConfig;
use boovae::vae::MlpSpec;
use boovae::{Error, Result};

pub const DATA_DIR_ENV: &str = "BOOVAE_DATA_DIR";

/// `(key, default, description)`; keys without a default are required.
pub const SCHEMA: &[(&str, Option<&str>, &str)] = &[
    ("dataset", None, "mnist | synthetic"),
    ("out_dir", None, "directory for checkpoints, logs and reports"),
    ("seed", Some("0"), "seed for every random choice"),
    ("train_images", Some(""), "IDX image file (mnist); falls back to $BOOVAE_DATA_DIR"),
    ("train_labels", Some(""), "IDX label file (mnist)"),
    ("test_images", Some(""), "IDX image file (mnist)"),
    ("test_labels", Some(""), "IDX label file (mnist)"),
    ("classes_per_task", Some("1"), "classes per task in the class split"),
    ("tasks", Some("0"), "train only the first n tasks (0 = all)"),
    ("max_per_task", Some("0"), "cap on training examples per task (0 = no cap)"),
    ("binarize", Some("none"), "none | threshold"),
    ("synthetic_tasks", Some("2"), "number of synthetic cluster tasks"),
    ("synthetic_per_task", Some("600"), "training examples per synthetic task"),
    ("synthetic_test_per_task", Some("100"), "test examples per synthetic task"),
    ("synthetic_dim", Some("32"), "data dimension of synthetic tasks"),
    ("synthetic_separation", Some("6.0"), "distance between neighbouring cluster centers"),
    ("hidden", Some("300,300"), "comma-separated hidden widths"),
    ("latent_dim", Some("40"), "latent dimension"),
    ("components_per_task", Some("15"), "component budget per task"),
    ("batch_size", Some("250"), "minibatch size"),
    ("lr", Some("0.0005"), "Adam learning rate"),
    ("max_epochs", Some("500"), "maximum epochs of the final fit per task"),
    ("early_stop_patience", Some("50"), "epochs without improvement before stopping"),
    ("lr_patience", Some("30"), "epochs without improvement before decaying lr"),
    ("lr_factor", Some("0.5"), "learning-rate decay factor"),
    ("lambda_reg", Some("1.0"), "weight of the encoder and decoder regularizers"),
    ("latent_samples", Some("4"), "stored latent samples per component"),
    ("anchor_size", Some("500"), "encoded examples in the boosting target"),
    ("warmup_epochs", Some("10"), "epochs before the first component of a task"),
    ("val_fraction", Some("0.1"), "held-out fraction for early stopping"),
    ("elbo_mc", Some("1"), "reparametrized draws per example"),
    ("beta_stop", Some("0.02"), "stop a task after two weights below this"),
    ("live_prior", Some("false"), "use live encoder densities for current components"),
    ("component_steps", Some("200"), "Adam steps per component fit"),
    ("component_lr", Some("0.01"), "learning rate of component fits"),
    ("component_mc", Some("64"), "samples per component-fit step"),
    ("init_jitter", Some("0.05"), "noise added to the initial pseudo-input"),
    ("max_retries", Some("3"), "retries of a diverged component fit"),
    ("weight_steps", Some("100"), "Adam steps per weight fit"),
    ("weight_lr", Some("0.1"), "learning rate of weight fits"),
    ("weight_mc", Some("512"), "samples per side in weight fits"),
    ("prune_steps", Some("200"), "Adam steps when pruning"),
    ("prune_lr", Some("0.05"), "learning rate when pruning"),
    ("prune_mc", Some("256"), "samples per component when pruning"),
    ("prune_tau", Some("0.001"), "weight below which components are dropped"),
    ("eval", Some("true"), "evaluate after every task"),
    ("is_samples", Some("5000"), "importance samples per test example"),
    ("diversity_samples", Some("10000"), "prior samples for the diversity score"),
    ("diversity_eps", Some("0.5"), "count smoothing of the diversity score"),
    ("diversity_form", Some("bernoulli"), "bernoulli | multinomial"),
    ("grid_per_task", Some("8"), "images per task in sample grids"),
    ("probe_hidden", Some("128"), "hidden width of the probe classifier"),
    ("probe_epochs", Some("10"), "training epochs of the probe classifier"),
];

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetConfig {
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        classes_per_task: usize,
        binarize: Binarize,
        max_per_task: usize,
    },
    Synthetic {
        tasks: usize,
        per_task: usize,
        test_per_task: usize,
        dim: usize,
        separation: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub text: String,
    pub dataset: DatasetConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub tasks: usize,
    pub spec_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub run_eval: bool,
    pub probe: ProbeConfig,
}

impl RunConfig {
    pub fn spec(&self, input_dim: usize) -> MlpSpec {
        MlpSpec {
            input_dim,
            hidden: self.spec_hidden.clone(),
            latent_dim: self.latent_dim,
        }
    }
}

/// Parses `key=value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
        let k = k.trim().to_string();
        if !SCHEMA.iter().any(|(s, _, _)| *s == k) {
            return Err(Error::Config(format!("line {}: unknown key '{k}'", n + 1)));
        }
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key '{k}'", n + 1)));
        }
    }
    Ok(out)
}

struct Values {
    map: BTreeMap<String, String>,
}

impl Values {
    fn raw(&self, key: &str) -> Result<String> {
        if let Some(v) = self.map.get(key) {
            return Ok(v.clone());
        }
        let (_, default, _) = SCHEMA.iter().find(|(k, _, _)| *k == key).expect("schema key");
        default
            .map(str::to_string)
            .ok_or_else(|| Error::Config(format!("missing required key '{key}'")))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{v}'")))
    }

    fn positive<T: std::str::FromStr + PartialOrd + Default>(&self, key: &str) -> Result<T> {
        let v: T = self.get(key)?;
        if v <= T::default() {
            return Err(Error::Config(format!("key '{key}' must be positive")));
        }
        Ok(v)
    }

    fn bool(&self, key: &str) -> Result<bool> {
        match self.raw(key)?.as_str() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(Error::Config(format!("key '{key}': expected true/false, got '{v}'"))),
        }
    }

    /// An explicit path, or `$BOOVAE_DATA_DIR/<fallback>`.
    fn path(&self, key: &str, fallback: &str, data_dir: Option<&Path>) -> Result<PathBuf> {
        let v = self.raw(key)?;
        if !v.is_empty() {
            return Ok(PathBuf::from(v));
        }
        match data_dir {
            Some(d) => Ok(d.join(fallback)),
            None => Err(Error::Config(format!(
                "missing required key '{key}' (and {DATA_DIR_ENV} is not set)"
            ))),
        }
    }
}

pub fn parse_config(text: &str, data_dir: Option<&Path>) -> Result<RunConfig> {
    let v = Values { map: parse_pairs(text)? };
    let dataset = match v.raw("dataset")?.as_str() {
        "mnist" => DatasetConfig::Mnist {
            train_images: v.path("train_images", "train-images-idx3-ubyte", data_dir)?,
            train_labels: v.path("train_labels", "train-labels-idx1-ubyte", data_dir)?,
            test_images: v.path("test_images", "t10k-images-idx3-ubyte", data_dir)?,
            test_labels: v.path("test_labels", "t10k-labels-idx1-ubyte", data_dir)?,
            classes_per_task: v.positive("classes_per_task")?,
            binarize: match v.raw("binarize")?.as_str() {
                "none" => Binarize::None,
                "threshold" => Binarize::Threshold,
                o => return Err(Error::Config(format!("key 'binarize': unknown mode '{o}'"))),
            },
            max_per_task: v.get("max_per_task")?,
        },
        "synthetic" => DatasetConfig::Synthetic {
            tasks: v.positive("synthetic_tasks")?,
            per_task: v.positive("synthetic_per_task")?,
            test_per_task: v.positive("synthetic_test_per_task")?,
            dim: v.positive("synthetic_dim")?,
            separation: v.positive("synthetic_separation")?,
        },
        o => return Err(Error::Config(format!("key 'dataset': unknown dataset '{o}'"))),
    };
    let hidden = v
        .raw("hidden")?
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .ok()
                .filter(|&w| w > 0)
                .ok_or_else(|| Error::Config(format!("key 'hidden': bad width '{s}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    let boost = BoostConfig {
        component_steps: v.positive("component_steps")?,
        component_lr: v.positive("component_lr")?,
        component_mc: v.positive("component_mc")?,
        init_jitter: v.get("init_jitter")?,
        max_retries: v.get("max_retries")?,
        weight_steps: v.get("weight_steps")?,
        weight_lr: v.positive("weight_lr")?,
        weight_mc: v.positive("weight_mc")?,
        prune_steps: v.get("prune_steps")?,
        prune_lr: v.positive("prune_lr")?,
        prune_mc: v.positive("prune_mc")?,
        prune_tau: v.get("prune_tau")?,
    };
    let train = TrainConfig {
        components_per_task: v.get("components_per_task")?,
        batch_size: v.positive("batch_size")?,
        lr: v.positive("lr")?,
        max_epochs: v.positive("max_epochs")?,
        early_stop_patience: v.positive("early_stop_patience")?,
        lr_patience: v.positive("lr_patience")?,
        lr_factor: v.get("lr_factor")?,
        lambda_reg: v.get("lambda_reg")?,
        latent_samples: v.positive("latent_samples")?,
        anchor_size: v.positive("anchor_size")?,
        warmup_epochs: v.get("warmup_epochs")?,
        val_fraction: v.get("val_fraction")?,
        elbo_mc: v.positive("elbo_mc")?,
        beta_stop: v.get("beta_stop")?,
        live_prior: v.bool("live_prior")?,
        boost,
    };
    train.validate()?;
    let eval = EvalConfig {
        is_samples: v.positive("is_samples")?,
        diversity_samples: v.positive("diversity_samples")?,
        diversity_eps: v.get("diversity_eps")?,
        diversity_form: match v.raw("diversity_form")?.as_str() {
            "bernoulli" => DiversityForm::BernoulliPairs,
            "multinomial" => DiversityForm::Multinomial,
            o => return Err(Error::Config(format!("key 'diversity_form': unknown form '{o}'"))),
        },
        grid_per_task: v.positive("grid_per_task")?,
    };
    let probe = ProbeConfig {
        hidden: v.positive("probe_hidden")?,
        epochs: v.positive("probe_epochs")?,
        ..ProbeConfig::default()
    };
    Ok(RunConfig {
        text: text.to_string(),
        dataset,
        out_dir: PathBuf::from(v.raw("out_dir")?),
        seed: v.get("seed")?,
        tasks: v.get("tasks")?,
        spec_hidden: hidden,
        latent_dim: v.positive("latent_dim")?,
        train,
        eval,
        run_eval: v.bool("eval")?,
        probe,
    })
}

/// The schema as `key=default  # description` lines.
pub fn schema_text() -> String {
    SCHEMA
        .iter()
        .map(|(k, d, desc)| match d {
            Some(d) => format!("{k}={d}  # {desc}\n"),
            None => format!("{k}=  # required: {desc}\n"),
        })
        .collect()
}

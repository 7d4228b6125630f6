//! Run configuration: a TOML file with one table per section, overridden by
//! `--set section.key=value` pairs and dedicated flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use shiftadd_core::cost::Formats;
use shiftadd_core::data::{gen_shapes, load_dataset, split};
use shiftadd_core::model::BlockConfig;
use shiftadd_core::{
    CostTable, Dataset, LinearMode, ModelConfig, MoeConfig, QuantConfig, Stage2Plan, SyntheticSpec, TrainConfig,
};

use crate::CliError;

pub const SEED_ENV: &str = "SHIFTADD_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub reparam: ReparamSection,
    pub quant: QuantConfig,
    pub moe: MoeSection,
    pub cost: CostSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Unset means: `SHIFTADD_SEED`, else 0.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset container to load instead of generating one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub img: usize,
    pub channels: usize,
    pub classes: usize,
    pub samples_per_class: usize,
    pub seed: u64,
    pub noise_std: f32,
    pub random_colors: bool,
    /// Every `test_every`-th sample is held out.
    pub test_every: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            path: None,
            img: s.img,
            channels: s.channels,
            classes: s.classes,
            samples_per_class: s.samples_per_class,
            seed: s.seed,
            noise_std: s.noise_std,
            random_colors: s.random_colors,
            test_every: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: f32,
    pub patch: usize,
    /// Keep the last block dense through reparameterization.
    pub exempt_last: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            depth: 2,
            mlp_ratio: 4.0,
            patch: 4,
            exempt_last: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub momentum: f32,
    pub clip: f32,
    pub freeze: Vec<String>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch: t.batch,
            lr: t.lr,
            momentum: t.momentum,
            clip: t.clip,
            freeze: t.freeze,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReparamSection {
    /// Finetuning steps after each conversion.
    pub steps: usize,
    pub lr: f32,
    pub mlp_mode: LinearMode,
    pub attn_linear_mode: LinearMode,
}

impl Default for ReparamSection {
    fn default() -> Self {
        let plan = Stage2Plan::default();
        Self {
            steps: 500,
            lr: 0.025,
            mlp_mode: plan.mlp_mode,
            attn_linear_mode: plan.attn_linear_mode,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatSource {
    /// Use `moe.lat` as given.
    Fixed,
    /// Per-token expert energy from the cost table.
    Cost,
    /// Median wall time of each expert on a probe batch. Not reproducible
    /// across machines or runs.
    Measured,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoeSection {
    pub sigma: f64,
    pub lambda: f64,
    pub lat: Vec<f64>,
    pub lat_source: LatSource,
}

impl Default for MoeSection {
    fn default() -> Self {
        let m = MoeConfig::default();
        Self {
            sigma: m.sigma,
            lambda: m.lambda,
            lat: m.lat,
            lat_source: LatSource::Fixed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSection {
    /// JSON cost table; the built-in 45nm table when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub table: Option<PathBuf>,
    pub formats: Formats,
}

/// Flag-level overrides shared by the commands.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub steps: Option<usize>,
    pub lambda: Option<f64>,
    pub set: Vec<String>,
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `overrides` and
    /// resolves the seed.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut doc: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                text.parse()
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for kv in &overrides.set {
            apply_set(&mut doc, kv)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {e}")))?;
        if let Some(s) = overrides.seed {
            cfg.run.seed = Some(s);
        }
        if cfg.run.seed.is_none() {
            cfg.run.seed = Some(match std::env::var(SEED_ENV) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
                Err(_) => 0,
            });
        }
        if let Some(o) = &overrides.out {
            cfg.run.out_dir = o.clone();
        }
        if let Some(s) = overrides.steps {
            cfg.train.steps = s;
            cfg.reparam.steps = s;
        }
        if let Some(l) = overrides.lambda {
            cfg.moe.lambda = l;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seed(&self) -> u64 {
        self.run.seed.unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        if self.data.test_every < 2 {
            return bad(format!("data.test_every must be ≥ 2, got {}", self.data.test_every));
        }
        if self.model.depth == 0 || self.model.dim == 0 || self.model.heads == 0 {
            return bad("model.depth, model.dim and model.heads must be positive".into());
        }
        if !(self.moe.sigma > 0.0) || !(self.moe.lambda >= 0.0) {
            return bad(format!(
                "moe.sigma must be > 0 and moe.lambda ≥ 0 (got {}, {})",
                self.moe.sigma, self.moe.lambda
            ));
        }
        if self.moe.lat.len() != 2 || self.moe.lat.iter().any(|&l| !(l > 0.0)) {
            return bad(format!("moe.lat needs two positive latencies, got {:?}", self.moe.lat));
        }
        self.synthetic().validate()?;
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.finetune_config().validate()?;
        Ok(())
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        let d = &self.data;
        SyntheticSpec {
            img: d.img,
            channels: d.channels,
            classes: d.classes,
            samples_per_class: d.samples_per_class,
            seed: d.seed,
            noise_std: d.noise_std,
            random_colors: d.random_colors,
        }
    }

    pub fn moe_config(&self) -> MoeConfig {
        MoeConfig {
            sigma: self.moe.sigma,
            lambda: self.moe.lambda,
            lat: self.moe.lat.clone(),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        let mut blocks = vec![
            BlockConfig {
                mlp_ratio: m.mlp_ratio,
                ..BlockConfig::dense(m.dim, m.heads)
            };
            m.depth
        ];
        if m.exempt_last {
            if let Some(b) = blocks.last_mut() {
                b.exempt = true;
            }
        }
        ModelConfig {
            blocks,
            patch: m.patch,
            img: self.data.img,
            channels: self.data.channels,
            classes: self.data.classes,
            seed: self.seed(),
            quant: self.quant,
            moe: self.moe_config(),
            stage: 0,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            batch: t.batch,
            lr: t.lr,
            momentum: t.momentum,
            clip: t.clip,
            seed: self.seed(),
            freeze: t.freeze.clone(),
        }
    }

    /// Training settings for the finetuning that follows a conversion.
    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.reparam.steps,
            lr: self.reparam.lr,
            ..self.train_config()
        }
    }

    pub fn plan(&self) -> Stage2Plan {
        Stage2Plan {
            mlp_mode: self.reparam.mlp_mode,
            attn_linear_mode: self.reparam.attn_linear_mode,
        }
    }

    pub fn cost_table(&self) -> Result<CostTable, CliError> {
        Ok(match &self.cost.table {
            Some(p) => CostTable::load(p)?,
            None => CostTable::cmos45(),
        })
    }

    /// Loads or generates the dataset and splits it into (train, test).
    pub fn datasets(&self) -> Result<(Dataset, Dataset), CliError> {
        let ds = match &self.data.path {
            Some(p) => load_dataset(p)?,
            None => gen_shapes(&self.synthetic())?,
        };
        Ok(split(&ds, self.data.test_every)?)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("cannot serialize config: {e}")))
    }
}

/// Applies one `section.key=value` override. The value is parsed as a TOML
/// value and falls back to a plain string.
fn apply_set(doc: &mut toml::Table, kv: &str) -> Result<(), CliError> {
    let (path, raw) = kv
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects section.key=value, got {kv:?}")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Usage(format!("bad key path {path:?}")));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let (last, parents) = keys.split_last().expect("non-empty");
    let mut table = doc;
    for k in parents {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("{k} in {path:?} is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

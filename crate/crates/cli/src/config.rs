//! Run configuration: a TOML file with dotted sections, overridable from
//! the command line. Unknown keys are rejected so typos fail loudly, and
//! the resolved configuration is written next to every artifact a command
//! produces.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sshunet_core::data::phantom::{blobs_spec, generate_phantom, slice_ambiguous_spec};
use sshunet_core::data::nifti::{attach_labels, read_nifti1};
use sshunet_core::data::preprocess::{hu_window, AugmentCfg};
use sshunet_core::data::VolumeRecord;
use sshunet_core::layers::{ShiftPlacement, ShiftSpec};
use sshunet_core::network::{UNetConfig, Variant};
use sshunet_core::trainer::{OptimConfig, OptimKind, TrainConfig};
use sshunet_core::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory; the `--out` flag takes precedence.
    pub out: String,
    pub network: NetworkCfg,
    pub data: DataCfg,
    pub train: TrainCfg,
    pub optim: OptimCfg,
    pub eval: EvalCfg,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: "runs/out".to_string(),
            network: NetworkCfg::default(),
            data: DataCfg::default(),
            train: TrainCfg::default(),
            optim: OptimCfg::default(),
            eval: EvalCfg::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkCfg {
    pub variant: String,
    pub in_channels: usize,
    pub num_classes: usize,
    pub stage_widths: Vec<usize>,
    /// Rational like "1/4" or decimal like "0.25".
    pub shift_fraction: String,
    /// "pre_conv" or "between_convs".
    pub shift_placement: String,
}

impl Default for NetworkCfg {
    fn default() -> Self {
        NetworkCfg {
            variant: "shift2d".to_string(),
            in_channels: 1,
            num_classes: 3,
            stage_widths: vec![4, 8],
            shift_fraction: "1/4".to_string(),
            shift_placement: "pre_conv".to_string(),
        }
    }
}

impl NetworkCfg {
    pub fn to_unet(&self) -> Result<UNetConfig> {
        Ok(UNetConfig {
            variant: self.variant.parse()?,
            in_channels: self.in_channels,
            num_classes: self.num_classes,
            stage_widths: self.stage_widths.clone(),
            shift_fraction: ShiftSpec::parse(&self.shift_fraction)?,
            shift_placement: ShiftPlacement::parse(&self.shift_placement)?,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataCfg {
    /// Synthetic volume family: "blobs" or "slice_ambiguous".
    pub phantom: String,
    /// Cube edge of each generated volume.
    pub extent: usize,
    /// One training volume is generated per seed; same for validation.
    pub train_seeds: Vec<u64>,
    pub val_seeds: Vec<u64>,
    /// Optional intensity window [lo, hi] mapped onto [0, 1]; applied to
    /// file-based cases only (phantoms are generated normalized).
    pub window: Option<[f32; 2]>,
    /// File-based cases appended to the generated ones.
    pub cases: Vec<CaseCfg>,
}

impl Default for DataCfg {
    fn default() -> Self {
        DataCfg {
            phantom: "blobs".to_string(),
            extent: 12,
            train_seeds: vec![300, 301, 302, 303],
            val_seeds: vec![310],
            window: None,
            cases: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseCfg {
    /// NIfTI intensity volume.
    pub image: String,
    /// NIfTI label volume with matching dimensions.
    pub labels: String,
    /// "train" or "val".
    pub split: String,
}

impl DataCfg {
    fn spec(&self) -> Result<sshunet_core::data::phantom::PhantomSpec> {
        match self.phantom.as_str() {
            "blobs" => blobs_spec(self.extent),
            "slice_ambiguous" => slice_ambiguous_spec(self.extent),
            other => Err(Error::Config(format!(
                "unknown phantom `{}` (blobs, slice_ambiguous)",
                other
            ))),
        }
    }

    /// Generates (train, val) volume lists: phantoms per seed plus any
    /// file-based cases routed by their split.
    pub fn load_volumes(&self) -> Result<(Vec<VolumeRecord>, Vec<VolumeRecord>)> {
        let spec = self.spec()?;
        let gen = |seeds: &[u64]| -> Result<Vec<VolumeRecord>> {
            seeds
                .iter()
                .map(|&s| generate_phantom(&format!("{}{}", self.phantom, s), &spec, s))
                .collect()
        };
        let mut train = gen(&self.train_seeds)?;
        let mut val = gen(&self.val_seeds)?;
        for case in &self.cases {
            let mut rec = read_nifti1(Path::new(&case.image))?;
            attach_labels(&mut rec, Path::new(&case.labels))?;
            if let Some([lo, hi]) = self.window {
                hu_window(&mut rec.intensity, lo, hi)?;
            }
            match case.split.as_str() {
                "train" => train.push(rec),
                "val" => val.push(rec),
                other => {
                    return Err(Error::Config(format!(
                        "case split `{}` must be train or val",
                        other
                    )))
                }
            }
        }
        Ok((train, val))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCfg {
    pub steps: usize,
    pub batch_size: usize,
    pub patch_extent: [usize; 3],
    /// 0 validates only after the last step.
    pub val_every: usize,
    pub fg_bias: f64,
    pub augment: bool,
    pub infer_overlap: f64,
}

impl Default for TrainCfg {
    fn default() -> Self {
        TrainCfg {
            steps: 200,
            batch_size: 2,
            patch_extent: [12, 12, 12],
            val_every: 0,
            fg_bias: 0.5,
            augment: false,
            infer_overlap: 0.25,
        }
    }
}

impl TrainCfg {
    pub fn to_train(&self, optim: &OptimCfg, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            patch_extent: self.patch_extent,
            val_every: self.val_every,
            fg_bias: self.fg_bias,
            augment: self.augment.then(AugmentCfg::default),
            optim: optim.to_optim()?,
            infer_overlap: self.infer_overlap,
            seed,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimCfg {
    /// "adamw" or "sgd".
    pub kind: String,
    pub lr: f64,
    pub warmup_steps: usize,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimCfg {
    fn default() -> Self {
        let base = OptimConfig::adamw();
        OptimCfg {
            kind: "adamw".to_string(),
            lr: 3e-3,
            warmup_steps: 20,
            momentum: base.momentum,
            beta1: base.beta1,
            beta2: base.beta2,
            eps: base.eps,
            weight_decay: base.weight_decay,
        }
    }
}

impl OptimCfg {
    pub fn to_optim(&self) -> Result<OptimConfig> {
        let kind = match self.kind.as_str() {
            "adamw" => OptimKind::AdamW,
            "sgd" => OptimKind::Sgd,
            other => return Err(Error::Config(format!("unknown optimizer `{}` (adamw, sgd)", other))),
        };
        Ok(OptimConfig {
            kind,
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            momentum: self.momentum,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalCfg {
    /// Surface tolerance in millimeters for the normalized surface Dice.
    pub tau_mm: f64,
}

impl Default for EvalCfg {
    fn default() -> Self {
        EvalCfg { tau_mm: 1.0 }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Loads the config file (if any), applies `key.path=value` overrides,
/// then the `--seed`/`--out` flags, and deserializes strictly.
pub fn load(
    path: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<RunConfig> {
    let mut value: toml::Value = match path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            text.parse().map_err(config_err)?
        }
        None => toml::Value::Table(toml::map::Map::new()),
    };
    for set in sets {
        apply_set(&mut value, set)?;
    }
    let mut cfg: RunConfig = value.try_into().map_err(config_err)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out = o.display().to_string();
    }
    Ok(cfg)
}

/// Applies one `a.b.c=value` override. The value is parsed as a TOML
/// literal (numbers, booleans, arrays, quoted strings) and falls back to
/// a plain string, so `--set network.variant=full3d` needs no quoting.
fn apply_set(root: &mut toml::Value, set: &str) -> Result<()> {
    let (key, raw) = set
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{}` is not key=value", set)))?;
    let parsed: toml::Value = match format!("v = {}", raw).parse::<toml::Value>() {
        Ok(toml::Value::Table(mut t)) => t.remove("v").unwrap(),
        _ => toml::Value::String(raw.to_string()),
    };
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{}` descends into a non-table", key)))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    Err(Error::Config(format!("override `{}` has an empty key", set)))
}

/// Serializes the configuration a command actually ran with.
pub fn resolved_toml(cfg: &RunConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(config_err)
}

/// Variant of `Variant::from_str` for comma lists, preserving order.
pub fn parse_variants(names: &[String]) -> Result<Vec<Variant>> {
    names.iter().map(|n| n.parse()).collect()
}

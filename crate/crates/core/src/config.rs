//! Experiment description shared by every CLI command.
//!
//! The JSON schema is strict: unknown keys are rejected. Keys may be
//! overridden with dotted paths, e.g. `optimizer.lr=1e-4`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{AugmentConfig, SplitCounts};
use crate::error::{Error, Result, Violation};
use crate::model::{HeadKind, HeadSpec};
use crate::vit::VitConfig;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "VITASD_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `tiny`, `mini`, `s`, `b`, `l`, or `custom` (all dims given explicitly).
    pub preset: String,
    pub image_size: Option<usize>,
    pub patch_size: Option<usize>,
    pub dim: Option<usize>,
    pub depth: Option<usize>,
    pub heads: Option<usize>,
    pub mlp_ratio: Option<f64>,
    pub num_classes: Option<usize>,
    /// Encoder checkpoint (from `pretrain`) to initialize the backbone from.
    pub pretrained: Option<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            preset: "tiny".into(),
            image_size: None,
            patch_size: None,
            dim: None,
            depth: None,
            heads: None,
            mlp_ratio: None,
            num_classes: None,
            pretrained: None,
        }
    }
}

impl ModelConfig {
    pub fn from_preset(name: &str) -> Self {
        ModelConfig {
            preset: name.into(),
            ..Default::default()
        }
    }

    /// Preset dimensions with explicit fields layered on top.
    pub fn resolve(&self) -> std::result::Result<VitConfig, Violation> {
        let base = if self.preset == "custom" {
            let missing: Vec<&str> = [
                ("image_size", self.image_size.is_none()),
                ("patch_size", self.patch_size.is_none()),
                ("dim", self.dim.is_none()),
                ("depth", self.depth.is_none()),
                ("heads", self.heads.is_none()),
            ]
            .into_iter()
            .filter(|(_, m)| *m)
            .map(|(n, _)| n)
            .collect();
            if !missing.is_empty() {
                let fields: Vec<String> = missing.iter().map(|m| format!("model.{m}")).collect();
                return Err(Violation {
                    fields,
                    message: "custom preset requires every dimension".into(),
                });
            }
            VitConfig::tiny()
        } else {
            VitConfig::preset(&self.preset).ok_or_else(|| {
                Violation::new(
                    &["model.preset"],
                    format!("unknown preset {:?} (tiny, mini, s, b, l, custom)", self.preset),
                )
            })?
        };
        Ok(VitConfig {
            image_size: self.image_size.unwrap_or(base.image_size),
            patch_size: self.patch_size.unwrap_or(base.patch_size),
            dim: self.dim.unwrap_or(base.dim),
            depth: self.depth.unwrap_or(base.depth),
            heads: self.heads.unwrap_or(base.heads),
            mlp_ratio: self.mlp_ratio.unwrap_or(base.mlp_ratio),
            num_classes: self.num_classes.unwrap_or(base.num_classes),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub kind: HeadKind,
    /// RFF feature count `M`.
    pub features: usize,
    /// RFF length scale; `null` means `√dim`.
    pub length_scale: Option<f64>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            kind: HeadKind::Gp,
            features: 1024,
            length_scale: None,
        }
    }
}

impl HeadConfig {
    pub fn spec(&self, dim: usize) -> HeadSpec {
        HeadSpec {
            kind: self.kind,
            features: self.features,
            length_scale: self.length_scale.unwrap_or((dim as f64).sqrt()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    /// Stop after this many optimizer steps; 0 means no cap.
    pub max_steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 30,
            batch_size: 32,
            warmup_epochs: 3,
            max_steps: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectSide {
    /// Project student attention onto the teacher head count.
    Student,
    /// Project teacher attention onto the student head count.
    Teacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdConfig {
    pub alpha: f64,
    pub aligned_layers: Vec<usize>,
    pub teacher_checkpoint: Option<String>,
    /// Add the student's supervised cross-entropy to the distillation loss.
    pub include_ce: bool,
    pub project_side: ProjectSide,
    /// One projection shared by all aligned layers instead of one per layer.
    pub shared_projection: bool,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            alpha: 5e-5,
            aligned_layers: vec![0, 1],
            teacher_checkpoint: None,
            include_ce: true,
            project_side: ProjectSide::Student,
            shared_projection: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaeConfig {
    pub mask_ratio: f64,
    pub steps: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    /// `null` means `dim / 2`.
    pub decoder_dim: Option<usize>,
}

impl Default for MaeConfig {
    fn default() -> Self {
        MaeConfig {
            mask_ratio: 0.75,
            steps: 300,
            decoder_depth: 2,
            decoder_heads: 2,
            decoder_dim: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: String,
    pub manifest: Option<String>,
    /// Synthetic corpus sizes written by `gen-data`.
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: "data".into(),
            manifest: None,
            train: 400,
            val: 100,
            test: 100,
        }
    }
}

impl DataConfig {
    pub fn counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.train,
            val: self.val,
            test: self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub head: HeadConfig,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentConfig,
    pub kd: KdConfig,
    pub mae: MaeConfig,
    pub data: DataConfig,
    pub seed: u64,
    /// Output directory; `null` means `$VITASD_OUTPUT_ROOT` or `runs`.
    pub output: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            head: HeadConfig::default(),
            optimizer: OptimizerConfig::default(),
            augment: AugmentConfig::default(),
            kd: KdConfig::default(),
            mae: MaeConfig::default(),
            data: DataConfig::default(),
            seed: 7,
            output: None,
        }
    }
}

/// `(dotted key, type)` for every config key, in schema order.
pub const KEY_TYPES: &[(&str, &str)] = &[
    ("model.preset", "string"),
    ("model.image_size", "integer|null"),
    ("model.patch_size", "integer|null"),
    ("model.dim", "integer|null"),
    ("model.depth", "integer|null"),
    ("model.heads", "integer|null"),
    ("model.mlp_ratio", "number|null"),
    ("model.num_classes", "integer|null"),
    ("model.pretrained", "path|null"),
    ("head.kind", "\"linear\"|\"gp\""),
    ("head.features", "integer"),
    ("head.length_scale", "number|null"),
    ("optimizer.lr", "number"),
    ("optimizer.weight_decay", "number"),
    ("optimizer.beta1", "number"),
    ("optimizer.beta2", "number"),
    ("optimizer.eps", "number"),
    ("optimizer.epochs", "integer"),
    ("optimizer.batch_size", "integer"),
    ("optimizer.warmup_epochs", "integer"),
    ("optimizer.max_steps", "integer"),
    ("augment.enabled", "bool"),
    ("augment.grayscale_p", "number"),
    ("augment.solarize_p", "number"),
    ("augment.blur_p", "number"),
    ("augment.solarize_threshold", "number"),
    ("augment.blur_sigma_min", "number"),
    ("augment.blur_sigma_max", "number"),
    ("augment.mix_p", "number"),
    ("augment.mixup_alpha", "number"),
    ("augment.cutmix_alpha", "number"),
    ("kd.alpha", "number"),
    ("kd.aligned_layers", "integer[]"),
    ("kd.teacher_checkpoint", "path|null"),
    ("kd.include_ce", "bool"),
    ("kd.project_side", "\"student\"|\"teacher\""),
    ("kd.shared_projection", "bool"),
    ("mae.mask_ratio", "number"),
    ("mae.steps", "integer"),
    ("mae.decoder_depth", "integer"),
    ("mae.decoder_heads", "integer"),
    ("mae.decoder_dim", "integer|null"),
    ("data.root", "path"),
    ("data.manifest", "path|null"),
    ("data.train", "integer"),
    ("data.val", "integer"),
    ("data.test", "integer"),
    ("seed", "integer"),
    ("output", "path|null"),
];

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

/// Every config key with its type and default, one per line.
pub fn describe_keys() -> String {
    let defaults = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    let mut flat = Vec::new();
    flatten("", &defaults, &mut flat);
    let mut out = String::new();
    for (key, ty) in KEY_TYPES {
        let default = flat
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.to_string())
            .unwrap_or_else(|| "?".into());
        out.push_str(&format!("  {key:<28} {ty:<22} default {default}\n"));
    }
    out
}

/// Merge `patch` into `base`, keeping keys absent from `base` so strict
/// deserialization can reject them.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> std::result::Result<(), Violation> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Violation::new(&[key], format!("{key} is not a config key")))?;
        if !obj.contains_key(*part) {
            return Err(Violation::new(&[key], format!("{key} is not a config key")));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).unwrap();
    }
    Ok(())
}

/// Parse `key=value`; the value is read as JSON, falling back to a string.
pub fn parse_override(spec: &str) -> std::result::Result<(String, Value), Violation> {
    let (k, v) = spec
        .split_once('=')
        .ok_or_else(|| Violation::new(&[spec], format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl RunConfig {
    /// Build from optional JSON text plus `key=value` overrides, then validate.
    pub fn from_sources(json: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(text) = json {
            let file: Value = serde_json::from_str(text).map_err(|e| {
                Error::Validation(vec![Violation::new(&["<config>"], format!("invalid JSON: {e}"))])
            })?;
            merge(&mut value, file);
        }
        let mut violations = Vec::new();
        for spec in overrides {
            match parse_override(spec).and_then(|(k, v)| set_dotted(&mut value, &k, v)) {
                Ok(()) => {}
                Err(v) => violations.push(v),
            }
        }
        if !violations.is_empty() {
            return Err(Error::Validation(violations));
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| {
            Error::Validation(vec![Violation::new(&["<config>"], e.to_string())])
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::from_sources(text.as_deref(), overrides)
    }

    pub fn vit_config(&self) -> Result<VitConfig> {
        self.model
            .resolve()
            .map_err(|v| Error::Validation(vec![v]))
    }

    pub fn head_spec(&self) -> Result<HeadSpec> {
        Ok(self.head.spec(self.vit_config()?.dim))
    }

    pub fn output_dir(&self) -> PathBuf {
        match &self.output {
            Some(o) => PathBuf::from(o),
            None => std::env::var_os(OUTPUT_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs")),
        }
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        match self.model.resolve() {
            Ok(vit) => {
                out.extend(vit.violations("model."));
                for &l in &self.kd.aligned_layers {
                    if l >= vit.depth {
                        out.push(Violation::new(
                            &["kd.aligned_layers", "model.depth"],
                            format!("aligned layer {l} does not exist in a depth-{} student", vit.depth),
                        ));
                    }
                }
                if let Some(dd) = self.mae.decoder_dim {
                    if dd == 0 || self.mae.decoder_heads == 0 || dd % self.mae.decoder_heads != 0 {
                        out.push(Violation::new(
                            &["mae.decoder_dim", "mae.decoder_heads"],
                            "decoder_dim must be a positive multiple of decoder_heads",
                        ));
                    }
                } else if self.mae.decoder_heads == 0
                    || (vit.dim / 2) % self.mae.decoder_heads.max(1) != 0
                    || vit.dim / 2 == 0
                {
                    out.push(Violation::new(
                        &["mae.decoder_heads", "model.dim"],
                        "dim / 2 must be a positive multiple of decoder_heads",
                    ));
                }
            }
            Err(v) => out.push(v),
        }
        if self.head.features == 0 {
            out.push(Violation::new(&["head.features"], "features must be at least 1"));
        }
        if let Some(l) = self.head.length_scale {
            if !(l > 0.0 && l.is_finite()) {
                out.push(Violation::new(&["head.length_scale"], "length_scale must be positive"));
            }
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            out.push(Violation::new(&["optimizer.lr"], "lr must be a finite nonnegative number"));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            out.push(Violation::new(&["optimizer.weight_decay"], "weight_decay must be nonnegative"));
        }
        for (name, b) in [("optimizer.beta1", o.beta1), ("optimizer.beta2", o.beta2)] {
            if !(0.0..1.0).contains(&b) {
                out.push(Violation::new(&[name], format!("{name} = {b} must lie in [0, 1)")));
            }
        }
        if !(o.eps > 0.0) {
            out.push(Violation::new(&["optimizer.eps"], "eps must be positive"));
        }
        if o.epochs == 0 {
            out.push(Violation::new(&["optimizer.epochs"], "epochs must be at least 1"));
        }
        if o.batch_size == 0 {
            out.push(Violation::new(&["optimizer.batch_size"], "batch_size must be at least 1"));
        }
        if o.warmup_epochs > o.epochs {
            out.push(Violation::new(
                &["optimizer.warmup_epochs", "optimizer.epochs"],
                "warmup_epochs cannot exceed epochs",
            ));
        }
        out.extend(self.augment.violations("augment."));
        if !(self.kd.alpha >= 0.0 && self.kd.alpha.is_finite()) {
            out.push(Violation::new(&["kd.alpha"], "alpha must be nonnegative"));
        }
        if !(self.mae.mask_ratio > 0.0 && self.mae.mask_ratio < 1.0) {
            out.push(Violation::new(&["mae.mask_ratio"], "mask_ratio must lie in (0, 1)"));
        }
        if self.mae.steps == 0 {
            out.push(Violation::new(&["mae.steps"], "steps must be at least 1"));
        }
        if self.mae.decoder_depth == 0 {
            out.push(Violation::new(&["mae.decoder_depth"], "decoder_depth must be at least 1"));
        }
        for (name, n) in [("data.train", self.data.train), ("data.val", self.data.val), ("data.test", self.data.test)] {
            if n < 2 {
                out.push(Violation::new(&[name], "each split needs at least 2 items"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }
}

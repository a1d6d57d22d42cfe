//! Configuration resolution: defaults, then a JSON file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use svfreg::training::TrainConfig;
use svfreg::volume::Dims;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Output directory of every command.
    pub out: PathBuf,
    /// Dataset directory written by `synth` (read by `eval`).
    pub dataset: Option<PathBuf>,
    /// Checkpoint directory (read by `register` and `eval`).
    pub checkpoint: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            dataset: None,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub train: TrainConfig,
    /// Pairs written by `synth`.
    pub count: usize,
    pub paths: PathsConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            count: 10,
            paths: PathsConfig::default(),
        }
    }
}

impl CliConfig {
    pub fn problems(&self) -> Vec<String> {
        self.train.problems()
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Flags shared by every command; each one overrides a config key.
#[derive(Args, Clone, Debug, Default)]
pub struct GlobalArgs {
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed (`train.seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Single-threaded linear algebra for byte-identical reruns.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory (`paths.out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

/// Config-key flags; names mirror the keys in kebab-case.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigFlags {
    /// Volume size such as `32x32x16` (`train.network.dims`).
    #[arg(long)]
    pub dims: Option<Dims>,
    /// Pairs written by `synth` (`count`).
    #[arg(long)]
    pub count: Option<usize>,
    /// Pairs per optimizer step (`train.batch_size`).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam step size (`train.learning_rate`).
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Optimizer steps (`train.max_steps`).
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Synthetic training pairs (`train.train_pairs`).
    #[arg(long)]
    pub train_pairs: Option<usize>,
    /// Held-out evaluation pairs (`train.eval_pairs`).
    #[arg(long)]
    pub eval_pairs: Option<usize>,
    /// Add the segmentation loss terms (`train.use_masks`).
    #[arg(long)]
    pub use_masks: Option<bool>,
    /// Checkpoint interval in steps (`train.checkpoint_every`).
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// `train.network.flags.use_sam`.
    #[arg(long)]
    pub use_sam: Option<bool>,
    /// `train.network.flags.use_cam`.
    #[arg(long)]
    pub use_cam: Option<bool>,
    /// `train.network.flags.use_gfm`.
    #[arg(long)]
    pub use_gfm: Option<bool>,
    /// Attention heads (`train.network.heads`).
    #[arg(long)]
    pub heads: Option<usize>,
    /// Token width k (`train.network.token_dim`).
    #[arg(long)]
    pub token_dim: Option<usize>,
    /// Layers per transformer module (`train.network.tem_layers`).
    #[arg(long)]
    pub tem_layers: Option<usize>,
    /// Transformer MLP width (`train.network.mlp_hidden`).
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    /// Scaling-and-squaring steps (`train.network.integration_steps`).
    #[arg(long)]
    pub integration_steps: Option<u32>,
    /// LNCC window side, odd (`train.loss.window`).
    #[arg(long)]
    pub window: Option<usize>,
    /// Weight of the affine similarity term (`train.loss.lambda1`).
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Weight of the deformable similarity term (`train.loss.lambda2`).
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Weight of the smoothness term (`train.loss.lambda3`).
    #[arg(long)]
    pub lambda3: Option<f64>,
    /// Weight of the affine segmentation term (`train.loss.lambda4`).
    #[arg(long)]
    pub lambda4: Option<f64>,
    /// Weight of the deformable segmentation term (`train.loss.lambda5`).
    #[arg(long)]
    pub lambda5: Option<f64>,
    /// Largest synthetic velocity component in voxels (`train.synth.deform_amplitude`).
    #[arg(long)]
    pub deform_amplitude: Option<f64>,
    /// Dataset directory (`paths.dataset`).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Checkpoint directory (`paths.checkpoint`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Any other key as `dotted.path=value`; the value is JSON when it
    /// parses as JSON and a string otherwise. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

fn put<T: Serialize>(out: &mut Vec<(String, Value)>, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        out.push((key.to_string(), serde_json::to_value(v).expect("flag value serializes")));
    }
}

impl ConfigFlags {
    /// `(dotted key, value)` pairs in application order.
    pub fn overrides(&self) -> (Vec<(String, Value)>, Vec<String>) {
        let mut o = Vec::new();
        let mut bad = Vec::new();
        for s in &self.set {
            match s.split_once('=') {
                Some((k, v)) if !k.is_empty() => {
                    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
                    o.push((k.to_string(), value));
                }
                _ => bad.push(format!("--set expects KEY=VALUE, got `{s}`")),
            }
        }
        put(&mut o, "train.network.dims", &self.dims);
        put(&mut o, "count", &self.count);
        put(&mut o, "train.batch_size", &self.batch_size);
        put(&mut o, "train.learning_rate", &self.learning_rate);
        put(&mut o, "train.max_steps", &self.max_steps);
        put(&mut o, "train.train_pairs", &self.train_pairs);
        put(&mut o, "train.eval_pairs", &self.eval_pairs);
        put(&mut o, "train.use_masks", &self.use_masks);
        put(&mut o, "train.checkpoint_every", &self.checkpoint_every);
        put(&mut o, "train.network.flags.use_sam", &self.use_sam);
        put(&mut o, "train.network.flags.use_cam", &self.use_cam);
        put(&mut o, "train.network.flags.use_gfm", &self.use_gfm);
        put(&mut o, "train.network.heads", &self.heads);
        put(&mut o, "train.network.token_dim", &self.token_dim);
        put(&mut o, "train.network.tem_layers", &self.tem_layers);
        put(&mut o, "train.network.mlp_hidden", &self.mlp_hidden);
        put(&mut o, "train.network.integration_steps", &self.integration_steps);
        put(&mut o, "train.loss.window", &self.window);
        put(&mut o, "train.loss.lambda1", &self.lambda1);
        put(&mut o, "train.loss.lambda2", &self.lambda2);
        put(&mut o, "train.loss.lambda3", &self.lambda3);
        put(&mut o, "train.loss.lambda4", &self.lambda4);
        put(&mut o, "train.loss.lambda5", &self.lambda5);
        put(&mut o, "train.synth.deform_amplitude", &self.deform_amplitude);
        put(&mut o, "paths.dataset", &self.dataset);
        put(&mut o, "paths.checkpoint", &self.checkpoint);
        (o, bad)
    }
}

/// Recursively merges `top` into `base`; objects merge key by key and any
/// other value replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> std::result::Result<(), String> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = cur else {
            return Err(format!("`{key}`: `{}` is not a table", parts[..i].join(".")));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cur = map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::invalid(vec![format!("{}: {e}", path.display())]))
}

/// Resolves the effective configuration with flag > file > default
/// precedence. Every problem found is reported at once.
pub fn resolve(global: &GlobalArgs, flags: &ConfigFlags) -> Result<CliConfig> {
    let mut value = CliConfig::default().to_value();
    if let Some(path) = &global.config {
        merge(&mut value, read_json(path)?);
    }
    let (mut overrides, mut problems) = flags.overrides();
    if let Some(seed) = global.seed {
        overrides.push(("train.seed".into(), seed.into()));
    }
    if let Some(out) = &global.out {
        overrides.push(("paths.out".into(), Value::String(out.display().to_string())));
    }
    for (k, v) in overrides {
        if let Err(e) = set_path(&mut value, &k, v) {
            problems.push(e);
        }
    }
    let cfg = match serde_json::from_value::<CliConfig>(value) {
        Ok(c) => c,
        Err(e) => {
            problems.push(e.to_string());
            return Err(CliError::invalid(problems));
        }
    };
    problems.extend(cfg.problems());
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(CliError::invalid(problems))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"train": {"max_steps": 5, "batch_size": 3}, "count": 2}"#).unwrap();
        let global = GlobalArgs {
            config: Some(path),
            seed: Some(11),
            ..Default::default()
        };
        let flags = ConfigFlags {
            max_steps: Some(9),
            ..Default::default()
        };
        let cfg = resolve(&global, &flags).unwrap();
        assert_eq!(cfg.train.max_steps, 9);
        assert_eq!(cfg.train.batch_size, 3);
        assert_eq!(cfg.train.seed, 11);
        assert_eq!(cfg.count, 2);
        assert_eq!(cfg.train.learning_rate, TrainConfig::default().learning_rate);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let flags = ConfigFlags {
            set: vec!["train.no_such_key=1".into()],
            ..Default::default()
        };
        let err = resolve(&GlobalArgs::default(), &flags).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("no_such_key"), "{err}");
    }

    #[test]
    fn all_problems_listed_together() {
        let flags = ConfigFlags {
            batch_size: Some(0),
            learning_rate: Some(-1.0),
            heads: Some(5),
            ..Default::default()
        };
        let CliError::Validation(p) = resolve(&GlobalArgs::default(), &flags).unwrap_err() else {
            panic!("expected a validation error")
        };
        assert!(p.0.len() >= 3, "{:?}", p.0);
    }

    #[test]
    fn set_accepts_json_and_strings() {
        let flags = ConfigFlags {
            set: vec![
                "train.network.attention_scale=model".into(),
                "train.synth.scale_range=[0.95,1.05]".into(),
            ],
            ..Default::default()
        };
        let cfg = resolve(&GlobalArgs::default(), &flags).unwrap();
        assert_eq!(cfg.train.synth.scale_range, [0.95, 1.05]);
        assert_eq!(cfg.train.network.attention_scale, svfreg::networks::AttentionScale::Model);
    }

    #[test]
    fn default_round_trips() {
        let c = CliConfig::default();
        let back: CliConfig = serde_json::from_value(c.to_value()).unwrap();
        assert_eq!(back, c);
    }
}

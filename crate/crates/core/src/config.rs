//! Run configuration merged from defaults, a flat key=value file with
//! section prefixes, and command-line overrides. The resolved form is
//! serialized into every run directory so results stay reproducible.

use std::collections::BTreeMap;
use std::path::Path;

use crate::backbone::{BackboneVariant, TaskMode};
use crate::data::preprocess::PreprocessConfig;
use crate::error::{Error, Result};
use crate::heads::BetaPooling;
use crate::htpp::Aggregation;
use crate::init::fnv1a64;
use crate::model::{AblationFlags, ModelConfig};
use crate::train::{TpLossMode, TrainConfig};

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub preprocess: PreprocessConfig,
    pub split_ratio: (u32, u32, u32),
    pub per_user_split: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Synthetic corpus shape used by the synth command.
    pub synth_users: usize,
    pub synth_pois: usize,
    pub synth_sequences: usize,
    /// Optional replacement prompt-pool files (occupation, activity, lifestyle).
    pub prompt_pool_files: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            preprocess: PreprocessConfig::default(),
            split_ratio: (6, 2, 2),
            per_user_split: false,
            model: ModelConfig::default(),
            train: TrainConfig::new(TaskMode::Lp),
            synth_users: 50,
            synth_pois: 200,
            synth_sequences: 2000,
            prompt_pool_files: Vec::new(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| Error::Config(format!("cannot parse {key}={value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("cannot parse {key}={value:?} as bool"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    let inner = value.trim().trim_start_matches('[').trim_end_matches(']');
    inner
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| Error::Config(format!("cannot parse {key}={value:?}"))))
        .collect()
}

fn parse_ratio(value: &str) -> Result<(u32, u32, u32)> {
    let parts: Vec<&str> = value.trim().split(':').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("split ratio {value:?} must be a:b:c")));
    }
    let p: Vec<u32> = parts
        .iter()
        .map(|s| s.trim().parse::<u32>().map_err(|_| Error::Config(format!("bad split ratio {value:?}"))))
        .collect::<Result<_>>()?;
    Ok((p[0], p[1], p[2]))
}

impl RunConfig {
    /// Applies one `key=value` assignment. Dataset-level keys are accepted
    /// both bare and with their `data.` prefix.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let bare = key.strip_prefix("data.").unwrap_or(key);
        match bare {
            "seed" => {
                self.seed = parse_num(key, value)?;
                self.train.seed = self.seed;
                return Ok(());
            }
            "max_history_days" => {
                self.preprocess.max_history_days = parse_num(key, value)?;
                return Ok(());
            }
            "min_user_records" => {
                self.preprocess.min_user_records = parse_num(key, value)?;
                return Ok(());
            }
            "min_poi_visits" => {
                self.preprocess.min_poi_visits = parse_num(key, value)?;
                return Ok(());
            }
            "session_gap_hours" => {
                self.preprocess.session_gap_hours = parse_num(key, value)?;
                return Ok(());
            }
            "max_seq_len" => {
                self.preprocess.max_seq_len = parse_num(key, value)?;
                return Ok(());
            }
            "split_ratio" => {
                self.split_ratio = parse_ratio(value)?;
                return Ok(());
            }
            "per_user_split" => {
                self.per_user_split = parse_bool(key, value)?;
                return Ok(());
            }
            _ => {}
        }
        match key {
            "model.embed_dim" | "embed_dim" => {
                let d: usize = parse_num(key, value)?;
                // Width-coupled fields follow unless explicitly overridden later.
                self.model.embed_dim = d;
                self.model.vimn.hidden = d;
                self.model.vimn.fusion_hidden = d;
                self.model.backbone.width = d;
            }
            "geocode.precision" => self.model.geohash_precision = parse_num(key, value)?,
            "ppel.unfreeze_tokens" => self.model.ppel_unfreeze_tokens = parse_bool(key, value)?,
            "vimn.r" => self.model.vimn.r = parse_num(key, value)?,
            "vimn.hidden" => self.model.vimn.hidden = parse_num(key, value)?,
            "vimn.fusion_hidden" => self.model.vimn.fusion_hidden = parse_num(key, value)?,
            "vimn.periods" => self.model.vimn.time.periods_secs = parse_list(key, value)?,
            "vimn.delta_unit" | "vimn.delta_unit_secs" => {
                self.model.vimn.delta_unit_secs = parse_num(key, value)?
            }
            "htpp.K" | "htpp.k" => self.model.htpp.k = parse_num(key, value)?,
            "htpp.aggregation" => {
                self.model.htpp.aggregation = match value.trim() {
                    "sum" => Aggregation::Sum,
                    "mean" => Aggregation::Mean,
                    other => return Err(Error::Config(format!("unknown aggregation {other:?}"))),
                }
            }
            "htpp.unfreeze_values" => self.model.htpp.unfreeze_values = parse_bool(key, value)?,
            "htpp.key_pull_weight" => self.model.htpp.key_pull_weight = parse_num(key, value)?,
            "htpp.pool_files" => {
                self.prompt_pool_files =
                    value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
            }
            "backbone.layers" => self.model.backbone.layers = parse_num(key, value)?,
            "backbone.heads" => self.model.backbone.heads = parse_num(key, value)?,
            "backbone.width" => self.model.backbone.width = parse_num(key, value)?,
            "backbone.F" | "backbone.frozen_layers" => {
                self.model.backbone.frozen_layers = parse_num(key, value)?
            }
            "backbone.U" | "backbone.unfrozen_attention" => {
                self.model.backbone.unfrozen_attention = parse_num(key, value)?
            }
            "backbone.variant" => {
                self.model.backbone.variant = match value.trim() {
                    "transformer" | "small-transformer" => BackboneVariant::Transformer,
                    "identity" | "identity-passthrough" => BackboneVariant::IdentityPassthrough,
                    other => return Err(Error::Config(format!("unknown backbone variant {other:?}"))),
                }
            }
            "heads.k_mix" => self.model.heads.k_mix = parse_num(key, value)?,
            "heads.beta_pooling" => {
                self.model.heads.beta_pooling = match value.trim() {
                    "mean" => BetaPooling::Mean,
                    "last" => BetaPooling::Last,
                    other => return Err(Error::Config(format!("unknown beta pooling {other:?}"))),
                }
            }
            "train.task" => {
                self.train.task = match value.trim() {
                    "lp" => TaskMode::Lp,
                    "tul" => TaskMode::Tul,
                    "tp" => TaskMode::Tp,
                    other => return Err(Error::Config(format!("unknown task {other:?}"))),
                }
            }
            "train.learning_rate" | "train.lr" => self.train.learning_rate = parse_num(key, value)?,
            "train.max_epochs" => self.train.max_epochs = parse_num(key, value)?,
            "train.patience" => self.train.patience = parse_num(key, value)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, value)?,
            "train.tp_loss" => {
                self.train.tp_loss = match value.trim() {
                    "mae" => TpLossMode::Mae,
                    "nll" => TpLossMode::Nll,
                    other => return Err(Error::Config(format!("unknown tp loss {other:?}"))),
                }
            }
            "synth.users" => self.synth_users = parse_num(key, value)?,
            "synth.pois" => self.synth_pois = parse_num(key, value)?,
            "synth.sequences" => self.synth_sequences = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
            self.apply(key, value)?;
        }
        Ok(())
    }

    /// The fully resolved key=value snapshot written into run directories.
    pub fn snapshot(&self) -> String {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        kv.insert("seed".into(), self.seed.to_string());
        kv.insert("max_history_days".into(), self.preprocess.max_history_days.to_string());
        kv.insert("min_user_records".into(), self.preprocess.min_user_records.to_string());
        kv.insert("min_poi_visits".into(), self.preprocess.min_poi_visits.to_string());
        kv.insert("session_gap_hours".into(), self.preprocess.session_gap_hours.to_string());
        kv.insert("max_seq_len".into(), self.preprocess.max_seq_len.to_string());
        kv.insert(
            "split_ratio".into(),
            format!("{}:{}:{}", self.split_ratio.0, self.split_ratio.1, self.split_ratio.2),
        );
        kv.insert("per_user_split".into(), self.per_user_split.to_string());
        kv.insert("model.embed_dim".into(), self.model.embed_dim.to_string());
        kv.insert("geocode.precision".into(), self.model.geohash_precision.to_string());
        kv.insert("ppel.unfreeze_tokens".into(), self.model.ppel_unfreeze_tokens.to_string());
        kv.insert("vimn.r".into(), self.model.vimn.r.to_string());
        kv.insert("vimn.hidden".into(), self.model.vimn.hidden.to_string());
        kv.insert("vimn.fusion_hidden".into(), self.model.vimn.fusion_hidden.to_string());
        kv.insert(
            "vimn.periods".into(),
            format!(
                "[{}]",
                self.model
                    .vimn
                    .time
                    .periods_secs
                    .iter()
                    .map(|p| p.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            ),
        );
        kv.insert("vimn.delta_unit".into(), self.model.vimn.delta_unit_secs.to_string());
        kv.insert("htpp.K".into(), self.model.htpp.k.to_string());
        kv.insert(
            "htpp.aggregation".into(),
            match self.model.htpp.aggregation {
                Aggregation::Sum => "sum".into(),
                Aggregation::Mean => "mean".into(),
            },
        );
        kv.insert("htpp.unfreeze_values".into(), self.model.htpp.unfreeze_values.to_string());
        kv.insert("htpp.key_pull_weight".into(), self.model.htpp.key_pull_weight.to_string());
        kv.insert("backbone.layers".into(), self.model.backbone.layers.to_string());
        kv.insert("backbone.heads".into(), self.model.backbone.heads.to_string());
        kv.insert("backbone.width".into(), self.model.backbone.width.to_string());
        kv.insert("backbone.F".into(), self.model.backbone.frozen_layers.to_string());
        kv.insert("backbone.U".into(), self.model.backbone.unfrozen_attention.to_string());
        kv.insert(
            "backbone.variant".into(),
            match self.model.backbone.variant {
                BackboneVariant::Transformer => "transformer".into(),
                BackboneVariant::IdentityPassthrough => "identity".into(),
            },
        );
        kv.insert("heads.k_mix".into(), self.model.heads.k_mix.to_string());
        kv.insert(
            "heads.beta_pooling".into(),
            match self.model.heads.beta_pooling {
                BetaPooling::Mean => "mean".into(),
                BetaPooling::Last => "last".into(),
            },
        );
        kv.insert(
            "train.task".into(),
            match self.train.task {
                TaskMode::Lp => "lp".into(),
                TaskMode::Tul => "tul".into(),
                TaskMode::Tp => "tp".into(),
            },
        );
        kv.insert("train.learning_rate".into(), self.train.learning_rate.to_string());
        kv.insert("train.max_epochs".into(), self.train.max_epochs.to_string());
        kv.insert("train.patience".into(), self.train.patience.to_string());
        kv.insert("train.batch_size".into(), self.train.batch_size.to_string());
        kv.insert(
            "train.tp_loss".into(),
            match self.train.tp_loss {
                TpLossMode::Mae => "mae".into(),
                TpLossMode::Nll => "nll".into(),
            },
        );
        kv.insert("ablation".into(), self.model.ablation.active().join(","));
        kv.insert("synth.users".into(), self.synth_users.to_string());
        kv.insert("synth.pois".into(), self.synth_pois.to_string());
        kv.insert("synth.sequences".into(), self.synth_sequences.to_string());
        let mut out = String::new();
        for (k, v) in kv {
            out.push_str(&k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn config_hash(&self) -> u64 {
        fnv1a64(&self.snapshot())
    }

    pub fn set_ablations(&mut self, flags: &[String]) -> Result<()> {
        for f in flags {
            self.model.ablation.set(f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn applies_prefixed_and_bare_keys() {
        let mut cfg = RunConfig::default();
        cfg.apply("max_history_days", "60").unwrap();
        cfg.apply("data.min_user_records", "5").unwrap();
        cfg.apply("vimn.r", "3").unwrap();
        cfg.apply("htpp.K", "6").unwrap();
        cfg.apply("backbone.variant", "identity").unwrap();
        cfg.apply("split_ratio", "6:2:2").unwrap();
        cfg.apply("train.task", "tp").unwrap();
        assert_eq!(cfg.preprocess.max_history_days, 60);
        assert_eq!(cfg.preprocess.min_user_records, 5);
        assert_eq!(cfg.model.vimn.r, 3);
        assert_eq!(cfg.model.htpp.k, 6);
        assert_eq!(cfg.model.backbone.variant, BackboneVariant::IdentityPassthrough);
        assert_eq!(cfg.train.task, TaskMode::Tp);
        assert!(cfg.apply("nonsense.key", "1").is_err());
        assert!(cfg.apply("vimn.r", "x").is_err());
    }

    #[test]
    fn embed_dim_propagates_to_width_coupled_fields() {
        let mut cfg = RunConfig::default();
        cfg.apply("model.embed_dim", "32").unwrap();
        assert_eq!(cfg.model.vimn.hidden, 32);
        assert_eq!(cfg.model.backbone.width, 32);
        cfg.apply("vimn.hidden", "16").unwrap();
        assert_eq!(cfg.model.vimn.hidden, 16);
    }

    #[test]
    fn periods_list_parses() {
        let mut cfg = RunConfig::default();
        cfg.apply("vimn.periods", "[3600,86400,604800]").unwrap();
        assert_eq!(cfg.model.vimn.time.periods_secs, vec![3600.0, 86400.0, 604800.0]);
    }

    #[test]
    fn snapshot_round_trips_through_apply() {
        let mut cfg = RunConfig::default();
        cfg.apply("seed", "42").unwrap();
        cfg.apply("model.embed_dim", "16").unwrap();
        cfg.apply("train.tp_loss", "nll").unwrap();
        let snap = cfg.snapshot();
        let mut cfg2 = RunConfig::default();
        for line in snap.lines() {
            let (k, v) = line.split_once('=').unwrap();
            if k == "ablation" {
                continue;
            }
            cfg2.apply(k, v).unwrap();
        }
        assert_eq!(snap, cfg2.snapshot());
        assert_eq!(cfg.config_hash(), cfg2.config_hash());
    }

    #[test]
    fn config_file_parses_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# comment\nseed=7\n\nvimn.r=2\ntrain.batch_size=16\n").unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply_file(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.model.vimn.r, 2);
        assert_eq!(cfg.train.batch_size, 16);
    }
}

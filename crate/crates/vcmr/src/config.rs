//! Run configuration: defaults, TOML config files, and flag overrides.
//!
//! A run is described by one [`AppConfig`] tree. Resolution follows a strict
//! precedence of command-line overrides over config-file values over built-in
//! defaults, and every leaf key records where its resolved value came from.
//! The resolved tree serializes back to TOML (the "config echo" written into
//! each run directory); feeding an echo back in as `--config` is a fixpoint.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentChainConfig;
use crate::contrastive::LossConfig;
use crate::error::{Error, Result};
use crate::models::{ProjectorConfig, SampleCnnConfig, TagHeadConfig, VideoEncoderConfig};

/// Which of the three training stages a [`StageConfig`] drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    AudioPretrain,
    MultimodalPretrain,
    Finetune,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::AudioPretrain => "audio_pretrain",
            Stage::MultimodalPretrain => "multimodal_pretrain",
            Stage::Finetune => "finetune",
        };
        f.write_str(s)
    }
}

/// Per-stage optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    /// Leading encoder blocks kept frozen (includes the stem when > 0).
    /// 0 for stage 1; stage 3 freezes the whole backbone regardless.
    pub freeze_blocks_n: usize,
}

impl StageConfig {
    fn stage_default(stage: Stage) -> Self {
        StageConfig {
            batch_size: if stage == Stage::AudioPretrain { 64 } else { 128 },
            epochs: 50,
            learning_rate: 0.001,
            weight_decay: 1e-6,
            temperature: 0.1,
            freeze_blocks_n: if stage == Stage::MultimodalPretrain { 4 } else { 0 },
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { temperature: self.temperature }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{name}.batch_size must be positive")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("{name}.learning_rate must be positive")));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("{name}.weight_decay must be non-negative")));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("{name}.temperature must be positive")));
        }
        Ok(())
    }
}

/// Corpus curation and evaluation-time options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Fractional overlap between adjacent inference windows.
    pub segment_overlap: f64,
    /// Tracks whose longest scene exceeds this are dropped during curation.
    pub max_scene_s: f64,
    /// Frame rate assumed for video feature extraction.
    pub fps: f64,
    /// Training-set fractions exercised by the scarcity ablation.
    pub scarcity_fractions: Vec<f64>,
    /// First-kernel values exercised by the resolution ablation.
    pub resolution_k_grid: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            segment_overlap: 0.5,
            max_scene_s: 30.0,
            fps: 5.0,
            scarcity_fractions: vec![0.05, 0.10, 0.20, 0.50, 0.80],
            resolution_k_grid: vec![3, 5],
        }
    }
}

impl EvalConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.segment_overlap) {
            return Err(Error::Config("eval.segment_overlap must be in [0, 1)".into()));
        }
        if !(self.max_scene_s > 0.0) {
            return Err(Error::Config("eval.max_scene_s must be positive".into()));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Config("eval.fps must be positive".into()));
        }
        if self.scarcity_fractions.is_empty()
            || self.scarcity_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0))
        {
            return Err(Error::Config(
                "eval.scarcity_fractions must be non-empty values in (0, 1]".into(),
            ));
        }
        if self.resolution_k_grid.is_empty() || self.resolution_k_grid.contains(&0) {
            return Err(Error::Config("eval.resolution_k_grid must be non-empty positive".into()));
        }
        Ok(())
    }
}

/// The full configuration tree for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub seed: u64,
    pub samplecnn: SampleCnnConfig,
    pub projector: ProjectorConfig,
    pub video_encoder: VideoEncoderConfig,
    pub tag_head: TagHeadConfig,
    pub augment: AugmentChainConfig,
    pub audio_pretrain: StageConfig,
    pub multimodal_pretrain: StageConfig,
    pub finetune: StageConfig,
    pub eval: EvalConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            seed: 42,
            samplecnn: SampleCnnConfig::default(),
            projector: ProjectorConfig::default(),
            video_encoder: VideoEncoderConfig::default(),
            tag_head: TagHeadConfig::default(),
            augment: AugmentChainConfig::default(),
            audio_pretrain: StageConfig::stage_default(Stage::AudioPretrain),
            multimodal_pretrain: StageConfig::stage_default(Stage::MultimodalPretrain),
            finetune: StageConfig::stage_default(Stage::Finetune),
            eval: EvalConfig::default(),
        }
    }
}

impl AppConfig {
    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::AudioPretrain => &self.audio_pretrain,
            Stage::MultimodalPretrain => &self.multimodal_pretrain,
            Stage::Finetune => &self.finetune,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.audio_pretrain.validate("audio_pretrain")?;
        self.multimodal_pretrain.validate("multimodal_pretrain")?;
        self.finetune.validate("finetune")?;
        self.eval.validate()?;
        self.augment.validate()?;
        self.samplecnn.validate()?;
        Ok(())
    }

    /// Serializes the resolved tree; the result re-resolves to itself.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }
}

/// Where a resolved key's value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Default,
    File,
    Flag,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Default => "default",
            Provenance::File => "file",
            Provenance::Flag => "flag",
        })
    }
}

/// A resolved configuration plus per-key provenance (dotted key paths).
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub config: AppConfig,
    pub provenance: BTreeMap<String, Provenance>,
}

impl ResolvedConfig {
    /// Human-readable provenance listing, one `key = value  # source` line per leaf.
    pub fn provenance_report(&self) -> String {
        let mut out = String::new();
        for (key, prov) in &self.provenance {
            out.push_str(&format!("{key}  # {prov}\n"));
        }
        out
    }
}

fn leaf_paths(value: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaf_paths(v, &path, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

/// Recursively overlays `over` onto `base`. Tables merge key-wise; any other
/// value replaces. Keys unknown to the schema are caught later at deserialize
/// time by `deny_unknown_fields`.
fn merge_toml(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_dotted(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key `{key}`: `{part}` is not a table")))?;
        if i == parts.len() - 1 {
            table.insert((*part).to_string(), value);
            return Ok(());
        }
        node = table
            .entry((*part).to_string())
            .or_insert(toml::Value::Table(toml::map::Map::new()));
    }
    unreachable!("empty key rejected above")
}

/// Parses an override value with TOML literal syntax, falling back to a bare
/// string so `--set tag_head.n_tags=50` and `--set corpus.name=mtat` both work.
fn parse_override_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed probe table has key v"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Splits a `key=value` override string.
pub fn parse_override(spec: &str) -> Result<(String, String)> {
    match spec.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Config(format!("override `{spec}` must have the form key=value"))),
    }
}

/// Resolves the effective configuration: flag overrides > file > defaults.
///
/// `overrides` are dotted-key/value pairs from the command line (already split
/// by [`parse_override`]). Unknown keys anywhere are rejected by name.
pub fn resolve_config(
    file: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<ResolvedConfig> {
    let defaults = AppConfig::default();
    let mut tree = toml::Value::try_from(&defaults)
        .map_err(|e| Error::Config(format!("encode defaults: {e}")))?;

    let mut provenance = BTreeMap::new();
    let mut default_keys = Vec::new();
    leaf_paths(&tree, "", &mut default_keys);
    for k in &default_keys {
        provenance.insert(k.clone(), Provenance::Default);
    }

    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let file_tree: toml::Value = text
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut file_keys = Vec::new();
        leaf_paths(&file_tree, "", &mut file_keys);
        for k in file_keys {
            provenance.insert(k, Provenance::File);
        }
        merge_toml(&mut tree, file_tree);
    }

    for (key, raw) in overrides {
        set_dotted(&mut tree, key, parse_override_value(raw))?;
        provenance.insert(key.clone(), Provenance::Flag);
    }

    let config: AppConfig = tree
        .try_into()
        .map_err(|e| Error::Config(format!("configuration: {e}")))?;
    config.validate()?;
    Ok(ResolvedConfig { config, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn tmp_config(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn defaults_match_stated_hyperparameters() {
        let cfg = AppConfig::default();
        assert_eq!(cfg.audio_pretrain.batch_size, 64);
        assert_eq!(cfg.multimodal_pretrain.batch_size, 128);
        assert_eq!(cfg.finetune.batch_size, 128);
        for stage in [&cfg.audio_pretrain, &cfg.multimodal_pretrain, &cfg.finetune] {
            assert_eq!(stage.epochs, 50);
            assert_eq!(stage.learning_rate, 0.001);
            assert_eq!(stage.weight_decay, 1e-6);
            assert_eq!(stage.temperature, 0.1);
        }
        assert_eq!(cfg.multimodal_pretrain.freeze_blocks_n, 4);
        assert_eq!(cfg.samplecnn.first_kernel, 5);
        assert_eq!(cfg.eval.scarcity_fractions, vec![0.05, 0.10, 0.20, 0.50, 0.80]);
        cfg.validate().unwrap();
    }

    #[test]
    fn no_file_no_flags_resolves_to_defaults() {
        let resolved = resolve_config(None, &[]).unwrap();
        assert_eq!(resolved.config, AppConfig::default());
        assert!(resolved.provenance.values().all(|p| *p == Provenance::Default));
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let f = tmp_config("[audio_pretrain]\ntemperature = 0.3\nepochs = 7\n");
        let overrides = vec![("audio_pretrain.temperature".to_string(), "0.2".to_string())];
        let resolved = resolve_config(Some(f.path()), &overrides).unwrap();
        assert_eq!(resolved.config.audio_pretrain.temperature, 0.2);
        assert_eq!(resolved.config.audio_pretrain.epochs, 7);
        assert_eq!(resolved.config.audio_pretrain.learning_rate, 0.001);
        assert_eq!(
            resolved.provenance["audio_pretrain.temperature"],
            Provenance::Flag
        );
        assert_eq!(resolved.provenance["audio_pretrain.epochs"], Provenance::File);
        assert_eq!(
            resolved.provenance["audio_pretrain.learning_rate"],
            Provenance::Default
        );
    }

    #[test]
    fn config_echo_is_a_fixpoint() {
        let overrides = vec![
            ("seed".to_string(), "7".to_string()),
            ("samplecnn.first_kernel".to_string(), "3".to_string()),
            ("eval.scarcity_fractions".to_string(), "[0.5, 0.8]".to_string()),
        ];
        let first = resolve_config(None, &overrides).unwrap();
        let echo = tmp_config(&first.config.to_toml().unwrap());
        let second = resolve_config(Some(echo.path()), &[]).unwrap();
        assert_eq!(first.config, second.config);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let f = tmp_config("[audio_pretrain]\nlearning_rte = 0.1\n");
        let err = resolve_config(Some(f.path()), &[]).unwrap_err();
        assert!(err.to_string().contains("learning_rte"), "{err}");

        let f = tmp_config("[optimizer]\nlr = 0.1\n");
        let err = resolve_config(Some(f.path()), &[]).unwrap_err();
        assert!(err.to_string().contains("optimizer"), "{err}");
    }

    #[test]
    fn type_mismatch_is_a_config_error() {
        let overrides = vec![("seed".to_string(), "not-a-number".to_string())];
        let err = resolve_config(None, &overrides).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn invalid_values_fail_validation() {
        for (key, value) in [
            ("audio_pretrain.temperature", "0.0"),
            ("finetune.batch_size", "0"),
            ("eval.segment_overlap", "1.0"),
            ("eval.scarcity_fractions", "[]"),
        ] {
            let overrides = vec![(key.to_string(), value.to_string())];
            assert!(resolve_config(None, &overrides).is_err(), "{key}={value} accepted");
        }
    }

    #[test]
    fn override_parsing_handles_strings_and_arrays() {
        assert_eq!(
            parse_override("a.b = 3 ").unwrap(),
            ("a.b".to_string(), "3".to_string())
        );
        assert!(parse_override("no-equals").is_err());
        assert_eq!(parse_override_value("3"), toml::Value::Integer(3));
        assert_eq!(parse_override_value("true"), toml::Value::Boolean(true));
        assert_eq!(
            parse_override_value("plain-string"),
            toml::Value::String("plain-string".to_string())
        );
        assert_eq!(
            parse_override_value("[1, 2]"),
            toml::Value::Array(vec![toml::Value::Integer(1), toml::Value::Integer(2)])
        );
    }
}

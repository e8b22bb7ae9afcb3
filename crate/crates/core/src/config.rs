//! Declarative run configuration.
//!
//! One TOML document drives every command: model/avatar/encoder/lipreader/
//! decoder specs, the two synthetic dataset domains, stage schedules, and
//! backend selection. Unknown keys are rejected. Environment variables
//! prefixed `LIPSPLAT_` override keys with `__` as the path separator
//! (e.g. `LIPSPLAT_STAGES__STAGE3__LAMBDA_READ=1e-6`). The paper-scale stage
//! schedules ship verbatim as the `paper` preset; the `desk` preset scales
//! epochs down roughly 10× so the full curriculum finishes in minutes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::EncoderConfig;
use crate::avatar::AvatarSpec;
use crate::data::SyntheticSpec;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::face::ModelSpec;
use crate::lipreader::LipreaderConfig;
use crate::losses::CosineAggregation;

pub const ENV_PREFIX: &str = "LIPSPLAT_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Which dataset domain this stage trains on.
    pub dataset: DatasetDomain,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub lr: f64,
    /// Weight of the lip-reading loss (only stage 3 consumes it).
    pub lambda_read: f64,
    /// Optional hard cap on optimizer steps (short determinism runs).
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl StageConfig {
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::config("stage epochs/batch/accum must be positive"));
        }
        if self.lr <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.lambda_read < 0.0 {
            return Err(Error::config("lambda_read cannot be negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetDomain {
    /// Scan-quality geometry (stage-1 pretraining domain).
    Clean,
    /// Pseudo-ground-truth-like geometry with vertex noise (stages 2–3).
    Noisy,
}

impl DatasetDomain {
    pub fn dir_name(self) -> &'static str {
        match self {
            DatasetDomain::Clean => "clean",
            DatasetDomain::Noisy => "noisy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagesConfig {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
}

impl StagesConfig {
    pub fn get(&self, stage: crate::losses::StageId) -> &StageConfig {
        match stage {
            crate::losses::StageId::Stage1 => &self.stage1,
            crate::losses::StageId::Stage2 => &self.stage2,
            crate::losses::StageId::Stage3 => &self.stage3,
        }
    }

    /// The published training schedule: 250-epoch batch-4 geometric stages,
    /// then 100 epochs at batch 1 with 4-step gradient accumulation, constant
    /// Adam at 1e-4, perceptual weight 1e-5.
    pub fn paper() -> Self {
        Self {
            stage1: StageConfig {
                dataset: DatasetDomain::Clean,
                epochs: 250,
                batch_size: 4,
                grad_accum: 1,
                lr: 1e-4,
                lambda_read: 0.0,
                max_steps: None,
            },
            stage2: StageConfig {
                dataset: DatasetDomain::Noisy,
                epochs: 250,
                batch_size: 4,
                grad_accum: 1,
                lr: 1e-4,
                lambda_read: 0.0,
                max_steps: None,
            },
            stage3: StageConfig {
                dataset: DatasetDomain::Noisy,
                epochs: 100,
                batch_size: 1,
                grad_accum: 4,
                lr: 1e-4,
                lambda_read: 1e-5,
                max_steps: None,
            },
        }
    }

    /// Desk-scale schedule: epochs cut ~10×, learning rate raised mildly so
    /// the shortened run still converges on the tiny synthetic sets.
    pub fn desk() -> Self {
        Self {
            stage1: StageConfig {
                dataset: DatasetDomain::Clean,
                epochs: 60,
                batch_size: 4,
                grad_accum: 1,
                lr: 5e-4,
                lambda_read: 0.0,
                max_steps: None,
            },
            stage2: StageConfig {
                dataset: DatasetDomain::Noisy,
                epochs: 60,
                batch_size: 4,
                grad_accum: 1,
                lr: 5e-4,
                lambda_read: 0.0,
                max_steps: None,
            },
            stage3: StageConfig {
                dataset: DatasetDomain::Noisy,
                epochs: 15,
                batch_size: 1,
                grad_accum: 4,
                lr: 3e-4,
                lambda_read: 1e-5,
                max_steps: None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// When set, sentences [0, n) train and the rest evaluate.
    #[serde(default)]
    pub train_sentences: Option<usize>,
}

impl SplitConfig {
    pub fn to_policy(&self) -> crate::data::SplitPolicy {
        match self.train_sentences {
            None => crate::data::SplitPolicy::SubjectCounts {
                train: self.train,
                val: self.val,
                test: self.test,
            },
            Some(k) => crate::data::SplitPolicy::SentencePartition {
                train: self.train,
                val: self.val,
                test: self.test,
                train_sentences: k,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Directory holding the `clean/` and `noisy/` dataset subtrees.
    pub root: PathBuf,
    pub clean: SyntheticSpec,
    pub noisy: SyntheticSpec,
    pub split: SplitConfig,
    #[serde(default)]
    pub exclude_subjects: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TtsConfig {
    Stub {
        sample_rate: u32,
        #[serde(default)]
        fixed_duration: Option<f64>,
    },
    Command {
        program: String,
        #[serde(default)]
        args: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LpipsConfig {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub output_dir: PathBuf,
    /// Model units → millimeters for LVE reporting.
    pub unit_scale: f64,
    pub cosine_aggregation: CosineAggregation,
    pub model: ModelSpec,
    pub avatar: AvatarSpec,
    pub encoder: EncoderConfig,
    pub lipreader: LipreaderConfig,
    pub decoder: DecoderConfig,
    pub dataset: DatasetConfig,
    pub stages: StagesConfig,
    pub tts: TtsConfig,
    #[serde(default)]
    pub lpips: Option<LpipsConfig>,
}

impl RunConfig {
    /// Desk-scale defaults: everything sized to run the full curriculum in
    /// minutes on one CPU.
    pub fn desk_preset() -> Self {
        Self {
            seed: 7,
            deterministic: true,
            output_dir: PathBuf::from("runs/desk"),
            unit_scale: 1000.0,
            cosine_aggregation: CosineAggregation::PerFrameMean,
            model: ModelSpec::default(),
            avatar: AvatarSpec::default(),
            encoder: EncoderConfig::default(),
            lipreader: LipreaderConfig::default(),
            decoder: DecoderConfig::default(),
            dataset: DatasetConfig {
                root: PathBuf::from("runs/desk/data"),
                clean: SyntheticSpec {
                    subjects: 4,
                    sentences: 6,
                    duration_s: 1.0,
                    seed: 23,
                    noise_level: 0.0,
                    // stage-1 domain articulates at half scale; the noisy
                    // domain's wider motion is what stage 2 adapts to
                    expression_amplitude: 0.002,
                    jaw_amplitude: 0.09,
                    subject_prefix: "A".into(),
                },
                noisy: SyntheticSpec {
                    subjects: 4,
                    sentences: 6,
                    duration_s: 1.0,
                    seed: 31,
                    noise_level: 3e-4,
                    expression_amplitude: 0.004,
                    jaw_amplitude: 0.18,
                    subject_prefix: "B".into(),
                },
                split: SplitConfig {
                    train: 2,
                    val: 1,
                    test: 1,
                    train_sentences: None,
                },
                exclude_subjects: vec![],
            },
            stages: StagesConfig::desk(),
            tts: TtsConfig::Stub {
                sample_rate: 16000,
                fixed_duration: None,
            },
            lpips: None,
        }
    }

    /// Paper-scale preset: full model dimensions and the published stage
    /// schedules (not runnable at desk scale; kept for conformance and as a
    /// starting point for real-data runs).
    pub fn paper_preset() -> Self {
        let mut cfg = Self::desk_preset();
        cfg.output_dir = PathBuf::from("runs/paper");
        cfg.dataset.root = PathBuf::from("runs/paper/data");
        cfg.model = ModelSpec {
            vertex_count: 5142,
            d_identity: 300,
            d_expression: 100,
            d_pose: 6,
            seed: 7,
        };
        cfg.dataset.clean.subjects = 12;
        cfg.dataset.clean.sentences = 40;
        cfg.dataset.split = SplitConfig {
            train: 8,
            val: 2,
            test: 2,
            train_sentences: None,
        };
        cfg.dataset.noisy.subjects = 43;
        cfg.dataset.noisy.sentences = 40;
        cfg.stages = StagesConfig::paper();
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        for s in [&self.stages.stage1, &self.stages.stage2, &self.stages.stage3] {
            s.validate()?;
        }
        self.dataset.clean.validate()?;
        self.dataset.noisy.validate()?;
        if self.unit_scale <= 0.0 {
            return Err(Error::config("unit_scale must be positive"));
        }
        if self.stages.stage3.lambda_read > 0.0 && self.lipreader.d_read == 0 {
            return Err(Error::config("stage 3 needs a lip-feature extractor"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("config encode: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a TOML file and apply `LIPSPLAT_*` environment overrides.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config `{}`: {e}", path.display())))?;
        Self::from_toml_with_env(&text, std::env::vars())
    }

    pub fn from_toml_with_env(
        text: &str,
        env: impl Iterator<Item = (String, String)>,
    ) -> Result<Self> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| Error::config(format!("config parse: {e}")))?;
        for (key, val) in env {
            let Some(path) = key.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let segments: Vec<String> = path.split("__").map(|s| s.to_lowercase()).collect();
            apply_override(&mut value, &segments, &val)?;
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e| Error::config(format!("config decode: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Archive the effective config into a run directory.
    pub fn archive(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), self.to_toml()?)?;
        Ok(())
    }
}

fn apply_override(root: &mut toml::Value, segments: &[String], raw: &str) -> Result<()> {
    if segments.is_empty() {
        return Err(Error::config("empty override path"));
    }
    let mut node = root;
    for seg in &segments[..segments.len() - 1] {
        node = node
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override path `{seg}` is not a table")))?
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let leaf = segments.last().unwrap();
    let parsed: toml::Value = if let Ok(i) = raw.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = raw.parse::<f64>() {
        toml::Value::Float(f)
    } else if let Ok(b) = raw.parse::<bool>() {
        toml::Value::Boolean(b)
    } else {
        toml::Value::String(raw.to_string())
    };
    node.as_table_mut()
        .ok_or_else(|| Error::config("override leaf parent is not a table"))?
        .insert(leaf.clone(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for cfg in [RunConfig::desk_preset(), RunConfig::paper_preset()] {
            cfg.validate().unwrap();
            let text = cfg.to_toml().unwrap();
            let back = RunConfig::from_toml(&text).unwrap();
            assert_eq!(cfg, back);
        }
    }

    #[test]
    fn paper_preset_matches_published_schedule() {
        let s = StagesConfig::paper();
        assert_eq!(s.stage1.epochs, 250);
        assert_eq!(s.stage2.epochs, 250);
        assert_eq!(s.stage3.epochs, 100);
        assert_eq!(s.stage1.batch_size, 4);
        assert_eq!(s.stage2.batch_size, 4);
        assert_eq!(s.stage3.batch_size, 1);
        assert_eq!(s.stage1.grad_accum, 1);
        assert_eq!(s.stage3.grad_accum, 4);
        assert_eq!(s.stage3.effective_batch(), 4);
        for st in [&s.stage1, &s.stage2, &s.stage3] {
            assert_eq!(st.lr, 1e-4);
        }
        assert_eq!(s.stage3.lambda_read, 1e-5);
    }

    #[test]
    fn effective_batch_arithmetic() {
        let mut st = StagesConfig::paper().stage1.clone();
        st.batch_size = 2;
        st.grad_accum = 3;
        assert_eq!(st.effective_batch(), 6);
        st.grad_accum = 1;
        st.batch_size = 4;
        assert_eq!(st.effective_batch(), 4);
    }

    #[test]
    fn unknown_keys_rejected() {
        let cfg = RunConfig::desk_preset();
        let mut text = cfg.to_toml().unwrap();
        text.push_str("\nmystery_knob = 3\n");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn env_overrides_apply() {
        let cfg = RunConfig::desk_preset();
        let text = cfg.to_toml().unwrap();
        let env = vec![
            ("LIPSPLAT_SEED".to_string(), "99".to_string()),
            (
                "LIPSPLAT_STAGES__STAGE3__LAMBDA_READ".to_string(),
                "1e-6".to_string(),
            ),
            ("UNRELATED".to_string(), "x".to_string()),
        ];
        let loaded = RunConfig::from_toml_with_env(&text, env.into_iter()).unwrap();
        assert_eq!(loaded.seed, 99);
        assert_eq!(loaded.stages.stage3.lambda_read, 1e-6);
    }

    #[test]
    fn env_override_bad_key_is_config_error() {
        let cfg = RunConfig::desk_preset();
        let text = cfg.to_toml().unwrap();
        let env = vec![("LIPSPLAT_NOT__A__REAL__KEY".to_string(), "1".to_string())];
        assert!(RunConfig::from_toml_with_env(&text, env.into_iter()).is_err());
    }
}

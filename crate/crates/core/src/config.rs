//! Experiment files: one TOML tree with shared run settings and exactly one task section.
//!
//! ```toml
//! name = "clean-seed0"
//! seed = 0
//! preset = "ring-8"
//!
//! [pretrain]
//! target = "clean"
//! steps = 3000
//! ```
//!
//! Top-level `seed`, `preset` and `arch` apply to the task section; setting the same key in both
//! places with different values is an error. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analytic::GaussianMixture;
use crate::error::{Error, Result};
use crate::net::ArchConfig;
use crate::pretrain::PretrainConfig;
use crate::rl::RlConfig;
use crate::varlab::VerifyConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: Option<String>,
    pub seed: Option<u64>,
    pub preset: Option<String>,
    pub arch: Option<ArchConfig>,
    /// Run directory; the command line `-o` takes precedence.
    pub output: Option<PathBuf>,
    pub pretrain: Option<PretrainConfig>,
    pub rl: Option<RlConfig>,
    pub verify: Option<VerifyConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Pretrain,
    Rl,
    Verify,
}

impl TaskKind {
    pub fn section(&self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::Rl => "rl",
            Self::Verify => "verify",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    Pretrain(PretrainConfig),
    Rl(RlConfig),
    Verify(VerifyConfig),
}

impl Task {
    pub fn kind(&self) -> TaskKind {
        match self {
            Self::Pretrain(_) => TaskKind::Pretrain,
            Self::Rl(_) => TaskKind::Rl,
            Self::Verify(_) => TaskKind::Verify,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Self::Pretrain(c) => c.seed,
            Self::Rl(c) => c.seed,
            Self::Verify(c) => c.seed,
        }
    }
}

/// A validated config with every default materialised.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub name: String,
    pub output: Option<PathBuf>,
    pub task: Task,
}

impl ResolvedConfig {
    /// Defaults for a task when no file is given.
    pub fn default_for(kind: TaskKind) -> Self {
        let task = match kind {
            TaskKind::Pretrain => Task::Pretrain(PretrainConfig::default()),
            TaskKind::Rl => Task::Rl(RlConfig::default()),
            TaskKind::Verify => Task::Verify(VerifyConfig::default()),
        };
        Self {
            name: kind.section().to_string(),
            output: None,
            task,
        }
    }

    /// The fully resolved tree, written next to every run's outputs.
    pub fn to_toml(&self) -> Result<String> {
        let mut echo = ExperimentConfig {
            name: Some(self.name.clone()),
            seed: Some(self.task.seed()),
            output: self.output.clone(),
            ..ExperimentConfig::default()
        };
        match &self.task {
            Task::Pretrain(c) => {
                echo.preset = Some(c.preset.clone());
                echo.arch = Some(c.arch.clone());
                echo.pretrain = Some(c.clone());
            }
            Task::Rl(c) => echo.rl = Some(c.clone()),
            Task::Verify(c) => echo.verify = Some(c.clone()),
        }
        toml::to_string(&echo).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }
}

/// Parses TOML text; `origin` names the source in error messages.
pub fn parse_config_str(text: &str, origin: &str) -> Result<ResolvedConfig> {
    let raw: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
    raw.resolve()
}

pub fn parse_config(path: &Path) -> Result<ResolvedConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, &path.display().to_string())
}

fn merge<T: PartialEq + Clone + std::fmt::Debug>(
    key: &str,
    top: &Option<T>,
    section: &mut T,
    section_default: &T,
) -> Result<()> {
    if let Some(v) = top {
        if section != section_default && section != v {
            return Err(Error::Config(format!(
                "'{key}' is set to {v:?} at the top level and {section:?} in the task section"
            )));
        }
        *section = v.clone();
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn resolve(self) -> Result<ResolvedConfig> {
        let sections = [self.pretrain.is_some(), self.rl.is_some(), self.verify.is_some()];
        match sections.iter().filter(|s| **s).count() {
            1 => {}
            0 => return Err(Error::Config("missing task section: one of [pretrain], [rl], [verify]".into())),
            _ => return Err(Error::Config("only one of [pretrain], [rl], [verify] may be present".into())),
        }
        let task = if let Some(mut c) = self.pretrain {
            let d = PretrainConfig::default();
            merge("seed", &self.seed, &mut c.seed, &d.seed)?;
            merge("preset", &self.preset, &mut c.preset, &d.preset)?;
            merge("arch", &self.arch, &mut c.arch, &d.arch)?;
            c.validate()?;
            Task::Pretrain(c)
        } else if let Some(mut c) = self.rl {
            if self.arch.is_some() {
                return Err(Error::Config("'arch' has no effect on [rl]: the net comes from the checkpoint".into()));
            }
            merge("seed", &self.seed, &mut c.seed, &RlConfig::default().seed)?;
            if let Some(p) = &self.preset {
                let gm = GaussianMixture::preset(p)?;
                c.reward.validate(gm.dim())?;
            }
            c.validate()?;
            Task::Rl(c)
        } else {
            let mut c = self.verify.expect("one section is present");
            let d = VerifyConfig::default();
            merge("seed", &self.seed, &mut c.seed, &d.seed)?;
            if let Some(p) = &self.preset {
                merge("preset", &Some(vec![p.clone()]), &mut c.presets, &d.presets)?;
            }
            if self.arch.is_some() {
                return Err(Error::Config("'arch' has no effect on [verify]".into()));
            }
            c.validate()?;
            Task::Verify(c)
        };
        Ok(ResolvedConfig {
            name: self.name.unwrap_or_else(|| task.kind().section().to_string()),
            output: self.output,
            task,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_pretrain_fills_defaults() {
        let r = parse_config_str("[pretrain]\n", "t").unwrap();
        let Task::Pretrain(c) = &r.task else { panic!() };
        assert_eq!(c.lr, 3e-4);
        assert_eq!(c, &PretrainConfig::default());
        assert_eq!(r.name, "pretrain");
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config_str("[pretrain]\nlearning_rat = 0.1\n", "t").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learning_rat"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
        let err = parse_config_str("nmae = \"x\"\n[verify]\n", "t").unwrap_err();
        assert!(err.to_string().contains("nmae"));
    }

    #[test]
    fn top_level_keys_apply_and_conflicts_are_rejected() {
        let r = parse_config_str("seed = 7\npreset = \"two-mode-1d\"\n[pretrain]\nsteps = 10\n", "t").unwrap();
        let Task::Pretrain(c) = &r.task else { panic!() };
        assert_eq!((c.seed, c.preset.as_str(), c.steps), (7, "two-mode-1d", 10));
        assert!(parse_config_str("seed = 7\n[pretrain]\nseed = 8\n", "t").is_err());
        assert!(parse_config_str("seed = 7\n[pretrain]\nseed = 7\n", "t").is_ok());
    }

    #[test]
    fn exactly_one_section() {
        assert!(parse_config_str("name = \"x\"\n", "t").is_err());
        assert!(parse_config_str("[pretrain]\n[verify]\n", "t").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        for kind in [TaskKind::Pretrain, TaskKind::Rl, TaskKind::Verify] {
            let r = ResolvedConfig::default_for(kind);
            let text = r.to_toml().unwrap();
            assert_eq!(parse_config_str(&text, "echo").unwrap(), r, "{text}");
        }
        let text = "seed = 3\n[rl]\nalgorithm = \"ddpo\"\nsampler = \"sde-em\"\n[rl.reward]\nkind = \"halfplane\"\nnormal = [1.0, 0.0]\noffset = 0.5\n";
        let r = parse_config_str(text, "t").unwrap();
        assert_eq!(parse_config_str(&r.to_toml().unwrap(), "echo").unwrap(), r);
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(parse_config_str("[pretrain]\nlr = -1.0\n", "t").is_err());
        assert!(parse_config_str("[pretrain]\ntarget = \"fuzzy\"\n", "t").is_err());
        assert!(parse_config_str("[verify]\ncells = [[0.6, 0.5]]\n", "t").is_err());
        assert!(parse_config_str("[rl]\nalgorithm = \"ppo\"\n", "t").is_err());
    }

    #[test]
    fn missing_file_is_io() {
        assert!(matches!(
            parse_config(Path::new("/nonexistent/cfg.toml")),
            Err(Error::Io { .. })
        ));
    }
}

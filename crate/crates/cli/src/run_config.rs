//! Run configuration: built-in defaults, then the config file, then
//! `--set key=value` pairs, then dedicated flags. The resolved key set is
//! what gets written next to every output.

use std::path::Path;

use tdstereo::io::config::KeyValues;
use tdstereo::train::{stage2_schedule, Schedule};
use tdstereo::{Error, ModelConfig, Result};

const STAGE2_KEYS: [&str; 2] = ["stage2_epochs", "stage2_lr"];

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: Schedule,
    /// Fine-tuning schedule of distillation stage 2.
    pub stage2: Schedule,
    pub resolved: KeyValues,
}

fn parse_set(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl RunConfig {
    pub fn resolve(
        file: Option<&Path>,
        sets: &[String],
        flags: &[(&str, Option<String>)],
        distill: bool,
    ) -> Result<Self> {
        let mut overrides = KeyValues::new();
        if let Some(path) = file {
            overrides.extend(KeyValues::read(path)?.iter());
        }
        for s in sets {
            let (k, v) = parse_set(s)?;
            overrides.set(&k, v);
        }
        for (k, v) in flags {
            if let Some(v) = v {
                overrides.set(k, v);
            }
        }

        let mut model = ModelConfig::default();
        let mut schedule = Schedule::default();
        for (k, v) in overrides.iter() {
            if STAGE2_KEYS.contains(&k) {
                if !distill {
                    return Err(Error::Config(format!("{k} only applies to distill")));
                }
                continue;
            }
            if !model.set(k, v)? && !schedule.set(k, v)? {
                return Err(Error::Config(format!("unknown configuration key '{k}'")));
            }
        }
        model.validate()?;
        schedule.validate()?;

        let mut stage2 = stage2_schedule(&schedule);
        for key in STAGE2_KEYS {
            if let Some(v) = overrides.get(key) {
                let field = key.trim_start_matches("stage2_");
                stage2.set(field, v)?;
            }
        }
        stage2.validate()?;

        let mut resolved = KeyValues::new();
        resolved.extend(model.to_pairs());
        resolved.extend(schedule.to_pairs());
        if distill {
            resolved.set("stage2_epochs", stage2.epochs);
            resolved.set("stage2_lr", stage2.lr);
        }
        Ok(Self {
            model,
            schedule,
            stage2,
            resolved,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_sets_override_defaults() {
        let cfg = RunConfig::resolve(
            None,
            &["epochs=7".into(), "lr=0.01".into()],
            &[("epochs", Some("9".into())), ("volume", None)],
            false,
        )
        .unwrap();
        assert_eq!(cfg.schedule.epochs, 9);
        assert_eq!(cfg.schedule.lr, 0.01);
        assert_eq!(cfg.resolved.get("epochs"), Some("9"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::resolve(None, &["colour=red".into()], &[], false).is_err());
        assert!(RunConfig::resolve(None, &["stage2_lr=0.1".into()], &[], false).is_err());
    }

    #[test]
    fn stage2_follows_stage1_unless_set() {
        let cfg = RunConfig::resolve(None, &["epochs=12".into(), "lr=0.002".into()], &[], true).unwrap();
        assert_eq!(cfg.stage2.epochs, 2);
        assert!((cfg.stage2.lr - 0.0002).abs() < 1e-15);
        let cfg = RunConfig::resolve(None, &["stage2_epochs=5".into()], &[], true).unwrap();
        assert_eq!(cfg.stage2.epochs, 5);
    }
}

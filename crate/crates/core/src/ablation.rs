//! Variant sweeps over the cost-volume construction and the LRR /
//! intermediate-supervision switches, all trained from the same seed and data.

use std::fmt;
use std::str::FromStr;

use crate::cost_volume::VolumeKind;
use crate::error::{Error, Result};
use crate::io::dataset::Sample;
use crate::metrics::MetricsReport;
use crate::model::{Model, ModelConfig};
use crate::train::{evaluate, train, Event, LabelSource, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub volume: VolumeKind,
    pub lrr: bool,
    pub intermediate: bool,
}

impl Variant {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            volume: self.volume,
            lrr: self.lrr,
            intermediate: self.intermediate,
            ..base.clone()
        }
    }
}

/// `kind`, optionally followed by `+lrr` and/or `+is`.
impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split('+');
        let volume = parts.next().unwrap_or("").parse()?;
        let mut v = Variant {
            volume,
            lrr: false,
            intermediate: false,
        };
        for p in parts {
            match p {
                "lrr" => v.lrr = true,
                "is" => v.intermediate = true,
                _ => {
                    return Err(Error::Config(format!(
                        "unknown variant modifier '{p}' in '{s}'; use <kind>[+lrr][+is]"
                    )))
                }
            }
        }
        Ok(v)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.volume)?;
        if self.lrr {
            f.write_str("+lrr")?;
        }
        if self.intermediate {
            f.write_str("+is")?;
        }
        Ok(())
    }
}

/// The two comparison tables: every volume kind on the full model, then the
/// LRR / IS switches on the gtv model.
pub fn standard_grid() -> Vec<Variant> {
    let mut out: Vec<Variant> = VolumeKind::ALL
        .into_iter()
        .map(|volume| Variant {
            volume,
            lrr: true,
            intermediate: true,
        })
        .collect();
    for (lrr, intermediate) in [(false, false), (false, true), (true, false)] {
        out.push(Variant {
            volume: VolumeKind::Gtv,
            lrr,
            intermediate,
        });
    }
    out
}

/// Every kind × ±LRR × ±IS.
pub fn full_grid() -> Vec<Variant> {
    let mut out = Vec::new();
    for volume in VolumeKind::ALL {
        for lrr in [false, true] {
            for intermediate in [false, true] {
                out.push(Variant {
                    volume,
                    lrr,
                    intermediate,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub params: usize,
    pub metrics: MetricsReport,
}

pub fn run(
    base: &ModelConfig,
    schedule: &Schedule,
    train_set: &[Sample],
    val_set: &[Sample],
    variants: &[Variant],
    on_event: &mut dyn FnMut(&Variant, Event),
) -> Result<Vec<AblationRow>> {
    if val_set.is_empty() {
        return Err(Error::Invalid("ablation needs a validation set".into()));
    }
    let mut rows = Vec::new();
    for v in variants {
        let mut model = Model::new(v.apply(base))?;
        train(&mut model, train_set, val_set, schedule, LabelSource::GroundTruth, &mut |e| {
            on_event(v, e)
        })?;
        rows.push(AblationRow {
            variant: *v,
            params: model.params.numel(),
            metrics: evaluate(&model, val_set, LabelSource::GroundTruth)?,
        });
    }
    Ok(rows)
}

pub fn render_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<16} {:>6} {:>4} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
        "variant", "lrr", "is", "params", "epe", "error1", "error2", "error3", "d1"
    );
    for r in rows {
        let m = &r.metrics;
        out.push_str(&format!(
            "{:<16} {:>6} {:>4} {:>9} {:>9.4} {:>9.2} {:>9.2} {:>9.2} {:>9.2}\n",
            r.variant.volume.as_str(),
            if r.variant.lrr { "yes" } else { "no" },
            if r.variant.intermediate { "yes" } else { "no" },
            r.params,
            m.epe,
            m.error1,
            m.error2,
            m.error3,
            m.d1
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_round_trip() {
        for v in full_grid() {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert_eq!(full_grid().len(), 20);
        assert_eq!(standard_grid().len(), 8);
    }

    #[test]
    fn bad_kind_lists_valid_kinds() {
        let msg = "cost+lrr".parse::<Variant>().unwrap_err().to_string();
        assert!(msg.contains("concat, corr, combine, afv, gtv"), "{msg}");
        assert!("gtv+xyz".parse::<Variant>().is_err());
    }
}

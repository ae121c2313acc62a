//! The full stereo network: shared feature pyramid, cost volume, shared 3D
//! aggregation for both views, top-k regression, optional left-right
//! refinement, and full-resolution recovery.

use tdstereo_tensor::{Tensor, Var};

use crate::aggregation::{AggregatedCosts, Aggregation};
use crate::cost_volume::{Reference, VolumeBuilder, VolumeKind};
use crate::disparity::DisparityMap;
use crate::error::{invalid, Error, Result};
use crate::features::{FeatureChannels, FeatureMaps, FeatureNet};
use crate::preprocess::pad_reflect;
use crate::lrr::{Lrr, LrrOutput};
use crate::params::{seeded_rng, ParamBuilder, ParamStore, Tape};
use crate::regression::{soft_argmin, topk_soft_argmin};
use crate::upsample::{DilatedRefine, Upsampler};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Disparity search range in full-resolution pixels; a multiple of 4.
    pub max_disp: usize,
    pub features: FeatureChannels,
    pub volume: VolumeKind,
    pub lrr: bool,
    /// Cost heads on the 1/8 and 1/16 decoder states.
    pub intermediate: bool,
    pub top_k: usize,
    pub refine_channels: usize,
    /// Seed of the weight initialisation.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            max_disp: 64,
            features: FeatureChannels::default(),
            volume: VolumeKind::Gtv,
            lrr: true,
            intermediate: true,
            top_k: 2,
            refine_channels: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn max_disp4(&self) -> usize {
        self.max_disp / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_disp == 0 || self.max_disp % 4 != 0 {
            return Err(Error::Config(format!(
                "max_disp must be a positive multiple of 4, got {}",
                self.max_disp
            )));
        }
        if self.top_k == 0 || self.top_k > self.max_disp4() {
            return Err(Error::Config(format!(
                "top_k must lie in 1..={}, got {}",
                self.max_disp4(),
                self.top_k
            )));
        }
        let f = &self.features;
        if [f.unary, f.quarter, f.eighth, f.sixteenth, self.refine_channels].contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Key-value view used by config files and checkpoint metadata.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let f = &self.features;
        [
            ("max_disp", self.max_disp.to_string()),
            ("unary_channels", f.unary.to_string()),
            ("quarter_channels", f.quarter.to_string()),
            ("eighth_channels", f.eighth.to_string()),
            ("sixteenth_channels", f.sixteenth.to_string()),
            ("volume", self.volume.to_string()),
            ("lrr", self.lrr.to_string()),
            ("intermediate", self.intermediate.to_string()),
            ("top_k", self.top_k.to_string()),
            ("refine_channels", self.refine_channels.to_string()),
            ("model_seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Applies one key; returns `false` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
        }
        match key {
            "max_disp" => self.max_disp = num(key, value)?,
            "unary_channels" => self.features.unary = num(key, value)?,
            "quarter_channels" => self.features.quarter = num(key, value)?,
            "eighth_channels" => self.features.eighth = num(key, value)?,
            "sixteenth_channels" => self.features.sixteenth = num(key, value)?,
            "volume" => self.volume = value.parse()?,
            "lrr" => self.lrr = num(key, value)?,
            "intermediate" => self.intermediate = num(key, value)?,
            "top_k" => self.top_k = num(key, value)?,
            "refine_channels" => self.refine_channels = num(key, value)?,
            "model_seed" => self.seed = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Regressed disparities (1/4-resolution units) of the intermediate heads.
#[derive(Debug, Clone, Copy)]
pub struct Heads {
    pub left8: Var,
    pub left16: Var,
    pub right8: Var,
    pub right16: Var,
}

#[derive(Debug, Clone)]
pub struct Forward {
    /// Final `H×W` disparity in full-resolution pixels.
    pub full: Var,
    /// `H/4×W/4` disparity fed to upsampling (refined when LRR is on).
    pub quarter: Var,
    /// Top-k regression of the left cost, before refinement.
    pub left_raw: Var,
    pub right_raw: Option<Var>,
    pub heads: Option<Heads>,
    pub lrr: Option<LrrOutput>,
    pub left_features: FeatureMaps,
    pub right_features: FeatureMaps,
    pub left_costs: AggregatedCosts,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub features: FeatureNet,
    pub volume: VolumeBuilder,
    pub aggregation: Aggregation,
    pub lrr: Option<Lrr>,
    pub upsample: Upsampler,
    pub refine: DilatedRefine,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub net: Network,
}

fn flip_maps(tape: &mut Tape, f: &FeatureMaps) -> Result<FeatureMaps> {
    Ok(FeatureMaps {
        unary: tape.flip(f.unary, 2)?,
        quarter: tape.flip(f.quarter, 2)?,
        eighth: tape.flip(f.eighth, 2)?,
        sixteenth: tape.flip(f.sixteenth, 2)?,
    })
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = seeded_rng(config.seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let c = config.features;
        let features = FeatureNet::new(&mut pb.scope("features"), c)?;
        let volume = VolumeBuilder::new(&mut pb.scope("volume"), config.volume, c.quarter)?;
        let aggregation = Aggregation::new(&mut pb.scope("aggregation"), config.volume.channels(c.quarter), c)?;
        let lrr = if config.lrr {
            Some(Lrr::new(&mut pb.scope("lrr"))?)
        } else {
            None
        };
        let upsample = Upsampler::new(&mut pb.scope("upsample"), c.unary)?;
        let refine = DilatedRefine::new(&mut pb.scope("refine"), config.refine_channels, config.max_disp)?;
        Ok(Self {
            config,
            params,
            net: Network {
                features,
                volume,
                aggregation,
                lrr,
                upsample,
                refine,
            },
        })
    }

    /// Records the forward pass on `tape`. Images are `3×H×W` with extents
    /// that are multiples of 16. Intermediate heads are only evaluated when
    /// `training` is set.
    pub fn forward(&self, tape: &mut Tape, left: Var, right: Var, training: bool) -> Result<Forward> {
        let cfg = &self.config;
        let ls = tape.shape(left).to_vec();
        if tape.shape(right) != ls.as_slice() {
            return Err(invalid(format!(
                "left image {ls:?} and right image {:?} differ in size",
                tape.shape(right)
            )));
        }
        let d4 = cfg.max_disp4();
        if ls.len() == 3 && d4 > ls[2] / 4 {
            return Err(invalid(format!(
                "max_disp {} exceeds the image width {}",
                cfg.max_disp, ls[2]
            )));
        }
        let net = &self.net;
        let (fl, fr) = net.features.extract(tape, left, right)?;
        let heads_on = cfg.intermediate && training;

        let vol_l = net.volume.build(tape, fl.quarter, fr.quarter, d4, Reference::Left)?;
        let costs_l = net.aggregation.forward(tape, vol_l.data, &fl, heads_on)?;
        let left_raw = topk_soft_argmin(tape, costs_l.quarter, cfg.top_k)?;

        // The right view runs the same aggregation in mirrored orientation.
        let costs_r = if cfg.lrr || heads_on {
            let vol_r = net.volume.build(tape, fr.quarter, fl.quarter, d4, Reference::Right)?;
            let v = tape.flip(vol_r.data, 3)?;
            let ctx = flip_maps(tape, &fr)?;
            let c = net.aggregation.forward(tape, v, &ctx, heads_on)?;
            let mut back = |x: Option<Var>| -> Result<Option<Var>> {
                x.map(|x| tape.flip(x, 2).map_err(Error::from)).transpose()
            };
            Some(AggregatedCosts {
                quarter: back(Some(c.quarter))?.expect("present"),
                eighth: back(c.eighth)?,
                sixteenth: back(c.sixteenth)?,
            })
        } else {
            None
        };
        let right_raw = match &costs_r {
            Some(c) => Some(topk_soft_argmin(tape, c.quarter, cfg.top_k)?),
            None => None,
        };

        let heads = if heads_on {
            let r = costs_r.as_ref().expect("right branch runs with heads");
            let mut reg = |c: Option<Var>| -> Result<Var> {
                soft_argmin(tape, c.expect("heads evaluated"), 1.0)
            };
            Some(Heads {
                left8: reg(costs_l.eighth)?,
                left16: reg(costs_l.sixteenth)?,
                right8: reg(r.eighth)?,
                right16: reg(r.sixteenth)?,
            })
        } else {
            None
        };

        let (quarter, lrr) = match (&net.lrr, right_raw) {
            (Some(m), Some(d_r)) => {
                let out = m.forward(tape, left_raw, d_r)?;
                (out.refined, Some(out))
            }
            _ => (left_raw, None),
        };
        let up = net.upsample.forward(tape, quarter, fl.unary)?;
        let full = net.refine.forward(tape, up, left)?;
        Ok(Forward {
            full,
            quarter,
            left_raw,
            right_raw,
            heads,
            lrr,
            left_features: fl,
            right_features: fr,
            left_costs: costs_l,
        })
    }

    /// Full-resolution disparity for an arbitrary-size pair of `3×H×W`
    /// images in [0, 1]; inputs are reflect-padded to multiples of 16.
    pub fn predict(&self, left: &Tensor, right: &Tensor) -> Result<DisparityMap> {
        if left.shape() != right.shape() || left.rank() != 3 || left.shape()[0] != 3 {
            return Err(invalid(format!(
                "images must both be 3×H×W of equal size, got {:?} and {:?}",
                left.shape(),
                right.shape()
            )));
        }
        let (h, w) = (left.shape()[1], left.shape()[2]);
        let (ph, pw) = (h.div_ceil(16) * 16, w.div_ceil(16) * 16);
        let mut tape = Tape::new(&self.params, false);
        let l = tape.constant(pad_reflect(left, ph, pw)?);
        let r = tape.constant(pad_reflect(right, ph, pw)?);
        let out = self.forward(&mut tape, l, r, false)?;
        let full = tape.value(out.full).clone();
        DisparityMap::dense(full)?.crop(h, w)
    }
}

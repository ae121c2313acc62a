//! Disparity-indexed 4D cost volumes built from 1/4-resolution features.
//!
//! Every builder works for either reference view. With the left image as
//! reference the target features are sampled at `x − d`; with the right image
//! as reference at `x + d`. Samples that fall outside the image are exactly 0.

use std::fmt;
use std::str::FromStr;

use tdstereo_tensor::{ConvSpec, CustomOp, Graph, Tensor, Var};

use crate::error::{invalid, Error, Result};
use crate::params::{Conv, Init, ParamBuilder, Tape};

/// Channel count of the attention-filtered volumes.
pub const VOLUME_CHANNELS: usize = 8;

/// Floor applied to feature norms before taking cosines.
pub const NORM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Reference {
    Left,
    Right,
}

impl Reference {
    /// Column of the target sample for reference column `x` at disparity `d`.
    fn source(self, x: usize, d: usize, width: usize) -> Option<usize> {
        match self {
            Reference::Left => x.checked_sub(d),
            Reference::Right => Some(x + d).filter(|&s| s < width),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sampling {
    /// Target features at the disparity-shifted column.
    Shifted,
    /// Features at the reference column itself, zeroed wherever the shifted
    /// sample would have been out of range.
    Masked,
}

fn check_disparities(shape: &[usize], max_disp4: usize) -> Result<()> {
    if shape.len() != 3 {
        return Err(invalid(format!("features must be C×H×W, got {shape:?}")));
    }
    if max_disp4 == 0 || max_disp4 > shape[2] {
        return Err(invalid(format!(
            "disparity range {max_disp4} must lie in 1..={} (feature width)",
            shape[2]
        )));
    }
    Ok(())
}

fn shift_forward(f: &Tensor, d4: usize, reference: Reference, sampling: Sampling) -> Tensor {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let src = f.data();
    let mut out = vec![0.0; c * d4 * h * w];
    for ch in 0..c {
        for d in 0..d4 {
            for y in 0..h {
                let row_out = ((ch * d4 + d) * h + y) * w;
                let row_in = (ch * h + y) * w;
                for x in 0..w {
                    if let Some(s) = reference.source(x, d, w) {
                        let from = match sampling {
                            Sampling::Shifted => s,
                            Sampling::Masked => x,
                        };
                        out[row_out + x] = src[row_in + from];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, d4, h, w], out).expect("shape matches data")
}

struct ShiftOp {
    d4: usize,
    reference: Reference,
    sampling: Sampling,
}

impl CustomOp for ShiftOp {
    fn name(&self) -> &'static str {
        "shift_volume"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> tdstereo_tensor::Result<Vec<Option<Tensor>>> {
        let shape = inputs[0].shape();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let d4 = self.d4;
        let go = grad.data();
        let mut gi = vec![0.0; c * h * w];
        for ch in 0..c {
            for d in 0..d4 {
                for y in 0..h {
                    let row_out = ((ch * d4 + d) * h + y) * w;
                    let row_in = (ch * h + y) * w;
                    for x in 0..w {
                        if let Some(s) = self.reference.source(x, d, w) {
                            let to = match self.sampling {
                                Sampling::Shifted => s,
                                Sampling::Masked => x,
                            };
                            gi[row_in + to] += go[row_out + x];
                        }
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::new(shape.to_vec(), gi)?)])
    }
}

fn sample(g: &mut Graph, f: Var, d4: usize, reference: Reference, sampling: Sampling) -> Result<Var> {
    check_disparities(g.shape(f), d4)?;
    let out = shift_forward(g.value(f), d4, reference, sampling);
    Ok(g.custom(
        &[f],
        out,
        Box::new(ShiftOp {
            d4,
            reference,
            sampling,
        }),
    )?)
}

/// `C×H×W` target features resampled into a `C×D×H×W` volume.
pub fn shift_volume(g: &mut Graph, f: Var, max_disp4: usize, reference: Reference) -> Result<Var> {
    sample(g, f, max_disp4, reference, Sampling::Shifted)
}

/// Reference features broadcast over disparity, zero wherever the matching
/// target sample is out of range.
pub fn masked_volume(g: &mut Graph, f: Var, max_disp4: usize, reference: Reference) -> Result<Var> {
    sample(g, f, max_disp4, reference, Sampling::Masked)
}

fn same_features(g: &Graph, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(invalid(format!(
            "reference features {:?} and target features {:?} differ in shape",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

/// Cosine similarity between reference and shifted target features, scaled
/// by `1 / VOLUME_CHANNELS`. Shape `1×D×H×W`.
pub fn correlation_volume(
    g: &mut Graph,
    f_ref: Var,
    f_tgt: Var,
    max_disp4: usize,
    reference: Reference,
) -> Result<Var> {
    same_features(g, f_ref, f_tgt)?;
    check_disparities(g.shape(f_ref), max_disp4)?;
    let unit = |g: &mut Graph, f: Var| -> Result<Var> {
        let n = g.l2_norm(f, 0, NORM_FLOOR)?;
        Ok(g.div(f, n)?)
    };
    let r = unit(g, f_ref)?;
    let t = unit(g, f_tgt)?;
    let t = shift_volume(g, t, max_disp4, reference)?;
    let s = g.shape(r).to_vec();
    let r = g.reshape(r, &[s[0], 1, s[1], s[2]])?;
    let prod = g.mul(r, t)?;
    let dot = g.sum_axis(prod, 0)?;
    Ok(g.scale(dot, 1.0 / VOLUME_CHANNELS as f64)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VolumeKind {
    Concat,
    Corr,
    Combine,
    Afv,
    Gtv,
}

impl VolumeKind {
    pub const ALL: [VolumeKind; 5] = [
        VolumeKind::Concat,
        VolumeKind::Corr,
        VolumeKind::Combine,
        VolumeKind::Afv,
        VolumeKind::Gtv,
    ];

    /// Channels of the volume handed to aggregation.
    pub fn channels(self, feature_channels: usize) -> usize {
        match self {
            VolumeKind::Concat | VolumeKind::Combine => 2 * feature_channels,
            VolumeKind::Corr | VolumeKind::Afv | VolumeKind::Gtv => VOLUME_CHANNELS,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VolumeKind::Concat => "concat",
            VolumeKind::Corr => "corr",
            VolumeKind::Combine => "combine",
            VolumeKind::Afv => "afv",
            VolumeKind::Gtv => "gtv",
        }
    }

    fn expands(self) -> bool {
        matches!(self, VolumeKind::Corr | VolumeKind::Afv | VolumeKind::Gtv)
    }

    fn compresses(self) -> bool {
        matches!(self, VolumeKind::Afv | VolumeKind::Gtv)
    }
}

impl fmt::Display for VolumeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VolumeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VolumeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown volume kind '{s}'; valid kinds are concat, corr, combine, afv, gtv"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CostVolume {
    pub data: Var,
    pub reference: Reference,
    pub kind: VolumeKind,
}

/// Learned pieces of volume construction: the pointwise 1→8 expansion of
/// the correlation volume and the pointwise C→8 feature compression.
#[derive(Debug, Clone)]
pub struct VolumeBuilder {
    pub kind: VolumeKind,
    pub expand: Option<Conv>,
    pub compress: Option<Conv>,
}

impl VolumeBuilder {
    /// The expansion starts as a replication of the correlation across all
    /// channels and the compression as a channel selection. Neither has a
    /// bias, so out-of-range entries stay exactly zero.
    pub fn new(pb: &mut ParamBuilder, kind: VolumeKind, feature_channels: usize) -> Result<Self> {
        let expand = if kind.expands() {
            Some(pb.conv(
                "expand",
                1,
                VOLUME_CHANNELS,
                &[1, 1, 1],
                ConvSpec::d3(),
                Init::Constant(1.0),
                None,
            )?)
        } else {
            None
        };
        let compress = if kind.compresses() {
            let c = feature_channels;
            let eye = Tensor::from_fn(vec![VOLUME_CHANNELS, c, 1, 1], |i| {
                let (o, k) = (i / c, i % c);
                if k == o % c {
                    1.0
                } else {
                    0.0
                }
            });
            Some(pb.conv(
                "compress",
                c,
                VOLUME_CHANNELS,
                &[1, 1],
                ConvSpec::d2(),
                Init::Exact(eye),
                None,
            )?)
        } else {
            None
        };
        Ok(Self {
            kind,
            expand,
            compress,
        })
    }

    /// Correlation attention: the expanded correlation volume.
    pub fn attention(
        &self,
        tape: &mut Tape,
        f_ref: Var,
        f_tgt: Var,
        max_disp4: usize,
        reference: Reference,
    ) -> Result<Var> {
        let expand = self
            .expand
            .as_ref()
            .ok_or_else(|| invalid(format!("{} volumes have no correlation expansion", self.kind)))?;
        let corr = correlation_volume(tape, f_ref, f_tgt, max_disp4, reference)?;
        expand.forward(tape, corr)
    }

    fn compressed(&self, tape: &mut Tape, f: Var) -> Result<Var> {
        let compress = self
            .compress
            .as_ref()
            .ok_or_else(|| invalid(format!("{} volumes have no feature compression", self.kind)))?;
        compress.forward(tape, f)
    }

    pub fn build(
        &self,
        tape: &mut Tape,
        f_ref: Var,
        f_tgt: Var,
        max_disp4: usize,
        reference: Reference,
    ) -> Result<CostVolume> {
        same_features(tape, f_ref, f_tgt)?;
        check_disparities(tape.shape(f_ref), max_disp4)?;
        let data = match self.kind {
            VolumeKind::Concat => concat_volume(tape, f_ref, f_tgt, max_disp4, reference)?,
            VolumeKind::Corr => self.attention(tape, f_ref, f_tgt, max_disp4, reference)?,
            VolumeKind::Combine => {
                let cat = concat_volume(tape, f_ref, f_tgt, max_disp4, reference)?;
                let corr = correlation_volume(tape, f_ref, f_tgt, max_disp4, reference)?;
                tape.mul(cat, corr)?
            }
            VolumeKind::Afv => {
                let a = self.attention(tape, f_ref, f_tgt, max_disp4, reference)?;
                let r = self.compressed(tape, f_ref)?;
                let r = masked_volume(tape, r, max_disp4, reference)?;
                tape.mul(a, r)?
            }
            VolumeKind::Gtv => {
                let a = self.attention(tape, f_ref, f_tgt, max_disp4, reference)?;
                let t = self.compressed(tape, f_tgt)?;
                let t = shift_volume(tape, t, max_disp4, reference)?;
                tape.mul(a, t)?
            }
        };
        Ok(CostVolume {
            data,
            reference,
            kind: self.kind,
        })
    }
}

/// Reference features stacked over shifted target features along channels.
pub fn concat_volume(
    g: &mut Graph,
    f_ref: Var,
    f_tgt: Var,
    max_disp4: usize,
    reference: Reference,
) -> Result<Var> {
    let r = masked_volume(g, f_ref, max_disp4, reference)?;
    let t = shift_volume(g, f_tgt, max_disp4, reference)?;
    Ok(g.concat(&[r, t], 0)?)
}

//! Left-right consistency refinement at 1/4 resolution.
//!
//! The right-view disparity is scattered into the left view; pixels nobody
//! lands on are occlusions. Agreement between the left disparity and the
//! warped right one drives an attention map that gates a multi-scale
//! residual correction of the left disparity.

use tdstereo_tensor::{ConvSpec, CustomOp, Graph, Tensor, Var};

use crate::cost_volume::NORM_FLOOR;
use crate::disparity::DisparityMap;
use crate::error::{invalid, Result};
use crate::features::LEAKY_SLOPE;
use crate::params::{Conv, Init, ParamBuilder, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpDirection {
    /// Right-view disparities move to `x + d` in the left view.
    RightToLeft,
    /// Left-view disparities move to `x − d` in the right view.
    LeftToRight,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Warped {
    pub values: Tensor,
    /// 1 where some source pixel landed, 0 on holes.
    pub mask: Tensor,
    /// For each target pixel, the flat index of the winning source.
    pub sources: Vec<Option<usize>>,
}

impl Warped {
    pub fn to_map(&self) -> Result<DisparityMap> {
        DisparityMap::new(self.values.clone(), self.mask.clone())
    }
}

/// Scatters every valid source disparity to its rounded target column.
/// Targets outside the image are dropped; on collision the larger disparity
/// wins, and among equal disparities the first source in row order.
pub fn scatter_warp(values: &Tensor, valid: Option<&Tensor>, direction: WarpDirection) -> Result<Warped> {
    if values.rank() != 2 {
        return Err(invalid(format!("disparity must be H×W, got {:?}", values.shape())));
    }
    if let Some(v) = valid {
        if v.shape() != values.shape() {
            return Err(invalid("validity mask shape differs from disparity"));
        }
    }
    let (h, w) = (values.shape()[0], values.shape()[1]);
    let data = values.data();
    let mut out = vec![0.0; h * w];
    let mut sources: Vec<Option<usize>> = vec![None; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if valid.is_some_and(|v| v.data()[i] == 0.0) {
                continue;
            }
            let d = data[i];
            if d < 0.0 {
                return Err(invalid(format!("negative disparity {d} at ({y}, {x})")));
            }
            let t = match direction {
                WarpDirection::RightToLeft => (x as f64 + d).round(),
                WarpDirection::LeftToRight => (x as f64 - d).round(),
            };
            if t < 0.0 || t > (w - 1) as f64 {
                continue;
            }
            let j = y * w + t as usize;
            let wins = match sources[j] {
                None => true,
                Some(_) => d > out[j],
            };
            if wins {
                out[j] = d;
                sources[j] = Some(i);
            }
        }
    }
    let mask = sources.iter().map(|s| if s.is_some() { 1.0 } else { 0.0 }).collect();
    Ok(Warped {
        values: Tensor::new(vec![h, w], out)?,
        mask: Tensor::new(vec![h, w], mask)?,
        sources,
    })
}

/// Forward-warps a disparity map, keeping only valid source pixels.
pub fn forward_warp(d: &DisparityMap, direction: WarpDirection) -> Result<Warped> {
    scatter_warp(d.values(), Some(d.valid()), direction)
}

struct WarpOp {
    sources: Vec<Option<usize>>,
}

impl CustomOp for WarpOp {
    fn name(&self) -> &'static str {
        "forward_warp"
    }

    // Straight-through on values; the scatter positions are not differentiated.
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> tdstereo_tensor::Result<Vec<Option<Tensor>>> {
        let mut gi = vec![0.0; inputs[0].len()];
        for (t, s) in self.sources.iter().enumerate() {
            if let Some(s) = *s {
                gi[s] += grad.data()[t];
            }
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), gi)?)])
    }
}

/// Differentiable forward warp of a dense `H×W` disparity. Returns the
/// warped values and the 0/1 mask of touched pixels.
pub fn warp_var(g: &mut Graph, d: Var, direction: WarpDirection) -> Result<(Var, Tensor)> {
    let w = scatter_warp(g.value(d), None, direction)?;
    let v = g.custom(&[d], w.values, Box::new(WarpOp { sources: w.sources }))?;
    Ok((v, w.mask))
}

#[derive(Debug, Clone)]
struct RefineLayer {
    k3: Conv,
    k5: Conv,
    k7: Conv,
    fuse: Conv,
}

impl RefineLayer {
    fn new(pb: &mut ParamBuilder, name: &str, ch: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        let he = || Init::He { slope: LEAKY_SLOPE };
        let mut branch = |n: &str, k: usize| {
            s.conv(n, ch, ch, &[k, k], ConvSpec::d2().padding(k / 2), he(), Some(Init::Zeros))
        };
        let k3 = branch("k3", 3)?;
        let k5 = branch("k5", 5)?;
        let k7 = branch("k7", 7)?;
        let fuse = s.conv("fuse", 3 * ch, ch, &[5, 5], ConvSpec::d2().padding(2), he(), Some(Init::Zeros))?;
        Ok(Self { k3, k5, k7, fuse })
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let a = self.k3.forward_leaky(tape, x, LEAKY_SLOPE)?;
        let b = self.k5.forward_leaky(tape, x, LEAKY_SLOPE)?;
        let c = self.k7.forward_leaky(tape, x, LEAKY_SLOPE)?;
        let cat = tape.concat(&[a, b, c], 0)?;
        self.fuse.forward_leaky(tape, cat, LEAKY_SLOPE)
    }
}

pub const CONSISTENCY_CHANNELS: usize = 6;
pub const ATTENTION_CHANNELS: usize = 8;

#[derive(Debug, Clone)]
pub struct Lrr {
    point: Conv,
    expand: Conv,
    attend: Conv,
    layers: Vec<RefineLayer>,
    compress: Conv,
}

#[derive(Debug, Clone)]
pub struct LrrOutput {
    pub refined: Var,
    pub warped: Var,
    pub mask: Tensor,
    pub consistency: Var,
    pub attention: Var,
}

fn as_channel(tape: &mut Tape, v: Var) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    if s.len() != 2 {
        return Err(invalid(format!("expected an H×W map, got {s:?}")));
    }
    Ok(tape.reshape(v, &[1, s[0], s[1]])?)
}

impl Lrr {
    pub fn new(pb: &mut ParamBuilder) -> Result<Self> {
        let c = ATTENTION_CHANNELS;
        // A bias keeps the two expansions from being trivially parallel.
        let point = pb.conv(
            "point",
            1,
            CONSISTENCY_CHANNELS,
            &[1, 1],
            ConvSpec::d2(),
            Init::He { slope: 1.0 },
            Some(Init::Uniform { low: -1.0, high: 1.0 }),
        )?;
        let expand = pb.conv(
            "expand",
            2,
            c,
            &[1, 1],
            ConvSpec::d2(),
            Init::He { slope: 1.0 },
            Some(Init::Zeros),
        )?;
        let attend = pb.conv(
            "attend",
            c,
            c,
            &[5, 5],
            ConvSpec::d2().padding(2),
            Init::He { slope: 1.0 },
            Some(Init::Zeros),
        )?;
        let layers = (0..3)
            .map(|i| RefineLayer::new(pb, &format!("refine{i}"), c))
            .collect::<Result<_>>()?;
        let compress = pb.conv(
            "compress",
            c,
            1,
            &[3, 3],
            ConvSpec::d2().padding(1),
            Init::Zeros,
            Some(Init::Zeros),
        )?;
        Ok(Self {
            point,
            expand,
            attend,
            layers,
            compress,
        })
    }

    /// Per-pixel cosine between the shared 6-channel expansions of the two
    /// `H×W` disparities.
    pub fn consistency_map(&self, tape: &mut Tape, d_l: Var, warped: Var) -> Result<Var> {
        if tape.shape(d_l) != tape.shape(warped) {
            return Err(invalid(format!(
                "left disparity {:?} and warped right disparity {:?} differ in shape",
                tape.shape(d_l),
                tape.shape(warped)
            )));
        }
        let l = as_channel(tape, d_l)?;
        let r = as_channel(tape, warped)?;
        let e_l = self.point.forward(tape, l)?;
        let e_r = self.point.forward(tape, r)?;
        let prod = tape.mul(e_l, e_r)?;
        let dot = tape.sum_axis(prod, 0)?;
        let n_l = tape.l2_norm(e_l, 0, NORM_FLOOR)?;
        let n_r = tape.l2_norm(e_r, 0, NORM_FLOOR)?;
        let denom = tape.mul(n_l, n_r)?;
        let c = tape.div(dot, denom)?;
        let s = tape.shape(d_l).to_vec();
        Ok(tape.reshape(c, &s)?)
    }

    /// `tanh(conv5×5(expand(d_l, c_lr) ⊙ mask))`, shape `8×H×W`.
    pub fn consistency_attention(&self, tape: &mut Tape, d_l: Var, c_lr: Var, mask: Var) -> Result<Var> {
        let l = as_channel(tape, d_l)?;
        let c = as_channel(tape, c_lr)?;
        let m = as_channel(tape, mask)?;
        let x = tape.concat(&[l, c], 0)?;
        let x = self.expand.forward(tape, x)?;
        let x = tape.mul(x, m)?;
        let x = self.attend.forward(tape, x)?;
        Ok(tape.tanh(x)?)
    }

    /// `relu(d_l + residual)` where the residual comes from the
    /// attention-filtered disparity.
    pub fn refine(&self, tape: &mut Tape, d_l: Var, a_lr: Var) -> Result<Var> {
        let l = as_channel(tape, d_l)?;
        let mut x = tape.mul(a_lr, l)?;
        for layer in &self.layers {
            x = layer.forward(tape, x)?;
        }
        let r = self.compress.forward(tape, x)?;
        let s = tape.shape(d_l).to_vec();
        let r = tape.reshape(r, &s)?;
        let y = tape.add(d_l, r)?;
        Ok(tape.relu(y)?)
    }

    pub fn forward(&self, tape: &mut Tape, d_l: Var, d_r: Var) -> Result<LrrOutput> {
        let (warped, mask) = warp_var(tape, d_r, WarpDirection::RightToLeft)?;
        let m = tape.constant(mask.clone());
        let consistency = self.consistency_map(tape, d_l, warped)?;
        let attention = self.consistency_attention(tape, d_l, consistency, m)?;
        let refined = self.refine(tape, d_l, attention)?;
        Ok(LrrOutput {
            refined,
            warped,
            mask,
            consistency,
            attention,
        })
    }
}

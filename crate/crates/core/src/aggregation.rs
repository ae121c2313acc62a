//! 3D hourglass aggregation of a 1/4-resolution cost volume, gated by image
//! context at 1/4, 1/8 and 1/16 resolution, with optional cost heads on the
//! coarse decoder states.

use tdstereo_tensor::{ConvSpec, Tensor, Var};

use crate::error::{invalid, Result};
use crate::features::{FeatureChannels, FeatureMaps, LEAKY_SLOPE};
use crate::params::{Conv, Init, ParamBuilder, Tape};

/// Context-gated residual: `state + state ⊙ σ(proj(context))`, the gate
/// broadcast over disparity. The projection starts at zero (gate 0.5).
#[derive(Debug, Clone)]
struct Fusion {
    proj: Conv,
}

impl Fusion {
    fn new(pb: &mut ParamBuilder, name: &str, context: usize, channels: usize) -> Result<Self> {
        let proj = pb.conv(
            name,
            context,
            channels,
            &[1, 1],
            ConvSpec::d2(),
            Init::Zeros,
            Some(Init::Zeros),
        )?;
        Ok(Self { proj })
    }

    fn forward(&self, tape: &mut Tape, state: Var, context: Var) -> Result<Var> {
        let s = tape.shape(state).to_vec();
        let c = tape.shape(context).to_vec();
        if c[1..] != s[2..] {
            return Err(invalid(format!(
                "context {c:?} does not match cost state {s:?} spatially"
            )));
        }
        let gate = self.proj.forward(tape, context)?;
        let gate = tape.reshape(gate, &[s[0], 1, s[2], s[3]])?;
        let gate = tape.sigmoid(gate)?;
        let gated = tape.mul(state, gate)?;
        Ok(tape.add(state, gated)?)
    }
}

/// Weights of a transposed convolution performing separable bilinear
/// interpolation in the spatial plane.
fn bilinear_kernel(k: usize) -> Tensor {
    let factor = k.div_ceil(2) as f64;
    let center = if k % 2 == 1 { factor - 1.0 } else { factor - 0.5 };
    let tap = |i: usize| 1.0 - (i as f64 - center).abs() / factor;
    Tensor::from_fn(vec![1, 1, 1, k, k], |i| tap(i / k) * tap(i % k))
}

#[derive(Debug, Clone)]
struct Head {
    cost: Conv,
    up: Conv,
}

impl Head {
    fn new(pb: &mut ParamBuilder, name: &str, channels: usize, factor: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        let cost = s.conv(
            "cost",
            channels,
            1,
            &[3, 3, 3],
            ConvSpec::d3().padding(1),
            Init::He { slope: 1.0 },
            Some(Init::Zeros),
        )?;
        let k = 2 * factor;
        let up = s.conv(
            "up",
            1,
            1,
            &[1, k, k],
            ConvSpec::d3()
                .stride3([1, factor, factor])
                .padding3([0, factor / 2, factor / 2])
                .transposed(),
            Init::Exact(bilinear_kernel(k)),
            None,
        )?;
        Ok(Self { cost, up })
    }

    fn forward(&self, tape: &mut Tape, state: Var) -> Result<Var> {
        let c = self.cost.forward(tape, state)?;
        let c = self.up.forward(tape, c)?;
        squeeze_channel(tape, c)
    }
}

fn squeeze_channel(tape: &mut Tape, v: Var) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    Ok(tape.reshape(v, &s[1..])?)
}

#[derive(Debug, Clone, Copy)]
pub struct AggregatedCosts {
    /// `D×H/4×W/4` final cost.
    pub quarter: Var,
    /// Costs from the 1/8 and 1/16 decoder states, brought to 1/4 scale.
    pub eighth: Option<Var>,
    pub sixteenth: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Aggregation {
    stem: Conv,
    s0: Conv,
    down1: Conv,
    s1: Conv,
    down2: Conv,
    s2: Conv,
    up1: Conv,
    up0: Conv,
    fuse16: Fusion,
    fuse8: Fusion,
    fuse4: Fusion,
    post: Conv,
    out: Conv,
    head8: Head,
    head16: Head,
}

impl Aggregation {
    pub const WIDTHS: [usize; 3] = [8, 16, 32];

    pub fn new(pb: &mut ParamBuilder, volume_channels: usize, ctx: FeatureChannels) -> Result<Self> {
        let [c0, c1, c2] = Self::WIDTHS;
        let he = || Init::He { slope: LEAKY_SLOPE };
        let b = || Some(Init::Zeros);
        let k3 = ConvSpec::d3().padding(1);
        let down = ConvSpec::d3().stride3([1, 2, 2]).padding(1);
        let up = ConvSpec::d3().stride3([1, 2, 2]).padding(1).transposed();
        Ok(Self {
            stem: pb.conv(
                "stem",
                volume_channels,
                c0,
                &[1, 5, 5],
                ConvSpec::d3().padding3([0, 2, 2]),
                he(),
                b(),
            )?,
            s0: pb.conv("s0", c0, c0, &[3, 3, 3], k3.clone(), he(), b())?,
            down1: pb.conv("down1", c0, c1, &[3, 3, 3], down.clone(), he(), b())?,
            s1: pb.conv("s1", c1, c1, &[3, 3, 3], k3.clone(), he(), b())?,
            down2: pb.conv("down2", c1, c2, &[3, 3, 3], down, he(), b())?,
            s2: pb.conv("s2", c2, c2, &[3, 3, 3], k3.clone(), he(), b())?,
            up1: pb.conv("up1", c2, c1, &[3, 4, 4], up.clone(), he(), b())?,
            up0: pb.conv("up0", c1, c0, &[3, 4, 4], up, he(), b())?,
            fuse16: Fusion::new(pb, "fuse16", ctx.sixteenth, c2)?,
            fuse8: Fusion::new(pb, "fuse8", ctx.eighth, c1)?,
            fuse4: Fusion::new(pb, "fuse4", ctx.quarter, c0)?,
            post: pb.conv("post", c0, c0, &[3, 3, 3], k3.clone(), he(), b())?,
            out: pb.conv("out", c0, 1, &[3, 3, 3], k3, Init::He { slope: 1.0 }, b())?,
            head8: Head::new(pb, "head8", c1, 2)?,
            head16: Head::new(pb, "head16", c2, 4)?,
        })
    }

    /// `volume` is `C×D×H/4×W/4`; `context` comes from the same view as the
    /// volume's reference and must be in the same orientation.
    pub fn forward(&self, tape: &mut Tape, volume: Var, context: &FeatureMaps, heads: bool) -> Result<AggregatedCosts> {
        let vs = tape.shape(volume).to_vec();
        let cs = tape.shape(context.quarter).to_vec();
        if vs.len() != 4 || cs.len() != 3 || vs[2..] != cs[1..] {
            return Err(invalid(format!(
                "cost volume {vs:?} and 1/4 context {cs:?} disagree in spatial shape"
            )));
        }
        if vs[2] % 4 != 0 || vs[3] % 4 != 0 {
            return Err(invalid(format!("cost volume extents {vs:?} must be divisible by 4")));
        }
        let leaky = |tape: &mut Tape, c: &Conv, x: Var| c.forward_leaky(tape, x, LEAKY_SLOPE);
        let x = leaky(tape, &self.stem, volume)?;
        let s0 = leaky(tape, &self.s0, x)?;
        let x = leaky(tape, &self.down1, s0)?;
        let s1 = leaky(tape, &self.s1, x)?;
        let x = leaky(tape, &self.down2, s1)?;
        let s2 = leaky(tape, &self.s2, x)?;
        let s2 = self.fuse16.forward(tape, s2, context.sixteenth)?;

        let x = leaky(tape, &self.up1, s2)?;
        let u1 = tape.add(x, s1)?;
        let u1 = self.fuse8.forward(tape, u1, context.eighth)?;
        let x = leaky(tape, &self.up0, u1)?;
        let u0 = tape.add(x, s0)?;
        let u0 = self.fuse4.forward(tape, u0, context.quarter)?;

        let x = leaky(tape, &self.post, u0)?;
        let cost = self.out.forward(tape, x)?;
        let quarter = squeeze_channel(tape, cost)?;
        let (eighth, sixteenth) = if heads {
            (
                Some(self.head8.forward(tape, u1)?),
                Some(self.head16.forward(tape, s2)?),
            )
        } else {
            (None, None)
        };
        Ok(AggregatedCosts {
            quarter,
            eighth,
            sixteenth,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_taps() {
        let k = bilinear_kernel(4);
        // First row is tap(0)·tap(j) with tap(0) = 0.25.
        let row: Vec<f64> = (0..4).map(|j| k.data()[j] / 0.25).collect();
        assert_eq!(row, vec![0.25, 0.75, 0.75, 0.25]);
        // Columns of an upsampling kernel sum to one per output phase.
        let k8 = bilinear_kernel(8);
        let taps: Vec<f64> = (0..8).map(|j| k8.data()[j] / 0.125).collect();
        assert!((taps[0] + taps[4] - 1.0).abs() < 1e-15);
    }
}

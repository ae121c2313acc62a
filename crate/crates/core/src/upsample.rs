//! Full-resolution recovery: a learned convex combination of the 3×3
//! quarter-resolution neighbourhood around each pixel's source cell, then a
//! dilated residual refinement guided by the left image.

use tdstereo_tensor::{ConvSpec, CustomOp, Graph, Tensor, Var};

use crate::error::{invalid, Result};
use crate::features::LEAKY_SLOPE;
use crate::params::{Conv, Init, ParamBuilder, Tape};

pub const FACTOR: usize = 4;

/// Flat quarter-resolution index of neighbour `n` (row-major over the 3×3
/// offsets, centre = 4) of full-resolution pixel `(y, x)`, clamped at borders.
pub fn neighbour(n: usize, y: usize, x: usize, h: usize, w: usize) -> usize {
    let dy = (n / 3) as isize - 1;
    let dx = (n % 3) as isize - 1;
    let qy = ((y / FACTOR) as isize + dy).clamp(0, h as isize - 1) as usize;
    let qx = ((x / FACTOR) as isize + dx).clamp(0, w as isize - 1) as usize;
    qy * w + qx
}

fn check(quarter: &[usize], weights: &[usize]) -> Result<()> {
    if quarter.len() != 2 || weights.len() != 3 || weights[0] != 9 {
        return Err(invalid(format!(
            "upsampling needs an H×W disparity and 9×4H×4W weights, got {quarter:?} and {weights:?}"
        )));
    }
    if weights[1] != FACTOR * quarter[0] || weights[2] != FACTOR * quarter[1] {
        return Err(invalid(format!(
            "weights {}×{} are not {FACTOR}× the disparity resolution {}×{}",
            weights[1], weights[2], quarter[0], quarter[1]
        )));
    }
    Ok(())
}

/// `4 · Σ_n w_n · d(neighbour_n)` per full-resolution pixel.
pub fn upsample_tensor(d: &Tensor, weights: &Tensor) -> Result<Tensor> {
    check(d.shape(), weights.shape())?;
    let (h, w) = (d.shape()[0], d.shape()[1]);
    let (hf, wf) = (weights.shape()[1], weights.shape()[2]);
    let plane = hf * wf;
    let mut out = vec![0.0; plane];
    for y in 0..hf {
        for x in 0..wf {
            let p = y * wf + x;
            let mut acc = 0.0;
            for n in 0..9 {
                acc += weights.data()[n * plane + p] * d.data()[neighbour(n, y, x, h, w)];
            }
            out[p] = FACTOR as f64 * acc;
        }
    }
    Ok(Tensor::new(vec![hf, wf], out)?)
}

struct UpsampleOp;

impl CustomOp for UpsampleOp {
    fn name(&self) -> &'static str {
        "neighbourhood_upsample"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> tdstereo_tensor::Result<Vec<Option<Tensor>>> {
        let (d, wts) = (inputs[0], inputs[1]);
        let (h, w) = (d.shape()[0], d.shape()[1]);
        let (hf, wf) = (wts.shape()[1], wts.shape()[2]);
        let plane = hf * wf;
        let f = FACTOR as f64;
        let mut gd = vec![0.0; d.len()];
        let mut gw = vec![0.0; wts.len()];
        for y in 0..hf {
            for x in 0..wf {
                let p = y * wf + x;
                let g = grad.data()[p] * f;
                for n in 0..9 {
                    let q = neighbour(n, y, x, h, w);
                    gd[q] += g * wts.data()[n * plane + p];
                    gw[n * plane + p] = g * d.data()[q];
                }
            }
        }
        Ok(vec![
            Some(Tensor::new(d.shape().to_vec(), gd)?),
            Some(Tensor::new(wts.shape().to_vec(), gw)?),
        ])
    }
}

/// Differentiable upsampling of a quarter-resolution disparity with
/// per-pixel convex weights (`9×4H×4W`).
pub fn upsample_var(g: &mut Graph, d: Var, weights: Var) -> Result<Var> {
    let out = upsample_tensor(g.value(d), g.value(weights))?;
    Ok(g.custom(&[d, weights], out, Box::new(UpsampleOp))?)
}

#[derive(Debug, Clone)]
pub struct Upsampler {
    logits: Conv,
}

impl Upsampler {
    /// Zero-initialised logits start as a uniform 3×3 average.
    pub fn new(pb: &mut ParamBuilder, unary_channels: usize) -> Result<Self> {
        let logits = pb.conv(
            "logits",
            unary_channels,
            9,
            &[3, 3],
            ConvSpec::d2().padding(1),
            Init::Zeros,
            Some(Init::Zeros),
        )?;
        Ok(Self { logits })
    }

    pub fn weights(&self, tape: &mut Tape, unary: Var) -> Result<Var> {
        let l = self.logits.forward(tape, unary)?;
        Ok(tape.softmax(l, 0)?)
    }

    pub fn forward(&self, tape: &mut Tape, d_quarter: Var, unary: Var) -> Result<Var> {
        let w = self.weights(tape, unary)?;
        upsample_var(tape, d_quarter, w)
    }
}

pub const REFINE_DILATIONS: [usize; 6] = [1, 2, 4, 8, 1, 1];

/// Residual refinement over `{d / max_disp, left image}` with a stack of
/// dilated 3×3 convolutions; the last layer starts at zero.
#[derive(Debug, Clone)]
pub struct DilatedRefine {
    layers: Vec<Conv>,
    out: Conv,
    disp_norm: f64,
}

impl DilatedRefine {
    pub fn new(pb: &mut ParamBuilder, channels: usize, max_disp: usize) -> Result<Self> {
        let mut layers = Vec::new();
        let mut cin = 4;
        for (i, &dil) in REFINE_DILATIONS.iter().enumerate() {
            layers.push(pb.conv(
                &format!("layer{i}"),
                cin,
                channels,
                &[3, 3],
                ConvSpec::d2().dilation(dil).padding(dil),
                Init::He { slope: LEAKY_SLOPE },
                Some(Init::Zeros),
            )?);
            cin = channels;
        }
        let out = pb.conv(
            "out",
            channels,
            1,
            &[3, 3],
            ConvSpec::d2().padding(1),
            Init::Zeros,
            Some(Init::Zeros),
        )?;
        Ok(Self {
            layers,
            out,
            disp_norm: 1.0 / max_disp.max(1) as f64,
        })
    }

    /// Pixels of an output beyond which a single input pixel has no effect.
    pub fn receptive_radius() -> usize {
        REFINE_DILATIONS.iter().sum::<usize>() + 1
    }

    pub fn forward(&self, tape: &mut Tape, d_full: Var, left: Var) -> Result<Var> {
        let s = tape.shape(d_full).to_vec();
        let ls = tape.shape(left).to_vec();
        if s.len() != 2 || ls.len() != 3 || ls[1..] != s[..] {
            return Err(invalid(format!(
                "disparity {s:?} and left image {ls:?} differ in resolution"
            )));
        }
        let d = tape.reshape(d_full, &[1, s[0], s[1]])?;
        let d = tape.scale(d, self.disp_norm)?;
        let mut x = tape.concat(&[d, left], 0)?;
        for layer in &self.layers {
            x = layer.forward_leaky(tape, x, LEAKY_SLOPE)?;
        }
        let r = self.out.forward(tape, x)?;
        let r = tape.reshape(r, &s)?;
        let y = tape.add(d_full, r)?;
        Ok(tape.relu(y)?)
    }
}

//! 2D and 3D convolution, direct and transposed.
//!
//! Inputs carry no batch axis: rank-2 convolutions take `C×H×W`, rank-3 take
//! `C×D×H×W`. Kernels are `O×C×k…` for direct convolution and `C×O×k…` for
//! transposed convolution, so a transposed convolution with kernel `K` is the
//! adjoint of the direct convolution with the same `K`.
//!
//! Both directions lower to `im2col`/`col2im` plus a dense matrix product.
//! Rank-2 work is carried out as rank-3 work with a unit depth.

use crate::error::{invalid, Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvRank {
    Two,
    Three,
}

impl ConvRank {
    fn spatial(self) -> usize {
        match self {
            ConvRank::Two => 2,
            ConvRank::Three => 3,
        }
    }
}

/// Convolution hyper-parameters. Per-axis arrays are ordered `(D, H, W)`;
/// the depth entry is ignored for rank-2 convolutions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub rank: ConvRank,
    pub stride: [usize; 3],
    pub dilation: [usize; 3],
    pub padding: [usize; 3],
    pub output_padding: [usize; 3],
    pub transposed: bool,
}

impl ConvSpec {
    pub fn new(rank: ConvRank) -> Self {
        Self {
            rank,
            stride: [1; 3],
            dilation: [1; 3],
            padding: [0; 3],
            output_padding: [0; 3],
            transposed: false,
        }
    }

    pub fn d2() -> Self {
        Self::new(ConvRank::Two)
    }

    pub fn d3() -> Self {
        Self::new(ConvRank::Three)
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = [s; 3];
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = [p; 3];
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = [d; 3];
        self
    }

    pub fn output_padding(mut self, p: usize) -> Self {
        self.output_padding = [p; 3];
        self
    }

    pub fn stride3(mut self, s: [usize; 3]) -> Self {
        self.stride = s;
        self
    }

    pub fn padding3(mut self, p: [usize; 3]) -> Self {
        self.padding = p;
        self
    }

    pub fn output_padding3(mut self, p: [usize; 3]) -> Self {
        self.output_padding = p;
        self
    }

    pub fn transposed(mut self) -> Self {
        self.transposed = true;
        self
    }

    /// Effective per-axis parameters with the depth axis neutralised for
    /// rank-2 convolutions.
    fn normalized(&self) -> ([usize; 3], [usize; 3], [usize; 3], [usize; 3]) {
        let mut s = self.stride;
        let mut d = self.dilation;
        let mut p = self.padding;
        let mut op = self.output_padding;
        if self.rank == ConvRank::Two {
            s[0] = 1;
            d[0] = 1;
            p[0] = 0;
            op[0] = 0;
        }
        (s, d, p, op)
    }
}

/// Placement of a kernel over an image: `image` is what `col2im` writes and
/// `grid` is the set of kernel positions (columns of the patch matrix).
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ColGeometry {
    channels: usize,
    image: [usize; 3],
    grid: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    dil: [usize; 3],
}

impl ColGeometry {
    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    fn grid_volume(&self) -> usize {
        self.grid.iter().product()
    }

    fn is_identity(&self) -> bool {
        self.kernel_volume() == 1 && self.stride == [1; 3] && self.pad == [0; 3]
    }
}

/// Fully resolved shapes of one convolution call.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGeometry {
    rank: ConvRank,
    transposed: bool,
    in_channels: usize,
    out_channels: usize,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    col: ColGeometry,
}

impl ConvGeometry {
    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn resolve(input: &[usize], kernel: &[usize], spec: &ConvSpec) -> Result<Self> {
        let spatial = spec.rank.spatial();
        let mismatch = |dim: &str, expected: usize, got: usize| TensorError::ShapeMismatch {
            op: "convolve",
            dim: dim.to_string(),
            expected,
            got,
        };
        if input.len() != spatial + 1 {
            return Err(mismatch("input rank", spatial + 1, input.len()));
        }
        if kernel.len() != spatial + 2 {
            return Err(mismatch("kernel rank", spatial + 2, kernel.len()));
        }
        let (stride, dil, pad, out_pad) = spec.normalized();
        if stride.iter().chain(&dil).any(|&v| v == 0) {
            return Err(invalid("convolve", "stride and dilation must be at least 1"));
        }
        let lift = |s: &[usize]| -> [usize; 3] {
            match spatial {
                2 => [1, s[0], s[1]],
                _ => [s[0], s[1], s[2]],
            }
        };
        let in_dims = lift(&input[1..]);
        let k = lift(&kernel[2..]);
        let axis_names = ["depth", "height", "width"];
        let (in_channels, out_channels) = if spec.transposed {
            (kernel[0], kernel[1])
        } else {
            (kernel[1], kernel[0])
        };
        if input[0] != in_channels {
            return Err(mismatch("input channels", in_channels, input[0]));
        }
        let mut out_dims = [0; 3];
        for a in 0..3 {
            let reach = dil[a] * (k[a] - 1) + 1;
            if k[a] == 0 {
                return Err(invalid("convolve", format!("zero kernel {}", axis_names[a])));
            }
            if spec.transposed {
                if out_pad[a] >= stride[a].max(dil[a]) {
                    return Err(invalid(
                        "convolve",
                        format!(
                            "output padding {} along {} must be smaller than stride or dilation",
                            out_pad[a], axis_names[a]
                        ),
                    ));
                }
                let full = (in_dims[a] - 1) * stride[a] + reach + out_pad[a];
                if in_dims[a] == 0 || full <= 2 * pad[a] {
                    return Err(invalid(
                        "convolve",
                        format!("transposed output {} would be empty", axis_names[a]),
                    ));
                }
                out_dims[a] = full - 2 * pad[a];
            } else {
                let padded = in_dims[a] + 2 * pad[a];
                if padded < reach {
                    return Err(invalid(
                        "convolve",
                        format!(
                            "kernel reach {reach} exceeds padded input {} {padded}",
                            axis_names[a]
                        ),
                    ));
                }
                out_dims[a] = (padded - reach) / stride[a] + 1;
            }
        }
        let lower = |d: [usize; 3]| -> Vec<usize> {
            match spatial {
                2 => vec![d[1], d[2]],
                _ => d.to_vec(),
            }
        };
        let mut output_shape = vec![out_channels];
        output_shape.extend(lower(out_dims));
        let col = if spec.transposed {
            ColGeometry {
                channels: out_channels,
                image: out_dims,
                grid: in_dims,
                kernel: k,
                stride,
                pad,
                dil,
            }
        } else {
            ColGeometry {
                channels: in_channels,
                image: in_dims,
                grid: out_dims,
                kernel: k,
                stride,
                pad,
                dil,
            }
        };
        Ok(Self {
            rank: spec.rank,
            transposed: spec.transposed,
            in_channels,
            out_channels,
            input_shape: input.to_vec(),
            output_shape,
            col,
        })
    }
}

/// First valid and one-past-last grid index along an axis for kernel tap
/// offset `off` (image index = grid * stride + off).
fn valid_range(off: isize, stride: usize, grid: usize, image: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let last = image as isize - 1 - off;
    let hi = if last < 0 { 0 } else { (last / s + 1).min(grid as isize) };
    (lo as usize, (hi.max(lo)) as usize)
}

fn for_each_patch_row(g: &ColGeometry, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    // f(col_row_offset, image_row_offset, ow_lo, ow_hi, w_off) over every
    // (channel, tap, od, oh) with in-range depth and height.
    let [gd, gh, gw] = g.grid;
    let [id, ih, iw] = g.image;
    let [kd, kh, kw] = g.kernel;
    let gvol = g.grid_volume();
    let mut row = 0;
    for c in 0..g.channels {
        for a in 0..kd {
            let off_d = (a * g.dil[0]) as isize - g.pad[0] as isize;
            let (d_lo, d_hi) = valid_range(off_d, g.stride[0], gd, id);
            for b in 0..kh {
                let off_h = (b * g.dil[1]) as isize - g.pad[1] as isize;
                let (h_lo, h_hi) = valid_range(off_h, g.stride[1], gh, ih);
                for e in 0..kw {
                    let off_w = (e * g.dil[2]) as isize - g.pad[2] as isize;
                    let (w_lo, w_hi) = valid_range(off_w, g.stride[2], gw, iw);
                    if w_lo < w_hi {
                        for od in d_lo..d_hi {
                            let zd = (od * g.stride[0]) as isize + off_d;
                            for oh in h_lo..h_hi {
                                let zh = (oh * g.stride[1]) as isize + off_h;
                                let col_off = row * gvol + (od * gh + oh) * gw;
                                let img_off = ((c * id + zd as usize) * ih + zh as usize) * iw;
                                let w_base = (off_w + (w_lo * g.stride[2]) as isize) as usize;
                                f(col_off, img_off, w_lo, w_hi, w_base);
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub(crate) fn im2col(g: &ColGeometry, image: &[f64]) -> Vec<f64> {
    let gvol = g.grid_volume();
    let mut col = vec![0.0; g.channels * g.kernel_volume() * gvol];
    let sw = g.stride[2];
    for_each_patch_row(g, |col_off, img_off, lo, hi, w_base| {
        let dst = &mut col[col_off + lo..col_off + hi];
        let src = &image[img_off + w_base..];
        if sw == 1 {
            dst.copy_from_slice(&src[..hi - lo]);
        } else {
            for (j, d) in dst.iter_mut().enumerate() {
                *d = src[j * sw];
            }
        }
    });
    col
}

pub(crate) fn col2im(g: &ColGeometry, col: &[f64]) -> Vec<f64> {
    let mut image = vec![0.0; g.channels * g.image.iter().product::<usize>()];
    let sw = g.stride[2];
    for_each_patch_row(g, |col_off, img_off, lo, hi, w_base| {
        let src = &col[col_off + lo..col_off + hi];
        let dst = &mut image[img_off + w_base..];
        if sw == 1 {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        } else {
            for (j, s) in src.iter().enumerate() {
                dst[j * sw] += s;
            }
        }
    });
    image
}

/// `c = a·b + beta·c` with `a` logically `m×k` and `b` logically `k×n`;
/// `*_t` marks operands stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every index the strides can
    // address lies inside the three slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn patches<'a>(g: &ColGeometry, image: &'a [f64]) -> std::borrow::Cow<'a, [f64]> {
    if g.is_identity() {
        std::borrow::Cow::Borrowed(image)
    } else {
        std::borrow::Cow::Owned(im2col(g, image))
    }
}

fn scatter_patches(g: &ColGeometry, col: Vec<f64>) -> Vec<f64> {
    if g.is_identity() {
        col
    } else {
        col2im(g, &col)
    }
}

fn add_bias(out: &mut [f64], bias: &[f64]) {
    let per = out.len() / bias.len();
    for (chunk, b) in out.chunks_mut(per).zip(bias) {
        for v in chunk {
            *v += b;
        }
    }
}

fn forward(geom: &ConvGeometry, x: &Tensor, k: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let g = &geom.col;
    let kvol = g.kernel_volume();
    let mut out = if !geom.transposed {
        let col = patches(g, x.data());
        let (m, kk, n) = (geom.out_channels, geom.in_channels * kvol, g.grid_volume());
        let mut out = vec![0.0; m * n];
        gemm(m, kk, n, k.data(), false, &col, false, &mut out, 0.0);
        out
    } else {
        let (m, kk, n) = (geom.out_channels * kvol, geom.in_channels, g.grid_volume());
        let mut col = vec![0.0; m * n];
        gemm(m, kk, n, k.data(), true, x.data(), false, &mut col, 0.0);
        scatter_patches(g, col)
    };
    if let Some(b) = bias {
        add_bias(&mut out, b.data());
    }
    Tensor::new(geom.output_shape.clone(), out)
}

pub(crate) fn input_grad(geom: &ConvGeometry, k: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let g = &geom.col;
    let kvol = g.kernel_volume();
    let data = if !geom.transposed {
        let (m, kk, n) = (geom.in_channels * kvol, geom.out_channels, g.grid_volume());
        let mut dcol = vec![0.0; m * n];
        gemm(m, kk, n, k.data(), true, grad.data(), false, &mut dcol, 0.0);
        scatter_patches(g, dcol)
    } else {
        let col = patches(g, grad.data());
        let (m, kk, n) = (geom.in_channels, geom.out_channels * kvol, g.grid_volume());
        let mut gx = vec![0.0; m * n];
        gemm(m, kk, n, k.data(), false, &col, false, &mut gx, 0.0);
        gx
    };
    Tensor::new(geom.input_shape.clone(), data)
}

pub(crate) fn kernel_grad(geom: &ConvGeometry, x: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let g = &geom.col;
    let kvol = g.kernel_volume();
    let n = g.grid_volume();
    let mut kernel_shape = if geom.transposed {
        vec![geom.in_channels, geom.out_channels]
    } else {
        vec![geom.out_channels, geom.in_channels]
    };
    match geom.rank {
        ConvRank::Two => kernel_shape.extend(&g.kernel[1..]),
        ConvRank::Three => kernel_shape.extend(&g.kernel),
    }
    let data = if !geom.transposed {
        let col = patches(g, x.data());
        let (m, kk) = (geom.out_channels, geom.in_channels * kvol);
        let mut gk = vec![0.0; m * kk];
        gemm(m, n, kk, grad.data(), false, &col, true, &mut gk, 0.0);
        gk
    } else {
        let col = patches(g, grad.data());
        let (m, kk) = (geom.in_channels, geom.out_channels * kvol);
        let mut gk = vec![0.0; m * kk];
        gemm(m, n, kk, x.data(), false, &col, true, &mut gk, 0.0);
        gk
    };
    Tensor::new(kernel_shape, data)
}

pub(crate) fn bias_grad(geom: &ConvGeometry, grad: &Tensor) -> Result<Tensor> {
    let per = grad.len() / geom.out_channels;
    let data = grad.data().chunks(per).map(|c| c.iter().sum()).collect();
    Tensor::new(vec![geom.out_channels], data)
}

fn check_bias(geom: &ConvGeometry, bias: Option<&Tensor>) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [geom.out_channels] {
            return Err(TensorError::ShapeMismatch {
                op: "convolve",
                dim: "bias length".into(),
                expected: geom.out_channels,
                got: b.len(),
            });
        }
    }
    Ok(())
}

/// Evaluates a convolution outside any graph.
pub fn convolve(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    input.ensure_finite("convolve")?;
    let geom = ConvGeometry::resolve(input.shape(), kernel.shape(), spec)?;
    check_bias(&geom, bias)?;
    forward(&geom, input, kernel, bias)
}

impl Graph {
    /// Records a (transposed) convolution; differentiable in input, kernel
    /// and bias.
    pub fn conv(&mut self, x: Var, kernel: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        self.check(x)?;
        self.check(kernel)?;
        if let Some(b) = bias {
            self.check(b)?;
        }
        let xv = self.value(x);
        xv.ensure_finite("convolve")?;
        let kv = self.value(kernel);
        let geom = ConvGeometry::resolve(xv.shape(), kv.shape(), spec)?;
        let bv = bias.map(|b| self.value(b));
        check_bias(&geom, bv)?;
        let value = forward(&geom, xv, kv, bv)?;
        self.push(
            value,
            Op::Conv {
                x,
                kernel,
                bias,
                geom: Box::new(geom),
            },
        )
    }
}

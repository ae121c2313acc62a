//! Disparity regression from a `D×H×W` cost: a softmax over negated costs
//! turned into an expected disparity index, optionally restricted to the k
//! cheapest candidates per pixel.

use tdstereo_tensor::{CustomOp, Graph, Tensor, Var};

use crate::error::{invalid, Result};

/// Indices of the `k` smallest costs in ascending index order. Ties prefer
/// the lower index.
pub fn select_topk(costs: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..costs.len()).collect();
    if k < costs.len() {
        order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)));
        order.truncate(k);
        order.sort_unstable();
    }
    order
}

/// Softmax weights of `−costs[i]` over `selected`, and the expected index.
fn regress_pixel(costs: &[f64], selected: &[usize], weights: &mut Vec<f64>) -> f64 {
    let m = selected
        .iter()
        .map(|&i| -costs[i])
        .fold(f64::NEG_INFINITY, f64::max);
    weights.clear();
    weights.extend(selected.iter().map(|&i| (-costs[i] - m).exp()));
    let s: f64 = weights.iter().sum();
    let mut d = 0.0;
    for (w, &i) in weights.iter_mut().zip(selected) {
        *w /= s;
        d += i as f64 * *w;
    }
    d
}

fn column(cost: &Tensor, p: usize, buf: &mut Vec<f64>) {
    let d = cost.shape()[0];
    let hw = cost.len() / d;
    buf.clear();
    buf.extend((0..d).map(|i| cost.data()[i * hw + p]));
}

fn check(cost: &Tensor, k: usize) -> Result<(usize, usize, usize)> {
    if cost.rank() != 3 {
        return Err(invalid(format!("cost must be D×H×W, got {:?}", cost.shape())));
    }
    let s = cost.shape();
    if s[0] == 0 {
        return Err(invalid("cost has an empty disparity axis"));
    }
    if k == 0 || k > s[0] {
        return Err(invalid(format!("top-k requires 1 ≤ k ≤ D, got k={k}, D={}", s[0])));
    }
    Ok((s[0], s[1], s[2]))
}

/// Regressed disparity (`H×W`) using the `k` lowest costs per pixel.
pub fn topk_regress(cost: &Tensor, k: usize, scale: f64) -> Result<Tensor> {
    let (_, h, w) = check(cost, k)?;
    let (mut col, mut wts) = (Vec::new(), Vec::new());
    let out = (0..h * w)
        .map(|p| {
            column(cost, p, &mut col);
            let sel = select_topk(&col, k);
            regress_pixel(&col, &sel, &mut wts) * scale
        })
        .collect();
    Ok(Tensor::new(vec![h, w], out)?)
}

struct TopKOp {
    k: usize,
    scale: f64,
}

impl CustomOp for TopKOp {
    fn name(&self) -> &'static str {
        "topk_soft_argmin"
    }

    // ∂d̂/∂c_i = −w_i (i − d̂) on the selected set, zero elsewhere.
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> tdstereo_tensor::Result<Vec<Option<Tensor>>> {
        let cost = inputs[0];
        let d = cost.shape()[0];
        let hw = cost.len() / d;
        let mut gi = vec![0.0; cost.len()];
        let (mut col, mut wts) = (Vec::new(), Vec::new());
        for p in 0..hw {
            column(cost, p, &mut col);
            let sel = select_topk(&col, self.k);
            let mean = regress_pixel(&col, &sel, &mut wts);
            let g = grad.data()[p] * self.scale;
            for (&i, &wi) in sel.iter().zip(&wts) {
                gi[i * hw + p] = -g * wi * (i as f64 - mean);
            }
        }
        Ok(vec![Some(Tensor::new(cost.shape().to_vec(), gi)?)])
    }
}

/// Differentiable top-k soft-argmin in units of disparity index.
pub fn topk_soft_argmin(g: &mut Graph, cost: Var, k: usize) -> Result<Var> {
    regress(g, cost, k, 1.0)
}

/// Full soft-argmin, multiplied by `scale`. Identical to top-k with `k = D`.
pub fn soft_argmin(g: &mut Graph, cost: Var, scale: f64) -> Result<Var> {
    let d = g.shape(cost).first().copied().unwrap_or(0);
    regress(g, cost, d, scale)
}

fn regress(g: &mut Graph, cost: Var, k: usize, scale: f64) -> Result<Var> {
    let out = topk_regress(g.value(cost), k, scale)?;
    Ok(g.custom(&[cost], out, Box::new(TopKOp { k, scale }))?)
}

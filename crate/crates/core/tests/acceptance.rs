//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Run a subset by number:
//! `cargo test -p tdstereo --test acceptance -- 2 3`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdstereo::ablation::Variant;
use tdstereo::cost_volume::{correlation_volume, Reference, VolumeBuilder, VolumeKind, NORM_FLOOR, VOLUME_CHANNELS};
use tdstereo::io::dataset::Sample;
use tdstereo::io::pfm;
use tdstereo::loss::smooth_l1_loss;
use tdstereo::lrr::{forward_warp, scatter_warp, Lrr, WarpDirection};
use tdstereo::metrics::{compute_metrics, MetricsReport};
use tdstereo::params::{seeded_rng, ParamBuilder, ParamStore, Tape};
use tdstereo::regression::{topk_regress, topk_soft_argmin};
use tdstereo::synth::{noisy_teacher, sparsify, synthetic_sample, Scene, SceneConfig};
use tdstereo::tensor::{gradient_check, ConvSpec, Graph, Tensor, Var};
use tdstereo::train::{self, evaluate, LabelSource, Schedule};
use tdstereo::upsample::upsample_var;
use tdstereo::{Checkpoint, DisparityMap, Model, ModelConfig};

const GRAD_EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_INSTANCES: u64 = 20;
const ORACLE_TOL: f64 = 1e-12;
const ORACLE_INSTANCES: u64 = 60;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(u32, &str, fn() -> Verdict); 8] = [
        (1, "gradient suite", gradient_suite),
        (2, "oracle suite", oracle_suite),
        (3, "geometric soundness", geometric_soundness),
        (4, "end-to-end toy training", toy_training),
        (5, "directional ablation", directional_ablation),
        (6, "distillation protocol", distillation),
        (7, "metrics conformance", metrics_conformance),
        (8, "format conformance", format_conformance),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == &n.to_string()) {
            continue;
        }
        let t = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        if !v.pass {
            failed += 1;
        }
        println!(
            "criterion {n} ({name}): {} [{:.1} s] {}",
            if v.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            v.detail
        );
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- helpers

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values with magnitude in [0.05, 1) and random sign.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn randomize_params(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        for v in t.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
}

fn param(store: &ParamStore, name: &str) -> Tensor {
    store.get(store.id(name).unwrap_or_else(|| panic!("no parameter {name}"))).clone()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch");
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Finite-difference check of a block that reads model parameters through a
/// tape. Covers both the explicit inputs and every bound parameter. The
/// output is reduced with fixed random weights.
fn tape_gradient_check(
    store: &ParamStore,
    inputs: &[Tensor],
    constants: &[Tensor],
    seed: u64,
    f: &dyn Fn(&mut Tape, &[Var], &[Var]) -> tdstereo::Result<Var>,
) -> f64 {
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Tensor {
        let mut tape = Tape::new(store, false);
        let xs: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let cs: Vec<Var> = constants.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &xs, &cs).unwrap();
        tape.value(out).clone()
    };
    let mut tape = Tape::new(store, true);
    let xs: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let cs: Vec<Var> = constants.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &xs, &cs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let weights = uniform(&mut rng, tape.shape(out), -1.0, 1.0);
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w).unwrap();
    let loss = tape.sum(p).unwrap();
    tape.backward(loss).unwrap();
    let input_grads: Vec<Tensor> = xs
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    let param_grads: Vec<Option<Tensor>> = tape.param_grads().into_iter().map(|g| g.cloned()).collect();
    let bound: Vec<bool> = store.ids().map(|id| tape.bound(id).is_some()).collect();

    let numeric = |plus: &Tensor, minus: &Tensor, step: f64| -> f64 {
        plus.data()
            .iter()
            .zip(minus.data())
            .zip(weights.data())
            .map(|((p, m), w)| w * (p - m))
            .sum::<f64>()
            / step
    };
    let rel = |a: f64, n: f64| (a - n).abs() / n.abs().max(1.0);
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            let (up, down) = (orig + GRAD_EPS, orig - GRAD_EPS);
            probe[i].data_mut()[j] = up;
            let p = eval(store, &probe);
            probe[i].data_mut()[j] = down;
            let m = eval(store, &probe);
            probe[i].data_mut()[j] = orig;
            worst = worst.max(rel(input_grads[i].data()[j], numeric(&p, &m, up - down)));
        }
    }
    let mut perturbed = store.clone();
    for (k, id) in store.ids().enumerate() {
        if !bound[k] {
            continue;
        }
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            let (up, down) = (orig + GRAD_EPS, orig - GRAD_EPS);
            perturbed.get_mut(id).data_mut()[j] = up;
            let p = eval(&perturbed, inputs);
            perturbed.get_mut(id).data_mut()[j] = down;
            let m = eval(&perturbed, inputs);
            perturbed.get_mut(id).data_mut()[j] = orig;
            let a = param_grads[k].as_ref().map_or(0.0, |g| g.data()[j]);
            worst = worst.max(rel(a, numeric(&p, &m, up - down)));
        }
    }
    worst
}

/// Graph-only ops: reduce with fixed random weights and use the library's
/// checker.
fn graph_check(inputs: &[Tensor], seed: u64, f: &dyn Fn(&mut Graph, &[Var]) -> tdstereo::tensor::Result<Var>) -> f64 {
    gradient_check(
        |g, v| {
            let out = f(g, v)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let w = g.constant(uniform(&mut rng, g.shape(out), -1.0, 1.0));
            let p = g.mul(out, w)?;
            g.sum(p)
        },
        inputs,
        GRAD_EPS,
    )
    .unwrap()
}

fn to_tensor_err(e: tdstereo::Error) -> tdstereo::tensor::TensorError {
    match e {
        tdstereo::Error::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

// ------------------------------------------------------ 1. gradient suite

fn gradient_suite() -> Verdict {
    type Sampler = fn(&mut ChaCha8Rng) -> Vec<Tensor>;
    type GraphFn = fn(&mut Graph, &[Var]) -> tdstereo::tensor::Result<Var>;
    let graph_ops: Vec<(&str, Sampler, GraphFn)> = vec![
        (
            "conv2d",
            |r| vec![uniform(r, &[2, 6, 7], -1.0, 1.0), uniform(r, &[3, 2, 3, 3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
            |g, v| g.conv(v[0], v[1], Some(v[2]), &ConvSpec::d2().stride(2).padding(1).dilation(1)),
        ),
        (
            "conv2d dilated",
            |r| vec![uniform(r, &[2, 7, 7], -1.0, 1.0), uniform(r, &[2, 2, 3, 3], -1.0, 1.0)],
            |g, v| g.conv(v[0], v[1], None, &ConvSpec::d2().padding(2).dilation(2)),
        ),
        (
            "conv2d transposed",
            |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[2, 3, 4, 4], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
            |g, v| g.conv(v[0], v[1], Some(v[2]), &ConvSpec::d2().stride(2).padding(1).transposed()),
        ),
        (
            "conv3d",
            |r| vec![uniform(r, &[2, 3, 4, 4], -1.0, 1.0), uniform(r, &[2, 2, 3, 3, 3], -1.0, 1.0), uniform(r, &[2], -1.0, 1.0)],
            |g, v| g.conv(v[0], v[1], Some(v[2]), &ConvSpec::d3().padding(1)),
        ),
        (
            "conv3d transposed",
            |r| vec![uniform(r, &[2, 2, 2, 3], -1.0, 1.0), uniform(r, &[2, 2, 3, 4, 4], -1.0, 1.0)],
            |g, v| {
                g.conv(
                    v[0],
                    v[1],
                    None,
                    &ConvSpec::d3().stride3([1, 2, 2]).padding3([1, 1, 1]).transposed(),
                )
            },
        ),
        ("softmax", |r| vec![uniform(r, &[5, 3, 4], -2.0, 2.0)], |g, v| g.softmax(v[0], 0)),
        ("tanh", |r| vec![uniform(r, &[3, 4, 5], -2.0, 2.0)], |g, v| g.tanh(v[0])),
        ("relu", |r| vec![off_zero(r, &[3, 4, 5])], |g, v| g.relu(v[0])),
        ("leaky relu", |r| vec![off_zero(r, &[3, 4, 5])], |g, v| g.leaky_relu(v[0], 0.1)),
        (
            "concat",
            |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[3, 3, 4], -1.0, 1.0)],
            |g, v| {
                let c = g.concat(&[v[0], v[1]], 0)?;
                g.tanh(c)
            },
        ),
        ("l2 norm", |r| vec![off_zero(r, &[4, 3, 5])], |g, v| g.l2_norm(v[0], 0, NORM_FLOOR)),
        (
            "top-k soft-argmin",
            |r| vec![distinct_costs(r, 8, 3, 4)],
            |g, v| {
                // The first cost's level (stable under perturbation) picks k.
                let k = (g.value(v[0]).data()[0] * 10.0) as usize % 8 + 1;
                topk_soft_argmin(g, v[0], k).map_err(to_tensor_err)
            },
        ),
        (
            "neighbourhood upsample",
            |r| vec![uniform(r, &[3, 4], 0.0, 8.0), uniform(r, &[9, 12, 16], -2.0, 2.0)],
            |g, v| {
                let w = g.softmax(v[1], 0)?;
                upsample_var(g, v[0], w).map_err(to_tensor_err)
            },
        ),
        (
            "smooth-L1 loss",
            |r| {
                // Residuals kept away from the |x| = 1 kink.
                let gt = uniform(r, &[4, 6], 0.0, 5.0);
                let pred = Tensor::from_fn(vec![4, 6], |i| {
                    let m = if r.random_bool(0.5) { r.random_range(0.0..0.9) } else { r.random_range(1.1..3.0) };
                    gt.data()[i] + if r.random_bool(0.5) { m } else { -m }
                });
                let valid = Tensor::from_fn(vec![4, 6], |_| if r.random_bool(0.8) { 1.0 } else { 0.0 });
                vec![pred, gt, valid]
            },
            |g, v| {
                // gt and mask are data, not differentiated.
                let gt = DisparityMap::new(g.value(v[1]).clone(), g.value(v[2]).clone()).unwrap();
                smooth_l1_loss(g, v[0], &gt).map_err(to_tensor_err)
            },
        ),
    ];
    let mut worst: Vec<(String, f64)> = Vec::new();
    for (name, sample, f) in &graph_ops {
        let mut w: f64 = 0.0;
        for seed in 0..GRAD_INSTANCES {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = sample(&mut rng);
            let err = if *name == "smooth-L1 loss" {
                // Only the prediction is an input of the check.
                let (gt, valid) = (inputs[1].clone(), inputs[2].clone());
                graph_check(&inputs[..1], seed, &move |g, v| {
                    let gt = DisparityMap::new(gt.clone(), valid.clone()).unwrap();
                    smooth_l1_loss(g, v[0], &gt).map_err(to_tensor_err)
                })
            } else {
                graph_check(&inputs, seed, f)
            };
            w = w.max(err);
        }
        worst.push((name.to_string(), w));
    }

    // Blocks with learned parameters.
    let mut gtv = 0.0f64;
    let mut consistency = 0.0f64;
    let mut attention = 0.0f64;
    for seed in 0..GRAD_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let c = 4;
        let mut store = ParamStore::new();
        let builder = {
            let mut prng = seeded_rng(seed);
            let mut pb = ParamBuilder::new(&mut store, &mut prng);
            VolumeBuilder::new(&mut pb, VolumeKind::Gtv, c).unwrap()
        };
        randomize_params(&mut store, &mut rng);
        let fr = off_zero(&mut rng, &[c, 3, 6]);
        let ft = off_zero(&mut rng, &[c, 3, 6]);
        let reference = if seed % 2 == 0 { Reference::Left } else { Reference::Right };
        gtv = gtv.max(tape_gradient_check(&store, &[fr, ft], &[], seed, &|t, x, _| {
            Ok(builder.build(t, x[0], x[1], 3, reference)?.data)
        }));

        let mut store = ParamStore::new();
        let lrr = {
            let mut prng = seeded_rng(seed);
            let mut pb = ParamBuilder::new(&mut store, &mut prng);
            Lrr::new(&mut pb).unwrap()
        };
        randomize_params(&mut store, &mut rng);
        let dl = uniform(&mut rng, &[4, 5], 0.0, 6.0);
        let dw = uniform(&mut rng, &[4, 5], 0.0, 6.0);
        consistency = consistency.max(tape_gradient_check(&store, &[dl.clone(), dw], &[], seed, &|t, x, _| {
            lrr.consistency_map(t, x[0], x[1])
        }));
        let c_lr = uniform(&mut rng, &[4, 5], -1.0, 1.0);
        let mask = Tensor::from_fn(vec![4, 5], |_| if rng.random_bool(0.8) { 1.0 } else { 0.0 });
        attention = attention.max(tape_gradient_check(&store, &[dl, c_lr], &[mask], seed, &|t, x, c| {
            lrr.consistency_attention(t, x[0], x[1], c[0])
        }));
    }
    worst.push(("GTV construction".into(), gtv));
    worst.push(("consistency map".into(), consistency));
    worst.push(("consistency attention".into(), attention));

    let fails: Vec<_> = worst.iter().filter(|(_, e)| !(*e < GRAD_TOL)).collect();
    let max = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    verdict(
        fails.is_empty(),
        format!(
            "{} ops × {GRAD_INSTANCES} instances, max relative error {max:.2e} (< {GRAD_TOL:e}){}",
            worst.len(),
            if fails.is_empty() { String::new() } else { format!("; failing: {fails:?}") }
        ),
    )
}

/// Costs whose per-pixel values are separated by at least 0.05, so top-k
/// selection is stable under finite-difference perturbation.
fn distinct_costs(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![d, h, w]);
    for p in 0..h * w {
        let mut levels: Vec<usize> = (0..d).collect();
        levels.shuffle(rng);
        for (i, l) in levels.into_iter().enumerate() {
            t.data_mut()[i * h * w + p] = l as f64 * 0.1 + rng.random_range(0.0..0.05);
        }
    }
    t
}

// -------------------------------------------------------- 2. oracle suite

fn at3(t: &Tensor, c: usize, y: usize, x: usize) -> f64 {
    let s = t.shape();
    t.data()[(c * s[1] + y) * s[2] + x]
}

fn target_column(x: usize, d: usize, w: usize, reference: Reference) -> Option<usize> {
    match reference {
        Reference::Left if x >= d => Some(x - d),
        Reference::Right if x + d < w => Some(x + d),
        _ => None,
    }
}

fn unit_column(f: &Tensor, y: usize, x: usize) -> Vec<f64> {
    let c = f.shape()[0];
    let col: Vec<f64> = (0..c).map(|k| at3(f, k, y, x)).collect();
    let n = col.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
    col.into_iter().map(|v| v / n).collect()
}

fn brute_correlation(fr: &Tensor, ft: &Tensor, d4: usize, reference: Reference) -> Tensor {
    let (h, w) = (fr.shape()[1], fr.shape()[2]);
    let mut out = Tensor::zeros(vec![1, d4, h, w]);
    for d in 0..d4 {
        for y in 0..h {
            for x in 0..w {
                if let Some(s) = target_column(x, d, w, reference) {
                    let a = unit_column(fr, y, x);
                    let b = unit_column(ft, y, s);
                    let dot: f64 = a.iter().zip(&b).map(|(p, q)| p * q).sum();
                    out.data_mut()[(d * h + y) * w + x] = dot / VOLUME_CHANNELS as f64;
                }
            }
        }
    }
    out
}

fn brute_gtv(fr: &Tensor, ft: &Tensor, d4: usize, reference: Reference, expand: &Tensor, compress: &Tensor) -> Tensor {
    let (c, h, w) = (fr.shape()[0], fr.shape()[1], fr.shape()[2]);
    let corr = brute_correlation(fr, ft, d4, reference);
    let nc = VOLUME_CHANNELS;
    let mut out = Tensor::zeros(vec![nc, d4, h, w]);
    for o in 0..nc {
        for d in 0..d4 {
            for y in 0..h {
                for x in 0..w {
                    let Some(s) = target_column(x, d, w, reference) else { continue };
                    let a = expand.data()[o] * corr.data()[(d * h + y) * w + x];
                    let t: f64 = (0..c).map(|k| compress.data()[o * c + k] * at3(ft, k, y, s)).sum();
                    out.data_mut()[((o * d4 + d) * h + y) * w + x] = a * t;
                }
            }
        }
    }
    out
}

fn brute_consistency(dl: &Tensor, dr: &Tensor, wt: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(dl.shape().to_vec(), |p| {
        let el: Vec<f64> = (0..wt.len()).map(|k| wt.data()[k] * dl.data()[p] + b.data()[k]).collect();
        let er: Vec<f64> = (0..wt.len()).map(|k| wt.data()[k] * dr.data()[p] + b.data()[k]).collect();
        let dot: f64 = el.iter().zip(&er).map(|(a, c)| a * c).sum();
        let nl = el.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        let nr = er.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        dot / (nl * nr)
    })
}

#[allow(clippy::too_many_arguments)]
fn brute_attention(dl: &Tensor, c: &Tensor, mask: &Tensor, ew: &Tensor, eb: &Tensor, aw: &Tensor, ab: &Tensor) -> Tensor {
    let (h, w) = (dl.shape()[0], dl.shape()[1]);
    let ch = eb.len();
    let mut e = vec![0.0; ch * h * w];
    for o in 0..ch {
        for p in 0..h * w {
            let v = ew.data()[o * 2] * dl.data()[p] + ew.data()[o * 2 + 1] * c.data()[p] + eb.data()[o];
            e[o * h * w + p] = v * mask.data()[p];
        }
    }
    let mut out = Tensor::zeros(vec![ch, h, w]);
    for o in 0..ch {
        for y in 0..h {
            for x in 0..w {
                let mut acc = ab.data()[o];
                for i in 0..ch {
                    for ky in 0..5 {
                        for kx in 0..5 {
                            let (sy, sx) = (y as isize + ky as isize - 2, x as isize + kx as isize - 2);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += aw.data()[((o * ch + i) * 5 + ky) * 5 + kx] * e[(i * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out.data_mut()[(o * h + y) * w + x] = acc.tanh();
            }
        }
    }
    out
}

/// Per target pixel, search every source in the row.
fn brute_warp(d: &Tensor, valid: &Tensor, dir: WarpDirection) -> (Tensor, Tensor) {
    let (h, w) = (d.shape()[0], d.shape()[1]);
    let mut vals = Tensor::zeros(vec![h, w]);
    let mut mask = Tensor::zeros(vec![h, w]);
    for y in 0..h {
        for t in 0..w {
            let mut best: Option<f64> = None;
            for s in 0..w {
                if valid.data()[y * w + s] == 0.0 {
                    continue;
                }
                let ds = d.data()[y * w + s];
                let pos = match dir {
                    WarpDirection::RightToLeft => s as f64 + ds,
                    WarpDirection::LeftToRight => s as f64 - ds,
                };
                if pos.round() != t as f64 {
                    continue;
                }
                if best.is_none_or(|b| ds > b) {
                    best = Some(ds);
                }
            }
            if let Some(b) = best {
                vals.data_mut()[y * w + t] = b;
                mask.data_mut()[y * w + t] = 1.0;
            }
        }
    }
    (vals, mask)
}

fn brute_topk(cost: &Tensor, k: usize) -> Tensor {
    let (dn, h, w) = (cost.shape()[0], cost.shape()[1], cost.shape()[2]);
    Tensor::from_fn(vec![h, w], |p| {
        let col: Vec<f64> = (0..dn).map(|i| cost.data()[i * h * w + p]).collect();
        let mut taken = vec![false; dn];
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for i in 0..dn {
                if !taken[i] && best.is_none_or(|b| col[i] < col[b]) {
                    best = Some(i);
                }
            }
            taken[best.unwrap()] = true;
        }
        let m = (0..dn).filter(|&i| taken[i]).map(|i| -col[i]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..dn).filter(|&i| taken[i]).map(|i| (-col[i] - m).exp()).sum();
        (0..dn).filter(|&i| taken[i]).map(|i| i as f64 * (-col[i] - m).exp() / z).sum()
    })
}

fn brute_upsample(d: &Tensor, wts: &Tensor) -> Tensor {
    let (h, w) = (d.shape()[0], d.shape()[1]);
    let (hf, wf) = (4 * h, 4 * w);
    Tensor::from_fn(vec![hf, wf], |p| {
        let (y, x) = (p / wf, p % wf);
        let mut acc = 0.0;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let n = ((dy + 1) * 3 + dx + 1) as usize;
                let qy = (y as i64 / 4 + dy).max(0).min(h as i64 - 1) as usize;
                let qx = (x as i64 / 4 + dx).max(0).min(w as i64 - 1) as usize;
                acc += wts.data()[n * hf * wf + p] * d.data()[qy * w + qx];
            }
        }
        4.0 * acc
    })
}

fn oracle_suite() -> Verdict {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(slot) => slot.1 = slot.1.max(err),
        None => worst.push((name, err)),
    };
    for seed in 0..ORACLE_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.random_range(1..=16);
        let h = rng.random_range(1..=8);
        let w = rng.random_range(1..=8);
        let d4 = rng.random_range(1..=w.min(8));
        let reference = if rng.random_bool(0.5) { Reference::Left } else { Reference::Right };
        let fr = uniform(&mut rng, &[c, h, w], -1.0, 1.0);
        let ft = uniform(&mut rng, &[c, h, w], -1.0, 1.0);

        let mut g = Graph::new();
        let (a, b) = (g.constant(fr.clone()), g.constant(ft.clone()));
        let v = correlation_volume(&mut g, a, b, d4, reference).unwrap();
        record("correlation volume", max_abs_diff(g.value(v), &brute_correlation(&fr, &ft, d4, reference)));

        let mut store = ParamStore::new();
        let builder = {
            let mut prng = seeded_rng(seed);
            let mut pb = ParamBuilder::new(&mut store, &mut prng);
            VolumeBuilder::new(&mut pb, VolumeKind::Gtv, c).unwrap()
        };
        randomize_params(&mut store, &mut rng);
        let mut tape = Tape::new(&store, false);
        let (a, b) = (tape.constant(fr.clone()), tape.constant(ft.clone()));
        let vol = builder.build(&mut tape, a, b, d4, reference).unwrap().data;
        let oracle = brute_gtv(&fr, &ft, d4, reference, &param(&store, "expand.weight"), &param(&store, "compress.weight"));
        record("GTV before aggregation", max_abs_diff(tape.value(vol), &oracle));

        let mut store = ParamStore::new();
        let lrr = {
            let mut prng = seeded_rng(seed);
            let mut pb = ParamBuilder::new(&mut store, &mut prng);
            Lrr::new(&mut pb).unwrap()
        };
        randomize_params(&mut store, &mut rng);
        let dl = uniform(&mut rng, &[h, w], 0.0, 8.0);
        let dr = uniform(&mut rng, &[h, w], 0.0, 8.0);
        let cl = uniform(&mut rng, &[h, w], -1.0, 1.0);
        let mask = Tensor::from_fn(vec![h, w], |_| if rng.random_bool(0.7) { 1.0 } else { 0.0 });
        let mut tape = Tape::new(&store, false);
        let (a, b, cv, m) = (
            tape.constant(dl.clone()),
            tape.constant(dr.clone()),
            tape.constant(cl.clone()),
            tape.constant(mask.clone()),
        );
        let cm = lrr.consistency_map(&mut tape, a, b).unwrap();
        record(
            "consistency map",
            max_abs_diff(tape.value(cm), &brute_consistency(&dl, &dr, &param(&store, "point.weight"), &param(&store, "point.bias"))),
        );
        let att = lrr.consistency_attention(&mut tape, a, cv, m).unwrap();
        let oracle = brute_attention(
            &dl,
            &cl,
            &mask,
            &param(&store, "expand.weight"),
            &param(&store, "expand.bias"),
            &param(&store, "attend.weight"),
            &param(&store, "attend.bias"),
        );
        record("consistency attention", max_abs_diff(tape.value(att), &oracle));

        // Mix of whole and fractional disparities to force collisions and
        // half-pixel rounding.
        let disp = Tensor::from_fn(vec![h, w], |_| {
            if rng.random_bool(0.5) {
                rng.random_range(0..w) as f64
            } else {
                rng.random_range(0.0..w as f64)
            }
        });
        let valid = Tensor::from_fn(vec![h, w], |_| if rng.random_bool(0.85) { 1.0 } else { 0.0 });
        for dir in [WarpDirection::RightToLeft, WarpDirection::LeftToRight] {
            let got = scatter_warp(&disp, Some(&valid), dir).unwrap();
            let (vals, mask) = brute_warp(&disp, &valid, dir);
            let err = max_abs_diff(&got.values, &vals).max(max_abs_diff(&got.mask, &mask));
            record("forward scatter warp", err);
        }

        let dn = rng.random_range(1..=8);
        let cost = Tensor::from_fn(vec![dn, h, w], |_| {
            if rng.random_bool(0.3) {
                rng.random_range(0..3) as f64
            } else {
                rng.random_range(-3.0..3.0)
            }
        });
        let k = rng.random_range(1..=dn);
        record("top-k regression", max_abs_diff(&topk_regress(&cost, k, 1.0).unwrap(), &brute_topk(&cost, k)));

        let dq = uniform(&mut rng, &[h, w], 0.0, 8.0);
        let logits = uniform(&mut rng, &[9, 4 * h, 4 * w], -3.0, 3.0);
        let mut g = Graph::new();
        let (a, l) = (g.constant(dq.clone()), g.constant(logits));
        let wts = g.softmax(l, 0).unwrap();
        let up = upsample_var(&mut g, a, wts).unwrap();
        let oracle = brute_upsample(&dq, g.value(wts));
        record("neighbourhood upsample", max_abs_diff(g.value(up), &oracle));
    }
    let max = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let fails: Vec<_> = worst.iter().filter(|(_, e)| !(*e <= ORACLE_TOL)).collect();
    verdict(
        fails.is_empty(),
        format!(
            "{} operators × {ORACLE_INSTANCES} instances, max |Δ| {max:.2e} (≤ {ORACLE_TOL:e}){}",
            worst.len(),
            if fails.is_empty() { String::new() } else { format!("; failing: {fails:?}") }
        ),
    )
}

// ------------------------------------------------ 3. geometric soundness

fn geometric_soundness() -> Verdict {
    let mut problems = Vec::new();
    let mut holes_total = 0usize;
    let mut checked_right = 0usize;
    for seed in 0..25u64 {
        let mut cfg = SceneConfig::new(24, 64, 16.0);
        cfg.integer = true;
        cfg.fronto_parallel = true;
        // Every fifth scene is background plus one object, where holes and
        // occlusions coincide; the rest stack up to four layers.
        cfg.num_layers = if seed % 5 == 0 { 2 } else { 4 };
        let st = Scene::random(seed, &cfg).unwrap().render().unwrap();

        let warped = forward_warp(&st.gt_right, WarpDirection::RightToLeft).unwrap();
        let (_, brute_mask) = brute_warp(st.gt_right.values(), st.gt_right.valid(), WarpDirection::RightToLeft);
        if warped.mask != brute_mask {
            problems.push(format!("scene {seed}: hole set differs from brute-force scatter"));
        }
        for p in 0..warped.mask.len() {
            let hole = warped.mask.data()[p] == 0.0;
            let occluded = st.occluded_left.data()[p] == 1.0;
            holes_total += hole as usize;
            if hole && !occluded {
                problems.push(format!("scene {seed}: hole at {p} on a visible pixel"));
                break;
            }
            if cfg.num_layers == 2 && occluded && !hole {
                problems.push(format!("scene {seed}: occluded pixel {p} is not a hole"));
                break;
            }
        }

        let to_right = forward_warp(&st.gt_left, WarpDirection::LeftToRight).unwrap();
        for p in 0..to_right.mask.len() {
            if st.occluded_right.data()[p] == 1.0 {
                continue;
            }
            checked_right += 1;
            if to_right.mask.data()[p] == 0.0 || to_right.values.data()[p] != st.gt_right.values().data()[p] {
                problems.push(format!(
                    "scene {seed}: warped gt at {p} is {} (mask {}), right-view gt {}",
                    to_right.values.data()[p],
                    to_right.mask.data()[p],
                    st.gt_right.values().data()[p]
                ));
                break;
            }
        }
    }
    verdict(
        problems.is_empty(),
        format!(
            "25 scenes: holes match brute-force scatter and geometric occlusion, {holes_total} holes, {checked_right} right-view pixels exact{}",
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    )
}

// ------------------------------------------------ 4. toy training

fn scene() -> SceneConfig {
    SceneConfig::new(64, 128, 32.0)
}

fn samples(seeds: std::ops::Range<u64>) -> Vec<Sample> {
    seeds.map(|s| synthetic_sample(s, &scene()).unwrap()).collect()
}

fn toy_model(cfg: impl FnOnce(&mut ModelConfig)) -> Model {
    let mut c = ModelConfig {
        max_disp: 32,
        ..ModelConfig::default()
    };
    cfg(&mut c);
    Model::new(c).unwrap()
}

fn quiet(_: train::Event) {}

fn toy_training() -> Verdict {
    let t = Instant::now();
    let train_set = samples(0..200);
    let val_set = samples(10_000..10_020);
    let mut model = toy_model(|_| {});
    let schedule = Schedule {
        epochs: 30,
        ..Schedule::default()
    };
    train::train(&mut model, &train_set, &val_set, &schedule, LabelSource::GroundTruth, &mut |e| {
        if let train::Event::Epoch(r) = e {
            if let Some(m) = r.validation {
                eprintln!("  [toy] epoch {:>2} loss {:.4} val {m}", r.epoch, r.train_loss);
            }
        }
    })
    .unwrap();
    let m = evaluate(&model, &val_set, LabelSource::GroundTruth).unwrap();
    let train_secs = t.elapsed().as_secs_f64();

    let one = samples(1..2);
    let mut single = toy_model(|_| {});
    let overfit = Schedule {
        epochs: 500,
        batch_size: 1,
        patience: usize::MAX,
        keep_best: false,
        ..Schedule::default()
    };
    train::train(&mut single, &one, &[], &overfit, LabelSource::GroundTruth, &mut quiet).unwrap();
    let o = evaluate(&single, &one, LabelSource::GroundTruth).unwrap();
    let total = t.elapsed().as_secs_f64();

    let pass = m.epe < 1.0 && m.error3 < 5.0 && o.epe < 0.5 && total < 3600.0;
    verdict(
        pass,
        format!(
            "validation EPE {:.3} px (< 1.0), error3 {:.2}% (< 5), overfit EPE {:.3} px (< 0.5); training {train_secs:.0} s, total {total:.0} s (< 3600)",
            m.epe, m.error3, o.epe
        ),
    )
}

// ------------------------------------------------ 5. ablation ordering

/// Reduced schedule: the full five-way × switch grid at the toy-training
/// budget would take hours on one core.
const ABLATION_TRAIN: u64 = 64;
const ABLATION_EPOCHS: usize = 10;

fn ablation_run(seed: u64) -> Vec<(Variant, MetricsReport)> {
    let train_set = samples(20_000 + 1000 * seed..20_000 + 1000 * seed + ABLATION_TRAIN);
    let val_set = samples(30_000 + 1000 * seed..30_000 + 1000 * seed + 16);
    let variants: Vec<Variant> = ["gtv+lrr+is", "corr+lrr+is", "concat+lrr+is", "gtv"]
        .iter()
        .map(|v| v.parse().unwrap())
        .collect();
    let base = ModelConfig {
        max_disp: 32,
        seed,
        ..ModelConfig::default()
    };
    let schedule = Schedule {
        epochs: ABLATION_EPOCHS,
        seed,
        ..Schedule::default()
    };
    tdstereo::ablation::run(&base, &schedule, &train_set, &val_set, &variants, &mut |_, _| {})
        .unwrap()
        .into_iter()
        .map(|r| (r.variant, r.metrics))
        .collect()
}

fn directional_ablation() -> Verdict {
    const SLACK: f64 = 0.02;
    let relations = |rows: &[(Variant, MetricsReport)]| -> [(String, f64, f64); 3] {
        let e = |i: usize| rows[i].1.epe;
        [
            ("gtv ≤ corr".to_string(), e(0), e(1)),
            ("corr ≤ concat".to_string(), e(1), e(2)),
            ("lrr+is ≤ baseline".to_string(), e(0), e(3)),
        ]
    };
    let first = ablation_run(0);
    let rel0 = relations(&first);
    let fmt_rows = |rows: &[(Variant, MetricsReport)]| {
        rows.iter().map(|(v, m)| format!("{v}={:.3}", m.epe)).collect::<Vec<_>>().join(" ")
    };
    if rel0.iter().all(|(_, a, b)| a <= b) {
        return verdict(true, format!("seed 0: {}", fmt_rows(&first)));
    }
    if rel0.iter().any(|(_, a, b)| a - b > SLACK) {
        return verdict(false, format!("seed 0 inverts by more than {SLACK} px: {}", fmt_rows(&first)));
    }
    let runs = [first, ablation_run(1), ablation_run(2)];
    let mut votes = [0usize; 3];
    for r in &runs {
        for (i, (_, a, b)) in relations(r).iter().enumerate() {
            votes[i] += (a <= b) as usize;
        }
    }
    let detail = runs
        .iter()
        .enumerate()
        .map(|(s, r)| format!("seed {s}: {}", fmt_rows(r)))
        .collect::<Vec<_>>()
        .join(" | ");
    verdict(votes.iter().all(|&v| v >= 2), format!("3-seed majority {votes:?}/3: {detail}"))
}

// ------------------------------------------------ 6. distillation

const DISTILL_TRAIN: u64 = 64;
const DISTILL_EPOCHS: usize = 12;
const TEACHER_SIGMA: f64 = 0.5;

fn distillation() -> Verdict {
    let with_labels = |seeds: std::ops::Range<u64>, sparse: bool| -> Vec<Sample> {
        samples(seeds)
            .into_iter()
            .enumerate()
            .map(|(i, mut s)| {
                s.teacher = Some(noisy_teacher(&s.gt, TEACHER_SIGMA, 777 + i as u64).unwrap());
                if sparse {
                    s.gt = sparsify(&s.gt, 0.1, 999 + i as u64);
                }
                s
            })
            .collect()
    };
    let train_set = with_labels(40_000..40_000 + DISTILL_TRAIN, true);
    let val_set = with_labels(50_000..50_016, false);

    let stage1 = Schedule {
        epochs: DISTILL_EPOCHS,
        ..Schedule::default()
    };
    let stage2 = train::stage2_schedule(&stage1);
    // Same number of epochs for the sparse-only baseline.
    let plain = Schedule {
        epochs: stage1.epochs + stage2.epochs,
        ..Schedule::default()
    };

    let mut baseline = toy_model(|_| {});
    train::train(&mut baseline, &train_set, &val_set, &plain, LabelSource::GroundTruth, &mut quiet).unwrap();
    let base = evaluate(&baseline, &val_set, LabelSource::GroundTruth).unwrap();

    let mut student = toy_model(|_| {});
    let out = train::distill(&mut student, &train_set, &val_set, &stage1, &stage2, &mut quiet).unwrap();
    let dist = evaluate(&student, &val_set, LabelSource::GroundTruth).unwrap();

    let steps = &out.log.steps;
    let split = steps.iter().position(|s| s.stage == 2).unwrap_or(steps.len());
    let separated = split > 0
        && split < steps.len()
        && steps[..split].iter().all(|s| s.stage == 1 && s.source == LabelSource::Teacher)
        && steps[split..].iter().all(|s| s.stage == 2 && s.source == LabelSource::GroundTruth)
        && (stage2.lr - stage1.lr / 10.0).abs() < 1e-15
        && steps[split..].iter().all(|s| s.lr <= stage2.lr);
    verdict(
        dist.epe <= base.epe && separated,
        format!(
            "distilled EPE {:.3} px vs sparse-only {:.3} px; {} teacher steps then {} ground-truth steps, sources never mixed: {separated}",
            dist.epe,
            base.epe,
            split,
            steps.len() - split
        ),
    )
}

// ------------------------------------------------ 7. metrics

fn metrics_conformance() -> Verdict {
    let row = |v: &[f64]| DisparityMap::dense(Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()).unwrap();
    let m = compute_metrics(&row(&[1.0, 2.0, 3.0]), &row(&[1.0, 3.0, 6.0])).unwrap();
    let hand = m.epe == 4.0 / 3.0 && m.error1 == 100.0 / 3.0 && m.error2 == 100.0 / 3.0 && m.error3 == 0.0 && m.d1 == 100.0 / 3.0;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut nested = true;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..10), rng.random_range(1..10));
        let gt = uniform(&mut rng, &[h, w], 0.0, 40.0);
        let spread = rng.random_range(0.1..8.0);
        let pred = Tensor::from_fn(vec![h, w], |i| (gt.data()[i] + rng.random_range(-spread..spread)).max(0.0));
        let gt = DisparityMap::dense(gt).unwrap().masked(|_| rng.random_bool(0.9));
        let Ok(r) = compute_metrics(&DisparityMap::dense(pred).unwrap(), &gt) else { continue };
        nested &= r.error1 >= r.error2 && r.error2 >= r.error3;
    }
    verdict(
        hand && nested,
        format!(
            "hand example epe {:.4} error1 {:.2} error2 {:.2} error3 {:.2} d1 {:.2}; nesting on 1000 random maps: {nested}",
            m.epe, m.error1, m.error2, m.error3, m.d1
        ),
    )
}

// ------------------------------------------------ 8. formats

fn format_conformance() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut round_trip = true;
    for i in 0..20 {
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
        let t = Tensor::from_fn(vec![h, w], |_| rng.random_range(0.0f32..200.0) as f64);
        let path = dir.path().join(format!("r{i}.pfm"));
        pfm::write(&path, &t).unwrap();
        round_trip &= pfm::read(&path).unwrap() == t;
    }
    let golden = pfm::read(std::path::Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/golden_2x2.pfm"))).unwrap();
    let golden_ok = golden.shape() == [2, 2] && golden.data() == [1.0, 2.0, 3.0, 4.0];

    let mut model = toy_model(|c| c.seed = 5);
    let sample = synthetic_sample(3, &SceneConfig::new(32, 64, 16.0)).unwrap();
    let set = vec![sample.clone()];
    let schedule = Schedule {
        epochs: 2,
        batch_size: 1,
        ..Schedule::default()
    };
    let out = train::train(&mut model, &set, &[], &schedule, LabelSource::GroundTruth, &mut quiet).unwrap();
    let before = model.predict(&sample.left, &sample.right).unwrap();
    let path = dir.path().join("model.ckpt");
    Checkpoint::from_model(&model, Some(&out.adam)).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let restored = loaded.restore_model().unwrap();
    let after = restored.predict(&sample.left, &sample.right).unwrap();
    let bitwise = before.values().data().iter().zip(after.values().data()).all(|(a, b)| a.to_bits() == b.to_bits());
    let adam_ok = loaded.restore_adam(&restored).unwrap().as_ref() == Some(&out.adam);
    verdict(
        round_trip && golden_ok && bitwise && adam_ok,
        format!(
            "PFM round trip bit-exact: {round_trip}; golden 2×2 fixture: {golden_ok}; checkpoint inference bitwise: {bitwise}; optimizer state restored: {adam_ok}"
        ),
    )
}

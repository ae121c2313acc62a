//! Disparity error statistics over the valid ground-truth pixels.
//!
//! `error_k` counts pixels whose absolute error is strictly greater than
//! `k`; D1 counts pixels with error ≥ 3 px and ≥ 5 % of the true disparity.

use std::fmt;

use crate::disparity::DisparityMap;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub error1: f64,
    pub error2: f64,
    pub error3: f64,
    pub epe: f64,
    pub d1: f64,
    pub n_valid: usize,
}

pub fn compute_metrics(pred: &DisparityMap, gt: &DisparityMap) -> Result<MetricsReport> {
    if pred.values().shape() != gt.values().shape() {
        return Err(invalid(format!(
            "prediction {:?} and ground truth {:?} differ in resolution",
            pred.values().shape(),
            gt.values().shape()
        )));
    }
    let mut acc = Accumulator::default();
    acc.add(pred, gt);
    acc.report()
}

/// Pixel-weighted accumulation over several maps.
#[derive(Debug, Clone, Copy, Default)]
pub struct Accumulator {
    n: usize,
    abs_sum: f64,
    over: [usize; 3],
    d1: usize,
}

impl Accumulator {
    pub fn add(&mut self, pred: &DisparityMap, gt: &DisparityMap) {
        let p = pred.values().data();
        let g = gt.values().data();
        for (i, &m) in gt.valid().data().iter().enumerate() {
            if m != 1.0 {
                continue;
            }
            let e = (p[i] - g[i]).abs();
            self.n += 1;
            self.abs_sum += e;
            for (k, slot) in self.over.iter_mut().enumerate() {
                if e > (k + 1) as f64 {
                    *slot += 1;
                }
            }
            if e >= 3.0 && e >= 0.05 * g[i] {
                self.d1 += 1;
            }
        }
    }

    pub fn report(&self) -> Result<MetricsReport> {
        if self.n == 0 {
            return Err(invalid("ground truth has no valid pixels"));
        }
        let n = self.n as f64;
        let pct = |c: usize| 100.0 * c as f64 / n;
        Ok(MetricsReport {
            error1: pct(self.over[0]),
            error2: pct(self.over[1]),
            error3: pct(self.over[2]),
            epe: self.abs_sum / n,
            d1: pct(self.d1),
            n_valid: self.n,
        })
    }
}

impl MetricsReport {
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epe", format!("{:.6}", self.epe)),
            ("error1", format!("{:.4}", self.error1)),
            ("error2", format!("{:.4}", self.error2)),
            ("error3", format!("{:.4}", self.error3)),
            ("d1", format!("{:.4}", self.d1)),
            ("n_valid", self.n_valid.to_string()),
        ]
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "EPE {:.4} px | >1px {:.2}% | >2px {:.2}% | >3px {:.2}% | D1 {:.2}% | {} px",
            self.epe, self.error1, self.error2, self.error3, self.d1, self.n_valid
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tdstereo_tensor::Tensor;

    fn map(v: &[f64]) -> DisparityMap {
        DisparityMap::dense(Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn hand_example() {
        let r = compute_metrics(&map(&[1.0, 2.0, 3.0]), &map(&[1.0, 3.0, 6.0])).unwrap();
        assert_eq!(r.epe, 4.0 / 3.0);
        assert_eq!(r.error1, 100.0 / 3.0);
        assert_eq!(r.error2, 100.0 / 3.0);
        assert_eq!(r.error3, 0.0);
        assert_eq!(r.d1, 100.0 / 3.0);
    }

    #[test]
    fn masked_pixels_are_ignored() {
        let gt = map(&[1.0, 3.0, 6.0]).masked(|i| i != 2);
        let r = compute_metrics(&map(&[1.0, 2.0, 3.0]), &gt).unwrap();
        assert_eq!(r.n_valid, 2);
        assert_eq!(r.epe, 0.5);
        assert_eq!(r.error1, 0.0);
    }

    #[test]
    fn empty_valid_set_is_an_error() {
        let gt = map(&[1.0]).masked(|_| false);
        assert!(compute_metrics(&map(&[1.0]), &gt).is_err());
    }
}

use tdstereo_tensor::Tensor;

use crate::error::{invalid, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update. Parameters without a gradient keep their
    /// value but their moments still decay.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(invalid(format!(
                "optimizer has {} slots, {} gradients for {} parameters",
                self.m.len(),
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = params.get_mut(id);
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let g = grads[k].as_ref();
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(invalid("gradient shape differs from parameter"));
                }
            }
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                if g.is_some() {
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    p.data_mut()[i] -= lr * mh / (vh.sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()).unwrap();
        let mut adam = Adam::new(&store);
        let g = Tensor::new(vec![2], vec![0.3, -4.0]).unwrap();
        adam.update(&mut store, &[Some(g)], 0.01).unwrap();
        let w = store.get(id).data();
        assert!((w[0] - 0.99).abs() < 1e-9);
        assert!((w[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::full(vec![3], 5.0)).unwrap();
        let mut adam = Adam::new(&store);
        for _ in 0..2000 {
            let g = store.get(id).map(|w| 2.0 * (w - 1.0));
            adam.update(&mut store, &[Some(g)], 0.05).unwrap();
        }
        assert!(store.get(id).data().iter().all(|w| (w - 1.0).abs() < 1e-3));
    }
}

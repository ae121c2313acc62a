use tdstereo_tensor::Tensor;

use crate::error::{invalid, Result};

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Extends a `C×H×W` tensor to `C×height×width` by reflection across the
/// bottom and right edges.
pub fn pad_reflect(t: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    if t.rank() != 3 {
        return Err(invalid(format!("expected C×H×W, got {:?}", t.shape())));
    }
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if height < h || width < w || h == 0 || w == 0 {
        return Err(invalid(format!("cannot pad {h}×{w} to {height}×{width}")));
    }
    if (height, width) == (h, w) {
        return Ok(t.clone());
    }
    let data = t.data();
    Ok(Tensor::from_fn(vec![c, height, width], |i| {
        let (ch, rest) = (i / (height * width), i % (height * width));
        let (y, x) = (reflect(rest / width, h), reflect(rest % width, w));
        data[(ch * h + y) * w + x]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflects_without_edge_repeat() {
        let t = Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = pad_reflect(&t, 1, 7).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 2.0, 1.0, 2.0, 3.0]);
    }
}

//! Synthetic layered stereograms with exact dense disparity.
//!
//! A scene is a stack of textured planar layers. The background covers the
//! whole frame; foreground layers are rectangles or ellipses in left-image
//! coordinates, each carrying a disparity plane `d = a + b·x + c·y`. The
//! visible surface at any point is the covering layer with the largest
//! disparity. The left image samples each layer's texture directly; the
//! right image finds, per pixel, the left-view point of every layer that
//! projects there and shows the nearest one. Right pixels whose surface point
//! is hidden or outside the left view get fresh noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tdstereo_tensor::Tensor;

use crate::disparity::DisparityMap;
use crate::error::{Error, Result};
use crate::io::dataset::Sample;

/// Side of a texture cell in pixels.
const CELL: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    All,
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

impl Region {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Region::All => true,
            Region::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Region::Ellipse { cx, cy, rx, ry } => {
                let (u, v) = ((x - cx) / rx, (y - cy) / ry);
                u * u + v * v <= 1.0
            }
        }
    }
}

/// `d(x, y) = a + b·x + c·y` in left-image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Plane {
    pub fn at(&self, x: f64, y: f64) -> f64 {
        self.a + self.b * x + self.c * y
    }

    /// Left-view column whose point projects to right column `xr` on row `y`.
    fn left_column(&self, xr: f64, y: f64) -> f64 {
        (xr + self.a + self.c * y) / (1.0 - self.b)
    }
}

/// Random RGB values on a `CELL`-spaced grid, bilinearly interpolated.
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    origin: f64,
    cols: usize,
    rows: usize,
    values: Vec<[f64; 3]>,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, width: usize, height: usize, margin: f64) -> Self {
        let origin = -margin;
        let cols = ((width as f64 + 2.0 * margin) / CELL).ceil() as usize + 2;
        let rows = (height as f64 / CELL).ceil() as usize + 2;
        let values = (0..cols * rows)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        Self {
            origin,
            cols,
            rows,
            values,
        }
    }

    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let u = ((x - self.origin) / CELL).clamp(0.0, (self.cols - 1) as f64);
        let v = (y / CELL).clamp(0.0, (self.rows - 1) as f64);
        let (i0, j0) = (u.floor() as usize, v.floor() as usize);
        let (i1, j1) = ((i0 + 1).min(self.cols - 1), (j0 + 1).min(self.rows - 1));
        let (fu, fv) = (u - i0 as f64, v - j0 as f64);
        let at = |i: usize, j: usize| self.values[j * self.cols + i];
        let mut out = [0.0; 3];
        for (k, o) in out.iter_mut().enumerate() {
            let top = at(i0, j0)[k] * (1.0 - fu) + at(i1, j0)[k] * fu;
            let bottom = at(i0, j1)[k] * (1.0 - fu) + at(i1, j1)[k] * fu;
            *o = top * (1.0 - fv) + bottom * fv;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub region: Region,
    pub plane: Plane,
    pub texture: Texture,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Exclusive upper bound of every disparity in the scene.
    pub max_disp: f64,
    /// Layers including the background.
    pub num_layers: usize,
    /// Whole-pixel disparities.
    pub integer: bool,
    /// Planes parallel to the image (no slant).
    pub fronto_parallel: bool,
    /// Background disparities are drawn from `[1, background_max)`.
    pub background_max: f64,
}

impl SceneConfig {
    pub fn new(height: usize, width: usize, max_disp: f64) -> Self {
        Self {
            height,
            width,
            max_disp,
            num_layers: 4,
            integer: false,
            fronto_parallel: false,
            background_max: (0.25 * max_disp).max(2.0),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 {
            return bad("scene extents must be positive".into());
        }
        if !(self.max_disp >= 4.0 && self.max_disp < self.width as f64) {
            return bad(format!(
                "max_disp {} must lie in [4, width {})",
                self.max_disp, self.width
            ));
        }
        if self.num_layers == 0 {
            return bad("a scene needs at least the background layer".into());
        }
        if !(self.background_max > 1.0 && self.background_max < self.max_disp) {
            return bad(format!(
                "background_max {} must lie in (1, max_disp)",
                self.background_max
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub layers: Vec<Layer>,
    seed: u64,
}

/// A rendered pair with exact geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Stereogram {
    pub left: Tensor,
    pub right: Tensor,
    pub gt_left: DisparityMap,
    pub gt_right: DisparityMap,
    /// 1 where the left pixel's surface point is not visible in the right view.
    pub occluded_left: Tensor,
    /// 1 where the right pixel shows noise (point not visible in the left view).
    pub occluded_right: Tensor,
}

impl Scene {
    pub fn random(seed: u64, cfg: &SceneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (cfg.width as f64, cfg.height as f64);
        let margin = cfg.max_disp + 4.0;
        let slant = |rng: &mut ChaCha8Rng, limit: f64| -> (f64, f64) {
            if cfg.fronto_parallel || cfg.integer {
                (0.0, 0.0)
            } else {
                (rng.random_range(-limit..limit), rng.random_range(-limit..limit))
            }
        };
        let round = |d: f64| if cfg.integer { d.floor() } else { d };

        let mut layers = Vec::with_capacity(cfg.num_layers);
        let base = round(rng.random_range(1.0..cfg.background_max));
        let (b, c) = slant(&mut rng, 0.02);
        let plane = fit_plane(base, b, c, 0.0..w, 0.0..h, 0.0, cfg.background_max);
        layers.push(Layer {
            region: Region::All,
            plane,
            texture: Texture::random(&mut rng, cfg.width, cfg.height, margin),
        });
        for _ in 1..cfg.num_layers {
            let rw = rng.random_range(0.12 * w..0.45 * w);
            let rh = rng.random_range(0.2 * h..0.6 * h);
            let cx = rng.random_range(0.0..w);
            let cy = rng.random_range(0.0..h);
            let region = if rng.random_bool(0.5) {
                Region::Rect {
                    x0: cx - rw / 2.0,
                    y0: cy - rh / 2.0,
                    x1: cx + rw / 2.0,
                    y1: cy + rh / 2.0,
                }
            } else {
                Region::Ellipse {
                    cx,
                    cy,
                    rx: rw / 2.0,
                    ry: rh / 2.0,
                }
            };
            let hi = 0.85 * cfg.max_disp;
            let d = round(rng.random_range(cfg.background_max..hi));
            let (b, c) = slant(&mut rng, 0.03);
            let xs = (cx - rw / 2.0).max(0.0)..(cx + rw / 2.0).min(w);
            let ys = (cy - rh / 2.0).max(0.0)..(cy + rh / 2.0).min(h);
            let plane = fit_plane(d, b, c, xs, ys, 0.0, cfg.max_disp - 1.0);
            layers.push(Layer {
                region,
                plane,
                texture: Texture::random(&mut rng, cfg.width, cfg.height, margin),
            });
        }
        Ok(Self {
            height: cfg.height,
            width: cfg.width,
            layers,
            seed,
        })
    }

    /// A single fronto-parallel plane at disparity `d`.
    pub fn constant(seed: u64, height: usize, width: usize, d: f64) -> Result<Self> {
        if !(d >= 0.0 && d < width as f64) || height == 0 {
            return Err(Error::Config(format!("constant disparity {d} does not fit width {width}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            height,
            width,
            layers: vec![Layer {
                region: Region::All,
                plane: Plane { a: d, b: 0.0, c: 0.0 },
                texture: Texture::random(&mut rng, width, height, d + 4.0),
            }],
            seed,
        })
    }

    /// Index and disparity of the surface visible at left-view point (x, y).
    pub fn left_surface(&self, x: f64, y: f64) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, l) in self.layers.iter().enumerate() {
            if l.region.contains(x, y) {
                let d = l.plane.at(x, y);
                if d > best.1 {
                    best = (i, d);
                }
            }
        }
        best
    }

    /// Nearest surface seen at right-view point (xr, y): layer, disparity and
    /// the left-view column of that surface point.
    pub fn right_surface(&self, xr: f64, y: f64) -> (usize, f64, f64) {
        let mut best = (0, f64::NEG_INFINITY, 0.0);
        for (i, l) in self.layers.iter().enumerate() {
            let xl = l.plane.left_column(xr, y);
            if l.region.contains(xl, y) {
                let d = xl - xr;
                if d > best.1 {
                    best = (i, d, xl);
                }
            }
        }
        best
    }

    fn in_view(&self, x: f64) -> bool {
        x >= -0.5 && x < self.width as f64 - 0.5
    }

    pub fn render(&self) -> Result<Stereogram> {
        let (h, w) = (self.height, self.width);
        let plane = h * w;
        let mut left = vec![0.0; 3 * plane];
        let mut right = vec![0.0; 3 * plane];
        let mut gt_l = vec![0.0; plane];
        let mut gt_r = vec![0.0; plane];
        let mut occ_l = vec![0.0; plane];
        let mut occ_r = vec![0.0; plane];
        let mut noise = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6e6f_6973_65);
        for y in 0..h {
            let yf = y as f64;
            for x in 0..w {
                let p = y * w + x;
                let xf = x as f64;
                let (li, d) = self.left_surface(xf, yf);
                gt_l[p] = d;
                let rgb = self.layers[li].texture.sample(xf, yf);
                for k in 0..3 {
                    left[k * plane + p] = rgb[k];
                }
                let xr = xf - d;
                if !self.in_view(xr) || self.right_surface(xr, yf).0 != li {
                    occ_l[p] = 1.0;
                }

                let (ri, dr, xl) = self.right_surface(xf, yf);
                gt_r[p] = dr;
                let visible = self.in_view(xl) && self.left_surface(xl, yf).0 == ri;
                let rgb = if visible {
                    self.layers[ri].texture.sample(xl, yf)
                } else {
                    occ_r[p] = 1.0;
                    [noise.random(), noise.random(), noise.random()]
                };
                for k in 0..3 {
                    right[k * plane + p] = rgb[k];
                }
            }
        }
        let t = |shape: Vec<usize>, v: Vec<f64>| Tensor::new(shape, v);
        Ok(Stereogram {
            left: t(vec![3, h, w], left)?,
            right: t(vec![3, h, w], right)?,
            gt_left: DisparityMap::dense(t(vec![h, w], gt_l)?)?,
            gt_right: DisparityMap::dense(t(vec![h, w], gt_r)?)?,
            occluded_left: t(vec![h, w], occ_l)?,
            occluded_right: t(vec![h, w], occ_r)?,
        })
    }
}

/// Plane through `d` at the box centre with slopes `(b, c)`, shifted so that
/// its values over the box stay inside `[lo, hi]`.
fn fit_plane(
    d: f64,
    b: f64,
    c: f64,
    xs: std::ops::Range<f64>,
    ys: std::ops::Range<f64>,
    lo: f64,
    hi: f64,
) -> Plane {
    let (mx, my) = ((xs.start + xs.end) / 2.0, (ys.start + ys.end) / 2.0);
    let mut p = Plane {
        a: d - b * mx - c * my,
        b,
        c,
    };
    let corners = [
        (xs.start, ys.start),
        (xs.start, ys.end),
        (xs.end, ys.start),
        (xs.end, ys.end),
    ];
    let vals = corners.map(|(x, y)| p.at(x, y));
    let (min, max) = vals
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if min < lo {
        p.a += lo - min;
    } else if max > hi {
        p.a -= max - hi;
    }
    p
}

/// Convenience: a rendered random scene.
pub fn generate_stereogram(seed: u64, cfg: &SceneConfig) -> Result<Stereogram> {
    Scene::random(seed, cfg)?.render()
}

/// A named sample built from [`generate_stereogram`].
pub fn synthetic_sample(seed: u64, cfg: &SceneConfig) -> Result<Sample> {
    let st = generate_stereogram(seed, cfg)?;
    Ok(Sample {
        name: format!("syn{seed:06}"),
        left: st.left,
        right: st.right,
        gt: st.gt_left,
        teacher: None,
    })
}

/// Stand-in for a dense teacher: `gt + N(0, sigma²)` on every valid pixel,
/// clamped at zero.
pub fn noisy_teacher(gt: &DisparityMap, sigma: f64, seed: u64) -> Result<DisparityMap> {
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("teacher noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = gt
        .values()
        .data()
        .iter()
        .map(|&v| (v + noise.sample(&mut rng)).max(0.0))
        .collect();
    let values = Tensor::new(gt.values().shape().to_vec(), data)?;
    DisparityMap::new(values, gt.valid().clone())
}

/// Keeps each valid pixel independently with probability `keep`.
pub fn sparsify(gt: &DisparityMap, keep: f64, seed: u64) -> DisparityMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gt.masked(|_| rng.random_bool(keep.clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_disparity_pair_is_identical() {
        let s = Scene::constant(3, 8, 16, 0.0).unwrap().render().unwrap();
        assert_eq!(s.left, s.right);
        assert_eq!(s.occluded_right.sum(), 0.0);
    }

    #[test]
    fn constant_plane_shifts_with_noise_on_the_right_edge() {
        let (h, w) = (6, 24);
        let s = Scene::constant(5, h, w, 8.0).unwrap().render().unwrap();
        assert!(s.gt_left.values().data().iter().all(|&d| d == 8.0));
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let r = s.right.at(&[c, y, x]);
                    if x + 8 < w {
                        assert_eq!(r, s.left.at(&[c, y, x + 8]));
                        assert_eq!(s.occluded_right.at(&[y, x]), 0.0);
                    } else {
                        assert_eq!(s.occluded_right.at(&[y, x]), 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn disparities_stay_in_range() {
        let cfg = SceneConfig::new(32, 64, 24.0);
        for seed in 0..20 {
            let s = generate_stereogram(seed, &cfg).unwrap();
            let v = s.gt_left.values();
            assert!(v.min_value() >= 0.0 && v.max_value() < 24.0, "seed {seed}");
        }
    }

    #[test]
    fn degenerate_config_rejected() {
        assert!(Scene::random(0, &SceneConfig::new(8, 16, 20.0)).is_err());
        let mut c = SceneConfig::new(8, 64, 16.0);
        c.num_layers = 0;
        assert!(Scene::random(0, &c).is_err());
    }
}

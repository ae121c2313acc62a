//! Perceptually uniform colour ramp for disparity visualisation.

use crate::disparity::DisparityMap;

// Samples of the viridis ramp at nine evenly spaced positions.
const RAMP: [[f64; 3]; 9] = [
    [0.267004, 0.004874, 0.329415],
    [0.277018, 0.185228, 0.489898],
    [0.230341, 0.344074, 0.557465],
    [0.172719, 0.448791, 0.557885],
    [0.127568, 0.566949, 0.550556],
    [0.134692, 0.658636, 0.517649],
    [0.369214, 0.788888, 0.382914],
    [0.678489, 0.863742, 0.189503],
    [0.993248, 0.906157, 0.143936],
];

/// Colour of `t ∈ [0, 1]` (clamped), as 8-bit RGB.
pub fn ramp(t: f64) -> [u8; 3] {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let s = t * (RAMP.len() - 1) as f64;
    let i = (s.floor() as usize).min(RAMP.len() - 2);
    let f = s - i as f64;
    let mut out = [0u8; 3];
    for k in 0..3 {
        let v = RAMP[i][k] * (1.0 - f) + RAMP[i + 1][k] * f;
        out[k] = (v * 255.0).round() as u8;
    }
    out
}

/// Row-major RGB bytes of `d` mapped over `[0, max_disp]`; invalid pixels
/// are black.
pub fn colorize(d: &DisparityMap, max_disp: f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(3 * d.values().len());
    for (&v, &m) in d.values().data().iter().zip(d.valid().data()) {
        if m == 1.0 {
            out.extend_from_slice(&ramp(v / max_disp.max(f64::MIN_POSITIVE)));
        } else {
            out.extend_from_slice(&[0, 0, 0]);
        }
    }
    out
}

//! Exposure-time displacement estimation and trajectory interpolation.
//!
//! Displacements are stored pixel-major as `(dx, dy)` in pixels at the
//! producing scale. Offset fields for the deformable conv store `(dy, dx)`
//! per tap, matching the sampler's `(row, column)` convention.

use serde::{Deserialize, Serialize};

use crate::conv::{conv2d, ConvSpec, TAPS3};
use crate::error::{Error, Result};
use crate::ops::bilinear_sample;
use crate::tensor::Tensor;

/// Number of trajectory steps the 3×3 deformable conv consumes.
pub const DEFORM_STEPS: usize = 9;

/// Displacements from mid-exposure to the start and to the end.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementPair {
    /// `H×W×2`, `(dx, dy)`.
    pub start: Tensor,
    /// `H×W×2`, `(dx, dy)`.
    pub end: Tensor,
}

impl DisplacementPair {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self { start: Tensor::zeros([h, w, 2]), end: Tensor::zeros([h, w, 2]) }
    }

    pub fn hw(&self) -> Result<(usize, usize)> {
        let hw = self.start.field_hw(2)?;
        if self.end.field_hw(2)? != hw {
            return Err(Error::shape("displacement endpoints differ in extent"));
        }
        Ok(hw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryMode {
    #[default]
    Quadratic,
    Linear,
}

/// Per-step displacements, `N×H×W×2`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryField {
    pub steps: usize,
    pub offsets: Tensor,
}

impl TrajectoryField {
    pub fn hw(&self) -> (usize, usize) {
        (self.offsets.dims()[1], self.offsets.dims()[2])
    }

    /// Step `n` as an `H×W×2` slice.
    pub fn step(&self, n: usize) -> &[f32] {
        let (h, w) = self.hw();
        &self.offsets.data()[n * h * w * 2..(n + 1) * h * w * 2]
    }

    pub fn step_tensor(&self, n: usize) -> Tensor {
        let (h, w) = self.hw();
        Tensor::new([h, w, 2], self.step(n).to_vec()).expect("step dims")
    }
}

/// Relative sampling displacements for the 3×3 deformable conv, `H×W×18`:
/// nine `(dy, dx)` pairs in [`TAPS3`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField {
    pub d: Tensor,
}

impl OffsetField {
    pub fn hw(&self) -> Result<(usize, usize)> {
        self.d.field_hw(18)
    }

    /// The undeformed 3×3 grid at every pixel.
    pub fn base_grid(h: usize, w: usize) -> Self {
        let d = Tensor::from_fn([h, w, 18], |i| {
            let k = i % 18;
            let (dy, dx) = TAPS3[k / 2];
            if k % 2 == 0 {
                dy as f32
            } else {
                dx as f32
            }
        });
        Self { d }
    }
}

/// One conv (C→4) yields both endpoints: channels 0–1 start, 2–3 end.
pub fn predict_endpoints(f_in: &Tensor, conv: &ConvSpec) -> Result<DisplacementPair> {
    if conv.out_channels != 4 {
        return Err(Error::shape(format!("endpoint conv must emit 4 channels, has {}", conv.out_channels)));
    }
    let y = conv2d(f_in, conv)?;
    let (_, h, w) = y.chw()?;
    let interleave = |a: &[f32], b: &[f32]| -> Tensor {
        Tensor::new([h, w, 2], a.iter().zip(b).flat_map(|(&x, &y)| [x, y]).collect()).expect("field dims")
    };
    Ok(DisplacementPair {
        start: interleave(y.plane(0), y.plane(1)),
        end: interleave(y.plane(2), y.plane(3)),
    })
}

fn combine(pair: &DisplacementPair, n_steps: usize, weights: impl Fn(usize) -> (f32, f32)) -> Result<TrajectoryField> {
    let (h, w) = pair.hw()?;
    let mut out = Vec::with_capacity(n_steps * h * w * 2);
    for n in 0..n_steps {
        let (ws, we) = weights(n);
        out.extend(pair.start.data().iter().zip(pair.end.data()).map(|(&s, &e)| ws * s + we * e));
    }
    Ok(TrajectoryField { steps: n_steps, offsets: Tensor::new([n_steps, h, w, 2], out)? })
}

/// Quadratic interpolation through the start, zero at mid-exposure, and the
/// end: `o(u) = (s+e)/2·u² + (e−s)/2·u` with `u = 2n/(N−1) − 1`.
///
/// Evaluated in the equivalent basis `s·(u²−u)/2 + e·(u²+u)/2`, whose
/// weights are exactly `(1,0)`, `(0,0)`, `(0,1)` at the two ends and the
/// midpoint.
pub fn interpolate_quadratic(pair: &DisplacementPair, n_steps: usize) -> Result<TrajectoryField> {
    if n_steps < 2 {
        return Err(Error::arg(format!("trajectory needs at least 2 steps, got {n_steps}")));
    }
    combine(pair, n_steps, |n| {
        let u = 2.0 * n as f64 / (n_steps - 1) as f64 - 1.0;
        (((u * u - u) / 2.0) as f32, ((u * u + u) / 2.0) as f32)
    })
}

/// Piecewise-linear interpolation: start scaled down to zero at the
/// midpoint, then zero scaled up to the end.
pub fn interpolate_linear(pair: &DisplacementPair, n_steps: usize) -> Result<TrajectoryField> {
    if n_steps < 3 || n_steps % 2 == 0 {
        return Err(Error::arg(format!("linear trajectory needs an odd step count ≥ 3, got {n_steps}")));
    }
    let mid = (n_steps - 1) / 2;
    combine(pair, n_steps, |n| {
        let t = 2.0 * n as f64 / (n_steps - 1) as f64;
        if n < mid {
            ((1.0 - t) as f32, 0.0)
        } else if n > mid {
            (0.0, (t - 1.0) as f32)
        } else {
            (0.0, 0.0)
        }
    })
}

pub fn interpolate(pair: &DisplacementPair, n_steps: usize, mode: TrajectoryMode) -> Result<TrajectoryField> {
    match mode {
        TrajectoryMode::Quadratic => interpolate_quadratic(pair, n_steps),
        TrajectoryMode::Linear => interpolate_linear(pair, n_steps),
    }
}

/// Offsets for the deformable conv: tap `j` gets its grid position plus the
/// trajectory displacement at step `j`.
pub fn build_deform_offsets(traj: &TrajectoryField) -> Result<OffsetField> {
    if traj.steps != DEFORM_STEPS {
        return Err(Error::arg(format!("deformable offsets need {DEFORM_STEPS} steps, got {}", traj.steps)));
    }
    let (h, w) = traj.hw();
    let mut d = vec![0.0f32; h * w * 18];
    for (j, &(gy, gx)) in TAPS3.iter().enumerate() {
        let step = traj.step(j);
        for p in 0..h * w {
            let (dx, dy) = (step[2 * p], step[2 * p + 1]);
            d[p * 18 + 2 * j] = gy as f32 + dy;
            d[p * 18 + 2 * j + 1] = gx as f32 + dx;
        }
    }
    Ok(OffsetField { d: Tensor::new([h, w, 18], d)? })
}

fn field_to_planes(f: &Tensor) -> Result<Tensor> {
    let (h, w) = f.field_hw(2)?;
    let mut out = vec![0.0f32; 2 * h * w];
    for (p, v) in f.data().chunks(2).enumerate() {
        out[p] = v[0];
        out[h * w + p] = v[1];
    }
    Tensor::new([2, h, w], out)
}

fn resample_field(f: &Tensor, th: usize, tw: usize, gain: f32) -> Result<Tensor> {
    let planes = field_to_planes(f)?;
    let (_, h, w) = planes.chw()?;
    let (sy, sx) = (h as f64 / th as f64, w as f64 / tw as f64);
    let mut out = Vec::with_capacity(th * tw * 2);
    for y in 0..th {
        let yc = ((y as f64 + 0.5) * sy - 0.5) as f32;
        for x in 0..tw {
            let xc = ((x as f64 + 0.5) * sx - 0.5) as f32;
            out.push(bilinear_sample(&planes, yc, xc, 0) * gain);
            out.push(bilinear_sample(&planes, yc, xc, 1) * gain);
        }
    }
    Tensor::new([th, tw, 2], out)
}

/// Resample a displacement pair to `factor×` the resolution and scale the
/// displacement magnitudes by the same factor.
pub fn rescale_displacements(pair: &DisplacementPair, factor: f32) -> Result<DisplacementPair> {
    if !(factor > 0.0) {
        return Err(Error::arg(format!("rescale factor must be positive, got {factor}")));
    }
    let (h, w) = pair.hw()?;
    let th = ((h as f64 * factor as f64).round() as usize).max(1);
    let tw = ((w as f64 * factor as f64).round() as usize).max(1);
    Ok(DisplacementPair {
        start: resample_field(&pair.start, th, tw, factor)?,
        end: resample_field(&pair.end, th, tw, factor)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_pair(h: usize, w: usize, s: (f32, f32), e: (f32, f32)) -> DisplacementPair {
        DisplacementPair {
            start: Tensor::from_fn([h, w, 2], |i| if i % 2 == 0 { s.0 } else { s.1 }),
            end: Tensor::from_fn([h, w, 2], |i| if i % 2 == 0 { e.0 } else { e.1 }),
        }
    }

    #[test]
    fn zero_conv_gives_static_scene() {
        let conv = ConvSpec::dense3(3, 4, Tensor::zeros([4, 3, 3, 3]), Some(Tensor::zeros([4]))).unwrap();
        let pair = predict_endpoints(&Tensor::full([3, 4, 5], 2.0), &conv).unwrap();
        assert_eq!(pair.start.dims(), &[4, 5, 2]);
        assert_eq!(pair.end.dims(), &[4, 5, 2]);
        assert!(pair.start.data().iter().chain(pair.end.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_endpoints_match_dot_products() {
        // 3×3 weights with only the center tap set act as a 1×1 map.
        let cin = 3;
        let mut w = vec![0.0f32; 4 * cin * 9];
        let center: Vec<f32> = (0..4 * cin).map(|i| i as f32 * 0.25 - 1.0).collect();
        for (i, &v) in center.iter().enumerate() {
            w[i * 9 + 4] = v;
        }
        let bias = [0.1, -0.2, 0.3, -0.4];
        let conv = ConvSpec::dense3(cin, 4, Tensor::new([4, cin, 3, 3], w).unwrap(), Some(Tensor::new([4], bias.to_vec()).unwrap())).unwrap();
        let x = [1.5f32, -2.0, 0.5];
        let pair = predict_endpoints(&Tensor::new([cin, 1, 1], x.to_vec()).unwrap(), &conv).unwrap();
        let dot = |o: usize| bias[o] + (0..cin).map(|i| center[o * cin + i] * x[i]).sum::<f32>();
        assert_eq!(pair.start.data(), &[dot(0), dot(1)]);
        assert_eq!(pair.end.data(), &[dot(2), dot(3)]);
    }

    #[test]
    fn endpoint_conv_must_emit_four_channels() {
        let conv = ConvSpec::dense3(2, 3, Tensor::zeros([3, 2, 3, 3]), None).unwrap();
        assert!(predict_endpoints(&Tensor::zeros([2, 3, 3]), &conv).is_err());
    }

    #[test]
    fn quadratic_known_values() {
        let pair = uniform_pair(1, 1, (-4.0, 0.0), (4.0, 0.0));
        let t = interpolate_quadratic(&pair, 9).unwrap();
        assert_eq!(t.step(2), &[-2.0, 0.0]);
        assert_eq!(t.step(4), &[0.0, 0.0]);
        assert_eq!(t.step(0), &[-4.0, 0.0]);
        assert_eq!(t.step(8), &[4.0, 0.0]);
    }

    #[test]
    fn quadratic_matches_power_form() {
        let pair = uniform_pair(1, 1, (0.3, -1.7), (2.2, 0.9));
        let t = interpolate_quadratic(&pair, 7).unwrap();
        for n in 0..7 {
            let u = 2.0 * n as f32 / 6.0 - 1.0;
            let f = |s: f32, e: f32| (s + e) / 2.0 * u * u + (e - s) / 2.0 * u;
            assert!((t.step(n)[0] - f(0.3, 2.2)).abs() < 1e-6);
            assert!((t.step(n)[1] - f(-1.7, 0.9)).abs() < 1e-6);
        }
    }

    #[test]
    fn step_count_validation() {
        let pair = uniform_pair(1, 1, (1.0, 1.0), (1.0, 1.0));
        assert!(interpolate_quadratic(&pair, 1).is_err());
        assert!(interpolate_linear(&pair, 4).is_err());
        assert!(interpolate_linear(&pair, 1).is_err());
    }

    #[test]
    fn linear_known_values() {
        let pair = uniform_pair(1, 1, (-4.0, 0.0), (6.0, 2.0));
        let t = interpolate_linear(&pair, 9).unwrap();
        assert_eq!(t.step(0), &[-4.0, 0.0]);
        assert_eq!(t.step(8), &[6.0, 2.0]);
        assert_eq!(t.step(4), &[0.0, 0.0]);
        assert_eq!(t.step(2), &[-2.0, 0.0]);
    }

    #[test]
    fn offsets_from_zero_trajectory_are_the_grid() {
        let t = interpolate_quadratic(&DisplacementPair::zeros(3, 2), 9).unwrap();
        assert_eq!(build_deform_offsets(&t).unwrap(), OffsetField::base_grid(3, 2));
    }

    #[test]
    fn offsets_compose_grid_and_trajectory() {
        let pair = uniform_pair(1, 1, (-4.0, 0.0), (4.0, 0.0));
        let t = interpolate_quadratic(&pair, 9).unwrap();
        let d = build_deform_offsets(&t).unwrap();
        // tap 0: grid (-1,-1), step 0 = o_start = (dx -4, dy 0)
        assert_eq!(&d.d.data()[0..2], &[-1.0, -5.0]);
        // center tap stays put
        assert_eq!(&d.d.data()[8..10], &[0.0, 0.0]);
        // tap 8: grid (1,1), step 8 = o_end
        assert_eq!(&d.d.data()[16..18], &[1.0, 5.0]);
        assert!(build_deform_offsets(&interpolate_quadratic(&pair, 5).unwrap()).is_err());
    }

    #[test]
    fn rescale_cases() {
        let p = uniform_pair(3, 4, (0.7, -1.3), (2.0, 0.25));
        assert_eq!(rescale_displacements(&p, 1.0).unwrap(), p);

        let c = uniform_pair(2, 3, (1.0, 0.0), (1.0, 0.0));
        let up = rescale_displacements(&c, 2.0).unwrap();
        assert_eq!(up.start.dims(), &[4, 6, 2]);
        assert!(up.start.data().chunks(2).all(|v| v == [2.0, 0.0]));

        let c = uniform_pair(4, 4, (4.0, 2.0), (4.0, 2.0));
        let down = rescale_displacements(&c, 0.5).unwrap();
        assert_eq!(down.end.dims(), &[2, 2, 2]);
        assert!(down.end.data().chunks(2).all(|v| v == [2.0, 1.0]));
    }
}

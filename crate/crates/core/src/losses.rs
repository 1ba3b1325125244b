//! Evaluation-mode loss terms and the forward-warp blur synthesizer.
//!
//! All reductions run in f64.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::downsample_gt_mask;
use crate::motion::{interpolate, DisplacementPair, TrajectoryField, TrajectoryMode};
use crate::ops::box_downsample;
use crate::tensor::Tensor;

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_mask: f64,
    pub gamma_fft: f64,
    pub alpha_tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_mask: 0.01, gamma_fft: 0.1, alpha_tv: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_mask, self.gamma_fft, self.alpha_tv].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

pub fn l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_dims(b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum();
    Ok(s / a.len().max(1) as f64)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_dims(b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(s / a.len().max(1) as f64)
}

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut g = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    g
}

/// Separable Gaussian filtering; taps falling outside the image are dropped
/// and the remaining weights renormalized.
fn gauss_filter(src: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let pass = |src: &[f64], len: usize, idx: &dyn Fn(usize, usize) -> usize, count: usize| {
        let mut out = vec![0.0; src.len()];
        for line in 0..count {
            for i in 0..len {
                let (mut acc, mut norm) = (0.0, 0.0);
                for k in -r..=r {
                    let j = i as isize + k;
                    if j >= 0 && j < len as isize {
                        let wt = g[(k + r) as usize];
                        acc += wt * src[idx(line, j as usize)];
                        norm += wt;
                    }
                }
                out[idx(line, i)] = acc / norm;
            }
        }
        out
    };
    let rows = pass(src, w, &|y, x| y * w + x, h);
    pass(&rows, h, &|x, y| y * w + x, w)
}

/// Mean SSIM over all channels and pixels (11×11 Gaussian, σ = 1.5,
/// K1 = 0.01, K2 = 0.03, dynamic range 1).
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_dims(b)?;
    let (c, h, w) = a.chw()?;
    let hw = h * w;
    if hw == 0 {
        return Ok(1.0);
    }
    let g = gaussian_window();
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = a.plane(ch).iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.plane(ch).iter().map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = gauss_filter(&x, h, w, &g);
        let my = gauss_filter(&y, h, w, &g);
        let exx = gauss_filter(&prod(&x, &x), h, w, &g);
        let eyy = gauss_filter(&prod(&y, &y), h, w, &g);
        let exy = gauss_filter(&prod(&x, &y), h, w, &g);
        for p in 0..hw {
            let (sx, sy, sxy) = (exx[p] - mx[p] * mx[p], eyy[p] - my[p] * my[p], exy[p] - mx[p] * my[p]);
            let num = (2.0 * mx[p] * my[p] + SSIM_C1) * (2.0 * sxy + SSIM_C2);
            let den = (mx[p] * mx[p] + my[p] * my[p] + SSIM_C1) * (sx + sy + SSIM_C2);
            total += num / den;
        }
    }
    Ok(total / (c * hw) as f64)
}

/// Mean of |Re| and |Im| over the 2-D DFT of `a − b`, per channel.
pub fn fft_l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_dims(b)?;
    let (c, h, w) = a.chw()?;
    if h * w == 0 {
        return Ok(0.0);
    }
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = (planner.plan_fft_forward(w), planner.plan_fft_forward(h));
    let mut total = 0.0;
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for ch in 0..c {
        let mut buf: Vec<Complex<f64>> =
            a.plane(ch).iter().zip(b.plane(ch)).map(|(&x, &y)| Complex::new(x as f64 - y as f64, 0.0)).collect();
        for row in buf.chunks_mut(w) {
            row_fft.process(row);
        }
        for x in 0..w {
            for y in 0..h {
                col[y] = buf[y * w + x];
            }
            col_fft.process(&mut col);
            total += col.iter().map(|z| z.re.abs() + z.im.abs()).sum::<f64>();
        }
    }
    Ok(total / (2 * c * h * w) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconParts {
    pub l1: f64,
    pub ssim: f64,
    pub fft: f64,
    pub recon: f64,
}

pub fn recon_parts(y: &Tensor, y_gt: &Tensor, gamma: f64) -> Result<ReconParts> {
    let (l1, ssim, fft) = (l1(y, y_gt)?, ssim(y, y_gt)?, fft_l1(y, y_gt)?);
    Ok(ReconParts { l1, ssim, fft, recon: l1 + (1.0 - ssim) + gamma * fft })
}

/// `L1 + (1 − SSIM) + γ·FFT`.
pub fn recon_loss(y: &Tensor, y_gt: &Tensor, gamma: f64) -> Result<f64> {
    Ok(recon_parts(y, y_gt, gamma)?.recon)
}

/// Binary cross-entropy of one scale's blur probabilities (`H×W`) against a
/// binary target of the same extent.
pub fn bce(probs: &Tensor, gt: &Tensor) -> Result<f64> {
    probs.expect_same_dims(gt)?;
    let s: f64 = probs
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &t)| {
            let p = (p as f64).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let t = t as f64;
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(s / probs.len().max(1) as f64)
}

/// Sum over scales of the per-pixel BCE, with the full-resolution target
/// max-pooled to each scale.
pub fn mask_loss(probs_per_scale: &[Tensor], gt: &Tensor) -> Result<f64> {
    let (h, w) = gt.hw()?;
    let mut total = 0.0;
    for p in probs_per_scale {
        let (ph, pw) = p.hw()?;
        if ph == 0 || h % ph != 0 || w % pw != 0 || h / ph != w / pw {
            return Err(Error::shape(format!("mask scale {ph}×{pw} does not divide target {h}×{w}")));
        }
        total += bce(p, &downsample_gt_mask(gt, h / ph)?)?;
    }
    Ok(total)
}

/// Bilinear splat of every source pixel to `z + offset(z)`: returns the
/// accumulated values (`C×H×W`) and weights (`H×W`).
pub fn splat(sharp: &Tensor, offset: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (c, h, w) = sharp.chw()?;
    if offset.field_hw(2)? != (h, w) {
        return Err(Error::shape(format!("offset {:?} for {h}×{w} image", offset.dims())));
    }
    let hw = h * w;
    let mut acc = vec![0.0f64; c * hw];
    let mut wsum = vec![0.0f64; hw];
    let off = offset.data();
    for p in 0..hw {
        let (dx, dy) = (off[2 * p] as f64, off[2 * p + 1] as f64);
        let ty = (p / w) as f64 + dy;
        let tx = (p % w) as f64 + dx;
        let (y0, x0) = (ty.floor(), tx.floor());
        let (fy, fx) = (ty - y0, tx - x0);
        for (oy, ox, wt) in [(0, 0, (1.0 - fy) * (1.0 - fx)), (0, 1, (1.0 - fy) * fx), (1, 0, fy * (1.0 - fx)), (1, 1, fy * fx)] {
            let (cy, cx) = (y0 as i64 + oy, x0 as i64 + ox);
            if wt == 0.0 || cy < 0 || cy >= h as i64 || cx < 0 || cx >= w as i64 {
                continue;
            }
            let t = cy as usize * w + cx as usize;
            wsum[t] += wt;
            for ch in 0..c {
                acc[ch * hw + t] += wt * sharp.data()[ch * hw + p] as f64;
            }
        }
    }
    Ok((acc, wsum))
}

/// Below this accumulated weight a target pixel counts as a hole.
pub const SPLAT_HOLE: f64 = 1e-6;

/// Average-splatting forward warp; `offset` is `H×W×2` as `(dx, dy)`.
/// Pixels that receive no weight keep the source value.
pub fn forward_warp(sharp: &Tensor, offset: &Tensor) -> Result<Tensor> {
    let (c, h, w) = sharp.chw()?;
    let (acc, wsum) = splat(sharp, offset)?;
    let hw = h * w;
    let out = (0..c * hw)
        .map(|i| {
            let ws = wsum[i % hw];
            if ws > SPLAT_HOLE {
                (acc[i] / ws) as f32
            } else {
                sharp.data()[i]
            }
        })
        .collect();
    Tensor::new([c, h, w], out)
}

/// Mean of the warped frames along the trajectory.
pub fn synthesize_blur(traj: &TrajectoryField, sharp: &Tensor) -> Result<Tensor> {
    let (c, h, w) = sharp.chw()?;
    if traj.hw() != (h, w) {
        return Err(Error::shape(format!("trajectory {:?} for {h}×{w} image", traj.hw())));
    }
    let mut sum = vec![0.0f64; c * h * w];
    for n in 0..traj.steps {
        let warped = forward_warp(sharp, &traj.step_tensor(n))?;
        sum.iter_mut().zip(warped.data()).for_each(|(s, &v)| *s += v as f64);
    }
    let k = traj.steps.max(1) as f64;
    Tensor::new([c, h, w], sum.into_iter().map(|s| (s / k) as f32).collect())
}

/// MSE between the synthesized blur and the observed blurred frame.
pub fn reblur_loss(traj: &TrajectoryField, sharp_gt: &Tensor, blurred: &Tensor) -> Result<f64> {
    mse(&synthesize_blur(traj, sharp_gt)?, blurred)
}

/// Anisotropic TV of an `H×W×2` field: mean |horizontal difference| plus
/// mean |vertical difference|, each averaged over both components.
pub fn tv_loss(field: &Tensor) -> Result<f64> {
    let (h, w) = field.field_hw(2)?;
    let f = field.data();
    let at = |y: usize, x: usize, k: usize| f[(y * w + x) * 2 + k] as f64;
    let mut sx = 0.0;
    let mut sy = 0.0;
    for y in 0..h {
        for x in 0..w {
            for k in 0..2 {
                if x + 1 < w {
                    sx += (at(y, x + 1, k) - at(y, x, k)).abs();
                }
                if y + 1 < h {
                    sy += (at(y + 1, x, k) - at(y, x, k)).abs();
                }
            }
        }
    }
    let nx = (h * w.saturating_sub(1) * 2) as f64;
    let ny = (h.saturating_sub(1) * w * 2) as f64;
    Ok(if nx > 0.0 { sx / nx } else { 0.0 } + if ny > 0.0 { sy / ny } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OffsetParts {
    /// Σ over scales of the reblur MSE.
    pub reblur: f64,
    /// Σ over scales and steps of the TV of each step's displacements.
    pub tv: f64,
}

/// Reblur and TV terms for one displacement pair per scale. The sharp and
/// blurred images are box-downsampled to each pair's resolution.
pub fn offset_parts(
    pairs: &[DisplacementPair],
    mode: TrajectoryMode,
    n_steps: usize,
    sharp_gt: &Tensor,
    blurred: &Tensor,
) -> Result<OffsetParts> {
    sharp_gt.expect_same_dims(blurred)?;
    let (_, h, w) = sharp_gt.chw()?;
    let mut parts = OffsetParts::default();
    for pair in pairs {
        let (ph, pw) = pair.hw()?;
        if ph == 0 || h % ph != 0 || w % pw != 0 || h / ph != w / pw {
            return Err(Error::shape(format!("displacement scale {ph}×{pw} does not divide image {h}×{w}")));
        }
        let f = h / ph;
        let (s, b) = if f == 1 { (sharp_gt.clone(), blurred.clone()) } else { (box_downsample(sharp_gt, f)?, box_downsample(blurred, f)?) };
        let traj = interpolate(pair, n_steps, mode)?;
        parts.reblur += reblur_loss(&traj, &s, &b)?;
        for n in 0..traj.steps {
            parts.tv += tv_loss(&traj.step_tensor(n))?;
        }
    }
    Ok(parts)
}

/// `recon + λ·mask + (reblur + α·tv)`.
pub fn total_loss(recon: f64, mask: f64, offset: OffsetParts, weights: &LossWeights) -> f64 {
    recon + weights.lambda_mask * mask + offset.reblur + weights.alpha_tv * offset.tv
}

/// One evaluation's loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub l1: f64,
    pub ssim: f64,
    pub fft: f64,
    pub recon: f64,
    pub mask: f64,
    pub reblur: f64,
    pub tv: f64,
    pub total: f64,
}

impl LossRecord {
    pub fn new(recon: ReconParts, mask: f64, offset: OffsetParts, weights: &LossWeights) -> Self {
        Self {
            l1: recon.l1,
            ssim: recon.ssim,
            fft: recon.fft,
            recon: recon.recon,
            mask,
            reblur: offset.reblur,
            tv: offset.tv,
            total: total_loss(recon.recon, mask, offset, weights),
        }
    }
}

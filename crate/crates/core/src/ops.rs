//! Normalization, gating, attention, sampling and resampling primitives.

use rayon::prelude::*;

use crate::conv::{conv2d, ConvSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f32 = 1e-6;

/// Per-pixel normalization across channels, then the `gamma`/`beta` affine.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if gamma.dims() != [c] || beta.dims() != [c] {
        return Err(Error::shape(format!(
            "layer norm params {:?}/{:?} for {c} channels",
            gamma.dims(),
            beta.dims()
        )));
    }
    let hw = h * w;
    let src = x.data();
    let mut mean = vec![0.0f32; hw];
    for ch in 0..c {
        mean.iter_mut().zip(&src[ch * hw..(ch + 1) * hw]).for_each(|(m, &v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= c as f32);
    let mut var = vec![0.0f32; hw];
    for ch in 0..c {
        for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(&src[ch * hw..(ch + 1) * hw]) {
            let d = v - m;
            *s += d * d;
        }
    }
    let inv_std: Vec<f32> = var.iter().map(|&s| 1.0 / (s / c as f32 + LAYER_NORM_EPS).sqrt()).collect();
    let mut out = vec![0.0f32; c * hw];
    out.par_chunks_mut(hw.max(1)).enumerate().for_each(|(ch, o)| {
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        let s = &src[ch * hw..(ch + 1) * hw];
        for i in 0..hw {
            o[i] = (s[i] - mean[i]) * inv_std[i] * g + b;
        }
    });
    Tensor::new([c, h, w], out)
}

/// Split channels in halves and multiply them elementwise.
pub fn simple_gate(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if c % 2 != 0 {
        return Err(Error::shape(format!("simple gate needs an even channel count, got {c}")));
    }
    let half = c / 2 * h * w;
    let (a, b) = x.data().split_at(half);
    Tensor::new([c / 2, h, w], a.iter().zip(b).map(|(&p, &q)| p * q).collect())
}

/// Global average pool, a pointwise map over the pooled vector, and a
/// per-channel rescale of the input.
pub fn simplified_channel_attention(x: &Tensor, conv: &ConvSpec) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if conv.in_channels != c || conv.out_channels != c || !conv.is_pointwise() {
        return Err(Error::shape(format!("attention map must be a pointwise {c}→{c} conv")));
    }
    let hw = (h * w) as f32;
    let pooled: Vec<f32> = (0..c).map(|ch| x.plane(ch).iter().sum::<f32>() / hw).collect();
    let scale = conv2d(&Tensor::new([c, 1, 1], pooled)?, conv)?;
    let mut out = x.clone();
    out.data_mut()
        .par_chunks_mut((h * w).max(1))
        .zip(scale.data())
        .for_each(|(plane, &s)| plane.iter_mut().for_each(|v| *v *= s));
    Ok(out)
}

/// Repeat the channel block `times` times: output channel `c` is input
/// channel `c mod C`.
pub fn channel_repeat(x: &Tensor, times: usize) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let mut data = Vec::with_capacity(c * h * w * times);
    for _ in 0..times {
        data.extend_from_slice(x.data());
    }
    Tensor::new([c * times, h, w], data)
}

/// Four-neighbor bilinear interpolation of channel `c` at `(y, x)`, with
/// coordinates clamped to the image border first.
pub fn bilinear_sample(x: &Tensor, y_coord: f32, x_coord: f32, c: usize) -> f32 {
    let (_, h, w) = x.chw().expect("bilinear_sample needs C×H×W");
    let plane = x.plane(c);
    let yc = y_coord.clamp(0.0, (h - 1) as f32);
    let xc = x_coord.clamp(0.0, (w - 1) as f32);
    let y0 = yc.floor() as usize;
    let x0 = xc.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = yc - y0 as f32;
    let fx = xc - x0 as f32;
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Depth-to-space: `(C·r²)×H×W → C×(H·r)×(W·r)`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::shape(format!("pixel shuffle of {c} channels by {r}")));
    }
    let co = c / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut out = vec![0.0f32; c * h * w];
    for oc in 0..co {
        for i in 0..r {
            for j in 0..r {
                let src = x.plane(oc * r * r + i * r + j);
                for y in 0..h {
                    for xx in 0..w {
                        out[(oc * ho + y * r + i) * wo + xx * r + j] = src[y * w + xx];
                    }
                }
            }
        }
    }
    Tensor::new([co, ho, wo], out)
}

/// Halve `H, W` and double `C` with a 2×2 stride-2 conv.
pub fn resample_down(x: &Tensor, conv: &ConvSpec) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("downsample needs even extents, got {h}×{w}")));
    }
    if conv.kernel_size != 2 || conv.stride != 2 || conv.out_channels != 2 * c {
        return Err(Error::shape("downsample conv must be 2×2 stride 2 with C→2C"));
    }
    conv2d(x, conv)
}

/// Pointwise C→2C conv followed by a 2× pixel shuffle, giving `C/2` channels
/// at twice the resolution.
pub fn resample_up(x: &Tensor, conv: &ConvSpec) -> Result<Tensor> {
    let (c, _, _) = x.chw()?;
    if !conv.is_pointwise() || conv.out_channels != 2 * c {
        return Err(Error::shape("upsample conv must be pointwise C→2C"));
    }
    pixel_shuffle(&conv2d(x, conv)?, 2)
}

/// Average over `f×f` cells of every channel.
pub fn box_downsample(x: &Tensor, f: usize) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::shape(format!("{h}×{w} not divisible by {f}")));
    }
    let (ho, wo) = (h / f, w / f);
    let norm = (f * f) as f32;
    let mut out = vec![0.0f32; c * ho * wo];
    for ch in 0..c {
        let src = x.plane(ch);
        for y in 0..ho {
            for xx in 0..wo {
                let mut s = 0.0;
                for i in 0..f {
                    for j in 0..f {
                        s += src[(y * f + i) * w + xx * f + j];
                    }
                }
                out[(ch * ho + y) * wo + xx] = s / norm;
            }
        }
    }
    Tensor::new([c, ho, wo], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(c: usize) -> Tensor {
        Tensor::full([c], 1.0)
    }

    #[test]
    fn layer_norm_constant_vector_yields_beta() {
        let x = Tensor::full([4, 2, 2], 3.0);
        let beta = Tensor::new([4], vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let y = layer_norm(&x, &ones(4), &beta).unwrap();
        for c in 0..4 {
            assert!(y.plane(c).iter().all(|&v| (v - beta.data()[c]).abs() < 1e-6));
        }
    }

    #[test]
    fn layer_norm_two_channel_closed_form() {
        let x = Tensor::new([2, 1, 1], vec![1.0, 3.0]).unwrap();
        let y = layer_norm(&x, &ones(2), &Tensor::zeros([2])).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-3);
        assert!((y.data()[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn simple_gate_identities() {
        let x = Tensor::from_fn([3, 2, 2], |i| i as f32 - 4.0);
        let with_ones = Tensor::concat_channels(&[&x, &Tensor::full([3, 2, 2], 1.0)]).unwrap();
        assert_eq!(simple_gate(&with_ones).unwrap(), x);
        let with_zeros = Tensor::concat_channels(&[&x, &Tensor::zeros([3, 2, 2])]).unwrap();
        assert!(simple_gate(&with_zeros).unwrap().data().iter().all(|&v| v == 0.0));
        let pair = Tensor::new([2, 1, 1], vec![2.0, 3.0]).unwrap();
        assert_eq!(simple_gate(&pair).unwrap().data(), &[6.0]);
    }

    #[test]
    fn simple_gate_rejects_odd_channels() {
        assert!(simple_gate(&Tensor::zeros([3, 2, 2])).is_err());
    }

    fn pw(c: usize, w: Vec<f32>, b: Vec<f32>) -> ConvSpec {
        ConvSpec::pointwise(c, c, Tensor::new([c, c, 1, 1], w).unwrap(), Some(Tensor::new([c], b).unwrap())).unwrap()
    }

    #[test]
    fn sca_cases() {
        let x = Tensor::full([2, 3, 3], 1.0);
        let id = pw(2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]);
        assert_eq!(simplified_channel_attention(&x, &id).unwrap(), x);

        let zero = pw(2, vec![0.0; 4], vec![0.0; 2]);
        let y = simplified_channel_attention(&Tensor::from_fn([2, 3, 3], |i| i as f32), &zero).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        // mean 2.0, weight 0.5 → scale 1.0
        let x = Tensor::new([1, 1, 2], vec![1.0, 3.0]).unwrap();
        let half = pw(1, vec![0.5], vec![0.0]);
        assert_eq!(simplified_channel_attention(&x, &half).unwrap(), x);
    }

    #[test]
    fn bilinear_cases() {
        let x = Tensor::new([1, 2, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        assert_eq!(bilinear_sample(&x, 1.0, 1.0, 0), 6.0);
        assert_eq!(bilinear_sample(&x, 0.0, 0.5, 0), 1.0);
        assert_eq!(bilinear_sample(&x, -5.3, -7.9, 0), 0.0);
        assert_eq!(bilinear_sample(&x, 9.0, 9.0, 0), 6.0);
    }

    #[test]
    fn pixel_shuffle_depth_to_space() {
        let x = Tensor::new([4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.dims(), &[1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn down_up_round_trips_shape_and_zero() {
        let c = 2;
        let down = ConvSpec::new(c, 2 * c, 2, 0, 2, 1, Tensor::full([2 * c, c, 2, 2], 0.1), None).unwrap();
        let up = ConvSpec::pointwise(2 * c, 4 * c, Tensor::full([4 * c, 2 * c, 1, 1], 0.1), None).unwrap();
        let x = Tensor::zeros([c, 4, 6]);
        let d = resample_down(&x, &down).unwrap();
        assert_eq!(d.dims(), &[4, 2, 3]);
        let u = resample_up(&d, &up).unwrap();
        assert_eq!(u.dims(), x.dims());
        assert!(u.data().iter().all(|&v| v == 0.0));
        assert!(resample_down(&Tensor::zeros([c, 3, 4]), &down).is_err());
    }

    #[test]
    fn channel_repeat_tiles() {
        let x = Tensor::new([2, 1, 1], vec![1.0, 2.0]).unwrap();
        assert_eq!(channel_repeat(&x, 2).unwrap().data(), &[1.0, 2.0, 1.0, 2.0]);
    }
}

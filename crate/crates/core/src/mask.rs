//! Per-pixel blur probabilities and binary blur masks.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::{conv2d, gemm, ConvSpec, MatRef};
use crate::error::{Error, Result};
use crate::ops::layer_norm;
use crate::tensor::Tensor;

/// Default decision threshold on the blur probability.
pub const DEFAULT_EPSILON: f32 = 0.5;
/// Default Gumbel-softmax temperature.
pub const DEFAULT_TAU: f32 = 1.0;

/// Weights of the two MLPs of the predictor.
///
/// `fc1` (C→C, after a layer norm) embeds each pixel. `fc2` (2C→C/2) sees the
/// embedding concatenated with its spatial mean, `fc3` (C/2→2) emits the
/// blur/sharp logits. All three are pointwise convs.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPredictorParams {
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub fc1: ConvSpec,
    pub fc2: ConvSpec,
    pub fc3: ConvSpec,
}

impl MaskPredictorParams {
    pub fn channels(&self) -> usize {
        self.fc1.in_channels
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        let ok = c % 2 == 0
            && self.ln_gamma.dims() == [c]
            && self.ln_beta.dims() == [c]
            && self.fc1.is_pointwise()
            && self.fc1.out_channels == c
            && self.fc2.is_pointwise()
            && self.fc2.in_channels == 2 * c
            && self.fc2.out_channels == c / 2
            && self.fc3.is_pointwise()
            && self.fc3.in_channels == c / 2
            && self.fc3.out_channels == 2;
        if ok {
            Ok(())
        } else {
            Err(Error::shape(format!("mask predictor params inconsistent for {c} channels")))
        }
    }
}

/// MACs of one predictor evaluation over `hw` pixels at `c` channels.
///
/// The concat with the broadcast mean is evaluated as `A·e + (B·g)`, so the
/// global half of `fc2` is paid once, not per pixel.
pub fn predictor_macs(c: usize, hw: u64) -> [(&'static str, u64); 4] {
    let (c, h) = (c as u64, c as u64 / 2);
    [
        ("fc1", hw * c * c),
        ("fc2.local", hw * h * c),
        ("fc2.global", h * c),
        ("fc3", hw * 2 * h),
    ]
}

/// Smooth nonlinearity between `fc2` and `fc3` (tanh form of GELU).
pub fn gelu(x: f32) -> f32 {
    const K: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044_715 * x * x * x)).tanh())
}

/// Per-pixel `(blur, sharp)` probabilities, `H×W×2`.
pub fn predict_probs(f_in: &Tensor, params: &MaskPredictorParams) -> Result<Tensor> {
    params.validate()?;
    let (c, h, w) = f_in.chw()?;
    if c != params.channels() {
        return Err(Error::shape(format!("predictor expects {} channels, got {c}", params.channels())));
    }
    let hw = h * w;
    let half = c / 2;
    let e = conv2d(&layer_norm(f_in, &params.ln_gamma, &params.ln_beta)?, &params.fc1)?;
    let g: Vec<f32> = (0..c).map(|ch| e.plane(ch).iter().sum::<f32>() / hw as f32).collect();

    // hidden = W2[:, :C]·e + (W2[:, C:]·g + b2)
    let w2 = params.fc2.weight.data();
    let mut hidden = vec![0.0f32; half * hw];
    for (o, row) in hidden.chunks_mut(hw.max(1)).enumerate() {
        let wrow = &w2[o * 2 * c + c..(o + 1) * 2 * c];
        let shift: f32 = params.fc2.bias_value(o) + wrow.iter().zip(&g).map(|(a, b)| a * b).sum::<f32>();
        row.fill(shift);
    }
    gemm(
        half,
        c,
        hw,
        MatRef { data: w2, row_stride: 2 * c, col_stride: 1 },
        MatRef::row_major(e.data(), hw),
        1.0,
        &mut hidden,
    );
    hidden.iter_mut().for_each(|v| *v = gelu(*v));
    let logits = conv2d(&Tensor::new([half, h, w], hidden)?, &params.fc3)?;

    let (l0, l1) = logits.data().split_at(hw);
    let mut probs = Vec::with_capacity(2 * hw);
    for (&a, &b) in l0.iter().zip(l1) {
        let (p0, p1) = softmax2(a, b);
        probs.push(p0);
        probs.push(p1);
    }
    Tensor::new([h, w, 2], probs)
}

/// Two-way softmax computed in f64; the pair sums to 1 to f32 rounding.
pub fn softmax2(a: f32, b: f32) -> (f32, f32) {
    let (a, b) = (a as f64, b as f64);
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let p0 = ea / (ea + eb);
    (p0 as f32, (1.0 - p0) as f32)
}

/// Blur probabilities and the hard mask derived from them at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurMask {
    /// Blur probability per pixel, `H×W`.
    pub probs: Tensor,
    /// Exactly 0 or 1 per pixel, `H×W`.
    pub hard: Tensor,
    pub scale_id: usize,
}

impl BlurMask {
    pub fn hw(&self) -> (usize, usize) {
        self.hard.hw().expect("mask is H×W")
    }

    /// Number of selected (blurred) pixels.
    pub fn q(&self) -> usize {
        self.hard.data().iter().filter(|&&v| v == 1.0).count()
    }

    /// A mask whose probabilities equal its hard values.
    pub fn from_hard(hard: Tensor, scale_id: usize) -> Result<Self> {
        hard.hw()?;
        Ok(Self { probs: hard.clone(), hard, scale_id })
    }

    pub fn ones(h: usize, w: usize, scale_id: usize) -> Self {
        Self { probs: Tensor::full([h, w], 1.0), hard: Tensor::full([h, w], 1.0), scale_id }
    }
}

fn blur_channel(probs: &Tensor) -> Result<Tensor> {
    let (h, w) = probs.field_hw(2)?;
    Tensor::new([h, w], probs.data().chunks(2).map(|p| p[0]).collect())
}

/// Hard mask by `p_blur > epsilon` (strict).
pub fn threshold_mask(probs: &Tensor, epsilon: f32) -> Result<BlurMask> {
    let p0 = blur_channel(probs)?;
    let hard = p0.map(|p| if p > epsilon { 1.0 } else { 0.0 });
    Ok(BlurMask { probs: p0, hard, scale_id: 0 })
}

/// Two uniforms in (0, 1) from the counter-based stream `(seed, pixel)`.
/// Each pixel owns a fixed block of the ChaCha keystream, so the draw does
/// not depend on evaluation order.
fn pixel_uniforms(rng: &mut ChaCha8Rng, pixel: usize) -> (f64, f64) {
    rng.set_word_pos(pixel as u128 * 4);
    let to_unit = |bits: u64| ((bits >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
    (to_unit(rng.next_u64()), to_unit(rng.next_u64()))
}

fn gumbel(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Straight-through Gumbel-softmax sample with caller-supplied noise
/// `(g_blur, g_sharp)` per pixel. The forward value is the hard one-hot.
pub fn gumbel_mask_with_noise(
    probs: &Tensor,
    temperature: f32,
    mut noise: impl FnMut(usize) -> (f64, f64),
) -> Result<BlurMask> {
    if !(temperature > 0.0) {
        return Err(Error::arg(format!("Gumbel temperature must be positive, got {temperature}")));
    }
    let p0 = blur_channel(probs)?;
    let tau = temperature as f64;
    let hard: Vec<f32> = probs
        .data()
        .chunks(2)
        .enumerate()
        .map(|(i, p)| {
            let (g0, g1) = noise(i);
            let z0 = ((p[0] as f64).max(f64::MIN_POSITIVE).ln() + g0) / tau;
            let z1 = ((p[1] as f64).max(f64::MIN_POSITIVE).ln() + g1) / tau;
            if z0 > z1 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let hard = Tensor::new(p0.dims().to_vec(), hard)?;
    Ok(BlurMask { probs: p0, hard, scale_id: 0 })
}

/// Gumbel-softmax hard mask, reproducible for a fixed `seed`.
pub fn gumbel_mask(probs: &Tensor, temperature: f32, seed: u64) -> Result<BlurMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gumbel_mask_with_noise(probs, temperature, |i| {
        let (u0, u1) = pixel_uniforms(&mut rng, i);
        (gumbel(u0), gumbel(u1))
    })
}

/// Max-pool a binary mask over `factor×factor` cells.
pub fn downsample_gt_mask(mask: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w) = mask.hw()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!("{h}×{w} mask not divisible by {factor}")));
    }
    let (ho, wo) = (h / factor, w / factor);
    let src = mask.data();
    let out = (0..ho * wo)
        .map(|i| {
            let (y, x) = (i / wo, i % wo);
            let mut m = f32::NEG_INFINITY;
            for dy in 0..factor {
                for dx in 0..factor {
                    m = m.max(src[(y * factor + dy) * w + x * factor + dx]);
                }
            }
            m
        })
        .collect();
    Tensor::new([ho, wo], out)
}

/// Bring an `H×W` mask to `th×tw`: max-pool when shrinking, nearest
/// replication when growing. Extents must differ by an integer factor.
pub fn resample_mask(mask: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let (h, w) = mask.hw()?;
    if (h, w) == (th, tw) {
        return Ok(mask.clone());
    }
    if th <= h && h % th == 0 && w % tw == 0 && h / th == w / tw {
        return downsample_gt_mask(mask, h / th);
    }
    if th % h == 0 && tw % w == 0 && th / h == tw / w {
        let f = th / h;
        return Ok(Tensor::from_fn([th, tw], |i| mask.data()[(i / tw / f) * w + (i % tw) / f]));
    }
    Err(Error::shape(format!("cannot resample {h}×{w} mask to {th}×{tw}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pw(cin: usize, cout: usize, f: impl Fn(usize) -> f32) -> ConvSpec {
        ConvSpec::pointwise(
            cin,
            cout,
            Tensor::from_fn([cout, cin, 1, 1], &f),
            Some(Tensor::from_fn([cout], |i| f(i + 7) * 0.5)),
        )
        .unwrap()
    }

    fn params(c: usize) -> MaskPredictorParams {
        MaskPredictorParams {
            ln_gamma: Tensor::from_fn([c], |i| 1.0 + 0.1 * i as f32),
            ln_beta: Tensor::from_fn([c], |i| 0.05 * i as f32),
            fc1: pw(c, c, |i| ((i * 37 % 11) as f32 - 5.0) * 0.1),
            fc2: pw(2 * c, c / 2, |i| ((i * 17 % 13) as f32 - 6.0) * 0.07),
            fc3: pw(c / 2, 2, |i| ((i * 29 % 7) as f32 - 3.0) * 0.2),
        }
    }

    #[test]
    fn zero_features_zero_head_is_uniform() {
        let mut p = params(4);
        p.fc3.weight = Tensor::zeros([2, 2, 1, 1]);
        p.fc3.bias = Some(Tensor::zeros([2]));
        let probs = predict_probs(&Tensor::zeros([4, 3, 3]), &p).unwrap();
        assert!(probs.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn probability_pairs_sum_to_one() {
        let x = Tensor::from_fn([4, 5, 3], |i| ((i * 7919) % 23) as f32 * 0.3 - 3.0);
        let probs = predict_probs(&x, &params(4)).unwrap();
        for pair in probs.data().chunks(2) {
            assert!((pair[0] + pair[1] - 1.0).abs() <= 1e-6);
            assert!((0.0..=1.0).contains(&pair[0]));
        }
    }

    /// Direct scalar evaluation of the MLPs with an explicit concat.
    fn scalar_probs(x: &[f32], p: &MaskPredictorParams) -> (f32, f32) {
        let c = x.len();
        let mean = x.iter().sum::<f32>() / c as f32;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
        let ln: Vec<f32> = (0..c)
            .map(|i| (x[i] - mean) / (var + 1e-6).sqrt() * p.ln_gamma.data()[i] + p.ln_beta.data()[i])
            .collect();
        let lin = |spec: &ConvSpec, v: &[f32]| -> Vec<f32> {
            (0..spec.out_channels)
                .map(|o| {
                    spec.bias_value(o)
                        + (0..spec.in_channels).map(|i| spec.weight.data()[o * spec.in_channels + i] * v[i]).sum::<f32>()
                })
                .collect()
        };
        let e = lin(&p.fc1, &ln);
        let cat: Vec<f32> = e.iter().chain(e.iter()).copied().collect();
        let hidden: Vec<f32> = lin(&p.fc2, &cat).into_iter().map(gelu).collect();
        let logits = lin(&p.fc3, &hidden);
        softmax2(logits[0], logits[1])
    }

    #[test]
    fn single_pixel_matches_scalar_oracle() {
        let p = params(6);
        let x = [0.3, -1.2, 2.0, 0.7, -0.4, 1.1];
        let got = predict_probs(&Tensor::new([6, 1, 1], x.to_vec()).unwrap(), &p).unwrap();
        let (p0, p1) = scalar_probs(&x, &p);
        assert!((got.data()[0] - p0).abs() < 1e-5);
        assert!((got.data()[1] - p1).abs() < 1e-5);
    }

    #[test]
    fn rejects_channel_mismatch() {
        assert!(predict_probs(&Tensor::zeros([6, 2, 2]), &params(4)).is_err());
    }

    fn probs_of(p0: &[f32]) -> Tensor {
        Tensor::new([1, p0.len(), 2], p0.iter().flat_map(|&p| [p, 1.0 - p]).collect()).unwrap()
    }

    #[test]
    fn threshold_is_strict() {
        let m = threshold_mask(&probs_of(&[0.6, 0.5, 0.0, 0.51]), 0.5).unwrap();
        assert_eq!(m.hard.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(m.q(), 2);
        let z = threshold_mask(&probs_of(&[0.0; 5]), 0.5).unwrap();
        assert_eq!(z.q(), 0);
    }

    #[test]
    fn gumbel_rejects_non_positive_temperature() {
        assert!(matches!(gumbel_mask(&probs_of(&[0.5]), 0.0, 1), Err(Error::Argument(_))));
        assert!(gumbel_mask(&probs_of(&[0.5]), -1.0, 1).is_err());
    }

    #[test]
    fn gumbel_is_binary_and_seed_reproducible() {
        let probs = probs_of(&(0..200).map(|i| i as f32 / 199.0).collect::<Vec<_>>());
        let a = gumbel_mask(&probs, 0.7, 42).unwrap();
        let b = gumbel_mask(&probs, 0.7, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.hard.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let c = gumbel_mask(&probs, 0.7, 43).unwrap();
        assert_ne!(a.hard, c.hard);
    }

    #[test]
    fn gumbel_certain_blur_always_fires() {
        let m = gumbel_mask(&probs_of(&vec![1.0; 10_000]), 1.0, 9).unwrap();
        assert!(m.q() as f64 / 10_000.0 > 0.999);
    }

    #[test]
    fn zero_noise_limit_is_argmax() {
        let p: Vec<f32> = (0..101).map(|i| i as f32 / 100.0).collect();
        let probs = probs_of(&p);
        let g = gumbel_mask_with_noise(&probs, 1e-4, |_| (0.0, 0.0)).unwrap();
        let t = threshold_mask(&probs, 0.5).unwrap();
        assert_eq!(g.hard, t.hard);
    }

    #[test]
    fn gt_mask_max_pool() {
        let ones = Tensor::full([4, 4], 1.0);
        assert_eq!(downsample_gt_mask(&ones, 2).unwrap(), Tensor::full([2, 2], 1.0));
        let mut single = Tensor::zeros([4, 4]);
        single.data_mut()[5] = 1.0;
        let d = downsample_gt_mask(&single, 2).unwrap();
        assert_eq!(d.data(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(downsample_gt_mask(&Tensor::zeros([4, 4]), 4).unwrap().data(), &[0.0]);
        assert!(downsample_gt_mask(&ones, 3).is_err());
    }

    #[test]
    fn resample_mask_up_and_down() {
        let m = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let up = resample_mask(&m, 4, 4).unwrap();
        assert_eq!(up.data().iter().filter(|&&v| v == 1.0).count(), 4);
        assert_eq!(up.data()[5], 1.0);
        assert_eq!(resample_mask(&up, 1, 1).unwrap().data(), &[1.0]);
        assert!(resample_mask(&m, 3, 3).is_err());
    }
}

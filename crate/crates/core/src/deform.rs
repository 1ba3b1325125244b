//! Depthwise deformable 3×3 convolution driven by trajectory offsets.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ledger::FlopLedger;
use crate::motion::OffsetField;
use crate::tensor::Tensor;

/// One 3×3 filter per channel, sampled at offset positions shared by all
/// channels.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformDWSpec {
    /// `C×1×3×3`, same layout as a depthwise [`ConvSpec`](crate::conv::ConvSpec).
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl DeformDWSpec {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let d = weight.dims();
        if d.len() != 4 || d[1] != 1 || d[2] != 3 || d[3] != 3 {
            return Err(Error::shape(format!("deformable weight must be C×1×3×3, got {d:?}")));
        }
        if let Some(b) = &bias {
            if b.dims() != [d[0]] {
                return Err(Error::shape(format!("deformable bias {:?} for {} channels", b.dims(), d[0])));
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Four bilinear corners of one sample; weights are zero for corners
/// outside the image. `single` marks integer positions, where only the
/// first corner carries weight.
#[derive(Clone, Copy, Default)]
struct Sample {
    idx: [u32; 4],
    wt: [f32; 4],
    single: bool,
}

fn sample_at(h: usize, w: usize, y: f32, x: f32) -> Sample {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let mut s = Sample::default();
    let corners = [(0, 0, (1.0 - fy) * (1.0 - fx)), (0, 1, (1.0 - fy) * fx), (1, 0, fy * (1.0 - fx)), (1, 1, fy * fx)];
    for (k, &(oy, ox, wt)) in corners.iter().enumerate() {
        let (cy, cx) = (y0 as i64 + oy, x0 as i64 + ox);
        if cy >= 0 && cy < h as i64 && cx >= 0 && cx < w as i64 {
            s.idx[k] = (cy as usize * w + cx as usize) as u32;
            s.wt[k] = wt;
        }
    }
    s.single = s.wt[1] == 0.0 && s.wt[2] == 0.0 && s.wt[3] == 0.0;
    s
}

impl Sample {
    #[inline]
    fn read(&self, plane: &[f32]) -> f32 {
        if self.single {
            self.wt[0] * plane[self.idx[0] as usize]
        } else {
            self.wt[0] * plane[self.idx[0] as usize]
                + self.wt[1] * plane[self.idx[1] as usize]
                + self.wt[2] * plane[self.idx[2] as usize]
                + self.wt[3] * plane[self.idx[3] as usize]
        }
    }
}

/// Bilinear sample of one plane with zero fill outside the image.
pub fn bilinear_sample_zero(plane: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    sample_at(h, w, y, x).read(plane)
}

/// Sampling positions of an [`OffsetField`], resolved once and shared by
/// every block and channel that uses the field.
#[derive(Clone)]
pub struct DeformSampler {
    h: usize,
    w: usize,
    table: Vec<Sample>,
}

impl std::fmt::Debug for DeformSampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "DeformSampler({}×{})", self.h, self.w)
    }
}

impl DeformSampler {
    pub fn new(d: &OffsetField) -> Result<Self> {
        let (h, w) = d.hw()?;
        let off = d.d.data();
        let mut table = vec![Sample::default(); h * w * 9];
        table.par_chunks_mut(9 * w.max(1)).enumerate().for_each(|(y, row)| {
            for (k, s) in row.iter_mut().enumerate() {
                let (x, j) = (k / 9, k % 9);
                let o = &off[(y * w + x) * 18 + 2 * j..];
                *s = sample_at(h, w, y as f32 + o[0], x as f32 + o[1]);
            }
        });
        Ok(Self { h, w, table })
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.h, self.w)
    }
}

/// Pixels per work unit; one tile's samples stay cache-resident while
/// every channel reads them.
const TILE: usize = 256;

/// `out[c, z] = bias[c] + Σ_j w[c, j] · sample(x_c, z + d[z, j])`.
///
/// Samples outside the image read as zero, so the base-grid offsets
/// reproduce a zero-padded depthwise 3×3 conv.
pub fn deform_dwconv(x: &Tensor, d: &OffsetField, spec: &DeformDWSpec) -> Result<Tensor> {
    deform_dwconv_with(x, &DeformSampler::new(d)?, spec)
}

/// [`deform_dwconv`] with precomputed sampling positions.
pub fn deform_dwconv_with(x: &Tensor, sampler: &DeformSampler, spec: &DeformDWSpec) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if sampler.hw() != (h, w) {
        return Err(Error::shape(format!("offset field {:?} for {h}×{w} features", sampler.hw())));
    }
    if c != spec.channels() {
        return Err(Error::shape(format!("deformable conv expects {} channels, got {c}", spec.channels())));
    }
    let hw = h * w;
    let tiles: Vec<Vec<f32>> = (0..hw.div_ceil(TILE))
        .into_par_iter()
        .map(|t| {
            let (p0, p1) = (t * TILE, ((t + 1) * TILE).min(hw));
            let n = p1 - p0;
            let mut buf = vec![0.0f32; c * n];
            for (ch, o) in buf.chunks_mut(n).enumerate() {
                let plane = x.plane(ch);
                let wt = &spec.weight.data()[ch * 9..ch * 9 + 9];
                let b = spec.bias.as_ref().map_or(0.0, |b| b.data()[ch]);
                for (i, v) in o.iter_mut().enumerate() {
                    let taps = &sampler.table[(p0 + i) * 9..(p0 + i) * 9 + 9];
                    let mut acc = b;
                    for (j, s) in taps.iter().enumerate() {
                        acc += wt[j] * s.read(plane);
                    }
                    *v = acc;
                }
            }
            buf
        })
        .collect();
    let mut out = vec![0.0f32; c * hw];
    for (t, buf) in tiles.iter().enumerate() {
        let p0 = t * TILE;
        let n = buf.len() / c.max(1);
        for ch in 0..c {
            out[ch * hw + p0..ch * hw + p0 + n].copy_from_slice(&buf[ch * n..(ch + 1) * n]);
        }
    }
    Tensor::new([c, h, w], out)
}

/// Tap MACs and bilinear-interpolation MACs for `c` channels over `hw` pixels.
pub fn deform_macs(c: usize, hw: u64) -> (u64, u64) {
    let taps = hw * c as u64 * 9;
    (taps, taps * 4)
}

pub fn record_deform(ledger: &mut FlopLedger, label: &str, c: usize, hw: u64) {
    let (taps, interp) = deform_macs(c, hw);
    ledger.dense(format!("{label}.taps"), taps);
    ledger.dense(format!("{label}.bilinear"), interp);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{conv2d, ConvSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        Tensor::from_fn(dims.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn base_grid_is_depthwise_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[3, 6, 7]);
        let w = rand_tensor(&mut rng, &[3, 1, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let dw = ConvSpec::depthwise3(3, w.clone(), Some(b.clone())).unwrap();
        let got = deform_dwconv(&x, &OffsetField::base_grid(6, 7), &DeformDWSpec::new(w, Some(b)).unwrap()).unwrap();
        assert!(got.max_abs_diff(&conv2d(&x, &dw).unwrap()).unwrap() <= 1e-6);
    }

    #[test]
    fn constant_field_interior_ignores_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, w) = (12, 12);
        let x = Tensor::full([2, h, w], 0.7);
        let wt = rand_tensor(&mut rng, &[2, 1, 3, 3]);
        let mut d = OffsetField::base_grid(h, w);
        d.d.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-1.5..1.5));
        let out = deform_dwconv(&x, &d, &DeformDWSpec::new(wt.clone(), Some(Tensor::full([2], 0.1))).unwrap()).unwrap();
        for c in 0..2 {
            let want = wt.data()[c * 9..c * 9 + 9].iter().sum::<f32>() * 0.7 + 0.1;
            for y in 3..h - 3 {
                for x_ in 3..w - 3 {
                    assert!((out.at3(c, y, x_) - want).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn half_pixel_shift_on_ramp_matches_scalar_oracle() {
        let x = Tensor::from_fn([1, 5, 5], |i| (i % 5) as f32 + 10.0 * (i / 5) as f32);
        let mut d = OffsetField::base_grid(5, 5);
        for (k, v) in d.d.data_mut().iter_mut().enumerate() {
            if k % 2 == 0 {
                *v += 0.5;
            }
        }
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        w[0] = 0.5;
        let spec = DeformDWSpec::new(Tensor::new([1, 1, 3, 3], w.clone()).unwrap(), None).unwrap();
        let out = deform_dwconv(&x, &d, &spec).unwrap();
        // Scalar oracle: the centre tap at (y+0.5, x) averages rows y and y+1.
        let f = |y: f32, xx: f32| -> f32 {
            let (y0, x0) = (y.floor() as i32, xx.floor() as i32);
            let (fy, fx) = (y - y0 as f32, xx - x0 as f32);
            let px = |yy: i32, xi: i32| if (0..5).contains(&yy) && (0..5).contains(&xi) { (xi + 10 * yy) as f32 } else { 0.0 };
            px(y0, x0) * (1.0 - fy) * (1.0 - fx) + px(y0, x0 + 1) * (1.0 - fy) * fx + px(y0 + 1, x0) * fy * (1.0 - fx) + px(y0 + 1, x0 + 1) * fy * fx
        };
        for y in 0..5 {
            for xx in 0..5 {
                let want = f(y as f32 + 0.5, xx as f32) + 0.5 * f(y as f32 - 0.5, xx as f32 - 1.0);
                assert!((out.at3(0, y, xx) - want).abs() < 1e-5, "{y},{xx}");
            }
        }
        assert!((out.at3(0, 2, 2) - (27.0 + 0.5 * 16.0)).abs() < 1e-5);
    }

    #[test]
    fn mismatched_offsets_are_shape_errors() {
        let x = Tensor::zeros([1, 4, 4]);
        let spec = DeformDWSpec::new(Tensor::zeros([1, 1, 3, 3]), None).unwrap();
        assert!(matches!(deform_dwconv(&x, &OffsetField::base_grid(4, 5), &spec), Err(Error::Shape(_))));
        assert!(DeformDWSpec::new(Tensor::zeros([1, 1, 2, 2]), None).is_err());
    }

    #[test]
    fn mac_split() {
        assert_eq!(deform_macs(64, 100), (57_600, 230_400));
    }
}

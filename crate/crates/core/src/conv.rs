//! Convolution, unfold, and the GEMM wrapper everything funnels through.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Raster order of the nine 3×3 taps as `(dy, dx)`.
pub const TAPS3: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// A 2-D convolution layer: hyper-parameters plus weights.
///
/// Weights are `out × (in/groups) × k × k`, bias (optional) is `out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub padding: usize,
    pub stride: usize,
    pub groups: usize,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        padding: usize,
        stride: usize,
        groups: usize,
        weight: Tensor,
        bias: Option<Tensor>,
    ) -> Result<Self> {
        let spec = Self { in_channels, out_channels, kernel_size, padding, stride, groups, weight, bias };
        spec.validate()?;
        Ok(spec)
    }

    /// Pointwise `in → out` convolution.
    pub fn pointwise(in_channels: usize, out_channels: usize, weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        Self::new(in_channels, out_channels, 1, 0, 1, 1, weight, bias)
    }

    /// 3×3 depthwise convolution with padding 1.
    pub fn depthwise3(channels: usize, weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        Self::new(channels, channels, 3, 1, 1, channels, weight, bias)
    }

    /// Same-size 3×3 dense convolution with padding 1.
    pub fn dense3(in_channels: usize, out_channels: usize, weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        Self::new(in_channels, out_channels, 3, 1, 1, 1, weight, bias)
    }

    pub fn validate(&self) -> Result<()> {
        let (cin, cout, k, g) = (self.in_channels, self.out_channels, self.kernel_size, self.groups);
        if cin == 0 || cout == 0 || k == 0 || g == 0 || self.stride == 0 {
            return Err(Error::shape("conv hyper-parameters must be positive"));
        }
        if cin % g != 0 || cout % g != 0 {
            return Err(Error::shape(format!("channels {cin}→{cout} not divisible by groups {g}")));
        }
        // Even kernels only appear as the un-padded stride-2 downsampler.
        if k % 2 == 0 && self.padding != 0 {
            return Err(Error::shape(format!("even kernel {k} with padding {}", self.padding)));
        }
        let want = [cout, cin / g, k, k];
        if self.weight.dims() != want {
            return Err(Error::shape(format!("conv weight dims {:?}, expected {want:?}", self.weight.dims())));
        }
        if let Some(b) = &self.bias {
            if b.dims() != [cout] {
                return Err(Error::shape(format!("conv bias dims {:?}, expected [{cout}]", b.dims())));
            }
        }
        Ok(())
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel_size == 1 && self.stride == 1 && self.padding == 0 && self.groups == 1
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (k, p, s) = (self.kernel_size, self.padding, self.stride);
        if h + 2 * p < k || w + 2 * p < k {
            return Err(Error::shape(format!("{h}×{w} input too small for k={k}, pad={p}")));
        }
        Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
    }

    /// Multiply-accumulates for one evaluation at `out_pixels` output positions.
    pub fn macs(&self, out_pixels: u64) -> u64 {
        out_pixels
            * self.out_channels as u64
            * (self.in_channels / self.groups) as u64
            * (self.kernel_size * self.kernel_size) as u64
    }

    pub fn bias_value(&self, co: usize) -> f32 {
        self.bias.as_ref().map_or(0.0, |b| b.data()[co])
    }
}

/// Multiply-accumulates of a convolution with the given shape parameters.
pub fn conv_macs(out_pixels: u64, in_channels: usize, out_channels: usize, kernel_size: usize, groups: usize) -> u64 {
    out_pixels * out_channels as u64 * (in_channels / groups) as u64 * (kernel_size * kernel_size) as u64
}

/// Row-major strided matrix view used by [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f32],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f32], cols: usize) -> Self {
        Self { data, row_stride: cols, col_stride: 1 }
    }

    /// View of the transpose of a row-major `rows × cols` matrix.
    pub fn transposed(data: &'a [f32], cols: usize) -> Self {
        Self { data, row_stride: 1, col_stride: cols }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
        }
    }
}

/// `c (m×n, row-major) = a (m×k) · b (k×n) + beta·c`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, beta: f32, c: &mut [f32]) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    assert!(k == 0 || a.max_index(m, k) < a.data.len());
    assert!(k == 0 || b.max_index(k, n) < b.data.len());
    // SAFETY: the asserts above keep every index the kernel touches inside
    // the three slices, and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Rows of the output handed to one rayon task in [`gemm_rows_parallel`].
const ROW_BLOCK: usize = 16;

/// [`gemm`] with `a` row-major, split into fixed row blocks across threads.
/// The split does not depend on the thread count, so results don't either.
pub(crate) fn gemm_rows_parallel(m: usize, k: usize, n: usize, a: &[f32], b: MatRef<'_>, beta: f32, c: &mut [f32]) {
    if m * n < 1 << 14 {
        gemm(m, k, n, MatRef::row_major(a, k), b, beta, c);
        return;
    }
    c[..m * n].par_chunks_mut(ROW_BLOCK * n).enumerate().for_each(|(i, c_blk)| {
        let rows = c_blk.len() / n;
        let a_blk = &a[i * ROW_BLOCK * k..(i * ROW_BLOCK + rows) * k];
        gemm(rows, k, n, MatRef::row_major(a_blk, k), b, beta, c_blk);
    });
}

fn bias_filled(spec: &ConvSpec, hw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; spec.out_channels * hw];
    if let Some(b) = &spec.bias {
        for (row, &bv) in out.chunks_mut(hw.max(1)).zip(b.data()) {
            row.fill(bv);
        }
    }
    out
}

/// Zero-padded cross-correlation of a `C_in×H×W` tensor.
pub fn conv2d(x: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if c != spec.in_channels {
        return Err(Error::shape(format!("conv expects {} input channels, got {c}", spec.in_channels)));
    }
    let (ho, wo) = spec.output_hw(h, w)?;
    if spec.is_pointwise() {
        return Ok(pointwise(x, spec, h, w));
    }
    if spec.is_depthwise() {
        return Ok(depthwise(x, spec, h, w, ho, wo));
    }
    Ok(grouped_im2col(x, spec, h, w, ho, wo))
}

fn pointwise(x: &Tensor, spec: &ConvSpec, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let mut out = bias_filled(spec, hw);
    gemm_rows_parallel(
        spec.out_channels,
        spec.in_channels,
        hw,
        spec.weight.data(),
        MatRef::row_major(x.data(), hw),
        1.0,
        &mut out,
    );
    Tensor::new([spec.out_channels, h, w], out).expect("pointwise output dims")
}

fn depthwise(x: &Tensor, spec: &ConvSpec, h: usize, w: usize, ho: usize, wo: usize) -> Tensor {
    let k = spec.kernel_size;
    let (pad, stride) = (spec.padding as isize, spec.stride);
    let mut out = vec![0.0f32; spec.out_channels * ho * wo];
    out.par_chunks_mut(ho * wo).enumerate().for_each(|(ch, o)| {
        let src = x.plane(ch);
        let wt = &spec.weight.data()[ch * k * k..(ch + 1) * k * k];
        let b = spec.bias_value(ch);
        for oy in 0..ho {
            let orow = &mut o[oy * wo..(oy + 1) * wo];
            orow.fill(b);
            for ky in 0..k {
                let iy = (oy * stride) as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let row = &src[iy as usize * w..(iy as usize + 1) * w];
                for kx in 0..k {
                    let wv = wt[ky * k + kx];
                    let shift = kx as isize - pad;
                    if stride == 1 {
                        // Output columns whose input column stays inside the row.
                        let lo = (-shift).clamp(0, wo as isize) as usize;
                        let hi = (w as isize - shift).clamp(lo as isize, wo as isize) as usize;
                        if hi == lo {
                            continue;
                        }
                        let src_row = &row[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                        for (a, &v) in orow[lo..hi].iter_mut().zip(src_row) {
                            *a += wv * v;
                        }
                    } else {
                        for (ox, a) in orow.iter_mut().enumerate() {
                            let ix = (ox * stride) as isize + shift;
                            if ix >= 0 && ix < w as isize {
                                *a += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new([spec.out_channels, ho, wo], out).expect("depthwise output dims")
}

fn grouped_im2col(x: &Tensor, spec: &ConvSpec, h: usize, w: usize, ho: usize, wo: usize) -> Tensor {
    let k = spec.kernel_size;
    let g = spec.groups;
    let cin_g = spec.in_channels / g;
    let cout_g = spec.out_channels / g;
    let rows = cin_g * k * k;
    let cols = ho * wo;
    let mut out = bias_filled(spec, cols);
    let mut col = vec![0.0f32; rows * cols];
    for gi in 0..g {
        col.fill(0.0);
        for ci in 0..cin_g {
            let src = x.plane(gi * cin_g + ci);
            for ky in 0..k {
                for kx in 0..k {
                    let r = (ci * k + ky) * k + kx;
                    let dst = &mut col[r * cols..(r + 1) * cols];
                    for oy in 0..ho {
                        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * wo + ox] = src[iy as usize * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        let wt = &spec.weight.data()[gi * cout_g * rows..(gi + 1) * cout_g * rows];
        let o = &mut out[gi * cout_g * cols..(gi + 1) * cout_g * cols];
        gemm_rows_parallel(cout_g, rows, cols, wt, MatRef::row_major(&col, cols), 1.0, o);
    }
    Tensor::new([spec.out_channels, ho, wo], out).expect("conv output dims")
}

/// 3×3 unfold: channel `c·9 + j` holds `x[c]` shifted by tap `j` of
/// [`TAPS3`], zero outside the image.
pub fn unfold3(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let mut out = vec![0.0f32; 9 * c * h * w];
    out.par_chunks_mut(9 * h * w).enumerate().for_each(|(ch, blk)| {
        let src = x.plane(ch);
        for (j, &(dy, dx)) in TAPS3.iter().enumerate() {
            let dst = &mut blk[j * h * w..(j + 1) * h * w];
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for xx in 0..w {
                    let sx = xx as isize + dx;
                    if sx >= 0 && sx < w as isize {
                        dst[y * w + xx] = src[sy as usize * w + sx as usize];
                    }
                }
            }
        }
    });
    Tensor::new([9 * c, h, w], out)
}

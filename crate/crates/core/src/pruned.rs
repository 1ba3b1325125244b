//! Mask-aware convolution: the dense masked form used for training-style
//! evaluation, and the pixel-pruned gather → 1×1 GEMM → scatter form used
//! at inference.
//!
//! A 3×3 layer is rewritten as a 1×1 layer over unfolded features
//! ([`reparameterize`]), so it can run on a compact `Q × (9·C_in/g)` buffer
//! holding only the selected pixels. When a 1×1 layer feeds a 3×3 one, the
//! 1×1 also has to run on the 3×3 neighbourhood (the halo) of the selected
//! pixels; that extra work is booked as [`EntryKind::Overhead`] so the
//! pruned entries keep the exact `Q/(H·W)` fraction.
//!
//! [`EntryKind::Overhead`]: crate::ledger::EntryKind::Overhead

use crate::conv::{conv2d, gemm, ConvSpec, MatRef, TAPS3};
use crate::error::{Error, Result};
use crate::ledger::FlopLedger;
use crate::mask::BlurMask;
use crate::ops::channel_repeat;
use crate::tensor::Tensor;

/// Pixels gathered per GEMM call.
const CHUNK: usize = 1024;

/// A 3×3 convolution with its weights laid out for a 1×1 conv over
/// [`unfold3`](crate::conv::unfold3) features.
#[derive(Debug, Clone, PartialEq)]
pub struct ReparamConv {
    pub original: ConvSpec,
    /// `out × ((in/groups)·9) × 1 × 1`; column `c·9 + j` is tap `j` of input
    /// channel `c` within the group.
    pub reshaped: Tensor,
}

pub fn reparameterize(spec: &ConvSpec) -> Result<ReparamConv> {
    if spec.kernel_size != 3 || spec.stride != 1 || spec.padding != 1 {
        return Err(Error::arg(format!(
            "reparameterization needs a 3×3 stride-1 pad-1 conv, got k={} s={} p={}",
            spec.kernel_size, spec.stride, spec.padding
        )));
    }
    // Row-major `out×cin×3×3` already lists each channel's taps in raster
    // order, so the reshape keeps the buffer as is.
    let cols = spec.in_channels / spec.groups * 9;
    let reshaped = spec.weight.clone().reshape([spec.out_channels, cols, 1, 1])?;
    Ok(ReparamConv { original: spec.clone(), reshaped })
}

impl ReparamConv {
    /// Input width of one group's unfolded row, `(in/groups)·9`.
    pub fn cols(&self) -> usize {
        self.reshaped.dims()[1]
    }

    /// Apply to `q` pixel-major rows of unfolded features (`q × 9·C_in`),
    /// writing `q × C_out` into `out`.
    pub fn apply_rows(&self, rows: &[f32], q: usize, out: &mut [f32]) {
        let spec = &self.original;
        let (cin9, cout, g) = (spec.in_channels * 9, spec.out_channels, spec.groups);
        let cols = self.cols();
        let cout_g = cout / g;
        let w = self.reshaped.data();
        for r in 0..q {
            for co in 0..cout {
                out[r * cout + co] = spec.bias_value(co);
            }
        }
        if g == 1 {
            gemm(q, cols, cout, MatRef::row_major(rows, cin9), MatRef::transposed(w, cols), 1.0, out);
            return;
        }
        if spec.is_depthwise() {
            for r in 0..q {
                let row = &rows[r * cin9..(r + 1) * cin9];
                for c in 0..cout {
                    let mut acc = out[r * cout + c];
                    for j in 0..9 {
                        acc += w[c * 9 + j] * row[c * 9 + j];
                    }
                    out[r * cout + c] = acc;
                }
            }
            return;
        }
        let mut tmp = vec![0.0f32; q * cout_g];
        for gi in 0..g {
            for r in 0..q {
                tmp[r * cout_g..(r + 1) * cout_g].copy_from_slice(&out[r * cout + gi * cout_g..r * cout + (gi + 1) * cout_g]);
            }
            let a = MatRef { data: &rows[gi * cols..], row_stride: cin9, col_stride: 1 };
            let b = MatRef::transposed(&w[gi * cout_g * cols..(gi + 1) * cout_g * cols], cols);
            gemm(q, cols, cout_g, a, b, 1.0, &mut tmp);
            for r in 0..q {
                out[r * cout + gi * cout_g..r * cout + (gi + 1) * cout_g].copy_from_slice(&tmp[r * cout_g..(r + 1) * cout_g]);
            }
        }
    }

    /// Apply as a 1×1 conv over a full `9·C_in × H × W` unfolded tensor.
    pub fn apply_unfolded(&self, unfolded: &Tensor) -> Result<Tensor> {
        let (c9, h, w) = unfolded.chw()?;
        if c9 != 9 * self.original.in_channels {
            return Err(Error::shape(format!("unfolded input has {c9} channels, expected {}", 9 * self.original.in_channels)));
        }
        let hw = h * w;
        let rows = transpose(unfolded.data(), c9, hw);
        let cout = self.original.out_channels;
        let mut out = vec![0.0f32; hw * cout];
        self.apply_rows(&rows, hw, &mut out);
        Tensor::new([cout, h, w], transpose(&out, hw, cout))
    }
}

fn transpose(src: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Flat positions of the selected pixels, in raster order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelGather {
    pub indices: Vec<usize>,
    pub source_dims: (usize, usize),
}

impl PixelGather {
    pub fn from_hard(mask: &Tensor) -> Result<Self> {
        let (h, w) = mask.hw()?;
        let mut indices = Vec::new();
        for (i, &v) in mask.data().iter().enumerate() {
            if v == 1.0 {
                indices.push(i);
            } else if v != 0.0 {
                return Err(Error::Contract(format!("pruned evaluation needs a binary mask, found {v}")));
            }
        }
        Ok(Self { indices, source_dims: (h, w) })
    }

    pub fn from_mask(mask: &BlurMask) -> Result<Self> {
        Self::from_hard(&mask.hard)
    }

    pub fn q(&self) -> usize {
        self.indices.len()
    }

    fn from_flags(flags: &[bool], source_dims: (usize, usize)) -> Self {
        Self { indices: flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect(), source_dims }
    }

    /// Pixels within one 3×3 step of a selected pixel.
    pub fn dilate3(&self) -> Self {
        let (h, w) = self.source_dims;
        let mut flags = vec![false; h * w];
        for &i in &self.indices {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for &(dy, dx) in &TAPS3 {
                let (ny, nx) = (y + dy, x + dx);
                if ny >= 0 && ny < h as isize && nx >= 0 && nx < w as isize {
                    flags[ny as usize * w + nx as usize] = true;
                }
            }
        }
        Self::from_flags(&flags, self.source_dims)
    }

    /// Neighbour index of selected pixel `i` at tap `j`, `None` outside the image.
    fn neighbour(&self, i: usize, j: usize) -> Option<usize> {
        let (h, w) = self.source_dims;
        let (dy, dx) = TAPS3[j];
        let (y, x) = ((i / w) as isize + dy, (i % w) as isize + dx);
        (y >= 0 && y < h as isize && x >= 0 && x < w as isize).then(|| y as usize * w + x as usize)
    }

    /// `q×9` neighbour indices, [`OUTSIDE`] past the border.
    fn neighbour_table(&self) -> Vec<u32> {
        let mut t = Vec::with_capacity(self.q() * 9);
        for &i in &self.indices {
            t.extend((0..9).map(|j| self.neighbour(i, j).map_or(OUTSIDE, |n| n as u32)));
        }
        t
    }
}

const OUTSIDE: u32 = u32::MAX;

/// A short stack of same-resolution convolutions (1×1 or 3×3 pad 1) whose
/// output replaces the channel-repeated input on masked pixels only:
/// `out = Conv(x)⊙m + Rep(x)⊙(1−m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskAwareConv {
    layers: Vec<(String, ConvSpec)>,
}

fn is_supported(spec: &ConvSpec) -> bool {
    (spec.kernel_size == 1 && spec.padding == 0 || spec.kernel_size == 3 && spec.padding == 1) && spec.stride == 1
}

impl MaskAwareConv {
    pub fn new(layers: Vec<(String, ConvSpec)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("mask-aware conv needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].1.out_channels != pair[1].1.in_channels {
                return Err(Error::shape(format!("{} → {} channel mismatch", pair[0].0, pair[1].0)));
            }
        }
        if let Some((name, _)) = layers.iter().find(|(_, s)| !is_supported(s)) {
            return Err(Error::shape(format!("{name}: only 1×1 and padded 3×3 stride-1 convs can be pruned")));
        }
        let me = Self { layers };
        if me.out_channels() % me.in_channels() != 0 {
            return Err(Error::shape("output channels must be a multiple of input channels"));
        }
        Ok(me)
    }

    pub fn layers(&self) -> &[(String, ConvSpec)] {
        &self.layers
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].1.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().expect("non-empty").1.out_channels
    }

    fn rep_factor(&self) -> usize {
        self.out_channels() / self.in_channels()
    }

    /// Plain evaluation of the stack at every pixel.
    pub fn dense(&self, x: &Tensor, ledger: &mut FlopLedger, label: &str) -> Result<Tensor> {
        let (_, h, w) = x.chw()?;
        let mut cur = x.clone();
        for (name, spec) in &self.layers {
            cur = conv2d(&cur, spec)?;
            ledger.dense(format!("{label}.{name}"), spec.macs((h * w) as u64));
        }
        Ok(cur)
    }

    /// Dense evaluation blended with the channel repetition by a (possibly
    /// soft) `H×W` mask.
    pub fn masked(&self, x: &Tensor, mask: &Tensor, ledger: &mut FlopLedger, label: &str) -> Result<Tensor> {
        let (_, h, w) = x.chw()?;
        if mask.hw()? != (h, w) {
            return Err(Error::shape(format!("mask {:?} for {h}×{w} features", mask.dims())));
        }
        let conv = self.dense(x, ledger, label)?;
        let rep = channel_repeat(x, self.rep_factor())?;
        let m = mask.data();
        let hw = h * w;
        let mut out = conv.into_data();
        for (i, v) in out.iter_mut().enumerate() {
            let mi = m[i % hw];
            *v = *v * mi + rep.data()[i] * (1.0 - mi);
        }
        Tensor::new([self.out_channels(), h, w], out)
    }

    fn kernels(&self) -> Vec<usize> {
        self.layers.iter().map(|(_, s)| s.kernel_size).collect()
    }

    /// Layer names with their per-pixel MACs.
    pub fn layer_costs(&self) -> Vec<(String, u64)> {
        self.layers.iter().map(|(n, s)| (n.clone(), s.macs(1))).collect()
    }

    /// Support size of every layer for the selected pixels of `mask`.
    pub fn support_sizes(&self, mask: &Tensor) -> Result<Vec<u64>> {
        support_sizes(&self.kernels(), mask)
    }

    /// Gather → reparameterized 1×1 → scatter evaluation at the selected
    /// pixels; every other pixel keeps the channel repetition.
    pub fn pruned(&self, x: &Tensor, mask: &Tensor, ledger: &mut FlopLedger, label: &str) -> Result<Tensor> {
        let (c, h, w) = x.chw()?;
        if mask.hw()? != (h, w) {
            return Err(Error::shape(format!("mask {:?} for {h}×{w} features", mask.dims())));
        }
        if c != self.in_channels() {
            return Err(Error::shape(format!("mask-aware conv expects {} channels, got {c}", self.in_channels())));
        }
        let gather = PixelGather::from_hard(mask)?;
        let supports = supports(&self.kernels(), &gather);
        let sizes: Vec<u64> = supports.iter().map(|s| s.q() as u64).collect();
        record_pruned(ledger, label, &self.layer_costs(), gather.q() as u64, (h * w) as u64, &sizes);

        let mut out = channel_repeat(x, self.rep_factor())?;
        if gather.q() == 0 {
            return Ok(out);
        }
        let mut cur: Option<Tensor> = None;
        let last = self.layers.len() - 1;
        for (li, ((_, spec), support)) in self.layers.iter().zip(&supports).enumerate() {
            let src = cur.as_ref().unwrap_or(x);
            let mut dst = if li == last { None } else { Some(Tensor::zeros([spec.out_channels, h, w])) };
            let target = dst.as_mut().unwrap_or(&mut out);
            if spec.kernel_size == 1 {
                pointwise_at(src, spec, support, target);
            } else {
                reparam_at(src, &reparameterize(spec)?, support, target);
            }
            if dst.is_some() {
                cur = dst;
            }
        }
        Ok(out)
    }
}

fn scatter_rows(rows: &[f32], idx: &[usize], cout: usize, dst: &mut Tensor) {
    let hw = dst.dims()[1] * dst.dims()[2];
    let d = dst.data_mut();
    for co in 0..cout {
        let plane = &mut d[co * hw..(co + 1) * hw];
        for (r, &i) in idx.iter().enumerate() {
            plane[i] = rows[r * cout + co];
        }
    }
}

fn pointwise_at(src: &Tensor, spec: &ConvSpec, support: &PixelGather, dst: &mut Tensor) {
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let hw = src.dims()[1] * src.dims()[2];
    let mut rows = vec![0.0f32; CHUNK * cin];
    let mut res = vec![0.0f32; CHUNK * cout];
    for idx in support.indices.chunks(CHUNK) {
        let q = idx.len();
        for ci in 0..cin {
            let plane = &src.data()[ci * hw..(ci + 1) * hw];
            for (r, &i) in idx.iter().enumerate() {
                rows[r * cin + ci] = plane[i];
            }
        }
        for r in 0..q {
            for co in 0..cout {
                res[r * cout + co] = spec.bias_value(co);
            }
        }
        gemm(q, cin, cout, MatRef::row_major(&rows, cin), MatRef::transposed(spec.weight.data(), cin), 1.0, &mut res);
        scatter_rows(&res, idx, cout, dst);
    }
}

fn reparam_at(src: &Tensor, rep: &ReparamConv, support: &PixelGather, dst: &mut Tensor) {
    let spec = &rep.original;
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let hw = src.dims()[1] * src.dims()[2];
    if spec.is_depthwise() {
        // Block-diagonal product: each channel's 9-wide unfolded slice meets
        // its own 9 reshaped weights, read straight from the source plane.
        let w = rep.reshaped.data();
        let table = support.neighbour_table();
        for c in 0..cout {
            let plane = &src.data()[c * hw..(c + 1) * hw];
            let wc = &w[c * 9..(c + 1) * 9];
            let b = spec.bias_value(c);
            let out = &mut dst.data_mut()[c * hw..(c + 1) * hw];
            for (&i, nb) in support.indices.iter().zip(table.chunks_exact(9)) {
                let mut acc = b;
                for (&wj, &n) in wc.iter().zip(nb) {
                    if n != OUTSIDE {
                        acc += wj * plane[n as usize];
                    }
                }
                out[i] = acc;
            }
        }
        return;
    }
    let cin9 = cin * 9;
    let mut rows = vec![0.0f32; CHUNK * cin9];
    let mut res = vec![0.0f32; CHUNK * cout];
    let table = support.neighbour_table();
    for (idx, tb) in support.indices.chunks(CHUNK).zip(table.chunks(CHUNK * 9)) {
        let q = idx.len();
        rows[..q * cin9].fill(0.0);
        for ci in 0..cin {
            let plane = &src.data()[ci * hw..(ci + 1) * hw];
            for (r, nb) in tb.chunks_exact(9).enumerate() {
                for (j, &n) in nb.iter().enumerate() {
                    if n != OUTSIDE {
                        rows[r * cin9 + ci * 9 + j] = plane[n as usize];
                    }
                }
            }
        }
        rep.apply_rows(&rows[..q * cin9], q, &mut res[..q * cout]);
        scatter_rows(&res, idx, cout, dst);
    }
}

/// MAC entries for a pruned evaluation of a stack with `q` selected pixels
/// out of `hw`. Work on a layer's support beyond the `q` pixels is booked
/// as a separate `.halo` overhead entry.
pub fn record_pruned(ledger: &mut FlopLedger, label: &str, layers: &[(String, u64)], q: u64, hw: u64, support_sizes: &[u64]) {
    for ((name, per_pixel), &s) in layers.iter().zip(support_sizes) {
        ledger.pruned(format!("{label}.{name}"), *per_pixel, q, hw);
        if s > q {
            ledger.overhead(format!("{label}.{name}.halo"), per_pixel * (s - q));
        }
    }
}

/// Pixels each layer of a stack with the given kernel sizes must be
/// evaluated at so the last layer is exact on `gather`: a 3×3 layer widens
/// its input's support by one pixel.
fn supports(kernels: &[usize], gather: &PixelGather) -> Vec<PixelGather> {
    let mut out = vec![gather.clone()];
    for &k in kernels.iter().skip(1).rev() {
        let next = out.last().expect("non-empty");
        let s = if k == 3 { next.dilate3() } else { next.clone() };
        out.push(s);
    }
    out.reverse();
    out
}

/// Support size of every layer of a stack with the given kernel sizes.
pub fn support_sizes(kernels: &[usize], mask: &Tensor) -> Result<Vec<u64>> {
    let g = PixelGather::from_hard(mask)?;
    Ok(supports(kernels, &g).iter().map(|s| s.q() as u64).collect())
}

/// `Conv(f1)⊙m + Rep(f1)⊙(1−m)` evaluated densely.
pub fn masked_dense_forward(f1: &Tensor, conv: &MaskAwareConv, mask: &BlurMask, ledger: &mut FlopLedger, label: &str) -> Result<Tensor> {
    conv.masked(f1, &mask.hard, ledger, label)
}

/// Pixel-pruned evaluation; matches [`masked_dense_forward`] on a hard mask.
pub fn pruned_forward(f1: &Tensor, conv: &MaskAwareConv, mask: &BlurMask, ledger: &mut FlopLedger, label: &str) -> Result<Tensor> {
    conv.pruned(f1, &mask.hard, ledger, label)
}

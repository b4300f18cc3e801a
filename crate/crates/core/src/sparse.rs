//! Dense and hash-table activations, dense/submanifold-sparse convolution
//! with reverse-mode gradients, nearest-neighbor upsampling, skip gather
//! and pointwise ops.
//!
//! Sites are keyed by (y, x) in an ordered map so every floating point
//! reduction runs in the same order on every run.

use std::collections::{BTreeMap, BTreeSet};

use num_traits::{Float, FromPrimitive};

use crate::error::{QgnError, Result};

/// Scalar used by the numeric core. f32 for training, f64 for oracles.
pub trait Scalar:
    Float + FromPrimitive + std::fmt::Debug + std::iter::Sum + Default + 'static
{
}
impl Scalar for f32 {}
impl Scalar for f64 {}

pub type Site = (u32, u32); // (y, x)

/// Dense H x W x C tensor, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor<T> {
    pub height: u32,
    pub width: u32,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> DenseTensor<T> {
    pub fn zeros(height: u32, width: u32, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![T::zero(); (height as usize) * (width as usize) * channels],
        }
    }

    #[inline]
    pub fn at(&self, y: u32, x: u32) -> &[T] {
        let i = ((y as usize) * (self.width as usize) + x as usize) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn at_mut(&mut self, y: u32, x: u32) -> &mut [T] {
        let i = ((y as usize) * (self.width as usize) + x as usize) * self.channels;
        &mut self.data[i..i + self.channels]
    }
}

/// Hash-table activation at one quadtree level: active sites map to
/// channel vectors. Any subset of the grid may be active.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseActivation<T> {
    pub level: u8,
    pub width: u32,
    pub height: u32,
    pub channels: usize,
    pub sites: BTreeMap<Site, Vec<T>>,
}

impl<T: Scalar> SparseActivation<T> {
    pub fn empty(level: u8, width: u32, height: u32, channels: usize) -> Self {
        Self { level, width, height, channels, sites: BTreeMap::new() }
    }

    pub fn insert(&mut self, x: u32, y: u32, v: Vec<T>) {
        debug_assert!(x < self.width && y < self.height);
        debug_assert_eq!(v.len(), self.channels);
        self.sites.insert((y, x), v);
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn site_set(&self) -> BTreeSet<Site> {
        self.sites.keys().copied().collect()
    }

    /// Dense grid holding the sparse values, zero elsewhere.
    pub fn to_dense(&self) -> DenseTensor<T> {
        let mut d = DenseTensor::zeros(self.height, self.width, self.channels);
        for (&(y, x), v) in &self.sites {
            d.at_mut(y, x).copy_from_slice(v);
        }
        d
    }

    /// Sparse view of a dense tensor restricted to `sites`.
    pub fn from_dense(dense: &DenseTensor<T>, level: u8, sites: &BTreeSet<Site>) -> Self {
        let mut out = Self::empty(level, dense.width, dense.height, dense.channels);
        for &(y, x) in sites {
            out.sites.insert((y, x), dense.at(y, x).to_vec());
        }
        out
    }

    /// All grid positions active.
    pub fn full_sites(width: u32, height: u32) -> BTreeSet<Site> {
        let mut s = BTreeSet::new();
        for y in 0..height {
            for x in 0..width {
                s.insert((y, x));
            }
        }
        s
    }
}

/// Convolution kernel and bias with gradient buffers.
/// Weight layout: [c_out][ky][kx][c_in], contiguous over c_in.
#[derive(Debug, Clone)]
pub struct ConvParams<T> {
    pub c_out: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub w: Vec<T>,
    pub b: Vec<T>,
    pub gw: Vec<T>,
    pub gb: Vec<T>,
    /// momentum buffers, allocated on first use
    pub vw: Vec<T>,
    pub vb: Vec<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn zeros(c_out: usize, c_in: usize, kh: usize, kw: usize) -> Self {
        Self {
            c_out,
            c_in,
            kh,
            kw,
            w: vec![T::zero(); c_out * c_in * kh * kw],
            b: vec![T::zero(); c_out],
            gw: vec![T::zero(); c_out * c_in * kh * kw],
            gb: vec![T::zero(); c_out],
            vw: Vec::new(),
            vb: Vec::new(),
        }
    }

    /// Identity 1x1 kernel (requires c_out == c_in).
    pub fn identity(c: usize) -> Self {
        let mut p = Self::zeros(c, c, 1, 1);
        for i in 0..c {
            p.w[i * c + i] = T::one();
        }
        p
    }

    #[inline]
    fn w_tap(&self, co: usize, ky: usize, kx: usize) -> &[T] {
        let i = ((co * self.kh + ky) * self.kw + kx) * self.c_in;
        &self.w[i..i + self.c_in]
    }

    #[inline]
    fn gw_tap_mut(&mut self, co: usize, ky: usize, kx: usize) -> &mut [T] {
        let i = ((co * self.kh + ky) * self.kw + kx) * self.c_in;
        &mut self.gw[i..i + self.c_in]
    }

    pub fn zero_grads(&mut self) {
        self.gw.iter_mut().for_each(|g| *g = T::zero());
        self.gb.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

fn check_channels<T>(p: &ConvParams<T>, input_channels: usize) -> Result<()> {
    if p.c_in != input_channels {
        return Err(QgnError::Shape(format!(
            "conv expects {} input channels, got {}",
            p.c_in, input_channels
        )));
    }
    if p.kh % 2 == 0 || p.kw % 2 == 0 {
        return Err(QgnError::Shape("kernel must be odd-sized".into()));
    }
    Ok(())
}

/// Submanifold sparse convolution: output sites equal input sites; each
/// output sums kernel taps over *active* neighbors only, plus bias.
pub fn sparse_conv_fwd<T: Scalar>(
    input: &SparseActivation<T>,
    p: &ConvParams<T>,
) -> Result<SparseActivation<T>> {
    sparse_conv_fwd_counted(input, p, &mut 0)
}

/// Same as [`sparse_conv_fwd`] but counts multiply-adds into `madds`
/// (one unit per active kernel tap, times c_in * c_out).
pub fn sparse_conv_fwd_counted<T: Scalar>(
    input: &SparseActivation<T>,
    p: &ConvParams<T>,
    madds: &mut u64,
) -> Result<SparseActivation<T>> {
    check_channels(p, input.channels)?;
    let (oy, ox) = ((p.kh / 2) as i64, (p.kw / 2) as i64);
    let mut out = SparseActivation::empty(input.level, input.width, input.height, p.c_out);
    // Index grid for O(1) neighbor lookup instead of a map probe per tap.
    let gw_ = input.width as usize;
    let entries: Vec<(Site, &Vec<T>)> = input.sites.iter().map(|(k, v)| (*k, v)).collect();
    let mut grid = vec![usize::MAX; gw_ * input.height as usize];
    for (i, &((y, x), _)) in entries.iter().enumerate() {
        grid[y as usize * gw_ + x as usize] = i;
    }
    for &((y, x), _) in &entries {
        let mut acc = p.b.clone();
        for ky in 0..p.kh {
            for kx in 0..p.kw {
                let sy = y as i64 + ky as i64 - oy;
                let sx = x as i64 + kx as i64 - ox;
                if sy < 0 || sx < 0 || sy >= input.height as i64 || sx >= input.width as i64 {
                    continue;
                }
                let idx = grid[sy as usize * gw_ + sx as usize];
                if idx == usize::MAX {
                    continue;
                }
                let src = entries[idx].1;
                *madds += (p.c_in * p.c_out) as u64;
                for (co, a) in acc.iter_mut().enumerate() {
                    let w = p.w_tap(co, ky, kx);
                    let mut s = T::zero();
                    for ci in 0..p.c_in {
                        s = s + w[ci] * src[ci];
                    }
                    *a = *a + s;
                }
            }
        }
        out.sites.insert((y, x), acc);
    }
    Ok(out)
}

/// Reverse-mode of [`sparse_conv_fwd`]: accumulates kernel/bias grads in
/// `p` and returns the gradient w.r.t. the input (same sites as input).
pub fn sparse_conv_bwd<T: Scalar>(
    input: &SparseActivation<T>,
    p: &mut ConvParams<T>,
    upstream: &SparseActivation<T>,
) -> Result<SparseActivation<T>> {
    check_channels(p, input.channels)?;
    if upstream.channels != p.c_out || upstream.site_set() != input.site_set() {
        return Err(QgnError::Shape(
            "upstream sites/channels do not match forward output".into(),
        ));
    }
    let (oy, ox) = ((p.kh / 2) as i64, (p.kw / 2) as i64);
    let gw_ = input.width as usize;
    let entries: Vec<(Site, &Vec<T>)> = input.sites.iter().map(|(k, v)| (*k, v)).collect();
    let mut grid = vec![usize::MAX; gw_ * input.height as usize];
    for (i, &((y, x), _)) in entries.iter().enumerate() {
        grid[y as usize * gw_ + x as usize] = i;
    }
    let mut grads: Vec<Vec<T>> = vec![vec![T::zero(); p.c_in]; entries.len()];
    for (&(y, x), g) in &upstream.sites {
        for (co, &gc) in g.iter().enumerate() {
            p.gb[co] = p.gb[co] + gc;
        }
        for ky in 0..p.kh {
            for kx in 0..p.kw {
                let sy = y as i64 + ky as i64 - oy;
                let sx = x as i64 + kx as i64 - ox;
                if sy < 0 || sx < 0 || sy >= input.height as i64 || sx >= input.width as i64 {
                    continue;
                }
                let idx = grid[sy as usize * gw_ + sx as usize];
                if idx == usize::MAX {
                    continue;
                }
                let src = entries[idx].1;
                let c_in = p.c_in;
                for (co, &gc) in g.iter().enumerate() {
                    let gw = p.gw_tap_mut(co, ky, kx);
                    for ci in 0..c_in {
                        gw[ci] = gw[ci] + gc * src[ci];
                    }
                }
                let ig = &mut grads[idx];
                for (co, &gc) in g.iter().enumerate() {
                    let w = p.w_tap(co, ky, kx);
                    for ci in 0..p.c_in {
                        ig[ci] = ig[ci] + gc * w[ci];
                    }
                }
            }
        }
    }
    let mut input_grad = SparseActivation::empty(input.level, input.width, input.height, p.c_in);
    for (&(key, _), g) in entries.iter().zip(grads) {
        input_grad.sites.insert(key, g);
    }
    Ok(input_grad)
}

/// Zero-padded dense cross-correlation, stride 1 or 2. Stride 1 keeps
/// spatial dims, stride 2 halves them (ceil).
pub fn dense_conv_fwd<T: Scalar>(
    input: &DenseTensor<T>,
    p: &ConvParams<T>,
    stride: u32,
) -> Result<DenseTensor<T>> {
    dense_conv_fwd_counted(input, p, stride, &mut 0)
}

pub fn dense_conv_fwd_counted<T: Scalar>(
    input: &DenseTensor<T>,
    p: &ConvParams<T>,
    stride: u32,
    madds: &mut u64,
) -> Result<DenseTensor<T>> {
    check_channels(p, input.channels)?;
    if stride != 1 && stride != 2 {
        return Err(QgnError::Shape(format!("unsupported stride {stride}")));
    }
    let (oh, ow) = (input.height.div_ceil(stride), input.width.div_ceil(stride));
    let (oy, ox) = ((p.kh / 2) as i64, (p.kw / 2) as i64);
    let mut out = DenseTensor::zeros(oh, ow, p.c_out);
    for y in 0..oh {
        for x in 0..ow {
            let dst = out.at_mut(y, x);
            dst.copy_from_slice(&p.b);
            for ky in 0..p.kh {
                for kx in 0..p.kw {
                    let sy = (y * stride) as i64 + ky as i64 - oy;
                    let sx = (x * stride) as i64 + kx as i64 - ox;
                    if sy < 0 || sx < 0 || sy >= input.height as i64 || sx >= input.width as i64 {
                        continue;
                    }
                    let src = input.at(sy as u32, sx as u32);
                    *madds += (p.c_in * p.c_out) as u64;
                    for (co, d) in dst.iter_mut().enumerate() {
                        let w = p.w_tap(co, ky, kx);
                        let mut s = T::zero();
                        for ci in 0..p.c_in {
                            s = s + w[ci] * src[ci];
                        }
                        *d = *d + s;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Reverse-mode of [`dense_conv_fwd`].
pub fn dense_conv_bwd<T: Scalar>(
    input: &DenseTensor<T>,
    p: &mut ConvParams<T>,
    upstream: &DenseTensor<T>,
    stride: u32,
) -> Result<DenseTensor<T>> {
    check_channels(p, input.channels)?;
    let (oh, ow) = (input.height.div_ceil(stride), input.width.div_ceil(stride));
    if upstream.height != oh || upstream.width != ow || upstream.channels != p.c_out {
        return Err(QgnError::Shape("upstream shape does not match conv output".into()));
    }
    let (oy, ox) = ((p.kh / 2) as i64, (p.kw / 2) as i64);
    let mut input_grad = DenseTensor::zeros(input.height, input.width, input.channels);
    for y in 0..oh {
        for x in 0..ow {
            let g = upstream.at(y, x);
            for (co, &gc) in g.iter().enumerate() {
                p.gb[co] = p.gb[co] + gc;
            }
            for ky in 0..p.kh {
                for kx in 0..p.kw {
                    let sy = (y * stride) as i64 + ky as i64 - oy;
                    let sx = (x * stride) as i64 + kx as i64 - ox;
                    if sy < 0 || sx < 0 || sy >= input.height as i64 || sx >= input.width as i64 {
                        continue;
                    }
                    let src = input.at(sy as u32, sx as u32);
                    let c_in = p.c_in;
                    for (co, &gc) in g.iter().enumerate() {
                        let gw = p.gw_tap_mut(co, ky, kx);
                        for ci in 0..c_in {
                            gw[ci] = gw[ci] + gc * src[ci];
                        }
                    }
                    let ig = input_grad.at_mut(sy as u32, sx as u32);
                    for (co, &gc) in g.iter().enumerate() {
                        let w = p.w_tap(co, ky, kx);
                        for ci in 0..p.c_in {
                            ig[ci] = ig[ci] + gc * w[ci];
                        }
                    }
                }
            }
        }
    }
    Ok(input_grad)
}

/// Each site (x, y, v) spawns four children (2x, 2y), (2x+1, 2y),
/// (2x, 2y+1), (2x+1, 2y+1) with copied vectors, one level finer.
pub fn upsample2x<T: Scalar>(input: &SparseActivation<T>) -> SparseActivation<T> {
    let parents = input.site_set();
    upsample2x_restricted(input, &parents)
}

/// Upsample only the selected parent sites; the rest stay inactive.
pub fn upsample2x_restricted<T: Scalar>(
    input: &SparseActivation<T>,
    parents: &BTreeSet<Site>,
) -> SparseActivation<T> {
    let level = input.level.saturating_sub(1);
    let mut out =
        SparseActivation::empty(level, input.width * 2, input.height * 2, input.channels);
    for &(y, x) in parents {
        let v = &input.sites[&(y, x)];
        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            out.sites.insert((2 * y + dy, 2 * x + dx), v.clone());
        }
    }
    out
}

/// Adjoint of the copy: each parent gradient is the sum of its four
/// children's gradients (missing children contribute zero).
pub fn upsample2x_bwd<T: Scalar>(
    upstream: &SparseActivation<T>,
    parents: &BTreeSet<Site>,
    parent_dims: (u32, u32),
    parent_level: u8,
) -> SparseActivation<T> {
    let mut out =
        SparseActivation::empty(parent_level, parent_dims.1, parent_dims.0, upstream.channels);
    for &(y, x) in parents {
        let mut acc = vec![T::zero(); upstream.channels];
        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            if let Some(g) = upstream.sites.get(&(2 * y + dy, 2 * x + dx)) {
                for (a, &gc) in acc.iter_mut().zip(g) {
                    *a = *a + gc;
                }
            }
        }
        out.sites.insert((y, x), acc);
    }
    out
}

/// 1x1 skip projection gathered from a dense encoder feature at the
/// given active sites: out[x,y] = W * feat[x,y] + b.
pub fn gather_skip<T: Scalar>(
    encoder_feat: &DenseTensor<T>,
    sites: &BTreeSet<Site>,
    p: &ConvParams<T>,
) -> Result<SparseActivation<T>> {
    gather_skip_counted(encoder_feat, sites, p, &mut 0)
}

pub fn gather_skip_counted<T: Scalar>(
    encoder_feat: &DenseTensor<T>,
    sites: &BTreeSet<Site>,
    p: &ConvParams<T>,
    madds: &mut u64,
) -> Result<SparseActivation<T>> {
    check_channels(p, encoder_feat.channels)?;
    if p.kh != 1 || p.kw != 1 {
        return Err(QgnError::Shape("skip projection must be 1x1".into()));
    }
    let mut out =
        SparseActivation::empty(0, encoder_feat.width, encoder_feat.height, p.c_out);
    for &(y, x) in sites {
        if y >= encoder_feat.height || x >= encoder_feat.width {
            return Err(QgnError::Shape(format!(
                "site ({x},{y}) outside {}x{} encoder feature",
                encoder_feat.width, encoder_feat.height
            )));
        }
        let src = encoder_feat.at(y, x);
        *madds += (p.c_in * p.c_out) as u64;
        let mut v = p.b.clone();
        for (co, a) in v.iter_mut().enumerate() {
            let w = p.w_tap(co, 0, 0);
            let mut s = T::zero();
            for ci in 0..p.c_in {
                s = s + w[ci] * src[ci];
            }
            *a = *a + s;
        }
        out.sites.insert((y, x), v);
    }
    Ok(out)
}

/// Reverse-mode of [`gather_skip`]: scatters the gradient back into a
/// dense encoder-feature gradient and accumulates param grads.
pub fn gather_skip_bwd<T: Scalar>(
    encoder_feat: &DenseTensor<T>,
    p: &mut ConvParams<T>,
    upstream: &SparseActivation<T>,
    feat_grad: &mut DenseTensor<T>,
) -> Result<()> {
    check_channels(p, encoder_feat.channels)?;
    for (&(y, x), g) in &upstream.sites {
        let src = encoder_feat.at(y, x);
        let c_in = p.c_in;
        for (co, &gc) in g.iter().enumerate() {
            p.gb[co] = p.gb[co] + gc;
            let gw = p.gw_tap_mut(co, 0, 0);
            for ci in 0..c_in {
                gw[ci] = gw[ci] + gc * src[ci];
            }
        }
        let dst = feat_grad.at_mut(y, x);
        for (co, &gc) in g.iter().enumerate() {
            let w = p.w_tap(co, 0, 0);
            for ci in 0..p.c_in {
                dst[ci] = dst[ci] + gc * w[ci];
            }
        }
    }
    Ok(())
}

pub fn relu_fwd<T: Scalar>(input: &SparseActivation<T>) -> SparseActivation<T> {
    let mut out = input.clone();
    for v in out.sites.values_mut() {
        for c in v.iter_mut() {
            if *c < T::zero() {
                *c = T::zero();
            }
        }
    }
    out
}

/// Gradient masked by the forward *input* sign (zero where input <= 0).
pub fn relu_bwd<T: Scalar>(
    input: &SparseActivation<T>,
    upstream: &SparseActivation<T>,
) -> Result<SparseActivation<T>> {
    if input.site_set() != upstream.site_set() {
        return Err(QgnError::Shape("relu bwd site mismatch".into()));
    }
    let mut out = upstream.clone();
    for (key, g) in out.sites.iter_mut() {
        let v = &input.sites[key];
        for (gc, &vc) in g.iter_mut().zip(v) {
            if vc <= T::zero() {
                *gc = T::zero();
            }
        }
    }
    Ok(out)
}

pub fn dense_relu_fwd<T: Scalar>(input: &DenseTensor<T>) -> DenseTensor<T> {
    let mut out = input.clone();
    for c in out.data.iter_mut() {
        if *c < T::zero() {
            *c = T::zero();
        }
    }
    out
}

pub fn dense_relu_bwd<T: Scalar>(input: &DenseTensor<T>, upstream: &DenseTensor<T>) -> DenseTensor<T> {
    let mut out = upstream.clone();
    for (g, &v) in out.data.iter_mut().zip(&input.data) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    out
}

/// Elementwise sum of two activations over identical site sets.
pub fn add_fwd<T: Scalar>(
    a: &SparseActivation<T>,
    b: &SparseActivation<T>,
) -> Result<SparseActivation<T>> {
    if a.channels != b.channels || a.site_set() != b.site_set() {
        return Err(QgnError::Shape("add requires identical site sets and channels".into()));
    }
    let mut out = a.clone();
    for (key, v) in out.sites.iter_mut() {
        let bv = &b.sites[key];
        for (c, &bc) in v.iter_mut().zip(bv) {
            *c = *c + bc;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng, co: usize, ci: usize, k: usize) -> ConvParams<f64> {
        let mut p = ConvParams::zeros(co, ci, k, k);
        for w in p.w.iter_mut() {
            *w = rng.gen_range(-1.0..1.0);
        }
        for b in p.b.iter_mut() {
            *b = rng.gen_range(-1.0..1.0);
        }
        p
    }

    fn random_sparse(
        rng: &mut ChaCha8Rng,
        w: u32,
        h: u32,
        c: usize,
        density: f64,
    ) -> SparseActivation<f64> {
        let mut a = SparseActivation::empty(0, w, h, c);
        for y in 0..h {
            for x in 0..w {
                if rng.gen_bool(density) {
                    let v = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    a.insert(x, y, v);
                }
            }
        }
        a
    }

    #[test]
    fn sparse_identity_1x1() {
        let mut a = SparseActivation::<f64>::empty(0, 4, 4, 3);
        a.insert(1, 2, vec![0.5, -1.0, 2.0]);
        let p = ConvParams::identity(3);
        let out = sparse_conv_fwd(&a, &p).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn sparse_empty_input() {
        let a = SparseActivation::<f64>::empty(0, 4, 4, 2);
        let mut p = ConvParams::zeros(2, 2, 3, 3);
        p.b = vec![5.0, 5.0]; // bias must not materialize anywhere
        let out = sparse_conv_fwd(&a, &p).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn sparse_channel_mismatch() {
        let a = SparseActivation::<f64>::empty(0, 4, 4, 2);
        let p = ConvParams::zeros(2, 3, 1, 1);
        assert!(matches!(sparse_conv_fwd(&a, &p), Err(QgnError::Shape(_))));
    }

    #[test]
    fn sparse_matches_masked_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = random_sparse(&mut rng, 6, 5, 3, 0.4);
            let p = random_params(&mut rng, 4, 3, 3);
            let sparse_out = sparse_conv_fwd(&a, &p).unwrap();
            let dense_out = dense_conv_fwd(&a.to_dense(), &p, 1).unwrap();
            for (&(y, x), v) in &sparse_out.sites {
                let d = dense_out.at(y, x);
                for (c, (&s, &dv)) in v.iter().zip(d).enumerate() {
                    assert!((s - dv).abs() < 1e-9, "site ({x},{y}) ch {c}: {s} vs {dv}");
                }
            }
        }
    }

    #[test]
    fn sparse_bwd_identity_and_bias() {
        let mut a = SparseActivation::<f64>::empty(0, 4, 4, 2);
        a.insert(0, 0, vec![1.0, 2.0]);
        a.insert(3, 2, vec![-1.0, 0.5]);
        let mut p = ConvParams::identity(2);
        let mut up = SparseActivation::empty(0, 4, 4, 2);
        up.insert(0, 0, vec![0.1, 0.2]);
        up.insert(3, 2, vec![0.3, 0.4]);
        let ig = sparse_conv_bwd(&a, &mut p, &up).unwrap();
        assert_eq!(ig, up);
        // bias grad is the per-channel sum of upstream over active sites
        assert!((p.gb[0] - 0.4).abs() < 1e-12);
        assert!((p.gb[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn sparse_bwd_site_mismatch() {
        let mut a = SparseActivation::<f64>::empty(0, 4, 4, 2);
        a.insert(0, 0, vec![1.0, 2.0]);
        let mut p = ConvParams::identity(2);
        let up = SparseActivation::empty(0, 4, 4, 2);
        assert!(matches!(sparse_conv_bwd(&a, &mut p, &up), Err(QgnError::Shape(_))));
    }

    /// Central-difference check of the sparse conv backward pass.
    #[test]
    fn sparse_bwd_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_sparse(&mut rng, 5, 5, 2, 0.5);
        let p0 = random_params(&mut rng, 3, 2, 3);
        // scalar objective: weighted sum of outputs
        let weights: Vec<Vec<f64>> = a
            .sites
            .iter()
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let objective = |p: &ConvParams<f64>, a: &SparseActivation<f64>| -> f64 {
            let out = sparse_conv_fwd(a, p).unwrap();
            out.sites
                .values()
                .zip(&weights)
                .map(|(v, w)| v.iter().zip(w).map(|(x, y)| x * y).sum::<f64>())
                .sum()
        };
        let mut p = p0.clone();
        let mut up = SparseActivation::empty(0, 5, 5, 3);
        for ((&(y, x), _), w) in a.sites.iter().zip(&weights) {
            up.sites.insert((y, x), w.clone());
        }
        let ig = sparse_conv_bwd(&a, &mut p, &up).unwrap();
        let h = 1e-5;
        for i in (0..p.w.len()).step_by(7) {
            let mut pp = p0.clone();
            pp.w[i] += h;
            let mut pm = p0.clone();
            pm.w[i] -= h;
            let fd = (objective(&pp, &a) - objective(&pm, &a)) / (2.0 * h);
            let rel = (fd - p.gw[i]).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-7, "weight {i}: fd {fd} vs {}", p.gw[i]);
        }
        // input gradient check on the first active site, channel 0
        if let Some((&key, v0)) = a.sites.iter().next() {
            let mut ap = a.clone();
            ap.sites.get_mut(&key).unwrap()[0] = v0[0] + h;
            let mut am = a.clone();
            am.sites.get_mut(&key).unwrap()[0] = v0[0] - h;
            let fd = (objective(&p0, &ap) - objective(&p0, &am)) / (2.0 * h);
            let got = ig.sites[&key][0];
            assert!((fd - got).abs() / fd.abs().max(1e-6) < 1e-7);
        }
    }

    #[test]
    fn dense_identity_and_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut input = DenseTensor::<f64>::zeros(4, 4, 2);
        for v in input.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let p = ConvParams::identity(2);
        assert_eq!(dense_conv_fwd(&input, &p, 1).unwrap(), input);
        let half = dense_conv_fwd(&input, &p, 2).unwrap();
        assert_eq!((half.height, half.width), (2, 2));
    }

    /// Direct 6-loop reference convolution.
    fn naive_conv(input: &DenseTensor<f64>, p: &ConvParams<f64>, stride: u32) -> DenseTensor<f64> {
        let (oh, ow) = (input.height.div_ceil(stride), input.width.div_ceil(stride));
        let mut out = DenseTensor::zeros(oh, ow, p.c_out);
        for y in 0..oh as i64 {
            for x in 0..ow as i64 {
                for co in 0..p.c_out {
                    let mut acc = p.b[co];
                    for ky in 0..p.kh as i64 {
                        for kx in 0..p.kw as i64 {
                            for ci in 0..p.c_in {
                                let sy = y * stride as i64 + ky - (p.kh / 2) as i64;
                                let sx = x * stride as i64 + kx - (p.kw / 2) as i64;
                                if sy < 0
                                    || sx < 0
                                    || sy >= input.height as i64
                                    || sx >= input.width as i64
                                {
                                    continue;
                                }
                                acc += p.w
                                    [((co * p.kh + ky as usize) * p.kw + kx as usize) * p.c_in + ci]
                                    * input.at(sy as u32, sx as u32)[ci];
                            }
                        }
                    }
                    out.at_mut(y as u32, x as u32)[co] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn dense_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for stride in [1u32, 2] {
            let mut input = DenseTensor::<f64>::zeros(5, 7, 3);
            for v in input.data.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let p = random_params(&mut rng, 4, 3, 3);
            let got = dense_conv_fwd(&input, &p, stride).unwrap();
            let want = naive_conv(&input, &p, stride);
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dense_bwd_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for stride in [1u32, 2] {
            let mut input = DenseTensor::<f64>::zeros(4, 4, 2);
            for v in input.data.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let p0 = random_params(&mut rng, 3, 2, 3);
            let (oh, ow) = (input.height.div_ceil(stride), input.width.div_ceil(stride));
            let mut up = DenseTensor::<f64>::zeros(oh, ow, 3);
            for v in up.data.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let objective = |p: &ConvParams<f64>, input: &DenseTensor<f64>| -> f64 {
                dense_conv_fwd(input, p, stride)
                    .unwrap()
                    .data
                    .iter()
                    .zip(&up.data)
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let mut p = p0.clone();
            let ig = dense_conv_bwd(&input, &mut p, &up, stride).unwrap();
            let h = 1e-5;
            for i in (0..p.w.len()).step_by(11) {
                let mut pp = p0.clone();
                pp.w[i] += h;
                let mut pm = p0.clone();
                pm.w[i] -= h;
                let fd = (objective(&pp, &input) - objective(&pm, &input)) / (2.0 * h);
                assert!((fd - p.gw[i]).abs() / fd.abs().max(1e-6) < 1e-7);
            }
            for i in (0..input.data.len()).step_by(5) {
                let mut xp = input.clone();
                xp.data[i] += h;
                let mut xm = input.clone();
                xm.data[i] -= h;
                let fd = (objective(&p0, &xp) - objective(&p0, &xm)) / (2.0 * h);
                assert!((fd - ig.data[i]).abs() / fd.abs().max(1e-6) < 1e-7);
            }
        }
    }

    #[test]
    fn upsample_single_site() {
        let mut a = SparseActivation::<f64>::empty(2, 2, 2, 1);
        a.insert(1, 1, vec![7.0]);
        let out = upsample2x(&a);
        assert_eq!(out.len(), 4);
        assert_eq!(out.level, 1);
        for (y, x) in [(2, 2), (2, 3), (3, 2), (3, 3)] {
            assert_eq!(out.sites[&(y, x)], vec![7.0]);
        }
        assert!(upsample2x(&SparseActivation::<f64>::empty(2, 2, 2, 1)).is_empty());
    }

    #[test]
    fn upsample_quadruples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_sparse(&mut rng, 6, 6, 2, 0.5);
        assert_eq!(upsample2x(&a).len(), 4 * a.len());
    }

    #[test]
    fn upsample_bwd_sums_children() {
        let mut up = SparseActivation::<f64>::empty(0, 4, 4, 1);
        up.insert(2, 2, vec![1.0]);
        up.insert(3, 2, vec![2.0]);
        up.insert(2, 3, vec![3.0]);
        up.insert(3, 3, vec![4.0]);
        let parents: BTreeSet<Site> = [(1, 1)].into();
        let g = upsample2x_bwd(&up, &parents, (2, 2), 1);
        assert_eq!(g.sites[&(1, 1)], vec![10.0]);
    }

    #[test]
    fn gather_skip_cases() {
        let mut feat = DenseTensor::<f64>::zeros(2, 2, 2);
        for (i, v) in feat.data.iter_mut().enumerate() {
            *v = i as f64;
        }
        let sites = SparseActivation::<f64>::full_sites(2, 2);
        // zero weights -> zero vectors at the sites
        let z = gather_skip(&feat, &sites, &ConvParams::zeros(3, 2, 1, 1)).unwrap();
        assert_eq!(z.len(), 4);
        assert!(z.sites.values().all(|v| v.iter().all(|&c| c == 0.0)));
        // identity -> sparse copy of the feature
        let c = gather_skip(&feat, &sites, &ConvParams::identity(2)).unwrap();
        for (&(y, x), v) in &c.sites {
            assert_eq!(v.as_slice(), feat.at(y, x));
        }
    }

    #[test]
    fn skip_breaks_upsample_ties() {
        // 4 identical children from upsample; distinct encoder values make
        // them pairwise distinct after the skip add.
        let mut a = SparseActivation::<f64>::empty(1, 1, 1, 2);
        a.insert(0, 0, vec![1.0, 1.0]);
        let up = upsample2x(&a);
        let mut feat = DenseTensor::<f64>::zeros(2, 2, 2);
        for (i, v) in feat.data.iter_mut().enumerate() {
            *v = (i * i) as f64;
        }
        let skip = gather_skip(&feat, &up.site_set(), &ConvParams::identity(2)).unwrap();
        let sum = add_fwd(&up, &skip).unwrap();
        let vals: Vec<&Vec<f64>> = sum.sites.values().collect();
        for i in 0..vals.len() {
            for j in i + 1..vals.len() {
                assert_ne!(vals[i], vals[j]);
            }
        }
    }

    #[test]
    fn relu_and_add() {
        let mut a = SparseActivation::<f64>::empty(0, 2, 2, 2);
        a.insert(0, 0, vec![-1.0, 2.0]);
        let r = relu_fwd(&a);
        assert_eq!(r.sites[&(0, 0)], vec![0.0, 2.0]);
        let zero = SparseActivation::from_dense(
            &DenseTensor::zeros(2, 2, 2),
            0,
            &a.site_set(),
        );
        assert_eq!(add_fwd(&a, &zero).unwrap(), a);
        let mut b = SparseActivation::<f64>::empty(0, 2, 2, 2);
        b.insert(1, 1, vec![1.0, 1.0]);
        assert!(matches!(add_fwd(&a, &b), Err(QgnError::Shape(_))));
    }

    #[test]
    fn relu_bwd_finite_difference() {
        // away from zero the relu derivative is exactly 0 or 1
        let mut a = SparseActivation::<f64>::empty(0, 1, 2, 2);
        a.insert(0, 0, vec![0.7, -0.3]);
        a.insert(0, 1, vec![-2.0, 1.5]);
        let mut up = a.clone();
        for v in up.sites.values_mut() {
            v.iter_mut().for_each(|c| *c = 1.0);
        }
        let g = relu_bwd(&a, &up).unwrap();
        let h = 1e-5;
        for key in a.site_set() {
            for c in 0..2 {
                let mut ap = a.clone();
                ap.sites.get_mut(&key).unwrap()[c] += h;
                let mut am = a.clone();
                am.sites.get_mut(&key).unwrap()[c] -= h;
                let f = |x: &SparseActivation<f64>| -> f64 {
                    relu_fwd(x).sites.values().flatten().sum()
                };
                let fd = (f(&ap) - f(&am)) / (2.0 * h);
                assert!((fd - g.sites[&key][c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn submanifold_site_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random_sparse(&mut rng, 8, 8, 2, 0.3);
        let p = random_params(&mut rng, 2, 2, 3);
        let sites = a.site_set();
        assert_eq!(sparse_conv_fwd(&a, &p).unwrap().site_set(), sites);
        assert_eq!(relu_fwd(&a).site_set(), sites);
        assert_eq!(add_fwd(&a, &a).unwrap().site_set(), sites);
    }
}

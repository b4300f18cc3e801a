//! Dense label masks, the bit-exact QMR1 file format, padding, synthetic
//! data generation and flip augmentation.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{QgnError, Result};

/// Class label. 0 is reserved for the composite class and never appears
/// in an input mask; dataset classes are 1..=k.
pub type ClassId = u16;

/// Reserved label for cells that mix multiple classes.
pub const COMPOSITE: ClassId = 0;

const QMR1_MAGIC: &[u8; 4] = b"QMR1";

/// Dense 2D grid of class ids, row-major with top-left origin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    num_classes: u16,
    data: Vec<ClassId>,
}

impl Mask {
    /// Build a mask, validating that every cell is in 1..=k.
    pub fn new(width: u32, height: u32, num_classes: u16, data: Vec<ClassId>) -> Result<Self> {
        if data.len() != (width as usize) * (height as usize) {
            return Err(QgnError::Shape(format!(
                "mask data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        for &v in &data {
            if v == COMPOSITE || v > num_classes {
                return Err(QgnError::ClassRange(format!(
                    "cell value {v} outside 1..={num_classes}"
                )));
            }
        }
        Ok(Self { width, height, num_classes, data })
    }

    /// Uniform mask of a single class.
    pub fn uniform(width: u32, height: u32, num_classes: u16, class: ClassId) -> Result<Self> {
        Self::new(width, height, num_classes, vec![class; (width as usize) * (height as usize)])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn num_classes(&self) -> u16 {
        self.num_classes
    }

    pub fn data(&self) -> &[ClassId] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32) -> ClassId {
        self.data[(y as usize) * (self.width as usize) + x as usize]
    }

    fn set(&mut self, x: u32, y: u32, v: ClassId) {
        self.data[(y as usize) * (self.width as usize) + x as usize] = v;
    }
}

/// Read a QMR1 mask file.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let bytes = std::fs::read(path)?;
    decode_mask(&bytes)
}

/// Decode the QMR1 byte layout: magic, u32 width, u32 height, u32 k,
/// then width*height u16 cells, all little-endian.
pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4)?;
    if magic != QMR1_MAGIC {
        return Err(QgnError::Format("bad QMR1 magic".into()));
    }
    let width = r.u32()?;
    let height = r.u32()?;
    let k = r.u32()?;
    if k == 0 || k > u16::MAX as u32 - 1 {
        return Err(QgnError::Format(format!("class count {k} out of range")));
    }
    let n = (width as usize)
        .checked_mul(height as usize)
        .ok_or_else(|| QgnError::Format("mask dimensions overflow".into()))?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.u16()?);
    }
    if !r.is_empty() {
        return Err(QgnError::Format("trailing bytes after mask payload".into()));
    }
    Mask::new(width, height, k as u16, data)
}

/// Write the bit-exact QMR1 format.
pub fn write_mask(mask: &Mask, path: &Path) -> Result<()> {
    let bytes = encode_mask(mask);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + mask.data.len() * 2);
    out.extend_from_slice(QMR1_MAGIC);
    out.extend_from_slice(&mask.width.to_le_bytes());
    out.extend_from_slice(&mask.height.to_le_bytes());
    out.extend_from_slice(&(mask.num_classes as u32).to_le_bytes());
    for &v in &mask.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Pad a mask so both dimensions become the smallest multiples of `m`.
/// Padded cells replicate the nearest edge pixel, so no new class id is
/// introduced and the loss needs no ignore label.
pub fn pad_to_multiple(mask: &Mask, m: u32) -> Mask {
    assert!(m >= 1, "padding multiple must be >= 1");
    let round_up = |v: u32| v.div_ceil(m) * m;
    let (w, h) = (round_up(mask.width), round_up(mask.height));
    if w == mask.width && h == mask.height {
        return mask.clone();
    }
    let mut data = Vec::with_capacity((w as usize) * (h as usize));
    for y in 0..h {
        let sy = y.min(mask.height - 1);
        for x in 0..w {
            let sx = x.min(mask.width - 1);
            data.push(mask.get(sx, sy));
        }
    }
    Mask { width: w, height: h, num_classes: mask.num_classes, data }
}

/// Deterministic synthetic mask: background class 1, then `n_shapes`
/// axis-aligned rectangles painted in order.
///
/// Per shape, drawn from ChaCha8 seeded with `seed`, in this exact order:
/// class uniform in 2..=k, x0 in 0..width, y0 in 0..height,
/// w in 1..=max(width/2,1), h in 1..=max(height/2,1); the rectangle is
/// clipped to the grid.
pub fn gen_synthetic(width: u32, height: u32, k: u16, n_shapes: u32, seed: u64) -> Mask {
    assert!(k >= 2, "need at least 2 classes");
    assert!(width >= 8 && height >= 8, "dims must be >= 8");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = Mask {
        width,
        height,
        num_classes: k,
        data: vec![1; (width as usize) * (height as usize)],
    };
    for _ in 0..n_shapes {
        let class: ClassId = rng.gen_range(2..=k);
        let x0 = rng.gen_range(0..width);
        let y0 = rng.gen_range(0..height);
        let w = rng.gen_range(1..=(width / 2).max(1));
        let h = rng.gen_range(1..=(height / 2).max(1));
        for y in y0..(y0 + h).min(height) {
            for x in x0..(x0 + w).min(width) {
                mask.set(x, y, class);
            }
        }
    }
    mask
}

/// Reverse the column order. An involution.
pub fn hflip(mask: &Mask) -> Mask {
    let mut data = Vec::with_capacity(mask.data.len());
    for y in 0..mask.height {
        for x in 0..mask.width {
            data.push(mask.get(mask.width - 1 - x, y));
        }
    }
    Mask { width: mask.width, height: mask.height, num_classes: mask.num_classes, data }
}

/// Little-endian cursor over a byte slice.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(QgnError::Format("truncated payload".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        let s = self.take(2)?;
        Ok(u16::from_le_bytes([s[0], s[1]]))
    }

    pub fn u32(&mut self) -> Result<u32> {
        let s = self.take(4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let s = self.take(8)?;
        Ok(u64::from_le_bytes(s.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        let s = self.take(4)?;
        Ok(f32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }
}

// Used by file readers that stream instead of slurping.
#[allow(dead_code)]
pub(crate) fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| QgnError::Format("truncated payload".into()))?;
    Ok(buf)
}

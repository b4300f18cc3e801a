//! T-pyramid construction, lossless quadtree encode/decode, the QTR1 file
//! format and sparsity statistics.

use std::io::Write;
use std::path::Path;

use crate::error::{QgnError, Result};
use crate::mask::{ByteReader, ClassId, Mask, COMPOSITE};

const QTR1_MAGIC: &[u8; 4] = b"QTR1";

/// Complete pyramid of label grids. Level 0 is the mask itself; each
/// higher level merges disjoint 2x2 patches, with 0 marking mixed cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TPyramid {
    width: u32,
    height: u32,
    num_classes: u16,
    levels: Vec<Vec<ClassId>>,
}

/// Merge a 2x2 patch: the common value if all four agree, else composite.
pub fn merge_patch(patch: [ClassId; 4]) -> ClassId {
    if patch[0] == patch[1] && patch[0] == patch[2] && patch[0] == patch[3] {
        patch[0]
    } else {
        COMPOSITE
    }
}

/// Build an (L+1)-level pyramid from a mask whose dims divide by 2^L.
pub fn build_t_pyramid(mask: &Mask, max_level: u8) -> Result<TPyramid> {
    let div = 1u32 << max_level;
    if mask.width() % div != 0 || mask.height() % div != 0 {
        return Err(QgnError::Shape(format!(
            "{}x{} not divisible by 2^{}",
            mask.width(),
            mask.height(),
            max_level
        )));
    }
    let mut levels = vec![mask.data().to_vec()];
    let (mut w, mut h) = (mask.width(), mask.height());
    for _ in 0..max_level {
        let prev = levels.last().unwrap();
        let (nw, nh) = (w / 2, h / 2);
        let mut next = Vec::with_capacity((nw * nh) as usize);
        for y in 0..nh {
            for x in 0..nw {
                let i = |dx: u32, dy: u32| prev[((2 * y + dy) * w + 2 * x + dx) as usize];
                next.push(merge_patch([i(0, 0), i(1, 0), i(0, 1), i(1, 1)]));
            }
        }
        levels.push(next);
        w = nw;
        h = nh;
    }
    Ok(TPyramid {
        width: mask.width(),
        height: mask.height(),
        num_classes: mask.num_classes(),
        levels,
    })
}

impl TPyramid {
    pub fn max_level(&self) -> u8 {
        (self.levels.len() - 1) as u8
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

    /// Grid dimensions of one level.
    pub fn level_dims(&self, l: u8) -> (u32, u32) {
        (self.width >> l, self.height >> l)
    }

    pub fn level(&self, l: u8) -> &[ClassId] {
        &self.levels[l as usize]
    }

    /// Lookup T_l[x,y].
    pub fn query(&self, l: u8, x: u32, y: u32) -> Result<ClassId> {
        if l as usize >= self.levels.len() {
            return Err(QgnError::Bounds(format!("level {l} beyond {}", self.max_level())));
        }
        let (w, h) = self.level_dims(l);
        if x >= w || y >= h {
            return Err(QgnError::Bounds(format!("({x},{y}) outside {w}x{h} at level {l}")));
        }
        Ok(self.levels[l as usize][(y * w + x) as usize])
    }
}

/// One quadtree leaf: the 2^l x 2^l block at (x<<l, y<<l) carries `value`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadtreeRecord {
    pub level: u8,
    pub x: u32,
    pub y: u32,
    pub value: ClassId,
}

/// Sparse leaf set covering the grid exactly once. Records are kept in
/// the canonical (level desc, y, x) order so serialization is stable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quadtree {
    pub width: u32,
    pub height: u32,
    pub num_classes: u16,
    pub max_level: u8,
    pub records: Vec<QuadtreeRecord>,
}

/// Extract the leaf records of a pyramid: a cell is emitted iff it is
/// non-composite and its parent (if any) is composite.
pub fn quadtree_encode(tp: &TPyramid) -> Quadtree {
    let max_level = tp.max_level();
    let mut records = Vec::new();
    for l in (0..=max_level).rev() {
        let (w, h) = tp.level_dims(l);
        let grid = tp.level(l);
        for y in 0..h {
            for x in 0..w {
                let v = grid[(y * w + x) as usize];
                if v == COMPOSITE {
                    continue;
                }
                let parent_composite = if l == max_level {
                    true
                } else {
                    let (pw, _) = tp.level_dims(l + 1);
                    tp.level(l + 1)[((y / 2) * pw + x / 2) as usize] == COMPOSITE
                };
                if parent_composite {
                    records.push(QuadtreeRecord { level: l, x, y, value: v });
                }
            }
        }
    }
    Quadtree {
        width: tp.width(),
        height: tp.height(),
        num_classes: tp.num_classes(),
        max_level,
        records,
    }
}

/// Rebuild the dense mask, verifying the records partition the grid.
pub fn quadtree_decode(qt: &Quadtree, width: u32, height: u32) -> Result<Mask> {
    let n = (width as usize) * (height as usize);
    let mut data = vec![COMPOSITE; n];
    let mut covered = 0usize;
    for r in &qt.records {
        if r.value == COMPOSITE {
            return Err(QgnError::Structure("composite leaf record".into()));
        }
        let size = 1u32 << r.level;
        let (x0, y0) = (r.x.checked_mul(size), r.y.checked_mul(size));
        let (x0, y0) = match (x0, y0) {
            (Some(x0), Some(y0)) if x0 + size <= width && y0 + size <= height => (x0, y0),
            _ => {
                return Err(QgnError::Structure(format!(
                    "record (l={},x={},y={}) outside {}x{}",
                    r.level, r.x, r.y, width, height
                )))
            }
        };
        for y in y0..y0 + size {
            for x in x0..x0 + size {
                let i = (y as usize) * (width as usize) + x as usize;
                if data[i] != COMPOSITE {
                    return Err(QgnError::Structure(format!(
                        "overlapping records at ({x},{y})"
                    )));
                }
                data[i] = r.value;
            }
        }
        covered += (size as usize) * (size as usize);
    }
    if covered != n {
        return Err(QgnError::Structure(format!(
            "records cover {covered} of {n} pixels"
        )));
    }
    Mask::new(width, height, qt.num_classes, data)
}

/// Per-level pixel fractions and the quadtree-to-dense storage ratio,
/// both in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityStats {
    /// pixel_fraction[l] = percent of pixels resolved at level l.
    pub pixel_fraction: Vec<f64>,
    pub ratio: f64,
}

pub fn sparsity_stats(qt: &Quadtree, width: u32, height: u32) -> SparsityStats {
    let total = (width as f64) * (height as f64);
    let mut counts = vec![0u64; qt.max_level as usize + 1];
    for r in &qt.records {
        counts[r.level as usize] += 1;
    }
    let pixel_fraction: Vec<f64> = counts
        .iter()
        .enumerate()
        .map(|(l, &c)| 100.0 * (c as f64) * 4f64.powi(l as i32) / total)
        .collect();
    let ratio = 100.0 * (qt.records.len() as f64) / total;
    SparsityStats { pixel_fraction, ratio }
}

/// Storage ratio from per-level pixel percentages given highest level
/// first (the order used in reports): ratio = sum of p_l / 4^l.
pub fn ratio_from_percentages(percent_high_to_low: &[f64]) -> Result<f64> {
    let sum: f64 = percent_high_to_low.iter().sum();
    if (sum - 100.0).abs() > 1.0 {
        return Err(QgnError::Input(format!(
            "per-level percentages sum to {sum:.4}, expected ~100"
        )));
    }
    let top = percent_high_to_low.len() - 1;
    Ok(percent_high_to_low
        .iter()
        .enumerate()
        .map(|(i, &p)| p / 4f64.powi((top - i) as i32))
        .sum())
}

/// Write the QTR1 file: magic, u32 W, u32 H, u32 k, u8 L, u32 count,
/// then (u8 l, u32 x, u32 y, u16 v) records in canonical sort order.
pub fn write_quadtree(qt: &Quadtree, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_quadtree(qt))?;
    Ok(())
}

pub fn encode_quadtree(qt: &Quadtree) -> Vec<u8> {
    let mut records = qt.records.clone();
    records.sort_by_key(|r| (std::cmp::Reverse(r.level), r.y, r.x));
    let mut out = Vec::with_capacity(21 + records.len() * 11);
    out.extend_from_slice(QTR1_MAGIC);
    out.extend_from_slice(&qt.width.to_le_bytes());
    out.extend_from_slice(&qt.height.to_le_bytes());
    out.extend_from_slice(&(qt.num_classes as u32).to_le_bytes());
    out.push(qt.max_level);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in &records {
        out.push(r.level);
        out.extend_from_slice(&r.x.to_le_bytes());
        out.extend_from_slice(&r.y.to_le_bytes());
        out.extend_from_slice(&r.value.to_le_bytes());
    }
    out
}

pub fn read_quadtree(path: &Path) -> Result<Quadtree> {
    let bytes = std::fs::read(path)?;
    decode_quadtree_bytes(&bytes)
}

pub fn decode_quadtree_bytes(bytes: &[u8]) -> Result<Quadtree> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != QTR1_MAGIC {
        return Err(QgnError::Format("bad QTR1 magic".into()));
    }
    let width = r.u32()?;
    let height = r.u32()?;
    let k = r.u32()?;
    let max_level = r.u8()?;
    let count = r.u32()?;
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let level = r.u8()?;
        let x = r.u32()?;
        let y = r.u32()?;
        let value = r.u16()?;
        if level > max_level {
            return Err(QgnError::Structure(format!("record level {level} > {max_level}")));
        }
        records.push(QuadtreeRecord { level, x, y, value });
    }
    if !r.is_empty() {
        return Err(QgnError::Format("trailing bytes after quadtree payload".into()));
    }
    Ok(Quadtree { width, height, num_classes: k as u16, max_level, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::gen_synthetic;
    use proptest::prelude::*;

    #[test]
    fn merge_examples() {
        assert_eq!(merge_patch([3, 3, 3, 3]), 3);
        assert_eq!(merge_patch([1, 2, 1, 1]), 0);
        assert_eq!(merge_patch([0, 0, 0, 0]), 0);
    }

    #[test]
    fn uniform_pyramid() {
        let m = Mask::uniform(4, 4, 3, 2).unwrap();
        let tp = build_t_pyramid(&m, 2).unwrap();
        assert_eq!(tp.level(1), &[2, 2, 2, 2]);
        assert_eq!(tp.level(2), &[2]);
    }

    #[test]
    fn single_deviant_pixel() {
        let mut data = vec![2u16; 16];
        data[0] = 1;
        let m = Mask::new(4, 4, 2, data).unwrap();
        let tp = build_t_pyramid(&m, 2).unwrap();
        // Only the top-left 2x2 block mixes; everything else stays class 2.
        assert_eq!(tp.level(1), &[0, 2, 2, 2]);
        assert_eq!(tp.level(2), &[0]);
    }

    #[test]
    fn indivisible_dims_rejected() {
        let m = Mask::uniform(3, 4, 2, 1).unwrap();
        assert!(matches!(build_t_pyramid(&m, 1), Err(QgnError::Shape(_))));
    }

    #[test]
    fn query_matches_levels() {
        let m = gen_synthetic(16, 16, 4, 3, 2);
        let tp = build_t_pyramid(&m, 2).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(tp.query(0, x, y).unwrap(), m.get(x, y));
            }
        }
        assert!(matches!(tp.query(3, 0, 0), Err(QgnError::Bounds(_))));
        assert!(matches!(tp.query(1, 8, 0), Err(QgnError::Bounds(_))));
    }

    #[test]
    fn encode_uniform_single_root() {
        let m = Mask::uniform(32, 32, 4, 3).unwrap();
        let qt = quadtree_encode(&build_t_pyramid(&m, 5).unwrap());
        assert_eq!(qt.records, vec![QuadtreeRecord { level: 5, x: 0, y: 0, value: 3 }]);
    }

    #[test]
    fn encode_split_halves() {
        // Left half class 1, right half class 2 on a 4x4 grid.
        let mut data = vec![0u16; 16];
        for y in 0..4usize {
            for x in 0..4usize {
                data[y * 4 + x] = if x < 2 { 1 } else { 2 };
            }
        }
        let m = Mask::new(4, 4, 2, data).unwrap();
        let qt = quadtree_encode(&build_t_pyramid(&m, 2).unwrap());
        assert_eq!(qt.records.len(), 4);
        assert!(qt.records.iter().all(|r| r.level == 1));
        assert_eq!(qt.records.iter().filter(|r| r.value == 1).count(), 2);
        assert_eq!(qt.records.iter().filter(|r| r.value == 2).count(), 2);
    }

    #[test]
    fn roundtrip_synthetic() {
        let m = gen_synthetic(64, 64, 4, 3, 7);
        let qt = quadtree_encode(&build_t_pyramid(&m, 5).unwrap());
        assert_eq!(quadtree_decode(&qt, 64, 64).unwrap(), m);
    }

    #[test]
    fn decode_uniform_root() {
        let qt = Quadtree {
            width: 32,
            height: 32,
            num_classes: 3,
            max_level: 5,
            records: vec![QuadtreeRecord { level: 5, x: 0, y: 0, value: 3 }],
        };
        let m = quadtree_decode(&qt, 32, 32).unwrap();
        assert!(m.data().iter().all(|&v| v == 3));
    }

    #[test]
    fn decode_rejects_overlap_and_gap() {
        let overlap = Quadtree {
            width: 2,
            height: 2,
            num_classes: 2,
            max_level: 1,
            records: vec![
                QuadtreeRecord { level: 1, x: 0, y: 0, value: 1 },
                QuadtreeRecord { level: 0, x: 0, y: 0, value: 2 },
            ],
        };
        assert!(matches!(quadtree_decode(&overlap, 2, 2), Err(QgnError::Structure(_))));
        let gap = Quadtree {
            width: 2,
            height: 2,
            num_classes: 2,
            max_level: 1,
            records: vec![QuadtreeRecord { level: 0, x: 0, y: 0, value: 1 }],
        };
        assert!(matches!(quadtree_decode(&gap, 2, 2), Err(QgnError::Structure(_))));
    }

    #[test]
    fn stats_table_rows() {
        // Published per-level percentages (level 5 first) and their ratios.
        let rows: &[(&[f64], f64)] = &[
            (&[66.34, 14.21, 9.18, 5.52, 3.02, 1.70], 3.07),
            (&[65.12, 14.44, 9.53, 5.85, 3.22, 1.81], 3.25),
            (&[56.26, 18.22, 11.78, 7.09, 4.20, 2.43], 4.24),
            (&[55.57, 18.50, 11.98, 7.22, 4.27, 2.46], 4.29),
            (&[56.11, 18.27, 11.82, 7.12, 4.22, 2.44], 4.25),
            (&[55.40, 18.54, 12.03, 7.25, 4.29, 2.47], 4.31),
            (&[47.48, 21.40, 14.44, 8.68, 5.05, 2.93], 5.09),
            (&[47.25, 21.44, 14.49, 8.74, 5.10, 2.96], 5.14),
        ];
        for (p, want) in rows {
            let got = ratio_from_percentages(p).unwrap();
            assert!((got - want).abs() <= 0.03, "got {got} want {want}");
        }
    }

    #[test]
    fn stats_uniform_1024() {
        let m = Mask::uniform(1024, 1024, 2, 1).unwrap();
        let qt = quadtree_encode(&build_t_pyramid(&m, 5).unwrap());
        let s = sparsity_stats(&qt, 1024, 1024);
        assert!((s.pixel_fraction[5] - 100.0).abs() < 1e-9);
        assert!((s.ratio - 100.0 / 1024.0).abs() < 1e-9);
    }

    #[test]
    fn stats_ratio_identity() {
        let m = gen_synthetic(128, 128, 6, 8, 5);
        let qt = quadtree_encode(&build_t_pyramid(&m, 5).unwrap());
        let s = sparsity_stats(&qt, 128, 128);
        let total: f64 = s.pixel_fraction.iter().sum();
        assert!((total - 100.0).abs() < 1e-9);
        let via_fractions: f64 = s
            .pixel_fraction
            .iter()
            .enumerate()
            .map(|(l, p)| p / 4f64.powi(l as i32))
            .sum();
        assert!((via_fractions - s.ratio).abs() < 1e-12);
    }

    #[test]
    fn deviant_pixel_monotonicity() {
        let base = Mask::uniform(32, 32, 2, 1).unwrap();
        let n0 = quadtree_encode(&build_t_pyramid(&base, 5).unwrap()).records.len();
        for (x, y) in [(0, 0), (13, 7), (31, 31)] {
            let mut data = base.data().to_vec();
            data[y * 32 + x] = 2;
            let m = Mask::new(32, 32, 2, data).unwrap();
            let n = quadtree_encode(&build_t_pyramid(&m, 5).unwrap()).records.len();
            assert!(n >= n0);
        }
    }

    #[test]
    fn qtr1_file_roundtrip() {
        let m = gen_synthetic(64, 64, 5, 4, 13);
        let qt = quadtree_encode(&build_t_pyramid(&m, 5).unwrap());
        let bytes = encode_quadtree(&qt);
        let back = decode_quadtree_bytes(&bytes).unwrap();
        assert_eq!(quadtree_decode(&back, 64, 64).unwrap(), m);
        // canonical order is stable
        assert_eq!(encode_quadtree(&back), bytes);
    }

    proptest! {
        #[test]
        fn lossless_and_partition(seed in 0u64..200, shapes in 0u32..8) {
            let m = gen_synthetic(64, 64, 5, shapes, seed);
            let tp = build_t_pyramid(&m, 5).unwrap();
            let qt = quadtree_encode(&tp);
            let area: u64 = qt.records.iter().map(|r| 1u64 << (2 * r.level)).sum();
            prop_assert_eq!(area, 64 * 64);
            prop_assert_eq!(quadtree_decode(&qt, 64, 64).unwrap(), m);
        }
    }
}

//! Run-length codec and mask algebra.
//!
//! Runs are laid out column-major (pixel `(row, col)` sits at flat index
//! `col * height + row`) and start with a background run, the layout used by
//! COCO-style tooling. Areas and overlaps are computed by walking the run
//! streams directly; nothing here decodes to a dense grid except
//! [`rle_decode`].

use crate::model::{gcd, Fraction, InstanceTrack, MaskError, RleMask};

/// Dense binary raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelGrid {
    height: u32,
    width: u32,
    bits: Vec<bool>,
}

impl PixelGrid {
    pub fn new(height: u32, width: u32) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height as usize * width as usize],
        }
    }

    /// Builds a grid from row-major values.
    pub fn from_rows(height: u32, width: u32, bits: Vec<bool>) -> Result<Self, MaskError> {
        let expected = height as usize * width as usize;
        if bits.len() != expected {
            return Err(MaskError::BufferLength {
                len: bits.len(),
                expected,
            });
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn get(&self, row: u32, col: u32) -> bool {
        self.bits[self.index(row, col)]
    }

    pub fn set(&mut self, row: u32, col: u32, value: bool) {
        let i = self.index(row, col);
        self.bits[i] = value;
    }

    pub fn row(&self, row: u32) -> &[bool] {
        let start = row as usize * self.width as usize;
        &self.bits[start..start + self.width as usize]
    }

    pub fn count_ones(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    /// Coordinates `(row, col)` of every set pixel, row by row.
    pub fn ones(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width as usize;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| ((i / w) as u32, (i % w) as u32))
    }

    fn index(&self, row: u32, col: u32) -> usize {
        assert!(row < self.height && col < self.width, "pixel out of bounds");
        row as usize * self.width as usize + col as usize
    }
}

/// Accumulates `(value, length)` runs into canonical counts.
struct RunBuilder {
    counts: Vec<u32>,
    current: bool,
}

impl RunBuilder {
    fn new() -> Self {
        Self {
            counts: vec![0],
            current: false,
        }
    }

    fn push(&mut self, value: bool, len: u32) {
        if len == 0 {
            return;
        }
        if value != self.current {
            self.counts.push(0);
            self.current = value;
        }
        *self.counts.last_mut().expect("non-empty") += len;
    }

    fn finish(self, height: u32, width: u32) -> Result<RleMask, MaskError> {
        RleMask::new(height, width, self.counts)
    }
}

pub fn rle_encode(grid: &PixelGrid) -> Result<RleMask, MaskError> {
    if grid.height == 0 || grid.width == 0 {
        return Err(MaskError::ZeroDimension {
            height: grid.height,
            width: grid.width,
        });
    }
    let mut runs = RunBuilder::new();
    for col in 0..grid.width {
        for row in 0..grid.height {
            runs.push(grid.get(row, col), 1);
        }
    }
    runs.finish(grid.height, grid.width)
}

pub fn rle_decode(mask: &RleMask) -> PixelGrid {
    let mut grid = PixelGrid::new(mask.height(), mask.width());
    let h = u64::from(mask.height());
    for (start, len) in foreground_runs(mask) {
        for i in start..start + len {
            grid.set((i % h) as u32, (i / h) as u32, true);
        }
    }
    grid
}

/// Decodes raw counts, checking them first.
pub fn rle_decode_counts(height: u32, width: u32, counts: &[u32]) -> Result<PixelGrid, MaskError> {
    RleMask::new(height, width, counts.to_vec()).map(|m| rle_decode(&m))
}

/// `(flat start, length)` of every foreground run.
pub fn foreground_runs(mask: &RleMask) -> impl Iterator<Item = (u64, u64)> + '_ {
    let mut pos = 0u64;
    mask.counts().iter().enumerate().filter_map(move |(i, &c)| {
        let start = pos;
        pos += u64::from(c);
        (i % 2 == 1).then_some((start, u64::from(c)))
    })
}

pub fn area(mask: Option<&RleMask>) -> u64 {
    mask.map_or(0, RleMask::area)
}

fn check_same_size(a: &RleMask, b: &RleMask) -> Result<(), MaskError> {
    if a.size() != b.size() {
        return Err(MaskError::DimensionMismatch {
            left_h: a.height(),
            left_w: a.width(),
            right_h: b.height(),
            right_w: b.width(),
        });
    }
    Ok(())
}

/// Overlap of two foreground run lists by a two-pointer sweep.
fn overlap(a: &RleMask, b: &RleMask) -> u64 {
    let mut ra = foreground_runs(a).peekable();
    let mut rb = foreground_runs(b).peekable();
    let mut total = 0;
    while let (Some(&(sa, la)), Some(&(sb, lb))) = (ra.peek(), rb.peek()) {
        let (ea, eb) = (sa + la, sb + lb);
        let lo = sa.max(sb);
        let hi = ea.min(eb);
        if hi > lo {
            total += hi - lo;
        }
        if ea <= eb {
            ra.next();
        } else {
            rb.next();
        }
    }
    total
}

pub fn intersection_area(a: Option<&RleMask>, b: Option<&RleMask>) -> Result<u64, MaskError> {
    match (a, b) {
        (Some(a), Some(b)) => {
            check_same_size(a, b)?;
            Ok(overlap(a, b))
        }
        _ => Ok(0),
    }
}

pub fn union_area(a: Option<&RleMask>, b: Option<&RleMask>) -> Result<u64, MaskError> {
    let inter = intersection_area(a, b)?;
    Ok(area(a) + area(b) - inter)
}

/// Spatio-temporal overlap of two tracks: intersections and unions summed over
/// all frames before dividing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrackIou {
    pub intersection: u64,
    pub union: u64,
}

impl TrackIou {
    /// Both tracks empty in every frame; [`TrackIou::value`] reports 0.
    pub fn is_degenerate(&self) -> bool {
        self.union == 0
    }

    pub fn value(&self) -> f64 {
        if self.union == 0 {
            0.0
        } else {
            let (n, d) = self.reduced();
            n as f64 / d as f64
        }
    }

    /// `(numerator, denominator)` in lowest terms; `(0, 1)` when degenerate.
    pub fn reduced(&self) -> (u64, u64) {
        if self.union == 0 {
            return (0, 1);
        }
        let g = gcd(self.intersection, self.union);
        (self.intersection / g, self.union / g)
    }

    pub fn exceeds(&self, threshold: Fraction) -> bool {
        self.union > 0 && threshold.is_exceeded_by(self.intersection, self.union)
    }

    pub fn meets(&self, threshold: Fraction) -> bool {
        self.union > 0 && threshold.is_met_by(self.intersection, self.union)
    }
}

pub fn spatio_temporal_iou(p: &InstanceTrack, g: &InstanceTrack) -> Result<TrackIou, MaskError> {
    if p.masks.len() != g.masks.len() {
        return Err(MaskError::FrameCountMismatch {
            left: p.masks.len(),
            right: g.masks.len(),
        });
    }
    let mut iou = TrackIou {
        intersection: 0,
        union: 0,
    };
    for (a, b) in p.masks.iter().zip(&g.masks) {
        let (a, b) = (a.as_ref(), b.as_ref());
        let inter = intersection_area(a, b)?;
        iou.intersection += inter;
        iou.union += area(a) + area(b) - inter;
    }
    Ok(iou)
}

/// Shifts a mask by `(d_row, d_col)`, dropping pixels that leave the frame.
/// Returns `None` when nothing remains.
pub fn translate(mask: &RleMask, d_row: i64, d_col: i64) -> Option<RleMask> {
    let h = i64::from(mask.height());
    let w = i64::from(mask.width());
    // per source column, foreground row intervals
    let mut columns: Vec<Vec<(i64, i64)>> = vec![Vec::new(); w as usize];
    for (start, len) in foreground_runs(mask) {
        let (mut s, e) = (start as i64, (start + len) as i64);
        while s < e {
            let col = s / h;
            let col_end = ((col + 1) * h).min(e);
            columns[col as usize].push((s - col * h, col_end - col * h));
            s = col_end;
        }
    }
    let mut runs = RunBuilder::new();
    let mut any = false;
    for col in 0..w {
        let src = col - d_col;
        let mut cursor = 0i64;
        if (0..w).contains(&src) {
            for &(r0, r1) in &columns[src as usize] {
                let (lo, hi) = ((r0 + d_row).max(0), (r1 + d_row).min(h));
                if hi <= lo {
                    continue;
                }
                runs.push(false, (lo - cursor) as u32);
                runs.push(true, (hi - lo) as u32);
                cursor = hi;
                any = true;
            }
        }
        runs.push(false, (h - cursor) as u32);
    }
    if !any {
        return None;
    }
    Some(
        runs.finish(mask.height(), mask.width())
            .expect("translated runs cover the frame"),
    )
}

/// Pixel-wise union of several same-sized masks.
pub fn merge_union(masks: &[&RleMask]) -> Result<Option<RleMask>, MaskError> {
    let Some(first) = masks.first() else {
        return Ok(None);
    };
    let mut events: Vec<(u64, u64)> = Vec::new();
    for m in masks {
        check_same_size(first, m)?;
        events.extend(foreground_runs(m));
    }
    events.sort_unstable();
    let mut runs = RunBuilder::new();
    let mut cursor = 0u64;
    for (s, l) in events {
        let e = s + l;
        if e <= cursor {
            continue;
        }
        let s = s.max(cursor);
        runs.push(false, (s - cursor) as u32);
        runs.push(true, (e - s) as u32);
        cursor = e;
    }
    runs.push(false, (first.pixel_count() - cursor) as u32);
    runs.finish(first.height(), first.width()).map(Some)
}

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use geoalign::linker::{link_series_detailed, LinkConfig, Linking};
use geoalign::mask::{rle_decode, rle_encode, PixelGrid};
use geoalign::model::{
    Category, DatasetManifest, Detection, Fraction, FrameDetections, InstanceTrack, RleMask,
    VideoRecord,
};
use rand::Rng;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

/// Dense row-major bitmap used as an oracle; independent of the RLE code.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub h: usize,
    pub w: usize,
    pub px: Vec<bool>,
}

impl Dense {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            px: vec![false; h * w],
        }
    }

    pub fn random<R: Rng>(rng: &mut R, h: usize, w: usize, density: f64) -> Self {
        Self {
            h,
            w,
            px: (0..h * w).map(|_| rng.gen_bool(density)).collect(),
        }
    }

    pub fn rect(h: usize, w: usize, top: usize, left: usize, rows: usize, cols: usize) -> Self {
        let mut d = Self::zeros(h, w);
        for r in top..(top + rows).min(h) {
            for c in left..(left + cols).min(w) {
                d.px[r * w + c] = true;
            }
        }
        d
    }

    pub fn count(&self) -> u64 {
        self.px.iter().filter(|&&b| b).count() as u64
    }

    pub fn and_count(&self, other: &Self) -> u64 {
        self.px
            .iter()
            .zip(&other.px)
            .filter(|(a, b)| **a && **b)
            .count() as u64
    }

    pub fn or_count(&self, other: &Self) -> u64 {
        self.px
            .iter()
            .zip(&other.px)
            .filter(|(a, b)| **a || **b)
            .count() as u64
    }

    /// Column-major run lengths written out by hand, starting with zeros.
    pub fn counts_by_hand(&self) -> Vec<u32> {
        let mut counts = vec![0u32];
        let mut current = false;
        for c in 0..self.w {
            for r in 0..self.h {
                let v = self.px[r * self.w + c];
                if v != current {
                    counts.push(0);
                    current = v;
                }
                *counts.last_mut().unwrap() += 1;
            }
        }
        counts
    }

    pub fn to_grid(&self) -> PixelGrid {
        PixelGrid::from_rows(self.h as u32, self.w as u32, self.px.clone()).unwrap()
    }

    pub fn to_mask(&self) -> RleMask {
        rle_encode(&self.to_grid()).unwrap()
    }

    pub fn from_mask(mask: &RleMask) -> Self {
        let g = rle_decode(mask);
        let mut d = Self::zeros(mask.height() as usize, mask.width() as usize);
        for (r, c) in g.ones() {
            d.px[r as usize * d.w + c as usize] = true;
        }
        d
    }
}

/// Spatio-temporal IoU by dense pixel counting, as an exact fraction.
pub fn dense_track_iou(p: &[Option<Dense>], g: &[Option<Dense>]) -> (u64, u64) {
    let mut inter = 0;
    let mut union = 0;
    for (a, b) in p.iter().zip(g) {
        match (a, b) {
            (Some(a), Some(b)) => {
                inter += a.and_count(b);
                union += a.or_count(b);
            }
            (Some(a), None) | (None, Some(a)) => union += a.count(),
            (None, None) => {}
        }
    }
    (inter, union)
}

pub fn track_from_dense(
    track_id: u64,
    video_id: u64,
    frames: &[Option<Dense>],
    score: Option<f64>,
) -> InstanceTrack {
    let mut t = InstanceTrack::new(
        track_id,
        video_id,
        1,
        frames
            .iter()
            .map(|f| f.as_ref().map(Dense::to_mask))
            .collect(),
    );
    t.score = score;
    t
}

pub fn det(mask: RleMask, score: f64) -> Detection {
    Detection {
        mask,
        score,
        category_id: 1,
    }
}

pub fn video(video_id: u64, frames: usize, h: u32, w: u32) -> VideoRecord {
    VideoRecord::new(
        video_id,
        h,
        w,
        (0..frames)
            .map(|t| format!("v{video_id}/{t:02}.png"))
            .collect(),
    )
}

/// Three frames on a 10x10 grid. Entity A sits at the top-left in every frame
/// (drifting one column per frame); entity B sits bottom-right in frames 0
/// and 1 only.
pub fn three_frame_fixture() -> (Vec<FrameDetections>, VideoRecord) {
    let a0 = Dense::rect(10, 10, 0, 0, 3, 3);
    let a1 = Dense::rect(10, 10, 0, 1, 3, 3);
    let a2 = Dense::rect(10, 10, 0, 2, 3, 3);
    let b0 = Dense::rect(10, 10, 6, 6, 3, 3);
    let b1 = Dense::rect(10, 10, 6, 6, 3, 4);
    let frames = vec![
        FrameDetections::new(0, vec![det(a0.to_mask(), 0.9), det(b0.to_mask(), 0.8)]),
        FrameDetections::new(1, vec![det(b1.to_mask(), 0.7), det(a1.to_mask(), 0.9)]),
        FrameDetections::new(2, vec![det(a2.to_mask(), 0.6)]),
    ];
    (frames, video(1, 3, 10, 10))
}

/// Random detections: up to `max_per_frame` rectangles per frame, some of
/// them jittered copies of the previous frame so links actually occur.
pub fn random_series<R: Rng>(
    rng: &mut R,
    frames: usize,
    max_per_frame: usize,
    h: usize,
    w: usize,
) -> Vec<FrameDetections> {
    let mut out: Vec<FrameDetections> = Vec::new();
    let mut prev: Vec<(usize, usize, usize, usize)> = Vec::new();
    for t in 0..frames {
        let n = rng.gen_range(0..=max_per_frame);
        let mut rects = Vec::new();
        for i in 0..n {
            let rect = if i < prev.len() && rng.gen_bool(0.6) {
                let (r, c, rows, cols) = prev[i];
                let dr = rng.gen_range(0..=1);
                let dc = rng.gen_range(0..=1);
                ((r + dr).min(h - 1), (c + dc).min(w - 1), rows, cols)
            } else {
                (
                    rng.gen_range(0..h),
                    rng.gen_range(0..w),
                    rng.gen_range(1..=5),
                    rng.gen_range(1..=5),
                )
            };
            rects.push(rect);
        }
        let dets = rects
            .iter()
            .map(|&(r, c, rows, cols)| {
                let mask = Dense::rect(h, w, r, c, rows, cols).to_mask();
                det(mask, (rng.gen_range(0..=100) as f64) / 100.0)
            })
            .collect();
        out.push(FrameDetections::new(t, dets));
        prev = rects;
    }
    out
}

/// Random valid manifest: 1-3 videos, T in 1..=4, a few non-empty tracks each.
pub fn random_manifest<R: Rng>(rng: &mut R) -> DatasetManifest {
    let mut m = DatasetManifest::new(vec![Category::building()]);
    let mut next_track = 1;
    for vid in 1..=rng.gen_range(1..=3u64) {
        let t_count = rng.gen_range(1..=4);
        let (h, w) = (rng.gen_range(4..=24), rng.gen_range(4..=24));
        m.videos.push(video(vid, t_count, h as u32, w as u32));
        for _ in 0..rng.gen_range(1..=5) {
            let mut frames: Vec<Option<Dense>> = (0..t_count)
                .map(|_| {
                    rng.gen_bool(0.7).then(|| {
                        Dense::rect(
                            h,
                            w,
                            rng.gen_range(0..h),
                            rng.gen_range(0..w),
                            rng.gen_range(1..=6),
                            rng.gen_range(1..=6),
                        )
                    })
                })
                .collect();
            if frames.iter().all(Option::is_none) {
                frames[0] = Some(Dense::rect(h, w, 0, 0, 1, 1));
            }
            m.annotations
                .push(track_from_dense(next_track, vid, &frames, None));
            next_track += 1;
        }
    }
    m
}

/// Writes an RGB PNG tile filled with one gray level.
pub fn write_gray_tile(path: &Path, h: u32, w: u32, level: u8) {
    let img = image::RgbImage::from_pixel(w, h, image::Rgb([level, level, level]));
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).unwrap();
    }
    img.save(path).unwrap();
}

/// Dense-oracle IoU matrix between two track lists, as (intersection, union).
pub fn dense_iou_matrix(
    preds: &[Vec<Option<Dense>>],
    gts: &[Vec<Option<Dense>>],
) -> Vec<Vec<(u64, u64)>> {
    preds
        .iter()
        .map(|p| gts.iter().map(|g| dense_track_iou(p, g)).collect())
        .collect()
}

/// `inter / union` compared with `num / den`; degenerate unions never pass.
pub fn iou_passes(iou: (u64, u64), num: u64, den: u64, inclusive: bool) -> bool {
    let (i, u) = iou;
    if u == 0 {
        return false;
    }
    let lhs = i as u128 * den as u128;
    let rhs = num as u128 * u as u128;
    if inclusive {
        lhs >= rhs
    } else {
        lhs > rhs
    }
}

/// Score-ordered greedy matching written independently of the library:
/// `rank` lists prediction indices best first; each takes the still-free
/// ground truth with the largest passing IoU (first index on ties).
pub fn oracle_greedy(
    rank: &[usize],
    ious: &[Vec<(u64, u64)>],
    gt_count: usize,
    pass: impl Fn((u64, u64)) -> bool,
) -> Vec<bool> {
    let mut free = vec![true; gt_count];
    let mut tp = vec![false; ious.len()];
    for &p in rank {
        let mut best: Option<usize> = None;
        for g in 0..gt_count {
            if !free[g] || !pass(ious[p][g]) {
                continue;
            }
            let (i, u) = ious[p][g];
            best = match best {
                Some(b) if (ious[p][b].0 as f64 / ious[p][b].1 as f64) >= i as f64 / u as f64 => {
                    Some(b)
                }
                _ => Some(g),
            };
        }
        if let Some(g) = best {
            free[g] = false;
            tp[p] = true;
        }
    }
    tp
}

/// Area under the precision envelope, integrated exactly over every recall
/// step (no sampling), in percent. `hits` is in rank order.
pub fn oracle_pr_integral(hits: &[bool], npos: usize) -> f64 {
    if npos == 0 {
        return 0.0;
    }
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for &h in hits {
        if h {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((tp as f64 / npos as f64, tp as f64 / (tp + fp) as f64, h));
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(recall, _, hit)) in points.iter().enumerate() {
        if !hit {
            continue;
        }
        let envelope = points[i..].iter().map(|p| p.1).fold(0.0, f64::max);
        area += (recall - prev_recall) * envelope;
        prev_recall = recall;
    }
    100.0 * area
}

/// Largest one-to-one assignment size over passing pairs, by trying every
/// injection of predictions into ground truths (sizes up to 6).
pub fn optimal_matches(pass: &[Vec<bool>], gt_count: usize) -> usize {
    fn go(p: usize, pass: &[Vec<bool>], used: &mut Vec<bool>) -> usize {
        if p == pass.len() {
            return 0;
        }
        let mut best = go(p + 1, pass, used);
        for g in 0..used.len() {
            if pass[p][g] && !used[g] {
                used[g] = true;
                best = best.max(1 + go(p + 1, pass, used));
                used[g] = false;
            }
        }
        best
    }
    go(0, pass, &mut vec![false; gt_count])
}

/// A single-video, single-category evaluation fixture built from rectangles
/// that overlap in varied amounts.
pub struct EvalFixture {
    pub preds: Vec<Vec<Option<Dense>>>,
    pub scores: Vec<f64>,
    pub gts: Vec<Vec<Option<Dense>>>,
}

impl EvalFixture {
    pub fn random<R: Rng>(rng: &mut R, max_tracks: usize) -> Self {
        let t = rng.gen_range(1..=3);
        let (h, w) = (12, 12);
        let rand_track = |rng: &mut R| -> Vec<Option<Dense>> {
            let (r, c) = (rng.gen_range(0..8), rng.gen_range(0..8));
            let (rows, cols) = (rng.gen_range(2..=5), rng.gen_range(2..=5));
            (0..t)
                .map(|_| Some(Dense::rect(h, w, r, c, rows, cols)))
                .collect()
        };
        let gts: Vec<_> = (0..rng.gen_range(1..=max_tracks))
            .map(|_| rand_track(rng))
            .collect();
        let n_pred = rng.gen_range(1..=max_tracks);
        let mut preds = Vec::new();
        for _ in 0..n_pred {
            if rng.gen_bool(0.6) {
                // perturbed copy of a ground truth
                let g = &gts[rng.gen_range(0..gts.len())];
                let dr = rng.gen_range(0..=2);
                let dc = rng.gen_range(0..=2);
                preds.push(
                    g.iter()
                        .map(|f| {
                            f.as_ref().map(|d| {
                                let mut out = Dense::zeros(h, w);
                                for r in 0..h {
                                    for c in 0..w {
                                        if d.px[r * w + c] && r + dr < h && c + dc < w {
                                            out.px[(r + dr) * w + c + dc] = true;
                                        }
                                    }
                                }
                                if out.count() == 0 {
                                    out.px[0] = true;
                                }
                                out
                            })
                        })
                        .collect(),
                );
            } else {
                preds.push(rand_track(rng));
            }
        }
        // distinct scores so rank order is unambiguous
        let mut scores: Vec<f64> = (1..=n_pred)
            .map(|k| k as f64 / (n_pred + 1) as f64)
            .collect();
        for i in (1..scores.len()).rev() {
            let j = rng.gen_range(0..=i);
            scores.swap(i, j);
        }
        Self { preds, scores, gts }
    }

    pub fn frames(&self) -> usize {
        self.gts[0].len()
    }

    pub fn pred_tracks(&self) -> Vec<InstanceTrack> {
        self.preds
            .iter()
            .zip(&self.scores)
            .enumerate()
            .map(|(i, (p, &s))| track_from_dense(i as u64 + 1, 1, p, Some(s)))
            .collect()
    }

    pub fn gt_tracks(&self) -> Vec<InstanceTrack> {
        self.gts
            .iter()
            .enumerate()
            .map(|(i, g)| track_from_dense(i as u64 + 1, 1, g, None))
            .collect()
    }

    /// Prediction indices by descending score.
    pub fn rank(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.preds.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].partial_cmp(&self.scores[a]).unwrap());
        order
    }
}

/// 101-point interpolated AP by brute force, in percent: for every recall
/// level `k / 100` scan all ranks for the best precision at recall at or
/// above it.
pub fn oracle_101_point(hits: &[bool], npos: usize) -> f64 {
    if npos == 0 {
        return 0.0;
    }
    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for &h in hits {
        if h {
            tp += 1;
        } else {
            fp += 1;
        }
        curve.push((tp as f64 / npos as f64, tp as f64 / (tp + fp) as f64));
    }
    let total: f64 = (0..=100)
        .map(|k| {
            let level = k as f64 / 100.0;
            curve
                .iter()
                .filter(|(r, _)| *r >= level)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum();
    100.0 * total / 101.0
}

impl EvalFixture {
    /// Rank-ordered hit flags under inclusive matching at `num / den`.
    pub fn oracle_hits(&self, num: u64, den: u64) -> Vec<bool> {
        let ious = dense_iou_matrix(&self.preds, &self.gts);
        let rank = self.rank();
        let tp = oracle_greedy(&rank, &ious, self.gts.len(), |iou| {
            iou_passes(iou, num, den, true)
        });
        rank.iter().map(|&p| tp[p]).collect()
    }
}

pub const SYNTH_TILE: u32 = 64;

/// Ten tiles with single-image detection files. Tiles 2, 5 and 8 keep no
/// pseudo-mask: one has no detections, one only low-scoring ones, one only
/// empty masks. Returns `(detections_dir, images_dir)`.
pub fn write_synth_fixture(root: &Path) -> (PathBuf, PathBuf) {
    use geoalign::io::{write_detections, DetectionFile, WriteOptions};
    let det_dir = root.join("detections");
    let img_dir = root.join("images");
    std::fs::create_dir_all(&det_dir).unwrap();
    let n = SYNTH_TILE as usize;
    for i in 0..10usize {
        let name = format!("tile_{i:02}.png");
        write_gray_tile(
            &img_dir.join(&name),
            SYNTH_TILE,
            SYNTH_TILE,
            40 + 10 * i as u8,
        );
        let detections = match i {
            2 => vec![],
            5 => vec![
                det(Dense::rect(n, n, 4, 4, 8, 8).to_mask(), 0.2),
                det(Dense::rect(n, n, 30, 30, 6, 6).to_mask(), 0.49),
            ],
            8 => vec![det(RleMask::empty(SYNTH_TILE, SYNTH_TILE).unwrap(), 0.9)],
            _ => (0..=i % 4)
                .map(|k| {
                    let top = 6 + 14 * k;
                    let left = 3 + 5 * i;
                    det(
                        Dense::rect(n, n, top, left, 6 + k, 5).to_mask(),
                        0.6 + 0.05 * k as f64,
                    )
                })
                .collect(),
        };
        let mut file = DetectionFile::new(i as u64 + 1, vec![FrameDetections::new(0, detections)]);
        file.height = Some(SYNTH_TILE);
        file.width = Some(SYNTH_TILE);
        file.file_names = vec![name];
        write_detections(
            &file,
            det_dir.join(format!("tile_{i:02}.json")),
            WriteOptions::default(),
        )
        .unwrap();
    }
    (det_dir, img_dir)
}

/// Dense check of "intersection >= num/den of the smaller area".
pub fn within_oracle(a: &Dense, b: &Dense, num: u64, den: u64) -> bool {
    let smaller = a.count().min(b.count());
    smaller > 0 && a.and_count(b) * den >= num * smaller
}

/// Consecutive-frame links implied by a linking, as (frame, det, det').
pub fn links_of(linking: &Linking) -> BTreeSet<(usize, usize, usize)> {
    linking
        .members
        .iter()
        .flat_map(|m| m.windows(2).map(|w| (w[0].0, w[0].1, w[1].1)))
        .collect()
}

/// Every one-to-one matching between two frames that uses only valid pairs
/// and cannot be extended by another valid pair.
pub fn maximal_matchings(valid: &[(usize, usize)]) -> Vec<BTreeSet<(usize, usize)>> {
    let mut out = Vec::new();
    for bits in 0u32..(1 << valid.len()) {
        let chosen: Vec<(usize, usize)> = (0..valid.len())
            .filter(|i| bits & (1 << i) != 0)
            .map(|i| valid[i])
            .collect();
        let lefts: BTreeSet<_> = chosen.iter().map(|p| p.0).collect();
        let rights: BTreeSet<_> = chosen.iter().map(|p| p.1).collect();
        if lefts.len() != chosen.len() || rights.len() != chosen.len() {
            continue;
        }
        let extendable = valid
            .iter()
            .any(|p| !lefts.contains(&p.0) && !rights.contains(&p.1));
        if !extendable {
            out.push(chosen.into_iter().collect());
        }
    }
    out
}

/// Every chaining consistent with the relation: per consecutive frame pair,
/// each maximal one-to-one set of links whose pairs satisfy the dense
/// containment check at `num / den`.
pub fn consistent_chainings(
    frames: &[FrameDetections],
    num: u64,
    den: u64,
) -> Vec<BTreeSet<(usize, usize, usize)>> {
    let dense: Vec<Vec<Dense>> = frames
        .iter()
        .map(|f| {
            f.detections
                .iter()
                .map(|d| Dense::from_mask(&d.mask))
                .collect()
        })
        .collect();
    let mut chainings: Vec<BTreeSet<(usize, usize, usize)>> = vec![BTreeSet::new()];
    for t in 0..frames.len().saturating_sub(1) {
        let mut valid = Vec::new();
        for (i, a) in dense[t].iter().enumerate() {
            for (j, b) in dense[t + 1].iter().enumerate() {
                if within_oracle(a, b, num, den) {
                    valid.push((i, j));
                }
            }
        }
        let options = maximal_matchings(&valid);
        chainings = chainings
            .iter()
            .flat_map(|c| {
                options.iter().map(move |m| {
                    let mut c = c.clone();
                    c.extend(m.iter().map(|&(i, j)| (t, i, j)));
                    c
                })
            })
            .collect();
    }
    chainings
}

pub fn check_link_properties(frames: &[FrameDetections], config: &LinkConfig) {
    let video = video(1, frames.len(), 16, 16);
    let linking = link_series_detailed(frames, &video, config).unwrap();

    // Partition over kept detections.
    let kept: BTreeSet<(usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(t, f)| {
            f.detections
                .iter()
                .enumerate()
                .filter(|(_, d)| d.score >= config.score_threshold && !d.mask.is_empty())
                .map(move |(i, _)| (t, i))
        })
        .collect();
    let members: Vec<(usize, usize)> = linking.members.iter().flatten().copied().collect();
    let member_set: BTreeSet<_> = members.iter().copied().collect();
    assert_eq!(members.len(), member_set.len(), "detection used twice");
    assert_eq!(member_set, kept, "partition violated");

    // Track masks agree with member detections.
    for (track, m) in linking.tracks.iter().zip(&linking.members) {
        for &(t, i) in m {
            assert_eq!(track.masks[t].as_ref(), Some(&frames[t].detections[i].mask));
        }
        assert_eq!(track.masks.iter().filter(|x| x.is_some()).count(), m.len());
    }

    // Per-frame id uniqueness and contiguous chains.
    for t in 0..frames.len() {
        let ids: Vec<u64> = linking
            .tracks
            .iter()
            .filter(|tr| tr.masks[t].is_some())
            .map(|tr| tr.track_id)
            .collect();
        let unique: BTreeSet<_> = ids.iter().collect();
        assert_eq!(ids.len(), unique.len());
    }
    let ids: BTreeSet<u64> = linking.tracks.iter().map(|t| t.track_id).collect();
    assert_eq!(ids.len(), linking.tracks.len());
    for m in &linking.members {
        for w in m.windows(2) {
            assert_eq!(w[1].0, w[0].0 + 1, "chains only link consecutive frames");
            let a = Dense::from_mask(&frames[w[0].0].detections[w[0].1].mask);
            let b = Dense::from_mask(&frames[w[1].0].detections[w[1].1].mask);
            let f = config.containment_threshold;
            assert!(within_oracle(&a, &b, f.numerator(), f.denominator()));
        }
    }

    // Determinism, including across thread pools.
    let again = link_series_detailed(frames, &video, config).unwrap();
    assert_eq!(again, linking);
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| link_series_detailed(frames, &video, config).unwrap());
    assert_eq!(single, linking);

    // Raising the threshold never adds accepted matches.
    let stricter = LinkConfig::new(Fraction::new(4, 5).unwrap(), config.score_threshold).unwrap();
    let strict_links = links_of(&link_series_detailed(frames, &video, &stricter).unwrap());
    let links = links_of(&linking);
    assert!(strict_links.len() <= links.len());
    assert!(strict_links.is_subset(&links));
}

//! Two-step baseline linking: match detections between each pair of
//! consecutive frames with the "approximately within" relation, then chain the
//! matches into tracks.
//!
//! Two masks are approximately within each other when their overlap covers at
//! least `containment_threshold` of the smaller mask's area (0.6 by default,
//! boundary inclusive). Conflicts are resolved one-to-one, greedily by
//! containment ratio. A chain that finds no successor in the next frame ends
//! there; entities are never re-identified across a gap, which is why this
//! baseline tends to fragment long series.

use std::cmp::Ordering;

use rayon::prelude::*;
use thiserror::Error;

use crate::mask::{intersection_area, merge_union};
use crate::model::{
    Detection, Fraction, FractionError, FrameDetections, InstanceTrack, MaskError, RleMask,
    TrackId, VideoRecord, UNASSIGNED_TRACK_ID,
};

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("{frames} frames of detections for a {expected}-frame video")]
    FrameCount { frames: usize, expected: usize },
    #[error("detections at position {position} are labelled frame {frame_index}")]
    FrameIndex { position: usize, frame_index: usize },
    #[error("frame {frame}: {source}")]
    Mask {
        frame: usize,
        #[source]
        source: MaskError,
    },
    #[error("invalid link configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkConfig {
    pub containment_threshold: Fraction,
    /// Detections scoring below this are dropped before linking.
    pub score_threshold: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            containment_threshold: Fraction::new(3, 5).expect("valid"),
            score_threshold: 0.5,
        }
    }
}

impl LinkConfig {
    pub fn new(containment_threshold: Fraction, score_threshold: f64) -> Result<Self, LinkError> {
        if !(0.0..=1.0).contains(&score_threshold) {
            return Err(LinkError::Config(format!(
                "score threshold {score_threshold} outside [0, 1]"
            )));
        }
        Ok(Self {
            containment_threshold,
            score_threshold,
        })
    }

    pub fn from_f64(containment_threshold: f64, score_threshold: f64) -> Result<Self, LinkError> {
        let c = Fraction::from_f64(containment_threshold)
            .map_err(|e: FractionError| LinkError::Config(format!("containment threshold: {e}")))?;
        Self::new(c, score_threshold)
    }
}

/// Overlap of two masks relative to the smaller one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Containment {
    pub intersection: u64,
    pub smaller_area: u64,
}

impl Containment {
    pub fn between(a: &RleMask, b: &RleMask) -> Result<Self, MaskError> {
        Ok(Self {
            intersection: intersection_area(Some(a), Some(b))?,
            smaller_area: a.area().min(b.area()),
        })
    }

    pub fn ratio(&self) -> f64 {
        if self.smaller_area == 0 {
            0.0
        } else {
            self.intersection as f64 / self.smaller_area as f64
        }
    }

    pub fn satisfies(&self, threshold: Fraction) -> bool {
        self.smaller_area > 0 && threshold.is_met_by(self.intersection, self.smaller_area)
    }

    /// Exact comparison of the two ratios.
    fn cmp_ratio(&self, other: &Self) -> Ordering {
        let lhs = u128::from(self.intersection) * u128::from(other.smaller_area);
        let rhs = u128::from(other.intersection) * u128::from(self.smaller_area);
        lhs.cmp(&rhs)
    }
}

/// True when the overlap is at least `threshold` of the smaller mask. An empty
/// mask is never within anything.
pub fn approximately_within(
    a: &RleMask,
    b: &RleMask,
    threshold: Fraction,
) -> Result<bool, MaskError> {
    Ok(Containment::between(a, b)?.satisfies(threshold))
}

/// One-to-one matches `(index in frame_t, index in frame_t1)`, sorted by the
/// first index. Only detections of the same category are compared.
pub fn match_consecutive(
    frame_t: &FrameDetections,
    frame_t1: &FrameDetections,
    config: &LinkConfig,
) -> Result<Vec<(usize, usize)>, LinkError> {
    let mut candidates = Vec::new();
    for (i, a) in frame_t.detections.iter().enumerate() {
        for (j, b) in frame_t1.detections.iter().enumerate() {
            if a.category_id != b.category_id {
                continue;
            }
            let c = Containment::between(&a.mask, &b.mask).map_err(|source| LinkError::Mask {
                frame: frame_t1.frame_index,
                source,
            })?;
            if c.satisfies(config.containment_threshold) {
                candidates.push((c, i, j));
            }
        }
    }
    candidates.sort_by(|(ca, ia, ja), (cb, ib, jb)| {
        cb.cmp_ratio(ca)
            .then(cb.intersection.cmp(&ca.intersection))
            .then((ia, ja).cmp(&(ib, jb)))
    });

    let mut used_t = vec![false; frame_t.detections.len()];
    let mut used_t1 = vec![false; frame_t1.detections.len()];
    let mut matches = Vec::new();
    for (_, i, j) in candidates {
        if !used_t[i] && !used_t1[j] {
            used_t[i] = true;
            used_t1[j] = true;
            matches.push((i, j));
        }
    }
    matches.sort_unstable();
    Ok(matches)
}

/// Tracks plus, for each track, the `(frame, input detection index)` pairs it
/// was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Linking {
    pub tracks: Vec<InstanceTrack>,
    pub members: Vec<Vec<(usize, usize)>>,
}

fn keep(det: &Detection, config: &LinkConfig) -> bool {
    det.score >= config.score_threshold && !det.mask.is_empty()
}

pub fn link_series(
    frames: &[FrameDetections],
    video: &VideoRecord,
    config: &LinkConfig,
) -> Result<Vec<InstanceTrack>, LinkError> {
    link_series_detailed(frames, video, config).map(|l| l.tracks)
}

/// Links every kept detection (score at or above the threshold, non-empty
/// mask) into exactly one track. Track ids count up from 1 in order of first
/// appearance; a track's score is the mean of its detections' scores.
pub fn link_series_detailed(
    frames: &[FrameDetections],
    video: &VideoRecord,
    config: &LinkConfig,
) -> Result<Linking, LinkError> {
    if frames.len() != video.frame_count {
        return Err(LinkError::FrameCount {
            frames: frames.len(),
            expected: video.frame_count,
        });
    }
    let mut kept_index: Vec<Vec<usize>> = Vec::with_capacity(frames.len());
    let mut filtered: Vec<FrameDetections> = Vec::with_capacity(frames.len());
    for (position, frame) in frames.iter().enumerate() {
        if frame.frame_index != position {
            return Err(LinkError::FrameIndex {
                position,
                frame_index: frame.frame_index,
            });
        }
        if let Some(det) = frame
            .detections
            .iter()
            .find(|d| d.mask.size() != (video.height, video.width))
        {
            return Err(LinkError::Mask {
                frame: position,
                source: MaskError::DimensionMismatch {
                    left_h: det.mask.height(),
                    left_w: det.mask.width(),
                    right_h: video.height,
                    right_w: video.width,
                },
            });
        }
        let (idx, dets): (Vec<usize>, Vec<Detection>) = frame
            .detections
            .iter()
            .enumerate()
            .filter(|(_, d)| keep(d, config))
            .map(|(i, d)| (i, d.clone()))
            .unzip();
        kept_index.push(idx);
        filtered.push(FrameDetections::new(position, dets));
    }

    let pair_matches: Vec<Vec<(usize, usize)>> = filtered
        .par_windows(2)
        .map(|w| match_consecutive(&w[0], &w[1], config))
        .collect::<Result<_, _>>()?;

    // chain: owner[t][k] = track slot of kept detection k in frame t
    let mut members: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut owner_prev: Vec<usize> = Vec::new();
    for (t, frame) in filtered.iter().enumerate() {
        let mut owner = vec![usize::MAX; frame.detections.len()];
        if t > 0 {
            for &(i, j) in &pair_matches[t - 1] {
                owner[j] = owner_prev[i];
            }
        }
        for (k, slot) in owner.iter_mut().enumerate() {
            if *slot == usize::MAX {
                *slot = members.len();
                members.push(Vec::new());
            }
            members[*slot].push((t, k));
        }
        owner_prev = owner;
    }

    let mut tracks = Vec::with_capacity(members.len());
    for (n, member) in members.iter_mut().enumerate() {
        let mut masks: Vec<Option<RleMask>> = vec![None; video.frame_count];
        let mut score_sum = 0.0;
        let mut category = None;
        for &(t, k) in member.iter() {
            let det = &filtered[t].detections[k];
            masks[t] = Some(det.mask.clone());
            score_sum += det.score;
            category.get_or_insert(det.category_id);
        }
        let score = score_sum / member.len() as f64;
        let mut track = InstanceTrack::new(
            n as TrackId + 1,
            video.video_id,
            category.expect("tracks have at least one member"),
            masks,
        );
        track.score = Some(score.clamp(0.0, 1.0));
        tracks.push(track);
        for (t, k) in member.iter_mut() {
            *k = kept_index[*t][*k];
        }
    }
    debug_assert!(tracks.iter().all(|t| t.track_id != UNASSIGNED_TRACK_ID));
    Ok(Linking { tracks, members })
}

/// Union of all of a track's frame masks, for quick footprint summaries.
pub fn footprint(track: &InstanceTrack) -> Result<Option<RleMask>, MaskError> {
    let masks: Vec<&RleMask> = track.masks.iter().flatten().collect();
    merge_union(&masks)
}

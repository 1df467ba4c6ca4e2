//! Scoring predicted tracks against ground truth.
//!
//! Track overlap is the spatio-temporal IoU: intersections and unions summed
//! over all frames, then divided. On top of it:
//!
//! * precision / recall / F1 from one greedy matching at IoU 0.5. A pair
//!   counts only when its IoU is strictly greater than 0.5 by default
//!   ([`MatchRule::Exceeds`]); [`MatchRule::AtLeast`] switches to `>=`.
//! * AP at IoU thresholds 0.50, 0.55, ..., 0.95, each with `>=` as in the
//!   COCO / YouTube-VIS evaluators, 101-point interpolated and reported in
//!   percent.
//!
//! Both matchings are greedy: predictions in descending score order (ties by
//! track id) each take the still-unmatched ground truth of the same category
//! with the highest IoU.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::mask::{spatio_temporal_iou, TrackIou};
use crate::model::{
    CategoryId, DatasetManifest, Fraction, InstanceTrack, MaskError, TrackId, VideoId,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction {track_id} in video {video_id} has no score")]
    MissingScore {
        video_id: VideoId,
        track_id: TrackId,
    },
    #[error("track {track_id} belongs to video {found}, expected video {expected}")]
    CrossVideo {
        track_id: TrackId,
        found: VideoId,
        expected: VideoId,
    },
    #[error("video sets differ: missing from predictions {missing_in_predictions:?}, missing from ground truth {missing_in_ground_truth:?}")]
    VideoMismatch {
        missing_in_predictions: Vec<VideoId>,
        missing_in_ground_truth: Vec<VideoId>,
    },
    #[error("video {video_id} differs in frame count or size between the two manifests")]
    VideoShape { video_id: VideoId },
    #[error("tracks {pred} and {gt}: {source}")]
    Mask {
        pred: TrackId,
        gt: TrackId,
        #[source]
        source: MaskError,
    },
}

/// How an IoU is compared with the F1 matching threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    /// `iou > threshold`
    #[default]
    Exceeds,
    /// `iou >= threshold`
    AtLeast,
}

impl MatchRule {
    pub fn accepts(self, iou: &TrackIou, threshold: Fraction) -> bool {
        match self {
            MatchRule::Exceeds => iou.exceeds(threshold),
            MatchRule::AtLeast => iou.meets(threshold),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrackMatch {
    pub pred: TrackId,
    pub gt: TrackId,
    pub iou: f64,
    #[serde(skip)]
    pub overlap: TrackIou,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MatchResult {
    pub matches: Vec<TrackMatch>,
    pub unmatched_preds: Vec<TrackId>,
    pub unmatched_gts: Vec<TrackId>,
}

impl MatchResult {
    pub fn counts(&self) -> Counts {
        Counts {
            tp: self.matches.len(),
            fp: self.unmatched_preds.len(),
            fn_: self.unmatched_gts.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, rhs: Self) {
        self.tp += rhs.tp;
        self.fp += rhs.fp;
        self.fn_ += rhs.fn_;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1, each 0 when its denominator is 0.
pub fn precision_recall_f1(counts: Counts) -> PrecisionRecall {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let recall = ratio(counts.tp, counts.tp + counts.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    PrecisionRecall {
        precision,
        recall,
        f1,
    }
}

fn check_same_video(tracks: &[&InstanceTrack], video_id: VideoId) -> Result<(), EvalError> {
    match tracks.iter().find(|t| t.video_id != video_id) {
        Some(t) => Err(EvalError::CrossVideo {
            track_id: t.track_id,
            found: t.video_id,
            expected: video_id,
        }),
        None => Ok(()),
    }
}

/// Prediction indices in matching order: score descending, then track id.
fn score_order(preds: &[&InstanceTrack]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .effective_score()
            .total_cmp(&preds[a].effective_score())
            .then(preds[a].track_id.cmp(&preds[b].track_id))
    });
    order
}

/// IoU of every (prediction, ground truth) pair; `None` across categories.
fn iou_matrix(
    preds: &[&InstanceTrack],
    gts: &[&InstanceTrack],
) -> Result<Vec<Vec<Option<TrackIou>>>, EvalError> {
    preds
        .iter()
        .map(|p| {
            gts.iter()
                .map(|g| {
                    if p.category_id != g.category_id {
                        return Ok(None);
                    }
                    spatio_temporal_iou(p, g)
                        .map(Some)
                        .map_err(|source| EvalError::Mask {
                            pred: p.track_id,
                            gt: g.track_id,
                            source,
                        })
                })
                .collect()
        })
        .collect()
}

/// Greedy matching over a precomputed IoU matrix. Returns, per prediction in
/// `order`, the matched ground-truth index.
fn greedy(
    order: &[usize],
    ious: &[Vec<Option<TrackIou>>],
    gt_count: usize,
    accept: impl Fn(&TrackIou) -> bool,
) -> Vec<Option<usize>> {
    let mut taken = vec![false; gt_count];
    let mut assigned = vec![None; ious.len()];
    for &p in order {
        let mut best: Option<(usize, TrackIou)> = None;
        for (g, iou) in ious[p].iter().enumerate() {
            let Some(iou) = iou else { continue };
            if taken[g] || !accept(iou) {
                continue;
            }
            let better = match &best {
                None => true,
                Some((_, b)) => {
                    u128::from(iou.intersection) * u128::from(b.union)
                        > u128::from(b.intersection) * u128::from(iou.union)
                }
            };
            if better {
                best = Some((g, *iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            assigned[p] = Some(g);
        }
    }
    assigned
}

/// Greedy one-to-one matching of one video's predictions to its ground truth.
pub fn match_tracks(
    preds: &[&InstanceTrack],
    gts: &[&InstanceTrack],
    threshold: Fraction,
    rule: MatchRule,
) -> Result<MatchResult, EvalError> {
    if let Some(first) = preds.first().or(gts.first()) {
        check_same_video(preds, first.video_id)?;
        check_same_video(gts, first.video_id)?;
    }
    let ious = iou_matrix(preds, gts)?;
    let order = score_order(preds);
    let assigned = greedy(&order, &ious, gts.len(), |iou| rule.accepts(iou, threshold));
    Ok(collect_matches(preds, gts, &order, &assigned, &ious))
}

fn collect_matches(
    preds: &[&InstanceTrack],
    gts: &[&InstanceTrack],
    order: &[usize],
    assigned: &[Option<usize>],
    ious: &[Vec<Option<TrackIou>>],
) -> MatchResult {
    let mut result = MatchResult::default();
    let mut gt_used = vec![false; gts.len()];
    for &p in order {
        match assigned[p] {
            Some(g) => {
                gt_used[g] = true;
                let overlap = ious[p][g].expect("matched pairs share a category");
                result.matches.push(TrackMatch {
                    pred: preds[p].track_id,
                    gt: gts[g].track_id,
                    iou: overlap.value(),
                    overlap,
                });
            }
            None => result.unmatched_preds.push(preds[p].track_id),
        }
    }
    result.unmatched_gts = gts
        .iter()
        .zip(&gt_used)
        .filter(|(_, used)| !**used)
        .map(|(g, _)| g.track_id)
        .collect();
    result
}

/// The ten AP thresholds 0.50, 0.55, ..., 0.95.
pub fn default_ap_thresholds() -> Vec<Fraction> {
    (50..=95)
        .step_by(5)
        .map(|p| Fraction::new(p, 100).expect("in range"))
        .collect()
}

/// Number of recall sample points used for interpolation.
pub const RECALL_POINTS: u64 = 101;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApTable {
    pub thresholds: Vec<f64>,
    /// AP at each threshold, in percent.
    pub per_threshold: Vec<f64>,
    /// Mean over thresholds, in percent.
    pub ap: f64,
}

impl ApTable {
    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| (t - threshold).abs() < 1e-9)
            .map(|i| self.per_threshold[i])
    }
}

/// A scored prediction after matching at one threshold.
#[derive(Debug, Clone, Copy)]
struct Ranked {
    score: f64,
    video_id: VideoId,
    track_id: TrackId,
    tp: bool,
}

/// 101-point interpolated precision: for each recall level `k / 100`, the
/// best precision reached at any recall `>= k / 100`, averaged. Recall levels
/// are compared exactly as `100 * tp >= k * npos`.
fn interpolated_ap(ranked: &mut [Ranked], npos: usize) -> f64 {
    if npos == 0 || ranked.is_empty() {
        return 0.0;
    }
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.video_id.cmp(&b.video_id))
            .then(a.track_id.cmp(&b.track_id))
    });
    let mut tp_cum = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0u64, 0u64);
    for r in ranked.iter() {
        if r.tp {
            tp += 1;
        } else {
            fp += 1;
        }
        tp_cum.push(tp);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let npos = npos as u64;
    let steps = RECALL_POINTS - 1;
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let idx = tp_cum.partition_point(|&t| t * steps < k * npos);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

/// Everything one video contributes to AP, with IoUs computed once.
struct VideoScoring<'a> {
    video_id: VideoId,
    preds: Vec<&'a InstanceTrack>,
    gts: Vec<&'a InstanceTrack>,
    ious: Vec<Vec<Option<TrackIou>>>,
    order: Vec<usize>,
}

fn prepare_videos<'a>(
    preds: &[&'a InstanceTrack],
    gts: &[&'a InstanceTrack],
) -> Result<Vec<VideoScoring<'a>>, EvalError> {
    let mut by_video: BTreeMap<VideoId, (Vec<&InstanceTrack>, Vec<&InstanceTrack>)> =
        BTreeMap::new();
    for p in preds {
        by_video.entry(p.video_id).or_default().0.push(p);
    }
    for g in gts {
        by_video.entry(g.video_id).or_default().1.push(g);
    }
    by_video
        .into_par_iter()
        .map(|(video_id, (preds, gts))| {
            let ious = iou_matrix(&preds, &gts)?;
            let order = score_order(&preds);
            Ok(VideoScoring {
                video_id,
                preds,
                gts,
                ious,
                order,
            })
        })
        .collect()
}

fn ap_from_prepared(videos: &[VideoScoring<'_>], thresholds: &[Fraction]) -> ApTable {
    let categories: BTreeSet<CategoryId> = videos
        .iter()
        .flat_map(|v| v.gts.iter().map(|g| g.category_id))
        .collect();
    let per_threshold: Vec<f64> = thresholds
        .iter()
        .map(|&threshold| {
            if categories.is_empty() {
                return 0.0;
            }
            let total: f64 = categories
                .iter()
                .map(|&cat| {
                    let mut ranked = Vec::new();
                    let mut npos = 0;
                    for v in videos {
                        npos += v.gts.iter().filter(|g| g.category_id == cat).count();
                        // IoU entries across categories are None, so matching
                        // all of a video's tracks at once stays per category.
                        let assigned =
                            greedy(&v.order, &v.ious, v.gts.len(), |iou| iou.meets(threshold));
                        ranked.extend(
                            v.order
                                .iter()
                                .filter(|&&p| v.preds[p].category_id == cat)
                                .map(|&p| Ranked {
                                    score: v.preds[p].effective_score(),
                                    video_id: v.video_id,
                                    track_id: v.preds[p].track_id,
                                    tp: assigned[p].is_some(),
                                }),
                        );
                    }
                    interpolated_ap(&mut ranked, npos)
                })
                .sum();
            100.0 * total / categories.len() as f64
        })
        .collect();
    let ap = if per_threshold.is_empty() {
        0.0
    } else {
        per_threshold.iter().sum::<f64>() / per_threshold.len() as f64
    };
    ApTable {
        thresholds: thresholds.iter().map(Fraction::as_f64).collect(),
        per_threshold,
        ap,
    }
}

fn require_scores(preds: &[&InstanceTrack]) -> Result<(), EvalError> {
    match preds.iter().find(|p| p.score.is_none()) {
        Some(p) => Err(EvalError::MissingScore {
            video_id: p.video_id,
            track_id: p.track_id,
        }),
        None => Ok(()),
    }
}

/// AP over `thresholds`, pooling predictions from all videos. Every
/// prediction must carry a score. With several categories the result is the
/// mean over categories present in the ground truth.
pub fn average_precision(
    preds: &[&InstanceTrack],
    gts: &[&InstanceTrack],
    thresholds: &[Fraction],
) -> Result<ApTable, EvalError> {
    require_scores(preds)?;
    let videos = prepare_videos(preds, gts)?;
    Ok(ap_from_prepared(&videos, thresholds))
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub f1_threshold: Fraction,
    pub f1_rule: MatchRule,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            f1_threshold: Fraction::new(1, 2).expect("valid"),
            f1_rule: MatchRule::Exceeds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VideoMatches {
    pub video_id: VideoId,
    #[serde(flatten)]
    pub result: MatchResult,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub ap_thresholds: Vec<f64>,
    pub ap_per_threshold: Vec<f64>,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub f1_threshold: f64,
    pub f1_rule: MatchRule,
    #[serde(flatten)]
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// False when the predictions carried no scores and were ranked as equals.
    pub scored_predictions: bool,
    pub videos: Vec<VideoMatches>,
}

impl EvalReport {
    pub const COLUMNS: [&'static str; 6] = ["AP", "AP50", "AP75", "Precision", "Recall", "F1"];

    /// The six values, AP family in percent and P/R/F1 as ratios, each to two
    /// decimals and separated by single spaces.
    pub fn row(&self) -> String {
        format!(
            "{:.2} {:.2} {:.2} {:.2} {:.2} {:.2}",
            self.ap, self.ap50, self.ap75, self.precision, self.recall, self.f1
        )
    }

    pub fn table(&self) -> String {
        let widths: Vec<usize> = Self::COLUMNS.iter().map(|c| c.len().max(6)).collect();
        let header: Vec<String> = Self::COLUMNS
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect();
        let values = [
            self.ap,
            self.ap50,
            self.ap75,
            self.precision,
            self.recall,
            self.f1,
        ];
        let cells: Vec<String> = values
            .iter()
            .zip(&widths)
            .map(|(v, w)| format!("{v:>w$.2}"))
            .collect();
        format!("{}\n{}\n", header.join(" "), cells.join(" "))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn check_videos(pred: &DatasetManifest, gt: &DatasetManifest) -> Result<(), EvalError> {
    let pred_ids: BTreeSet<VideoId> = pred.videos.iter().map(|v| v.video_id).collect();
    let gt_ids: BTreeSet<VideoId> = gt.videos.iter().map(|v| v.video_id).collect();
    if pred_ids != gt_ids {
        return Err(EvalError::VideoMismatch {
            missing_in_predictions: gt_ids.difference(&pred_ids).copied().collect(),
            missing_in_ground_truth: pred_ids.difference(&gt_ids).copied().collect(),
        });
    }
    for v in &pred.videos {
        let g = gt.video(v.video_id).expect("same id sets");
        if (v.frame_count, v.height, v.width) != (g.frame_count, g.height, g.width) {
            return Err(EvalError::VideoShape {
                video_id: v.video_id,
            });
        }
    }
    Ok(())
}

/// Full report for a prediction manifest against ground truth.
///
/// A prediction manifest in which no track has a score (such as the output of
/// a pipeline that drops confidences) is ranked with every score at 1.0 and
/// flagged in the report; one where only some tracks are scored is rejected.
pub fn evaluate(
    pred: &DatasetManifest,
    gt: &DatasetManifest,
    options: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    check_videos(pred, gt)?;
    let categories_pred: BTreeSet<_> = pred.categories.iter().map(|c| c.id).collect();
    let categories_gt: BTreeSet<_> = gt.categories.iter().map(|c| c.id).collect();
    if categories_pred != categories_gt {
        log::warn!("category tables differ: {categories_pred:?} vs {categories_gt:?}");
    }

    let unscored =
        !pred.annotations.is_empty() && pred.annotations.iter().all(|a| a.score.is_none());
    if !unscored {
        require_scores(&pred.annotations.iter().collect::<Vec<_>>())?;
    }

    let preds: Vec<&InstanceTrack> = pred.annotations.iter().collect();
    let gts: Vec<&InstanceTrack> = gt.annotations.iter().collect();
    let prepared = prepare_videos(&preds, &gts)?;

    let thresholds = default_ap_thresholds();
    let table = ap_from_prepared(&prepared, &thresholds);

    let mut counts = Counts::default();
    let mut videos = Vec::new();
    for v in &pred.videos {
        let result = match prepared.iter().find(|p| p.video_id == v.video_id) {
            Some(p) => {
                let assigned = greedy(&p.order, &p.ious, p.gts.len(), |iou| {
                    options.f1_rule.accepts(iou, options.f1_threshold)
                });
                collect_matches(&p.preds, &p.gts, &p.order, &assigned, &p.ious)
            }
            None => MatchResult::default(),
        };
        counts += result.counts();
        videos.push(VideoMatches {
            video_id: v.video_id,
            result,
        });
    }
    videos.sort_by_key(|v| v.video_id);
    let prf = precision_recall_f1(counts);

    Ok(EvalReport {
        ap50: table.at(0.5).unwrap_or(0.0),
        ap75: table.at(0.75).unwrap_or(0.0),
        ap: table.ap,
        ap_thresholds: table.thresholds,
        ap_per_threshold: table.per_threshold,
        f1_threshold: options.f1_threshold.as_f64(),
        f1_rule: options.f1_rule,
        counts,
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        scored_predictions: !unscored,
        videos,
    })
}

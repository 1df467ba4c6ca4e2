//! Domain types shared by the codec, the linker, the synthesizer and the evaluator.
//!
//! Everything here is plain data. Masks are run-length encoded in column-major
//! order; a track holds one optional mask per frame of its video, where an
//! absent slot means the entity does not exist in that frame.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type VideoId = u64;
pub type TrackId = u64;
pub type CategoryId = u64;

/// Track id placeholder for tracks that have not been given an id yet.
pub const UNASSIGNED_TRACK_ID: TrackId = 0;

/// Category used when a dataset does not declare its own table.
pub const BUILDING_CATEGORY_ID: CategoryId = 1;
pub const BUILDING_CATEGORY_NAME: &str = "building";

/// Unknown JSON fields carried through a read/write cycle untouched.
pub type Extra = BTreeMap<String, serde_json::Value>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaskError {
    #[error("mask dimensions must be positive, got {height}x{width}")]
    ZeroDimension { height: u32, width: u32 },
    #[error("run lengths sum to {sum} but a {height}x{width} mask holds {expected} pixels")]
    CountSum {
        height: u32,
        width: u32,
        sum: u64,
        expected: u64,
    },
    #[error("run {index} has length 0; only the leading run may be empty")]
    EmptyRun { index: usize },
    #[error("empty run-length sequence")]
    NoRuns,
    #[error("dimension mismatch: {left_h}x{left_w} vs {right_h}x{right_w}")]
    DimensionMismatch {
        left_h: u32,
        left_w: u32,
        right_h: u32,
        right_w: u32,
    },
    #[error("frame count mismatch: {left} vs {right}")]
    FrameCountMismatch { left: usize, right: usize },
    #[error("pixel buffer holds {len} values, expected {expected}")]
    BufferLength { len: usize, expected: usize },
}

/// Binary raster mask stored as column-major run lengths.
///
/// The first run counts background pixels and may be 0 when the first pixel is
/// foreground; every later run is strictly positive. This is the canonical form
/// produced by [`crate::mask::rle_encode`], so decoding and re-encoding a valid
/// mask reproduces its counts exactly.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RleMask {
    height: u32,
    width: u32,
    counts: Vec<u32>,
}

impl RleMask {
    pub fn new(height: u32, width: u32, counts: Vec<u32>) -> Result<Self, MaskError> {
        if height == 0 || width == 0 {
            return Err(MaskError::ZeroDimension { height, width });
        }
        if counts.is_empty() {
            return Err(MaskError::NoRuns);
        }
        if let Some(index) = counts.iter().skip(1).position(|&c| c == 0) {
            return Err(MaskError::EmptyRun { index: index + 1 });
        }
        let sum: u64 = counts.iter().map(|&c| u64::from(c)).sum();
        let expected = u64::from(height) * u64::from(width);
        if sum != expected {
            return Err(MaskError::CountSum {
                height,
                width,
                sum,
                expected,
            });
        }
        Ok(Self {
            height,
            width,
            counts,
        })
    }

    /// All-background mask.
    pub fn empty(height: u32, width: u32) -> Result<Self, MaskError> {
        Self::new(height, width, vec![height.saturating_mul(width)])
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn size(&self) -> (u32, u32) {
        (self.height, self.width)
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn pixel_count(&self) -> u64 {
        u64::from(self.height) * u64::from(self.width)
    }

    /// Foreground pixel count, summed from the odd-position runs.
    pub fn area(&self) -> u64 {
        self.counts
            .iter()
            .skip(1)
            .step_by(2)
            .map(|&c| u64::from(c))
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.len() <= 1
    }

    pub fn into_counts(self) -> Vec<u32> {
        self.counts
    }
}

/// A ratio in `[0, 1]` held as an exact fraction so threshold comparisons
/// against integer pixel counts never round.
#[derive(Debug, Clone, Copy)]
pub struct Fraction {
    num: u64,
    den: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FractionError {
    #[error("ratio {0} is outside [0, 1]")]
    OutOfRange(String),
    #[error("cannot parse {0:?} as a decimal ratio")]
    Parse(String),
    #[error("zero denominator")]
    ZeroDenominator,
}

impl Fraction {
    /// Largest number of decimal places accepted when parsing.
    const MAX_DECIMALS: usize = 18;

    pub fn new(num: u64, den: u64) -> Result<Self, FractionError> {
        if den == 0 {
            return Err(FractionError::ZeroDenominator);
        }
        if num > den {
            return Err(FractionError::OutOfRange(format!("{num}/{den}")));
        }
        let g = gcd(num, den);
        Ok(Self {
            num: num / g,
            den: den / g,
        })
    }

    /// Parses a plain decimal such as `0.6`, `1` or `.75`.
    pub fn parse_decimal(text: &str) -> Result<Self, FractionError> {
        let text = text.trim();
        let err = || FractionError::Parse(text.to_string());
        let (int_part, frac_part) = match text.split_once('.') {
            Some((i, f)) => (i, f),
            None => (text, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(err());
        }
        if !int_part.chars().all(|c| c.is_ascii_digit())
            || !frac_part.chars().all(|c| c.is_ascii_digit())
        {
            return Err(err());
        }
        let frac_part = frac_part.trim_end_matches('0');
        if frac_part.len() > Self::MAX_DECIMALS {
            return Err(err());
        }
        let int_value: u64 = if int_part.is_empty() {
            0
        } else {
            int_part
                .parse()
                .map_err(|_| FractionError::OutOfRange(text.to_string()))?
        };
        let den = 10u64.pow(frac_part.len() as u32);
        let frac_value: u64 = if frac_part.is_empty() {
            0
        } else {
            frac_part.parse().map_err(|_| err())?
        };
        let num = int_value
            .checked_mul(den)
            .and_then(|v| v.checked_add(frac_value))
            .ok_or_else(|| FractionError::OutOfRange(text.to_string()))?;
        Self::new(num, den).map_err(|_| FractionError::OutOfRange(text.to_string()))
    }

    /// Converts through the shortest decimal that round-trips `value`, so
    /// `0.6_f64` becomes exactly 3/5.
    pub fn from_f64(value: f64) -> Result<Self, FractionError> {
        if !value.is_finite() || !(0.0..=1.0).contains(&value) {
            return Err(FractionError::OutOfRange(value.to_string()));
        }
        Self::parse_decimal(&value.to_string())
    }

    pub fn numerator(&self) -> u64 {
        self.num
    }

    pub fn denominator(&self) -> u64 {
        self.den
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Compares `part / whole` with this fraction.
    pub fn cmp_ratio(&self, part: u64, whole: u64) -> Ordering {
        let lhs = u128::from(part) * u128::from(self.den);
        let rhs = u128::from(self.num) * u128::from(whole);
        lhs.cmp(&rhs)
    }

    /// `part / whole >= self`
    pub fn is_met_by(&self, part: u64, whole: u64) -> bool {
        self.cmp_ratio(part, whole) != Ordering::Less
    }

    /// `part / whole > self`
    pub fn is_exceeded_by(&self, part: u64, whole: u64) -> bool {
        self.cmp_ratio(part, whole) == Ordering::Greater
    }
}

impl PartialEq for Fraction {
    fn eq(&self, other: &Self) -> bool {
        self.num == other.num && self.den == other.den
    }
}

impl Eq for Fraction {}

impl PartialOrd for Fraction {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Fraction {
    fn cmp(&self, other: &Self) -> Ordering {
        (u128::from(self.num) * u128::from(other.den))
            .cmp(&(u128::from(other.num) * u128::from(self.den)))
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_f64())
    }
}

impl std::str::FromStr for Fraction {
    type Err = FractionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse_decimal(s)
    }
}

pub(crate) fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// Frame label such as a map edition year. Numbers and strings are both kept
/// exactly as they appeared in the source file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Timestamp {
    Year(i64),
    Label(String),
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Timestamp::Year(y) => write!(f, "{y}"),
            Timestamp::Label(s) => f.write_str(s),
        }
    }
}

/// One map series: `frame_count` co-registered tiles of identical size.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: VideoId,
    pub frame_count: usize,
    pub height: u32,
    pub width: u32,
    pub frame_names: Vec<String>,
    pub timestamps: Option<Vec<Timestamp>>,
    pub extra: Extra,
}

impl VideoRecord {
    pub fn new(video_id: VideoId, height: u32, width: u32, frame_names: Vec<String>) -> Self {
        Self {
            video_id,
            frame_count: frame_names.len(),
            height,
            width,
            frame_names,
            timestamps: None,
            extra: Extra::new(),
        }
    }

    pub fn with_timestamps(mut self, timestamps: Vec<Timestamp>) -> Self {
        self.timestamps = Some(timestamps);
        self
    }
}

/// One entity followed through every frame of a video.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceTrack {
    pub track_id: TrackId,
    pub video_id: VideoId,
    pub category_id: CategoryId,
    /// Confidence for predictions; ground truth leaves it unset.
    pub score: Option<f64>,
    /// One slot per frame; `None` is an empty mask.
    pub masks: Vec<Option<RleMask>>,
    pub extra: Extra,
}

impl InstanceTrack {
    pub fn new(
        track_id: TrackId,
        video_id: VideoId,
        category_id: CategoryId,
        masks: Vec<Option<RleMask>>,
    ) -> Self {
        Self {
            track_id,
            video_id,
            category_id,
            score: None,
            masks,
            extra: Extra::new(),
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn frame_count(&self) -> usize {
        self.masks.len()
    }

    /// Score with the ground-truth default of 1.0.
    pub fn effective_score(&self) -> f64 {
        self.score.unwrap_or(1.0)
    }

    pub fn total_area(&self) -> u64 {
        self.masks.iter().flatten().map(RleMask::area).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.iter().flatten().all(RleMask::is_empty)
    }

    /// Indices of frames holding a non-empty mask.
    pub fn present_frames(&self) -> impl Iterator<Item = usize> + '_ {
        self.masks
            .iter()
            .enumerate()
            .filter(|(_, m)| m.as_ref().is_some_and(|m| !m.is_empty()))
            .map(|(t, _)| t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub mask: RleMask,
    pub score: f64,
    pub category_id: CategoryId,
}

/// Scored instance masks predicted for a single frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameDetections {
    pub frame_index: usize,
    pub detections: Vec<Detection>,
}

impl FrameDetections {
    pub fn new(frame_index: usize, detections: Vec<Detection>) -> Self {
        Self {
            frame_index,
            detections,
        }
    }

    /// Shared `(height, width)` of the detections, `None` for an empty frame.
    pub fn size(&self) -> Result<Option<(u32, u32)>, MaskError> {
        let mut size = None;
        for det in &self.detections {
            match size {
                None => size = Some(det.mask.size()),
                Some((h, w)) if (h, w) != det.mask.size() => {
                    return Err(MaskError::DimensionMismatch {
                        left_h: h,
                        left_w: w,
                        right_h: det.mask.height(),
                        right_w: det.mask.width(),
                    })
                }
                Some(_) => {}
            }
        }
        Ok(size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Category {
    pub id: CategoryId,
    pub name: String,
    pub extra: Extra,
}

impl Category {
    pub fn new(id: CategoryId, name: impl Into<String>) -> Self {
        Self {
            id,
            name: name.into(),
            extra: Extra::new(),
        }
    }

    pub fn building() -> Self {
        Self::new(BUILDING_CATEGORY_ID, BUILDING_CATEGORY_NAME)
    }
}

/// Videos, their track annotations and the category table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub videos: Vec<VideoRecord>,
    pub annotations: Vec<InstanceTrack>,
    pub categories: Vec<Category>,
    pub extra: Extra,
}

impl DatasetManifest {
    pub fn new(categories: Vec<Category>) -> Self {
        Self {
            categories,
            ..Self::default()
        }
    }

    pub fn video(&self, video_id: VideoId) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.video_id == video_id)
    }

    /// Annotations grouped by video id, each group in manifest order.
    pub fn tracks_by_video(&self) -> BTreeMap<VideoId, Vec<&InstanceTrack>> {
        let mut out: BTreeMap<VideoId, Vec<&InstanceTrack>> = BTreeMap::new();
        for track in &self.annotations {
            out.entry(track.video_id).or_default().push(track);
        }
        out
    }

    /// Copy with every annotation score set to `score`.
    pub fn with_scores(&self, score: f64) -> Self {
        let mut out = self.clone();
        for track in &mut out.annotations {
            track.score = Some(score);
        }
        out
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate_manifest(self)
    }
}

/// What a [`Violation`] is about.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Subject {
    Video(VideoId),
    Annotation(TrackId),
    Category(CategoryId),
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subject::Video(id) => write!(f, "video {id}"),
            Subject::Annotation(id) => write!(f, "annotation {id}"),
            Subject::Category(id) => write!(f, "category {id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Rule {
    NoFrames,
    FrameNameCount {
        frame_count: usize,
        names: usize,
    },
    TimestampCount {
        frame_count: usize,
        timestamps: usize,
    },
    ZeroSize {
        height: u32,
        width: u32,
    },
    DuplicateVideoId,
    DuplicateTrackId,
    UnassignedTrackId,
    DuplicateCategoryId,
    DanglingVideo {
        video_id: VideoId,
    },
    UnknownCategory {
        category_id: CategoryId,
    },
    MaskCount {
        masks: usize,
        frame_count: usize,
    },
    MaskSize {
        frame: usize,
        mask: (u32, u32),
        video: (u32, u32),
    },
    EmptyTrack,
    ScoreRange {
        score: f64,
    },
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::NoFrames => write!(f, "video has no frames"),
            Rule::FrameNameCount { frame_count, names } => {
                write!(f, "{names} file names for {frame_count} frames")
            }
            Rule::TimestampCount {
                frame_count,
                timestamps,
            } => write!(f, "{timestamps} timestamps for {frame_count} frames"),
            Rule::ZeroSize { height, width } => write!(f, "zero-sized frames {height}x{width}"),
            Rule::DuplicateVideoId => write!(f, "duplicate video id"),
            Rule::DuplicateTrackId => write!(f, "duplicate track id"),
            Rule::UnassignedTrackId => write!(f, "track id 0 is reserved for unassigned tracks"),
            Rule::DuplicateCategoryId => write!(f, "duplicate category id"),
            Rule::DanglingVideo { video_id } => write!(f, "references missing video {video_id}"),
            Rule::UnknownCategory { category_id } => {
                write!(f, "references undeclared category {category_id}")
            }
            Rule::MaskCount { masks, frame_count } => {
                write!(f, "{masks} masks for a {frame_count}-frame video")
            }
            Rule::MaskSize { frame, mask, video } => write!(
                f,
                "mask in frame {frame} is {}x{} but the video is {}x{}",
                mask.0, mask.1, video.0, video.1
            ),
            Rule::EmptyTrack => write!(f, "track has no foreground pixels in any frame"),
            Rule::ScoreRange { score } => write!(f, "score {score} outside [0, 1]"),
        }
    }
}

/// A broken manifest invariant: which record, and which rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub subject: Subject,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.subject, self.rule)
    }
}

/// Lists every broken invariant; an empty list means the manifest is valid.
pub fn validate_manifest(manifest: &DatasetManifest) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |subject: Subject, rule: Rule| out.push(Violation { subject, rule });

    let mut category_ids = HashSet::new();
    for cat in &manifest.categories {
        if !category_ids.insert(cat.id) {
            push(Subject::Category(cat.id), Rule::DuplicateCategoryId);
        }
    }

    let mut videos: HashMap<VideoId, &VideoRecord> = HashMap::new();
    for video in &manifest.videos {
        let subject = || Subject::Video(video.video_id);
        if videos.insert(video.video_id, video).is_some() {
            push(subject(), Rule::DuplicateVideoId);
        }
        if video.frame_count == 0 {
            push(subject(), Rule::NoFrames);
        }
        if video.frame_names.len() != video.frame_count {
            push(
                subject(),
                Rule::FrameNameCount {
                    frame_count: video.frame_count,
                    names: video.frame_names.len(),
                },
            );
        }
        if let Some(ts) = &video.timestamps {
            if ts.len() != video.frame_count {
                push(
                    subject(),
                    Rule::TimestampCount {
                        frame_count: video.frame_count,
                        timestamps: ts.len(),
                    },
                );
            }
        }
        if video.height == 0 || video.width == 0 {
            push(
                subject(),
                Rule::ZeroSize {
                    height: video.height,
                    width: video.width,
                },
            );
        }
    }

    let mut track_ids = HashSet::new();
    for track in &manifest.annotations {
        let subject = || Subject::Annotation(track.track_id);
        if track.track_id == UNASSIGNED_TRACK_ID {
            push(subject(), Rule::UnassignedTrackId);
        } else if !track_ids.insert(track.track_id) {
            push(subject(), Rule::DuplicateTrackId);
        }
        if !category_ids.contains(&track.category_id) {
            push(
                subject(),
                Rule::UnknownCategory {
                    category_id: track.category_id,
                },
            );
        }
        if let Some(score) = track.score {
            if !(0.0..=1.0).contains(&score) {
                push(subject(), Rule::ScoreRange { score });
            }
        }
        if track.is_empty() {
            push(subject(), Rule::EmptyTrack);
        }
        let Some(video) = videos.get(&track.video_id) else {
            push(
                subject(),
                Rule::DanglingVideo {
                    video_id: track.video_id,
                },
            );
            continue;
        };
        if track.masks.len() != video.frame_count {
            push(
                subject(),
                Rule::MaskCount {
                    masks: track.masks.len(),
                    frame_count: video.frame_count,
                },
            );
        }
        for (frame, mask) in track.masks.iter().enumerate() {
            if let Some(mask) = mask {
                if mask.size() != (video.height, video.width) {
                    push(
                        subject(),
                        Rule::MaskSize {
                            frame,
                            mask: mask.size(),
                            video: (video.height, video.width),
                        },
                    );
                }
            }
        }
    }
    out
}

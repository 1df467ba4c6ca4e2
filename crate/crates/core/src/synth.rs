//! Synthetic two-frame videos from single map tiles and their pseudo-masks.
//!
//! Each kept pseudo-mask becomes a track whose two frames carry the same mask,
//! so identities are linked by construction. Tiles without any kept mask are
//! skipped. Optionally, every instance in the second frame is shifted by its
//! own random offset to imitate the small misregistrations between map
//! editions.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::io::{read_detections, IoError, TILE_SIZE};
use crate::linker::Containment;
use crate::mask::translate;
use crate::model::{
    Category, DatasetManifest, Detection, Extra, Fraction, FrameDetections, InstanceTrack,
    MaskError, TrackId, VideoId, VideoRecord, BUILDING_CATEGORY_ID,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{0}")]
    Mask(#[from] MaskError),
    #[error("missing image files:\n{}", .0.iter().map(|p| format!("  - {}", p.display())).collect::<Vec<_>>().join("\n"))]
    MissingImages(Vec<PathBuf>),
    #[error("{context}: {message}")]
    Dimension { context: String, message: String },
    #[error("displacement needs two-frame tracks, track {track_id} has {frames}")]
    NotTwoFrames { track_id: TrackId, frames: usize },
    #[error("invalid synth configuration: {0}")]
    Config(String),
    #[error("{} offsets for {} tracks", offsets, tracks)]
    OffsetCount { offsets: usize, tracks: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub score_threshold: f64,
    pub min_instance_area: u64,
    /// Per-axis bound on second-frame offsets; 0 disables displacement.
    pub max_displacement: u32,
    /// Drop a mask when it lies approximately within an already kept,
    /// higher-scoring mask at this ratio. `None` keeps overlapping masks.
    pub overlap_suppression: Option<Fraction>,
    pub random_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.5,
            min_instance_area: 1,
            max_displacement: 0,
            overlap_suppression: None,
            random_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(SynthError::Config(format!(
                "score threshold {} outside [0, 1]",
                self.score_threshold
            )));
        }
        Ok(())
    }
}

fn kept_detections<'a>(
    detections: &'a FrameDetections,
    config: &SynthConfig,
) -> Vec<&'a Detection> {
    let mut kept: Vec<&Detection> = detections
        .detections
        .iter()
        .filter(|d| d.score >= config.score_threshold)
        .filter(|d| d.mask.area() >= config.min_instance_area.max(1))
        .collect();
    if let Some(ratio) = config.overlap_suppression {
        let mut order: Vec<usize> = (0..kept.len()).collect();
        // stable: equal scores keep input order
        order.sort_by(|&a, &b| kept[b].score.total_cmp(&kept[a].score));
        let mut survivors: Vec<usize> = Vec::new();
        for i in order {
            let suppressed = survivors.iter().any(|&s| {
                Containment::between(&kept[i].mask, &kept[s].mask)
                    .map(|c| c.satisfies(ratio))
                    .unwrap_or(false)
            });
            if !suppressed {
                survivors.push(i);
            }
        }
        survivors.sort_unstable();
        kept = survivors.into_iter().map(|i| kept[i]).collect();
    }
    kept
}

/// Builds the two-frame video for one tile, or `None` when no pseudo-mask
/// survives filtering. Tracks get ids `1..=n` in input order.
pub fn make_synthetic_video(
    image_name: &str,
    video_id: VideoId,
    detections: &FrameDetections,
    config: &SynthConfig,
) -> Result<Option<(VideoRecord, Vec<InstanceTrack>)>, SynthError> {
    let size = detections.size()?;
    let kept = kept_detections(detections, config);
    let Some((height, width)) = size.filter(|_| !kept.is_empty()) else {
        return Ok(None);
    };
    let video = VideoRecord::new(
        video_id,
        height,
        width,
        vec![image_name.to_string(), image_name.to_string()],
    );
    let tracks = kept
        .into_iter()
        .enumerate()
        .map(|(i, det)| {
            InstanceTrack::new(
                i as TrackId + 1,
                video_id,
                det.category_id,
                vec![Some(det.mask.clone()), Some(det.mask.clone())],
            )
        })
        .collect();
    Ok(Some((video, tracks)))
}

/// Generator for one tile, derived from the run seed and the tile name so
/// results do not depend on processing order.
pub fn image_rng(seed: u64, image_name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(image_name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Shifts each track's second-frame mask by its own `(row, col)` offset.
pub fn displace_with_offsets(
    tracks: Vec<InstanceTrack>,
    offsets: &[(i64, i64)],
) -> Result<Vec<InstanceTrack>, SynthError> {
    if offsets.len() != tracks.len() {
        return Err(SynthError::OffsetCount {
            offsets: offsets.len(),
            tracks: tracks.len(),
        });
    }
    tracks
        .into_iter()
        .zip(offsets)
        .map(|(mut track, &(dr, dc))| {
            if track.masks.len() != 2 {
                return Err(SynthError::NotTwoFrames {
                    track_id: track.track_id,
                    frames: track.masks.len(),
                });
            }
            if (dr, dc) != (0, 0) {
                track.masks[1] = track.masks[1].as_ref().and_then(|m| translate(m, dr, dc));
            }
            Ok(track)
        })
        .collect()
}

/// Draws an independent uniform offset in `[-d, d]` per axis for every track
/// and applies it to the second frame. `d = 0` returns the input unchanged.
pub fn displace_second_frame<R: Rng>(
    tracks: Vec<InstanceTrack>,
    config: &SynthConfig,
    rng: &mut R,
) -> Result<Vec<InstanceTrack>, SynthError> {
    if let Some(t) = tracks.iter().find(|t| t.masks.len() != 2) {
        return Err(SynthError::NotTwoFrames {
            track_id: t.track_id,
            frames: t.masks.len(),
        });
    }
    if config.max_displacement == 0 {
        return Ok(tracks);
    }
    let d = i64::from(config.max_displacement);
    let offsets: Vec<(i64, i64)> = tracks
        .iter()
        .map(|_| (rng.gen_range(-d..=d), rng.gen_range(-d..=d)))
        .collect();
    displace_with_offsets(tracks, &offsets)
}

/// Result of [`build_synthetic_dataset`].
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub manifest: DatasetManifest,
    pub images_in: usize,
    pub excluded: Vec<String>,
}

impl SynthOutput {
    pub fn videos_out(&self) -> usize {
        self.manifest.videos.len()
    }
}

struct Tile {
    name: String,
    detections: FrameDetections,
}

fn load_tile(path: &Path) -> Result<Tile, SynthError> {
    let file = read_detections(path)?;
    if file.frames.len() != 1 {
        return Err(SynthError::Dimension {
            context: path.display().to_string(),
            message: format!(
                "expected detections for a single image, found {} frames",
                file.frames.len()
            ),
        });
    }
    let name = file.file_names.first().cloned().unwrap_or_else(|| {
        let stem = path.file_stem().unwrap_or_default().to_string_lossy();
        format!("{stem}.png")
    });
    Ok(Tile {
        name,
        detections: file.frames.into_iter().next().expect("one frame"),
    })
}

fn check_image(image_dir: &Path, tile: &Tile) -> Result<(), SynthError> {
    let path = image_dir.join(&tile.name);
    let (w, h) = image::image_dimensions(&path).map_err(|source| IoError::Image {
        path: path.clone(),
        source,
    })?;
    if (w, h) != (TILE_SIZE, TILE_SIZE) {
        log::warn!(
            "{}: tile is {h}x{w}, expected {TILE_SIZE}x{TILE_SIZE}",
            path.display()
        );
    }
    if let Some((mh, mw)) = tile.detections.size()? {
        if (mh, mw) != (h, w) {
            return Err(SynthError::Dimension {
                context: path.display().to_string(),
                message: format!("image is {h}x{w} but its masks are {mh}x{mw}"),
            });
        }
    }
    Ok(())
}

/// One synthetic video per tile that keeps at least one pseudo-mask.
///
/// Tiles are processed in order of image name; video ids and track ids are
/// assigned consecutively from 1 in that order. Every detection file must
/// hold exactly one frame, and its image (`file_names[0]`, or the file stem
/// with `.png`) must exist under `image_dir`.
pub fn build_synthetic_dataset(
    detection_files: &[PathBuf],
    image_dir: &Path,
    config: &SynthConfig,
) -> Result<SynthOutput, SynthError> {
    config.validate()?;
    let mut tiles: Vec<Tile> = detection_files
        .par_iter()
        .map(|p| load_tile(p))
        .collect::<Result<_, _>>()?;
    tiles.sort_by(|a, b| a.name.cmp(&b.name));

    let missing: Vec<PathBuf> = tiles
        .iter()
        .map(|t| image_dir.join(&t.name))
        .filter(|p| !p.is_file())
        .collect();
    if !missing.is_empty() {
        return Err(SynthError::MissingImages(missing));
    }

    let generated: Vec<Option<(VideoRecord, Vec<InstanceTrack>)>> = tiles
        .par_iter()
        .map(|tile| {
            check_image(image_dir, tile)?;
            let Some((video, tracks)) =
                make_synthetic_video(&tile.name, 0, &tile.detections, config)?
            else {
                return Ok(None);
            };
            let mut rng = image_rng(config.random_seed, &tile.name);
            let tracks = displace_second_frame(tracks, config, &mut rng)?;
            Ok(Some((video, tracks)))
        })
        .collect::<Result<_, SynthError>>()?;

    let mut manifest = DatasetManifest::new(vec![Category::building()]);
    let mut excluded = Vec::new();
    let mut categories = BTreeSet::new();
    let mut next_track: TrackId = 1;
    for (tile, generated) in tiles.iter().zip(generated) {
        let Some((mut video, tracks)) = generated else {
            excluded.push(tile.name.clone());
            continue;
        };
        video.video_id = manifest.videos.len() as VideoId + 1;
        for mut track in tracks {
            track.video_id = video.video_id;
            track.track_id = next_track;
            next_track += 1;
            categories.insert(track.category_id);
            manifest.annotations.push(track);
        }
        manifest.videos.push(video);
    }
    manifest.categories.extend(
        categories
            .into_iter()
            .filter(|&c| c != BUILDING_CATEGORY_ID)
            .map(|c| Category::new(c, format!("category_{c}"))),
    );
    manifest.extra = Extra::new();
    Ok(SynthOutput {
        manifest,
        images_in: tiles.len(),
        excluded,
    })
}

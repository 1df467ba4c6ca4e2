use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    parse_error, read_text, to_pretty_json, write_text, IoError, SegmentationWire, WriteOptions,
};
use crate::model::{
    validate_manifest, Category, CategoryId, DatasetManifest, Extra, InstanceTrack, Timestamp,
    TrackId, VideoId, VideoRecord, Violation, BUILDING_CATEGORY_ID, UNASSIGNED_TRACK_ID,
};

/// Top-level key carrying the schema version. Files without it (third-party
/// YouTube-VIS manifests) are read as the current version.
pub const MANIFEST_SCHEMA_KEY: &str = "geoalign_schema";
pub const MANIFEST_SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestWire {
    #[serde(
        default,
        rename = "geoalign_schema",
        skip_serializing_if = "Option::is_none"
    )]
    schema: Option<serde_json::Value>,
    #[serde(default)]
    videos: Vec<VideoWire>,
    #[serde(default)]
    annotations: Vec<AnnotationWire>,
    #[serde(default)]
    categories: Vec<CategoryWire>,
    #[serde(flatten)]
    extra: Extra,
}

#[derive(Debug, Serialize, Deserialize)]
struct VideoWire {
    id: VideoId,
    height: u32,
    width: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    length: Option<usize>,
    #[serde(default)]
    file_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timestamps: Option<Vec<Timestamp>>,
    #[serde(flatten)]
    extra: Extra,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationWire {
    #[serde(default)]
    id: TrackId,
    video_id: VideoId,
    #[serde(default = "default_category")]
    category_id: CategoryId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    segmentations: Vec<Option<SegmentationWire>>,
    #[serde(flatten)]
    extra: Extra,
}

fn default_category() -> CategoryId {
    BUILDING_CATEGORY_ID
}

#[derive(Debug, Serialize, Deserialize)]
struct CategoryWire {
    id: CategoryId,
    name: String,
    #[serde(flatten)]
    extra: Extra,
}

/// A parsed manifest together with any invariant violations it carries.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub manifest: DatasetManifest,
    pub violations: Vec<Violation>,
}

impl LoadedManifest {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_valid(self) -> Result<DatasetManifest, IoError> {
        if self.violations.is_empty() {
            Ok(self.manifest)
        } else {
            Err(IoError::Invalid(self.violations))
        }
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<LoadedManifest, IoError> {
    let path = path.as_ref();
    let text = read_text(path)?;
    manifest_from_str_at(&text, path)
}

pub fn manifest_from_str(text: &str) -> Result<LoadedManifest, IoError> {
    manifest_from_str_at(text, Path::new("<memory>"))
}

fn manifest_from_str_at(text: &str, path: &Path) -> Result<LoadedManifest, IoError> {
    let wire: ManifestWire = serde_json::from_str(text).map_err(|e| parse_error(path, text, &e))?;
    if let Some(found) = &wire.schema {
        if found.as_u64() != Some(MANIFEST_SCHEMA_VERSION) {
            return Err(IoError::SchemaVersion {
                path: path.to_path_buf(),
                found: found.clone(),
                supported: MANIFEST_SCHEMA_VERSION,
            });
        }
    }
    let manifest = from_wire(wire)?;
    let violations = validate_manifest(&manifest);
    Ok(LoadedManifest {
        manifest,
        violations,
    })
}

fn from_wire(wire: ManifestWire) -> Result<DatasetManifest, IoError> {
    let videos = wire
        .videos
        .into_iter()
        .map(|v| VideoRecord {
            video_id: v.id,
            frame_count: v.length.unwrap_or(v.file_names.len()),
            height: v.height,
            width: v.width,
            frame_names: v.file_names,
            timestamps: v.timestamps,
            extra: v.extra,
        })
        .collect();
    let mut annotations = Vec::with_capacity(wire.annotations.len());
    for a in wire.annotations {
        let mut masks = Vec::with_capacity(a.segmentations.len());
        for (frame, seg) in a.segmentations.into_iter().enumerate() {
            let mask = seg
                .map(|s| s.into_mask(|| format!("annotation {} frame {frame}", a.id)))
                .transpose()?;
            masks.push(mask);
        }
        annotations.push(InstanceTrack {
            track_id: a.id,
            video_id: a.video_id,
            category_id: a.category_id,
            score: a.score,
            masks,
            extra: a.extra,
        });
    }
    let categories = wire
        .categories
        .into_iter()
        .map(|c| Category {
            id: c.id,
            name: c.name,
            extra: c.extra,
        })
        .collect();
    Ok(DatasetManifest {
        videos,
        annotations,
        categories,
        extra: wire.extra,
    })
}

fn to_wire(manifest: &DatasetManifest, options: WriteOptions) -> ManifestWire {
    let mut extra = manifest.extra.clone();
    extra.remove(MANIFEST_SCHEMA_KEY);
    ManifestWire {
        schema: Some(MANIFEST_SCHEMA_VERSION.into()),
        videos: manifest
            .videos
            .iter()
            .map(|v| VideoWire {
                id: v.video_id,
                height: v.height,
                width: v.width,
                length: Some(v.frame_count),
                file_names: v.frame_names.clone(),
                timestamps: v.timestamps.clone(),
                extra: v.extra.clone(),
            })
            .collect(),
        annotations: manifest
            .annotations
            .iter()
            .map(|a| AnnotationWire {
                id: a.track_id,
                video_id: a.video_id,
                category_id: a.category_id,
                score: a.score,
                segmentations: a
                    .masks
                    .iter()
                    .map(|m| m.as_ref().map(|m| SegmentationWire::from_mask(m, options)))
                    .collect(),
                extra: a.extra.clone(),
            })
            .collect(),
        categories: manifest
            .categories
            .iter()
            .map(|c| CategoryWire {
                id: c.id,
                name: c.name.clone(),
                extra: c.extra.clone(),
            })
            .collect(),
        extra,
    }
}

/// Serializes a valid manifest. Output is pretty-printed JSON with a fixed
/// key order, so equal manifests always produce identical bytes.
pub fn manifest_to_string(
    manifest: &DatasetManifest,
    options: WriteOptions,
) -> Result<String, IoError> {
    let violations = validate_manifest(manifest);
    if !violations.is_empty() {
        return Err(IoError::Invalid(violations));
    }
    Ok(to_pretty_json(&to_wire(manifest, options)))
}

pub fn write_manifest(
    manifest: &DatasetManifest,
    path: impl AsRef<Path>,
    options: WriteOptions,
) -> Result<(), IoError> {
    let text = manifest_to_string(manifest, options)?;
    write_text(path.as_ref(), &text)
}

/// Wraps linked or generated tracks for one video into a manifest.
///
/// Tracks with [`UNASSIGNED_TRACK_ID`] receive fresh ids above the largest
/// supplied one. The category table is the single `building` class plus a
/// generic entry for any other category id in use.
pub fn tracks_to_manifest(
    video: VideoRecord,
    tracks: Vec<InstanceTrack>,
) -> Result<DatasetManifest, IoError> {
    let mut seen = HashSet::new();
    for track in &tracks {
        if track.track_id != UNASSIGNED_TRACK_ID && !seen.insert(track.track_id) {
            return Err(IoError::DuplicateTrackId(track.track_id));
        }
        let context = || format!("track {}", track.track_id);
        if track.masks.len() != video.frame_count {
            return Err(IoError::Dimension {
                context: context(),
                message: format!(
                    "{} masks for a {}-frame video",
                    track.masks.len(),
                    video.frame_count
                ),
            });
        }
        if let Some(mask) = track
            .masks
            .iter()
            .flatten()
            .find(|m| m.size() != (video.height, video.width))
        {
            return Err(IoError::Dimension {
                context: context(),
                message: format!(
                    "mask is {}x{} but the video is {}x{}",
                    mask.height(),
                    mask.width(),
                    video.height,
                    video.width
                ),
            });
        }
    }

    let mut next_id = seen.iter().copied().max().unwrap_or(0) + 1;
    let mut used_categories = BTreeSet::new();
    let annotations = tracks
        .into_iter()
        .map(|mut track| {
            if track.track_id == UNASSIGNED_TRACK_ID {
                track.track_id = next_id;
                next_id += 1;
            }
            track.video_id = video.video_id;
            used_categories.insert(track.category_id);
            track
        })
        .collect();

    let mut categories = vec![Category::building()];
    categories.extend(
        used_categories
            .into_iter()
            .filter(|&id| id != BUILDING_CATEGORY_ID)
            .map(|id| Category::new(id, format!("category_{id}"))),
    );
    Ok(DatasetManifest {
        videos: vec![video],
        annotations,
        categories,
        extra: Extra::new(),
    })
}

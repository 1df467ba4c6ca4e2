use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    parse_error, read_text, to_pretty_json, write_text, IoError, SegmentationWire, WriteOptions,
};
use crate::model::{
    CategoryId, Detection, FrameDetections, Timestamp, VideoId, VideoRecord, BUILDING_CATEGORY_ID,
};

#[derive(Debug, Serialize, Deserialize)]
struct DetectionFileWire {
    video_id: VideoId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    width: Option<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    file_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timestamps: Option<Vec<Timestamp>>,
    frames: Vec<Vec<DetectionWire>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectionWire {
    #[serde(default = "default_category")]
    category_id: CategoryId,
    score: f64,
    segmentation: SegmentationWire,
}

fn default_category() -> CategoryId {
    BUILDING_CATEGORY_ID
}

/// Per-frame segmenter output for one video (or one image, as a single frame).
///
/// `height`, `width`, `file_names` and `timestamps` are optional in the file;
/// when absent, the frame size comes from the masks.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionFile {
    pub video_id: VideoId,
    pub height: Option<u32>,
    pub width: Option<u32>,
    pub file_names: Vec<String>,
    pub timestamps: Option<Vec<Timestamp>>,
    pub frames: Vec<FrameDetections>,
}

impl DetectionFile {
    pub fn new(video_id: VideoId, frames: Vec<FrameDetections>) -> Self {
        let size = frames
            .iter()
            .find_map(|f| f.detections.first().map(|d| d.mask.size()));
        Self {
            video_id,
            height: size.map(|s| s.0),
            width: size.map(|s| s.1),
            file_names: Vec::new(),
            timestamps: None,
            frames,
        }
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn size(&self) -> Option<(u32, u32)> {
        self.height.zip(self.width)
    }

    /// Video record for these frames. Missing frame names become
    /// `<video_id>/<frame>.png`; a missing size falls back to `fallback_size`.
    pub fn video_record(&self, fallback_size: (u32, u32)) -> VideoRecord {
        let (height, width) = self.size().unwrap_or(fallback_size);
        let names = if self.file_names.len() == self.frames.len() {
            self.file_names.clone()
        } else {
            (0..self.frames.len())
                .map(|t| format!("{}/{t:05}.png", self.video_id))
                .collect()
        };
        let mut video = VideoRecord::new(self.video_id, height, width, names);
        video.timestamps = self.timestamps.clone();
        video
    }
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<DetectionFile, IoError> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let wire: DetectionFileWire =
        serde_json::from_str(&text).map_err(|e| parse_error(path, &text, &e))?;
    let file_ctx = path.display().to_string();

    let mut size = wire.height.zip(wire.width);
    if let Some((h, w)) = size {
        if h == 0 || w == 0 {
            return Err(IoError::Dimension {
                context: file_ctx,
                message: format!("declared frame size {h}x{w} is empty"),
            });
        }
    }
    if !wire.file_names.is_empty() && wire.file_names.len() != wire.frames.len() {
        return Err(IoError::Dimension {
            context: file_ctx,
            message: format!(
                "{} file names for {} frames",
                wire.file_names.len(),
                wire.frames.len()
            ),
        });
    }
    if let Some(ts) = &wire.timestamps {
        if ts.len() != wire.frames.len() {
            return Err(IoError::Dimension {
                context: file_ctx,
                message: format!("{} timestamps for {} frames", ts.len(), wire.frames.len()),
            });
        }
    }

    let mut frames = Vec::with_capacity(wire.frames.len());
    for (frame_index, dets) in wire.frames.into_iter().enumerate() {
        let mut detections = Vec::with_capacity(dets.len());
        for (i, det) in dets.into_iter().enumerate() {
            let context = || format!("{file_ctx}: frame {frame_index} detection {i}");
            if !(0.0..=1.0).contains(&det.score) {
                return Err(IoError::ScoreRange {
                    context: context(),
                    score: det.score,
                });
            }
            let mask = det.segmentation.into_mask(context)?;
            match size {
                None => size = Some(mask.size()),
                Some(s) if s != mask.size() => {
                    return Err(IoError::Dimension {
                        context: context(),
                        message: format!(
                            "mask is {}x{} but the frames are {}x{}",
                            mask.height(),
                            mask.width(),
                            s.0,
                            s.1
                        ),
                    })
                }
                Some(_) => {}
            }
            detections.push(Detection {
                mask,
                score: det.score,
                category_id: det.category_id,
            });
        }
        frames.push(FrameDetections::new(frame_index, detections));
    }

    Ok(DetectionFile {
        video_id: wire.video_id,
        height: size.map(|s| s.0),
        width: size.map(|s| s.1),
        file_names: wire.file_names,
        timestamps: wire.timestamps,
        frames,
    })
}

pub fn write_detections(
    file: &DetectionFile,
    path: impl AsRef<Path>,
    options: WriteOptions,
) -> Result<(), IoError> {
    let wire = DetectionFileWire {
        video_id: file.video_id,
        height: file.height,
        width: file.width,
        file_names: file.file_names.clone(),
        timestamps: file.timestamps.clone(),
        frames: file
            .frames
            .iter()
            .map(|f| {
                f.detections
                    .iter()
                    .map(|d| DetectionWire {
                        category_id: d.category_id,
                        score: d.score,
                        segmentation: SegmentationWire::from_mask(&d.mask, options),
                    })
                    .collect()
            })
            .collect(),
    };
    write_text(path.as_ref(), &to_pretty_json(&wire))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(score: f64) -> String {
        format!(
            r#"{{"category_id": 1, "score": {score}, "segmentation": {{"size": [2, 2], "counts": [2, 1, 1]}}}}"#
        )
    }

    fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn two_frames_three_detections() {
        let dir = tempfile::tempdir().unwrap();
        let frame = format!("[{}, {}, {}]", det(0.9), det(0.8), det(0.1));
        let p = write(
            &dir,
            "d.json",
            &format!(r#"{{"video_id": 4, "frames": [{frame}, {frame}]}}"#),
        );
        let file = read_detections(&p).unwrap();
        assert_eq!(file.frames.len(), 2);
        assert!(file.frames.iter().all(|f| f.detections.len() == 3));
        assert_eq!(file.frames[1].frame_index, 1);
        assert_eq!(file.size(), Some((2, 2)));
    }

    #[test]
    fn score_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "d.json",
            &format!(r#"{{"video_id": 4, "frames": [[{}]]}}"#, det(1.2)),
        );
        let err = read_detections(&p).unwrap_err();
        assert!(matches!(err, IoError::ScoreRange { score, .. } if score == 1.2));
    }

    #[test]
    fn empty_frame_is_legal() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "d.json",
            &format!(r#"{{"video_id": 4, "frames": [[], [{}]]}}"#, det(0.5)),
        );
        let file = read_detections(&p).unwrap();
        assert!(file.frames[0].detections.is_empty());
        assert_eq!(file.frames[1].detections.len(), 1);
    }

    #[test]
    fn mixed_sizes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let other = r#"{"score": 0.5, "segmentation": {"size": [1, 4], "counts": [4]}}"#;
        let p = write(
            &dir,
            "d.json",
            &format!(
                r#"{{"video_id": 4, "frames": [[{}], [{other}]]}}"#,
                det(0.5)
            ),
        );
        assert!(matches!(
            read_detections(&p),
            Err(IoError::Dimension { .. })
        ));
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let frame = format!("[{}, {}]", det(0.9), det(0.25));
        let p = write(
            &dir,
            "d.json",
            &format!(r#"{{"video_id": 4, "timestamps": [1904], "frames": [{frame}]}}"#),
        );
        let file = read_detections(&p).unwrap();
        let out = dir.path().join("out.json");
        write_detections(&file, &out, WriteOptions::compressed()).unwrap();
        assert_eq!(read_detections(&out).unwrap(), file);
    }
}

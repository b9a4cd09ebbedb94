//! Videos paired with their annotation tracks.
//!
//! On disk a dataset is a directory holding `annotations.csv` with its
//! `annotations.json` sidecar and one frame container per video under
//! `videos/<video_id>.bin`. A video directory of numbered images can stand in
//! for the container when frames are given a size at load time.

use std::path::Path;

use crate::error::{Error, Result};
use crate::sampler::{load_annotations, save_annotations, AnnotationTrack};
use crate::video::VideoFrames;

pub const ANNOTATIONS: &str = "annotations.csv";
pub const VIDEOS: &str = "videos";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub tracks: Vec<AnnotationTrack>,
    pub videos: Vec<VideoFrames>,
}

impl Dataset {
    pub fn new(tracks: Vec<AnnotationTrack>, videos: Vec<VideoFrames>) -> Result<Self> {
        if tracks.len() != videos.len() {
            return Err(Error::Config(format!("{} tracks for {} videos", tracks.len(), videos.len())));
        }
        for (t, v) in tracks.iter().zip(&videos) {
            if t.num_frames != v.len {
                return Err(Error::Config(format!(
                    "video {} has {} frames but its track says {}",
                    t.video_id, v.len, t.num_frames
                )));
            }
        }
        Ok(Dataset { tracks, videos })
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    /// The videos at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            tracks: indices.iter().map(|&i| self.tracks[i].clone()).collect(),
            videos: indices.iter().map(|&i| self.videos[i].clone()).collect(),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join(VIDEOS))?;
        save_annotations(&self.tracks, dir.join(ANNOTATIONS))?;
        for (t, v) in self.tracks.iter().zip(&self.videos) {
            v.save(dir.join(VIDEOS).join(format!("{}.bin", t.video_id)))?;
        }
        Ok(())
    }

    /// Loads a dataset directory. `frame_size` is only used for videos
    /// stored as image directories.
    pub fn load(dir: impl AsRef<Path>, frame_size: Option<(usize, usize)>) -> Result<Self> {
        let dir = dir.as_ref();
        let tracks = load_annotations(dir.join(ANNOTATIONS))?;
        let videos = tracks
            .iter()
            .map(|t| load_video(&dir.join(VIDEOS), &t.video_id, frame_size))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(tracks, videos)
    }
}

/// Reads `<root>/<id>.bin`, or the image directory `<root>/<id>/`.
pub fn load_video(root: &Path, id: &str, frame_size: Option<(usize, usize)>) -> Result<VideoFrames> {
    let container = root.join(format!("{id}.bin"));
    if container.is_file() {
        return VideoFrames::load(container);
    }
    let images = root.join(id);
    if images.is_dir() {
        let (h, w) = frame_size
            .ok_or_else(|| Error::Config(format!("frame size needed to read image directory {}", images.display())))?;
        return VideoFrames::load_image_dir(images, h, w);
    }
    Err(Error::malformed(root, format!("no frames for video {id:?}")))
}

//! In-memory view of a dataset: the manifest plus every container it names.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::gvid::{self, DatasetManifest, Frame, VideoMeta};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    /// Path as written in the manifest (relative to the manifest directory).
    pub file: PathBuf,
    pub meta: VideoMeta,
    pub frames: Vec<Frame>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: DatasetManifest,
    /// One entry per distinct manifest file, in `manifest.files()` order.
    pub videos: Vec<Video>,
}

impl Corpus {
    pub fn new(manifest: DatasetManifest, videos: Vec<Video>) -> Result<Self> {
        manifest.validate()?;
        let files = manifest.files();
        if files.len() != videos.len() || files.iter().zip(&videos).any(|(f, v)| *f != v.file) {
            return Err(Error::Data("videos do not match manifest files".into()));
        }
        for seg in &manifest.segments {
            let v = &videos[files.iter().position(|f| *f == seg.file_id).unwrap()];
            if seg.end_frame as usize > v.frames.len() {
                return Err(Error::Data(format!(
                    "segment [{}..{}) exceeds {} frames of {}",
                    seg.start_frame,
                    seg.end_frame,
                    v.frames.len(),
                    v.file.display()
                )));
            }
        }
        Ok(Self { manifest, videos })
    }

    pub fn video_index(&self, file: &Path) -> Option<usize> {
        self.videos.iter().position(|v| v.file == file)
    }

    /// Loads `dir/manifest.json` and the containers it references.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(&dir.join(MANIFEST_FILE))?;
        let videos = manifest
            .files()
            .into_iter()
            .map(|file| {
                let (frames, meta) = gvid::load_container(&dir.join(&file))?;
                Ok(Video { file, meta, frames })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest, videos)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for v in &self.videos {
            gvid::save_container(&dir.join(&v.file), &v.frames, &v.meta)?;
        }
        self.manifest.save(&dir.join(MANIFEST_FILE))
    }

    pub fn frame_count(&self) -> usize {
        self.videos.iter().map(|v| v.frames.len()).sum()
    }
}

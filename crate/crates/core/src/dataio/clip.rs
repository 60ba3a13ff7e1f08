//! Video clips on disk: `<root>/<clip_id>/%06d.png`, optional
//! `<root>/<clip_id>/labels/%06d.png`, and a `clips.txt` manifest.

use std::fs;
use std::path::{Path, PathBuf};

use crate::dataio::image::{Image, LabelImage};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "clips.txt";
pub const LABEL_DIR: &str = "labels";

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub id: String,
    pub frames: Vec<Image>,
    /// Per-frame label maps when the clip carries segmentation ground truth.
    pub labels: Option<Vec<LabelImage>>,
}

impl VideoClip {
    pub fn new(id: impl Into<String>, frames: Vec<Image>) -> Result<Self> {
        let clip = Self { id: id.into(), frames, labels: None };
        clip.validate()?;
        Ok(clip)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, |f| f.width)
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, |f| f.height)
    }

    fn validate(&self) -> Result<()> {
        let Some(first) = self.frames.first() else {
            return Err(Error::EmptyClip(PathBuf::from(&self.id)));
        };
        for f in &self.frames {
            if f.width != first.width || f.height != first.height {
                return Err(Error::DimensionMismatch {
                    path: PathBuf::from(&self.id),
                    want_w: first.width,
                    want_h: first.height,
                    got_w: f.width,
                    got_h: f.height,
                });
            }
        }
        Ok(())
    }

    /// Writes frames (and labels, if any) under `<root>/<id>/`.
    pub fn save(&self, root: &Path) -> Result<()> {
        let dir = root.join(&self.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        for (i, f) in self.frames.iter().enumerate() {
            f.save_png(&dir.join(frame_name(i)))?;
        }
        if let Some(labels) = &self.labels {
            let ldir = dir.join(LABEL_DIR);
            fs::create_dir_all(&ldir).map_err(|e| Error::io(format!("creating {}", ldir.display()), e))?;
            for (i, l) in labels.iter().enumerate() {
                l.save_png(&ldir.join(frame_name(i)))?;
            }
        }
        Ok(())
    }
}

pub fn frame_name(i: usize) -> String {
    format!("{i:06}.png")
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(format!("reading {}", dir.display()), e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every PNG frame of a clip directory in ascending filename order,
/// plus the `labels/` subdirectory when present.
pub fn load_clip(path: &Path) -> Result<VideoClip> {
    if !path.is_dir() {
        return Err(Error::MissingClip(path.to_path_buf()));
    }
    let files = png_files(path)?;
    if files.is_empty() {
        return Err(Error::EmptyClip(path.to_path_buf()));
    }
    let mut frames: Vec<Image> = Vec::with_capacity(files.len());
    for f in &files {
        let img = Image::load_png(f)?;
        if let Some(first) = frames.first() {
            if (img.width, img.height) != (first.width, first.height) {
                return Err(Error::DimensionMismatch {
                    path: f.clone(),
                    want_w: first.width,
                    want_h: first.height,
                    got_w: img.width,
                    got_h: img.height,
                });
            }
        }
        frames.push(img);
    }
    let id = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ldir = path.join(LABEL_DIR);
    let labels = if ldir.is_dir() {
        let lfiles = png_files(&ldir)?;
        let mut labels = Vec::with_capacity(lfiles.len());
        for f in &lfiles {
            let l = LabelImage::load_png(f)?;
            if (l.width, l.height) != (frames[0].width, frames[0].height) {
                return Err(Error::DimensionMismatch {
                    path: f.clone(),
                    want_w: frames[0].width,
                    want_h: frames[0].height,
                    got_w: l.width,
                    got_h: l.height,
                });
            }
            labels.push(l);
        }
        (!labels.is_empty()).then_some(labels)
    } else {
        None
    };
    Ok(VideoClip { id, frames, labels })
}

/// Clip ids listed in `<root>/clips.txt`, one per line (blank lines ignored).
pub fn read_manifest(root: &Path) -> Result<Vec<String>> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

pub fn write_manifest(root: &Path, ids: &[String]) -> Result<()> {
    let path = root.join(MANIFEST);
    let mut text = ids.join("\n");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Loads every clip named in the manifest.
pub fn load_dataset(root: &Path) -> Result<Vec<VideoClip>> {
    read_manifest(root)?.iter().map(|id| load_clip(&root.join(id))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_frames(dir: &Path, sizes: &[(usize, usize)]) {
        fs::create_dir_all(dir).unwrap();
        for (i, &(w, h)) in sizes.iter().enumerate() {
            Image::filled(w, h, [0.2, 0.4, 0.6]).save_png(&dir.join(frame_name(i))).unwrap();
        }
    }

    #[test]
    fn loads_ten_frames_in_order() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("clip");
        fs::create_dir_all(&dir).unwrap();
        for i in (0..10).rev() {
            let v = i as f64 / 10.0;
            Image::filled(8, 8, [v, v, v]).quantized().save_png(&dir.join(frame_name(i))).unwrap();
        }
        let clip = load_clip(&dir).unwrap();
        assert_eq!(clip.len(), 10);
        assert_eq!(clip.id, "clip");
        for (i, f) in clip.frames.iter().enumerate() {
            let want = ((i as f64 / 10.0) * 255.0).round() / 255.0;
            assert_eq!(f.pixel(0, 0)[0], want);
        }
        assert!(clip.labels.is_none());
    }

    #[test]
    fn mixed_sizes_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("clip");
        write_frames(&dir, &[(64, 64), (32, 32)]);
        assert!(matches!(load_clip(&dir), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn empty_and_missing_directories() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(load_clip(tmp.path()), Err(Error::EmptyClip(_))));
        assert!(matches!(load_clip(&tmp.path().join("nope")), Err(Error::MissingClip(_))));
    }

    #[test]
    fn undecodable_frame_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(tmp.path().join("000000.png"), b"not a png").unwrap();
        assert!(matches!(load_clip(tmp.path()), Err(Error::Decode { .. })));
    }

    #[test]
    fn save_and_reload_with_labels() {
        let tmp = tempfile::tempdir().unwrap();
        let mut clip = VideoClip::new("c0", vec![Image::filled(4, 4, [1.0, 0.0, 0.0]); 3]).unwrap();
        clip.labels = Some(vec![LabelImage::new(4, 4, vec![1; 16]).unwrap(); 3]);
        clip.save(tmp.path()).unwrap();
        write_manifest(tmp.path(), &["c0".to_string()]).unwrap();
        let ds = load_dataset(tmp.path()).unwrap();
        assert_eq!(ds, vec![clip]);
    }
}

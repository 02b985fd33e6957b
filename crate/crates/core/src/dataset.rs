//! Image folders on disk, and the labelled variant used to train the parser.
//!
//! A plain dataset is a directory of PNG/JPEG files. A labelled dataset holds
//! `images/NAME.png` next to `labels/NAME.png`, the latter single-channel with
//! raw label values 0..=10.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imaging::{load_image, save_image, ImageTensor};
use crate::networks::LabelMap;
use crate::synthetic::SyntheticFace;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub ids: Vec<String>,
    pub images: Vec<ImageTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub ids: Vec<String>,
    pub images: Vec<ImageTensor>,
    pub labels: Vec<LabelMap>,
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("dataset not found: {}", dir.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

impl ImageSet {
    /// Loads every image in `dir`, sorted by file name. All images must share
    /// one square size.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut set = ImageSet {
            ids: Vec::new(),
            images: Vec::new(),
        };
        for path in image_files(dir)? {
            let img = load_image(&path)?;
            set.push(stem(&path), img)?;
        }
        if set.is_empty() {
            return Err(Error::Config(format!("dataset not found: no images in {}", dir.display())));
        }
        Ok(set)
    }

    pub fn from_faces(faces: &[SyntheticFace]) -> Self {
        Self {
            ids: faces.iter().map(|f| f.id.clone()).collect(),
            images: faces.iter().map(|f| f.image.clone()).collect(),
        }
    }

    fn push(&mut self, id: String, img: ImageTensor) -> Result<()> {
        if img.height() != img.width() {
            return Err(Error::Shape(format!("{id}: images must be square, got {:?}", img.dims())));
        }
        if let Some(first) = self.images.first() {
            if !first.same_shape(&img) {
                return Err(Error::Shape(format!("{id}: {:?} differs from {:?}", img.dims(), first.dims())));
            }
        }
        self.ids.push(id);
        self.images.push(img);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.first().map_or(0, |i| i.height())
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (id, img) in self.ids.iter().zip(&self.images) {
            save_image(img, dir.join(format!("{id}.png")))?;
        }
        Ok(())
    }
}

impl LabeledSet {
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut set = LabeledSet {
            ids: Vec::new(),
            images: Vec::new(),
            labels: Vec::new(),
        };
        for path in image_files(&dir.join("images"))? {
            let id = stem(&path);
            let label_path = dir.join("labels").join(format!("{id}.png"));
            if !label_path.is_file() {
                tracing::warn!("{id}: no label map, skipping");
                continue;
            }
            let img = load_image(&path)?;
            let labels = LabelMap::load(&label_path)?;
            if labels.dims() != img.dims() {
                return Err(Error::Shape(format!("{id}: label map {:?} for image {:?}", labels.dims(), img.dims())));
            }
            set.ids.push(id);
            set.images.push(img);
            set.labels.push(labels);
        }
        if set.ids.is_empty() {
            return Err(Error::Config(format!("dataset not found: no labelled images in {}", dir.display())));
        }
        Ok(set)
    }

    pub fn from_faces(faces: &[SyntheticFace]) -> Self {
        Self {
            ids: faces.iter().map(|f| f.id.clone()).collect(),
            images: faces.iter().map(|f| f.image.clone()).collect(),
            labels: faces.iter().map(|f| f.labels.clone()).collect(),
        }
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["images", "labels"] {
            std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        for ((id, img), labels) in self.ids.iter().zip(&self.images).zip(&self.labels) {
            save_image(img, dir.join("images").join(format!("{id}.png")))?;
            let path = dir.join("labels").join(format!("{id}.png"));
            std::fs::write(&path, labels.encode_png()?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Splits off every `k`-th item (by position) as a validation set.
    pub fn split_validation(&self, k: usize) -> (LabeledSet, LabeledSet) {
        let mut train = LabeledSet {
            ids: Vec::new(),
            images: Vec::new(),
            labels: Vec::new(),
        };
        let mut val = train.clone();
        for i in 0..self.len() {
            let dst = if k > 0 && i % k == k - 1 { &mut val } else { &mut train };
            dst.ids.push(self.ids[i].clone());
            dst.images.push(self.images[i].clone());
            dst.labels.push(self.labels[i].clone());
        }
        (train, val)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{synthetic_faces, SyntheticConfig};

    #[test]
    fn missing_directory_reports_dataset_not_found() {
        let err = ImageSet::load_dir("/definitely/not/here").unwrap_err();
        assert!(err.to_string().contains("dataset not found"));
    }

    #[test]
    fn labelled_round_trip() {
        let faces = synthetic_faces(&SyntheticConfig::new(32, 2, 2, 3)).unwrap();
        let set = LabeledSet::from_faces(&faces);
        let dir = tempfile::tempdir().unwrap();
        set.save_dir(dir.path()).unwrap();
        let back = LabeledSet::load_dir(dir.path()).unwrap();
        assert_eq!(back.ids, set.ids);
        assert_eq!(back.labels, set.labels);
        assert!(back.images.iter().zip(&set.images).all(|(a, b)| a.max_abs_diff(b) <= 0.5 / 255.0 + 1e-6));

        let plain = ImageSet::load_dir(dir.path().join("images")).unwrap();
        assert_eq!(plain.len(), 4);
        assert_eq!(plain.image_size(), 32);
    }
}

//! Dataset loading and the class-fold evaluation protocol.
//!
//! On-disk layout:
//!
//! ```text
//! <root>/images/<id>.png    8-bit RGB
//! <root>/labels/<id>.png    8-bit single-channel class indices
//! <root>/classes.txt        one class name per line; line number = class id
//! ```
//!
//! Folds partition *classes*, not images: one fold is held out for testing
//! while episodes for training are drawn from the remaining folds.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{BinaryMask, Tensor};

pub type ClassId = u8;

/// Per-pixel class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Label {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl Label {
    pub fn from_vec(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(format!(
                "label expects {}x{} = {} values, got {}",
                h,
                w,
                h * w,
                data.len()
            )));
        }
        Ok(Label { h, w, data })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> ClassId {
        self.data[y * self.w + x]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn max_class(&self) -> ClassId {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Binary mask of pixels labeled `class`.
    pub fn mask_for(&self, class: ClassId) -> BinaryMask {
        let mut m = BinaryMask::zeros(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) == class {
                    m.set(y, x, 1);
                }
            }
        }
        m
    }

    pub fn contains_class(&self, class: ClassId) -> bool {
        self.data.iter().any(|&v| v == class)
    }
}

/// One image with its pixel labels and a stable identifier.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub id: String,
    /// `h x w x 3`, intensities in `[0, 1]`.
    pub image: Tensor,
    pub label: Label,
}

impl LabeledImage {
    pub fn new(id: impl Into<String>, image: Tensor, label: Label) -> Result<Self> {
        let (h, w, c) = image.shape();
        if c != 3 {
            return Err(Error::Shape(format!("image must have 3 channels, got {c}")));
        }
        if (h, w) != label.shape() {
            return Err(Error::Shape(format!(
                "image {}x{} and label {:?} disagree",
                h,
                w,
                label.shape()
            )));
        }
        Ok(LabeledImage {
            id: id.into(),
            image,
            label,
        })
    }
}

/// An immutable loaded dataset: images in lexicographic id order plus the
/// class-name table.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub items: Vec<LabeledImage>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Indices of images containing at least one pixel of `class`,
    /// in dataset (id) order.
    pub fn eligible_for(&self, class: ClassId) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, item)| item.label.contains_class(class))
            .map(|(i, _)| i)
            .collect()
    }

    /// Class ids sorted by class name; the canonical order used for fold
    /// assignment.
    pub fn classes_by_name(&self) -> Vec<ClassId> {
        let mut ids: Vec<ClassId> = (0..self.class_names.len() as u8).collect();
        ids.sort_by(|a, b| self.class_names[*a as usize].cmp(&self.class_names[*b as usize]));
        ids
    }
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Read `classes.txt`: one class name per line, line number = class id.
pub fn load_class_names(root: &Path) -> Result<Vec<String>> {
    let path = root.join("classes.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let names: Vec<String> = text
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    if names.is_empty() {
        return Err(Error::Validation {
            id: path.display().to_string(),
            reason: "classes.txt lists no classes".into(),
        });
    }
    Ok(names)
}

/// Load all image/label pairs under `root`. Every image must have a label
/// file with the same stem and vice versa; label values are validated
/// against the class list.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let class_names = load_class_names(root)?;
    let images_dir = root.join("images");
    let labels_dir = root.join("labels");
    let image_ids = png_stems(&images_dir)?;
    let label_ids = png_stems(&labels_dir)?;

    let image_set: BTreeSet<&String> = image_ids.iter().collect();
    let label_set: BTreeSet<&String> = label_ids.iter().collect();
    if let Some(orphan) = image_ids.iter().find(|id| !label_set.contains(id)) {
        return Err(Error::OrphanEntry {
            id: orphan.clone(),
            missing: "label",
        });
    }
    if let Some(orphan) = label_ids.iter().find(|id| !image_set.contains(id)) {
        return Err(Error::OrphanEntry {
            id: orphan.clone(),
            missing: "image",
        });
    }

    let mut items = Vec::with_capacity(image_ids.len());
    for id in &image_ids {
        let image_path = images_dir.join(format!("{id}.png"));
        let label_path = labels_dir.join(format!("{id}.png"));
        let image = load_rgb_image(&image_path)?;
        let label = load_label_image(&label_path)?;
        if let Some(max) = label.data().iter().max() {
            if *max as usize >= class_names.len() {
                return Err(Error::Validation {
                    id: id.clone(),
                    reason: format!(
                        "label value {} out of range for {} classes",
                        max,
                        class_names.len()
                    ),
                });
            }
        }
        items.push(LabeledImage::new(id.clone(), image, label)?);
    }

    Ok(Dataset { items, class_names })
}

pub fn load_rgb_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(buf) => buf,
        other => {
            return Err(Error::Validation {
                id: path.display().to_string(),
                reason: format!("expected 8-bit RGB, got {:?}", other.color()),
            })
        }
    };
    let (w, h) = rgb.dimensions();
    let mut t = Tensor::zeros(h as usize, w as usize, 3);
    for (x, y, px) in rgb.enumerate_pixels() {
        for ch in 0..3 {
            *t.at_mut(y as usize, x as usize, ch) = px[ch] as f64 / 255.0;
        }
    }
    Ok(t)
}

pub fn load_label_image(path: &Path) -> Result<Label> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(buf) => buf,
        other => {
            return Err(Error::Validation {
                id: path.display().to_string(),
                reason: format!("expected 8-bit single-channel label, got {:?}", other.color()),
            })
        }
    };
    let (w, h) = gray.dimensions();
    Label::from_vec(h as usize, w as usize, gray.into_raw())
}

/// Class folds with one fold held out for testing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    folds: Vec<Vec<ClassId>>,
    fold_index: usize,
}

impl FoldSplit {
    pub fn folds(&self) -> &[Vec<ClassId>] {
        &self.folds
    }

    pub fn fold_index(&self) -> usize {
        self.fold_index
    }

    pub fn test_classes(&self) -> &[ClassId] {
        &self.folds[self.fold_index]
    }

    pub fn train_classes(&self) -> Vec<ClassId> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != self.fold_index)
            .flat_map(|(_, f)| f.iter().copied())
            .collect()
    }

    pub fn is_test_class(&self, class: ClassId) -> bool {
        self.test_classes().contains(&class)
    }

    /// Same folds, different held-out fold.
    pub fn with_test_fold(&self, fold_index: usize) -> Result<FoldSplit> {
        if fold_index >= self.folds.len() {
            return Err(Error::Config(format!(
                "test fold {} out of range for {} folds",
                fold_index,
                self.folds.len()
            )));
        }
        Ok(FoldSplit {
            folds: self.folds.clone(),
            fold_index,
        })
    }
}

/// Chunk `ordered_classes` into folds of the given sizes. The caller fixes
/// the order (canonically: alphabetical by class name, see
/// [`Dataset::classes_by_name`]); assignment is deterministic.
pub fn partition_folds(
    ordered_classes: &[ClassId],
    fold_sizes: &[usize],
    test_fold: usize,
) -> Result<FoldSplit> {
    let total: usize = fold_sizes.iter().sum();
    if total != ordered_classes.len() {
        return Err(Error::Config(format!(
            "fold sizes {:?} sum to {}, but there are {} classes",
            fold_sizes,
            total,
            ordered_classes.len()
        )));
    }
    if fold_sizes.iter().any(|&s| s == 0) {
        return Err(Error::Config("empty folds are not allowed".into()));
    }
    let distinct: BTreeSet<ClassId> = ordered_classes.iter().copied().collect();
    if distinct.len() != ordered_classes.len() {
        return Err(Error::Config("duplicate class ids in fold input".into()));
    }
    if test_fold >= fold_sizes.len() {
        return Err(Error::Config(format!(
            "test fold {} out of range for {} folds",
            test_fold,
            fold_sizes.len()
        )));
    }
    let mut folds = Vec::with_capacity(fold_sizes.len());
    let mut offset = 0;
    for &size in fold_sizes {
        folds.push(ordered_classes[offset..offset + size].to_vec());
        offset += size;
    }
    Ok(FoldSplit {
        folds,
        fold_index: test_fold,
    })
}

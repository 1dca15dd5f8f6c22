//! Dataset ingestion for `product/{train,test}/{good,<defect>}/*.png` trees
//! with masks under `product/ground_truth/<defect>/<stem>_mask.png`.
//!
//! Images whose defect folder is `combined` may ship one mask per defect as
//! `<stem>_mask_<variation>.png`; without them they count as binary-only.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::encoder::ImageTensor;
use crate::error::{Error, Result};
use crate::infer::{LabelMap, Mask};
use crate::kba::{normalize_term, Kba, NORMAL_STATE};

pub const IMAGE_SIZE: usize = 518;
pub const GOOD_FOLDER: &str = "good";
pub const COMBINED_FOLDER: &str = "combined";
const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];
const MASK_THRESHOLD: u8 = 127;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.48145466, 0.4578275, 0.40821073],
            std: [0.26862954, 0.26130258, 0.27577711],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One image found by [`scan_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDescriptor {
    pub image_path: PathBuf,
    /// Path relative to the dataset root, `/`-separated.
    pub rel_path: String,
    pub product: String,
    pub split: Split,
    pub defect_folder: String,
    /// Resolved superclass; `None` for good and combined images.
    pub defect_id: Option<String>,
    pub combined: bool,
    pub mask_path: Option<PathBuf>,
    /// Per-defect masks of a combined image, as (superclass, path).
    pub defect_masks: Vec<(String, PathBuf)>,
}

impl SampleDescriptor {
    pub fn is_normal(&self) -> bool {
        self.defect_folder == GOOD_FOLDER
    }

    /// Anomalous but without a per-pixel defect assignment.
    pub fn is_binary_only(&self) -> bool {
        self.combined && self.defect_masks.is_empty()
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn is_image(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn layout(path: &Path, reason: impl Into<String>) -> Error {
    Error::Layout {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Product directories of `root`: those holding a `train` or `test` folder.
pub fn list_products(root: &Path) -> Result<Vec<String>> {
    Ok(sorted_entries(root)?
        .into_iter()
        .filter(|p| p.join("train").is_dir() || p.join("test").is_dir())
        .map(|p| file_name(&p))
        .collect())
}

/// Descriptors of every image under `root`, products and files in sorted order.
pub fn scan_dataset(root: &Path, kba: &Kba) -> Result<Vec<SampleDescriptor>> {
    let products = list_products(root)?;
    if products.is_empty() {
        return Err(layout(root, "no product folders with train/ or test/"));
    }
    let mut out = Vec::new();
    for product in products {
        out.extend(scan_product(root, &product, kba)?);
    }
    Ok(out)
}

pub fn scan_product(root: &Path, product: &str, kba: &Kba) -> Result<Vec<SampleDescriptor>> {
    let pdir = root.join(product);
    if !pdir.is_dir() {
        return Err(layout(&pdir, "product folder not found"));
    }
    let mut out = Vec::new();
    for split in [Split::Train, Split::Test] {
        let sdir = pdir.join(split.dir_name());
        if !sdir.is_dir() {
            continue;
        }
        for folder in sorted_entries(&sdir)?.into_iter().filter(|p| p.is_dir()) {
            let folder_name = file_name(&folder);
            let normal = folder_name == GOOD_FOLDER;
            let combined = normalize_term(&folder_name) == COMBINED_FOLDER;
            let defect_id = if normal || combined {
                None
            } else {
                Some(
                    kba.resolve_superclass(&folder_name)
                        .map_err(|_| {
                            layout(
                                &folder,
                                format!("defect folder `{folder_name}` matches no known defect"),
                            )
                        })?
                        .to_string(),
                )
            };
            for img in sorted_entries(&folder)?.into_iter().filter(|p| is_image(p)) {
                let stem = img
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let gt_dir = pdir.join("ground_truth").join(&folder_name);
                let (mask_path, defect_masks) = if normal {
                    (None, Vec::new())
                } else {
                    let mask = gt_dir.join(format!("{stem}_mask.png"));
                    let per_defect = if combined {
                        per_defect_masks(&gt_dir, &stem, kba)?
                    } else {
                        Vec::new()
                    };
                    if !mask.is_file() && per_defect.is_empty() {
                        return Err(layout(&mask, "anomalous image has no mask"));
                    }
                    (mask.is_file().then_some(mask), per_defect)
                };
                out.push(SampleDescriptor {
                    rel_path: format!(
                        "{product}/{}/{folder_name}/{}",
                        split.dir_name(),
                        file_name(&img)
                    ),
                    image_path: img,
                    product: product.to_string(),
                    split,
                    defect_folder: folder_name.clone(),
                    defect_id: defect_id.clone(),
                    combined,
                    mask_path,
                    defect_masks,
                });
            }
        }
    }
    Ok(out)
}

fn per_defect_masks(gt_dir: &Path, stem: &str, kba: &Kba) -> Result<Vec<(String, PathBuf)>> {
    if !gt_dir.is_dir() {
        return Ok(Vec::new());
    }
    let prefix = format!("{stem}_mask_");
    let mut out = Vec::new();
    for p in sorted_entries(gt_dir)? {
        let name = file_name(&p);
        let Some(rest) = name.strip_prefix(&prefix) else {
            continue;
        };
        let variation = rest.rsplit_once('.').map_or(rest, |(v, _)| v);
        let id = kba.resolve_superclass(variation).map_err(|_| {
            layout(
                &p,
                format!("mask variation `{variation}` matches no known defect"),
            )
        })?;
        out.push((id.to_string(), p));
    }
    Ok(out)
}

fn decode(bytes: &[u8], path: &Path) -> Result<image::DynamicImage> {
    image::load_from_memory(bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Resize (bilinear) to `size`×`size`, scale to [0, 1] and standardize.
pub fn preprocess_rgb(img: &image::RgbImage, size: usize, norm: &Normalization) -> ImageTensor {
    let resized;
    let src = if img.width() as usize == size && img.height() as usize == size {
        img
    } else {
        resized = image::imageops::resize(
            img,
            size as u32,
            size as u32,
            image::imageops::FilterType::Triangle,
        );
        &resized
    };
    ImageTensor::from_shape_fn((size, size, 3), |(y, x, c)| {
        let v = f64::from(src.get_pixel(x as u32, y as u32)[c]) / 255.0;
        ((v - norm.mean[c]) / norm.std[c]) as f32
    })
}

pub fn preprocess(bytes: &[u8], size: usize, norm: &Normalization) -> Result<ImageTensor> {
    Ok(preprocess_rgb(
        &decode(bytes, Path::new("<memory>"))?.to_rgb8(),
        size,
        norm,
    ))
}

pub fn load_image(path: &Path, size: usize, norm: &Normalization) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(preprocess_rgb(&decode(&bytes, path)?.to_rgb8(), size, norm))
}

/// Grayscale mask binarized at > 127, resized nearest-neighbour.
pub fn load_mask(path: &Path, size: usize) -> Result<Mask> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let gray = decode(&bytes, path)?.to_luma8();
    let gray = if gray.width() as usize == size && gray.height() as usize == size {
        gray
    } else {
        image::imageops::resize(
            &gray,
            size as u32,
            size as u32,
            image::imageops::FilterType::Nearest,
        )
    };
    Ok(Array2::from_shape_fn((size, size), |(y, x)| {
        gray.get_pixel(x as u32, y as u32)[0] > MASK_THRESHOLD
    }))
}

/// Label map of (defect id, mask) pairs over `roster`. Where masks overlap
/// the defect listed earliest in the roster wins.
pub fn build_multi_defect_map(
    masks: &[(String, Mask)],
    roster: &[String],
    shape: (usize, usize),
) -> Result<LabelMap> {
    let mut out = LabelMap::zeros(shape);
    for (id, mask) in masks {
        if mask.dim() != shape {
            return Err(Error::ShapeMismatch(format!(
                "mask {:?} vs {:?}",
                mask.dim(),
                shape
            )));
        }
        let idx = roster
            .iter()
            .position(|r| r == id)
            .filter(|&i| i > 0 && id != NORMAL_STATE)
            .ok_or_else(|| Error::UnknownState(id.clone()))?;
        let idx = u8::try_from(idx).map_err(|_| Error::LabelOutOfRange {
            label: idx,
            classes: 256,
        })?;
        out.zip_mut_with(mask, |l, &m| {
            if m && (*l == 0 || idx < *l) {
                *l = idx;
            }
        });
    }
    Ok(out)
}

/// Ground truth of one sample at `size`×`size`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMaps {
    pub binary: Mask,
    /// `None` for binary-only images.
    pub multi: Option<LabelMap>,
}

pub fn load_ground_truth(
    desc: &SampleDescriptor,
    roster: &[String],
    size: usize,
) -> Result<GroundTruthMaps> {
    let shape = (size, size);
    if desc.is_normal() {
        return Ok(GroundTruthMaps {
            binary: Mask::from_elem(shape, false),
            multi: Some(LabelMap::zeros(shape)),
        });
    }
    let per_defect = desc
        .defect_masks
        .iter()
        .map(|(id, p)| Ok((id.clone(), load_mask(p, size)?)))
        .collect::<Result<Vec<_>>>()?;
    let binary = match &desc.mask_path {
        Some(p) => load_mask(p, size)?,
        None => {
            let mut union = Mask::from_elem(shape, false);
            for (_, m) in &per_defect {
                union.zip_mut_with(m, |u, &v| *u |= v);
            }
            union
        }
    };
    let multi = match (&desc.defect_id, per_defect.is_empty()) {
        (Some(id), _) => Some(build_multi_defect_map(
            &[(id.clone(), binary.clone())],
            roster,
            shape,
        )?),
        (None, false) => Some(build_multi_defect_map(&per_defect, roster, shape)?),
        (None, true) => None,
    };
    Ok(GroundTruthMaps { binary, multi })
}

/// A descriptor with its pixels and ground truth loaded.
#[derive(Debug, Clone)]
pub struct Sample {
    pub descriptor: SampleDescriptor,
    pub image: Option<ImageTensor>,
    pub gt: GroundTruthMaps,
}

pub fn load_sample(
    desc: &SampleDescriptor,
    roster: &[String],
    size: usize,
    norm: &Normalization,
    with_pixels: bool,
) -> Result<Sample> {
    Ok(Sample {
        descriptor: desc.clone(),
        image: if with_pixels {
            Some(load_image(&desc.image_path, size, norm)?)
        } else {
            None
        },
        gt: load_ground_truth(desc, roster, size)?,
    })
}

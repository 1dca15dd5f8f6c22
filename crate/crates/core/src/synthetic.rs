//! Separable synthetic dataset for end-to-end checks with the mock backend.
//!
//! Normal images are a flat gray texture with mild noise. A `spot` is a disk
//! with shifted color; a `scratch` is a band of high-contrast checkerboard
//! whose mean matches the background, so only its variance differs.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{
    build_multi_defect_map, preprocess_rgb, GroundTruthMaps, Normalization, Sample,
    SampleDescriptor, Split, GOOD_FOLDER,
};
use crate::encoder::mock::MockConfig;
use crate::error::{Error, Result};
use crate::infer::Mask;
use crate::kba::{bundled, Kba, ProductClass};
use crate::prompts::build_state_roster;

pub const PRODUCT: &str = "plate";
pub const DEFECTS: [&str; 2] = ["scratch", "spot"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Good,
    Spot,
    Scratch,
}

impl Kind {
    pub fn folder(self) -> &'static str {
        match self {
            Kind::Good => GOOD_FOLDER,
            Kind::Spot => "spot",
            Kind::Scratch => "scratch",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureConfig {
    pub seed: u64,
    pub size: usize,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            seed: 7,
            size: 64,
            n_train: 60,
            n_test: 40,
        }
    }
}

/// A one-product knowledge base with the VisA spot and scratch states.
pub fn fixture_kba() -> Result<Kba> {
    let mut kba = bundled::load("visa")?;
    kba.defect_types
        .retain(|id, _| DEFECTS.contains(&id.as_str()));
    kba.products = IndexMap::from([(
        PRODUCT.to_string(),
        ProductClass {
            relevant_defect_ids: DEFECTS.iter().map(|s| s.to_string()).collect(),
        },
    )]);
    kba.validate()?;
    Ok(kba)
}

/// Two 8×8 stages, enough resolution for 64-pixel images.
pub fn mock_config(seed: u64) -> MockConfig {
    MockConfig::uniform(seed, 2, 8, 24, 16)
}

/// Cycles normal, spot, scratch.
pub fn kind_of(i: usize) -> Kind {
    [Kind::Good, Kind::Spot, Kind::Scratch][i % 3]
}

pub fn render(kind: Kind, size: usize, rng: &mut impl Rng) -> (RgbImage, Mask) {
    let s = size as u32;
    let mut img = RgbImage::from_fn(s, s, |_, _| {
        let n: i32 = rng.random_range(-6..=6);
        let v = (128 + n) as u8;
        Rgb([v, v, v])
    });
    let mut mask = Mask::from_elem((size, size), false);
    let margin = size as f64 * 0.2;
    match kind {
        Kind::Good => {}
        Kind::Spot => {
            let r = rng.random_range(size as f64 * 0.12..size as f64 * 0.18);
            let cy = rng.random_range(margin..size as f64 - margin);
            let cx = rng.random_range(margin..size as f64 - margin);
            for (x, y, p) in img.enumerate_pixels_mut() {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    p.0 = [p.0[0].saturating_add(70), p.0[1], p.0[2].saturating_sub(60)];
                    mask[[y as usize, x as usize]] = true;
                }
            }
        }
        Kind::Scratch => {
            let width = rng.random_range(size / 8..=size / 6);
            let start = rng.random_range(size / 5..size - size / 5 - width);
            let vertical = rng.random_bool(0.5);
            for (x, y, p) in img.enumerate_pixels_mut() {
                let along = if vertical { x } else { y } as usize;
                if (start..start + width).contains(&along) {
                    let v = if (x + y) % 2 == 0 { 208 } else { 48 };
                    p.0 = [v, v, v];
                    mask[[y as usize, x as usize]] = true;
                }
            }
        }
    }
    (img, mask)
}

fn descriptor(split: Split, kind: Kind, i: usize) -> SampleDescriptor {
    let name = format!("{i:03}.png");
    SampleDescriptor {
        image_path: Path::new(PRODUCT)
            .join(split.dir_name())
            .join(kind.folder())
            .join(&name),
        rel_path: format!("{PRODUCT}/{}/{}/{name}", split.dir_name(), kind.folder()),
        product: PRODUCT.to_string(),
        split,
        defect_folder: kind.folder().to_string(),
        defect_id: (kind != Kind::Good).then(|| kind.folder().to_string()),
        combined: false,
        mask_path: None,
        defect_masks: Vec::new(),
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub kba: Kba,
    pub roster: Vec<String>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn samples(
    split: Split,
    n: usize,
    offset: usize,
    cfg: &FixtureConfig,
    roster: &[String],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Sample>> {
    let norm = Normalization::default();
    (0..n)
        .map(|i| {
            let kind = kind_of(i);
            let (img, mask) = render(kind, cfg.size, rng);
            let multi = match kind {
                Kind::Good => build_multi_defect_map(&[], roster, mask.dim())?,
                k => build_multi_defect_map(
                    &[(k.folder().to_string(), mask.clone())],
                    roster,
                    mask.dim(),
                )?,
            };
            Ok(Sample {
                descriptor: descriptor(split, kind, offset + i),
                image: Some(preprocess_rgb(&img, cfg.size, &norm)),
                gt: GroundTruthMaps {
                    binary: mask,
                    multi: Some(multi),
                },
            })
        })
        .collect()
}

/// In-memory train and test splits.
pub fn generate(cfg: &FixtureConfig) -> Result<Fixture> {
    let kba = fixture_kba()?;
    let roster = build_state_roster(&kba, PRODUCT, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = samples(Split::Train, cfg.n_train, 0, cfg, &roster, &mut rng)?;
    let test = samples(Split::Test, cfg.n_test, cfg.n_train, cfg, &roster, &mut rng)?;
    Ok(Fixture {
        kba,
        roster,
        train,
        test,
    })
}

fn save(img: image::DynamicImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes the same images as [`generate`] as a dataset tree under `root`.
/// Both splits hold defective images; file numbering runs across splits so
/// mask names stay unique. Returns image counts.
pub fn write_tree(root: &Path, cfg: &FixtureConfig) -> Result<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for (split, n, offset) in [
        (Split::Train, cfg.n_train, 0),
        (Split::Test, cfg.n_test, cfg.n_train),
    ] {
        for i in 0..n {
            let kind = kind_of(i);
            let (img, mask) = render(kind, cfg.size, &mut rng);
            let d = descriptor(split, kind, offset + i);
            save(img.into(), &root.join(&d.image_path))?;
            if kind != Kind::Good {
                let gray = GrayImage::from_fn(cfg.size as u32, cfg.size as u32, |x, y| {
                    Luma([if mask[[y as usize, x as usize]] {
                        255
                    } else {
                        0
                    }])
                });
                let mask_path = root
                    .join(PRODUCT)
                    .join("ground_truth")
                    .join(kind.folder())
                    .join(format!("{:03}_mask.png", offset + i));
                save(gray.into(), &mask_path)?;
            }
        }
    }
    Ok((cfg.n_train, cfg.n_test))
}

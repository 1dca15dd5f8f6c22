//! On-disk artifacts of an inference run.
//!
//! * `<stem>.png` 8-bit grayscale heatmap (score × 255, rounded) and
//!   `<stem>.f32` raw little-endian H×W scores.
//! * `<stem>_labels.png` 8-bit indexed label map and `<stem>_labels.json`
//!   palette (index → state id, display color).
//! * `<stem>_mdm.f32` the (K+1)×H×W state probabilities.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{AnomalyMap, LabelMap, MultiDefectMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub index: u8,
    pub state_id: String,
    pub rgb: [u8; 3],
}

/// Normal is black; defect states get evenly spaced hues.
pub fn palette(state_ids: &[String]) -> Vec<PaletteEntry> {
    let k = state_ids.len().saturating_sub(1).max(1);
    state_ids
        .iter()
        .enumerate()
        .map(|(i, id)| PaletteEntry {
            index: i as u8,
            state_id: id.clone(),
            rgb: if i == 0 {
                [0, 0, 0]
            } else {
                hue_rgb((i - 1) as f64 / k as f64)
            },
        })
        .collect()
}

fn hue_rgb(h: f64) -> [u8; 3] {
    let h6 = h * 6.0;
    let f = h6 - h6.floor();
    let (r, g, b) = match h6.floor() as u32 % 6 {
        0 => (1.0, f, 0.0),
        1 => (1.0 - f, 1.0, 0.0),
        2 => (0.0, 1.0, f),
        3 => (0.0, 1.0 - f, 1.0),
        4 => (f, 0.0, 1.0),
        _ => (1.0, 0.0, 1.0 - f),
    };
    let q = |v: f64| (v * 255.0).round() as u8;
    [q(r), q(g), q(b)]
}

pub fn heatmap_bytes(scores: &Array2<f64>) -> Vec<u8> {
    scores
        .iter()
        .map(|s| (s.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn write_heatmap_png(map: &AnomalyMap, path: &Path) -> Result<()> {
    let (h, w) = map.scores.dim();
    let img = image::GrayImage::from_raw(w as u32, h as u32, heatmap_bytes(&map.scores))
        .expect("buffer sized to the map");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

pub fn f32_bytes<'a>(vals: impl IntoIterator<Item = &'a f64>) -> Vec<u8> {
    vals.into_iter()
        .flat_map(|v| (*v as f32).to_le_bytes())
        .collect()
}

pub fn write_f32(path: &Path, vals: &[u8]) -> Result<()> {
    std::fs::write(path, vals).map_err(|e| Error::io(path, e))
}

pub fn read_f32_map(path: &Path, height: usize, width: usize) -> Result<Array2<f64>> {
    let v = read_f32s(path, height * width)?;
    Ok(Array2::from_shape_vec((height, width), v).expect("length checked"))
}

pub fn read_f32_stack(
    path: &Path,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<Array3<f64>> {
    let v = read_f32s(path, channels * height * width)?;
    Ok(Array3::from_shape_vec((channels, height, width), v).expect("length checked"))
}

fn read_f32s(path: &Path, n: usize) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != n * 4 {
        return Err(Error::Parse(format!(
            "{}: expected {} floats, found {} bytes",
            path.display(),
            n,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

pub fn write_label_png(labels: &LabelMap, entries: &[PaletteEntry], path: &Path) -> Result<()> {
    let (h, w) = labels.dim();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(entries.iter().flat_map(|e| e.rgb).collect::<Vec<u8>>());
    let to_err = |e: png::EncodingError| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(to_err)?;
    let data: Vec<u8> = labels.iter().copied().collect();
    writer.write_image_data(&data).map_err(to_err)?;
    writer.finish().map_err(to_err)
}

/// Raw palette indices of an 8-bit indexed PNG.
pub fn read_label_png(path: &Path) -> Result<LabelMap> {
    let to_err = |reason: String| Error::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .map_err(|e| to_err(e.to_string()))?;
    let mut buf = vec![
        0;
        reader
            .output_buffer_size()
            .ok_or_else(|| to_err("image too large".into()))?
    ];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| to_err(e.to_string()))?;
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(to_err("expected an 8-bit indexed PNG".into()));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let rows: Vec<u8> = buf
        .chunks(info.line_size)
        .take(h)
        .flat_map(|row| row[..w].iter().copied())
        .collect();
    Ok(Array2::from_shape_vec((h, w), rows).expect("decoded size"))
}

/// Paths written for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactPaths {
    pub heatmap_png: PathBuf,
    pub heatmap_f32: PathBuf,
    pub labels_png: PathBuf,
    pub palette_json: PathBuf,
    pub mdm_f32: PathBuf,
}

impl ArtifactPaths {
    pub fn for_stem(dir: &Path, stem: &str) -> Self {
        ArtifactPaths {
            heatmap_png: dir.join(format!("{stem}.png")),
            heatmap_f32: dir.join(format!("{stem}.f32")),
            labels_png: dir.join(format!("{stem}_labels.png")),
            palette_json: dir.join(format!("{stem}_labels.json")),
            mdm_f32: dir.join(format!("{stem}_mdm.f32")),
        }
    }
}

pub fn write_artifacts(
    dir: &Path,
    stem: &str,
    anomaly: &AnomalyMap,
    mdm: &MultiDefectMap,
    labels: &LabelMap,
) -> Result<ArtifactPaths> {
    let paths = ArtifactPaths::for_stem(dir, stem);
    write_heatmap_png(anomaly, &paths.heatmap_png)?;
    write_f32(&paths.heatmap_f32, &f32_bytes(anomaly.scores.iter()))?;
    let entries = palette(&mdm.state_ids);
    write_label_png(labels, &entries, &paths.labels_png)?;
    let json = serde_json::to_vec_pretty(&entries).expect("palette serializes");
    std::fs::write(&paths.palette_json, json).map_err(|e| Error::io(&paths.palette_json, e))?;
    write_f32(&paths.mdm_f32, &f32_bytes(mdm.probs.iter()))?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn heatmap_rounding() {
        assert_eq!(
            heatmap_bytes(&array![[0.0, 0.5, 1.0, 0.002]]),
            vec![0, 128, 255, 1]
        );
    }

    #[test]
    fn label_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.png");
        let labels = array![[0u8, 1, 2], [2, 1, 0]];
        let ids = vec!["normal".to_string(), "a".into(), "b".into()];
        write_label_png(&labels, &palette(&ids), &path).unwrap();
        assert_eq!(read_label_png(&path).unwrap(), labels);
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.f32");
        let m = array![[0.25, 0.5], [0.75, 1.0]];
        write_f32(&path, &f32_bytes(m.iter())).unwrap();
        assert_eq!(read_f32_map(&path, 2, 2).unwrap(), m);
        assert!(read_f32_map(&path, 3, 2).is_err());
    }
}

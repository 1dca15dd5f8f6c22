//! Embeddings exported by an external backbone run.
//!
//! Two little-endian containers:
//!
//! * `MADSEMB1`: image embeddings. Header: u32 version, u32 m, u32 N_z, then
//!   per stage u32 h, u32 w, u32 N_i; u64 record count. Each record is a u64
//!   key (FNV-1a 64 of the relative image path), the stage grids as f32
//!   row-major (h, w, channel), then the f32 global vector.
//! * `MADSTXT1`: state text embeddings: u32 version, u32 K+1, u32 N_z, then
//!   per state a u16 id length, the UTF-8 id and N_z f32 values.

use std::path::Path;

use indexmap::IndexMap;
use ndarray::{Array2, Array3};

use super::{
    ImageEmbeddings, ImageEncoder, ImageInput, StageShape, StateTextEmbeddings, TextEncoder,
};
use crate::binio::{fnv1a64, read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::prompts::PromptSet;

pub const MEB_MAGIC: &[u8; 8] = b"MADSEMB1";
pub const TXT_MAGIC: &[u8; 8] = b"MADSTXT1";
const VERSION: u32 = 1;

/// Record key of an image: FNV-1a 64 of its `/`-separated relative path.
pub fn image_key(rel_path: &str) -> u64 {
    fnv1a64(rel_path.as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub embed_dim: usize,
    pub stages: Vec<StageShape>,
    pub records: IndexMap<u64, ImageEmbeddings>,
}

impl EmbeddingFile {
    pub fn new(embed_dim: usize, stages: Vec<StageShape>) -> Self {
        EmbeddingFile {
            embed_dim,
            stages,
            records: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, rel_path: &str, emb: ImageEmbeddings) -> Result<()> {
        self.check(&emb)?;
        self.records.insert(image_key(rel_path), emb);
        Ok(())
    }

    fn check(&self, emb: &ImageEmbeddings) -> Result<()> {
        if emb.shapes() != self.stages {
            return Err(Error::Backend(format!(
                "record stage shapes {:?} differ from manifest {:?}",
                emb.shapes(),
                self.stages
            )));
        }
        if emb.global.len() != self.embed_dim {
            return Err(Error::Backend(format!(
                "global vector has width {} (manifest {})",
                emb.global.len(),
                self.embed_dim
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(MEB_MAGIC);
        w.u32(VERSION);
        w.usize32(self.stages.len(), "stage count")?;
        w.usize32(self.embed_dim, "N_z")?;
        for s in &self.stages {
            w.usize32(s.height, "h")?;
            w.usize32(s.width, "w")?;
            w.usize32(s.channels, "N_i")?;
        }
        w.u64(self.records.len() as u64);
        for (key, emb) in &self.records {
            self.check(emb)?;
            w.u64(*key);
            for s in &emb.stages {
                w.f32s(s.iter());
            }
            w.f32s(emb.global.iter());
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, MEB_MAGIC, "MADSEMB1")?;
        r.version(VERSION)?;
        let m = r.u32()? as usize;
        let embed_dim = r.u32()? as usize;
        let mut stages = Vec::with_capacity(m);
        for _ in 0..m {
            stages.push(StageShape {
                height: r.u32()? as usize,
                width: r.u32()? as usize,
                channels: r.u32()? as usize,
            });
        }
        let count = r.u64()?;
        let mut records = IndexMap::new();
        for _ in 0..count {
            let key = r.u64()?;
            let mut grids = Vec::with_capacity(m);
            for s in &stages {
                let data = r.f32s(s.height * s.width * s.channels)?;
                grids.push(
                    Array3::from_shape_vec((s.height, s.width, s.channels), data)
                        .map_err(|e| Error::Parse(e.to_string()))?,
                );
            }
            let global = r.f32s(embed_dim)?;
            if records
                .insert(
                    key,
                    ImageEmbeddings {
                        stages: grids,
                        global,
                    },
                )
                .is_some()
            {
                return Err(Error::Parse(format!("MADSEMB1: duplicate key {key:016x}")));
            }
        }
        r.finish()?;
        Ok(EmbeddingFile {
            embed_dim,
            stages,
            records,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

/// Image backend serving records from an [`EmbeddingFile`].
pub struct PrecomputedImages {
    file: EmbeddingFile,
}

impl PrecomputedImages {
    pub fn new(file: EmbeddingFile) -> Self {
        PrecomputedImages { file }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(EmbeddingFile::load(path)?))
    }
}

impl ImageEncoder for PrecomputedImages {
    fn stage_shapes(&self) -> Vec<StageShape> {
        self.file.stages.clone()
    }

    fn embed_dim(&self) -> usize {
        self.file.embed_dim
    }

    fn encode_image(&self, input: &ImageInput<'_>) -> Result<ImageEmbeddings> {
        self.file
            .records
            .get(&image_key(input.key_path))
            .cloned()
            .ok_or_else(|| Error::Backend(format!("no exported record for `{}`", input.key_path)))
    }

    fn needs_pixels(&self) -> bool {
        false
    }
}

pub fn text_to_bytes(states: &StateTextEmbeddings) -> Result<Vec<u8>> {
    let mut w = Writer::new(TXT_MAGIC);
    w.u32(VERSION);
    w.usize32(states.len(), "state count")?;
    w.usize32(states.embed_dim(), "N_z")?;
    for (id, row) in states.state_ids().iter().zip(states.vectors().rows()) {
        let len = u16::try_from(id.len())
            .map_err(|_| Error::Validation(format!("state id `{id}` too long")))?;
        w.u16(len);
        w.bytes(id.as_bytes());
        w.f64s_as_f32(row.iter());
    }
    Ok(w.finish())
}

/// Parses `MADSTXT1`. Rows must already be unit norm (to 1e-6).
pub fn text_from_bytes(bytes: &[u8]) -> Result<StateTextEmbeddings> {
    let mut r = Reader::new(bytes, TXT_MAGIC, "MADSTXT1")?;
    r.version(VERSION)?;
    let k1 = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let mut ids = Vec::with_capacity(k1);
    let mut data = Vec::with_capacity(k1 * dim);
    for _ in 0..k1 {
        let len = r.u16()? as usize;
        let id = std::str::from_utf8(r.bytes(len)?)
            .map_err(|e| Error::Parse(format!("MADSTXT1: state id: {e}")))?;
        ids.push(id.to_string());
        data.extend(r.f32s_as_f64(dim)?);
    }
    r.finish()?;
    let vectors =
        Array2::from_shape_vec((k1, dim), data).map_err(|e| Error::Parse(e.to_string()))?;
    StateTextEmbeddings::new(ids, vectors)
}

pub fn save_text(states: &StateTextEmbeddings, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, text_to_bytes(states)?).map_err(|e| Error::io(path, e))
}

pub fn load_text(path: impl AsRef<Path>) -> Result<StateTextEmbeddings> {
    text_from_bytes(&read_file(path.as_ref())?)
}

/// Text backend answering by state id from a `MADSTXT1` file.
pub struct PrecomputedText {
    states: StateTextEmbeddings,
}

impl PrecomputedText {
    pub fn new(states: StateTextEmbeddings) -> Self {
        PrecomputedText { states }
    }
}

impl TextEncoder for PrecomputedText {
    fn embed_dim(&self) -> usize {
        self.states.embed_dim()
    }

    fn encode_state(&self, set: &PromptSet) -> Result<Vec<f64>> {
        let i = self
            .states
            .state_ids()
            .iter()
            .position(|s| *s == set.state_id)
            .ok_or_else(|| Error::Backend(format!("no exported text state `{}`", set.state_id)))?;
        Ok(self.states.vectors().row(i).to_vec())
    }
}

//! Dataset records, manifest files, synthetic generation, and sampling.
//!
//! A manifest is a line-delimited JSON file: one header line holding the
//! label registries (persons, clothes with owners, cameras with
//! modalities) and the pixel geometry, then one line per sample record.
//! Synthetic pixel data lives in a sidecar blob of raw little-endian f32;
//! real data may instead reference image files by opaque path.

mod sampler;
#[cfg(test)]
mod tests_data;
mod synth;

pub use sampler::{augment, flip_horizontal, pad_crop, pk_sample, random_erase, AugmentFlags};
pub use synth::{generate_synthetic, SyntheticGenConfig};

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scenario::Modality;

/// Pixel geometry shared by every image of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageDims {
    pub fn numel(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Query,
    Gallery,
}

/// Where a record's pixels live.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImageRef {
    /// Index into the manifest's pixel blob, in units of one image.
    #[serde(rename = "blob")]
    Blob(usize),
    /// Opaque path to an external image file (never decoded here).
    #[serde(rename = "path")]
    File(String),
}

/// One pedestrian image with its labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub person_id: u32,
    /// Person-scoped clothing identity (globally unique id, single owner).
    pub clothes_id: u32,
    pub modality: Modality,
    pub camera_id: u32,
    /// Integer day index; short-term pairs share a day.
    pub timestamp: u32,
    pub split: Split,
    pub image: ImageRef,
}

/// A full dataset: label registries, records, and inline pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub dims: ImageDims,
    pub persons: Vec<u32>,
    pub clothes_owner: BTreeMap<u32, u32>,
    pub camera_modality: BTreeMap<u32, Modality>,
    pub records: Vec<SampleRecord>,
    /// Pixel blob; image i occupies `[i*dims.numel() .. (i+1)*dims.numel())`.
    pub blob: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    format: String,
    version: u32,
    height: usize,
    width: usize,
    channels: usize,
    persons: Vec<u32>,
    clothes: Vec<ClothesEntry>,
    cameras: Vec<CameraEntry>,
    blob: Option<String>,
    num_records: usize,
}

#[derive(Serialize, Deserialize)]
struct ClothesEntry {
    id: u32,
    owner: u32,
}

#[derive(Serialize, Deserialize)]
struct CameraEntry {
    id: u32,
    modality: Modality,
}

impl DatasetManifest {
    pub fn image(&self, record_idx: usize) -> Result<&[f32]> {
        let rec = &self.records[record_idx];
        match &rec.image {
            ImageRef::Blob(i) => {
                let n = self.dims.numel();
                let start = i * n;
                self.blob.get(start..start + n).ok_or_else(|| {
                    Error::Validation(format!("record {record_idx}: blob index {i} out of range"))
                })
            }
            ImageRef::File(p) => Err(Error::Validation(format!(
                "record {record_idx}: pixels unavailable for file reference '{p}'"
            ))),
        }
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = (usize, &SampleRecord)> {
        self.records
            .iter()
            .enumerate()
            .filter(move |(_, r)| r.split == split)
    }

    /// Check referential integrity. Violations name the offending record.
    pub fn validate(&self) -> Result<()> {
        let persons: BTreeSet<u32> = self.persons.iter().copied().collect();
        if persons.len() != self.persons.len() {
            return Err(Error::Validation("duplicate person id in registry".into()));
        }
        for (cid, owner) in &self.clothes_owner {
            if !persons.contains(owner) {
                return Err(Error::Validation(format!(
                    "clothes {cid} owned by absent person {owner}"
                )));
            }
        }
        let n = self.dims.numel();
        let mut split_kind: BTreeMap<u32, (bool, bool)> = BTreeMap::new();
        for (i, rec) in self.records.iter().enumerate() {
            if !persons.contains(&rec.person_id) {
                return Err(Error::Validation(format!(
                    "record {i}: unknown person {}",
                    rec.person_id
                )));
            }
            match self.clothes_owner.get(&rec.clothes_id) {
                None => {
                    return Err(Error::Validation(format!(
                        "record {i}: unknown clothes {}",
                        rec.clothes_id
                    )))
                }
                Some(owner) if *owner != rec.person_id => {
                    return Err(Error::Validation(format!(
                        "record {i}: clothes {} belongs to person {owner}, not {}",
                        rec.clothes_id, rec.person_id
                    )))
                }
                _ => {}
            }
            match self.camera_modality.get(&rec.camera_id) {
                None => {
                    return Err(Error::Validation(format!(
                        "record {i}: unknown camera {}",
                        rec.camera_id
                    )))
                }
                Some(m) if *m != rec.modality => {
                    return Err(Error::Validation(format!(
                        "record {i}: modality {} does not match camera {} ({m})",
                        rec.modality, rec.camera_id
                    )))
                }
                _ => {}
            }
            if let ImageRef::Blob(b) = rec.image {
                if (b + 1) * n > self.blob.len() {
                    return Err(Error::Validation(format!(
                        "record {i}: blob index {b} out of range"
                    )));
                }
            }
            let entry = split_kind.entry(rec.person_id).or_insert((false, false));
            match rec.split {
                Split::Train | Split::Val => entry.0 = true,
                Split::Query | Split::Gallery => entry.1 = true,
            }
        }
        for (pid, (train_side, test_side)) in split_kind {
            if train_side && test_side {
                return Err(Error::Validation(format!(
                    "person {pid} appears in both train and test splits"
                )));
            }
        }
        Ok(())
    }

    /// Order-independent digest over records and their pixels.
    pub fn digest(&self) -> String {
        let mut per_record: Vec<[u8; 32]> = self
            .records
            .iter()
            .map(|rec| {
                let mut h = Sha256::new();
                h.update(rec.person_id.to_le_bytes());
                h.update(rec.clothes_id.to_le_bytes());
                h.update([match rec.modality {
                    Modality::Rgb => 0u8,
                    Modality::Ir => 1u8,
                }]);
                h.update(rec.camera_id.to_le_bytes());
                h.update(rec.timestamp.to_le_bytes());
                h.update([match rec.split {
                    Split::Train => 0u8,
                    Split::Val => 1,
                    Split::Query => 2,
                    Split::Gallery => 3,
                }]);
                match &rec.image {
                    ImageRef::Blob(i) => {
                        let n = self.dims.numel();
                        for px in &self.blob[i * n..(i + 1) * n] {
                            h.update(px.to_le_bytes());
                        }
                    }
                    ImageRef::File(p) => h.update(p.as_bytes()),
                }
                h.finalize().into()
            })
            .collect();
        per_record.sort_unstable();
        let mut h = Sha256::new();
        for d in per_record {
            h.update(d);
        }
        hex_encode(&h.finalize())
    }

    /// Write `manifest.jsonl` (and `images.bin` when pixels are inline)
    /// into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let blob_name = if self.blob.is_empty() {
            None
        } else {
            Some("images.bin".to_string())
        };
        let header = HeaderLine {
            format: "uniat-manifest".into(),
            version: 1,
            height: self.dims.height,
            width: self.dims.width,
            channels: self.dims.channels,
            persons: self.persons.clone(),
            clothes: self
                .clothes_owner
                .iter()
                .map(|(&id, &owner)| ClothesEntry { id, owner })
                .collect(),
            cameras: self
                .camera_modality
                .iter()
                .map(|(&id, &modality)| CameraEntry { id, modality })
                .collect(),
            blob: blob_name.clone(),
            num_records: self.records.len(),
        };
        let manifest_path = dir.join("manifest.jsonl");
        let mut text = serde_json::to_string(&header)?;
        text.push('\n');
        for rec in &self.records {
            text.push_str(&serde_json::to_string(rec)?);
            text.push('\n');
        }
        atomic_write(&manifest_path, text.as_bytes())?;
        if let Some(name) = blob_name {
            let mut bytes = Vec::with_capacity(self.blob.len() * 4);
            for px in &self.blob {
                bytes.extend_from_slice(&px.to_le_bytes());
            }
            atomic_write(&dir.join(name), &bytes)?;
        }
        Ok(manifest_path)
    }

    /// Load and validate a manifest written by [`DatasetManifest::save`].
    pub fn load(manifest_path: &Path) -> Result<DatasetManifest> {
        let file = std::fs::File::open(manifest_path)?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Validation("empty manifest file".into()))??;
        let header: HeaderLine = serde_json::from_str(&header_line)
            .map_err(|e| Error::Validation(format!("bad manifest header: {e}")))?;
        if header.format != "uniat-manifest" || header.version != 1 {
            return Err(Error::Validation(format!(
                "unsupported manifest format {}/{}",
                header.format, header.version
            )));
        }
        let mut records = Vec::with_capacity(header.num_records);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Validation(format!("record {i}: {e}")))?;
            records.push(rec);
        }
        if records.len() != header.num_records {
            return Err(Error::Validation(format!(
                "header promises {} records, found {}",
                header.num_records,
                records.len()
            )));
        }
        let blob = match &header.blob {
            None => Vec::new(),
            Some(name) => {
                let dir = manifest_path
                    .parent()
                    .ok_or_else(|| Error::Validation("manifest path has no parent".into()))?;
                let bytes = std::fs::read(dir.join(name))?;
                if bytes.len() % 4 != 0 {
                    return Err(Error::Validation("pixel blob length not a multiple of 4".into()));
                }
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect()
            }
        };
        let manifest = DatasetManifest {
            dims: ImageDims {
                height: header.height,
                width: header.width,
                channels: header.channels,
            },
            persons: header.persons,
            clothes_owner: header.clothes.into_iter().map(|c| (c.id, c.owner)).collect(),
            camera_modality: header.cameras.into_iter().map(|c| (c.id, c.modality)).collect(),
            records,
            blob,
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

pub(crate) fn hex_encode(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        use std::fmt::Write as _;
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Write a file atomically (temp file in the same directory, then rename).
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .ok_or_else(|| Error::Validation(format!("no parent directory for {}", path.display())))?;
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("unnamed")
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

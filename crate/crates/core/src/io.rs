//! Versioned binary containers for checkpoints, direction banks, datasets,
//! noise latents and principal components, plus 8-bit PNG export.
//!
//! Layout (all integers little endian):
//!
//! ```text
//! b"FLOWEDIT" | kind [4] | version u32 | header_len u64 | header (JSON)
//!             | payload_len u64 | payload (f32 LE) | sha256 of all prior bytes [32]
//! ```
//!
//! The header lists the tensors in payload order as `{name, shape}` next to a
//! free-form `meta` object.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{ShapeAttrs, ShapeSample};
use crate::edit::{DirectionBank, DirectionSet, Provenance};
use crate::flow::{FlowConfig, TrainConfig, Trainer};
use crate::model::{ArchConfig, Model};
use crate::optim::Adam;
use crate::prompt::Vocabulary;
use crate::rng::RngState;
use crate::tensor::{Tensor, TensorError};

pub const MAGIC: &[u8; 8] = b"FLOWEDIT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a flowedit container")]
    Magic,
    #[error("expected a {expected} container, found {found}")]
    Kind { expected: String, found: String },
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("digest mismatch: stored {stored}, computed {computed}")]
    Digest { stored: String, computed: String },
    #[error("malformed container: {0}")]
    Format(String),
    #[error("header: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("png: {0}")]
    Png(String),
}

pub type Result<T> = std::result::Result<T, IoError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Checkpoint,
    Bank,
    Dataset,
    Noise,
    /// Principal components of u-space samples.
    Components,
}

impl Kind {
    pub fn tag(self) -> [u8; 4] {
        *match self {
            Kind::Checkpoint => b"CKPT",
            Kind::Bank => b"BANK",
            Kind::Dataset => b"DATA",
            Kind::Noise => b"NOIS",
            Kind::Components => b"PCAC",
        }
    }

    fn from_tag(tag: &[u8]) -> Option<Kind> {
        [Kind::Checkpoint, Kind::Bank, Kind::Dataset, Kind::Noise, Kind::Components]
            .into_iter()
            .find(|k| k.tag() == tag)
    }
}

impl std::fmt::Display for Kind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(std::str::from_utf8(&self.tag()).unwrap_or("????"))
    }
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

/// Named tensors with a JSON metadata object.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub kind: Kind,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new(kind: Kind, meta: impl Serialize) -> Result<Self> {
        Ok(Self {
            kind,
            meta: serde_json::to_value(meta)?,
            tensors: Vec::new(),
        })
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn meta<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.meta.clone())?)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| IoError::Format(format!("missing tensor '{name}'")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let payload_len: usize = self.tensors.iter().map(|(_, t)| t.len() * 4).sum();
        let mut out = Vec::with_capacity(32 + header.len() + payload_len + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.kind.tag());
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(payload_len as u64).to_le_bytes());
        for (_, t) in &self.tensors {
            out.extend_from_slice(&t.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let short = || IoError::Format("truncated".into());
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(IoError::Magic);
        }
        if bytes.len() < MAGIC.len() + 16 + DIGEST_LEN {
            return Err(short());
        }
        let (body, stored) = bytes.split_at(bytes.len() - DIGEST_LEN);
        let computed = Sha256::digest(body);
        if computed.as_slice() != stored {
            return Err(IoError::Digest {
                stored: hex::encode(stored),
                computed: hex::encode(computed),
            });
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let tag = r.take(4).ok_or_else(short)?;
        let kind = Kind::from_tag(tag)
            .ok_or_else(|| IoError::Format(format!("unknown kind {:?}", String::from_utf8_lossy(tag))))?;
        let version = r.u32().ok_or_else(short)?;
        if version != VERSION {
            return Err(IoError::Version(version));
        }
        let header_len = r.u64().ok_or_else(short)? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len).ok_or_else(short)?)?;
        let payload_len = r.u64().ok_or_else(short)? as usize;
        let payload = r.take(payload_len).ok_or_else(short)?;
        if r.pos != body.len() {
            return Err(IoError::Format("trailing bytes".into()));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut at = 0usize;
        for e in header.tensors {
            let n = e.shape.iter().product::<usize>() * 4;
            let chunk = payload
                .get(at..at + n)
                .ok_or_else(|| IoError::Format(format!("payload too short for '{}'", e.name)))?;
            tensors.push((e.name, Tensor::from_le_bytes(e.shape, chunk)?));
            at += n;
        }
        if at != payload.len() {
            return Err(IoError::Format("payload length disagrees with header".into()));
        }
        Ok(Self {
            kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }

    pub fn load_kind(path: impl AsRef<Path>, kind: Kind) -> Result<Self> {
        let a = Self::load(path)?;
        a.expect(kind)?;
        Ok(a)
    }

    fn expect(&self, kind: Kind) -> Result<()> {
        if self.kind != kind {
            return Err(IoError::Kind {
                expected: kind.to_string(),
                found: self.kind.to_string(),
            });
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let err = |source| IoError::File {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(err)?;
    }
    fs::write(path, bytes).map_err(err)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

// ---------------------------------------------------------------- checkpoint

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: ArchConfig,
    pub flow: FlowConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub rng: Option<RngState>,
    pub adam_step: u64,
    pub vocabulary: Option<Vocabulary>,
}

/// A trained model with everything needed to resume training.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
    pub adam: Option<Adam>,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, flow: &FlowConfig, train: &TrainConfig, vocabulary: Option<Vocabulary>) -> Self {
        Self {
            meta: CheckpointMeta {
                arch: trainer.model.arch.clone(),
                flow: flow.clone(),
                train: train.clone(),
                step: trainer.step,
                rng: Some(trainer.rng_state()),
                adam_step: trainer.adam.step,
                vocabulary,
            },
            model: trainer.model.clone(),
            adam: Some(trainer.adam.clone()),
        }
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new(Kind::Checkpoint, &self.meta)?;
        for p in self.model.params.iter() {
            a.push(format!("param/{}", p.name), p.value.clone());
        }
        if let Some(adam) = &self.adam {
            for (p, (m, v)) in self.model.params.iter().zip(adam.m.iter().zip(&adam.v)) {
                a.push(format!("adam_m/{}", p.name), Tensor::new([m.len()], m.clone())?);
                a.push(format!("adam_v/{}", p.name), Tensor::new([v.len()], v.clone())?);
            }
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.expect(Kind::Checkpoint)?;
        let meta: CheckpointMeta = a.meta()?;
        let params: Vec<(String, Tensor)> = a
            .tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix("param/").map(|n| (n.to_string(), t.clone())))
            .collect();
        let model = Model::from_params(meta.arch.clone(), params).map_err(|e| IoError::Format(e.to_string()))?;
        let has_adam = a.tensors.iter().any(|(n, _)| n.starts_with("adam_m/"));
        let adam = if has_adam {
            let mut adam = Adam::new(meta.train.adam.clone(), &model.params);
            adam.step = meta.adam_step;
            for (i, p) in model.params.iter().enumerate() {
                adam.m[i] = a.tensor(&format!("adam_m/{}", p.name))?.data().to_vec();
                adam.v[i] = a.tensor(&format!("adam_v/{}", p.name))?.data().to_vec();
            }
            Some(adam)
        } else {
            None
        };
        Ok(Self { meta, model, adam })
    }

    /// Rebuilds a trainer positioned exactly where the checkpoint was taken.
    pub fn into_trainer(self) -> Result<Trainer> {
        let mut t = Trainer::new(self.model, &self.meta.train, self.meta.flow.sigma_min);
        t.step = self.meta.step;
        if let Some(adam) = self.adam {
            t.adam = adam;
        }
        if let Some(state) = &self.meta.rng {
            t.rng = state
                .restore()
                .ok_or_else(|| IoError::Format("bad rng state".into()))?;
        }
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

// ---------------------------------------------------------------------- bank

#[derive(Serialize, Deserialize)]
struct BankAttr {
    name: String,
    positives: usize,
    negatives: usize,
}

#[derive(Serialize, Deserialize)]
struct BankMeta {
    grid_n: usize,
    provenance: Provenance,
    latent_shape: Vec<usize>,
    attributes: Vec<BankAttr>,
}

pub fn bank_to_archive(bank: &DirectionBank) -> Result<Archive> {
    let meta = BankMeta {
        grid_n: bank.grid_n,
        provenance: bank.provenance,
        latent_shape: bank.latent_shape.clone(),
        attributes: bank
            .attributes
            .iter()
            .map(|(name, s)| BankAttr {
                name: name.clone(),
                positives: s.positives,
                negatives: s.negatives,
            })
            .collect(),
    };
    let mut a = Archive::new(Kind::Bank, meta)?;
    for (name, set) in &bank.attributes {
        a.push(name.clone(), Tensor::stack(&set.directions)?);
    }
    Ok(a)
}

pub fn bank_from_archive(a: &Archive) -> Result<DirectionBank> {
    a.expect(Kind::Bank)?;
    let meta: BankMeta = a.meta()?;
    let mut bank = DirectionBank::new(meta.grid_n, meta.provenance, meta.latent_shape);
    for attr in meta.attributes {
        let set = DirectionSet {
            directions: a.tensor(&attr.name)?.unstack(),
            positives: attr.positives,
            negatives: attr.negatives,
        };
        bank.insert(attr.name, set).map_err(|e| IoError::Format(e.to_string()))?;
    }
    Ok(bank)
}

pub fn save_bank(bank: &DirectionBank, path: impl AsRef<Path>) -> Result<()> {
    bank_to_archive(bank)?.save(path)
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<DirectionBank> {
    bank_from_archive(&Archive::load(path)?)
}

// ------------------------------------------------------------------- dataset

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub index: u64,
    pub caption: String,
    pub attrs: ShapeAttrs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub digest: String,
    pub rows: Vec<DatasetRow>,
}

pub fn dataset_to_archive(samples: &[ShapeSample], seed: u64) -> Result<Archive> {
    let meta = DatasetMeta {
        seed,
        digest: crate::data::shapes_digest(samples),
        rows: samples
            .iter()
            .map(|s| DatasetRow {
                index: s.index,
                caption: s.caption.clone(),
                attrs: s.attrs,
            })
            .collect(),
    };
    let mut a = Archive::new(Kind::Dataset, meta)?;
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    a.push("images", Tensor::stack(&images)?);
    Ok(a)
}

pub fn dataset_from_archive(a: &Archive) -> Result<Vec<ShapeSample>> {
    a.expect(Kind::Dataset)?;
    let meta: DatasetMeta = a.meta()?;
    let images = a.tensor("images")?.unstack();
    if images.len() != meta.rows.len() {
        return Err(IoError::Format("image count disagrees with attribute table".into()));
    }
    let samples: Vec<ShapeSample> = meta
        .rows
        .into_iter()
        .zip(images)
        .map(|(r, image)| ShapeSample {
            image,
            attrs: r.attrs,
            caption: r.caption,
            seed: meta.seed,
            index: r.index,
        })
        .collect();
    let digest = crate::data::shapes_digest(&samples);
    if digest != meta.digest {
        return Err(IoError::Digest {
            stored: meta.digest,
            computed: digest,
        });
    }
    Ok(samples)
}

// --------------------------------------------------------------------- noise

/// Inverted latents with the prompts they were inverted under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseMeta {
    pub prompts: Vec<Vec<u32>>,
    #[serde(default)]
    pub info: IndexMap<String, serde_json::Value>,
}

pub fn save_noise(noise: &Tensor, meta: &NoiseMeta, path: impl AsRef<Path>) -> Result<()> {
    let mut a = Archive::new(Kind::Noise, meta)?;
    a.push("noise", noise.clone());
    a.save(path)
}

pub fn load_noise(path: impl AsRef<Path>) -> Result<(Tensor, NoiseMeta)> {
    let a = Archive::load_kind(path, Kind::Noise)?;
    Ok((a.tensor("noise")?.clone(), a.meta()?))
}

// ----------------------------------------------------------------------- png

/// Encodes `[C, H, W]` (C = 1 or 3) as an 8-bit PNG after clamping to `[0, 1]`.
pub fn png_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let &[c, h, w] = image.shape() else {
        return Err(IoError::Png(format!("expected [C, H, W], got {:?}", image.shape())));
    };
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(IoError::Png(format!("unsupported channel count {c}"))),
    };
    let d = image.data();
    let mut pixels = Vec::with_capacity(c * h * w);
    for i in 0..h * w {
        for ch in 0..c {
            pixels.push(quantize(d[ch * h * w + i]));
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut out), w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| IoError::Png(e.to_string()))?;
        writer.write_image_data(&pixels).map_err(|e| IoError::Png(e.to_string()))?;
    }
    Ok(out)
}

pub fn quantize(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0).round() as u8
}

pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let dec = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(|e| IoError::Png(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| IoError::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| IoError::Png(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(IoError::Png(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let c = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(IoError::Png(format!("unsupported color type {other:?}"))),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let mut data = vec![0.0; c * h * w];
    for i in 0..h * w {
        for ch in 0..c {
            data[ch * h * w + i] = buf[i * c + ch] as f32 / 255.0;
        }
    }
    Ok(Tensor::new([c, h, w], data)?)
}

pub fn save_png(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &png_bytes(image)?)
}

pub fn load_png(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_png(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_archive() -> Archive {
        let mut a = Archive::new(Kind::Noise, serde_json::json!({"k": 1})).unwrap();
        a.push("a", Tensor::new([2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap());
        a.push("b", Tensor::new([3], vec![0.1, 0.2, 0.3]).unwrap());
        a
    }

    #[test]
    fn archive_round_trip() {
        let a = sample_archive();
        let b = Archive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(a.tensors.len(), b.tensors.len());
        for ((na, ta), (nb, tb)) in a.tensors.iter().zip(&b.tensors) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_le_bytes(), tb.to_le_bytes());
        }
        assert_eq!(a.meta, b.meta);
    }

    #[test]
    fn corrupted_byte_fails_digest() {
        let mut bytes = sample_archive().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        assert!(matches!(Archive::from_bytes(&bytes), Err(IoError::Digest { .. })));
    }

    #[test]
    fn unknown_version_rejected() {
        let mut bytes = sample_archive().to_bytes().unwrap();
        bytes[12] = 9;
        let n = bytes.len() - DIGEST_LEN;
        let d = Sha256::digest(&bytes[..n]);
        bytes[n..].copy_from_slice(&d);
        assert!(matches!(Archive::from_bytes(&bytes), Err(IoError::Version(9))));
    }

    #[test]
    fn png_quantizes_and_clamps() {
        let img = Tensor::new([1, 1, 4], vec![-1.0, 0.5, 1.0, 2.0]).unwrap();
        let back = decode_png(&png_bytes(&img).unwrap()).unwrap();
        assert_eq!(back.data(), &[0.0, 128.0 / 255.0, 1.0, 1.0]);
    }
}

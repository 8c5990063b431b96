//! Binary checkpoint, embedding and dataset formats plus the JSON run
//! configuration. All integers and floats are little-endian.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::encoder::{EncoderSpec, EncoderState, TrainConfig};
use crate::error::{Error, Result};
use crate::evalkit::RetrievalIndex;
use crate::imaging::{AugmentConfig, Image};
use crate::losses::LossKind;
use crate::matrix::Matrix;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AUGC";
pub const EMBEDDING_MAGIC: [u8; 4] = *b"AUGE";
pub const DATASET_MAGIC: [u8; 4] = *b"AUGT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const EMBEDDING_VERSION: u32 = 1;
pub const DATASET_VERSION: u32 = 1;

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()
    };
    if let Err(e) = write() {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(&tmp, e));
    }
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if n > left {
            return Err(Error::Truncated {
                what,
                needed: n,
                found: left,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found = &self.buf[..self.buf.len().min(4)];
        self.pos = found.len();
        if found != expected {
            return Err(Error::BadMagic {
                expected,
                found: found.to_vec(),
            });
        }
        Ok(())
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn version(&mut self, expected: u32) -> Result<()> {
        let found = self.u32("version")?;
        if found != expected {
            return Err(Error::Version { expected, found });
        }
        Ok(())
    }

    fn f32s(&mut self, count: usize, what: &'static str) -> Result<Vec<f32>> {
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| Error::invalid(format!("{what} length overflows")))?;
        Ok(self
            .take(bytes, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn rest(&self) -> &'a [u8] {
        &self.buf[self.pos..]
    }

    fn finish(&self, what: &'static str) -> Result<()> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            extra => Err(Error::TrailingBytes { what, extra }),
        }
    }
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
}

fn json_from_slice<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let value = serde_path_to_error::deserialize(&mut *de).map_err(|e| Error::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    de.end().map_err(|e| Error::Schema {
        path: String::new(),
        message: e.to_string(),
    })?;
    Ok(value)
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in u32")))
}

/// Encoder state plus the run metadata recorded next to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: EncoderState,
    pub loss_kind: LossKind,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    spec: EncoderSpec,
    step: u64,
    loss_kind: LossKind,
    seed: u64,
    param_count: usize,
    buffer_count: usize,
    has_moments: bool,
}

/// `AUGC`, version, header length, JSON header, then the parameter blob,
/// the batch-norm running statistics and (if flagged) both Adam moments.
pub fn checkpoint_to_bytes(ckpt: &Checkpoint, with_moments: bool) -> Result<Vec<u8>> {
    let s = &ckpt.state;
    let header = CheckpointHeader {
        spec: s.spec().clone(),
        step: s.step(),
        loss_kind: ckpt.loss_kind,
        seed: ckpt.seed,
        param_count: s.param_count(),
        buffer_count: s.buffers().len(),
        has_moments: with_moments,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(json.len(), "header length")?.to_le_bytes());
    out.extend_from_slice(&json);
    put_f32s(&mut out, s.params());
    put_f32s(&mut out, s.buffers());
    if with_moments {
        let (m, v) = s.adam_moments();
        put_f32s(&mut out, m);
        put_f32s(&mut out, v);
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let header_len = r.u32("header length")? as usize;
    let header: CheckpointHeader = json_from_slice(r.take(header_len, "checkpoint header")?)?;
    header.spec.validate()?;
    let layout = header.spec.layout();
    if header.param_count != layout.param_count {
        return Err(Error::Schema {
            path: "param_count".into(),
            message: format!(
                "spec implies {} parameters, header says {}",
                layout.param_count, header.param_count
            ),
        });
    }
    if header.buffer_count != layout.buffer_count {
        return Err(Error::Schema {
            path: "buffer_count".into(),
            message: format!(
                "spec implies {} buffer values, header says {}",
                layout.buffer_count, header.buffer_count
            ),
        });
    }
    let params = r.f32s(header.param_count, "parameter blob")?;
    let buffers = r.f32s(header.buffer_count, "buffer blob")?;
    let moments = if header.has_moments {
        Some((
            r.f32s(header.param_count, "first moment blob")?,
            r.f32s(header.param_count, "second moment blob")?,
        ))
    } else {
        None
    };
    r.finish("checkpoint")?;
    let state = EncoderState::from_parts(header.spec, params, buffers, moments, header.step)?;
    Ok(Checkpoint {
        state,
        loss_kind: header.loss_kind,
        seed: header.seed,
    })
}

/// Saves parameters, buffers and Adam moments.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_to_bytes(ckpt, true)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_bytes(&read_file(path)?)
}

fn check_unique(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    match ids.iter().find(|id| !seen.insert(id.as_str())) {
        Some(dup) => Err(Error::DuplicateId(dup.clone())),
        None => Ok(()),
    }
}

/// `AUGE`, version, count, dim, the row-major `f32` matrix, then a JSON
/// array of ids. Values are stored as `f32`.
pub fn embeddings_to_bytes(ids: &[String], matrix: &Matrix) -> Result<Vec<u8>> {
    if ids.len() != matrix.rows() {
        return Err(Error::shape(format!("{} ids for {} rows", ids.len(), matrix.rows())));
    }
    check_unique(ids)?;
    let mut out = Vec::with_capacity(16 + 4 * matrix.data().len());
    out.extend_from_slice(&EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(matrix.rows(), "row count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(matrix.cols(), "dimension")?.to_le_bytes());
    matrix
        .data()
        .iter()
        .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes()));
    serde_json::to_writer(&mut out, ids).expect("ids serialize");
    Ok(out)
}

pub fn embeddings_from_bytes(bytes: &[u8]) -> Result<RetrievalIndex> {
    let mut r = Reader::new(bytes);
    r.magic(EMBEDDING_MAGIC)?;
    r.version(EMBEDDING_VERSION)?;
    let count = r.u32("count")? as usize;
    let dim = r.u32("dim")? as usize;
    let values = r.f32s(
        count
            .checked_mul(dim)
            .ok_or_else(|| Error::invalid("count × dim overflows"))?,
        "embedding matrix",
    )?;
    let ids: Vec<String> = json_from_slice(r.rest())?;
    if ids.len() != count {
        return Err(Error::Schema {
            path: String::new(),
            message: format!("manifest lists {} ids for {count} rows", ids.len()),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding matrix"));
    }
    let matrix = Matrix::new(count, dim, values.into_iter().map(f64::from).collect())?;
    RetrievalIndex::new(ids, matrix)
}

pub fn save_embeddings(ids: &[String], matrix: &Matrix, path: &Path) -> Result<()> {
    write_atomic(path, &embeddings_to_bytes(ids, matrix)?)
}

pub fn load_embeddings(path: &Path) -> Result<RetrievalIndex> {
    embeddings_from_bytes(&read_file(path)?)
}

/// `AUGT`, version, count, height, width, channels, then the `u8` rasters.
pub fn pack_dataset(images: &[Image]) -> Result<Vec<u8>> {
    let (h, w, c) = images
        .first()
        .map_or((0, 0, 3), |i| (i.height(), i.width(), i.channels()));
    if images
        .iter()
        .any(|i| (i.height(), i.width(), i.channels()) != (h, w, c))
    {
        return Err(Error::shape("a packed dataset needs equally shaped images"));
    }
    let mut out = Vec::with_capacity(24 + images.len() * h * w * c);
    out.extend_from_slice(&DATASET_MAGIC);
    for v in [
        DATASET_VERSION,
        to_u32(images.len(), "count")?,
        to_u32(h, "height")?,
        to_u32(w, "width")?,
        to_u32(c, "channels")?,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    images.iter().for_each(|i| out.extend_from_slice(i.data()));
    Ok(out)
}

pub fn unpack_dataset(bytes: &[u8]) -> Result<Vec<Image>> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    r.version(DATASET_VERSION)?;
    let count = r.u32("count")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let c = r.u32("channels")? as usize;
    if c != 1 && c != 3 {
        return Err(Error::Schema {
            path: "channels".into(),
            message: format!("must be 1 or 3, got {c}"),
        });
    }
    let size = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::invalid("raster size overflows"))?;
    let total = size
        .checked_mul(count)
        .ok_or_else(|| Error::invalid("dataset size overflows"))?;
    let raw = r.take(total, "raster data")?;
    r.finish("packed dataset")?;
    if size == 0 {
        return Err(Error::invalid("packed rasters are empty"));
    }
    raw.chunks_exact(size)
        .map(|px| Image::new(h, w, c, px.to_vec()))
        .collect()
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

/// Decodes a PNG or JPEG; grayscale files stay single-channel.
pub fn decode_image(path: &Path) -> Result<Image> {
    let decode_err = |message: String| Error::Decode {
        path: path.to_path_buf(),
        message,
    };
    let bytes = read_file(path)?;
    let img = image::load_from_memory(&bytes).map_err(|e| decode_err(e.to_string()))?;
    let gray = matches!(
        img.color(),
        image::ColorType::L8 | image::ColorType::La8 | image::ColorType::L16 | image::ColorType::La16
    );
    let (w, h) = (img.width() as usize, img.height() as usize);
    let result = if gray {
        Image::new(h, w, 1, img.into_luma8().into_raw())
    } else {
        Image::new(h, w, 3, img.into_rgb8().into_raw())
    };
    result.map_err(|e| decode_err(e.to_string()))
}

/// Encodes as PNG.
pub fn encode_png(img: &Image, path: &Path) -> Result<()> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let color = if img.channels() == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    let mut bytes = Vec::new();
    image::ImageEncoder::write_image(image::codecs::png::PngEncoder::new(&mut bytes), img.data(), w, h, color)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    write_atomic(path, &bytes)
}

/// Images with their ids: file names for a directory, row numbers for a
/// packed file.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub images: Vec<Image>,
}

/// A directory of PNG/JPEG files (byte-wise file name order; other files
/// ignored) or a packed `AUGT` file.
pub fn load_named_dataset(path: &Path) -> Result<Dataset> {
    if !path.is_dir() {
        let images = unpack_dataset(&read_file(path)?)?;
        let ids = (0..images.len()).map(|i| i.to_string()).collect();
        return Ok(Dataset { ids, images });
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(path, e)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort_by(|a, b| {
        a.file_name()
            .map(|n| n.as_encoded_bytes())
            .cmp(&b.file_name().map(|n| n.as_encoded_bytes()))
    });
    let images = files.iter().map(|f| decode_image(f)).collect::<Result<Vec<_>>>()?;
    let ids = files
        .iter()
        .map(|f| f.file_name().expect("file").to_string_lossy().into_owned())
        .collect();
    Ok(Dataset { ids, images })
}

pub fn load_dataset(path: &Path) -> Result<Vec<Image>> {
    Ok(load_named_dataset(path)?.images)
}

/// One non-negative integer label per non-empty line.
pub fn parse_labels(text: &str) -> Result<Vec<usize>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| Error::Schema {
                path: format!("line {}", i + 1),
                message: format!("`{}` is not a non-negative integer label", l.trim()),
            })
        })
        .collect()
}

/// Training, augmentation and encoder settings in one JSON document.
/// Omitted fields take their defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n_sources_per_batch: usize,
    pub augments_per_source: usize,
    pub steps: u64,
    pub lr: f64,
    pub loss_kind: LossKind,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub augment: AugmentConfig,
    pub encoder: EncoderSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            n_sources_per_batch: t.n_sources_per_batch,
            augments_per_source: t.augments_per_source,
            steps: t.steps,
            lr: t.lr,
            loss_kind: t.loss_kind,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            augment: t.augment,
            encoder: EncoderSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            n_sources_per_batch: self.n_sources_per_batch,
            augments_per_source: self.augments_per_source,
            steps: self.steps,
            lr: self.lr,
            loss_kind: self.loss_kind,
            augment: self.augment.clone(),
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.encoder.validate().map_err(|e| match e {
            Error::Schema { path, message } => Error::Schema {
                path: format!("encoder.{path}"),
                message,
            },
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = json_from_slice(text.as_bytes())?;
    cfg.validate()?;
    Ok(cfg)
}

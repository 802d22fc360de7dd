//! Binary feature and checkpoint files. All integers and floats are
//! little-endian; all writes go through a temporary file in the destination
//! directory followed by a rename.
//!
//! ```text
//! feature file:  "MMFS" u32:version u32:len name u32:T u32:D u8:dtype u32:len config-json  f32[T*D]
//! checkpoint:    "MMCK" u32:version u32:len header-json u32:count
//!                { u32:len name u32:ndim u32[ndim]:shape f32[prod(shape)] } * count
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FeatureSequence, Model, ModelConfig};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const FEATURE_MAGIC: &[u8; 4] = b"MMFS";
pub const FEATURE_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Writes `bytes` to `path` without ever leaving a partially written file
/// there.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("{}: truncated at byte {} (need {n} more)", self.what, self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format(format!("{}: string is not UTF-8", self.what)))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format(format!("{}: size overflow", self.what)))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::Format(format!("{}: bad magic {:?}", self.what, String::from_utf8_lossy(got))));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len(), "string length")?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// One modality's features for one clip. `config` is the JSON text of the
/// extraction settings, kept verbatim.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub modality: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
    pub config: String,
}

impl FeatureFile {
    pub fn new(modality: impl Into<String>, rows: usize, cols: usize, data: Vec<f32>, config: impl Into<String>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "FeatureFile",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            modality: modality.into(),
            rows,
            cols,
            data,
            config: config.into(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(32 + self.modality.len() + self.config.len() + 4 * self.data.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        put_str(&mut out, &self.modality)?;
        put_u32(&mut out, self.rows, "T")?;
        put_u32(&mut out, self.cols, "D")?;
        out.push(DTYPE_F32);
        put_str(&mut out, &self.config)?;
        put_f32s(&mut out, &self.data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "feature file");
        r.magic(FEATURE_MAGIC)?;
        let version = r.u32()?;
        if version != FEATURE_VERSION {
            return Err(Error::Format(format!("feature file: unsupported version {version}")));
        }
        let modality = r.string()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("feature file: unknown dtype tag {dtype}")));
        }
        let config = r.string()?;
        serde_json::from_str::<serde_json::Value>(&config)
            .map_err(|e| Error::Format(format!("feature file: extraction config is not JSON: {e}")))?;
        let data = r.f32s(rows * cols)?;
        r.finish()?;
        Ok(Self {
            modality,
            rows,
            cols,
            data,
            config,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn from_sequence<T: Scalar>(seq: &FeatureSequence<T>, config: impl Into<String>) -> Result<Self> {
        Self::new(
            seq.modality.clone(),
            seq.len(),
            seq.dim(),
            seq.frames.data().iter().map(|v| v.as_f64() as f32).collect(),
            config,
        )
    }

    /// Fails for an empty file: the model needs at least one frame.
    pub fn to_sequence<T: Scalar>(&self) -> Result<FeatureSequence<T>> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Data(format!(
                "{} features have shape {}x{}; at least one frame is required",
                self.modality, self.rows, self.cols
            )));
        }
        let frames = Tensor::matrix(self.rows, self.cols, self.data.iter().map(|&v| T::lit(v as f64)).collect())?;
        FeatureSequence::new(self.modality.clone(), frames)
    }
}

/// Everything the checkpoint header records besides the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>, train: Option<TrainConfig>, epoch: Option<usize>) -> Self {
        Self {
            header: CheckpointHeader {
                model: model.config().clone(),
                train,
                epoch,
            },
            params: model.params().cast(),
        }
    }

    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>> {
        Model::from_params(self.header.model.clone(), &self.params.cast())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_string(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.params.num_elements());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &header)?;
        put_u32(&mut out, self.params.len(), "parameter count")?;
        for (_, name, t) in self.params.iter() {
            put_str(&mut out, name)?;
            put_u32(&mut out, t.shape().len(), "rank")?;
            for &d in t.shape() {
                put_u32(&mut out, d, "extent")?;
            }
            put_f32s(&mut out, t.data());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint: unsupported version {version}")));
        }
        let header: CheckpointHeader = serde_json::from_str(&r.string()?)
            .map_err(|e| Error::Format(format!("checkpoint: bad header: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| {
                Error::Format(format!("checkpoint: parameter {name} is too large"))
            })?;
            let data = r.f32s(n)?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("checkpoint: parameter {name}: {e}")))?;
            params
                .add(name, t)
                .map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
        }
        r.finish()?;
        Ok(Self { header, params })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

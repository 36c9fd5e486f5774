//! Binary checkpoints for SR models and fusion networks.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MMSR"  u16 version
//! u32 meta_len   meta_len bytes of JSON (kind, config, class label)
//! u32 n_tensors
//! n_tensors x { u16 name_len, name, u8 dtype, u8 ndim, ndim x u64 dim }
//! raw parameter buffers in manifest order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::fusion::{FusionConfig, FusionNet};
use crate::nn::Module;
use crate::scalar::{DType, Scalar};
use crate::sr::{SrModel, SrModelConfig};

pub const MAGIC: &[u8; 4] = b"MMSR";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CheckpointMeta {
    SrModel {
        config: SrModelConfig,
        class_label: String,
    },
    Fusion {
        config: FusionConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

/// A module that can be rebuilt from its checkpoint metadata.
pub trait Persist<T: Scalar>: Module<T> + Sized {
    fn meta(&self) -> CheckpointMeta;

    /// Fresh module with the topology described by `meta`; values are overwritten afterwards.
    fn from_meta(meta: &CheckpointMeta) -> Result<Self>;
}

impl<T: Scalar> Persist<T> for SrModel<T> {
    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta::SrModel {
            config: *self.config(),
            class_label: self.class_label().to_string(),
        }
    }

    fn from_meta(meta: &CheckpointMeta) -> Result<Self> {
        match meta {
            CheckpointMeta::SrModel { config, class_label } => SrModel::build(*config, class_label, 0),
            _ => bail!(Decode, "checkpoint holds a fusion network, not an SR model"),
        }
    }
}

impl<T: Scalar> Persist<T> for FusionNet<T> {
    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta::Fusion { config: *self.config() }
    }

    fn from_meta(meta: &CheckpointMeta) -> Result<Self> {
        match meta {
            CheckpointMeta::Fusion { config } => FusionNet::build(*config, 0),
            _ => bail!(Decode, "checkpoint holds an SR model, not a fusion network"),
        }
    }
}

pub fn to_bytes<T: Scalar, M: Persist<T>>(module: &M) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&module.meta()).map_err(|e| Error::Config(e.to_string()))?;
    let params = module.named_params();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in &params {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Config(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.push(p.shape().len() as u8);
        for &d in p.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for (_, p) in &params {
        for &v in p.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            bail!(Decode, "checkpoint truncated at byte {}", self.pos);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses the header only.
pub fn read_header(bytes: &[u8]) -> Result<(CheckpointMeta, Vec<ManifestRecord>, usize)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        bail!(Decode, "not a checkpoint (bad magic)");
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        bail!(Decode, "unsupported checkpoint version {version}");
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Decode(format!("checkpoint metadata: {e}")))?;
    let n = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Decode("parameter name is not UTF-8".into()))?;
        let tag = r.u8()?;
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Decode(format!("unknown dtype tag {tag}")))?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        manifest.push(ManifestRecord { name, shape, dtype });
    }
    Ok((meta, manifest, r.pos))
}

/// Rebuilds a module. Buffers stored in the other precision are converted.
pub fn from_bytes<T: Scalar, M: Persist<T>>(bytes: &[u8]) -> Result<M> {
    let (meta, manifest, mut pos) = read_header(bytes)?;
    let mut module = M::from_meta(&meta)?;
    let expected: Vec<(String, Vec<usize>)> = module
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.shape().to_vec()))
        .collect();
    if expected.len() != manifest.len() {
        bail!(
            Decode,
            "checkpoint lists {} tensors, the model has {}",
            manifest.len(),
            expected.len()
        );
    }
    let mut values = Vec::with_capacity(manifest.len());
    for (rec, (name, shape)) in manifest.iter().zip(&expected) {
        if rec.name != *name || rec.shape != *shape {
            bail!(
                Decode,
                "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                rec.name,
                rec.shape,
                name,
                shape
            );
        }
        let count: usize = rec.shape.iter().product();
        let width = rec.dtype.size_of();
        let end = pos + count * width;
        if end > bytes.len() {
            bail!(Decode, "checkpoint truncated inside tensor {}", rec.name);
        }
        let raw = &bytes[pos..end];
        let vals: Vec<T> = match rec.dtype {
            d if d == T::DTYPE => raw.chunks_exact(width).map(T::read_le).collect(),
            DType::F32 => raw.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
        };
        values.push(vals);
        pos = end;
    }
    if pos != bytes.len() {
        bail!(Decode, "{} trailing bytes after checkpoint data", bytes.len() - pos);
    }
    for (p, vals) in module.params_mut().into_iter().zip(values) {
        p.data_mut().copy_from_slice(&vals);
    }
    Ok(module)
}

pub fn save<T: Scalar, M: Persist<T>>(module: &M, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    // write-then-rename, so an interrupted save never leaves a truncated file behind
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    std::fs::write(&tmp, to_bytes(module)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: Scalar, M: Persist<T>>(path: &Path) -> Result<M> {
    from_bytes(&std::fs::read(path)?)
}

/// Checkpoint metadata without materializing the module.
pub fn peek_meta(path: &Path) -> Result<CheckpointMeta> {
    Ok(read_header(&std::fs::read(path)?)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sr_round_trip_is_bit_exact() {
        let m = SrModel::<f32>::build(SrModelConfig::desk(), "text", 9).unwrap();
        let a = to_bytes(&m).unwrap();
        let back: SrModel<f32> = from_bytes(&a).unwrap();
        assert_eq!(back.class_label(), "text");
        assert_eq!(back.config(), m.config());
        assert_eq!(to_bytes(&back).unwrap(), a);
    }

    #[test]
    fn fusion_round_trip_keeps_input_count() {
        let mut cfg = FusionConfig::new(3);
        cfg.n_features = 4;
        let mut net = FusionNet::<f64>::build(cfg, 1).unwrap();
        net.tail.weight.data_mut()[5] = 0.125;
        let a = to_bytes(&net).unwrap();
        let back: FusionNet<f64> = from_bytes(&a).unwrap();
        assert_eq!(back.config().n_inputs, 3);
        assert_eq!(to_bytes(&back).unwrap(), a);
    }

    #[test]
    fn cross_precision_load() {
        let m = SrModel::<f32>::build(SrModelConfig::desk(), "t", 2).unwrap();
        let wide: SrModel<f64> = from_bytes(&to_bytes(&m).unwrap()).unwrap();
        assert_eq!(wide.head.weight.data()[0], m.head.weight.data()[0] as f64);
    }

    #[test]
    fn rejects_corruption() {
        let m = SrModel::<f32>::build(SrModelConfig::desk(), "t", 2).unwrap();
        let bytes = to_bytes(&m).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes::<f32, SrModel<f32>>(&bad), Err(Error::Decode(_))));
        assert!(matches!(
            from_bytes::<f32, SrModel<f32>>(&bytes[..bytes.len() - 1]),
            Err(Error::Decode(_))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(from_bytes::<f32, SrModel<f32>>(&long).is_err());
        assert!(matches!(
            from_bytes::<f32, FusionNet<f32>>(&bytes),
            Err(Error::Decode(_))
        ));
    }
}

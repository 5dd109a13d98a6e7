//! Binary tensor container and key-value manifest for representation dumps,
//! adapter checkpoints and merged weights.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "LLNS"
//! version    u16      1
//! count      u32      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   dtype    u8       1 = f32, 2 = f64
//!   ndim     u8
//!   dims     ndim x u64
//!   payload  product(dims) x dtype size, row-major
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::arch::{Architecture, Role};
use crate::error::{Error, FormatError, Result};
use crate::importance::{token_rule_for, RepresentationSet};
use crate::model::{AdaptedModel, AdapterKey, ToyModel};
use crate::similarity::{RepresentationMatrix, TokenRule};

pub const MAGIC: [u8; 4] = *b"LLNS";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

impl Dtype {
    fn from_tag(tag: u8) -> std::result::Result<Self, FormatError> {
        match tag {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            other => Err(FormatError::UnknownDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// A named tensor. Values are held as `f64`; `dtype` is the storage type.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dtype: Dtype,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_matrix(name: impl Into<String>, dtype: Dtype, m: &DMatrix<f64>) -> Self {
        let data = m.transpose().as_slice().to_vec();
        Self {
            name: name.into(),
            dtype,
            dims: vec![m.nrows(), m.ncols()],
            data,
        }
    }

    /// Interprets a 2-D tensor as a matrix.
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        match self.dims.as_slice() {
            &[r, c] => Ok(DMatrix::from_row_slice(r, c, &self.data)),
            dims => Err(Error::DimensionMismatch(format!(
                "tensor {:?} has shape {dims:?}, expected 2-D",
                self.name
            ))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    pub tensors: Vec<Tensor>,
}

impl TensorContainer {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut names = HashSet::new();
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            if !names.insert(t.name.as_str()) {
                return Err(FormatError::DuplicateName(t.name.clone()).into());
            }
            let expected: usize = t.dims.iter().product();
            if expected != t.data.len() || t.dims.len() > u8::MAX as usize {
                return Err(Error::DimensionMismatch(format!(
                    "tensor {:?}: {} values for dims {:?}",
                    t.name,
                    t.data.len(),
                    t.dims
                )));
            }
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype as u8);
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t.dtype {
                Dtype::F32 => t
                    .data
                    .iter()
                    .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
                Dtype::F64 => t
                    .data
                    .iter()
                    .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        Ok(out)
    }

    /// Parses and bounds-checks a container. Never panics on arbitrary input.
    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        let mut names = HashSet::new();
        // Each tensor needs at least 6 header bytes, so `count` cannot force a
        // large allocation on a short stream.
        let mut tensors = Vec::with_capacity(count.min(r.remaining() / 6));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| FormatError::BadName)?
                .to_string();
            if !names.insert(name.clone()) {
                return Err(FormatError::DuplicateName(name));
            }
            let dtype = Dtype::from_tag(r.u8()?)?;
            let ndim = r.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let d = usize::try_from(r.u64()?)
                    .map_err(|_| FormatError::DimOverflow { name: name.clone() })?;
                dims.push(d);
            }
            let elements = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| FormatError::DimOverflow { name: name.clone() })?;
            let byte_len = elements
                .checked_mul(dtype.size())
                .ok_or_else(|| FormatError::DimOverflow { name: name.clone() })?;
            let payload = r.take(byte_len)?;
            let data: Vec<f64> = match dtype {
                Dtype::F32 => payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                Dtype::F64 => payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            tensors.push(Tensor {
                name,
                dtype,
                dims,
                data,
            });
        }
        if r.remaining() > 0 {
            return Err(FormatError::TrailingBytes(r.remaining()));
        }
        Ok(Self { tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        if n > self.remaining() {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.remaining(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, FormatError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> std::result::Result<u64, FormatError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_container(path: &Path, container: &TensorContainer) -> Result<()> {
    write_atomic(path, &container.encode()?)
}

pub fn read_container(path: &Path) -> Result<TensorContainer> {
    Ok(TensorContainer::decode(&fs::read(path)?)?)
}

/// Extraction metadata stored next to a representation container.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub model_id: String,
    pub architecture: Architecture,
    pub layer_count: usize,
    pub sample_count: usize,
    pub token_rule: TokenRule,
    pub dataset_id: String,
    /// Seconds since the Unix epoch.
    pub created_utc: u64,
}

const MANIFEST_KEYS: [&str; 7] = [
    "model_id",
    "architecture",
    "layer_count",
    "sample_count",
    "token_rule",
    "dataset_id",
    "created_utc",
];

impl Manifest {
    pub fn to_text(&self) -> String {
        format!(
            "model_id={}\narchitecture={}\nlayer_count={}\nsample_count={}\ntoken_rule={}\ndataset_id={}\ncreated_utc={}\n",
            self.model_id,
            self.architecture.as_str(),
            self.layer_count,
            self.sample_count,
            self.token_rule.as_str(),
            self.dataset_id,
            self.created_utc
        )
    }

    pub fn parse(text: &str) -> std::result::Result<Self, FormatError> {
        let bad = |m: String| FormatError::Manifest(m);
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key=value", n + 1)))?;
            if !MANIFEST_KEYS.contains(&k) {
                return Err(bad(format!("unknown key {k:?}")));
            }
            if map.insert(k, v).is_some() {
                return Err(bad(format!("duplicate key {k:?}")));
            }
        }
        let get = |k: &str| {
            map.get(k)
                .copied()
                .ok_or_else(|| bad(format!("missing key {k:?}")))
        };
        let num = |k: &str| -> std::result::Result<u64, FormatError> {
            get(k)?
                .parse()
                .map_err(|_| bad(format!("{k} is not an unsigned integer")))
        };
        Ok(Self {
            model_id: get("model_id")?.to_string(),
            architecture: Architecture::parse(get("architecture")?)
                .ok_or_else(|| bad("architecture must be encoder_only or decoder_only".into()))?,
            layer_count: num("layer_count")? as usize,
            sample_count: num("sample_count")? as usize,
            token_rule: TokenRule::parse(get("token_rule")?)
                .ok_or_else(|| bad("token_rule must be cls or last_token".into()))?,
            dataset_id: get("dataset_id")?.to_string(),
            created_utc: num("created_utc")?,
        })
    }
}

/// `<container path>.manifest`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

/// Stores `R_0..R_M` as f32 tensors plus a manifest.
pub fn write_representation_set(
    set: &RepresentationSet,
    path: &Path,
    dataset_id: &str,
    created_utc: u64,
) -> Result<()> {
    if set.layer_count() == 0 {
        return Err(Error::Invalid("representation set has no layers".into()));
    }
    for field in [set.model_id(), dataset_id] {
        if field.contains('\n') || field.contains('\r') {
            return Err(Error::Invalid(format!(
                "manifest value {field:?} contains a line break"
            )));
        }
    }
    let container = TensorContainer {
        tensors: set
            .matrices()
            .iter()
            .map(|m| Tensor::from_matrix(format!("R_{}", m.layer_index()), Dtype::F32, m.data()))
            .collect(),
    };
    let manifest = Manifest {
        model_id: set.model_id().to_string(),
        architecture: set.architecture(),
        layer_count: set.layer_count(),
        sample_count: set.sample_count(),
        token_rule: set.token_rule(),
        dataset_id: dataset_id.to_string(),
        created_utc,
    };
    write_container(path, &container)?;
    write_atomic(&manifest_path(path), manifest.to_text().as_bytes())
}

/// Reads and validates a representation container and its manifest.
pub fn read_representation_set(path: &Path) -> Result<(RepresentationSet, Manifest)> {
    let container = read_container(path)?;
    let manifest = Manifest::parse(&fs::read_to_string(manifest_path(path))?)?;
    let set = representation_set_from(&container, &manifest)?;
    Ok((set, manifest))
}

/// Validates a decoded container against its manifest.
pub fn representation_set_from(
    container: &TensorContainer,
    manifest: &Manifest,
) -> Result<RepresentationSet> {
    let mismatch = |m: String| Error::Format(FormatError::Manifest(m));
    if manifest.token_rule != token_rule_for(manifest.architecture) {
        return Err(mismatch(format!(
            "token_rule {} does not match architecture {}",
            manifest.token_rule.as_str(),
            manifest.architecture
        )));
    }
    if container.tensors.len() != manifest.layer_count + 1 {
        return Err(mismatch(format!(
            "layer_count {} needs {} tensors, container has {}",
            manifest.layer_count,
            manifest.layer_count + 1,
            container.tensors.len()
        )));
    }
    let mut matrices = Vec::with_capacity(container.tensors.len());
    for i in 0..=manifest.layer_count {
        let name = format!("R_{i}");
        let t = container
            .get(&name)
            .ok_or_else(|| mismatch(format!("missing tensor {name}")))?;
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite(name).into());
        }
        let m = t.to_matrix()?;
        if m.nrows() != manifest.sample_count {
            return Err(mismatch(format!(
                "{name} has {} rows, sample_count is {}",
                m.nrows(),
                manifest.sample_count
            )));
        }
        matrices.push(RepresentationMatrix::new(m, i, manifest.token_rule)?);
    }
    RepresentationSet::new(matrices, manifest.architecture, manifest.model_id.clone())
}

fn adapter_tensor_names(key: AdapterKey) -> (String, String) {
    let stem = format!("layer{}.{}", key.layer, key.role);
    (format!("{stem}.lora_b"), format!("{stem}.lora_a"))
}

/// Saves every adapter's `B` and `A` in f64.
pub fn save_adapters(model: &AdaptedModel, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    for key in model.adapter_keys() {
        let ad = model.adapter(key).expect("listed key");
        let (b, a) = adapter_tensor_names(key);
        tensors.push(Tensor::from_matrix(b, Dtype::F64, &ad.b));
        tensors.push(Tensor::from_matrix(a, Dtype::F64, &ad.a));
    }
    write_container(path, &TensorContainer { tensors })
}

/// Loads adapter factors saved by [`save_adapters`] into a model with the
/// same plan and targets.
pub fn load_adapters(model: &mut AdaptedModel, path: &Path) -> Result<()> {
    let container = read_container(path)?;
    let keys = model.adapter_keys();
    if container.tensors.len() != 2 * keys.len() {
        return Err(Error::DimensionMismatch(format!(
            "checkpoint has {} tensors, model has {} adapters",
            container.tensors.len(),
            keys.len()
        )));
    }
    for key in keys {
        let (bn, an) = adapter_tensor_names(key);
        let find = |n: &str| {
            container
                .get(n)
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks {n}")))
                .and_then(Tensor::to_matrix)
        };
        let (b, a) = (find(&bn)?, find(&an)?);
        let ad = model.adapter_mut(key).expect("listed key");
        if b.shape() != ad.b.shape() || a.shape() != ad.a.shape() {
            return Err(Error::DimensionMismatch(format!(
                "checkpoint shapes differ for {bn}"
            )));
        }
        ad.b = b;
        ad.a = a;
    }
    Ok(())
}

/// Exports every weight of a model with adapters folded in, in f64.
pub fn export_merged(model: &AdaptedModel, path: &Path) -> Result<()> {
    write_container(path, &model_container(&model.merge()))
}

fn model_container(m: &ToyModel) -> TensorContainer {
    let mut tensors = vec![
        Tensor::from_matrix("token_embedding", Dtype::F64, &m.token_embedding),
        Tensor::from_matrix("position_embedding", Dtype::F64, &m.position_embedding),
    ];
    for (i, block) in m.blocks.iter().enumerate() {
        let layer = i + 1;
        tensors.push(Tensor::from_matrix(
            format!("layer{layer}.attn_norm"),
            Dtype::F64,
            &DMatrix::from_row_slice(1, block.attn_norm.len(), block.attn_norm.as_slice()),
        ));
        tensors.push(Tensor::from_matrix(
            format!("layer{layer}.ffn_norm"),
            Dtype::F64,
            &DMatrix::from_row_slice(1, block.ffn_norm.len(), block.ffn_norm.as_slice()),
        ));
        for role in Role::ALL {
            if let Some(w) = block.weight(role) {
                tensors.push(Tensor::from_matrix(
                    format!("layer{layer}.{role}"),
                    Dtype::F64,
                    &w.merged(),
                ));
            }
        }
    }
    tensors.push(Tensor::from_matrix(
        "final_norm",
        Dtype::F64,
        &DMatrix::from_row_slice(1, m.final_norm.len(), m.final_norm.as_slice()),
    ));
    TensorContainer { tensors }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_set(arch: Architecture) -> RepresentationSet {
        let rule = token_rule_for(arch);
        let ms = (0..4)
            .map(|i| {
                let m = DMatrix::from_fn(5, 3, |r, c| {
                    ((r * 3 + c + i) as f64 * 0.37).sin() + i as f64
                });
                RepresentationMatrix::new(m, i, rule).unwrap()
            })
            .collect();
        RepresentationSet::new(ms, arch, "unit").unwrap()
    }

    #[test]
    fn round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reps.llns");
        let set = small_set(Architecture::DecoderOnly);
        write_representation_set(&set, &path, "ds", 42).unwrap();
        let (back, manifest) = read_representation_set(&path).unwrap();
        assert_eq!(manifest.layer_count, 3);
        assert_eq!(manifest.created_utc, 42);
        for (a, b) in set.matrices().iter().zip(back.matrices()) {
            let rounded = a.data().map(|v| v as f32 as f64);
            assert_eq!(&rounded, b.data());
        }
    }

    #[test]
    fn truncated_and_bad_headers() {
        let set = small_set(Architecture::EncoderOnly);
        let c = TensorContainer {
            tensors: set
                .matrices()
                .iter()
                .map(|m| {
                    Tensor::from_matrix(format!("R_{}", m.layer_index()), Dtype::F32, m.data())
                })
                .collect(),
        };
        let bytes = c.encode().unwrap();
        assert_eq!(TensorContainer::decode(&bytes).unwrap().tensors.len(), 4);
        assert!(matches!(
            TensorContainer::decode(&bytes[..bytes.len() - 3]),
            Err(FormatError::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            TensorContainer::decode(&bad),
            Err(FormatError::BadMagic(_))
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            TensorContainer::decode(&bad),
            Err(FormatError::UnsupportedVersion(9))
        ));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(
            TensorContainer::decode(&extra),
            Err(FormatError::TrailingBytes(1))
        ));
    }

    #[test]
    fn f64_containers_are_accepted() {
        let set = small_set(Architecture::DecoderOnly);
        let c = TensorContainer {
            tensors: set
                .matrices()
                .iter()
                .map(|m| {
                    Tensor::from_matrix(format!("R_{}", m.layer_index()), Dtype::F64, m.data())
                })
                .collect(),
        };
        let decoded = TensorContainer::decode(&c.encode().unwrap()).unwrap();
        let manifest = Manifest {
            model_id: "unit".into(),
            architecture: Architecture::DecoderOnly,
            layer_count: 3,
            sample_count: 5,
            token_rule: TokenRule::LastToken,
            dataset_id: "ds".into(),
            created_utc: 0,
        };
        let back = representation_set_from(&decoded, &manifest).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn manifest_mismatch_and_nan() {
        let set = small_set(Architecture::DecoderOnly);
        let mut c = TensorContainer {
            tensors: set
                .matrices()
                .iter()
                .map(|m| {
                    Tensor::from_matrix(format!("R_{}", m.layer_index()), Dtype::F32, m.data())
                })
                .collect(),
        };
        let mut manifest = Manifest {
            model_id: "unit".into(),
            architecture: Architecture::DecoderOnly,
            layer_count: 4,
            sample_count: 5,
            token_rule: TokenRule::LastToken,
            dataset_id: "ds".into(),
            created_utc: 0,
        };
        assert!(matches!(
            representation_set_from(&c, &manifest),
            Err(Error::Format(FormatError::Manifest(_)))
        ));
        manifest.layer_count = 3;
        c.tensors[2].data[1] = f64::NAN;
        assert!(matches!(
            representation_set_from(&c, &manifest),
            Err(Error::Format(FormatError::NonFinite(_)))
        ));
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = Manifest {
            model_id: "toy-encoder".into(),
            architecture: Architecture::EncoderOnly,
            layer_count: 12,
            sample_count: 256,
            token_rule: TokenRule::Cls,
            dataset_id: "parity".into(),
            created_utc: 1_700_000_000,
        };
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
        assert!(Manifest::parse("model_id=x\n").is_err());
        assert!(Manifest::parse(&format!("{}bogus=1\n", m.to_text())).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = Tensor {
            name: "x".into(),
            dtype: Dtype::F32,
            dims: vec![1],
            data: vec![1.0],
        };
        let c = TensorContainer {
            tensors: vec![t.clone(), t],
        };
        assert!(c.encode().is_err());
    }
}

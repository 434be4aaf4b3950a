//! Binary container shared by checkpoints and adapter files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SPAFITCK"
//! version    u8       FORMAT_VERSION
//! kind       u8       0 = checkpoint, 1 = adapter
//! config     u32 length + UTF-8 JSON of ModelConfig
//! plan       u32 length + UTF-8 plan spec string (length 0 = no plan)
//! count      u32
//! tensors    count × { u32 name length, name, u8 dtype (1 = f64),
//!                      u8 ndim, ndim × u64 dims, numel × f64 payload }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use thiserror::Error;

use super::{ModelConfig, Param, ParamStatus, ParamStore};
use crate::plan::{compile_plan, LoraPair, PlanSpec};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 8] = *b"SPAFITCK";
pub const FORMAT_VERSION: u8 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a spafit container")]
    BadMagic,
    #[error("unsupported format version {0} (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u8),
    #[error("truncated file")]
    Truncated,
    #[error("corrupt container: {0}")]
    Corrupt(String),
    #[error("expected a {expected:?} container, found {found:?}")]
    WrongKind {
        expected: ContainerKind,
        found: ContainerKind,
    },
    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid embedded plan: {0}")]
    Plan(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContainerKind {
    Checkpoint,
    Adapter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    pub config: ModelConfig,
    pub plan: Option<String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(|_| std::io::Error::other("length exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

fn put_bytes(w: &mut impl Write, b: &[u8]) -> std::io::Result<()> {
    put_u32(w, b.len())?;
    w.write_all(b)
}

pub fn write_container(c: &Container, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&[FORMAT_VERSION])?;
    w.write_all(&[match c.kind {
        ContainerKind::Checkpoint => 0,
        ContainerKind::Adapter => 1,
    }])?;
    let config = serde_json::to_vec(&c.config).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    put_bytes(&mut w, &config)?;
    put_bytes(&mut w, c.plan.as_deref().unwrap_or("").as_bytes())?;
    put_u32(&mut w, c.tensors.len())?;
    for (name, t) in &c.tensors {
        put_bytes(&mut w, name.as_bytes())?;
        w.write_all(&[DTYPE_F64, t.ndim() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn exact(&mut self, buf: &mut [u8]) -> Result<(), CheckpointError> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => CheckpointError::Truncated,
            _ => CheckpointError::Io(e),
        })
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        let mut b = [0u8; 1];
        self.exact(&mut b)?;
        Ok(b[0])
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b) as usize)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()?;
        let mut b = Vec::new();
        (&mut self.inner)
            .take(n as u64)
            .read_to_end(&mut b)
            .map_err(CheckpointError::Io)?;
        if b.len() != n {
            return Err(CheckpointError::Truncated);
        }
        String::from_utf8(b).map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }
}

pub fn read_container(path: &Path) -> Result<Container, CheckpointError> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
    };
    let mut magic = [0u8; 8];
    r.exact(&mut magic).map_err(|e| match e {
        CheckpointError::Truncated => CheckpointError::BadMagic,
        e => e,
    })?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u8()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let kind = match r.u8()? {
        0 => ContainerKind::Checkpoint,
        1 => ContainerKind::Adapter,
        k => return Err(CheckpointError::Corrupt(format!("unknown kind byte {k}"))),
    };
    let config: ModelConfig = serde_json::from_str(&r.string()?)
        .map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
    let plan = Some(r.string()?).filter(|s| !s.is_empty());
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string()?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(CheckpointError::Corrupt(format!(
                "tensor `{name}` has unsupported dtype {dtype}"
            )));
        }
        let ndim = r.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Corrupt(format!("tensor `{name}` is too large")))?;
        let mut data = Vec::with_capacity(numel.min(1 << 24));
        for _ in 0..numel {
            data.push(f64::from_bits(r.u64()?));
        }
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        tensors.push((name, t));
    }
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing)? != 0 {
        return Err(CheckpointError::Corrupt("trailing bytes after last tensor".into()));
    }
    Ok(Container {
        kind,
        config,
        plan,
        tensors,
    })
}

/// Write every base tensor and LoRA factor, with the config and applied plan.
pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let mut tensors: Vec<(String, Tensor)> = store
        .params()
        .map(|(k, p)| (k.to_string(), strip_grad(&p.tensor)))
        .collect();
    for (_, pair) in store.lora_pairs() {
        tensors.push((pair.a_name(), strip_grad(&pair.a)));
        tensors.push((pair.b_name(), strip_grad(&pair.b)));
    }
    write_container(
        &Container {
            kind: ContainerKind::Checkpoint,
            config: store.config().clone(),
            plan: store.plan().map(|p| p.to_string()),
            tensors,
        },
        path,
    )
}

fn strip_grad(t: &Tensor) -> Tensor {
    let mut t = t.clone();
    t.grad = None;
    t
}

/// Load a checkpoint, rejecting unknown, missing or misshapen tensors.
pub fn load_checkpoint(path: &Path) -> Result<ParamStore, CheckpointError> {
    let c = read_container(path)?;
    if c.kind != ContainerKind::Checkpoint {
        return Err(CheckpointError::WrongKind {
            expected: ContainerKind::Checkpoint,
            found: c.kind,
        });
    }
    c.config
        .validate()
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let plan = c
        .plan
        .as_deref()
        .map(|s| {
            let spec: PlanSpec = s.parse().map_err(|e| CheckpointError::Plan(format!("{e}")))?;
            compile_plan(&spec, &c.config).map_err(|e| CheckpointError::Plan(e.to_string()))
        })
        .transpose()?;

    let mut expected: IndexMap<String, Vec<usize>> = c.config.param_shapes().into_iter().collect();
    if let Some(plan) = &plan {
        for target in &plan.lora_targets {
            let shape = &expected[target.as_str()];
            let (out, inp) = (shape[0], shape[1]);
            let r = c.config.lora_rank;
            expected.insert(LoraPair::factor_name(target, true), vec![r, inp]);
            expected.insert(LoraPair::factor_name(target, false), vec![out, r]);
        }
    }
    let mut found: IndexMap<String, Tensor> = IndexMap::new();
    for (name, t) in c.tensors {
        let Some(shape) = expected.get(&name) else {
            return Err(CheckpointError::UnknownTensor(name));
        };
        if t.shape() != shape.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                expected: shape.clone(),
                found: t.shape().to_vec(),
                name,
            });
        }
        if found.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::Corrupt(format!("duplicate tensor `{name}`")));
        }
    }
    if let Some(missing) = expected.keys().find(|k| !found.contains_key(*k)) {
        return Err(CheckpointError::MissingTensor(missing.clone()));
    }

    let mut params = IndexMap::new();
    for (name, _) in c.config.param_shapes() {
        let status = plan
            .as_ref()
            .map_or(ParamStatus::Trainable, |p| p.assignments[&name]);
        let tensor = found.swap_remove(&name).expect("checked above");
        params.insert(name, Param { tensor, status });
    }
    let mut lora = IndexMap::new();
    if let Some(plan) = &plan {
        for target in &plan.lora_targets {
            let a = found
                .swap_remove(&LoraPair::factor_name(target, true))
                .expect("checked above");
            let b = found
                .swap_remove(&LoraPair::factor_name(target, false))
                .expect("checked above");
            lora.insert(
                target.clone(),
                LoraPair::from_factors(target, a, b, c.config.lora_alpha)
                    .map_err(|e| CheckpointError::Corrupt(e.to_string()))?,
            );
        }
    }
    Ok(ParamStore::from_parts(
        c.config,
        params,
        lora,
        plan.map(|p| p.spec),
    ))
}

//! Checkpoint persistence: `model.bin` holds parameter arrays and batch-norm
//! running statistics (little-endian `f32`), `model.meta` is a plain-text
//! `key = value` sidecar describing the architecture and provenance.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::objective::GradientState;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MODEL_FILE: &str = "model.bin";
pub const META_FILE: &str = "model.meta";
pub const GRADIENT_STATE_FILE: &str = "gradient_state.bin";
const MAGIC: &[u8; 8] = b"BVADCKPT";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub version: u32,
    pub spec: ModelSpec,
    pub beta: f64,
    pub config_hash: String,
    /// File name of the gradient-state snapshot next to the checkpoint, if any.
    pub gradient_state: Option<String>,
    pub fingerprint: String,
}

impl CheckpointMeta {
    fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "# bvad checkpoint metadata");
        let _ = writeln!(s, "format_version = {}", self.version);
        let _ = writeln!(s, "kind = {}", self.spec.kind);
        let _ = writeln!(s, "encoder_filters = {}", list(&self.spec.encoder_filters));
        let _ = writeln!(s, "bottleneck_channels = {}", self.spec.bottleneck_channels);
        let _ = writeln!(s, "latent_dim = {}", self.spec.latent_dim);
        let _ = writeln!(s, "leaky_slope = {}", self.spec.leaky_slope);
        let _ = writeln!(s, "pool_after = {}", list(&self.spec.pool_after));
        let _ = writeln!(s, "upsample_after = {}", list(&self.spec.upsample_after));
        let _ = writeln!(s, "beta = {}", self.beta);
        let _ = writeln!(s, "config_hash = {}", self.config_hash);
        let _ = writeln!(
            s,
            "gradient_state = {}",
            self.gradient_state.as_deref().unwrap_or("")
        );
        let _ = writeln!(s, "fingerprint = {}", self.fingerprint);
        s
    }

    fn from_text(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad metadata line {line:?}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            kv.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("metadata key {k} missing")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("metadata key {k} is not an integer")))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            get(k)?
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| Error::Checkpoint(format!("bad list in {k}")))
                })
                .collect()
        };
        let version: u32 = get("format_version")?
            .parse()
            .map_err(|_| Error::Checkpoint("format_version is not an integer".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let float = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("metadata key {k} is not a number")))
        };
        let spec = ModelSpec {
            kind: get("kind")?.parse()?,
            latent_dim: num("latent_dim")?,
            encoder_filters: list("encoder_filters")?,
            bottleneck_channels: num("bottleneck_channels")?,
            leaky_slope: float("leaky_slope")?,
            pool_after: list("pool_after")?,
            upsample_after: list("upsample_after")?,
        };
        let gs = get("gradient_state")?;
        Ok(Self {
            version,
            spec,
            beta: float("beta")?,
            config_hash: get("config_hash")?,
            gradient_state: (!gs.is_empty()).then_some(gs),
            fingerprint: get("fingerprint")?,
        })
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
}

fn put_f32s(buf: &mut Vec<u8>, v: &[f32]) {
    buf.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_f32s(r: &mut ByteReader<'_>, want: usize, what: &str) -> Result<Vec<f32>> {
    let n = r.u64()? as usize;
    if n != want {
        return Err(Error::Checkpoint(format!(
            "{what}: expected {want} values, found {n}"
        )));
    }
    (0..n).map(|_| r.f32()).collect()
}

pub fn save_checkpoint(dir: &Path, model: &Model<f32>, meta: &CheckpointMeta) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let names = model.param_names();
    let params = model.params();
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, p) in names.iter().zip(&params) {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        put_f32s(&mut buf, p);
    }
    let buffers = model.buffers();
    buf.extend_from_slice(&(buffers.len() as u64).to_le_bytes());
    for (m, v) in buffers {
        put_f32s(&mut buf, m);
        put_f32s(&mut buf, v);
    }
    let path = dir.join(MODEL_FILE);
    std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(META_FILE);
    std::fs::write(&path, meta.to_text()).map_err(|e| Error::io(&path, e))
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    CheckpointMeta::from_text(&text)
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: meta.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let path = dir.join(MODEL_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut r = ByteReader::new(&bytes);
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut model = Model::<f32>::new(&meta.spec, 0)?;
    let names = model.param_names();
    let count = r.u64()? as usize;
    if count != names.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter tensors, found {count}",
            names.len()
        )));
    }
    for (name, p) in names.iter().zip(model.params_mut()) {
        let stored = r.string()?;
        if &stored != name {
            return Err(Error::Checkpoint(format!(
                "expected tensor {name}, found {stored}"
            )));
        }
        *p = read_f32s(&mut r, p.len(), name)?;
    }
    let nbuf = r.u64()? as usize;
    let mut bufs = model.buffers_mut();
    if nbuf != bufs.len() {
        return Err(Error::Checkpoint("batch-norm buffer count mismatch".into()));
    }
    for (m, v) in bufs.iter_mut() {
        **m = read_f32s(&mut r, m.len(), "running_mean")?;
        **v = read_f32s(&mut r, v.len(), "running_var")?;
    }
    Ok((model, meta))
}

/// Save a model together with its gradient history.
pub fn save_trained(
    dir: &Path,
    model: &Model<f32>,
    state: &GradientState,
    beta: f64,
    config_hash: &str,
) -> Result<CheckpointMeta> {
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        spec: model.spec().clone(),
        beta,
        config_hash: config_hash.to_string(),
        gradient_state: Some(GRADIENT_STATE_FILE.to_string()),
        fingerprint: model.fingerprint(),
    };
    save_checkpoint(dir, model, &meta)?;
    state.save(&dir.join(GRADIENT_STATE_FILE))?;
    Ok(meta)
}

/// Load a checkpoint and, when recorded, its gradient history.
pub fn load_trained(dir: &Path) -> Result<(Model<f32>, CheckpointMeta, Option<GradientState>)> {
    let (model, meta) = load_checkpoint(dir)?;
    if model.fingerprint() != meta.fingerprint {
        return Err(Error::Checkpoint(format!(
            "{}: parameters do not match the recorded fingerprint",
            dir.display()
        )));
    }
    let state = match &meta.gradient_state {
        Some(name) => Some(GradientState::load(&dir.join(name))?),
        None => None,
    };
    Ok((model, meta, state))
}

/// Whether `dir` looks like a checkpoint directory.
pub fn is_checkpoint_dir(dir: &Path) -> bool {
    dir.join(META_FILE).is_file() && dir.join(MODEL_FILE).is_file()
}

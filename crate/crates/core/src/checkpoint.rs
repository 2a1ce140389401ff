//! Binary checkpoint container and model serialization.
//!
//! Layout, all little-endian: magic `EQNT`, u32 format version, u32 tensor
//! count, then per tensor a length-prefixed name, a dtype tag (0 = f32,
//! 1 = i8, 2 = packed i4), rank and dims as u32, the raw element bytes, and
//! a quantization-parameter block behind a presence flag. A length-prefixed
//! key/value text section follows the tensor table and carries the model
//! configuration echo. Floats are stored as f32; packed i4 holds two
//! two's-complement nibbles per byte, low nibble first.

use std::path::Path;

use crate::error::{CoreError, Result};
use crate::model::{
    attach_quantizers, Model, ModelConfig, Normalizer, ParamSet, QuantScheme,
};
use crate::quant::{calibrate_weight_per_channel, Granularity, QuantParams};
use crate::tensor::{Real, Tensor};

pub const MAGIC: [u8; 4] = *b"EQNT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32 { shape: Vec<usize>, values: Vec<f32> },
    I8 { shape: Vec<usize>, values: Vec<i8> },
    /// Elements restricted to [-8, 7]; packed two per byte on disk.
    I4 { shape: Vec<usize>, values: Vec<i8> },
}

impl Payload {
    pub fn shape(&self) -> &[usize] {
        match self {
            Payload::F32 { shape, .. } | Payload::I8 { shape, .. } | Payload::I4 { shape, .. } => {
                shape
            }
        }
    }

    fn dtype_tag(&self) -> u8 {
        match self {
            Payload::F32 { .. } => 0,
            Payload::I8 { .. } => 1,
            Payload::I4 { .. } => 2,
        }
    }

    fn numel(&self) -> usize {
        match self {
            Payload::F32 { values, .. } => values.len(),
            Payload::I8 { values, .. } | Payload::I4 { values, .. } => values.len(),
        }
    }

    pub fn from_tensor(t: &Tensor) -> Payload {
        Payload::F32 {
            shape: t.shape().to_vec(),
            values: t.data().iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        match self {
            Payload::F32 { shape, values } => {
                Tensor::new(shape.clone(), values.iter().map(|&x| x as Real).collect())
            }
            _ => Err(CoreError::CheckpointFormat(
                "expected an f32 tensor payload".into(),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CkptTensor {
    pub name: String,
    pub payload: Payload,
    pub quant: Option<QuantParams>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub tensors: Vec<CkptTensor>,
    /// Configuration echo: ordered key/value text pairs.
    pub config: Vec<(String, String)>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CoreError::CheckpointFormat(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        let b = self.take(4, what)?;
        Ok(i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| CoreError::CheckpointFormat(format!("{what} is not valid UTF-8")))
    }
}

fn pack_i4(values: &[i8]) -> Result<Vec<u8>> {
    for &v in values {
        if !(-8..=7).contains(&v) {
            return Err(CoreError::CheckpointFormat(format!(
                "value {v} does not fit a 4-bit two's-complement nibble"
            )));
        }
    }
    let mut out = Vec::with_capacity(values.len().div_ceil(2));
    for pair in values.chunks(2) {
        let lo = (pair[0] as u8) & 0x0F;
        let hi = if pair.len() == 2 { (pair[1] as u8) & 0x0F } else { 0 };
        out.push(lo | (hi << 4));
    }
    Ok(out)
}

fn unpack_i4(bytes: &[u8], numel: usize) -> Vec<i8> {
    let mut out = Vec::with_capacity(numel);
    for &b in bytes {
        for nibble in [b & 0x0F, b >> 4] {
            if out.len() < numel {
                out.push(((nibble << 4) as i8) >> 4);
            }
        }
    }
    out
}

fn write_quant_params(buf: &mut Vec<u8>, p: &QuantParams) {
    buf.push(p.bits);
    buf.push(p.signed as u8);
    buf.extend_from_slice(&(p.scale as f32).to_le_bytes());
    buf.extend_from_slice(&p.zero_point.to_le_bytes());
    match p.granularity {
        Granularity::PerTensor => buf.push(0),
        Granularity::PerOutputChannel => {
            buf.push(1);
            put_u32(buf, p.channel_scales.len() as u32);
            for &s in &p.channel_scales {
                buf.extend_from_slice(&(s as f32).to_le_bytes());
            }
        }
    }
}

fn read_quant_params(r: &mut Reader) -> Result<QuantParams> {
    let bits = r.u8("quant bits")?;
    let signed = r.u8("quant signedness")? != 0;
    let scale = r.f32("quant scale")? as Real;
    let zero_point = r.i32("quant zero point")?;
    match r.u8("granularity tag")? {
        0 => {
            let mut p = QuantParams::per_tensor(bits, signed, scale)?;
            p.zero_point = zero_point;
            Ok(p)
        }
        1 => {
            let n = r.u32("channel count")? as usize;
            let mut scales = Vec::with_capacity(n);
            for _ in 0..n {
                scales.push(r.f32("channel scale")? as Real);
            }
            let mut p = QuantParams::per_channel(bits, signed, scales)?;
            p.zero_point = zero_point;
            Ok(p)
        }
        tag => Err(CoreError::CheckpointFormat(format!(
            "unknown granularity tag {tag}"
        ))),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        put_u32(&mut buf, self.version);
        put_u32(&mut buf, self.tensors.len() as u32);
        for t in &self.tensors {
            put_str(&mut buf, &t.name);
            buf.push(t.payload.dtype_tag());
            let shape = t.payload.shape();
            let numel: usize = shape.iter().product();
            if numel != t.payload.numel() {
                return Err(CoreError::CheckpointFormat(format!(
                    "tensor '{}': shape {:?} does not match {} elements",
                    t.name,
                    shape,
                    t.payload.numel()
                )));
            }
            put_u32(&mut buf, shape.len() as u32);
            for &d in shape {
                put_u32(&mut buf, d as u32);
            }
            match &t.payload {
                Payload::F32 { values, .. } => {
                    for v in values {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Payload::I8 { values, .. } => {
                    buf.extend(values.iter().map(|&v| v as u8));
                }
                Payload::I4 { values, .. } => {
                    buf.extend_from_slice(&pack_i4(values)?);
                }
            }
            match &t.quant {
                None => buf.push(0),
                Some(p) => {
                    buf.push(1);
                    write_quant_params(&mut buf, p);
                }
            }
        }
        put_u32(&mut buf, self.config.len() as u32);
        for (k, v) in &self.config {
            put_str(&mut buf, k);
            put_str(&mut buf, v);
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(CoreError::CheckpointFormat(
                "bad magic (expected EQNT)".into(),
            ));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CoreError::CheckpointFormat(format!(
                "unsupported format version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let n_tensors = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(n_tensors.min(4096));
        for _ in 0..n_tensors {
            let name = r.string("tensor name")?;
            let dtype = r.u8("dtype tag")?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32("dim")? as usize);
            }
            let numel: usize = shape.iter().product();
            let payload = match dtype {
                0 => {
                    let raw = r.take(4 * numel, "f32 data")?;
                    let values = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    Payload::F32 { shape, values }
                }
                1 => {
                    let raw = r.take(numel, "i8 data")?;
                    Payload::I8 {
                        shape,
                        values: raw.iter().map(|&b| b as i8).collect(),
                    }
                }
                2 => {
                    let raw = r.take(numel.div_ceil(2), "i4 data")?;
                    Payload::I4 {
                        shape,
                        values: unpack_i4(raw, numel),
                    }
                }
                tag => {
                    return Err(CoreError::CheckpointFormat(format!(
                        "unknown dtype tag {tag} for tensor '{name}'"
                    )))
                }
            };
            let quant = match r.u8("quant flag")? {
                0 => None,
                1 => Some(read_quant_params(&mut r)?),
                flag => {
                    return Err(CoreError::CheckpointFormat(format!(
                        "quant presence flag must be 0 or 1, got {flag}"
                    )))
                }
            };
            tensors.push(CkptTensor {
                name,
                payload,
                quant,
            });
        }
        let n_pairs = r.u32("config pair count")? as usize;
        let mut config = Vec::with_capacity(n_pairs.min(1024));
        for _ in 0..n_pairs {
            let k = r.string("config key")?;
            let v = r.string("config value")?;
            config.push((k, v));
        }
        if r.pos != bytes.len() {
            return Err(CoreError::CheckpointFormat(format!(
                "{} trailing bytes after config section",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            version,
            tensors,
            config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    pub fn config_value(&self, key: &str) -> Result<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| CoreError::CheckpointFormat(format!("config key '{key}' missing")))
    }
}

fn real_field(ckpt: &Checkpoint, key: &str) -> Result<Real> {
    ckpt.config_value(key)?
        .parse()
        .map_err(|_| CoreError::CheckpointFormat(format!("config key '{key}' is not a number")))
}

fn usize_field(ckpt: &Checkpoint, key: &str) -> Result<usize> {
    ckpt.config_value(key)?
        .parse()
        .map_err(|_| CoreError::CheckpointFormat(format!("config key '{key}' is not an integer")))
}

pub fn config_echo(cfg: &ModelConfig, norm: &Normalizer, scheme: QuantScheme) -> Vec<(String, String)> {
    let species = cfg
        .species
        .iter()
        .map(|z| z.to_string())
        .collect::<Vec<_>>()
        .join(",");
    [
        ("scheme", scheme.name().to_string()),
        ("f0", cfg.f0.to_string()),
        ("f1", cfg.f1.to_string()),
        ("n_layers", cfg.n_layers.to_string()),
        ("n_rbf", cfg.n_rbf.to_string()),
        ("cutoff", cfg.cutoff.to_string()),
        ("d_attn", cfg.d_attn.to_string()),
        ("species", species),
        ("e_scale", norm.e_scale.to_string()),
        ("e_shift", norm.e_shift.to_string()),
        ("f_scale", norm.f_scale.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

pub fn config_from_echo(ckpt: &Checkpoint) -> Result<(ModelConfig, Normalizer, QuantScheme)> {
    let species = ckpt
        .config_value("species")?
        .split(',')
        .map(|s| {
            s.trim().parse().map_err(|_| {
                CoreError::CheckpointFormat(format!("bad species entry '{s}' in config echo"))
            })
        })
        .collect::<Result<Vec<u32>>>()?;
    let cfg = ModelConfig {
        f0: usize_field(ckpt, "f0")?,
        f1: usize_field(ckpt, "f1")?,
        n_layers: usize_field(ckpt, "n_layers")?,
        n_rbf: usize_field(ckpt, "n_rbf")?,
        cutoff: real_field(ckpt, "cutoff")?,
        d_attn: usize_field(ckpt, "d_attn")?,
        species,
    };
    cfg.validate()?;
    let norm = Normalizer {
        e_scale: real_field(ckpt, "e_scale")?,
        e_shift: real_field(ckpt, "e_shift")?,
        f_scale: real_field(ckpt, "f_scale")?,
    };
    let scheme = QuantScheme::parse(ckpt.config_value("scheme")?)?;
    Ok((cfg, norm, scheme))
}

/// Full-precision model checkpoint: every parameter as f32, in binding order.
/// Under quantizing schemes the weight matrices also carry their per-channel
/// grids so external tools can inspect them without re-deriving.
pub fn save_model(model: &Model) -> Result<Checkpoint> {
    let plan = attach_quantizers(&model.cfg, model.scheme);
    let weight_names: Vec<&str> = plan.weight_sites.iter().map(|w| w.param.as_str()).collect();
    let mut tensors = Vec::with_capacity(model.params.len());
    for (name, t) in model.params.iter() {
        let payload = Payload::from_tensor(t);
        // grids are derived from the f32 payload, not the in-memory f64
        // values, so the echoed metadata matches what a loader recomputes
        let quant = if weight_names.contains(&name) {
            Some(calibrate_weight_per_channel(&payload.to_tensor()?, plan.weight_bits)?)
        } else {
            None
        };
        tensors.push(CkptTensor {
            name: name.to_string(),
            payload,
            quant,
        });
    }
    let mut config = config_echo(&model.cfg, &model.norm, model.scheme);
    config.push(("kind".into(), "float".into()));
    Ok(Checkpoint {
        version: FORMAT_VERSION,
        tensors,
        config,
    })
}

/// Rebuilds a model from [`save_model`] output. Parameters come back
/// f32-narrowed, so a save/load/save cycle is byte-identical.
pub fn load_model(ckpt: &Checkpoint) -> Result<Model> {
    let (cfg, norm, scheme) = config_from_echo(ckpt)?;
    let mut params = ParamSet::new();
    for t in &ckpt.tensors {
        params.insert(&t.name, t.payload.to_tensor()?)?;
    }
    Ok(Model {
        cfg,
        params,
        norm,
        scheme,
    })
}

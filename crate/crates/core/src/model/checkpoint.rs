//! Binary checkpoint layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "SAMSNET\0"
//! version      u32
//! config       9 × u32 (blocks, heads, channels, slices, freq_bins,
//!              input/output/recovery/dw kernels), 5 × u8 (mask activation,
//!              attention, attention scale, input norm, sublayer output norm),
//!              f64 ln_eps
//! label        u32 length + UTF-8 bytes
//! epoch        u64
//! params       u32 count, then per tensor: u32 rank, rank × u32 dims, f32 data
//! optimizer    u8 present; if 1: 4 × f64 (lr, β1, β2, ε), u64 step,
//!              then per tensor f32 first moments followed by f32 second moments
//! ```
//!
//! Tensors appear in [`SamsNet::param_specs`] order.

use std::fs;
use std::path::Path;

use super::{AttentionScale, MaskActivation, ModelConfig, SamsNet};
use crate::numerics::{AdamConfig, AdamState, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SAMSNET\0";
pub const FORMAT_VERSION: u32 = 1;

/// A trained (or training) network for one source, with optional optimiser
/// state for resumption.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub label: String,
    pub epoch: u64,
    pub model: SamsNet<f32>,
    pub optimizer: Option<AdamState<f32>>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(buf: &mut Vec<u8>, data: &[f32]) {
    buf.reserve(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let cfg = ck.model.config();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [
        cfg.blocks,
        cfg.heads,
        cfg.channels,
        cfg.slices,
        cfg.freq_bins,
        cfg.input_kernel,
        cfg.output_kernel,
        cfg.recovery_kernel,
        cfg.dw_kernel,
    ] {
        put_u32(&mut buf, v)?;
    }
    buf.push(match cfg.mask_activation {
        MaskActivation::Relu => 0,
        MaskActivation::Sigmoid => 1,
    });
    buf.push(cfg.attention as u8);
    buf.push(match cfg.attention_scale {
        AttentionScale::Channels => 0,
        AttentionScale::Bins => 1,
    });
    buf.push(cfg.input_norm as u8);
    buf.push(cfg.sublayer_output_norm as u8);
    buf.extend_from_slice(&cfg.ln_eps.to_le_bytes());
    put_u32(&mut buf, ck.label.len())?;
    buf.extend_from_slice(ck.label.as_bytes());
    buf.extend_from_slice(&ck.epoch.to_le_bytes());
    put_u32(&mut buf, ck.model.params().len())?;
    for p in ck.model.params() {
        put_u32(&mut buf, p.shape().len())?;
        for d in p.shape() {
            put_u32(&mut buf, *d)?;
        }
        put_f32s(&mut buf, p.data());
    }
    match &ck.optimizer {
        None => buf.push(0),
        Some(opt) => {
            buf.push(1);
            let c = opt.config;
            for v in [c.lr, c.beta1, c.beta2, c.eps] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend_from_slice(&opt.steps().to_le_bytes());
            for (m, v) in opt.first_moments().iter().zip(opt.second_moments()) {
                put_f32s(&mut buf, m);
                put_f32s(&mut buf, v);
            }
        }
    }
    Ok(buf)
}

/// Writes to a sibling temporary file and renames it over `path`.
pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(ck)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated: wanted {n} bytes at offset {} of {}", self.pos, self.buf.len()))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor size overflows".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4"))).collect())
    }

    fn flag(&mut self, what: &str) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Format(format!("{what}: invalid flag {v}"))),
        }
    }
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("not a checkpoint (bad magic bytes)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Format(format!("unsupported format version {version}, expected {FORMAT_VERSION}")));
    }
    let mut cfg = ModelConfig {
        blocks: r.u32()?,
        heads: r.u32()?,
        channels: r.u32()?,
        slices: r.u32()?,
        freq_bins: r.u32()?,
        input_kernel: r.u32()?,
        output_kernel: r.u32()?,
        recovery_kernel: r.u32()?,
        dw_kernel: r.u32()?,
        ..ModelConfig::default()
    };
    cfg.mask_activation = match r.u8()? {
        0 => MaskActivation::Relu,
        1 => MaskActivation::Sigmoid,
        v => return Err(Error::Format(format!("unknown mask activation {v}"))),
    };
    cfg.attention = r.flag("attention")?;
    cfg.attention_scale = match r.u8()? {
        0 => AttentionScale::Channels,
        1 => AttentionScale::Bins,
        v => return Err(Error::Format(format!("unknown attention scale {v}"))),
    };
    cfg.input_norm = r.flag("input_norm")?;
    cfg.sublayer_output_norm = r.flag("sublayer_output_norm")?;
    cfg.ln_eps = r.f64()?;
    let label_len = r.u32()?;
    let label = String::from_utf8(r.take(label_len)?.to_vec()).map_err(|e| Error::Format(format!("label: {e}")))?;
    let epoch = r.u64()?;
    let count = r.u32()?;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let data = r.f32s(shape.iter().product())?;
        params.push(Tensor::from_vec(&shape, data)?);
    }
    let model = SamsNet::from_params(cfg, params).map_err(|e| Error::Format(e.to_string()))?;
    let optimizer = if r.flag("optimizer")? {
        let config = AdamConfig { lr: r.f64()?, beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
        let t = r.u64()?;
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for p in model.params() {
            m.push(r.f32s(p.numel())?);
            v.push(r.f32s(p.numel())?);
        }
        Some(AdamState::from_parts(config, m, v, t)?)
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { label, epoch, model, optimizer })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

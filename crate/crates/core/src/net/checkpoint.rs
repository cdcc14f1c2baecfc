//! Binary checkpoint format.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic "TVSEGNET" | version u32
//! input_channels u32 | classes u32 | levels u32 | widths u32 × levels
//! activation u8 (0 plain, 1 regularized)
//! lambda f64 | kappa f64 | tau f64 | test iterations u32
//! learning rate f64 | momentum f64
//! parameter count u64 | parameters f64 × count
//! ```
//!
//! Parameters are stored per layer, weights then biases, in declaration
//! order. Momentum buffers are not saved.

use std::io::Write;
use std::path::Path;

use super::{FinalActivation, NetSpec, Network};
use crate::activation::{RegActConfig, RegMode};
use crate::error::{Error, Result};
use crate::net::layers::Conv2d;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TVSEGNET";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(net: &Network) -> Vec<u8> {
    let spec = net.spec();
    let params = net.params();
    let mut b = Vec::new();
    b.extend_from_slice(CHECKPOINT_MAGIC);
    b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [spec.input_channels, spec.classes, spec.levels()] {
        b.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &w in &spec.widths {
        b.extend_from_slice(&(w as u32).to_le_bytes());
    }
    b.push(match spec.activation {
        FinalActivation::Plain => 0,
        FinalActivation::Regularized => 1,
    });
    for v in [net.lambda(), spec.reg.kappa, spec.reg.tau] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b.extend_from_slice(&(spec.reg.iterations as u32).to_le_bytes());
    b.extend_from_slice(&params.learning_rate.to_le_bytes());
    b.extend_from_slice(&params.momentum.to_le_bytes());
    let flat = params.flatten();
    b.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in flat {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "unexpected end of data at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let input_channels = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let levels = r.u32()? as usize;
    if levels > 16 {
        return Err(Error::Checkpoint(format!(
            "implausible level count {levels}"
        )));
    }
    let widths = (0..levels)
        .map(|_| r.u32().map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let activation = match r.u8()? {
        0 => FinalActivation::Plain,
        1 => FinalActivation::Regularized,
        t => return Err(Error::Checkpoint(format!("unknown activation tag {t}"))),
    };
    let lambda = r.f64()?;
    let kappa = r.f64()?;
    let tau = r.f64()?;
    let iterations = r.u32()? as usize;
    let learning_rate = r.f64()?;
    let momentum = r.f64()?;
    let spec = NetSpec {
        input_channels,
        classes,
        widths,
        activation,
        reg: RegActConfig {
            lambda,
            kappa,
            tau,
            iterations,
            mode: RegMode::OneStep,
        },
    };
    spec.validate()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let layers: Vec<Conv2d> = spec
        .layer_dims()
        .into_iter()
        .map(|(i, o, k)| Conv2d::zeros(i, o, k))
        .collect();
    let mut net = Network::from_layers(spec, layers);
    let count = r.u64()? as usize;
    if count != net.params().param_count() {
        return Err(Error::Checkpoint(format!(
            "parameter count {count} does not match architecture ({})",
            net.params().param_count()
        )));
    }
    let flat = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Checkpoint("non-finite parameter".into()));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let p = net.params_mut();
    p.unflatten(&flat)?;
    p.learning_rate = learning_rate;
    p.momentum = momentum;
    Ok(net)
}

pub fn write_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(net)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Network> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

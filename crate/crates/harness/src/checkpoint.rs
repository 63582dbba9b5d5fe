//! Binary checkpoints: a versioned header followed by little-endian `f64`
//! parameters.
//!
//! Layout: magic `DIPPCKPT`, version `u32`, kind `u8`, then the architecture
//! (dim `u32`, conditions `u32`, sigma_data `f64`, sigma_init `f64`,
//! activation `u8`, width count `u32`, widths `u32`...), training step `u64`,
//! the 32-byte config hash, parameter count `u64` and the parameters.

use std::fmt;
use std::path::Path;

use dipp_core::diffusion::{Denoise, Denoiser};
use dipp_core::generator::OneStepGenerator;
use dipp_core::nn::{Activation, Mlp};

use crate::config::hex;
use crate::error::{io_err, HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"DIPPCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Reference,
    Ta,
    Generator,
    GeneratorEma,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Reference => 0,
            ModelKind::Ta => 1,
            ModelKind::Generator => 2,
            ModelKind::GeneratorEma => 3,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ModelKind::Reference,
            1 => ModelKind::Ta,
            2 => ModelKind::Generator,
            3 => ModelKind::GeneratorEma,
            _ => return None,
        })
    }

    pub fn is_generator(self) -> bool {
        matches!(self, ModelKind::Generator | ModelKind::GeneratorEma)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Reference => "reference",
            ModelKind::Ta => "TA",
            ModelKind::Generator => "generator",
            ModelKind::GeneratorEma => "generator-EMA",
        })
    }
}

/// Everything needed to rebuild the network around a parameter block.
/// `sigma_init` is zero for non-generator kinds.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub dim: usize,
    pub n_conditions: usize,
    pub sigma_data: f64,
    pub sigma_init: f64,
    pub activation: Activation,
    pub widths: Vec<usize>,
}

impl Architecture {
    pub fn of_denoiser(d: &Denoiser, sigma_init: f64) -> Self {
        Self {
            dim: d.dim(),
            n_conditions: d.n_conditions(),
            sigma_data: d.sigma_data(),
            sigma_init,
            activation: d.net().activation(),
            widths: d.net().widths().to_vec(),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "dim={} conditions={} sigma_data={} sigma_init={} activation={:?} widths={:?}",
            self.dim, self.n_conditions, self.sigma_data, self.sigma_init, self.activation, self.widths
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub arch: Architecture,
    pub step: u64,
    pub config_hash: [u8; 32],
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn from_denoiser(kind: ModelKind, d: &Denoiser, step: u64, config_hash: [u8; 32]) -> Self {
        Self {
            kind,
            arch: Architecture::of_denoiser(d, 0.0),
            step,
            config_hash,
            params: d.params().to_vec(),
        }
    }

    pub fn from_generator(kind: ModelKind, g: &OneStepGenerator, step: u64, config_hash: [u8; 32]) -> Self {
        Self {
            kind,
            arch: Architecture::of_denoiser(g.denoiser(), g.sigma_init()),
            step,
            config_hash,
            params: g.params().to_vec(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let a = &self.arch;
        let mut out = Vec::with_capacity(128 + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.tag());
        out.extend_from_slice(&(a.dim as u32).to_le_bytes());
        out.extend_from_slice(&(a.n_conditions as u32).to_le_bytes());
        out.extend_from_slice(&a.sigma_data.to_le_bytes());
        out.extend_from_slice(&a.sigma_init.to_le_bytes());
        out.push(a.activation.tag());
        out.extend_from_slice(&(a.widths.len() as u32).to_le_bytes());
        for &w in &a.widths {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint file (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("format version {version}, this build reads version {VERSION}"));
        }
        let tag = r.u8()?;
        let kind = ModelKind::from_tag(tag).ok_or_else(|| format!("unknown model kind tag {tag}"))?;
        let dim = r.u32()? as usize;
        let n_conditions = r.u32()? as usize;
        let sigma_data = r.f64()?;
        let sigma_init = r.f64()?;
        let act = r.u8()?;
        let activation = Activation::from_tag(act).ok_or_else(|| format!("unknown activation tag {act}"))?;
        let n_widths = r.u32()? as usize;
        if n_widths > 1024 {
            return Err(format!("implausible layer count {n_widths}"));
        }
        let widths = (0..n_widths).map(|_| r.u32().map(|w| w as usize)).collect::<std::result::Result<_, _>>()?;
        let step = r.u64()?;
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let n = r.u64()? as usize;
        if r.remaining() != n.saturating_mul(8) {
            return Err(format!("expected {n} parameters, found {} trailing bytes", r.remaining()));
        }
        let params = (0..n).map(|_| r.f64()).collect::<std::result::Result<_, _>>()?;
        Ok(Self {
            kind,
            arch: Architecture {
                dim,
                n_conditions,
                sigma_data,
                sigma_init,
                activation,
                widths,
            },
            step,
            config_hash,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes).map_err(|reason| HarnessError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }

    /// Loads and checks kind and config hash.
    pub fn load_expecting(path: &Path, kinds: &[ModelKind], hash: Option<&[u8; 32]>) -> Result<Self> {
        let ck = Self::load(path)?;
        let fail = |reason: String| HarnessError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        if !kinds.contains(&ck.kind) {
            let want: Vec<String> = kinds.iter().map(|k| k.to_string()).collect();
            return Err(fail(format!("holds a {} model, expected {}", ck.kind, want.join(" or "))));
        }
        if let Some(h) = hash {
            if &ck.config_hash != h {
                return Err(fail(format!(
                    "config hash {} does not match the current config {}",
                    hex(&ck.config_hash),
                    hex(h)
                )));
            }
        }
        Ok(ck)
    }

    /// Rejects a checkpoint whose architecture differs from `expected`.
    pub fn check_architecture(&self, expected: &Architecture) -> Result<()> {
        if &self.arch != expected {
            return Err(HarnessError::Checkpoint {
                path: Default::default(),
                reason: format!("architecture mismatch: file has [{}], expected [{}]", self.arch, expected),
            });
        }
        Ok(())
    }

    pub fn to_denoiser(&self) -> Result<Denoiser> {
        let a = &self.arch;
        let net = Mlp::from_params(a.widths.clone(), a.activation, self.params.clone())?;
        Ok(Denoiser::from_net(net, a.dim, a.n_conditions, a.sigma_data)?)
    }

    pub fn to_generator(&self) -> Result<OneStepGenerator> {
        if !self.kind.is_generator() {
            return Err(HarnessError::Checkpoint {
                path: Default::default(),
                reason: format!("a {} checkpoint cannot be loaded as a generator", self.kind),
            });
        }
        Ok(OneStepGenerator::new(self.to_denoiser()?, self.arch.sigma_init)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated: needed {n} bytes at offset {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

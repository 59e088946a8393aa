//! Versioned binary checkpoints.
//!
//! ```text
//! "SSCK" version:u32
//! arch_name_len:u16 arch_name arch_id:u16 timesteps:u32
//! has_bottleneck:u8 [split:u32 c:u32 h:u32 w:u32]
//! n_tensors:u32 { name_len:u16 name len:u64 f32[len] }*
//! ```
//!
//! Integers and floats are little-endian; tensors are sorted by name.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use spikesplit_core::arch::{build_arch, ArchitectureSpec};
use spikesplit_core::network::SpikingNetwork;
use spikesplit_core::{FeatureShape, Real};

use crate::{Result, TrainError};

const MAGIC: &[u8; 4] = b"SSCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch_name: String,
    pub arch_id: u16,
    pub timesteps: usize,
    pub bottleneck: Option<(usize, FeatureShape)>,
    pub tensors: BTreeMap<String, Vec<f32>>,
}

impl Checkpoint {
    pub fn from_network<F: Real>(net: &SpikingNetwork<F>) -> Self {
        Self {
            arch_name: net.arch.name.clone(),
            arch_id: net.arch.arch_id,
            timesteps: net.timesteps,
            bottleneck: net.bottleneck.as_ref().map(|(s, b)| (*s, b.config.out_shape)),
            tensors: net
                .named_tensors()
                .into_iter()
                .map(|(k, v)| (k, v.iter().map(|x| x.as_f64() as f32).collect()))
                .collect(),
        }
    }

    /// Rebuilds the network on `arch`, which must be the one it was saved from.
    pub fn to_network<F: Real>(&self, arch: &ArchitectureSpec) -> Result<SpikingNetwork<F>> {
        if arch.name != self.arch_name || arch.arch_id != self.arch_id {
            return Err(TrainError::ArchMismatch {
                expected: format!("{} (id {})", arch.name, arch.arch_id),
                found: format!("{} (id {})", self.arch_name, self.arch_id),
            });
        }
        let mut net = SpikingNetwork::init(arch, self.timesteps, 0)?;
        if let Some((split, shape)) = self.bottleneck {
            net.insert_bottleneck(split, shape, 0)?;
        }
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|&x| F::lit(x as f64)).collect()))
            .collect();
        net.load_named_tensors(tensors)?;
        Ok(net)
    }

    /// [`to_network`](Self::to_network) on the built-in architecture of the same name.
    pub fn to_builtin_network<F: Real>(&self) -> Result<SpikingNetwork<F>> {
        self.to_network(&build_arch(&self.arch_name)?)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.arch_name)?;
        out.extend_from_slice(&self.arch_id.to_le_bytes());
        out.extend_from_slice(&u32_of(self.timesteps)?.to_le_bytes());
        match self.bottleneck {
            None => out.push(0),
            Some((split, s)) => {
                out.push(1);
                for v in [split, s.c, s.h, s.w] {
                    out.extend_from_slice(&u32_of(v)?.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&u32_of(self.tensors.len())?.to_le_bytes());
        for (name, data) in &self.tensors {
            put_str(&mut out, name)?;
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&out)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(TrainError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let arch_name = cur.string()?;
        let arch_id = cur.u16()?;
        let timesteps = cur.u32()? as usize;
        let bottleneck = match cur.take(1)?[0] {
            0 => None,
            1 => {
                let split = cur.u32()? as usize;
                let (c, h, w) = (cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize);
                Some((split, FeatureShape::new(c, h, w)))
            }
            v => return Err(TrainError::Checkpoint(format!("bad bottleneck flag {v}"))),
        };
        let n = cur.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..n {
            let name = cur.string()?;
            let len = usize::try_from(cur.u64()?).map_err(|_| TrainError::Checkpoint("tensor too large".into()))?;
            let raw = cur.take(len.checked_mul(4).ok_or_else(|| TrainError::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if tensors.insert(name.clone(), data).is_some() {
                return Err(TrainError::Checkpoint(format!("duplicate tensor `{name}`")));
            }
        }
        if cur.pos != bytes.len() {
            return Err(TrainError::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            arch_name,
            arch_id,
            timesteps,
            bottleneck,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

fn u32_of(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| TrainError::Checkpoint(format!("{v} does not fit u32")))
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| TrainError::Checkpoint(format!("name too long: {s}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TrainError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
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

    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| TrainError::Checkpoint("name is not UTF-8".into()))
    }
}

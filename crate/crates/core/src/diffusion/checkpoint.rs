//! Binary model checkpoint.
//!
//! Layout (little-endian): magic `PLCK`, format version (u32), header JSON
//! (u32 length + UTF-8: category names, model options, label codebook),
//! schedule betas (u32 count + f64 values), embedded shape models (u32 count,
//! then u32 length + shape-model blob each), denoiser parameters (u32 count,
//! then per tensor: u32 name length, name, u32 rows, u32 cols, f32 values),
//! and a trailing 64-bit FNV-1a checksum of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelOptions, ShapeModel};
use super::schedule::Schedule;
use crate::autodiff::{ParamStore, Tensor};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::semantics::LabelCodebook;
use crate::ssm::PartSsm;

const MAGIC: &[u8; 4] = b"PLCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    category_names: Vec<String>,
    options: ModelOptions,
    codebook: LabelCodebook,
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl ShapeModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&Header {
            category_names: self.category_names.clone(),
            options: self.options,
            codebook: self.codebook.clone(),
        })
        .expect("header serializes");
        put_u32(&mut out, header.len());
        out.extend_from_slice(&header);
        put_u32(&mut out, self.schedule.steps());
        for b in self.schedule.betas() {
            out.extend_from_slice(&b.to_le_bytes());
        }
        put_u32(&mut out, self.ssms.len());
        for ssm in &self.ssms {
            let blob = ssm.to_bytes();
            put_u32(&mut out, blob.len());
            out.extend_from_slice(&blob);
        }
        let params = self.denoiser.params();
        put_u32(&mut out, params.len());
        for (name, t) in params.names().iter().zip(params.tensors()) {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rows());
            put_u32(&mut out, t.cols());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Corrupt("not a model checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if fnv1a(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
            return Err(Error::Corrupt(
                "checkpoint checksum mismatch (truncated or modified)".into(),
            ));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let header_len = r.u32()?;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Corrupt(format!("checkpoint header: {e}")))?;
        let steps = r.u32()?;
        let betas = (0..steps).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let schedule = Schedule::from_betas(betas)?;
        let ssm_count = r.u32()?;
        let mut ssms = Vec::with_capacity(ssm_count);
        for _ in 0..ssm_count {
            let len = r.u32()?;
            ssms.push(PartSsm::from_bytes(r.take(len)?)?);
        }
        let tensor_count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..tensor_count {
            let name_len = r.u32()?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Corrupt("parameter name is not UTF-8".into()))?
                .to_string();
            let (rows, cols) = (r.u32()?, r.u32()?);
            let data = (0..rows * cols).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            params.insert(&name, Tensor::from_vec(rows, cols, data)?)?;
        }
        if r.pos != body.len() {
            return Err(Error::Corrupt("trailing bytes in checkpoint".into()));
        }
        let layout = super::latent::LatentLayout::from_ssms(&ssms)?;
        let config = super::model::denoiser_config(&layout, &header.options);
        let denoiser = Denoiser::from_params(config, params)?;
        ShapeModel::from_parts(
            header.category_names,
            ssms,
            header.options,
            schedule,
            header.codebook,
            denoiser,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt("checkpoint ends early".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

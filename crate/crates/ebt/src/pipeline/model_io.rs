//! Binary persistence for parameter stores and the face basis.
//!
//! One container format covers both: magic `EBTM`, a version byte, a u32
//! tensor count, then per tensor a u16 name length, the UTF-8 name, a u8
//! rank, u32 dims, and little-endian f32 data. An empty store is exactly
//! the 9-byte header, which pins the layout against accidental field
//! reordering.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::face::{FaceBasis, LandmarkKind};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: [u8; 4] = *b"EBTM";
const VERSION: u8 = 1;

pub fn save_model(store: &ParamStore, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.push(VERSION);
    let count = u32::try_from(store.len())
        .map_err(|_| Error::Model("too many tensors to serialize".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, t) in store.iter() {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len())
            .map_err(|_| Error::Model(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| Error::Model(format!("tensor rank too large: {name}")))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Model(format!("dim too large in {name}")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Model(format!(
                "truncated model file: wanted {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_model(path: &Path) -> Result<ParamStore> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Model(format!("bad magic in {}", path.display())));
    }
    let version = c.u8()?;
    if version != VERSION {
        return Err(Error::Model(format!(
            "unsupported model version {version}, expected {VERSION}"
        )));
    }
    let count = c.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Model("tensor name is not UTF-8".into()))?
            .to_string();
        if store.get(&name).is_some() {
            return Err(Error::Model(format!("duplicate tensor name: {name}")));
        }
        let rank = c.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = c.u32()? as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Model(format!("dim overflow in {name}")))?;
            shape.push(d);
        }
        let raw = c.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        store.insert(&name, Tensor::new(shape, data));
    }
    if c.pos != buf.len() {
        return Err(Error::Model(format!(
            "{} trailing bytes after last tensor",
            buf.len() - c.pos
        )));
    }
    Ok(store)
}

/// Serialize a face basis into the tensor container. Landmark indices and
/// kind codes ride along as float tensors; both are small integers, well
/// inside f32's exact range.
pub fn save_basis(basis: &FaceBasis, path: &Path) -> Result<()> {
    let v3 = basis.mean_shape.len();
    let ds = basis.geo_dim();
    let de = basis.exp_dim();
    let mut store = ParamStore::new();
    store.insert("face/mean", Tensor::new(vec![v3], basis.mean_shape.clone()));
    store.insert("face/geo", Tensor::new(vec![v3, ds], basis.geometry_basis.clone()));
    store.insert("face/expr", Tensor::new(vec![v3, de], basis.expression_basis.clone()));
    store.insert("face/geo_sigma", Tensor::new(vec![ds], basis.geometry_sigma.clone()));
    store.insert("face/expr_sigma", Tensor::new(vec![de], basis.expression_sigma.clone()));
    let idx: Vec<f32> = basis.landmark_indices.iter().map(|&i| i as f32).collect();
    let kinds: Vec<f32> = basis.landmark_kinds.iter().map(|&k| k.code() as f32).collect();
    store.insert("face/landmark_idx", Tensor::new(vec![idx.len()], idx));
    store.insert("face/landmark_kind", Tensor::new(vec![kinds.len()], kinds));
    save_model(&store, path)
}

fn integral(name: &str, v: f32) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 || v > 16_000_000.0 {
        return Err(Error::Model(format!("{name} holds non-integral value {v}")));
    }
    Ok(v as usize)
}

pub fn load_basis(path: &Path) -> Result<FaceBasis> {
    let store = load_model(path)?;
    let need = |name: &str| -> Result<&Tensor> {
        store
            .get(name)
            .ok_or_else(|| Error::Model(format!("basis file missing tensor {name}")))
    };
    let mean = need("face/mean")?;
    let geo = need("face/geo")?;
    let expr = need("face/expr")?;
    let idx = need("face/landmark_idx")?;
    let kind = need("face/landmark_kind")?;
    let basis = FaceBasis {
        mean_shape: mean.data().to_vec(),
        geometry_basis: geo.data().to_vec(),
        expression_basis: expr.data().to_vec(),
        geometry_sigma: need("face/geo_sigma")?.data().to_vec(),
        expression_sigma: need("face/expr_sigma")?.data().to_vec(),
        landmark_indices: idx
            .data()
            .iter()
            .map(|&v| integral("face/landmark_idx", v))
            .collect::<Result<_>>()?,
        landmark_kinds: kind
            .data()
            .iter()
            .map(|&v| LandmarkKind::from_code(integral("face/landmark_kind", v)? as u8))
            .collect::<Result<_>>()?,
    };
    basis.validate()?;
    Ok(basis)
}

//! Binary checkpoint format.
//!
//! ```text
//! "DRF3"  u32 version
//! u32 d  u32 heads  u32 tokens  u32 time_width  u8 enable_ham  u8 enable_tt
//! u32 timesteps  f64 cosine_s  f64 snr  f64 clamp_bound  u8 enable_diffusion
//! u32 param_count
//! per parameter: u32 name_len, name bytes, u32 rank, u32 dims[rank], f64 data…
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{Read, Write};

use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::network::{HamConfig, NetConfig, RefineNet};
use crate::params::ParamStore;
use crate::pipeline::Model;
use crate::tensor::TensorD;

pub const MAGIC: &[u8; 4] = b"DRF3";
pub const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64(w: &mut impl Write, v: f64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_bool(w: &mut impl Write, v: bool) -> Result<()> {
    Ok(w.write_all(&[v as u8])?)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn get_bool(r: &mut impl Read) -> Result<bool> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    match b[0] {
        0 => Ok(false),
        1 => Ok(true),
        x => Err(Error::Format(format!("bad flag byte {x}"))),
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

pub fn save(w: &mut impl Write, model: &Model) -> Result<()> {
    let net = &model.net;
    let h = net.cfg.ham;
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_u32(w, to_u32(h.d, "d")?)?;
    put_u32(w, to_u32(h.heads, "heads")?)?;
    put_u32(w, to_u32(h.tokens, "tokens")?)?;
    put_u32(w, to_u32(h.time_width, "time_width")?)?;
    put_bool(w, net.cfg.enable_ham)?;
    put_bool(w, net.cfg.enable_tt)?;
    let dc = &model.diffusion;
    put_u32(w, to_u32(dc.timesteps, "timesteps")?)?;
    put_f64(w, dc.cosine_s)?;
    put_f64(w, dc.snr)?;
    put_f64(w, dc.clamp_bound)?;
    put_bool(w, model.enable_diffusion)?;
    put_u32(w, to_u32(net.params.len(), "param count")?)?;
    for (_, name, value) in net.params.iter() {
        put_u32(w, to_u32(name.len(), "name length")?)?;
        w.write_all(name.as_bytes())?;
        put_u32(w, to_u32(value.shape().len(), "rank")?)?;
        for &s in value.shape() {
            put_u32(w, to_u32(s, "dim")?)?;
        }
        for &v in value.data() {
            put_f64(w, v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(r: &mut impl Read) -> Result<Model> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let ham = HamConfig {
        d: get_u32(r)? as usize,
        heads: get_u32(r)? as usize,
        tokens: get_u32(r)? as usize,
        time_width: get_u32(r)? as usize,
    };
    let enable_ham = get_bool(r)?;
    let enable_tt = get_bool(r)?;
    let diffusion = DiffusionConfig {
        timesteps: get_u32(r)? as usize,
        cosine_s: get_f64(r)?,
        snr: get_f64(r)?,
        clamp_bound: get_f64(r)?,
    };
    let enable_diffusion = get_bool(r)?;
    let count = get_u32(r)? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = get_u32(r)? as usize;
        if len > 4096 {
            return Err(Error::Format(format!("parameter name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rank = get_u32(r)? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("rank {rank} for `{name}`")));
        }
        let shape = (0..rank)
            .map(|_| get_u32(r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| get_f64(r)).collect::<Result<Vec<_>>>()?;
        params.register(&name, TensorD::from_vec(&shape, data)?)?;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after last parameter".into()));
    }
    let cfg = NetConfig {
        ham,
        enable_ham,
        enable_tt,
    };
    let net = RefineNet::from_params(cfg, params)?;
    Model::from_parts(net, diffusion, enable_diffusion)
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    save(&mut buf, model)?;
    Ok(buf)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    load(&mut &bytes[..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let model = Model::new(&crate::pipeline::TrainConfig::default()).unwrap();
        let bytes = to_bytes(&model).unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.net.params, model.net.params);
        assert_eq!(back.diffusion, model.diffusion);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_input_rejected() {
        let model = Model::new(&crate::pipeline::TrainConfig::default()).unwrap();
        let mut bytes = to_bytes(&model).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
        let mut extra = to_bytes(&model).unwrap();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}

//! Model checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "OBTC" | version u32 | config: u32 length + JSON ModelConfig
//! n_params u32 | per parameter: u32 length + name, ndim u32, dims u32×ndim,
//!                 f32×numel row-major
//! ```

use std::fs;
use std::path::Path;

use crate::binio::{put_f32s, put_string, put_u32, Reader};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, OneBt};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"OBTC";
pub const VERSION: u32 = 1;

pub fn to_bytes<T: Real>(model: &OneBt<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_string(&mut out, &serde_json::to_string(model.config())?);
    put_u32(&mut out, model.params().len() as u32);
    for p in model.params().iter() {
        put_string(&mut out, &p.name);
        put_u32(&mut out, p.tensor.ndim() as u32);
        for &d in p.tensor.shape() {
            put_u32(&mut out, d as u32);
        }
        put_f32s(&mut out, p.tensor.data().iter().map(|v| v.as_f64() as f32));
    }
    Ok(out)
}

pub fn from_bytes<T: Real>(buf: &[u8]) -> Result<OneBt<T>> {
    let mut r = Reader::new(buf);
    if r.bytes(4, "magic")? != MAGIC {
        return Err(Error::Load {
            offset: 0,
            msg: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.err(format!("unsupported checkpoint version {version}")));
    }
    let cfg_at = r.offset();
    let cfg: ModelConfig = serde_json::from_str(&r.string("config")?).map_err(|e| Error::Load {
        offset: cfg_at,
        msg: format!("bad config: {e}"),
    })?;
    let mut model = OneBt::<T>::new(cfg, 0)?;
    let n = r.u32("parameter count")? as usize;
    if n != model.params().len() {
        return Err(r.err(format!(
            "checkpoint has {n} parameters, config implies {}",
            model.params().len()
        )));
    }
    for _ in 0..n {
        let at = r.offset();
        let name = r.string("parameter name")?;
        let id = model.params().id_of(&name).ok_or_else(|| Error::Load {
            offset: at,
            msg: format!("unknown parameter `{name}`"),
        })?;
        let ndim = r.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dim")? as usize);
        }
        let want = model.params().get(id).tensor.shape().to_vec();
        if shape != want {
            return Err(r.err(format!("parameter `{name}` has shape {shape:?}, expected {want:?}")));
        }
        let numel = shape.iter().product();
        let data = r.f32s(numel, &name)?;
        model.params_mut().get_mut(id).tensor = Tensor::new(shape, data.into_iter().map(|v| T::of(v as f64)).collect())?;
    }
    if r.remaining() != 0 {
        return Err(r.err("trailing bytes after last parameter"));
    }
    Ok(model)
}

pub fn save<T: Real>(model: &OneBt<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<OneBt<T>> {
    from_bytes(&fs::read(path)?)
}

/// Loads and checks that the stored configuration equals `expected`.
pub fn load_expecting<T: Real>(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<OneBt<T>> {
    let m = load::<T>(path)?;
    if m.config() != expected {
        return Err(Error::Config(format!(
            "checkpoint config {:?} does not match expected {:?}",
            m.config(),
            expected
        )));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let m = OneBt::<f32>::new(ModelConfig::tiny(), 3).unwrap();
        let back: OneBt<f32> = from_bytes(&to_bytes(&m).unwrap()).unwrap();
        assert_eq!(back.config(), m.config());
        for (a, b) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(a.name, b.name);
            let ab: Vec<u32> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let m = OneBt::<f32>::new(ModelConfig::tiny(), 3).unwrap();
        let bytes = to_bytes(&m).unwrap();
        let err = from_bytes::<f32>(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Load { .. }), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes::<f32>(&bad).is_err());
    }

    #[test]
    fn rejects_config_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = OneBt::<f32>::new(ModelConfig::tiny(), 3).unwrap();
        save(&m, &path).unwrap();
        let other = ModelConfig {
            latent_dim: 16,
            ..ModelConfig::tiny()
        };
        assert!(matches!(load_expecting::<f32>(&path, &other), Err(Error::Config(_))));
        load_expecting::<f32>(&path, &ModelConfig::tiny()).unwrap();
    }
}

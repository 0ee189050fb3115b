//! `STKN` checkpoint files: named `f32` tensors in sorted-name order.
//!
//! Layout, little-endian: magic `STKN`, `u32` version (1), `u32` tensor count,
//! then per tensor `u32` name length, UTF-8 name, `u32` rank, `u32` dims and
//! the row-major data. The run configuration travels next to the tensors in a
//! text sidecar, `<checkpoint>.cfg`.

use std::path::{Path, PathBuf};

use crate::binio::{self, Reader};
use crate::config::{load_config, RunConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"STKN";
const VERSION: u32 = 1;

pub fn to_bytes(params: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + params.num_scalars() * 4);
    out.extend_from_slice(&MAGIC);
    binio::put_u32(&mut out, VERSION);
    binio::put_u32(&mut out, binio::to_u32(params.len(), "tensor count")?);
    // ParamStore iterates in sorted-name order
    for (name, t) in params.iter() {
        binio::put_u32(&mut out, binio::to_u32(name.len(), "name length")?);
        out.extend_from_slice(name.as_bytes());
        binio::put_u32(&mut out, binio::to_u32(t.rank(), "rank")?);
        for &d in t.shape() {
            binio::put_u32(&mut out, binio::to_u32(d, "dimension")?);
        }
        binio::put_f32s(&mut out, t.data());
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore<f32>> {
    let mut r = Reader::new(bytes, "checkpoint");
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    let mut previous: Option<String> = None;
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.bytes(len, "name")?)
            .map_err(|e| Error::Invalid(format!("checkpoint tensor {i} name is not UTF-8: {e}")))?
            .to_owned();
        if previous.as_ref().is_some_and(|p| *p >= name) {
            return Err(Error::Invalid(format!(
                "checkpoint tensor `{name}` is out of order or duplicated"
            )));
        }
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().product();
        let data = r.f32s(numel, &format!("`{name}` data"))?;
        store.insert(name.clone(), Tensor::new(&shape, data)?);
        previous = Some(name);
    }
    r.finish()?;
    Ok(store)
}

/// Path of the configuration sidecar for `checkpoint`.
pub fn config_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

/// Writes the tensors and the configuration sidecar.
pub fn save(path: impl AsRef<Path>, params: &ParamStore<f32>, cfg: &RunConfig) -> Result<()> {
    let path = path.as_ref();
    binio::write_file(path, &to_bytes(params)?)?;
    binio::write_file(&config_path(path), cfg.to_text().as_bytes())
}

/// Reads the tensors, plus the sidecar configuration when it exists.
pub fn load(path: impl AsRef<Path>) -> Result<(ParamStore<f32>, Option<RunConfig>)> {
    let path = path.as_ref();
    let params = from_bytes(&binio::read_file(path)?)?;
    let side = config_path(path);
    let cfg = if side.exists() { Some(load_config(&side)?) } else { None };
    Ok((params, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;
    use crate::model::Segmenter;

    fn model() -> (RunConfig, Segmenter<f32>) {
        let cfg = parse_config("C = 8\nL = 2\nstages = 1\nvariant = sse\nseed = 5").unwrap();
        let m = Segmenter::new(cfg.model_config()).unwrap();
        (cfg, m)
    }

    #[test]
    fn round_trip_is_bitwise_and_preserves_outputs() {
        let (cfg, m) = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.stkn");
        save(&path, &m.params, &cfg).unwrap();
        let (params, back_cfg) = load(&path).unwrap();
        assert!(back_cfg.unwrap().same_settings(&cfg));
        for ((na, a), (nb, b)) in params.iter().zip(m.params.iter()) {
            assert_eq!((na, a.shape()), (nb, b.shape()));
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let restored = Segmenter::with_params(cfg.model_config(), params).unwrap();
        let img = Tensor::from_fn(&[3, 32, 32], |i| (i as f32 * 0.01).cos().abs());
        let (a, b) = (m.predict_logits(&img).unwrap(), restored.predict_logits(&img).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(to_bytes(&restored.params).unwrap(), to_bytes(&m.params).unwrap());
    }

    #[test]
    fn header_errors_are_distinct() {
        let (_, m) = model();
        let bytes = to_bytes(&m.params).unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"STDS");
        assert!(matches!(from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(from_bytes(&bad), Err(Error::VersionMismatch { found: 2, .. })));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn missing_and_misshapen_parameters_are_named() {
        let (cfg, m) = model();
        let mut params = ParamStore::new();
        for (name, t) in m.params.iter().filter(|(n, _)| *n != "tokens") {
            params.insert(name, t.clone());
        }
        let params = from_bytes(&to_bytes(&params).unwrap()).unwrap();
        assert!(matches!(
            Segmenter::with_params(cfg.model_config(), params),
            Err(Error::MissingParam(n)) if n == "tokens"
        ));
        let mut params = m.params.clone();
        params.insert("tokens", Tensor::zeros(&[4, 2, 2]));
        assert!(matches!(
            Segmenter::with_params(cfg.model_config(), params),
            Err(Error::ParamShape { .. })
        ));
    }
}

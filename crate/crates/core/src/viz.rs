//! Grayscale dumps of one class's token slice at every decoder stage.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::Segmenter;
use crate::tensor::{Element, Tensor};

/// Stage maps of a structure-token model for one image, each `K×H×W` at
/// feature resolution: the learned tokens, the output of every block, then
/// the class scores. `L + 2` entries.
pub fn token_stages<T: Element>(model: &Segmenter<T>, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let x = g.constant(image.clone());
    let out = model.forward(&mut g, &p, x)?;
    let trace = out
        .trace
        .ok_or_else(|| Error::Invalid("the baseline head has no structure tokens to show".into()))?;
    let mut stages: Vec<Tensor<T>> = trace.tokens.iter().map(|&v| g.value(v).clone()).collect();
    stages.push(g.value(out.logits).clone());
    Ok(stages)
}

/// Min-max scaling to `0..=255`; a constant plane maps to 128.
pub fn to_gray<T: Element>(plane: &[T]) -> Vec<u8> {
    let (lo, hi) = plane
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v.as_f64()), hi.max(v.as_f64()))
        });
    if !(hi > lo) {
        return vec![128; plane.len()];
    }
    plane
        .iter()
        .map(|v| ((v.as_f64() - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

/// Binary (P5) PGM with maxval 255.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::shape(format!(
            "{} pixels do not fill a {width}×{height} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Writes `tok_<stage>.pgm` for stages `0..=L+1` of class `class` and
/// returns the paths in stage order.
pub fn write_token_stages<T: Element>(
    model: &Segmenter<T>,
    image: &Tensor<T>,
    class: usize,
    outdir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    if class >= model.classes() {
        return Err(Error::Invalid(format!(
            "class index {class} is outside [0, {})",
            model.classes()
        )));
    }
    let outdir = outdir.as_ref();
    std::fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let mut paths = Vec::new();
    for (stage, t) in token_stages(model, image)?.iter().enumerate() {
        let (h, w) = (t.shape()[1], t.shape()[2]);
        let bytes = encode_pgm(w, h, &to_gray(t.channel(class)))?;
        let path = outdir.join(format!("tok_{stage}.pgm"));
        std::fs::File::create(&path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    #[test]
    fn gray_scaling() {
        assert_eq!(to_gray(&[2.0f32, 2.0, 2.0]), vec![128; 3]);
        assert_eq!(to_gray(&[-1.0f64, 0.0, 1.0]), vec![0, 128, 255]);
    }

    #[test]
    fn pgm_header() {
        let b = encode_pgm(3, 2, &[0, 1, 2, 3, 4, 5]).unwrap();
        assert_eq!(&b[..11], b"P5\n3 2\n255\n");
        assert_eq!(&b[11..], &[0, 1, 2, 3, 4, 5]);
        assert!(encode_pgm(3, 3, &[0; 6]).is_err());
    }

    #[test]
    fn one_file_per_stage() {
        let cfg = parse_config("C = 8\nstages = 1\nL = 4").unwrap();
        let m = Segmenter::<f32>::new(cfg.model_config()).unwrap();
        let img = Tensor::from_fn(&[3, 32, 32], |i| (i as f32 * 0.3).sin().abs());
        let dir = tempfile::tempdir().unwrap();
        let paths = write_token_stages(&m, &img, 1, dir.path()).unwrap();
        assert_eq!(paths.len(), 6);
        for (i, p) in paths.iter().enumerate() {
            assert_eq!(p.file_name().unwrap().to_str().unwrap(), format!("tok_{i}.pgm"));
            let bytes = std::fs::read(p).unwrap();
            assert!(bytes.starts_with(b"P5\n8 8\n255\n"));
            assert_eq!(bytes.len(), 11 + 64);
        }
        assert!(write_token_stages(&m, &img, 4, dir.path()).is_err());
    }
}

//! Binary model container.
//!
//! ```text
//! "SECU" | version: u32 = 1
//! encoder: layers L: u32 | widths: (L+1) × u32
//!          per layer: weight (out·in × f64), bias (out × f64)
//!          per layer: momentum weight, momentum bias (same shapes)
//! heads:   H: u32
//!          per head: K: u32 | d: u32 | enabled: u8 | centers K·d × f64 | momentum K·d × f64
//! ```
//!
//! All integers and floats are little-endian. Assignment state is not stored;
//! a restored model is meant for prediction and evaluation.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::assignment::AssignmentState;
use crate::centers::ClusterCenters;
use crate::data_io::Cursor;
use crate::encoder::{EncoderMlp, Linear};
use crate::error::{Result, SecuError};
use crate::numerics::Mat;
use crate::trainer::{Head, Model};

pub const MAGIC: &[u8; 4] = b"SECU";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v =
        u32::try_from(v).map_err(|_| SecuError::InvalidArgument(format!("{what} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let enc = &model.encoder;
    put_u32(&mut out, enc.layers().len(), "layer count")?;
    for &w in enc.dims() {
        put_u32(&mut out, w, "layer width")?;
    }
    for l in enc.layers().iter().chain(enc.momentum_buffers()) {
        put_f64s(&mut out, l.weight.as_slice());
        put_f64s(&mut out, &l.bias);
    }
    put_u32(&mut out, model.heads.len(), "head count")?;
    for h in &model.heads {
        put_u32(&mut out, h.centers.k(), "cluster count")?;
        put_u32(&mut out, h.centers.dim(), "center width")?;
        out.push(h.enabled as u8);
        put_f64s(&mut out, h.centers.matrix().as_slice());
        put_f64s(&mut out, h.centers.momentum().as_slice());
    }
    Ok(out)
}

fn parse_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(SecuError::Parse {
        offset: offset as u64,
        message: message.into(),
    })
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut c = Cursor::new(bytes);
    if c.take(4, "magic")? != MAGIC {
        return parse_err(0, "bad magic, expected SECU");
    }
    let at = c.pos;
    let version = c.u32("version")?;
    if version != VERSION {
        return parse_err(at, format!("unsupported checkpoint version {version}"));
    }
    let at = c.pos;
    let n_layers = c.u32("layer count")? as usize;
    if n_layers == 0 {
        return parse_err(at, "encoder has no layers");
    }
    let mut dims = Vec::with_capacity(n_layers + 1);
    for _ in 0..=n_layers {
        dims.push(c.u32("layer width")? as usize);
    }
    let read_layers = |c: &mut Cursor| -> Result<Vec<Linear>> {
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let cells = fan_in.checked_mul(fan_out).ok_or(SecuError::Parse {
                offset: c.pos as u64,
                message: "layer size overflows".into(),
            })?;
            let weight = Mat::from_vec(fan_out, fan_in, c.f64s(cells, "layer weights")?)?;
            let bias = c.f64s(fan_out, "layer bias")?;
            layers.push(Linear { weight, bias });
        }
        Ok(layers)
    };
    let layers = read_layers(&mut c)?;
    let momentum = read_layers(&mut c)?;
    let encoder = EncoderMlp::from_layers(layers)?.with_momentum(momentum)?;

    let n_heads = c.u32("head count")? as usize;
    let mut heads = Vec::with_capacity(n_heads);
    for _ in 0..n_heads {
        let at = c.pos;
        let k = c.u32("cluster count")? as usize;
        let d = c.u32("center width")? as usize;
        if d != encoder.output_dim() {
            return parse_err(
                at,
                format!(
                    "head width {d} does not match embedding width {}",
                    encoder.output_dim()
                ),
            );
        }
        let at = c.pos;
        let enabled = match c.u8("head flag")? {
            0 => false,
            1 => true,
            v => return parse_err(at, format!("head flag must be 0 or 1, got {v}")),
        };
        let at = c.pos;
        let w = Mat::from_vec(k, d, c.f64s(k * d, "centers")?)?;
        let m = Mat::from_vec(k, d, c.f64s(k * d, "center momentum")?)?;
        let centers = ClusterCenters::from_parts(w, m).or_else(|e| parse_err(at, e.to_string()))?;
        heads.push(Head::new(centers, AssignmentState::new(0, k)?, enabled)?);
    }
    if c.pos != bytes.len() {
        return parse_err(c.pos, format!("{} trailing bytes", bytes.len() - c.pos));
    }
    Ok(Model { encoder, heads })
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    let mut f = File::create(path)?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::gen_gaussian_mixture;
    use crate::numerics::rng;
    use crate::trainer::{fit, predict_labels, TrainConfig};

    fn trained() -> (Model, crate::data_io::Dataset) {
        let ds = gen_gaussian_mixture(3, 10, 4, 5.0, &mut rng::seeded(1)).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            heads: vec![3, 5],
            hidden: vec![6],
            embedding_dim: 3,
            ..TrainConfig::default()
        };
        (fit(&ds, &cfg).unwrap().0, ds)
    }

    #[test]
    fn round_trip_preserves_parameters_and_predictions() {
        let (model, ds) = trained();
        let bytes = encode(&model).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.encoder.flat_params(), model.encoder.flat_params());
        assert_eq!(
            back.encoder.momentum_buffers(),
            model.encoder.momentum_buffers()
        );
        for (a, b) in back.heads.iter().zip(&model.heads) {
            assert_eq!(a.centers, b.centers);
            assert_eq!(a.enabled, b.enabled);
        }
        for h in 0..2 {
            assert_eq!(
                predict_labels(&back, h, &ds.features).unwrap(),
                predict_labels(&model, h, &ds.features).unwrap()
            );
        }
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_input_reports_offsets() {
        let (model, _) = trained();
        let bytes = encode(&model).unwrap();
        for cut in [0, 3, 7, 12, 40, bytes.len() - 1] {
            match decode(&bytes[..cut]) {
                Err(SecuError::Parse { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode(&bad),
            Err(SecuError::Parse { offset: 0, .. })
        ));
        let mut extra = bytes;
        extra.push(1);
        assert!(decode(&extra).is_err());
    }
}

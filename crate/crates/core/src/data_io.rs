//! Data sets: synthetic generation, view augmentation and feature files.
//!
//! Two file formats are understood:
//! - CSV with a header row `f0,f1,…` and an optional trailing `label` column;
//! - a little-endian binary container:
//!
//! ```text
//! "SECF" | version: u32 = 1 | N: u64 | d: u32 | has_labels: u8
//! features: N·d × f32, row-major
//! labels:   N × u32   (only when has_labels = 1)
//! ```
//!
//! [`load_features`] sniffs the magic bytes; [`save_features`] picks CSV for
//! paths ending in `.csv` and the binary container otherwise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result, SecuError};
use crate::numerics::{rng, Mat};

pub const BINARY_MAGIC: &[u8; 4] = b"SECF";
pub const BINARY_VERSION: u32 = 1;
const HEADER_LEN: u64 = 4 + 4 + 8 + 4 + 1;

/// Placement attempts per component before giving up.
const PLACEMENT_RETRIES: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Mat,
    pub labels: Option<Vec<usize>>,
    pub name: String,
}

impl Dataset {
    pub fn new(features: Mat, labels: Option<Vec<usize>>, name: impl Into<String>) -> Result<Self> {
        if !features.is_finite() {
            return Err(SecuError::NonFinite("dataset features"));
        }
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return shape_err(format!(
                    "{} labels for {} instances",
                    l.len(),
                    features.rows()
                ));
            }
        }
        Ok(Self {
            features,
            labels,
            name: name.into(),
        })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.features.rows()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Number of ground-truth classes (`max label + 1`), if labelled.
    pub fn k_true(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().max().map_or(0, |m| m + 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    pub mask_prob: f64,
    pub scale_jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.1,
            mask_prob: 0.1,
            scale_jitter: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            mask_prob: 0.0,
            scale_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(SecuError::Config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(SecuError::Config(format!(
                "mask_prob must lie in [0, 1), got {}",
                self.mask_prob
            )));
        }
        if !(self.scale_jitter >= 0.0 && self.scale_jitter.is_finite()) {
            return Err(SecuError::Config(format!(
                "scale_jitter must be >= 0, got {}",
                self.scale_jitter
            )));
        }
        Ok(())
    }
}

/// `K_true` isotropic unit-variance Gaussians in `d` dimensions with
/// `per_cluster_n` points each, listed component by component.
///
/// Means are drawn on the sphere of radius `separation` and rejected until
/// every pair is at least `separation` apart.
pub fn gen_gaussian_mixture<R: Rng + ?Sized>(
    k_true: usize,
    per_cluster_n: usize,
    d: usize,
    separation: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(SecuError::InvalidArgument(format!(
            "separation must be positive, got {separation}"
        )));
    }
    if k_true == 0 || per_cluster_n == 0 || d == 0 {
        return Err(SecuError::InvalidArgument(
            "mixture needs K, n and d all positive".into(),
        ));
    }
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(k_true);
    for c in 0..k_true {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let cand: Vec<f64> = rng::unit_vector(rng, d)
                .into_iter()
                .map(|v| v * separation)
                .collect();
            let far = means.iter().all(|m| {
                let d2: f64 = m.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() >= separation
            });
            if far {
                means.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SecuError::Infeasible(format!(
                "could not place component {c} of {k_true} at pairwise distance {separation} in {d} dimensions"
            )));
        }
    }
    let n = k_true * per_cluster_n;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (c, m) in means.iter().enumerate() {
        for _ in 0..per_cluster_n {
            data.extend(m.iter().map(|&v| v + rng::standard_normal(rng)));
            labels.push(c);
        }
    }
    Dataset::new(
        Mat::from_vec(n, d, data)?,
        Some(labels),
        format!("gmm-k{k_true}-n{per_cluster_n}-d{d}"),
    )
}

/// One random view of `x`: additive noise, then coordinate masking, then a
/// global scale factor `1 + U(−j, j)`. Each stage draws from `rng` only when
/// it is enabled.
pub fn augment<R: Rng + ?Sized>(x: &[f64], cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    let mut out = x.to_vec();
    if cfg.noise_sigma > 0.0 {
        for v in out.iter_mut() {
            *v += cfg.noise_sigma * rng::standard_normal(rng);
        }
    }
    if cfg.mask_prob > 0.0 {
        for v in out.iter_mut() {
            if rng.random::<f64>() < cfg.mask_prob {
                *v = 0.0;
            }
        }
    }
    if cfg.scale_jitter > 0.0 {
        let s = 1.0 + rng.random_range(-cfg.scale_jitter..cfg.scale_jitter);
        for v in out.iter_mut() {
            *v *= s;
        }
    }
    out
}

pub fn load_features(path: &Path) -> Result<Dataset> {
    let mut file = File::open(path)?;
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let r = file.read(&mut magic[got..])?;
        if r == 0 {
            break;
        }
        got += r;
    }
    drop(file);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if got == 4 && &magic == BINARY_MAGIC {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        decode_binary(&bytes, name)
    } else {
        read_csv(BufReader::new(File::open(path)?), name)
    }
}

pub fn save_features(ds: &Dataset, path: &Path) -> Result<()> {
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let mut w = BufWriter::new(File::create(path)?);
    if is_csv {
        write_csv(ds, &mut w)?;
    } else {
        w.write_all(&encode_binary(ds)?)?;
    }
    w.flush()?;
    Ok(())
}

/// Header `f0..f{d-1}` plus `label` when present; shortest round-trip decimals.
pub fn write_csv<W: Write>(ds: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("f{j}")).collect();
    if ds.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut rec: Vec<String> = ds
            .features
            .row(i)
            .iter()
            .map(|v| format!("{v:?}"))
            .collect();
        if let Some(l) = &ds.labels {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R, name: impl Into<String>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(input);
    let header = rdr.headers()?.clone();
    let width = header.len();
    let has_labels = header.iter().next_back().is_some_and(|h| h.trim() == "label");
    let d = if has_labels { width - 1 } else { width };
    if d == 0 {
        return Err(SecuError::Parse {
            offset: 0,
            message: "header names no feature columns".into(),
        });
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut n = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let offset = rec.position().map_or(0, |p| p.byte());
        if rec.len() != width {
            return Err(SecuError::Parse {
                offset,
                message: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        for (j, field) in rec.iter().take(d).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| SecuError::Parse {
                offset,
                message: format!("column {j}: `{field}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(SecuError::Parse {
                    offset,
                    message: format!("column {j}: non-finite value"),
                });
            }
            data.push(v);
        }
        if has_labels {
            let field = &rec[d];
            let l: usize = field.trim().parse().map_err(|_| SecuError::Parse {
                offset,
                message: format!("label `{field}` is not a non-negative integer"),
            })?;
            labels.push(l);
        }
        n += 1;
    }
    Dataset::new(
        Mat::from_vec(n, d, data)?,
        has_labels.then_some(labels),
        name,
    )
}

/// Serializes to the binary container; features are stored as `f32`.
pub fn encode_binary(ds: &Dataset) -> Result<Vec<u8>> {
    let d = u32::try_from(ds.dim())
        .map_err(|_| SecuError::InvalidArgument("dimension exceeds u32".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN as usize + ds.n() * ds.dim() * 4 + ds.n() * 4);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.n() as u64).to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    out.push(ds.labels.is_some() as u8);
    for &v in ds.features.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(l) = &ds.labels {
        for &y in l {
            let y = u32::try_from(y)
                .map_err(|_| SecuError::InvalidArgument("label exceeds u32".into()))?;
            out.extend_from_slice(&y.to_le_bytes());
        }
    }
    Ok(out)
}

/// Little-endian reader that reports truncation with the byte offset.
pub(crate) struct Cursor<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(SecuError::Parse {
                offset: self.pos as u64,
                message: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or(SecuError::Parse {
            offset: self.pos as u64,
            message: format!("{what} size overflows"),
        })?;
        Ok(self
            .take(len, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_binary(bytes: &[u8], name: impl Into<String>) -> Result<Dataset> {
    let mut c = Cursor::new(bytes);
    if c.take(4, "magic")? != BINARY_MAGIC {
        return Err(SecuError::Parse {
            offset: 0,
            message: "bad magic, expected SECF".into(),
        });
    }
    let at = c.pos as u64;
    let version = c.u32("version")?;
    if version != BINARY_VERSION {
        return Err(SecuError::Parse {
            offset: at,
            message: format!("unsupported version {version}"),
        });
    }
    let n = c.u64("instance count")?;
    let d = c.u32("dimension")? as usize;
    let at = c.pos as u64;
    let has_labels = match c.take(1, "label flag")?[0] {
        0 => false,
        1 => true,
        other => {
            return Err(SecuError::Parse {
                offset: at,
                message: format!("label flag must be 0 or 1, got {other}"),
            })
        }
    };
    let n = usize::try_from(n).map_err(|_| SecuError::Parse {
        offset: 4 + 4,
        message: "instance count does not fit in memory".into(),
    })?;
    let cells = n
        .checked_mul(d)
        .filter(|c| c.checked_mul(4).is_some())
        .ok_or(SecuError::Parse {
            offset: 4 + 4,
            message: "feature block size overflows".into(),
        })?;
    if bytes.len() - c.pos < cells * 4 {
        // report where the data runs out
        let start = c.pos;
        let full = (bytes.len() - start) / 4 * 4;
        return Err(SecuError::Parse {
            offset: (start + full) as u64,
            message: format!("truncated features: expected {cells} values"),
        });
    }
    let raw = c.take(cells * 4, "features")?;
    let mut data = Vec::with_capacity(cells);
    for (idx, chunk) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(SecuError::Parse {
                offset: HEADER_LEN + idx as u64 * 4,
                message: "non-finite feature".into(),
            });
        }
        data.push(v as f64);
    }
    let labels = if has_labels {
        let mut l = Vec::with_capacity(n);
        for _ in 0..n {
            l.push(c.u32("labels")? as usize);
        }
        Some(l)
    } else {
        None
    };
    if c.pos != bytes.len() {
        return Err(SecuError::Parse {
            offset: c.pos as u64,
            message: format!("{} trailing bytes", bytes.len() - c.pos),
        });
    }
    Dataset::new(Mat::from_vec(n, d, data)?, labels, name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::seeded;

    fn small() -> Dataset {
        Dataset::new(
            Mat::from_rows(&[[0.5, -1.25], [3.0, 0.0], [-2.5, 1.0]]).unwrap(),
            Some(vec![1, 0, 1]),
            "small",
        )
        .unwrap()
    }

    #[test]
    fn mixture_shape_and_labels() {
        let ds = gen_gaussian_mixture(2, 10, 2, 4.0, &mut seeded(1)).unwrap();
        assert_eq!(ds.n(), 20);
        assert_eq!(ds.dim(), 2);
        let l = ds.labels.as_ref().unwrap();
        assert_eq!(l.iter().filter(|&&y| y == 0).count(), 10);
        assert_eq!(l.iter().filter(|&&y| y == 1).count(), 10);
        assert_eq!(ds.k_true(), Some(2));
        let again = gen_gaussian_mixture(2, 10, 2, 4.0, &mut seeded(1)).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn mixture_with_huge_separation_is_centroid_separable() {
        let ds = gen_gaussian_mixture(5, 30, 8, 100.0, &mut seeded(2)).unwrap();
        let l = ds.labels.as_ref().unwrap();
        let mut centroids = Mat::zeros(5, 8);
        for i in 0..ds.n() {
            for j in 0..8 {
                let v = centroids.get(l[i], j) + ds.features.get(i, j) / 30.0;
                centroids.set(l[i], j, v);
            }
        }
        for i in 0..ds.n() {
            let x = ds.features.row(i);
            let nearest = (0..5)
                .min_by(|&a, &b| {
                    let da: f64 = centroids
                        .row(a)
                        .iter()
                        .zip(x)
                        .map(|(c, v)| (c - v).powi(2))
                        .sum();
                    let db: f64 = centroids
                        .row(b)
                        .iter()
                        .zip(x)
                        .map(|(c, v)| (c - v).powi(2))
                        .sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(nearest, l[i]);
        }
    }

    #[test]
    fn mixture_errors() {
        assert!(gen_gaussian_mixture(2, 5, 2, 0.0, &mut seeded(3)).is_err());
        // 50 points 10 apart cannot fit on a 1-d "sphere" of two points
        assert!(matches!(
            gen_gaussian_mixture(3, 5, 1, 10.0, &mut seeded(3)),
            Err(SecuError::Infeasible(_))
        ));
    }

    #[test]
    fn augment_identity_and_jitter() {
        let x = [1.0, -2.0, 3.0];
        assert_eq!(
            augment(&x, &AugmentConfig::identity(), &mut seeded(4)),
            x.to_vec()
        );

        let cfg = AugmentConfig {
            noise_sigma: 0.0,
            mask_prob: 0.0,
            scale_jitter: 0.5,
        };
        let out = augment(&x, &cfg, &mut seeded(5));
        let s = 1.0 + seeded(5).random_range(-0.5..0.5);
        let expect: Vec<f64> = x.iter().map(|v| v * s).collect();
        assert_eq!(out, expect);
    }

    #[test]
    fn augment_noise_differs_between_draws() {
        let x = [0.0; 8];
        let cfg = AugmentConfig::default();
        let mut r = seeded(6);
        assert_ne!(augment(&x, &cfg, &mut r), augment(&x, &cfg, &mut r));
    }

    #[test]
    fn augment_config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let mut c = AugmentConfig {
            mask_prob: 1.0,
            ..AugmentConfig::default()
        };
        assert!(c.validate().is_err());
        c.mask_prob = 0.0;
        c.noise_sigma = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn csv_hand_fixture() {
        let text = "f0,f1,label\n0.5,-1.25,1\n3,0,0\n-2.5,1e0,1\n";
        let ds = read_csv(text.as_bytes(), "small").unwrap();
        assert_eq!(ds, small());
        let unlabelled = read_csv("f0\n1.5\n-2\n".as_bytes(), "u").unwrap();
        assert_eq!(unlabelled.labels, None);
        assert_eq!(unlabelled.features.as_slice(), &[1.5, -2.0]);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = gen_gaussian_mixture(3, 4, 5, 3.0, &mut seeded(7)).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), ds.name.clone()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn csv_errors_carry_offsets() {
        let err = read_csv("f0,label\n1.0,0\nabc,1\n".as_bytes(), "x").unwrap_err();
        match err {
            SecuError::Parse { offset, .. } => assert_eq!(offset, 15),
            e => panic!("unexpected {e}"),
        }
        assert!(read_csv("f0,label\n1.0,-1\n".as_bytes(), "x").is_err());
    }

    #[test]
    fn binary_round_trip() {
        let ds = small();
        let bytes = encode_binary(&ds).unwrap();
        assert_eq!(&bytes[..4], b"SECF");
        let back = decode_binary(&bytes, "small").unwrap();
        assert_eq!(back, ds);
        assert_eq!(encode_binary(&back).unwrap(), bytes);

        // arbitrary doubles round to f32 once and are stable afterwards
        let g = gen_gaussian_mixture(2, 3, 3, 2.0, &mut seeded(8)).unwrap();
        let once = encode_binary(&g).unwrap();
        let twice = encode_binary(&decode_binary(&once, "g").unwrap()).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn binary_truncation_offsets() {
        let bytes = encode_binary(&small()).unwrap();
        for cut in [2usize, 6, 10, 19, 21 + 5, 21 + 24 + 3] {
            match decode_binary(&bytes[..cut], "t") {
                Err(SecuError::Parse { offset, .. }) => {
                    assert!(offset <= cut as u64, "cut {cut} offset {offset}")
                }
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        match decode_binary(&bytes[..21 + 5], "t") {
            Err(SecuError::Parse { offset, .. }) => assert_eq!(offset, 21 + 4),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_binary(&bad, "t"),
            Err(SecuError::Parse { offset: 4, .. })
        ));
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_binary(&extra, "t").is_err());
    }

    #[test]
    fn file_round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small();
        for name in ["d.csv", "d.secf"] {
            let p = dir.path().join(name);
            save_features(&ds, &p).unwrap();
            let mut back = load_features(&p).unwrap();
            back.name = ds.name.clone();
            assert_eq!(back, ds);
        }
    }
}

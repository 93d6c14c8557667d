//! Linear (PCA) encoder/decoder for one reconstruction path.
//!
//! The encoder projects a flattened component stack onto the top `d`
//! principal directions of its training corpus: `z = W·(x − μ)`, and the
//! decoder maps back with `x̂ = Wᵀ·z + μ`. Rows of `W` are orthonormal.

use serde::{Deserialize, Serialize};

use crate::binio::{content_hash, Reader, Writer};
use crate::error::{check_len, invalid, Error, Result};
use crate::linalg::{covariance, dot, mean_vector, sym_eig, Denominator, Matrix};

pub const DEFAULT_LATENT_DIM: usize = 256;

const PCDC_MAGIC: &[u8; 4] = b"PCDC";
const PCDC_VERSION: u8 = 1;

/// Eigenvalues below this fraction of the largest are treated as null directions.
const NULL_EIGEN_RATIO: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathKind {
    Local,
    Offloaded,
}

impl PathKind {
    fn tag(self) -> u8 {
        match self {
            PathKind::Local => 0,
            PathKind::Offloaded => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(PathKind::Local),
            1 => Some(PathKind::Offloaded),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub values: Vec<f64>,
    pub frame_id: u64,
    pub path: PathKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    path: PathKind,
    mean: Vec<f64>,
    /// `d × n`, orthonormal rows.
    basis: Matrix<f64>,
    /// Training-corpus variance along each basis row.
    spectrum: Vec<f64>,
    hash: u64,
}

impl Codec {
    pub fn from_parts(path: PathKind, mean: Vec<f64>, basis: Matrix<f64>, spectrum: Vec<f64>) -> Result<Self> {
        check_len(basis.cols(), mean.len())?;
        check_len(basis.rows(), spectrum.len())?;
        if basis.rows() > basis.cols() {
            return Err(invalid("latent dim exceeds input dim"));
        }
        let mut codec = Self { path, mean, basis, spectrum, hash: 0 };
        codec.hash = content_hash(&[&codec.body_bytes()]);
        Ok(codec)
    }

    pub fn path(&self) -> PathKind {
        self.path
    }

    pub fn input_dim(&self) -> usize {
        self.basis.cols()
    }

    pub fn latent_dim(&self) -> usize {
        self.basis.rows()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn basis(&self) -> &Matrix<f64> {
        &self.basis
    }

    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    /// 64-bit content hash used for configuration agreement on the wire.
    pub fn content_hash(&self) -> u64 {
        self.hash
    }

    pub fn encode(&self, x: &[f64], frame_id: u64) -> Result<LatentCode> {
        check_len(self.input_dim(), x.len())?;
        let centred: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok(LatentCode { values: self.basis.matvec(&centred)?, frame_id, path: self.path })
    }

    pub fn decode(&self, z: &LatentCode) -> Result<Vec<f64>> {
        self.decode_values(&z.values)
    }

    pub fn decode_values(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_len(self.latent_dim(), z.len())?;
        let mut x = self.basis.matvec_transposed(z)?;
        x.iter_mut().zip(&self.mean).for_each(|(a, m)| *a += m);
        Ok(x)
    }

    /// Mean over `corpus` of the squared reconstruction error `‖x − x̂‖²`.
    pub fn mean_squared_residual<S: AsRef<[f64]>>(&self, corpus: &[S]) -> Result<f64> {
        let mut total = 0.0;
        for x in corpus {
            let x = x.as_ref();
            let back = self.decode(&self.encode(x, 0)?)?;
            total += x.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        Ok(total / corpus.len().max(1) as f64)
    }

    fn body_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(PCDC_MAGIC, PCDC_VERSION);
        w.u8(self.path.tag());
        w.u32(self.input_dim() as u32);
        w.u32(self.latent_dim() as u32);
        w.f64s(self.mean.iter().copied());
        w.f64s(self.basis.as_slice().iter().copied());
        w.f64s(self.spectrum.iter().copied());
        w.buf
    }

    /// `PCDC` container: magic, version, path tag, n, d, μ, W, per-row variance, content hash.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = self.body_bytes();
        bytes.extend_from_slice(&self.hash.to_le_bytes());
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open("PCDC", bytes, PCDC_MAGIC, PCDC_VERSION)?;
        let path = PathKind::from_tag(r.u8()?).ok_or_else(|| r.err("unknown path tag"))?;
        let n = r.u32()? as usize;
        let d = r.u32()? as usize;
        let mean = r.f64s(n)?;
        let basis = r.f64s(n.checked_mul(d).ok_or_else(|| r.err("size overflow"))?)?;
        let spectrum = r.f64s(d)?;
        let body_end = r.position();
        let stored = r.u64()?;
        r.finish()?;
        let codec = Self::from_parts(path, mean, Matrix::from_vec(d, n, basis)?, spectrum)?;
        if content_hash(&[&bytes[..body_end]]) != stored || codec.hash != stored {
            return Err(Error::Format { format: "PCDC", reason: "content hash mismatch".into() });
        }
        Ok(codec)
    }
}

/// Fits a `d`-dimensional PCA codec to `corpus`.
///
/// Uses the `n × n` covariance when `n ≤ N`, otherwise the `N × N` Gram matrix
/// of the centred samples. Directions beyond the corpus rank are completed
/// with an orthonormal basis of the null space.
pub fn train_codec<S: AsRef<[f64]>>(corpus: &[S], latent_dim: usize, path: PathKind) -> Result<Codec> {
    if corpus.len() < 2 {
        return Err(Error::NotEnoughSamples { needed: 2, got: corpus.len() });
    }
    let mean = mean_vector(corpus)?;
    let n = mean.len();
    if latent_dim == 0 || latent_dim > n {
        return Err(invalid(format!("latent dim {latent_dim} must be in 1..={n}")));
    }
    let samples = corpus.len();

    let (mut rows, mut spectrum) = if n <= samples {
        let eig = sym_eig(&covariance(corpus, Denominator::Population)?)?;
        let lambda = eig.clamped_eigenvalues();
        let rows: Vec<Vec<f64>> = (0..latent_dim).map(|k| eig.eigenvectors.column(k)).collect();
        (rows, lambda[..latent_dim].to_vec())
    } else {
        let centred: Vec<Vec<f64>> =
            corpus.iter().map(|x| x.as_ref().iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();
        let mut gram = Matrix::zeros(samples, samples);
        for i in 0..samples {
            for j in i..samples {
                let v = dot(&centred[i], &centred[j]) / samples as f64;
                gram[(i, j)] = v;
                gram[(j, i)] = v;
            }
        }
        let eig = sym_eig(&gram)?;
        let lambda = eig.clamped_eigenvalues();
        let floor = lambda.first().copied().unwrap_or(0.0) * NULL_EIGEN_RATIO;
        let mut rows = Vec::new();
        let mut spectrum = Vec::new();
        for (k, &l) in lambda.iter().enumerate().take(latent_dim) {
            if l <= floor || l <= 0.0 {
                break;
            }
            let u = eig.eigenvectors.column(k);
            let scale = 1.0 / (samples as f64 * l).sqrt();
            let mut w = vec![0.0; n];
            for (ui, xi) in u.iter().zip(&centred) {
                for (wj, &x) in w.iter_mut().zip(xi) {
                    *wj += ui * x;
                }
            }
            w.iter_mut().for_each(|x| *x *= scale);
            rows.push(w);
            spectrum.push(l);
        }
        (rows, spectrum)
    };

    orthonormalize(&mut rows);
    complete_basis(&mut rows, latent_dim, n);
    spectrum.resize(latent_dim, 0.0);
    for row in &mut rows {
        fix_sign(row);
    }
    let basis = Matrix::from_vec(latent_dim, n, rows.into_iter().flatten().collect())?;
    Codec::from_parts(path, mean, basis, spectrum)
}

/// Two passes of modified Gram-Schmidt.
fn orthonormalize(rows: &mut [Vec<f64>]) {
    for _ in 0..2 {
        for i in 0..rows.len() {
            let (done, rest) = rows.split_at_mut(i);
            let r = &mut rest[0];
            for q in done.iter() {
                let p = dot(q, r);
                r.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
            }
            let norm = dot(r, r).sqrt();
            r.iter_mut().for_each(|a| *a /= norm);
        }
    }
}

/// Extends `rows` to `target` orthonormal rows using coordinate axes.
fn complete_basis(rows: &mut Vec<Vec<f64>>, target: usize, n: usize) {
    let mut axis = 0;
    while rows.len() < target && axis < n {
        let mut cand = vec![0.0; n];
        cand[axis] = 1.0;
        axis += 1;
        for _ in 0..2 {
            for q in rows.iter() {
                let p = dot(q, &cand);
                cand.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
            }
        }
        let norm = dot(&cand, &cand).sqrt();
        if norm > 1e-6 {
            cand.iter_mut().for_each(|a| *a /= norm);
            rows.push(cand);
        }
    }
}

/// Flips `row` so its largest-magnitude entry is positive.
fn fix_sign(row: &mut [f64]) {
    let mut best = 0.0f64;
    for &x in row.iter() {
        if x.abs() > best.abs() {
            best = x;
        }
    }
    if best < 0.0 {
        row.iter_mut().for_each(|x| *x = -*x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn random_corpus(n_samples: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = RngStream::new(seed, "codec");
        (0..n_samples)
            .map(|_| (0..n).map(|j| rng.standard_normal() / (1.0 + j as f64 * 0.3)).collect())
            .collect()
    }

    fn check_orthonormal(c: &Codec) {
        let w = c.basis();
        let wwt = w.matmul(&w.transpose()).unwrap();
        let err = wwt.sub(&Matrix::identity(c.latent_dim())).unwrap().max_abs();
        assert!(err <= 1e-8, "W·Wᵀ − I = {err}");
    }

    #[test]
    fn rank_one_corpus_reconstructs_members() {
        let dir: Vec<f64> = (0..10).map(|j| (j as f64 * 0.7).sin()).collect();
        let corpus: Vec<Vec<f64>> =
            [-1.0, 0.5, 2.0, 3.0].iter().map(|&s| dir.iter().map(|d| 1.0 + s * d).collect()).collect();
        let c = train_codec(&corpus, 1, PathKind::Offloaded).unwrap();
        for x in &corpus {
            let back = c.decode(&c.encode(x, 0).unwrap()).unwrap();
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn full_rank_codec_is_lossless() {
        let corpus = random_corpus(20, 6, 1);
        let c = train_codec(&corpus, 6, PathKind::Local).unwrap();
        check_orthonormal(&c);
        let mut rng = RngStream::new(9, "x");
        let x: Vec<f64> = (0..6).map(|_| rng.standard_normal()).collect();
        let back = c.decode(&c.encode(&x, 0).unwrap()).unwrap();
        assert!(x.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn gram_route_completes_null_space() {
        // 5 samples in 12 dims: rank 4, ask for 8 directions.
        let corpus = random_corpus(5, 12, 2);
        let c = train_codec(&corpus, 8, PathKind::Offloaded).unwrap();
        check_orthonormal(&c);
        assert_eq!(&c.spectrum()[4..], &[0.0; 4]);
        assert!(c.spectrum()[3] > 0.0);
        assert!(c.mean_squared_residual(&corpus).unwrap() < 1e-18);
    }

    #[test]
    fn encode_decode_basics() {
        let corpus = random_corpus(30, 8, 3);
        let c = train_codec(&corpus, 3, PathKind::Local).unwrap();
        assert!(c.encode(c.mean(), 0).unwrap().values.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(c.decode_values(&[0.0; 3]).unwrap(), c.mean().to_vec());
        let x: Vec<f64> = c.mean().iter().zip(c.basis().row(1)).map(|(m, w)| m + 2.5 * w).collect();
        let z = c.encode(&x, 4).unwrap();
        assert_eq!(z.frame_id, 4);
        assert!((z.values[1] - 2.5).abs() < 1e-10 && z.values[0].abs() < 1e-10 && z.values[2].abs() < 1e-10);
        assert!(c.encode(&[0.0; 7], 0).is_err());
        assert!(c.decode_values(&[0.0; 4]).is_err());
    }

    #[test]
    fn matches_matrix_product_oracle() {
        let corpus = random_corpus(30, 8, 4);
        let c = train_codec(&corpus, 4, PathKind::Local).unwrap();
        let x = &corpus[7];
        let z = c.encode(x, 0).unwrap();
        for r in 0..4 {
            let want: f64 = (0..8).map(|j| c.basis()[(r, j)] * (x[j] - c.mean()[j])).sum();
            assert!((z.values[r] - want).abs() < 1e-12);
        }
        let zz = [0.3, -1.0, 2.0, 0.1];
        let back = c.decode_values(&zz).unwrap();
        for j in 0..8 {
            let want: f64 = c.mean()[j] + (0..4).map(|r| c.basis()[(r, j)] * zz[r]).sum::<f64>();
            assert!((back[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let corpus = random_corpus(4, 3, 5);
        assert!(train_codec(&corpus, 4, PathKind::Local).is_err());
        assert!(train_codec(&corpus[..1], 1, PathKind::Local).is_err());
    }

    #[test]
    fn sign_convention_and_container() {
        let corpus = random_corpus(10, 16, 6);
        let c = train_codec(&corpus, 5, PathKind::Offloaded).unwrap();
        for r in 0..5 {
            let row = c.basis().row(r);
            let big = row.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(big > 0.0);
        }
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"PCDC");
        let back = Codec::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_ne!(c.content_hash(), 0);
        let mut tampered = bytes.clone();
        tampered[40] ^= 1;
        assert!(Codec::from_bytes(&tampered).is_err());
    }
}

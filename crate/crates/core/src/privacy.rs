//! Noise calibration against a mutual-information budget.
//!
//! The posterior success rate `1 − δ` of any adversary is bounded through
//!
//! ```text
//! δ·ln(δ/δ₀) + (1−δ)·ln((1−δ)/(1−δ₀)) ≤ v
//! ```
//!
//! where `1 − δ₀` is the prior success rate and `v` the mutual information
//! between the private input and the noisy release. For a Gaussian release the
//! minimal-trace noise covariance shares the eigenbasis of the latent
//! covariance with variances `σᵢ = √λᵢ·Σⱼ√λⱼ / (2v)`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::binio::{content_hash, Reader, Writer};
use crate::codec::LatentCode;
use crate::error::{check_len, invalid, Error, Result};
use crate::linalg::{covariance, sample_anisotropic_gaussian, sym_eig, Denominator, Matrix};
use crate::rng::RngStream;
use crate::scalar::Scalar;

/// Mutual-information budgets (nats) exposed as presets.
pub const MI_PRESETS: [f64; 5] = [4.0, 3.0, 1.0, 0.1, 0.01];

pub const BISECTION_TOLERANCE: f64 = 1e-9;
pub const BISECTION_MAX_ITERS: usize = 200;

const PCAL_MAGIC: &[u8; 4] = b"PCAL";
const PCAL_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrivacyBudget {
    pub v: f64,
    pub prior_failure: f64,
}

impl PrivacyBudget {
    pub fn new(v: f64, prior_success: f64) -> Result<Self> {
        check_prior(prior_success)?;
        if !(v >= 0.0) {
            return Err(invalid(format!("mutual information bound must be >= 0, got {v}")));
        }
        Ok(Self { v, prior_failure: 1.0 - prior_success })
    }

    /// Uniform prior over `classes` labels.
    pub fn uniform(v: f64, classes: usize) -> Result<Self> {
        Self::new(v, 1.0 / classes as f64)
    }

    pub fn prior_success(&self) -> f64 {
        1.0 - self.prior_failure
    }

    pub fn posterior_bound(&self) -> Result<f64> {
        psr_from_mi(self.v, self.prior_success())
    }
}

fn check_prior(prior_success: f64) -> Result<()> {
    if prior_success > 0.0 && prior_success < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("prior success rate must be in (0, 1), got {prior_success}")))
    }
}

fn xlogy(x: f64, ratio: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * ratio.ln()
    }
}

/// Bernoulli KL divergence `KL(δ ‖ δ₀)`: the left side of the bound.
pub fn bernoulli_kl(delta: f64, prior_failure: f64) -> f64 {
    xlogy(delta, delta / prior_failure) + xlogy(1.0 - delta, (1.0 - delta) / (1.0 - prior_failure))
}

/// Largest posterior success rate permitted by a mutual-information budget `v`.
pub fn psr_from_mi(v: f64, prior_success: f64) -> Result<f64> {
    check_prior(prior_success)?;
    if !(v >= 0.0) {
        return Err(invalid(format!("mutual information bound must be >= 0, got {v}")));
    }
    let prior_failure = 1.0 - prior_success;
    if v == 0.0 {
        return Ok(prior_success);
    }
    // KL(δ‖δ₀) decreases on (0, δ₀]; find the smallest δ that satisfies the budget.
    if bernoulli_kl(0.0, prior_failure) <= v {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0, prior_failure);
    for _ in 0..BISECTION_MAX_ITERS {
        if hi - lo <= BISECTION_TOLERANCE {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if bernoulli_kl(mid, prior_failure) <= v {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok((1.0 - hi).min(1.0))
}

/// Mutual information needed before a posterior success rate of `target_psr` becomes possible.
pub fn mi_from_psr(target_psr: f64, prior_success: f64) -> Result<f64> {
    check_prior(prior_success)?;
    if !(target_psr >= prior_success && target_psr < 1.0) {
        return Err(invalid(format!("target success rate {target_psr} must be in [{prior_success}, 1)")));
    }
    Ok(bernoulli_kl(1.0 - target_psr, 1.0 - prior_success).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    /// No perturbation.
    None,
    /// Distribution-aware anisotropic noise.
    Damp,
    /// Equal variance per dimension under the same MI surrogate.
    IsotropicMi,
    /// Classic Gaussian mechanism on the latent L2 sensitivity.
    DpGaussian,
}

impl NoiseKind {
    fn tag(self) -> u8 {
        match self {
            NoiseKind::None => 0,
            NoiseKind::Damp => 1,
            NoiseKind::IsotropicMi => 2,
            NoiseKind::DpGaussian => 3,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        Some(match t {
            0 => NoiseKind::None,
            1 => NoiseKind::Damp,
            2 => NoiseKind::IsotropicMi,
            3 => NoiseKind::DpGaussian,
            _ => return None,
        })
    }
}

/// Gaussian noise `N(0, U·diag(σ)·Uᵀ)` for one offloaded latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseCalibration<T = f64> {
    pub kind: NoiseKind,
    /// Columns are the noise eigen-directions.
    pub basis: Matrix<T>,
    /// Noise variance along each basis column.
    pub sigma: Vec<T>,
    /// Budget in nats; `f64::INFINITY` when no budget applies.
    pub v: f64,
    pub source_cov_hash: u64,
    /// `Σσᵢ`, the expected squared noise norm.
    pub trace: T,
    /// Set when the profiled covariance was identically zero.
    pub zero_spectrum: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CalibrationOptions {
    /// Eigenvalues are raised to at least this value before calibration.
    pub lambda_floor: f64,
}

impl<T: Scalar> NoiseCalibration<T> {
    pub fn dim(&self) -> usize {
        self.sigma.len()
    }

    /// A calibration that adds nothing.
    pub fn none(dim: usize) -> Self {
        Self {
            kind: NoiseKind::None,
            basis: Matrix::identity(dim),
            sigma: vec![T::zero(); dim],
            v: f64::INFINITY,
            source_cov_hash: 0,
            trace: T::zero(),
            zero_spectrum: false,
        }
    }

    fn build(kind: NoiseKind, basis: Matrix<T>, sigma: Vec<T>, v: f64, source_cov_hash: u64, zero: bool) -> Self {
        let trace = sigma.iter().copied().sum();
        Self { kind, basis, sigma, v, source_cov_hash, trace, zero_spectrum: zero }
    }

    /// Content hash of the serialized calibration.
    pub fn content_hash(&self) -> u64 {
        content_hash(&[&self.to_bytes()])
    }

    /// `PCAL` container: magic, version, kind, v, d, σ, U, source covariance hash.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(PCAL_MAGIC, PCAL_VERSION);
        w.u8(self.kind.tag());
        w.f64(self.v);
        w.u32(self.dim() as u32);
        w.f64s(self.sigma.iter().map(|s| s.as_f64()));
        self.basis.write_body(&mut w);
        w.u64(self.source_cov_hash);
        w.u8(self.zero_spectrum as u8);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open("PCAL", bytes, PCAL_MAGIC, PCAL_VERSION)?;
        let kind = NoiseKind::from_tag(r.u8()?).ok_or_else(|| r.err("unknown noise kind"))?;
        let v = r.f64()?;
        let d = r.u32()? as usize;
        let sigma: Vec<T> = r.f64s(d)?.into_iter().map(T::of).collect();
        let basis = Matrix::<T>::read_body(&mut r)?;
        let hash = r.u64()?;
        let zero = r.u8()? != 0;
        r.finish()?;
        if basis.rows() != d || basis.cols() != d {
            return Err(Error::Format { format: "PCAL", reason: "basis shape does not match sigma".into() });
        }
        if sigma.iter().any(|s| !(*s >= T::zero())) {
            return Err(Error::Format { format: "PCAL", reason: "negative noise variance".into() });
        }
        Ok(Self::build(kind, basis, sigma, v, hash, zero))
    }
}

fn check_budget(v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("mutual information budget must be positive and finite, got {v}")))
    }
}

fn covariance_hash<T: Scalar>(cov: &Matrix<T>) -> u64 {
    content_hash(&[&cov.to_bytes()])
}

fn spectrum<T: Scalar>(cov: &Matrix<T>, opts: &CalibrationOptions) -> Result<(Vec<T>, Matrix<T>)> {
    let eig = sym_eig(cov)?;
    let floor = T::of(opts.lambda_floor.max(0.0));
    let lambda = eig.eigenvalues.iter().map(|&l| l.max(T::zero()).max(floor)).collect();
    Ok((lambda, eig.eigenvectors))
}

/// Distribution-aware minimal noise: `σᵢ = √λᵢ·Σⱼ√λⱼ / (2v)` in the covariance eigenbasis.
pub fn calibrate_damp<T: Scalar>(cov: &Matrix<T>, v: f64, opts: &CalibrationOptions) -> Result<NoiseCalibration<T>> {
    check_budget(v)?;
    let (lambda, basis) = spectrum(cov, opts)?;
    let roots: Vec<T> = lambda.iter().map(|l| l.sqrt()).collect();
    let root_sum: T = roots.iter().copied().sum();
    let zero = root_sum == T::zero();
    let two_v = T::of(2.0 * v);
    let sigma = roots.iter().map(|&r| r * root_sum / two_v).collect();
    Ok(NoiseCalibration::build(NoiseKind::Damp, basis, sigma, v, covariance_hash(cov), zero))
}

/// Profiles latent samples (ML covariance) and calibrates DAMP noise for them.
pub fn calibrate_damp_from_samples<S: AsRef<[f64]>>(
    samples: &[S],
    v: f64,
    opts: &CalibrationOptions,
) -> Result<NoiseCalibration> {
    calibrate_damp(&covariance(samples, Denominator::Population)?, v, opts)
}

/// Isotropic noise under the same surrogate `Σᵢ λᵢ/(2σᵢ) ≤ v`: `σ = Σλ / (2v)` per dimension.
pub fn calibrate_isotropic_mi<T: Scalar>(
    cov: &Matrix<T>,
    v: f64,
    opts: &CalibrationOptions,
) -> Result<NoiseCalibration<T>> {
    check_budget(v)?;
    let (lambda, _) = spectrum(cov, opts)?;
    let total: T = lambda.iter().copied().sum();
    let zero = total == T::zero();
    let s = total / T::of(2.0 * v);
    let d = lambda.len();
    Ok(NoiseCalibration::build(NoiseKind::IsotropicMi, Matrix::identity(d), vec![s; d], v, covariance_hash(cov), zero))
}

/// Gaussian-mechanism noise: per-dimension variance `(Δ₂·√(2 ln(1.25/δ)) / ε)²`.
pub fn calibrate_dp_gaussian(dim: usize, sensitivity: f64, epsilon: f64, delta: f64) -> Result<NoiseCalibration> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must be in (0, 1), got {delta}")));
    }
    if !(sensitivity >= 0.0 && sensitivity.is_finite()) {
        return Err(invalid(format!("sensitivity must be non-negative, got {sensitivity}")));
    }
    let std = sensitivity * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon;
    let var = std * std;
    Ok(NoiseCalibration::build(NoiseKind::DpGaussian, Matrix::identity(dim), vec![var; dim], f64::INFINITY, 0, false))
}

/// Largest L2 norm among `latents`, the sensitivity used by [`calibrate_dp_gaussian`].
pub fn max_l2_norm<S: AsRef<[f64]>>(latents: &[S]) -> f64 {
    latents.iter().map(|z| z.as_ref().iter().map(|x| x * x).sum::<f64>().sqrt()).fold(0.0, f64::max)
}

/// `d·Σλ / (Σ√λ)²`: isotropic over distribution-aware noise energy.
pub fn isotropic_to_damp_ratio(lambda: &[f64]) -> f64 {
    let d = lambda.len() as f64;
    let sum: f64 = lambda.iter().map(|l| l.max(0.0)).sum();
    let roots: f64 = lambda.iter().map(|l| l.max(0.0).sqrt()).sum();
    if roots == 0.0 {
        1.0
    } else {
        d * sum / (roots * roots)
    }
}

/// Releases `O = z + e` with `e ~ N(0, U·diag(σ)·Uᵀ)`.
pub fn add_noise(z: &LatentCode, cal: &NoiseCalibration, rng: &mut RngStream) -> Result<LatentCode> {
    check_len(cal.dim(), z.values.len())?;
    if cal.kind == NoiseKind::None || cal.trace == 0.0 {
        return Ok(z.clone());
    }
    let e = sample_anisotropic_gaussian(&cal.basis, &cal.sigma, rng)?;
    Ok(LatentCode {
        values: z.values.iter().zip(&e).map(|(a, b)| a + b).collect(),
        frame_id: z.frame_id,
        path: z.path,
    })
}

/// [`add_noise`], warning when `cal` was not derived from the tracker's latest profile.
pub fn add_noise_tracked(
    z: &LatentCode,
    cal: &NoiseCalibration,
    tracker: &DistributionTracker,
    rng: &mut RngStream,
) -> Result<LatentCode> {
    if tracker.calibrated_hash() != Some(cal.source_cov_hash) {
        log::warn!(
            "noise calibration {:016x} is stale relative to the tracked distribution",
            cal.source_cov_hash
        );
    }
    add_noise(z, cal, rng)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackerConfig {
    /// EMA decay β.
    pub decay: f64,
    /// Relative trace change τ that triggers recalibration.
    pub threshold: f64,
    /// Samples before the first calibration signal.
    pub warmup: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { decay: 0.99, threshold: 0.05, warmup: 100 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Recalibration {
    /// Warm-up finished; first calibration due.
    Initial,
    /// Covariance trace moved by more than the threshold since the last calibration.
    Drift { relative_change: f64 },
}

/// Online estimate of the offloaded-latent distribution.
///
/// The first `1/(1−β)` samples are weighted equally; afterwards the mean and
/// covariance are exponential moving averages with decay β.
#[derive(Clone, Debug)]
pub struct DistributionTracker {
    config: TrackerConfig,
    mean: Vec<f64>,
    cov: Matrix<f64>,
    samples_seen: u64,
    reference_trace: Option<f64>,
    calibrated_hash: Option<u64>,
}

impl DistributionTracker {
    pub fn new(dim: usize, config: TrackerConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&config.decay) {
            return Err(invalid(format!("decay must be in [0, 1), got {}", config.decay)));
        }
        if !(config.threshold > 0.0) {
            return Err(invalid("threshold must be positive"));
        }
        Ok(Self {
            config,
            mean: vec![0.0; dim],
            cov: Matrix::zeros(dim, dim),
            samples_seen: 0,
            reference_trace: None,
            calibrated_hash: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &Matrix<f64> {
        &self.cov
    }

    pub fn samples_seen(&self) -> u64 {
        self.samples_seen
    }

    pub fn trace(&self) -> f64 {
        self.cov.trace()
    }

    pub fn calibrated_hash(&self) -> Option<u64> {
        self.calibrated_hash
    }

    /// Calibrates DAMP noise on the current covariance and records it as current.
    pub fn calibrate(&mut self, v: f64, opts: &CalibrationOptions) -> Result<NoiseCalibration> {
        let cal = calibrate_damp(&self.cov, v, opts)?;
        self.calibrated_hash = Some(cal.source_cov_hash);
        self.reference_trace = Some(self.trace());
        Ok(cal)
    }

    pub fn update(&mut self, z: &LatentCode) -> Result<Option<Recalibration>> {
        check_len(self.dim(), z.values.len())?;
        if z.values.iter().any(|x| !x.is_finite()) {
            return Err(invalid("latent contains non-finite values"));
        }
        self.samples_seen += 1;
        let weight = (1.0 / self.samples_seen as f64).max(1.0 - self.config.decay);
        let delta: Vec<f64> = z.values.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += weight * d;
        }
        let d = self.dim();
        let keep = 1.0 - weight;
        for i in 0..d {
            for j in i..d {
                let v = keep * (self.cov[(i, j)] + weight * delta[i] * delta[j]);
                self.cov[(i, j)] = v;
                self.cov[(j, i)] = v;
            }
        }
        if self.samples_seen < self.config.warmup {
            return Ok(None);
        }
        let trace = self.trace();
        let signal = match self.reference_trace {
            None => Some(Recalibration::Initial),
            Some(reference) => {
                let change = if reference > 0.0 {
                    (trace - reference).abs() / reference
                } else if trace > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                };
                (change > self.config.threshold).then_some(Recalibration::Drift { relative_change: change })
            }
        };
        if signal.is_some() {
            self.reference_trace = Some(trace);
        }
        Ok(signal)
    }
}

/// One row of a budget sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundRow {
    pub v: f64,
    pub t_psr: f64,
    pub damp_trace: f64,
    pub iso_trace: f64,
    pub ratio: f64,
}

pub const BOUND_CSV_HEADER: &str = "v,t_psr,damp_trace,iso_trace,ratio";

/// Evaluates every budget in `budgets` against the latent covariance `cov`.
pub fn bound_sweep(cov: &Matrix<f64>, budgets: &[f64], prior_success: f64) -> Result<Vec<BoundRow>> {
    let opts = CalibrationOptions::default();
    budgets
        .iter()
        .map(|&v| {
            let damp = calibrate_damp(cov, v, &opts)?;
            let iso = calibrate_isotropic_mi(cov, v, &opts)?;
            let ratio = if damp.trace > 0.0 { iso.trace / damp.trace } else { 1.0 };
            Ok(BoundRow { v, t_psr: psr_from_mi(v, prior_success)?, damp_trace: damp.trace, iso_trace: iso.trace, ratio })
        })
        .collect()
}

pub fn bound_rows_to_csv(rows: &[BoundRow]) -> String {
    let mut out = format!("{BOUND_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.6},{:.9e},{:.9e},{:.6}", r.v, r.t_psr, r.damp_trace, r.iso_trace, r.ratio);
    }
    out
}

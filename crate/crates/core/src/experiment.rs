//! End-to-end experiment runs over a labeled corpus: latent profiling,
//! attacker evaluation and the (m, v) sweep table.

use std::fmt::Write as _;

use serde::Serialize;

use crate::attack::{
    build_reference_bank, evaluate_psr, train_mlp, AttackReport, Attacker, EmpiricalAttacker, MlpConfig, Observation,
};
use crate::corpus::{class_count, LabeledFrame};
use crate::error::{invalid, Result};
use crate::frequency::{block_dct, energy_rank, make_plan, EnergyRanking, PartitionPlan, RankStatistic};
use crate::linalg::{covariance, Denominator, Matrix};
use crate::perfmodel::{perf_report, DeviceProfile, LinkProfile, WorkloadProfile};
use crate::pipeline::{run_session, InProcess, OffloadModel};
use crate::privacy::{
    calibrate_damp, calibrate_dp_gaussian, calibrate_isotropic_mi, max_l2_norm, psr_from_mi, CalibrationOptions,
    NoiseCalibration,
};
use crate::rng::RngStream;

/// Noise family for a calibration run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseSpec {
    None,
    Damp { v: f64 },
    IsotropicMi { v: f64 },
    DpGaussian { epsilon: f64, delta: f64 },
}

/// Clean offloaded latents of every frame.
pub fn offloaded_latents(model: &OffloadModel, frames: &[LabeledFrame]) -> Result<Vec<Vec<f64>>> {
    let codec = model.offloaded_codec()?;
    frames
        .iter()
        .map(|f| Ok(codec.encode(&model.split(&f.texture)?.1, f.frame_id)?.values))
        .collect()
}

/// ML covariance of the clean offloaded latents.
pub fn latent_covariance(model: &OffloadModel, frames: &[LabeledFrame]) -> Result<Matrix<f64>> {
    covariance(&offloaded_latents(model, frames)?, Denominator::Population)
}

/// Profiles the offloaded latents and calibrates noise of the requested family.
pub fn calibrate_for(model: &OffloadModel, frames: &[LabeledFrame], spec: NoiseSpec) -> Result<NoiseCalibration> {
    let opts = CalibrationOptions::default();
    match spec {
        NoiseSpec::None => Ok(NoiseCalibration::none(model.offloaded_codec()?.latent_dim())),
        NoiseSpec::Damp { v } => calibrate_damp(&latent_covariance(model, frames)?, v, &opts),
        NoiseSpec::IsotropicMi { v } => calibrate_isotropic_mi(&latent_covariance(model, frames)?, v, &opts),
        NoiseSpec::DpGaussian { epsilon, delta } => {
            let latents = offloaded_latents(model, frames)?;
            // Replacing one latent by another moves it by at most twice the largest norm.
            let sensitivity = 2.0 * max_l2_norm(&latents);
            calibrate_dp_gaussian(latents[0].len(), sensitivity, epsilon, delta)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackerChoice {
    Both,
    Empirical,
    Nn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackSettings {
    pub attackers: AttackerChoice,
    /// Noise draws per frame used for scoring.
    pub eval_repeats: usize,
    /// Frames per label the learned attacker trains on.
    pub train_per_class: usize,
    /// Noise draws per training frame.
    pub train_repeats: usize,
    pub mlp: MlpConfig,
    pub seed: u64,
}

impl Default for AttackSettings {
    fn default() -> Self {
        Self {
            attackers: AttackerChoice::Both,
            eval_repeats: 4,
            train_per_class: 2,
            train_repeats: 1,
            mlp: MlpConfig::default(),
            seed: 0,
        }
    }
}

fn observations(
    model: &OffloadModel,
    frames: &[LabeledFrame],
    cal: &NoiseCalibration,
    seed: u64,
    phase: &str,
    repeats: usize,
) -> Result<Vec<Observation>> {
    let mut out = Vec::with_capacity(frames.len() * repeats);
    for r in 0..repeats {
        let noise_seed = RngStream::stream_seed(seed, format!("attack/{phase}/{r}"));
        for f in frames {
            let latent = model.observe(&f.texture, f.frame_id, cal, noise_seed)?;
            out.push(Observation { label: f.label, latent: latent.into_iter().map(f64::from).collect() });
        }
    }
    Ok(out)
}

/// Up to `per_class` seeded-random frames of every label.
fn training_subset(frames: &[LabeledFrame], classes: usize, per_class: usize, seed: u64) -> Vec<LabeledFrame> {
    let mut rng = RngStream::new(seed, "attack/train-subset");
    let mut out = Vec::new();
    for label in 0..classes {
        let mut members: Vec<&LabeledFrame> = frames.iter().filter(|f| f.label == label).collect();
        rng.shuffle(&mut members);
        out.extend(members.into_iter().take(per_class.max(1)).cloned());
    }
    out
}

/// Runs the selected attackers against noisy releases of `frames`.
///
/// The returned list ends with the `combined` report (best attacker).
pub fn run_attacks(
    model: &OffloadModel,
    frames: &[LabeledFrame],
    cal: &NoiseCalibration,
    settings: &AttackSettings,
) -> Result<Vec<AttackReport>> {
    if settings.eval_repeats == 0 {
        return Err(invalid("at least one evaluation repeat is needed"));
    }
    let codec = model.offloaded_codec()?;
    let classes = class_count(frames);
    let eval = observations(model, frames, cal, settings.seed, "eval", settings.eval_repeats)?;

    let bank;
    let empirical;
    let mlp;
    let mut attackers: Vec<&dyn Attacker> = Vec::new();
    if settings.attackers != AttackerChoice::Nn {
        let mut rng = RngStream::new(settings.seed, "attack/bank");
        bank = build_reference_bank(frames, &model.mean, &model.plan, &mut rng)?;
        empirical = EmpiricalAttacker { bank: &bank, codec };
        attackers.push(&empirical);
    }
    if settings.attackers != AttackerChoice::Empirical {
        let train_frames = training_subset(frames, classes, settings.train_per_class, settings.seed);
        let train = observations(model, &train_frames, cal, settings.seed, "train", settings.train_repeats.max(1))?;
        let samples: Vec<(Vec<f64>, usize)> = train.into_iter().map(|o| (o.latent, o.label)).collect();
        let config = MlpConfig { classes, seed: RngStream::stream_seed(settings.seed, "attack/mlp"), ..settings.mlp.clone() };
        mlp = train_mlp(&samples, &config)?;
        attackers.push(&mlp);
    }
    evaluate_psr(&attackers, &eval)
}

/// Mean per-element squared error of noisy pipeline reconstructions.
pub fn reconstruction_mse(
    model: &OffloadModel,
    frames: &[LabeledFrame],
    cal: &NoiseCalibration,
    seed: u64,
) -> Result<f64> {
    let out = match &model.offloaded {
        Some(codec) => run_session(model, cal, frames.iter().map(|f| (f.frame_id, &f.texture)), &mut InProcess { codec }, seed),
        None => {
            let textures = frames.iter().map(|f| model.reconstruct_local(&f.texture)).collect::<Result<Vec<_>>>()?;
            crate::pipeline::SessionOutput { textures, log: Vec::new(), error: None }
        }
    };
    if let Some(e) = out.error {
        return Err(e);
    }
    let mut total = 0.0;
    for (t, f) in out.textures.iter().zip(frames) {
        total += t.mse(&f.texture)?;
    }
    Ok(total / frames.len().max(1) as f64)
}

/// Variance ranking of the corpus components.
pub fn rank_corpus(frames: &[LabeledFrame], mean: &crate::frequency::Texture<f32>, block: usize) -> Result<EnergyRanking> {
    let sets = frames.iter().map(|f| block_dct(&f.texture, mean, block)).collect::<Result<Vec<_>>>()?;
    energy_rank(&sets, RankStatistic::Variance)
}

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub ms: Vec<usize>,
    /// `None` is the unnoised column.
    pub vs: Vec<Option<f64>>,
    pub block: usize,
    pub latent_dim: usize,
    pub loss_reference: f64,
    pub attack: AttackSettings,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ms: vec![2, 4, 6, 8, 10, 12, 14],
            vs: vec![None, Some(1.0), Some(0.1), Some(0.01)],
            block: 4,
            latent_dim: crate::codec::DEFAULT_LATENT_DIM,
            loss_reference: 0.072,
            attack: AttackSettings { eval_repeats: 1, ..Default::default() },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub m: usize,
    pub v: Option<f64>,
    pub t_psr: f64,
    pub normalized_loss: f64,
    pub damp_trace: f64,
    pub iso_trace: f64,
    pub noise_ratio: f64,
    pub e_psr_empirical: f64,
    pub e_psr_nn: f64,
    pub users: f64,
    pub joules: f64,
}

pub const SWEEP_CSV_HEADER: &str =
    "m,v,t_psr,normalized_loss,damp_trace,iso_trace,noise_ratio,e_psr_empirical,e_psr_nn,users,joules";

pub fn v_label(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |v| v.to_string())
}

pub fn sweep_rows_to_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6e},{:.6e},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.m,
            v_label(r.v),
            r.t_psr,
            r.normalized_loss,
            r.damp_trace,
            r.iso_trace,
            r.noise_ratio,
            r.e_psr_empirical,
            r.e_psr_nn,
            r.users,
            r.joules
        );
    }
    out
}

/// Hardware side of a sweep.
pub struct SweepHardware<'a> {
    pub workload: &'a WorkloadProfile,
    pub local: &'a DeviceProfile,
    pub host: &'a DeviceProfile,
    pub link: &'a LinkProfile,
}

/// One row per (m, v): bound, utility, noise energy, attacks and throughput.
///
/// Offloaded sets follow the corpus variance ranking with the base kept local.
pub fn run_sweep(frames: &[LabeledFrame], config: &SweepConfig, hw: &SweepHardware) -> Result<Vec<SweepRow>> {
    let classes = class_count(frames);
    if classes < 2 {
        return Err(invalid("sweep needs at least two classes"));
    }
    let prior = 1.0 / classes as f64;
    let mean = crate::corpus::dataset_mean(frames)?;
    let ranking = rank_corpus(frames, &mean, config.block)?;
    let mut rows = Vec::new();
    for &m in &config.ms {
        let plan: PartitionPlan = make_plan(&ranking, m, true)?;
        let model = OffloadModel::train(frames, &plan, config.latent_dim)?;
        let cov = latent_covariance(&model, frames)?;
        let perf = perf_report(&hw.workload.with_offloaded(m), hw.local, hw.host, hw.link)?;
        for &v in &config.vs {
            let cal = match v {
                None => NoiseCalibration::none(cov.rows()),
                Some(v) => calibrate_damp(&cov, v, &CalibrationOptions::default())?,
            };
            let iso_trace = match v {
                None => 0.0,
                Some(v) => calibrate_isotropic_mi(&cov, v, &CalibrationOptions::default())?.trace,
            };
            let cell_seed = RngStream::stream_seed(config.seed, format!("sweep/{m}/{}", v_label(v)));
            let mse = reconstruction_mse(&model, frames, &cal, cell_seed)?;
            let attack = AttackSettings { seed: cell_seed, ..config.attack.clone() };
            let reports = run_attacks(&model, frames, &cal, &attack)?;
            let by_name = |name: &str| reports.iter().find(|r| r.attacker == name).map_or(f64::NAN, |r| r.e_psr);
            rows.push(SweepRow {
                m,
                v,
                t_psr: match v {
                    None => 1.0,
                    Some(v) => psr_from_mi(v, prior)?,
                },
                normalized_loss: mse / config.loss_reference,
                damp_trace: cal.trace,
                iso_trace,
                noise_ratio: if cal.trace > 0.0 { iso_trace / cal.trace } else { 1.0 },
                e_psr_empirical: by_name("empirical"),
                e_psr_nn: by_name("nn"),
                users: perf.users,
                joules: perf.energy.total,
            });
        }
    }
    Ok(rows)
}

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use log::info;
use avatar_offload::attack::reports_to_csv;
use avatar_offload::codec::Codec;
use avatar_offload::corpus::{class_count, dataset_mean, generate, read_manifest, write_manifest, CorpusSpec, LabeledFrame};
use avatar_offload::experiment::{
    calibrate_for, rank_corpus, run_attacks, run_sweep, sweep_rows_to_csv, AttackSettings, AttackerChoice, NoiseSpec,
    SweepConfig, SweepHardware,
};
use avatar_offload::frequency::{block_dct, energy_rank, make_plan, PartitionPlan, RankStatistic};
use avatar_offload::net::{CodecStore, Envelope, Host, HostOptions, OffloadClient, Recorder, SessionConfig};
use avatar_offload::perfmodel::{perf_rows_to_csv, perf_sweep};
use avatar_offload::pipeline::{run_session, OffloadModel};
use avatar_offload::privacy::{mi_from_psr, psr_from_mi, NoiseCalibration, MI_PRESETS};
use avatar_offload::RngStream;
use serde_json::json;

use crate::config::Config;
use crate::{Cli, Command, Failure, Global, Noise, Statistic, Who};

pub fn run(cli: &Cli) -> Result<(), Failure> {
    let g = &cli.global;
    let config = Config::load(g.config.as_deref())?;
    match &cli.command {
        Command::GenCorpus { spec } => gen_corpus(g, &config, spec.as_deref()),
        Command::Rank { corpus, block, statistic } => rank(g, &config, corpus, *block, *statistic),
        Command::TrainCodec { corpus, m, latent_dim, block, full_offload } => {
            train_codec(g, &config, corpus, *m, *latent_dim, *block, *full_offload)
        }
        Command::Calibrate { plan, corpus, noise, v, epsilon, delta } => {
            calibrate(g, plan, corpus, *noise, *v, *epsilon, *delta)
        }
        Command::Bound { v, psr, classes } => bound(*v, *psr, *classes),
        Command::Sweep { corpus, profiles } => sweep(g, &config, corpus, profiles.as_deref()),
        Command::Attack { plan, calib, corpus, attacker } => attack(g, &config, plan, calib, corpus, *attacker),
        Command::Perf { device, host, link, workload, ms, profiles } => {
            let hw = &config.hardware;
            let pick = |flag: &Option<String>, default: &str| flag.clone().unwrap_or_else(|| default.to_string());
            perf(
                g,
                &config,
                &pick(device, &hw.local),
                &pick(host, &hw.host),
                &pick(link, &hw.link),
                &pick(workload, &hw.workload),
                ms,
                profiles.as_deref(),
            )
        }
        Command::Serve { listen, codec, sessions, idle_timeout_ms } => {
            serve(g, listen, codec, *sessions, Duration::from_millis(*idle_timeout_ms))
        }
        Command::Offload { connect, plan, calib, frames, timeout_ms } => {
            offload(g, connect, plan, calib, frames, Duration::from_millis(*timeout_ms))
        }
    }
}

/// Input artifacts that cannot be read or parsed are configuration errors.
fn input<T>(what: &str, path: &Path, r: avatar_offload::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| Failure::config(format!("cannot load {what} {}: {e}", path.display())))
}

fn load_frames(dir: &Path) -> Result<Vec<LabeledFrame>, Failure> {
    input("corpus", dir, read_manifest(dir))
}

fn load_model(plan: &Path) -> Result<OffloadModel, Failure> {
    let dir = plan.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    input("model", plan, OffloadModel::load(dir))
}

fn load_calibration(path: &Path) -> Result<NoiseCalibration, Failure> {
    let bytes = input("calibration", path, fs::read(path).map_err(Into::into))?;
    input("calibration", path, NoiseCalibration::from_bytes(&bytes))
}

fn create_out(g: &Global) -> Result<PathBuf, Failure> {
    let out = g.out_dir();
    fs::create_dir_all(&out).map_err(|e| Failure::runtime(format!("cannot create {}: {e}", out.display())))?;
    Ok(out)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn json_text(value: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn gen_corpus(g: &Global, config: &Config, spec_path: Option<&Path>) -> Result<(), Failure> {
    let mut spec = match spec_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?;
            CorpusSpec::from_toml(&text)?
        }
        None => config.corpus.clone(),
    };
    if let Some(seed) = g.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let frames = generate(&spec)?;
    let out = create_out(g)?;
    write_manifest(&out, &frames)?;
    write(&out.join("corpus.toml"), spec.to_toml())?;
    info!("{} frames, {} classes, {}x{}", frames.len(), spec.classes, spec.height, spec.width);
    Ok(())
}

fn rank(g: &Global, config: &Config, corpus: &Path, block: Option<usize>, stat: Statistic) -> Result<(), Failure> {
    let frames = load_frames(corpus)?;
    let block = block.unwrap_or(config.model.block);
    let mean = dataset_mean(&frames)?;
    let sets = frames.iter().map(|f| block_dct(&f.texture, &mean, block)).collect::<avatar_offload::Result<Vec<_>>>()?;
    let mode = match stat {
        Statistic::Variance => RankStatistic::Variance,
        Statistic::MeanSquare => RankStatistic::MeanSquare,
    };
    let ranking = energy_rank(&sets, mode)?;
    let shares = ranking.shares();
    let mut csv = String::from("component,statistic,share,rank\n");
    for (k, s) in ranking.statistic.iter().enumerate() {
        let pos = ranking.order.iter().position(|&c| c == k).expect("ranking covers every component");
        let _ = writeln!(csv, "{k},{s:.9e},{:.6},{pos}", shares[k]);
    }
    let out = create_out(g)?;
    write(&out.join("ranking.csv"), csv)?;
    write(&out.join("ranking.json"), json_text(&ranking))?;
    info!("top component {} holds {:.1}%", ranking.top(), 100.0 * shares[ranking.top()]);
    Ok(())
}

fn train_codec(
    g: &Global,
    config: &Config,
    corpus: &Path,
    m: Option<usize>,
    latent_dim: Option<usize>,
    block: Option<usize>,
    full_offload: bool,
) -> Result<(), Failure> {
    let frames = load_frames(corpus)?;
    let block = block.unwrap_or(config.model.block);
    let plan = if full_offload {
        PartitionPlan::full_offload(block)?
    } else {
        let mean = dataset_mean(&frames)?;
        let ranking = rank_corpus(&frames, &mean, block)?;
        make_plan(&ranking, m.unwrap_or(config.model.offloaded), config.model.keep_base_local)?
    };
    let model = OffloadModel::train(&frames, &plan, latent_dim.unwrap_or(config.model.latent_dim))?;
    let out = create_out(g)?;
    model.save(&out)?;
    info!(
        "offloaded {:?}, local {:?}; model written to {}",
        plan.offloaded_ids,
        plan.local_ids,
        out.display()
    );
    Ok(())
}

fn calibrate(
    g: &Global,
    plan: &Path,
    corpus: &Path,
    noise: Noise,
    v: Option<f64>,
    epsilon: Option<f64>,
    delta: Option<f64>,
) -> Result<(), Failure> {
    let model = load_model(plan)?;
    let frames = load_frames(corpus)?;
    let need = |x: Option<f64>, flag: &str| x.ok_or_else(|| Failure::config(format!("--noise {noise:?} needs --{flag}")));
    let spec = match noise {
        Noise::None => NoiseSpec::None,
        Noise::Damp => NoiseSpec::Damp { v: need(v, "v")? },
        Noise::Iso => NoiseSpec::IsotropicMi { v: need(v, "v")? },
        Noise::Dp => NoiseSpec::DpGaussian { epsilon: need(epsilon, "epsilon")?, delta: need(delta, "delta")? },
    };
    let cal = calibrate_for(&model, &frames, spec)?;
    let out = create_out(g)?;
    write(&out.join("calib.pcal"), cal.to_bytes())?;
    let summary = json!({
        "kind": cal.kind,
        "v": if cal.v.is_finite() { Some(cal.v) } else { None },
        "dim": cal.dim(),
        "trace": cal.trace,
        "zero_spectrum": cal.zero_spectrum,
        "calib_hash": format!("{:016x}", cal.content_hash()),
        "codec_hash": format!("{:016x}", model.offloaded_codec()?.content_hash()),
    });
    write(&out.join("calib.json"), json_text(&summary))?;
    info!("{:?} noise, trace {:.6e}", cal.kind, cal.trace);
    Ok(())
}

fn bound(v: Option<f64>, psr: Option<f64>, classes: usize) -> Result<(), Failure> {
    if classes < 2 {
        return Err(Failure::config("--classes must be at least 2"));
    }
    let prior = 1.0 / classes as f64;
    let mut text = String::new();
    match (v, psr) {
        (Some(v), _) => {
            let _ = writeln!(text, "v={v} classes={classes} t_psr={:.4}", psr_from_mi(v, prior)?);
        }
        (None, Some(p)) => {
            let _ = writeln!(text, "psr={p} classes={classes} v={:.4}", mi_from_psr(p, prior)?);
        }
        (None, None) => {
            text.push_str("v,t_psr\n");
            for v in MI_PRESETS {
                let _ = writeln!(text, "{v},{:.4}", psr_from_mi(v, prior)?);
            }
        }
    }
    print!("{text}");
    Ok(())
}

fn sweep(g: &Global, config: &Config, corpus: &Path, profiles: Option<&Path>) -> Result<(), Failure> {
    let frames = load_frames(corpus)?;
    let set = config.profile_set(profiles)?;
    let hw = &config.hardware;
    let workload = set.workload(&hw.workload)?;
    let block = config.model.block;
    if workload.block != block {
        return Err(Failure::config(format!(
            "workload {} uses block {} but the model block is {block}",
            hw.workload, workload.block
        )));
    }
    let mut vs: Vec<Option<f64>> = Vec::new();
    if config.sweep.include_unnoised {
        vs.push(None);
    }
    vs.extend(config.sweep.vs.iter().map(|&v| Some(v)));
    let seed = g.seed();
    let sweep_config = SweepConfig {
        ms: config.sweep.ms.clone(),
        vs,
        block,
        latent_dim: config.model.latent_dim,
        loss_reference: set.constants.loss_reference,
        attack: AttackSettings {
            eval_repeats: config.sweep.eval_repeats,
            ..config.attack.settings(AttackerChoice::Both, seed)
        },
        seed,
    };
    let hardware = SweepHardware {
        workload: &workload,
        local: set.device(&hw.local)?,
        host: set.device(&hw.host)?,
        link: set.link(&hw.link)?,
    };
    let rows = run_sweep(&frames, &sweep_config, &hardware)?;
    let out = create_out(g)?;
    write(&out.join("sweep.csv"), sweep_rows_to_csv(&rows))?;
    let summary = json!({
        "seed": seed,
        "classes": class_count(&frames),
        "frames": frames.len(),
        "loss_reference": sweep_config.loss_reference,
        "hardware": { "local": hw.local, "host": hw.host, "link": hw.link, "workload": hw.workload },
        "rows": rows,
    });
    write(&out.join("sweep.json"), json_text(&summary))?;
    Ok(())
}

fn attack(g: &Global, config: &Config, plan: &Path, calib: &Path, corpus: &Path, who: Who) -> Result<(), Failure> {
    let model = load_model(plan)?;
    let cal = load_calibration(calib)?;
    let frames = load_frames(corpus)?;
    let choice = match who {
        Who::Both => AttackerChoice::Both,
        Who::Empirical => AttackerChoice::Empirical,
        Who::Nn => AttackerChoice::Nn,
    };
    let settings = config.attack.settings(choice, g.seed());
    let reports = run_attacks(&model, &frames, &cal, &settings)?;
    let out = create_out(g)?;
    write(&out.join("attack.csv"), reports_to_csv(&reports))?;
    let summary = json!({
        "settings": {
            "seed": settings.seed,
            "eval_repeats": settings.eval_repeats,
            "train_per_class": settings.train_per_class,
            "train_repeats": settings.train_repeats,
            "mlp": avatar_offload::attack::MlpConfig {
                classes: class_count(&frames),
                seed: RngStream::stream_seed(settings.seed, "attack/mlp"),
                ..settings.mlp.clone()
            },
        },
        "noise": { "kind": cal.kind, "trace": cal.trace },
        "reports": reports,
    });
    write(&out.join("attack.json"), json_text(&summary))?;
    for r in &reports {
        info!("{}: e-PSR {:.4} [{:.4}, {:.4}] over {} trials", r.attacker, r.e_psr, r.ci_lo, r.ci_hi, r.trials);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn perf(
    g: &Global,
    config: &Config,
    device: &str,
    host: &str,
    link: &str,
    workload: &str,
    ms: &[usize],
    profiles: Option<&Path>,
) -> Result<(), Failure> {
    let set = config.profile_set(profiles)?;
    let w = set.workload(workload)?;
    let ms = if ms.is_empty() { vec![w.offloaded] } else { ms.to_vec() };
    let reports = perf_sweep(&w, &ms, set.device(device)?, set.device(host)?, set.link(link)?)?;
    let csv = perf_rows_to_csv(&reports);
    let out = create_out(g)?;
    write(&out.join("perf.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

/// Appends one line per received envelope; payloads are summarized by an FNV-1a digest.
struct CsvRecorder {
    file: Mutex<File>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl Recorder for CsvRecorder {
    fn record(&self, e: &Envelope) {
        let mut f = self.file.lock().unwrap();
        let line =
            format!("{},{},{:?},{},{:016x}\n", e.session_id, e.frame_id, e.msg_type, e.payload.len(), fnv1a(&e.payload));
        if let Err(err) = f.write_all(line.as_bytes()) {
            log::warn!("host log write failed: {err}");
        }
    }
}

fn serve(g: &Global, listen: &str, codecs: &[PathBuf], sessions: Option<usize>, idle: Duration) -> Result<(), Failure> {
    let mut store = CodecStore::new();
    for path in codecs {
        let bytes = input("codec", path, fs::read(path).map_err(Into::into))?;
        let codec = input("codec", path, Codec::from_bytes(&bytes))?;
        let hash = store.insert(codec)?;
        info!("serving codec {hash:016x} from {}", path.display());
    }
    let recorder: Option<Arc<dyn Recorder>> = match &g.out {
        Some(_) => {
            let path = create_out(g)?.join("host_log.csv");
            let mut file = File::create(&path).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
            file.write_all(b"session_id,frame_id,msg_type,payload_len,payload_digest\n")
                .map_err(|e| Failure::runtime(e.to_string()))?;
            Some(Arc::new(CsvRecorder { file: Mutex::new(file) }))
        }
        None => None,
    };
    let options = HostOptions { idle_timeout: idle, max_sessions: sessions, recorder };
    let host = Host::bind(listen, store, options).map_err(|e| Failure::config(format!("cannot listen on {listen}: {e}")))?;
    let mut stdout = io::stdout();
    let _ = writeln!(stdout, "listening on {}", host.local_addr()?);
    let _ = stdout.flush();
    host.run()?;
    Ok(())
}

fn offload(
    g: &Global,
    connect: &str,
    plan: &Path,
    calib: &Path,
    frames_dir: &Path,
    timeout: Duration,
) -> Result<(), Failure> {
    let model = load_model(plan)?;
    let cal = load_calibration(calib)?;
    let frames = load_frames(frames_dir)?;
    let seed = g.seed();
    let config = SessionConfig::for_model(&model, &cal)?;
    let session_id = RngStream::stream_seed(seed, "offload/session");
    let mut client = OffloadClient::connect(connect, config, session_id, timeout)?;
    let output = run_session(&model, &cal, frames.iter().map(|f| (f.frame_id, &f.texture)), &mut client, seed);
    for t in &output.log {
        info!(
            "frame {} encode {:.3} ms, offload {:.3} ms, local {:.3} ms, merge {:.3} ms",
            t.frame_id,
            t.encode.as_secs_f64() * 1e3,
            t.offload.as_secs_f64() * 1e3,
            t.local.as_secs_f64() * 1e3,
            t.merge.as_secs_f64() * 1e3
        );
    }
    let done: Vec<LabeledFrame> = frames
        .iter()
        .zip(output.textures)
        .map(|(f, texture)| LabeledFrame { frame_id: f.frame_id, label: f.label, texture })
        .collect();
    let mut mse = 0.0;
    for (r, f) in done.iter().zip(&frames) {
        mse += r.texture.mse(&f.texture)?;
    }
    let out = create_out(g)?;
    if !done.is_empty() {
        write_manifest(&out, &done)?;
    }
    let summary = json!({
        "session_id": session_id,
        "frames_sent": frames.len(),
        "frames_reconstructed": done.len(),
        "mean_mse": if done.is_empty() { None } else { Some(mse / done.len() as f64) },
        "error": output.error.as_ref().map(|e| e.to_string()),
    });
    write(&out.join("offload.json"), json_text(&summary))?;
    if let Some(e) = output.error {
        return Err(Failure::runtime(format!("session aborted after {} frames: {e}", done.len())));
    }
    client.close()?;
    Ok(())
}

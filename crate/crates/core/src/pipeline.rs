//! Client-side reconstruction pipeline shared by every offload transport.
//!
//! Per frame: decompose, encode both paths, noise the offloaded latent, hand
//! it to the transport, decode the local path meanwhile, merge, and invert.
//! The host side is [`host_decode`], used verbatim by the in-process
//! transport and the network server, so both produce identical bits.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::codec::{train_codec, Codec, PathKind};
use crate::corpus::{dataset_mean, LabeledFrame};
use crate::error::{check_len, invalid, Error, Result};
use crate::frequency::{block_dct, block_idct, merge, plane_len, PartialComponents, PartitionPlan, Texture};
use crate::privacy::{add_noise, NoiseCalibration};
use crate::rng::RngStream;

pub const PLAN_FILE: &str = "plan.json";
pub const MEAN_FILE: &str = "mean.ptex";
pub const LOCAL_CODEC_FILE: &str = "local.pcdc";
pub const OFFLOADED_CODEC_FILE: &str = "offloaded.pcdc";

/// Untrusted-host step: decode a received latent into offloaded planes.
pub fn host_decode(codec: &Codec, latent: &[f32]) -> Result<Vec<f32>> {
    let z: Vec<f64> = latent.iter().map(|&v| f64::from(v)).collect();
    Ok(codec.decode_values(&z)?.into_iter().map(|v| v as f32).collect())
}

/// Carries the noisy offloaded latent to a host and returns its decoded planes.
pub trait OffloadTransport {
    fn offload(&mut self, frame_id: u64, latent: &[f32]) -> Result<Vec<f32>>;
}

/// Host decode in the same process.
pub struct InProcess<'a> {
    pub codec: &'a Codec,
}

impl OffloadTransport for InProcess<'_> {
    fn offload(&mut self, _frame_id: u64, latent: &[f32]) -> Result<Vec<f32>> {
        host_decode(self.codec, latent)
    }
}

/// Plan, mean texture and path codecs of one trained configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct OffloadModel {
    pub plan: PartitionPlan,
    pub mean: Texture<f32>,
    pub local: Option<Codec>,
    pub offloaded: Option<Codec>,
}

fn stack(tex: &Texture<f32>, mean: &Texture<f32>, block: usize, ids: &[usize]) -> Result<Vec<f64>> {
    let cs = block_dct(tex, mean, block)?;
    Ok(cs.select(ids)?.flatten().into_iter().map(f64::from).collect())
}

impl OffloadModel {
    /// Trains one codec per non-empty path; `latent_dim` is capped at the path input size.
    pub fn train(frames: &[LabeledFrame], plan: &PartitionPlan, latent_dim: usize) -> Result<Self> {
        let mean = dataset_mean(frames)?;
        let train = |ids: &[usize], path: PathKind| -> Result<Option<Codec>> {
            if ids.is_empty() {
                return Ok(None);
            }
            let stacks =
                frames.iter().map(|f| stack(&f.texture, &mean, plan.block, ids)).collect::<Result<Vec<_>>>()?;
            let d = latent_dim.min(stacks[0].len());
            train_codec(&stacks, d, path).map(Some)
        };
        let local = train(&plan.local_ids, PathKind::Local)?;
        let offloaded = train(&plan.offloaded_ids, PathKind::Offloaded)?;
        Ok(Self { plan: plan.clone(), mean, local, offloaded })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mean.dims()
    }

    pub fn plane_len(&self) -> usize {
        let (h, w) = self.dims();
        plane_len(h, w, self.plan.block)
    }

    pub fn offloaded_codec(&self) -> Result<&Codec> {
        self.offloaded.as_ref().ok_or_else(|| invalid("plan offloads nothing"))
    }

    /// Flattened (local, offloaded) component stacks of one texture.
    pub fn split(&self, tex: &Texture<f32>) -> Result<(Vec<f64>, Vec<f64>)> {
        let cs = block_dct(tex, &self.mean, self.plan.block)?;
        let flat = |ids: &[usize]| -> Result<Vec<f64>> {
            Ok(cs.select(ids)?.flatten().into_iter().map(f64::from).collect())
        };
        Ok((flat(&self.plan.local_ids)?, flat(&self.plan.offloaded_ids)?))
    }

    /// Noisy offloaded latent as released to the host.
    pub fn observe(&self, tex: &Texture<f32>, frame_id: u64, cal: &NoiseCalibration, seed: u64) -> Result<Vec<f32>> {
        let codec = self.offloaded_codec()?;
        let (_, x_off) = self.split(tex)?;
        let z = codec.encode(&x_off, frame_id)?;
        let o = add_noise(&z, cal, &mut noise_stream(seed, frame_id))?;
        Ok(o.values.into_iter().map(|v| v as f32).collect())
    }

    fn local_planes(&self, x_loc: &[f64], frame_id: u64) -> Result<Vec<f32>> {
        match &self.local {
            Some(codec) => {
                let z = codec.encode(x_loc, frame_id)?;
                Ok(codec.decode(&z)?.into_iter().map(|v| v as f32).collect())
            }
            None => Ok(Vec::new()),
        }
    }

    fn assemble(&self, local: &[f32], offloaded: &[f32]) -> Result<Texture<f32>> {
        let (h, w) = self.dims();
        let b = self.plan.block;
        let lp = PartialComponents::from_flat(b, h, w, &self.plan.local_ids, local)?;
        let op = PartialComponents::from_flat(b, h, w, &self.plan.offloaded_ids, offloaded)?;
        block_idct(&merge(&lp, &op, &self.plan)?, &self.mean)
    }

    /// Reconstruction with both paths decoded locally in double precision and no noise.
    pub fn reconstruct_local(&self, tex: &Texture<f32>) -> Result<Texture<f32>> {
        let (x_loc, x_off) = self.split(tex)?;
        let local = self.local_planes(&x_loc, 0)?;
        let off = match &self.offloaded {
            Some(c) => c.decode(&c.encode(&x_off, 0)?)?.into_iter().map(|v| v as f32).collect(),
            None => Vec::new(),
        };
        self.assemble(&local, &off)
    }

    /// Writes plan, mean and codecs into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(PLAN_FILE), self.plan.to_json())?;
        fs::write(dir.join(MEAN_FILE), self.mean.to_ptex())?;
        for (codec, file) in [(&self.local, LOCAL_CODEC_FILE), (&self.offloaded, OFFLOADED_CODEC_FILE)] {
            let path = dir.join(file);
            match codec {
                Some(c) => fs::write(path, c.to_bytes())?,
                None if path.exists() => fs::remove_file(path)?,
                None => {}
            }
        }
        Ok(())
    }

    /// Loads a configuration written by [`OffloadModel::save`].
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let plan = PartitionPlan::from_json(&fs::read_to_string(dir.join(PLAN_FILE))?)?;
        let mean = Texture::from_ptex(&fs::read(dir.join(MEAN_FILE))?)?;
        let read = |ids: &[usize], file: &str| -> Result<Option<Codec>> {
            if ids.is_empty() {
                return Ok(None);
            }
            Codec::from_bytes(&fs::read(dir.join(file))?).map(Some)
        };
        let local = read(&plan.local_ids, LOCAL_CODEC_FILE)?;
        let offloaded = read(&plan.offloaded_ids, OFFLOADED_CODEC_FILE)?;
        let model = Self { plan, mean, local, offloaded };
        model.check()?;
        Ok(model)
    }

    fn check(&self) -> Result<()> {
        let pl = self.plane_len();
        for (codec, ids, path) in [
            (&self.local, &self.plan.local_ids, PathKind::Local),
            (&self.offloaded, &self.plan.offloaded_ids, PathKind::Offloaded),
        ] {
            if let Some(c) = codec {
                check_len(ids.len() * pl, c.input_dim())?;
                if c.path() != path {
                    return Err(invalid(format!("codec for the {path:?} path has the wrong path tag")));
                }
            }
        }
        Ok(())
    }
}

/// Noise stream of one frame, independent of processing order.
pub fn noise_stream(seed: u64, frame_id: u64) -> RngStream {
    RngStream::new(seed, format!("pipeline/noise/{frame_id}"))
}

/// Wall-clock stage timings of one frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameTiming {
    pub frame_id: u64,
    pub encode: Duration,
    pub offload: Duration,
    pub local: Duration,
    pub merge: Duration,
}

#[derive(Debug)]
pub struct SessionOutput {
    pub textures: Vec<Texture<f32>>,
    pub log: Vec<FrameTiming>,
    /// Set when the session stopped early; `textures` and `log` hold the completed frames.
    pub error: Option<Error>,
}

/// Runs frames in order through `transport`.
pub fn run_session<'f>(
    model: &OffloadModel,
    cal: &NoiseCalibration,
    frames: impl IntoIterator<Item = (u64, &'f Texture<f32>)>,
    transport: &mut dyn OffloadTransport,
    seed: u64,
) -> SessionOutput {
    let mut out = SessionOutput { textures: Vec::new(), log: Vec::new(), error: None };
    for (frame_id, tex) in frames {
        match run_frame(model, cal, frame_id, tex, transport, seed) {
            Ok((t, timing)) => {
                out.textures.push(t);
                out.log.push(timing);
            }
            Err(e) => {
                out.error = Some(e);
                break;
            }
        }
    }
    out
}

fn run_frame(
    model: &OffloadModel,
    cal: &NoiseCalibration,
    frame_id: u64,
    tex: &Texture<f32>,
    transport: &mut dyn OffloadTransport,
    seed: u64,
) -> Result<(Texture<f32>, FrameTiming)> {
    let mut timing = FrameTiming { frame_id, ..Default::default() };
    let t = Instant::now();
    let (x_loc, x_off) = model.split(tex)?;
    let released = match &model.offloaded {
        Some(codec) => {
            let z = codec.encode(&x_off, frame_id)?;
            let o = add_noise(&z, cal, &mut noise_stream(seed, frame_id))?;
            Some(o.values.into_iter().map(|v| v as f32).collect::<Vec<f32>>())
        }
        None => None,
    };
    timing.encode = t.elapsed();

    let t = Instant::now();
    let offloaded = match released {
        Some(latent) => {
            let planes = transport.offload(frame_id, &latent)?;
            check_len(model.plan.offloaded_ids.len() * model.plane_len(), planes.len())?;
            planes
        }
        None => Vec::new(),
    };
    timing.offload = t.elapsed();

    let t = Instant::now();
    let local = model.local_planes(&x_loc, frame_id)?;
    timing.local = t.elapsed();

    let t = Instant::now();
    let out = model.assemble(&local, &offloaded)?;
    timing.merge = t.elapsed();
    Ok((out, timing))
}

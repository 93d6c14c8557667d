//! Analytic latency, throughput and energy model for partitioned decoding.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Checked-in hardware, link and workload profiles.
pub const DEFAULT_PROFILES: &str = include_str!("../profiles/defaults.toml");

pub const DEFAULT_FPS: f64 = 60.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    #[serde(default)]
    pub name: String,
    /// FLOP/s.
    pub peak_compute: f64,
    /// Bytes/s.
    pub mem_bandwidth: f64,
    /// GOP/s per watt.
    pub compute_efficiency: f64,
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("peak_compute", self.peak_compute),
            ("mem_bandwidth", self.mem_bandwidth),
            ("compute_efficiency", self.compute_efficiency),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("device {}: {field} must be positive", self.name)));
            }
        }
        Ok(())
    }

    /// Joules per operation.
    pub fn joules_per_op(&self) -> f64 {
        1.0 / (self.compute_efficiency * 1e9)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkProfile {
    #[serde(default)]
    pub name: String,
    /// Bits/s.
    pub bandwidth: f64,
    /// Joules/bit.
    pub per_bit_energy: f64,
}

impl LinkProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) || !(self.per_bit_energy.is_finite() && self.per_bit_energy > 0.0) {
            return Err(invalid(format!("link {}: bandwidth and per-bit energy must be positive", self.name)));
        }
        Ok(())
    }
}

/// Measured stage latencies in seconds; each replaces the modeled value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasuredLatencies {
    pub local: Option<f64>,
    pub offload: Option<f64>,
    pub comm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadProfile {
    pub block: usize,
    /// Offloaded component count `m`.
    pub offloaded: usize,
    /// FLOPs of the full texture decoder per user-frame.
    pub f_tex: f64,
    /// FLOPs of mesh decoding and other fixed work per user-frame.
    pub f_fixed: f64,
    pub return_bytes_per_component: f64,
    pub uplink_bytes: f64,
    pub fps: f64,
    /// Bytes moved by the local decoder; `None` means compute-bound.
    pub local_bytes_moved: Option<f64>,
    pub measured: MeasuredLatencies,
}

impl WorkloadProfile {
    pub fn components(&self) -> usize {
        self.block * self.block
    }

    pub fn validate(&self) -> Result<()> {
        if self.block == 0 || self.offloaded > self.components() {
            return Err(invalid(format!("offloaded count {} outside [0, {}]", self.offloaded, self.components())));
        }
        if !(self.f_tex >= 0.0 && self.f_fixed >= 0.0) {
            return Err(invalid("FLOPs must be non-negative"));
        }
        if !(self.return_bytes_per_component >= 0.0 && self.uplink_bytes >= 0.0) {
            return Err(invalid("byte counts must be non-negative"));
        }
        if !(self.fps > 0.0) {
            return Err(invalid("fps must be positive"));
        }
        Ok(())
    }

    pub fn with_offloaded(&self, m: usize) -> Self {
        Self { offloaded: m, ..self.clone() }
    }

    /// Bytes crossing the link per user-frame: latent up, planes back.
    pub fn link_bytes(&self) -> f64 {
        if self.offloaded == 0 {
            0.0
        } else {
            self.uplink_bytes + self.offloaded as f64 * self.return_bytes_per_component
        }
    }
}

/// `F_fixed + ((B² − m)/B²)·F_tex`.
pub fn local_flops(w: &WorkloadProfile) -> f64 {
    let n = w.components() as f64;
    w.f_fixed + (n - w.offloaded as f64) / n * w.f_tex
}

/// Texture-decoder share run by the host: `(m/B²)·F_tex`.
pub fn offload_flops(w: &WorkloadProfile) -> f64 {
    w.offloaded as f64 / w.components() as f64 * w.f_tex
}

/// One (offloaded count, local FLOPs) measurement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlopsAnchor {
    pub offloaded: usize,
    pub flops: f64,
}

/// Solves `(F_tex, F_fixed)` so that [`local_flops`] passes through both anchors.
pub fn fit_flops(block: usize, a: FlopsAnchor, b: FlopsAnchor) -> Result<(f64, f64)> {
    if a.offloaded == b.offloaded {
        return Err(invalid("anchors need distinct offloaded counts"));
    }
    let n = (block * block) as f64;
    let ka = (n - a.offloaded as f64) / n;
    let kb = (n - b.offloaded as f64) / n;
    let f_tex = (a.flops - b.flops) / (ka - kb);
    let f_fixed = a.flops - ka * f_tex;
    if f_tex < 0.0 || f_fixed < 0.0 {
        return Err(invalid(format!("anchor fit gives negative FLOPs ({f_tex}, {f_fixed})")));
    }
    Ok((f_tex, f_fixed))
}

/// `max(flops/peak, bytes/bandwidth)`; compute-bound when `bytes_moved` is `None`.
pub fn roofline_latency(flops: f64, bytes_moved: Option<f64>, dev: &DeviceProfile) -> f64 {
    let compute = flops / dev.peak_compute;
    match bytes_moved {
        Some(b) => compute.max(b / dev.mem_bandwidth),
        None => compute,
    }
}

pub fn comm_latency(bytes: f64, link: &LinkProfile) -> f64 {
    8.0 * bytes / link.bandwidth
}

/// `min over stages of 1/(fps·latency)`; zero-latency stages do not bound.
pub fn pipeline_users(stage_latencies: &[f64], fps: f64) -> Result<f64> {
    if stage_latencies.is_empty() {
        return Err(invalid("pipeline needs at least one stage"));
    }
    if stage_latencies.iter().any(|&s| !(s >= 0.0)) {
        return Err(invalid("stage latencies must be non-negative"));
    }
    Ok(stage_latencies
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| 1.0 / (fps * s))
        .fold(f64::INFINITY, f64::min))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct EnergyBreakdown {
    pub local_compute: f64,
    pub offload_compute: f64,
    pub comm: f64,
    pub total: f64,
}

/// Joules per user-frame.
pub fn energy_report(
    flops_local: f64,
    flops_offload: f64,
    bits_moved: f64,
    local: &DeviceProfile,
    host: &DeviceProfile,
    link: &LinkProfile,
) -> EnergyBreakdown {
    let local_compute = flops_local * local.joules_per_op();
    let offload_compute = flops_offload * host.joules_per_op();
    let comm = bits_moved * link.per_bit_energy;
    EnergyBreakdown { local_compute, offload_compute, comm, total: local_compute + offload_compute + comm }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerfReport {
    pub offloaded: usize,
    pub local_s: f64,
    pub offload_s: f64,
    pub comm_s: f64,
    pub users: f64,
    pub users_per_watt: f64,
    pub energy: EnergyBreakdown,
}

pub const PERF_CSV_HEADER: &str = "m,v,local_ms,offload_ms,comm_ms,users,users_per_watt,joules";

impl PerfReport {
    /// `v` is the noise budget label of the row ("none" when unnoised).
    pub fn csv_row(&self, v: &str) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.offloaded,
            v,
            self.local_s * 1e3,
            self.offload_s * 1e3,
            self.comm_s * 1e3,
            self.users,
            self.users_per_watt,
            self.energy.total
        )
    }
}

pub fn perf_report(w: &WorkloadProfile, local: &DeviceProfile, host: &DeviceProfile, link: &LinkProfile) -> Result<PerfReport> {
    w.validate()?;
    local.validate()?;
    host.validate()?;
    link.validate()?;
    let lf = local_flops(w);
    let of = offload_flops(w);
    let bytes = w.link_bytes();
    let local_s = w.measured.local.unwrap_or_else(|| roofline_latency(lf, w.local_bytes_moved, local));
    let offload_s = w.measured.offload.unwrap_or_else(|| roofline_latency(of, None, host));
    let comm_s = w.measured.comm.unwrap_or_else(|| comm_latency(bytes, link));
    let users = pipeline_users(&[local_s, offload_s, comm_s], w.fps)?;
    let energy = energy_report(lf, of, 8.0 * bytes, local, host, link);
    // Sustained power of one user is energy per frame times frame rate.
    let watts = energy.total * w.fps;
    let users_per_watt = if watts > 0.0 { 1.0 / watts } else { f64::INFINITY };
    Ok(PerfReport { offloaded: w.offloaded, local_s, offload_s, comm_s, users, users_per_watt, energy })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constants {
    pub loss_reference: f64,
    #[serde(default = "default_fps")]
    pub fps: f64,
}

fn default_fps() -> f64 {
    DEFAULT_FPS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anchors {
    pub block: usize,
    pub low_offloaded: usize,
    pub low_flops: f64,
    pub high_offloaded: usize,
    pub high_flops: f64,
    pub baseline_flops: f64,
}

impl Anchors {
    pub fn fit(&self) -> Result<(f64, f64)> {
        fit_flops(
            self.block,
            FlopsAnchor { offloaded: self.low_offloaded, flops: self.low_flops },
            FlopsAnchor { offloaded: self.high_offloaded, flops: self.high_flops },
        )
    }
}

/// Workload as written in a profile file; missing FLOPs come from the anchor fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadEntry {
    pub block: usize,
    pub offloaded: usize,
    pub f_tex: Option<f64>,
    pub f_fixed: Option<f64>,
    #[serde(default)]
    pub return_bytes_per_component: f64,
    #[serde(default)]
    pub uplink_bytes: f64,
    pub fps: Option<f64>,
    pub local_bytes_moved: Option<f64>,
    pub measured_local_ms: Option<f64>,
    pub measured_offload_ms: Option<f64>,
    pub measured_comm_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSet {
    pub constants: Constants,
    pub anchors: Anchors,
    #[serde(default)]
    pub device: BTreeMap<String, DeviceProfile>,
    #[serde(default)]
    pub link: BTreeMap<String, LinkProfile>,
    #[serde(default)]
    pub workload: BTreeMap<String, WorkloadEntry>,
}

impl ProfileSet {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut set: Self = toml::from_str(text).map_err(|e| invalid(format!("profile file: {e}")))?;
        for (name, d) in &mut set.device {
            d.name = name.clone();
            d.validate()?;
        }
        for (name, l) in &mut set.link {
            l.name = name.clone();
            l.validate()?;
        }
        set.anchors.fit()?;
        Ok(set)
    }

    pub fn builtin() -> Self {
        Self::from_toml(DEFAULT_PROFILES).expect("checked-in profiles parse")
    }

    pub fn device(&self, name: &str) -> Result<&DeviceProfile> {
        self.device.get(name).ok_or_else(|| invalid(format!("unknown device profile '{name}'")))
    }

    pub fn link(&self, name: &str) -> Result<&LinkProfile> {
        self.link.get(name).ok_or_else(|| invalid(format!("unknown link profile '{name}'")))
    }

    pub fn workload(&self, name: &str) -> Result<WorkloadProfile> {
        let e = self.workload.get(name).ok_or_else(|| invalid(format!("unknown workload profile '{name}'")))?;
        let (fit_tex, fit_fixed) = self.anchors.fit()?;
        let ms = |v: Option<f64>| v.map(|x| x * 1e-3);
        let w = WorkloadProfile {
            block: e.block,
            offloaded: e.offloaded,
            f_tex: e.f_tex.unwrap_or(fit_tex),
            f_fixed: e.f_fixed.unwrap_or(fit_fixed),
            return_bytes_per_component: e.return_bytes_per_component,
            uplink_bytes: e.uplink_bytes,
            fps: e.fps.unwrap_or(self.constants.fps),
            local_bytes_moved: e.local_bytes_moved,
            measured: MeasuredLatencies {
                local: ms(e.measured_local_ms),
                offload: ms(e.measured_offload_ms),
                comm: ms(e.measured_comm_ms),
            },
        };
        w.validate()?;
        Ok(w)
    }
}

/// Report rows for every offloaded count in `ms`, sharing devices and link.
pub fn perf_sweep(
    w: &WorkloadProfile,
    ms: &[usize],
    local: &DeviceProfile,
    host: &DeviceProfile,
    link: &LinkProfile,
) -> Result<Vec<PerfReport>> {
    ms.iter().map(|&m| perf_report(&w.with_offloaded(m), local, host, link)).collect()
}

pub fn perf_rows_to_csv(reports: &[PerfReport]) -> String {
    let mut out = format!("{PERF_CSV_HEADER}\n");
    for r in reports {
        let _ = writeln!(out, "{}", r.csv_row("none"));
    }
    out
}

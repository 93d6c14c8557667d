//! Seeded synthetic expression corpus with a power-law block spectrum, plus
//! texture file import/export and the on-disk corpus manifest.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::frequency::{block_idct, ComponentSet, Texture, CHANNELS, DEFAULT_BLOCK};
use crate::rng::RngStream;

/// Generated dimensions must divide by the largest supported block size.
pub const DIM_MULTIPLE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub frames_per_class: usize,
    /// Coefficient magnitude decays as `(1 + u + v)^-alpha`.
    pub alpha: f64,
    /// Per-pixel Gaussian jitter around the class mean.
    pub jitter_sigma: f64,
    /// Magnitude of the DC coefficient of every block.
    pub amplitude: f64,
    /// Block size of the generating spectrum.
    pub block: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            classes: 65,
            frames_per_class: 8,
            alpha: 2.0,
            jitter_sigma: 0.01,
            amplitude: 0.4,
            block: DEFAULT_BLOCK,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(DIM_MULTIPLE) || !self.width.is_multiple_of(DIM_MULTIPLE) {
            return Err(invalid(format!(
                "corpus dims {}x{} must be positive multiples of {DIM_MULTIPLE}",
                self.height, self.width
            )));
        }
        if self.classes < 2 {
            return Err(invalid("corpus needs at least 2 classes"));
        }
        if self.frames_per_class == 0 {
            return Err(invalid("frames_per_class must be positive"));
        }
        if !(self.alpha >= 0.0) || !(self.jitter_sigma >= 0.0) || !self.amplitude.is_finite() {
            return Err(invalid("alpha, jitter_sigma and amplitude must be finite and non-negative"));
        }
        if !DIM_MULTIPLE.is_multiple_of(self.block) {
            return Err(invalid(format!("block {} does not divide {DIM_MULTIPLE}", self.block)));
        }
        Ok(())
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let spec: Self = toml::from_str(s).map_err(|e| Error::Format { format: "corpus spec", reason: e.to_string() })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("corpus spec serializes")
    }

    pub fn len(&self) -> usize {
        self.classes * self.frames_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFrame {
    pub frame_id: u64,
    pub label: usize,
    pub texture: Texture<f32>,
}

/// Mean texture of one class: `0.5 + IDCT(coefficients)` with seeded signs.
pub fn class_mean(spec: &CorpusSpec, class: usize) -> Result<Texture<f32>> {
    spec.validate()?;
    let b = spec.block;
    let mut rng = RngStream::new(spec.seed, format!("corpus/class/{class}"));
    let plane_len = (spec.height / b) * (spec.width / b) * CHANNELS;
    let mut planes = vec![vec![0.0f32; plane_len]; b * b];
    for pos in 0..plane_len {
        for u in 0..b {
            for v in 0..b {
                let mag = spec.amplitude * (1.0 + (u + v) as f64).powf(-spec.alpha);
                let sign = if rng.next_bit() { 1.0 } else { -1.0 };
                planes[u * b + v][pos] = (sign * mag) as f32;
            }
        }
    }
    let cs = ComponentSet::new(b, spec.height, spec.width, planes)?;
    block_idct(&cs, &Texture::filled(spec.height, spec.width, 0.5))
}

/// Generates the full corpus, class-major: frame id `c · frames_per_class + f`.
pub fn generate(spec: &CorpusSpec) -> Result<Vec<LabeledFrame>> {
    spec.validate()?;
    let mut frames = Vec::with_capacity(spec.len());
    for c in 0..spec.classes {
        let mean = class_mean(spec, c)?;
        for f in 0..spec.frames_per_class {
            let frame_id = (c * spec.frames_per_class + f) as u64;
            let mut rng = RngStream::new(spec.seed, format!("corpus/frame/{frame_id}"));
            let mut tex = mean.clone();
            for x in tex.data_mut() {
                let jitter = if spec.jitter_sigma > 0.0 { spec.jitter_sigma * rng.standard_normal() } else { 0.0 };
                *x = (*x as f64 + jitter).clamp(0.0, 1.0) as f32;
            }
            frames.push(LabeledFrame { frame_id, label: c, texture: tex });
        }
    }
    Ok(frames)
}

/// Per-pixel mean over the corpus.
pub fn dataset_mean(frames: &[LabeledFrame]) -> Result<Texture<f32>> {
    let first = frames.first().ok_or(Error::NotEnoughSamples { needed: 1, got: 0 })?;
    let (h, w) = first.texture.dims();
    let mut acc = vec![0.0f64; h * w * CHANNELS];
    for f in frames {
        if f.texture.dims() != (h, w) {
            return Err(invalid("corpus textures differ in size"));
        }
        for (a, &x) in acc.iter_mut().zip(f.texture.data()) {
            *a += x as f64;
        }
    }
    let n = frames.len() as f64;
    Texture::new(h, w, acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// Parses a binary `P6` PPM with maxval 255 into linear `[0, 1]` values.
pub fn decode_ppm(bytes: &[u8]) -> Result<Texture<f32>> {
    let err = |reason: &str| Error::Format { format: "PPM", reason: reason.to_string() };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| err("non-ascii header"))?);
    }
    if fields[0] != "P6" {
        return Err(err("not a binary P6 file"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| err("bad header number"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(err(&format!("unsupported maxval {maxval}")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(err("missing separator after header"));
    }
    pos += 1;
    let n = w * h * CHANNELS;
    if bytes.len() - pos != n {
        return Err(err(&format!("expected {n} pixel bytes, found {}", bytes.len() - pos)));
    }
    Texture::new(h, w, bytes[pos..].iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn encode_ppm(tex: &Texture<f32>) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", tex.width(), tex.height()).into_bytes();
    out.extend(tex.data().iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn import_ppm(path: impl AsRef<Path>) -> Result<Texture<f32>> {
    decode_ppm(&fs::read(path)?)
}

pub fn export_ppm(tex: &Texture<f32>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_ppm(tex))?;
    Ok(())
}

pub const INDEX_FILE: &str = "index.csv";
pub const INDEX_HEADER: &str = "frame_id,label,path";

/// Writes `frames/<id>.ptex` files and `index.csv` under `dir`.
pub fn write_manifest(dir: impl AsRef<Path>, frames: &[LabeledFrame]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("frames"))?;
    let mut index = Vec::new();
    writeln!(index, "{INDEX_HEADER}")?;
    for f in frames {
        let rel = format!("frames/frame_{:06}.ptex", f.frame_id);
        fs::write(dir.join(&rel), f.texture.to_ptex())?;
        writeln!(index, "{},{},{}", f.frame_id, f.label, rel)?;
    }
    fs::write(dir.join(INDEX_FILE), index)?;
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<LabeledFrame>> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(INDEX_FILE))?;
    let err = |reason: String| Error::Format { format: "corpus index", reason };
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(INDEX_HEADER) {
        return Err(err("missing header".into()));
    }
    let mut frames = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.trim().splitn(3, ',').collect();
        if cols.len() != 3 {
            return Err(err(format!("line {}: expected 3 columns", n + 2)));
        }
        let frame_id = cols[0].parse().map_err(|_| err(format!("line {}: bad frame id", n + 2)))?;
        let label = cols[1].parse().map_err(|_| err(format!("line {}: bad label", n + 2)))?;
        let path: PathBuf = dir.join(cols[2]);
        let texture = Texture::from_ptex(&fs::read(&path)?)?;
        frames.push(LabeledFrame { frame_id, label, texture });
    }
    if frames.is_empty() {
        return Err(err("no frames listed".into()));
    }
    Ok(frames)
}

/// Number of classes implied by the labels (`max label + 1`).
pub fn class_count(frames: &[LabeledFrame]) -> usize {
    frames.iter().map(|f| f.label + 1).max().unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frequency::{block_dct, energy_rank, RankStatistic};

    fn small() -> CorpusSpec {
        CorpusSpec { height: 16, width: 16, classes: 4, frames_per_class: 3, seed: 5, ..Default::default() }
    }

    #[test]
    fn zero_jitter_frames_are_identical_within_class() {
        let spec = CorpusSpec { jitter_sigma: 0.0, ..small() };
        let frames = generate(&spec).unwrap();
        for c in 0..spec.classes {
            let class: Vec<_> = frames.iter().filter(|f| f.label == c).collect();
            assert_eq!(class.len(), 3);
            assert!(class.iter().all(|f| f.texture == class[0].texture));
        }
        assert_ne!(frames[0].texture, frames[3].texture);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&CorpusSpec { seed: 6, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn alpha_zero_has_flat_expected_spectrum() {
        let spec = CorpusSpec { alpha: 0.0, jitter_sigma: 0.0, amplitude: 0.1, ..small() };
        let frames = generate(&spec).unwrap();
        let zero = Texture::filled(16, 16, 0.5f32);
        let sets: Vec<_> = frames.iter().map(|f| block_dct(&f.texture, &zero, 4).unwrap()).collect();
        let r = energy_rank(&sets, RankStatistic::MeanSquare).unwrap();
        for s in &r.statistic {
            assert!((s - r.statistic[0]).abs() < 1e-6, "{:?}", r.statistic);
        }
    }

    #[test]
    fn dataset_mean_cases() {
        let frames = generate(&small()).unwrap();
        assert_eq!(dataset_mean(&frames[..1]).unwrap(), frames[0].texture);
        let mid = dataset_mean(&frames[..2]).unwrap();
        for ((&m, &a), &b) in mid.data().iter().zip(frames[0].texture.data()).zip(frames[1].texture.data()) {
            assert!((m - (a + b) / 2.0).abs() < 1e-7);
        }
        let mean = dataset_mean(&frames).unwrap();
        let brute: f64 = frames.iter().map(|f| f.texture.data()[17] as f64).sum::<f64>() / frames.len() as f64;
        assert!((mean.data()[17] as f64 - brute).abs() < 1e-6);
        assert!(dataset_mean(&[]).is_err());
    }

    #[test]
    fn ppm_fixture_and_round_trip() {
        let bytes: Vec<u8> = [b"P6\n# c\n2 2\n255\n".as_slice(), &[0, 255, 51, 102, 153, 204, 255, 255, 255, 0, 0, 0]]
            .concat();
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.dims(), (2, 2));
        assert_eq!(&t.data()[..6], &[0.0, 1.0, 0.2, 0.4, 0.6, 0.8]);
        assert_eq!(encode_ppm(&t), [b"P6\n2 2\n255\n".as_slice(), &bytes[15..]].concat());
        assert_eq!(decode_ppm(&encode_ppm(&t)).unwrap(), t);

        let black = decode_ppm(&[b"P6 1 1 255\n".as_slice(), &[0, 0, 0]].concat()).unwrap();
        assert_eq!(black.data(), &[0.0, 0.0, 0.0]);

        assert!(decode_ppm(b"P3\n1 1\n255\n\0\0\0").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(decode_ppm(b"P6\n1 1\n255\n\0\0").is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frames = generate(&small()).unwrap();
        write_manifest(dir.path(), &frames).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), frames);
        assert_eq!(class_count(&frames), 4);
    }

    #[test]
    fn spec_validation() {
        assert!(CorpusSpec { height: 12, ..small() }.validate().is_err());
        assert!(CorpusSpec { classes: 1, ..small() }.validate().is_err());
        let toml = "height = 32\nwidth = 32\nclasses = 3\n";
        let s = CorpusSpec::from_toml(toml).unwrap();
        assert_eq!((s.height, s.classes, s.frames_per_class), (32, 3, 8));
        assert!(CorpusSpec::from_toml("bogus = 1").is_err());
    }
}

//! Expression-identification adversaries and the empirical PSR harness.
//!
//! Both adversaries see only the observation released to the untrusted host:
//! the noisy offloaded latent. The empirical attacker decodes it with the
//! offloaded codec and picks the nearest per-class reference; the learned
//! attacker is a small fully connected classifier on the latent itself.

use std::fmt::Write as _;

use serde::Serialize;

use crate::binio::{Reader, Writer};
use crate::codec::Codec;
use crate::corpus::{class_count, LabeledFrame};
use crate::error::{check_len, invalid, Error, Result};
use crate::frequency::{block_dct, PartitionPlan, Texture};
use crate::rng::RngStream;

pub const DEFAULT_CLASSES: usize = 65;
pub const DEFAULT_HIDDEN: usize = 128;
/// Two-sided 95% normal quantile.
pub const WILSON_Z: f64 = 1.959963984540054;

/// What the host observes for one frame, with the ground-truth label kept for scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub label: usize,
    pub latent: Vec<f64>,
}

pub trait Attacker {
    fn name(&self) -> &str;
    fn guess(&self, latent: &[f64]) -> Result<usize>;
}

/// Flattened offloaded-plane stack of one frame, in plan id order.
pub fn offloaded_stack(tex: &Texture<f32>, mean: &Texture<f32>, plan: &PartitionPlan) -> Result<Vec<f64>> {
    let cs = block_dct(tex, mean, plan.block)?;
    Ok(cs.select(&plan.offloaded_ids)?.flatten().into_iter().map(f64::from).collect())
}

/// One reference offloaded-plane stack per expression label.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceBank {
    pub plan: PartitionPlan,
    pub references: Vec<Vec<f64>>,
    /// Frame chosen as exemplar for each label.
    pub exemplars: Vec<u64>,
}

impl ReferenceBank {
    pub fn classes(&self) -> usize {
        self.references.len()
    }
}

/// Picks one seeded-random frame per label and keeps its offloaded planes.
pub fn build_reference_bank(
    frames: &[LabeledFrame],
    mean: &Texture<f32>,
    plan: &PartitionPlan,
    rng: &mut RngStream,
) -> Result<ReferenceBank> {
    let classes = class_count(frames);
    let mut references = Vec::with_capacity(classes);
    let mut exemplars = Vec::with_capacity(classes);
    for label in 0..classes {
        let members: Vec<&LabeledFrame> = frames.iter().filter(|f| f.label == label).collect();
        if members.is_empty() {
            return Err(invalid(format!("label {label} has no frames")));
        }
        let pick = members[rng.index(members.len())];
        references.push(offloaded_stack(&pick.texture, mean, plan)?);
        exemplars.push(pick.frame_id);
    }
    Ok(ReferenceBank { plan: plan.clone(), references, exemplars })
}

/// Label whose reference is nearest in squared L2 distance; ties go to the lower label.
pub fn empirical_attack(query: &[f64], bank: &ReferenceBank) -> Result<usize> {
    let mut best = (f64::INFINITY, 0);
    for (label, r) in bank.references.iter().enumerate() {
        check_len(r.len(), query.len())?;
        let d: f64 = r.iter().zip(query).map(|(a, b)| (a - b).powi(2)).sum();
        if d < best.0 {
            best = (d, label);
        }
    }
    Ok(best.1)
}

/// Decodes the observed latent with the offloaded codec, then matches references.
pub struct EmpiricalAttacker<'a> {
    pub bank: &'a ReferenceBank,
    pub codec: &'a Codec,
}

impl Attacker for EmpiricalAttacker<'_> {
    fn name(&self) -> &str {
        "empirical"
    }

    fn guess(&self, latent: &[f64]) -> Result<usize> {
        empirical_attack(&self.codec.decode_values(latent)?, self.bank)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: vec![DEFAULT_HIDDEN],
            classes: DEFAULT_CLASSES,
            learning_rate: 0.01,
            epochs: 10,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Fully connected layer, `out × in` row-major weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn he_uniform(in_dim: usize, out_dim: usize, rng: &mut RngStream) -> Self {
        let limit = (6.0 / in_dim as f64).sqrt();
        let weights = (0..in_dim * out_dim).map(|_| (2.0 * rng.uniform() - 1.0) * limit).collect();
        Self { in_dim, out_dim, weights, bias: vec![0.0; out_dim] }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.bias.iter().enumerate().map(|(o, &b)| {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        }));
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Gradients of every layer, same layout as the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(layers: &[Dense]) -> Self {
        Self {
            weights: layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }
}

/// Fully connected classifier: rectifier hidden layers, softmax output.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpAttacker {
    /// Input standardization fitted on the training set.
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub layers: Vec<Dense>,
    pub config: MlpConfig,
    /// Full training-set loss after each epoch.
    pub loss_history: Vec<f64>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl MlpAttacker {
    /// Randomly initialized network with `dims = [input, hidden.., classes]`.
    pub fn new(dims: &[usize], config: MlpConfig) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(invalid(format!("invalid layer dims {dims:?}")));
        }
        let mut rng = RngStream::new(config.seed, "mlp/init");
        let layers = dims.windows(2).map(|w| Dense::he_uniform(w[0], w[1], &mut rng)).collect();
        Ok(Self {
            input_mean: vec![0.0; dims[0]],
            input_scale: vec![1.0; dims[0]],
            layers,
            config,
            loss_history: Vec::new(),
        })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].in_dim];
        d.extend(self.layers.iter().map(|l| l.out_dim));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn classes(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.input_mean).zip(&self.input_scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    /// Pre-activations of every layer for a standardized input.
    fn forward_raw(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::new();
            layer.forward(&act, &mut z);
            if i + 1 < self.layers.len() {
                act = z.iter().map(|v| v.max(0.0)).collect();
            }
            pre.push(z);
        }
        pre
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.input_dim(), x.len())?;
        Ok(softmax(self.forward_raw(&self.standardize(x)).last().unwrap()))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let p = self.predict_proba(x)?;
        Ok(argmax(&p))
    }

    /// Cross-entropy of one standardized sample.
    fn loss_raw(&self, x: &[f64], label: usize) -> f64 {
        let p = softmax(self.forward_raw(x).last().unwrap());
        -p[label].max(f64::MIN_POSITIVE).ln()
    }

    pub fn loss(&self, x: &[f64], label: usize) -> Result<f64> {
        check_len(self.input_dim(), x.len())?;
        check_label(label, self.classes())?;
        Ok(self.loss_raw(&self.standardize(x), label))
    }

    pub fn mean_loss(&self, samples: &[(Vec<f64>, usize)]) -> Result<f64> {
        let mut total = 0.0;
        for (x, y) in samples {
            total += self.loss(x, *y)?;
        }
        Ok(total / samples.len().max(1) as f64)
    }

    pub fn accuracy(&self, samples: &[(Vec<f64>, usize)]) -> Result<f64> {
        let mut correct = 0;
        for (x, y) in samples {
            correct += (self.predict(x)? == *y) as usize;
        }
        Ok(correct as f64 / samples.len().max(1) as f64)
    }

    /// Adds the loss gradient of one standardized sample into `grads`.
    fn accumulate_gradients(&self, x: &[f64], label: usize, grads: &mut Gradients) {
        let pre = self.forward_raw(x);
        let mut delta = softmax(pre.last().unwrap());
        delta[label] -= 1.0;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input: Vec<f64> = if l == 0 { x.to_vec() } else { pre[l - 1].iter().map(|v| v.max(0.0)).collect() };
            for (o, &d) in delta.iter().enumerate() {
                grads.bias[l][o] += d;
                if d != 0.0 {
                    let row = &mut grads.weights[l][o * layer.in_dim..(o + 1) * layer.in_dim];
                    row.iter_mut().zip(&input).for_each(|(g, a)| *g += d * a);
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; layer.in_dim];
                for (o, &d) in delta.iter().enumerate() {
                    let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    prev.iter_mut().zip(row).for_each(|(p, w)| *p += d * w);
                }
                for (p, &z) in prev.iter_mut().zip(&pre[l - 1]) {
                    if z <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }

    /// Analytic gradient of the loss of one (raw) sample.
    pub fn gradients(&self, x: &[f64], label: usize) -> Result<Gradients> {
        check_len(self.input_dim(), x.len())?;
        check_label(label, self.classes())?;
        let mut g = Gradients::zeros_like(&self.layers);
        self.accumulate_gradients(&self.standardize(x), label, &mut g);
        Ok(g)
    }

    /// `PMLP` container: layer dims, input standardization, weights and biases, training settings.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(b"PMLP", 1);
        let dims = self.dims();
        w.u32(dims.len() as u32);
        dims.iter().for_each(|&d| w.u32(d as u32));
        w.f64s(self.input_mean.iter().copied());
        w.f64s(self.input_scale.iter().copied());
        for l in &self.layers {
            w.f64s(l.weights.iter().copied());
            w.f64s(l.bias.iter().copied());
        }
        w.f64(self.config.learning_rate);
        w.u32(self.config.epochs as u32);
        w.u32(self.config.batch_size as u32);
        w.u64(self.config.seed);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open("PMLP", bytes, b"PMLP", 1)?;
        let n = r.u32()? as usize;
        if !(2..=16).contains(&n) {
            return Err(r.err("bad layer count"));
        }
        let dims = (0..n).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let input_mean = r.f64s(dims[0])?;
        let input_scale = r.f64s(dims[0])?;
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            let weights = r.f64s(w[0].checked_mul(w[1]).ok_or_else(|| r.err("size overflow"))?)?;
            let bias = r.f64s(w[1])?;
            layers.push(Dense { in_dim: w[0], out_dim: w[1], weights, bias });
        }
        let learning_rate = r.f64()?;
        let epochs = r.u32()? as usize;
        let batch_size = r.u32()? as usize;
        let seed = r.u64()?;
        r.finish()?;
        let config = MlpConfig {
            hidden: dims[1..n - 1].to_vec(),
            classes: dims[n - 1],
            learning_rate,
            epochs,
            batch_size,
            seed,
        };
        Ok(Self { input_mean, input_scale, layers, config, loss_history: Vec::new() })
    }
}

impl Attacker for MlpAttacker {
    fn name(&self) -> &str {
        "nn"
    }

    fn guess(&self, latent: &[f64]) -> Result<usize> {
        self.predict(latent)
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label < classes {
        Ok(())
    } else {
        Err(invalid(format!("label {label} out of range 0..{classes}")))
    }
}

/// Minibatch SGD on softmax cross-entropy; deterministic under `config.seed`.
pub fn train_mlp(samples: &[(Vec<f64>, usize)], config: &MlpConfig) -> Result<MlpAttacker> {
    let first = samples.first().ok_or(Error::NotEnoughSamples { needed: 1, got: 0 })?;
    let input_dim = first.0.len();
    for (x, y) in samples {
        check_len(input_dim, x.len())?;
        check_label(*y, config.classes)?;
    }
    if config.batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let mut dims = vec![input_dim];
    dims.extend(&config.hidden);
    dims.push(config.classes);
    let mut net = MlpAttacker::new(&dims, config.clone())?;

    let n = samples.len() as f64;
    for j in 0..input_dim {
        let mean = samples.iter().map(|(x, _)| x[j]).sum::<f64>() / n;
        let var = samples.iter().map(|(x, _)| (x[j] - mean).powi(2)).sum::<f64>() / n;
        net.input_mean[j] = mean;
        net.input_scale[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    let standardized: Vec<(Vec<f64>, usize)> = samples.iter().map(|(x, y)| (net.standardize(x), *y)).collect();

    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..config.epochs {
        RngStream::new(config.seed, format!("mlp/epoch/{epoch}")).shuffle(&mut order);
        for batch in order.chunks(config.batch_size) {
            let mut g = Gradients::zeros_like(&net.layers);
            for &i in batch {
                let (x, y) = &standardized[i];
                net.accumulate_gradients(x, *y, &mut g);
            }
            let step = config.learning_rate / batch.len() as f64;
            for (layer, (gw, gb)) in net.layers.iter_mut().zip(g.weights.iter().zip(&g.bias)) {
                layer.weights.iter_mut().zip(gw).for_each(|(w, d)| *w -= step * d);
                layer.bias.iter_mut().zip(gb).for_each(|(b, d)| *b -= step * d);
            }
        }
        let loss = standardized.iter().map(|(x, y)| net.loss_raw(x, *y)).sum::<f64>() / n;
        net.loss_history.push(loss);
    }
    Ok(net)
}

/// Worst relative disagreement per layer between analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub per_layer: Vec<f64>,
    pub max: f64,
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Relative error `|a − n| / max(|a|, |n|, 1e-6)`; the floor keeps vanishing gradients from dominating.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares backpropagation with central finite differences on every `stride`-th parameter.
pub fn grad_check_strided(net: &MlpAttacker, x: &[f64], label: usize, stride: usize) -> Result<GradCheck> {
    let analytic = net.gradients(x, label)?;
    let xs = net.standardize(x);
    let mut probe = net.clone();
    let mut per_layer = Vec::with_capacity(net.layers.len());
    let h = GRAD_CHECK_STEP;
    let stride = stride.max(1);
    for l in 0..net.layers.len() {
        let mut worst: f64 = 0.0;
        for i in (0..net.layers[l].weights.len()).step_by(stride) {
            let orig = probe.layers[l].weights[i];
            probe.layers[l].weights[i] = orig + h;
            let up = probe.loss_raw(&xs, label);
            probe.layers[l].weights[i] = orig - h;
            let down = probe.loss_raw(&xs, label);
            probe.layers[l].weights[i] = orig;
            worst = worst.max(relative_error(analytic.weights[l][i], (up - down) / (2.0 * h)));
        }
        for i in (0..net.layers[l].bias.len()).step_by(stride) {
            let orig = probe.layers[l].bias[i];
            probe.layers[l].bias[i] = orig + h;
            let up = probe.loss_raw(&xs, label);
            probe.layers[l].bias[i] = orig - h;
            let down = probe.loss_raw(&xs, label);
            probe.layers[l].bias[i] = orig;
            worst = worst.max(relative_error(analytic.bias[l][i], (up - down) / (2.0 * h)));
        }
        per_layer.push(worst);
    }
    let max = per_layer.iter().copied().fold(0.0, f64::max);
    Ok(GradCheck { per_layer, max })
}

/// [`grad_check_strided`] over every parameter.
pub fn grad_check(net: &MlpAttacker, x: &[f64], label: usize) -> Result<GradCheck> {
    grad_check_strided(net, x, label, 1)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackReport {
    pub attacker: String,
    pub trials: usize,
    pub correct: usize,
    pub e_psr: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

pub const REPORT_CSV_HEADER: &str = "attacker,trials,correct,e_psr,ci_lo,ci_hi";

/// Wilson score interval for `correct / trials` at normal quantile `z`.
pub fn wilson_interval(correct: usize, trials: usize, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = correct as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre - half).max(0.0).min(p), (centre + half).min(1.0).max(p))
}

impl AttackReport {
    pub fn from_counts(attacker: impl Into<String>, trials: usize, correct: usize) -> Self {
        let (ci_lo, ci_hi) = wilson_interval(correct, trials, WILSON_Z);
        Self {
            attacker: attacker.into(),
            trials,
            correct,
            e_psr: if trials == 0 { 0.0 } else { correct as f64 / trials as f64 },
            ci_lo,
            ci_hi,
        }
    }

    pub fn contains(&self, p: f64) -> bool {
        self.ci_lo <= p && p <= self.ci_hi
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{:.6},{:.6},{:.6}", self.attacker, self.trials, self.correct, self.e_psr, self.ci_lo, self.ci_hi)
    }
}

pub fn reports_to_csv(reports: &[AttackReport]) -> String {
    let mut out = format!("{REPORT_CSV_HEADER}\n");
    for r in reports {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Runs every attacker over the stream; the last report is the combined maximum.
pub fn evaluate_psr(attackers: &[&dyn Attacker], stream: &[Observation]) -> Result<Vec<AttackReport>> {
    if stream.is_empty() {
        return Err(Error::NotEnoughSamples { needed: 1, got: 0 });
    }
    let mut reports = Vec::with_capacity(attackers.len() + 1);
    for a in attackers {
        let mut correct = 0;
        for obs in stream {
            correct += (a.guess(&obs.latent)? == obs.label) as usize;
        }
        reports.push(AttackReport::from_counts(a.name(), stream.len(), correct));
    }
    let combined = combine(&reports);
    reports.push(combined);
    Ok(reports)
}

/// Report of the most successful attacker, relabelled `combined`.
pub fn combine(reports: &[AttackReport]) -> AttackReport {
    let best = reports
        .iter()
        .max_by(|a, b| a.e_psr.partial_cmp(&b.e_psr).unwrap_or(std::cmp::Ordering::Equal))
        .cloned()
        .unwrap_or_else(|| AttackReport::from_counts("none", 0, 0));
    AttackReport { attacker: "combined".into(), ..best }
}

//! Block DCT frequency decomposition of textures, energy ranking of the
//! resulting components, partition planning and the merger.
//!
//! A texture of `H × W × 3` split into `B × B` blocks yields `B²` component
//! planes. Plane `k = u·B + v` collects the `(u, v)` coefficient of every block
//! and has shape `(H/B) × (W/B) × 3`, stored row-major with channels interleaved.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{check_len, invalid, Error, Result};
use crate::scalar::Scalar;

pub const CHANNELS: usize = 3;
pub const SUPPORTED_BLOCKS: [usize; 3] = [2, 4, 8];
pub const DEFAULT_BLOCK: usize = 4;

const PTEX_MAGIC: &[u8; 4] = b"PTEX";
const PTEX_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Texture<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Texture<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        check_len(height * width * CHANNELS, data.len())?;
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self { height, width, data: vec![value; height * width * CHANNELS] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, ch: usize) -> T {
        self.data[(row * self.width + col) * CHANNELS + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: T) {
        self.data[(row * self.width + col) * CHANNELS + ch] = v;
    }

    pub fn cast<U: Scalar>(&self) -> Texture<U> {
        Texture {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    /// Mean squared error over all elements.
    pub fn mse(&self, other: &Self) -> Result<f64> {
        check_len(self.data.len(), other.data.len())?;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum();
        Ok(sum / self.data.len().max(1) as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        check_len(self.data.len(), other.data.len())?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// `PTEX` container: magic, version, H, W, C as u32 LE, then real32 LE samples.
    pub fn to_ptex(&self) -> Vec<u8> {
        let mut w = Writer::new(PTEX_MAGIC, PTEX_VERSION);
        w.u32(self.height as u32);
        w.u32(self.width as u32);
        w.u32(CHANNELS as u32);
        w.f32s(self.data.iter().map(|x| x.as_f64() as f32));
        w.buf
    }

    pub fn from_ptex(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open("PTEX", bytes, PTEX_MAGIC, PTEX_VERSION)?;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let c = r.u32()? as usize;
        if c != CHANNELS {
            return Err(r.err(format!("expected {CHANNELS} channels, got {c}")));
        }
        let n = h.checked_mul(w).and_then(|x| x.checked_mul(c)).ok_or_else(|| r.err("size overflow"))?;
        let data = r.f32s(n)?.into_iter().map(|x| T::of(x as f64)).collect();
        r.finish()?;
        Self::new(h, w, data)
    }
}

fn check_block(block: usize) -> Result<()> {
    if SUPPORTED_BLOCKS.contains(&block) {
        Ok(())
    } else {
        Err(invalid(format!("block size must be one of {SUPPORTED_BLOCKS:?}, got {block}")))
    }
}

fn check_divisible(height: usize, width: usize, block: usize) -> Result<()> {
    if height == 0 || width == 0 || !height.is_multiple_of(block) || !width.is_multiple_of(block) {
        return Err(invalid(format!("texture {height}x{width} is not divisible into {block}x{block} blocks")));
    }
    Ok(())
}

/// Orthonormal DCT-II matrix `C[u][x] = α(u)·cos(π(2x+1)u / 2B)`.
pub fn dct_matrix<T: Scalar>(block: usize) -> Vec<T> {
    let b = block as f64;
    let mut c = Vec::with_capacity(block * block);
    for u in 0..block {
        let alpha = if u == 0 { (1.0 / b).sqrt() } else { (2.0 / b).sqrt() };
        for x in 0..block {
            let angle = std::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / (2.0 * b);
            c.push(T::of(alpha * angle.cos()));
        }
    }
    c
}

/// Component ids in zig-zag (increasing frequency) order, for display.
pub fn zigzag_order(block: usize) -> Vec<usize> {
    let mut ids: Vec<(usize, usize)> = (0..block).flat_map(|u| (0..block).map(move |v| (u, v))).collect();
    ids.sort_by_key(|&(u, v)| {
        let s = u + v;
        (s, if s % 2 == 0 { v } else { u })
    });
    ids.into_iter().map(|(u, v)| u * block + v).collect()
}

/// The `B²` frequency planes of one texture.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentSet<T> {
    block: usize,
    height: usize,
    width: usize,
    planes: Vec<Vec<T>>,
}

impl<T: Scalar> ComponentSet<T> {
    pub fn new(block: usize, height: usize, width: usize, planes: Vec<Vec<T>>) -> Result<Self> {
        check_block(block)?;
        check_divisible(height, width, block)?;
        check_len(block * block, planes.len())?;
        let plane_len = plane_len(height, width, block);
        for p in &planes {
            check_len(plane_len, p.len())?;
        }
        Ok(Self { block, height, width, planes })
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        plane_len(self.height, self.width, self.block)
    }

    pub fn plane(&self, k: usize) -> &[T] {
        &self.planes[k]
    }

    pub fn planes(&self) -> &[Vec<T>] {
        &self.planes
    }

    pub fn plane_mut(&mut self, k: usize) -> &mut [T] {
        &mut self.planes[k]
    }

    /// Copies out the planes listed in `ids` (in the given order).
    pub fn select(&self, ids: &[usize]) -> Result<PartialComponents<T>> {
        let n = self.block * self.block;
        if let Some(&bad) = ids.iter().find(|&&k| k >= n) {
            return Err(invalid(format!("component id {bad} out of range 0..{n}")));
        }
        Ok(PartialComponents {
            block: self.block,
            height: self.height,
            width: self.width,
            ids: ids.to_vec(),
            planes: ids.iter().map(|&k| self.planes[k].clone()).collect(),
        })
    }

    pub fn energy(&self) -> f64 {
        self.planes.iter().flatten().map(|x| x.as_f64().powi(2)).sum()
    }
}

pub fn plane_len(height: usize, width: usize, block: usize) -> usize {
    (height / block) * (width / block) * CHANNELS
}

/// A subset of component planes, as carried by one path.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialComponents<T> {
    block: usize,
    height: usize,
    width: usize,
    ids: Vec<usize>,
    planes: Vec<Vec<T>>,
}

impl<T: Scalar> PartialComponents<T> {
    /// Rebuilds planes from a flattened stack (planes concatenated in `ids` order).
    pub fn from_flat(block: usize, height: usize, width: usize, ids: &[usize], flat: &[T]) -> Result<Self> {
        check_block(block)?;
        check_divisible(height, width, block)?;
        let len = plane_len(height, width, block);
        check_len(len * ids.len(), flat.len())?;
        Ok(Self {
            block,
            height,
            width,
            ids: ids.to_vec(),
            planes: flat.chunks(len.max(1)).take(ids.len()).map(<[T]>::to_vec).collect(),
        })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn planes(&self) -> &[Vec<T>] {
        &self.planes
    }

    pub fn plane_mut(&mut self, idx: usize) -> &mut [T] {
        &mut self.planes[idx]
    }

    pub fn flatten(&self) -> Vec<T> {
        self.planes.iter().flatten().copied().collect()
    }
}

/// Orthonormal block DCT-II of `tex − mean`.
pub fn block_dct<T: Scalar>(tex: &Texture<T>, mean: &Texture<T>, block: usize) -> Result<ComponentSet<T>> {
    check_block(block)?;
    if tex.dims() != mean.dims() {
        return Err(invalid(format!("texture {:?} and mean {:?} differ in size", tex.dims(), mean.dims())));
    }
    let (h, w) = tex.dims();
    check_divisible(h, w, block)?;
    let c = dct_matrix::<T>(block);
    let (bh, bw) = (h / block, w / block);
    let mut planes = vec![vec![T::zero(); bh * bw * CHANNELS]; block * block];
    let mut x = vec![T::zero(); block * block];
    let mut tmp = vec![T::zero(); block * block];
    for by in 0..bh {
        for bx in 0..bw {
            for ch in 0..CHANNELS {
                for i in 0..block {
                    for j in 0..block {
                        let (r, col) = (by * block + i, bx * block + j);
                        x[i * block + j] = tex.at(r, col, ch) - mean.at(r, col, ch);
                    }
                }
                // tmp = C·X, coef = tmp·Cᵀ
                for u in 0..block {
                    for j in 0..block {
                        let mut s = T::zero();
                        for i in 0..block {
                            s = s + c[u * block + i] * x[i * block + j];
                        }
                        tmp[u * block + j] = s;
                    }
                }
                let pos = (by * bw + bx) * CHANNELS + ch;
                for u in 0..block {
                    for v in 0..block {
                        let mut s = T::zero();
                        for j in 0..block {
                            s = s + tmp[u * block + j] * c[v * block + j];
                        }
                        planes[u * block + v][pos] = s;
                    }
                }
            }
        }
    }
    Ok(ComponentSet { block, height: h, width: w, planes })
}

/// Inverse of [`block_dct`]: `mean + Cᵀ·coef·C` per block.
pub fn block_idct<T: Scalar>(comps: &ComponentSet<T>, mean: &Texture<T>) -> Result<Texture<T>> {
    let block = comps.block;
    check_block(block)?;
    if mean.dims() != comps.dims() {
        return Err(invalid(format!("mean {:?} does not match components {:?}", mean.dims(), comps.dims())));
    }
    check_len(block * block, comps.planes.len())?;
    for p in &comps.planes {
        check_len(comps.plane_len(), p.len())?;
    }
    let (h, w) = comps.dims();
    let c = dct_matrix::<T>(block);
    let (bh, bw) = (h / block, w / block);
    let mut out = mean.clone();
    let mut coef = vec![T::zero(); block * block];
    let mut tmp = vec![T::zero(); block * block];
    for by in 0..bh {
        for bx in 0..bw {
            let pos_base = (by * bw + bx) * CHANNELS;
            for ch in 0..CHANNELS {
                for k in 0..block * block {
                    coef[k] = comps.planes[k][pos_base + ch];
                }
                // tmp = Cᵀ·coef, X = tmp·C
                for i in 0..block {
                    for v in 0..block {
                        let mut s = T::zero();
                        for u in 0..block {
                            s = s + c[u * block + i] * coef[u * block + v];
                        }
                        tmp[i * block + v] = s;
                    }
                }
                for i in 0..block {
                    for j in 0..block {
                        let mut s = T::zero();
                        for v in 0..block {
                            s = s + tmp[i * block + v] * c[v * block + j];
                        }
                        let (r, col) = (by * block + i, bx * block + j);
                        out.set(r, col, ch, out.at(r, col, ch) + s);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Statistic used to rank components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankStatistic {
    /// Mean squared distance of each plane from the corpus-mean plane.
    #[default]
    Variance,
    /// Mean squared L2 norm of each plane.
    MeanSquare,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyRanking {
    pub block: usize,
    pub mode: RankStatistic,
    pub statistic: Vec<f64>,
    /// Component ids sorted ascending by statistic; ties by lower id.
    pub order: Vec<usize>,
    pub corpus_size: usize,
}

impl EnergyRanking {
    /// Fraction of the summed statistic carried by each component.
    pub fn shares(&self) -> Vec<f64> {
        let total: f64 = self.statistic.iter().sum();
        self.statistic.iter().map(|s| if total > 0.0 { s / total } else { 0.0 }).collect()
    }

    /// The component with the largest statistic.
    pub fn top(&self) -> usize {
        *self.order.last().expect("ranking is never empty")
    }
}

pub fn energy_rank<T: Scalar>(corpus: &[ComponentSet<T>], mode: RankStatistic) -> Result<EnergyRanking> {
    if corpus.len() < 2 {
        return Err(Error::NotEnoughSamples { needed: 2, got: corpus.len() });
    }
    let first = &corpus[0];
    for cs in corpus {
        if cs.block != first.block || cs.dims() != first.dims() {
            return Err(invalid("corpus component sets have heterogeneous shapes"));
        }
    }
    let k_count = first.block * first.block;
    let plane_len = first.plane_len();
    let n = corpus.len() as f64;
    let mut statistic = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let mut centre = vec![0.0f64; plane_len];
        if mode == RankStatistic::Variance {
            for cs in corpus {
                for (m, &x) in centre.iter_mut().zip(&cs.planes[k]) {
                    *m += x.as_f64();
                }
            }
            centre.iter_mut().for_each(|m| *m /= n);
        }
        let total: f64 = corpus
            .iter()
            .map(|cs| cs.planes[k].iter().zip(&centre).map(|(&x, &m)| (x.as_f64() - m).powi(2)).sum::<f64>())
            .sum();
        statistic.push(total / n);
    }
    let mut order: Vec<usize> = (0..k_count).collect();
    order.sort_by(|&a, &b| statistic[a].partial_cmp(&statistic[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    Ok(EnergyRanking { block: first.block, mode, statistic, order, corpus_size: corpus.len() })
}

/// Assignment of component ids to the local and offloaded paths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub block: usize,
    pub offloaded_ids: Vec<usize>,
    pub local_ids: Vec<usize>,
    pub keep_base_local: bool,
}

impl PartitionPlan {
    /// Builds a plan from an explicit offloaded set; local ids are the complement.
    pub fn from_offloaded(block: usize, offloaded: &[usize], keep_base_local: bool) -> Result<Self> {
        check_block(block)?;
        let n = block * block;
        let mut offloaded_ids = offloaded.to_vec();
        offloaded_ids.sort_unstable();
        offloaded_ids.dedup();
        if offloaded_ids.len() != offloaded.len() {
            return Err(invalid("duplicate offloaded component id"));
        }
        if let Some(&bad) = offloaded_ids.iter().find(|&&k| k >= n) {
            return Err(invalid(format!("component id {bad} out of range 0..{n}")));
        }
        if keep_base_local && offloaded_ids.contains(&0) {
            return Err(invalid("keep_base_local forbids offloading component 0"));
        }
        let m = offloaded_ids.len();
        if m != 0 && m != n && !(2..=n - 2).contains(&m) {
            return Err(invalid(format!("offloaded count {m} must be in 2..={} when both paths are active", n - 2)));
        }
        let local_ids = (0..n).filter(|k| !offloaded_ids.contains(k)).collect();
        Ok(Self { block, offloaded_ids, local_ids, keep_base_local })
    }

    /// Every component offloaded, nothing local.
    pub fn full_offload(block: usize) -> Result<Self> {
        Self::from_offloaded(block, &(0..block * block).collect::<Vec<_>>(), false)
    }

    pub fn offloaded_count(&self) -> usize {
        self.offloaded_ids.len()
    }

    pub fn component_count(&self) -> usize {
        self.block * self.block
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: Self = serde_json::from_str(s)
            .map_err(|e| Error::Format { format: "plan", reason: e.to_string() })?;
        let plan = Self::from_offloaded(raw.block, &raw.offloaded_ids, raw.keep_base_local)?;
        if plan.local_ids != raw.local_ids {
            return Err(Error::Format { format: "plan", reason: "local_ids is not the complement".into() });
        }
        Ok(plan)
    }
}

/// Offloads the `m` lowest-statistic components (never component 0 under `keep_base_local`).
pub fn make_plan(ranking: &EnergyRanking, m: usize, keep_base_local: bool) -> Result<PartitionPlan> {
    let n = ranking.block * ranking.block;
    if !(2..=n.saturating_sub(2)).contains(&m) {
        return Err(invalid(format!("offloaded count {m} must be in 2..={}", n.saturating_sub(2))));
    }
    let offloaded: Vec<usize> =
        ranking.order.iter().copied().filter(|&k| !(keep_base_local && k == 0)).take(m).collect();
    if offloaded.len() < m {
        return Err(invalid("not enough eligible components for the requested plan"));
    }
    PartitionPlan::from_offloaded(ranking.block, &offloaded, keep_base_local)
}

/// Recombines the two paths into a full component set.
pub fn merge<T: Scalar>(
    local: &PartialComponents<T>,
    offloaded: &PartialComponents<T>,
    plan: &PartitionPlan,
) -> Result<ComponentSet<T>> {
    if local.ids != plan.local_ids {
        return Err(invalid(format!("local path covers {:?}, plan expects {:?}", local.ids, plan.local_ids)));
    }
    if offloaded.ids != plan.offloaded_ids {
        return Err(invalid(format!(
            "offloaded path covers {:?}, plan expects {:?}",
            offloaded.ids, plan.offloaded_ids
        )));
    }
    if local.block != plan.block
        || offloaded.block != plan.block
        || (local.height, local.width) != (offloaded.height, offloaded.width)
    {
        return Err(invalid("path geometries disagree"));
    }
    let n = plan.component_count();
    let mut planes: Vec<Option<Vec<T>>> = vec![None; n];
    for (part, _) in [(local, "local"), (offloaded, "offloaded")] {
        for (&k, p) in part.ids.iter().zip(&part.planes) {
            if planes[k].is_some() {
                return Err(invalid(format!("component {k} supplied twice")));
            }
            planes[k] = Some(p.clone());
        }
    }
    let planes = planes
        .into_iter()
        .enumerate()
        .map(|(k, p)| p.ok_or_else(|| invalid(format!("component {k} missing"))))
        .collect::<Result<Vec<_>>>()?;
    ComponentSet::new(plan.block, local.height, local.width, planes)
}

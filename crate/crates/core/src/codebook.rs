//! Frozen multi-level residual vector quantizer.
//!
//! Level 1 quantizes each patch feature; every later level quantizes what the
//! previous levels left over. The dequantized feature is the sum of the chosen
//! codewords. Pruning statistics only ever look at level 1.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use thiserror::Error;

use crate::rng::substream;
use crate::tensor::{Graph, Result as TensorResult, Tensor, TensorError, Var};

pub const CODEBOOK_MAGIC: &[u8; 8] = b"CRFTCB01";
pub const MAX_LEVELS: usize = 4;
const MIN_SEPARATION: f64 = 1e-9;
const KMEANS_MAX_ITERS: usize = 50;
const KMEANS_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CodebookError {
    #[error("level {level} out of range (codebook has {levels})")]
    LevelOutOfRange { level: usize, levels: usize },
    #[error("dimension mismatch: features have d={got}, codebook has d={expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid codebook: {0}")]
    Invalid(String),
    #[error("empty fitting corpus")]
    EmptyCorpus,
    #[error("level {level}: K={entries} exceeds the {distinct} distinct vectors available")]
    TooFewDistinct { level: usize, entries: usize, distinct: usize },
    #[error("codebook format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `levels × entries × dim` binary32 codewords, level-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    levels: usize,
    entries: usize,
    dim: usize,
    codewords: Vec<f32>,
    frozen: bool,
}

/// Continuous patch features in raster order (`n = row * width + col`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    /// Pre-quantization [CLS] vector, when the producer has one.
    pub cls: Option<Vec<f64>>,
}

impl FeatureGrid {
    pub fn new(width: usize, height: usize, dim: usize, data: Vec<f64>) -> Result<Self, CodebookError> {
        if data.len() != width * height * dim {
            return Err(CodebookError::Invalid(format!(
                "grid {width}x{height}x{dim} needs {} values, got {}",
                width * height * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CodebookError::Invalid("non-finite feature".into()));
        }
        Ok(Self { width, height, dim, data, cls: None })
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch(&self, n: usize) -> &[f64] {
        &self.data[n * self.dim..(n + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), self.dim, self.data.clone()).expect("grid shape is consistent")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedGrid {
    pub width: usize,
    pub height: usize,
    pub levels: usize,
    pub dim: usize,
    /// `N × levels`, patch-major.
    pub indices: Vec<u32>,
    /// `N × dim` sums of the chosen codewords.
    pub summed: Vec<f64>,
    /// Squared distance of each patch to its level-1 codeword.
    pub residual_energy: Vec<f64>,
}

impl QuantizedGrid {
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn first_level(&self, n: usize) -> usize {
        self.indices[n * self.levels] as usize
    }

    pub fn first_level_ids(&self) -> Vec<usize> {
        (0..self.len()).map(|n| self.first_level(n)).collect()
    }

    pub fn index(&self, n: usize, level: usize) -> usize {
        self.indices[n * self.levels + level] as usize
    }

    pub fn summed_patch(&self, n: usize) -> &[f64] {
        &self.summed[n * self.dim..(n + 1) * self.dim]
    }

    pub fn summed_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), self.dim, self.summed.clone()).expect("grid shape is consistent")
    }

    /// Rows of the summed codewords at the given raster positions.
    pub fn summed_rows(&self, positions: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(positions.len() * self.dim);
        for &p in positions {
            data.extend_from_slice(self.summed_patch(p));
        }
        Tensor::matrix(positions.len(), self.dim, data).expect("rows have codebook dim")
    }
}

fn sq_dist_f32(v: &[f64], c: &[f32]) -> f64 {
    v.iter().zip(c).map(|(a, b)| {
        let d = a - *b as f64;
        d * d
    }).sum()
}

impl Codebook {
    pub fn new(levels: usize, entries: usize, dim: usize, codewords: Vec<f32>) -> Result<Self, CodebookError> {
        if levels == 0 || levels > MAX_LEVELS {
            return Err(CodebookError::Invalid(format!("levels must be in 1..={MAX_LEVELS}, got {levels}")));
        }
        if entries == 0 || dim == 0 {
            return Err(CodebookError::Invalid("entries and dim must be positive".into()));
        }
        if codewords.len() != levels * entries * dim {
            return Err(CodebookError::Invalid(format!(
                "expected {} codeword values, got {}",
                levels * entries * dim,
                codewords.len()
            )));
        }
        if codewords.iter().any(|v| !v.is_finite()) {
            return Err(CodebookError::Invalid("non-finite codeword".into()));
        }
        let cb = Self { levels, entries, dim, codewords, frozen: true };
        for l in 0..levels {
            for a in 0..entries {
                for b in (a + 1)..entries {
                    let ca: Vec<f64> = cb.codeword(l, a).iter().map(|&v| v as f64).collect();
                    if sq_dist_f32(&ca, cb.codeword(l, b)).sqrt() <= MIN_SEPARATION {
                        return Err(CodebookError::Invalid(format!(
                            "level {l}: entries {a} and {b} are closer than {MIN_SEPARATION}"
                        )));
                    }
                }
            }
        }
        Ok(cb)
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn entries(&self) -> usize {
        self.entries
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn codewords(&self) -> &[f32] {
        &self.codewords
    }

    pub fn codeword(&self, level: usize, k: usize) -> &[f32] {
        let start = (level * self.entries + k) * self.dim;
        &self.codewords[start..start + self.dim]
    }

    /// Exhaustive nearest codeword at `level`. Ties go to the smallest index.
    pub fn nearest_entry(&self, v: &[f64], level: usize) -> Result<(usize, f64), CodebookError> {
        if level >= self.levels {
            return Err(CodebookError::LevelOutOfRange { level, levels: self.levels });
        }
        if v.len() != self.dim {
            return Err(CodebookError::DimMismatch { expected: self.dim, got: v.len() });
        }
        Ok(self.nearest_unchecked(v, level))
    }

    fn nearest_unchecked(&self, v: &[f64], level: usize) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for k in 0..self.entries {
            let d = sq_dist_f32(v, self.codeword(level, k));
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    /// Residual encoding of every patch across all levels.
    pub fn rq_encode(&self, z: &FeatureGrid) -> Result<QuantizedGrid, CodebookError> {
        if z.dim != self.dim {
            return Err(CodebookError::DimMismatch { expected: self.dim, got: z.dim });
        }
        let n = z.len();
        let mut indices = Vec::with_capacity(n * self.levels);
        let mut summed = vec![0.0; n * self.dim];
        let mut residual_energy = Vec::with_capacity(n);
        let mut residual = vec![0.0; self.dim];
        for p in 0..n {
            residual.copy_from_slice(z.patch(p));
            for level in 0..self.levels {
                let (k, d) = self.nearest_unchecked(&residual, level);
                if level == 0 {
                    residual_energy.push(d);
                }
                indices.push(k as u32);
                for (r, c) in residual.iter_mut().zip(self.codeword(level, k)) {
                    *r -= *c as f64;
                }
            }
            self.sum_codewords(&indices[p * self.levels..(p + 1) * self.levels], &mut summed[p * self.dim..(p + 1) * self.dim]);
        }
        Ok(QuantizedGrid {
            width: z.width,
            height: z.height,
            levels: self.levels,
            dim: self.dim,
            indices,
            summed,
            residual_energy,
        })
    }

    fn sum_codewords(&self, idx: &[u32], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (level, &k) in idx.iter().enumerate() {
            for (o, c) in out.iter_mut().zip(self.codeword(level, k as usize)) {
                *o += *c as f64;
            }
        }
    }

    /// Recompute the summed codewords from stored indices.
    pub fn dequantize(&self, indices: &[u32]) -> Result<Vec<f64>, CodebookError> {
        if indices.len() % self.levels != 0 {
            return Err(CodebookError::Invalid("index count is not a multiple of levels".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&k| k as usize >= self.entries) {
            return Err(CodebookError::Invalid(format!("index {bad} >= K={}", self.entries)));
        }
        let n = indices.len() / self.levels;
        let mut out = vec![0.0; n * self.dim];
        for p in 0..n {
            self.sum_codewords(&indices[p * self.levels..(p + 1) * self.levels], &mut out[p * self.dim..(p + 1) * self.dim]);
        }
        Ok(out)
    }

    fn payload(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(12 + self.codewords.len() * 4);
        buf.extend_from_slice(&(self.levels as u32).to_le_bytes());
        buf.extend_from_slice(&(self.entries as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.codewords {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    /// CRC-32 of the serialized payload; identifies the codebook everywhere.
    pub fn crc(&self) -> u32 {
        crc32fast::hash(&self.payload())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = self.payload();
        let mut out = Vec::with_capacity(8 + payload.len() + 4);
        out.extend_from_slice(CODEBOOK_MAGIC);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodebookError> {
        if bytes.len() < 8 {
            return Err(CodebookError::Format("truncated before magic".into()));
        }
        if &bytes[..8] != CODEBOOK_MAGIC {
            return Err(CodebookError::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..8]),
                std::str::from_utf8(CODEBOOK_MAGIC).unwrap()
            )));
        }
        if bytes.len() < 8 + 12 + 4 {
            return Err(CodebookError::Format("truncated header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (levels, entries, dim) = (u32_at(8), u32_at(12), u32_at(16));
        let count = levels
            .checked_mul(entries)
            .and_then(|v| v.checked_mul(dim))
            .ok_or_else(|| CodebookError::Format("header sizes overflow".into()))?;
        let expected = 8 + 12 + count * 4 + 4;
        if bytes.len() != expected {
            return Err(CodebookError::Format(format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let payload = &bytes[8..expected - 4];
        let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
        let actual = crc32fast::hash(payload);
        if stored != actual {
            return Err(CodebookError::Format(format!("crc mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        let codewords = payload[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(levels, entries, dim, codewords).map_err(|e| CodebookError::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), CodebookError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CodebookError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Keep a seeded uniform subset of `round(fraction * K)` entries at every
    /// level, in their original order.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<Self, CodebookError> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(CodebookError::Invalid(format!("fraction {fraction} outside (0, 1]")));
        }
        let keep = (fraction * self.entries as f64).round() as usize;
        if keep < 2 {
            return Err(CodebookError::Invalid(format!("fraction {fraction} leaves K={keep} < 2")));
        }
        if keep == self.entries {
            return Ok(self.clone());
        }
        let mut rng = substream(seed, "codebook-subsample");
        let mut codewords = Vec::with_capacity(self.levels * keep * self.dim);
        for level in 0..self.levels {
            let mut chosen = sample(&mut rng, self.entries, keep).into_vec();
            chosen.sort_unstable();
            for k in chosen {
                codewords.extend_from_slice(self.codeword(level, k));
            }
        }
        Self::new(self.levels, keep, self.dim, codewords)
    }
}

/// Quantize `z` (rows = patches) with a straight-through gradient: the forward
/// value is the summed codewords, the backward pass is the identity into `z`.
pub fn ste_quantize(
    g: &mut Graph,
    z: Var,
    width: usize,
    height: usize,
    cb: &Codebook,
) -> Result<(Var, QuantizedGrid), crate::Error> {
    let grid = FeatureGrid::new(width, height, g.value(z).cols(), g.value(z).data().to_vec())?;
    let q = cb.rq_encode(&grid)?;
    let out = g.straight_through(z, q.summed_tensor())?;
    Ok((out, q))
}

/// Mean over patches and dims of `(z - sg[q(z)])^2` against precomputed codes.
pub fn commitment_loss_with(g: &mut Graph, z: Var, q: &QuantizedGrid) -> TensorResult<Var> {
    if g.value(z).numel() != q.summed.len() {
        return Err(TensorError::Dim {
            op: "commitment_loss",
            detail: format!("{:?} vs {} quantized values", g.value(z).shape(), q.summed.len()),
        });
    }
    let target = g.constant(q.summed_tensor().reshape(g.value(z).shape().to_vec())?)?;
    let target = g.stop_gradient(target)?;
    let diff = g.sub(z, target)?;
    let sq = g.mul(diff, diff)?;
    g.mean(sq)
}

pub fn commitment_loss(g: &mut Graph, z: Var, width: usize, height: usize, cb: &Codebook) -> Result<Var, crate::Error> {
    let grid = FeatureGrid::new(width, height, g.value(z).cols(), g.value(z).data().to_vec())?;
    let q = cb.rq_encode(&grid)?;
    Ok(commitment_loss_with(g, z, &q)?)
}

fn distinct_count(points: &[f64], dim: usize) -> usize {
    let mut seen = HashSet::new();
    for p in points.chunks_exact(dim) {
        let key: Vec<u64> = p.iter().map(|v| if *v == 0.0 { 0 } else { v.to_bits() }).collect();
        seen.insert(key);
    }
    seen.len()
}

fn nearest_in(centroids: &[f64], dim: usize, v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.chunks_exact(dim).enumerate() {
        let d: f64 = v.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Seeded k-means++ followed by Lloyd iterations.
fn kmeans(points: &[f64], dim: usize, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(point(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| nearest_in(&centroids, dim, point(i)).1).collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    chosen = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            chosen.expect("positive total weight")
        } else {
            unreachable!("fewer distinct points than centroids")
        };
        let c = point(pick).to_vec();
        centroids.extend_from_slice(&c);
        for i in 0..n {
            let d: f64 = point(i).iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let mut assign = vec![0usize; n];
    for _ in 0..KMEANS_MAX_ITERS {
        for (i, a) in assign.iter_mut().enumerate() {
            *a = nearest_in(&centroids, dim, point(i)).0;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(point(i)) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let mut d = 0.0;
            for j in 0..dim {
                let nv = sums[c * dim + j] / counts[c] as f64;
                d += (nv - centroids[c * dim + j]).powi(2);
                centroids[c * dim + j] = nv;
            }
            shift = shift.max(d.sqrt());
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    centroids
}

/// Fit every level by k-means on the residuals left by the levels before it.
pub fn fit_codebook(corpus: &[FeatureGrid], levels: usize, entries: usize, seed: u64) -> Result<Codebook, CodebookError> {
    if corpus.is_empty() || corpus.iter().all(|g| g.is_empty()) {
        return Err(CodebookError::EmptyCorpus);
    }
    if levels == 0 || levels > MAX_LEVELS {
        return Err(CodebookError::Invalid(format!("levels must be in 1..={MAX_LEVELS}, got {levels}")));
    }
    let dim = corpus[0].dim;
    if let Some(g) = corpus.iter().find(|g| g.dim != dim) {
        return Err(CodebookError::DimMismatch { expected: dim, got: g.dim });
    }
    let mut residuals: Vec<f64> = corpus.iter().flat_map(|g| g.data.iter().copied()).collect();
    let mut codewords = Vec::with_capacity(levels * entries * dim);
    for level in 0..levels {
        let distinct = distinct_count(&residuals, dim);
        if entries > distinct {
            return Err(CodebookError::TooFewDistinct { level, entries, distinct });
        }
        let mut rng = substream(seed, &format!("kmeans-level-{level}"));
        let centroids: Vec<f32> = kmeans(&residuals, dim, entries, &mut rng).iter().map(|&v| v as f32).collect();
        let as_f64: Vec<f64> = centroids.iter().map(|&v| v as f64).collect();
        for r in residuals.chunks_exact_mut(dim) {
            let (k, _) = nearest_in(&as_f64, dim, r);
            for (x, c) in r.iter_mut().zip(&as_f64[k * dim..(k + 1) * dim]) {
                *x -= c;
            }
        }
        codewords.extend(centroids);
    }
    Codebook::new(levels, entries, dim, codewords)
}

/// Mean L2 norm of the residual left after each level, over a corpus.
/// Entry 0 is the mean input norm.
pub fn residual_norm_profile(cb: &Codebook, corpus: &[FeatureGrid]) -> Result<Vec<f64>, CodebookError> {
    let mut sums = vec![0.0; cb.levels() + 1];
    let mut count = 0usize;
    for grid in corpus {
        if grid.dim != cb.dim() {
            return Err(CodebookError::DimMismatch { expected: cb.dim(), got: grid.dim });
        }
        for p in 0..grid.len() {
            let mut r = grid.patch(p).to_vec();
            sums[0] += r.iter().map(|v| v * v).sum::<f64>().sqrt();
            for level in 0..cb.levels() {
                let (k, _) = cb.nearest_unchecked(&r, level);
                for (x, c) in r.iter_mut().zip(cb.codeword(level, k)) {
                    *x -= *c as f64;
                }
                sums[level + 1] += r.iter().map(|v| v * v).sum::<f64>().sqrt();
            }
            count += 1;
        }
    }
    Ok(sums.into_iter().map(|s| s / count.max(1) as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn toy_1d() -> Codebook {
        Codebook::new(2, 2, 1, vec![-1.0, 1.0, -0.25, 0.25]).unwrap()
    }

    fn grid1(values: &[f64]) -> FeatureGrid {
        FeatureGrid::new(values.len(), 1, 1, values.to_vec()).unwrap()
    }

    #[test]
    fn codeword_maps_to_itself() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let cw: Vec<f32> = (0..16 * 4).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let cb = Codebook::new(1, 16, 4, cw).unwrap();
        let v: Vec<f64> = cb.codeword(0, 7).iter().map(|&x| x as f64).collect();
        assert_eq!(cb.nearest_entry(&v, 0).unwrap(), (7, 0.0));
    }

    #[test]
    fn ties_break_to_smallest_index() {
        let cb = Codebook::new(1, 2, 1, vec![-1.0, 1.0]).unwrap();
        assert_eq!(cb.nearest_entry(&[0.0], 0).unwrap().0, 0);
    }

    #[test]
    fn level_out_of_range() {
        let cb = toy_1d();
        assert!(matches!(cb.nearest_entry(&[0.0], 2), Err(CodebookError::LevelOutOfRange { .. })));
    }

    #[test]
    fn two_stage_hand_example() {
        // 0.8 -> +1 (residual -0.2) -> -0.25, so indices (1, 0) and sum 0.75.
        let cb = toy_1d();
        let q = cb.rq_encode(&grid1(&[0.8])).unwrap();
        // exhaustive oracle over both levels, greedy per level
        let mut best1 = (0, f64::INFINITY);
        for k in 0..2 {
            let d = (0.8 - cb.codeword(0, k)[0] as f64).powi(2);
            if d < best1.1 {
                best1 = (k, d);
            }
        }
        let r1 = 0.8 - cb.codeword(0, best1.0)[0] as f64;
        let mut best2 = (0, f64::INFINITY);
        for k in 0..2 {
            let d = (r1 - cb.codeword(1, k)[0] as f64).powi(2);
            if d < best2.1 {
                best2 = (k, d);
            }
        }
        assert_eq!((q.index(0, 0), q.index(0, 1)), (best1.0, best2.0));
        assert_eq!((q.index(0, 0), q.index(0, 1)), (1, 0));
        assert!((q.summed[0] - 0.75).abs() < 1e-12);
        assert!((q.residual_energy[0] - 0.04).abs() < 1e-12);
    }

    #[test]
    fn exact_representability_leaves_no_residual() {
        let cb = toy_1d();
        let q = cb.rq_encode(&grid1(&[1.25, -0.75])).unwrap();
        assert_eq!(q.summed, vec![1.25, -0.75]);
    }

    #[test]
    fn single_level_equals_nearest_entry() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let cw: Vec<f32> = (0..8 * 3).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let cb = Codebook::new(1, 8, 3, cw).unwrap();
        let data: Vec<f64> = (0..4 * 3).map(|_| rng.random_range(-1.5..1.5)).collect();
        let grid = FeatureGrid::new(2, 2, 3, data).unwrap();
        let q = cb.rq_encode(&grid).unwrap();
        for p in 0..4 {
            let (k, d) = cb.nearest_entry(grid.patch(p), 0).unwrap();
            assert_eq!(q.first_level(p), k);
            assert_eq!(q.residual_energy[p], d);
            let c: Vec<f64> = cb.codeword(0, k).iter().map(|&v| v as f64).collect();
            assert_eq!(q.summed_patch(p), &c[..]);
        }
    }

    #[test]
    fn dim_mismatch_rejected() {
        let cb = toy_1d();
        let grid = FeatureGrid::new(1, 1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(cb.rq_encode(&grid), Err(CodebookError::DimMismatch { .. })));
    }

    #[test]
    fn file_round_trip_and_errors() {
        let cb = toy_1d();
        let bytes = cb.to_bytes();
        assert_eq!(Codebook::from_bytes(&bytes).unwrap(), cb);
        let err = Codebook::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, CodebookError::Format(_)));
        let mut bad = bytes.clone();
        bad[..8].copy_from_slice(b"NOTACODE");
        let msg = Codebook::from_bytes(&bad).unwrap_err().to_string();
        assert!(msg.contains("magic") && msg.contains("NOTACODE"), "{msg}");
        let mut flipped = bytes;
        flipped[22] ^= 0x40;
        assert!(Codebook::from_bytes(&flipped).is_err());
    }

    #[test]
    fn fit_recovers_exact_clusters() {
        let protos = [[0.0, 1.0], [3.0, -1.0], [-2.0, 2.0]];
        let mut data = Vec::new();
        for rep in 0..5 {
            for p in protos.iter().cycle().skip(rep).take(3) {
                data.extend_from_slice(p);
            }
        }
        let grid = FeatureGrid::new(15, 1, 2, data).unwrap();
        let cb = fit_codebook(&[grid], 1, 3, 11).unwrap();
        for p in protos {
            let found = (0..3).any(|k| {
                let c = cb.codeword(0, k);
                ((c[0] as f64 - p[0]).powi(2) + (c[1] as f64 - p[1]).powi(2)).sqrt() < 1e-9
            });
            assert!(found, "prototype {p:?} missing");
        }
        let again = fit_codebook(&[FeatureGrid::new(3, 1, 2, protos.concat()).unwrap()], 1, 3, 11).unwrap();
        assert_eq!(again.entries(), 3);
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(fit_codebook(&[], 1, 2, 0), Err(CodebookError::EmptyCorpus)));
        let grid = FeatureGrid::new(2, 1, 1, vec![1.0, 1.0]).unwrap();
        assert!(matches!(fit_codebook(&[grid], 1, 2, 0), Err(CodebookError::TooFewDistinct { .. })));
    }

    #[test]
    fn subsample_is_deterministic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let cw: Vec<f32> = (0..2 * 20 * 2).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let cb = Codebook::new(2, 20, 2, cw).unwrap();
        let a = cb.subsample(0.25, 5).unwrap();
        assert_eq!(a, cb.subsample(0.25, 5).unwrap());
        assert_eq!(a.entries(), 5);
        assert_eq!(cb.subsample(1.0, 5).unwrap(), cb);
        assert!(cb.subsample(0.05, 5).is_err());
    }

    #[test]
    fn commitment_hand_value() {
        let cb = toy_1d();
        let mut g = Graph::new();
        let z = g.leaf(Tensor::matrix(1, 1, vec![0.8]).unwrap(), true).unwrap();
        let loss = commitment_loss(&mut g, z, 1, 1, &cb).unwrap();
        assert!((g.value(loss).item() - 0.0025).abs() < 1e-12);
        g.backward(loss).unwrap();
        assert!((g.grad(z).unwrap().item() - 2.0 * (0.8 - 0.75)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn dequantize_reproduces_sum(seed in 0u64..500, levels in 1usize..=4) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (k, d) = (6, 3);
            let cw: Vec<f32> = (0..levels * k * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let cb = Codebook::new(levels, k, d, cw).unwrap();
            let data: Vec<f64> = (0..5 * d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let q = cb.rq_encode(&FeatureGrid::new(5, 1, d, data).unwrap()).unwrap();
            prop_assert_eq!(cb.dequantize(&q.indices).unwrap(), q.summed);
            prop_assert!(q.residual_energy.iter().all(|&e| e >= 0.0));
        }
    }
}

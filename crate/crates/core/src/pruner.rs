//! Test-time pruning of discrete visual tokens.
//!
//! Each first-level ID present in an image gets a keep quota
//! `m_k = min(n_k, ceil(n_k * ρ̂_k^γ))`, where `ρ̂_k ∈ (0, 1]` is the normalized
//! rarity of the ID in a reference corpus. `γ` is the smallest value that fits
//! the budget. Inside an ID, tokens with large level-1 residuals and large
//! distance to same-ID neighbours win. Kept tokens are emitted in raster order.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::QuantizedGrid;
use crate::rng::substream;

pub const GAMMA_CAP: f64 = 64.0;
pub const GAMMA_TOL: f64 = 1e-6;
pub const ISOLATION_NEIGHBOURS: usize = 3;
const FREQ_MAGIC: &str = "#CRFTFREQ01";

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("gamma must be >= 0, got {0}")]
    NegativeGamma(f64),
    #[error("quota {m} out of range for {n} tokens")]
    QuotaOutOfRange { m: usize, n: usize },
    #[error("invalid request: {0}")]
    Request(String),
    #[error("token id {id} outside statistics for K={k}")]
    IdOutOfRange { id: usize, k: usize },
    #[error("internal error: {0}")]
    Internal(String),
    #[error("frequency file format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Corpus frequencies of first-level IDs and the rarity weights derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStats {
    counts: Vec<u64>,
    total: u64,
    source: String,
    p_dom: Vec<f64>,
    rarity: Vec<f64>,
    rarity_norm: Vec<f64>,
}

impl TokenStats {
    /// Derive probabilities with add-one smoothing, then `ρ = 1/p` and
    /// `ρ̂ = ρ / max ρ`.
    pub fn from_counts(counts: Vec<u64>, source: &str) -> Result<Self, PruneError> {
        if counts.is_empty() {
            return Err(PruneError::Request("K must be positive".into()));
        }
        let total: u64 = counts.iter().sum();
        let k = counts.len() as f64;
        let denom = total as f64 + k;
        let p_dom: Vec<f64> = counts.iter().map(|&c| (c as f64 + 1.0) / denom).collect();
        let rarity: Vec<f64> = p_dom.iter().map(|p| 1.0 / p).collect();
        // ρ̂ = ρ_k / max ρ = min p / p_k, computed from counts to keep the
        // rarest IDs at exactly 1.
        let min_count = *counts.iter().min().unwrap();
        let rarity_norm = counts.iter().map(|&c| (min_count as f64 + 1.0) / (c as f64 + 1.0)).collect();
        Ok(Self { counts, total, source: source.to_string(), p_dom, rarity, rarity_norm })
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn p_dom(&self) -> &[f64] {
        &self.p_dom
    }

    pub fn rarity(&self) -> &[f64] {
        &self.rarity
    }

    pub fn rarity_norm(&self) -> &[f64] {
        &self.rarity_norm
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{FREQ_MAGIC} total={} K={} source={}\n", self.total, self.k(), self.source);
        for (id, c) in self.counts.iter().enumerate() {
            writeln!(s, "{id}\t{c}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, PruneError> {
        let bad = |m: String| PruneError::Format(m);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(FREQ_MAGIC) {
            return Err(bad(format!("header must start with {FREQ_MAGIC}")));
        }
        let (mut total, mut k, mut source) = (None, None, None);
        for f in fields {
            match f.split_once('=') {
                Some(("total", v)) => total = v.parse::<u64>().ok(),
                Some(("K", v)) => k = v.parse::<u32>().ok(),
                Some(("source", v)) => source = Some(v.to_string()),
                _ => return Err(bad(format!("unexpected header field {f:?}"))),
            }
        }
        let total = total.ok_or_else(|| bad("total".into()))?;
        let k = k.ok_or_else(|| bad("K".into()))? as usize;
        let source = source.ok_or_else(|| bad("source".into()))?;
        let mut counts = vec![0u64; k];
        let mut seen = vec![false; k];
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (id, c) = line.split_once('\t').ok_or_else(|| bad(format!("bad record {line:?}")))?;
            let id: usize = id.parse().map_err(|_| bad(format!("bad id {id:?}")))?;
            let c: u64 = c.trim().parse().map_err(|_| bad(format!("bad count {c:?}")))?;
            if id >= k || seen[id] {
                return Err(bad(format!("id {id} out of range or repeated")));
            }
            seen[id] = true;
            counts[id] = c;
        }
        if counts.iter().sum::<u64>() != total {
            return Err(bad("counts do not sum to total".into()));
        }
        Self::from_counts(counts, &source)
    }

    pub fn save(&self, path: &Path) -> Result<(), PruneError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PruneError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Count first-level IDs over a corpus of quantized grids.
pub fn estimate_frequencies(corpus: &[QuantizedGrid], k: usize, source: &str) -> Result<TokenStats, PruneError> {
    if corpus.is_empty() {
        return Err(PruneError::EmptyCorpus);
    }
    let mut counts = vec![0u64; k];
    for q in corpus {
        for id in q.first_level_ids() {
            if id >= k {
                return Err(PruneError::IdOutOfRange { id, k });
            }
            counts[id] += 1;
        }
    }
    TokenStats::from_counts(counts, source)
}

/// Per-ID quotas at a given `γ`.
pub fn allocate_quotas(counts: &[usize], rarity_norm: &[f64], gamma: f64) -> Result<Vec<usize>, PruneError> {
    if !(gamma >= 0.0) {
        return Err(PruneError::NegativeGamma(gamma));
    }
    Ok(counts
        .iter()
        .zip(rarity_norm)
        .map(|(&n, &r)| if n == 0 { 0 } else { n.min((n as f64 * r.powf(gamma)).ceil() as usize) })
        .collect())
}

fn kept_total(counts: &[usize], rarity_norm: &[f64], gamma: f64) -> usize {
    allocate_quotas(counts, rarity_norm, gamma).map(|m| m.iter().sum()).unwrap_or(usize::MAX)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaSolution {
    pub gamma: f64,
    pub total: usize,
    /// The cap was reached without meeting the budget.
    pub capped: bool,
}

/// Smallest `γ ≥ 0` (to within [`GAMMA_TOL`]) whose quotas fit in `budget`.
pub fn solve_gamma(counts: &[usize], rarity_norm: &[f64], budget: usize) -> Result<GammaSolution, PruneError> {
    let present = counts.iter().filter(|&&n| n > 0).count();
    if budget < present {
        return Err(PruneError::Internal(format!("budget {budget} below {present} present IDs")));
    }
    let total0 = kept_total(counts, rarity_norm, 0.0);
    if total0 <= budget {
        return Ok(GammaSolution { gamma: 0.0, total: total0, capped: false });
    }
    let mut hi = 1.0;
    while kept_total(counts, rarity_norm, hi) > budget {
        if hi >= GAMMA_CAP {
            return Ok(GammaSolution { gamma: GAMMA_CAP, total: kept_total(counts, rarity_norm, GAMMA_CAP), capped: true });
        }
        hi = (hi * 2.0f64).min(GAMMA_CAP);
    }
    let mut lo = 0.0;
    while hi - lo > GAMMA_TOL {
        let mid = 0.5 * (lo + hi);
        if kept_total(counts, rarity_norm, mid) <= budget {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(GammaSolution { gamma: hi, total: kept_total(counts, rarity_norm, hi), capped: false })
}

fn grid_coords(pos: usize, width: usize) -> (f64, f64) {
    ((pos / width) as f64, (pos % width) as f64)
}

/// Mean distance to the `min(3, n-1)` nearest tokens of the same ID;
/// `+∞` for a lone token.
pub fn isolation_scores(positions: &[usize], width: usize) -> Vec<f64> {
    let n = positions.len();
    if n == 1 {
        return vec![f64::INFINITY];
    }
    let k = ISOLATION_NEIGHBOURS.min(n - 1);
    positions
        .iter()
        .map(|&p| {
            let (r, c) = grid_coords(p, width);
            let mut d: Vec<f64> = positions
                .iter()
                .filter(|&&q| q != p)
                .map(|&q| {
                    let (r2, c2) = grid_coords(q, width);
                    ((r - r2).powi(2) + (c - c2).powi(2)).sqrt()
                })
                .collect();
            d.sort_by(f64::total_cmp);
            d[..k].iter().sum::<f64>() / k as f64
        })
        .collect()
}

/// Fraction of the other values strictly smaller than each value: the largest
/// value scores 1, the smallest 0, ties share a score.
pub fn rank_fraction_desc(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n == 1 {
        return vec![1.0];
    }
    rank_counts(values).into_iter().map(|c| c as f64 / (n - 1) as f64).collect()
}

fn rank_counts(values: &[f64]) -> Vec<usize> {
    values.iter().map(|&v| values.iter().filter(|&&u| u < v).count()).collect()
}

/// Combined within-ID score with weight `alpha` on the residual cue.
///
/// Counts are mixed before the shared division so that exact ties stay tied.
pub fn within_id_scores(positions: &[usize], energies: &[f64], width: usize, alpha: f64) -> Vec<f64> {
    let n = positions.len();
    if n == 1 {
        return vec![1.0];
    }
    let iso = isolation_scores(positions, width);
    let re = rank_counts(energies);
    let ri = rank_counts(&iso);
    re.iter()
        .zip(&ri)
        .map(|(&a, &b)| (alpha * a as f64 + (1.0 - alpha) * b as f64) / (n - 1) as f64)
        .collect()
}

fn top_by_score(positions: &[usize], scores: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..positions.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(positions[a].cmp(&positions[b])));
    let mut kept: Vec<usize> = order[..m].iter().map(|&i| positions[i]).collect();
    kept.sort_unstable();
    kept
}

/// Keep `m` of the tokens of one ID, ranked by residual and isolation cues.
pub fn within_id_select(positions: &[usize], energies: &[f64], m: usize, width: usize) -> Result<Vec<usize>, PruneError> {
    within_id_select_weighted(positions, energies, m, width, 0.5)
}

pub fn within_id_select_weighted(
    positions: &[usize],
    energies: &[f64],
    m: usize,
    width: usize,
    alpha: f64,
) -> Result<Vec<usize>, PruneError> {
    let n = positions.len();
    if m == 0 || m > n || energies.len() != n {
        return Err(PruneError::QuotaOutOfRange { m, n });
    }
    if m == n {
        let mut all = positions.to_vec();
        all.sort_unstable();
        return Ok(all);
    }
    let scores = within_id_scores(positions, energies, width, alpha);
    Ok(top_by_score(positions, &scores, m))
}

/// How tokens are chosen; `Full` is the default method, the others exist for
/// component ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Selection {
    /// Uniformly random subset of the budget, ignoring IDs.
    Random,
    /// Rarity quotas, random tokens within each ID.
    QuotaRandom,
    /// Rarity quotas, largest residuals within each ID.
    QuotaResidual,
    /// Rarity quotas, residual and isolation cues.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Budget {
    KeepRatio(f64),
    Tokens(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneRequest {
    pub budget: Budget,
    pub selection: Selection,
    /// Seed for the random selection modes.
    pub seed: u64,
}

impl PruneRequest {
    pub fn keep_ratio(ratio: f64) -> Self {
        Self { budget: Budget::KeepRatio(ratio), selection: Selection::Full, seed: 0 }
    }

    pub fn tokens(m: usize) -> Self {
        Self { budget: Budget::Tokens(m), selection: Selection::Full, seed: 0 }
    }

    pub fn with_selection(mut self, selection: Selection, seed: u64) -> Self {
        self.selection = selection;
        self.seed = seed;
        self
    }

    /// Requested budget before clamping.
    pub fn requested(&self, n: usize) -> Result<usize, PruneError> {
        match self.budget {
            Budget::KeepRatio(r) if r > 0.0 && r <= 1.0 => Ok((r * n as f64).round() as usize),
            Budget::KeepRatio(r) => Err(PruneError::Request(format!("keep ratio {r} outside (0, 1]"))),
            Budget::Tokens(m) if m >= 1 => Ok(m.min(n)),
            Budget::Tokens(_) => Err(PruneError::Request("budget must be at least one token".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdQuota {
    pub id: usize,
    pub count: usize,
    pub quota: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneResult {
    /// Kept raster positions, strictly increasing.
    pub kept: Vec<usize>,
    pub gamma: f64,
    /// Present IDs in increasing ID order.
    pub quotas: Vec<IdQuota>,
    /// Budget after clamping.
    pub budget: usize,
    /// The budget was raised to cover every present ID, or the γ cap was hit.
    pub clamped: bool,
}

/// Select the tokens of one quantized grid to keep.
pub fn prune(q: &QuantizedGrid, stats: &TokenStats, req: &PruneRequest) -> Result<PruneResult, PruneError> {
    let n = q.len();
    let ids = q.first_level_ids();
    let k = stats.k();
    if let Some(&id) = ids.iter().find(|&&id| id >= k) {
        return Err(PruneError::IdOutOfRange { id, k });
    }
    let requested = req.requested(n)?;
    let mut counts = vec![0usize; k];
    for &id in &ids {
        counts[id] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count();
    let mut budget = requested.max(present);
    let mut clamped = budget != requested;

    if req.selection == Selection::Random {
        let mut rng = substream(req.seed, "prune-random");
        let mut kept = sample(&mut rng, n, requested).into_vec();
        kept.sort_unstable();
        let quotas = counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(id, &c)| IdQuota { id, count: c, quota: kept.iter().filter(|&&p| ids[p] == id).count() })
            .collect();
        return Ok(PruneResult { kept, gamma: f64::NAN, quotas, budget: requested, clamped: false });
    }

    let sol = solve_gamma(&counts, stats.rarity_norm(), budget)?;
    if sol.capped {
        clamped = true;
        budget = sol.total;
    }
    let quota = allocate_quotas(&counts, stats.rarity_norm(), sol.gamma)?;
    let mut kept = Vec::with_capacity(sol.total);
    let mut quotas = Vec::with_capacity(present);
    let mut rng = substream(req.seed, "prune-within-id");
    for id in 0..k {
        if counts[id] == 0 {
            continue;
        }
        let positions: Vec<usize> = (0..n).filter(|&p| ids[p] == id).collect();
        let energies: Vec<f64> = positions.iter().map(|&p| q.residual_energy[p]).collect();
        let m = quota[id];
        let chosen = match req.selection {
            Selection::Full => within_id_select(&positions, &energies, m, q.width)?,
            Selection::QuotaResidual => within_id_select_weighted(&positions, &energies, m, q.width, 1.0)?,
            Selection::QuotaRandom => sample(&mut rng, positions.len(), m).into_iter().map(|i| positions[i]).collect(),
            Selection::Random => unreachable!(),
        };
        kept.extend(chosen);
        quotas.push(IdQuota { id, count: counts[id], quota: m });
    }
    kept.sort_unstable();
    Ok(PruneResult { kept, gamma: sol.gamma, quotas, budget, clamped })
}

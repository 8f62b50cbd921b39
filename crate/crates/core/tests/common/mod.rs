//! Brute-force oracles shared by integration tests.
#![allow(dead_code)]

pub mod gradcheck;

use craft_core::codebook::{Codebook, FeatureGrid};
use craft_core::pruner::{allocate_quotas, solve_gamma, within_id_scores, within_id_select, GAMMA_TOL};
use craft_core::rng::substream;
use rand::Rng;

/// Exhaustive nearest codeword; ties go to the smallest index.
pub fn brute_nearest(cb: &Codebook, v: &[f64], level: usize) -> usize {
    let mut best = (0, f64::INFINITY);
    for k in 0..cb.entries() {
        let d: f64 = cb.codeword(level, k).iter().zip(v).map(|(&c, &x)| (x - c as f64).powi(2)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Residual encoding by repeated brute-force search.
pub fn brute_rq(cb: &Codebook, grid: &FeatureGrid) -> Vec<u32> {
    let mut out = Vec::with_capacity(grid.len() * cb.levels());
    for n in 0..grid.len() {
        let mut r = grid.patch(n).to_vec();
        for l in 0..cb.levels() {
            let k = brute_nearest(cb, &r, l);
            out.push(k as u32);
            for (x, &c) in r.iter_mut().zip(cb.codeword(l, k)) {
                *x -= c as f64;
            }
        }
    }
    out
}

pub fn kept_total(n: &[usize], rho: &[f64], gamma: f64) -> usize {
    allocate_quotas(n, rho, gamma).unwrap().iter().sum()
}

pub const GRID_STEP: f64 = 0.001;

/// Smallest grid γ in {0, 0.001, ..., 64} meeting the budget, if any.
pub fn grid_gamma(n: &[usize], rho: &[f64], budget: usize) -> Option<f64> {
    (0..=64_000).map(|i| i as f64 * GRID_STEP).find(|&g| kept_total(n, rho, g) <= budget)
}

/// Best size-`m` subset by total score; among equal totals, the
/// lexicographically smallest sorted position list.
pub fn brute_subset(positions: &[usize], energies: &[f64], m: usize, width: usize) -> Vec<usize> {
    let scores = within_id_scores(positions, energies, width, 0.5);
    let n = positions.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != m {
            continue;
        }
        let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let total: f64 = idx.iter().map(|&i| scores[i]).sum();
        let mut set: Vec<usize> = idx.iter().map(|&i| positions[i]).collect();
        set.sort_unstable();
        let better = match &best {
            None => true,
            Some((bt, bs)) => total > bt + 1e-12 || ((total - bt).abs() <= 1e-12 && set < *bs),
        };
        if better {
            best = Some((total, set));
        }
    }
    best.unwrap().1
}

/// Random codebook; with `lattice`, entries are distinct points of a coarse
/// dyadic grid, where distances are exact and equal distances are common.
fn tie_prone_codebook(rng: &mut impl Rng, levels: usize, k: usize, d: usize, lattice: bool) -> Codebook {
    if !lattice {
        let words = (0..levels * k * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        return Codebook::new(levels, k, d, words).unwrap();
    }
    let mut words = Vec::with_capacity(levels * k * d);
    for _ in 0..levels {
        let mut seen = std::collections::HashSet::new();
        while seen.len() < k {
            let p: Vec<i32> = (0..d).map(|_| rng.random_range(-4i32..=4)).collect();
            if seen.insert(p.clone()) {
                words.extend(p.iter().map(|&v| v as f32 * 0.25));
            }
        }
    }
    Codebook::new(levels, k, d, words).unwrap()
}

/// Quantizer instances checked against exhaustive search: returns
/// (instances, mismatching instances).
pub fn quantizer_oracle(instances: usize, seed: u64) -> (usize, usize) {
    let mut rng = substream(seed, "quantizer-oracle");
    let mut bad = 0;
    for _ in 0..instances {
        let levels = rng.random_range(1..=4);
        let lattice = rng.random_bool(0.5);
        let d = rng.random_range(1..=16);
        // The lattice has 9^d points; keep K well inside it.
        let k = rng.random_range(1..=256usize.min(9usize.pow(d.min(6) as u32) / 2));
        let cb = tie_prone_codebook(&mut rng, levels, k, d, lattice);
        let n = rng.random_range(1..=4);
        let mut data: Vec<f64> = (0..n * d)
            .map(|_| if lattice { rng.random_range(-12i32..=12) as f64 * 0.125 } else { rng.random_range(-1.5..1.5) })
            .collect();
        // Some patches sit exactly on a first-level codeword.
        if rng.random_bool(0.3) {
            let e = rng.random_range(0..k);
            for (x, &c) in data[..d].iter_mut().zip(cb.codeword(0, e)) {
                *x = c as f64;
            }
        }
        let grid = FeatureGrid::new(n, 1, d, data).unwrap();
        let level = rng.random_range(0..levels);
        let single_ok = (0..n).all(|p| cb.nearest_entry(grid.patch(p), level).unwrap().0 == brute_nearest(&cb, grid.patch(p), level));
        let rq_ok = cb.rq_encode(&grid).unwrap().indices == brute_rq(&cb, &grid);
        if !(single_ok && rq_ok) {
            bad += 1;
        }
    }
    (instances, bad)
}

fn random_quota_instance(rng: &mut impl Rng) -> (Vec<usize>, Vec<f64>, usize) {
    loop {
        let n: Vec<usize> = (0..5).map(|_| if rng.random_bool(0.15) { 0 } else { rng.random_range(1..40) }).collect();
        let mut rho: Vec<f64> = (0..5).map(|_| rng.random_range(0.01..1.0)).collect();
        rho[rng.random_range(0..5)] = 1.0;
        let total: usize = n.iter().sum();
        if total == 0 {
            continue;
        }
        let present = n.iter().filter(|&&c| c > 0).count();
        return (n, rho, rng.random_range(present..=total));
    }
}

/// `solve_gamma` against grid search; returns the failing instances.
pub fn gamma_oracle(instances: usize, seed: u64) -> Vec<String> {
    let mut rng = substream(seed, "gamma-oracle");
    let mut failures = Vec::new();
    for _ in 0..instances {
        let (n, rho, m) = random_quota_instance(&mut rng);
        let sol = solve_gamma(&n, &rho, m).unwrap();
        let ok = match grid_gamma(&n, &rho, m) {
            // The threshold lies in (g - step, g]; bisection lands within
            // tolerance above it, and nothing meaningfully below it fits.
            Some(g) => {
                !sol.capped
                    && sol.total <= m
                    && sol.total == kept_total(&n, &rho, sol.gamma)
                    && sol.gamma <= g + GAMMA_TOL
                    && (g == 0.0 || sol.gamma > g - GRID_STEP - GAMMA_TOL)
                    && (sol.gamma == 0.0 || kept_total(&n, &rho, sol.gamma - 2.0 * GAMMA_TOL) > m)
            }
            None => sol.capped,
        };
        if !ok {
            failures.push(format!("{n:?} {rho:?} m={m}: {sol:?}"));
        }
    }
    failures
}

/// `within_id_select` against subset enumeration; returns the failing instances.
pub fn subset_oracle(instances: usize, seed: u64) -> Vec<String> {
    let mut rng = substream(seed, "subset-oracle");
    let mut failures = Vec::new();
    for _ in 0..instances {
        let n = rng.random_range(1..=6);
        let mut pos: Vec<usize> = rand::seq::index::sample(&mut rng, 64, n).into_vec();
        pos.sort_unstable();
        // Coarse energies so ties occur.
        let e: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64 * 0.5).collect();
        let m = rng.random_range(1..=n);
        let got = within_id_select(&pos, &e, m, 8).unwrap();
        let want = brute_subset(&pos, &e, m, 8);
        if got != want {
            failures.push(format!("{pos:?} {e:?} m={m}: {got:?} vs {want:?}"));
        }
    }
    failures
}

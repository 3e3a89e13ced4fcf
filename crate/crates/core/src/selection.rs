//! Batch selection.
//!
//! The greedy Max-Min solver picks, one region at a time, the unlabeled
//! candidate maximizing the potential
//!
//! ```text
//! φ(x) = λu·u(x) + min_{y ∈ L ∪ B} d(x, y)
//! ```
//!
//! where `d` is the normalized combined distance. A [`MinDistCache`] keeps the
//! inner minimum for every candidate and is refreshed against each new pick, so
//! a batch of `K` costs `n·K` distance evaluations after initialization.

use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diversity::{feature_distance, DistanceSpec, RegionDistance};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::region::{PoolState, RegionId};
use crate::rng::{stream_rng, Stream};
use crate::scoring::ScoreTable;

// candidates per rayon task
const PAR_CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    MaxMin,
    MaxSum,
}

/// Named selection methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Random,
    Entropy,
    EntropyRandom,
    CoreSet,
    FeatureSpatial,
    EntropyFeature,
    EntropySpatial,
    EntropyFeatureSpatial,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Random,
        Method::Entropy,
        Method::EntropyRandom,
        Method::CoreSet,
        Method::FeatureSpatial,
        Method::EntropyFeature,
        Method::EntropySpatial,
        Method::EntropyFeatureSpatial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::Entropy => "entropy",
            Method::EntropyRandom => "entropy-random",
            Method::CoreSet => "core-set",
            Method::FeatureSpatial => "feature-spatial",
            Method::EntropyFeature => "entropy-feature",
            Method::EntropySpatial => "entropy-spatial",
            Method::EntropyFeatureSpatial => "entropy-feature-spatial",
        }
    }

    /// `(λu, λf, λs)` of the method.
    pub fn weights(self) -> (f64, f64, f64) {
        match self {
            Method::Random => (0.0, 0.0, 0.0),
            Method::Entropy | Method::EntropyRandom => (1.0, 0.0, 0.0),
            Method::CoreSet => (0.0, 1.0, 0.0),
            Method::FeatureSpatial => (0.0, 1.0, 1.0),
            Method::EntropyFeature => (1.0, 1.0, 0.0),
            Method::EntropySpatial => (1.0, 0.0, 1.0),
            Method::EntropyFeatureSpatial => (1.0, 1.0, 1.0),
        }
    }

    pub fn needs_features(self) -> bool {
        self.weights().1 > 0.0
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['_', '+', ' '], "-");
        let key = match key.as_str() {
            "coreset" | "feature" => "core-set",
            other => other,
        };
        Method::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub lambda_u: f64,
    pub distance: DistanceSpec,
    pub batch_size: usize,
    pub seed: u64,
    pub objective: Objective,
    #[serde(default)]
    pub method: Option<Method>,
}

impl SelectionConfig {
    pub fn with_batch_size(mut self, k: usize) -> Self {
        self.batch_size = k;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_objective(mut self, objective: Objective) -> Self {
        self.objective = objective;
        self
    }

    pub fn label(&self) -> String {
        let base = self.method.map(Method::name).unwrap_or("custom");
        match self.objective {
            Objective::MaxMin => base.to_string(),
            Objective::MaxSum => format!("{base}/max-sum"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lambda_u.is_finite() && self.lambda_u >= 0.0) {
            return Err(Error::Config("lambda_u must be finite and >= 0".into()));
        }
        self.distance.validate()?;
        let random = matches!(self.method, Some(Method::Random));
        let any =
            self.lambda_u > 0.0 || self.distance.lambda_f > 0.0 || self.distance.lambda_s > 0.0;
        if !random && !any {
            return Err(Error::Config(
                "all objective weights are zero; use the random method instead".into(),
            ));
        }
        Ok(())
    }
}

/// Configuration of a named method with the default piece-wise distance
/// (`a=1, b=2, c=2, tau = region_size`, L∞), batch size 1 and seed 0.
pub fn preset(method: Method, region_size: u32) -> SelectionConfig {
    let (lambda_u, lambda_f, lambda_s) = method.weights();
    SelectionConfig {
        lambda_u,
        distance: DistanceSpec::piecewise_defaults(region_size).with_weights(lambda_f, lambda_s),
        batch_size: 1,
        seed: 0,
        objective: Objective::MaxMin,
        method: Some(method),
    }
}

/// One greedy pick and the terms of its potential.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PickDiagnostics {
    pub region: RegionId,
    pub potential: f64,
    pub u_term: f64,
    pub d_term: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct SelectionStats {
    /// Distance evaluations spent initializing the cache against the labeled set.
    pub init_distance_evals: u64,
    /// Distance evaluations spent refreshing the cache after picks.
    pub update_distance_evals: u64,
    pub feature_divisor: f64,
    pub spatial_divisor: f64,
    /// A weighted distance term had a zero divisor and was dropped.
    pub zero_divisor: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub batch: Vec<RegionId>,
    pub picks: Vec<PickDiagnostics>,
    pub objective: Objective,
    pub label: String,
    pub stats: SelectionStats,
    pub wall_time: Duration,
}

/// Per-candidate minimum normalized distance to the selected pool `L ∪ B`.
#[derive(Debug, Clone)]
pub struct MinDistCache {
    // grid indices of the remaining candidates
    candidates: Vec<usize>,
    min_dist: Vec<f64>,
    // grid index -> position in `candidates`, usize::MAX when absent
    position: Vec<usize>,
    selected: usize,
    empty_value: f64,
}

impl MinDistCache {
    /// Fixes the batch normalizers on `dist` and computes every candidate's
    /// minimum distance to `selected`. Returns the cache and the number of
    /// distance evaluations spent.
    pub fn build(
        dist: &mut RegionDistance<'_>,
        features: Option<&FeatureMatrix>,
        candidates: Vec<usize>,
        selected: &[usize],
        grid_len: usize,
    ) -> (Self, u64) {
        let mut evals = 0u64;
        let raw_feature_min = if dist.uses_features() {
            let f = features.expect("feature use checked at construction");
            let (divisor, mins, spent) = feature_divisor(f, &candidates, selected);
            evals += spent;
            let mut norms = *dist.normalizers();
            norms.feature = divisor;
            dist.set_normalizers(norms);
            mins
        } else {
            None
        };
        let empty_value = dist.max_value();
        let min_dist: Vec<f64> = if selected.is_empty() {
            vec![empty_value; candidates.len()]
        } else if dist.is_trivial() {
            vec![0.0; candidates.len()]
        } else if let (Some(raw), false) = (&raw_feature_min, dist.spec().lambda_s > 0.0) {
            let d = &*dist;
            candidates
                .iter()
                .zip(raw)
                .map(|(&c, &m)| d.combined_with_feature(c, c, m))
                .collect()
        } else {
            let d = &*dist;
            evals += (candidates.len() * selected.len()) as u64;
            candidates
                .par_iter()
                .with_min_len(PAR_CHUNK / selected.len().max(1) + 1)
                .map(|&c| {
                    selected
                        .iter()
                        .map(|&s| d.combined(c, s))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect()
        };
        let mut position = vec![usize::MAX; grid_len];
        for (p, &c) in candidates.iter().enumerate() {
            position[c] = p;
        }
        (
            MinDistCache {
                candidates,
                min_dist,
                position,
                selected: selected.len(),
                empty_value,
            },
            evals,
        )
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Grid indices of the remaining candidates, in no particular order.
    pub fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    /// Cached minimum distance of the candidate at grid index `idx`.
    pub fn get(&self, idx: usize) -> Option<f64> {
        match self.position.get(idx) {
            Some(&p) if p != usize::MAX => Some(self.min_dist[p]),
            _ => None,
        }
    }

    /// Value used while the selected pool is empty.
    pub fn empty_value(&self) -> f64 {
        self.empty_value
    }

    /// Removes a candidate (it has just been picked) without touching the others.
    fn remove(&mut self, idx: usize) {
        let p = self.position[idx];
        assert!(p != usize::MAX, "region {idx} is not a candidate");
        self.candidates.swap_remove(p);
        self.min_dist.swap_remove(p);
        self.position[idx] = usize::MAX;
        if p < self.candidates.len() {
            self.position[self.candidates[p]] = p;
        }
    }

    /// Folds a newly selected region into every remaining candidate's minimum.
    /// Returns the number of distance evaluations.
    pub fn update(&mut self, dist: &RegionDistance<'_>, newly_selected: usize) -> u64 {
        if self
            .position
            .get(newly_selected)
            .is_some_and(|&p| p != usize::MAX)
        {
            self.remove(newly_selected);
        }
        self.selected += 1;
        if dist.is_trivial() {
            self.min_dist.iter_mut().for_each(|m| *m = 0.0);
            return 0;
        }
        self.candidates
            .par_iter()
            .zip(self.min_dist.par_iter_mut())
            .with_min_len(PAR_CHUNK)
            .for_each(|(&c, m)| {
                let d = dist.combined(c, newly_selected);
                if d < *m {
                    *m = d;
                }
            });
        self.candidates.len() as u64
    }

    /// Candidate with the largest `λu·u + min_dist`, ties to the lowest grid index.
    fn best(&self, scores: &ScoreTable, lambda_u: f64) -> Option<(usize, f64, f64)> {
        self.candidates
            .par_iter()
            .zip(self.min_dist.par_iter())
            .with_min_len(PAR_CHUNK)
            .map(|(&c, &m)| (c, lambda_u * scores.at(c).normalized, m))
            .reduce_with(better)
    }
}

// (grid index, u term, d term)
#[inline]
fn better(a: (usize, f64, f64), b: (usize, f64, f64)) -> (usize, f64, f64) {
    let (pa, pb) = (a.1 + a.2, b.1 + b.2);
    if pa > pb || (pa == pb && a.0 < b.0) {
        a
    } else {
        b
    }
}

/// Feature divisor fixed at batch start: the largest distance from a candidate
/// to its nearest selected region. With nothing selected, twice the largest
/// distance to the candidates' mean (an upper bound on their diameter).
fn feature_divisor(
    features: &FeatureMatrix,
    candidates: &[usize],
    selected: &[usize],
) -> (f64, Option<Vec<f64>>, u64) {
    if candidates.is_empty() {
        return (0.0, Some(Vec::new()), 0);
    }
    if selected.is_empty() {
        let dim = features.dim();
        let mut mean = vec![0.0; dim];
        for &c in candidates {
            for (m, v) in mean.iter_mut().zip(features.row(c)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= candidates.len() as f64);
        let radius = candidates
            .iter()
            .map(|&c| feature_distance(features.row(c), &mean))
            .fold(0.0, f64::max);
        return (2.0 * radius, None, 0);
    }
    let mins: Vec<f64> = candidates
        .par_iter()
        .with_min_len(PAR_CHUNK / selected.len() + 1)
        .map(|&c| {
            let row = features.row(c);
            selected
                .iter()
                .map(|&s| feature_distance(row, features.row(s)))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let divisor = mins.iter().cloned().fold(0.0, f64::max);
    (
        divisor,
        Some(mins),
        (candidates.len() * selected.len()) as u64,
    )
}

/// Minimum distance from `candidate` to `pool`, computed directly.
pub fn naive_min_distance(dist: &RegionDistance<'_>, candidate: usize, pool: &[usize]) -> f64 {
    if pool.is_empty() {
        return dist.max_value();
    }
    pool.iter()
        .map(|&s| dist.combined(candidate, s))
        .fold(f64::INFINITY, f64::min)
}

/// `λu·u(x) + cached min distance` for one candidate.
pub fn potential(
    candidate: RegionId,
    scores: &ScoreTable,
    cache: &MinDistCache,
    grid: &crate::region::RegionGrid,
    lambda_u: f64,
) -> Result<f64> {
    let idx = grid
        .index_of(candidate)
        .ok_or_else(|| Error::invalid(format!("region {candidate} not in grid")))?;
    let m = cache
        .get(idx)
        .ok_or_else(|| Error::invalid(format!("region {candidate} is not a candidate")))?;
    Ok(lambda_u * scores.at(idx).normalized + m)
}

/// Refreshes `cache` with one newly selected region.
pub fn update_min_dist_cache(
    cache: &mut MinDistCache,
    dist: &RegionDistance<'_>,
    newly_selected: usize,
) -> u64 {
    cache.update(dist, newly_selected)
}

/// Everything a solver needs about one batch problem, with grid indices.
pub struct BatchProblem<'a> {
    pub dist: RegionDistance<'a>,
    pub scores: &'a ScoreTable,
    pub candidates: Vec<usize>,
    pub selected: Vec<usize>,
    pub lambda_u: f64,
    features: Option<&'a FeatureMatrix>,
    grid_len: usize,
}

impl<'a> BatchProblem<'a> {
    pub fn new(
        pool: &'a PoolState,
        scores: &'a ScoreTable,
        features: Option<&'a FeatureMatrix>,
        config: &SelectionConfig,
    ) -> Result<Self> {
        config.validate()?;
        let grid = pool.grid();
        if !scores.matches_grid(grid) {
            return Err(Error::invalid("score table does not match the pool's grid"));
        }
        let available = pool.unlabeled().len();
        if available < config.batch_size {
            return Err(Error::PoolExhausted {
                requested: config.batch_size,
                available,
            });
        }
        let to_index = |id: &RegionId| grid.index_of(*id).expect("pool ids come from the grid");
        let candidates: Vec<usize> = pool.unlabeled().iter().map(to_index).collect();
        let selected: Vec<usize> = pool
            .labeled()
            .iter()
            .chain(pool.batch())
            .map(to_index)
            .collect();
        let dist = RegionDistance::new(grid, features, config.distance)?;
        Ok(BatchProblem {
            dist,
            scores,
            candidates,
            selected,
            lambda_u: config.lambda_u,
            features,
            grid_len: grid.len(),
        })
    }

    /// Builds the min-distance cache; this also fixes the feature divisor.
    pub fn build_cache(&mut self) -> (MinDistCache, u64) {
        MinDistCache::build(
            &mut self.dist,
            self.features,
            self.candidates.clone(),
            &self.selected,
            self.grid_len,
        )
    }

    /// Max-Min objective of `batch` (grid indices): `λu·min u + min d` over
    /// pairs with at least one batch member.
    pub fn max_min_objective(&self, batch: &[usize]) -> f64 {
        let u = batch
            .iter()
            .map(|&b| self.scores.at(b).normalized)
            .fold(f64::INFINITY, f64::min);
        let mut d = f64::INFINITY;
        for (i, &x) in batch.iter().enumerate() {
            for &y in self.selected.iter().chain(&batch[i + 1..]) {
                d = d.min(self.dist.combined(x, y));
            }
        }
        if d == f64::INFINITY {
            d = self.dist.max_value();
        }
        self.lambda_u * u + d
    }

    /// Max-Sum objective of `batch`: `λu·Σ u + Σ d` over unordered pairs with
    /// at least one batch member.
    pub fn max_sum_objective(&self, batch: &[usize]) -> f64 {
        let u: f64 = batch.iter().map(|&b| self.scores.at(b).normalized).sum();
        let mut d = 0.0;
        for (i, &x) in batch.iter().enumerate() {
            for &y in self.selected.iter().chain(&batch[i + 1..]) {
                d += self.dist.combined(x, y);
            }
        }
        self.lambda_u * u + d
    }

    fn stats(&self, init: u64, update: u64) -> SelectionStats {
        let norms = self.dist.normalizers();
        let spec = self.dist.spec();
        SelectionStats {
            init_distance_evals: init,
            update_distance_evals: update,
            feature_divisor: norms.feature,
            spatial_divisor: norms.spatial,
            zero_divisor: (spec.lambda_f > 0.0 && norms.feature <= 0.0)
                || (spec.lambda_s > 0.0 && norms.spatial <= 0.0),
        }
    }
}

/// Greedy Max-Min batch selection.
pub fn greedy_select(
    pool: &PoolState,
    scores: &ScoreTable,
    features: Option<&FeatureMatrix>,
    config: &SelectionConfig,
) -> Result<SelectionResult> {
    greedy_select_traced(pool, scores, features, config, |_, _, _| {})
}

/// [`greedy_select`] with a hook called after every pick with the problem,
/// the refreshed cache and the picks so far (grid indices).
pub fn greedy_select_traced(
    pool: &PoolState,
    scores: &ScoreTable,
    features: Option<&FeatureMatrix>,
    config: &SelectionConfig,
    mut on_pick: impl FnMut(&BatchProblem<'_>, &MinDistCache, &[usize]),
) -> Result<SelectionResult> {
    let start = Instant::now();
    let mut problem = BatchProblem::new(pool, scores, features, config)?;
    let (mut cache, init_evals) = problem.build_cache();
    let mut update_evals = 0;
    let mut picked = Vec::with_capacity(config.batch_size);
    let mut picks = Vec::with_capacity(config.batch_size);
    let grid = pool.grid();
    for _ in 0..config.batch_size {
        let (idx, u_term, d_term) =
            cache
                .best(scores, problem.lambda_u)
                .ok_or(Error::PoolExhausted {
                    requested: config.batch_size,
                    available: picked.len(),
                })?;
        picks.push(PickDiagnostics {
            region: grid.region(idx).id,
            potential: u_term + d_term,
            u_term,
            d_term,
        });
        picked.push(idx);
        update_evals += cache.update(&problem.dist, idx);
        on_pick(&problem, &cache, &picked);
    }
    let stats = problem.stats(init_evals, update_evals);
    Ok(SelectionResult {
        batch: picks.iter().map(|p| p.region).collect(),
        picks,
        objective: Objective::MaxMin,
        label: config.label(),
        stats,
        wall_time: start.elapsed(),
    })
}

/// Greedy Max-Sum selection: each pick maximizes `λu·u(x)` plus the mean
/// normalized distance from `x` to the selected pool.
pub fn max_sum_greedy_select(
    pool: &PoolState,
    scores: &ScoreTable,
    features: Option<&FeatureMatrix>,
    config: &SelectionConfig,
) -> Result<SelectionResult> {
    let start = Instant::now();
    let mut problem = BatchProblem::new(pool, scores, features, config)?;
    let mut init_evals = 0;
    if problem.dist.uses_features() {
        let f = features.expect("checked by RegionDistance");
        let (divisor, _, spent) = feature_divisor(f, &problem.candidates, &problem.selected);
        init_evals += spent;
        let mut norms = *problem.dist.normalizers();
        norms.feature = divisor;
        problem.dist.set_normalizers(norms);
    }
    let dist = &problem.dist;
    let mut candidates = problem.candidates.clone();
    let mut sums: Vec<f64> = if dist.is_trivial() {
        vec![0.0; candidates.len()]
    } else {
        init_evals += (candidates.len() * problem.selected.len()) as u64;
        candidates
            .par_iter()
            .map(|&c| problem.selected.iter().map(|&s| dist.combined(c, s)).sum())
            .collect()
    };
    let mut pool_size = problem.selected.len();
    let mut update_evals = 0u64;
    let mut picks = Vec::with_capacity(config.batch_size);
    let grid = pool.grid();
    for _ in 0..config.batch_size {
        let mean_term = |s: f64| {
            if pool_size == 0 {
                dist.max_value()
            } else {
                s / pool_size as f64
            }
        };
        let (pos, u_term, d_term) = candidates
            .iter()
            .zip(&sums)
            .enumerate()
            .map(|(p, (&c, &s))| {
                (
                    p,
                    c,
                    problem.lambda_u * scores.at(c).normalized,
                    mean_term(s),
                )
            })
            .fold(None::<(usize, usize, f64, f64)>, |acc, cur| match acc {
                None => Some(cur),
                Some(a) => {
                    let (pa, pc) = (a.2 + a.3, cur.2 + cur.3);
                    if pc > pa || (pc == pa && cur.1 < a.1) {
                        Some(cur)
                    } else {
                        Some(a)
                    }
                }
            })
            .map(|(p, _, u, d)| (p, u, d))
            .ok_or(Error::PoolExhausted {
                requested: config.batch_size,
                available: picks.len(),
            })?;
        let idx = candidates.swap_remove(pos);
        sums.swap_remove(pos);
        picks.push(PickDiagnostics {
            region: grid.region(idx).id,
            potential: u_term + d_term,
            u_term,
            d_term,
        });
        if !dist.is_trivial() {
            candidates
                .par_iter()
                .zip(sums.par_iter_mut())
                .with_min_len(PAR_CHUNK)
                .for_each(|(&c, s)| *s += dist.combined(c, idx));
            update_evals += candidates.len() as u64;
        }
        pool_size += 1;
    }
    let stats = problem.stats(init_evals, update_evals);
    Ok(SelectionResult {
        batch: picks.iter().map(|p| p.region).collect(),
        picks,
        objective: Objective::MaxSum,
        label: config.with_objective(Objective::MaxSum).label(),
        stats,
        wall_time: start.elapsed(),
    })
}

/// Limits for [`brute_force_select`].
#[derive(Debug, Clone, Copy)]
pub struct BruteForceLimits {
    pub max_n: usize,
    pub max_k: usize,
}

impl Default for BruteForceLimits {
    fn default() -> Self {
        BruteForceLimits {
            max_n: 14,
            max_k: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceResult {
    /// Optimal batch in ascending id order; the first optimum in lexicographic order.
    pub batch: Vec<RegionId>,
    pub objective: f64,
}

/// Exhaustive optimum of the configured objective over all `K`-subsets of the
/// unlabeled regions. Uses the same normalizers as the greedy solvers.
pub fn brute_force_select(
    pool: &PoolState,
    scores: &ScoreTable,
    features: Option<&FeatureMatrix>,
    config: &SelectionConfig,
    limits: BruteForceLimits,
) -> Result<BruteForceResult> {
    let n = pool.unlabeled().len();
    let k = config.batch_size;
    if n > limits.max_n || k > limits.max_k {
        return Err(Error::InstanceTooLarge {
            n,
            k,
            max_n: limits.max_n,
            max_k: limits.max_k,
        });
    }
    let mut problem = BatchProblem::new(pool, scores, features, config)?;
    problem.build_cache();
    let eval = |b: &[usize]| match config.objective {
        Objective::MaxMin => problem.max_min_objective(b),
        Objective::MaxSum => problem.max_sum_objective(b),
    };
    let cands = problem.candidates.clone();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut combo: Vec<usize> = (0..k).collect();
    loop {
        let batch: Vec<usize> = combo.iter().map(|&i| cands[i]).collect();
        let v = eval(&batch);
        if best.as_ref().is_none_or(|(bv, _)| v > *bv) {
            best = Some((v, batch));
        }
        // next combination in lexicographic order
        let mut i = k;
        while i > 0 && combo[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        combo[i - 1] += 1;
        for j in i..k {
            combo[j] = combo[j - 1] + 1;
        }
    }
    let (objective, batch) = best.expect("at least one subset");
    let grid = pool.grid();
    Ok(BruteForceResult {
        batch: batch.iter().map(|&i| grid.region(i).id).collect(),
        objective,
    })
}

/// Uniform sample of `k` unlabeled regions without replacement.
pub fn random_select(pool: &PoolState, k: usize, seed: u64) -> Result<SelectionResult> {
    let start = Instant::now();
    let free: Vec<RegionId> = pool.unlabeled().iter().copied().collect();
    if free.len() < k {
        return Err(Error::PoolExhausted {
            requested: k,
            available: free.len(),
        });
    }
    let mut rng = stream_rng(seed, Stream::RandomSelect);
    let batch: Vec<RegionId> = index::sample(&mut rng, free.len(), k)
        .iter()
        .map(|i| free[i])
        .collect();
    Ok(SelectionResult {
        picks: batch.iter().map(|&region| zero_pick(region)).collect(),
        batch,
        objective: Objective::MaxMin,
        label: Method::Random.name().to_string(),
        stats: SelectionStats::default(),
        wall_time: start.elapsed(),
    })
}

fn zero_pick(region: RegionId) -> PickDiagnostics {
    PickDiagnostics {
        region,
        potential: 0.0,
        u_term: 0.0,
        d_term: 0.0,
    }
}

/// Half the batch (rounded up) by entropy, the rest uniformly from what remains.
fn entropy_random_select(
    pool: &PoolState,
    scores: &ScoreTable,
    config: &SelectionConfig,
) -> Result<SelectionResult> {
    let start = Instant::now();
    let k = config.batch_size;
    if pool.unlabeled().len() < k {
        return Err(Error::PoolExhausted {
            requested: k,
            available: pool.unlabeled().len(),
        });
    }
    let by_entropy = k.div_ceil(2);
    let entropy_cfg = SelectionConfig {
        lambda_u: 1.0,
        distance: config.distance.with_weights(0.0, 0.0),
        batch_size: by_entropy,
        method: Some(Method::Entropy),
        objective: Objective::MaxMin,
        seed: config.seed,
    };
    let head = greedy_select(pool, scores, None, &entropy_cfg)?;
    let mut rest_pool = pool.clone();
    rest_pool.stage_batch(&head.batch)?;
    let tail = random_select(&rest_pool, k - by_entropy, config.seed)?;
    let mut picks = head.picks;
    picks.extend(tail.picks);
    Ok(SelectionResult {
        batch: picks.iter().map(|p| p.region).collect(),
        picks,
        objective: Objective::MaxMin,
        label: Method::EntropyRandom.name().to_string(),
        stats: head.stats,
        wall_time: start.elapsed(),
    })
}

/// Runs the solver the configuration asks for.
pub fn select_batch(
    pool: &PoolState,
    scores: &ScoreTable,
    features: Option<&FeatureMatrix>,
    config: &SelectionConfig,
) -> Result<SelectionResult> {
    config.validate()?;
    match (config.method, config.objective) {
        (Some(Method::Random), _) => random_select(pool, config.batch_size, config.seed),
        (Some(Method::EntropyRandom), _) => entropy_random_select(pool, scores, config),
        (_, Objective::MaxMin) => greedy_select(pool, scores, features, config),
        (_, Objective::MaxSum) => max_sum_greedy_select(pool, scores, features, config),
    }
}

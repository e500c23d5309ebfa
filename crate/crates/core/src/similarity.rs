//! User-user similarity from co-rated items, from physical propinquity, and a blend of both.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LocalStore, UserId};
use crate::scalar::{cmp_scalar, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Pearson,
    Cosine,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid similarity config: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimilarityConfig<T> {
    pub metric: Metric,
    /// Fewest co-rated items for which a rating similarity is defined.
    pub min_overlap: usize,
    /// Overlap at which the significance weight reaches one.
    pub significance_gamma: usize,
    /// Encounter count scale.
    pub propinquity_kappa: T,
    /// Encounter duration scale, seconds.
    pub propinquity_tau: T,
    /// Share of the propinquity exponent taken by duration rather than count.
    pub duration_weight: T,
    /// Share of the rating similarity in the hybrid.
    pub hybrid_weight: T,
    pub fallback_to_propinquity: bool,
}

impl<T: Scalar> Default for SimilarityConfig<T> {
    fn default() -> Self {
        Self {
            metric: Metric::Pearson,
            min_overlap: 3,
            significance_gamma: 10,
            propinquity_kappa: T::from_f64_lossy(5.0),
            propinquity_tau: T::from_f64_lossy(3600.0),
            duration_weight: T::from_f64_lossy(0.5),
            hybrid_weight: T::from_f64_lossy(0.7),
            fallback_to_propinquity: true,
        }
    }
}

impl<T: Scalar> SimilarityConfig<T> {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let unit = |v: T| v >= T::zero() && v <= T::one();
        let err = |m: &str| Err(ConfigError(m.into()));
        if self.min_overlap < 1 {
            return err("min_overlap must be >= 1");
        }
        if self.significance_gamma < 1 {
            return err("significance_gamma must be >= 1");
        }
        if !(self.propinquity_kappa > T::zero() && self.propinquity_kappa.is_finite()) {
            return err("propinquity_kappa must be > 0");
        }
        if !(self.propinquity_tau > T::zero() && self.propinquity_tau.is_finite()) {
            return err("propinquity_tau must be > 0");
        }
        if !unit(self.duration_weight) {
            return err("duration_weight must lie in [0, 1]");
        }
        if !unit(self.hybrid_weight) {
            return err("hybrid_weight must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Values both users gave to the items they have both rated, in item order.
pub fn co_rated<T: Scalar>(u: UserId, v: UserId, store: &LocalStore) -> (Vec<T>, Vec<T>) {
    let (Some(ru), Some(rv)) = (store.ratings_of(u), store.ratings_of(v)) else {
        return (Vec::new(), Vec::new());
    };
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut a = ru.iter().peekable();
    let mut b = rv.iter().peekable();
    while let (Some((ia, ra)), Some((ib, rb))) = (a.peek(), b.peek()) {
        match ia.cmp(ib) {
            Ordering::Less => {
                a.next();
            }
            Ordering::Greater => {
                b.next();
            }
            Ordering::Equal => {
                xs.push(T::from_rating(ra.value));
                ys.push(T::from_rating(rb.value));
                a.next();
                b.next();
            }
        }
    }
    (xs, ys)
}

/// Pearson correlation of two equally long vectors; `None` if either has zero variance.
pub fn pearson<T: Scalar>(xs: &[T], ys: &[T]) -> Option<T> {
    if xs.is_empty() || xs.len() != ys.len() {
        return None;
    }
    let n = T::from_count(xs.len() as u64);
    let mx = xs.iter().fold(T::zero(), |s, &x| s + x) / n;
    let my = ys.iter().fold(T::zero(), |s, &y| s + y) / n;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy = sxy + dx * dy;
        sxx = sxx + dx * dx;
        syy = syy + dy * dy;
    }
    if sxx <= T::zero() || syy <= T::zero() {
        return None;
    }
    Some(finish_correlation(sxy / (sxx * syy).sqrt(), xs.len()))
}

/// Clamps to `[-1, 1]` and zeroes values smaller than the rounding error of an `n`-term sum, so
/// that an uncorrelated pair never counts as a (barely) positive neighbor.
fn finish_correlation<T: Scalar>(r: T, n: usize) -> T {
    let noise = T::from_count(4 * n as u64) * T::epsilon();
    if r.abs() <= noise {
        T::zero()
    } else {
        r.max(-T::one()).min(T::one())
    }
}

/// Cosine of two equally long vectors; `None` if either has zero norm.
pub fn cosine<T: Scalar>(xs: &[T], ys: &[T]) -> Option<T> {
    if xs.is_empty() || xs.len() != ys.len() {
        return None;
    }
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in xs.iter().zip(ys) {
        sxy = sxy + x * y;
        sxx = sxx + x * x;
        syy = syy + y * y;
    }
    if sxx <= T::zero() || syy <= T::zero() {
        return None;
    }
    Some(finish_correlation(sxy / (sxx * syy).sqrt(), xs.len()))
}

/// Shrinkage factor `min(n, gamma) / gamma`.
pub fn significance_weight<T: Scalar>(n_co: usize, gamma: usize) -> T {
    T::from_count(n_co.min(gamma) as u64) / T::from_count(gamma as u64)
}

/// Similarity of two users over their co-rated items, or `None` when undefined
/// (too little overlap or a degenerate vector).
pub fn rating_similarity<T: Scalar>(
    u: UserId,
    v: UserId,
    store: &LocalStore,
    cfg: &SimilarityConfig<T>,
) -> Option<T> {
    let (xs, ys) = co_rated::<T>(u, v, store);
    if xs.len() < cfg.min_overlap {
        return None;
    }
    let core = match cfg.metric {
        Metric::Pearson => pearson(&xs, &ys)?,
        Metric::Cosine => cosine(&xs, &ys)?,
    };
    Some(core * significance_weight(xs.len(), cfg.significance_gamma))
}

/// Saturating score of how much time the store owner spent near `peer`:
/// `1 - exp(-((1 - beta) * count / kappa + beta * duration / tau))`.
pub fn propinquity_similarity<T: Scalar>(
    store: &LocalStore,
    peer: UserId,
    cfg: &SimilarityConfig<T>,
) -> T {
    let e = store.encounter(peer);
    propinquity_from(e.count, e.total_duration, cfg)
}

pub fn propinquity_from<T: Scalar>(count: u64, duration: u64, cfg: &SimilarityConfig<T>) -> T {
    let beta = cfg.duration_weight;
    let x = (T::one() - beta) * T::from_count(count) / cfg.propinquity_kappa
        + beta * T::from_count(duration) / cfg.propinquity_tau;
    // -expm1(-x) keeps precision near zero; cap below one once it saturates
    let s = -(-x).exp_m1();
    s.min(T::one() - T::epsilon())
}

/// Proximity between two users as seen from this store. Only the owner's own encounters are
/// known, so pairs that do not include the owner score zero.
pub fn pair_propinquity<T: Scalar>(
    u: UserId,
    v: UserId,
    store: &LocalStore,
    cfg: &SimilarityConfig<T>,
) -> T {
    let owner = store.owner();
    if u == owner && v != owner {
        propinquity_similarity(store, v, cfg)
    } else if v == owner && u != owner {
        propinquity_similarity(store, u, cfg)
    } else {
        T::zero()
    }
}

/// Blend of rating and propinquity similarity.
pub fn hybrid_similarity<T: Scalar>(
    u: UserId,
    v: UserId,
    store: &LocalStore,
    cfg: &SimilarityConfig<T>,
) -> T {
    let prox = pair_propinquity(u, v, store, cfg);
    blend(rating_similarity(u, v, store, cfg), prox, cfg)
}

pub fn blend<T: Scalar>(rating: Option<T>, prox: T, cfg: &SimilarityConfig<T>) -> T {
    match rating {
        Some(s) => cfg.hybrid_weight * s + (T::one() - cfg.hybrid_weight) * prox,
        None if cfg.fallback_to_propinquity => prox,
        None => T::zero(),
    }
}

/// Up to `k` candidates with positive hybrid similarity to `u`, best first, ties by user id.
pub fn select_neighbors<T: Scalar>(
    u: UserId,
    candidates: impl IntoIterator<Item = UserId>,
    k: usize,
    store: &LocalStore,
    cfg: &SimilarityConfig<T>,
) -> Vec<(UserId, T)> {
    let mut scored: Vec<(UserId, T)> = candidates
        .into_iter()
        .filter(|&v| v != u)
        .map(|v| (v, hybrid_similarity(u, v, store, cfg)))
        .filter(|&(_, s)| s > T::zero())
        .collect();
    rank_neighbors(&mut scored, k);
    scored
}

/// Similarities are ranked on a 2^-40 grid: values that differ only by rounding tie and fall back
/// to user id order.
pub fn rank_key<T: Scalar>(s: T) -> T {
    let grid = T::from_f64_lossy(1_099_511_627_776.0);
    (s * grid).round()
}

pub(crate) fn rank_neighbors<T: Scalar>(scored: &mut Vec<(UserId, T)>, k: usize) {
    scored.sort_by(|a, b| cmp_scalar(rank_key(b.1), rank_key(a.1)).then(a.0.cmp(&b.0)));
    scored.dedup_by_key(|e| e.0);
    scored.truncate(k);
}

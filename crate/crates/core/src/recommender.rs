//! Local rating prediction, top-N lists and ad-hoc group recommendation.
//!
//! Collaborative predictions use the mean-centred weighted sum
//! `mean_u + sum_v s(u,v) * (r_vi - mean_v) / sum_v |s(u,v)|` over the `k` most similar raters of
//! the item, clamped to the rating scale.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingestion::Catalog;
use crate::model::{ItemId, LocalStore, RatingScale, UserId};
use crate::scalar::{cmp_scalar, Scalar};
use crate::similarity::{hybrid_similarity, rank_neighbors, SimilarityConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecommendError {
    #[error("user {0} has no ratings in the store")]
    ColdUser(UserId),
    #[error("group members unknown to the store: {}", join_ids(.0))]
    UnknownMembers(Vec<UserId>),
    #[error("a group needs at least two members")]
    GroupTooSmall,
    #[error("item {0} is not in the catalog")]
    NotInCatalog(ItemId),
    #[error("user {0} has not rated any cataloged item")]
    NoCatalogRatings(UserId),
}

fn join_ids(ids: &[UserId]) -> String {
    ids.iter()
        .map(|u| u.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    Cf,
    Content,
    UserMeanFallback,
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Basis::Cf => "cf",
            Basis::Content => "content",
            Basis::UserMeanFallback => "user_mean_fallback",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub item: ItemId,
    pub score: T,
    pub basis: Basis,
    pub n_neighbors_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupStrategy {
    Average,
    LeastMisery,
    MostPleasure,
}

impl GroupStrategy {
    pub fn aggregate<T: Scalar>(self, scores: &[T]) -> T {
        match self {
            GroupStrategy::Average => {
                let lo = GroupStrategy::LeastMisery.aggregate(scores);
                let hi = GroupStrategy::MostPleasure.aggregate(scores);
                let mean = scores.iter().fold(T::zero(), |s, &x| s + x)
                    / T::from_count(scores.len() as u64);
                // rounding in the sum must not push the mean outside [min, max]
                mean.max(lo).min(hi)
            }
            GroupStrategy::LeastMisery => scores.iter().copied().fold(T::infinity(), T::min),
            GroupStrategy::MostPleasure => scores.iter().copied().fold(T::neg_infinity(), T::max),
        }
    }
}

impl FromStr for GroupStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "average" => Ok(GroupStrategy::Average),
            "least_misery" => Ok(GroupStrategy::LeastMisery),
            "most_pleasure" => Ok(GroupStrategy::MostPleasure),
            other => Err(format!("unknown group strategy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupPrediction<T> {
    pub item: ItemId,
    pub score: T,
    /// Member predictions in member order.
    pub members: Vec<Prediction<T>>,
}

/// Mean of a user's ratings in the store.
pub fn user_mean<T: Scalar>(store: &LocalStore, u: UserId) -> Option<T> {
    let ratings = store.ratings_of(u)?;
    let sum = ratings
        .values()
        .fold(T::zero(), |s, r| s + T::from_rating(r.value));
    Some(sum / T::from_count(ratings.len() as u64))
}

fn clamp<T: Scalar>(v: T, scale: &RatingScale) -> T {
    let lo = T::from_rating(scale.min);
    let hi = T::from_rating(scale.max);
    v.max(lo).min(hi)
}

/// Per-user prediction state: the user's mean and similarities to every other rater.
pub struct Predictor<'s, T> {
    store: &'s LocalStore,
    user: UserId,
    k: usize,
    mean: T,
    /// Positive-similarity raters with their similarity and mean.
    neighbors: BTreeMap<UserId, (T, T)>,
}

impl<'s, T: Scalar> Predictor<'s, T> {
    pub fn new(
        user: UserId,
        store: &'s LocalStore,
        cfg: &SimilarityConfig<T>,
        k: usize,
    ) -> Result<Self, RecommendError> {
        let mean = user_mean(store, user).ok_or(RecommendError::ColdUser(user))?;
        let neighbors = store
            .raters()
            .filter(|&v| v != user)
            .filter_map(|v| {
                let s = hybrid_similarity(user, v, store, cfg);
                (s > T::zero()).then(|| (v, (s, user_mean(store, v).expect("rater has ratings"))))
            })
            .collect();
        Ok(Self {
            store,
            user,
            k,
            mean,
            neighbors,
        })
    }

    pub fn user(&self) -> UserId {
        self.user
    }

    pub fn mean(&self) -> T {
        self.mean
    }

    pub fn predict(&self, item: &ItemId) -> Prediction<T> {
        let mut scored: Vec<(UserId, T)> = self
            .neighbors
            .iter()
            .filter(|(v, _)| self.store.get(**v, item).is_some())
            .map(|(v, (s, _))| (*v, *s))
            .collect();
        rank_neighbors(&mut scored, self.k);
        if scored.is_empty() {
            return Prediction {
                item: item.clone(),
                score: clamp(self.mean, &self.store.scale()),
                basis: Basis::UserMeanFallback,
                n_neighbors_used: 0,
            };
        }
        let (mut num, mut den) = (T::zero(), T::zero());
        for (v, s) in &scored {
            let r_vi = T::from_rating(self.store.get(*v, item).expect("filtered").value);
            let mean_v = self.neighbors[v].1;
            num = num + *s * (r_vi - mean_v);
            den = den + s.abs();
        }
        Prediction {
            item: item.clone(),
            score: clamp(self.mean + num / den, &self.store.scale()),
            basis: Basis::Cf,
            n_neighbors_used: scored.len(),
        }
    }
}

/// Predicts `u`'s rating of `item` from the `k` most similar raters of the item.
pub fn predict<T: Scalar>(
    u: UserId,
    item: &ItemId,
    store: &LocalStore,
    cfg: &SimilarityConfig<T>,
    k: usize,
) -> Result<Prediction<T>, RecommendError> {
    Ok(Predictor::new(u, store, cfg, k)?.predict(item))
}

fn rank_predictions<T: Scalar>(preds: &mut [Prediction<T>]) {
    preds.sort_by(|a, b| cmp_scalar(b.score, a.score).then_with(|| a.item.cmp(&b.item)));
}

/// Best `n` items for `u`, excluding items `u` has rated. Candidates default to every item in the
/// store.
pub fn top_n<T: Scalar>(
    u: UserId,
    n: usize,
    store: &LocalStore,
    cfg: &SimilarityConfig<T>,
    k: usize,
    candidates: Option<&[ItemId]>,
) -> Result<Vec<Prediction<T>>, RecommendError> {
    let predictor = Predictor::new(u, store, cfg, k)?;
    let rated = store.ratings_of(u).expect("predictor checked");
    let pool: Vec<ItemId> = match candidates {
        Some(c) => c
            .iter()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
        None => store.items(),
    };
    let mut preds: Vec<Prediction<T>> = pool
        .iter()
        .filter(|i| !rated.contains_key(*i))
        .map(|i| predictor.predict(i))
        .collect();
    rank_predictions(&mut preds);
    preds.truncate(n);
    Ok(preds)
}

/// Content-based score: cosine between `u`'s attribute profile and the item's attributes, mapped
/// from `[-1, 1]` onto the rating scale. The profile averages the attribute vectors of `u`'s
/// cataloged items weighted by `rating - midpoint`.
pub fn content_score<T: Scalar>(
    u: UserId,
    item: &ItemId,
    store: &LocalStore,
    catalog: &Catalog,
) -> Result<Prediction<T>, RecommendError> {
    let target = catalog
        .get(item)
        .ok_or_else(|| RecommendError::NotInCatalog(item.clone()))?;
    let ratings = store.ratings_of(u).ok_or(RecommendError::ColdUser(u))?;
    let scale = store.scale();
    let mid = T::from_f64_lossy(scale.midpoint());
    let dims = catalog.schema.len();
    let mut profile = vec![T::zero(); dims];
    let mut total = T::zero();
    let mut any = false;
    for (id, r) in ratings {
        let Some(meta) = catalog.get(id) else {
            continue;
        };
        any = true;
        let w = T::from_rating(r.value) - mid;
        for (p, &a) in profile.iter_mut().zip(&meta.weights) {
            *p = *p + w * T::from_f64_lossy(a);
        }
        total = total + w.abs();
    }
    if !any {
        return Err(RecommendError::NoCatalogRatings(u));
    }
    let midpoint = Prediction {
        item: item.clone(),
        score: mid,
        basis: Basis::Content,
        n_neighbors_used: 0,
    };
    if total <= T::zero() {
        return Ok(midpoint);
    }
    for p in &mut profile {
        *p = *p / total;
    }
    let attrs: Vec<T> = target
        .weights
        .iter()
        .map(|&a| T::from_f64_lossy(a))
        .collect();
    let dot = profile
        .iter()
        .zip(&attrs)
        .fold(T::zero(), |s, (&p, &a)| s + p * a);
    let np = profile.iter().fold(T::zero(), |s, &p| s + p * p).sqrt();
    let na = attrs.iter().fold(T::zero(), |s, &a| s + a * a).sqrt();
    if np <= T::zero() || na <= T::zero() {
        return Ok(midpoint);
    }
    let cos = (dot / (np * na)).max(-T::one()).min(T::one());
    let half_range = (T::from_rating(scale.max) - T::from_rating(scale.min)) / T::two();
    Ok(Prediction {
        score: clamp(mid + cos * half_range, &scale),
        ..midpoint
    })
}

/// Ranks items none of the members has rated by the aggregate of member predictions.
pub fn group_recommend<T: Scalar>(
    members: &[UserId],
    n: usize,
    store: &LocalStore,
    cfg: &SimilarityConfig<T>,
    k: usize,
    strategy: GroupStrategy,
) -> Result<Vec<GroupPrediction<T>>, RecommendError> {
    if members.len() < 2 {
        return Err(RecommendError::GroupTooSmall);
    }
    let missing: Vec<UserId> = members
        .iter()
        .copied()
        .filter(|&m| store.ratings_of(m).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(RecommendError::UnknownMembers(missing));
    }
    let predictors = members
        .iter()
        .map(|&m| Predictor::new(m, store, cfg, k))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out: Vec<GroupPrediction<T>> = store
        .items()
        .into_iter()
        .filter(|i| members.iter().all(|&m| store.get(m, i).is_none()))
        .map(|item| {
            let preds: Vec<Prediction<T>> = predictors.iter().map(|p| p.predict(&item)).collect();
            let scores: Vec<T> = preds.iter().map(|p| p.score).collect();
            GroupPrediction {
                score: strategy.aggregate(&scores),
                item,
                members: preds,
            }
        })
        .collect();
    out.sort_by(|a, b| cmp_scalar(b.score, a.score).then_with(|| a.item.cmp(&b.item)));
    out.truncate(n);
    Ok(out)
}

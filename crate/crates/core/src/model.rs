//! Domain types and the per-node local store.
//!
//! A [`LocalStore`] holds at most one [`RatingRecord`] per `(rater, item)` key. Conflicts between
//! copies of the same key are resolved by [`LocalStore::merge_record`]: the newer timestamp wins,
//! equal timestamps prefer the lower hop count, and anything else keeps the existing record. A
//! node's own records are never overwritten by copies received from peers.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulation time and durations, in whole seconds.
pub type SimTime = u64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ValidationError {
    #[error("rating value {value} outside scale [{min}, {max}]")]
    ValueOutOfScale { value: f32, min: f32, max: f32 },
    #[error("item key must be non-empty")]
    EmptyKey,
    #[error("item key is {0} bytes, longer than the 65535 byte limit")]
    KeyTooLong(usize),
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("invalid rating scale [{min}, {max}]")]
    BadScale { min: f32, max: f32 },
    #[error("unknown rating source `{0}`")]
    UnknownSource(String),
    #[error("ontology must hold between 1 and 256 distinct names")]
    BadOntology,
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct UserId(pub u64);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Index of a category name in the configured [`Ontology`]. Ordering follows the ontology order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Category(pub u8);

/// The list of category names items can belong to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Ontology {
    names: Vec<String>,
}

impl Ontology {
    pub fn new<I, S>(names: I) -> Result<Self, ValidationError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() || names.len() > 256 {
            return Err(ValidationError::BadOntology);
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || names[..i].contains(n) {
                return Err(ValidationError::BadOntology);
            }
        }
        Ok(Self { names })
    }

    pub fn category(&self, name: &str) -> Result<Category, ValidationError> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| Category(i as u8))
            .ok_or_else(|| ValidationError::UnknownCategory(name.to_string()))
    }

    pub fn name(&self, category: Category) -> Option<&str> {
        self.names.get(category.0 as usize).map(String::as_str)
    }

    pub fn contains(&self, category: Category) -> bool {
        (category.0 as usize) < self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

impl Default for Ontology {
    fn default() -> Self {
        Self {
            names: vec!["movies".into(), "music".into(), "poi".into()],
        }
    }
}

impl TryFrom<Vec<String>> for Ontology {
    type Error = ValidationError;

    fn try_from(names: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(names)
    }
}

impl From<Ontology> for Vec<String> {
    fn from(o: Ontology) -> Self {
        o.names
    }
}

/// Globally valid item identifier: a key within a category namespace.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ItemId {
    pub category: Category,
    key: Arc<str>,
}

impl ItemId {
    pub fn new(category: Category, key: &str) -> Result<Self, ValidationError> {
        if key.is_empty() {
            return Err(ValidationError::EmptyKey);
        }
        if key.len() > u16::MAX as usize {
            return Err(ValidationError::KeyTooLong(key.len()));
        }
        Ok(Self {
            category,
            key: Arc::from(key),
        })
    }

    pub fn key(&self) -> &str {
        &self.key
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.category.0, self.key)
    }
}

/// Closed interval of admissible rating values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatingScale {
    pub min: f32,
    pub max: f32,
}

impl RatingScale {
    pub fn new(min: f32, max: f32) -> Result<Self, ValidationError> {
        let scale = Self { min, max };
        scale.validate()?;
        Ok(scale)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.min.is_finite() && self.max.is_finite() && self.min < self.max {
            Ok(())
        } else {
            Err(ValidationError::BadScale {
                min: self.min,
                max: self.max,
            })
        }
    }

    pub fn check(&self, value: f32) -> Result<(), ValidationError> {
        if value >= self.min && value <= self.max {
            Ok(())
        } else {
            Err(ValidationError::ValueOutOfScale {
                value,
                min: self.min,
                max: self.max,
            })
        }
    }

    pub fn midpoint(&self) -> f64 {
        (f64::from(self.min) + f64::from(self.max)) / 2.0
    }
}

impl Default for RatingScale {
    fn default() -> Self {
        Self { min: 1.0, max: 5.0 }
    }
}

/// How a rating was collected on the rater's device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    Tracked,
    ThirdParty,
    Manual,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Tracked => "tracked",
            Source::ThirdParty => "third_party",
            Source::Manual => "manual",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Source::Tracked => 0,
            Source::ThirdParty => 1,
            Source::Manual => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Source::Tracked),
            1 => Some(Source::ThirdParty),
            2 => Some(Source::Manual),
            _ => None,
        }
    }
}

impl FromStr for Source {
    type Err = ValidationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tracked" => Ok(Source::Tracked),
            "third_party" => Ok(Source::ThirdParty),
            "manual" => Ok(Source::Manual),
            other => Err(ValidationError::UnknownSource(other.to_string())),
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One `(rater, item, value)` fact; the unit of exchange between nodes.
///
/// `hops` is 0 on the rater's own device and counts relay steps everywhere else.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingRecord {
    pub rater: UserId,
    pub item: ItemId,
    pub value: f32,
    pub timestamp: u64,
    pub source: Source,
    pub hops: u8,
}

impl RatingRecord {
    pub fn own(rater: UserId, item: ItemId, value: f32, timestamp: u64, source: Source) -> Self {
        Self {
            rater,
            item,
            value,
            timestamp,
            source,
            hops: 0,
        }
    }

    pub fn key(&self) -> (UserId, &ItemId) {
        (self.rater, &self.item)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeOutcome {
    Inserted,
    Replaced,
    Ignored,
}

/// Aggregate of all encounters with one peer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EncounterStats {
    pub count: u64,
    pub total_duration: SimTime,
}

/// A node's merged rating database plus its encounter log.
#[derive(Debug, Clone)]
pub struct LocalStore {
    owner: UserId,
    scale: RatingScale,
    by_rater: BTreeMap<UserId, BTreeMap<ItemId, RatingRecord>>,
    len: usize,
    encounters: BTreeMap<UserId, EncounterStats>,
}

impl LocalStore {
    pub fn new(owner: UserId, scale: RatingScale) -> Self {
        Self {
            owner,
            scale,
            by_rater: BTreeMap::new(),
            len: 0,
            encounters: BTreeMap::new(),
        }
    }

    pub fn owner(&self) -> UserId {
        self.owner
    }

    pub fn scale(&self) -> RatingScale {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Merges one record, returning what happened to the stored copy.
    pub fn merge_record(&mut self, rec: RatingRecord) -> Result<MergeOutcome, ValidationError> {
        self.scale.check(rec.value)?;
        let is_own = rec.rater == self.owner;
        if is_own && rec.hops != 0 {
            // a relayed copy of our own rating never overrides the local original
            return Ok(MergeOutcome::Ignored);
        }
        let items = self.by_rater.entry(rec.rater).or_default();
        match items.entry(rec.item.clone()) {
            Entry::Vacant(slot) => {
                slot.insert(rec);
                self.len += 1;
                Ok(MergeOutcome::Inserted)
            }
            Entry::Occupied(mut slot) => {
                let existing = slot.get();
                let wins = rec.timestamp > existing.timestamp
                    || (rec.timestamp == existing.timestamp && rec.hops < existing.hops);
                if wins {
                    slot.insert(rec);
                    Ok(MergeOutcome::Replaced)
                } else {
                    Ok(MergeOutcome::Ignored)
                }
            }
        }
    }

    pub fn record_encounter(&mut self, peer: UserId, duration: SimTime) {
        let e = self.encounters.entry(peer).or_default();
        e.count += 1;
        e.total_duration += duration;
    }

    pub fn encounter(&self, peer: UserId) -> EncounterStats {
        self.encounters.get(&peer).copied().unwrap_or_default()
    }

    pub fn encounters(&self) -> impl Iterator<Item = (UserId, EncounterStats)> + '_ {
        self.encounters.iter().map(|(u, e)| (*u, *e))
    }

    pub fn get(&self, rater: UserId, item: &ItemId) -> Option<&RatingRecord> {
        self.by_rater.get(&rater)?.get(item)
    }

    /// Ratings by one user, keyed by item; `None` if the store holds none.
    pub fn ratings_of(&self, rater: UserId) -> Option<&BTreeMap<ItemId, RatingRecord>> {
        self.by_rater.get(&rater).filter(|m| !m.is_empty())
    }

    pub fn raters(&self) -> impl Iterator<Item = UserId> + '_ {
        self.by_rater
            .iter()
            .filter(|(_, m)| !m.is_empty())
            .map(|(u, _)| *u)
    }

    /// All records, sorted by `(rater, item)`.
    pub fn records(&self) -> impl Iterator<Item = &RatingRecord> + '_ {
        self.by_rater.values().flat_map(|m| m.values())
    }

    pub fn own_records(&self) -> impl Iterator<Item = &RatingRecord> + '_ {
        self.by_rater
            .get(&self.owner)
            .into_iter()
            .flat_map(|m| m.values())
    }

    /// Every distinct item rated by anyone in the store, sorted.
    pub fn items(&self) -> Vec<ItemId> {
        let mut items: Vec<ItemId> = self
            .by_rater
            .values()
            .flat_map(|m| m.keys().cloned())
            .collect();
        items.sort();
        items.dedup();
        items
    }
}

/// Item attributes from a catalog; weights live in `[0, 1]`, aligned with the catalog schema.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemMeta {
    pub item: ItemId,
    pub weights: Vec<f64>,
}

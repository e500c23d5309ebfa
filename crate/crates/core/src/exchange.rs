//! Store-and-forward exchange through a simulated cloud storage provider.
//!
//! Nodes periodically upload a [`Payload`] of their records to the [`CspSim`] and receive a
//! [`Token`]. On an encounter, each side broadcasts a small [`Advertisement`] carrying its token;
//! the peer fetches the payload later (after `fetch_deferral`) and merges it into its store.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::num::NonZeroU8;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, CodecError, Token, TOKEN_LEN};
use crate::ingestion::EncounterEvent;
use crate::model::{LocalStore, MergeOutcome, RatingRecord, SimTime, UserId, ValidationError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("own records of node {owner} need {size} bytes, over the payload cap of {cap}")]
    StoreTooLarge {
        owner: UserId,
        size: usize,
        cap: usize,
    },
    #[error("advertisement of {size} bytes exceeds the cap of {cap}")]
    AdvertisementTooLarge { size: usize, cap: usize },
    #[error("invalid exchange policy: {0}")]
    BadPolicy(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Whether, and how far, received records are forwarded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RelaySetting", into = "RelaySetting")]
pub enum Relay {
    Off,
    /// Forward records whose stored hop count is below the limit.
    MaxHops(NonZeroU8),
    /// No limit beyond what the one-byte hop field can carry.
    Unbounded,
}

impl Relay {
    /// Highest hop count a record may carry inside a payload.
    pub fn max_emitted_hops(self) -> u8 {
        match self {
            Relay::Off => 1,
            Relay::MaxHops(n) => n.get(),
            Relay::Unbounded => u8::MAX,
        }
    }
}

impl fmt::Display for Relay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Relay::Off => f.write_str("off"),
            Relay::MaxHops(n) => write!(f, "{n}"),
            Relay::Unbounded => f.write_str("unbounded"),
        }
    }
}

/// Config-file form: `"off"`, `"unbounded"`, or a hop limit `>= 1`.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RelaySetting {
    Hops(u64),
    Word(String),
}

impl TryFrom<RelaySetting> for Relay {
    type Error = String;

    fn try_from(s: RelaySetting) -> Result<Self, Self::Error> {
        match s {
            RelaySetting::Word(w) if w == "off" => Ok(Relay::Off),
            RelaySetting::Word(w) if w == "unbounded" || w == "inf" => Ok(Relay::Unbounded),
            RelaySetting::Word(w) => Err(format!("unknown relay setting `{w}`")),
            RelaySetting::Hops(n) => u8::try_from(n)
                .ok()
                .and_then(NonZeroU8::new)
                .map(Relay::MaxHops)
                .ok_or_else(|| format!("relay hop limit {n} must be in 1..=255")),
        }
    }
}

impl From<Relay> for RelaySetting {
    fn from(r: Relay) -> Self {
        match r {
            Relay::Off => RelaySetting::Word("off".into()),
            Relay::MaxHops(n) => RelaySetting::Hops(u64::from(n.get())),
            Relay::Unbounded => RelaySetting::Word("unbounded".into()),
        }
    }
}

pub const DEFAULT_ADV_SIZE_CAP: usize = 512;
pub const DEFAULT_PAYLOAD_SIZE_CAP: usize = 4 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExchangePolicy {
    /// Seconds between two uploads of the same node.
    pub upload_period: SimTime,
    #[serde(default = "default_relay")]
    pub relay: Relay,
    /// Delay between receiving an advertisement and fetching its payload.
    #[serde(default)]
    pub fetch_deferral: SimTime,
    #[serde(default = "default_adv_cap")]
    pub adv_size_cap: usize,
    #[serde(default = "default_payload_cap")]
    pub payload_size_cap: usize,
}

fn default_relay() -> Relay {
    Relay::Off
}

fn default_adv_cap() -> usize {
    DEFAULT_ADV_SIZE_CAP
}

fn default_payload_cap() -> usize {
    DEFAULT_PAYLOAD_SIZE_CAP
}

impl ExchangePolicy {
    pub fn new(upload_period: SimTime, relay: Relay) -> Self {
        Self {
            upload_period,
            relay,
            fetch_deferral: 0,
            adv_size_cap: DEFAULT_ADV_SIZE_CAP,
            payload_size_cap: DEFAULT_PAYLOAD_SIZE_CAP,
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.upload_period == 0 {
            return Err(ProtocolError::BadPolicy("upload_period must be > 0".into()));
        }
        if self.adv_size_cap == 0 || self.payload_size_cap == 0 {
            return Err(ProtocolError::BadPolicy("size caps must be > 0".into()));
        }
        Ok(())
    }
}

/// The record set a node publishes, as stored at the CSP.
#[derive(Debug, Clone, PartialEq)]
pub struct Payload {
    pub sender: UserId,
    /// Sorted by `(rater, item)`, one record per key.
    pub records: Vec<RatingRecord>,
    pub created_at: SimTime,
}

impl Payload {
    pub fn encoded_len(&self) -> usize {
        codec::payload_len(&self.records)
    }

    pub fn encode(&self) -> Result<Vec<u8>, CodecError> {
        codec::encode_payload(self.sender, &self.records)
    }
}

/// Assembles the payload a node uploads at `now`.
///
/// Own records are always included; with relay on, received records whose hop count is below the
/// limit are added. Every emitted record carries its stored hop count plus one. If the result is
/// over `payload_size_cap`, records are kept in order of increasing hop count (ties by
/// `(rater, item)`) until the cap is reached.
pub fn build_payload(
    store: &LocalStore,
    policy: &ExchangePolicy,
    now: SimTime,
) -> Result<Payload, ProtocolError> {
    let owner = store.owner();
    let limit = policy.relay.max_emitted_hops();
    let relay_on = policy.relay != Relay::Off;
    let mut records: Vec<RatingRecord> = store
        .records()
        .filter(|r| r.rater == owner || (relay_on && r.hops < limit))
        .map(|r| RatingRecord {
            hops: r.hops + 1,
            ..r.clone()
        })
        .collect();

    let cap = policy.payload_size_cap;
    if codec::payload_len(&records) > cap {
        let own_size = codec::payload_len(records.iter().filter(|r| r.rater == owner));
        if own_size > cap {
            return Err(ProtocolError::StoreTooLarge {
                owner,
                size: own_size,
                cap,
            });
        }
        // own records first, then by hop count; the sort is stable so ties keep key order
        records.sort_by_key(|r| (r.rater != owner, r.hops));
        let mut size = codec::PAYLOAD_HEADER_LEN;
        let keep = records
            .iter()
            .take_while(|r| {
                size += codec::record_len(r);
                size <= cap
            })
            .count();
        records.truncate(keep);
        records.sort_by(|x, y| (x.rater, &x.item).cmp(&(y.rater, &y.item)));
    }
    Ok(Payload {
        sender: owner,
        records,
        created_at: now,
    })
}

/// Broadcast message pointing at a node's current payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Advertisement {
    pub sender: UserId,
    pub token: Token,
    pub issued_at: SimTime,
}

impl Advertisement {
    pub fn encode(&self) -> Result<Vec<u8>, CodecError> {
        codec::encode_advertisement(self.sender, &self.token, self.issued_at)
    }

    pub fn encoded_len(&self) -> usize {
        codec::ADVERT_LEN
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CspSettings {
    /// Seconds before an uploaded payload becomes fetchable.
    #[serde(default)]
    pub upload_latency: SimTime,
    /// Seconds a fetch takes; the merge happens this long after the fetch is due.
    #[serde(default)]
    pub fetch_latency: SimTime,
    /// Probability that any single fetch succeeds.
    #[serde(default = "full_availability")]
    pub availability: f64,
}

fn full_availability() -> f64 {
    1.0
}

impl Default for CspSettings {
    fn default() -> Self {
        Self {
            upload_latency: 0,
            fetch_latency: 0,
            availability: 1.0,
        }
    }
}

impl CspSettings {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if (0.0..=1.0).contains(&self.availability) {
            Ok(())
        } else {
            Err(ProtocolError::BadPolicy(format!(
                "availability {} outside [0, 1]",
                self.availability
            )))
        }
    }
}

#[derive(Debug, Clone)]
struct StoredObject {
    sender: UserId,
    bytes: Vec<u8>,
    upload_time: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DropReason {
    /// Never issued, or replaced by a newer upload of the same sender.
    UnknownToken,
    NotYetAvailable {
        ready_at: SimTime,
    },
    Unavailable,
    Malformed(String),
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DropReason::UnknownToken => f.write_str("unknown or replaced token"),
            DropReason::NotYetAvailable { ready_at } => {
                write!(f, "not available before {ready_at}")
            }
            DropReason::Unavailable => f.write_str("storage unavailable"),
            DropReason::Malformed(m) => write!(f, "malformed payload: {m}"),
        }
    }
}

/// In-memory stand-in for a third-party cloud storage provider.
///
/// Keeps one live object per sender; a new upload invalidates the sender's previous token.
#[derive(Debug, Clone)]
pub struct CspSim {
    settings: CspSettings,
    objects: HashMap<Token, StoredObject>,
    live: HashMap<UserId, Token>,
    issued: HashSet<Token>,
    rng: ChaCha8Rng,
}

impl CspSim {
    pub fn new(settings: CspSettings, seed: u64) -> Result<Self, ProtocolError> {
        settings.validate()?;
        Ok(Self {
            settings,
            objects: HashMap::new(),
            live: HashMap::new(),
            issued: HashSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn settings(&self) -> &CspSettings {
        &self.settings
    }

    fn fresh_token(&mut self) -> Token {
        loop {
            let mut raw = [0u8; TOKEN_LEN];
            self.rng.fill(&mut raw);
            let token = Token(raw);
            if self.issued.insert(token) {
                return token;
            }
        }
    }

    /// Stores the encoded payload and returns a fresh token for it.
    pub fn upload(&mut self, payload: &Payload, now: SimTime) -> Result<Token, ProtocolError> {
        let bytes = payload.encode()?;
        Ok(self.upload_bytes(payload.sender, bytes, now))
    }

    pub fn upload_bytes(&mut self, sender: UserId, bytes: Vec<u8>, now: SimTime) -> Token {
        let token = self.fresh_token();
        if let Some(old) = self.live.insert(sender, token) {
            self.objects.remove(&old);
        }
        self.objects.insert(
            token,
            StoredObject {
                sender,
                bytes,
                upload_time: now,
            },
        );
        token
    }

    /// Raw bytes behind a token, subject to latency and availability.
    pub fn fetch(&mut self, token: &Token, now: SimTime) -> Result<(&[u8], SimTime), DropReason> {
        // draw first so that the random stream does not depend on the token state
        let up = self.rng.random_bool(self.settings.availability);
        let obj = self.objects.get(token).ok_or(DropReason::UnknownToken)?;
        let ready_at = obj.upload_time + self.settings.upload_latency;
        if now < ready_at {
            return Err(DropReason::NotYetAvailable { ready_at });
        }
        if !up {
            return Err(DropReason::Unavailable);
        }
        Ok((&obj.bytes, obj.upload_time))
    }

    pub fn live_token(&self, sender: UserId) -> Option<Token> {
        self.live.get(&sender).copied()
    }

    pub fn object_sender(&self, token: &Token) -> Option<UserId> {
        self.objects.get(token).map(|o| o.sender)
    }
}

/// A fetch scheduled as the result of receiving an advertisement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PendingFetch {
    pub due: SimTime,
    pub fetcher: UserId,
    pub sender: UserId,
    pub token: Token,
}

/// Handles one encounter: both stores log the contact and each side queues a fetch of the peer's
/// advertised payload. A side without a token yet advertises nothing.
pub fn broadcast_on_encounter(
    a_store: &mut LocalStore,
    b_store: &mut LocalStore,
    a_ad: Option<&Advertisement>,
    b_ad: Option<&Advertisement>,
    event: &EncounterEvent,
    policy: &ExchangePolicy,
) -> Result<Vec<PendingFetch>, ProtocolError> {
    a_store.record_encounter(b_store.owner(), event.duration);
    b_store.record_encounter(a_store.owner(), event.duration);
    let due = event.time + policy.fetch_deferral;
    let mut pending = Vec::with_capacity(2);
    for (ad, fetcher) in [(a_ad, b_store.owner()), (b_ad, a_store.owner())] {
        let Some(ad) = ad else { continue };
        let size = ad.encode()?.len();
        if size > policy.adv_size_cap {
            return Err(ProtocolError::AdvertisementTooLarge {
                size,
                cap: policy.adv_size_cap,
            });
        }
        pending.push(PendingFetch {
            due,
            fetcher,
            sender: ad.sender,
            token: ad.token,
        });
    }
    Ok(pending)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MergeStats {
    pub inserted: usize,
    pub replaced: usize,
    pub ignored: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FetchOutcome {
    Merged { payload: Payload, stats: MergeStats },
    Dropped(DropReason),
}

/// Fetches the payload behind `token` and merges every record into `store`.
///
/// Failures are not errors: the fetch is dropped and nothing is merged. A payload with any
/// invalid record is dropped as a whole.
pub fn fetch_and_merge(
    store: &mut LocalStore,
    csp: &mut CspSim,
    token: &Token,
    now: SimTime,
) -> FetchOutcome {
    let (sender, records, uploaded) = match csp.fetch(token, now) {
        Ok((bytes, uploaded)) => match codec::decode_payload(bytes) {
            Ok((sender, records)) => (sender, records, uploaded),
            Err(e) => return dropped(store, DropReason::Malformed(e.to_string())),
        },
        Err(reason) => return dropped(store, reason),
    };
    let scale = store.scale();
    if let Some(err) = records.iter().find_map(|r| invalid_record(r, &scale)) {
        return dropped(store, DropReason::Malformed(err.to_string()));
    }
    let mut stats = MergeStats::default();
    for rec in &records {
        match store.merge_record(rec.clone()) {
            Ok(MergeOutcome::Inserted) => stats.inserted += 1,
            Ok(MergeOutcome::Replaced) => stats.replaced += 1,
            Ok(MergeOutcome::Ignored) => stats.ignored += 1,
            Err(_) => unreachable!("records validated before merging"),
        }
    }
    FetchOutcome::Merged {
        payload: Payload {
            sender,
            records,
            created_at: uploaded,
        },
        stats,
    }
}

fn invalid_record(r: &RatingRecord, scale: &crate::model::RatingScale) -> Option<ValidationError> {
    scale.check(r.value).err()
}

fn dropped(store: &LocalStore, reason: DropReason) -> FetchOutcome {
    debug!("node {} dropped fetch: {reason}", store.owner());
    FetchOutcome::Dropped(reason)
}

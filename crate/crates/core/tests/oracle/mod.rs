//! Reference implementations written straight from the definitions, independent of the library's
//! code paths, plus random instance generators and log audits.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use proxrec::codec::{self, Token};
use proxrec::exchange::{Advertisement, FetchOutcome, Payload, PendingFetch, Relay};
use proxrec::ingestion::EncounterEvent;
use proxrec::model::{
    Category, ItemId, LocalStore, RatingRecord, RatingScale, SimTime, Source, UserId,
};
use proxrec::recommender::GroupStrategy;
use proxrec::similarity::Metric;
use proxrec::simulator::{SimObserver, SimSettings};

// ---------------------------------------------------------------------------------------------
// similarity

/// Ratings in `[1, 5]` (or any f32 of magnitude < 8) are integers once scaled by 2^23.
fn exact(v: f32) -> i128 {
    let scaled = f64::from(v) * 8_388_608.0;
    assert_eq!(scaled.fract(), 0.0, "value {v} not on the 2^-23 grid");
    scaled as i128
}

/// Pearson via the raw-moment identity
/// `(n Sxy - Sx Sy) / sqrt((n Sxx - Sx^2)(n Syy - Sy^2))` with every sum computed exactly.
pub fn pearson_exact(xs: &[f32], ys: &[f32]) -> Option<f64> {
    let n = xs.len() as i128;
    let x: Vec<i128> = xs.iter().map(|&v| exact(v)).collect();
    let y: Vec<i128> = ys.iter().map(|&v| exact(v)).collect();
    let sx: i128 = x.iter().sum();
    let sy: i128 = y.iter().sum();
    let sxy: i128 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
    let sxx: i128 = x.iter().map(|a| a * a).sum();
    let syy: i128 = y.iter().map(|b| b * b).sum();
    let num = n * sxy - sx * sy;
    let bx = n * sxx - sx * sx;
    let by = n * syy - sy * sy;
    if bx == 0 || by == 0 {
        return None;
    }
    Some(num as f64 / ((bx as f64).sqrt() * (by as f64).sqrt()))
}

pub fn cosine_exact(xs: &[f32], ys: &[f32]) -> Option<f64> {
    let x: Vec<i128> = xs.iter().map(|&v| exact(v)).collect();
    let y: Vec<i128> = ys.iter().map(|&v| exact(v)).collect();
    let sxy: i128 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
    let sxx: i128 = x.iter().map(|a| a * a).sum();
    let syy: i128 = y.iter().map(|b| b * b).sum();
    if sxx == 0 || syy == 0 {
        return None;
    }
    Some(sxy as f64 / ((sxx as f64).sqrt() * (syy as f64).sqrt()))
}

pub fn propinquity_direct(count: u64, duration: u64, beta: f64, kappa: f64, tau: f64) -> f64 {
    let x = (1.0 - beta) * count as f64 / kappa + beta * duration as f64 / tau;
    1.0 - (-x).exp()
}

// ---------------------------------------------------------------------------------------------
// brute-force collaborative filtering over a dense matrix

#[derive(Debug, Clone)]
pub struct OracleCfg {
    pub metric: Metric,
    pub min_overlap: usize,
    pub gamma: usize,
    pub kappa: f64,
    pub tau: f64,
    pub beta: f64,
    pub w: f64,
    pub fallback: bool,
    pub k: usize,
}

impl OracleCfg {
    pub fn library(&self) -> proxrec::SimilarityConfig {
        proxrec::SimilarityConfig {
            metric: self.metric,
            min_overlap: self.min_overlap,
            significance_gamma: self.gamma,
            propinquity_kappa: self.kappa,
            propinquity_tau: self.tau,
            duration_weight: self.beta,
            hybrid_weight: self.w,
            fallback_to_propinquity: self.fallback,
        }
    }
}

/// Users `0..n_users` (ids offset by one), items `i00..`, one owner with an encounter log.
#[derive(Debug, Clone)]
pub struct ToyWorld {
    pub ratings: Vec<Vec<Option<f32>>>,
    pub owner: usize,
    /// `(count, duration)` of the owner's encounters with each user.
    pub encounters: Vec<(u64, u64)>,
    pub cfg: OracleCfg,
    pub scale: (f64, f64),
}

pub fn uid(u: usize) -> UserId {
    UserId(u as u64 + 1)
}

pub fn item_key(i: usize) -> String {
    format!("i{i:02}")
}

pub fn item_id(i: usize) -> ItemId {
    ItemId::new(Category(0), &item_key(i)).unwrap()
}

impl ToyWorld {
    pub fn n_users(&self) -> usize {
        self.ratings.len()
    }

    pub fn n_items(&self) -> usize {
        self.ratings[0].len()
    }

    pub fn store(&self) -> LocalStore {
        let mut s = LocalStore::new(uid(self.owner), RatingScale::default());
        for (u, row) in self.ratings.iter().enumerate() {
            for (i, r) in row.iter().enumerate() {
                if let Some(v) = r {
                    s.merge_record(RatingRecord {
                        rater: uid(u),
                        item: item_id(i),
                        value: *v,
                        timestamp: 0,
                        source: Source::Manual,
                        hops: u8::from(u != self.owner),
                    })
                    .unwrap();
                }
            }
        }
        for (u, &(count, duration)) in self.encounters.iter().enumerate() {
            if u == self.owner {
                continue;
            }
            for j in 0..count {
                // spread the duration over the encounters; the total is what matters
                let d = if j == 0 { duration } else { 0 };
                s.record_encounter(uid(u), d);
            }
        }
        s
    }

    pub fn has_ratings(&self, u: usize) -> bool {
        self.ratings[u].iter().any(Option::is_some)
    }

    fn mean(&self, u: usize) -> f64 {
        let vals: Vec<f64> = self.ratings[u]
            .iter()
            .flatten()
            .map(|&v| f64::from(v))
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    pub fn rating_sim(&self, u: usize, v: usize) -> Option<f64> {
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for i in 0..self.n_items() {
            if let (Some(a), Some(b)) = (self.ratings[u][i], self.ratings[v][i]) {
                xs.push(a);
                ys.push(b);
            }
        }
        if xs.len() < self.cfg.min_overlap || xs.is_empty() {
            return None;
        }
        let core = match self.cfg.metric {
            Metric::Pearson => pearson_exact(&xs, &ys)?,
            Metric::Cosine => cosine_exact(&xs, &ys)?,
        };
        let n = xs.len();
        Some(core * (n.min(self.cfg.gamma) as f64 / self.cfg.gamma as f64))
    }

    fn prox(&self, u: usize, v: usize) -> f64 {
        let peer = if u == self.owner && v != self.owner {
            v
        } else if v == self.owner && u != self.owner {
            u
        } else {
            return 0.0;
        };
        let (c, d) = self.encounters[peer];
        propinquity_direct(c, d, self.cfg.beta, self.cfg.kappa, self.cfg.tau)
    }

    pub fn hybrid(&self, u: usize, v: usize) -> f64 {
        match self.rating_sim(u, v) {
            Some(s) => self.cfg.w * s + (1.0 - self.cfg.w) * self.prox(u, v),
            None if self.cfg.fallback => self.prox(u, v),
            None => 0.0,
        }
    }

    /// `(score, used_cf, n_neighbors)`.
    pub fn predict(&self, u: usize, i: usize) -> (f64, bool, usize) {
        let mean_u = self.mean(u);
        let mut cands: Vec<(usize, f64)> = (0..self.n_users())
            .filter(|&v| v != u && self.ratings[v][i].is_some())
            .map(|v| (v, self.hybrid(u, v)))
            .filter(|&(_, s)| s > 0.0)
            .collect();
        // neighbors whose similarities agree on a 2^-40 grid count as tied
        let key = |s: f64| (s * 2f64.powi(40)).round();
        cands.sort_by(|a, b| key(b.1).partial_cmp(&key(a.1)).unwrap().then(a.0.cmp(&b.0)));
        cands.truncate(self.cfg.k);
        let clamp = |x: f64| x.max(self.scale.0).min(self.scale.1);
        if cands.is_empty() {
            return (clamp(mean_u), false, 0);
        }
        let num: f64 = cands
            .iter()
            .map(|&(v, s)| s * (f64::from(self.ratings[v][i].unwrap()) - self.mean(v)))
            .sum();
        let den: f64 = cands.iter().map(|&(_, s)| s.abs()).sum();
        (clamp(mean_u + num / den), true, cands.len())
    }

    fn known_items(&self) -> Vec<usize> {
        (0..self.n_items())
            .filter(|&i| (0..self.n_users()).any(|u| self.ratings[u][i].is_some()))
            .collect()
    }

    /// Full ranking of unrated known items for `u`.
    pub fn ranking(&self, u: usize) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = self
            .known_items()
            .into_iter()
            .filter(|&i| self.ratings[u][i].is_none())
            .map(|i| (i, self.predict(u, i).0))
            .collect();
        out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        out
    }

    pub fn group_ranking(&self, members: &[usize], strategy: GroupStrategy) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = self
            .known_items()
            .into_iter()
            .filter(|&i| members.iter().all(|&m| self.ratings[m][i].is_none()))
            .map(|i| {
                let scores: Vec<f64> = members.iter().map(|&m| self.predict(m, i).0).collect();
                let agg = match strategy {
                    GroupStrategy::Average => scores.iter().sum::<f64>() / scores.len() as f64,
                    GroupStrategy::LeastMisery => scores.iter().cloned().fold(f64::MAX, f64::min),
                    GroupStrategy::MostPleasure => scores.iter().cloned().fold(f64::MIN, f64::max),
                };
                (i, agg)
            })
            .collect();
        out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        out
    }
}

pub fn random_world(rng: &mut ChaCha8Rng) -> ToyWorld {
    let n_users = rng.random_range(2..=8);
    let n_items = rng.random_range(2..=12);
    let density = rng.random_range(0.2..0.8);
    let mut ratings = vec![vec![None; n_items]; n_users];
    for row in ratings.iter_mut() {
        for r in row.iter_mut() {
            if rng.random_bool(density) {
                *r = Some(rng.random_range(2..=10) as f32 / 2.0);
            }
        }
        if row.iter().all(Option::is_none) {
            let i = rng.random_range(0..n_items);
            row[i] = Some(rng.random_range(2..=10) as f32 / 2.0);
        }
    }
    let owner = rng.random_range(0..n_users);
    let encounters = (0..n_users)
        .map(|_| {
            if rng.random_bool(0.5) {
                (rng.random_range(1..6), rng.random_range(0..7200))
            } else {
                (0, 0)
            }
        })
        .collect();
    let cfg = OracleCfg {
        metric: if rng.random_bool(0.5) {
            Metric::Pearson
        } else {
            Metric::Cosine
        },
        min_overlap: rng.random_range(1..=3),
        gamma: rng.random_range(1..=10),
        kappa: rng.random_range(1.0..10.0),
        tau: rng.random_range(600.0..7200.0),
        beta: rng.random_range(0.0..=1.0),
        w: rng.random_range(0.0..=1.0),
        fallback: rng.random_bool(0.5),
        k: rng.random_range(1..=5),
    };
    ToyWorld {
        ratings,
        owner,
        encounters,
        cfg,
        scale: (1.0, 5.0),
    }
}

// ---------------------------------------------------------------------------------------------
// epidemic reachability

#[derive(Debug, Clone)]
pub struct ProtocolInstance {
    pub ratings: Vec<RatingRecord>,
    pub trace: Vec<EncounterEvent>,
    pub settings: SimSettings,
}

pub type Holdings = BTreeMap<UserId, BTreeMap<(UserId, ItemId), u8>>;

/// What every node must hold at the end, derived by replaying only the timing rules: which
/// advertisement is current at each encounter, whether its object is still live and ready when
/// the fetch runs, and which hop counts each payload snapshot can carry.
pub fn expected_holdings(
    inst: &ProtocolInstance,
    nodes: &[UserId],
    offsets: &BTreeMap<UserId, SimTime>,
) -> Holdings {
    let s = &inst.settings;
    let period = s.exchange.upload_period;
    let horizon = s.horizon;
    let delay = s.exchange.fetch_deferral + s.csp.fetch_latency;
    let limit: u32 = match s.exchange.relay {
        Relay::Off => 1,
        Relay::MaxHops(n) => u32::from(n.get()),
        Relay::Unbounded => u32::MAX,
    };

    // (arrival, sender, fetcher, snapshot time)
    let mut transfers: Vec<(SimTime, UserId, UserId, SimTime)> = Vec::new();
    for e in inst.trace.iter().filter(|e| e.time <= horizon) {
        for (sender, fetcher) in [(e.a, e.b), (e.b, e.a)] {
            let off = offsets[&sender];
            if off > e.time {
                continue;
            }
            let snapshot = off + (e.time - off) / period * period;
            let arrival = e.time + delay;
            if arrival > horizon {
                continue;
            }
            if snapshot + period <= arrival {
                continue; // replaced before the fetch
            }
            if arrival < snapshot + s.csp.upload_latency {
                continue;
            }
            transfers.push((arrival, sender, fetcher, snapshot));
        }
    }
    transfers.sort();

    let origins: BTreeSet<UserId> = inst.ratings.iter().map(|r| r.rater).collect();
    // acquisitions[node][origin] = [(time, hops)]
    let mut acq: HashMap<(UserId, UserId), Vec<(SimTime, u32)>> = HashMap::new();
    for (arrival, sender, fetcher, snapshot) in transfers {
        for &o in &origins {
            let held = if sender == o {
                Some(0)
            } else {
                acq.get(&(sender, o)).and_then(|v| {
                    v.iter()
                        .filter(|(t, _)| *t < snapshot)
                        .map(|(_, h)| *h)
                        .min()
                })
            };
            let Some(h) = held else { continue };
            let forwardable = sender == o || (s.exchange.relay != Relay::Off && h < limit);
            if !forwardable || fetcher == o {
                continue;
            }
            acq.entry((fetcher, o)).or_default().push((arrival, h + 1));
        }
    }

    let mut out: Holdings = BTreeMap::new();
    for &n in nodes {
        let mut held = BTreeMap::new();
        for r in &inst.ratings {
            let hops = if r.rater == n {
                Some(0)
            } else {
                acq.get(&(n, r.rater))
                    .and_then(|v| v.iter().map(|(_, h)| *h).min())
            };
            if let Some(h) = hops {
                held.insert((r.rater, r.item.clone()), h as u8);
            }
        }
        out.insert(n, held);
    }
    out
}

pub fn holdings_of(stores: &BTreeMap<UserId, LocalStore>) -> Holdings {
    stores
        .iter()
        .map(|(n, s)| {
            (
                *n,
                s.records()
                    .map(|r| ((r.rater, r.item.clone()), r.hops))
                    .collect(),
            )
        })
        .collect()
}

pub fn random_protocol_instance(rng: &mut ChaCha8Rng, relay: Relay) -> ProtocolInstance {
    let n_nodes = rng.random_range(2..=8u64);
    let mut ratings = Vec::new();
    for u in 1..=n_nodes {
        let n = rng.random_range(0..=3);
        for i in 0..n {
            ratings.push(RatingRecord::own(
                UserId(u),
                ItemId::new(
                    Category(0),
                    &format!("m{}", rng.random_range(0..10) * 10 + i),
                )
                .unwrap(),
                rng.random_range(2..=10) as f32 / 2.0,
                rng.random_range(0..1000),
                Source::Manual,
            ));
        }
    }
    ratings.sort_by(|a, b| (a.rater, &a.item).cmp(&(b.rater, &b.item)));
    ratings.dedup_by(|a, b| a.rater == b.rater && a.item == b.item);
    let horizon = rng.random_range(500..3000);
    let n_events = rng.random_range(0..=50);
    let mut trace = Vec::new();
    for _ in 0..n_events {
        let a = rng.random_range(1..=n_nodes);
        let mut b = rng.random_range(1..=n_nodes);
        while b == a {
            b = rng.random_range(1..=n_nodes);
        }
        let t = rng.random_range(0..horizon + 100);
        trace.push(EncounterEvent::new(t, UserId(a), UserId(b), rng.random_range(0..600)).unwrap());
    }
    proxrec::ingestion::normalize_trace(&mut trace);
    let mut exchange = proxrec::exchange::ExchangePolicy::new(rng.random_range(10..200), relay);
    exchange.fetch_deferral = if rng.random_bool(0.5) {
        0
    } else {
        rng.random_range(0..60)
    };
    let csp = proxrec::exchange::CspSettings {
        upload_latency: if rng.random_bool(0.5) {
            0
        } else {
            rng.random_range(0..40)
        },
        fetch_latency: if rng.random_bool(0.7) {
            0
        } else {
            rng.random_range(0..20)
        },
        availability: 1.0,
    };
    ProtocolInstance {
        ratings,
        trace,
        settings: SimSettings {
            exchange,
            csp,
            similarity: proxrec::SimilarityConfig::default(),
            k_neighbors: 5,
            horizon,
            metric_period: rng.random_range(100..1000),
            holdout_fraction: 0.0,
            seed: rng.random(),
            rating_scale: RatingScale::default(),
        },
    }
}

pub fn node_ids(inst: &ProtocolInstance) -> Vec<UserId> {
    let mut ids: Vec<UserId> = inst.ratings.iter().map(|r| r.rater).collect();
    ids.extend(inst.trace.iter().flat_map(|e| [e.a, e.b]));
    ids.sort();
    ids.dedup();
    ids
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------------------------
// audits over the event log

/// Rebuilds who could hold what from the upload/fetch log alone and flags anything a node shows
/// without a supporting chain of uploads and fetches. Also checks the size laws.
#[derive(Debug, Default)]
pub struct ProvenanceAudit {
    possession: HashMap<UserId, HashMap<(UserId, ItemId), u8>>,
    uploads: HashMap<Token, (SimTime, UserId, Vec<RatingRecord>)>,
    pub upload_latency: SimTime,
    pub adv_cap: usize,
    pub payload_cap: usize,
    pub violations: Vec<String>,
    pub uploads_seen: usize,
    pub fetches_merged: usize,
    pub max_ad_len: usize,
    pub max_payload_len: usize,
}

impl ProvenanceAudit {
    pub fn new(settings: &SimSettings, own: &[RatingRecord]) -> Self {
        let mut possession: HashMap<UserId, HashMap<(UserId, ItemId), u8>> = HashMap::new();
        for r in own {
            possession
                .entry(r.rater)
                .or_default()
                .insert((r.rater, r.item.clone()), 0);
        }
        Self {
            possession,
            upload_latency: settings.csp.upload_latency,
            adv_cap: settings.exchange.adv_size_cap,
            payload_cap: settings.exchange.payload_size_cap,
            ..Default::default()
        }
    }

    /// Every record in every final store must be explained by the log, with the same hop count.
    pub fn check_final(&mut self, stores: &BTreeMap<UserId, LocalStore>) {
        for (n, s) in stores {
            for r in s.records() {
                let held = self
                    .possession
                    .get(n)
                    .and_then(|m| m.get(&(r.rater, r.item.clone())));
                if held != Some(&r.hops) {
                    self.violations.push(format!(
                        "node {n} holds ({}, {}) at hops {} but the log supports {held:?}",
                        r.rater, r.item, r.hops
                    ));
                }
            }
        }
    }
}

impl SimObserver for ProvenanceAudit {
    fn on_upload(
        &mut self,
        time: SimTime,
        ad: &Advertisement,
        ad_len: usize,
        payload: &Payload,
        payload_len: usize,
    ) {
        self.uploads_seen += 1;
        self.max_ad_len = self.max_ad_len.max(ad_len);
        self.max_payload_len = self.max_payload_len.max(payload_len);
        if ad_len > self.adv_cap {
            self.violations
                .push(format!("advertisement of {ad_len} bytes over cap"));
        }
        if payload_len > self.payload_cap {
            self.violations
                .push(format!("payload of {payload_len} bytes over cap"));
        }
        if payload_len != codec::payload_len(&payload.records) {
            self.violations
                .push("reported payload size differs from codec size".into());
        }
        let sender = payload.sender;
        let held = self.possession.get(&sender);
        for r in &payload.records {
            let have = held.and_then(|m| m.get(&(r.rater, r.item.clone())));
            if r.hops == 0 || have != Some(&(r.hops - 1)) {
                self.violations.push(format!(
                    "t={time}: {sender} uploaded ({}, {}) at hops {} while holding {have:?}",
                    r.rater, r.item, r.hops
                ));
            }
        }
        self.uploads
            .insert(ad.token, (time, sender, payload.records.clone()));
    }

    fn on_fetch(&mut self, time: SimTime, fetch: &PendingFetch, outcome: &FetchOutcome) {
        let FetchOutcome::Merged { payload, .. } = outcome else {
            return;
        };
        self.fetches_merged += 1;
        let Some((up_time, sender, records)) = self.uploads.get(&fetch.token) else {
            self.violations
                .push(format!("t={time}: fetch of a token never uploaded"));
            return;
        };
        if *sender != fetch.sender || payload.sender != *sender {
            self.violations
                .push(format!("t={time}: fetch sender mismatch"));
        }
        if time < up_time + self.upload_latency {
            self.violations
                .push(format!("t={time}: fetched before the upload was ready"));
        }
        if &payload.records != records {
            self.violations
                .push(format!("t={time}: fetched content differs from upload"));
        }
        let mine = self.possession.entry(fetch.fetcher).or_default();
        for r in records {
            if r.rater == fetch.fetcher {
                continue;
            }
            let e = mine.entry((r.rater, r.item.clone())).or_insert(r.hops);
            *e = (*e).min(r.hops);
        }
    }
}

/// With relay off a node may only hold its own ratings and those of peers it met.
pub fn relay_off_violations(
    stores: &BTreeMap<UserId, LocalStore>,
    trace: &[EncounterEvent],
    horizon: SimTime,
) -> Vec<String> {
    let mut met: HashMap<UserId, BTreeSet<UserId>> = HashMap::new();
    for e in trace.iter().filter(|e| e.time <= horizon) {
        met.entry(e.a).or_default().insert(e.b);
        met.entry(e.b).or_default().insert(e.a);
    }
    let mut out = Vec::new();
    for (n, s) in stores {
        for r in s.records() {
            let ok = r.rater == *n || met.get(n).is_some_and(|m| m.contains(&r.rater));
            if !ok {
                out.push(format!(
                    "node {n} holds a rating of {} it never met",
                    r.rater
                ));
            }
        }
    }
    out
}

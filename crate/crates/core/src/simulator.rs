//! Deterministic discrete-event engine for the exchange protocol.
//!
//! Within one simulated second events run in a fixed order: uploads (by node), encounters (by
//! `(a, b)`), due fetches (by `(fetcher, sender)`), then the metrics snapshot. Identical settings
//! and inputs always produce identical results.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::io::{self, Write};
use std::path::PathBuf;

use log::{debug, info};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, Token};
use crate::exchange::{
    broadcast_on_encounter, build_payload, fetch_and_merge, Advertisement, CspSettings, CspSim,
    ExchangePolicy, FetchOutcome, Payload, PendingFetch, ProtocolError,
};
use crate::ingestion::{
    generate_trace, load_catalog, load_ratings, load_trace, Catalog, EncounterEvent, IngestError,
    TraceGenParams,
};
use crate::model::{LocalStore, Ontology, RatingRecord, RatingScale, SimTime, UserId};
use crate::recommender::{Basis, Predictor};
use crate::similarity::{ConfigError, SimilarityConfig};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Similarity(#[from] ConfigError),
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

/// Everything about a run except where its inputs come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSettings {
    pub exchange: ExchangePolicy,
    pub csp: CspSettings,
    pub similarity: SimilarityConfig<f64>,
    pub k_neighbors: usize,
    pub horizon: SimTime,
    pub metric_period: SimTime,
    pub holdout_fraction: f64,
    pub seed: u64,
    pub rating_scale: RatingScale,
}

impl SimSettings {
    pub fn validate(&self) -> Result<(), SimError> {
        self.exchange.validate()?;
        self.csp.validate()?;
        self.similarity.validate()?;
        self.rating_scale
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))?;
        if self.metric_period == 0 {
            return Err(SimError::Config("metric_period must be > 0".into()));
        }
        if self.k_neighbors == 0 {
            return Err(SimError::Config("k_neighbors must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(SimError::Config(
                "holdout_fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSource {
    File(PathBuf),
    Generate(TraceGenParams),
}

/// A full experiment: input locations plus settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub ratings_path: PathBuf,
    pub trace: TraceSource,
    pub catalog_path: Option<PathBuf>,
    pub ontology: Ontology,
    pub settings: SimSettings,
}

/// Loaded inputs of a run.
#[derive(Debug, Clone, Default)]
pub struct SimInputs {
    pub ratings: Vec<RatingRecord>,
    pub trace: Vec<EncounterEvent>,
    pub catalog: Option<Catalog>,
}

impl SimConfig {
    pub fn load_inputs(&self) -> Result<SimInputs, SimError> {
        let scale = &self.settings.rating_scale;
        let ratings = load_ratings(&self.ratings_path, &self.ontology, scale)?;
        let trace = match &self.trace {
            TraceSource::File(p) => load_trace(p)?,
            TraceSource::Generate(params) => generate_trace(params)?,
        };
        let catalog = self
            .catalog_path
            .as_ref()
            .map(|p| load_catalog(p, &self.ontology))
            .transpose()?;
        Ok(SimInputs {
            ratings,
            trace,
            catalog,
        })
    }
}

/// One metrics snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub time: SimTime,
    /// Mean over nodes of the share of all circulating records held locally.
    pub spread: f64,
    /// Share of held-out pairs predicted by collaborative filtering at the rater's node.
    pub coverage: f64,
    pub rmse: Option<f64>,
    pub mae: Option<f64>,
    pub mean_store_bytes: f64,
    pub fetches_attempted: u64,
    pub fetches_dropped: u64,
}

pub const METRICS_HEADER: &str =
    "time,spread,coverage,rmse,mae,mean_store_bytes,fetches_attempted,fetches_dropped";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{METRICS_HEADER}")?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.time,
                r.spread,
                r.coverage,
                opt(r.rmse),
                opt(r.mae),
                r.mean_store_bytes,
                r.fetches_attempted,
                r.fetches_dropped
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv is ASCII")
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }
}

/// Held-out ratings per rater; these never enter any store.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Holdout {
    pub by_user: BTreeMap<UserId, Vec<RatingRecord>>,
}

impl Holdout {
    pub fn len(&self) -> usize {
        self.by_user.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const PHASE_STREAM: u64 = 1;
const HOLDOUT_STREAM: u64 = 2;
const CSP_STREAM: u64 = 3;

/// Splits each rater's ratings into kept and held-out parts: `ceil(fraction * n)` ratings per
/// rater are withheld, chosen by the seed.
pub fn split_holdout(
    ratings: &[RatingRecord],
    fraction: f64,
    seed: u64,
) -> (Vec<RatingRecord>, Holdout) {
    let mut by_rater: BTreeMap<UserId, Vec<RatingRecord>> = BTreeMap::new();
    for r in ratings {
        by_rater.entry(r.rater).or_default().push(r.clone());
    }
    let mut rng = stream_rng(seed, HOLDOUT_STREAM);
    let mut kept = Vec::with_capacity(ratings.len());
    let mut holdout = Holdout::default();
    for (user, mut recs) in by_rater {
        recs.sort_by(|a, b| a.item.cmp(&b.item).then(a.timestamp.cmp(&b.timestamp)));
        // tolerance keeps products like 0.1 * 30 from rounding up past the integer
        let n_out = ((fraction * recs.len() as f64) - 1e-9).ceil().max(0.0) as usize;
        let n_out = n_out.min(recs.len());
        let mut out_idx: Vec<usize> = index::sample(&mut rng, recs.len(), n_out).into_vec();
        out_idx.sort_unstable();
        let mut held = Vec::with_capacity(n_out);
        for (i, r) in recs.into_iter().enumerate() {
            if out_idx.binary_search(&i).is_ok() {
                held.push(r);
            } else {
                kept.push(r);
            }
        }
        if !held.is_empty() {
            holdout.by_user.insert(user, held);
        }
    }
    (kept, holdout)
}

/// Seed-derived phase of each node's upload schedule, in `[0, upload_period)`.
pub fn upload_offsets(
    seed: u64,
    nodes: impl IntoIterator<Item = UserId>,
    upload_period: SimTime,
) -> BTreeMap<UserId, SimTime> {
    let mut rng = stream_rng(seed, PHASE_STREAM);
    let mut nodes: Vec<UserId> = nodes.into_iter().collect();
    nodes.sort();
    nodes.dedup();
    nodes
        .into_iter()
        .map(|n| (n, rng.random_range(0..upload_period)))
        .collect()
}

/// Hooks for inspecting a run as it happens.
pub trait SimObserver {
    fn on_upload(
        &mut self,
        _time: SimTime,
        _ad: &Advertisement,
        _ad_len: usize,
        _payload: &Payload,
        _payload_len: usize,
    ) {
    }

    fn on_encounter(&mut self, _event: &EncounterEvent, _queued: &[PendingFetch]) {}

    fn on_fetch(&mut self, _time: SimTime, _fetch: &PendingFetch, _outcome: &FetchOutcome) {}

    fn on_snapshot(&mut self, _row: &MetricsRow) {}
}

impl SimObserver for () {}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Upload {
        node: usize,
    },
    Encounter {
        a: UserId,
        b: UserId,
        duration: SimTime,
    },
    Fetch {
        fetcher: UserId,
        sender: UserId,
        token: Token,
    },
    Metrics,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct Scheduled {
    time: SimTime,
    kind: EventKind,
}

struct Node {
    store: LocalStore,
    ad: Option<Advertisement>,
}

/// Final state of a run.
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub log: MetricsLog,
    pub stores: BTreeMap<UserId, LocalStore>,
    pub holdout: Holdout,
    /// Number of records that circulate (all ratings minus the holdout).
    pub total_records: usize,
}

/// Prediction quality of one node for its owner's held-out ratings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NodeEval {
    pub n_pairs: usize,
    /// `(predicted, actual)` for pairs predicted by collaborative filtering.
    pub cf: Vec<(f64, f64)>,
}

impl NodeEval {
    pub fn rmse(&self) -> Option<f64> {
        (!self.cf.is_empty()).then(|| {
            let se: f64 = self.cf.iter().map(|(p, a)| (p - a) * (p - a)).sum();
            (se / self.cf.len() as f64).sqrt()
        })
    }
}

/// Predicts `user`'s held-out ratings from `store`.
pub fn evaluate_node(
    store: &LocalStore,
    user: UserId,
    held: &[RatingRecord],
    cfg: &SimilarityConfig<f64>,
    k: usize,
) -> NodeEval {
    let mut eval = NodeEval {
        n_pairs: held.len(),
        cf: Vec::new(),
    };
    if held.is_empty() {
        return eval;
    }
    let Ok(predictor) = Predictor::new(user, store, cfg, k) else {
        return eval;
    };
    for r in held {
        let p = predictor.predict(&r.item);
        if p.basis == Basis::Cf {
            eval.cf.push((p.score, f64::from(r.value)));
        }
    }
    eval
}

/// A prepared simulation.
pub struct Simulation {
    settings: SimSettings,
    nodes: Vec<Node>,
    index: BTreeMap<UserId, usize>,
    trace: Vec<EncounterEvent>,
    holdout: Holdout,
    total_records: usize,
    csp: CspSim,
    offsets: BTreeMap<UserId, SimTime>,
    attempted: u64,
    dropped: u64,
}

impl Simulation {
    /// Builds per-node stores from the ratings (minus the holdout). Nodes are all raters plus
    /// every node that appears in the trace.
    pub fn new(settings: SimSettings, inputs: SimInputs) -> Result<Self, SimError> {
        settings.validate()?;
        let (kept, holdout) =
            split_holdout(&inputs.ratings, settings.holdout_fraction, settings.seed);
        let mut ids: Vec<UserId> = inputs.ratings.iter().map(|r| r.rater).collect();
        ids.extend(inputs.trace.iter().flat_map(|e| [e.a, e.b]));
        ids.sort();
        ids.dedup();
        let index: BTreeMap<UserId, usize> = ids.iter().enumerate().map(|(i, u)| (*u, i)).collect();
        let mut nodes: Vec<Node> = ids
            .iter()
            .map(|&u| Node {
                store: LocalStore::new(u, settings.rating_scale),
                ad: None,
            })
            .collect();
        for r in &kept {
            if r.hops != 0 {
                return Err(SimError::Config(format!(
                    "rating of {} has hops {}",
                    r.rater, r.hops
                )));
            }
            nodes[index[&r.rater]]
                .store
                .merge_record(r.clone())
                .map_err(|e| SimError::Config(e.to_string()))?;
        }
        let total_records = nodes.iter().map(|n| n.store.len()).sum();
        for e in &inputs.trace {
            if e.a == e.b {
                return Err(SimError::Config(format!("self-encounter of {}", e.a)));
            }
        }
        let offsets = upload_offsets(
            settings.seed,
            ids.iter().copied(),
            settings.exchange.upload_period,
        );
        let csp = CspSim::new(settings.csp, stream_rng(settings.seed, CSP_STREAM).random())?;
        Ok(Self {
            settings,
            nodes,
            index,
            trace: inputs.trace,
            holdout,
            total_records,
            csp,
            offsets,
            attempted: 0,
            dropped: 0,
        })
    }

    pub fn holdout(&self) -> &Holdout {
        &self.holdout
    }

    pub fn upload_offsets(&self) -> &BTreeMap<UserId, SimTime> {
        &self.offsets
    }

    pub fn run(self) -> Result<SimOutcome, SimError> {
        self.run_with(&mut ())
    }

    pub fn run_with(mut self, observer: &mut dyn SimObserver) -> Result<SimOutcome, SimError> {
        let horizon = self.settings.horizon;
        let mut queue: BinaryHeap<Reverse<Scheduled>> = BinaryHeap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let t = self.offsets[&node.store.owner()];
            if t <= horizon {
                queue.push(Reverse(Scheduled {
                    time: t,
                    kind: EventKind::Upload { node: i },
                }));
            }
        }
        for e in &self.trace {
            if e.time <= horizon {
                queue.push(Reverse(Scheduled {
                    time: e.time,
                    kind: EventKind::Encounter {
                        a: e.a,
                        b: e.b,
                        duration: e.duration,
                    },
                }));
            }
        }
        queue.push(Reverse(Scheduled {
            time: 0,
            kind: EventKind::Metrics,
        }));

        let mut log = MetricsLog::default();
        while let Some(Reverse(ev)) = queue.pop() {
            let now = ev.time;
            match ev.kind {
                EventKind::Upload { node } => {
                    self.upload(node, now, observer)?;
                    let next = now + self.settings.exchange.upload_period;
                    if next <= horizon {
                        queue.push(Reverse(Scheduled {
                            time: next,
                            kind: EventKind::Upload { node },
                        }));
                    }
                }
                EventKind::Encounter { a, b, duration } => {
                    let event = EncounterEvent {
                        time: now,
                        a,
                        b,
                        duration,
                    };
                    for f in self.encounter(&event, observer)? {
                        let due = f.due + self.settings.csp.fetch_latency;
                        if due <= horizon {
                            queue.push(Reverse(Scheduled {
                                time: due,
                                kind: EventKind::Fetch {
                                    fetcher: f.fetcher,
                                    sender: f.sender,
                                    token: f.token,
                                },
                            }));
                        }
                    }
                }
                EventKind::Fetch {
                    fetcher,
                    sender,
                    token,
                } => {
                    let pending = PendingFetch {
                        due: now,
                        fetcher,
                        sender,
                        token,
                    };
                    self.fetch(&pending, now, observer);
                }
                EventKind::Metrics => {
                    let row = self.snapshot_metrics(now);
                    debug!(
                        "t={now} spread={:.4} coverage={:.4}",
                        row.spread, row.coverage
                    );
                    observer.on_snapshot(&row);
                    log.rows.push(row);
                    let period = self.settings.metric_period;
                    let next = if now + period <= horizon {
                        Some(now + period)
                    } else if now < horizon {
                        Some(horizon)
                    } else {
                        None
                    };
                    if let Some(t) = next {
                        queue.push(Reverse(Scheduled {
                            time: t,
                            kind: EventKind::Metrics,
                        }));
                    }
                }
            }
        }
        info!(
            "simulation done: {} nodes, {} snapshots, {} fetches ({} dropped)",
            self.nodes.len(),
            log.rows.len(),
            self.attempted,
            self.dropped
        );
        let stores = self
            .nodes
            .into_iter()
            .map(|n| (n.store.owner(), n.store))
            .collect();
        Ok(SimOutcome {
            log,
            stores,
            holdout: self.holdout,
            total_records: self.total_records,
        })
    }

    fn upload(
        &mut self,
        node: usize,
        now: SimTime,
        observer: &mut dyn SimObserver,
    ) -> Result<(), SimError> {
        let policy = &self.settings.exchange;
        let payload = build_payload(&self.nodes[node].store, policy, now)?;
        let bytes = payload.encode().map_err(ProtocolError::from)?;
        if bytes.len() > policy.payload_size_cap {
            return Err(SimError::Invariant(format!(
                "payload of {} bytes over cap {}",
                bytes.len(),
                policy.payload_size_cap
            )));
        }
        let payload_len = bytes.len();
        let token = self.csp.upload_bytes(payload.sender, bytes, now);
        let ad = Advertisement {
            sender: payload.sender,
            token,
            issued_at: now,
        };
        let ad_len = ad.encode().map_err(ProtocolError::from)?.len();
        observer.on_upload(now, &ad, ad_len, &payload, payload_len);
        self.nodes[node].ad = Some(ad);
        Ok(())
    }

    fn encounter(
        &mut self,
        event: &EncounterEvent,
        observer: &mut dyn SimObserver,
    ) -> Result<Vec<PendingFetch>, SimError> {
        let (ia, ib) = (self.index[&event.a], self.index[&event.b]);
        let (na, nb) = pair_mut(&mut self.nodes, ia, ib);
        let queued = broadcast_on_encounter(
            &mut na.store,
            &mut nb.store,
            na.ad.as_ref(),
            nb.ad.as_ref(),
            event,
            &self.settings.exchange,
        )?;
        observer.on_encounter(event, &queued);
        Ok(queued)
    }

    fn fetch(&mut self, pending: &PendingFetch, now: SimTime, observer: &mut dyn SimObserver) {
        let node = &mut self.nodes[self.index[&pending.fetcher]];
        let outcome = fetch_and_merge(&mut node.store, &mut self.csp, &pending.token, now);
        self.attempted += 1;
        if matches!(outcome, FetchOutcome::Dropped(_)) {
            self.dropped += 1;
        }
        observer.on_fetch(now, pending, &outcome);
    }

    fn snapshot_metrics(&self, now: SimTime) -> MetricsRow {
        let n = self.nodes.len();
        let spread = if n == 0 || self.total_records == 0 {
            0.0
        } else {
            self.nodes
                .iter()
                .map(|nd| nd.store.len() as f64 / self.total_records as f64)
                .sum::<f64>()
                / n as f64
        };
        let mean_store_bytes = if n == 0 {
            0.0
        } else {
            self.nodes
                .iter()
                .map(|nd| codec::payload_len(nd.store.records()) as f64)
                .sum::<f64>()
                / n as f64
        };
        let mut pairs = 0usize;
        let mut cf: Vec<(f64, f64)> = Vec::new();
        for (user, held) in &self.holdout.by_user {
            let Some(&i) = self.index.get(user) else {
                continue;
            };
            let eval = evaluate_node(
                &self.nodes[i].store,
                *user,
                held,
                &self.settings.similarity,
                self.settings.k_neighbors,
            );
            pairs += eval.n_pairs;
            cf.extend(eval.cf);
        }
        let coverage = if pairs == 0 {
            0.0
        } else {
            cf.len() as f64 / pairs as f64
        };
        let (rmse, mae) = if cf.is_empty() {
            (None, None)
        } else {
            let m = cf.len() as f64;
            let se: f64 = cf.iter().map(|(p, a)| (p - a) * (p - a)).sum();
            let ae: f64 = cf.iter().map(|(p, a)| (p - a).abs()).sum();
            (Some((se / m).sqrt()), Some(ae / m))
        };
        MetricsRow {
            time: now,
            spread,
            coverage,
            rmse,
            mae,
            mean_store_bytes,
            fetches_attempted: self.attempted,
            fetches_dropped: self.dropped,
        }
    }
}

fn pair_mut<T>(v: &mut [T], i: usize, j: usize) -> (&mut T, &mut T) {
    assert_ne!(i, j);
    if i < j {
        let (lo, hi) = v.split_at_mut(j);
        (&mut lo[i], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(i);
        (&mut hi[0], &mut lo[j])
    }
}

/// Loads the configured inputs and runs the simulation.
pub fn run(config: &SimConfig) -> Result<MetricsLog, SimError> {
    Ok(run_full(config)?.log)
}

pub fn run_full(config: &SimConfig) -> Result<SimOutcome, SimError> {
    let inputs = config.load_inputs()?;
    Simulation::new(config.settings.clone(), inputs)?.run()
}

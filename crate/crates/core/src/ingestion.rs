//! File loaders for ratings, contact traces and item catalogs, plus a synthetic contact generator.
//!
//! All formats are UTF-8 CSV with a header row:
//!
//! * ratings / store snapshots: `rater,category,key,value,timestamp,source,hops` (`hops` optional)
//! * traces: `time,a,b,duration`
//! * catalogs: `category,key,<attr1>,...,<attrK>`

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    Category, ItemId, ItemMeta, Ontology, RatingRecord, RatingScale, SimTime, Source, UserId,
    ValidationError,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {msg}")]
    Malformed { line: u64, msg: String },
    #[error("line {line}: {source}")]
    Invalid {
        line: u64,
        #[source]
        source: ValidationError,
    },
    #[error("line {line}: duplicate item {category}/{key}")]
    DuplicateItem {
        line: u64,
        category: String,
        key: String,
    },
    #[error("invalid trace parameters: {0}")]
    BadParams(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn open(path: &Path) -> Result<File, IngestError> {
    File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn create(path: &Path) -> Result<File, IngestError> {
    File::create(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn malformed(line: u64, msg: impl Into<String>) -> IngestError {
    IngestError::Malformed {
        line,
        msg: msg.into(),
    }
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

fn field<'r>(rec: &'r csv::StringRecord, idx: usize, name: &str) -> Result<&'r str, IngestError> {
    rec.get(idx)
        .map(str::trim)
        .ok_or_else(|| malformed(line_of(rec), format!("missing column `{name}`")))
}

fn parse<T: std::str::FromStr>(
    rec: &csv::StringRecord,
    idx: usize,
    name: &str,
) -> Result<T, IngestError> {
    let raw = field(rec, idx, name)?;
    raw.parse()
        .map_err(|_| malformed(line_of(rec), format!("cannot parse `{name}` from `{raw}`")))
}

fn column(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h.trim() == name)
}

const RECORD_COLUMNS: [&str; 6] = ["rater", "category", "key", "value", "timestamp", "source"];

/// Reads rating records; `allow_relayed` admits a non-zero `hops` column (store snapshots).
fn read_records<R: Read>(
    reader: R,
    ontology: &Ontology,
    scale: &RatingScale,
    allow_relayed: bool,
) -> Result<Vec<RatingRecord>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 6];
    for (slot, name) in idx.iter_mut().zip(RECORD_COLUMNS) {
        *slot = column(&headers, name)
            .ok_or_else(|| malformed(1, format!("header lacks column `{name}`")))?;
    }
    let hops_idx = column(&headers, "hops");

    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = line_of(&row);
        let invalid = |source| IngestError::Invalid { line, source };
        let rater = UserId(parse(&row, idx[0], "rater")?);
        let category = ontology
            .category(field(&row, idx[1], "category")?)
            .map_err(invalid)?;
        let item = ItemId::new(category, field(&row, idx[2], "key")?).map_err(invalid)?;
        let value: f32 = parse(&row, idx[3], "value")?;
        scale.check(value).map_err(invalid)?;
        let timestamp = parse(&row, idx[4], "timestamp")?;
        let source: Source = field(&row, idx[5], "source")?.parse().map_err(invalid)?;
        let hops = match hops_idx {
            Some(h) if row.get(h).is_some_and(|s| !s.trim().is_empty()) => parse(&row, h, "hops")?,
            _ => 0u8,
        };
        if hops != 0 && !allow_relayed {
            return Err(malformed(
                line,
                "ratings files hold own ratings only (hops must be 0)",
            ));
        }
        out.push(RatingRecord {
            rater,
            item,
            value,
            timestamp,
            source,
            hops,
        });
    }
    Ok(out)
}

/// Loads a node's own ratings. Every returned record has `hops = 0`.
pub fn load_ratings(
    path: &Path,
    ontology: &Ontology,
    scale: &RatingScale,
) -> Result<Vec<RatingRecord>, IngestError> {
    read_records(BufReader::new(open(path)?), ontology, scale, false)
}

pub fn read_ratings<R: Read>(
    reader: R,
    ontology: &Ontology,
    scale: &RatingScale,
) -> Result<Vec<RatingRecord>, IngestError> {
    read_records(reader, ontology, scale, false)
}

/// Loads a store snapshot, which may contain relayed records.
pub fn load_snapshot(
    path: &Path,
    ontology: &Ontology,
    scale: &RatingScale,
) -> Result<Vec<RatingRecord>, IngestError> {
    read_records(BufReader::new(open(path)?), ontology, scale, true)
}

pub fn write_records<'a, W: Write>(
    writer: W,
    records: impl IntoIterator<Item = &'a RatingRecord>,
    ontology: &Ontology,
) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "rater",
        "category",
        "key",
        "value",
        "timestamp",
        "source",
        "hops",
    ])?;
    for r in records {
        let category = ontology.name(r.item.category).unwrap_or("?");
        w.write_record([
            r.rater.0.to_string().as_str(),
            category,
            r.item.key(),
            r.value.to_string().as_str(),
            r.timestamp.to_string().as_str(),
            r.source.as_str(),
            r.hops.to_string().as_str(),
        ])?;
    }
    w.flush().map_err(|e| IngestError::Csv(e.into()))?;
    Ok(())
}

pub fn save_records<'a>(
    path: &Path,
    records: impl IntoIterator<Item = &'a RatingRecord>,
    ontology: &Ontology,
) -> Result<(), IngestError> {
    write_records(io::BufWriter::new(create(path)?), records, ontology)
}

/// A single proximity contact between two nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EncounterEvent {
    pub time: SimTime,
    pub a: UserId,
    pub b: UserId,
    pub duration: SimTime,
}

impl EncounterEvent {
    /// Builds an event with the endpoints ordered so that `a < b`.
    pub fn new(time: SimTime, a: UserId, b: UserId, duration: SimTime) -> Option<Self> {
        if a == b {
            return None;
        }
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        Some(Self {
            time,
            a,
            b,
            duration,
        })
    }
}

/// Sorts by `(time, a, b)` and collapses events for the same pair at the same time,
/// keeping the longest duration.
pub fn normalize_trace(events: &mut Vec<EncounterEvent>) {
    events.sort_by(|x, y| {
        (x.time, x.a, x.b)
            .cmp(&(y.time, y.a, y.b))
            .then(y.duration.cmp(&x.duration))
    });
    events.dedup_by_key(|e| (e.time, e.a, e.b));
}

pub fn read_trace<R: Read>(reader: R) -> Result<Vec<EncounterEvent>, IngestError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 4];
    for (slot, name) in idx.iter_mut().zip(["time", "a", "b", "duration"]) {
        *slot = column(&headers, name)
            .ok_or_else(|| malformed(1, format!("header lacks column `{name}`")))?;
    }
    let mut events = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = line_of(&row);
        let time: i64 = parse(&row, idx[0], "time")?;
        let a: i64 = parse(&row, idx[1], "a")?;
        let b: i64 = parse(&row, idx[2], "b")?;
        let duration: i64 = parse(&row, idx[3], "duration")?;
        if time < 0 || a < 0 || b < 0 || duration < 0 {
            return Err(malformed(line, "negative field"));
        }
        let ev = EncounterEvent::new(
            time as SimTime,
            UserId(a as u64),
            UserId(b as u64),
            duration as SimTime,
        )
        .ok_or_else(|| malformed(line, format!("node {a} encounters itself")))?;
        events.push(ev);
    }
    normalize_trace(&mut events);
    Ok(events)
}

pub fn load_trace(path: &Path) -> Result<Vec<EncounterEvent>, IngestError> {
    read_trace(BufReader::new(open(path)?))
}

pub fn write_trace<W: Write>(writer: W, events: &[EncounterEvent]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["time", "a", "b", "duration"])?;
    for e in events {
        w.write_record([
            e.time.to_string(),
            e.a.0.to_string(),
            e.b.0.to_string(),
            e.duration.to_string(),
        ])?;
    }
    w.flush().map_err(|e| IngestError::Csv(e.into()))?;
    Ok(())
}

pub fn save_trace(path: &Path, events: &[EncounterEvent]) -> Result<(), IngestError> {
    write_trace(io::BufWriter::new(create(path)?), events)
}

/// Parameters of the pairwise Poisson contact process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceGenParams {
    pub n_nodes: u64,
    /// Seconds.
    pub horizon: SimTime,
    /// Expected contacts per node pair per hour.
    pub mean_rate: f64,
    /// Rate multiplier for pairs in the same community.
    #[serde(default = "one")]
    pub rate_heterogeneity: f64,
    #[serde(default = "one_u64")]
    pub n_communities: u64,
    /// Mean contact duration in seconds.
    pub mean_duration: f64,
    pub seed: u64,
    /// Id of the first node; nodes are numbered consecutively from here.
    #[serde(default = "one_u64")]
    pub first_id: u64,
}

fn one() -> f64 {
    1.0
}

fn one_u64() -> u64 {
    1
}

impl TraceGenParams {
    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: &str| Err(IngestError::BadParams(m.to_string()));
        if self.n_nodes < 1 || self.n_communities < 1 {
            return bad("node and community counts must be at least 1");
        }
        if self.horizon < 1 {
            return bad("horizon must be positive");
        }
        if !(self.mean_rate.is_finite() && self.mean_rate > 0.0) {
            return bad("mean_rate must be > 0");
        }
        if !(self.mean_duration.is_finite() && self.mean_duration > 0.0) {
            return bad("mean_duration must be > 0");
        }
        if !(self.rate_heterogeneity.is_finite() && self.rate_heterogeneity >= 1.0) {
            return bad("rate_heterogeneity must be >= 1");
        }
        if self.first_id.checked_add(self.n_nodes).is_none() {
            return bad("node ids overflow");
        }
        Ok(())
    }
}

/// Samples a contact trace: for every unordered node pair, contact times follow a Poisson process
/// and durations an exponential distribution. Node `i` (0-based) belongs to community
/// `i mod n_communities`.
pub fn generate_trace(params: &TraceGenParams) -> Result<Vec<EncounterEvent>, IngestError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let duration_dist =
        Exp::new(1.0 / params.mean_duration).map_err(|e| IngestError::BadParams(e.to_string()))?;
    let horizon = params.horizon as f64;
    let mut events = Vec::new();
    for i in 0..params.n_nodes {
        for j in (i + 1)..params.n_nodes {
            let same = i % params.n_communities == j % params.n_communities;
            let per_hour = if same {
                params.mean_rate * params.rate_heterogeneity
            } else {
                params.mean_rate
            };
            let gap =
                Exp::new(per_hour / 3600.0).map_err(|e| IngestError::BadParams(e.to_string()))?;
            let mut t = gap.sample(&mut rng);
            while t < horizon {
                let duration = duration_dist.sample(&mut rng).round() as SimTime;
                events.push(EncounterEvent {
                    time: t.floor() as SimTime,
                    a: UserId(params.first_id + i),
                    b: UserId(params.first_id + j),
                    duration,
                });
                t += gap.sample(&mut rng);
            }
        }
    }
    normalize_trace(&mut events);
    Ok(events)
}

/// Item metadata keyed by item, with the attribute schema from the file header.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    pub schema: Vec<String>,
    pub items: BTreeMap<ItemId, ItemMeta>,
}

impl Catalog {
    pub fn get(&self, item: &ItemId) -> Option<&ItemMeta> {
        self.items.get(item)
    }

    pub fn weight(&self, item: &ItemId, attribute: &str) -> Option<f64> {
        let idx = self.schema.iter().position(|a| a == attribute)?;
        self.items.get(item).map(|m| m.weights[idx])
    }
}

pub fn read_catalog<R: Read>(reader: R, ontology: &Ontology) -> Result<Catalog, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.get(0).map(str::trim) != Some("category")
        || headers.get(1).map(str::trim) != Some("key")
    {
        return Err(malformed(
            1,
            "catalog header must start with `category,key`",
        ));
    }
    let schema: Vec<String> = headers
        .iter()
        .skip(2)
        .map(|h| h.trim().to_string())
        .collect();
    let mut items = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        let line = line_of(&row);
        if row.len() > schema.len() + 2 {
            return Err(malformed(line, "more attribute values than schema columns"));
        }
        let invalid = |source| IngestError::Invalid { line, source };
        let cat_name = field(&row, 0, "category")?;
        let category: Category = ontology.category(cat_name).map_err(invalid)?;
        let key = field(&row, 1, "key")?;
        let item = ItemId::new(category, key).map_err(invalid)?;
        let mut weights = vec![0.0; schema.len()];
        for (k, w) in weights.iter_mut().enumerate() {
            let raw = row.get(k + 2).map(str::trim).unwrap_or("");
            if raw.is_empty() {
                continue;
            }
            let v: f64 = raw.parse().map_err(|_| {
                malformed(
                    line,
                    format!("cannot parse weight `{raw}` for `{}`", schema[k]),
                )
            })?;
            if !(0.0..=1.0).contains(&v) {
                return Err(malformed(
                    line,
                    format!("weight {v} for `{}` outside [0, 1]", schema[k]),
                ));
            }
            *w = v;
        }
        if items.contains_key(&item) {
            return Err(IngestError::DuplicateItem {
                line,
                category: cat_name.to_string(),
                key: key.to_string(),
            });
        }
        items.insert(item.clone(), ItemMeta { item, weights });
    }
    Ok(Catalog { schema, items })
}

pub fn load_catalog(path: &Path, ontology: &Ontology) -> Result<Catalog, IngestError> {
    read_catalog(BufReader::new(open(path)?), ontology)
}

/// Converts MovieLens `u.data` (`user item rating timestamp`, whitespace separated) into a ratings
/// CSV in category `movies`. Users with an id above `max_user` are skipped. Returns the number of
/// records written.
pub fn convert_ml100k<R: BufRead, W: Write>(
    input: R,
    output: W,
    max_user: Option<u64>,
) -> Result<usize, IngestError> {
    let mut w = csv::Writer::from_writer(output);
    w.write_record([
        "rater",
        "category",
        "key",
        "value",
        "timestamp",
        "source",
        "hops",
    ])?;
    let mut n = 0;
    for (i, line) in input.lines().enumerate() {
        let lineno = i as u64 + 1;
        let line = line.map_err(|source| IngestError::Io {
            path: "<ml-100k input>".into(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 4 {
            return Err(malformed(lineno, "expected `user item rating timestamp`"));
        }
        let user: u64 = cols[0]
            .parse()
            .map_err(|_| malformed(lineno, format!("bad user id `{}`", cols[0])))?;
        if max_user.is_some_and(|m| user > m) {
            continue;
        }
        let rating: f32 = cols[2]
            .parse()
            .map_err(|_| malformed(lineno, format!("bad rating `{}`", cols[2])))?;
        let ts: u64 = cols[3]
            .parse()
            .map_err(|_| malformed(lineno, format!("bad timestamp `{}`", cols[3])))?;
        w.write_record([
            user.to_string().as_str(),
            "movies",
            cols[1],
            rating.to_string().as_str(),
            ts.to_string().as_str(),
            "manual",
            "0",
        ])?;
        n += 1;
    }
    w.flush().map_err(|e| IngestError::Csv(e.into()))?;
    Ok(n)
}

pub fn convert_ml100k_file(
    input: &Path,
    output: &Path,
    max_user: Option<u64>,
) -> Result<usize, IngestError> {
    let inp = BufReader::new(open(input)?);
    let out = io::BufWriter::new(create(output)?);
    convert_ml100k(inp, out, max_user)
}

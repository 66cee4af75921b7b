//! Seeded synthetic flow corpora with injected PII.

use std::collections::BTreeSet;
use std::io::Write;

use indexmap::IndexMap;
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{write_records, FlowRecord};
use crate::rng::seeded;

/// Dedicated key (if any) and shared carrier keys for each supported type.
const TYPE_TABLE: &[(&str, Option<&str>, &[&str])] = &[
    ("imei", Some("b.imei"), &["q.device_id", "h.X-Device"]),
    (
        "android_id",
        Some("b.android_id"),
        &["q.device_id", "q.uid"],
    ),
    ("advertiser_id", Some("q.aid"), &["h.Cookie", "b.token"]),
    ("email", Some("b.email"), &["b.user", "q.uid"]),
    ("phone_number", Some("b.phone"), &["b.user"]),
    ("location", Some("q.lat"), &[]),
    ("mac_address", None, &["h.X-Device", "b.token"]),
    ("imsi", None, &["q.session", "q.device_id"]),
    ("zip_code", None, &["b.event", "q.format"]),
];

pub const DEFAULT_TYPES: [&str; 6] = [
    "advertiser_id",
    "android_id",
    "email",
    "imei",
    "location",
    "phone_number",
];

const DEFAULT_KEYS: [&str; 26] = [
    "q.uid",
    "q.device_id",
    "q.aid",
    "q.lat",
    "q.lon",
    "q.v",
    "q.lang",
    "q.sdk",
    "q.session",
    "q.format",
    "h.User-Agent",
    "h.Accept",
    "h.Accept-Language",
    "h.Referer",
    "h.Referrer",
    "h.X-Device",
    "h.Cookie",
    "h.Connection",
    "b.email",
    "b.phone",
    "b.imei",
    "b.android_id",
    "b.user",
    "b.event",
    "b.ts",
    "b.token",
];

/// Keys that only ever carry PII and are absent otherwise.
const PII_ONLY_KEYS: [&str; 7] = [
    "b.email",
    "b.phone",
    "b.imei",
    "b.android_id",
    "q.aid",
    "q.lat",
    "q.lon",
];

const DEFAULT_VALUES: [&str; 40] = [
    "ok",
    "true",
    "false",
    "en",
    "en-US",
    "json",
    "xml",
    "home",
    "feed",
    "click",
    "view",
    "open",
    "close",
    "a1b2",
    "x9",
    "beta",
    "prod",
    "v2",
    "v3",
    "gzip",
    "keep-alive",
    "android",
    "release",
    "debug",
    "low",
    "high",
    "none",
    "sync",
    "push",
    "menu",
    "tab",
    "start",
    "stop",
    "lite",
    "pro",
    "free",
    "paid",
    "okhttp",
    "dalvik",
    "webview",
];

const FIRST: [&str; 8] = ["alex", "sam", "lee", "kim", "jo", "max", "ana", "eli"];
const LAST: [&str; 8] = [
    "smith", "jones", "brown", "lopez", "khan", "chen", "silva", "ng",
];
const MAILS: [&str; 4] = ["mail", "inbox", "post", "webmail"];
const PATHS: [&str; 8] = [
    "/v1/track",
    "/api/ads",
    "/sdk/init",
    "/collect",
    "/v2/events",
    "/config",
    "/log",
    "/ping",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_flows: usize,
    pub n_domains: usize,
    pub leak_fraction: f64,
    pub types: Vec<String>,
    /// Relative share of each type as a leak's primary type.
    pub weights: Vec<f64>,
    /// Every n-th leak also carries a second type; 0 disables.
    pub second_type_every: usize,
    pub keys: Vec<String>,
    pub values: Vec<String>,
    /// Probability that a non-carrier key appears in a flow.
    pub key_presence: f64,
    /// Probability that a value goes to its type's dedicated key rather
    /// than a shared carrier.
    pub dedicated_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_flows: 2000,
            n_domains: 20,
            leak_fraction: 0.4,
            types: DEFAULT_TYPES.iter().map(|s| s.to_string()).collect(),
            weights: vec![1.0; DEFAULT_TYPES.len()],
            second_type_every: 4,
            keys: DEFAULT_KEYS.iter().map(|s| s.to_string()).collect(),
            values: DEFAULT_VALUES.iter().map(|s| s.to_string()).collect(),
            key_presence: 0.6,
            dedicated_rate: 0.85,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.leak_fraction) {
            return Err(Error::Config(format!(
                "leak fraction {} outside [0, 1]",
                self.leak_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.key_presence) || !(0.0..=1.0).contains(&self.dedicated_rate)
        {
            return Err(Error::Config(
                "key presence and dedicated rate must lie in [0, 1]".into(),
            ));
        }
        if self.keys.is_empty() {
            return Err(Error::EmptyInput("key vocabulary pool"));
        }
        if self.values.is_empty() {
            return Err(Error::EmptyInput("value vocabulary pool"));
        }
        if self.n_domains == 0 {
            return Err(Error::EmptyInput("domain pool"));
        }
        if self.types.is_empty() && self.leak_fraction > 0.0 {
            return Err(Error::EmptyInput("PII type universe"));
        }
        if self.weights.len() != self.types.len() {
            return Err(Error::Config(
                "one injection weight per type is required".into(),
            ));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0))
            || (!self.types.is_empty() && self.weights.iter().all(|&w| w == 0.0))
        {
            return Err(Error::Config(
                "injection weights must be non-negative and not all zero".into(),
            ));
        }
        for t in &self.types {
            if !TYPE_TABLE.iter().any(|(name, _, _)| name == t) {
                return Err(Error::UnknownType(t.clone()));
            }
        }
        for k in &self.keys {
            if !(k.starts_with("q.") || k.starts_with("h.") || k.starts_with("b.")) || k.len() < 3 {
                return Err(Error::Config(format!("key {k:?} needs a q./h./b. prefix")));
            }
        }
        Ok(())
    }

    pub fn n_leaks(&self) -> usize {
        (self.n_flows as f64 * self.leak_fraction).round() as usize
    }
}

/// Largest-remainder split of `total` by `weights`.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..weights.len()).collect();
    rest.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let short = total - counts.iter().sum::<usize>();
    for &i in rest.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

fn hex(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n)
        .map(|_| char::from_digit(rng.gen_range(0..16), 16).unwrap())
        .collect()
}

fn digits(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n)
        .map(|_| char::from_digit(rng.gen_range(0..10), 10).unwrap())
        .collect()
}

/// Synthetic value of the given type; location yields a latitude and a
/// longitude.
fn pii_value(kind: &str, rng: &mut ChaCha8Rng) -> Vec<String> {
    match kind {
        "imei" => vec![format!("35{}", digits(rng, 13))],
        "android_id" => vec![hex(rng, 16)],
        "advertiser_id" => vec![format!(
            "{}-{}-{}-{}-{}",
            hex(rng, 8),
            hex(rng, 4),
            hex(rng, 4),
            hex(rng, 4),
            hex(rng, 12)
        )],
        "email" => vec![format!(
            "{}.{}{}@{}.com",
            FIRST[rng.gen_range(0..FIRST.len())],
            LAST[rng.gen_range(0..LAST.len())],
            rng.gen_range(10..100),
            MAILS[rng.gen_range(0..MAILS.len())]
        )],
        "phone_number" => vec![format!("+1-555-{}-{}", digits(rng, 3), digits(rng, 4))],
        "location" => vec![
            format!("{:.5}", rng.gen_range(30.0..45.0)),
            format!("{:.5}", rng.gen_range(-120.0..-75.0)),
        ],
        "mac_address" => vec![(0..6).map(|_| hex(rng, 2)).collect::<Vec<_>>().join(":")],
        "imsi" => vec![format!("310{}", digits(rng, 12))],
        "zip_code" => vec![digits(rng, 5)],
        _ => unreachable!("validated type"),
    }
}

fn carriers(kind: &str) -> (Option<&'static str>, &'static [&'static str]) {
    TYPE_TABLE
        .iter()
        .find(|(n, _, _)| *n == kind)
        .map(|(_, d, c)| (*d, *c))
        .unwrap()
}

fn insert(rec: &mut FlowRecord, query: &mut Vec<(String, String)>, key: &str, value: String) {
    let (ns, name) = key.split_at(2);
    match ns {
        "q." => {
            if let Some(slot) = query.iter_mut().find(|(k, _)| k == name) {
                slot.1 = value;
            } else {
                query.push((name.to_string(), value));
            }
        }
        "h." => {
            rec.headers.insert(name.to_string(), value);
        }
        _ => {
            rec.body_kv.insert(name.to_string(), value);
        }
    }
}

/// Benign values available to key `k`: a window of the value pool.
fn benign_pool<'a>(values: &'a [String], k: usize) -> impl Iterator<Item = &'a String> {
    let width = values.len().min(6);
    let start = (k * 7) % values.len();
    (0..width).map(move |o| &values[(start + o) % values.len()])
}

pub fn generate(cfg: &SynthConfig) -> Result<Vec<FlowRecord>> {
    cfg.validate()?;
    let n = cfg.n_flows;
    let n_leaks = cfg.n_leaks();
    let mut rng = seeded(cfg.seed, 0x5EED);
    let mut is_leak = vec![false; n];
    for i in index::sample(&mut rng, n, n_leaks) {
        is_leak[i] = true;
    }
    // primary type per leak, in a seeded order with exact counts
    let mut primaries: Vec<usize> = apportion(n_leaks, &cfg.weights)
        .into_iter()
        .enumerate()
        .flat_map(|(t, c)| std::iter::repeat(t).take(c))
        .collect();
    rand::seq::SliceRandom::shuffle(primaries.as_mut_slice(), &mut rng);

    let domains: Vec<String> = (0..cfg.n_domains)
        .map(|d| format!("api{}.tracker{}.example.com", d % 7, d))
        .collect();
    let pii_only: BTreeSet<&str> = PII_ONLY_KEYS.iter().copied().collect();
    let carrier_keys: BTreeSet<&str> = cfg
        .types
        .iter()
        .flat_map(|t| carriers(t).1.iter().copied())
        .collect();

    let mut records = Vec::with_capacity(n);
    let mut leak_no = 0;
    for i in 0..n {
        let mut frng = seeded(cfg.seed, 0x1_0000 + i as u64);
        let d = frng.gen_range(0..cfg.n_domains);
        let mut rec = FlowRecord {
            app_id: format!("com.example.app{}", frng.gen_range(0..12)),
            domain: domains[d].clone(),
            dst_ip: format!("10.{}.{}.{}", d / 250, d % 250, 10 + d % 200),
            dst_port: [80, 443, 8080][frng.gen_range(0..3)],
            method: if frng.gen_bool(0.5) { "GET" } else { "POST" }.to_string(),
            uri: String::new(),
            headers: IndexMap::new(),
            body_kv: IndexMap::new(),
            timestamp_ms: 1_600_000_000_000 + i as u64 * 1000 + frng.gen_range(0..1000),
            label: Some(is_leak[i]),
            pii_types: None,
        };
        let mut query: Vec<(String, String)> = Vec::new();
        for (k, key) in cfg.keys.iter().enumerate() {
            if pii_only.contains(key.as_str()) {
                continue;
            }
            let p = if carrier_keys.contains(key.as_str()) {
                0.3
            } else {
                cfg.key_presence
            };
            if frng.gen_bool(p) {
                let pool: Vec<&String> = benign_pool(&cfg.values, k).collect();
                let v = pool[frng.gen_range(0..pool.len())].clone();
                insert(&mut rec, &mut query, key, v);
            }
        }
        if is_leak[i] {
            let mut types = vec![primaries[leak_no]];
            if cfg.second_type_every > 0
                && cfg.types.len() > 1
                && leak_no % cfg.second_type_every == 0
            {
                types.push(
                    (primaries[leak_no]
                        + 1
                        + leak_no / cfg.second_type_every % (cfg.types.len() - 1))
                        % cfg.types.len(),
                );
            }
            leak_no += 1;
            let mut used: BTreeSet<String> = BTreeSet::new();
            let mut set = BTreeSet::new();
            for &t in &types {
                let name = &cfg.types[t];
                let values = pii_value(name, &mut frng);
                if name == "location" {
                    insert(&mut rec, &mut query, "q.lat", values[0].clone());
                    insert(&mut rec, &mut query, "q.lon", values[1].clone());
                    used.insert("q.lat".into());
                } else {
                    let in_pool = |k: &&str| cfg.keys.iter().any(|p| p == k) && !used.contains(*k);
                    let (dedicated, shared) = carriers(name);
                    let dedicated = dedicated.filter(in_pool);
                    let free: Vec<&str> = shared.iter().copied().filter(in_pool).collect();
                    let key = match dedicated {
                        Some(d) if free.is_empty() || frng.gen_bool(cfg.dedicated_rate) => Some(d),
                        _ if !free.is_empty() => Some(free[frng.gen_range(0..free.len())]),
                        _ => cfg
                            .keys
                            .iter()
                            .find(|k| !used.contains(*k) && !pii_only.contains(k.as_str()))
                            .map(String::as_str),
                    };
                    let key = key
                        .ok_or(Error::EmptyInput("no free carrier key"))?
                        .to_string();
                    insert(&mut rec, &mut query, &key, values[0].clone());
                    used.insert(key);
                }
                set.insert(name.clone());
            }
            rec.pii_types = Some(set);
        }
        let path = PATHS[frng.gen_range(0..PATHS.len())];
        rec.uri = if query.is_empty() {
            path.to_string()
        } else {
            let q: Vec<String> = query.iter().map(|(k, v)| format!("{k}={v}")).collect();
            format!("{path}?{}", q.join("&"))
        };
        records.push(rec);
    }
    Ok(records)
}

pub fn write_corpus<W: Write>(records: &[FlowRecord], out: W) -> Result<()> {
    write_records(records, std::io::BufWriter::new(out))
}

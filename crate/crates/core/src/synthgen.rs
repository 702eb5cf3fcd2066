//! Deterministic generator of marketplace-shaped synthetic corpora.
//!
//! Every user gets a planted preferred brand; with probability
//! `affinity_strength` an event's item is drawn from that brand, otherwise
//! uniformly from the whole catalog. The planted brand is recoverable through
//! [`planted_affinity_oracle`], which gives acceptance tests a ground truth.
//!
//! Per-entity RNG streams are keyed by `(seed, stream, entity index)` so
//! output is byte-identical regardless of generation order or sharding.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{EventRecord, EventType, ItemSnapshot};

#[derive(Debug, Error)]
pub enum SynthgenError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("unknown user: {0}")]
    UnknownUser(String),
}

/// Taxonomy shape: a 3-level tree with `n_c0` roots, `n_c1_per_c0` children
/// each, `n_c2_per_c1` leaves under each c1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TaxonomySpec {
    pub n_c0: usize,
    pub n_c1_per_c0: usize,
    pub n_c2_per_c1: usize,
}

impl TaxonomySpec {
    pub fn n_leaves(&self) -> usize {
        self.n_c0 * self.n_c1_per_c0 * self.n_c2_per_c1
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    pub n_brands: usize,
    pub taxonomy: TaxonomySpec,
    /// Inclusive [min, max] event count per user.
    pub events_per_user_range: (usize, usize),
    /// Probability an event stays within the user's planted brand.
    pub affinity_strength: f64,
    /// Title token pool size per leaf category.
    pub vocab_per_c2: usize,
    /// Weights for the six event types, in `EventType::ALL` order.
    pub event_type_weights: [f64; 6],
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 42,
            n_users: 1000,
            n_items: 1000,
            n_brands: 20,
            taxonomy: TaxonomySpec {
                n_c0: 4,
                n_c1_per_c0: 3,
                n_c2_per_c1: 4,
            },
            events_per_user_range: (12, 30),
            affinity_strength: 0.8,
            vocab_per_c2: 40,
            // Skewed toward item_view, mirroring click-dominated traffic.
            event_type_weights: [80.0, 10.0, 4.0, 3.0, 2.0, 1.0],
        }
    }
}

const BASE_MICROS: i64 = 1_672_531_200_000_000; // 2023-01-01T00:00:00Z
const USER_SPACING_MICROS: i64 = 3_600_000_000;
const EVENT_SPACING_MICROS: i64 = 60_000_000;

const STREAM_ITEM: u64 = 0x11;
const STREAM_USER: u64 = 0x22;
const STREAM_BRAND: u64 = 0x33;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn stream_rng(seed: u64, stream: u64, idx: u64) -> ChaCha8Rng {
    let key =
        splitmix64(seed ^ splitmix64(stream) ^ splitmix64(idx.wrapping_mul(0xD1B5_4A32_D192_ED03)));
    ChaCha8Rng::seed_from_u64(key)
}

fn planted_brand(config: &GenConfig, user_idx: usize) -> i64 {
    let mut rng = stream_rng(config.seed, STREAM_BRAND, user_idx as u64);
    rng.gen_range(0..config.n_brands as i64)
}

fn validate(config: &GenConfig) -> Result<(), SynthgenError> {
    if config.taxonomy.n_leaves() == 0 {
        return Err(SynthgenError::InvalidConfig("taxonomy has zero leaves".into()));
    }
    if config.n_items > 0 && config.n_brands == 0 {
        return Err(SynthgenError::InvalidConfig(
            "n_brands must be > 0 when items are generated".into(),
        ));
    }
    if !(0.0..=1.0).contains(&config.affinity_strength) {
        return Err(SynthgenError::InvalidConfig(format!(
            "affinity_strength {} outside [0,1]",
            config.affinity_strength
        )));
    }
    if config.event_type_weights.iter().any(|&w| w < 0.0) {
        return Err(SynthgenError::InvalidConfig("negative event type weight".into()));
    }
    if config.event_type_weights.iter().sum::<f64>() <= 0.0 {
        return Err(SynthgenError::InvalidConfig("event type weights sum to zero".into()));
    }
    if config.events_per_user_range.0 > config.events_per_user_range.1 {
        return Err(SynthgenError::InvalidConfig("events_per_user_range min > max".into()));
    }
    Ok(())
}

fn make_item(config: &GenConfig, idx: usize) -> ItemSnapshot {
    let mut rng = stream_rng(config.seed, STREAM_ITEM, idx as u64);
    let tax = &config.taxonomy;
    let c2_global = rng.gen_range(0..tax.n_leaves());
    let c1_global = c2_global / tax.n_c2_per_c1;
    let c0 = c1_global / tax.n_c1_per_c0;
    let brand = rng.gen_range(0..config.n_brands);

    let title_len = rng.gen_range(3..=6);
    let mut words: Vec<String> = (0..title_len)
        .map(|_| format!("w{}x{}", c2_global, rng.gen_range(0..config.vocab_per_c2.max(1))))
        .collect();
    words.push(format!("brand{brand}"));

    ItemSnapshot {
        item_id: format!("item-{idx:06}"),
        name: words.join(" "),
        price_usd: Some((rng.gen_range(100..20_000) as f64) / 100.0),
        brand_id: Some(brand as i64),
        brand_name: format!("brand{brand}"),
        c0_id: Some(c0 as i64),
        c0_name: format!("section {c0}"),
        c1_id: Some(c1_global as i64),
        c1_name: format!("family {c1_global}"),
        c2_id: Some(c2_global as i64),
        c2_name: format!("leaf {c2_global}"),
        item_condition_id: Some(rng.gen_range(1..=6)),
        size_id: if rng.gen_bool(0.3) { Some(rng.gen_range(1..=30)) } else { None },
        shipper_id: Some(rng.gen_range(0..=1)),
    }
}

fn make_user_events(
    config: &GenConfig,
    user_idx: usize,
    items: &[ItemSnapshot],
    items_by_brand: &[Vec<usize>],
    weighted: &WeightedIndex<f64>,
) -> Vec<EventRecord> {
    let mut rng = stream_rng(config.seed, STREAM_USER, user_idx as u64);
    let (lo, hi) = config.events_per_user_range;
    let n_events = rng.gen_range(lo..=hi);
    let brand = planted_brand(config, user_idx) as usize;
    let brand_pool = &items_by_brand[brand];

    let user_id = format!("u{user_idx:05}");
    let base = BASE_MICROS + user_idx as i64 * USER_SPACING_MICROS;

    (0..n_events)
        .map(|e| {
            let on_brand = !brand_pool.is_empty() && rng.gen_bool(config.affinity_strength);
            let item_idx = if on_brand {
                brand_pool[rng.gen_range(0..brand_pool.len())]
            } else {
                rng.gen_range(0..items.len())
            };
            let event_type = EventType::ALL[weighted.sample(&mut rng)];
            EventRecord {
                user_id: user_id.clone(),
                sequence_id: "s0".to_string(),
                session_id: Some(format!("ss{}", e / 8)),
                stime_micros: base + e as i64 * EVENT_SPACING_MICROS + rng.gen_range(0..1_000_000),
                event_type,
                item: items[item_idx].clone(),
            }
        })
        .collect()
}

/// Generates the full catalog and event log for a config. Byte-deterministic
/// given the seed; output identical regardless of thread count.
pub fn generate_corpus(
    config: &GenConfig,
) -> Result<(Vec<ItemSnapshot>, Vec<EventRecord>), SynthgenError> {
    validate(config)?;

    let items: Vec<ItemSnapshot> = (0..config.n_items)
        .into_par_iter()
        .map(|i| make_item(config, i))
        .collect();

    if config.n_users == 0 || items.is_empty() {
        return Ok((items, Vec::new()));
    }

    let mut items_by_brand: Vec<Vec<usize>> = vec![Vec::new(); config.n_brands];
    for (i, item) in items.iter().enumerate() {
        items_by_brand[item.brand_id.unwrap() as usize].push(i);
    }
    let weighted = WeightedIndex::new(config.event_type_weights)
        .map_err(|e| SynthgenError::InvalidConfig(e.to_string()))?;

    let events: Vec<EventRecord> = (0..config.n_users)
        .into_par_iter()
        .map(|u| make_user_events(config, u, &items, &items_by_brand, &weighted))
        .flatten()
        .collect();

    Ok((items, events))
}

/// Returns the brand the generator planted for `user_id` under `config`.
pub fn planted_affinity_oracle(config: &GenConfig, user_id: &str) -> Result<i64, SynthgenError> {
    let idx: usize = user_id
        .strip_prefix('u')
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| SynthgenError::UnknownUser(user_id.to_string()))?;
    if idx >= config.n_users || user_id != format!("u{idx:05}") {
        return Err(SynthgenError::UnknownUser(user_id.to_string()));
    }
    Ok(planted_brand(config, idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{parse_event_line, serialize_event};

    fn small_config() -> GenConfig {
        GenConfig {
            n_users: 100,
            n_items: 200,
            ..GenConfig::default()
        }
    }

    #[test]
    fn zero_users_yields_no_events() {
        let config = GenConfig {
            n_users: 0,
            ..small_config()
        };
        let (items, events) = generate_corpus(&config).unwrap();
        assert_eq!(items.len(), 200);
        assert!(events.is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let config = small_config();
        let (items_a, events_a) = generate_corpus(&config).unwrap();
        let (items_b, events_b) = generate_corpus(&config).unwrap();
        let ser_a: Vec<String> = events_a.iter().map(serialize_event).collect();
        let ser_b: Vec<String> = events_b.iter().map(serialize_event).collect();
        assert_eq!(items_a, items_b);
        assert_eq!(ser_a, ser_b);
    }

    #[test]
    fn fixed_range_gives_exact_event_count() {
        let config = GenConfig {
            n_users: 100,
            events_per_user_range: (12, 12),
            ..small_config()
        };
        let (_, events) = generate_corpus(&config).unwrap();
        assert_eq!(events.len(), 1200);
    }

    #[test]
    fn full_affinity_pins_every_event_to_planted_brand() {
        let config = GenConfig {
            affinity_strength: 1.0,
            ..small_config()
        };
        let (_, events) = generate_corpus(&config).unwrap();
        assert!(!events.is_empty());
        for event in &events {
            let planted = planted_affinity_oracle(&config, &event.user_id).unwrap();
            assert_eq!(event.item.brand_id, Some(planted), "off-brand event for {}", event.user_id);
        }
    }

    #[test]
    fn oracle_rejects_unknown_users() {
        let config = small_config();
        assert!(matches!(
            planted_affinity_oracle(&config, "u99999"),
            Err(SynthgenError::UnknownUser(_))
        ));
        assert!(matches!(
            planted_affinity_oracle(&config, "not-a-user"),
            Err(SynthgenError::UnknownUser(_))
        ));
    }

    #[test]
    fn zero_affinity_brand_distribution_is_uniform() {
        // Chi-square against the catalog's per-brand item share, >= 10^4 events.
        let config = GenConfig {
            n_users: 1000,
            n_items: 400,
            events_per_user_range: (12, 12),
            affinity_strength: 0.0,
            ..GenConfig::default()
        };
        let (items, events) = generate_corpus(&config).unwrap();
        assert!(events.len() >= 10_000);

        let mut item_share = vec![0f64; config.n_brands];
        for item in &items {
            item_share[item.brand_id.unwrap() as usize] += 1.0;
        }
        let mut observed = vec![0f64; config.n_brands];
        for event in &events {
            observed[event.item.brand_id.unwrap() as usize] += 1.0;
        }
        let n = events.len() as f64;
        let chi2: f64 = (0..config.n_brands)
            .map(|b| {
                let expected = n * item_share[b] / items.len() as f64;
                (observed[b] - expected).powi(2) / expected
            })
            .sum();

        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let dist = ChiSquared::new((config.n_brands - 1) as f64).unwrap();
        let p_value = 1.0 - dist.cdf(chi2);
        assert!(p_value > 0.001, "chi2={chi2:.2}, p={p_value:.5}");
    }

    #[test]
    fn every_generated_line_parses() {
        let (_, events) = generate_corpus(&small_config()).unwrap();
        for event in &events {
            let line = serialize_event(event);
            let parsed = parse_event_line(&line).unwrap();
            assert_eq!(&parsed, event);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut config = small_config();
        config.taxonomy.n_c0 = 0;
        assert!(matches!(generate_corpus(&config), Err(SynthgenError::InvalidConfig(_))));

        let mut config = small_config();
        config.event_type_weights = [0.0; 6];
        assert!(matches!(generate_corpus(&config), Err(SynthgenError::InvalidConfig(_))));

        let mut config = small_config();
        config.affinity_strength = 1.5;
        assert!(matches!(generate_corpus(&config), Err(SynthgenError::InvalidConfig(_))));
    }
}

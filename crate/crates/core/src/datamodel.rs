//! Event/item schema, `.jsonl` parsing and per-user sequence reconstruction.
//!
//! The wire format is one JSON object per line with the marketplace's flat
//! field names (`user_id`, `sequence_id`, `stime`, `event_id`, `item_id`,
//! `name`, `price`, `c0_name` .. `c2_id`, `brand_name`, `brand_id`,
//! `item_condition_id`, `size_id`, `shipper_id`). Items are snapshots: the
//! same `item_id` may reappear with different fields because listings are
//! editable.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatamodelError {
    #[error("malformed line: {0}")]
    MalformedLine(String),
    #[error("missing field: {0}")]
    MissingField(&'static str),
    #[error("unknown event type: {0}")]
    UnknownEventType(String),
}

/// The six user action types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    ItemView,
    ItemLike,
    ItemAddToCart,
    OfferMake,
    BuyStart,
    BuyComplete,
}

impl EventType {
    pub const ALL: [EventType; 6] = [
        EventType::ItemView,
        EventType::ItemLike,
        EventType::ItemAddToCart,
        EventType::OfferMake,
        EventType::BuyStart,
        EventType::BuyComplete,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EventType::ItemView => "item_view",
            EventType::ItemLike => "item_like",
            EventType::ItemAddToCart => "item_add_to_cart",
            EventType::OfferMake => "offer_make",
            EventType::BuyStart => "buy_start",
            EventType::BuyComplete => "buy_complete",
        }
    }

    pub fn parse(s: &str) -> Result<EventType, DatamodelError> {
        match s {
            "item_view" => Ok(EventType::ItemView),
            "item_like" => Ok(EventType::ItemLike),
            "item_add_to_cart" => Ok(EventType::ItemAddToCart),
            "offer_make" => Ok(EventType::OfferMake),
            "buy_start" => Ok(EventType::BuyStart),
            "buy_complete" => Ok(EventType::BuyComplete),
            other => Err(DatamodelError::UnknownEventType(other.to_string())),
        }
    }
}

/// An item as it looked at event time. Snapshot semantics: two records with
/// the same `item_id` may differ in every other field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemSnapshot {
    pub item_id: String,
    pub name: String,
    pub price_usd: Option<f64>,
    pub brand_id: Option<i64>,
    pub brand_name: String,
    pub c0_id: Option<i64>,
    pub c0_name: String,
    pub c1_id: Option<i64>,
    pub c1_name: String,
    pub c2_id: Option<i64>,
    pub c2_name: String,
    pub item_condition_id: Option<i64>,
    pub size_id: Option<i64>,
    pub shipper_id: Option<i64>,
}

/// One timestamped user action on an item snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub user_id: String,
    pub sequence_id: String,
    pub session_id: Option<String>,
    /// UTC instant, epoch microseconds.
    pub stime_micros: i64,
    pub event_type: EventType,
    pub item: ItemSnapshot,
}

/// Synthetic SKU proxy: the (brand, leaf-category) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProductId {
    pub brand_id: i64,
    pub c2_id: i64,
}

/// A user's action stream for one `sequence_id`, time-ordered.
#[derive(Debug, Clone, PartialEq)]
pub struct UserSequence {
    pub user_id: String,
    pub sequence_id: String,
    pub events: Vec<EventRecord>,
}

fn req_str(
    obj: &serde_json::Map<String, serde_json::Value>,
    key: &'static str,
) -> Result<String, DatamodelError> {
    match obj.get(key) {
        Some(serde_json::Value::String(s)) => Ok(s.clone()),
        Some(serde_json::Value::Null) | None => Err(DatamodelError::MissingField(key)),
        Some(v) => Ok(v.to_string()),
    }
}

fn opt_str(obj: &serde_json::Map<String, serde_json::Value>, key: &'static str) -> Option<String> {
    match obj.get(key) {
        Some(serde_json::Value::String(s)) => Some(s.clone()),
        Some(serde_json::Value::Null) | None => None,
        Some(v) => Some(v.to_string()),
    }
}

fn req_i64(
    obj: &serde_json::Map<String, serde_json::Value>,
    key: &'static str,
) -> Result<i64, DatamodelError> {
    opt_i64(obj, key).ok_or(DatamodelError::MissingField(key))
}

fn opt_i64(obj: &serde_json::Map<String, serde_json::Value>, key: &'static str) -> Option<i64> {
    match obj.get(key) {
        Some(serde_json::Value::Number(n)) => n.as_i64(),
        Some(serde_json::Value::String(s)) => s.parse().ok(),
        _ => None,
    }
}

fn opt_f64(obj: &serde_json::Map<String, serde_json::Value>, key: &'static str) -> Option<f64> {
    match obj.get(key) {
        Some(serde_json::Value::Number(n)) => n.as_f64(),
        Some(serde_json::Value::String(s)) => s.parse().ok(),
        _ => None,
    }
}

/// Parses `stime` from either an RFC-3339 string or integer epoch-microseconds,
/// normalizing to epoch-microseconds.
fn parse_stime(v: &serde_json::Value) -> Result<i64, DatamodelError> {
    match v {
        serde_json::Value::Number(n) => n
            .as_i64()
            .ok_or_else(|| DatamodelError::MalformedLine(format!("stime not an integer: {n}"))),
        serde_json::Value::String(s) => chrono::DateTime::parse_from_rfc3339(s)
            .map(|dt| dt.timestamp_micros())
            .map_err(|e| DatamodelError::MalformedLine(format!("stime not RFC-3339: {e}"))),
        other => Err(DatamodelError::MalformedLine(format!(
            "stime has unsupported type: {other}"
        ))),
    }
}

/// Formats epoch-microseconds back to RFC-3339 with microsecond precision.
pub fn format_stime_rfc3339(micros: i64) -> String {
    chrono::DateTime::from_timestamp_micros(micros)
        .expect("timestamp in range")
        .format("%Y-%m-%dT%H:%M:%S%.6fZ")
        .to_string()
}

fn item_from_obj(
    obj: &serde_json::Map<String, serde_json::Value>,
) -> Result<ItemSnapshot, DatamodelError> {
    Ok(ItemSnapshot {
        item_id: req_str(obj, "item_id")?,
        name: req_str(obj, "name")?,
        price_usd: opt_f64(obj, "price"),
        brand_id: Some(req_i64(obj, "brand_id")?),
        brand_name: req_str(obj, "brand_name")?,
        c0_id: opt_i64(obj, "c0_id"),
        c0_name: req_str(obj, "c0_name")?,
        c1_id: opt_i64(obj, "c1_id"),
        c1_name: req_str(obj, "c1_name")?,
        c2_id: Some(req_i64(obj, "c2_id")?),
        c2_name: req_str(obj, "c2_name")?,
        item_condition_id: opt_i64(obj, "item_condition_id"),
        size_id: opt_i64(obj, "size_id"),
        shipper_id: opt_i64(obj, "shipper_id"),
    })
}

/// Parses one event line. Unknown extra keys are ignored; missing optional
/// fields become `None`.
pub fn parse_event_line(line: &str) -> Result<EventRecord, DatamodelError> {
    let value: serde_json::Value = serde_json::from_str(line)
        .map_err(|e| DatamodelError::MalformedLine(format!("invalid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| DatamodelError::MalformedLine("line is not a JSON object".into()))?;

    let stime_val = obj.get("stime").ok_or(DatamodelError::MissingField("stime"))?;
    let event_id = req_str(obj, "event_id")?;

    Ok(EventRecord {
        user_id: req_str(obj, "user_id")?,
        sequence_id: req_str(obj, "sequence_id")?,
        session_id: opt_str(obj, "session_id"),
        stime_micros: parse_stime(stime_val)?,
        event_type: EventType::parse(&event_id)?,
        item: item_from_obj(obj)?,
    })
}

/// Parses one line of an items file (an [`ItemSnapshot`] without event fields).
pub fn parse_item_line(line: &str) -> Result<ItemSnapshot, DatamodelError> {
    let value: serde_json::Value = serde_json::from_str(line)
        .map_err(|e| DatamodelError::MalformedLine(format!("invalid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| DatamodelError::MalformedLine("line is not a JSON object".into()))?;
    item_from_obj(obj)
}

fn item_to_obj(item: &ItemSnapshot, obj: &mut serde_json::Map<String, serde_json::Value>) {
    obj.insert("item_id".into(), item.item_id.clone().into());
    obj.insert("name".into(), item.name.clone().into());
    if let Some(p) = item.price_usd {
        obj.insert("price".into(), p.into());
    }
    obj.insert("c0_name".into(), item.c0_name.clone().into());
    if let Some(id) = item.c0_id {
        obj.insert("c0_id".into(), id.into());
    }
    obj.insert("c1_name".into(), item.c1_name.clone().into());
    if let Some(id) = item.c1_id {
        obj.insert("c1_id".into(), id.into());
    }
    obj.insert("c2_name".into(), item.c2_name.clone().into());
    if let Some(id) = item.c2_id {
        obj.insert("c2_id".into(), id.into());
    }
    obj.insert("brand_name".into(), item.brand_name.clone().into());
    if let Some(id) = item.brand_id {
        obj.insert("brand_id".into(), id.into());
    }
    if let Some(id) = item.item_condition_id {
        obj.insert("item_condition_id".into(), id.into());
    }
    if let Some(id) = item.size_id {
        obj.insert("size_id".into(), id.into());
    }
    if let Some(id) = item.shipper_id {
        obj.insert("shipper_id".into(), id.into());
    }
}

/// Serializes an event back to one wire-format JSON line (`stime` as
/// epoch-microseconds, the normalized form). `parse_event_line` of the
/// result reproduces the record exactly.
pub fn serialize_event(event: &EventRecord) -> String {
    let mut obj = serde_json::Map::new();
    obj.insert("user_id".into(), event.user_id.clone().into());
    obj.insert("sequence_id".into(), event.sequence_id.clone().into());
    if let Some(s) = &event.session_id {
        obj.insert("session_id".into(), s.clone().into());
    }
    obj.insert("stime".into(), event.stime_micros.into());
    obj.insert("event_id".into(), event.event_type.as_str().into());
    item_to_obj(&event.item, &mut obj);
    serde_json::Value::Object(obj).to_string()
}

/// Serializes an item snapshot to one JSON line for an items file.
pub fn serialize_item(item: &ItemSnapshot) -> String {
    let mut obj = serde_json::Map::new();
    item_to_obj(item, &mut obj);
    serde_json::Value::Object(obj).to_string()
}

/// Groups events into one [`UserSequence`] per distinct `(user_id, sequence_id)`,
/// sorted by `stime` ascending with input order preserved on ties. Sequences
/// come back ordered by `(user_id, sequence_id)` so results are independent
/// of input sharding.
pub fn reconstruct_sequences(events: impl IntoIterator<Item = EventRecord>) -> Vec<UserSequence> {
    let mut groups: BTreeMap<(String, String), Vec<EventRecord>> = BTreeMap::new();
    for event in events {
        groups
            .entry((event.user_id.clone(), event.sequence_id.clone()))
            .or_default()
            .push(event);
    }
    groups
        .into_iter()
        .map(|((user_id, sequence_id), mut events)| {
            // Stable sort: equal timestamps keep input-file order.
            events.sort_by_key(|e| e.stime_micros);
            UserSequence {
                user_id,
                sequence_id,
                events,
            }
        })
        .collect()
}

/// The (brand, most-detailed-category) pair standing in for a SKU.
pub fn product_id_of(item: &ItemSnapshot) -> Result<ProductId, DatamodelError> {
    let brand_id = item.brand_id.ok_or(DatamodelError::MissingField("brand_id"))?;
    let c2_id = item.c2_id.ok_or(DatamodelError::MissingField("c2_id"))?;
    Ok(ProductId { brand_id, c2_id })
}

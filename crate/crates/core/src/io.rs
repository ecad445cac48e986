//! Line-delimited JSON for events, demographics and ground truth.
//!
//! An event line carries `user_id`, `t`, `y` (0 or 1) and either the named
//! covariates (`cont`, `rcv`, `crep`, `rep`, `rnk`, `drnk`, `bdg`, `tag`,
//! `cbdg`, `ctag`, optionally `user_effect` and `day`) or a pre-packed `x`
//! array.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use log::warn;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::{CovariateLayout, ObservationRecord, RawFields, BADGE_KINDS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Covariates {
    Named(RawFields),
    Packed(Vec<f64>),
}

/// One event as it appears on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub user_id: String,
    pub t: u64,
    pub y: bool,
    pub covariates: Covariates,
}

impl EventRecord {
    pub fn to_observation(&self, layout: &CovariateLayout) -> Result<ObservationRecord> {
        let x = match &self.covariates {
            Covariates::Named(f) => layout.pack(f)?,
            Covariates::Packed(x) => x.clone(),
        };
        Ok(ObservationRecord {
            user_id: self.user_id.clone(),
            t: self.t,
            y: self.y,
            x,
        })
    }
}

const NAMED: [&str; 12] = [
    "user_effect",
    "day",
    "cont",
    "rcv",
    "crep",
    "rep",
    "rnk",
    "drnk",
    "bdg",
    "tag",
    "cbdg",
    "ctag",
];

fn is_known(key: &str) -> bool {
    matches!(key, "user_id" | "t" | "y" | "x") || NAMED.contains(&key)
}

fn num(v: f64) -> Value {
    Value::from(v)
}

fn array(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|x| num(*x)).collect())
}

/// Serializes one event as a JSON object (no trailing newline).
pub fn emit_event(rec: &EventRecord) -> String {
    let mut m = Map::new();
    m.insert("user_id".into(), Value::from(rec.user_id.clone()));
    m.insert("t".into(), Value::from(rec.t));
    m.insert("y".into(), Value::from(u8::from(rec.y)));
    match &rec.covariates {
        Covariates::Packed(x) => {
            m.insert("x".into(), array(x));
        }
        Covariates::Named(f) => {
            m.insert("user_effect".into(), num(f.user_effect));
            m.insert("day".into(), num(f.day));
            m.insert("cont".into(), num(f.cont));
            m.insert("rcv".into(), num(f.rcv));
            m.insert("crep".into(), num(f.crep));
            m.insert("rep".into(), num(f.rep));
            m.insert("rnk".into(), num(f.rnk));
            m.insert("drnk".into(), num(f.drnk));
            m.insert("bdg".into(), array(&f.bdg));
            m.insert("tag".into(), array(&f.tag));
            m.insert("cbdg".into(), array(&f.cbdg));
            m.insert("ctag".into(), array(&f.ctag));
        }
    }
    Value::Object(m).to_string()
}

fn schema(line: usize, reason: impl Into<String>) -> Error {
    Error::Schema {
        line,
        reason: reason.into(),
    }
}

fn get_f64(m: &Map<String, Value>, key: &str, line: usize) -> Result<f64> {
    let v = m.get(key).ok_or_else(|| schema(line, format!("missing field `{key}`")))?;
    let x = v
        .as_f64()
        .ok_or_else(|| schema(line, format!("field `{key}` must be a number")))?;
    if !x.is_finite() {
        return Err(schema(line, format!("field `{key}` is not finite")));
    }
    Ok(x)
}

fn get_vec(m: &Map<String, Value>, key: &str, line: usize) -> Result<Vec<f64>> {
    let v = m.get(key).ok_or_else(|| schema(line, format!("missing field `{key}`")))?;
    let arr = v
        .as_array()
        .ok_or_else(|| schema(line, format!("field `{key}` must be an array")))?;
    arr.iter()
        .map(|e| {
            e.as_f64()
                .filter(|x| x.is_finite())
                .ok_or_else(|| schema(line, format!("field `{key}` must hold finite numbers")))
        })
        .collect()
}

fn get_badges(m: &Map<String, Value>, key: &str, line: usize) -> Result<[f64; BADGE_KINDS]> {
    let v = get_vec(m, key, line)?;
    v.try_into()
        .map_err(|v: Vec<f64>| schema(line, format!("field `{key}` needs {BADGE_KINDS} entries, got {}", v.len())))
}

/// Parses one event line. Returns the record and the number of unknown
/// fields that were dropped (always an error when `strict`).
pub fn parse_event(text: &str, line: usize, strict: bool) -> Result<(EventRecord, usize)> {
    let value: Value = serde_json::from_str(text).map_err(|e| schema(line, format!("invalid JSON: {e}")))?;
    let Value::Object(m) = value else {
        return Err(schema(line, "event must be a JSON object"));
    };
    let unknown: Vec<&String> = m.keys().filter(|k| !is_known(k)).collect();
    if strict {
        if let Some(k) = unknown.first() {
            return Err(schema(line, format!("unknown field `{k}`")));
        }
    }
    let user_id = m
        .get("user_id")
        .and_then(Value::as_str)
        .ok_or_else(|| schema(line, "`user_id` must be a string"))?
        .to_string();
    let t = m
        .get("t")
        .and_then(Value::as_u64)
        .ok_or_else(|| schema(line, "`t` must be a nonnegative integer"))?;
    let y = match m.get("y").and_then(Value::as_u64) {
        Some(0) => false,
        Some(1) => true,
        _ => return Err(schema(line, format!("`y` must be 0 or 1, got {}", m.get("y").unwrap_or(&Value::Null)))),
    };
    let has_named = NAMED.iter().any(|k| m.contains_key(*k));
    let covariates = match (m.contains_key("x"), has_named) {
        (true, true) => return Err(schema(line, "give either `x` or the named covariates, not both")),
        (true, false) => Covariates::Packed(get_vec(&m, "x", line)?),
        (false, _) => {
            let opt = |k: &str, default: f64| {
                if m.contains_key(k) {
                    get_f64(&m, k, line)
                } else {
                    Ok(default)
                }
            };
            let tag = get_vec(&m, "tag", line)?;
            let ctag = get_vec(&m, "ctag", line)?;
            if tag.len() != ctag.len() {
                return Err(schema(line, "`tag` and `ctag` lengths differ"));
            }
            Covariates::Named(RawFields {
                user_effect: opt("user_effect", 1.0)?,
                day: opt("day", 0.0)?,
                cont: get_f64(&m, "cont", line)?,
                rcv: get_f64(&m, "rcv", line)?,
                crep: get_f64(&m, "crep", line)?,
                rep: get_f64(&m, "rep", line)?,
                rnk: get_f64(&m, "rnk", line)?,
                drnk: get_f64(&m, "drnk", line)?,
                bdg: get_badges(&m, "bdg", line)?,
                tag,
                cbdg: get_badges(&m, "cbdg", line)?,
                ctag,
            })
        }
    };
    Ok((
        EventRecord {
            user_id,
            t,
            y,
            covariates,
        },
        unknown.len(),
    ))
}

/// Outcome of reading an event file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub records: Vec<EventRecord>,
    /// Lines rejected by the schema (lenient mode only).
    pub malformed: usize,
    /// Events skipped because `t` did not increase for their user (lenient mode only).
    pub out_of_order: usize,
    /// Unknown fields dropped (lenient mode only).
    pub unknown_fields: usize,
}

/// Reads newline-delimited events. Strict mode fails on the first bad line;
/// lenient mode skips and counts bad lines.
pub fn ingest<R: BufRead>(reader: R, strict: bool) -> Result<IngestReport> {
    let mut report = IngestReport::default();
    let mut last_t: HashMap<String, u64> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (rec, unknown) = match parse_event(&line, line_no, strict) {
            Ok(r) => r,
            Err(e) if !strict => {
                warn!("skipping malformed event: {e}");
                report.malformed += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        report.unknown_fields += unknown;
        if let Some(&prev) = last_t.get(&rec.user_id) {
            if rec.t <= prev {
                if strict {
                    return Err(schema(
                        line_no,
                        format!("user {}: t={} does not follow t={prev}", rec.user_id, rec.t),
                    ));
                }
                warn!("line {line_no}: user {} out of order (t={} after {prev})", rec.user_id, rec.t);
                report.out_of_order += 1;
                continue;
            }
        }
        last_t.insert(rec.user_id.clone(), rec.t);
        report.records.push(rec);
    }
    Ok(report)
}

pub fn write_events<W: Write>(mut w: W, records: &[EventRecord]) -> Result<()> {
    for r in records {
        writeln!(w, "{}", emit_event(r))?;
    }
    Ok(())
}

/// Reads a JSONL file of serde records (demographics, ground truth).
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| schema(i + 1, e.to_string()))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(mut w: W, items: &[T]) -> Result<()> {
    for it in items {
        let s = serde_json::to_string(it).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{s}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::Demographics;
    use proptest::prelude::*;

    fn named(user: &str, t: u64, y: bool) -> EventRecord {
        let mut f = RawFields::baseline(2);
        f.cont = 12.0;
        f.rcv = 0.1 + 0.2;
        f.bdg = [0.0, 1.0, 0.0];
        f.tag = vec![1.0, 0.0];
        f.ctag = vec![4.0, 7.0];
        EventRecord {
            user_id: user.into(),
            t,
            y,
            covariates: Covariates::Named(f),
        }
    }

    #[test]
    fn empty_input_is_empty() {
        let r = ingest("".as_bytes(), true).unwrap();
        assert_eq!(r, IngestReport::default());
    }

    #[test]
    fn y_out_of_domain_reports_line() {
        let good = emit_event(&named("a", 1, true));
        let bad = good.replace("\"y\":1", "\"y\":2");
        let text = format!("{good}\n{bad}\n");
        match ingest(text.as_bytes(), true) {
            Err(Error::Schema { line, reason }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("`y`"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let lenient = ingest(text.as_bytes(), false).unwrap();
        assert_eq!(lenient.records.len(), 1);
        assert_eq!(lenient.malformed, 1);
    }

    #[test]
    fn unknown_fields_and_ordering() {
        let line = r#"{"user_id":"a","t":1,"y":0,"x":[1.0],"colour":"red"}"#;
        assert!(matches!(ingest(line.as_bytes(), true), Err(Error::Schema { line: 1, .. })));
        let r = ingest(line.as_bytes(), false).unwrap();
        assert_eq!(r.unknown_fields, 1);
        assert_eq!(r.records.len(), 1);

        let text = "{\"user_id\":\"a\",\"t\":2,\"y\":0,\"x\":[1]}\n{\"user_id\":\"b\",\"t\":1,\"y\":1,\"x\":[1]}\n{\"user_id\":\"a\",\"t\":2,\"y\":1,\"x\":[1]}\n";
        assert!(matches!(ingest(text.as_bytes(), true), Err(Error::Schema { line: 3, .. })));
        let r = ingest(text.as_bytes(), false).unwrap();
        assert_eq!(r.out_of_order, 1);
        assert_eq!(r.records.len(), 2);
    }

    #[test]
    fn missing_and_mixed_fields_rejected() {
        let no_cont = r#"{"user_id":"a","t":1,"y":0,"rcv":0,"crep":0,"rep":0,"rnk":0,"drnk":0,"bdg":[0,0,0],"tag":[],"cbdg":[0,0,0],"ctag":[]}"#;
        assert!(parse_event(no_cont, 1, true).is_err());
        let both = r#"{"user_id":"a","t":1,"y":0,"x":[1],"cont":3}"#;
        assert!(parse_event(both, 1, true).is_err());
        let short_badges = emit_event(&named("a", 1, true)).replace("\"bdg\":[0.0,1.0,0.0]", "\"bdg\":[0.0]");
        assert!(parse_event(&short_badges, 1, true).is_err());
    }

    #[test]
    fn named_fields_pack_with_layout() {
        let rec = named("a", 3, false);
        let obs = rec.to_observation(&CovariateLayout::new(2)).unwrap();
        assert_eq!(obs.x.len(), CovariateLayout::new(2).dim());
        assert!(rec.to_observation(&CovariateLayout::new(1)).is_err());
    }

    #[test]
    fn demographics_round_trip() {
        let d = vec![
            Demographics {
                user_id: "a".into(),
                d: vec![1.0, 0.25],
            },
            Demographics {
                user_id: "b".into(),
                d: vec![0.0, -3.5],
            },
        ];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &d).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().contains("\"D\""));
        let back: Vec<Demographics> = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, d);
    }

    proptest! {
        #[test]
        fn events_round_trip(
            vals in proptest::collection::vec(-1e12f64..1e12, 14),
            x in proptest::collection::vec(-1e6f64..1e6, 1..6),
            t in 0u64..u64::MAX / 2,
            y: bool,
            packed: bool,
        ) {
            let covariates = if packed {
                Covariates::Packed(x)
            } else {
                Covariates::Named(RawFields {
                    user_effect: vals[0], day: vals[1], cont: vals[2], rcv: vals[3], crep: vals[4],
                    rep: vals[5], rnk: vals[6], drnk: vals[7],
                    bdg: [vals[8], vals[9], vals[10]],
                    tag: vec![vals[11]],
                    cbdg: [vals[12], vals[13], vals[0] / 3.0],
                    ctag: vec![vals[1] * 1e-7],
                })
            };
            let rec = EventRecord { user_id: format!("user-{t}"), t, y, covariates };
            let (back, unknown) = parse_event(&emit_event(&rec), 1, true).unwrap();
            prop_assert_eq!(unknown, 0);
            prop_assert_eq!(back, rec);
        }
    }
}

//! Answer grading and aggregation.
//!
//! Grading follows a cascade per label value: exact string match, then a
//! numeric comparison under [`Tolerance`], then element-wise list comparison,
//! then dictionary comparison (same keys, values compared by the same rules).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::AnswerLabels;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub abs_tol: f64,
    pub rel_tol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { abs_tol: 1e-6, rel_tol: 1e-2 }
    }
}

impl Tolerance {
    pub fn new(abs_tol: f64, rel_tol: f64) -> Self {
        Self { abs_tol, rel_tol }
    }

    pub fn accepts(&self, expected: f64, got: f64) -> bool {
        expected == got || (expected - got).abs() <= self.abs_tol.max(self.rel_tol * expected.abs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "t", content = "v", rename_all = "lowercase")]
pub enum ParsedValue {
    Number(f64),
    Text(String),
    List(Vec<ParsedValue>),
    Dict(BTreeMap<String, ParsedValue>),
}

impl ParsedValue {
    /// Canonical serialization used to group equal answers.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).unwrap_or_default()
    }
}

fn is_number_literal(s: &str) -> bool {
    let b = s.as_bytes();
    let mut i = 0;
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        i += 1;
    }
    let int_start = i;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    let mut digits = i - int_start;
    if i < b.len() && b[i] == b'.' {
        i += 1;
        let frac_start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        digits += i - frac_start;
    }
    if digits == 0 {
        return false;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        i += 1;
        if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
            i += 1;
        }
        let exp_start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i == exp_start {
            return false;
        }
    }
    i == b.len()
}

fn parse_structured(s: &str) -> Option<serde_json::Value> {
    serde_json::from_str(s)
        .ok()
        .or_else(|| serde_json::from_str(&s.replace('\'', "\"")).ok())
}

fn from_json(v: serde_json::Value) -> ParsedValue {
    use serde_json::Value;
    match v {
        Value::Number(n) => n.as_f64().map(ParsedValue::Number).unwrap_or_else(|| ParsedValue::Text(n.to_string())),
        Value::String(s) => coerce_value(&s),
        Value::Array(items) => ParsedValue::List(items.into_iter().map(from_json).collect()),
        Value::Object(map) => {
            ParsedValue::Dict(map.into_iter().map(|(k, v)| (k.trim().to_string(), from_json(v))).collect())
        }
        Value::Bool(b) => ParsedValue::Text(b.to_string()),
        Value::Null => ParsedValue::Text("null".into()),
    }
}

/// Number, then list, then dict (single quotes accepted), else text.
pub fn coerce_value(raw: &str) -> ParsedValue {
    let s = raw.trim();
    if is_number_literal(s) {
        if let Ok(x) = s.parse::<f64>() {
            if x.is_finite() {
                return ParsedValue::Number(x);
            }
        }
    }
    if s.starts_with('[') && s.ends_with(']') {
        if let Some(v @ serde_json::Value::Array(_)) = parse_structured(s) {
            return from_json(v);
        }
    }
    if s.starts_with('{') && s.ends_with('}') {
        if let Some(v @ serde_json::Value::Object(_)) = parse_structured(s) {
            return from_json(v);
        }
    }
    ParsedValue::Text(s.to_string())
}

/// How list values are matched.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ListOrder {
    #[default]
    Ordered,
    Unordered,
}

pub fn compare_values(expected: &ParsedValue, got: &ParsedValue, tol: &Tolerance) -> bool {
    compare_values_with(expected, got, tol, ListOrder::Ordered)
}

pub fn compare_values_with(
    expected: &ParsedValue,
    got: &ParsedValue,
    tol: &Tolerance,
    order: ListOrder,
) -> bool {
    use ParsedValue::*;
    match (expected, got) {
        (Number(e), Number(g)) => tol.accepts(*e, *g),
        (Text(e), Text(g)) => e.trim() == g.trim(),
        (List(e), List(g)) => {
            if e.len() != g.len() {
                return false;
            }
            match order {
                ListOrder::Ordered => {
                    e.iter().zip(g).all(|(a, b)| compare_values_with(a, b, tol, order))
                }
                ListOrder::Unordered => {
                    let mut used = vec![false; g.len()];
                    match_unordered(e, g, &mut used, tol)
                }
            }
        }
        (Dict(e), Dict(g)) => {
            e.len() == g.len()
                && e.iter().all(|(k, v)| g.get(k).is_some_and(|w| compare_values_with(v, w, tol, order)))
        }
        _ => false,
    }
}

fn match_unordered(e: &[ParsedValue], g: &[ParsedValue], used: &mut [bool], tol: &Tolerance) -> bool {
    let Some((first, rest)) = e.split_first() else {
        return true;
    };
    for j in 0..g.len() {
        if !used[j] && compare_values_with(first, &g[j], tol, ListOrder::Unordered) {
            used[j] = true;
            if match_unordered(rest, g, used, tol) {
                return true;
            }
            used[j] = false;
        }
    }
    false
}

/// Full cascade on raw label strings.
pub fn compare_raw(expected: &str, got: &str, tol: &Tolerance, order: ListOrder) -> bool {
    expected.trim() == got.trim()
        || compare_values_with(&coerce_value(expected), &coerce_value(got), tol, order)
}

pub fn normalize_name(name: &str) -> String {
    name.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// True iff every expected label is present in `got` (case- and
/// whitespace-insensitive name match) with a matching value. Extra labels in
/// `got` are ignored. An empty expectation never grades true.
pub fn grade_answer(expected: &AnswerLabels, got: &AnswerLabels, tol: &Tolerance) -> bool {
    grade_answer_with(expected, got, tol, ListOrder::Ordered)
}

pub fn grade_answer_with(
    expected: &AnswerLabels,
    got: &AnswerLabels,
    tol: &Tolerance,
    order: ListOrder,
) -> bool {
    if expected.is_empty() {
        return false;
    }
    expected.iter().all(|e| {
        let key = normalize_name(&e.name);
        got.iter()
            .rev()
            .find(|g| normalize_name(&g.name) == key)
            .is_some_and(|g| compare_raw(&e.raw, &g.raw, tol, order))
    })
}

/// Ground truth plus grading options for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Grader {
    pub expected: AnswerLabels,
    pub tolerance: Tolerance,
    pub list_order: ListOrder,
}

impl Grader {
    pub fn new(expected: AnswerLabels, tolerance: Tolerance) -> Self {
        Self { expected, tolerance, list_order: ListOrder::Ordered }
    }

    pub fn grade(&self, got: &AnswerLabels) -> bool {
        grade_answer_with(&self.expected, got, &self.tolerance, self.list_order)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerCandidate {
    pub labels: AnswerLabels,
    pub value_estimate: f64,
    pub discovery_index: usize,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("no candidate answers to aggregate")]
    NoCandidates,
}

fn canonical_labels(labels: &AnswerLabels) -> BTreeMap<String, String> {
    labels
        .iter()
        .map(|l| (normalize_name(&l.name), coerce_value(&l.raw).canonical()))
        .collect()
}

/// Groups candidates by canonical label-set equality and returns the labels
/// of the largest group (its earliest member). Ties go to the higher summed
/// value estimate, then to the earlier-discovered group.
pub fn majority_vote(candidates: &[AnswerCandidate]) -> Result<AnswerLabels, EvalError> {
    struct Group<'a> {
        rep: &'a AnswerCandidate,
        count: usize,
        value_sum: f64,
        first: usize,
    }
    let mut groups: BTreeMap<BTreeMap<String, String>, Group<'_>> = BTreeMap::new();
    for c in candidates {
        let g = groups.entry(canonical_labels(&c.labels)).or_insert(Group {
            rep: c,
            count: 0,
            value_sum: 0.0,
            first: c.discovery_index,
        });
        g.count += 1;
        g.value_sum += c.value_estimate;
        if c.discovery_index < g.first {
            g.first = c.discovery_index;
            g.rep = c;
        }
    }
    groups
        .into_values()
        .max_by(|a, b| {
            a.count
                .cmp(&b.count)
                .then(a.value_sum.total_cmp(&b.value_sum))
                .then(b.first.cmp(&a.first))
        })
        .map(|g| g.rep.labels.clone())
        .ok_or(EvalError::NoCandidates)
}

/// Labels of the candidate with the highest value estimate; ties go to the
/// earliest discovered.
pub fn select_by_value(candidates: &[AnswerCandidate]) -> Result<AnswerLabels, EvalError> {
    candidates
        .iter()
        .max_by(|a, b| {
            a.value_estimate
                .total_cmp(&b.value_estimate)
                .then(b.discovery_index.cmp(&a.discovery_index))
        })
        .map(|c| c.labels.clone())
        .ok_or(EvalError::NoCandidates)
}

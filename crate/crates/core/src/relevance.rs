//! Relevance output grammar.
//!
//! A scorer answers with a single JSON object whose keys are a local frame
//! number (`"7"`) or an inclusive span (`"12-18"`) and whose values are
//! integer scores 0..=5, or with the literal token `[None]` when nothing in
//! the window is relevant.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token emitted when no frame matches the query.
pub const NO_MATCH_TOKEN: &str = "[None]";

/// Integer relevance confidence, 0 (irrelevant) to 5 (most relevant).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Score(u8);

impl Score {
    pub const MAX: u8 = 5;
    pub const ZERO: Score = Score(0);
    pub const TOP: Score = Score(5);

    pub fn new(value: u8) -> Option<Self> {
        (value <= Self::MAX).then_some(Self(value))
    }

    /// Clamps any integer onto the score scale.
    pub fn clamped(value: i64) -> Self {
        Self(value.clamp(0, Self::MAX as i64) as u8)
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn is_relevant(self) -> bool {
        self.0 > 0
    }
}

impl TryFrom<u8> for Score {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Score::new(v).ok_or_else(|| format!("score {v} outside 0..=5"))
    }
}

impl From<Score> for u8 {
    fn from(s: Score) -> u8 {
        s.0
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// `start_local..=end_local` at one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceEntry {
    pub start_local: usize,
    pub end_local: usize,
    pub score: Score,
}

impl RelevanceEntry {
    pub fn frame(local: usize, score: Score) -> Self {
        Self::span(local, local, score)
    }

    pub fn span(start_local: usize, end_local: usize, score: Score) -> Self {
        Self {
            start_local,
            end_local,
            score,
        }
    }

    pub fn key(&self) -> String {
        if self.start_local == self.end_local {
            self.start_local.to_string()
        } else {
            format!("{}-{}", self.start_local, self.end_local)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedRelevance {
    pub entries: Vec<RelevanceEntry>,
    pub raw_text: String,
    /// Lenient mode only: key/value pairs that were repaired or thrown away.
    pub lenient_salvage_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    Strict,
    #[default]
    Lenient,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum RelevanceError {
    #[error("malformed relevance output ({reason}): {raw_text:?}")]
    MalformedOutput { reason: String, raw_text: String },
    #[error("score {value} outside 0..=5 for key {key:?}")]
    ScoreOutOfRange { key: String, value: String },
    #[error("span {start}-{end} is inverted")]
    InvertedSpan { start: usize, end: usize },
    #[error("span {start}-{end} lies outside window 1..={n}")]
    SpanOutOfWindow { start: usize, end: usize, n: usize },
}

impl RelevanceError {
    /// Raw generation, when the error preserves it.
    pub fn raw_text(&self) -> Option<&str> {
        match self {
            RelevanceError::MalformedOutput { raw_text, .. } => Some(raw_text),
            _ => None,
        }
    }
}

/// Canonical text form: `{"5": 4, "12-18": 5}` or `[None]`.
pub fn format_relevance(entries: &[RelevanceEntry]) -> String {
    if entries.is_empty() {
        return NO_MATCH_TOKEN.to_string();
    }
    let body: Vec<String> = entries
        .iter()
        .map(|e| format!("\"{}\": {}", e.key(), e.score))
        .collect();
    format!("{{{}}}", body.join(", "))
}

pub fn parse_relevance_output(text: &str, mode: ParseMode) -> Result<ParsedRelevance, RelevanceError> {
    match (parse_strict(text), mode) {
        (Ok(entries), _) => Ok(ParsedRelevance {
            entries,
            raw_text: text.to_string(),
            lenient_salvage_count: 0,
        }),
        (Err(e), ParseMode::Strict) => Err(e),
        (Err(_), ParseMode::Lenient) => Ok(parse_lenient(text)),
    }
}

fn malformed(reason: impl Into<String>, raw: &str) -> RelevanceError {
    RelevanceError::MalformedOutput {
        reason: reason.into(),
        raw_text: raw.to_string(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn eat(&mut self, b: u8) -> bool {
        if self.peek() == Some(b) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn take_while(&mut self, pred: impl Fn(u8) -> bool) -> &'a [u8] {
        let start = self.pos;
        while self.pos < self.bytes.len() && pred(self.bytes[self.pos]) {
            self.pos += 1;
        }
        &self.bytes[start..self.pos]
    }
}

fn parse_index(digits: &[u8], raw: &str) -> Result<usize, RelevanceError> {
    std::str::from_utf8(digits)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| malformed("frame number does not fit", raw))
}

fn parse_strict(text: &str) -> Result<Vec<RelevanceEntry>, RelevanceError> {
    let trimmed = text.trim();
    if trimmed == NO_MATCH_TOKEN {
        return Ok(Vec::new());
    }
    let mut c = Cursor {
        bytes: trimmed.as_bytes(),
        pos: 0,
    };
    if !c.eat(b'{') {
        return Err(malformed("expected '{' or [None]", text));
    }
    let mut entries = Vec::new();
    c.skip_ws();
    if !c.eat(b'}') {
        loop {
            c.skip_ws();
            entries.push(parse_pair(&mut c, text)?);
            c.skip_ws();
            if c.eat(b',') {
                continue;
            }
            if c.eat(b'}') {
                break;
            }
            return Err(malformed("expected ',' or '}'", text));
        }
    }
    if c.pos != c.bytes.len() {
        return Err(malformed("trailing text after object", text));
    }
    Ok(entries)
}

fn parse_pair(c: &mut Cursor<'_>, raw: &str) -> Result<RelevanceEntry, RelevanceError> {
    if !c.eat(b'"') {
        return Err(malformed("expected quoted key", raw));
    }
    let start_digits = c.take_while(|b| b.is_ascii_digit());
    if start_digits.is_empty() {
        return Err(malformed("key must start with a frame number", raw));
    }
    let start = parse_index(start_digits, raw)?;
    c.skip_ws();
    let end = if c.eat(b'-') {
        c.skip_ws();
        let end_digits = c.take_while(|b| b.is_ascii_digit());
        if end_digits.is_empty() {
            return Err(malformed("span key needs an end frame", raw));
        }
        parse_index(end_digits, raw)?
    } else {
        start
    };
    if !c.eat(b'"') {
        return Err(malformed("unterminated or invalid key", raw));
    }
    let key = if start == end {
        start.to_string()
    } else {
        format!("{start}-{end}")
    };
    c.skip_ws();
    if !c.eat(b':') {
        return Err(malformed("expected ':' after key", raw));
    }
    c.skip_ws();

    let negative = c.eat(b'-');
    let int_digits = c.take_while(|b| b.is_ascii_digit());
    if int_digits.is_empty() {
        return Err(malformed("score must be a number", raw));
    }
    if matches!(c.peek(), Some(b'.' | b'e' | b'E')) {
        return Err(malformed("score must be an integer", raw));
    }
    let value_text = format!(
        "{}{}",
        if negative { "-" } else { "" },
        String::from_utf8_lossy(int_digits)
    );
    let score = std::str::from_utf8(int_digits)
        .ok()
        .and_then(|s| s.parse::<u8>().ok())
        .filter(|_| !negative)
        .and_then(Score::new)
        .ok_or(RelevanceError::ScoreOutOfRange {
            key,
            value: value_text,
        })?;

    if start == 0 {
        return Err(malformed("frame numbers start at 1", raw));
    }
    if start > end {
        return Err(RelevanceError::InvertedSpan { start, end });
    }
    Ok(RelevanceEntry::span(start, end, score))
}

fn lenient_pair_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#""\s*(\d+)\s*(?:-\s*(\d+)\s*)?"\s*:\s*(-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)"#)
            .expect("static regex")
    })
}

fn parse_lenient(text: &str) -> ParsedRelevance {
    let mut entries = Vec::new();
    let mut salvaged = 0;
    for cap in lenient_pair_regex().captures_iter(text) {
        let start = cap[1].parse::<usize>().ok();
        let end = match cap.get(2) {
            Some(m) => m.as_str().parse::<usize>().ok(),
            None => start,
        };
        let value = &cap[3];
        let (score, repaired) = match value.parse::<i64>() {
            Ok(v) => (Score::new(u8::try_from(v).unwrap_or(u8::MAX)), false),
            Err(_) => {
                let floored = value.parse::<f64>().map(f64::floor).unwrap_or(f64::NAN);
                let s = (floored >= 0.0 && floored <= Score::MAX as f64)
                    .then(|| Score::clamped(floored as i64));
                (s, true)
            }
        };
        match (start, end, score) {
            (Some(s), Some(e), Some(score)) if s >= 1 && s <= e => {
                entries.push(RelevanceEntry::span(s, e, score));
                if repaired {
                    salvaged += 1;
                }
            }
            _ => salvaged += 1,
        }
    }
    ParsedRelevance {
        entries,
        raw_text: text.to_string(),
        lenient_salvage_count: salvaged,
    }
}

/// Per-frame scores of a window.
///
/// Overlapping spans take the maximum score. Score-0 frames stay in the map
/// but do not count as relevant. In strict mode a span reaching outside
/// `1..=window_n` is an error; lenient mode clips it.
pub fn expand_entries(
    entries: &[RelevanceEntry],
    window_n: usize,
    mode: ParseMode,
) -> Result<BTreeMap<usize, Score>, RelevanceError> {
    Ok(expand_with_spans(entries, window_n, mode)?
        .into_iter()
        .map(|(local, (score, _))| (local, score))
        .collect())
}

/// Like [`expand_entries`], also returning the span that set each frame's score.
///
/// Among equal-scoring spans the lexicographically smallest `(start, end)` wins,
/// so the result does not depend on entry order.
pub fn expand_with_spans(
    entries: &[RelevanceEntry],
    window_n: usize,
    mode: ParseMode,
) -> Result<BTreeMap<usize, (Score, (usize, usize))>, RelevanceError> {
    let mut out: BTreeMap<usize, (Score, (usize, usize))> = BTreeMap::new();
    for e in entries {
        if e.start_local > e.end_local {
            return Err(RelevanceError::InvertedSpan {
                start: e.start_local,
                end: e.end_local,
            });
        }
        let in_window = e.start_local >= 1 && e.end_local <= window_n;
        if !in_window && mode == ParseMode::Strict {
            return Err(RelevanceError::SpanOutOfWindow {
                start: e.start_local,
                end: e.end_local,
                n: window_n,
            });
        }
        let lo = e.start_local.max(1);
        let hi = e.end_local.min(window_n);
        let span = (e.start_local, e.end_local);
        for local in lo..=hi {
            let slot = out.entry(local).or_insert((e.score, span));
            if e.score > slot.0 || (e.score == slot.0 && span < slot.1) {
                *slot = (e.score, span);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: u8) -> Score {
        Score::new(v).unwrap()
    }

    #[test]
    fn parses_discrete_and_span_keys() {
        let p = parse_relevance_output(r#"{"5": 4, "12-18": 5}"#, ParseMode::Strict).unwrap();
        assert_eq!(
            p.entries,
            vec![RelevanceEntry::frame(5, s(4)), RelevanceEntry::span(12, 18, s(5))]
        );
    }

    #[test]
    fn no_match_token() {
        let p = parse_relevance_output("[None]", ParseMode::Strict).unwrap();
        assert!(p.entries.is_empty());
        let p = parse_relevance_output("  [None]\n", ParseMode::Strict).unwrap();
        assert!(p.entries.is_empty());
    }

    #[test]
    fn prose_is_malformed_in_strict_and_empty_in_lenient() {
        let text = "frames three and seven look good";
        let err = parse_relevance_output(text, ParseMode::Strict).unwrap_err();
        assert_eq!(err.raw_text(), Some(text));
        let p = parse_relevance_output(text, ParseMode::Lenient).unwrap();
        assert!(p.entries.is_empty());
        assert_eq!(p.lenient_salvage_count, 0);
        assert_eq!(p.raw_text, text);
    }

    #[test]
    fn strict_error_kinds() {
        assert!(matches!(
            parse_relevance_output(r#"{"3": 6}"#, ParseMode::Strict),
            Err(RelevanceError::ScoreOutOfRange { .. })
        ));
        assert!(matches!(
            parse_relevance_output(r#"{"3": -1}"#, ParseMode::Strict),
            Err(RelevanceError::ScoreOutOfRange { .. })
        ));
        assert!(matches!(
            parse_relevance_output(r#"{"9-4": 2}"#, ParseMode::Strict),
            Err(RelevanceError::InvertedSpan { start: 9, end: 4 })
        ));
        assert!(matches!(
            parse_relevance_output(r#"{"3": 2.5}"#, ParseMode::Strict),
            Err(RelevanceError::MalformedOutput { .. })
        ));
    }

    #[test]
    fn lenient_floors_and_discards() {
        let text = "```json\n{\"3\": 2.7, \"4\": 9, \"9-4\": 1, \"6 - 8\": 3}\n``` done";
        let p = parse_relevance_output(text, ParseMode::Lenient).unwrap();
        assert_eq!(
            p.entries,
            vec![RelevanceEntry::frame(3, s(2)), RelevanceEntry::span(6, 8, s(3))]
        );
        assert_eq!(p.lenient_salvage_count, 3);
    }

    #[test]
    fn expand_single_span() {
        let m = expand_entries(&[RelevanceEntry::span(5, 9, s(4))], 10, ParseMode::Strict).unwrap();
        assert_eq!(m.len(), 5);
        assert!(m.iter().all(|(l, sc)| (5..=9).contains(l) && *sc == s(4)));
    }

    #[test]
    fn expand_overlap_takes_max() {
        let m = expand_entries(
            &[RelevanceEntry::span(3, 6, s(2)), RelevanceEntry::span(5, 8, s(5))],
            10,
            ParseMode::Strict,
        )
        .unwrap();
        let got: Vec<_> = m.into_iter().map(|(l, sc)| (l, sc.get())).collect();
        assert_eq!(got, vec![(3, 2), (4, 2), (5, 5), (6, 5), (7, 5), (8, 5)]);
    }

    #[test]
    fn zero_score_frames_are_kept_but_irrelevant() {
        let m = expand_entries(&[RelevanceEntry::frame(2, s(0))], 4, ParseMode::Strict).unwrap();
        assert_eq!(m.get(&2), Some(&Score::ZERO));
        assert!(!m[&2].is_relevant());
    }

    #[test]
    fn out_of_window_spans() {
        let e = [RelevanceEntry::span(3, 12, s(3))];
        assert!(matches!(
            expand_entries(&e, 10, ParseMode::Strict),
            Err(RelevanceError::SpanOutOfWindow { .. })
        ));
        let m = expand_entries(&e, 10, ParseMode::Lenient).unwrap();
        assert_eq!(m.keys().copied().collect::<Vec<_>>(), (3..=10).collect::<Vec<_>>());
        let m = expand_entries(&[RelevanceEntry::frame(20, s(3))], 10, ParseMode::Lenient).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn canonical_format() {
        assert_eq!(format_relevance(&[]), "[None]");
        assert_eq!(
            format_relevance(&[RelevanceEntry::frame(5, s(4)), RelevanceEntry::span(12, 18, s(5))]),
            r#"{"5": 4, "12-18": 5}"#
        );
    }
}

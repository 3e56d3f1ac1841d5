//! Clinical event streams: events, patient records, the token vocabulary and
//! the line-delimited cohort file.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{NepError, Result};

/// Value carried by events whose code was filtered out as too rare.
pub const UNK_VALUE: &str = "<UNK>";

/// Characters reserved by the prompt template and the UNK glyph.
const RESERVED_CHARS: &[char] = &['[', ']', ':', '<', '>'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventType {
    Diagnosis,
    Medication,
    Lab,
    Vital,
    Procedure,
    Death,
}

impl EventType {
    pub const ALL: [EventType; 6] = [
        EventType::Diagnosis,
        EventType::Medication,
        EventType::Lab,
        EventType::Vital,
        EventType::Procedure,
        EventType::Death,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventType::Diagnosis => "diagnosis",
            EventType::Medication => "medication",
            EventType::Lab => "lab",
            EventType::Vital => "vital",
            EventType::Procedure => "procedure",
            EventType::Death => "death",
        }
    }

    /// Upper-case label used in rendered prompts.
    pub fn label(self) -> &'static str {
        match self {
            EventType::Diagnosis => "DIAGNOSIS",
            EventType::Medication => "MEDICATION",
            EventType::Lab => "LAB",
            EventType::Vital => "VITAL",
            EventType::Procedure => "PROCEDURE",
            EventType::Death => "DEATH",
        }
    }

    pub fn from_label(label: &str) -> Option<EventType> {
        EventType::ALL.into_iter().find(|t| t.label() == label)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventType {
    type Err = NepError;

    fn from_str(s: &str) -> Result<Self> {
        EventType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| NepError::Validation(format!("unknown event type `{s}`")))
    }
}

/// Checks that a code string can be rendered and parsed back unambiguously.
pub fn validate_value(value: &str) -> Result<()> {
    if value == UNK_VALUE {
        return Ok(());
    }
    if value.is_empty() {
        return Err(NepError::Validation("empty event value".into()));
    }
    if value.trim() != value {
        return Err(NepError::Validation(format!(
            "event value `{value}` has leading or trailing whitespace"
        )));
    }
    if let Some(c) = value
        .chars()
        .find(|c| c.is_control() || RESERVED_CHARS.contains(c))
    {
        return Err(NepError::Validation(format!(
            "event value `{}` contains reserved character {c:?}",
            value.escape_debug()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClinicalEvent {
    #[serde(rename = "type")]
    pub event_type: EventType,
    pub value: String,
    /// Days since the cohort epoch.
    pub ts: u32,
}

impl ClinicalEvent {
    pub fn new(event_type: EventType, value: impl Into<String>, ts: u32) -> Result<Self> {
        let value = value.into();
        validate_value(&value)?;
        Ok(Self {
            event_type,
            value,
            ts,
        })
    }

    pub fn is_unk(&self) -> bool {
        self.value == UNK_VALUE
    }

    pub fn key(&self) -> EventKey {
        EventKey {
            event_type: self.event_type,
            value: self.value.clone(),
        }
    }
}

/// The (type, value) identity of an event, ignoring its timestamp.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EventKey {
    #[serde(rename = "type")]
    pub event_type: EventType,
    pub value: String,
}

impl EventKey {
    pub fn new(event_type: EventType, value: impl Into<String>) -> Self {
        Self {
            event_type,
            value: value.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Outcome {
    Binary { label: u8 },
    Survival { time: u32, event: u8 },
}

impl Outcome {
    pub fn binary(label: bool) -> Self {
        Outcome::Binary { label: label as u8 }
    }

    pub fn survival(time: u32, event: bool) -> Self {
        Outcome::Survival {
            time,
            event: event as u8,
        }
    }

    pub fn as_binary(&self) -> Option<bool> {
        match *self {
            Outcome::Binary { label } => Some(label == 1),
            _ => None,
        }
    }

    pub fn as_survival(&self) -> Option<(u32, bool)> {
        match *self {
            Outcome::Survival { time, event } => Some((time, event == 1)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub events: Vec<ClinicalEvent>,
    #[serde(default)]
    pub outcomes: BTreeMap<String, Outcome>,
}

impl PatientRecord {
    /// Enforces chronological order, event-level value rules, and death placement.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| {
            Err(NepError::Validation(format!(
                "patient `{}`: {msg}",
                self.patient_id
            )))
        };
        if self.patient_id.is_empty() {
            return Err(NepError::Validation("empty patient_id".into()));
        }
        for (i, pair) in self.events.windows(2).enumerate() {
            if pair[1].ts < pair[0].ts {
                return fail(format!(
                    "timestamps out of order at event {} ({} after {})",
                    i + 1,
                    pair[1].ts,
                    pair[0].ts
                ));
            }
        }
        for ev in &self.events {
            if let Err(e) = validate_value(&ev.value) {
                return fail(e.to_string());
            }
        }
        let deaths: Vec<usize> = self
            .events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.event_type == EventType::Death)
            .map(|(i, _)| i)
            .collect();
        if deaths.len() > 1 {
            return fail(format!("{} death events", deaths.len()));
        }
        if let Some(&d) = deaths.first() {
            if d + 1 != self.events.len() {
                return fail("death event is not the last event".into());
            }
        }
        for (task, outcome) in &self.outcomes {
            match *outcome {
                Outcome::Binary { label } if label > 1 => {
                    return fail(format!("task `{task}`: label must be 0 or 1"))
                }
                Outcome::Survival { time, event } if time == 0 || event > 1 => {
                    return fail(format!(
                        "task `{task}`: survival time must be > 0 and event 0 or 1"
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Raw on-disk event; timestamps are parsed signed so negatives surface as
/// validation errors rather than parse errors.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvent {
    #[serde(rename = "type")]
    event_type: String,
    value: String,
    ts: i64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    patient_id: String,
    events: Vec<RawEvent>,
    #[serde(default)]
    outcomes: BTreeMap<String, Outcome>,
}

fn record_from_raw(raw: RawRecord, line: usize) -> Result<PatientRecord> {
    let mut events = Vec::with_capacity(raw.events.len());
    for ev in raw.events {
        let event_type: EventType = ev.event_type.parse().map_err(|_| NepError::Parse {
            line,
            message: format!("unknown event type `{}`", ev.event_type),
        })?;
        if ev.ts < 0 || ev.ts > u32::MAX as i64 {
            return Err(NepError::Validation(format!(
                "patient `{}`: timestamp {} out of range",
                raw.patient_id, ev.ts
            )));
        }
        events.push(ClinicalEvent {
            event_type,
            value: ev.value,
            ts: ev.ts as u32,
        });
    }
    let record = PatientRecord {
        patient_id: raw.patient_id,
        events,
        outcomes: raw.outcomes,
    };
    record.validate()?;
    Ok(record)
}

/// Parses cohort text without applying the rare-code filter.
pub fn parse_cohort(text: &str) -> Result<Vec<PatientRecord>> {
    read_records(text.as_bytes())
}

fn read_records(reader: impl BufRead) -> Result<Vec<PatientRecord>> {
    let mut cohort = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| NepError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let record = record_from_raw(raw, line_no)?;
        if !seen.insert(record.patient_id.clone()) {
            return Err(NepError::Validation(format!(
                "duplicate patient_id `{}` at line {line_no}",
                record.patient_id
            )));
        }
        cohort.push(record);
    }
    if cohort.is_empty() {
        return Err(NepError::EmptyCohort);
    }
    Ok(cohort)
}

/// Replaces every (type, value) pair seen fewer than `min_count` times
/// cohort-wide with [`UNK_VALUE`]. Returns the number of replaced events.
pub fn filter_rare_codes(cohort: &mut [PatientRecord], min_count: usize) -> usize {
    let mut counts: HashMap<EventKey, usize> = HashMap::new();
    for ev in cohort.iter().flat_map(|r| &r.events) {
        if !ev.is_unk() {
            *counts.entry(ev.key()).or_default() += 1;
        }
    }
    let mut replaced = 0;
    for ev in cohort.iter_mut().flat_map(|r| r.events.iter_mut()) {
        if !ev.is_unk() && counts[&ev.key()] < min_count {
            ev.value = UNK_VALUE.to_string();
            replaced += 1;
        }
    }
    replaced
}

/// Loads and validates a cohort file, filters codes rarer than `min_count`,
/// and builds the vocabulary over the surviving pairs.
pub fn load_cohort(path: &Path, min_count: usize) -> Result<(Vec<PatientRecord>, EventVocabulary)> {
    let file = fs::File::open(path)?;
    let mut cohort = read_records(BufReader::new(file))?;
    filter_rare_codes(&mut cohort, min_count);
    let vocab = EventVocabulary::from_cohort(&cohort);
    Ok((cohort, vocab))
}

/// Canonical single-line JSON for one record.
pub fn record_to_line(record: &PatientRecord) -> String {
    serde_json::to_string(record).expect("records always serialize")
}

pub fn write_cohort(path: &Path, cohort: &[PatientRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for record in cohort {
        writeln!(out, "{}", record_to_line(record))?;
    }
    out.flush()?;
    Ok(())
}

pub fn cohort_to_string(cohort: &[PatientRecord]) -> String {
    let mut s = String::new();
    for record in cohort {
        s.push_str(&record_to_line(record));
        s.push('\n');
    }
    s
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const MASK: TokenId = 4;
pub const SEP: TokenId = 5;
pub const HEADER: TokenId = 6;
pub const FOOTER: TokenId = 7;
/// First of the time-bucket tokens.
pub const BUCKET_BASE: TokenId = 8;
pub const N_BUCKETS: usize = 7;
pub const N_SPECIAL: usize = BUCKET_BASE as usize + N_BUCKETS;

/// Token ids: a fixed reserved prefix of specials followed by one id per
/// (type, value) pair in sorted order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventVocabulary {
    events: Vec<EventKey>,
    #[serde(skip)]
    index: HashMap<EventKey, TokenId>,
}

impl EventVocabulary {
    pub fn new(mut keys: Vec<EventKey>) -> Self {
        keys.retain(|k| k.value != UNK_VALUE);
        keys.sort();
        keys.dedup();
        let mut vocab = Self {
            events: keys,
            index: HashMap::new(),
        };
        vocab.rebuild_index();
        vocab
    }

    pub fn from_cohort(cohort: &[PatientRecord]) -> Self {
        let keys: Vec<EventKey> = cohort
            .iter()
            .flat_map(|r| &r.events)
            .filter(|e| !e.is_unk())
            .map(ClinicalEvent::key)
            .collect();
        Self::new(keys)
    }

    /// Must be called after deserializing.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .events
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), (i + N_SPECIAL) as TokenId))
            .collect();
    }

    pub fn len(&self) -> usize {
        N_SPECIAL + self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn n_events(&self) -> usize {
        self.events.len()
    }

    pub fn events(&self) -> &[EventKey] {
        &self.events
    }

    /// Unknown pairs map to [`UNK`].
    pub fn encode(&self, key: &EventKey) -> TokenId {
        self.index.get(key).copied().unwrap_or(UNK)
    }

    pub fn encode_event(&self, event: &ClinicalEvent) -> TokenId {
        if event.is_unk() {
            return UNK;
        }
        self.index
            .get(&EventKey::new(event.event_type, event.value.as_str()))
            .copied()
            .unwrap_or(UNK)
    }

    pub fn decode(&self, id: TokenId) -> Option<&EventKey> {
        (id as usize)
            .checked_sub(N_SPECIAL)
            .and_then(|i| self.events.get(i))
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < N_SPECIAL
    }
}

// ---------------------------------------------------------------------------
// Frequencies
// ---------------------------------------------------------------------------

/// Per-type event counts over a cohort, listing only the types present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTable {
    entries: Vec<(EventType, u64)>,
}

impl FrequencyTable {
    pub fn from_counts(counts: impl IntoIterator<Item = (EventType, u64)>) -> Result<Self> {
        let mut map: BTreeMap<EventType, u64> = BTreeMap::new();
        for (t, c) in counts {
            *map.entry(t).or_default() += c;
        }
        let entries: Vec<_> = map.into_iter().filter(|&(_, c)| c > 0).collect();
        if entries.is_empty() {
            return Err(NepError::Validation("frequency table has no types".into()));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(EventType, u64)] {
        &self.entries
    }

    /// Number of distinct event types present.
    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, t: EventType) -> u64 {
        self.entries
            .iter()
            .find(|(et, _)| *et == t)
            .map_or(0, |&(_, c)| c)
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|&(_, c)| c).sum()
    }
}

pub fn event_type_frequencies(cohort: &[PatientRecord]) -> Result<FrequencyTable> {
    if cohort.is_empty() {
        return Err(NepError::EmptyCohort);
    }
    let mut counts = [0u64; EventType::ALL.len()];
    for ev in cohort.iter().flat_map(|r| &r.events) {
        counts[ev.event_type.index()] += 1;
    }
    FrequencyTable::from_counts(EventType::ALL.into_iter().zip(counts))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: EventType, v: &str, ts: u32) -> ClinicalEvent {
        ClinicalEvent::new(t, v, ts).unwrap()
    }

    fn record(id: &str, events: Vec<ClinicalEvent>) -> PatientRecord {
        PatientRecord {
            patient_id: id.into(),
            events,
            outcomes: BTreeMap::new(),
        }
    }

    #[test]
    fn rare_codes_become_unk() {
        let text = r#"{"patient_id":"p1","events":[{"type":"lab","value":"A","ts":0},{"type":"lab","value":"A","ts":1},{"type":"lab","value":"B","ts":2}]}
{"patient_id":"p2","events":[{"type":"lab","value":"A","ts":4}]}
"#;
        let mut cohort = parse_cohort(text).unwrap();
        assert_eq!(filter_rare_codes(&mut cohort, 2), 1);
        let vocab = EventVocabulary::from_cohort(&cohort);
        assert_eq!(vocab.n_events(), 1);
        assert_ne!(vocab.encode(&EventKey::new(EventType::Lab, "A")), UNK);
        assert_eq!(vocab.encode(&EventKey::new(EventType::Lab, "B")), UNK);
        assert!(cohort[0].events[2].is_unk());
        assert_eq!(cohort[0].events[2].event_type, EventType::Lab);
    }

    #[test]
    fn out_of_order_names_patient() {
        let text = r#"{"patient_id":"alice","events":[{"type":"lab","value":"A","ts":5},{"type":"lab","value":"A","ts":3}]}"#;
        let err = parse_cohort(text).unwrap_err();
        assert!(
            matches!(err, NepError::Validation(ref m) if m.contains("alice")),
            "{err}"
        );
    }

    #[test]
    fn parse_error_reports_line() {
        let text = "{\"patient_id\":\"a\",\"events\":[]}\n{not json\n";
        match parse_cohort(text).unwrap_err() {
            NepError::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn duplicate_ids_and_empty_cohort_rejected() {
        let text = "{\"patient_id\":\"a\",\"events\":[]}\n{\"patient_id\":\"a\",\"events\":[]}\n";
        assert!(matches!(parse_cohort(text), Err(NepError::Validation(_))));
        assert!(matches!(parse_cohort("\n"), Err(NepError::EmptyCohort)));
    }

    #[test]
    fn negative_timestamp_is_validation_error() {
        let text = r#"{"patient_id":"a","events":[{"type":"vital","value":"HR","ts":-1}]}"#;
        assert!(matches!(parse_cohort(text), Err(NepError::Validation(_))));
    }

    #[test]
    fn death_must_be_last_and_unique() {
        let r = record(
            "d",
            vec![ev(EventType::Death, "DEATH", 1), ev(EventType::Lab, "A", 2)],
        );
        assert!(r.validate().is_err());
        let r = record(
            "d",
            vec![
                ev(EventType::Death, "DEATH", 1),
                ev(EventType::Death, "DEATH", 2),
            ],
        );
        assert!(r.validate().is_err());
        let r = record(
            "d",
            vec![ev(EventType::Lab, "A", 1), ev(EventType::Death, "DEATH", 2)],
        );
        assert!(r.validate().is_ok());
    }

    #[test]
    fn reserved_characters_rejected() {
        for bad in ["", " A", "A:B", "x[1]", "a\nb", "<b>"] {
            assert!(
                ClinicalEvent::new(EventType::Lab, bad, 0).is_err(),
                "{bad:?}"
            );
        }
        assert!(ClinicalEvent::new(EventType::Medication, "metformin 500mg", 0).is_ok());
    }

    #[test]
    fn frequencies_count_by_type() {
        let cohort = vec![
            record(
                "a",
                vec![
                    ev(EventType::Lab, "A", 0),
                    ev(EventType::Lab, "B", 1),
                    ev(EventType::Diagnosis, "C", 2),
                ],
            ),
            record("b", vec![ev(EventType::Lab, "A", 0)]),
        ];
        let f = event_type_frequencies(&cohort).unwrap();
        assert_eq!(f.get(EventType::Lab), 3);
        assert_eq!(f.get(EventType::Diagnosis), 1);
        assert_eq!(f.k(), 2);
        assert_eq!(f.total(), 4);

        let single = vec![record("a", vec![ev(EventType::Vital, "HR", 0)])];
        assert_eq!(event_type_frequencies(&single).unwrap().k(), 1);
        assert!(event_type_frequencies(&[]).is_err());
    }

    #[test]
    fn specials_occupy_prefix() {
        let vocab = EventVocabulary::new(vec![
            EventKey::new(EventType::Lab, "Z"),
            EventKey::new(EventType::Diagnosis, "A"),
        ]);
        assert_eq!(vocab.len(), N_SPECIAL + 2);
        for id in 0..N_SPECIAL as TokenId {
            assert!(vocab.decode(id).is_none());
        }
        assert_eq!(
            vocab.decode(N_SPECIAL as TokenId),
            Some(&EventKey::new(EventType::Diagnosis, "A"))
        );
    }
}

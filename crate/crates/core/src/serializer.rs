//! Instruction/response construction over a sliding window of events.
//!
//! Tokenization is event-level: each context event contributes a time-bucket
//! token (gap since the previous event in the record) and one event token.
//! The prompt is framed by a header and a footer token:
//!
//! ```text
//! PATIENT HISTORY:
//! [4-7D] LAB: LB003
//! [SAME_DAY] MEDICATION: RX010
//! PREDICT NEXT EVENT:
//! DIAGNOSIS: DX001
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NepError, Result};
use crate::event_model::{
    ClinicalEvent, EventKey, EventType, EventVocabulary, PatientRecord, TokenId, BUCKET_BASE,
    FOOTER, HEADER, N_BUCKETS, PAD, UNK, UNK_VALUE,
};
use crate::sampler::TargetSelection;

pub const HEADER_TEXT: &str = "PATIENT HISTORY:";
pub const FOOTER_TEXT: &str = "PREDICT NEXT EVENT:";
/// Header and footer.
pub const N_STRUCTURAL: usize = 2;

/// Upper bounds (days) of each gap bucket; the last is open-ended.
const BUCKET_UPPER: [u32; N_BUCKETS - 1] = [0, 1, 3, 7, 30, 90];
pub const BUCKET_LABELS: [&str; N_BUCKETS] =
    ["SAME_DAY", "1D", "2-3D", "4-7D", "8-30D", "31-90D", "91+D"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    /// Context size in events.
    pub w: usize,
    pub max_tokens: usize,
    pub stride: usize,
    /// Exhaustive enumeration also emits targets with fewer than `w` predecessors.
    pub short_history: bool,
    /// Append the target's gap bucket to the response.
    pub predict_time: bool,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            w: 32,
            max_tokens: 512,
            stride: 1,
            short_history: false,
            predict_time: false,
        }
    }
}

impl WindowConfig {
    pub fn response_len(&self) -> usize {
        1 + self.predict_time as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.w == 0 {
            return Err(NepError::InvalidConfig("serializer.w must be >= 1".into()));
        }
        if self.stride == 0 {
            return Err(NepError::InvalidConfig(
                "serializer.stride must be >= 1".into(),
            ));
        }
        let min = (2 * self.w).max(N_STRUCTURAL + 2 + self.response_len());
        if self.max_tokens < min {
            return Err(NepError::InvalidConfig(format!(
                "serializer.max_tokens must be >= {min} for w = {}",
                self.w
            )));
        }
        Ok(())
    }
}

/// Maps a non-negative gap in days to its bucket token.
pub fn time_bucket(delta_days: i64) -> Result<TokenId> {
    if delta_days < 0 {
        return Err(NepError::Validation(format!(
            "negative time gap {delta_days}"
        )));
    }
    let idx = BUCKET_UPPER
        .iter()
        .position(|&hi| delta_days <= hi as i64)
        .unwrap_or(N_BUCKETS - 1);
    Ok(BUCKET_BASE + idx as TokenId)
}

pub fn is_bucket(id: TokenId) -> bool {
    (BUCKET_BASE..BUCKET_BASE + N_BUCKETS as TokenId).contains(&id)
}

fn bucket_label(id: TokenId) -> &'static str {
    BUCKET_LABELS[(id - BUCKET_BASE) as usize]
}

fn gap_before(events: &[ClinicalEvent], i: usize) -> u32 {
    if i == 0 {
        0
    } else {
        events[i].ts - events[i - 1].ts
    }
}

/// `[time-bucket, event]` for event `i` of a chronologically sorted list.
pub fn tokenize_event(vocab: &EventVocabulary, events: &[ClinicalEvent], i: usize) -> [TokenId; 2] {
    let bucket = time_bucket(gap_before(events, i) as i64).expect("sorted events have gaps >= 0");
    [bucket, vocab.encode_event(&events[i])]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub patient_id: String,
    pub target_index: usize,
    pub context_tokens: Vec<TokenId>,
    pub response_tokens: Vec<TokenId>,
}

impl TrainingInstance {
    pub fn tokens(&self) -> Vec<TokenId> {
        let mut t = self.context_tokens.clone();
        t.extend_from_slice(&self.response_tokens);
        t
    }

    pub fn len(&self) -> usize {
        self.context_tokens.len() + self.response_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True exactly on response positions of `tokens()`.
    pub fn loss_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.context_tokens.len()];
        m.resize(self.len(), true);
        m
    }

    pub fn n_context_events(&self) -> usize {
        (self.context_tokens.len() - N_STRUCTURAL) / 2
    }
}

/// Header, then `[bucket, event]` for `events[start..end]`, then footer.
fn context_tokens(
    vocab: &EventVocabulary,
    events: &[ClinicalEvent],
    start: usize,
    end: usize,
) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(N_STRUCTURAL + 2 * (end - start));
    out.push(HEADER);
    for i in start..end {
        out.extend_from_slice(&tokenize_event(vocab, events, i));
    }
    out.push(FOOTER);
    out
}

/// Prompt over the most recent events before `end`, at most `w` events and at
/// most `budget` tokens; oldest events are dropped first.
pub fn prompt_tokens(
    vocab: &EventVocabulary,
    events: &[ClinicalEvent],
    end: usize,
    w: usize,
    budget: usize,
) -> Vec<TokenId> {
    let fit = budget.saturating_sub(N_STRUCTURAL) / 2;
    let n = w.min(end).min(fit);
    context_tokens(vocab, events, end - n, end)
}

fn instance_for(
    record: &PatientRecord,
    vocab: &EventVocabulary,
    cfg: &WindowConfig,
    target: usize,
) -> TrainingInstance {
    let events = &record.events;
    let mut response = vec![vocab.encode_event(&events[target])];
    if cfg.predict_time {
        response.push(time_bucket(gap_before(events, target) as i64).expect("sorted"));
    }
    let context = prompt_tokens(
        vocab,
        events,
        target,
        cfg.w,
        cfg.max_tokens - response.len(),
    );
    TrainingInstance {
        patient_id: record.patient_id.clone(),
        target_index: target,
        context_tokens: context,
        response_tokens: response,
    }
}

/// Builds one instance per selected target index of `record`.
pub fn build_instances(
    record: &PatientRecord,
    vocab: &EventVocabulary,
    cfg: &WindowConfig,
    targets: &[usize],
) -> Result<Vec<TrainingInstance>> {
    cfg.validate()?;
    targets
        .iter()
        .map(|&t| {
            if t == 0 || t >= record.events.len() {
                return Err(NepError::Validation(format!(
                    "patient `{}`: target index {t} outside 1..{}",
                    record.patient_id,
                    record.events.len()
                )));
            }
            Ok(instance_for(record, vocab, cfg, t))
        })
        .collect()
}

/// Sliding-window targets at the configured stride: `w..n`, or `1..n` when
/// short histories are enabled.
pub fn exhaustive_targets(record: &PatientRecord, cfg: &WindowConfig) -> Vec<usize> {
    let first = if cfg.short_history { 1 } else { cfg.w };
    (first..record.events.len()).step_by(cfg.stride).collect()
}

/// Materializes instances for sampler selections, in selection order.
pub fn build_dataset(
    cohort: &[PatientRecord],
    vocab: &EventVocabulary,
    cfg: &WindowConfig,
    selections: &[TargetSelection],
) -> Result<Vec<TrainingInstance>> {
    let index: std::collections::HashMap<&str, &PatientRecord> =
        cohort.iter().map(|r| (r.patient_id.as_str(), r)).collect();
    let mut out = Vec::with_capacity(selections.len());
    for s in selections {
        let record = index
            .get(s.patient_id.as_str())
            .ok_or_else(|| NepError::Validation(format!("unknown patient `{}`", s.patient_id)))?;
        out.extend(build_instances(record, vocab, cfg, &[s.target_index])?);
    }
    Ok(out)
}

fn render_event(vocab: &EventVocabulary, id: TokenId) -> Result<String> {
    if id == UNK {
        return Ok(UNK_VALUE.to_string());
    }
    let key = vocab
        .decode(id)
        .ok_or_else(|| NepError::Format(format!("token {id} is not an event")))?;
    Ok(format!("{}: {}", key.event_type.label(), key.value))
}

/// Short display form of a single token, for dumps and diagnostics.
pub fn token_label(vocab: &EventVocabulary, id: TokenId) -> String {
    const NAMES: [&str; 8] = [
        "<PAD>", "<BOS>", "<EOS>", "<UNK>", "<MASK>", "<SEP>", "<HEADER>", "<FOOTER>",
    ];
    if is_bucket(id) {
        format!("[{}]", bucket_label(id))
    } else if let Some(name) = NAMES.get(id as usize) {
        name.to_string()
    } else {
        render_event(vocab, id).unwrap_or_else(|_| format!("<{id}>"))
    }
}

/// Renders ids back to template text, one line per header/event/footer.
pub fn detokenize(vocab: &EventVocabulary, ids: &[TokenId]) -> Result<String> {
    let mut out = String::new();
    let mut i = 0;
    let mut after_footer = false;
    while i < ids.len() {
        let id = ids[i];
        match id {
            PAD => {}
            HEADER => {
                out.push_str(HEADER_TEXT);
                out.push('\n');
            }
            FOOTER => {
                out.push_str(FOOTER_TEXT);
                out.push('\n');
                after_footer = true;
            }
            b if is_bucket(b) && !after_footer => {
                let ev = ids
                    .get(i + 1)
                    .copied()
                    .ok_or_else(|| NepError::Format("time bucket without event".into()))?;
                out.push_str(&format!(
                    "[{}] {}\n",
                    bucket_label(b),
                    render_event(vocab, ev)?
                ));
                i += 1;
            }
            ev if !EventVocabulary::is_special(ev) || ev == UNK => {
                out.push_str(&render_event(vocab, ev)?);
                if let Some(&b) = ids.get(i + 1).filter(|&&b| is_bucket(b) && after_footer) {
                    out.push_str(&format!(" [{}]", bucket_label(b)));
                    i += 1;
                }
                out.push('\n');
            }
            other => return Err(NepError::Format(format!("unexpected token {other}"))),
        }
        i += 1;
    }
    Ok(out)
}

fn parse_event_text(vocab: &EventVocabulary, s: &str) -> Result<TokenId> {
    if s == UNK_VALUE {
        return Ok(UNK);
    }
    let (label, value) = s
        .split_once(": ")
        .ok_or_else(|| NepError::Format(format!("malformed event `{s}`")))?;
    let event_type = EventType::from_label(label)
        .ok_or_else(|| NepError::Format(format!("unknown event type label `{label}`")))?;
    Ok(vocab.encode(&EventKey::new(event_type, value)))
}

fn parse_bucket(label: &str) -> Result<TokenId> {
    BUCKET_LABELS
        .iter()
        .position(|&l| l == label)
        .map(|i| BUCKET_BASE + i as TokenId)
        .ok_or_else(|| NepError::Format(format!("unknown time bucket `{label}`")))
}

/// Parses template text into ids. Codes outside the vocabulary become UNK.
pub fn tokenize(vocab: &EventVocabulary, text: &str) -> Result<Vec<TokenId>> {
    let mut ids = Vec::new();
    let mut after_footer = false;
    for line in text.lines() {
        if line == HEADER_TEXT {
            ids.push(HEADER);
        } else if line == FOOTER_TEXT {
            ids.push(FOOTER);
            after_footer = true;
        } else if let Some(rest) = line.strip_prefix('[').filter(|_| !after_footer) {
            let (label, ev) = rest
                .split_once("] ")
                .ok_or_else(|| NepError::Format(format!("malformed context line `{line}`")))?;
            ids.push(parse_bucket(label)?);
            ids.push(parse_event_text(vocab, ev)?);
        } else if let (true, Some((ev, b))) = (after_footer, line.rsplit_once(" [")) {
            ids.push(parse_event_text(vocab, ev)?);
            let label = b
                .strip_suffix(']')
                .ok_or_else(|| NepError::Format(format!("malformed response `{line}`")))?;
            ids.push(parse_bucket(label)?);
        } else if !line.is_empty() {
            ids.push(parse_event_text(vocab, line)?);
        } else {
            return Err(NepError::Format("blank line in template".into()));
        }
    }
    Ok(ids)
}

pub fn write_instances(path: &Path, instances: &[TrainingInstance]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_instances(path: &Path) -> Result<Vec<TrainingInstance>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| NepError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

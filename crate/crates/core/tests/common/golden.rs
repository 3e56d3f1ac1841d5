use std::collections::BTreeMap;

use nep_core::event_model::{ClinicalEvent, EventType, EventVocabulary, PatientRecord};
use nep_core::serializer::{build_instances, detokenize, exhaustive_targets, WindowConfig};

pub const GOLDEN_PATH: &str = concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/tests/fixtures/template_golden.txt"
);

pub fn golden_record() -> PatientRecord {
    let ev = |t, v: &str, ts| ClinicalEvent::new(t, v, ts).unwrap();
    PatientRecord {
        patient_id: "G1".into(),
        events: vec![
            ev(EventType::Diagnosis, "DX001", 0),
            ev(EventType::Lab, "LB003", 0),
            ev(EventType::Medication, "RX010", 1),
            ev(EventType::Vital, "VS002", 4),
            ev(EventType::Procedure, "PR001", 40),
            ev(EventType::Lab, "LB003", 200),
            ev(EventType::Diagnosis, "DX002", 207),
        ],
        outcomes: BTreeMap::new(),
    }
}

/// Every exhaustive instance of a fixed record, rendered as template text.
pub fn render_golden() -> String {
    let r = golden_record();
    let vocab = EventVocabulary::from_cohort(std::slice::from_ref(&r));
    let mut out = String::new();
    for (name, cfg) in [
        (
            "w=3",
            WindowConfig {
                w: 3,
                ..WindowConfig::default()
            },
        ),
        (
            "w=2 predict_time",
            WindowConfig {
                w: 2,
                predict_time: true,
                ..WindowConfig::default()
            },
        ),
    ] {
        for inst in build_instances(&r, &vocab, &cfg, &exhaustive_targets(&r, &cfg)).unwrap() {
            out.push_str(&format!("### {name} target {}\n", inst.target_index));
            out.push_str(&detokenize(&vocab, &inst.tokens()).unwrap());
        }
    }
    out
}

use ndarray::Array2;

use crate::event_model::{EventVocabulary, PatientRecord, N_SPECIAL};

/// `log(1 + count)` of every vocabulary event per patient; one column per
/// non-special token, UNK occurrences ignored. Order within a record is
/// irrelevant.
pub fn bag_of_events_baseline(cohort: &[PatientRecord], vocab: &EventVocabulary) -> Array2<f64> {
    let width = vocab.n_events();
    let mut x = Array2::<f64>::zeros((cohort.len(), width));
    for (i, r) in cohort.iter().enumerate() {
        for e in &r.events {
            let id = vocab.encode_event(e) as usize;
            if id >= N_SPECIAL {
                x[[i, id - N_SPECIAL]] += 1.0;
            }
        }
    }
    x.mapv_inplace(f64::ln_1p);
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_model::{ClinicalEvent, EventType};

    fn rec(id: &str, codes: &[&str]) -> PatientRecord {
        PatientRecord {
            patient_id: id.into(),
            events: codes
                .iter()
                .enumerate()
                .map(|(i, c)| ClinicalEvent::new(EventType::Diagnosis, *c, i as u32).unwrap())
                .collect(),
            outcomes: Default::default(),
        }
    }

    #[test]
    fn counts_and_order_blindness() {
        let cohort = vec![
            rec("a", &["A", "A", "B"]),
            rec("b", &["B", "A", "A"]),
            rec("c", &["C"]),
        ];
        let vocab = EventVocabulary::from_cohort(&cohort);
        let x = bag_of_events_baseline(&cohort, &vocab);
        assert_eq!(x.ncols(), 3);
        assert_eq!(x.row(0), x.row(1));
        assert_eq!(x[[0, 0]], 2f64.ln_1p());
        assert_eq!(x[[0, 1]], 1f64.ln_1p());
        assert_eq!(x[[0, 2]], 0.0);
    }
}

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::forward;
use super::params::{AdapterSet, ModelParams};
use super::train::CurvePoint;
use super::{AttentionMaskMode, Real};
use crate::error::{NepError, Result};
use crate::event_model::{EventVocabulary, TokenId};
use crate::serializer::{token_label, WindowConfig};
use crate::util::content_hash;

const CHECKPOINT_FORMAT: &str = "nep-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to reuse a trained model: tensors (with shapes), model
/// and window configuration, and the vocabulary the ids refer to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub mask_mode: AttentionMaskMode,
    pub window: WindowConfig,
    pub vocab: EventVocabulary,
    pub params: ModelParams<f32>,
    pub adapters: Option<AdapterSet<f32>>,
}

impl Checkpoint {
    pub fn new(
        params: ModelParams<f32>,
        adapters: Option<AdapterSet<f32>>,
        vocab: EventVocabulary,
        window: WindowConfig,
        mask_mode: AttentionMaskMode,
    ) -> Result<Self> {
        if params.config.vocab_size != vocab.len() {
            return Err(NepError::Validation(format!(
                "model vocab_size {} does not match vocabulary of {} tokens",
                params.config.vocab_size,
                vocab.len()
            )));
        }
        Ok(Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            mask_mode,
            window,
            vocab,
            params,
            adapters,
        })
    }

    /// Stable id over the full checkpoint content.
    pub fn id(&self) -> String {
        content_hash(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut ck: Self = serde_json::from_slice(&fs::read(path)?)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(NepError::Format(format!(
                "{}: expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, found {} v{}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        ck.vocab.rebuild_index();
        ck.params.config.validate()?;
        if let Some(a) = &ck.adapters {
            a.check_shapes(&ck.params.config)?;
        }
        Ok(ck)
    }
}

pub fn write_loss_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "step,loss,lr")?;
    for p in curve {
        writeln!(f, "{},{},{}", p.step, p.loss, p.lr)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_loss_curve(path: &Path) -> Result<Vec<CurvePoint>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "step,loss,lr")) => {}
        _ => {
            return Err(NepError::Format(
                "loss curve header must be step,loss,lr".into(),
            ))
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = |m: String| NepError::Parse {
                line: i + 1,
                message: m,
            };
            let cols: Vec<&str> = l.split(',').collect();
            if cols.len() != 3 {
                return Err(bad(format!("expected 3 columns, found {}", cols.len())));
            }
            Ok(CurvePoint {
                step: cols[0].parse().map_err(|e| bad(format!("step: {e}")))?,
                loss: cols[1].parse().map_err(|e| bad(format!("loss: {e}")))?,
                lr: cols[2].parse().map_err(|e| bad(format!("lr: {e}")))?,
            })
        })
        .collect()
}

/// Attention maps of one forward pass, `layers[layer][head][query][key]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub mask_mode: AttentionMaskMode,
    pub ids: Vec<TokenId>,
    /// Rendered token strings, when a vocabulary was supplied.
    pub tokens: Option<Vec<String>>,
    pub layers: Vec<Vec<Vec<Vec<f64>>>>,
}

impl AttentionDump {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn matrix(&self, layer: usize, head: usize) -> &[Vec<f64>] {
        &self.layers[layer][head]
    }
}

pub fn export_attention<T: Real>(
    params: &ModelParams<T>,
    adapters: Option<&AdapterSet<T>>,
    ids: &[TokenId],
    mode: AttentionMaskMode,
    vocab: Option<&EventVocabulary>,
) -> Result<AttentionDump> {
    let out = forward(params, adapters, ids, mode)?;
    let layers = out
        .attention
        .iter()
        .map(|heads| {
            heads
                .iter()
                .map(|m| {
                    m.rows()
                        .into_iter()
                        .map(|r| r.iter().map(|x| x.as_f64()).collect())
                        .collect()
                })
                .collect()
        })
        .collect();
    let tokens = vocab.map(|v| ids.iter().map(|&t| token_label(v, t)).collect());
    Ok(AttentionDump {
        mask_mode: mode,
        ids: ids.to_vec(),
        tokens,
        layers,
    })
}

pub fn write_attention(path: &Path, dump: &AttentionDump) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(dump)?)?;
    Ok(())
}

pub fn read_attention(path: &Path) -> Result<AttentionDump> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nanolm::ModelConfig;

    fn small() -> ModelParams<f32> {
        ModelParams::init(
            ModelConfig {
                vocab_size: 24,
                d_model: 8,
                n_heads: 2,
                n_layers: 2,
                max_tokens: 12,
                mlp_ratio: 2,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn loss_curve_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        let curve = vec![
            CurvePoint {
                step: 1,
                loss: 3.178_053_830_347_945_6,
                lr: 3e-5,
            },
            CurvePoint {
                step: 2,
                loss: 0.1 + 0.2,
                lr: 6e-5,
            },
        ];
        write_loss_curve(&path, &curve).unwrap();
        assert_eq!(read_loss_curve(&path).unwrap(), curve);
    }

    #[test]
    fn attention_round_trip_and_causal() {
        let params = small();
        let ids = [1, 15, 8, 16, 9, 17, 7];
        let dump = export_attention(&params, None, &ids, AttentionMaskMode::Causal, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attn.json");
        write_attention(&path, &dump).unwrap();
        let back = read_attention(&path).unwrap();
        assert_eq!(back, dump);
        let fwd = forward(&params, None, &ids, AttentionMaskMode::Causal).unwrap();
        for (l, heads) in back.layers.iter().enumerate() {
            for (h, m) in heads.iter().enumerate() {
                for (i, row) in m.iter().enumerate() {
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                    for (j, &x) in row.iter().enumerate() {
                        assert_eq!(x, fwd.attention[l][h][[i, j]] as f64);
                        if j > i {
                            assert_eq!(x, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        use crate::event_model::{ClinicalEvent, EventType, PatientRecord};
        let rec = PatientRecord {
            patient_id: "a".into(),
            events: vec![
                ClinicalEvent::new(EventType::Diagnosis, "X", 0).unwrap(),
                ClinicalEvent::new(EventType::Lab, "Y", 3).unwrap(),
            ],
            outcomes: Default::default(),
        };
        let vocab = EventVocabulary::from_cohort(&[rec]);
        let mut params = small();
        params.config.vocab_size = vocab.len();
        let params = ModelParams::init(params.config, 4).unwrap();
        let ck = Checkpoint::new(
            params,
            None,
            vocab,
            WindowConfig::default(),
            AttentionMaskMode::Causal,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.id(), ck.id());
        let key = crate::event_model::EventKey::new(EventType::Lab, "Y");
        assert_eq!(back.vocab.encode(&key), ck.vocab.encode(&key));
        assert_ne!(back.vocab.encode(&key), crate::event_model::UNK);
    }
}

//! Frozen-model patient embeddings pooled from final hidden states.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NepError, Result};
use crate::event_model::{EventVocabulary, PatientRecord, TokenId, PAD};
use crate::nanolm::{forward, AdapterSet, AttentionMaskMode, Checkpoint, ModelParams, Real};
use crate::serializer::prompt_tokens;
use crate::util::content_hash;

const BINARY_MAGIC: &[u8; 8] = b"NEPEMB01";
const CSV_TAG: &str = "# nep-embeddings";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Last,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::Mean => "mean",
            Pooling::Last => "last",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    /// Most recent events fed to the model; `None` uses as many as fit.
    pub w_embed: Option<usize>,
    pub pooling: Pooling,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint: String,
    pub pooling: Pooling,
    /// Hash of the window configuration the checkpoint was trained with.
    pub serializer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    pub patient_ids: Vec<String>,
    /// `[patients, d_model]`
    pub rows: Array2<f32>,
    pub provenance: Provenance,
}

/// Pools final hidden states over the non-PAD positions of `ids`.
pub fn embed_ids<T: Real>(
    params: &ModelParams<T>,
    adapters: Option<&AdapterSet<T>>,
    ids: &[TokenId],
    pooling: Pooling,
) -> Result<Vec<T>> {
    let out = forward(params, adapters, ids, AttentionMaskMode::Causal)?;
    let keep: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] != PAD).collect();
    if keep.is_empty() {
        return Err(NepError::Validation(
            "nothing to pool: every token is PAD".into(),
        ));
    }
    Ok(match pooling {
        Pooling::Mean => {
            let mut acc = vec![T::zero(); params.config.d_model];
            for &i in &keep {
                acc.iter_mut()
                    .zip(out.hidden.row(i))
                    .for_each(|(a, &h)| *a += h);
            }
            let n = T::c(keep.len() as f64);
            acc.into_iter().map(|a| a / n).collect()
        }
        Pooling::Last => out.hidden.row(*keep.last().expect("non-empty")).to_vec(),
    })
}

/// The prompt used for embedding: the most recent events that fit, with the
/// template header and footer but no response.
pub fn embedding_prompt(
    vocab: &EventVocabulary,
    record: &PatientRecord,
    w_embed: Option<usize>,
    max_tokens: usize,
) -> Vec<TokenId> {
    let n = record.events.len();
    prompt_tokens(vocab, &record.events, n, w_embed.unwrap_or(n), max_tokens)
}

pub fn embed_patient<T: Real>(
    params: &ModelParams<T>,
    adapters: Option<&AdapterSet<T>>,
    vocab: &EventVocabulary,
    record: &PatientRecord,
    cfg: &EmbedConfig,
) -> Result<Vec<T>> {
    if record.events.is_empty() {
        return Err(NepError::Validation(format!(
            "patient `{}` has no events",
            record.patient_id
        )));
    }
    let ids = embedding_prompt(vocab, record, cfg.w_embed, params.config.max_tokens);
    embed_ids(params, adapters, &ids, cfg.pooling)
}

/// Embeds every patient with the checkpoint's (frozen) model. Rows follow
/// cohort order; the work is spread over the rayon pool.
pub fn embed_cohort(
    ck: &Checkpoint,
    cohort: &[PatientRecord],
    cfg: &EmbedConfig,
) -> Result<EmbeddingMatrix> {
    if cohort.is_empty() {
        return Err(NepError::EmptyCohort);
    }
    let d = ck.params.config.d_model;
    let rows: Vec<Vec<f32>> = cohort
        .par_iter()
        .map(|r| {
            embed_patient(&ck.params, ck.adapters.as_ref(), &ck.vocab, r, cfg).map_err(|e| {
                NepError::Validation(format!("embedding patient `{}`: {e}", r.patient_id))
            })
        })
        .collect::<Result<_>>()?;
    let flat: Vec<f32> = rows.into_iter().flatten().collect();
    let rows = Array2::from_shape_vec((cohort.len(), d), flat).expect("d_model-wide rows");
    if rows.iter().any(|x| !x.is_finite()) {
        return Err(NepError::Validation("non-finite embedding".into()));
    }
    Ok(EmbeddingMatrix {
        patient_ids: cohort.iter().map(|r| r.patient_id.clone()).collect(),
        rows,
        provenance: Provenance {
            checkpoint: ck.id(),
            pooling: cfg.pooling,
            serializer: content_hash(&ck.window),
        },
    })
}

impl EmbeddingMatrix {
    pub fn d_model(&self) -> usize {
        self.rows.ncols()
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn features(&self) -> Array2<f64> {
        self.rows.mapv(f64::from)
    }

    /// Rows reordered to `ids`; fails on an id without a row.
    pub fn select(&self, ids: &[String]) -> Result<Array2<f64>> {
        let index: std::collections::HashMap<&str, usize> = self
            .patient_ids
            .iter()
            .enumerate()
            .map(|(i, p)| (p.as_str(), i))
            .collect();
        let picked: Vec<usize> =
            ids.iter()
                .map(|id| {
                    index.get(id.as_str()).copied().ok_or_else(|| {
                        NepError::Validation(format!("no embedding for patient `{id}`"))
                    })
                })
                .collect::<Result<_>>()?;
        Ok(self.rows.select(Axis(0), &picked).mapv(f64::from))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(fs::File::create(path)?);
        writeln!(
            f,
            "{CSV_TAG} d_model={} count={} provenance={}",
            self.d_model(),
            self.len(),
            serde_json::to_string(&self.provenance)?
        )?;
        write!(f, "patient_id")?;
        for j in 0..self.d_model() {
            write!(f, ",e{j}")?;
        }
        writeln!(f)?;
        for (id, row) in self.patient_ids.iter().zip(self.rows.rows()) {
            write!(f, "{id}")?;
            for x in row {
                write!(f, ",{x}")?;
            }
            writeln!(f)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(fs::File::create(path)?);
        let prov = serde_json::to_vec(&self.provenance)?;
        f.write_all(BINARY_MAGIC)?;
        f.write_all(&(self.d_model() as u32).to_le_bytes())?;
        f.write_all(&(self.len() as u32).to_le_bytes())?;
        f.write_all(&(prov.len() as u32).to_le_bytes())?;
        f.write_all(&prov)?;
        for (id, row) in self.patient_ids.iter().zip(self.rows.rows()) {
            f.write_all(&(id.len() as u32).to_le_bytes())?;
            f.write_all(id.as_bytes())?;
            for x in row {
                f.write_all(&x.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    /// Reads either format, detected from the leading bytes.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.starts_with(BINARY_MAGIC) {
            Self::from_binary(&bytes)
        } else {
            Self::from_csv(
                std::str::from_utf8(&bytes).map_err(|e| NepError::Format(e.to_string()))?,
            )
        }
    }

    fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let rest = header
            .strip_prefix(CSV_TAG)
            .ok_or_else(|| NepError::Format("missing embedding header".into()))?
            .trim_start();
        let field = |s: &'_ str, key: &str| -> Result<String> {
            s.split_whitespace()
                .find_map(|kv| kv.strip_prefix(key).map(str::to_string))
                .ok_or_else(|| NepError::Format(format!("header lacks {key}")))
        };
        let d: usize = field(rest, "d_model=")?
            .parse()
            .map_err(|_| NepError::Format("bad d_model".into()))?;
        let count: usize = field(rest, "count=")?
            .parse()
            .map_err(|_| NepError::Format("bad count".into()))?;
        let prov_text = rest
            .split_once("provenance=")
            .map(|(_, p)| p)
            .ok_or_else(|| NepError::Format("header lacks provenance=".into()))?;
        let provenance: Provenance = serde_json::from_str(prov_text)?;
        lines.next();
        let mut ids = Vec::with_capacity(count);
        let mut flat = Vec::with_capacity(count * d);
        for (i, line) in lines.filter(|l| !l.is_empty()).enumerate() {
            let bad = |m: String| NepError::Parse {
                line: i + 3,
                message: m,
            };
            let mut cols = line.split(',');
            ids.push(cols.next().unwrap_or_default().to_string());
            let before = flat.len();
            for c in cols {
                flat.push(c.parse::<f32>().map_err(|e| bad(e.to_string()))?);
            }
            if flat.len() - before != d {
                return Err(bad(format!(
                    "expected {d} values, found {}",
                    flat.len() - before
                )));
            }
        }
        if ids.len() != count {
            return Err(NepError::Format(format!(
                "header says {count} rows, found {}",
                ids.len()
            )));
        }
        Ok(Self {
            patient_ids: ids,
            rows: Array2::from_shape_vec((count, d), flat).expect("checked widths"),
            provenance,
        })
    }

    fn from_binary(bytes: &[u8]) -> Result<Self> {
        let mut r = &bytes[BINARY_MAGIC.len()..];
        let u32_at = |r: &mut &[u8]| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| NepError::Format("truncated embedding file".into()))?;
            Ok(u32::from_le_bytes(b))
        };
        let d = u32_at(&mut r)? as usize;
        let count = u32_at(&mut r)? as usize;
        let plen = u32_at(&mut r)? as usize;
        let take = |r: &mut &[u8], n: usize| -> Result<Vec<u8>> {
            if r.len() < n {
                return Err(NepError::Format("truncated embedding file".into()));
            }
            let (a, b) = r.split_at(n);
            *r = b;
            Ok(a.to_vec())
        };
        let provenance: Provenance = serde_json::from_slice(&take(&mut r, plen)?)?;
        let mut ids = Vec::with_capacity(count);
        let mut flat = Vec::with_capacity(count * d);
        for _ in 0..count {
            let n = u32_at(&mut r)? as usize;
            ids.push(
                String::from_utf8(take(&mut r, n)?).map_err(|e| NepError::Format(e.to_string()))?,
            );
            for chunk in take(&mut r, 4 * d)?.chunks_exact(4) {
                flat.push(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
            }
        }
        if !r.is_empty() {
            return Err(NepError::Format(
                "trailing bytes after embedding rows".into(),
            ));
        }
        Ok(Self {
            patient_ids: ids,
            rows: Array2::from_shape_vec((count, d), flat).expect("sized reads"),
            provenance,
        })
    }
}

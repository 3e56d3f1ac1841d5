use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Real;
use crate::error::{NepError, Result};
use crate::util::rng_from;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Number of learned positions.
    pub max_tokens: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 128,
            n_heads: 4,
            n_layers: 2,
            max_tokens: 512,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NepError::InvalidConfig(format!("model.{m}")));
        if self.vocab_size == 0 {
            return bad("vocab_size must be >= 1");
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.n_layers == 0 {
            return bad("n_layers must be >= 1");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be >= 1");
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be >= 1");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_mlp(&self) -> usize {
        self.d_model * self.mlp_ratio
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct LayerWeights<T> {
    pub ln1_g: Array1<T>,
    pub ln1_b: Array1<T>,
    pub wq: Array2<T>,
    pub bq: Array1<T>,
    pub wk: Array2<T>,
    pub bk: Array1<T>,
    pub wv: Array2<T>,
    pub bv: Array1<T>,
    pub wo: Array2<T>,
    pub bo: Array1<T>,
    pub ln2_g: Array1<T>,
    pub ln2_b: Array1<T>,
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

/// Every named slice of a layer: (group, decays, data).
pub(crate) type Slot<'a, T> = (&'static str, bool, &'a [T]);
pub(crate) type SlotMut<'a, T> = (&'static str, bool, &'a mut [T]);

fn s1<T>(a: &Array1<T>) -> &[T] {
    a.as_slice().expect("standard layout")
}
fn s2<T>(a: &Array2<T>) -> &[T] {
    a.as_slice().expect("standard layout")
}
fn m1<T>(a: &mut Array1<T>) -> &mut [T] {
    a.as_slice_mut().expect("standard layout")
}
fn m2<T>(a: &mut Array2<T>) -> &mut [T] {
    a.as_slice_mut().expect("standard layout")
}

impl<T: Real> LayerWeights<T> {
    fn slots(&self) -> [Slot<'_, T>; 16] {
        [
            ("ln1_g", false, s1(&self.ln1_g)),
            ("ln1_b", false, s1(&self.ln1_b)),
            ("wq", true, s2(&self.wq)),
            ("bq", false, s1(&self.bq)),
            ("wk", true, s2(&self.wk)),
            ("bk", false, s1(&self.bk)),
            ("wv", true, s2(&self.wv)),
            ("bv", false, s1(&self.bv)),
            ("wo", true, s2(&self.wo)),
            ("bo", false, s1(&self.bo)),
            ("ln2_g", false, s1(&self.ln2_g)),
            ("ln2_b", false, s1(&self.ln2_b)),
            ("w1", true, s2(&self.w1)),
            ("b1", false, s1(&self.b1)),
            ("w2", true, s2(&self.w2)),
            ("b2", false, s1(&self.b2)),
        ]
    }

    fn slots_mut(&mut self) -> [SlotMut<'_, T>; 16] {
        [
            ("ln1_g", false, m1(&mut self.ln1_g)),
            ("ln1_b", false, m1(&mut self.ln1_b)),
            ("wq", true, m2(&mut self.wq)),
            ("bq", false, m1(&mut self.bq)),
            ("wk", true, m2(&mut self.wk)),
            ("bk", false, m1(&mut self.bk)),
            ("wv", true, m2(&mut self.wv)),
            ("bv", false, m1(&mut self.bv)),
            ("wo", true, m2(&mut self.wo)),
            ("bo", false, m1(&mut self.bo)),
            ("ln2_g", false, m1(&mut self.ln2_g)),
            ("ln2_b", false, m1(&mut self.ln2_b)),
            ("w1", true, m2(&mut self.w1)),
            ("b1", false, m1(&mut self.b1)),
            ("w2", true, m2(&mut self.w2)),
            ("b2", false, m1(&mut self.b2)),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Weights<T> {
    /// Token embeddings, also the output projection.
    pub tok: Array2<T>,
    pub pos: Array2<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub lnf_g: Array1<T>,
    pub lnf_b: Array1<T>,
}

impl<T: Real> Weights<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let h = cfg.d_mlp();
        let z1 = |n| Array1::from_elem(n, T::zero());
        let z2 = |r, c| Array2::from_elem((r, c), T::zero());
        Self {
            tok: z2(cfg.vocab_size, d),
            pos: z2(cfg.max_tokens, d),
            layers: (0..cfg.n_layers)
                .map(|_| LayerWeights {
                    ln1_g: z1(d),
                    ln1_b: z1(d),
                    wq: z2(d, d),
                    bq: z1(d),
                    wk: z2(d, d),
                    bk: z1(d),
                    wv: z2(d, d),
                    bv: z1(d),
                    wo: z2(d, d),
                    bo: z1(d),
                    ln2_g: z1(d),
                    ln2_b: z1(d),
                    w1: z2(d, h),
                    b1: z1(h),
                    w2: z2(h, d),
                    b2: z1(d),
                })
                .collect(),
            lnf_g: z1(d),
            lnf_b: z1(d),
        }
    }

    /// (full name, group, decays, data) for every tensor in a fixed order.
    pub fn named(&self) -> Vec<(String, &'static str, bool, &[T])> {
        let mut out = vec![
            ("tok".to_string(), "tok", true, s2(&self.tok)),
            ("pos".to_string(), "pos", true, s2(&self.pos)),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (g, decay, data) in l.slots() {
                out.push((format!("layers.{i}.{g}"), g, decay, data));
            }
        }
        out.push(("lnf_g".into(), "lnf_g", false, s1(&self.lnf_g)));
        out.push(("lnf_b".into(), "lnf_b", false, s1(&self.lnf_b)));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &'static str, bool, &mut [T])> {
        let mut out = vec![
            ("tok".to_string(), "tok", true, m2(&mut self.tok)),
            ("pos".to_string(), "pos", true, m2(&mut self.pos)),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (g, decay, data) in l.slots_mut() {
                out.push((format!("layers.{i}.{g}"), g, decay, data));
            }
        }
        out.push(("lnf_g".into(), "lnf_g", false, m1(&mut self.lnf_g)));
        out.push(("lnf_b".into(), "lnf_b", false, m1(&mut self.lnf_b)));
        out
    }

    pub fn n_params(&self) -> usize {
        self.named().iter().map(|(_, _, _, d)| d.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, _, _, a), (_, _, _, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
        }
    }

    pub fn scale(&mut self, k: T) {
        for (_, _, _, a) in self.named_mut() {
            a.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named()
            .iter()
            .all(|(_, _, _, d)| d.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> Weights<U> {
        let c1 = |a: &Array1<T>| a.mapv(|x| U::c(x.as_f64()));
        let c2 = |a: &Array2<T>| a.mapv(|x| U::c(x.as_f64()));
        Weights {
            tok: c2(&self.tok),
            pos: c2(&self.pos),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    ln1_g: c1(&l.ln1_g),
                    ln1_b: c1(&l.ln1_b),
                    wq: c2(&l.wq),
                    bq: c1(&l.bq),
                    wk: c2(&l.wk),
                    bk: c1(&l.bk),
                    wv: c2(&l.wv),
                    bv: c1(&l.bv),
                    wo: c2(&l.wo),
                    bo: c1(&l.bo),
                    ln2_g: c1(&l.ln2_g),
                    ln2_b: c1(&l.ln2_b),
                    w1: c2(&l.w1),
                    b1: c1(&l.b1),
                    w2: c2(&l.w2),
                    b2: c1(&l.b2),
                })
                .collect(),
            lnf_g: c1(&self.lnf_g),
            lnf_b: c1(&self.lnf_b),
        }
    }
}

/// Base model weights plus the record of adapters already folded into them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub weights: Weights<T>,
    /// Content ids of adapter sets merged into `weights`.
    #[serde(default)]
    pub merged: Vec<String>,
}

fn fill_normal<T: Real>(data: &mut [T], std: f64, rng: &mut impl Rng) {
    let normal = Normal::new(0.0, std).expect("positive std");
    data.iter_mut().for_each(|x| *x = T::c(normal.sample(rng)));
}

impl<T: Real> ModelParams<T> {
    /// Normal(0, 0.02) matrices with residual output maps scaled by
    /// `1/sqrt(2 n_layers)`; zero biases; unit layer-norm scales.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(seed);
        let mut weights = Weights::zeros(&config);
        let resid = 0.02 / (2.0 * config.n_layers as f64).sqrt();
        for (_, group, _, data) in weights.named_mut() {
            match group {
                "tok" | "pos" | "wq" | "wk" | "wv" | "w1" => fill_normal(data, 0.02, &mut rng),
                "wo" | "w2" => fill_normal(data, resid, &mut rng),
                "ln1_g" | "ln2_g" | "lnf_g" => data.iter_mut().for_each(|x| *x = T::one()),
                _ => {}
            }
        }
        Ok(Self {
            config,
            weights,
            merged: Vec::new(),
        })
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            weights: self.weights.cast(),
            merged: self.merged.clone(),
        }
    }

    /// SHA-256 prefix over every tensor's bits; changes iff any weight changes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, _, _, data) in self.weights.named() {
            h.update(name.as_bytes());
            for x in data {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        for m in &self.merged {
            h.update(m.as_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct LayerAdapter<T> {
    /// d x r
    pub aq: Array2<T>,
    /// r x d
    pub bq: Array2<T>,
    pub av: Array2<T>,
    pub bv: Array2<T>,
}

/// Low-rank updates on the query and value maps: `W + s * A B`, `s = alpha / r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct AdapterSet<T> {
    pub rank: usize,
    pub alpha: f64,
    pub layers: Vec<LayerAdapter<T>>,
}

impl<T: Real> AdapterSet<T> {
    /// `A ~ Normal(0, 1/sqrt(d))`, `B = 0`, `alpha = 2 r`.
    pub fn init(config: &ModelConfig, rank: usize, seed: u64) -> Self {
        let d = config.d_model;
        let mut rng = rng_from(seed);
        let std = 1.0 / (d as f64).sqrt();
        let layers = (0..config.n_layers)
            .map(|_| {
                let mut aq = Array2::from_elem((d, rank), T::zero());
                let mut av = Array2::from_elem((d, rank), T::zero());
                fill_normal(m2(&mut aq), std, &mut rng);
                fill_normal(m2(&mut av), std, &mut rng);
                LayerAdapter {
                    aq,
                    bq: Array2::from_elem((rank, d), T::zero()),
                    av,
                    bv: Array2::from_elem((rank, d), T::zero()),
                }
            })
            .collect();
        Self {
            rank,
            alpha: 2.0 * rank as f64,
            layers,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            rank: self.rank,
            alpha: self.alpha,
            layers: self
                .layers
                .iter()
                .map(|l| LayerAdapter {
                    aq: Array2::from_elem(l.aq.raw_dim(), T::zero()),
                    bq: Array2::from_elem(l.bq.raw_dim(), T::zero()),
                    av: Array2::from_elem(l.av.raw_dim(), T::zero()),
                    bv: Array2::from_elem(l.bv.raw_dim(), T::zero()),
                })
                .collect(),
        }
    }

    pub fn scaling(&self) -> T {
        if self.rank == 0 {
            T::zero()
        } else {
            T::c(self.alpha / self.rank as f64)
        }
    }

    pub fn named(&self) -> Vec<(String, &'static str, bool, &[T])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.lora_aq"), "lora_a", false, s2(&l.aq)));
            out.push((format!("layers.{i}.lora_bq"), "lora_b", false, s2(&l.bq)));
            out.push((format!("layers.{i}.lora_av"), "lora_a", false, s2(&l.av)));
            out.push((format!("layers.{i}.lora_bv"), "lora_b", false, s2(&l.bv)));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &'static str, bool, &mut [T])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((
                format!("layers.{i}.lora_aq"),
                "lora_a",
                false,
                m2(&mut l.aq),
            ));
            out.push((
                format!("layers.{i}.lora_bq"),
                "lora_b",
                false,
                m2(&mut l.bq),
            ));
            out.push((
                format!("layers.{i}.lora_av"),
                "lora_a",
                false,
                m2(&mut l.av),
            ));
            out.push((
                format!("layers.{i}.lora_bv"),
                "lora_b",
                false,
                m2(&mut l.bv),
            ));
        }
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, _, _, a), (_, _, _, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
        }
    }

    pub fn scale(&mut self, k: T) {
        for (_, _, _, a) in self.named_mut() {
            a.iter_mut().for_each(|x| *x *= k);
        }
    }

    /// Content id used to detect double merges.
    pub fn content_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.rank.to_le_bytes());
        h.update(self.alpha.to_le_bytes());
        for (_, _, _, data) in self.named() {
            for x in data {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn cast<U: Real>(&self) -> AdapterSet<U> {
        let c = |a: &Array2<T>| a.mapv(|x| U::c(x.as_f64()));
        AdapterSet {
            rank: self.rank,
            alpha: self.alpha,
            layers: self
                .layers
                .iter()
                .map(|l| LayerAdapter {
                    aq: c(&l.aq),
                    bq: c(&l.bq),
                    av: c(&l.av),
                    bv: c(&l.bv),
                })
                .collect(),
        }
    }

    /// Checks every adapter matrix against the model width and the declared rank.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.n_layers {
            return Err(NepError::RankMismatch(format!(
                "{} adapter layers for a {}-layer model",
                self.layers.len(),
                config.n_layers
            )));
        }
        let d = config.d_model;
        let r = self.rank;
        for (i, l) in self.layers.iter().enumerate() {
            for (name, a, b) in [("q", &l.aq, &l.bq), ("v", &l.av, &l.bv)] {
                if a.dim() != (d, r) || b.dim() != (r, d) {
                    return Err(NepError::RankMismatch(format!(
                        "layer {i} {name}: A is {:?}, B is {:?}, expected ({d}, {r}) and ({r}, {d})",
                        a.dim(),
                        b.dim()
                    )));
                }
            }
        }
        Ok(())
    }
}

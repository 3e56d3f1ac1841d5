use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{batch_example_losses, batch_loss_and_grad, nep_targets, Example, Gradients};
use super::params::{AdapterSet, ModelParams};
use super::schedule::lr_at;
use super::{AttentionMaskMode, Real};
use crate::error::{NepError, Result};
use crate::event_model::{TokenId, FOOTER, HEADER, MASK, PAD};
use crate::serializer::TrainingInstance;
use crate::util::{rng_from, sub_seed};

const MLM_STREAM: u64 = 0x4d4c_4d00;
const DIVERGENCE_PATIENCE: usize = 100;
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    /// Instances per optimizer step, reached by accumulating micro-batches.
    pub global_batch: usize,
    pub micro_batch: usize,
    /// 0 trains all base weights; otherwise only rank-r query/value adapters.
    pub adapter_rank: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; 0 disables.
    pub max_grad_norm: f64,
    pub mlm_rate: f64,
    /// Compute the micro-batches of a step on the rayon pool. Reduction order
    /// is fixed, so results equal the sequential run bit for bit.
    pub parallel: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-4,
            warmup_fraction: 0.1,
            total_steps: 1000,
            global_batch: 64,
            micro_batch: 16,
            adapter_rank: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_grad_norm: 1.0,
            mlm_rate: 0.15,
            parallel: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NepError::InvalidConfig(format!("train.{m}")));
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must lie in (0, 1)");
        }
        if self.total_steps == 0 {
            return bad("total_steps must be >= 1");
        }
        if self.global_batch == 0 || self.micro_batch == 0 {
            return bad("global_batch and micro_batch must be >= 1");
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return bad("peak_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.mlm_rate > 0.0 && self.mlm_rate <= 1.0) {
            return bad("mlm_rate must lie in (0, 1]");
        }
        if self.weight_decay < 0.0 || self.epsilon <= 0.0 || self.max_grad_norm < 0.0 {
            return bad("weight_decay, epsilon and max_grad_norm must be non-negative");
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        ((self.warmup_fraction * self.total_steps as f64).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput<T> {
    pub params: ModelParams<T>,
    pub adapters: Option<AdapterSet<T>>,
    pub curve: Vec<CurvePoint>,
}

/// Replaces a `rate` fraction (at least one) of the context's event and
/// time-bucket tokens with MASK; targets are the original tokens in place.
pub fn mlm_example(inst: &TrainingInstance, rate: f64, seed: u64) -> Example {
    let mut ids = inst.tokens();
    let mut candidates: Vec<usize> = (0..inst.context_tokens.len())
        .filter(|&i| !matches!(inst.context_tokens[i], PAD | HEADER | FOOTER))
        .collect();
    let n_mask =
        ((rate * candidates.len() as f64).round() as usize).clamp(1, candidates.len().max(1));
    candidates.shuffle(&mut rng_from(seed));
    let mut targets: Vec<(usize, TokenId)> = candidates
        .into_iter()
        .take(n_mask)
        .map(|i| (i, ids[i]))
        .collect();
    targets.sort_unstable();
    for &(i, _) in &targets {
        ids[i] = MASK;
    }
    Example { ids, targets }
}

fn make_example(
    inst: &TrainingInstance,
    mode: AttentionMaskMode,
    config: &TrainConfig,
    counter: u64,
) -> Example {
    match mode {
        AttentionMaskMode::Causal => nep_targets(inst),
        AttentionMaskMode::BidirectionalMlm => mlm_example(
            inst,
            config.mlm_rate,
            sub_seed(config.seed ^ MLM_STREAM, counter),
        ),
    }
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamState {
    fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// Decoupled weight decay on `decay` tensors, then the bias-corrected Adam step.
    fn step<T: Real>(
        &mut self,
        params: Vec<(bool, &mut [T])>,
        grads: Vec<&[T]>,
        lr: f64,
        cfg: &TrainConfig,
    ) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (k, ((decay, p), g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let gi = g[i].as_f64();
                let mut w = p[i].as_f64();
                if decay {
                    w -= lr * cfg.weight_decay * w;
                }
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w -= lr * mhat / (vhat.sqrt() + cfg.epsilon);
                p[i] = T::c(w);
            }
        }
    }
}

/// Epoch-wise shuffled instance order; epoch `e` is permuted with `sub_seed(seed, e)`.
struct Order {
    n: usize,
    seed: u64,
    epoch: u64,
    perm: Vec<usize>,
    pos: usize,
}

impl Order {
    fn new(n: usize, seed: u64) -> Self {
        let mut o = Self {
            n,
            seed,
            epoch: 0,
            perm: Vec::new(),
            pos: 0,
        };
        o.reshuffle();
        o
    }

    fn reshuffle(&mut self) {
        self.perm = (0..self.n).collect();
        self.perm
            .shuffle(&mut rng_from(sub_seed(self.seed, self.epoch)));
        self.pos = 0;
    }

    fn next_index(&mut self) -> usize {
        if self.pos == self.n {
            self.epoch += 1;
            self.reshuffle();
        }
        let i = self.perm[self.pos];
        self.pos += 1;
        i
    }
}

pub fn train<T: Real>(
    instances: &[TrainingInstance],
    params: ModelParams<T>,
    config: &TrainConfig,
    mode: AttentionMaskMode,
) -> Result<TrainOutput<T>> {
    train_with_hook(instances, params, config, mode, |_, _, _| {})
}

/// Trains with AdamW under the warm-up/cosine schedule. `hook` sees the
/// model after every optimizer step.
pub fn train_with_hook<T: Real>(
    instances: &[TrainingInstance],
    mut params: ModelParams<T>,
    config: &TrainConfig,
    mode: AttentionMaskMode,
    mut hook: impl FnMut(usize, &ModelParams<T>, Option<&AdapterSet<T>>),
) -> Result<TrainOutput<T>> {
    config.validate()?;
    if instances.is_empty() {
        return Err(NepError::Validation("no training instances".into()));
    }
    let mut adapters = (config.adapter_rank > 0).then(|| {
        AdapterSet::<T>::init(
            &params.config,
            config.adapter_rank,
            sub_seed(config.seed, u64::MAX),
        )
    });
    let train_base = adapters.is_none();

    let sizes: Vec<usize> = match &adapters {
        Some(a) => a.named().iter().map(|(_, _, _, d)| d.len()).collect(),
        None => params
            .weights
            .named()
            .iter()
            .map(|(_, _, _, d)| d.len())
            .collect(),
    };
    let mut adam = AdamState::new(&sizes);
    let mut order = Order::new(instances.len(), config.seed);
    let mut counter: u64 = 0;
    let mut curve = Vec::with_capacity(config.total_steps);
    let mut initial_loss = None;
    let mut above = 0usize;

    for step in 0..config.total_steps {
        let batch: Vec<(usize, u64)> = (0..config.global_batch)
            .map(|_| {
                counter += 1;
                (order.next_index(), counter)
            })
            .collect();
        let mut acc: Option<Gradients<T>> = None;
        let mut loss_sum = 0.0;
        let micros: Vec<&[(usize, u64)]> = batch.chunks(config.micro_batch).collect();
        let compute = |micro: &&[(usize, u64)]| {
            let examples: Vec<Example> = micro
                .iter()
                .map(|&(i, c)| make_example(&instances[i], mode, config, c))
                .collect();
            batch_loss_and_grad(&params, adapters.as_ref(), &examples, mode, train_base)
        };
        let results: Vec<Result<(f64, Gradients<T>)>> = if config.parallel {
            micros.par_iter().map(compute).collect()
        } else {
            micros.iter().map(compute).collect()
        };
        for r in results {
            let (l, g) = r?;
            loss_sum += l;
            match acc.as_mut() {
                Some(a) => a.add_assign(&g),
                None => acc = Some(g),
            }
        }
        let mut grads = acc.expect("non-empty batch");
        grads.scale(T::c(1.0 / batch.len() as f64));
        let loss = loss_sum / batch.len() as f64;
        if !loss.is_finite() {
            return Err(NepError::Divergence {
                step: step + 1,
                reason: format!("loss is {loss}"),
            });
        }
        let init = *initial_loss.get_or_insert(loss);
        above = if loss > 2.0 * init { above + 1 } else { 0 };
        if above >= DIVERGENCE_PATIENCE {
            return Err(NepError::Divergence {
                step: step + 1,
                reason: format!(
                    "loss {loss:.4} above twice the initial {init:.4} for {above} steps"
                ),
            });
        }

        if config.max_grad_norm > 0.0 {
            let norm = grads.sq_norm().sqrt();
            if norm > config.max_grad_norm {
                grads.scale(T::c(config.max_grad_norm / norm));
            }
        }
        let lr = lr_at(step + 1, config);
        match adapters.as_mut() {
            Some(a) => {
                let g = grads.adapters.as_ref().expect("adapter gradients");
                adam.step(
                    a.named_mut()
                        .into_iter()
                        .map(|(_, _, d, p)| (d, p))
                        .collect(),
                    g.named().into_iter().map(|(_, _, _, d)| d).collect(),
                    lr,
                    config,
                );
                if !a
                    .named()
                    .iter()
                    .all(|(_, _, _, d)| d.iter().all(|x| x.is_finite()))
                {
                    return Err(NepError::Divergence {
                        step: step + 1,
                        reason: "non-finite adapter weights".into(),
                    });
                }
            }
            None => {
                let g = grads.weights.as_ref().expect("base gradients");
                adam.step(
                    params
                        .weights
                        .named_mut()
                        .into_iter()
                        .map(|(_, _, d, p)| (d, p))
                        .collect(),
                    g.named().into_iter().map(|(_, _, _, d)| d).collect(),
                    lr,
                    config,
                );
                if !params.weights.all_finite() {
                    return Err(NepError::Divergence {
                        step: step + 1,
                        reason: "non-finite weights".into(),
                    });
                }
            }
        }
        curve.push(CurvePoint {
            step: step + 1,
            loss,
            lr,
        });
        hook(step + 1, &params, adapters.as_ref());
    }
    Ok(TrainOutput {
        params,
        adapters,
        curve,
    })
}

/// Mean next-event cross-entropy over instances (response positions only).
pub fn evaluate_nep_loss<T: Real>(
    params: &ModelParams<T>,
    adapters: Option<&AdapterSet<T>>,
    instances: &[TrainingInstance],
) -> Result<f64> {
    if instances.is_empty() {
        return Err(NepError::Validation("no evaluation instances".into()));
    }
    let losses: Vec<Vec<f64>> = instances
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let examples: Vec<Example> = chunk.iter().map(nep_targets).collect();
            batch_example_losses(params, adapters, &examples, AttentionMaskMode::Causal)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().flatten().copied().sum::<f64>() / instances.len() as f64)
}

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{example_loss, loss_and_grad, Example};
use super::params::{AdapterSet, ModelParams};
use super::AttentionMaskMode;
use crate::error::Result;
use crate::util::rng_from;

/// Relative errors are taken against `max(|analytic|, |numeric|, FLOOR)` so
/// coordinates whose true gradient is ~0 do not blow up the ratio.
const FLOOR: f64 = 1e-7;

/// Corruption applied to the analytic gradient before comparison, used to
/// confirm the harness notices a broken backward pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradMutation {
    /// Negates the analytic gradient of every tensor in this group (e.g. `"wq"`).
    SignFlip(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordCheck {
    pub tensor: String,
    pub group: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per parameter group.
    pub per_group: BTreeMap<String, f64>,
    pub coords: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn n_coords(&self) -> usize {
        self.coords.len()
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    if a == 0.0 && n == 0.0 {
        return 0.0;
    }
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Compares the analytic gradient of `example`'s loss with fourth-order
/// central differences (steps `±epsilon`, `±2 epsilon`) at `n_coords` random
/// coordinates (at least one per tensor, visited round-robin so every group
/// is covered). Adapter tensors are included when `adapters` is given.
#[allow(clippy::too_many_arguments)]
pub fn grad_check(
    params: &ModelParams<f64>,
    adapters: Option<&AdapterSet<f64>>,
    example: &Example,
    mode: AttentionMaskMode,
    epsilon: f64,
    n_coords: usize,
    seed: u64,
    mutation: Option<&GradMutation>,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grad(params, adapters, example, mode, true)?;
    let base_grads = grads.weights.expect("base gradients requested");

    // (tensor name, group, is_adapter, analytic gradient)
    let mut tensors: Vec<(String, String, bool, Vec<f64>)> = base_grads
        .named()
        .into_iter()
        .map(|(n, g, _, d)| (n, g.to_string(), false, d.to_vec()))
        .collect();
    if let Some(ag) = &grads.adapters {
        tensors.extend(
            ag.named()
                .into_iter()
                .filter(|(_, _, _, d)| !d.is_empty())
                .map(|(n, g, _, d)| (n, g.to_string(), true, d.to_vec())),
        );
    }
    if let Some(GradMutation::SignFlip(group)) = mutation {
        for (_, g, _, d) in tensors.iter_mut() {
            if g == group {
                d.iter_mut().for_each(|x| *x = -*x);
            }
        }
    }

    let mut rng = rng_from(seed);
    let mut p = params.clone();
    let mut a = adapters.cloned();
    let n_total = n_coords.max(tensors.len());
    let mut coords = Vec::with_capacity(n_total);
    let mut per_group: BTreeMap<String, f64> = BTreeMap::new();
    for c in 0..n_total {
        let k = c % tensors.len();
        let (name, group, is_adapter, analytic) = &tensors[k];
        let index = rng.random_range(0..analytic.len());
        let mut eval_at = |delta: f64| -> Result<f64> {
            let slot: &mut f64 = if *is_adapter {
                let set = a.as_mut().expect("adapter tensor implies adapters");
                let mut named = set.named_mut();
                let pos = named
                    .iter()
                    .position(|(n, ..)| n == name)
                    .expect("tensor name");
                &mut named.swap_remove(pos).3[index]
            } else {
                let mut named = p.weights.named_mut();
                let pos = named
                    .iter()
                    .position(|(n, ..)| n == name)
                    .expect("tensor name");
                &mut named.swap_remove(pos).3[index]
            };
            let orig = *slot;
            *slot = orig + delta;
            let l = example_loss(&p, a.as_ref(), example, mode);
            restore(&mut p, a.as_mut(), name, *is_adapter, index, orig);
            l
        };
        let (lp1, lm1) = (eval_at(epsilon)?, eval_at(-epsilon)?);
        let (lp2, lm2) = (eval_at(2.0 * epsilon)?, eval_at(-2.0 * epsilon)?);
        let numeric = if lp1 == lm1 && lp2 == lm2 {
            0.0
        } else {
            (8.0 * (lp1 - lm1) - (lp2 - lm2)) / (12.0 * epsilon)
        };
        let an = analytic[index];
        let rel = rel_error(an, numeric);
        let worst = per_group.entry(group.clone()).or_insert(0.0);
        *worst = worst.max(rel);
        coords.push(CoordCheck {
            tensor: name.clone(),
            group: group.clone(),
            index,
            analytic: an,
            numeric,
            rel_error: rel,
        });
    }
    let max_rel_error = coords.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_group,
        coords,
    })
}

fn restore(
    p: &mut ModelParams<f64>,
    a: Option<&mut AdapterSet<f64>>,
    name: &str,
    is_adapter: bool,
    index: usize,
    value: f64,
) {
    let mut named = if is_adapter {
        a.expect("adapters").named_mut()
    } else {
        p.weights.named_mut()
    };
    let pos = named
        .iter()
        .position(|(n, ..)| n == name)
        .expect("tensor name");
    named.swap_remove(pos).3[index] = value;
}

use ndarray::linalg::general_mat_mul;
use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};

use super::params::{AdapterSet, ModelParams, Weights};
use super::{AttentionMaskMode, Real};
use crate::error::{NepError, Result};
use crate::event_model::{TokenId, PAD};
use crate::serializer::TrainingInstance;

const LN_EPS: f64 = 1e-5;

/// Token ids plus `(position, target)` pairs: logits at `position` are scored
/// against `target`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub ids: Vec<TokenId>,
    pub targets: Vec<(usize, TokenId)>,
}

/// Next-token example from an instruction/response pair: the model reads all
/// tokens but the last, and each response token is predicted from the
/// position before it.
pub fn nep_targets(inst: &TrainingInstance) -> Example {
    let tokens = inst.tokens();
    let ctx = inst.context_tokens.len();
    Example {
        ids: tokens[..tokens.len() - 1].to_vec(),
        targets: (ctx..tokens.len()).map(|q| (q - 1, tokens[q])).collect(),
    }
}

pub struct ForwardOutput<T> {
    /// `[len, vocab]`
    pub logits: Array2<T>,
    /// Final-layer hidden states after the closing layer norm, `[len, d_model]`.
    pub hidden: Array2<T>,
    /// `attention[layer][head]` is `[len, len]`; row `i` is the distribution of
    /// query `i` over keys.
    pub attention: Vec<Vec<Array2<T>>>,
}

struct LnCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

struct LayerCache<T> {
    ln1: LnCache<T>,
    a: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    low_q: Option<Array2<T>>,
    low_v: Option<Array2<T>>,
    /// `probs[segment][head]`
    probs: Vec<Vec<Array2<T>>>,
    o: Array2<T>,
    ln2: LnCache<T>,
    c: Array2<T>,
    u: Array2<T>,
    /// `tanh` inside the GELU, reused by the backward pass.
    t: Array2<T>,
    g: Array2<T>,
}

pub(crate) struct Cache<T> {
    ids: Vec<TokenId>,
    /// Row ranges of the packed sequences.
    segments: Vec<Range<usize>>,
    layers: Vec<LayerCache<T>>,
    lnf: LnCache<T>,
    /// Final hidden states.
    pub(crate) f: Array2<T>,
}

fn layer_norm<T: Real>(x: &Array2<T>, g: &Array1<T>, b: &Array1<T>) -> (Array2<T>, LnCache<T>) {
    let (n, d) = x.dim();
    let dn = T::c(d as f64);
    let eps = T::c(LN_EPS);
    let mut xhat = Array2::from_elem((n, d), T::zero());
    let mut rstd = Array1::from_elem(n, T::zero());
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let r = T::one() / (var + eps).sqrt();
        rstd[i] = r;
        xhat.row_mut(i)
            .iter_mut()
            .zip(row)
            .for_each(|(h, &v)| *h = (v - mean) * r);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

fn ln_backward<T: Real>(
    dy: &Array2<T>,
    cache: &LnCache<T>,
    g: &Array1<T>,
    grads: Option<(&mut Array1<T>, &mut Array1<T>)>,
) -> Array2<T> {
    let (n, d) = dy.dim();
    let dn = T::c(d as f64);
    if let Some((dg, db)) = grads {
        *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
        *db += &dy.sum_axis(Axis(0));
    }
    let dxhat = dy * g;
    let mut dx = Array2::from_elem((n, d), T::zero());
    for i in 0..n {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let m1 = dh.sum() / dn;
        let m2 = dh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / dn;
        let r = cache.rstd[i];
        dx.row_mut(i)
            .iter_mut()
            .zip(dh.iter().zip(xh))
            .for_each(|(o, (&a, &b))| *o = r * (a - m1 - b * m2));
    }
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// `tanh(k (u + c u^3))`, through `exp`, which is much cheaper than libm's `tanh`.
fn gelu_tanh<T: Real>(u: T) -> T {
    let z = T::c(2.0 * GELU_K) * (u + T::c(GELU_C) * u * u * u);
    T::one() - T::c(2.0) / (z.exp() + T::one())
}

fn gelu<T: Real>(u: T, t: T) -> T {
    T::c(0.5) * u * (T::one() + t)
}

fn gelu_grad<T: Real>(u: T, t: T) -> T {
    let k = T::c(GELU_K);
    let c = T::c(GELU_C);
    T::c(0.5) * (T::one() + t)
        + T::c(0.5) * u * (T::one() - t * t) * k * (T::one() + T::c(3.0) * c * u * u)
}

fn validate_ids<T: Real>(params: &ModelParams<T>, ids: &[TokenId]) -> Result<()> {
    let cfg = &params.config;
    if ids.is_empty() {
        return Err(NepError::Validation("empty input".into()));
    }
    if ids.len() > cfg.max_tokens {
        return Err(NepError::Overlength {
            len: ids.len(),
            max: cfg.max_tokens,
        });
    }
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(NepError::TokenOutOfRange {
            id,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

fn adapter_check<T: Real>(params: &ModelParams<T>, adapters: Option<&AdapterSet<T>>) -> Result<()> {
    match adapters {
        Some(a) => a.check_shapes(&params.config),
        None => Ok(()),
    }
}

pub(crate) fn run<T: Real>(
    params: &ModelParams<T>,
    adapters: Option<&AdapterSet<T>>,
    ids: &[TokenId],
    mode: AttentionMaskMode,
) -> Result<Cache<T>> {
    run_packed(params, adapters, &[ids], mode)
}

/// Runs several sequences as one stacked matrix. Attention never crosses a
/// sequence boundary and positions restart at 0 in each sequence, so every
/// row equals what a separate run of its own sequence would give.
pub(crate) fn run_packed<T: Real>(
    params: &ModelParams<T>,
    adapters: Option<&AdapterSet<T>>,
    seqs: &[&[TokenId]],
    mode: AttentionMaskMode,
) -> Result<Cache<T>> {
    for ids in seqs {
        validate_ids(params, ids)?;
    }
    adapter_check(params, adapters)?;
    let cfg = &params.config;
    let w = &params.weights;
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = T::c(1.0 / (dh as f64).sqrt());

    let mut ids = Vec::with_capacity(seqs.iter().map(|s| s.len()).sum());
    let mut segments = Vec::with_capacity(seqs.len());
    for s in seqs {
        segments.push(ids.len()..ids.len() + s.len());
        ids.extend_from_slice(s);
    }
    let n = ids.len();

    let mut x = Array2::from_elem((n, d), T::zero());
    for seg in &segments {
        for (k, i) in seg.clone().enumerate() {
            let mut row = x.row_mut(i);
            row += &w.tok.row(ids[i] as usize);
            row += &w.pos.row(k);
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (li, lw) in w.layers.iter().enumerate() {
        let (a, ln1) = layer_norm(&x, &lw.ln1_g, &lw.ln1_b);
        let mut q = a.dot(&lw.wq) + &lw.bq;
        let k = a.dot(&lw.wk) + &lw.bk;
        let mut v = a.dot(&lw.wv) + &lw.bv;
        let (mut low_q, mut low_v) = (None, None);
        if let Some(ad) = adapters.filter(|ad| ad.rank > 0) {
            let la = &ad.layers[li];
            let s = ad.scaling();
            let lq = a.dot(&la.aq);
            general_mat_mul(s, &lq, &la.bq, T::one(), &mut q);
            let lv = a.dot(&la.av);
            general_mat_mul(s, &lv, &la.bv, T::one(), &mut v);
            low_q = Some(lq);
            low_v = Some(lv);
        }

        let mut o = Array2::from_elem((n, d), T::zero());
        let mut probs = Vec::with_capacity(segments.len());
        for seg in &segments {
            let seg_ids = &ids[seg.clone()];
            let len = seg.len();
            let allowed = |i: usize, j: usize| -> bool {
                seg_ids[j] != PAD && (mode == AttentionMaskMode::BidirectionalMlm || j <= i)
            };
            let mut seg_probs = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let cols = s![seg.clone(), h * dh..(h + 1) * dh];
                let qh = q.slice(cols);
                let kh = k.slice(cols);
                let vh = v.slice(cols);
                let mut p = qh.dot(&kh.t());
                for i in 0..len {
                    let mut row = p.row_mut(i);
                    let mut max = None::<T>;
                    for j in 0..len {
                        if allowed(i, j) {
                            let sij = row[j] * scale;
                            row[j] = sij;
                            max = Some(match max {
                                Some(m) if m >= sij => m,
                                _ => sij,
                            });
                        }
                    }
                    let Some(max) = max else {
                        row.fill(T::zero());
                        continue;
                    };
                    let mut z = T::zero();
                    for j in 0..len {
                        if allowed(i, j) {
                            let e = (row[j] - max).exp();
                            row[j] = e;
                            z += e;
                        } else {
                            row[j] = T::zero();
                        }
                    }
                    row.mapv_inplace(|e| e / z);
                }
                o.slice_mut(cols).assign(&p.dot(&vh));
                seg_probs.push(p);
            }
            probs.push(seg_probs);
        }
        x = x + o.dot(&lw.wo) + &lw.bo;

        let (c, ln2) = layer_norm(&x, &lw.ln2_g, &lw.ln2_b);
        let u = c.dot(&lw.w1) + &lw.b1;
        let t = u.mapv(gelu_tanh);
        let g = Zip::from(&u).and(&t).map_collect(|&u, &t| gelu(u, t));
        x = x + g.dot(&lw.w2) + &lw.b2;

        layers.push(LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            low_q,
            low_v,
            probs,
            o,
            ln2,
            c,
            u,
            t,
            g,
        });
    }
    let (f, lnf) = layer_norm(&x, &w.lnf_g, &w.lnf_b);
    Ok(Cache {
        ids,
        segments,
        layers,
        lnf,
        f,
    })
}

/// Full forward pass: logits at every position, final hidden states and all
/// attention maps.
pub fn forward<T: Real>(
    params: &ModelParams<T>,
    adapters: Option<&AdapterSet<T>>,
    ids: &[TokenId],
    mode: AttentionMaskMode,
) -> Result<ForwardOutput<T>> {
    let cache = run(params, adapters, ids, mode)?;
    let logits = cache.f.dot(&params.weights.tok.t());
    let attention = cache
        .layers
        .into_iter()
        .map(|l| l.probs.into_iter().next().expect("one segment"))
        .collect();
    Ok(ForwardOutput {
        logits,
        hidden: cache.f,
        attention,
    })
}

/// `-log softmax(logits)[target]` and its gradient with respect to the logits.
pub fn cross_entropy<T: Real>(logits: ArrayView1<T>, target: TokenId) -> (f64, Array1<T>) {
    let max = logits.iter().copied().fold(logits[0], |m, v| m.max(v));
    let mut probs = logits.mapv(|v| (v - max).exp());
    let z = probs.sum();
    probs /= z;
    let t = target as usize;
    let lse = max + z.ln();
    let loss = (lse - logits[t]).as_f64();
    probs[t] -= T::one();
    (loss, probs)
}

/// Mean negative log-likelihood over masked positions; `logits[i]` is scored
/// against `targets[i]`.
pub fn loss<T: Real>(logits: &Array2<T>, targets: &[TokenId], loss_mask: &[bool]) -> Result<f64> {
    let n = logits.nrows();
    if targets.len() != n || loss_mask.len() != n {
        return Err(NepError::Validation(format!(
            "shape mismatch: {n} logit rows, {} targets, {} mask entries",
            targets.len(),
            loss_mask.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in (0..n).filter(|&i| loss_mask[i]) {
        if targets[i] as usize >= logits.ncols() {
            return Err(NepError::TokenOutOfRange {
                id: targets[i],
                vocab: logits.ncols(),
            });
        }
        total += cross_entropy(logits.row(i), targets[i]).0;
        count += 1;
    }
    if count == 0 {
        return Err(NepError::EmptyLossMask);
    }
    Ok(total / count as f64)
}

/// Gradients for base weights (when requested) and adapters (when present).
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub weights: Option<Weights<T>>,
    pub adapters: Option<AdapterSet<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn add_assign(&mut self, other: &Self) {
        if let (Some(a), Some(b)) = (self.weights.as_mut(), other.weights.as_ref()) {
            a.add_assign(b);
        }
        if let (Some(a), Some(b)) = (self.adapters.as_mut(), other.adapters.as_ref()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, k: T) {
        if let Some(w) = self.weights.as_mut() {
            w.scale(k);
        }
        if let Some(a) = self.adapters.as_mut() {
            a.scale(k);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        let mut s = 0.0;
        if let Some(w) = &self.weights {
            for (_, _, _, d) in w.named() {
                s += d.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
            }
        }
        if let Some(a) = &self.adapters {
            for (_, _, _, d) in a.named() {
                s += d.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
            }
        }
        s
    }
}

fn add_rows<T: Real>(acc: &mut Array1<T>, m: &Array2<T>) {
    *acc += &m.sum_axis(Axis(0));
}

fn backward<T: Real>(
    params: &ModelParams<T>,
    adapters: Option<&AdapterSet<T>>,
    cache: &Cache<T>,
    dlogits: &[(usize, Array1<T>)],
    want_base: bool,
) -> Gradients<T> {
    let cfg = &params.config;
    let w = &params.weights;
    let n = cache.ids.len();
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = T::c(1.0 / (dh as f64).sqrt());
    let mut gw = want_base.then(|| Weights::zeros(cfg));
    let active = adapters.filter(|a| a.rank > 0);
    let mut ga = adapters.map(AdapterSet::zeros_like);

    // Tied output projection.
    let mut df = Array2::from_elem((n, d), T::zero());
    for (p, dl) in dlogits {
        let mut row = df.row_mut(*p);
        row += &dl.dot(&w.tok);
        if let Some(gw) = gw.as_mut() {
            let f = cache.f.row(*p);
            for (v, &coef) in dl.iter().enumerate() {
                gw.tok.row_mut(v).scaled_add(coef, &f);
            }
        }
    }
    let mut dx = ln_backward(
        &df,
        &cache.lnf,
        &w.lnf_g,
        gw.as_mut().map(|g| (&mut g.lnf_g, &mut g.lnf_b)),
    );

    for li in (0..cfg.n_layers).rev() {
        let lc = &cache.layers[li];
        let lw = &w.layers[li];
        let mut lg = gw.as_mut().map(|g| &mut g.layers[li]);

        // MLP block.
        if let Some(lg) = lg.as_deref_mut() {
            general_mat_mul(T::one(), &lc.g.t(), &dx, T::one(), &mut lg.w2);
            add_rows(&mut lg.b2, &dx);
        }
        let mut du = dx.dot(&lw.w2.t());
        Zip::from(&mut du)
            .and(&lc.u)
            .and(&lc.t)
            .for_each(|g, &u, &t| *g *= gelu_grad(u, t));
        if let Some(lg) = lg.as_deref_mut() {
            general_mat_mul(T::one(), &lc.c.t(), &du, T::one(), &mut lg.w1);
            add_rows(&mut lg.b1, &du);
        }
        let dc = du.dot(&lw.w1.t());
        dx += &ln_backward(
            &dc,
            &lc.ln2,
            &lw.ln2_g,
            lg.as_deref_mut().map(|g| (&mut g.ln2_g, &mut g.ln2_b)),
        );

        // Attention block.
        if let Some(lg) = lg.as_deref_mut() {
            general_mat_mul(T::one(), &lc.o.t(), &dx, T::one(), &mut lg.wo);
            add_rows(&mut lg.bo, &dx);
        }
        let d_o = dx.dot(&lw.wo.t());
        let mut dq = Array2::from_elem((n, d), T::zero());
        let mut dk = Array2::from_elem((n, d), T::zero());
        let mut dv = Array2::from_elem((n, d), T::zero());
        for (seg, seg_probs) in cache.segments.iter().zip(&lc.probs) {
            for (h, p) in seg_probs.iter().enumerate() {
                let cols = s![seg.clone(), h * dh..(h + 1) * dh];
                let doh = d_o.slice(cols);
                let mut ds = doh.dot(&lc.v.slice(cols).t());
                dv.slice_mut(cols).assign(&p.t().dot(&doh));
                for i in 0..seg.len() {
                    let pr = p.row(i);
                    let mut dr = ds.row_mut(i);
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    dr.iter_mut()
                        .zip(pr)
                        .for_each(|(g, &pij)| *g = pij * (*g - dot) * scale);
                }
                dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
            }
        }
        let mut da = dq.dot(&lw.wq.t());
        general_mat_mul(T::one(), &dk, &lw.wk.t(), T::one(), &mut da);
        general_mat_mul(T::one(), &dv, &lw.wv.t(), T::one(), &mut da);
        if let Some(lg) = lg.as_deref_mut() {
            general_mat_mul(T::one(), &lc.a.t(), &dq, T::one(), &mut lg.wq);
            general_mat_mul(T::one(), &lc.a.t(), &dk, T::one(), &mut lg.wk);
            general_mat_mul(T::one(), &lc.a.t(), &dv, T::one(), &mut lg.wv);
            add_rows(&mut lg.bq, &dq);
            add_rows(&mut lg.bk, &dk);
            add_rows(&mut lg.bv, &dv);
        }
        if let (Some(ad), Some(ga)) = (active, ga.as_mut()) {
            let s = ad.scaling();
            let la = &ad.layers[li];
            let gl = &mut ga.layers[li];
            for (low, dproj, a_mat, b_mat, ga_mat, gb_mat) in [
                (
                    lc.low_q.as_ref(),
                    &dq,
                    &la.aq,
                    &la.bq,
                    &mut gl.aq,
                    &mut gl.bq,
                ),
                (
                    lc.low_v.as_ref(),
                    &dv,
                    &la.av,
                    &la.bv,
                    &mut gl.av,
                    &mut gl.bv,
                ),
            ] {
                let low = low.expect("cached low-rank activations");
                general_mat_mul(s, &low.t(), dproj, T::one(), gb_mat);
                let dlow = dproj.dot(&b_mat.t()) * s;
                general_mat_mul(T::one(), &lc.a.t(), &dlow, T::one(), ga_mat);
                general_mat_mul(T::one(), &dlow, &a_mat.t(), T::one(), &mut da);
            }
        }
        dx += &ln_backward(
            &da,
            &lc.ln1,
            &lw.ln1_g,
            lg.map(|g| (&mut g.ln1_g, &mut g.ln1_b)),
        );
    }

    if let Some(gw) = gw.as_mut() {
        for seg in &cache.segments {
            for (k, i) in seg.clone().enumerate() {
                let row = dx.row(i);
                let mut t = gw.tok.row_mut(cache.ids[i] as usize);
                t += &row;
                let mut p = gw.pos.row_mut(k);
                p += &row;
            }
        }
    }
    Gradients {
        weights: gw,
        adapters: ga,
    }
}

/// Mean cross-entropy over the example's targets and its gradient. Base
/// weight gradients are skipped unless `want_base`; adapter gradients are
/// produced whenever adapters are supplied.
pub fn loss_and_grad<T: Real>(
    params: &ModelParams<T>,
    adapters: Option<&AdapterSet<T>>,
    example: &Example,
    mode: AttentionMaskMode,
    want_base: bool,
) -> Result<(f64, Gradients<T>)> {
    batch_loss_and_grad(
        params,
        adapters,
        std::slice::from_ref(example),
        mode,
        want_base,
    )
}

/// Sums of the per-example mean losses and of their gradients, computed in one
/// packed pass.
pub fn batch_loss_and_grad<T: Real>(
    params: &ModelParams<T>,
    adapters: Option<&AdapterSet<T>>,
    examples: &[Example],
    mode: AttentionMaskMode,
    want_base: bool,
) -> Result<(f64, Gradients<T>)> {
    if examples.is_empty() || examples.iter().any(|e| e.targets.is_empty()) {
        return Err(NepError::EmptyLossMask);
    }
    let seqs: Vec<&[TokenId]> = examples.iter().map(|e| e.ids.as_slice()).collect();
    let cache = run_packed(params, adapters, &seqs, mode)?;
    let mut total = 0.0;
    let mut dlogits = Vec::new();
    for (example, seg) in examples.iter().zip(&cache.segments) {
        let inv = T::c(1.0 / example.targets.len() as f64);
        let mut sum = 0.0;
        for &(p, t) in &example.targets {
            if t as usize >= params.config.vocab_size {
                return Err(NepError::TokenOutOfRange {
                    id: t,
                    vocab: params.config.vocab_size,
                });
            }
            if p >= seg.len() {
                return Err(NepError::Validation(format!(
                    "target position {p} outside input of {}",
                    seg.len()
                )));
            }
            let row = seg.start + p;
            let logits = params.weights.tok.dot(&cache.f.row(row));
            let (l, g) = cross_entropy(logits.view(), t);
            sum += l;
            dlogits.push((row, g * inv));
        }
        total += sum / example.targets.len() as f64;
    }
    let grads = backward(params, adapters, &cache, &dlogits, want_base);
    Ok((total, grads))
}

/// Per-example mean cross-entropies from one packed forward pass.
pub fn batch_example_losses<T: Real>(
    params: &ModelParams<T>,
    adapters: Option<&AdapterSet<T>>,
    examples: &[Example],
    mode: AttentionMaskMode,
) -> Result<Vec<f64>> {
    if examples.iter().any(|e| e.targets.is_empty()) {
        return Err(NepError::EmptyLossMask);
    }
    let seqs: Vec<&[TokenId]> = examples.iter().map(|e| e.ids.as_slice()).collect();
    let cache = run_packed(params, adapters, &seqs, mode)?;
    examples
        .iter()
        .zip(&cache.segments)
        .map(|(e, seg)| {
            let mut total = 0.0;
            for &(p, t) in &e.targets {
                if p >= seg.len() || t as usize >= params.config.vocab_size {
                    return Err(NepError::Validation(format!(
                        "target ({p}, {t}) out of range"
                    )));
                }
                let logits = params.weights.tok.dot(&cache.f.row(seg.start + p));
                total += cross_entropy(logits.view(), t).0;
            }
            Ok(total / e.targets.len() as f64)
        })
        .collect()
}

/// Mean cross-entropy over the example's targets, without gradients.
pub fn example_loss<T: Real>(
    params: &ModelParams<T>,
    adapters: Option<&AdapterSet<T>>,
    example: &Example,
    mode: AttentionMaskMode,
) -> Result<f64> {
    if example.targets.is_empty() {
        return Err(NepError::EmptyLossMask);
    }
    let cache = run(params, adapters, &example.ids, mode)?;
    let mut total = 0.0;
    for &(p, t) in &example.targets {
        let logits = params.weights.tok.dot(&cache.f.row(p));
        total += cross_entropy(logits.view(), t).0;
    }
    Ok(total / example.targets.len() as f64)
}

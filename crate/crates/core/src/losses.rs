//! Training objectives: cross-modal NCE, neighbouring-clip NCE, uniformity,
//! and a max-of-hinges hard-mining baseline.
//!
//! Each term is a graph op whose gradient is computed alongside its value.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{CustomOp, Graph, Tensor, Var};

/// Loss terms that can be switched on or off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Cml,
    Nei,
    Uni,
    HardMining,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Softmax temperature shared by the two NCE terms.
    pub tau: f64,
    pub lambda_cml: f64,
    pub lambda_nei: f64,
    pub lambda_uni: f64,
    /// Neighbour negatives per pair.
    pub k_neg: usize,
    pub hard_mining_margin: f64,
    pub terms: BTreeSet<Term>,
    /// Drop in-batch negatives whose caption text equals the positive's.
    pub exclude_duplicate_captions: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambda_cml: 1.0,
            lambda_nei: 1.0,
            lambda_uni: 1.0,
            k_neg: 1,
            hard_mining_margin: 0.2,
            terms: [Term::Cml, Term::Nei, Term::Uni].into(),
            exclude_duplicate_captions: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        for (name, v) in [
            ("lambda_cml", self.lambda_cml),
            ("lambda_nei", self.lambda_nei),
            ("lambda_uni", self.lambda_uni),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        if self.terms.contains(&Term::Cml) && self.terms.contains(&Term::HardMining) {
            return Err(Error::Config("cml and hard_mining are alternative cross-modal terms".into()));
        }
        if self.terms.contains(&Term::Nei) && self.k_neg == 0 {
            return Err(Error::Config("nei term needs k_neg >= 1".into()));
        }
        Ok(())
    }

    pub fn has(&self, t: Term) -> bool {
        self.terms.contains(&t)
    }
}

/// Scalar values of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cml: f64,
    pub nei: f64,
    pub uni: f64,
    /// Pairs in the cross-modal term.
    pub cml_pairs: usize,
    /// Pairs that had at least one neighbour negative.
    pub nei_pairs: usize,
    /// Embeddings in the uniformity term.
    pub uni_points: usize,
}

impl LossBreakdown {
    /// Recomputes the weighted total in `T` with the same evaluation order as
    /// [`loss_total`].
    pub fn weighted_sum<T: Scalar>(&self, cfg: &LossConfig) -> f64 {
        let w = |l: f64, v: f64| T::from_f64_lossy(l) * T::from_f64_lossy(v);
        let t = (w(cfg.lambda_cml, self.cml) + w(cfg.lambda_nei, self.nei)) + w(cfg.lambda_uni, self.uni);
        t.to_f64_lossy()
    }
}

/// Precomputed gradient of a scalar-valued op, scaled by the upstream gradient.
struct FixedGrad<T> {
    name: &'static str,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> CustomOp<T> for FixedGrad<T> {
    fn name(&self) -> &'static str {
        self.name
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad_out: &[T]) -> Vec<Option<Vec<T>>> {
        let go = grad_out[0];
        self.grads
            .iter()
            .map(|g| g.as_ref().map(|g| g.iter().map(|&x| x * go).collect()))
            .collect()
    }
}

fn check_unit_rows<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    for r in 0..t.rows() {
        let n = t.row(r).iter().map(|&x| x * x).sum::<T>().sqrt().to_f64_lossy();
        if (n - 1.0).abs() > 1e-4 {
            return Err(Error::Contract(format!("{what} row {r} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// `log Σ exp(x_i)` over the given terms, max-shifted.
fn log_sum_exp<T: Scalar>(terms: impl Iterator<Item = T> + Clone) -> T {
    let mx = terms.clone().fold(T::neg_infinity(), T::max);
    if mx == T::neg_infinity() {
        return mx;
    }
    mx + terms.map(|x| (x - mx).exp()).sum::<T>().ln()
}

/// Cross-modal NCE over a `B × B` similarity matrix (rows clips, columns
/// captions). Pair `i`'s negatives are row `i` and column `i` off the
/// diagonal, minus any `excluded[i*B+k]` entries. Returns the mean loss and
/// its gradient with respect to `sims`.
pub fn cml_from_sims<T: Scalar>(sims: &[T], b: usize, tau: T, excluded: Option<&[bool]>) -> (T, Vec<T>) {
    let allowed = |i: usize, k: usize| i != k && !excluded.is_some_and(|e| e[i * b + k]);
    let z = |i: usize, k: usize| sims[i * b + k] / tau;
    let mut grad = vec![T::zero(); b * b];
    let mut total = T::zero();
    let bt = T::from_usize(b).expect("batch size");
    for i in 0..b {
        let terms = std::iter::once(z(i, i))
            .chain((0..b).filter(move |&k| allowed(i, k)).map(move |k| z(i, k)))
            .chain((0..b).filter(move |&k| allowed(k, i)).map(move |k| z(k, i)));
        let lse = log_sum_exp(terms);
        total += lse - z(i, i);
        let w = T::one() / (bt * tau);
        grad[i * b + i] += w * ((z(i, i) - lse).exp() - T::one());
        for k in 0..b {
            if allowed(i, k) {
                grad[i * b + k] += w * (z(i, k) - lse).exp();
            }
            if allowed(k, i) {
                grad[k * b + i] += w * (z(k, i) - lse).exp();
            }
        }
    }
    (total / bt, grad)
}

/// Neighbouring NCE. `neg_owner[n]` names the pair whose anchor negative `n`
/// competes with. Pairs without negatives contribute nothing; the loss is the
/// mean over pairs that have at least one. Returns `(loss, d/dpos, d/dneg,
/// contributing pairs)`.
pub fn nei_from_sims<T: Scalar>(
    pos: &[T],
    neg: &[T],
    neg_owner: &[usize],
    tau: T,
) -> (T, Vec<T>, Vec<T>, usize) {
    let b = pos.len();
    let mut per_pair: Vec<Vec<usize>> = vec![Vec::new(); b];
    for (n, &o) in neg_owner.iter().enumerate() {
        per_pair[o].push(n);
    }
    let count = per_pair.iter().filter(|v| !v.is_empty()).count();
    let mut gp = vec![T::zero(); b];
    let mut gn = vec![T::zero(); neg.len()];
    if count == 0 {
        return (T::zero(), gp, gn, 0);
    }
    let ct = T::from_usize(count).expect("count");
    let mut total = T::zero();
    for (i, negs) in per_pair.iter().enumerate() {
        if negs.is_empty() {
            continue;
        }
        let zp = pos[i] / tau;
        let terms = std::iter::once(zp).chain(negs.iter().map(|&n| neg[n] / tau));
        let lse = log_sum_exp(terms);
        total += lse - zp;
        let w = T::one() / (ct * tau);
        gp[i] = w * ((zp - lse).exp() - T::one());
        for &n in negs {
            gn[n] = w * (neg[n] / tau - lse).exp();
        }
    }
    (total / ct, gp, gn, count)
}

/// Log of the mean of `exp(-2‖u-v‖²)` over ordered distinct pairs of rows,
/// with its gradient.
pub fn uniformity_from_points<T: Scalar>(u: &[T], n: usize, d: usize) -> Result<(T, Vec<T>)> {
    if n < 2 {
        return Err(Error::Degenerate(format!("uniformity needs at least 2 points, got {n}")));
    }
    let two = lit::<T>(2.0);
    let mut z = vec![T::neg_infinity(); n * n];
    for a in 0..n {
        for b in 0..n {
            if a != b {
                let d2: T = (0..d).map(|c| (u[a * d + c] - u[b * d + c]).powi(2)).sum();
                z[a * n + b] = -two * d2;
            }
        }
    }
    let lse = log_sum_exp(z.iter().copied().filter(|x| x.is_finite()));
    let pairs = T::from_usize(n * (n - 1)).expect("pairs");
    let mut grad = vec![T::zero(); n * d];
    let k = lit::<T>(8.0);
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            // Ordered pairs (a,b) and (b,a) both carry this weight.
            let w = (z[a * n + b] - lse).exp();
            for c in 0..d {
                grad[a * d + c] -= k * w * (u[a * d + c] - u[b * d + c]);
            }
        }
    }
    Ok((lse - pairs.ln(), grad))
}

/// Max-of-hinges triplet loss over a `B × B` similarity matrix.
pub fn hard_mining_from_sims<T: Scalar>(
    sims: &[T],
    b: usize,
    margin: T,
    excluded: Option<&[bool]>,
) -> (T, Vec<T>) {
    let allowed = |i: usize, k: usize| i != k && !excluded.is_some_and(|e| e[i * b + k]);
    let mut grad = vec![T::zero(); b * b];
    let mut total = T::zero();
    let bt = T::from_usize(b).expect("batch size");
    for i in 0..b {
        let pos = sims[i * b + i];
        let hardest = |idx: &dyn Fn(usize) -> usize, ok: &dyn Fn(usize) -> bool| {
            let mut best: Option<(usize, T)> = None;
            for k in (0..b).filter(|&k| ok(k)) {
                let v = margin + sims[idx(k)] - pos;
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((idx(k), v));
                }
            }
            best.filter(|&(_, v)| v > T::zero())
        };
        let row = hardest(&|k| i * b + k, &|k| allowed(i, k));
        let col = hardest(&|k| k * b + i, &|k| allowed(k, i));
        let mut pair = T::zero();
        for (at, v) in [row, col].into_iter().flatten() {
            pair += v;
            grad[at] += T::one() / bt;
            grad[i * b + i] -= T::one() / bt;
        }
        total += pair;
    }
    (total / bt, grad)
}

fn sims_matrix<T: Scalar>(g: &mut Graph<T>, clips: Var, texts: Var) -> Result<Var> {
    let tt = g.transpose(texts)?;
    g.matmul(clips, tt)
}

/// Cross-modal NCE between matched unit rows of `clips` and `texts`.
pub fn loss_cml<T: Scalar>(
    g: &mut Graph<T>,
    clips: Var,
    texts: Var,
    tau: T,
    excluded: Option<&[bool]>,
) -> Result<Var> {
    check_unit_rows(g.value(clips), "clip embedding")?;
    check_unit_rows(g.value(texts), "caption embedding")?;
    let s = sims_matrix(g, clips, texts)?;
    let b = g.value(s).rows();
    let (v, grad) = cml_from_sims(g.value(s).data(), b, tau, excluded);
    g.custom(&[s], Tensor::scalar(v), Box::new(FixedGrad { name: "cml", grads: vec![Some(grad)] }))
}

/// Hard-mining baseline between matched unit rows.
pub fn loss_hard_mining<T: Scalar>(
    g: &mut Graph<T>,
    clips: Var,
    texts: Var,
    margin: T,
    excluded: Option<&[bool]>,
) -> Result<Var> {
    check_unit_rows(g.value(clips), "clip embedding")?;
    check_unit_rows(g.value(texts), "caption embedding")?;
    let s = sims_matrix(g, clips, texts)?;
    let b = g.value(s).rows();
    let (v, grad) = hard_mining_from_sims(g.value(s).data(), b, margin, excluded);
    g.custom(
        &[s],
        Tensor::scalar(v),
        Box::new(FixedGrad { name: "hard_mining", grads: vec![Some(grad)] }),
    )
}

/// Embeddings of neighbour negatives and the pair each one belongs to.
#[derive(Clone, Debug)]
pub struct Negatives {
    pub embs: Var,
    pub owner: Vec<usize>,
}

/// Neighbouring NCE: each anchor row is pulled to its positive row and
/// pushed from its own negatives. Returns the loss and the number of
/// contributing pairs.
pub fn loss_nei<T: Scalar>(
    g: &mut Graph<T>,
    anchors: Var,
    positives: Var,
    negatives: Option<&Negatives>,
    tau: T,
) -> Result<(Var, usize)> {
    let prod = g.mul(anchors, positives)?;
    let pos = g.sum_rows(prod)?;
    let Some(negs) = negatives.filter(|n| !n.owner.is_empty()) else {
        let out = g.custom(&[pos], Tensor::scalar(T::zero()), Box::new(FixedGrad { name: "nei", grads: vec![None] }))?;
        return Ok((out, 0));
    };
    let b = g.value(pos).rows();
    if let Some(&o) = negs.owner.iter().find(|&&o| o >= b) {
        return Err(Error::Index { what: "negative owner", index: o, len: b });
    }
    let a = g.gather_rows(anchors, &negs.owner)?;
    let prod = g.mul(a, negs.embs)?;
    let neg = g.sum_rows(prod)?;
    let (v, gp, gn, count) = nei_from_sims(g.value(pos).data(), g.value(neg).data(), &negs.owner, tau);
    let out = g.custom(
        &[pos, neg],
        Tensor::scalar(v),
        Box::new(FixedGrad { name: "nei", grads: vec![Some(gp), Some(gn)] }),
    )?;
    Ok((out, count))
}

/// Uniformity over the rows of `u`.
pub fn loss_uniformity<T: Scalar>(g: &mut Graph<T>, u: Var) -> Result<Var> {
    let t = g.value(u);
    let (v, grad) = uniformity_from_points(t.data(), t.rows(), t.cols())?;
    g.custom(&[u], Tensor::scalar(v), Box::new(FixedGrad { name: "uniformity", grads: vec![Some(grad)] }))
}

/// Batch embeddings feeding [`loss_total`].
pub struct LossInputs<'a> {
    /// `B × d` clip-side embeddings of the batch pairs.
    pub clips: Var,
    /// `B × d` caption-side embeddings, row-matched to `clips`.
    pub texts: Var,
    /// Neighbour clip windows, negatives for each caption.
    pub clip_negatives: Option<Negatives>,
    /// Neighbour caption windows, negatives for each clip.
    pub text_negatives: Option<Negatives>,
    /// Row-major `B × B`; `true` removes that pair from the in-batch negatives.
    pub excluded: Option<&'a [bool]>,
}

/// Weighted objective. The total is always evaluated as
/// `((λ_cml·cml) + (λ_nei·nei)) + (λ_uni·uni)`; disabled terms are skipped
/// and reported as zero.
pub fn loss_total<T: Scalar>(
    g: &mut Graph<T>,
    inputs: &LossInputs<'_>,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let tau = T::from_f64_lossy(cfg.tau);
    let mut bd = LossBreakdown::default();
    let mut parts: Vec<Var> = Vec::new();
    let b = g.value(inputs.clips).rows();

    let cross = if cfg.has(Term::Cml) {
        Some(loss_cml(g, inputs.clips, inputs.texts, tau, inputs.excluded)?)
    } else if cfg.has(Term::HardMining) {
        let margin = T::from_f64_lossy(cfg.hard_mining_margin);
        Some(loss_hard_mining(g, inputs.clips, inputs.texts, margin, inputs.excluded)?)
    } else {
        None
    };
    if let Some(c) = cross {
        bd.cml = g.item(c).to_f64_lossy();
        bd.cml_pairs = b;
        parts.push(g.scale(c, T::from_f64_lossy(cfg.lambda_cml))?);
    }

    if cfg.has(Term::Nei) {
        let (clip_side, n1) = loss_nei(g, inputs.texts, inputs.clips, inputs.clip_negatives.as_ref(), tau)?;
        let nei = if let Some(negs) = inputs.text_negatives.as_ref() {
            let (text_side, n2) = loss_nei(g, inputs.clips, inputs.texts, Some(negs), tau)?;
            bd.nei_pairs = n1 + n2;
            g.add(clip_side, text_side)?
        } else {
            bd.nei_pairs = n1;
            clip_side
        };
        bd.nei = g.item(nei).to_f64_lossy();
        parts.push(g.scale(nei, T::from_f64_lossy(cfg.lambda_nei))?);
    }

    if cfg.has(Term::Uni) {
        let u = g.concat_rows(&[inputs.clips, inputs.texts])?;
        let uni = loss_uniformity(g, u)?;
        bd.uni = g.item(uni).to_f64_lossy();
        bd.uni_points = 2 * b;
        parts.push(g.scale(uni, T::from_f64_lossy(cfg.lambda_uni))?);
    }

    let total = match parts.split_first() {
        Some((&first, rest)) => {
            let mut acc = first;
            for &p in rest {
                acc = g.add(acc, p)?;
            }
            acc
        }
        None => return Err(Error::Config("no loss terms enabled".into())),
    };
    bd.total = g.item(total).to_f64_lossy();
    Ok((total, bd))
}

/// Row-major `B × B` mask of pairs sharing caption text.
pub fn duplicate_caption_mask(captions: &[&str]) -> Vec<bool> {
    let b = captions.len();
    let mut out = vec![false; b * b];
    for i in 0..b {
        for k in 0..b {
            out[i * b + k] = i != k && captions[i] == captions[k];
        }
    }
    out
}

//! Pairwise and proxy-anchored losses with exact (sub)gradients.
//!
//! Distances are Euclidean. Hinges use the zero branch at the kink and a pair
//! at exactly zero distance contributes no gradient through the distance.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    /// `(ι(d − β) + α)_+` with `ι = +1` for same-class pairs, `−1` otherwise.
    GeneralizedContrastive { alpha: f64, beta: f64 },
    /// Same class: `d`; different class: `(margin − d)_+`.
    ContrastiveC1 { margin: f64 },
    /// Same class: `(d − m⁺)_+`; different class: `(m⁻ − d)_+`.
    ContrastiveC2 { m_plus: f64, m_minus: f64 },
    /// `(d_ap − d_an + margin)_+` over all valid triples.
    Triplet { margin: f64 },
    /// Multi-similarity loss on inner-product similarities.
    MultiSimilarity { alpha: f64, beta: f64, lambda: f64 },
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec::GeneralizedContrastive {
            alpha: 0.0,
            beta: 0.5,
        }
    }
}

impl LossSpec {
    pub fn generalized_contrastive(alpha: f64, beta: f64) -> Result<Self> {
        Self::GeneralizedContrastive { alpha, beta }.validated()
    }

    pub fn contrastive_c1(margin: f64) -> Result<Self> {
        Self::ContrastiveC1 { margin }.validated()
    }

    pub fn contrastive_c2(m_plus: f64, m_minus: f64) -> Result<Self> {
        Self::ContrastiveC2 { m_plus, m_minus }.validated()
    }

    pub fn triplet(margin: f64) -> Result<Self> {
        Self::Triplet { margin }.validated()
    }

    pub fn multi_similarity(alpha: f64, beta: f64, lambda: f64) -> Result<Self> {
        Self::MultiSimilarity {
            alpha,
            beta,
            lambda,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("{}: {msg}", self.kind())));
        let params = self.params();
        if params.iter().any(|(_, v)| !v.is_finite()) {
            return bad("parameters must be finite");
        }
        match *self {
            LossSpec::GeneralizedContrastive { alpha, beta } => {
                if alpha < 0.0 {
                    return bad("alpha must be >= 0");
                }
                if beta <= 0.0 {
                    return bad("beta must be > 0");
                }
            }
            LossSpec::ContrastiveC1 { margin } => {
                if margin < 0.0 {
                    return bad("margin must be >= 0");
                }
            }
            LossSpec::ContrastiveC2 { m_plus, m_minus } => {
                if m_plus < 0.0 || m_minus <= m_plus {
                    return bad("need 0 <= m_plus < m_minus");
                }
            }
            LossSpec::Triplet { margin } => {
                if margin <= 0.0 {
                    return bad("margin must be > 0");
                }
            }
            LossSpec::MultiSimilarity { alpha, beta, .. } => {
                if alpha <= 0.0 || beta <= 0.0 {
                    return bad("alpha and beta must be > 0");
                }
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LossSpec::GeneralizedContrastive { .. } => "generalized_contrastive",
            LossSpec::ContrastiveC1 { .. } => "contrastive_c1",
            LossSpec::ContrastiveC2 { .. } => "contrastive_c2",
            LossSpec::Triplet { .. } => "triplet",
            LossSpec::MultiSimilarity { .. } => "multi_similarity",
        }
    }

    /// Named hyperparameters in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, f64)> {
        match *self {
            LossSpec::GeneralizedContrastive { alpha, beta } => {
                vec![("alpha", alpha), ("beta", beta)]
            }
            LossSpec::ContrastiveC1 { margin } => vec![("margin", margin)],
            LossSpec::ContrastiveC2 { m_plus, m_minus } => {
                vec![("m_plus", m_plus), ("m_minus", m_minus)]
            }
            LossSpec::Triplet { margin } => vec![("margin", margin)],
            LossSpec::MultiSimilarity {
                alpha,
                beta,
                lambda,
            } => vec![("alpha", alpha), ("beta", beta), ("lambda", lambda)],
        }
    }

    /// Build from a kind name and a parameter lookup.
    pub fn from_kind(kind: &str, get: impl Fn(&str) -> Option<f64>) -> Result<Self> {
        let need = |name: &str| {
            get(name).ok_or_else(|| Error::Config(format!("loss {kind} requires loss.{name}")))
        };
        match kind {
            "generalized_contrastive" => Self::generalized_contrastive(
                get("alpha").unwrap_or(0.0),
                get("beta").unwrap_or(0.5),
            ),
            "contrastive_c1" => Self::contrastive_c1(get("margin").unwrap_or(0.5)),
            "contrastive_c2" => Self::contrastive_c2(
                get("m_plus").unwrap_or(0.0),
                get("m_minus").unwrap_or(0.3841),
            ),
            "triplet" => Self::triplet(need("margin")?),
            "multi_similarity" => Self::multi_similarity(
                get("alpha").unwrap_or(2.0),
                get("beta").unwrap_or(40.0),
                get("lambda").unwrap_or(0.5),
            ),
            other => Err(Error::Config(format!("unknown loss kind {other:?}"))),
        }
    }

    /// Value and derivative in `d` of a distance-based pair term, `None` for
    /// losses that are not pair losses.
    fn pair_term(&self, d: f64, same_class: bool) -> Option<(f64, f64)> {
        let hinge = |u: f64, du: f64| if u > 0.0 { (u, du) } else { (0.0, 0.0) };
        Some(match *self {
            LossSpec::GeneralizedContrastive { alpha, beta } => {
                let iota = if same_class { 1.0 } else { -1.0 };
                hinge(iota * (d - beta) + alpha, iota)
            }
            LossSpec::ContrastiveC1 { margin } => {
                if same_class {
                    (d, if d > 0.0 { 1.0 } else { 0.0 })
                } else {
                    hinge(margin - d, -1.0)
                }
            }
            LossSpec::ContrastiveC2 { m_plus, m_minus } => {
                if same_class {
                    hinge(d - m_plus, 1.0)
                } else {
                    hinge(m_minus - d, -1.0)
                }
            }
            LossSpec::Triplet { .. } | LossSpec::MultiSimilarity { .. } => return None,
        })
    }
}

/// `(ι(d − β) + α)_+`.
pub fn generalized_contrastive(d: f64, same_class: bool, alpha: f64, beta: f64) -> f64 {
    let iota = if same_class { 1.0 } else { -1.0 };
    (iota * (d - beta) + alpha).max(0.0)
}

/// 1 when the pair violates its proximity constraint, i.e. `ι(d − β) ≥ 0`.
pub fn violation_indicator(d: f64, same_class: bool, beta: f64) -> u8 {
    let iota = if same_class { 1.0 } else { -1.0 };
    u8::from(iota * (d - beta) >= 0.0)
}

/// Anchor set paired against every batch sample (proxies or sample embeddings).
#[derive(Debug, Clone, Copy)]
pub struct Anchors<'a> {
    pub embeddings: &'a [f64],
    pub labels: &'a [usize],
}

/// Row-major embeddings of a batch with their labels.
#[derive(Debug, Clone, Copy)]
pub struct PairBatch<'a> {
    pub dim: usize,
    pub embeddings: &'a [f64],
    pub labels: &'a [usize],
    pub anchors: Option<Anchors<'a>>,
}

impl<'a> PairBatch<'a> {
    pub fn new(dim: usize, embeddings: &'a [f64], labels: &'a [usize]) -> Self {
        PairBatch {
            dim,
            embeddings,
            labels,
            anchors: None,
        }
    }

    pub fn with_anchors(mut self, embeddings: &'a [f64], labels: &'a [usize]) -> Self {
        self.anchors = Some(Anchors { embeddings, labels });
        self
    }

    fn check(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidArgument("embedding dim must be positive".into()));
        }
        if self.embeddings.len() != self.labels.len() * self.dim {
            return Err(Error::shape(
                "batch embeddings",
                self.labels.len() * self.dim,
                self.embeddings.len(),
            ));
        }
        if let Some(a) = &self.anchors {
            if a.embeddings.len() != a.labels.len() * self.dim {
                return Err(Error::shape(
                    "anchor embeddings",
                    a.labels.len() * self.dim,
                    a.embeddings.len(),
                ));
            }
        }
        Ok(())
    }

    fn row(&self, i: usize) -> &'a [f64] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Mean over contributing terms.
    pub loss: f64,
    /// Gradient with respect to each batch embedding, `B × D`.
    pub grad_embeddings: Vec<f64>,
    /// Gradient with respect to each anchor, `A × D` (empty without anchors).
    pub grad_anchors: Vec<f64>,
    /// Number of contributing terms (pairs, triples or MS anchors).
    pub terms: usize,
    /// Set when no term contributed; loss and gradients are then zero.
    pub empty: bool,
}

impl LossOutput {
    fn zeros(batch: &PairBatch<'_>) -> Self {
        LossOutput {
            loss: 0.0,
            grad_embeddings: vec![0.0; batch.embeddings.len()],
            grad_anchors: vec![0.0; batch.anchors.map_or(0, |a| a.embeddings.len())],
            terms: 0,
            empty: true,
        }
    }

    fn finish(mut self, total: f64, terms: usize) -> Self {
        if terms == 0 {
            self.grad_embeddings.iter_mut().for_each(|g| *g = 0.0);
            self.grad_anchors.iter_mut().for_each(|g| *g = 0.0);
            return self;
        }
        let inv = 1.0 / terms as f64;
        self.loss = total * inv;
        self.grad_embeddings.iter_mut().for_each(|g| *g *= inv);
        self.grad_anchors.iter_mut().for_each(|g| *g *= inv);
        self.terms = terms;
        self.empty = false;
        self
    }
}

/// Mean loss and exact gradients for `spec` on `batch`.
///
/// With anchors every batch sample is paired with every anchor; without,
/// pair losses use all unordered in-batch pairs and the triplet loss all
/// valid in-batch `(a, p, n)` triples.
pub fn batch_loss_and_grads(spec: &LossSpec, batch: &PairBatch<'_>) -> Result<LossOutput> {
    batch.check()?;
    match *spec {
        LossSpec::Triplet { margin } => Ok(triplet(batch, margin)),
        LossSpec::MultiSimilarity {
            alpha,
            beta,
            lambda,
        } => multi_similarity_loss(batch, alpha, beta, lambda),
        _ => Ok(pair_losses(spec, batch)),
    }
}

/// Add `coef · ∂d/∂u` to `gu` and `coef · ∂d/∂v` to `gv` where `d = |u − v|`.
fn push_dist_grad(u: &[f64], v: &[f64], d: f64, coef: f64, gu: &mut [f64], gv: &mut [f64]) {
    if d == 0.0 || coef == 0.0 {
        return;
    }
    let s = coef / d;
    for k in 0..u.len() {
        let g = s * (u[k] - v[k]);
        gu[k] += g;
        gv[k] -= g;
    }
}

fn pair_losses(spec: &LossSpec, batch: &PairBatch<'_>) -> LossOutput {
    let dim = batch.dim;
    let n = batch.labels.len();
    let mut out = LossOutput::zeros(batch);
    let mut total = 0.0;
    let mut terms = 0;
    match batch.anchors {
        Some(anchors) => {
            for i in 0..n {
                let u = batch.row(i);
                for (a, &la) in anchors.labels.iter().enumerate() {
                    let v = &anchors.embeddings[a * dim..(a + 1) * dim];
                    let d = crate::dist(u, v);
                    let (val, dd) = spec.pair_term(d, batch.labels[i] == la).unwrap();
                    total += val;
                    terms += 1;
                    push_dist_grad(
                        u,
                        v,
                        d,
                        dd,
                        &mut out.grad_embeddings[i * dim..(i + 1) * dim],
                        &mut out.grad_anchors[a * dim..(a + 1) * dim],
                    );
                }
            }
        }
        None => {
            for i in 0..n {
                for j in (i + 1)..n {
                    let (u, v) = (batch.row(i), batch.row(j));
                    let d = crate::dist(u, v);
                    let (val, dd) = spec.pair_term(d, batch.labels[i] == batch.labels[j]).unwrap();
                    total += val;
                    terms += 1;
                    let (head, tail) = out.grad_embeddings.split_at_mut(j * dim);
                    push_dist_grad(
                        u,
                        v,
                        d,
                        dd,
                        &mut head[i * dim..(i + 1) * dim],
                        &mut tail[..dim],
                    );
                }
            }
        }
    }
    out.finish(total, terms)
}

fn triplet(batch: &PairBatch<'_>, margin: f64) -> LossOutput {
    let dim = batch.dim;
    let n = batch.labels.len();
    let mut out = LossOutput::zeros(batch);
    let mut total = 0.0;
    let mut terms = 0;
    // Candidates for positives/negatives: anchors if present, else the batch.
    let (cand, cand_labels, use_anchors) = match batch.anchors {
        Some(a) => (a.embeddings, a.labels, true),
        None => (batch.embeddings, batch.labels, false),
    };
    let mut g_self = vec![0.0; dim];
    let mut g_p = vec![0.0; dim];
    let mut g_n = vec![0.0; dim];
    for a in 0..n {
        let u = batch.row(a);
        let la = batch.labels[a];
        for (p, &lp) in cand_labels.iter().enumerate() {
            if lp != la || (!use_anchors && p == a) {
                continue;
            }
            let vp = &cand[p * dim..(p + 1) * dim];
            let d_ap = crate::dist(u, vp);
            for (q, &lq) in cand_labels.iter().enumerate() {
                if lq == la {
                    continue;
                }
                let vn = &cand[q * dim..(q + 1) * dim];
                let d_an = crate::dist(u, vn);
                terms += 1;
                let h = d_ap - d_an + margin;
                if h <= 0.0 {
                    continue;
                }
                total += h;
                g_self.iter_mut().for_each(|g| *g = 0.0);
                g_p.iter_mut().for_each(|g| *g = 0.0);
                g_n.iter_mut().for_each(|g| *g = 0.0);
                push_dist_grad(u, vp, d_ap, 1.0, &mut g_self, &mut g_p);
                push_dist_grad(u, vn, d_an, -1.0, &mut g_self, &mut g_n);
                add_row(&mut out.grad_embeddings, a, dim, &g_self);
                let target = if use_anchors {
                    &mut out.grad_anchors
                } else {
                    &mut out.grad_embeddings
                };
                add_row(target, p, dim, &g_p);
                add_row(target, q, dim, &g_n);
            }
        }
    }
    out.finish(total, terms)
}

fn add_row(buf: &mut [f64], row: usize, dim: usize, g: &[f64]) {
    for (b, x) in buf[row * dim..(row + 1) * dim].iter_mut().zip(g) {
        *b += x;
    }
}

/// `log(1 + Σ e^{x_i})` and the weights `e^{x_i} / (1 + Σ e^{x_j})`.
fn log1p_sum_exp(xs: &[f64]) -> (f64, Vec<f64>) {
    let m = xs.iter().copied().fold(0.0f64, f64::max);
    let s: f64 = (-m).exp() + xs.iter().map(|x| (x - m).exp()).sum::<f64>();
    let lse = m + s.ln();
    (lse, xs.iter().map(|x| (x - lse).exp()).collect())
}

/// Multi-similarity loss on inner-product similarities `S = u·v`.
///
/// For each batch sample acting as anchor with non-empty positive and
/// negative sets:
/// `(1/α)·log(1 + Σ_pos e^{−α(S − λ)}) + (1/β)·log(1 + Σ_neg e^{β(S − λ)})`,
/// averaged over qualifying anchors.
pub fn multi_similarity_loss(
    batch: &PairBatch<'_>,
    alpha: f64,
    beta: f64,
    lambda: f64,
) -> Result<LossOutput> {
    batch.check()?;
    let dim = batch.dim;
    let n = batch.labels.len();
    let mut out = LossOutput::zeros(batch);
    let (cand, cand_labels, use_anchors) = match batch.anchors {
        Some(a) => (a.embeddings, a.labels, true),
        None => (batch.embeddings, batch.labels, false),
    };
    let mut total = 0.0;
    let mut terms = 0;
    for a in 0..n {
        let u = batch.row(a);
        let la = batch.labels[a];
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (j, &lj) in cand_labels.iter().enumerate() {
            if !use_anchors && j == a {
                continue;
            }
            if lj == la {
                pos.push(j);
            } else {
                neg.push(j);
            }
        }
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let row = |j: usize| &cand[j * dim..(j + 1) * dim];
        let xp: Vec<f64> = pos
            .iter()
            .map(|&p| -alpha * (crate::dot(u, row(p)) - lambda))
            .collect();
        let xn: Vec<f64> = neg
            .iter()
            .map(|&q| beta * (crate::dot(u, row(q)) - lambda))
            .collect();
        let (lp, wp) = log1p_sum_exp(&xp);
        let (ln, wn) = log1p_sum_exp(&xn);
        total += lp / alpha + ln / beta;
        terms += 1;
        // dL/dS_ap = −w_p, dL/dS_an = +w_n; dS/du = v, dS/dv = u.
        let coefs = pos
            .iter()
            .zip(wp.iter().map(|w| -w))
            .chain(neg.iter().zip(wn.iter().copied()));
        for (&j, c) in coefs {
            let v = row(j);
            for k in 0..dim {
                out.grad_embeddings[a * dim + k] += c * v[k];
            }
            let target = if use_anchors {
                &mut out.grad_anchors
            } else {
                &mut out.grad_embeddings
            };
            for k in 0..dim {
                target[j * dim + k] += c * u[k];
            }
        }
    }
    Ok(out.finish(total, terms))
}

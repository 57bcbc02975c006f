//! Contrastive losses, prototype scoring, cross-entropy and the total loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ScoreMode {
    /// `R·P + R·D`
    SeparateSimilarities,
    /// `R·(P + D)`
    PrototypeAddition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub tau: f64,
    pub use_rcl: bool,
    pub use_rdcl: bool,
    pub use_descriptions: bool,
    pub score_mode: ScoreMode,
    /// Replace the contrastive denominators by a single negative term,
    /// i.e. `(φ⁻ − φ⁺) / τ`. Unbounded below; for inspection only.
    pub literal_contrastive: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.1,
            use_rcl: true,
            use_rdcl: true,
            use_descriptions: true,
            score_mode: ScoreMode::SeparateSimilarities,
            literal_contrastive: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if self.use_rdcl && !self.use_descriptions {
            return Err(Error::Config("the description contrastive loss needs descriptions enabled".into()));
        }
        Ok(())
    }

    /// Turns descriptions off together with everything that depends on them.
    pub fn without_descriptions(mut self) -> Self {
        self.use_descriptions = false;
        self.use_rdcl = false;
        self
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_rcl: f64,
    pub l_rdcl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_ce: f64, l_rcl: f64, l_rdcl: f64) -> Self {
        LossBreakdown {
            l_ce,
            l_rcl,
            l_rdcl,
            total: l_ce + l_rcl + l_rdcl,
        }
    }

    pub fn add(&self, other: &LossBreakdown) -> LossBreakdown {
        LossBreakdown::new(self.l_ce + other.l_ce, self.l_rcl + other.l_rcl, self.l_rdcl + other.l_rdcl)
    }

    pub fn is_finite(&self) -> bool {
        [self.l_ce, self.l_rcl, self.l_rdcl, self.total].iter().all(|v| v.is_finite())
    }
}

fn zero<T: Real>(g: &mut Graph<T>) -> Result<Var> {
    g.constant(Tensor::scalar(T::zero()))
}

fn sum_scalars<T: Real>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    match terms.len() {
        0 => zero(g),
        1 => Ok(terms[0]),
        _ => {
            let s = g.stack(terms)?;
            g.sum(s)
        }
    }
}

/// `−log(exp(l_0) / Σ_j exp(l_j))` where `logits[0]` is the positive.
fn nce_term<T: Real>(g: &mut Graph<T>, pos: Var, negs: &[Var], literal: bool) -> Result<Var> {
    if literal {
        let neg = sum_scalars(g, negs)?;
        return g.sub(neg, pos);
    }
    let mut all = Vec::with_capacity(negs.len() + 1);
    all.push(pos);
    all.extend_from_slice(negs);
    let v = g.stack(&all)?;
    let lse = g.logsumexp(v)?;
    g.sub(lse, pos)
}

/// Representation-representation contrastive loss over `reps[i][m]`.
///
/// For each sentence `i` and slot `m` the positive score is
/// `φ⁺ = Σ_{k≠m} cos(r_i^m, r_i^k)` and the negatives are
/// `cos(r_i^m, r_j^m)` for `j ≠ i`; all scores are divided by `τ`.
/// Returns the sum over `(i, m)`; exactly zero with a single sentence.
pub fn loss_rcl<T: Real>(g: &mut Graph<T>, reps: &[Vec<Var>], tau: f64, literal: bool) -> Result<Var> {
    let n = reps.len();
    if n == 0 {
        return Err(Error::Contract("contrastive loss over zero sentences".into()));
    }
    let m = reps[0].len();
    if m == 0 || reps.iter().any(|r| r.len() != m) {
        return Err(Error::Contract("every sentence needs the same nonzero number of representations".into()));
    }
    if n == 1 {
        return zero(g);
    }
    let inv_tau = T::of(1.0 / tau);

    // within[i][a][b] for a < b, across[m][i][j] for i < j
    let mut within = vec![vec![vec![None; m]; m]; n];
    for (i, r) in reps.iter().enumerate() {
        for a in 0..m {
            for b in a + 1..m {
                within[i][a][b] = Some(g.cosine(r[a], r[b])?);
            }
        }
    }
    let mut across = vec![vec![vec![None; n]; n]; m];
    for (s, slot) in across.iter_mut().enumerate() {
        for i in 0..n {
            for j in i + 1..n {
                slot[i][j] = Some(g.cosine(reps[i][s], reps[j][s])?);
            }
        }
    }
    let pick = |t: &Vec<Vec<Option<Var>>>, a: usize, b: usize| t[a.min(b)][a.max(b)].expect("cached cosine");

    let mut terms = Vec::with_capacity(n * m);
    for i in 0..n {
        for s in 0..m {
            let pos_parts: Vec<Var> = (0..m).filter(|&k| k != s).map(|k| pick(&within[i], s, k)).collect();
            let phi = sum_scalars(g, &pos_parts)?;
            let pos = g.scale(phi, inv_tau)?;
            let negs = (0..n)
                .filter(|&j| j != i)
                .map(|j| g.scale(pick(&across[s], i, j), inv_tau))
                .collect::<Result<Vec<_>>>()?;
            terms.push(nce_term(g, pos, &negs, literal)?);
        }
    }
    sum_scalars(g, &terms)
}

/// Instance-description contrastive loss. `labels[i]` indexes `descs`; the
/// other descriptions are the negatives. Zero when there is one description.
pub fn loss_rdcl<T: Real>(
    g: &mut Graph<T>,
    instances: &[Var],
    labels: &[usize],
    descs: &[Var],
    tau: f64,
    literal: bool,
) -> Result<Var> {
    if instances.len() != labels.len() {
        return Err(Error::Contract("one label per instance required".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= descs.len()) {
        return Err(Error::Config(format!("no description for class {bad}")));
    }
    if descs.len() <= 1 || instances.is_empty() {
        return zero(g);
    }
    let inv_tau = T::of(1.0 / tau);
    let mut terms = Vec::with_capacity(instances.len());
    for (&r, &y) in instances.iter().zip(labels) {
        let sims = descs
            .iter()
            .map(|&d| {
                let c = g.cosine(r, d)?;
                g.scale(c, inv_tau)
            })
            .collect::<Result<Vec<_>>>()?;
        let negs: Vec<Var> = sims.iter().enumerate().filter(|&(c, _)| c != y).map(|(_, &v)| v).collect();
        terms.push(nce_term(g, sims[y], &negs, literal)?);
    }
    sum_scalars(g, &terms)
}

/// Mean of each class's support embeddings. `support[c]` holds class `c`.
pub fn compute_prototypes<T: Real>(g: &mut Graph<T>, support: &[Vec<Var>]) -> Result<Vec<Var>> {
    let k = support.first().map_or(0, Vec::len);
    if k == 0 || support.iter().any(|c| c.len() != k) {
        return Err(Error::Contract("prototype classes must all hold the same nonzero K".into()));
    }
    support
        .iter()
        .map(|class| {
            let mut acc = class[0];
            for &v in &class[1..] {
                acc = g.add(acc, v)?;
            }
            if k == 1 {
                Ok(acc)
            } else {
                g.scale(acc, T::one() / T::of(k as f64))
            }
        })
        .collect()
}

/// Dot-product class scores `[N]` for one query.
pub fn score_query<T: Real>(
    g: &mut Graph<T>,
    query: Var,
    prototypes: &[Var],
    descs: Option<&[Var]>,
    mode: ScoreMode,
) -> Result<Var> {
    if let Some(d) = descs {
        if d.len() != prototypes.len() {
            return Err(Error::Dimension(format!(
                "{} descriptions for {} prototypes",
                d.len(),
                prototypes.len()
            )));
        }
    }
    let mut scores = Vec::with_capacity(prototypes.len());
    for (c, &p) in prototypes.iter().enumerate() {
        let s = match (descs, mode) {
            (None, _) => g.dot(query, p)?,
            (Some(d), ScoreMode::SeparateSimilarities) => {
                let a = g.dot(query, p)?;
                let b = g.dot(query, d[c])?;
                g.add(a, b)?
            }
            (Some(d), ScoreMode::PrototypeAddition) => {
                let pd = g.add(p, d[c])?;
                g.dot(query, pd)?
            }
        };
        scores.push(s);
    }
    g.stack(&scores)
}

/// Index of the largest score; ties go to the lowest index.
pub fn predict(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Summed `−log softmax(scores)_y` over queries.
pub fn loss_ce<T: Real>(g: &mut Graph<T>, scores: &[Var], labels: &[usize]) -> Result<Var> {
    if scores.len() != labels.len() {
        return Err(Error::Contract("one label per query required".into()));
    }
    let mut terms = Vec::with_capacity(scores.len());
    for (&s, &y) in scores.iter().zip(labels) {
        let n = g.value(s).len();
        if y >= n {
            return Err(Error::Contract(format!("label {y} outside {n} classes")));
        }
        let lse = g.logsumexp(s)?;
        let sy = g.index(s, y)?;
        terms.push(g.sub(lse, sy)?);
    }
    sum_scalars(g, &terms)
}

/// Loss terms of one episode as graph nodes. Disabled terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub ce: Var,
    pub rcl: Option<Var>,
    pub rdcl: Option<Var>,
}

/// Unweighted sum; disabled terms contribute exactly zero.
pub fn total_loss<T: Real>(g: &mut Graph<T>, parts: &LossParts, config: &LossConfig) -> Result<(Var, LossBreakdown)> {
    let mut terms = vec![parts.ce];
    let read = |g: &Graph<T>, v: Var| g.value(v).item().map(|x| x.as_f64());
    let l_ce = read(g, parts.ce)?;
    let mut l_rcl = 0.0;
    let mut l_rdcl = 0.0;
    if let (true, Some(v)) = (config.use_rcl, parts.rcl) {
        l_rcl = read(g, v)?;
        terms.push(v);
    }
    if let (true, Some(v)) = (config.use_rdcl && config.use_descriptions, parts.rdcl) {
        l_rdcl = read(g, v)?;
        terms.push(v);
    }
    let total = sum_scalars(g, &terms)?;
    Ok((total, LossBreakdown::new(l_ce, l_rcl, l_rdcl)))
}

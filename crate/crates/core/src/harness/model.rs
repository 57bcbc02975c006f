use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, Real, SeedStream, Var};
use crate::encoder::BoundEncoder;
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::multirep::{build_embedding, encode_repsets, RepSelector};
use crate::objectives::{compute_prototypes, loss_ce, loss_rcl, loss_rdcl, total_loss, LossBreakdown, LossConfig, LossParts};

/// How embeddings are built and scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub loss: LossConfig,
    pub representations: RepSelector,
}

#[derive(Clone, Debug)]
pub struct EpisodeOutput {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    /// Class scores per query.
    pub scores: Vec<Vec<f64>>,
}

/// Encodes an episode (one pass for instances, one for descriptions),
/// scores every query against the prototypes and computes the enabled loss
/// terms. Contrastive terms run only in train mode.
pub fn episode_forward<T: Real>(
    g: &mut Graph<T>,
    enc: &BoundEncoder,
    ep: &Episode,
    spec: &ModelSpec,
    mode: Mode,
    stream: &mut SeedStream,
) -> Result<EpisodeOutput> {
    let cfg = &spec.loss;
    let sel = &spec.representations;
    let (n, k) = (ep.n(), ep.k());
    let ns = ep.support.len();

    let mut inputs = ep.support.clone();
    inputs.extend(ep.query.iter().cloned());
    let reps = encode_repsets(g, enc, &inputs, sel.description_dropout, mode, stream)?;
    let embs = reps.iter().map(|r| build_embedding(g, r, sel)).collect::<Result<Vec<_>>>()?;
    let (support, query) = embs.split_at(ns);

    let descs = if cfg.use_descriptions {
        let d_inputs = ep
            .descriptions
            .as_ref()
            .ok_or_else(|| Error::Config("episode lacks descriptions but descriptions are enabled".into()))?;
        let d_reps = encode_repsets(g, enc, d_inputs, sel.description_dropout, mode, stream)?;
        Some(d_reps.iter().map(|r| build_embedding(g, r, sel)).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };

    let grouped: Vec<Vec<Var>> = (0..n).map(|c| support[c * k..(c + 1) * k].to_vec()).collect();
    let protos = compute_prototypes(g, &grouped)?;
    let mut score_vars = Vec::with_capacity(query.len());
    for &q in query {
        score_vars.push(crate::objectives::score_query(g, q, &protos, descs.as_deref(), cfg.score_mode)?);
    }
    let scores = score_vars.iter().map(|&s| g.value(s).to_f64_vec()).collect();
    let ce = loss_ce(g, &score_vars, &ep.query_labels)?;

    let train = mode == Mode::Train;
    let rcl = if train && cfg.use_rcl {
        let sets: Vec<Vec<Var>> = reps[..ns].iter().map(|r| r.selected(sel)).collect();
        Some(loss_rcl(g, &sets, cfg.tau, cfg.literal_contrastive)?)
    } else {
        None
    };
    let rdcl = match (&descs, train && cfg.use_rdcl) {
        (Some(d), true) => Some(loss_rdcl(g, support, &ep.support_labels, d, cfg.tau, cfg.literal_contrastive)?),
        _ => None,
    };
    let (loss, breakdown) = total_loss(g, &LossParts { ce, rcl, rdcl }, cfg)?;
    Ok(EpisodeOutput { loss, breakdown, scores })
}

use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;

use super::model::{episode_forward, ModelSpec};
use crate::autodiff::gradcheck::{check_gradients, project_to_scalar, GradCheckConfig, GradCheckReport, NamedInput};
use crate::autodiff::suite::run_op_suite;
use crate::autodiff::{Mode, SeedStream, Tensor};
use crate::corpus::{DatasetSplit, RelationDescription, RelationInstance, SplitRole};
use crate::encoder::{init_params, BoundEncoder, EncoderConfig, EncoderParams};
use crate::episodes::{episode_at, EncodedSplit, EpisodeSpec};
use crate::error::Result;
use crate::multirep::RepSelector;
use crate::objectives::LossConfig;
use crate::textproc::{build_vocab, pad_batch, Vocab};

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckSummary {
    pub reports: Vec<GradCheckReport>,
    pub seconds: f64,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(GradCheckReport::passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }
}

fn tiny_encoder(vocab_size: usize, dropout: f64) -> EncoderConfig {
    EncoderConfig {
        layers: 1,
        hidden: 8,
        heads: 2,
        ff: 16,
        dropout,
        max_positions: 24,
        vocab_size,
    }
}

fn param_inputs(p: &EncoderParams<f64>) -> Vec<NamedInput> {
    p.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
}

fn toy_corpus() -> Result<(DatasetSplit, BTreeMap<String, RelationDescription>, Vocab)> {
    let sent = |w: &[&str], head: usize, tail: usize, rel: &str| RelationInstance {
        tokens: w.iter().map(|s| s.to_string()).collect(),
        head_span: (head, head),
        tail_span: (tail, tail),
        relation_id: rel.to_string(),
    };
    let mut split = DatasetSplit::new(SplitRole::Train);
    split.relations.insert(
        "R0".into(),
        vec![sent(&["ann", "likes", "bob"], 0, 2, "R0"), sent(&["cy", "likes", "dee"], 0, 2, "R0")],
    );
    split.relations.insert(
        "R1".into(),
        vec![sent(&["bob", "hates", "cy"], 2, 0, "R1"), sent(&["dee", "hates", "ann"], 0, 2, "R1")],
    );
    let mut descs = BTreeMap::new();
    for (id, text) in [("R0", "subject likes object"), ("R1", "object hates subject")] {
        descs.insert(
            id.to_string(),
            RelationDescription {
                relation_id: id.to_string(),
                name: id.to_lowercase(),
                description_text: text.to_string(),
            },
        );
    }
    let vocab = build_vocab(&[&split], &descs, 1)?;
    Ok((split, descs, vocab))
}

/// Finite-difference check of the complete training loss (CE plus both
/// contrastive terms, descriptions on, dropout active under a fixed mask
/// stream) on a 2-way 1-shot episode, with respect to every encoder
/// parameter.
pub fn total_loss_gradcheck(cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let (split, descs, vocab) = toy_corpus()?;
    let enc_cfg = tiny_encoder(vocab.len(), 0.1);
    let params: EncoderParams<f64> = init_params(&enc_cfg, 19)?;
    let spec = EpisodeSpec {
        q: Some(1),
        ..EpisodeSpec::new(2, 1)
    };
    let encoded = EncodedSplit::new(&split, &descs, &vocab, 24)?;
    let ep = encoded.materialize(&episode_at(&split, &spec, 3, 0)?, true)?;
    let model = ModelSpec {
        loss: LossConfig::default(),
        representations: RepSelector::full(),
    };
    check_gradients(
        "total_loss",
        &param_inputs(&params),
        |g, vars| {
            let enc = BoundEncoder::from_vars(enc_cfg.clone(), vars.to_vec())?;
            let mut stream = SeedStream::new(7, 0);
            Ok(episode_forward(g, &enc, &ep, &model, Mode::Train, &mut stream)?.loss)
        },
        cfg,
    )
}

fn encoder_gradcheck(cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let (split, descs, vocab) = toy_corpus()?;
    let enc_cfg = tiny_encoder(vocab.len(), 0.0);
    let params: EncoderParams<f64> = init_params(&enc_cfg, 23)?;
    let encoded = EncodedSplit::new(&split, &descs, &vocab, 24)?;
    let ep = encoded.materialize(&episode_at(&split, &EpisodeSpec::new(2, 1), 1, 0)?, false)?;
    let batch = pad_batch(&ep.support, vocab.pad_id())?;
    let rows = batch.inputs.len() * batch.width;
    let weights = Tensor::from_f64(
        vec![rows, enc_cfg.hidden],
        &(0..rows * enc_cfg.hidden)
            .map(|i| ((i * 29 % 13) as f64 - 6.0) / 6.0)
            .collect::<Vec<_>>(),
    )?;
    check_gradients(
        "encoder",
        &param_inputs(&params),
        |g, vars| {
            let enc = BoundEncoder::from_vars(enc_cfg.clone(), vars.to_vec())?;
            let h = enc.encode(g, &batch, Mode::Eval, &mut SeedStream::new(0, 0))?;
            project_to_scalar(g, h.states, &weights)
        },
        cfg,
    )
}

/// Every primitive operation (`trials` random draws each), the one-layer
/// encoder, and the complete loss.
pub fn run_gradcheck_suite(trials: usize, seed: u64) -> Result<GradcheckSummary> {
    let start = Instant::now();
    let cfg = GradCheckConfig::default();
    let mut reports = run_op_suite(trials, seed, cfg)?;
    reports.push(encoder_gradcheck(cfg)?);
    reports.push(total_loss_gradcheck(cfg)?);
    Ok(GradcheckSummary {
        reports,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complete_loss_gradients_match() {
        let r = total_loss_gradcheck(GradCheckConfig::default()).unwrap();
        assert!(r.checked > 500);
        assert!(r.passed(), "{:?}", &r.failures[..r.failures.len().min(5)]);
    }
}

use multirep::autodiff::{Graph, Mode, SeedStream};
use multirep::encoder::{init_params, EncoderParams};
use multirep::episodes::{episode_at, EncodedSplit, Episode, EpisodeRef};
use multirep::harness::{episode_forward, Adam, AdamConfig, Data, ModelSpec, RunConfig};
use multirep::textproc::Vocab;
use proptest::prelude::*;

fn small() -> (RunConfig, Data) {
    let mut c = RunConfig::default();
    c.encoder.layers = 1;
    c.encoder.hidden = 16;
    c.encoder.heads = 2;
    c.encoder.ff = 32;
    c.encoder.dropout = 0.0;
    let data = Data::synthetic(&c).unwrap();
    c.encoder.vocab_size = data.vocab.len();
    (c, data)
}

fn materialize(data: &Data, vocab: &Vocab, r: &EpisodeRef, max_len: usize) -> Episode {
    EncodedSplit::new(&data.train, &data.descriptions, vocab, max_len)
        .unwrap()
        .materialize(r, true)
        .unwrap()
}

fn forward(params: &EncoderParams<f64>, ep: &Episode, model: &ModelSpec, mode: Mode) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::<f64>::new();
    let enc = params.bind(&mut g).unwrap();
    let out = episode_forward(&mut g, &enc, ep, model, mode, &mut SeedStream::new(3, 0)).unwrap();
    (g.value(out.loss).item().unwrap(), out.scores)
}

#[test]
fn one_step_lowers_the_loss_on_a_fixed_episode() {
    let (c, data) = small();
    let r = episode_at(&data.train, &c.train_episode, 11, 0).unwrap();
    let ep = materialize(&data, &data.vocab, &r, c.max_len);
    let model = c.model();
    let mut params: EncoderParams<f64> = init_params(&c.encoder, 5).unwrap();
    let before = {
        let mut g = Graph::<f64>::new();
        let enc = params.bind(&mut g).unwrap();
        let out = episode_forward(&mut g, &enc, &ep, &model, Mode::Train, &mut SeedStream::new(3, 0)).unwrap();
        let grads = g.backward(out.loss).unwrap();
        let gs: Vec<_> = enc.vars().iter().map(|&v| grads.wrt(v).unwrap().clone()).collect();
        let mut adam = Adam::new(
            AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            params.tensors(),
        );
        adam.step(params.tensors_mut(), &gs.iter().collect::<Vec<_>>()).unwrap();
        g.value(out.loss).item().unwrap()
    };
    let (after, _) = forward(&params, &ep, &model, Mode::Train);
    assert!(after < before, "loss went from {before} to {after}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn relabelling_classes_permutes_scores(index in 0u64..1000, rot in 1usize..5) {
        let (c, data) = small();
        let r = episode_at(&data.train, &c.eval_episode, 21, index).unwrap();
        let n = r.relations.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let permuted = EpisodeRef {
            relations: perm.iter().map(|&p| r.relations[p].clone()).collect(),
            support: perm.iter().map(|&p| r.support[p].clone()).collect(),
            query: perm.iter().map(|&p| r.query[p].clone()).collect(),
            ..r.clone()
        };
        let params: EncoderParams<f64> = init_params(&c.encoder, 9).unwrap();
        let model = c.model();
        let (_, a) = forward(&params, &materialize(&data, &data.vocab, &r, c.max_len), &model, Mode::Eval);
        let (_, b) = forward(&params, &materialize(&data, &data.vocab, &permuted, c.max_len), &model, Mode::Eval);
        // Query q of new class i is query q of old class perm[i].
        let per_class = a.len() / n;
        for i in 0..n {
            for q in 0..per_class {
                let old = &a[perm[i] * per_class + q];
                let new = &b[i * per_class + q];
                for j in 0..n {
                    prop_assert!((new[j] - old[perm[j]]).abs() < 1e-9);
                }
            }
        }
    }
}

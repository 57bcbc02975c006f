//! Small post-LN transformer encoder over the autodiff record.
//!
//! A batch of `B` padded rows of width `T` is laid out as one `[B·T × d]`
//! matrix; row `b` occupies rows `b·T .. (b+1)·T`.

use std::cell::Cell;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, Real, SeedStream, Tensor, Var};
use crate::error::{Error, Result};
use crate::textproc::Batch;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub vocab_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            hidden: 64,
            heads: 4,
            ff: 128,
            dropout: 0.1,
            max_positions: 128,
            vocab_size: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ff", self.ff),
            ("max_positions", self.max_positions),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be positive")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

const GLOBAL_PARAMS: usize = 4;
const PER_LAYER: usize = 16;

// Offsets inside one layer's block of parameters.
const WQ: usize = 0;
const BQ: usize = 1;
const WK: usize = 2;
const BK: usize = 3;
const WV: usize = 4;
const BV: usize = 5;
const WO: usize = 6;
const BO: usize = 7;
const LN1_G: usize = 8;
const LN1_B: usize = 9;
const W1: usize = 10;
const B1: usize = 11;
const W2: usize = 12;
const B2: usize = 13;
const LN2_G: usize = 14;
const LN2_B: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Embedding,
    /// Uniform with standard deviation 0.02, so an untrained encoder is
    /// nearly blind to word order.
    Position,
    Projection { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

/// Names, shapes and init rules in storage order.
fn layout(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f) = (cfg.hidden, cfg.ff);
    let proj = |i, o| Init::Projection { fan_in: i, fan_out: o };
    let mut out = vec![
        ("tok_emb".to_string(), vec![cfg.vocab_size, d], Init::Embedding),
        ("pos_emb".to_string(), vec![cfg.max_positions, d], Init::Position),
        ("emb_ln.gamma".to_string(), vec![d], Init::Ones),
        ("emb_ln.beta".to_string(), vec![d], Init::Zeros),
    ];
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        out.extend([
            (p("attn.wq"), vec![d, d], proj(d, d)),
            (p("attn.bq"), vec![d], Init::Zeros),
            (p("attn.wk"), vec![d, d], proj(d, d)),
            (p("attn.bk"), vec![d], Init::Zeros),
            (p("attn.wv"), vec![d, d], proj(d, d)),
            (p("attn.bv"), vec![d], Init::Zeros),
            (p("attn.wo"), vec![d, d], proj(d, d)),
            (p("attn.bo"), vec![d], Init::Zeros),
            (p("ln1.gamma"), vec![d], Init::Ones),
            (p("ln1.beta"), vec![d], Init::Zeros),
            (p("ff.w1"), vec![d, f], proj(d, f)),
            (p("ff.b1"), vec![f], Init::Zeros),
            (p("ff.w2"), vec![f, d], proj(f, d)),
            (p("ff.b2"), vec![d], Init::Zeros),
            (p("ln2.gamma"), vec![d], Init::Ones),
            (p("ln2.beta"), vec![d], Init::Zeros),
        ]);
    }
    out
}

/// All trainable weights as a flat, named list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct EncoderParams<T: Real> {
    pub config: EncoderConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> EncoderParams<T> {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        EncoderParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Rebuilds from named tensors, checking them against the config's layout.
    pub fn from_named(config: EncoderConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != named.len() {
            return Err(Error::Validation(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        for ((name, shape, _), (got, t)) in expected.iter().zip(&named) {
            if name != got || shape.as_slice() != t.shape() {
                return Err(Error::Validation(format!(
                    "parameter {got} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(EncoderParams { config, names, tensors })
    }

    /// Registers every tensor as a gradient-carrying leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<BoundEncoder> {
        let vars = self.tensors.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>>>()?;
        Ok(BoundEncoder {
            config: self.config.clone(),
            vars,
            calls: Cell::new(0),
        })
    }
}

/// Scaled uniform for projections and embeddings, zeros for biases and
/// layer-norm shifts, ones for layer-norm gains. Each tensor draws from its
/// own counter stream so the values do not depend on iteration order.
pub fn init_params<T: Real>(config: &EncoderConfig, seed: u64) -> Result<EncoderParams<T>> {
    config.validate()?;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (i, (name, shape, init)) in layout(config).into_iter().enumerate() {
        let n: usize = shape.iter().product();
        let mut stream = SeedStream::keyed(seed, &[0x1417, i as u64]);
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Embedding => {
                let a = (3.0 / config.hidden as f64).sqrt();
                stream.uniforms(n).into_iter().map(|u| (2.0 * u - 1.0) * a).collect()
            }
            Init::Position => {
                let a = 0.02 * 3f64.sqrt();
                stream.uniforms(n).into_iter().map(|u| (2.0 * u - 1.0) * a).collect()
            }
            Init::Projection { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                stream.uniforms(n).into_iter().map(|u| (2.0 * u - 1.0) * a).collect()
            }
        };
        names.push(name);
        tensors.push(Tensor::from_f64(shape, &data)?);
    }
    Ok(EncoderParams {
        config: config.clone(),
        names,
        tensors,
    })
}

/// Encoder output for one batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Hidden {
    /// `[batch·width × d]`
    pub states: Var,
    pub batch: usize,
    pub width: usize,
}

impl Hidden {
    /// First matrix row belonging to batch row `b`.
    pub fn offset(&self, b: usize) -> usize {
        b * self.width
    }
}

/// Parameters bound into one graph, with a count of forward passes.
#[derive(Debug)]
pub struct BoundEncoder {
    pub config: EncoderConfig,
    vars: Vec<Var>,
    calls: Cell<usize>,
}

impl BoundEncoder {
    /// Wraps leaves already registered on a graph, in storage order.
    pub fn from_vars(config: EncoderConfig, vars: Vec<Var>) -> Result<Self> {
        let expected = layout(&config).len();
        if vars.len() != expected {
            return Err(Error::Contract(format!("encoder expects {expected} parameter leaves, got {}", vars.len())));
        }
        Ok(BoundEncoder {
            config,
            vars,
            calls: Cell::new(0),
        })
    }

    /// Parameter leaves in storage order (same order as [`EncoderParams::names`]).
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Number of `encode` calls made through this binding.
    pub fn calls(&self) -> usize {
        self.calls.get()
    }

    fn layer(&self, l: usize, which: usize) -> Var {
        self.vars[GLOBAL_PARAMS + l * PER_LAYER + which]
    }

    /// Hidden states for a padded batch. Padding keys are excluded from
    /// every attention row; dropout runs only in train mode.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, batch: &Batch, mode: Mode, stream: &mut SeedStream) -> Result<Hidden> {
        self.calls.set(self.calls.get() + 1);
        let cfg = &self.config;
        let (bsz, width) = (batch.len(), batch.width);
        if bsz == 0 {
            return Err(Error::Contract("encode of an empty batch".into()));
        }
        if width > cfg.max_positions {
            return Err(Error::Encoding(format!(
                "sequence width {width} exceeds {} positions",
                cfg.max_positions
            )));
        }
        let mut ids = Vec::with_capacity(bsz * width);
        for row in &batch.ids {
            if let Some(&bad) = row.iter().find(|&&i| i >= cfg.vocab_size) {
                return Err(Error::Encoding(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
            }
            ids.extend_from_slice(row);
        }
        let positions: Vec<usize> = (0..bsz).flat_map(|_| 0..width).collect();
        let keys: Vec<Vec<bool>> = batch
            .attn_mask
            .iter()
            .map(|m| m.iter().map(|&x| x == 1).collect())
            .collect();

        let tok = g.gather_rows(self.vars[0], &ids)?;
        let pos = g.gather_rows(self.vars[1], &positions)?;
        let x = g.add(tok, pos)?;
        let x = g.layer_norm(x, self.vars[2], self.vars[3], LN_EPS)?;
        let mut x = g.dropout(x, cfg.dropout, mode, stream)?;

        let dh = cfg.head_dim();
        let scale = T::of(1.0 / (dh as f64).sqrt());
        for l in 0..cfg.layers {
            let proj = |g: &mut Graph<T>, w, b| -> Result<Var> {
                let y = g.matmul(x, self.layer(l, w))?;
                g.add_row(y, self.layer(l, b))
            };
            let q = proj(g, WQ, BQ)?;
            let k = proj(g, WK, BK)?;
            let v = proj(g, WV, BV)?;
            let mut rows = Vec::with_capacity(bsz);
            for (b, key_mask) in keys.iter().enumerate() {
                let r = b * width..(b + 1) * width;
                let mut heads = Vec::with_capacity(cfg.heads);
                for h in 0..cfg.heads {
                    let c = h * dh..(h + 1) * dh;
                    let qh = g.slice(q, r.clone(), c.clone())?;
                    let kh = g.slice(k, r.clone(), c.clone())?;
                    let vh = g.slice(v, r.clone(), c)?;
                    let s = g.matmul_nt(qh, kh)?;
                    let s = g.scale(s, scale)?;
                    let p = g.masked_softmax(s, Some(key_mask))?;
                    let p = g.dropout(p, cfg.dropout, mode, stream)?;
                    heads.push(g.matmul(p, vh)?);
                }
                rows.push(if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? });
            }
            let ctx = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0)? };
            let a = g.matmul(ctx, self.layer(l, WO))?;
            let a = g.add_row(a, self.layer(l, BO))?;
            let a = g.dropout(a, cfg.dropout, mode, stream)?;
            let r1 = g.add(x, a)?;
            let x1 = g.layer_norm(r1, self.layer(l, LN1_G), self.layer(l, LN1_B), LN_EPS)?;

            let hdn = g.matmul(x1, self.layer(l, W1))?;
            let hdn = g.add_row(hdn, self.layer(l, B1))?;
            let hdn = g.gelu(hdn)?;
            let f = g.matmul(hdn, self.layer(l, W2))?;
            let f = g.add_row(f, self.layer(l, B2))?;
            let f = g.dropout(f, cfg.dropout, mode, stream)?;
            let r2 = g.add(x1, f)?;
            x = g.layer_norm(r2, self.layer(l, LN2_G), self.layer(l, LN2_B), LN_EPS)?;
        }
        Ok(Hidden {
            states: x,
            batch: bsz,
            width,
        })
    }
}

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Versioned JSON container of named flat arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamFile {
    pub format_version: u32,
    pub precision: String,
    pub config: EncoderConfig,
    pub params: Vec<NamedArray>,
}

impl ParamFile {
    pub fn from_params<T: Real>(p: &EncoderParams<T>) -> Self {
        ParamFile {
            format_version: CHECKPOINT_FORMAT,
            precision: T::NAME.to_string(),
            config: p.config.clone(),
            params: p
                .iter()
                .map(|(n, t)| NamedArray {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.to_f64_vec(),
                })
                .collect(),
        }
    }

    pub fn to_params<T: Real>(&self) -> Result<EncoderParams<T>> {
        if self.format_version != CHECKPOINT_FORMAT {
            return Err(Error::Validation(format!(
                "unsupported checkpoint format {} (expected {CHECKPOINT_FORMAT})",
                self.format_version
            )));
        }
        let named = self
            .params
            .iter()
            .map(|a| Ok((a.name.clone(), Tensor::from_f64(a.shape.clone(), &a.data)?)))
            .collect::<Result<Vec<_>>>()?;
        EncoderParams::from_named(self.config.clone(), named)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_gradients, project_to_scalar, GradCheckConfig};
    use crate::textproc::{pad_batch, EncodedInput, InputKind};

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            ff: 16,
            dropout: 0.0,
            max_positions: 8,
            vocab_size: 12,
        }
    }

    fn input(ids: &[usize]) -> EncodedInput {
        EncodedInput {
            ids: ids.to_vec(),
            attn_mask: vec![1; ids.len()],
            pos_cls: 0,
            pos_mask: 1,
            pos_e1s: None,
            pos_e2s: None,
            kind: InputKind::Description,
        }
    }

    fn run(params: &EncoderParams<f64>, batch: &Batch, mode: Mode, seed: u64) -> Vec<f64> {
        let mut g = Graph::new();
        let enc = params.bind(&mut g).unwrap();
        let h = enc.encode(&mut g, batch, mode, &mut SeedStream::new(seed, 0)).unwrap();
        g.value(h.states).to_f64_vec()
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.heads = 2;
        c.vocab_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cfg = EncoderConfig {
            vocab_size: 300,
            ..EncoderConfig::default()
        };
        let a: EncoderParams<f32> = init_params(&cfg, 9).unwrap();
        let b: EncoderParams<f32> = init_params(&cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.get("tok_emb").unwrap().shape(), &[300, 64]);
        assert!(a.get("layer1.ln2.gamma").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(a.get("layer0.attn.bq").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(a.len(), GLOBAL_PARAMS + 2 * PER_LAYER);
        let c: EncoderParams<f32> = init_params(&cfg, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn output_shape_and_eval_determinism() {
        let p: EncoderParams<f64> = init_params(&tiny(), 1).unwrap();
        let batch = pad_batch(&[input(&[2, 4, 5]), input(&[2, 4, 6, 7, 8])], 0).unwrap();
        let mut g = Graph::new();
        let enc = p.bind(&mut g).unwrap();
        let h = enc.encode(&mut g, &batch, Mode::Eval, &mut SeedStream::new(0, 0)).unwrap();
        assert_eq!(g.shape(h.states), &[2 * 5, 8]);
        assert_eq!(enc.calls(), 1);
        assert_eq!(run(&p, &batch, Mode::Eval, 1), run(&p, &batch, Mode::Eval, 2));
    }

    #[test]
    fn too_wide_is_an_error() {
        let p: EncoderParams<f64> = init_params(&tiny(), 1).unwrap();
        let batch = pad_batch(&[input(&[2; 9])], 0).unwrap();
        let mut g = Graph::new();
        let enc = p.bind(&mut g).unwrap();
        assert!(matches!(
            enc.encode(&mut g, &batch, Mode::Eval, &mut SeedStream::new(0, 0)),
            Err(Error::Encoding(_))
        ));
    }

    #[test]
    fn padding_ids_never_leak_into_real_positions() {
        let p: EncoderParams<f64> = init_params(&tiny(), 3).unwrap();
        let mut batch = pad_batch(&[input(&[2, 4, 5]), input(&[2, 4, 6, 7, 8])], 0).unwrap();
        let before = run(&p, &batch, Mode::Eval, 0);
        batch.ids[0][3] = 9;
        batch.ids[0][4] = 11;
        let after = run(&p, &batch, Mode::Eval, 0);
        // Row 0 real positions 0..3, all of row 1.
        let d = 8;
        for r in (0..3).chain(5..10) {
            assert_eq!(before[r * d..(r + 1) * d], after[r * d..(r + 1) * d], "row {r}");
        }
        assert_ne!(before[3 * d..4 * d], after[3 * d..4 * d]);
    }

    #[test]
    fn padded_keys_get_zero_attention() {
        // With padding, the real rows equal those from encoding the row alone.
        let p: EncoderParams<f64> = init_params(&tiny(), 4).unwrap();
        let short = input(&[2, 4, 5]);
        let alone = run(&p, &pad_batch(&[short.clone()], 0).unwrap(), Mode::Eval, 0);
        let padded = run(&p, &pad_batch(&[short, input(&[2, 3, 3, 3, 3, 3])], 0).unwrap(), Mode::Eval, 0);
        for (a, b) in alone.iter().zip(&padded[..alone.len()]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn train_mode_reproducible_and_stochastic() {
        let cfg = EncoderConfig {
            dropout: 0.3,
            ..tiny()
        };
        let p: EncoderParams<f64> = init_params(&cfg, 5).unwrap();
        let batch = pad_batch(&[input(&[2, 4, 5, 6])], 0).unwrap();
        let a = run(&p, &batch, Mode::Train, 77);
        let b = run(&p, &batch, Mode::Train, 77);
        let c = run(&p, &batch, Mode::Train, 78);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(run(&p, &batch, Mode::Eval, 1), run(&p, &batch, Mode::Eval, 2));
    }

    #[test]
    fn full_model_gradient_check() {
        let cfg = EncoderConfig {
            max_positions: 6,
            ..tiny()
        };
        let p: EncoderParams<f64> = init_params(&cfg, 11).unwrap();
        let batch = pad_batch(&[input(&[2, 4, 5, 6, 7, 8]), input(&[2, 9, 10, 11])], 0).unwrap();
        let inputs: Vec<_> = p.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let weights = Tensor::from_f64(
            vec![12, 8],
            &(0..96).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect::<Vec<_>>(),
        )
        .unwrap();
        let report = check_gradients(
            "encoder",
            &inputs,
            |g, vars| {
                let enc = BoundEncoder {
                    config: cfg.clone(),
                    vars: vars.to_vec(),
                    calls: Cell::new(0),
                };
                let h = enc.encode(g, &batch, Mode::Eval, &mut SeedStream::new(0, 0))?;
                project_to_scalar(g, h.states, &weights)
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{:?}", &report.failures[..report.failures.len().min(5)]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let p: EncoderParams<f32> = init_params(&tiny(), 2).unwrap();
        let file = ParamFile::from_params(&p);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        file.save(&path).unwrap();
        let back: EncoderParams<f32> = ParamFile::load(&path).unwrap().to_params().unwrap();
        assert_eq!(p, back);

        let mut bad = file.clone();
        bad.format_version = 99;
        assert!(bad.to_params::<f32>().is_err());
        let mut bad = file;
        bad.params[0].shape = vec![3, 3];
        assert!(bad.to_params::<f32>().is_err());
    }
}

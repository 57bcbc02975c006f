//! Finite-difference suite covering every registered graph operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_gradients, project_to_scalar, GradCheckConfig, GradCheckReport, NamedInput};
use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

type Build = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

struct OpCase {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    /// Sampling interval for inputs.
    domain: (f64, f64),
    build: Build,
}

fn project(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    // Deterministic, distinct weights per output element.
    let n = g.value(out).len();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.7 * ((i * 7 + 3) % 11) as f64 / 11.0 - 0.5).collect();
    let wt = Tensor::new(g.shape(out).to_vec(), w)?;
    project_to_scalar(g, out, &wt)
}

const CASES: &[OpCase] = &[
    OpCase {
        name: "matmul",
        shapes: &[&[3, 4], &[4, 2]],
        domain: (-2.0, 2.0),
        build: |g, v| {
            let o = g.matmul(v[0], v[1])?;
            project(g, o)
        },
    },
    OpCase {
        name: "matmul_nt",
        shapes: &[&[3, 4], &[2, 4]],
        domain: (-2.0, 2.0),
        build: |g, v| {
            let o = g.matmul_nt(v[0], v[1])?;
            project(g, o)
        },
    },
    OpCase {
        name: "transpose",
        shapes: &[&[3, 2]],
        domain: (-2.0, 2.0),
        build: |g, v| {
            let o = g.transpose(v[0])?;
            project(g, o)
        },
    },
    OpCase {
        name: "add",
        shapes: &[&[2, 3], &[2, 3]],
        domain: (-2.0, 2.0),
        build: |g, v| {
            let o = g.add(v[0], v[1])?;
            project(g, o)
        },
    },
    OpCase {
        name: "sub",
        shapes: &[&[2, 3], &[2, 3]],
        domain: (-2.0, 2.0),
        build: |g, v| {
            let o = g.sub(v[0], v[1])?;
            project(g, o)
        },
    },
    OpCase {
        name: "mul",
        shapes: &[&[2, 3], &[2, 3]],
        domain: (-2.0, 2.0),
        build: |g, v| {
            let o = g.mul(v[0], v[1])?;
            project(g, o)
        },
    },
    OpCase {
        name: "add_row",
        shapes: &[&[3, 4], &[4]],
        domain: (-2.0, 2.0),
        build: |g, v| {
            let o = g.add_row(v[0], v[1])?;
            project(g, o)
        },
    },
    OpCase {
        name: "scale",
        shapes: &[&[5]],
        domain: (-2.0, 2.0),
        build: |g, v| {
            let o = g.scale(v[0], -1.7)?;
            project(g, o)
        },
    },
    OpCase {
        name: "exp",
        shapes: &[&[5]],
        domain: (-2.0, 2.0),
        build: |g, v| {
            let o = g.exp(v[0])?;
            project(g, o)
        },
    },
    OpCase {
        name: "log",
        shapes: &[&[5]],
        domain: (0.5, 2.0),
        build: |g, v| {
            let o = g.log(v[0])?;
            project(g, o)
        },
    },
    OpCase {
        name: "gelu",
        shapes: &[&[6]],
        domain: (-2.0, 2.0),
        build: |g, v| {
            let o = g.gelu(v[0])?;
            project(g, o)
        },
    },
    OpCase {
        name: "sum",
        shapes: &[&[2, 3]],
        domain: (-2.0, 2.0),
        build: |g, v| g.sum(v[0]),
    },
    OpCase {
        name: "mean",
        shapes: &[&[5]],
        domain: (-2.0, 2.0),
        build: |g, v| g.mean(v[0]),
    },
    OpCase {
        name: "softmax",
        shapes: &[&[3, 4]],
        domain: (-2.0, 2.0),
        build: |g, v| {
            let o = g.softmax(v[0])?;
            project(g, o)
        },
    },
    OpCase {
        name: "masked_softmax",
        shapes: &[&[3, 4]],
        domain: (-2.0, 2.0),
        build: |g, v| {
            let o = g.masked_softmax(v[0], Some(&[true, false, true, true]))?;
            project(g, o)
        },
    },
    OpCase {
        name: "logsumexp",
        shapes: &[&[5]],
        domain: (-2.0, 2.0),
        build: |g, v| g.logsumexp(v[0]),
    },
    OpCase {
        name: "layer_norm",
        shapes: &[&[3, 5], &[5], &[5]],
        domain: (-2.0, 2.0),
        build: |g, v| {
            let o = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(g, o)
        },
    },
    OpCase {
        name: "cosine",
        shapes: &[&[6], &[6]],
        domain: (-2.0, 2.0),
        build: |g, v| g.cosine(v[0], v[1]),
    },
    OpCase {
        name: "dot",
        shapes: &[&[6], &[6]],
        domain: (-2.0, 2.0),
        build: |g, v| g.dot(v[0], v[1]),
    },
    OpCase {
        name: "dropout",
        shapes: &[&[6]],
        domain: (-2.0, 2.0),
        build: |g, v| {
            let o = g.dropout_with_mask(v[0], &[true, false, true, true, false, true], 0.25)?;
            project(g, o)
        },
    },
    OpCase {
        name: "concat_vectors",
        shapes: &[&[3], &[2]],
        domain: (-2.0, 2.0),
        build: |g, v| {
            let o = g.concat(&[v[0], v[1], v[0]], 0)?;
            project(g, o)
        },
    },
    OpCase {
        name: "concat_rows",
        shapes: &[&[2, 3], &[1, 3]],
        domain: (-2.0, 2.0),
        build: |g, v| {
            let o = g.concat(&[v[0], v[1]], 0)?;
            project(g, o)
        },
    },
    OpCase {
        name: "concat_cols",
        shapes: &[&[2, 3], &[2, 2]],
        domain: (-2.0, 2.0),
        build: |g, v| {
            let o = g.concat(&[v[0], v[1]], 1)?;
            project(g, o)
        },
    },
    OpCase {
        name: "slice",
        shapes: &[&[4, 5]],
        domain: (-2.0, 2.0),
        build: |g, v| {
            let o = g.slice(v[0], 1..3, 2..5)?;
            project(g, o)
        },
    },
    OpCase {
        name: "gather_rows",
        shapes: &[&[5, 3]],
        domain: (-2.0, 2.0),
        build: |g, v| {
            let o = g.gather_rows(v[0], &[1, 3, 1])?;
            project(g, o)
        },
    },
    OpCase {
        name: "weighted_rows",
        shapes: &[&[4, 3]],
        domain: (-2.0, 2.0),
        build: |g, v| {
            let o = g.weighted_rows(v[0], &[0.5, 0.0, 0.25, 0.25])?;
            project(g, o)
        },
    },
    OpCase {
        name: "mean_rows",
        shapes: &[&[4, 3]],
        domain: (-2.0, 2.0),
        build: |g, v| {
            let o = g.mean_rows(v[0])?;
            project(g, o)
        },
    },
    OpCase {
        name: "row",
        shapes: &[&[4, 3]],
        domain: (-2.0, 2.0),
        build: |g, v| {
            let o = g.row(v[0], 2)?;
            project(g, o)
        },
    },
    OpCase {
        name: "stack_index",
        shapes: &[&[4]],
        domain: (-2.0, 2.0),
        build: |g, v| {
            let a = g.index(v[0], 0)?;
            let b = g.index(v[0], 3)?;
            let c = g.index(v[0], 0)?;
            let s = g.stack(&[a, b, c])?;
            project(g, s)
        },
    },
];

/// Names of every operation covered by [`run_op_suite`].
pub fn op_names() -> Vec<&'static str> {
    CASES.iter().map(|c| c.name).collect()
}

/// Runs `trials` random finite-difference checks per operation.
pub fn run_op_suite(trials: usize, seed: u64, cfg: GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for case in CASES {
        for trial in 0..trials {
            let inputs: Vec<NamedInput> = case
                .shapes
                .iter()
                .enumerate()
                .map(|(k, shape)| {
                    let n: usize = shape.iter().product();
                    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(case.domain.0..case.domain.1)).collect();
                    Tensor::new(shape.to_vec(), data).map(|t| (format!("{}.input{k}", case.name), t))
                })
                .collect::<Result<_>>()?;
            let report = check_gradients(&format!("{}#{trial}", case.name), &inputs, case.build, cfg)?;
            reports.push(report);
        }
    }
    Ok(reports)
}

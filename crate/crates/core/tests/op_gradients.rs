//! Finite-difference validation of every graph operation's backward pass,
//! plus the numeric invariants of softmax and layer normalization.

use pm3e_core::graph::{Graph, TensorId};
use pm3e_core::streams::stream_rng;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

type Builder = fn(&mut Graph, &[TensorId]) -> TensorId;

struct OpCase {
    name: &'static str,
    shapes: Vec<(usize, usize)>,
    build: Builder,
    /// Inputs drawn strictly positive (for ln).
    positive: bool,
}

fn scalarize(g: &mut Graph, out: TensorId, weight: TensorId) -> TensorId {
    let prod = g.mul(out, weight).unwrap();
    g.sum_all(prod)
}

fn cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            shapes: vec![(3, 4), (4, 2), (3, 2)],
            build: |g, t| {
                let out = g.matmul(t[0], t[1]).unwrap();
                scalarize(g, out, t[2])
            },
            positive: false,
        },
        OpCase {
            name: "transpose",
            shapes: vec![(3, 5), (5, 3)],
            build: |g, t| {
                let out = g.transpose(t[0]);
                scalarize(g, out, t[1])
            },
            positive: false,
        },
        OpCase {
            name: "add",
            shapes: vec![(2, 3), (2, 3), (2, 3)],
            build: |g, t| {
                let out = g.add(t[0], t[1]).unwrap();
                scalarize(g, out, t[2])
            },
            positive: false,
        },
        OpCase {
            name: "sub",
            shapes: vec![(2, 3), (2, 3), (2, 3)],
            build: |g, t| {
                let out = g.sub(t[0], t[1]).unwrap();
                scalarize(g, out, t[2])
            },
            positive: false,
        },
        OpCase {
            name: "mul",
            shapes: vec![(3, 3), (3, 3), (3, 3)],
            build: |g, t| {
                let out = g.mul(t[0], t[1]).unwrap();
                scalarize(g, out, t[2])
            },
            positive: false,
        },
        OpCase {
            name: "mul_same_operand",
            shapes: vec![(2, 4), (2, 4)],
            build: |g, t| {
                let out = g.mul(t[0], t[0]).unwrap();
                scalarize(g, out, t[1])
            },
            positive: false,
        },
        OpCase {
            name: "add_row",
            shapes: vec![(4, 3), (1, 3), (4, 3)],
            build: |g, t| {
                let out = g.add_row(t[0], t[1]).unwrap();
                scalarize(g, out, t[2])
            },
            positive: false,
        },
        OpCase {
            name: "scale",
            shapes: vec![(2, 5), (2, 5)],
            build: |g, t| {
                let out = g.scale(t[0], -1.7);
                scalarize(g, out, t[1])
            },
            positive: false,
        },
        OpCase {
            name: "add_const",
            shapes: vec![(2, 2), (2, 2)],
            build: |g, t| {
                let out = g.add_const(t[0], 0.37);
                scalarize(g, out, t[1])
            },
            positive: false,
        },
        OpCase {
            name: "mul_scalar",
            shapes: vec![(3, 2), (1, 1), (3, 2)],
            build: |g, t| {
                let out = g.mul_scalar(t[0], t[1]).unwrap();
                scalarize(g, out, t[2])
            },
            positive: false,
        },
        OpCase {
            name: "add_scalar",
            shapes: vec![(3, 2), (1, 1), (3, 2)],
            build: |g, t| {
                let out = g.add_scalar(t[0], t[1]).unwrap();
                scalarize(g, out, t[2])
            },
            positive: false,
        },
        OpCase {
            name: "gelu",
            shapes: vec![(3, 4), (3, 4)],
            build: |g, t| {
                let out = g.gelu(t[0]);
                scalarize(g, out, t[1])
            },
            positive: false,
        },
        OpCase {
            name: "exp",
            shapes: vec![(2, 3), (2, 3)],
            build: |g, t| {
                let out = g.exp(t[0]);
                scalarize(g, out, t[1])
            },
            positive: false,
        },
        OpCase {
            name: "ln",
            shapes: vec![(2, 3), (2, 3)],
            build: |g, t| {
                let out = g.ln(t[0]);
                scalarize(g, out, t[1])
            },
            positive: true,
        },
        OpCase {
            name: "layer_norm",
            shapes: vec![(3, 6), (1, 6), (1, 6), (3, 6)],
            build: |g, t| {
                let out = g.layer_norm(t[0], t[1], t[2]).unwrap();
                scalarize(g, out, t[3])
            },
            positive: false,
        },
        OpCase {
            name: "row_softmax",
            shapes: vec![(4, 5), (4, 5)],
            build: |g, t| {
                let out = g.row_softmax(t[0]);
                scalarize(g, out, t[1])
            },
            positive: false,
        },
        OpCase {
            name: "row_log_sum_exp",
            shapes: vec![(4, 3), (4, 1)],
            build: |g, t| {
                let out = g.row_log_sum_exp(t[0]);
                scalarize(g, out, t[1])
            },
            positive: false,
        },
        OpCase {
            name: "l2_normalize_rows",
            shapes: vec![(3, 4), (3, 4)],
            build: |g, t| {
                let out = g.l2_normalize_rows(t[0]);
                scalarize(g, out, t[1])
            },
            positive: false,
        },
        OpCase {
            name: "sum_all",
            shapes: vec![(3, 3)],
            build: |g, t| g.sum_all(t[0]),
            positive: false,
        },
        OpCase {
            name: "mean_all",
            shapes: vec![(2, 7)],
            build: |g, t| g.mean_all(t[0]),
            positive: false,
        },
        OpCase {
            name: "row_sum",
            shapes: vec![(3, 4), (3, 1)],
            build: |g, t| {
                let out = g.row_sum(t[0]);
                scalarize(g, out, t[1])
            },
            positive: false,
        },
        OpCase {
            name: "concat_rows",
            shapes: vec![(2, 3), (3, 3), (1, 3), (6, 3)],
            build: |g, t| {
                let out = g.concat_rows(&[t[0], t[1], t[2]]).unwrap();
                scalarize(g, out, t[3])
            },
            positive: false,
        },
        OpCase {
            name: "slice_rows",
            shapes: vec![(5, 3), (2, 3)],
            build: |g, t| {
                let out = g.slice_rows(t[0], 1, 2).unwrap();
                scalarize(g, out, t[1])
            },
            positive: false,
        },
        OpCase {
            name: "gather_rows_with_duplicates",
            shapes: vec![(4, 3), (3, 3)],
            build: |g, t| {
                let out = g.gather_rows(t[0], &[2, 0, 2]).unwrap();
                scalarize(g, out, t[1])
            },
            positive: false,
        },
        OpCase {
            name: "diag",
            shapes: vec![(4, 4), (4, 1)],
            build: |g, t| {
                let out = g.diag(t[0]).unwrap();
                scalarize(g, out, t[1])
            },
            positive: false,
        },
        OpCase {
            name: "pairwise_dist",
            shapes: vec![(3, 4), (5, 4), (3, 5)],
            build: |g, t| {
                let out = g.pairwise_dist(t[0], t[1]).unwrap();
                scalarize(g, out, t[2])
            },
            positive: false,
        },
        OpCase {
            name: "attention_composition",
            shapes: vec![(4, 3), (3, 3), (3, 3), (3, 3), (4, 3)],
            build: |g, t| {
                let q = g.matmul(t[0], t[1]).unwrap();
                let k = g.matmul(t[0], t[2]).unwrap();
                let v = g.matmul(t[0], t[3]).unwrap();
                let kt = g.transpose(k);
                let scores = g.matmul(q, kt).unwrap();
                let scores = g.scale(scores, 1.0 / 3.0f64.sqrt());
                let attn = g.row_softmax(scores);
                let out = g.matmul(attn, v).unwrap();
                scalarize(g, out, t[4])
            },
            positive: false,
        },
    ]
}

fn random_inputs(shapes: &[(usize, usize)], positive: bool, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, "op-grad");
    shapes
        .iter()
        .map(|&(r, c)| {
            (0..r * c)
                .map(|_| {
                    let v: f64 = rng.sample(StandardNormal);
                    if positive {
                        v.abs() + 0.5
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect()
}

fn eval(case: &OpCase, datas: &[Vec<f64>]) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<TensorId> = case
        .shapes
        .iter()
        .zip(datas)
        .map(|(&(r, c), d)| g.leaf(r, c, d.clone()).unwrap())
        .collect();
    let loss = (case.build)(&mut g, &ids);
    g.scalar_value(loss).unwrap()
}

/// Analytic gradients agree with central finite differences within a
/// relative error of 1e-4 across 100 random cases.
#[test]
fn every_op_matches_central_differences() {
    let step = 1e-6;
    let mut total_cases = 0;
    for case in cases() {
        for trial in 0..4u64 {
            total_cases += 1;
            let seed = trial * 31 + case.name.len() as u64;
            let datas = random_inputs(&case.shapes, case.positive, seed);

            let mut g = Graph::new();
            let ids: Vec<TensorId> = case
                .shapes
                .iter()
                .zip(&datas)
                .map(|(&(r, c), d)| g.leaf(r, c, d.clone()).unwrap())
                .collect();
            let loss = (case.build)(&mut g, &ids);
            g.backward(loss).unwrap();
            let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad(id).to_vec()).collect();

            for (i, data) in datas.iter().enumerate() {
                for j in 0..data.len() {
                    let mut plus = datas.clone();
                    plus[i][j] += step;
                    let mut minus = datas.clone();
                    minus[i][j] -= step;
                    let numeric = (eval(&case, &plus) - eval(&case, &minus)) / (2.0 * step);
                    let rel = (analytic[i][j] - numeric).abs() / numeric.abs().max(1.0);
                    assert!(
                        rel < 1e-4,
                        "{} trial {trial}: input {i}[{j}] analytic {} vs numeric {numeric} (rel {rel})",
                        case.name,
                        analytic[i][j]
                    );
                }
            }
        }
    }
    assert!(total_cases >= 100, "only {total_cases} cases ran");
}

#[test]
fn outputs_stay_finite_on_bounded_inputs() {
    for case in cases() {
        for trial in 0..3u64 {
            let datas = random_inputs(&case.shapes, case.positive, trial + 1000);
            let v = eval(&case, &datas);
            assert!(v.is_finite(), "{}", case.name);
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..8, seed in 0u64..1000) {
        let mut rng = stream_rng(seed, "softmax-prop");
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let mut g = Graph::new();
        let x = g.leaf(rows, cols, data).unwrap();
        let y = g.row_softmax(x);
        for i in 0..rows {
            let s: f64 = g.value(y)[i * cols..(i + 1) * cols].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_normalizes_before_gain_bias(rows in 1usize..5, cols in 2usize..10, seed in 0u64..1000) {
        let mut rng = stream_rng(seed, "ln-prop");
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        // Degenerate near-constant rows are dominated by cancellation noise;
        // the invariant targets real token rows.
        for i in 0..rows {
            let row = &data[i * cols..(i + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            prop_assume!(var > 1e-9);
        }
        let mut g = Graph::new();
        let x = g.leaf(rows, cols, data).unwrap();
        let gain = g.leaf(1, cols, vec![1.0; cols]).unwrap();
        let bias = g.leaf(1, cols, vec![0.0; cols]).unwrap();
        let y = g.layer_norm(x, gain, bias).unwrap();
        for i in 0..rows {
            let row = &g.value(y)[i * cols..(i + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-10, "mean {mean}");
            prop_assert!((var - 1.0).abs() < 1e-8, "var {var}");
        }
    }
}

//! One scalar-valued test function per graph operation, with inputs chosen
//! away from kinks, for finite-difference checking.

use rand::Rng;

use super::{keyed_rng, Graph, Tensor, Var};
use crate::error::Result;

pub type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: OpFn,
}

fn uniform(shape: &[usize], lo: f64, hi: f64, key: u64) -> Tensor {
    let mut rng = keyed_rng(0xCA7A, &[key]);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches length")
}

/// Uniform entries with magnitude at least `gap`.
fn away_from_zero(shape: &[usize], gap: f64, key: u64) -> Tensor {
    let t = uniform(shape, -1.0, 1.0, key);
    let data = t.data().iter().map(|&v| v.signum() * (gap + v.abs())).collect();
    Tensor::new(shape, data).expect("shape matches length")
}

/// `Σ w ⊙ v` with fixed, irregular weights so no output symmetry hides an error.
fn weighted_sum(g: &mut Graph, v: Var) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(&shape, (0..n).map(|i| ((i as f64 + 1.0) * 0.7).sin() + 0.3).collect())?;
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    g.sum(p)
}

pub fn op_cases() -> Vec<OpCase> {
    let m = |r, c, k| uniform(&[r, c], -1.0, 1.0, k);
    let case = |name, inputs, build: OpFn| OpCase { name, inputs, build };
    vec![
        case("matmul", vec![m(3, 4, 1), m(4, 2, 2)], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        case("add", vec![m(2, 3, 3), m(2, 3, 4)], |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        case("sub", vec![m(2, 3, 5), m(2, 3, 6)], |g, v| {
            let y = g.sub(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        case("mul", vec![m(2, 3, 7), m(2, 3, 8)], |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        case("add_bias", vec![m(3, 4, 9), uniform(&[4], -1.0, 1.0, 10)], |g, v| {
            let y = g.add_bias(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        case("scale", vec![m(2, 2, 11)], |g, v| {
            let y = g.scale(v[0], -1.7)?;
            weighted_sum(g, y)
        }),
        case("add_scalar", vec![m(2, 2, 12)], |g, v| {
            let y = g.add_scalar(v[0], 0.4)?;
            let y = g.square(y)?;
            weighted_sum(g, y)
        }),
        case("concat", vec![m(2, 3, 13), m(2, 2, 14), m(1, 5, 15)], |g, v| {
            let a = g.concat(&[v[0], v[1]], 1)?;
            let b = g.concat(&[a, v[2]], 0)?;
            weighted_sum(g, b)
        }),
        case("slice", vec![m(4, 5, 16)], |g, v| {
            let a = g.slice(v[0], 1, 1, 3)?;
            let b = g.slice(a, 0, 2, 2)?;
            weighted_sum(g, b)
        }),
        case("row", vec![m(3, 4, 17)], |g, v| {
            let y = g.row(v[0], 1)?;
            weighted_sum(g, y)
        }),
        case("reshape", vec![m(2, 6, 18)], |g, v| {
            let a = g.reshape(v[0], &[3, 4])?;
            let b = g.reshape(v[0], &[4, 3])?;
            let y = g.matmul(a, b)?;
            weighted_sum(g, y)
        }),
        case("tile_rows", vec![m(1, 3, 19)], |g, v| {
            let y = g.tile_rows(v[0], 4)?;
            weighted_sum(g, y)
        }),
        case("sigmoid", vec![m(2, 3, 20)], |g, v| {
            let y = g.sigmoid(v[0])?;
            weighted_sum(g, y)
        }),
        case("tanh", vec![m(2, 3, 21)], |g, v| {
            let y = g.tanh(v[0])?;
            weighted_sum(g, y)
        }),
        case("relu", vec![away_from_zero(&[2, 4], 0.05, 22)], |g, v| {
            let y = g.relu(v[0])?;
            weighted_sum(g, y)
        }),
        case("log", vec![uniform(&[2, 3], 0.5, 2.0, 23)], |g, v| {
            let y = g.log(v[0])?;
            weighted_sum(g, y)
        }),
        case("sqrt", vec![uniform(&[2, 3], 0.5, 2.0, 24)], |g, v| {
            let y = g.sqrt(v[0])?;
            weighted_sum(g, y)
        }),
        case("square", vec![m(2, 3, 25)], |g, v| {
            let y = g.square(v[0])?;
            weighted_sum(g, y)
        }),
        case("softmax", vec![m(3, 4, 26)], |g, v| {
            let y = g.softmax(v[0])?;
            weighted_sum(g, y)
        }),
        case("log_softmax", vec![m(3, 4, 27)], |g, v| {
            let y = g.log_softmax(v[0])?;
            weighted_sum(g, y)
        }),
        case(
            "layer_norm",
            vec![m(3, 5, 28), uniform(&[5], 0.5, 1.5, 29), uniform(&[5], -0.5, 0.5, 30)],
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2])?;
                weighted_sum(g, y)
            },
        ),
        case(
            "layer_norm_full_gain",
            vec![m(2, 4, 31), uniform(&[2, 4], 0.5, 1.5, 32), m(2, 4, 33)],
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2])?;
                weighted_sum(g, y)
            },
        ),
        case("dropout_mask", vec![m(4, 5, 34)], |g, v| {
            let y = g.dropout_mask(v[0], 0.3, &mut keyed_rng(9, &[1]))?;
            weighted_sum(g, y)
        }),
        case("sum", vec![m(2, 3, 35)], |g, v| {
            let y = g.square(v[0])?;
            g.sum(y)
        }),
        case("mean", vec![m(2, 3, 36)], |g, v| {
            let y = g.square(v[0])?;
            g.mean(y)
        }),
        case("sum_axis0", vec![m(3, 4, 37)], |g, v| {
            let y = g.sum_axis0(v[0])?;
            weighted_sum(g, y)
        }),
        case("mean_axis0", vec![m(3, 4, 38)], |g, v| {
            let y = g.mean_axis0(v[0])?;
            weighted_sum(g, y)
        }),
        case("sum_last", vec![m(3, 4, 39)], |g, v| {
            let y = g.sum_last(v[0])?;
            weighted_sum(g, y)
        }),
        case("l2_norm_rows", vec![m(3, 4, 40)], |g, v| {
            let y = g.l2_norm_rows(v[0])?;
            weighted_sum(g, y)
        }),
        case(
            "conv2d",
            vec![
                uniform(&[2, 2, 4, 4], -1.0, 1.0, 41),
                uniform(&[3, 2, 3, 3], -0.5, 0.5, 42),
                uniform(&[3], -0.2, 0.2, 43),
            ],
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2])?;
                weighted_sum(g, y)
            },
        ),
        case("avg_pool2", vec![uniform(&[1, 2, 4, 6], -1.0, 1.0, 44)], |g, v| {
            let y = g.avg_pool2(v[0])?;
            weighted_sum(g, y)
        }),
        case(
            "global_avg_pool",
            vec![uniform(&[2, 3, 2, 2], -1.0, 1.0, 45)],
            |g, v| {
                let y = g.global_avg_pool(v[0])?;
                weighted_sum(g, y)
            },
        ),
        case(
            "affine",
            vec![m(2, 3, 46), m(3, 4, 47), uniform(&[4], -1.0, 1.0, 48)],
            |g, v| {
                let y = g.affine(v[0], v[1], v[2])?;
                weighted_sum(g, y)
            },
        ),
        case("cross_entropy", vec![uniform(&[5], -2.0, 2.0, 49)], |g, v| {
            g.cross_entropy(v[0], 3)
        }),
        case("cross_entropy_rows", vec![m(3, 4, 50)], |g, v| {
            g.cross_entropy_rows(v[0], &[0, 3, 1])
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::PRIMITIVE_OPS;

    #[test]
    fn cases_cover_every_primitive() {
        let mut seen = std::collections::BTreeSet::new();
        for c in op_cases() {
            let mut g = Graph::new();
            let vars: Vec<Var> = c.inputs.iter().map(|t| g.param(t.clone())).collect();
            let out = (c.build)(&mut g, &vars).unwrap();
            assert_eq!(g.value(out).numel(), 1, "{} must be scalar", c.name);
            seen.extend(g.op_kinds());
        }
        for op in PRIMITIVE_OPS {
            assert!(seen.contains(op), "no case exercises {op}");
        }
    }

    #[test]
    fn relu_inputs_avoid_the_kink() {
        let t = away_from_zero(&[10, 10], 0.05, 1);
        assert!(t.data().iter().all(|v| v.abs() >= 0.05));
    }
}

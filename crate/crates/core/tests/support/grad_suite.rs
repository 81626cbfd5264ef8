//! Finite-difference checks for every differentiable tape operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sharp::sharing::{transform_on_tape, FactorVars, SharingError, TransformKind};
use sharp::tensor::kernels::AttnShape;
use sharp::tensor::{grad_check, Tape, Tensor, Var};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

type Forward = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> sharp::tensor::Result<Var>>;

pub struct Case {
    pub inputs: Vec<Tensor<f64>>,
    pub forward: Forward,
}

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=5)
}

/// Reduce a tensor to a scalar with fixed, position-dependent weights so
/// that every output element gets a distinct gradient.
fn project(t: &mut Tape<f64>, out: Var) -> sharp::tensor::Result<Var> {
    let shape = t.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| (1.3 * i as f64 + 0.7).sin()).collect();
    let w = t.constant(Tensor::new(shape, w)?);
    let p = t.mul(out, w)?;
    Ok(t.sum(p))
}

fn case(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> sharp::tensor::Result<Var> + 'static) -> Case {
    Case {
        inputs,
        forward: Box::new(f),
    }
}

fn transform_case(kind: TransformKind, rng: &mut ChaCha8Rng) -> Case {
    let (rows, cols, r) = (dim(rng), dim(rng), rng.gen_range(1..=3));
    let extra = match kind {
        TransformKind::G0 => None,
        TransformKind::G1 => Some(([r, cols], [r, cols])),
        TransformKind::G2 => Some(([rows, r], [rows, r])),
        TransformKind::G3 => Some(([rows, r], [r, cols])),
    };
    let mut inputs = vec![
        randn(&[rows, cols], rng),
        randn(&[1], rng),
        randn(&[rows, r], rng),
        randn(&[r, cols], rng),
    ];
    if let Some((x, y)) = extra {
        inputs.push(randn(&x, rng));
        inputs.push(randn(&y, rng));
    }
    case(inputs, move |t, v| {
        let f = FactorVars {
            alpha: v[1],
            a: v[2],
            b: v[3],
            extra: (v.len() == 6).then(|| (v[4], v[5])),
        };
        let out = transform_on_tape(t, kind, v[0], &f).map_err(|e| match e {
            SharingError::Tensor(e) => e,
            other => panic!("{other}"),
        })?;
        project(t, out)
    })
}

pub fn op_names() -> Vec<&'static str> {
    vec![
        "matmul",
        "matmul_nt",
        "transpose",
        "reshape",
        "add",
        "add_trailing",
        "add_scalar",
        "sub",
        "mul",
        "scale",
        "scale_by",
        "silu",
        "rmsnorm",
        "embedding",
        "causal_attention",
        "cross_entropy_mean",
        "cross_entropy_masked",
        "sum",
        "sum_squares",
        "mse",
        "transform_g0",
        "transform_g1",
        "transform_g2",
        "transform_g3",
    ]
}

pub fn make_case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    match op {
        "matmul" => {
            let (m, k, n) = (dim(rng), dim(rng), dim(rng));
            case(vec![randn(&[m, k], rng), randn(&[k, n], rng)], |t, v| {
                let o = t.matmul(v[0], v[1])?;
                project(t, o)
            })
        }
        "matmul_nt" => {
            let (m, k, n) = (dim(rng), dim(rng), dim(rng));
            case(vec![randn(&[m, k], rng), randn(&[n, k], rng)], |t, v| {
                let o = t.matmul_nt(v[0], v[1])?;
                project(t, o)
            })
        }
        "transpose" => {
            let (m, n) = (dim(rng), dim(rng));
            case(vec![randn(&[m, n], rng)], |t, v| {
                let o = t.transpose(v[0])?;
                project(t, o)
            })
        }
        "reshape" => {
            let (m, n) = (dim(rng), dim(rng));
            case(vec![randn(&[m, n], rng)], move |t, v| {
                let o = t.reshape(v[0], &[n, m])?;
                project(t, o)
            })
        }
        "add" | "sub" | "mul" | "mse" => {
            let (m, n) = (dim(rng), dim(rng));
            let name = op.to_string();
            case(vec![randn(&[m, n], rng), randn(&[m, n], rng)], move |t, v| match name.as_str() {
                "add" => {
                    let o = t.add(v[0], v[1])?;
                    project(t, o)
                }
                "sub" => {
                    let o = t.sub(v[0], v[1])?;
                    project(t, o)
                }
                "mul" => {
                    let o = t.mul(v[0], v[1])?;
                    project(t, o)
                }
                _ => t.mse(v[0], v[1]),
            })
        }
        "add_trailing" => {
            let (m, n) = (dim(rng), dim(rng));
            case(vec![randn(&[m, n], rng), randn(&[n], rng)], |t, v| {
                let o = t.add(v[0], v[1])?;
                project(t, o)
            })
        }
        "add_scalar" => {
            let (m, n) = (dim(rng), dim(rng));
            case(vec![randn(&[m, n], rng), randn(&[1], rng)], |t, v| {
                let o = t.add(v[0], v[1])?;
                project(t, o)
            })
        }
        "scale" => {
            let (m, n) = (dim(rng), dim(rng));
            let s: f64 = rng.gen_range(-2.0..2.0);
            case(vec![randn(&[m, n], rng)], move |t, v| {
                let o = t.scale(v[0], s);
                project(t, o)
            })
        }
        "scale_by" => {
            let (m, n) = (dim(rng), dim(rng));
            case(vec![randn(&[m, n], rng), randn(&[1], rng)], |t, v| {
                let o = t.scale_by(v[0], v[1])?;
                project(t, o)
            })
        }
        "silu" => {
            let (m, n) = (dim(rng), dim(rng));
            case(vec![randn(&[m, n], rng)], |t, v| {
                let o = t.silu(v[0]);
                project(t, o)
            })
        }
        "rmsnorm" => {
            let (m, d) = (dim(rng), rng.gen_range(2..=6));
            case(vec![randn(&[m, d], rng), randn(&[d], rng)], |t, v| {
                let o = t.rmsnorm(v[0], v[1])?;
                project(t, o)
            })
        }
        "embedding" => {
            let (vocab, d, n) = (rng.gen_range(2..=6), dim(rng), rng.gen_range(1..=8));
            let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..vocab)).collect();
            case(vec![randn(&[vocab, d], rng)], move |t, v| {
                let o = t.embedding(v[0], &ids)?;
                project(t, o)
            })
        }
        "causal_attention" => {
            let shape = AttnShape {
                batch: rng.gen_range(1..=2),
                seq: rng.gen_range(1..=4),
                heads: rng.gen_range(1..=2),
                head_dim: rng.gen_range(1..=3),
            };
            let s = [shape.batch * shape.seq, shape.heads * shape.head_dim];
            case(vec![randn(&s, rng), randn(&s, rng), randn(&s, rng)], move |t, v| {
                let o = t.causal_attention(v[0], v[1], v[2], shape)?;
                project(t, o)
            })
        }
        "cross_entropy_mean" => {
            let (m, vocab) = (dim(rng), rng.gen_range(2..=7));
            let targets: Vec<usize> = (0..m).map(|_| rng.gen_range(0..vocab)).collect();
            case(vec![randn(&[m, vocab], rng)], move |t, v| t.cross_entropy_mean(v[0], &targets))
        }
        "cross_entropy_masked" => {
            let (m, vocab) = (rng.gen_range(2..=6), rng.gen_range(2..=7));
            let targets: Vec<usize> = (0..m).map(|_| rng.gen_range(0..vocab)).collect();
            let mut mask: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.6)).collect();
            mask[0] = true;
            case(vec![randn(&[m, vocab], rng)], move |t, v| {
                t.cross_entropy_masked(v[0], &targets, Some(&mask))
            })
        }
        "sum" => {
            let (m, n) = (dim(rng), dim(rng));
            case(vec![randn(&[m, n], rng)], |t, v| Ok(t.sum(v[0])))
        }
        "sum_squares" => {
            let (m, n) = (dim(rng), dim(rng));
            case(vec![randn(&[m, n], rng)], |t, v| Ok(t.sum_squares(v[0])))
        }
        "transform_g0" => transform_case(TransformKind::G0, rng),
        "transform_g1" => transform_case(TransformKind::G1, rng),
        "transform_g2" => transform_case(TransformKind::G2, rng),
        "transform_g3" => transform_case(TransformKind::G3, rng),
        other => panic!("no gradient case for {other}"),
    }
}

pub fn check_op(op: &'static str, instances: usize, seed: u64) -> OpCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let c = make_case(op, &mut rng);
        let r = grad_check(&c.forward, &c.inputs, STEP).unwrap_or_else(|e| panic!("{op}: {e}"));
        assert!(r.checked > 0);
        worst = worst.max(r.max_rel_error);
    }
    OpCheck {
        op,
        instances,
        max_rel_error: worst,
    }
}

pub fn run_suite(instances: usize, seed: u64) -> Vec<OpCheck> {
    op_names()
        .into_iter()
        .enumerate()
        .map(|(i, op)| check_op(op, instances, seed.wrapping_add(i as u64)))
        .collect()
}

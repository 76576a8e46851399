//! Finite-difference oracles shared by the gradient tests and the acceptance
//! suite.
#![allow(dead_code)]

use fedtta_core::fedtta::{inner_adapt, meta_gradients, meta_loss, MetaRates, Prox};
use fedtta_core::models::{forward_prediction, MlpSpec, ModelParams};
use fedtta_core::tensor::{check_gradients, finite_diff_grad, grad, ops, GradCheck, Graph, Tensor};
use fedtta_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

pub type OpFn = fn(&[Tensor]) -> Result<Tensor>;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
}

/// Scalarizes an op output with fixed weights so every output coordinate
/// contributes.
pub fn weighted(out: &Tensor, seed: u64) -> Result<Tensor> {
    if out.shape().is_empty() {
        return Ok(out.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, out.shape(), -1.0, 1.0);
    Ok(ops::sum(&ops::mul(out, &w)?))
}

pub fn check_op(f: OpFn, inputs: &[Tensor], rel: f64) -> GradCheck {
    let graph = Graph::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| graph.leaf(t)).collect();
    let loss = weighted(&f(&leaves).unwrap(), 99).unwrap();
    let wrt: Vec<&Tensor> = leaves.iter().collect();
    let analytic = grad(&loss, &wrt, false).unwrap();
    let numeric = finite_diff_grad(|p| Ok(weighted(&f(p)?, 99)?.item()), inputs, H).unwrap();
    check_gradients(&analytic, &numeric, rel, 1e-8)
}

pub type OpCase = (&'static str, OpFn, Vec<Vec<usize>>, (f64, f64));

pub fn op_table() -> Vec<OpCase> {
    let s = (-2.0, 2.0);
    let pos = (0.5, 2.0);
    vec![
        (
            "matmul",
            |t| ops::matmul(&t[0], &t[1]),
            vec![vec![3, 4], vec![4, 2]],
            s,
        ),
        ("transpose", |t| ops::transpose(&t[0]), vec![vec![3, 2]], s),
        (
            "add",
            |t| ops::add(&t[0], &t[1]),
            vec![vec![2, 3], vec![2, 3]],
            s,
        ),
        (
            "sub",
            |t| ops::sub(&t[0], &t[1]),
            vec![vec![2, 3], vec![2, 3]],
            s,
        ),
        (
            "mul",
            |t| ops::mul(&t[0], &t[1]),
            vec![vec![2, 3], vec![2, 3]],
            s,
        ),
        (
            "div",
            |t| ops::div(&t[0], &t[1]),
            vec![vec![2, 3], vec![2, 3]],
            pos,
        ),
        (
            "add_row",
            |t| ops::add_row(&t[0], &t[1]),
            vec![vec![3, 2], vec![2]],
            s,
        ),
        ("sum_rows", |t| ops::sum_rows(&t[0]), vec![vec![3, 2]], s),
        (
            "broadcast_rows",
            |t| ops::broadcast_rows(&t[0], 3),
            vec![vec![2]],
            s,
        ),
        ("row_sum", |t| ops::row_sum(&t[0]), vec![vec![3, 4]], s),
        (
            "expand_cols",
            |t| ops::expand_cols(&t[0], 3),
            vec![vec![4]],
            s,
        ),
        ("sum", |t| Ok(ops::sum(&t[0])), vec![vec![2, 3]], s),
        ("mean", |t| Ok(ops::mean(&t[0])), vec![vec![2, 3]], s),
        (
            "expand",
            |t| ops::expand(&ops::sum(&t[0]), &[2, 2]),
            vec![vec![3]],
            s,
        ),
        ("scale", |t| Ok(ops::scale(&t[0], -1.7)), vec![vec![4]], s),
        ("neg", |t| Ok(ops::neg(&t[0])), vec![vec![4]], s),
        (
            "reshape",
            |t| ops::reshape(&t[0], &[3, 2]),
            vec![vec![2, 3]],
            s,
        ),
        ("relu", |t| Ok(ops::relu(&t[0])), vec![vec![3, 3]], s),
        ("exp", |t| Ok(ops::exp(&t[0])), vec![vec![5]], s),
        ("log", |t| Ok(ops::log(&t[0])), vec![vec![5]], pos),
        ("sqrt", |t| Ok(ops::sqrt(&t[0])), vec![vec![5]], pos),
        ("softmax", |t| ops::softmax(&t[0]), vec![vec![3, 4]], s),
        (
            "log_softmax",
            |t| ops::log_softmax(&t[0]),
            vec![vec![3, 4]],
            s,
        ),
        ("l2_norm", |t| Ok(ops::l2_norm(&t[0])), vec![vec![6]], s),
        (
            "cross_entropy",
            |t| ops::cross_entropy(&t[0], &[2, 0, 1]),
            vec![vec![3, 4]],
            s,
        ),
        (
            "entropy",
            |t| ops::entropy(&ops::softmax(&t[0])?),
            vec![vec![3, 4]],
            s,
        ),
        (
            "kl_divergence",
            |t| ops::kl_divergence(&ops::softmax(&t[0])?, &ops::softmax(&t[1])?),
            vec![vec![3, 4], vec![3, 4]],
            s,
        ),
        (
            "entropy_logits",
            |t| ops::entropy_logits(&t[0]),
            vec![vec![3, 4]],
            s,
        ),
        (
            "kl_divergence_logits",
            |t| ops::kl_divergence_logits(&t[0], &t[1]),
            vec![vec![3, 4], vec![3, 4]],
            s,
        ),
    ]
}

pub fn small_pair() -> (ModelParams, ModelParams, ModelParams) {
    let psi = ModelParams::init(&MlpSpec::new(vec![4, 8, 3]).unwrap(), 11);
    let phi = ModelParams::init(&MlpSpec::new(vec![3, 6, 6, 1]).unwrap(), 12);
    let server = ModelParams::init(&MlpSpec::new(vec![4, 8, 3]).unwrap(), 13);
    assert!(psi.spec().param_count() + phi.spec().param_count() <= 500);
    (psi, phi, server)
}

pub fn batch() -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    (
        uniform(&mut rng, &[6, 4], -2.0, 2.0),
        vec![0, 1, 2, 2, 1, 0],
    )
}

pub fn composed_objective(
    p: &[Tensor],
    n_psi: usize,
    server: &ModelParams,
    x: &Tensor,
    y: &[usize],
    rates: &MetaRates,
) -> Result<f64> {
    let graph = Graph::new();
    let leaves: Vec<Tensor> = p.iter().map(|t| graph.leaf(t)).collect();
    let (psi, phi) = leaves.split_at(n_psi);
    let psi_tilde = inner_adapt(psi, phi, x, rates.eta_inner)?;
    let z = forward_prediction(psi, x)?;
    let z_server = forward_prediction(server.tensors(), x)?;
    let prox = Prox {
        z: &z,
        z_server: &z_server,
        mu: rates.mu,
    };
    Ok(meta_loss(&psi_tilde, x, y, Some(prox))?.item())
}

/// Analytic meta-gradient of the small pair against finite differences of
/// the composed objective, both parameter sets at once.
pub fn check_meta_gradient(mu: f64) -> (GradCheck, bool) {
    let (psi, phi, server) = small_pair();
    let (x, y) = batch();
    let rates = MetaRates {
        eta_inner: 0.4,
        eta_outer: 0.1,
        eta_adapt: 0.01,
        mu,
        clip: None,
    };
    let g = meta_gradients(&psi, &phi, Some(&server), &x, &y, &rates).unwrap();
    let params: Vec<Tensor> = psi.tensors().iter().chain(phi.tensors()).cloned().collect();
    let n_psi = psi.tensors().len();
    let numeric = finite_diff_grad(
        |p| composed_objective(p, n_psi, &server, &x, &y, &rates),
        &params,
        H,
    )
    .unwrap();
    let analytic: Vec<Tensor> = g.psi.iter().chain(&g.phi).cloned().collect();
    let phi_nonzero = g.phi.iter().any(|t| t.data().iter().any(|v| *v != 0.0));
    (
        check_gradients(&analytic, &numeric, 1e-4, 1e-8),
        phi_nonzero,
    )
}

/// Differentiates a weighted sum of each op's gradient once more, which
/// exercises every backward rule as a recorded computation. Linear ops, whose
/// first derivative is constant, are skipped along with `relu`.
pub fn second_order_checks(rel: f64) -> Vec<(&'static str, GradCheck)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut out = Vec::new();
    for (name, f, shapes, (lo, hi)) in op_table() {
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| uniform(&mut rng, s, lo, hi))
            .collect();
        if name == "relu" {
            continue;
        }
        let first = |p: &[Tensor]| -> Result<Tensor> {
            let graph = p[0].graph().cloned().unwrap_or_default();
            let leaves: Vec<Tensor> = p
                .iter()
                .map(|t| {
                    if t.is_attached() {
                        t.clone()
                    } else {
                        graph.leaf(t)
                    }
                })
                .collect();
            let loss = weighted(&f(&leaves)?, 5)?;
            let wrt: Vec<&Tensor> = leaves.iter().collect();
            let g = grad(&loss, &wrt, true)?;
            let mut total = weighted(&g[0], 6)?;
            for gi in &g[1..] {
                total = ops::add(&total, &weighted(gi, 6)?)?;
            }
            Ok(total)
        };
        let graph = Graph::new();
        let leaves: Vec<Tensor> = inputs.iter().map(|t| graph.leaf(t)).collect();
        let total = first(&leaves).unwrap();
        let wrt: Vec<&Tensor> = leaves.iter().collect();
        let analytic = match grad(&total, &wrt, false) {
            Ok(g) => g,
            Err(fedtta_core::Error::Unreachable(_)) => continue,
            Err(e) => panic!("{name}: {e}"),
        };
        let numeric = finite_diff_grad(|p| Ok(first(p)?.item()), &inputs, H).unwrap();
        out.push((name, check_gradients(&analytic, &numeric, rel, 1e-7)));
    }
    out
}

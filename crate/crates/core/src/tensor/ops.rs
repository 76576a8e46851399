//! Differentiable operations.
//!
//! Every op checks shapes, computes its value eagerly and records itself when
//! any input is attached. Backward rules are expressed with these same ops.

use super::graph::record;
use super::{pairwise_sum, Tensor};
use crate::error::{Error, Result};

/// Probabilities at or below this are treated as exact zeros in `p log p`.
pub const PROB_FLOOR: f64 = 1e-12;

const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    AddRow,
    SumRows,
    BroadcastRows,
    RowSum,
    ExpandCols,
    Sum,
    Expand,
    Scale(f64),
    Reshape,
    Relu,
    Exp,
    Log,
    Sqrt,
    Softmax,
    LogSoftmax,
    L2Norm,
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> Error {
    Error::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| shape_err(op, &[t.shape()]))
}

/// `[rows, last]` view used by the last-axis ops.
fn last_axis(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape().split_last() {
        Some((&last, rest)) if last > 0 => Ok((rest.iter().product(), last)),
        _ => Err(shape_err(op, &[t.shape()])),
    }
}

fn map(op: Op, a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = a.data().iter().map(|&v| f(v)).collect();
    record(op, &[a], a.shape().to_vec(), data).expect("unary op cannot mix graphs")
}

fn zip(
    op: Op,
    name: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(name, &[a.shape(), b.shape()]));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    record(op, &[a, b], a.shape().to_vec(), data)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims("matmul", a)?;
    let (k2, n) = matrix_dims("matmul", b)?;
    if k != k2 {
        return Err(shape_err("matmul", &[a.shape(), b.shape()]));
    }
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: slices are sized m*k, k*n and m*n with row-major strides.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data().as_ptr(),
                k as isize,
                1,
                b.data().as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    record(Op::MatMul, &[a, b], vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = matrix_dims("transpose", a)?;
    let src = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    record(Op::Transpose, &[a], vec![n, m], out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip(Op::Add, "add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip(Op::Sub, "sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip(Op::Mul, "mul", a, b, |x, y| x * y)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip(Op::Div, "div", a, b, |x, y| x / y)
}

/// `a[m, n] + b[n]`, broadcasting `b` over the leading axis.
pub fn add_row(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = matrix_dims("add_row", a)?;
    if b.shape() != [n] {
        return Err(shape_err("add_row", &[a.shape(), b.shape()]));
    }
    let bias = b.data();
    let mut out = a.data().to_vec();
    for row in out.chunks_exact_mut(n.max(1)).take(m) {
        for (v, bv) in row.iter_mut().zip(bias) {
            *v += bv;
        }
    }
    record(Op::AddRow, &[a, b], vec![m, n], out)
}

/// Sum over the leading axis: `[m, n] -> [n]`.
pub fn sum_rows(a: &Tensor) -> Result<Tensor> {
    let (m, n) = matrix_dims("sum_rows", a)?;
    let mut out = vec![0.0; n];
    for i in 0..m {
        for (o, v) in out.iter_mut().zip(a.row(i)) {
            *o += v;
        }
    }
    record(Op::SumRows, &[a], vec![n], out)
}

/// Repeats a vector `[n]` as `m` rows.
pub fn broadcast_rows(a: &Tensor, m: usize) -> Result<Tensor> {
    if a.shape().len() != 1 {
        return Err(shape_err("broadcast_rows", &[a.shape()]));
    }
    let n = a.numel();
    let mut out = Vec::with_capacity(m * n);
    for _ in 0..m {
        out.extend_from_slice(a.data());
    }
    record(Op::BroadcastRows, &[a], vec![m, n], out)
}

/// Sum over the last axis: `[.., n] -> [..]`.
pub fn row_sum(a: &Tensor) -> Result<Tensor> {
    let (rows, n) = last_axis("row_sum", a)?;
    let out = (0..rows)
        .map(|i| pairwise_sum(&a.data()[i * n..(i + 1) * n]))
        .collect();
    let shape = a.shape()[..a.shape().len() - 1].to_vec();
    record(Op::RowSum, &[a], shape, out)
}

/// Repeats each element of `[m]` across `n` columns: `[m] -> [m, n]`.
pub fn expand_cols(a: &Tensor, n: usize) -> Result<Tensor> {
    if a.shape().len() != 1 {
        return Err(shape_err("expand_cols", &[a.shape()]));
    }
    let out = a
        .data()
        .iter()
        .flat_map(|&v| std::iter::repeat_n(v, n))
        .collect();
    record(Op::ExpandCols, &[a], vec![a.numel(), n], out)
}

/// Sum of all elements, as a scalar.
pub fn sum(a: &Tensor) -> Tensor {
    let out = vec![pairwise_sum(a.data())];
    record(Op::Sum, &[a], Vec::new(), out).expect("unary op cannot mix graphs")
}

pub fn mean(a: &Tensor) -> Tensor {
    let n = a.numel().max(1) as f64;
    scale(&sum(a), 1.0 / n)
}

/// Broadcasts a single-element tensor to `shape`.
pub fn expand(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if a.numel() != 1 {
        return Err(shape_err("expand", &[a.shape(), shape]));
    }
    let out = vec![a.data()[0]; shape.iter().product()];
    record(Op::Expand, &[a], shape.to_vec(), out)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    map(Op::Scale(c), a, |v| c * v)
}

pub fn neg(a: &Tensor) -> Tensor {
    scale(a, -1.0)
}

pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if shape.iter().product::<usize>() != a.numel() {
        return Err(shape_err("reshape", &[a.shape(), shape]));
    }
    record(Op::Reshape, &[a], shape.to_vec(), a.data().to_vec())
}

pub fn relu(a: &Tensor) -> Tensor {
    map(Op::Relu, a, |v| v.max(0.0))
}

pub fn exp(a: &Tensor) -> Tensor {
    map(Op::Exp, a, f64::exp)
}

pub fn log(a: &Tensor) -> Tensor {
    map(Op::Log, a, f64::ln)
}

pub fn sqrt(a: &Tensor) -> Tensor {
    map(Op::Sqrt, a, f64::sqrt)
}

/// Softmax over the last axis, max-subtracted.
pub fn softmax(a: &Tensor) -> Result<Tensor> {
    let (rows, n) = last_axis("softmax", a)?;
    let mut out = a.data().to_vec();
    for r in 0..rows {
        let row = &mut out[r * n..(r + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for v in row.iter_mut() {
            *v = (*v - max).exp();
        }
        let z = pairwise_sum(row);
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    record(Op::Softmax, &[a], a.shape().to_vec(), out)
}

/// Log-softmax over the last axis, max-subtracted.
pub fn log_softmax(a: &Tensor) -> Result<Tensor> {
    let (rows, n) = last_axis("log_softmax", a)?;
    let mut out = a.data().to_vec();
    for r in 0..rows {
        let row = &mut out[r * n..(r + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let lse = max + pairwise_sum(&exps).ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    record(Op::LogSoftmax, &[a], a.shape().to_vec(), out)
}

/// Euclidean norm of all elements, as a scalar.
pub fn l2_norm(a: &Tensor) -> Tensor {
    let squares: Vec<f64> = a.data().iter().map(|v| v * v).collect();
    let out = vec![pairwise_sum(&squares).sqrt()];
    record(Op::L2Norm, &[a], Vec::new(), out).expect("unary op cannot mix graphs")
}

/// Mean cross-entropy of `logits[B, C]` against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, c) = matrix_dims("cross_entropy", logits)?;
    if labels.len() != b || b == 0 {
        return Err(shape_err(
            "cross_entropy",
            &[logits.shape(), &[labels.len()]],
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Domain {
            op: "cross_entropy",
            message: format!("label {bad} out of range for {c} classes"),
        });
    }
    let mut onehot = vec![0.0; b * c];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * c + y] = 1.0;
    }
    let picked = mul(&log_softmax(logits)?, &Tensor::matrix(b, c, onehot))?;
    Ok(scale(&sum(&picked), -1.0 / b as f64))
}

fn check_probability_rows(op: &'static str, p: &Tensor) -> Result<()> {
    let (rows, n) = last_axis(op, p)?;
    for r in 0..rows {
        let row = &p.data()[r * n..(r + 1) * n];
        if row.iter().any(|v| !(0.0..=1.0 + ROW_SUM_TOL).contains(v)) {
            return Err(Error::Domain {
                op,
                message: format!("row {r} has entries outside [0, 1]"),
            });
        }
        let total = pairwise_sum(row);
        if (total - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Domain {
                op,
                message: format!("row {r} sums to {total}"),
            });
        }
    }
    Ok(())
}

/// Constant 0/1 mask of entries above [`PROB_FLOOR`].
fn support_mask(p: &Tensor) -> Tensor {
    let data = p
        .data()
        .iter()
        .map(|&v| if v > PROB_FLOOR { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(p.shape().to_vec(), data)
}

/// `log p` on the support of `p` and `0` elsewhere.
fn masked_log(p: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let filler: Vec<f64> = mask.data().iter().map(|m| 1.0 - m).collect();
    let safe = add(&mul(p, mask)?, &Tensor::new(p.shape().to_vec(), filler))?;
    Ok(log(&safe))
}

/// Per-row entropy `-Σ p log p` of probability rows.
pub fn entropy(p: &Tensor) -> Result<Tensor> {
    check_probability_rows("entropy", p)?;
    let mask = support_mask(p);
    let plogp = mul(p, &masked_log(p, &mask)?)?;
    Ok(neg(&row_sum(&plogp)?))
}

/// Per-row `KL(p || q)` of probability rows.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    check_probability_rows("kl_divergence", p)?;
    check_probability_rows("kl_divergence", q)?;
    if p.shape() != q.shape() {
        return Err(shape_err("kl_divergence", &[p.shape(), q.shape()]));
    }
    if p.data()
        .iter()
        .zip(q.data())
        .any(|(&pv, &qv)| pv > PROB_FLOOR && qv <= 0.0)
    {
        return Err(Error::Domain {
            op: "kl_divergence",
            message: "q vanishes where p has mass".into(),
        });
    }
    let mask = support_mask(p);
    let log_ratio = sub(&masked_log(p, &mask)?, &masked_log(q, &mask)?)?;
    row_sum(&mul(p, &log_ratio)?)
}

/// Per-row entropy of `softmax(logits)`, computed from log-softmax.
pub fn entropy_logits(logits: &Tensor) -> Result<Tensor> {
    let p = softmax(logits)?;
    let mask = support_mask(&p);
    let plogp = mul(&mul(&p, &log_softmax(logits)?)?, &mask)?;
    Ok(neg(&row_sum(&plogp)?))
}

/// Per-row `KL(softmax(zp) || softmax(zq))`, computed from log-softmax.
pub fn kl_divergence_logits(zp: &Tensor, zq: &Tensor) -> Result<Tensor> {
    if zp.shape() != zq.shape() {
        return Err(shape_err("kl_divergence_logits", &[zp.shape(), zq.shape()]));
    }
    let p = softmax(zp)?;
    let mask = support_mask(&p);
    let log_ratio = sub(&log_softmax(zp)?, &log_softmax(zq)?)?;
    row_sum(&mul(&mul(&p, &log_ratio)?, &mask)?)
}

/// Input gradients of one recorded op, given the output gradient `g`.
pub(crate) fn backward(
    op: &Op,
    inputs: &[Tensor],
    output: &Tensor,
    g: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let grads = match op {
        Op::Leaf => Vec::new(),
        Op::MatMul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            vec![
                want(0).then(|| matmul(g, &transpose(b)?)).transpose()?,
                want(1).then(|| matmul(&transpose(a)?, g)).transpose()?,
            ]
        }
        Op::Transpose => vec![Some(transpose(g)?)],
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), want(1).then(|| neg(g))],
        Op::Mul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            vec![
                want(0).then(|| mul(g, b)).transpose()?,
                want(1).then(|| mul(g, a)).transpose()?,
            ]
        }
        Op::Div => {
            let b = &inputs[1];
            let ga = div(g, b)?;
            let gb = if want(1) {
                Some(neg(&mul(&ga, output)?))
            } else {
                None
            };
            vec![Some(ga), gb]
        }
        Op::AddRow => vec![Some(g.clone()), want(1).then(|| sum_rows(g)).transpose()?],
        Op::SumRows => {
            let m = inputs[0].shape()[0];
            vec![Some(broadcast_rows(g, m)?)]
        }
        Op::BroadcastRows => vec![Some(sum_rows(g)?)],
        Op::RowSum => {
            let n = *inputs[0]
                .shape()
                .last()
                .expect("row_sum input has rank >= 1");
            let flat = reshape(g, &[g.numel()])?;
            vec![Some(reshape(&expand_cols(&flat, n)?, inputs[0].shape())?)]
        }
        Op::ExpandCols => vec![Some(row_sum(g)?)],
        Op::Sum => vec![Some(expand(g, inputs[0].shape())?)],
        Op::Expand => vec![Some(reshape(&sum(g), inputs[0].shape())?)],
        Op::Scale(c) => vec![Some(scale(g, *c))],
        Op::Reshape => vec![Some(reshape(g, inputs[0].shape())?)],
        Op::Relu => {
            let mask = inputs[0]
                .data()
                .iter()
                .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
                .collect();
            vec![Some(mul(g, &Tensor::new(g.shape().to_vec(), mask))?)]
        }
        Op::Exp => vec![Some(mul(g, output)?)],
        Op::Log => vec![Some(div(g, &inputs[0])?)],
        Op::Sqrt => vec![Some(div(&scale(g, 0.5), output)?)],
        Op::Softmax => {
            // s * (g - rowsum(g * s))
            let (rows, n) = last_axis("softmax", output)?;
            let inner = reshape(&row_sum(&mul(g, output)?)?, &[rows])?;
            let centered = sub(g, &reshape(&expand_cols(&inner, n)?, g.shape())?)?;
            vec![Some(mul(output, &centered)?)]
        }
        Op::LogSoftmax => {
            // g - softmax * rowsum(g), with softmax = exp(output)
            let (rows, n) = last_axis("log_softmax", output)?;
            let total = reshape(&row_sum(g)?, &[rows])?;
            let spread = reshape(&expand_cols(&total, n)?, g.shape())?;
            vec![Some(sub(g, &mul(&exp(output), &spread)?)?)]
        }
        Op::L2Norm => {
            let x = &inputs[0];
            if output.item() > 0.0 {
                let coeff = expand(&div(g, output)?, x.shape())?;
                vec![Some(mul(&coeff, x)?)]
            } else {
                // Zero subgradient at the origin, still wired to `x`.
                vec![Some(scale(x, 0.0))]
            }
        }
    };
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad, Graph};

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let s = softmax(&Tensor::vector(vec![0.0; 3])).unwrap();
        assert!(close(s.data(), &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn kl_of_identical_rows_is_zero() {
        let p = Tensor::matrix(2, 3, vec![0.2, 0.3, 0.5, 1.0, 0.0, 0.0]);
        let kl = kl_divergence(&p, &p).unwrap();
        assert_eq!(kl.data(), &[0.0, 0.0]);
    }

    #[test]
    fn l2_norm_of_3_4() {
        assert_eq!(l2_norm(&Tensor::vector(vec![3.0, 4.0])).item(), 5.0);
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        match err {
            Error::Shape { op, shapes } => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn entropy_rejects_non_probability_rows() {
        let bad = Tensor::matrix(1, 2, vec![0.7, 0.7]);
        assert!(matches!(entropy(&bad), Err(Error::Domain { .. })));
        let neg = Tensor::matrix(1, 2, vec![1.5, -0.5]);
        assert!(matches!(
            kl_divergence(&neg, &neg),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn entropy_of_uniform_and_onehot() {
        let p = Tensor::matrix(2, 4, vec![0.25, 0.25, 0.25, 0.25, 0.0, 1.0, 0.0, 0.0]);
        let h = entropy(&p).unwrap();
        assert!((h.data()[0] - 4f64.ln()).abs() < 1e-15);
        assert_eq!(h.data()[1], 0.0);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::vector(vec![1.0, 2.0, 3.0]));
        let loss = sum(&mul(&x, &x).unwrap());
        let dx = grad(&loss, &[&x], false).unwrap();
        assert_eq!(dx[0].data(), &[2.0, 4.0, 6.0]);
        assert!(!dx[0].is_attached());
    }

    #[test]
    fn second_derivative_of_cube() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::vector(vec![1.0, 2.0]));
        let cube = mul(&mul(&x, &x).unwrap(), &x).unwrap();
        let first = grad(&sum(&cube), &[&x], true).unwrap();
        assert!(first[0].is_attached());
        assert_eq!(first[0].data(), &[3.0, 12.0]);
        let second = grad(&sum(&first[0]), &[&x], false).unwrap();
        assert_eq!(second[0].data(), &[6.0, 12.0]);
    }

    #[test]
    fn grad_errors() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::vector(vec![1.0, 2.0]));
        let y = g.leaf(&Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(grad(&x, &[&x], false), Err(Error::NotScalar(_))));
        let loss = sum(&x);
        assert!(matches!(
            grad(&loss, &[&y], false),
            Err(Error::Unreachable(0))
        ));
        let other = Graph::new().leaf(&Tensor::scalar(1.0));
        assert!(matches!(add(&x, &other.clone()), Err(Error::Shape { .. })));
        let other = Graph::new().leaf(&Tensor::vector(vec![0.0, 0.0]));
        assert!(matches!(add(&x, &other), Err(Error::GraphMismatch)));
    }

    #[test]
    fn reachable_but_flat_gradient_is_zero() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::vector(vec![-1.0, -2.0]));
        let loss = sum(&relu(&x));
        let dx = grad(&loss, &[&x], false).unwrap();
        assert_eq!(dx[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn l2_norm_at_origin_has_zero_gradient() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::vector(vec![0.0, 0.0]));
        let dx = grad(&l2_norm(&x), &[&x], false).unwrap();
        assert_eq!(dx[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_leaves_forward_values_untouched() {
        let g = Graph::new();
        let w = g.leaf(&Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.25]));
        let x = Tensor::matrix(1, 2, vec![1.0, -3.0]);
        let z = matmul(&x, &w).unwrap();
        let before = z.data().to_vec();
        let loss = sum(&softmax(&z).unwrap());
        let _ = grad(&loss, &[&w], true).unwrap();
        assert_eq!(z.data(), &before[..]);
    }
}

//! Forward values, adjoints and tangents of every primitive.

use std::rc::Rc;

use super::{Node, Op, Reduce};
use crate::linalg::Mat;

pub(crate) fn forward(op: &Op, get: &dyn Fn(usize) -> Rc<Mat>) -> Mat {
    use Op::*;
    match op {
        Leaf | Const => unreachable!("leaves carry their own values"),
        MatMul(a, b) => get(*a).matmul(&get(*b)),
        Transpose(a) => get(*a).transpose(),
        Add(a, b) => get(*a).add(&get(*b)),
        Sub(a, b) => get(*a).sub(&get(*b)),
        Mul(a, b) => get(*a).hadamard(&get(*b)),
        Div(a, b) => get(*a).zip_map(&get(*b), |x, y| x / y),
        AddScalar(a, s) => get(*a).map(|x| x + s),
        MulScalar(a, s) => get(*a).scale(*s),
        Scale(a, s) => get(*a).scale(get(*s).item()),
        Exp(a) => get(*a).map(f64::exp),
        Log(a) => get(*a).map(f64::ln),
        Sqrt(a) => get(*a).map(f64::sqrt),
        Powf(a, p) => get(*a).map(|x| x.powf(*p)),
        Neg(a) => get(*a).map(|x| -x),
        Sum(a, r) => reduce(&get(*a), *r),
        Mean(a, r) => {
            let v = get(*a);
            let n = count(&v, *r);
            reduce(&v, *r).scale(1.0 / n)
        }
        SoftmaxRows(a) => softmax_rows(&get(*a)),
        ConcatRows(ids) => {
            let vals: Vec<Rc<Mat>> = ids.iter().map(|&i| get(i)).collect();
            Mat::concat_rows(&vals.iter().map(|v| v.as_ref()).collect::<Vec<_>>())
        }
        ConcatCols(ids) => {
            let vals: Vec<Rc<Mat>> = ids.iter().map(|&i| get(i)).collect();
            Mat::concat_cols(&vals.iter().map(|v| v.as_ref()).collect::<Vec<_>>())
        }
        Slice {
            src,
            r0,
            c0,
            rows,
            cols,
        } => get(*src).slice(*r0, *c0, *rows, *cols),
        FrobSq(a) => Mat::scalar(get(*a).frob_sq()),
        Dot(a, b) => Mat::scalar(get(*a).dot(&get(*b))),
        Relu(a) => get(*a).map(|x| x.max(0.0)),
        Inverse(a) => get(*a).inverse().expect("inverse succeeded at record time"),
    }
}

fn reduce(m: &Mat, r: Reduce) -> Mat {
    let (rows, cols) = m.shape();
    match r {
        Reduce::All => Mat::scalar(m.sum()),
        Reduce::Rows => {
            let mut out = Mat::zeros(1, cols);
            for i in 0..rows {
                for j in 0..cols {
                    let cur = out.get(0, j);
                    out.set(0, j, cur + m.get(i, j));
                }
            }
            out
        }
        Reduce::Cols => Mat::from_fn(rows, 1, |i, _| m.row(i).iter().sum()),
    }
}

fn count(m: &Mat, r: Reduce) -> f64 {
    match r {
        Reduce::All => m.len() as f64,
        Reduce::Rows => m.rows() as f64,
        Reduce::Cols => m.cols() as f64,
    }
}

/// Broadcasts a reduced gradient back to the input shape.
fn expand(g: &Mat, shape: (usize, usize), r: Reduce) -> Mat {
    match r {
        Reduce::All => Mat::filled(shape.0, shape.1, g.item()),
        Reduce::Rows => Mat::from_fn(shape.0, shape.1, |_, j| g.get(0, j)),
        Reduce::Cols => Mat::from_fn(shape.0, shape.1, |i, _| g.get(i, 0)),
    }
}

pub(crate) fn softmax_rows(m: &Mat) -> Mat {
    let (rows, cols) = m.shape();
    let mut out = Mat::zeros(rows, cols);
    for i in 0..rows {
        let row = m.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            out.set(i, j, e / total);
        }
    }
    out
}

/// Vector–Jacobian products for the inputs of `node`.
pub(crate) fn adjoint(nodes: &[Node], node: &Node, g: &Mat) -> Vec<(usize, Mat)> {
    use Op::*;
    let val = |i: usize| nodes[i].value.as_ref();
    let out = node.value.as_ref();
    match &node.op {
        Leaf | Const => vec![],
        MatMul(a, b) => vec![
            (*a, g.matmul(&val(*b).transpose())),
            (*b, val(*a).transpose().matmul(g)),
        ],
        Transpose(a) => vec![(*a, g.transpose())],
        Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
        Mul(a, b) => vec![(*a, g.hadamard(val(*b))), (*b, g.hadamard(val(*a)))],
        Div(a, b) => {
            let bv = val(*b);
            let ga = g.zip_map(bv, |x, y| x / y);
            let gb = g.hadamard(out).zip_map(bv, |x, y| -x / y);
            vec![(*a, ga), (*b, gb)]
        }
        AddScalar(a, _) => vec![(*a, g.clone())],
        MulScalar(a, s) => vec![(*a, g.scale(*s))],
        Scale(a, s) => {
            let sv = val(*s).item();
            vec![(*a, g.scale(sv)), (*s, Mat::scalar(g.dot(val(*a))))]
        }
        Exp(a) => vec![(*a, g.hadamard(out))],
        Log(a) => vec![(*a, g.zip_map(val(*a), |x, y| x / y))],
        Sqrt(a) => vec![(*a, g.zip_map(out, |x, y| x / (2.0 * y)))],
        Powf(a, p) => vec![(*a, g.zip_map(val(*a), |x, y| x * p * y.powf(p - 1.0)))],
        Neg(a) => vec![(*a, g.scale(-1.0))],
        Sum(a, r) => vec![(*a, expand(g, val(*a).shape(), *r))],
        Mean(a, r) => {
            let n = count(val(*a), *r);
            vec![(*a, expand(g, val(*a).shape(), *r).scale(1.0 / n))]
        }
        SoftmaxRows(a) => {
            let (rows, cols) = out.shape();
            let mut ga = Mat::zeros(rows, cols);
            for i in 0..rows {
                let s: f64 = (0..cols).map(|j| g.get(i, j) * out.get(i, j)).sum();
                for j in 0..cols {
                    ga.set(i, j, out.get(i, j) * (g.get(i, j) - s));
                }
            }
            vec![(*a, ga)]
        }
        ConcatRows(ids) => {
            let mut r0 = 0;
            ids.iter()
                .map(|&i| {
                    let (r, c) = val(i).shape();
                    let part = g.slice(r0, 0, r, c);
                    r0 += r;
                    (i, part)
                })
                .collect()
        }
        ConcatCols(ids) => {
            let mut c0 = 0;
            ids.iter()
                .map(|&i| {
                    let (r, c) = val(i).shape();
                    let part = g.slice(0, c0, r, c);
                    c0 += c;
                    (i, part)
                })
                .collect()
        }
        Slice { src, r0, c0, .. } => {
            let (r, c) = val(*src).shape();
            let mut ga = Mat::zeros(r, c);
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    ga.set(r0 + i, c0 + j, g.get(i, j));
                }
            }
            vec![(*src, ga)]
        }
        FrobSq(a) => vec![(*a, val(*a).scale(2.0 * g.item()))],
        Dot(a, b) => {
            let s = g.item();
            vec![(*a, val(*b).scale(s)), (*b, val(*a).scale(s))]
        }
        Relu(a) => vec![(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 }))],
        Inverse(a) => {
            let inv_t = out.transpose();
            vec![(*a, inv_t.matmul(g).matmul(&inv_t).scale(-1.0))]
        }
    }
}

/// Jacobian–vector product: tangent of `node` from its inputs' tangents.
pub(crate) fn tangent(nodes: &[Node], node: &Node, t: &[Option<Mat>]) -> Mat {
    use Op::*;
    let val = |i: usize| nodes[i].value.as_ref();
    let out = node.value.as_ref();
    let tan = |i: usize| -> Mat {
        match &t[i] {
            Some(m) => m.clone(),
            None => {
                let (r, c) = val(i).shape();
                Mat::zeros(r, c)
            }
        }
    };
    match &node.op {
        Leaf | Const => Mat::zeros(out.rows(), out.cols()),
        MatMul(a, b) => tan(*a).matmul(val(*b)).add(&val(*a).matmul(&tan(*b))),
        Transpose(a) => tan(*a).transpose(),
        Add(a, b) => tan(*a).add(&tan(*b)),
        Sub(a, b) => tan(*a).sub(&tan(*b)),
        Mul(a, b) => tan(*a).hadamard(val(*b)).add(&val(*a).hadamard(&tan(*b))),
        Div(a, b) => {
            let bv = val(*b);
            let ta = tan(*a).zip_map(bv, |x, y| x / y);
            let tb = tan(*b).hadamard(out).zip_map(bv, |x, y| x / y);
            ta.sub(&tb)
        }
        AddScalar(a, _) => tan(*a),
        MulScalar(a, s) => tan(*a).scale(*s),
        Scale(a, s) => tan(*a)
            .scale(val(*s).item())
            .add(&val(*a).scale(tan(*s).item())),
        Exp(a) => tan(*a).hadamard(out),
        Log(a) => tan(*a).zip_map(val(*a), |x, y| x / y),
        Sqrt(a) => tan(*a).zip_map(out, |x, y| x / (2.0 * y)),
        Powf(a, p) => tan(*a).zip_map(val(*a), |x, y| x * p * y.powf(p - 1.0)),
        Neg(a) => tan(*a).scale(-1.0),
        Sum(a, r) => reduce(&tan(*a), *r),
        Mean(a, r) => reduce(&tan(*a), *r).scale(1.0 / count(val(*a), *r)),
        SoftmaxRows(a) => {
            let ta = tan(*a);
            let (rows, cols) = out.shape();
            Mat::from_fn(rows, cols, |i, j| {
                let s: f64 = (0..cols).map(|k| out.get(i, k) * ta.get(i, k)).sum();
                out.get(i, j) * (ta.get(i, j) - s)
            })
        }
        ConcatRows(ids) => {
            let parts: Vec<Mat> = ids.iter().map(|&i| tan(i)).collect();
            Mat::concat_rows(&parts.iter().collect::<Vec<_>>())
        }
        ConcatCols(ids) => {
            let parts: Vec<Mat> = ids.iter().map(|&i| tan(i)).collect();
            Mat::concat_cols(&parts.iter().collect::<Vec<_>>())
        }
        Slice { src, r0, c0, .. } => tan(*src).slice(*r0, *c0, out.rows(), out.cols()),
        FrobSq(a) => Mat::scalar(2.0 * val(*a).dot(&tan(*a))),
        Dot(a, b) => Mat::scalar(tan(*a).dot(val(*b)) + val(*a).dot(&tan(*b))),
        Relu(a) => tan(*a).zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
        Inverse(a) => out.matmul(&tan(*a)).matmul(out).scale(-1.0),
    }
}

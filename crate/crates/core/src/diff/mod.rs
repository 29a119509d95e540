//! Reverse-mode differentiation over dense rank ≤ 2 tensors.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles. Handles are
//! `Copy` and borrow the tape, so arithmetic reads naturally:
//!
//! ```
//! use manifold_glue::diff::Tape;
//! use manifold_glue::linalg::Mat;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Mat::row_vector(&[1.0, 2.0]));
//! let loss = (x * x).sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).as_slice(), &[2.0, 4.0]);
//! ```
//!
//! Constants live on the tape too but are never differentiated; a result is
//! tracked iff one of its inputs is.

mod gradcheck;
mod ops;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

use crate::linalg::Mat;

pub use gradcheck::{check_gradient, GradCheck};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("domain error in {op}: entry {index} is {value}")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("backward requires a 1x1 loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("matrix inverse of a singular {0}x{0} matrix")]
    Singular(usize),
}

/// Which dimension a reduction collapses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    /// Everything, producing `1×1`.
    All,
    /// Collapse rows, producing `1×cols`.
    Rows,
    /// Collapse columns, producing `rows×1`.
    Cols,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Const,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize, f64),
    MulScalar(usize, f64),
    /// Matrix times a `1×1` tracked scalar.
    Scale(usize, usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Powf(usize, f64),
    Neg(usize),
    Sum(usize, Reduce),
    Mean(usize, Reduce),
    SoftmaxRows(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Slice {
        src: usize,
        r0: usize,
        c0: usize,
        rows: usize,
        cols: usize,
    },
    FrobSq(usize),
    Dot(usize, usize),
    Relu(usize),
    Inverse(usize),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf | Const => vec![],
            MatMul(a, b)
            | Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | Div(a, b)
            | Dot(a, b)
            | Scale(a, b) => {
                vec![*a, *b]
            }
            Transpose(a)
            | AddScalar(a, _)
            | MulScalar(a, _)
            | Exp(a)
            | Log(a)
            | Sqrt(a)
            | Powf(a, _)
            | Neg(a)
            | Sum(a, _)
            | Mean(a, _)
            | SoftmaxRows(a)
            | FrobSq(a)
            | Relu(a)
            | Inverse(a) => vec![*a],
            Slice { src, .. } => vec![*src],
            ConcatRows(v) | ConcatCols(v) => v.clone(),
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Rc<Mat>,
    pub(crate) op: Op,
    pub(crate) tracked: bool,
}

/// Operation record for one differentiation pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.value();
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &v.shape())
            .field("tracked", &self.is_tracked())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Mat) -> Var<'_> {
        self.push(Rc::new(value), Op::Leaf, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.push(Rc::new(value), Op::Const, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Mat::scalar(value))
    }

    pub(crate) fn push(&self, value: Rc<Mat>, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Mat> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// Back-propagates from a scalar loss. Gradients are defined for every
    /// tracked node; untouched leaves report zeros through [`Gradients::wrt`].
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, DiffError> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape();
        if shape != (1, 1) {
            return Err(DiffError::NonScalarLoss {
                rows: shape.0,
                cols: shape.1,
            });
        }
        let mut grads: Vec<Option<Mat>> = vec![None; loss.id + 1];
        if nodes[loss.id].tracked {
            grads[loss.id] = Some(Mat::scalar(1.0));
        }
        for id in (0..=loss.id).rev() {
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            for (input, g) in ops::adjoint(&nodes, node, &upstream) {
                if !nodes[input].tracked {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[id] = Some(upstream);
        }
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Forward tangents: given tangents for some tracked nodes, propagates
    /// directional derivatives to every later node. Untouched nodes carry
    /// `None` (a zero tangent).
    pub fn jvp(&self, seeds: &[(Var<'_>, Mat)]) -> Vec<Option<Mat>> {
        let nodes = self.nodes.borrow();
        let mut tangents: Vec<Option<Mat>> = vec![None; nodes.len()];
        for (v, t) in seeds {
            assert_eq!(
                nodes[v.id].value.shape(),
                t.shape(),
                "contract violation: tangent shape"
            );
            tangents[v.id] = Some(t.clone());
        }
        for id in 0..nodes.len() {
            if tangents[id].is_some() {
                continue;
            }
            if nodes[id].op.inputs().iter().all(|&i| tangents[i].is_none()) {
                continue;
            }
            tangents[id] = Some(ops::tangent(&nodes, &nodes[id], &tangents));
        }
        tangents
    }

    /// Recomputes every recorded value from leaves and constants.
    pub fn replay(&self) -> Vec<Mat> {
        let nodes = self.nodes.borrow();
        let mut values: Vec<Rc<Mat>> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let v = match node.op {
                Op::Leaf | Op::Const => Rc::clone(&node.value),
                _ => Rc::new(ops::forward(&node.op, &|i| Rc::clone(&values[i]))),
            };
            values.push(v);
        }
        values.iter().map(|v| (**v).clone()).collect()
    }

    /// Recorded values, in tape order.
    pub fn values(&self) -> Vec<Mat> {
        self.nodes
            .borrow()
            .iter()
            .map(|n| (*n.value).clone())
            .collect()
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Mat> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`, zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var<'_>) -> Mat {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self
                    .shapes
                    .get(v.id)
                    .copied()
                    .unwrap_or_else(|| v.value().shape());
                Mat::zeros(r, c)
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Mat> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.tracked(self.id)
    }

    /// Scalar value. Panics if not `1×1`.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn unary(self, op: Op) -> Var<'t> {
        let tracked = op.inputs().iter().any(|&i| self.tape.tracked(i));
        let value = {
            let nodes = self.tape.nodes.borrow();
            ops::forward(&op, &|i| Rc::clone(&nodes[i].value))
        };
        self.tape.push(Rc::new(value), op, tracked)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.unary(Op::MatMul(self.id, other.id))
    }

    pub fn t(self) -> Var<'t> {
        self.unary(Op::Transpose(self.id))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id, s))
    }

    pub fn mul_scalar(self, s: f64) -> Var<'t> {
        self.unary(Op::MulScalar(self.id, s))
    }

    /// Multiplies every entry by the `1×1` value `s`.
    pub fn scale(self, s: Var<'t>) -> Var<'t> {
        assert_eq!(s.shape(), (1, 1), "contract violation: scale by non-scalar");
        self.unary(Op::Scale(self.id, s.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id))
    }

    pub fn ln(self) -> Result<Var<'t>, DiffError> {
        check_positive(&self.value(), "log")?;
        Ok(self.unary(Op::Log(self.id)))
    }

    pub fn sqrt(self) -> Result<Var<'t>, DiffError> {
        check_positive(&self.value(), "sqrt")?;
        Ok(self.unary(Op::Sqrt(self.id)))
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        self.unary(Op::Powf(self.id, p))
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.id, Reduce::All))
    }

    pub fn sum_along(self, r: Reduce) -> Var<'t> {
        self.unary(Op::Sum(self.id, r))
    }

    pub fn mean(self) -> Var<'t> {
        self.unary(Op::Mean(self.id, Reduce::All))
    }

    pub fn mean_along(self, r: Reduce) -> Var<'t> {
        self.unary(Op::Mean(self.id, r))
    }

    pub fn softmax_rows(self) -> Var<'t> {
        self.unary(Op::SoftmaxRows(self.id))
    }

    pub fn slice(self, r0: usize, c0: usize, rows: usize, cols: usize) -> Var<'t> {
        let (r, c) = self.shape();
        assert!(
            r0 + rows <= r && c0 + cols <= c,
            "contract violation: slice out of bounds"
        );
        let value = self.value().slice(r0, c0, rows, cols);
        let tracked = self.is_tracked();
        self.tape.push(
            Rc::new(value),
            Op::Slice {
                src: self.id,
                r0,
                c0,
                rows,
                cols,
            },
            tracked,
        )
    }

    pub fn row(self, i: usize) -> Var<'t> {
        let c = self.shape().1;
        self.slice(i, 0, 1, c)
    }

    pub fn col(self, j: usize) -> Var<'t> {
        let r = self.shape().0;
        self.slice(0, j, r, 1)
    }

    pub fn frob_sq(self) -> Var<'t> {
        self.unary(Op::FrobSq(self.id))
    }

    pub fn dot(self, other: Var<'t>) -> Var<'t> {
        self.unary(Op::Dot(self.id, other.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id))
    }

    pub fn inverse(self) -> Result<Var<'t>, DiffError> {
        let (r, c) = self.shape();
        assert_eq!(r, c, "contract violation: inverse of non-square matrix");
        let inv = self.value().inverse().ok_or(DiffError::Singular(r))?;
        if !inv.is_finite() {
            return Err(DiffError::Singular(r));
        }
        let tracked = self.is_tracked();
        Ok(self.tape.push(Rc::new(inv), Op::Inverse(self.id), tracked))
    }

    /// Euclidean (Frobenius) norm. Errors on an exactly zero input.
    pub fn norm(self) -> Result<Var<'t>, DiffError> {
        self.frob_sq().sqrt()
    }

    /// `tr(A)` as `sum(A ⊙ I)`.
    pub fn trace(self) -> Var<'t> {
        let (r, c) = self.shape();
        assert_eq!(r, c, "contract violation: trace of non-square matrix");
        let eye = self.tape.constant(Mat::eye(r));
        (self * eye).sum()
    }
}

pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Var<'t> {
    let tape = parts
        .first()
        .expect("contract violation: empty concat")
        .tape;
    let values: Vec<Rc<Mat>> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Mat> = values.iter().map(|v| v.as_ref()).collect();
    let value = Mat::concat_rows(&refs);
    let tracked = parts.iter().any(|p| p.is_tracked());
    tape.push(
        Rc::new(value),
        Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
        tracked,
    )
}

pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Var<'t> {
    let tape = parts
        .first()
        .expect("contract violation: empty concat")
        .tape;
    let values: Vec<Rc<Mat>> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Mat> = values.iter().map(|v| v.as_ref()).collect();
    let value = Mat::concat_cols(&refs);
    let tracked = parts.iter().any(|p| p.is_tracked());
    tape.push(
        Rc::new(value),
        Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
        tracked,
    )
}

fn check_positive(m: &Mat, op: &'static str) -> Result<(), DiffError> {
    match m.as_slice().iter().position(|&x| !(x > 0.0)) {
        Some(index) => Err(DiffError::Domain {
            op,
            index,
            value: m.as_slice()[index],
        }),
        None => Ok(()),
    }
}

macro_rules! binary_op {
    ($trait:ident, $method:ident, $variant:ident) => {
        impl<'t> std::ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.unary(Op::$variant(self.id, rhs.id))
            }
        }
    };
}

binary_op!(Add, add, Add);
binary_op!(Sub, sub, Sub);
binary_op!(Mul, mul, Mul);
binary_op!(Div, div, Div);

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id))
    }
}

impl<'t> std::ops::Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.mul_scalar(rhs)
    }
}

impl<'t> std::ops::Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.add_scalar(rhs)
    }
}

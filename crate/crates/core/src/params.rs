//! Named parameter arrays and their binding onto a [`Tape`].

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::linalg::{Matrix, Vector};

/// A borrowed view of one trainable array.
#[derive(Debug)]
pub struct ArrayRef<'a> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a [f64],
}

/// Anything that owns trainable arrays.
///
/// `arrays`, `arrays_mut` and the `Vec<Var>` produced when binding to a tape
/// must all enumerate arrays in the same order.
pub trait ParamSet {
    fn arrays(&self, prefix: &str) -> Vec<ArrayRef<'_>>;
    fn arrays_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.arrays("").iter().map(|a| a.data.len()).sum()
    }
}

pub(crate) fn matrix_ref<'a>(prefix: &str, name: &str, m: &'a Matrix) -> ArrayRef<'a> {
    ArrayRef {
        name: join(prefix, name),
        dims: vec![m.rows(), m.cols()],
        data: m.as_slice(),
    }
}

pub(crate) fn vector_ref<'a>(prefix: &str, name: &str, v: &'a Vector) -> ArrayRef<'a> {
    ArrayRef {
        name: join(prefix, name),
        dims: vec![v.len()],
        data: v.as_slice(),
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub(crate) fn init_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Matrix {
    Matrix::uniform(rows, cols, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}

/// Records leaves on a tape and remembers them in binding order.
pub(crate) struct Binder<'t> {
    pub tape: &'t mut Tape,
    pub bound: Vec<Var>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t mut Tape) -> Self {
        Self {
            tape,
            bound: Vec::new(),
        }
    }

    pub fn matrix(&mut self, m: &Matrix) -> Var {
        let v = self.tape.leaf(m.clone());
        self.bound.push(v);
        v
    }

    pub fn vector(&mut self, x: &Vector) -> Var {
        let v = self.tape.leaf(x.clone());
        self.bound.push(v);
        v
    }
}

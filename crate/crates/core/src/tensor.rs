//! Dense row-major tensors. A tensor is a plain value; it only
//! participates in differentiation while it carries a node handle into a
//! live [`crate::tape::Tape`].

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle of a recorded tape node. The `tape` field is the unique id of
/// the tape that owns the node, so cross-tape misuse is caught at run time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef {
    pub(crate) tape: u64,
    pub(crate) index: usize,
}

impl NodeRef {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Dense n-dimensional array of scalars, row-major.
///
/// Scalars are rank-0 tensors (empty shape, one element). Cloning is cheap:
/// the buffer is shared behind an `Arc` and never mutated after creation.
#[derive(Debug, Clone)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    pub(crate) node: Option<NodeRef>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, values: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape("tensor", format!("zero extent in shape {shape:?}")));
        }
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expect} values, got {}", values.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(values),
            node: None,
        })
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, S::zero())
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; len]),
            node: None,
        }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::shape("tensor", "no rows"));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("tensor", "ragged rows"));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub(crate) fn tracked(shape: Vec<usize>, data: Arc<Vec<S>>, node: NodeRef) -> Self {
        Tensor {
            shape,
            data,
            node: Some(node),
        }
    }

    pub(crate) fn untracked(shape: Vec<usize>, data: Arc<Vec<S>>) -> Self {
        Tensor {
            shape,
            data,
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // extents are positive, so tensors always hold at least one value
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub(crate) fn buffer(&self) -> Arc<Vec<S>> {
        Arc::clone(&self.data)
    }

    pub fn node_ref(&self) -> Option<NodeRef> {
        self.node
    }

    /// Same values with the tape handle removed.
    pub fn detached(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn to_scalar(&self) -> Result<S> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::contract(format!(
                "expected scalar tensor, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.data.to_vec()
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[S] {
        assert_eq!(self.rank(), 2, "row() needs a matrix");
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, S> {
        self.data.iter()
    }

    pub fn max_abs(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Decompose a shape around `axis` into (outer, n, inner) where elements of a
/// lane along `axis` sit at `o * n * inner + i * inner + k`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn scalar_is_rank_zero() {
        let t = Tensor::scalar(3.5f64);
        assert_eq!(t.rank(), 0);
        assert_eq!(t.len(), 1);
        assert_eq!(t.to_scalar().unwrap(), 3.5);
    }

    #[test]
    fn axis_split_positions() {
        assert_eq!(axis_split(&[2, 3, 4], 1), (2, 3, 4));
        assert_eq!(axis_split(&[5], 0), (1, 5, 1));
    }
}

use std::fmt;
use std::sync::Arc;

use crate::{AutodiffError, NodeId, Result, Tape, Tensor};

/// A flat linear map between real vectors.
pub type LinearMap = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Linear operator with a forward map and (optionally) its adjoint.
///
/// Only operators with an adjoint can be placed on a tape: the backward pass of
/// `y = L x` is `dx = L* dy`.
#[derive(Clone)]
pub struct LinearOp {
    name: String,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    forward: LinearMap,
    adjoint: Option<LinearMap>,
}

impl LinearOp {
    pub fn new(
        name: impl Into<String>,
        in_shape: impl Into<Vec<usize>>,
        out_shape: impl Into<Vec<usize>>,
        forward: LinearMap,
    ) -> Self {
        Self {
            name: name.into(),
            in_shape: in_shape.into(),
            out_shape: out_shape.into(),
            forward,
            adjoint: None,
        }
    }

    pub fn with_adjoint(mut self, adjoint: LinearMap) -> Self {
        self.adjoint = Some(adjoint);
        self
    }

    /// Operator equal to its own adjoint.
    pub fn self_adjoint(name: impl Into<String>, shape: impl Into<Vec<usize>>, map: LinearMap) -> Self {
        let shape = shape.into();
        Self::new(name, shape.clone(), shape, Arc::clone(&map)).with_adjoint(map)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn has_adjoint(&self) -> bool {
        self.adjoint.is_some()
    }

    fn check_input(&self, x: &Tensor, expected: &[usize]) -> Result<()> {
        if x.shape() == expected {
            return Ok(());
        }
        if x.rank() != expected.len() {
            return Err(AutodiffError::RankMismatch {
                op: "linear_apply",
                expected: format!("{} ({:?})", expected.len(), expected),
                actual: x.shape().to_vec(),
            });
        }
        let (axis, (&e, &a)) = expected
            .iter()
            .zip(x.shape())
            .enumerate()
            .find(|(_, (e, a))| e != a)
            .expect("shapes differ");
        Err(AutodiffError::ShapeMismatch {
            op: "linear_apply",
            axis: axis.to_string(),
            expected: e,
            actual: a,
        })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x, &self.in_shape)?;
        Tensor::new(self.out_shape.clone(), (self.forward)(x.data()))
    }

    pub fn apply_adjoint(&self, y: &Tensor) -> Result<Tensor> {
        let adjoint = self
            .adjoint
            .as_ref()
            .ok_or_else(|| AutodiffError::MissingAdjoint(self.name.clone()))?;
        self.check_input(y, &self.out_shape)?;
        Tensor::new(self.in_shape.clone(), adjoint(y.data()))
    }
}

impl fmt::Debug for LinearOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinearOp")
            .field("name", &self.name)
            .field("in_shape", &self.in_shape)
            .field("out_shape", &self.out_shape)
            .field("has_adjoint", &self.adjoint.is_some())
            .finish()
    }
}

impl Tape {
    /// Applies `op` to `input`; the backward pass applies the adjoint.
    pub fn linear_apply(&self, op: &LinearOp, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let adjoint = op
            .adjoint
            .clone()
            .ok_or_else(|| AutodiffError::MissingAdjoint(op.name.clone()))?;
        let value = op.apply(&self.value(input))?;
        self.custom(
            "linear_apply",
            &[input],
            value,
            Box::new(move |g, _| vec![Some(adjoint(g))]),
        )
    }
}

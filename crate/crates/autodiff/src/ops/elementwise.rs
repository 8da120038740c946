use crate::{pairwise_sum, pairwise_sum_rows, AutodiffError, NodeId, Result, Tape, Tensor};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rank() != b.rank() {
        return Err(AutodiffError::RankMismatch {
            op,
            expected: format!("{}", a.rank()),
            actual: b.shape().to_vec(),
        });
    }
    for (axis, (&x, &y)) in a.shape().iter().zip(b.shape()).enumerate() {
        if x != y {
            return Err(AutodiffError::ShapeMismatch {
                op,
                axis: axis.to_string(),
                expected: x,
                actual: y,
            });
        }
    }
    Ok(())
}

impl Tape {
    pub fn add(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", &va, &vb)?;
        let out: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), out)?;
        self.custom(
            "add",
            &[a, b],
            value,
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        )
    }

    pub fn sub(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", &va, &vb)?;
        let out: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(va.shape().to_vec(), out)?;
        self.custom(
            "sub",
            &[a, b],
            value,
            Box::new(|g, needs| {
                vec![
                    Some(g.to_vec()),
                    needs[1].then(|| g.iter().map(|v| -v).collect()),
                ]
            }),
        )
    }

    /// Elementwise product.
    pub fn mul(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", &va, &vb)?;
        let out: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), out)?;
        self.custom(
            "mul",
            &[a, b],
            value,
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| g.iter().zip(vb.data()).map(|(g, y)| g * y).collect());
                let gb = needs[1].then(|| g.iter().zip(va.data()).map(|(g, x)| g * x).collect());
                vec![ga, gb]
            }),
        )
    }

    pub fn scale(&self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.check(a)?;
        let value = self.value(a).map(|v| v * factor);
        self.custom(
            "scale",
            &[a],
            value,
            Box::new(move |g, _| vec![Some(g.iter().map(|v| v * factor).collect())]),
        )
    }

    /// Elementwise `max(0, x)`; the subgradient at exactly zero is zero.
    pub fn relu(&self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let input = self.value(a);
        let value = input.map(|v| if v > 0.0 { v } else { 0.0 });
        self.custom(
            "relu",
            &[a],
            value,
            Box::new(move |g, _| {
                let grad = g
                    .iter()
                    .zip(input.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![Some(grad)]
            }),
        )
    }

    /// Scalar sum of all entries.
    pub fn sum(&self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let input = self.value(a);
        let n = input.len();
        let value = Tensor::scalar(pairwise_sum(input.data()));
        self.custom("sum", &[a], value, Box::new(move |g, _| vec![Some(vec![g[0]; n])]))
    }

    /// Scalar squared Euclidean norm.
    pub fn sum_squares(&self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let input = self.value(a);
        let squares: Vec<f64> = input.data().iter().map(|v| v * v).collect();
        let value = Tensor::scalar(pairwise_sum(&squares));
        self.custom(
            "sum_squares",
            &[a],
            value,
            Box::new(move |g, _| vec![Some(input.data().iter().map(|x| 2.0 * g[0] * x).collect())]),
        )
    }

    /// Mean over the leading (batch) axis, reduced pairwise in a fixed order.
    pub fn mean_batch(&self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let input = self.value(a);
        let Some((&batch, rest)) = input.shape().split_first() else {
            return Err(AutodiffError::RankMismatch {
                op: "mean_batch",
                expected: ">= 1".into(),
                actual: Vec::new(),
            });
        };
        if batch == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "mean_batch",
                axis: "0 (batch)".into(),
                expected: 1,
                actual: 0,
            });
        }
        let stride: usize = rest.iter().product();
        let rows: Vec<&[f64]> = input.data().chunks(stride.max(1)).collect();
        let inv = 1.0 / batch as f64;
        let out: Vec<f64> = pairwise_sum_rows(&rows).into_iter().map(|v| v * inv).collect();
        let value = Tensor::new(rest.to_vec(), out)?;
        self.custom(
            "mean_batch",
            &[a],
            value,
            Box::new(move |g, _| {
                let row: Vec<f64> = g.iter().map(|v| v * inv).collect();
                let mut full = Vec::with_capacity(row.len() * batch);
                for _ in 0..batch {
                    full.extend_from_slice(&row);
                }
                vec![Some(full)]
            }),
        )
    }

    /// Stacks `copies` copies of `a` along a new leading axis.
    pub fn tile(&self, a: NodeId, copies: usize) -> Result<NodeId> {
        self.check(a)?;
        let input = self.value(a);
        let mut shape = vec![copies];
        shape.extend_from_slice(input.shape());
        let mut out = Vec::with_capacity(input.len() * copies);
        for _ in 0..copies {
            out.extend_from_slice(input.data());
        }
        let value = Tensor::new(shape, out)?;
        let stride = input.len();
        self.custom(
            "tile",
            &[a],
            value,
            Box::new(move |g, _| {
                let rows: Vec<&[f64]> = g.chunks(stride.max(1)).collect();
                let mut sum = pairwise_sum_rows(&rows);
                sum.resize(stride, 0.0);
                vec![Some(sum)]
            }),
        )
    }

    pub fn reshape(&self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(a)?;
        let value = self.value(a).reshape(shape.to_vec())?;
        self.custom("reshape", &[a], value, Box::new(|g, _| vec![Some(g.to_vec())]))
    }
}

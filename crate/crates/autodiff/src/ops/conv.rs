use rayon::prelude::*;

use crate::{pairwise_sum_rows, AutodiffError, NodeId, Result, Tape, Tensor};

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl ConvGeometry {
    fn taps(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Unfolds zero-padded `k x k` neighbourhoods into a `[c_in*k*k, h*w]` matrix.
fn im2col(x: &[f64], g: ConvGeometry) -> Vec<f64> {
    let ConvGeometry { c_in, h, w, k, .. } = g;
    let pad = (k / 2) as isize;
    let hw = g.plane();
    let mut cols = vec![0.0; g.taps() * hw];
    for ci in 0..c_in {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = sy as usize * w;
                    let sx0 = (x0 as isize + dx) as usize;
                    dst[y * w + x0..y * w + x1].copy_from_slice(&src[s + sx0..s + sx0 + (x1 - x0)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds column gradients back onto the image.
fn col2im(cols: &[f64], g: ConvGeometry) -> Vec<f64> {
    let ConvGeometry { c_in, h, w, k, .. } = g;
    let pad = (k / 2) as isize;
    let hw = g.plane();
    let mut x = vec![0.0; c_in * hw];
    for ci in 0..c_in {
        let dst = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = sy as usize * w;
                    let sx0 = (x0 as isize + dx) as usize;
                    for (d, v) in dst[s + sx0..s + sx0 + (x1 - x0)]
                        .iter_mut()
                        .zip(&src[y * w + x0..y * w + x1])
                    {
                        *d += v;
                    }
                }
            }
        }
    }
    x
}

/// `c = alpha * a * b + beta * c` for row-major operands with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every element addressed by the given
    // dimensions and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn forward_one(x: &[f64], kernel: &[f64], bias: &[f64], g: ConvGeometry) -> Vec<f64> {
    let hw = g.plane();
    let taps = g.taps();
    let cols = im2col(x, g);
    let mut out = vec![0.0; g.c_out * hw];
    for (co, row) in out.chunks_mut(hw).enumerate() {
        row.fill(bias[co]);
    }
    gemm(
        g.c_out,
        taps,
        hw,
        kernel,
        (taps as isize, 1),
        &cols,
        (hw as isize, 1),
        1.0,
        &mut out,
    );
    out
}

struct OneGrad {
    input: Option<Vec<f64>>,
    kernel: Vec<f64>,
    bias: Vec<f64>,
}

fn backward_one(
    x: &[f64],
    kernel: &[f64],
    upstream: &[f64],
    g: ConvGeometry,
    need_input: bool,
    need_kernel: bool,
) -> OneGrad {
    let hw = g.plane();
    let taps = g.taps();
    let mut d_kernel = vec![0.0; g.c_out * taps];
    if need_kernel {
        let cols = im2col(x, g);
        // dK = G * cols^T
        gemm(
            g.c_out,
            hw,
            taps,
            upstream,
            (hw as isize, 1),
            &cols,
            (1, hw as isize),
            0.0,
            &mut d_kernel,
        );
    }
    let d_bias = upstream.chunks(hw).map(crate::pairwise_sum).collect();
    let input = need_input.then(|| {
        // dcols = K^T * G
        let mut d_cols = vec![0.0; taps * hw];
        gemm(
            taps,
            g.c_out,
            hw,
            kernel,
            (1, taps as isize),
            upstream,
            (hw as isize, 1),
            0.0,
            &mut d_cols,
        );
        col2im(&d_cols, g)
    });
    OneGrad {
        input,
        kernel: d_kernel,
        bias: d_bias,
    }
}

impl Tape {
    /// Same-padded, stride-1 cross-correlation plus per-channel bias.
    ///
    /// `input` is `[C_in, H, W]` or batched `[B, C_in, H, W]`, `kernel` is
    /// `[C_out, C_in, k, k]` with odd `k`, `bias` is `[C_out]`. Batch items
    /// are processed independently; parameter gradients are reduced over the
    /// batch in a fixed pairwise order.
    pub fn conv2d(&self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check(input)?;
        self.check(kernel)?;
        self.check(bias)?;
        let x = self.value(input);
        let kt = self.value(kernel);
        let bt = self.value(bias);

        let (batch, c_in, h, w, batched) = match *x.shape() {
            [c, h, w] => (1, c, h, w, false),
            [b, c, h, w] => (b, c, h, w, true),
            _ => {
                return Err(AutodiffError::RankMismatch {
                    op: "conv2d",
                    expected: "3 ([C,H,W]) or 4 ([B,C,H,W]) for input".into(),
                    actual: x.shape().to_vec(),
                })
            }
        };
        let [c_out, kc_in, kh, kw] = *kt.shape() else {
            return Err(AutodiffError::RankMismatch {
                op: "conv2d",
                expected: "4 ([C_out,C_in,k,k]) for kernel".into(),
                actual: kt.shape().to_vec(),
            });
        };
        if kc_in != c_in {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                axis: "C_in (kernel axis 1 vs input channels)".into(),
                expected: c_in,
                actual: kc_in,
            });
        }
        if kh != kw {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                axis: "kernel width (axis 3 must equal axis 2)".into(),
                expected: kh,
                actual: kw,
            });
        }
        if kh % 2 == 0 {
            return Err(AutodiffError::EvenKernel(kh));
        }
        if bt.shape() != [c_out] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                axis: "bias length (C_out)".into(),
                expected: c_out,
                actual: bt.len(),
            });
        }
        let geom = ConvGeometry {
            c_in,
            c_out,
            h,
            w,
            k: kh,
        };
        let in_stride = c_in * h * w;
        let out_stride = c_out * h * w;

        let outputs: Vec<Vec<f64>> = x
            .data()
            .par_chunks(in_stride)
            .map(|item| forward_one(item, kt.data(), bt.data(), geom))
            .collect();
        let out_shape = if batched {
            vec![batch, c_out, h, w]
        } else {
            vec![c_out, h, w]
        };
        let value = Tensor::new(out_shape, outputs.concat())?;

        self.custom(
            "conv2d",
            &[input, kernel, bias],
            value,
            Box::new(move |upstream, needs| {
                let need_kernel = needs[1] || needs[2];
                let per_item: Vec<OneGrad> = x
                    .data()
                    .par_chunks(in_stride)
                    .zip(upstream.par_chunks(out_stride))
                    .map(|(xi, gi)| backward_one(xi, kt.data(), gi, geom, needs[0], need_kernel))
                    .collect();
                let d_input = needs[0].then(|| {
                    per_item
                        .iter()
                        .flat_map(|g| g.input.as_deref().unwrap_or_default().iter().copied())
                        .collect()
                });
                let d_kernel = needs[1].then(|| {
                    let rows: Vec<&[f64]> = per_item.iter().map(|g| g.kernel.as_slice()).collect();
                    pairwise_sum_rows(&rows)
                });
                let d_bias = needs[2].then(|| {
                    let rows: Vec<&[f64]> = per_item.iter().map(|g| g.bias.as_slice()).collect();
                    pairwise_sum_rows(&rows)
                });
                vec![d_input, d_kernel, d_bias]
            }),
        )
    }
}

//! im2col-based 2-D convolution over NHWC batches with valid or zero padding.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub k: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let shape_err = || Error::Shape {
            op: "conv2d",
            lhs: x.to_vec(),
            rhs: kernel.to_vec(),
        };
        if x.len() != 4 || kernel.len() != 4 || kernel[0] != kernel[1] || kernel[2] != x[3] {
            return Err(shape_err());
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let (batch, h, w, c_in) = (x[0], x[1], x[2], x[3]);
        let k = kernel[0];
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(Error::invalid(format!(
                "conv2d kernel {k}x{k} larger than padded input {h}x{w}"
            )));
        }
        Ok(Self {
            batch,
            h,
            w,
            c_in,
            k,
            c_out: kernel[3],
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.k * self.k * self.c_in
    }

    fn rows(&self) -> usize {
        self.batch * self.oh * self.ow
    }

    /// Source offset in the input for (batch, out row, out col, ki, kj), if in bounds.
    #[inline]
    fn source(&self, b: usize, oy: usize, ox: usize, ki: usize, kj: usize) -> Option<usize> {
        let y = (oy * self.stride + ki) as isize - self.pad as isize;
        let x = (ox * self.stride + kj) as isize - self.pad as isize;
        if y < 0 || x < 0 || y as usize >= self.h || x as usize >= self.w {
            return None;
        }
        Some(((b * self.h + y as usize) * self.w + x as usize) * self.c_in)
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let pl = g.patch_len();
    let mut cols = vec![0.0; g.rows() * pl];
    let mut r = 0;
    for b in 0..g.batch {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = &mut cols[r * pl..(r + 1) * pl];
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        if let Some(src) = g.source(b, oy, ox, ki, kj) {
                            let dst = (ki * g.k + kj) * g.c_in;
                            row[dst..dst + g.c_in].copy_from_slice(&x[src..src + g.c_in]);
                        }
                    }
                }
                r += 1;
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let pl = g.patch_len();
    let mut dx = vec![0.0; g.batch * g.h * g.w * g.c_in];
    let mut r = 0;
    for b in 0..g.batch {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = &cols[r * pl..(r + 1) * pl];
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        if let Some(src) = g.source(b, oy, ox, ki, kj) {
                            let off = (ki * g.k + kj) * g.c_in;
                            for c in 0..g.c_in {
                                dx[src + c] += row[off + c];
                            }
                        }
                    }
                }
                r += 1;
            }
        }
    }
    dx
}

/// Forward pass; returns the output and the column matrix kept for backward.
pub(crate) fn forward(x: &Tensor, kernel: &Tensor, g: &ConvGeom) -> (Tensor, Vec<f64>) {
    let cols = im2col(x.data(), g);
    let mut out = vec![0.0; g.rows() * g.c_out];
    let pl = g.patch_len();
    gemm(
        g.rows(),
        pl,
        g.c_out,
        &cols,
        pl as isize,
        1,
        kernel.data(),
        g.c_out as isize,
        1,
        &mut out,
        0.0,
    );
    (
        Tensor::from_parts(vec![g.batch, g.oh, g.ow, g.c_out], out),
        cols,
    )
}

/// Returns (d input, d kernel) for upstream gradient `dy`.
pub(crate) fn backward(dy: &Tensor, kernel: &Tensor, cols: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let pl = g.patch_len();
    let rows = g.rows();
    // dK = colsᵀ · dy
    let mut dk = vec![0.0; pl * g.c_out];
    gemm(pl, rows, g.c_out, cols, 1, pl as isize, dy.data(), g.c_out as isize, 1, &mut dk, 0.0);
    // dcols = dy · Kᵀ
    let mut dcols = vec![0.0; rows * pl];
    gemm(rows, g.c_out, pl, dy.data(), g.c_out as isize, 1, kernel.data(), 1, g.c_out as isize, &mut dcols, 0.0);
    (col2im(&dcols, g), dk)
}

/// Valid-padding convolution of one `[h, w, c_in]` image with `[k, k, c_in, c_out]` kernels.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize) -> Result<Tensor> {
    if input.rank() != 3 {
        return Err(Error::Shape {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: kernels.shape().to_vec(),
        });
    }
    let mut xs = vec![1];
    xs.extend_from_slice(input.shape());
    let g = ConvGeom::new(&xs, kernels.shape(), stride, 0)?;
    let (out, _) = forward(input, kernels, &g);
    out.reshape(&[g.oh, g.ow, g.c_out])
}

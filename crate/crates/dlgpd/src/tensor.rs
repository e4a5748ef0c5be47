//! Dense row-major f64 tensors.
//!
//! Everything numeric in the crate runs in double precision so that analytic
//! gradients can be validated against central finite differences at tight
//! tolerances. Matrix products go through `matrixmultiply::dgemm`; all other
//! kernels are plain loops over contiguous slices.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Placeholder for freed buffers.
    pub fn empty() -> Self {
        Tensor {
            shape: vec![0],
            data: Vec::new(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill_with(shape: &[usize], mut f: impl FnMut() -> f64) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| f()).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn add_in_place(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }
}

/// `c = a @ b + beta * c` for row-major matrices `a: m x k`, `b: k x n`.
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a^T @ b + beta * c` where `a: k x m`, `b: k x n` (both row-major).
pub fn gemm_at_b(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a @ b^T + beta * c` where `a: m x k`, `b: n x k` (both row-major).
pub fn gemm_a_bt(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output spatial size of a valid (unpadded) convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize) -> usize {
    assert!(input >= kernel, "conv input {input} smaller than kernel {kernel}");
    (input - kernel) / stride + 1
}

/// Output spatial size of an unpadded transposed convolution.
pub fn conv_transpose_out_size(input: usize, kernel: usize, stride: usize) -> usize {
    (input - 1) * stride + kernel
}

/// Unfolds one `c x h x w` image into a `(oh*ow) x (c*kh*kw)` patch matrix.
///
/// Row `(i, j)` holds the receptive field of output pixel `(i, j)`, laid out
/// channel-major then kernel-row then kernel-col.
pub fn im2col(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    out: &mut [f64],
) {
    let oh = conv_out_size(h, kh, stride);
    let ow = conv_out_size(w, kw, stride);
    let cols = c * kh * kw;
    assert_eq!(img.len(), c * h * w);
    assert_eq!(out.len(), oh * ow * cols);
    assert!((oh - 1) * stride + kh <= h && (ow - 1) * stride + kw <= w);
    // SAFETY: every access is bounded by the shape assertions above:
    // reads stay below c*h*w, writes below oh*ow*cols.
    unsafe {
        let ip = img.as_ptr();
        let op = out.as_mut_ptr();
        for i in 0..oh {
            let y0 = i * stride;
            for j in 0..ow {
                let x0 = j * stride;
                let mut dst = op.add((i * ow + j) * cols);
                for ch in 0..c {
                    let base = ip.add(ch * h * w + y0 * w + x0);
                    for ky in 0..kh {
                        let src = base.add(ky * w);
                        for t in 0..kw {
                            *dst.add(t) = *src.add(t);
                        }
                        dst = dst.add(kw);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a patch matrix back into an image.
pub fn col2im(
    cols_mat: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    img: &mut [f64],
) {
    let oh = conv_out_size(h, kh, stride);
    let ow = conv_out_size(w, kw, stride);
    let cols = c * kh * kw;
    assert_eq!(img.len(), c * h * w);
    assert_eq!(cols_mat.len(), oh * ow * cols);
    assert!((oh - 1) * stride + kh <= h && (ow - 1) * stride + kw <= w);
    // SAFETY: mirror of im2col; same bounds.
    unsafe {
        let sp = cols_mat.as_ptr();
        let dp = img.as_mut_ptr();
        for i in 0..oh {
            let y0 = i * stride;
            for j in 0..ow {
                let x0 = j * stride;
                let mut src = sp.add((i * ow + j) * cols);
                for ch in 0..c {
                    let base = dp.add(ch * h * w + y0 * w + x0);
                    for ky in 0..kh {
                        let dst = base.add(ky * w);
                        for t in 0..kw {
                            *dst.add(t) += *src.add(t);
                        }
                        src = src.add(kw);
                    }
                }
            }
        }
    }
}

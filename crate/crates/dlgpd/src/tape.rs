//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse and returns gradients for the leaf nodes. The op set
//! is exactly what the model needs: dense layers, strided valid convolutions
//! and transposed convolutions (via im2col + dgemm), elementwise maps, batch
//! column normalization, RBF kernel matrices, and the Gaussian marginal
//! log-likelihood with its closed-form matrix gradient.
//!
//! Determinism: every kernel accumulates in a fixed order that does not depend
//! on batch size or thread count. Images inside a batch are processed
//! independently, and cross-image reductions (weight gradients) are combined
//! per fixed-size chunk in chunk order.
//!
//! Memory: interior node values are dropped progressively during the backward
//! pass, so `value()` of non-leaf nodes must be read before `backward()`.

use crate::error::Result;
use crate::linalg;
use crate::tensor::{
    col2im, conv_out_size, conv_transpose_out_size, gemm, gemm_a_bt, gemm_at_b, im2col, Tensor,
};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    None,
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Relu,
    Sigmoid,
    Softplus,
    Exp,
    Ln,
    Neg,
    Square,
}

enum Op {
    Leaf,
    Unary { p: usize, kind: Unary },
    Scale { p: usize, c: f64 },
    AddScalar { p: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Sum { p: usize },
    Matmul { a: usize, b: usize },
    Linear { x: usize, w: usize, b: usize, act: Act },
    Conv2d { x: usize, w: usize, b: usize, stride: usize, act: Act },
    ConvT2d { x: usize, w: usize, b: usize, stride: usize, act: Act },
    Reshape { p: usize },
    ConcatRows { a: usize, b: usize },
    SliceRows { p: usize, start: usize, len: usize },
    ConcatCols { a: usize, b: usize },
    SliceCols { p: usize, start: usize, len: usize },
    NormalizeCols { p: usize },
    RbfKernel { x: usize, x2: Option<usize>, ls: usize, outscale: usize },
    AddDiag { k: usize, noise: usize },
    GaussianMll { k: usize, resid: usize },
    BernoulliLogLik { pred: usize, target: usize },
    /// Bernoulli log-likelihood straight from pre-sigmoid logits
    /// (numerically stable for saturated values; gradient `t - sigmoid(z)`).
    BernoulliLogitsLogLik { z: usize, target: usize },
}

enum OpCache {
    /// per-column stddevs for the NormalizeCols backward
    ColStats { std: Vec<f64> },
    /// Cholesky factor and weight vector for GaussianMll
    Mll { chol: Vec<f64>, alpha: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    caches: Vec<Option<OpCache>>,
    parallel: bool,
    /// images per work unit in conv kernels; fixed so that results do not
    /// depend on thread count
    chunk: usize,
}

/// Pixel clamp inside the Bernoulli log-likelihood, to avoid log(0).
pub const BCE_EPS: f64 = 1e-6;

/// Variance floor inside column normalization (stddev floor 1e-6).
pub const NORM_EPS: f64 = 1e-12;

/// Elements per work unit in the chunked Bernoulli kernels.
const BCE_CHUNK: usize = 1 << 18;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            caches: Vec::new(),
            parallel: false,
            chunk: 64,
        }
    }

    pub fn with_parallel(parallel: bool) -> Self {
        Tape {
            parallel,
            ..Self::new()
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = self.op_requires_grad(&op);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.caches.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_cached(&mut self, value: Tensor, op: Op, cache: OpCache) -> Var {
        let requires_grad = self.op_requires_grad(&op);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.caches.push(Some(cache));
        Var(self.nodes.len() - 1)
    }

    fn op_requires_grad(&self, op: &Op) -> bool {
        let mut parents = Vec::with_capacity(4);
        op_parents(op, &mut parents);
        if matches!(op, Op::Leaf) {
            return true;
        }
        parents.iter().any(|&p| self.nodes[p].requires_grad)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf that never receives a gradient (inputs, targets, noise).
    /// Expensive ops skip gradient work for constant parents entirely.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].requires_grad = false;
        v
    }

    /// Copies the value into a fresh constant: identical forward, no
    /// gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn unary(&mut self, p: Var, kind: Unary) -> Var {
        let x = &self.nodes[p.0].value;
        let data = x
            .data()
            .iter()
            .map(|&v| match kind {
                Unary::Relu => v.max(0.0),
                Unary::Sigmoid => sigmoid(v),
                Unary::Softplus => crate::util::softplus(v),
                Unary::Exp => v.exp(),
                Unary::Ln => v.ln(),
                Unary::Neg => -v,
                Unary::Square => v * v,
            })
            .collect();
        let t = Tensor::from_vec(x.shape(), data);
        self.push(t, Op::Unary { p: p.0, kind })
    }

    pub fn relu(&mut self, v: Var) -> Var {
        self.unary(v, Unary::Relu)
    }
    pub fn sigmoid(&mut self, v: Var) -> Var {
        self.unary(v, Unary::Sigmoid)
    }
    pub fn softplus(&mut self, v: Var) -> Var {
        self.unary(v, Unary::Softplus)
    }
    pub fn exp(&mut self, v: Var) -> Var {
        self.unary(v, Unary::Exp)
    }
    pub fn ln(&mut self, v: Var) -> Var {
        self.unary(v, Unary::Ln)
    }
    pub fn neg(&mut self, v: Var) -> Var {
        self.unary(v, Unary::Neg)
    }
    pub fn square(&mut self, v: Var) -> Var {
        self.unary(v, Unary::Square)
    }

    pub fn scale(&mut self, v: Var, c: f64) -> Var {
        let x = &self.nodes[v.0].value;
        let t = Tensor::from_vec(x.shape(), x.data().iter().map(|&a| a * c).collect());
        self.push(t, Op::Scale { p: v.0, c })
    }

    pub fn add_scalar(&mut self, v: Var, c: f64) -> Var {
        let x = &self.nodes[v.0].value;
        let t = Tensor::from_vec(x.shape(), x.data().iter().map(|&a| a + c).collect());
        self.push(t, Op::AddScalar { p: v.0 })
    }

    fn binary(&mut self, a: Var, b: Var, which: u8) -> Var {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(x.shape(), y.shape(), "elementwise op shape mismatch");
        let data = x
            .data()
            .iter()
            .zip(y.data().iter())
            .map(|(&p, &q)| match which {
                0 => p + q,
                1 => p - q,
                _ => p * q,
            })
            .collect();
        let t = Tensor::from_vec(x.shape(), data);
        let op = match which {
            0 => Op::Add { a: a.0, b: b.0 },
            1 => Op::Sub { a: a.0, b: b.0 },
            _ => Op::Mul { a: a.0, b: b.0 },
        };
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, 0)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, 1)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, 2)
    }

    /// Sums all elements into a scalar of shape `[1]`.
    pub fn sum(&mut self, v: Var) -> Var {
        let s: f64 = self.nodes[v.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { p: v.0 })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = mat_dims(x);
        let (k2, n) = mat_dims(y);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, x.data(), y.data(), 0.0, &mut c);
        self.push(Tensor::from_vec(&[m, n], c), Op::Matmul { a: a.0, b: b.0 })
    }

    /// `act(x @ w + b)` with `x: [B, In]`, `w: [In, Out]`, `b: [Out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var, act: Act) -> Var {
        let (xv, wv, bv) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let (m, k) = mat_dims(xv);
        let (k2, n) = mat_dims(wv);
        assert_eq!(k, k2, "linear inner dimension mismatch");
        assert_eq!(bv.numel(), n, "linear bias size mismatch");
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, xv.data(), wv.data(), 0.0, &mut c);
        let bias = bv.data();
        for row in c.chunks_exact_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bias.iter()) {
                *o += bb;
            }
        }
        apply_act(&mut c, act);
        self.push(
            Tensor::from_vec(&[m, n], c),
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
                act,
            },
        )
    }

    /// Valid (unpadded) strided convolution.
    /// `x: [B, Cin, H, W]`, `w: [Cout, Cin, KH, KW]`, `b: [Cout]`.
    ///
    /// Lowered to one im2col + dgemm per fixed-size image chunk; the batched
    /// product computes each output element as the same fixed-order dot
    /// product as a per-image product would, so results are independent of
    /// batch size and chunking.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, act: Act) -> Var {
        let (xv, wv, bv) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let [bsz, cin, h, wd] = dims4(xv);
        let [cout, cin2, kh, kw] = dims4(wv);
        assert_eq!(cin, cin2, "conv channel mismatch");
        assert_eq!(bv.numel(), cout, "conv bias size mismatch");
        let oh = conv_out_size(h, kh, stride);
        let ow = conv_out_size(wd, kw, stride);
        let (ckk, hw) = (cin * kh * kw, oh * ow);
        let mut out = vec![0.0; bsz * cout * hw];
        let img_in = cin * h * wd;
        let img_out = cout * hw;
        let xs = xv.data();
        let ws = wv.data();
        let bias = bv.data();
        run_images(
            self.parallel,
            self.chunk,
            bsz,
            &mut out,
            img_out,
            |range, out_chunk| {
                let nimg = range.len();
                with_scratch([nimg * hw * ckk, nimg * hw * cout, 0], |cols, rows, _| {
                    for (slot, i) in range.clone().enumerate() {
                        im2col(
                            &xs[i * img_in..(i + 1) * img_in],
                            cin,
                            h,
                            wd,
                            kh,
                            kw,
                            stride,
                            &mut cols[slot * hw * ckk..(slot + 1) * hw * ckk],
                        );
                    }
                    // rows = cols (nimg*HW x CKK) @ wmat^T (CKK x Cout)
                    gemm_a_bt(nimg * hw, ckk, cout, cols, ws, 0.0, rows);
                    for slot in 0..nimg {
                        let src = &rows[slot * hw * cout..(slot + 1) * hw * cout];
                        let oi = &mut out_chunk[slot * img_out..(slot + 1) * img_out];
                        transpose_bias_act(src, hw, cout, bias, act, oi);
                    }
                });
            },
        );
        self.push(
            Tensor::from_vec(&[bsz, cout, oh, ow], out),
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                act,
            },
        )
    }

    /// Unpadded strided transposed convolution.
    /// `x: [B, Cin, H, W]`, `w: [Cin, Cout, KH, KW]`, `b: [Cout]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, act: Act) -> Var {
        let (xv, wv, bv) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let [bsz, cin, h, wd] = dims4(xv);
        let [cin2, cout, kh, kw] = dims4(wv);
        assert_eq!(cin, cin2, "conv_transpose channel mismatch");
        assert_eq!(bv.numel(), cout, "conv_transpose bias size mismatch");
        let oh = conv_transpose_out_size(h, kh, stride);
        let ow = conv_transpose_out_size(wd, kw, stride);
        let ckk = cout * kh * kw;
        let hw = h * wd;
        let img_in = cin * hw;
        let img_out = cout * oh * ow;
        let mut out = vec![0.0; bsz * img_out];
        let xs = xv.data();
        let ws = wv.data();
        let bias = bv.data();
        run_images(
            self.parallel,
            self.chunk,
            bsz,
            &mut out,
            img_out,
            |range, out_chunk| {
                let nimg = range.len();
                with_scratch([nimg * hw * cin, nimg * hw * ckk, 0], |xrows, pmat, _| {
                    // xrows: per image, [Cin, HW] transposed to [HW, Cin]
                    for (slot, i) in range.clone().enumerate() {
                        transpose_into(
                            &xs[i * img_in..(i + 1) * img_in],
                            cin,
                            hw,
                            &mut xrows[slot * hw * cin..(slot + 1) * hw * cin],
                        );
                    }
                    // pmat = xrows (nimg*HW x Cin) @ wmat (Cin x Cout*KK)
                    gemm(nimg * hw, cin, ckk, xrows, ws, 0.0, pmat);
                    for slot in 0..nimg {
                        let oi = &mut out_chunk[slot * img_out..(slot + 1) * img_out];
                        oi.fill(0.0);
                        col2im(
                            &pmat[slot * hw * ckk..(slot + 1) * hw * ckk],
                            cout,
                            oh,
                            ow,
                            kh,
                            kw,
                            stride,
                            oi,
                        );
                        for (co, row) in oi.chunks_exact_mut(oh * ow).enumerate() {
                            let bb = bias[co];
                            for v in row.iter_mut() {
                                *v += bb;
                            }
                        }
                        apply_act(oi, act);
                    }
                });
            },
        );
        self.push(
            Tensor::from_vec(&[bsz, cout, oh, ow], out),
            Op::ConvT2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                act,
            },
        )
    }

    pub fn reshape(&mut self, v: Var, shape: &[usize]) -> Var {
        let x = &self.nodes[v.0].value;
        assert_eq!(x.numel(), shape.iter().product::<usize>());
        let t = Tensor::from_vec(shape, x.data().to_vec());
        self.push(t, Op::Reshape { p: v.0 })
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m1, n1) = mat_dims(x);
        let (m2, n2) = mat_dims(y);
        assert_eq!(n1, n2, "concat_rows column mismatch");
        let mut data = Vec::with_capacity((m1 + m2) * n1);
        data.extend_from_slice(x.data());
        data.extend_from_slice(y.data());
        self.push(
            Tensor::from_vec(&[m1 + m2, n1], data),
            Op::ConcatRows { a: a.0, b: b.0 },
        )
    }

    pub fn slice_rows(&mut self, v: Var, start: usize, len: usize) -> Var {
        let x = &self.nodes[v.0].value;
        let (m, n) = mat_dims(x);
        assert!(start + len <= m, "slice_rows out of range");
        let data = x.data()[start * n..(start + len) * n].to_vec();
        self.push(
            Tensor::from_vec(&[len, n], data),
            Op::SliceRows {
                p: v.0,
                start,
                len,
            },
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m1, n1) = mat_dims(x);
        let (m2, n2) = mat_dims(y);
        assert_eq!(m1, m2, "concat_cols row mismatch");
        let mut data = Vec::with_capacity(m1 * (n1 + n2));
        for i in 0..m1 {
            data.extend_from_slice(&x.data()[i * n1..(i + 1) * n1]);
            data.extend_from_slice(&y.data()[i * n2..(i + 1) * n2]);
        }
        self.push(
            Tensor::from_vec(&[m1, n1 + n2], data),
            Op::ConcatCols { a: a.0, b: b.0 },
        )
    }

    pub fn slice_cols(&mut self, v: Var, start: usize, len: usize) -> Var {
        let x = &self.nodes[v.0].value;
        let (m, n) = mat_dims(x);
        assert!(start + len <= n, "slice_cols out of range");
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&x.data()[i * n + start..i * n + start + len]);
        }
        self.push(
            Tensor::from_vec(&[m, len], data),
            Op::SliceCols {
                p: v.0,
                start,
                len,
            },
        )
    }

    /// Normalizes each column of `x: [N, D]` to zero mean and unit variance
    /// over the N rows (population statistics, variance floored at
    /// [`NORM_EPS`]). Returns the node plus the affine stats used.
    pub fn normalize_cols(&mut self, v: Var) -> (Var, Vec<f64>, Vec<f64>) {
        let x = &self.nodes[v.0].value;
        let (m, n) = mat_dims(x);
        assert!(m >= 2, "normalize_cols needs at least 2 rows");
        let xd = x.data();
        let mut mean = vec![0.0; n];
        for row in xd.chunks_exact(n) {
            for (mj, &v) in mean.iter_mut().zip(row.iter()) {
                *mj += v;
            }
        }
        for mj in mean.iter_mut() {
            *mj /= m as f64;
        }
        let mut var = vec![0.0; n];
        for row in xd.chunks_exact(n) {
            for ((vj, &v), &mj) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
                let d = v - mj;
                *vj += d * d;
            }
        }
        let std: Vec<f64> = var.iter().map(|&v| (v / m as f64 + NORM_EPS).sqrt()).collect();
        let mut data = Vec::with_capacity(m * n);
        for row in xd.chunks_exact(n) {
            for ((&v, &mj), &sj) in row.iter().zip(mean.iter()).zip(std.iter()) {
                data.push((v - mj) / sj);
            }
        }
        let var_id = self.push_cached(
            Tensor::from_vec(&[m, n], data),
            Op::NormalizeCols { p: v.0 },
            OpCache::ColStats { std: std.clone() },
        );
        (var_id, mean, std)
    }

    /// ARD RBF kernel matrix `k(x_i, x2_j) = outscale * exp(-0.5 * sum_d
    /// ((x_id - x2_jd)/ls_d)^2)`. `x2 = None` means `x2 = x` (square Gram
    /// matrix). `ls: [D]` are lengthscales, `outscale: [1]` is the squared
    /// output scale.
    pub fn rbf_kernel(&mut self, x: Var, x2: Option<Var>, ls: Var, outscale: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let x2v = &self.nodes[x2.unwrap_or(x).0].value;
        let lsv = &self.nodes[ls.0].value;
        let osv = &self.nodes[outscale.0].value;
        let (n, d) = mat_dims(xv);
        let (m, d2) = mat_dims(x2v);
        assert_eq!(d, d2, "rbf input dimension mismatch");
        assert_eq!(lsv.numel(), d, "rbf lengthscale count mismatch");
        let alpha_sq = osv.item();
        let inv2: Vec<f64> = lsv.data().iter().map(|&l| 1.0 / (l * l)).collect();
        let mut k = vec![0.0; n * m];
        let xd = xv.data();
        let x2d = x2v.data();
        for i in 0..n {
            let xi = &xd[i * d..(i + 1) * d];
            let row = &mut k[i * m..(i + 1) * m];
            for (j, kij) in row.iter_mut().enumerate() {
                let xj = &x2d[j * d..(j + 1) * d];
                let mut q = 0.0;
                for ((&a, &b), &w) in xi.iter().zip(xj.iter()).zip(inv2.iter()) {
                    let diff = a - b;
                    q += diff * diff * w;
                }
                *kij = alpha_sq * (-0.5 * q).exp();
            }
        }
        self.push(
            Tensor::from_vec(&[n, m], k),
            Op::RbfKernel {
                x: x.0,
                x2: x2.map(|v| v.0),
                ls: ls.0,
                outscale: outscale.0,
            },
        )
    }

    /// Adds `noise: [1]` to the diagonal of a square matrix.
    pub fn add_diag(&mut self, k: Var, noise: Var) -> Var {
        let kv = &self.nodes[k.0].value;
        let (n, m) = mat_dims(kv);
        assert_eq!(n, m, "add_diag requires a square matrix");
        let noise_val = self.nodes[noise.0].value.item();
        let mut data = kv.data().to_vec();
        for i in 0..n {
            data[i * n + i] += noise_val;
        }
        self.push(
            Tensor::from_vec(&[n, n], data),
            Op::AddDiag {
                k: k.0,
                noise: noise.0,
            },
        )
    }

    /// `log N(resid | 0, K)` of a zero-mean Gaussian, via Cholesky with the
    /// jitter fallback. Errors if the factorization fails at maximum jitter.
    pub fn gaussian_mll(&mut self, k: Var, resid: Var) -> Result<Var> {
        let kv = &self.nodes[k.0].value;
        let rv = &self.nodes[resid.0].value;
        let (n, m) = mat_dims(kv);
        assert_eq!(n, m, "gaussian_mll requires a square matrix");
        assert_eq!(rv.numel(), n, "gaussian_mll residual length mismatch");
        let (chol, _jitter) = linalg::cholesky_with_jitter(kv.data(), n)?;
        let mut alpha = rv.data().to_vec();
        linalg::chol_solve(&chol, n, &mut alpha);
        let quad: f64 = rv.data().iter().zip(alpha.iter()).map(|(a, b)| a * b).sum();
        let logdet = linalg::logdet_from_chol(&chol, n);
        let mll = -0.5 * quad - 0.5 * logdet - 0.5 * n as f64 * LN_2PI;
        Ok(self.push_cached(
            Tensor::scalar(mll),
            Op::GaussianMll {
                k: k.0,
                resid: resid.0,
            },
            OpCache::Mll { chol, alpha },
        ))
    }

    /// Bernoulli log-likelihood `sum t*ln(p) + (1-t)*ln(1-p)` with `p`
    /// clamped to `[BCE_EPS, 1-BCE_EPS]` (gradient is zero where the clamp is
    /// active). `target` gets no gradient. Summation is chunked in a fixed
    /// order, identical sequentially and in parallel.
    pub fn bernoulli_loglik(&mut self, target: Var, pred: Var) -> Var {
        let tv = &self.nodes[target.0].value;
        let pv = &self.nodes[pred.0].value;
        assert_eq!(tv.numel(), pv.numel(), "bernoulli_loglik size mismatch");
        let n = tv.numel();
        let td = tv.data();
        let pd = pv.data();
        let mut s = 0.0;
        crate::util::chunked_map_reduce(
            n,
            BCE_CHUNK,
            self.parallel && n > BCE_CHUNK,
            |r| bernoulli_loglik_value(&td[r.clone()], &pd[r]),
            |part| s += part,
        );
        self.push(
            Tensor::scalar(s),
            Op::BernoulliLogLik {
                pred: pred.0,
                target: target.0,
            },
        )
    }

    /// Bernoulli log-likelihood of `target` under `sigmoid(z)`, computed from
    /// the logits `z`: `sum t*log sigmoid(z) + (1-t)*log(1-sigmoid(z))
    /// = sum -t*softplus(-z) - (1-t)*softplus(z)`. Exact for arbitrarily
    /// saturated logits, and the gradient `t - sigmoid(z)` never vanishes.
    pub fn bernoulli_loglik_logits(&mut self, target: Var, z: Var) -> Var {
        let tv = &self.nodes[target.0].value;
        let zv = &self.nodes[z.0].value;
        assert_eq!(tv.numel(), zv.numel(), "bernoulli_loglik_logits size mismatch");
        let n = tv.numel();
        let td = tv.data();
        let zd = zv.data();
        let mut s = 0.0;
        crate::util::chunked_map_reduce(
            n,
            BCE_CHUNK,
            self.parallel && n > BCE_CHUNK,
            |r| {
                td[r.clone()]
                    .iter()
                    .zip(&zd[r])
                    .map(|(&t, &z)| {
                        -t * crate::util::softplus(-z) - (1.0 - t) * crate::util::softplus(z)
                    })
                    .sum::<f64>()
            },
            |part| s += part,
        );
        self.push(
            Tensor::scalar(s),
            Op::BernoulliLogitsLogLik {
                z: z.0,
                target: target.0,
            },
        )
    }

    /// Reverse pass from a scalar root. Gradients of leaf nodes are retained;
    /// interior values and gradients are freed as the sweep passes them.
    pub fn backward(&mut self, root: Var) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.numel(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                grads[i] = Some(g);
                continue;
            }
            let contribs = self.node_backward(i, &g);
            for (p, c) in contribs {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_in_place(&c),
                    slot @ None => *slot = Some(c),
                }
            }
            self.nodes[i].value = Tensor::empty();
        }
        Gradients { grads }
    }

    /// Gradient contributions of node `i` to its parents.
    fn node_backward(&mut self, i: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
        let cache = self.caches[i].take();
        let node = &self.nodes[i];
        match node.op {
            Op::Leaf => Vec::new(),
            Op::Unary { p, kind } => {
                let out = node.value.data();
                let pin = self.nodes[p].value.data();
                let gd = g.data();
                let data: Vec<f64> = match kind {
                    Unary::Relu => gd
                        .iter()
                        .zip(out.iter())
                        .map(|(&gg, &y)| if y > 0.0 { gg } else { 0.0 })
                        .collect(),
                    Unary::Sigmoid => gd
                        .iter()
                        .zip(out.iter())
                        .map(|(&gg, &y)| gg * y * (1.0 - y))
                        .collect(),
                    Unary::Softplus => gd
                        .iter()
                        .zip(pin.iter())
                        .map(|(&gg, &x)| gg * sigmoid(x))
                        .collect(),
                    Unary::Exp => gd
                        .iter()
                        .zip(out.iter())
                        .map(|(&gg, &y)| gg * y)
                        .collect(),
                    Unary::Ln => gd
                        .iter()
                        .zip(pin.iter())
                        .map(|(&gg, &x)| gg / x)
                        .collect(),
                    Unary::Neg => gd.iter().map(|&gg| -gg).collect(),
                    Unary::Square => gd
                        .iter()
                        .zip(pin.iter())
                        .map(|(&gg, &x)| gg * 2.0 * x)
                        .collect(),
                };
                vec![(p, Tensor::from_vec(self.nodes[p].value.shape(), data))]
            }
            Op::Scale { p, c } => {
                let data = g.data().iter().map(|&gg| gg * c).collect();
                vec![(p, Tensor::from_vec(self.nodes[p].value.shape(), data))]
            }
            Op::AddScalar { p } => {
                vec![(p, Tensor::from_vec(self.nodes[p].value.shape(), g.data().to_vec()))]
            }
            Op::Add { a, b } => vec![
                (a, g.clone()),
                (b, g.clone()),
            ],
            Op::Sub { a, b } => {
                let nb = Tensor::from_vec(g.shape(), g.data().iter().map(|&v| -v).collect());
                vec![(a, g.clone()), (b, nb)]
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                let ga: Vec<f64> = g.data().iter().zip(bv.iter()).map(|(&gg, &y)| gg * y).collect();
                let gb: Vec<f64> = g.data().iter().zip(av.iter()).map(|(&gg, &x)| gg * x).collect();
                vec![
                    (a, Tensor::from_vec(g.shape(), ga)),
                    (b, Tensor::from_vec(g.shape(), gb)),
                ]
            }
            Op::Sum { p } => {
                let gg = g.item();
                let shape = self.nodes[p].value.shape().to_vec();
                let n = self.nodes[p].value.numel();
                vec![(p, Tensor::from_vec(&shape, vec![gg; n]))]
            }
            Op::Matmul { a, b } => {
                let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                let (m, k) = mat_dims(av);
                let (_, n) = mat_dims(bv);
                let mut ga = vec![0.0; m * k];
                gemm_a_bt(m, n, k, g.data(), bv.data(), 0.0, &mut ga);
                let mut gb = vec![0.0; k * n];
                gemm_at_b(k, m, n, av.data(), g.data(), 0.0, &mut gb);
                vec![
                    (a, Tensor::from_vec(&[m, k], ga)),
                    (b, Tensor::from_vec(&[k, n], gb)),
                ]
            }
            Op::Linear { x, w, b, act } => {
                let (xv, wv) = (&self.nodes[x].value, &self.nodes[w].value);
                let (m, k) = mat_dims(xv);
                let (_, n) = mat_dims(wv);
                let mut dpre = g.data().to_vec();
                act_backward(&mut dpre, node.value.data(), act);
                let mut gb = vec![0.0; n];
                for row in dpre.chunks_exact(n) {
                    for (o, &v) in gb.iter_mut().zip(row.iter()) {
                        *o += v;
                    }
                }
                let mut gw = vec![0.0; k * n];
                gemm_at_b(k, m, n, xv.data(), &dpre, 0.0, &mut gw);
                let mut gx = vec![0.0; m * k];
                gemm_a_bt(m, n, k, &dpre, wv.data(), 0.0, &mut gx);
                vec![
                    (x, Tensor::from_vec(&[m, k], gx)),
                    (w, Tensor::from_vec(&[k, n], gw)),
                    (b, Tensor::from_vec(&[n], gb)),
                ]
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                act,
            } => {
                let need_x = self.nodes[x].requires_grad;
                let (gx, gw, gb) = self.conv2d_backward(i, x, w, stride, act, g, need_x);
                let mut out = vec![(w, gw), (b, gb)];
                if let Some(gx) = gx {
                    out.push((x, gx));
                }
                out
            }
            Op::ConvT2d {
                x,
                w,
                b,
                stride,
                act,
            } => {
                let need_x = self.nodes[x].requires_grad;
                let (gx, gw, gb) = self.convt2d_backward(i, x, w, stride, act, g, need_x);
                let mut out = vec![(w, gw), (b, gb)];
                if let Some(gx) = gx {
                    out.push((x, gx));
                }
                out
            }
            Op::Reshape { p } => {
                let shape = self.nodes[p].value.shape().to_vec();
                vec![(p, Tensor::from_vec(&shape, g.data().to_vec()))]
            }
            Op::ConcatRows { a, b } => {
                let (m1, n) = mat_dims(&self.nodes[a].value);
                let (m2, _) = mat_dims(&self.nodes[b].value);
                let ga = g.data()[..m1 * n].to_vec();
                let gb = g.data()[m1 * n..(m1 + m2) * n].to_vec();
                vec![
                    (a, Tensor::from_vec(&[m1, n], ga)),
                    (b, Tensor::from_vec(&[m2, n], gb)),
                ]
            }
            Op::SliceRows { p, start, len } => {
                let (m, n) = mat_dims(&self.nodes[p].value);
                let mut gp = vec![0.0; m * n];
                gp[start * n..(start + len) * n].copy_from_slice(g.data());
                vec![(p, Tensor::from_vec(&[m, n], gp))]
            }
            Op::ConcatCols { a, b } => {
                let (m, n1) = mat_dims(&self.nodes[a].value);
                let (_, n2) = mat_dims(&self.nodes[b].value);
                let mut ga = vec![0.0; m * n1];
                let mut gb = vec![0.0; m * n2];
                for i2 in 0..m {
                    let row = &g.data()[i2 * (n1 + n2)..(i2 + 1) * (n1 + n2)];
                    ga[i2 * n1..(i2 + 1) * n1].copy_from_slice(&row[..n1]);
                    gb[i2 * n2..(i2 + 1) * n2].copy_from_slice(&row[n1..]);
                }
                vec![
                    (a, Tensor::from_vec(&[m, n1], ga)),
                    (b, Tensor::from_vec(&[m, n2], gb)),
                ]
            }
            Op::SliceCols { p, start, len } => {
                let (m, n) = mat_dims(&self.nodes[p].value);
                let mut gp = vec![0.0; m * n];
                for i2 in 0..m {
                    gp[i2 * n + start..i2 * n + start + len]
                        .copy_from_slice(&g.data()[i2 * len..(i2 + 1) * len]);
                }
                vec![(p, Tensor::from_vec(&[m, n], gp))]
            }
            Op::NormalizeCols { p } => {
                let Some(OpCache::ColStats { std, .. }) = cache else {
                    unreachable!("missing normalize cache")
                };
                let y = node.value.data();
                let (m, n) = mat_dims(&self.nodes[p].value);
                let gd = g.data();
                // column means of g and of g .* y
                let mut mg = vec![0.0; n];
                let mut mgy = vec![0.0; n];
                for (grow, yrow) in gd.chunks_exact(n).zip(y.chunks_exact(n)) {
                    for j in 0..n {
                        mg[j] += grow[j];
                        mgy[j] += grow[j] * yrow[j];
                    }
                }
                for j in 0..n {
                    mg[j] /= m as f64;
                    mgy[j] /= m as f64;
                }
                let mut gp = Vec::with_capacity(m * n);
                for (grow, yrow) in gd.chunks_exact(n).zip(y.chunks_exact(n)) {
                    for j in 0..n {
                        gp.push((grow[j] - mg[j] - yrow[j] * mgy[j]) / std[j]);
                    }
                }
                vec![(p, Tensor::from_vec(&[m, n], gp))]
            }
            Op::RbfKernel { x, x2, ls, outscale } => {
                self.rbf_backward(i, x, x2, ls, outscale, g)
            }
            Op::AddDiag { k, noise } => {
                let (n, _) = mat_dims(&self.nodes[k].value);
                let gd = g.data();
                let trace: f64 = (0..n).map(|j| gd[j * n + j]).sum();
                vec![
                    (k, Tensor::from_vec(&[n, n], gd.to_vec())),
                    (noise, Tensor::scalar(trace)),
                ]
            }
            Op::GaussianMll { k, resid } => {
                let Some(OpCache::Mll { chol, alpha }) = cache else {
                    unreachable!("missing mll cache")
                };
                let n = alpha.len();
                let gg = g.item();
                let kinv = linalg::chol_inverse(&chol, n);
                let mut gk = vec![0.0; n * n];
                for i2 in 0..n {
                    for j2 in 0..n {
                        gk[i2 * n + j2] =
                            gg * 0.5 * (alpha[i2] * alpha[j2] - kinv[i2 * n + j2]);
                    }
                }
                let gr: Vec<f64> = alpha.iter().map(|&a| -gg * a).collect();
                vec![
                    (k, Tensor::from_vec(&[n, n], gk)),
                    (resid, Tensor::from_vec(&[n], gr)),
                ]
            }
            Op::BernoulliLogLik { pred, target } => {
                let gg = g.item();
                let tv = self.nodes[target].value.data();
                let pv = self.nodes[pred].value.data();
                let lo = BCE_EPS;
                let hi = 1.0 - BCE_EPS;
                let n = tv.len();
                let mut data = vec![0.0; n];
                let fill = |r: std::ops::Range<usize>, out: &mut [f64]| {
                    for ((o, &t), &p) in out.iter_mut().zip(&tv[r.clone()]).zip(&pv[r]) {
                        *o = if p < lo || p > hi {
                            0.0
                        } else {
                            gg * (t / p - (1.0 - t) / (1.0 - p))
                        };
                    }
                };
                if self.parallel && n > BCE_CHUNK {
                    use rayon::prelude::*;
                    data.par_chunks_mut(BCE_CHUNK).enumerate().for_each(|(ci, out)| {
                        let start = ci * BCE_CHUNK;
                        fill(start..start + out.len(), out);
                    });
                } else {
                    fill(0..n, &mut data);
                }
                vec![(
                    pred,
                    Tensor::from_vec(self.nodes[pred].value.shape(), data),
                )]
            }
            Op::BernoulliLogitsLogLik { z, target } => {
                let gg = g.item();
                let tv = self.nodes[target].value.data();
                let zv = self.nodes[z].value.data();
                let n = tv.len();
                let mut data = vec![0.0; n];
                let fill = |r: std::ops::Range<usize>, out: &mut [f64]| {
                    for ((o, &t), &zz) in out.iter_mut().zip(&tv[r.clone()]).zip(&zv[r]) {
                        *o = gg * (t - sigmoid(zz));
                    }
                };
                if self.parallel && n > BCE_CHUNK {
                    use rayon::prelude::*;
                    data.par_chunks_mut(BCE_CHUNK).enumerate().for_each(|(ci, out)| {
                        let start = ci * BCE_CHUNK;
                        fill(start..start + out.len(), out);
                    });
                } else {
                    fill(0..n, &mut data);
                }
                vec![(z, Tensor::from_vec(self.nodes[z].value.shape(), data))]
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        node_idx: usize,
        x: usize,
        w: usize,
        stride: usize,
        act: Act,
        g: &Tensor,
        need_x: bool,
    ) -> (Option<Tensor>, Tensor, Tensor) {
        let out = &self.nodes[node_idx].value;
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        let [bsz, cin, h, wd] = dims4(xv);
        let [cout, _, kh, kw] = dims4(wv);
        let oh = conv_out_size(h, kh, stride);
        let ow = conv_out_size(wd, kw, stride);
        let ckk = cin * kh * kw;
        let img_in = cin * h * wd;
        let img_out = cout * oh * ow;
        let xs = xv.data();
        let ws = wv.data();
        let outs = out.data();
        let gs = g.data();

        let gx = vec![0.0; bsz * img_in];
        let mut gw_total = vec![0.0; cout * ckk];
        let mut gb_total = vec![0.0; cout];

        let hw = oh * ow;
        let mut gx = if need_x { gx } else { Vec::new() };
        let gx_item = if need_x { img_in } else { 0 };
        let per_chunk = run_images_with_partials(
            self.parallel,
            self.chunk,
            bsz,
            &mut gx,
            gx_item,
            |range, gx_chunk| {
                let nimg = range.len();
                with_scratch(
                    [nimg * hw * cout, nimg * hw * ckk, nimg * hw * ckk],
                    |dpre_rows, cols, dcols| {
                        // dpre rows: per image, act-backward applied,
                        // [Cout, HW] transposed to [HW, Cout]
                        let mut dpre = vec![0.0; img_out];
                        let mut gb = vec![0.0; cout];
                        for (slot, i) in range.clone().enumerate() {
                            dpre.copy_from_slice(&gs[i * img_out..(i + 1) * img_out]);
                            act_backward(&mut dpre, &outs[i * img_out..(i + 1) * img_out], act);
                            for (co, row) in dpre.chunks_exact(hw).enumerate() {
                                gb[co] += row.iter().sum::<f64>();
                            }
                            transpose_into(
                                &dpre,
                                cout,
                                hw,
                                &mut dpre_rows[slot * hw * cout..(slot + 1) * hw * cout],
                            );
                            im2col(
                                &xs[i * img_in..(i + 1) * img_in],
                                cin,
                                h,
                                wd,
                                kh,
                                kw,
                                stride,
                                &mut cols[slot * hw * ckk..(slot + 1) * hw * ckk],
                            );
                        }
                        // gw = dpre_rows^T (Cout x nimg*HW) @ cols (nimg*HW x CKK)
                        let mut gw = vec![0.0; cout * ckk];
                        gemm_at_b(cout, nimg * hw, ckk, dpre_rows, cols, 0.0, &mut gw);
                        if need_x {
                            // dcols = dpre_rows (nimg*HW x Cout) @ wmat (Cout x CKK)
                            gemm(nimg * hw, cout, ckk, dpre_rows, ws, 0.0, dcols);
                            for (slot, _) in range.clone().enumerate() {
                                let gxi = &mut gx_chunk[slot * img_in..(slot + 1) * img_in];
                                gxi.fill(0.0);
                                col2im(
                                    &dcols[slot * hw * ckk..(slot + 1) * hw * ckk],
                                    cin,
                                    h,
                                    wd,
                                    kh,
                                    kw,
                                    stride,
                                    gxi,
                                );
                            }
                        }
                        (gw, gb)
                    },
                )
            },
        );
        for (gw, gb) in per_chunk {
            for (o, v) in gw_total.iter_mut().zip(gw.iter()) {
                *o += v;
            }
            for (o, v) in gb_total.iter_mut().zip(gb.iter()) {
                *o += v;
            }
        }
        (
            need_x.then(|| Tensor::from_vec(&[bsz, cin, h, wd], gx)),
            Tensor::from_vec(&[cout, cin, kh, kw], gw_total),
            Tensor::from_vec(&[cout], gb_total),
        )
    }

    fn convt2d_backward(
        &self,
        node_idx: usize,
        x: usize,
        w: usize,
        stride: usize,
        act: Act,
        g: &Tensor,
        need_x: bool,
    ) -> (Option<Tensor>, Tensor, Tensor) {
        let out = &self.nodes[node_idx].value;
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        let [bsz, cin, h, wd] = dims4(xv);
        let [_, cout, kh, kw] = dims4(wv);
        let oh = conv_transpose_out_size(h, kh, stride);
        let ow = conv_transpose_out_size(wd, kw, stride);
        let ckk = cout * kh * kw;
        let img_in = cin * h * wd;
        let img_out = cout * oh * ow;
        let xs = xv.data();
        let ws = wv.data();
        let outs = out.data();
        let gs = g.data();

        let gx = vec![0.0; bsz * img_in];
        let mut gw_total = vec![0.0; cin * ckk];
        let mut gb_total = vec![0.0; cout];

        let hw = h * wd;
        let mut gx = if need_x { gx } else { Vec::new() };
        let gx_item = if need_x { img_in } else { 0 };
        let per_chunk = run_images_with_partials(
            self.parallel,
            self.chunk,
            bsz,
            &mut gx,
            gx_item,
            |range, gx_chunk| {
                let nimg = range.len();
                with_scratch(
                    [nimg * hw * ckk, nimg * hw * cin, nimg * hw * cin],
                    |dp, xrows, gx_rows| {
                        let mut dpre = vec![0.0; img_out];
                        let mut gb = vec![0.0; cout];
                        for (slot, i) in range.clone().enumerate() {
                            dpre.copy_from_slice(&gs[i * img_out..(i + 1) * img_out]);
                            act_backward(&mut dpre, &outs[i * img_out..(i + 1) * img_out], act);
                            for (co, row) in dpre.chunks_exact(oh * ow).enumerate() {
                                gb[co] += row.iter().sum::<f64>();
                            }
                            // dp rows: gather of dpre over input positions
                            im2col(
                                &dpre,
                                cout,
                                oh,
                                ow,
                                kh,
                                kw,
                                stride,
                                &mut dp[slot * hw * ckk..(slot + 1) * hw * ckk],
                            );
                            transpose_into(
                                &xs[i * img_in..(i + 1) * img_in],
                                cin,
                                hw,
                                &mut xrows[slot * hw * cin..(slot + 1) * hw * cin],
                            );
                        }
                        if need_x {
                            // gx rows = dp (nimg*HW x CKK) @ wmat^T (CKK x Cin)
                            gemm_a_bt(nimg * hw, ckk, cin, dp, ws, 0.0, gx_rows);
                            for slot in 0..nimg {
                                transpose_into(
                                    &gx_rows[slot * hw * cin..(slot + 1) * hw * cin],
                                    hw,
                                    cin,
                                    &mut gx_chunk[slot * img_in..(slot + 1) * img_in],
                                );
                            }
                        }
                        // gw = xrows^T (Cin x nimg*HW) @ dp (nimg*HW x CKK)
                        let mut gw = vec![0.0; cin * ckk];
                        gemm_at_b(cin, nimg * hw, ckk, xrows, dp, 0.0, &mut gw);
                        (gw, gb)
                    },
                )
            },
        );
        for (gw, gb) in per_chunk {
            for (o, v) in gw_total.iter_mut().zip(gw.iter()) {
                *o += v;
            }
            for (o, v) in gb_total.iter_mut().zip(gb.iter()) {
                *o += v;
            }
        }
        (
            need_x.then(|| Tensor::from_vec(&[bsz, cin, h, wd], gx)),
            Tensor::from_vec(&[cin, cout, kh, kw], gw_total),
            Tensor::from_vec(&[cout], gb_total),
        )
    }

    fn rbf_backward(
        &self,
        node_idx: usize,
        x: usize,
        x2: Option<usize>,
        ls: usize,
        outscale: usize,
        g: &Tensor,
    ) -> Vec<(usize, Tensor)> {
        let kval = self.nodes[node_idx].value.data();
        let xv = &self.nodes[x].value;
        let x2_idx = x2.unwrap_or(x);
        let x2v = &self.nodes[x2_idx].value;
        let lsv = self.nodes[ls].value.data();
        let alpha_sq = self.nodes[outscale].value.item();
        let (n, d) = mat_dims(xv);
        let (m, _) = mat_dims(x2v);
        let xd = xv.data();
        let x2d = x2v.data();
        let gd = g.data();

        let mut g_alpha = 0.0;
        let mut g_ls = vec![0.0; d];
        let mut gx = vec![0.0; n * d];
        let mut gx2 = vec![0.0; m * d];
        let inv2: Vec<f64> = lsv.iter().map(|&l| 1.0 / (l * l)).collect();
        for i in 0..n {
            let xi = &xd[i * d..(i + 1) * d];
            for j in 0..m {
                let gk = gd[i * m + j] * kval[i * m + j];
                if gk == 0.0 {
                    continue;
                }
                g_alpha += gd[i * m + j] * kval[i * m + j] / alpha_sq;
                let xj = &x2d[j * d..(j + 1) * d];
                for dd in 0..d {
                    let diff = xi[dd] - xj[dd];
                    g_ls[dd] += gk * diff * diff * inv2[dd] / lsv[dd];
                    let gdx = -gk * diff * inv2[dd];
                    gx[i * d + dd] += gdx;
                    gx2[j * d + dd] -= gdx;
                }
            }
        }
        let mut out = vec![
            (ls, Tensor::from_vec(&[d], g_ls)),
            (outscale, Tensor::scalar(g_alpha)),
        ];
        match x2 {
            Some(x2_real) => {
                out.push((x, Tensor::from_vec(&[n, d], gx)));
                out.push((x2_real, Tensor::from_vec(&[m, d], gx2)));
            }
            None => {
                // same parent on both sides: fold both contributions
                let mut gtot = gx;
                for (a, b) in gtot.iter_mut().zip(gx2.iter()) {
                    *a += b;
                }
                out.push((x, Tensor::from_vec(&[n, d], gtot)));
            }
        }
        out
    }
}

/// Parent node indices of an op.
fn op_parents(op: &Op, out: &mut Vec<usize>) {
    match *op {
        Op::Leaf => {}
        Op::Unary { p, .. }
        | Op::Scale { p, .. }
        | Op::AddScalar { p }
        | Op::Sum { p }
        | Op::Reshape { p }
        | Op::SliceRows { p, .. }
        | Op::SliceCols { p, .. }
        | Op::NormalizeCols { p } => out.push(p),
        Op::Add { a, b }
        | Op::Sub { a, b }
        | Op::Mul { a, b }
        | Op::Matmul { a, b }
        | Op::ConcatRows { a, b }
        | Op::ConcatCols { a, b } => {
            out.push(a);
            out.push(b);
        }
        Op::Linear { x, w, b, .. }
        | Op::Conv2d { x, w, b, .. }
        | Op::ConvT2d { x, w, b, .. } => {
            out.push(x);
            out.push(w);
            out.push(b);
        }
        Op::RbfKernel { x, x2, ls, outscale } => {
            out.push(x);
            if let Some(x2) = x2 {
                out.push(x2);
            }
            out.push(ls);
            out.push(outscale);
        }
        Op::AddDiag { k, noise } => {
            out.push(k);
            out.push(noise);
        }
        Op::GaussianMll { k, resid } => {
            out.push(k);
            out.push(resid);
        }
        Op::BernoulliLogLik { pred, .. } => out.push(pred),
        Op::BernoulliLogitsLogLik { z, .. } => out.push(z),
    }
}

/// Gradients returned by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient or zeros of the given shape when the node is unreachable
    /// from the root.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

const LN_2PI: f64 = 1.8378770664093454;

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn apply_act(buf: &mut [f64], act: Act) {
    match act {
        Act::None => {}
        Act::Relu => {
            for v in buf.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        Act::Sigmoid => {
            for v in buf.iter_mut() {
                *v = sigmoid(*v);
            }
        }
    }
}

thread_local! {
    /// Reusable large temporaries for the conv kernels. Freeing multi-MB
    /// buffers returns them to the OS on the system allocator, so a fresh
    /// allocation per chunk would pay page-fault costs on every use.
    static SCRATCH: std::cell::RefCell<Vec<Vec<f64>>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Runs `f` with up to three reusable scratch buffers of the given lengths.
/// Contents are unspecified; callers must fully overwrite what they read.
fn with_scratch<R>(sizes: [usize; 3], f: impl FnOnce(&mut [f64], &mut [f64], &mut [f64]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut pool = cell.borrow_mut();
        while pool.len() < 3 {
            pool.push(Vec::new());
        }
        let mut bufs = std::mem::take(&mut *pool);
        drop(pool);
        for (b, &n) in bufs.iter_mut().zip(sizes.iter()) {
            if b.len() < n {
                b.resize(n, 0.0);
            }
        }
        let [a, b, c] = &mut bufs[..3] else { unreachable!() };
        let out = f(&mut a[..sizes[0]], &mut b[..sizes[1]], &mut c[..sizes[2]]);
        *cell.borrow_mut() = bufs;
        out
    })
}

/// `dst[c][r] = src[r][c]` for a row-major `rows x cols` source.
fn transpose_into(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        for (c, &v) in row.iter().enumerate() {
            dst[c * rows + r] = v;
        }
    }
}

/// Transposes conv gemm rows `[HW, Cout]` into image layout `[Cout, HW]`,
/// adding the bias and applying the activation on the way.
fn transpose_bias_act(src: &[f64], hw: usize, cout: usize, bias: &[f64], act: Act, dst: &mut [f64]) {
    debug_assert_eq!(src.len(), hw * cout);
    debug_assert_eq!(dst.len(), hw * cout);
    for r in 0..hw {
        let row = &src[r * cout..(r + 1) * cout];
        for (c, &v) in row.iter().enumerate() {
            let pre = v + bias[c];
            dst[c * hw + r] = match act {
                Act::None => pre,
                Act::Relu => pre.max(0.0),
                Act::Sigmoid => sigmoid(pre),
            };
        }
    }
}

/// Converts an output-space gradient to a pre-activation gradient in place,
/// using only the post-activation output values.
fn act_backward(grad: &mut [f64], out: &[f64], act: Act) {
    match act {
        Act::None => {}
        Act::Relu => {
            for (gv, &y) in grad.iter_mut().zip(out.iter()) {
                if y <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        Act::Sigmoid => {
            for (gv, &y) in grad.iter_mut().zip(out.iter()) {
                *gv *= y * (1.0 - y);
            }
        }
    }
}

/// Shared Bernoulli log-likelihood kernel (also used by the plain API).
pub fn bernoulli_loglik_value(target: &[f64], pred: &[f64]) -> f64 {
    let lo = BCE_EPS;
    let hi = 1.0 - BCE_EPS;
    target
        .iter()
        .zip(pred.iter())
        .map(|(&t, &p)| {
            let p = p.clamp(lo, hi);
            t * p.ln() + (1.0 - t) * (1.0 - p).ln()
        })
        .sum()
}

fn mat_dims(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 2, "expected matrix, got shape {s:?}");
    (s[0], s[1])
}

fn dims4(t: &Tensor) -> [usize; 4] {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected 4-d tensor, got shape {s:?}");
    [s[0], s[1], s[2], s[3]]
}

/// Applies `f` to fixed-size chunks of images, writing into disjoint slices
/// of `out` (whose per-image stride is `item_len`). Parallel execution writes
/// the same bytes as sequential execution.
fn run_images<F>(parallel: bool, chunk: usize, bsz: usize, out: &mut [f64], item_len: usize, f: F)
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync,
{
    if bsz == 0 {
        return;
    }
    // Chunk boundaries are identical in both modes so that any accumulation
    // grouped per chunk produces the same bits sequentially and in parallel.
    if parallel && bsz > chunk {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk * item_len)
            .enumerate()
            .for_each(|(ci, out_chunk)| {
                let start = ci * chunk;
                let end = (start + chunk).min(bsz);
                f(start..end, out_chunk);
            });
    } else {
        for (ci, out_chunk) in out.chunks_mut(chunk * item_len).enumerate() {
            let start = ci * chunk;
            let end = (start + chunk).min(bsz);
            f(start..end, out_chunk);
        }
    }
}

/// Like [`run_images`] but each chunk also returns a partial reduction that is
/// combined strictly in chunk order by the caller.
fn run_images_with_partials<F, T>(
    parallel: bool,
    chunk: usize,
    bsz: usize,
    out: &mut [f64],
    item_len: usize,
    f: F,
) -> Vec<T>
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) -> T + Sync,
    T: Send,
{
    if bsz == 0 {
        return Vec::new();
    }
    if item_len == 0 {
        // no per-image output, only partials
        let ranges: Vec<std::ops::Range<usize>> = (0..bsz)
            .step_by(chunk)
            .map(|s| s..(s + chunk).min(bsz))
            .collect();
        return if parallel && bsz > chunk {
            use rayon::prelude::*;
            ranges.into_par_iter().map(|r| f(r, &mut [])).collect()
        } else {
            ranges.into_iter().map(|r| f(r, &mut [])).collect()
        };
    }
    if parallel && bsz > chunk {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk * item_len)
            .enumerate()
            .map(|(ci, out_chunk)| {
                let start = ci * chunk;
                let end = (start + chunk).min(bsz);
                f(start..end, out_chunk)
            })
            .collect()
    } else {
        out.chunks_mut(chunk * item_len)
            .enumerate()
            .map(|(ci, out_chunk)| {
                let start = ci * chunk;
                let end = (start + chunk).min(bsz);
                f(start..end, out_chunk)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite-difference check of `build` against tape gradients.
    /// `build` must construct the same scalar function from fresh leaves.
    fn fd_check<F>(leaves: &[Tensor], build: F, tol: f64)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let eval = |vals: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
            let root = build(&mut tape, &vars);
            tape.value(root).item()
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward(root);
        for (li, leaf) in leaves.iter().enumerate() {
            let g = grads.get_or_zeros(vars[li], leaf.shape());
            for ei in 0..leaf.numel() {
                let x0 = leaf.data()[ei];
                let h = 1e-5 * x0.abs().max(1.0);
                let mut plus = leaves.to_vec();
                plus[li].data_mut()[ei] = x0 + h;
                let mut minus = leaves.to_vec();
                minus[li].data_mut()[ei] = x0 - h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = g.data()[ei];
                let denom = fd.abs().max(an.abs()).max(1.0);
                assert!(
                    (fd - an).abs() / denom < tol,
                    "leaf {li} elem {ei}: fd={fd} analytic={an}"
                );
            }
        }
    }

    fn t(shape: &[usize], seed: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n).map(|i| ((i as f64 + seed) * 0.7).sin() * 0.5).collect(),
        )
    }

    #[test]
    fn elementwise_grads() {
        fd_check(
            &[t(&[2, 3], 1.0), t(&[2, 3], 9.0)],
            |tape, v| {
                let a = tape.softplus(v[0]);
                let b = tape.sigmoid(v[1]);
                let c = tape.mul(a, b);
                let d = tape.exp(c);
                let e = tape.add(d, a);
                let f = tape.square(e);
                tape.sum(f)
            },
            1e-6,
        );
    }

    #[test]
    fn ln_and_scale_grads() {
        let x = Tensor::from_vec(&[4], vec![0.5, 1.5, 2.0, 0.3]);
        fd_check(
            &[x],
            |tape, v| {
                let a = tape.ln(v[0]);
                let b = tape.scale(a, -2.5);
                let c = tape.add_scalar(b, 1.0);
                let d = tape.neg(c);
                tape.sum(d)
            },
            1e-6,
        );
    }

    #[test]
    fn matmul_linear_grads() {
        fd_check(
            &[t(&[3, 4], 0.0), t(&[4, 2], 5.0), t(&[2], 11.0), t(&[3, 4], 2.0)],
            |tape, v| {
                let y = tape.linear(v[0], v[1], v[2], Act::Relu);
                let z = tape.matmul(v[3], v[1]);
                let w = tape.add(y, z);
                let s = tape.square(w);
                tape.sum(s)
            },
            1e-5,
        );
    }

    #[test]
    fn conv2d_grads() {
        fd_check(
            &[t(&[2, 2, 5, 5], 0.0), t(&[3, 2, 2, 2], 4.0), t(&[3], 8.0)],
            |tape, v| {
                let y = tape.conv2d(v[0], v[1], v[2], 2, Act::Relu);
                let s = tape.square(y);
                tape.sum(s)
            },
            1e-5,
        );
    }

    #[test]
    fn conv_transpose2d_grads() {
        fd_check(
            &[t(&[2, 3, 2, 2], 0.3), t(&[3, 2, 3, 3], 4.0), t(&[2], 8.0)],
            |tape, v| {
                let y = tape.conv_transpose2d(v[0], v[1], v[2], 2, Act::Sigmoid);
                let s = tape.square(y);
                tape.sum(s)
            },
            1e-5,
        );
    }

    #[test]
    fn conv_matches_direct_computation() {
        // single image, single channel; verify against a hand loop
        let x = t(&[1, 1, 4, 4], 0.0);
        let w = t(&[1, 1, 2, 2], 3.0);
        let b = Tensor::from_vec(&[1], vec![0.1]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
        let y = tape.conv2d(xv, wv, bv, 2, Act::None);
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.1;
                for ky in 0..2 {
                    for kx in 0..2 {
                        acc += x.data()[(2 * i + ky) * 4 + 2 * j + kx] * w.data()[ky * 2 + kx];
                    }
                }
                let got = tape.value(y).data()[i * 2 + j];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> when they share a weight (zero bias)
        let x = t(&[1, 2, 5, 5], 0.0);
        let y = t(&[1, 3, 2, 2], 7.0);
        let w = t(&[3, 2, 3, 3], 2.0); // conv weight [Cout, Cin, KH, KW]
        // convT wants [Cin(=3 here: maps y back), Cout, KH, KW]; same memory works
        let zero3 = Tensor::zeros(&[3]);
        let zero2 = Tensor::zeros(&[2]);
        let mut tape = Tape::new();
        let (xv, yv, wv) = (tape.leaf(x.clone()), tape.leaf(y.clone()), tape.leaf(w.clone()));
        let z3 = tape.leaf(zero3);
        let z2 = tape.leaf(zero2);
        let cx = tape.conv2d(xv, wv, z3, 2, Act::None);
        let ty = tape.conv_transpose2d(yv, wv, z2, 2, Act::None);
        let lhs: f64 = tape
            .value(cx)
            .data()
            .iter()
            .zip(y.data().iter())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(tape.value(ty).data().iter())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn slice_concat_grads() {
        fd_check(
            &[t(&[3, 4], 0.0), t(&[2, 4], 5.0), t(&[5, 2], 9.0)],
            |tape, v| {
                let c = tape.concat_rows(v[0], v[1]);
                let cc = tape.concat_cols(c, v[2]);
                let s1 = tape.slice_rows(cc, 1, 3);
                let s2 = tape.slice_cols(s1, 2, 3);
                let q = tape.square(s2);
                tape.sum(q)
            },
            1e-6,
        );
    }

    #[test]
    fn normalize_cols_grads_and_stats() {
        let x = t(&[6, 3], 0.0);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let (y, mean, std) = tape.normalize_cols(v);
        // stats: columns of y have ~zero mean, ~unit variance
        let yd = tape.value(y).data().to_vec();
        for j in 0..3 {
            let col: Vec<f64> = (0..6).map(|i| yd[i * 3 + j]).collect();
            let m: f64 = col.iter().sum::<f64>() / 6.0;
            let var: f64 = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 6.0;
            assert!(m.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-6);
            // inverse affine recovers input
            for i in 0..6 {
                let rec = yd[i * 3 + j] * std[j] + mean[j];
                assert!((rec - x.data()[i * 3 + j]).abs() < 1e-10);
            }
        }
        fd_check(
            &[t(&[6, 3], 0.0)],
            |tape, v| {
                let (y, _, _) = tape.normalize_cols(v[0]);
                let w = tape.exp(y);
                tape.sum(w)
            },
            1e-5,
        );
    }

    #[test]
    fn rbf_and_mll_grads() {
        let x = t(&[5, 3], 0.0);
        let ls = Tensor::from_vec(&[3], vec![0.8, 1.2, 0.6]);
        let os = Tensor::scalar(1.5);
        let nz = Tensor::scalar(0.3);
        let r = t(&[5], 21.0);
        fd_check(
            &[x, ls, os, nz, r],
            |tape, v| {
                let k = tape.rbf_kernel(v[0], None, v[1], v[2]);
                let kn = tape.add_diag(k, v[3]);
                tape.gaussian_mll(kn, v[4]).unwrap()
            },
            1e-5,
        );
    }

    #[test]
    fn rbf_cross_grads() {
        let x = t(&[4, 2], 0.0);
        let x2 = t(&[3, 2], 13.0);
        let ls = Tensor::from_vec(&[2], vec![0.9, 1.1]);
        let os = Tensor::scalar(0.7);
        fd_check(
            &[x, x2, ls, os],
            |tape, v| {
                let k = tape.rbf_kernel(v[0], Some(v[1]), v[2], v[3]);
                let s = tape.square(k);
                tape.sum(s)
            },
            1e-5,
        );
    }

    #[test]
    fn bernoulli_grads() {
        let p = Tensor::from_vec(&[4], vec![0.3, 0.6, 0.9, 0.45]);
        let target = Tensor::from_vec(&[4], vec![0.0, 1.0, 0.8, 0.2]);
        let tval = target.clone();
        fd_check(
            &[p],
            move |tape, v| {
                let t = tape.leaf(tval.clone());
                tape.bernoulli_loglik(t, v[0])
            },
            1e-6,
        );
        // value check: single pixel, t=0.3, p=0.7
        assert!(
            (bernoulli_loglik_value(&[0.3], &[0.7]) - (0.3f64 * 0.7f64.ln() + 0.7 * 0.3f64.ln()))
                .abs()
                < 1e-15
        );
    }

    #[test]
    fn logits_bernoulli_matches_composed_and_grads() {
        // fused logits likelihood == sigmoid-then-likelihood on tame values
        let z = Tensor::from_vec(&[5], vec![-2.0, -0.3, 0.0, 1.2, 3.5]);
        let target = Tensor::from_vec(&[5], vec![0.0, 0.7, 0.5, 1.0, 0.2]);
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let tv = tape.constant(target.clone());
        let fused = tape.bernoulli_loglik_logits(tv, zv);
        let p = tape.sigmoid(zv);
        let tv2 = tape.constant(target.clone());
        let composed = tape.bernoulli_loglik(tv2, p);
        let a = tape.value(fused).item();
        let b = tape.value(composed).item();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        // saturated logits stay finite and keep gradient
        let mut tape2 = Tape::new();
        let zbig = tape2.leaf(Tensor::from_vec(&[2], vec![-900.0, 900.0]));
        let tbig = tape2.constant(Tensor::from_vec(&[2], vec![1.0, 0.0]));
        let ll = tape2.bernoulli_loglik_logits(tbig, zbig);
        assert!((tape2.value(ll).item() + 1800.0).abs() < 1e-9);
        let grads = tape2.backward(ll);
        let g = grads.get(zbig).unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-12);
        assert!((g.data()[1] + 1.0).abs() < 1e-12);
        // finite differences on tame values
        let tgt = Tensor::from_vec(&[4], vec![0.1, 0.9, 0.4, 1.0]);
        fd_check(
            &[Tensor::from_vec(&[4], vec![0.5, -1.0, 2.0, -0.2])],
            move |tape, v| {
                let t = tape.constant(tgt.clone());
                tape.bernoulli_loglik_logits(t, v[0])
            },
            1e-6,
        );
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]);
        let y = Tensor::from_vec(&[2], vec![3.0, 4.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let w = tape.leaf(y);
        let d = tape.detach(v);
        let prod = tape.mul(d, w);
        let s = tape.square(prod);
        let root = tape.sum(s);
        let grads = tape.backward(root);
        // nothing flows through the detached copy back to its source
        assert!(grads.get(v).is_none());
        assert!(grads.get(d).is_none());
        // but the other operand still gets its gradient
        let gw = grads.get(w).expect("live leaf gradient");
        assert!((gw.data()[0] - 2.0 * 3.0 * 1.0 * 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_inputs_skip_gradients() {
        // conv over a constant input: weight/bias grads match the leaf-input
        // case bitwise, input grad is absent
        let x = t(&[3, 2, 8, 8], 0.0);
        let w = t(&[4, 2, 4, 4], 3.0);
        let b = t(&[4], 7.0);
        let run = |as_constant: bool| -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let xv = if as_constant {
                tape.constant(x.clone())
            } else {
                tape.leaf(x.clone())
            };
            let (wv, bv) = (tape.leaf(w.clone()), tape.leaf(b.clone()));
            let y = tape.conv2d(xv, wv, bv, 2, Act::Relu);
            let s = tape.square(y);
            let root = tape.sum(s);
            let grads = tape.backward(root);
            (
                grads.get(xv).map(|g| g.data().to_vec()),
                grads.get(wv).unwrap().data().to_vec(),
                grads.get(bv).unwrap().data().to_vec(),
            )
        };
        let (gx_leaf, gw_leaf, gb_leaf) = run(false);
        let (gx_const, gw_const, gb_const) = run(true);
        assert!(gx_leaf.is_some());
        assert!(gx_const.is_none());
        for (a, b) in gw_leaf.iter().zip(gw_const.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in gb_leaf.iter().zip(gb_const.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let x = t(&[20, 3, 12, 12], 0.0);
        let w = t(&[5, 3, 4, 4], 3.0);
        let b = t(&[5], 7.0);
        let run = |parallel: bool| -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
            let mut tape = Tape::with_parallel(parallel);
            let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
            let y = tape.conv2d(xv, wv, bv, 2, Act::Relu);
            let yval = tape.value(y).data().to_vec();
            let s = tape.square(y);
            let root = tape.sum(s);
            let grads = tape.backward(root);
            (
                yval,
                grads.get(xv).unwrap().data().to_vec(),
                grads.get(wv).unwrap().data().to_vec(),
                grads.get(bv).unwrap().data().to_vec(),
            )
        };
        let (y1, gx1, gw1, gb1) = run(false);
        let (y2, gx2, gw2, gb2) = run(true);
        for (a, b) in [(y1, y2), (gx1, gx2), (gw1, gw2), (gb1, gb2)] {
            assert_eq!(a.len(), b.len());
            for (u, v) in a.iter().zip(b.iter()) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn batch_item_independence() {
        // conv over a batch equals conv over each item separately, bitwise
        let x = t(&[3, 2, 8, 8], 0.0);
        let w = t(&[4, 2, 4, 4], 3.0);
        let b = t(&[4], 7.0);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
        let y_all = tape.conv2d(xv, wv, bv, 2, Act::None);
        let full = tape.value(y_all).data().to_vec();
        let item = 2 * 8 * 8;
        let out_item = full.len() / 3;
        for i in 0..3 {
            let xi = Tensor::from_vec(&[1, 2, 8, 8], x.data()[i * item..(i + 1) * item].to_vec());
            let mut tape2 = Tape::new();
            let (x1, w1, b1) = (tape2.leaf(xi), tape2.leaf(w.clone()), tape2.leaf(b.clone()));
            let y1 = tape2.conv2d(x1, w1, b1, 2, Act::None);
            let solo = tape2.value(y1).data();
            for (a, bb) in full[i * out_item..(i + 1) * out_item].iter().zip(solo.iter()) {
                assert_eq!(a.to_bits(), bb.to_bits());
            }
        }
    }
}

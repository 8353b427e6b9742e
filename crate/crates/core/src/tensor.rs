//! Dense row-major `f64` tensors and the few kernels the spiking layers need.
//!
//! There is no autodiff here. Layers call [`gemm`], [`im2col`] and [`col2im`]
//! directly from their hand-written backward passes.

use std::fmt;

use crate::error::{Error, Result};

/// Dense tensor with row-major contiguous storage.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::dim("tensor needs at least one dimension"));
    }
    let mut n: usize = 1;
    for &d in shape {
        if d == 0 {
            return Err(Error::dim(format!("zero-sized dimension in shape {shape:?}")));
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::dim(format!("shape {shape:?} overflows")))?;
    }
    Ok(n)
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.as_matrix()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(vec![n, m], out)
    }

    fn as_matrix(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            other => Err(Error::dim(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    /// `self[m×k] · other[k×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.as_matrix()?;
        let (k2, n) = other.as_matrix()?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(false, false, m, n, k, 1.0, &self.data, &other.data, 0.0, &mut out);
        Tensor::new(vec![m, n], out)
    }

    /// Cross-correlation of a `C_in×H×W` input with a `C_out×C_in×k×k` kernel.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let geom = match (self.shape.as_slice(), kernel.shape.as_slice()) {
            ([c, h, w], [co, ci, kh, kw]) => {
                if c != ci {
                    return Err(Error::dim(format!(
                        "input has {c} channels, kernel expects {ci}"
                    )));
                }
                if kh != kw {
                    return Err(Error::dim("only square kernels are supported"));
                }
                ConvGeometry::new(*c, *h, *w, *co, *kh, stride, padding)?
            }
            _ => {
                return Err(Error::dim(format!(
                    "conv2d expects C×H×W input and O×C×k×k kernel, got {:?} and {:?}",
                    self.shape, kernel.shape
                )))
            }
        };
        let mut cols = vec![0.0; geom.col_rows() * geom.out_pixels()];
        im2col(&geom, &self.data, &mut cols);
        let mut out = vec![0.0; geom.out_channels * geom.out_pixels()];
        gemm(
            false,
            false,
            geom.out_channels,
            geom.out_pixels(),
            geom.col_rows(),
            1.0,
            &kernel.data,
            &cols,
            0.0,
            &mut out,
        );
        Tensor::new(vec![geom.out_channels, geom.out_h, geom.out_w], out)
    }
}

/// Row-major general matrix multiply: `c = alpha·op(a)·op(b) + beta·c`,
/// where `op(a)` is `m×k` and `op(b)` is `k×n`. A transposed operand is
/// stored in its untransposed row-major layout (`k×m` for `a`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every slice to exactly the extent the
    // strides address, so all reads and writes stay in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Shape bookkeeping for one 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::dim("conv stride must be at least 1"));
        }
        if kernel == 0 || in_channels == 0 || out_channels == 0 || in_h == 0 || in_w == 0 {
            return Err(Error::dim("conv dimensions must be positive"));
        }
        if kernel > in_h + 2 * padding || kernel > in_w + 2 * padding {
            return Err(Error::dim(format!(
                "kernel {kernel} larger than padded input {in_h}x{in_w} (pad {padding})"
            )));
        }
        Ok(Self {
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel,
            stride,
            padding,
            out_h: (in_h + 2 * padding - kernel) / stride + 1,
            out_w: (in_w + 2 * padding - kernel) / stride + 1,
        })
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.out_pixels()
    }

    /// Rows of the unfolded patch matrix, `C_in·k·k`.
    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Unfold a `C×H×W` image into a `(C·k·k) × (H'·W')` patch matrix.
pub fn im2col(g: &ConvGeometry, input: &[f64], cols: &mut [f64]) {
    debug_assert_eq!(input.len(), g.input_len());
    debug_assert_eq!(cols.len(), g.col_rows() * g.out_pixels());
    let pixels = g.out_pixels();
    for c in 0..g.in_channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * pixels..(row + 1) * pixels];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        dst[oy * g.out_w + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.in_h
                            && (ix as usize) < g.in_w
                        {
                            input[(c * g.in_h + iy as usize) * g.in_w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back onto a `C×H×W` image.
pub fn col2im(g: &ConvGeometry, cols: &[f64], image: &mut [f64]) {
    debug_assert_eq!(image.len(), g.input_len());
    debug_assert_eq!(cols.len(), g.col_rows() * g.out_pixels());
    let pixels = g.out_pixels();
    for c in 0..g.in_channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * pixels..(row + 1) * pixels];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.in_h {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix as usize >= g.in_w {
                            continue;
                        }
                        image[(c * g.in_h + iy as usize) * g.in_w + ix as usize] +=
                            src[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
}

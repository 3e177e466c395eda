//! Minimal dense tensors with tape-based reverse-mode differentiation.
//!
//! Every trainable computation in the crate is expressed through [`Tape`].
//! A tape lives for one forward/backward pass and is then dropped.

mod tape;
mod tensor;

pub use tape::{smooth_l1_value, Tape, Var, SMOOTH_L1_BETA};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("backward root must be scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("no attendable tokens")]
    NoAttendableTokens,
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
}

/// `c = a * b + beta * c` for strided `m×k` and `k×n` operands; `c` is
/// contiguous row-major `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller passes slices covering the strided extents; every
    // call site derives the strides from the same shapes used to size them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-wise softmax on a plain tensor (no tape).
pub fn softmax_rows(x: &Tensor) -> Result<Tensor, AutodiffError> {
    if !x.is_finite() {
        return Err(AutodiffError::NonFinite { op: "softmax" });
    }
    let data = tape::softmax_forward(x.data(), x.cols(), None)?;
    Tensor::new(x.shape().to_vec(), data)
}

/// Compares tape gradients of a scalar function against central finite
/// differences. Returns `max_i |g_ad - g_fd| / max(1, |g_fd|)`.
pub fn check_gradients<F>(f: F, x: &Tensor, h: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let root = f(&mut tape, xv)?;
    tape.backward(root)?;
    let analytic = tape.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: &Tensor| -> Result<f64, AutodiffError> {
        let mut t = Tape::new();
        let v = t.leaf(probe.clone());
        let r = f(&mut t, v)?;
        Ok(t.value(r).item())
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let err = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

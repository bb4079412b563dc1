//! Covariance algebra for Gaussians whose covariance is a 2×2 grid of
//! diagonal blocks, done entirely with elementwise vector operations.
//!
//! A `2d`-dimensional covariance is stored as three length-`d` vectors: the
//! upper-block diagonal `su`, the lower-block diagonal `sl` and the shared
//! off-diagonal `ss`. Each index `i` then describes an independent 2×2 slice
//! `[[su_i, ss_i], [ss_i, sl_i]]`, so inversion and congruence transforms
//! reduce to scalar formulas. Linear maps touching these covariances are
//! restricted to the same block-of-diagonals pattern ([`BlockDiag2x2`]),
//! which keeps the algebra exactly closed.
//!
//! Inputs may be batched: vectors are `[rows, d]` tensors and all formulas
//! apply row-wise.

use crate::error::{MtsError, Result};
use crate::tensor::Tensor;

/// Determinant floor used by the `_clamped` inversions inside the SSM
/// layers; the checked entry points reject instead of clamping.
pub const DET_FLOOR: f64 = 1e-12;

/// Block-of-diagonals covariance (variance units).
#[derive(Clone, Copy, Debug)]
pub struct FactoredCov<'t> {
    pub su: Tensor<'t>,
    pub sl: Tensor<'t>,
    pub ss: Tensor<'t>,
}

/// Block-of-diagonals precision (inverse covariance).
#[derive(Clone, Copy, Debug)]
pub struct FactoredPrec<'t> {
    pub lu: Tensor<'t>,
    pub ll: Tensor<'t>,
    pub ls: Tensor<'t>,
}

/// A `2d × 2d` linear map made of four diagonal blocks
/// `[[uu, ul], [lu, ll]]`, stored as the four diagonals.
#[derive(Clone, Copy, Debug)]
pub struct BlockDiag2x2<'t> {
    pub uu: Tensor<'t>,
    pub ul: Tensor<'t>,
    pub lu: Tensor<'t>,
    pub ll: Tensor<'t>,
}

/// Positive diagonal noise for the two halves of a factored state.
#[derive(Clone, Copy, Debug)]
pub struct DiagPair<'t> {
    pub upper: Tensor<'t>,
    pub lower: Tensor<'t>,
}

impl<'t> FactoredCov<'t> {
    pub fn dim(&self) -> usize {
        self.su.cols()
    }

    /// Dense `2d × 2d` matrix for batch row `row` (row-major).
    pub fn densify_row(&self, row: usize) -> Vec<f64> {
        let d = self.dim();
        let su = self.su.value();
        let sl = self.sl.value();
        let ss = self.ss.value();
        densify_parts(
            &su[row * d..(row + 1) * d],
            &sl[row * d..(row + 1) * d],
            &ss[row * d..(row + 1) * d],
        )
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        assert_eq!(self.sl.cols(), d, "factored cov: sl dim mismatch");
        assert_eq!(self.ss.cols(), d, "factored cov: ss dim mismatch");
        let su = self.su.value();
        let sl = self.sl.value();
        let ss = self.ss.value();
        for i in 0..su.len() {
            if su[i] <= 0.0 {
                return Err(MtsError::NonPositiveVariance {
                    value: su[i],
                    index: i,
                });
            }
            if sl[i] <= 0.0 {
                return Err(MtsError::NonPositiveVariance {
                    value: sl[i],
                    index: i,
                });
            }
            let det = su[i] * sl[i] - ss[i] * ss[i];
            if det <= 0.0 {
                return Err(MtsError::NotPositiveDefinite { det, index: i });
            }
        }
        Ok(())
    }
}

impl<'t> FactoredPrec<'t> {
    pub fn dim(&self) -> usize {
        self.lu.cols()
    }

    fn validate(&self) -> Result<()> {
        let lu = self.lu.value();
        let ll = self.ll.value();
        let ls = self.ls.value();
        for i in 0..lu.len() {
            if lu[i] <= 0.0 {
                return Err(MtsError::NonPositiveVariance {
                    value: lu[i],
                    index: i,
                });
            }
            if ll[i] <= 0.0 {
                return Err(MtsError::NonPositiveVariance {
                    value: ll[i],
                    index: i,
                });
            }
            let det = lu[i] * ll[i] - ls[i] * ls[i];
            if det <= 0.0 {
                return Err(MtsError::NotPositiveDefinite { det, index: i });
            }
        }
        Ok(())
    }
}

impl<'t> BlockDiag2x2<'t> {
    pub fn dim(&self) -> usize {
        self.uu.cols()
    }

    /// Dense `2d × 2d` matrix (parameters are single-row).
    pub fn densify(&self) -> Vec<f64> {
        densify_block(
            &self.uu.value(),
            &self.ul.value(),
            &self.lu.value(),
            &self.ll.value(),
        )
    }
}

/// Shared inverse of one block-of-diagonals matrix: each 2×2 slice is
/// inverted in closed form.
fn invert_parts<'t>(
    a_u: Tensor<'t>,
    a_l: Tensor<'t>,
    a_s: Tensor<'t>,
    det_floor: Option<f64>,
) -> (Tensor<'t>, Tensor<'t>, Tensor<'t>) {
    let det = a_u * a_l - a_s * a_s;
    let det = match det_floor {
        Some(f) => det.clamp_min(f),
        None => det,
    };
    let b_u = a_l / det;
    let b_l = a_u / det;
    let b_s = a_s.neg() / det;
    (b_u, b_l, b_s)
}

/// Blockwise inverse of a covariance; rejects non-PD input.
pub fn factored_invert<'t>(c: &FactoredCov<'t>) -> Result<FactoredPrec<'t>> {
    c.validate()?;
    let (lu, ll, ls) = invert_parts(c.su, c.sl, c.ss, None);
    Ok(FactoredPrec { lu, ll, ls })
}

/// Blockwise inverse of a precision; rejects non-PD input.
pub fn factored_invert_prec<'t>(p: &FactoredPrec<'t>) -> Result<FactoredCov<'t>> {
    p.validate()?;
    let (su, sl, ss) = invert_parts(p.lu, p.ll, p.ls, None);
    Ok(FactoredCov { su, sl, ss })
}

/// Inversion with the determinant clamped at [`DET_FLOOR`]; used inside the
/// differentiable SSM layers where rejecting is not an option.
pub fn factored_invert_clamped<'t>(c: &FactoredCov<'t>) -> FactoredPrec<'t> {
    let (lu, ll, ls) = invert_parts(c.su, c.sl, c.ss, Some(DET_FLOOR));
    FactoredPrec { lu, ll, ls }
}

pub fn factored_invert_prec_clamped<'t>(p: &FactoredPrec<'t>) -> FactoredCov<'t> {
    let (su, sl, ss) = invert_parts(p.lu, p.ll, p.ls, Some(DET_FLOOR));
    FactoredCov { su, sl, ss }
}

/// Congruence transform `M Σ Mᵀ`. Because every block is diagonal the result
/// is exactly block-of-diagonals; nothing is discarded.
pub fn propagate_cov<'t>(m: &BlockDiag2x2<'t>, c: &FactoredCov<'t>) -> FactoredCov<'t> {
    assert_eq!(m.dim(), c.dim(), "propagate_cov: dimension mismatch");
    let two = |t: Tensor<'t>| t.scale(2.0);
    let su = m.uu.square() * c.su + two(m.uu * m.ul * c.ss) + m.ul.square() * c.sl;
    let sl = m.lu.square() * c.su + two(m.lu * m.ll * c.ss) + m.ll.square() * c.sl;
    let ss = m.uu * m.lu * c.su + (m.uu * m.ll + m.ul * m.lu) * c.ss + m.ul * m.ll * c.sl;
    FactoredCov { su, sl, ss }
}

/// Elementwise sum of two factored covariances.
pub fn add_cov<'t>(a: &FactoredCov<'t>, b: &FactoredCov<'t>) -> FactoredCov<'t> {
    FactoredCov {
        su: a.su + b.su,
        sl: a.sl + b.sl,
        ss: a.ss + b.ss,
    }
}

/// Dense `2d × 2d` matrix from the three diagonals (plain values).
pub fn densify_parts(su: &[f64], sl: &[f64], ss: &[f64]) -> Vec<f64> {
    let d = su.len();
    let n = 2 * d;
    let mut out = vec![0.0; n * n];
    for i in 0..d {
        out[i * n + i] = su[i];
        out[(d + i) * n + d + i] = sl[i];
        out[i * n + d + i] = ss[i];
        out[(d + i) * n + i] = ss[i];
    }
    out
}

/// Dense `2d × 2d` matrix from four block diagonals (plain values).
pub fn densify_block(uu: &[f64], ul: &[f64], lu: &[f64], ll: &[f64]) -> Vec<f64> {
    let d = uu.len();
    let n = 2 * d;
    let mut out = vec![0.0; n * n];
    for i in 0..d {
        out[i * n + i] = uu[i];
        out[i * n + d + i] = ul[i];
        out[(d + i) * n + i] = lu[i];
        out[(d + i) * n + d + i] = ll[i];
    }
    out
}

/// Extract the block-of-diagonals pattern from a dense `2d × 2d` matrix.
pub fn sparsify(dense: &[f64], d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = 2 * d;
    assert_eq!(dense.len(), n * n, "sparsify: bad dense size");
    let mut su = vec![0.0; d];
    let mut sl = vec![0.0; d];
    let mut ss = vec![0.0; d];
    for i in 0..d {
        su[i] = dense[i * n + i];
        sl[i] = dense[(d + i) * n + d + i];
        ss[i] = dense[i * n + d + i];
    }
    (su, sl, ss)
}

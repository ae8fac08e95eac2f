use crate::error::{Result, XfrError};
use crate::tensor::{squared_distance, Real};

fn check<T: Real>(p: &[T], m: &[T], n: &[T], alpha: T) -> Result<()> {
    if p.len() != m.len() {
        return Err(XfrError::LengthMismatch(p.len(), m.len()));
    }
    if p.len() != n.len() {
        return Err(XfrError::LengthMismatch(p.len(), n.len()));
    }
    if !(alpha >= T::zero()) {
        return Err(XfrError::InvalidArgument(format!(
            "margin must be non-negative, got {alpha:?}"
        )));
    }
    Ok(())
}

fn hinge_argument<T: Real>(p: &[T], m: &[T], n: &[T], alpha: T) -> T {
    squared_distance(p, m) - squared_distance(p, n) + alpha
}

/// Max-margin triplet hinge `max(0, |p - m|^2 - |p - n|^2 + alpha)`.
pub fn triplet_loss<T: Real>(p: &[T], m: &[T], n: &[T], alpha: T) -> Result<T> {
    check(p, m, n, alpha)?;
    Ok(hinge_argument(p, m, n, alpha).max(T::zero()))
}

/// Gradient of [`triplet_loss`] with respect to `p`, holding `m` and `n`
/// fixed: `2 (n - m)` while the hinge is active. At an argument of exactly
/// zero the zero subgradient is returned.
pub fn triplet_loss_grad<T: Real>(p: &[T], m: &[T], n: &[T], alpha: T) -> Result<Vec<T>> {
    check(p, m, n, alpha)?;
    if hinge_argument(p, m, n, alpha) > T::zero() {
        let two = T::one() + T::one();
        Ok(m.iter().zip(n).map(|(&mi, &ni)| two * (ni - mi)).collect())
    } else {
        Ok(vec![T::zero(); p.len()])
    }
}

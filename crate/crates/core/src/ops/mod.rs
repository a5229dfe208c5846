//! Differentiable operations recorded on a [`Tape`](crate::tape::Tape).

mod conv;
pub(crate) mod image;
mod layout;
mod pointwise;
mod reduce;

pub use conv::Padding;
pub use pointwise::Activation;

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

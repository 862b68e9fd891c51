//! Dense tensors and a tape-based reverse-mode autodiff engine.
//!
//! A [`Graph`] is recorded once per forward pass. Every differentiable
//! operation appends a node holding its output value and enough saved state
//! to run its backward rule; [`Graph::backward`] then walks the nodes in
//! reverse insertion order, which is a valid reverse topological order since
//! a node's inputs always precede it. The graph is dropped after gradients
//! have been read out.
//!
//! Shapes are explicit: apart from the row-wise bias in [`Graph::add_row`]
//! and the per-row scaling in [`Graph::mul_rows`] nothing broadcasts.

mod graph;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::Tensor;

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `out[m×q] = a[m×p] · b[p×q]`, all row-major.
pub(crate) fn mat_mul(a: &[f64], b: &[f64], m: usize, p: usize, q: usize) -> alloc::vec::Vec<f64> {
    let mut out = alloc::vec![0.0; m * q];
    for i in 0..m {
        let row = &mut out[i * q..(i + 1) * q];
        for k in 0..p {
            let aik = a[i * p + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * q..(k + 1) * q];
            for (o, &bkj) in row.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    out
}

/// Accumulates `a[m×q] · bᵀ` into `out[m×p]` where `b` is `[p×q]`.
pub(crate) fn mat_mul_bt_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, q: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * q..(i + 1) * q];
        for k in 0..p {
            let brow = &b[k * q..(k + 1) * q];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * p + k] += s;
        }
    }
}

/// Accumulates `aᵀ · c` into `out[p×q]` where `a` is `[m×p]` and `c` is `[m×q]`.
pub(crate) fn mat_mul_at_acc(out: &mut [f64], a: &[f64], c: &[f64], m: usize, p: usize, q: usize) {
    for i in 0..m {
        let crow = &c[i * q..(i + 1) * q];
        for k in 0..p {
            let aik = a[i * p + k];
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[k * q..(k + 1) * q];
            for (o, &cij) in orow.iter_mut().zip(crow) {
                *o += aik * cij;
            }
        }
    }
}

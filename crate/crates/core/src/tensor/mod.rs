//! Dense arrays with a recording graph for reverse-mode differentiation.
//!
//! Convolution path tensors are NCHW; the attention path is NHWC. Use
//! [`nchw_to_nhwc`] / [`nhwc_to_nchw`] at the boundary.

mod array;
pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod kernels;

pub use array::Array;
pub use attention::{window_attention, AttentionParams};
pub use checkpoint::{Bound, ParamStore};
pub use gradcheck::{grad_check, grad_check_multi, GradReport};
pub use graph::{Graph, Grads, Var};

use crate::error::Result;


pub fn nchw_to_nhwc(g: &mut Graph, x: Var) -> Result<Var> {
    g.permute(x, &[0, 2, 3, 1])
}

pub fn nhwc_to_nchw(g: &mut Graph, x: Var) -> Result<Var> {
    g.permute(x, &[0, 3, 1, 2])
}

/// Channel softmax of an NCHW tensor.
pub fn softmax_channel(g: &mut Graph, x: Var) -> Result<Var> {
    g.softmax(x, 1)
}

/// `[N,C,H,W]` -> `[N,C*f*f,H/f,W/f]`; channel index is `c*f*f + di*f + dj`.
pub fn space_to_depth(g: &mut Graph, x: Var, f: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let t = g.reshape(x, &[n, c, h / f, f, w / f, f])?;
    let t = g.permute(t, &[0, 1, 3, 5, 2, 4])?;
    g.reshape(t, &[n, c * f * f, h / f, w / f])
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(g: &mut Graph, x: Var, f: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (n, cff, h, w) = (s[0], s[1], s[2], s[3]);
    let c = cff / (f * f);
    let t = g.reshape(x, &[n, c, f, f, h, w])?;
    let t = g.permute(t, &[0, 1, 4, 2, 5, 3])?;
    g.reshape(t, &[n, c, h * f, w * f])
}

//! Window-local multi-head self-attention on channels-last feature maps.
//!
//! This is a reduced SwinV2 block core: dot-product attention inside each
//! non-overlapping window with a learned relative-position bias table. The
//! surrounding residual/post-norm wiring lives in the model.

use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// Graph handles for one attention layer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    /// `[C, 3C]`
    pub qkv_w: Var,
    /// `[3C]`
    pub qkv_b: Var,
    /// `[C, C]`
    pub proj_w: Var,
    /// `[C]`
    pub proj_b: Var,
    /// `[(2w-1)^2, heads]`, or `None` to disable the position bias.
    pub rel_bias: Option<Var>,
}

/// `[N,H,W,C]` -> `[N*(H/w)*(W/w), w*w, C]`, windows in row-major order.
pub fn window_partition(g: &mut Graph, x: Var, window: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (nh, nw) = (h / window, w / window);
    let t = g.reshape(x, &[n, nh, window, nw, window, c])?;
    let t = g.permute(t, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(t, &[n * nh * nw, window * window, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse(g: &mut Graph, x: Var, n: usize, h: usize, w: usize, window: usize) -> Result<Var> {
    let c = g.shape(x)[2];
    let (nh, nw) = (h / window, w / window);
    let t = g.reshape(x, &[n, nh, nw, window, window, c])?;
    let t = g.permute(t, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(t, &[n, h, w, c])
}

/// Index into a `(2w-1)^2` table for every (query, key) pair of a window.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let t = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(t * t);
    for q in 0..t {
        let (qr, qc) = (q / window, q % window);
        for k in 0..t {
            let (kr, kc) = (k / window, k % window);
            let dr = qr + window - 1 - kr;
            let dc = qc + window - 1 - kc;
            idx.push(dr * span + dc);
        }
    }
    idx
}

pub fn check_attention_shape(shape: &[usize], window: usize, heads: usize) -> Result<()> {
    if shape.len() != 4 {
        return Err(Error::dim("window_attention", format!("expected NHWC, got {shape:?}")));
    }
    let (h, w, c) = (shape[1], shape[2], shape[3]);
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::Config(format!("feature map {h}x{w} is not divisible by window {window}")));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{c} channels are not divisible by {heads} heads")));
    }
    Ok(())
}

/// Attention output `[N,H,W,C]` plus the softmax weights `[B, heads, T, T]`
/// (`B` windows, `T = window^2` tokens).
pub fn window_attention_with_weights(
    g: &mut Graph,
    x: Var,
    window: usize,
    heads: usize,
    p: &AttentionParams,
) -> Result<(Var, Var)> {
    let s = g.shape(x).to_vec();
    check_attention_shape(&s, window, heads)?;
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let hd = c / heads;
    let t = window * window;

    let xw = window_partition(g, x, window)?;
    let b = g.shape(xw)[0];
    let qkv = g.linear(xw, p.qkv_w)?;
    let qkv = g.add_broadcast(qkv, p.qkv_b)?;
    let qkv = g.reshape(qkv, &[b, t, 3, heads, hd])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let qkv = g.reshape(qkv, &[3, b * heads, t, hd])?;
    let mut qkv_parts = [qkv; 3];
    for (i, part) in qkv_parts.iter_mut().enumerate() {
        let v = g.narrow(qkv, 0, i, 1)?;
        *part = g.reshape(v, &[b * heads, t, hd])?;
    }
    let [q, k, v] = qkv_parts;

    let logits = g.batch_matmul(q, k, true)?;
    let mut logits = g.scale(logits, 1.0 / (hd as f64).sqrt())?;
    if let Some(table) = p.rel_bias {
        let rel = relative_position_index(window);
        // bias[h, i, j] = table[rel[i, j], h]
        let mut index = Vec::with_capacity(heads * t * t);
        for head in 0..heads {
            index.extend(rel.iter().map(|&r| r * heads + head));
        }
        let bias = g.gather(table, index, &[heads, t, t])?;
        let l4 = g.reshape(logits, &[b, heads, t, t])?;
        let l4 = g.add_broadcast(l4, bias)?;
        logits = g.reshape(l4, &[b * heads, t, t])?;
    }
    let attn = g.softmax(logits, 2)?;
    let out = g.batch_matmul(attn, v, false)?;
    let out = g.reshape(out, &[b, heads, t, hd])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[b, t, c])?;
    let out = g.linear(out, p.proj_w)?;
    let out = g.add_broadcast(out, p.proj_b)?;
    let out = window_reverse(g, out, n, h, w, window)?;
    let weights = g.reshape(attn, &[b, heads, t, t])?;
    Ok((out, weights))
}

pub fn window_attention(g: &mut Graph, x: Var, window: usize, heads: usize, p: &AttentionParams) -> Result<Var> {
    window_attention_with_weights(g, x, window, heads, p).map(|(out, _)| out)
}

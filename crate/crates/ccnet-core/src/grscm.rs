//! Grouped spectral correlation attention.
//!
//! Input is a feature map `[H, W, C]` viewed as `HW` pixels times `C`
//! channels. Channels are cut into `groups` contiguous blocks; each block gets
//! its own Q/K/V projections, so projection cost drops by the group count
//! relative to full-width projections. Inside a group, heads are contiguous
//! column blocks. Per head, Q and K columns are L2-normalized over the pixel
//! axis so the Gram matrix `K^T Q` holds cosine similarities between spectral
//! channels. A learned per-head temperature scales it, a learned bias matrix
//! (initialized to zero) shifts it, rows are softmaxed, and the result mixes
//! the V channels. Head outputs are concatenated and fused by an output
//! projection.

use crate::error::{Error, Result};
use crate::params::{he_uniform, key, Params};
use crate::rng::SplitMix64;
use crate::tensor::{Tensor, COSINE_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GrscmConfig {
    /// Feature channels C of the block this module lives in.
    pub channels: usize,
    /// Embedding width; `channels / c_in` is the head count.
    pub c_in: usize,
    /// Number of channel groups sharing one set of projections.
    pub groups: usize,
}

impl GrscmConfig {
    pub fn validate(&self) -> Result<()> {
        let GrscmConfig {
            channels,
            c_in,
            groups,
        } = *self;
        if channels == 0 || c_in == 0 || groups == 0 {
            return Err(Error::invalid("grscm", "channels, c_in, groups must be positive"));
        }
        if channels % c_in != 0 {
            return Err(Error::invalid(
                "grscm",
                format!("channels {channels} not divisible by c_in {c_in}"),
            ));
        }
        if channels % groups != 0 {
            return Err(Error::invalid(
                "grscm",
                format!("channels {channels} not divisible by groups {groups}"),
            ));
        }
        if c_in % groups != 0 {
            return Err(Error::invalid(
                "grscm",
                format!("c_in {c_in} not divisible by groups {groups}"),
            ));
        }
        Ok(())
    }

    /// Heads per group (also heads total: every group hosts all heads'
    /// column slices).
    pub fn heads(&self) -> usize {
        self.channels / self.c_in
    }

    /// Channels per group.
    pub fn group_width(&self) -> usize {
        self.channels / self.groups
    }

    /// Columns per head within a group.
    pub fn head_width(&self) -> usize {
        self.group_width() / self.heads()
    }
}

#[derive(Clone)]
pub struct GrscmParams {
    /// Per group: query projection `[d, d]` with `d = channels / groups`.
    pub wq: Vec<Tensor>,
    /// Per group: key projection `[d, d]`.
    pub wk: Vec<Tensor>,
    /// Per group: value projection `[d, d]`.
    pub wv: Vec<Tensor>,
    /// Per group: additive attention bias `[heads, dh, dh]`, zero-initialized.
    pub rse: Vec<Tensor>,
    /// Per group: per-head temperature `[heads]`, ones-initialized.
    pub sigma: Vec<Tensor>,
    /// Output projection `[channels, channels]`.
    pub wo: Tensor,
}

impl GrscmParams {
    pub fn init(cfg: &GrscmConfig, rng: &mut SplitMix64) -> Result<GrscmParams> {
        cfg.validate()?;
        let d = cfg.group_width();
        let n = cfg.heads();
        let dh = cfg.head_width();
        let k = cfg.groups;
        let proj = |rng: &mut SplitMix64| he_uniform(&[d, d], d, rng);
        let wq: Vec<Tensor> = (0..k).map(|_| proj(rng)).collect();
        let wk: Vec<Tensor> = (0..k).map(|_| proj(rng)).collect();
        let wv: Vec<Tensor> = (0..k).map(|_| proj(rng)).collect();
        let rse = (0..k).map(|_| Tensor::zeros(&[n, dh, dh])).collect();
        let sigma = (0..k).map(|_| Tensor::full(&[n], 1.0)).collect();
        let wo = he_uniform(&[cfg.channels, cfg.channels], cfg.channels, rng);
        Ok(GrscmParams {
            wq,
            wk,
            wv,
            rse,
            sigma,
            wo,
        })
    }
}

impl Params for GrscmParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        for (g, t) in self.wq.iter().enumerate() {
            f(&key(prefix, &format!("wq{g}")), t);
        }
        for (g, t) in self.wk.iter().enumerate() {
            f(&key(prefix, &format!("wk{g}")), t);
        }
        for (g, t) in self.wv.iter().enumerate() {
            f(&key(prefix, &format!("wv{g}")), t);
        }
        for (g, t) in self.rse.iter().enumerate() {
            f(&key(prefix, &format!("rse{g}")), t);
        }
        for (g, t) in self.sigma.iter().enumerate() {
            f(&key(prefix, &format!("sigma{g}")), t);
        }
        f(&key(prefix, "wo"), &self.wo);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (g, t) in self.wq.iter_mut().enumerate() {
            f(&key(prefix, &format!("wq{g}")), t);
        }
        for (g, t) in self.wk.iter_mut().enumerate() {
            f(&key(prefix, &format!("wk{g}")), t);
        }
        for (g, t) in self.wv.iter_mut().enumerate() {
            f(&key(prefix, &format!("wv{g}")), t);
        }
        for (g, t) in self.rse.iter_mut().enumerate() {
            f(&key(prefix, &format!("rse{g}")), t);
        }
        for (g, t) in self.sigma.iter_mut().enumerate() {
            f(&key(prefix, &format!("sigma{g}")), t);
        }
        f(&key(prefix, "wo"), &mut self.wo);
    }
}

/// Forward pass and, on request, the per-head attention matrices
/// (`groups * heads` matrices of shape `[dh, dh]`, rows summing to one).
fn grscm_parts(
    x: &Tensor,
    p: &GrscmParams,
    cfg: &GrscmConfig,
    want_attention: bool,
) -> Result<(Tensor, Vec<Tensor>)> {
    cfg.validate()?;
    let shape = x.shape();
    if shape.len() != 3 || shape[2] != cfg.channels {
        return Err(Error::invalid(
            "grscm",
            format!("expected input [H, W, {}], got {shape:?}", cfg.channels),
        ));
    }
    let (h_sz, w_sz) = (shape[0], shape[1]);
    let hw = h_sz * w_sz;
    let d = cfg.group_width();
    let n = cfg.heads();
    let dh = cfg.head_width();

    let flat = x.reshape(&[hw, cfg.channels])?;
    let mut group_outs: Vec<Tensor> = Vec::with_capacity(cfg.groups);
    let mut attn: Vec<Tensor> = Vec::new();
    for g in 0..cfg.groups {
        let xg = flat.slice(1, g * d, d)?;
        let q = xg.matmul(&p.wq[g])?;
        let kk = xg.matmul(&p.wk[g])?;
        let v = xg.matmul(&p.wv[g])?;
        let mut head_outs: Vec<Tensor> = Vec::with_capacity(n);
        for h in 0..n {
            let qh = q.slice(1, h * dh, dh)?.l2_normalize(0, COSINE_EPS)?;
            let kh = kk.slice(1, h * dh, dh)?.l2_normalize(0, COSINE_EPS)?;
            let vh = v.slice(1, h * dh, dh)?;
            // [dh, dh] channel-by-channel cosine similarities.
            let logits = kh.permute(&[1, 0])?.matmul(&qh)?;
            let sig = p.sigma[g].slice(0, h, 1)?;
            let rse_h = p.rse[g].slice(0, h, 1)?.reshape(&[dh, dh])?;
            let a = rse_h.add(&logits.mul(&sig)?)?.softmax_lastdim()?;
            if want_attention {
                attn.push(a.detached());
            }
            head_outs.push(vh.matmul(&a)?);
        }
        let refs: Vec<&Tensor> = head_outs.iter().collect();
        group_outs.push(Tensor::concat(&refs, 1)?);
    }
    let refs: Vec<&Tensor> = group_outs.iter().collect();
    let merged = Tensor::concat(&refs, 1)?;
    let out = merged.matmul(&p.wo)?.reshape(&[h_sz, w_sz, cfg.channels])?;
    Ok((out, attn))
}

/// Maps `[H, W, C]` to `[H, W, C]`.
pub fn grscm_forward(x: &Tensor, p: &GrscmParams, cfg: &GrscmConfig) -> Result<Tensor> {
    Ok(grscm_parts(x, p, cfg, false)?.0)
}

/// Attention matrices for inspection, ordered group-major then head:
/// `groups * heads` detached tensors of shape `[dh, dh]`.
pub fn grscm_attention(x: &Tensor, p: &GrscmParams, cfg: &GrscmConfig) -> Result<Vec<Tensor>> {
    Ok(grscm_parts(x, p, cfg, true)?.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Full-width multi-head attention: every head projects all `c_in`
    /// embedding channels.
    MultiHead,
    /// Grouped projections: each of `groups` blocks projects `c_in / groups`
    /// channels per head.
    Grouped,
}

/// Number of scalar weights in the Q/K/V projections for one head stack.
/// The grouped form uses exactly `groups` times fewer weights than the
/// full-width form.
pub fn attention_weight_count(c_in: usize, groups: usize, heads: usize, kind: AttentionKind) -> usize {
    match kind {
        AttentionKind::MultiHead => heads * c_in * c_in,
        AttentionKind::Grouped => {
            let per = c_in / groups;
            groups * heads * per * per
        }
    }
}

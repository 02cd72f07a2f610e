//! Progressive fusion of the correlation and continuity feature maps.
//!
//! The continuity map is first compressed: its channels are cut into `groups`
//! blocks, each block summarized by its per-pixel mean and max, and the pair
//! reduced to one channel by a learned pointwise combination. Both maps then
//! pass through pointwise projections, are cut into non-overlapping `patch` x
//! `patch` tiles, and every projected correlation channel-tile is compared to
//! every compressed continuity channel-tile by cosine similarity. A softmax
//! over the compressed channels turns similarities into mixing weights, the
//! compressed tiles are blended accordingly, and the blend is added back onto
//! the correlation map. When the compressed branch carries nothing, the
//! module passes the correlation map through untouched.

use crate::error::{Error, Result};
use crate::params::{he_uniform, key, Params};
use crate::rng::SplitMix64;
use crate::tensor::{ReduceKind, Tensor, COSINE_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PafConfig {
    /// Feature channels C.
    pub channels: usize,
    /// Channel groups for compression; also the compressed channel count.
    pub groups: usize,
    /// Tile side length; must divide both spatial extents of the input.
    pub patch: usize,
}

impl PafConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.groups == 0 || self.patch == 0 {
            return Err(Error::invalid("paf", "channels, groups, patch must be positive"));
        }
        if self.channels % self.groups != 0 {
            return Err(Error::invalid(
                "paf",
                format!("channels {} not divisible by groups {}", self.channels, self.groups),
            ));
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct PafParams {
    /// Per-group weight on the mean summary: `[groups]`.
    pub sia_mean: Tensor,
    /// Per-group weight on the max summary: `[groups]`.
    pub sia_max: Tensor,
    /// Per-group compression bias: `[groups]`.
    pub sia_bias: Tensor,
    /// Pointwise projection of the correlation map: `[C, C]` plus `[C]` bias.
    pub map_att_w: Tensor,
    pub map_att_b: Tensor,
    /// Pointwise projection of the compressed map: `[groups, groups]` plus
    /// `[groups]` bias.
    pub map_cp_w: Tensor,
    pub map_cp_b: Tensor,
}

impl PafParams {
    pub fn init(cfg: &PafConfig, rng: &mut SplitMix64) -> Result<PafParams> {
        cfg.validate()?;
        let c = cfg.channels;
        let k = cfg.groups;
        Ok(PafParams {
            sia_mean: he_uniform(&[k], 2, rng),
            sia_max: he_uniform(&[k], 2, rng),
            sia_bias: Tensor::zeros(&[k]),
            map_att_w: he_uniform(&[c, c], c, rng),
            map_att_b: Tensor::zeros(&[c]),
            map_cp_w: he_uniform(&[k, k], k, rng),
            map_cp_b: Tensor::zeros(&[k]),
        })
    }
}

impl Params for PafParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        f(&key(prefix, "sia_mean"), &self.sia_mean);
        f(&key(prefix, "sia_max"), &self.sia_max);
        f(&key(prefix, "sia_bias"), &self.sia_bias);
        f(&key(prefix, "map_att_w"), &self.map_att_w);
        f(&key(prefix, "map_att_b"), &self.map_att_b);
        f(&key(prefix, "map_cp_w"), &self.map_cp_w);
        f(&key(prefix, "map_cp_b"), &self.map_cp_b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&key(prefix, "sia_mean"), &mut self.sia_mean);
        f(&key(prefix, "sia_max"), &mut self.sia_max);
        f(&key(prefix, "sia_bias"), &mut self.sia_bias);
        f(&key(prefix, "map_att_w"), &mut self.map_att_w);
        f(&key(prefix, "map_att_b"), &mut self.map_att_b);
        f(&key(prefix, "map_cp_w"), &mut self.map_cp_w);
        f(&key(prefix, "map_cp_b"), &mut self.map_cp_b);
    }
}

/// Compresses `[H, W, C]` to `[H, W, groups]`: per group, a learned blend of
/// the per-pixel channel mean and channel max.
pub fn sia_compress(x: &Tensor, p: &PafParams, cfg: &PafConfig) -> Result<Tensor> {
    cfg.validate()?;
    let shape = x.shape();
    if shape.len() != 3 || shape[2] != cfg.channels {
        return Err(Error::invalid(
            "paf",
            format!("expected [H, W, {}], got {shape:?}", cfg.channels),
        ));
    }
    let (h, w) = (shape[0], shape[1]);
    let hw = h * w;
    let per = cfg.channels / cfg.groups;
    let flat = x.reshape(&[hw, cfg.channels])?;
    let mut means = Vec::with_capacity(cfg.groups);
    let mut maxs = Vec::with_capacity(cfg.groups);
    for g in 0..cfg.groups {
        let block = flat.slice(1, g * per, per)?;
        means.push(block.reduce(1, ReduceKind::Mean)?.reshape(&[hw, 1])?);
        maxs.push(block.reduce(1, ReduceKind::Max)?.reshape(&[hw, 1])?);
    }
    let mean_refs: Vec<&Tensor> = means.iter().collect();
    let max_refs: Vec<&Tensor> = maxs.iter().collect();
    let mean_cat = Tensor::concat(&mean_refs, 1)?;
    let max_cat = Tensor::concat(&max_refs, 1)?;
    mean_cat
        .mul(&p.sia_mean)?
        .add(&max_cat.mul(&p.sia_max)?)?
        .add(&p.sia_bias)?
        .reshape(&[h, w, cfg.groups])
}

/// Cuts `[H, W, C]` into non-overlapping `r` x `r` tiles: `[P, C, r*r]` with
/// `P = (H/r) * (W/r)`, tiles in row-major order. Pure data movement.
pub fn patchify(x: &Tensor, r: usize) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::invalid("paf", format!("expected rank 3, got {shape:?}")));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::invalid(
            "paf",
            format!("patch {r} must divide spatial extents {h}x{w}"),
        ));
    }
    let (th, tw) = (h / r, w / r);
    x.reshape(&[th, r, tw, r, c])?
        .permute(&[0, 2, 4, 1, 3])?
        .reshape(&[th * tw, c, r * r])
}

/// Inverse of [`patchify`] for the given spatial extents. Bit-exact.
pub fn unpatchify(p: &Tensor, h: usize, w: usize, r: usize) -> Result<Tensor> {
    let shape = p.shape();
    if shape.len() != 3 {
        return Err(Error::invalid("paf", format!("expected rank 3, got {shape:?}")));
    }
    if r == 0 || h % r != 0 || w % r != 0 || shape[0] != (h / r) * (w / r) || shape[2] != r * r {
        return Err(Error::invalid(
            "paf",
            format!("tiles {shape:?} do not tile {h}x{w} with patch {r}"),
        ));
    }
    let (th, tw, c) = (h / r, w / r, shape[1]);
    p.reshape(&[th, tw, c, r, r])?
        .permute(&[0, 3, 1, 4, 2])?
        .reshape(&[h, w, c])
}

fn paf_parts(
    f_att: &Tensor,
    f_cp: &Tensor,
    p: &PafParams,
    cfg: &PafConfig,
    want_weights: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    cfg.validate()?;
    let shape = f_att.shape();
    if shape != f_cp.shape() {
        return Err(Error::invalid(
            "paf",
            format!("input shapes differ: {:?} vs {:?}", f_att.shape(), f_cp.shape()),
        ));
    }
    if shape.len() != 3 || shape[2] != cfg.channels {
        return Err(Error::invalid(
            "paf",
            format!("expected [H, W, {}], got {shape:?}", cfg.channels),
        ));
    }
    let (h, w) = (shape[0], shape[1]);
    let hw = h * w;
    let r = cfg.patch;
    if h % r != 0 || w % r != 0 {
        return Err(Error::invalid(
            "paf",
            format!("patch {r} must divide spatial extents {h}x{w}"),
        ));
    }

    let compressed = sia_compress(f_cp, p, cfg)?;

    let att_mapped = f_att
        .reshape(&[hw, cfg.channels])?
        .matmul(&p.map_att_w)?
        .add(&p.map_att_b)?
        .reshape(&[h, w, cfg.channels])?;
    let cp_mapped = compressed
        .reshape(&[hw, cfg.groups])?
        .matmul(&p.map_cp_w)?
        .add(&p.map_cp_b)?
        .reshape(&[h, w, cfg.groups])?;

    let att_p = patchify(&att_mapped, r)?;
    let cp_p = patchify(&cp_mapped, r)?;

    let sims = att_p.cosine_pairs(&cp_p, COSINE_EPS)?;
    let weights = sims.softmax_lastdim()?;
    let fused = weights.matmul(&cp_p)?;
    let out = f_att.add(&unpatchify(&fused, h, w, r)?)?;
    let w_out = want_weights.then(|| weights.detached());
    Ok((out, w_out))
}

/// Fuses the correlation map `f_att` and the continuity map `f_cp`
/// (`[H, W, C]` each) into `[H, W, C]`.
pub fn paf_fuse(f_att: &Tensor, f_cp: &Tensor, p: &PafParams, cfg: &PafConfig) -> Result<Tensor> {
    Ok(paf_parts(f_att, f_cp, p, cfg, false)?.0)
}

/// The mixing weights, `[P, C, groups]` with rows on the last axis summing to
/// one. Detached; for inspection.
pub fn paf_weights(f_att: &Tensor, f_cp: &Tensor, p: &PafParams, cfg: &PafConfig) -> Result<Tensor> {
    Ok(paf_parts(f_att, f_cp, p, cfg, true)?.1.expect("weights requested"))
}

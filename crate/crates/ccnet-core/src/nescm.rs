//! Spectral continuity modeling with a bidirectional gated memory.
//!
//! The channel axis of a `[H, W, C]` feature map is split into
//! `n = channels / c_in` heads of `c_in` bands each. Per head, every band gets
//! a window of `window` neighboring bands (edge bands replicate outward).
//! A memory unit walks the bands in order: a pointwise sigmoid gate blends the
//! previous memory with the incoming window, and a spatial 3x3 convolution
//! (contracting the whole window) emits one output band per step. Two
//! independent units walk the band axis in opposite directions; their outputs
//! are concatenated and fused by a pointwise convolution back to one value
//! per band.

use crate::error::{Error, Result};
use crate::params::{he_uniform, key, Params};
use crate::rng::SplitMix64;
use crate::tensor::{PadMode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NescmConfig {
    /// Feature channels C.
    pub channels: usize,
    /// Bands per head; `channels / c_in` is the head count.
    pub c_in: usize,
    /// Spectral window length (odd).
    pub window: usize,
    /// When true, all heads within a branch share one memory unit.
    pub shared: bool,
}

impl NescmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.c_in == 0 {
            return Err(Error::invalid("nescm", "channels and c_in must be positive"));
        }
        if self.channels % self.c_in != 0 {
            return Err(Error::invalid(
                "nescm",
                format!("channels {} not divisible by c_in {}", self.channels, self.c_in),
            ));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::invalid(
                "nescm",
                format!("window must be odd and positive, got {}", self.window),
            ));
        }
        Ok(())
    }

    pub fn heads(&self) -> usize {
        self.channels / self.c_in
    }
}

/// One gated memory unit.
#[derive(Clone)]
pub struct CmuParams {
    /// Pointwise gate over (memory, input) pairs: `[1, 2, 1, 1, 1]`.
    pub gate_w: Tensor,
    pub gate_b: Tensor,
    /// Output convolution contracting the window and a 3x3 spatial
    /// neighborhood: `[1, 1, window, 3, 3]`.
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl CmuParams {
    pub fn init(window: usize, rng: &mut SplitMix64) -> CmuParams {
        CmuParams {
            gate_w: he_uniform(&[1, 2, 1, 1, 1], 2, rng),
            gate_b: Tensor::zeros(&[1]),
            out_w: he_uniform(&[1, 1, window, 3, 3], window * 9, rng),
            out_b: Tensor::zeros(&[1]),
        }
    }
}

impl Params for CmuParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        f(&key(prefix, "gate_w"), &self.gate_w);
        f(&key(prefix, "gate_b"), &self.gate_b);
        f(&key(prefix, "out_w"), &self.out_w);
        f(&key(prefix, "out_b"), &self.out_b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&key(prefix, "gate_w"), &mut self.gate_w);
        f(&key(prefix, "gate_b"), &mut self.gate_b);
        f(&key(prefix, "out_w"), &mut self.out_w);
        f(&key(prefix, "out_b"), &mut self.out_b);
    }
}

#[derive(Clone)]
pub struct NescmParams {
    /// Units walking bands in ascending order (one entry when shared,
    /// `heads` entries otherwise).
    pub fwd: Vec<CmuParams>,
    /// Units walking bands in descending order.
    pub bwd: Vec<CmuParams>,
    /// Pointwise fusion of the two branches: `[heads, 2 * heads, 1, 1, 1]`.
    pub fuse_w: Tensor,
    pub fuse_b: Tensor,
}

impl NescmParams {
    pub fn init(cfg: &NescmConfig, rng: &mut SplitMix64) -> Result<NescmParams> {
        cfg.validate()?;
        let n = cfg.heads();
        let units = if cfg.shared { 1 } else { n };
        let fwd = (0..units).map(|_| CmuParams::init(cfg.window, rng)).collect();
        let bwd = (0..units).map(|_| CmuParams::init(cfg.window, rng)).collect();
        let fuse_w = he_uniform(&[n, 2 * n, 1, 1, 1], 2 * n, rng);
        let fuse_b = Tensor::zeros(&[n]);
        Ok(NescmParams {
            fwd,
            bwd,
            fuse_w,
            fuse_b,
        })
    }
}

impl Params for NescmParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        for (i, p) in self.fwd.iter().enumerate() {
            p.visit(&key(prefix, &format!("fwd{i}")), f);
        }
        for (i, p) in self.bwd.iter().enumerate() {
            p.visit(&key(prefix, &format!("bwd{i}")), f);
        }
        f(&key(prefix, "fuse_w"), &self.fuse_w);
        f(&key(prefix, "fuse_b"), &self.fuse_b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, p) in self.fwd.iter_mut().enumerate() {
            p.visit_mut(&key(prefix, &format!("fwd{i}")), f);
        }
        for (i, p) in self.bwd.iter_mut().enumerate() {
            p.visit_mut(&key(prefix, &format!("bwd{i}")), f);
        }
        f(&key(prefix, "fuse_w"), &mut self.fuse_w);
        f(&key(prefix, "fuse_b"), &mut self.fuse_b);
    }
}

/// Splits the channel axis into heads: `[H, W, C]` to `[n, H, W, c_in]`.
pub fn head_split(x: &Tensor, heads: usize) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 || shape[2] % heads != 0 {
        return Err(Error::invalid(
            "nescm",
            format!("cannot split {shape:?} into {heads} heads"),
        ));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    x.reshape(&[h, w, heads, c / heads])?.permute(&[2, 0, 1, 3])
}

/// Inverse of [`head_split`]: `[n, H, W, c_in]` back to `[H, W, C]`.
pub fn head_merge(x: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::invalid("nescm", format!("expected rank 4, got {shape:?}")));
    }
    let (n, h, w, c_in) = (shape[0], shape[1], shape[2], shape[3]);
    x.permute(&[1, 2, 0, 3])?.reshape(&[h, w, n * c_in])
}

/// One window of `window` bands per band position, edges replicated:
/// `c_in` tensors of shape `[n, H, W, window]`.
pub fn extract_segments(heads: &Tensor, window: usize) -> Result<Vec<Tensor>> {
    let shape = heads.shape();
    if shape.len() != 4 {
        return Err(Error::invalid("nescm", format!("expected rank 4, got {shape:?}")));
    }
    if window == 0 || window % 2 == 0 {
        return Err(Error::invalid("nescm", "window must be odd and positive"));
    }
    let half = (window - 1) / 2;
    let padded = heads.pad(&[(0, 0), (0, 0), (0, 0), (half, half)], PadMode::Replicate)?;
    (0..shape[3]).map(|t| padded.slice(3, t, window)).collect()
}

/// One memory step: gate the previous memory against the incoming window,
/// then emit one output band.
///
/// `m` and `x_t` are `[H, W, window]`; returns the new memory `[H, W, window]`
/// and the step output `[H, W, 1]`.
pub fn cmu_step(m: &Tensor, x_t: &Tensor, p: &CmuParams) -> Result<(Tensor, Tensor)> {
    let shape = m.shape().to_vec();
    if shape.len() != 3 || x_t.shape() != shape.as_slice() {
        return Err(Error::invalid(
            "nescm",
            format!("cmu_step expects matching [H, W, window], got {:?} and {:?}", m.shape(), x_t.shape()),
        ));
    }
    let (h, w, s) = (shape[0], shape[1], shape[2]);
    let mc = m.reshape(&[1, h, w, s])?;
    let xc = x_t.reshape(&[1, h, w, s])?;
    let pair = Tensor::concat(&[&mc, &xc], 0)?;
    let gate = pair
        .conv3d(&p.gate_w, Some(&p.gate_b), (1, 1, 1), (0, 0, 0))?
        .reshape(&[h, w, s])?
        .sigmoid()?;
    let keep = gate.mul(m)?;
    let take = gate.affine(-1.0, 1.0)?.mul(x_t)?;
    let m_new = keep.add(&take)?;
    let y_in = m_new
        .tanh_act()?
        .add(x_t)?
        .permute(&[2, 0, 1])?
        .reshape(&[1, s, h, w])?;
    let y = y_in
        .conv3d(&p.out_w, Some(&p.out_b), (1, 1, 1), (0, 1, 1))?
        .reshape(&[h, w, 1])?;
    Ok((m_new, y))
}

/// Runs one branch over all heads. `reverse` walks bands in descending order;
/// outputs are always placed at their own band position.
fn run_branch(
    segments: &[Tensor],
    units: &[CmuParams],
    heads: usize,
    reverse: bool,
) -> Result<Tensor> {
    let seg_shape = segments[0].shape();
    let (h, w, s) = (seg_shape[1], seg_shape[2], seg_shape[3]);
    let c_in = segments.len();
    let mut head_outs: Vec<Tensor> = Vec::with_capacity(heads);
    for head in 0..heads {
        let p = &units[if units.len() == 1 { 0 } else { head }];
        let mut m = Tensor::zeros(&[h, w, s]);
        let mut ys: Vec<Tensor> = Vec::with_capacity(c_in);
        let order: Vec<usize> = if reverse {
            (0..c_in).rev().collect()
        } else {
            (0..c_in).collect()
        };
        for &t in &order {
            let x_t = segments[t].slice(0, head, 1)?.reshape(&[h, w, s])?;
            let (m_new, y) = cmu_step(&m, &x_t, p)?;
            m = m_new;
            ys.push(y);
        }
        if reverse {
            ys.reverse();
        }
        let refs: Vec<&Tensor> = ys.iter().collect();
        head_outs.push(Tensor::concat(&refs, 2)?.reshape(&[1, h, w, c_in])?);
    }
    let refs: Vec<&Tensor> = head_outs.iter().collect();
    Tensor::concat(&refs, 0)
}

/// Maps `[H, W, C]` to `[H, W, C]`.
pub fn nescm_forward(x: &Tensor, p: &NescmParams, cfg: &NescmConfig) -> Result<Tensor> {
    cfg.validate()?;
    let shape = x.shape();
    if shape.len() != 3 || shape[2] != cfg.channels {
        return Err(Error::invalid(
            "nescm",
            format!("expected input [H, W, {}], got {shape:?}", cfg.channels),
        ));
    }
    let n = cfg.heads();
    let heads = head_split(x, n)?;
    let segments = extract_segments(&heads, cfg.window)?;
    let fwd = run_branch(&segments, &p.fwd, n, false)?;
    let bwd = run_branch(&segments, &p.bwd, n, true)?;
    let both = Tensor::concat(&[&fwd, &bwd], 0)?;
    let fused = both.conv3d(&p.fuse_w, Some(&p.fuse_b), (1, 1, 1), (0, 0, 0))?;
    head_merge(&fused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{named_tensors, replace_from};
    use crate::tensor::grad_check_many;

    fn rand_input(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        let data: Vec<f64> = (0..h * w * c).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Tensor::from_vec(data, &[h, w, c]).unwrap()
    }

    #[test]
    fn head_split_and_merge_round_trip() {
        let x = rand_input(3, 4, 8, 1);
        let heads = head_split(&x, 2).unwrap();
        assert_eq!(heads.shape(), &[2, 3, 4, 4]);
        // Head h, band t holds original channel h * c_in + t.
        let xd = x.data();
        let hd = heads.data();
        for h in 0..2 {
            for y in 0..3 {
                for xx in 0..4 {
                    for t in 0..4 {
                        let orig = xd[(y * 4 + xx) * 8 + h * 4 + t];
                        let got = hd[((h * 3 + y) * 4 + xx) * 4 + t];
                        assert_eq!(orig, got);
                    }
                }
            }
        }
        let back = head_merge(&heads).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn segments_replicate_edges_and_count_bands() {
        // One head, 1x1 spatial, bands [10, 20, 30, 40], window 3.
        let heads = Tensor::from_vec(vec![10.0, 20.0, 30.0, 40.0], &[1, 1, 1, 4]).unwrap();
        let segs = extract_segments(&heads, 3).unwrap();
        assert_eq!(segs.len(), 4);
        assert_eq!(segs[0].data(), &[10.0, 10.0, 20.0][..]);
        assert_eq!(segs[1].data(), &[10.0, 20.0, 30.0][..]);
        assert_eq!(segs[2].data(), &[20.0, 30.0, 40.0][..]);
        assert_eq!(segs[3].data(), &[30.0, 40.0, 40.0][..]);
    }

    #[test]
    fn forward_preserves_shape() {
        let cfg = NescmConfig {
            channels: 8,
            c_in: 4,
            window: 3,
            shared: true,
        };
        let mut rng = SplitMix64::new(2);
        let p = NescmParams::init(&cfg, &mut rng).unwrap();
        let x = rand_input(3, 5, 8, 3);
        let y = nescm_forward(&x, &p, &cfg).unwrap();
        assert_eq!(y.shape(), &[3, 5, 8]);
    }

    #[test]
    fn unshared_units_are_independent_per_head() {
        let cfg = NescmConfig {
            channels: 8,
            c_in: 4,
            window: 3,
            shared: false,
        };
        let mut rng = SplitMix64::new(4);
        let p = NescmParams::init(&cfg, &mut rng).unwrap();
        assert_eq!(p.fwd.len(), 2);
        assert_eq!(p.bwd.len(), 2);
        let shared_cfg = NescmConfig { shared: true, ..cfg };
        let ps = NescmParams::init(&shared_cfg, &mut SplitMix64::new(4)).unwrap();
        assert_eq!(ps.fwd.len(), 1);
        // Same seed, different unit counts: parameter tallies differ.
        assert!(crate::params::param_count(&p) > crate::params::param_count(&ps));
    }

    #[test]
    fn rejects_even_window_and_bad_channels() {
        let bad = [
            NescmConfig { channels: 8, c_in: 4, window: 2, shared: true },
            NescmConfig { channels: 8, c_in: 3, window: 3, shared: true },
            NescmConfig { channels: 0, c_in: 1, window: 1, shared: true },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn zero_input_with_zero_biases_yields_zero_output() {
        let cfg = NescmConfig {
            channels: 6,
            c_in: 3,
            window: 3,
            shared: true,
        };
        let mut rng = SplitMix64::new(5);
        let p = NescmParams::init(&cfg, &mut rng).unwrap();
        let x = Tensor::zeros(&[4, 4, 6]);
        let y = nescm_forward(&x, &p, &cfg).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    /// The memory is a per-element convex combination of its previous value
    /// and the incoming window, so it can never leave the running envelope of
    /// everything seen so far.
    #[test]
    fn memory_stays_inside_input_envelope_over_long_runs() {
        let mut rng = SplitMix64::new(6);
        let p = CmuParams::init(3, &mut rng);
        let numel = 2 * 2 * 3;
        let mut m = Tensor::zeros(&[2, 2, 3]);
        let mut lo = vec![0.0f64; numel];
        let mut hi = vec![0.0f64; numel];
        for step in 0..1000 {
            let x: Vec<f64> = (0..numel).map(|_| rng.uniform(-3.0, 3.0)).collect();
            for i in 0..numel {
                lo[i] = lo[i].min(x[i]);
                hi[i] = hi[i].max(x[i]);
            }
            let xt = Tensor::from_vec(x, &[2, 2, 3]).unwrap();
            let (m_new, _y) = cmu_step(&m, &xt, &p).unwrap();
            m = m_new;
            for i in 0..numel {
                let v = m.data()[i];
                assert!(
                    v >= lo[i] - 1e-12 && v <= hi[i] + 1e-12,
                    "step {step}: memory {v} left envelope [{}, {}]",
                    lo[i],
                    hi[i]
                );
            }
        }
    }

    /// With the two branches tied, window-symmetric output kernels and a
    /// branch-symmetric fusion, reversing the band order of the input
    /// reverses the band order of the output.
    #[test]
    fn band_reversal_equivariance_with_tied_symmetric_params() {
        let cfg = NescmConfig {
            channels: 5,
            c_in: 5,
            window: 3,
            shared: true,
        };
        let mut rng = SplitMix64::new(7);
        let mut p = NescmParams::init(&cfg, &mut rng).unwrap();
        // Symmetrize the output kernel along the window axis.
        let ow = p.fwd[0].out_w.data().to_vec();
        let mut sym = ow.clone();
        for u in 0..3 {
            for v in 0..3 {
                let a = ow[u * 3 + v];
                let b = ow[2 * 9 + u * 3 + v];
                let avg = 0.5 * (a + b);
                sym[u * 3 + v] = avg;
                sym[2 * 9 + u * 3 + v] = avg;
            }
        }
        p.fwd[0].out_w = Tensor::from_vec(sym, &[1, 1, 3, 3, 3]).unwrap();
        p.fwd[0].gate_b = Tensor::from_vec(vec![0.3], &[1]).unwrap();
        p.fwd[0].out_b = Tensor::from_vec(vec![-0.2], &[1]).unwrap();
        p.bwd = p.fwd.clone();
        // Fuse must treat the two branches symmetrically: [1, 2, 1, 1, 1]
        // with equal weights on both branch channels.
        p.fuse_w = Tensor::from_vec(vec![0.6, 0.6], &[1, 2, 1, 1, 1]).unwrap();
        p.fuse_b = Tensor::from_vec(vec![0.1], &[1]).unwrap();

        let x = rand_input(3, 3, 5, 8);
        let reverse_bands = |t: &Tensor| -> Tensor {
            let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let d = t.data();
            let mut out = vec![0.0; d.len()];
            for pix in 0..h * w {
                for band in 0..c {
                    out[pix * c + band] = d[pix * c + (c - 1 - band)];
                }
            }
            Tensor::from_vec(out, &[h, w, c]).unwrap()
        };
        let y = nescm_forward(&x, &p, &cfg).unwrap();
        let y_rev_in = nescm_forward(&reverse_bands(&x), &p, &cfg).unwrap();
        let y_rev = reverse_bands(&y);
        for (a, b) in y_rev_in.data().iter().zip(y_rev.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = NescmConfig {
            channels: 4,
            c_in: 2,
            window: 3,
            shared: true,
        };
        let mut rng = SplitMix64::new(9);
        let p = NescmParams::init(&cfg, &mut rng).unwrap();
        let x = rand_input(3, 3, 4, 10);

        let mut inputs = vec![("x".to_string(), x)];
        inputs.extend(named_tensors(&p, "p"));
        let template = p.clone();
        let report = grad_check_many(
            |ts| {
                let mut params = template.clone();
                let mut it = ts[1..].iter().cloned();
                replace_from(&mut params, &mut it);
                nescm_forward(&ts[0], &params, &cfg)?.sum_all()
            },
            &inputs,
            1e-5,
            Some(12),
            55,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-5,
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst()
        );
    }
}

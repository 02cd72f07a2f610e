//! Adam optimization, cosine learning-rate annealing, the training loop, and
//! checkpoint serialization.
//!
//! Reproducibility contract: a run is a pure function of the model config,
//! the training config, and the dataset. One seeded generator drives batch
//! selection and augmentation; batch gradients are reduced in sample-index
//! order; parameters are rounded to float32 after every update so checkpoints
//! (which store float32) reproduce the in-memory model exactly.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::dataio::dihedral;
use crate::error::{Error, Result};
use crate::network::{ccnet_forward, CcnetParams, ModelConfig};
use crate::objectives::{total_loss, DifNormalization};
use crate::params::{bind, named_tensors, quantize_f32, Params};
use crate::rng::SplitMix64;
use crate::tensor::{Gradients, Tape, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

// ── Optimizer ───────────────────────────────────────────────────────────────

/// First/second moments per parameter tensor, in registry order, plus the
/// step counter. Moments are kept in float64 and serialized as float32.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new<P: Params>(params: &P) -> AdamState {
        let sizes: Vec<usize> = named_tensors(params, "").iter().map(|(_, t)| t.numel()).collect();
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

/// Gradients for every parameter tensor of `bound`, in registry order.
/// Tensors the loss never touched get zero gradients.
pub fn collect_grads<P: Params>(bound: &P, grads: &Gradients) -> Vec<Vec<f64>> {
    named_tensors(bound, "")
        .iter()
        .map(|(_, t)| match grads.wrt(t) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.numel()],
        })
        .collect()
}

/// Scales all gradients by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|&x| x * x).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// One bias-corrected Adam update. Increments `state.t`, updates moments, and
/// applies the step; every parameter is rounded to float32 afterward so the
/// model stays exactly representable in checkpoint precision. With fresh
/// moments and zero gradients the parameters are unchanged (rounding is
/// idempotent) while `t` still advances.
pub fn adam_step<P: Params>(
    params: &mut P,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.len() != state.m.len() {
        return Err(Error::invalid(
            "adam",
            format!("{} gradient tensors for {} state slots", grads.len(), state.m.len()),
        ));
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    let mut idx = 0;
    let mut err: Option<Error> = None;
    params.visit_mut("", &mut |name, tensor| {
        if err.is_some() {
            return;
        }
        let g = &grads[idx];
        if g.len() != tensor.numel() {
            err = Some(Error::invalid(
                "adam",
                format!("gradient length {} for parameter '{name}' of {} values", g.len(), tensor.numel()),
            ));
            return;
        }
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let mut data = tensor.data().to_vec();
        for j in 0..data.len() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + ADAM_EPS);
            data[j] = quantize_f32(data[j] - update);
        }
        *tensor = Tensor::from_vec(data, tensor.shape()).expect("shape unchanged");
        idx += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if idx != grads.len() {
        return Err(Error::invalid(
            "adam",
            format!("registry walked {idx} tensors but {} gradients were supplied", grads.len()),
        ));
    }
    Ok(())
}

// ── Schedule and config ─────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Initial learning rate.
    pub lr0: f64,
    /// Final learning rate at `total_steps`.
    pub lr_min: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    /// Drives batch selection and augmentation.
    pub seed: u64,
    /// Weight of the spectral-difference term in the total loss.
    pub gamma: f64,
    /// Steps between intermediate checkpoint writes; 0 writes only the
    /// final checkpoint.
    pub checkpoint_interval: u64,
    /// Optional global-gradient-norm ceiling; off by default.
    pub clip_norm: Option<f64>,
    pub dif_normalization: DifNormalization,
    /// Square-symmetry augmentation of each training pair (eight views,
    /// cycled in a fixed order from a seed-dependent phase).
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr0: 4e-4,
            lr_min: 1e-5,
            total_steps: 1000,
            batch_size: 1,
            seed: 0,
            gamma: 0.1,
            checkpoint_interval: 0,
            clip_norm: None,
            dif_normalization: DifNormalization::PixelMean,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 || self.lr_min < 0.0 || self.lr_min > self.lr0 {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 < lr_min <= lr0, got lr0={} lr_min={}",
                self.lr0, self.lr_min
            )));
        }
        if self.total_steps == 0 && self.checkpoint_interval > 0 {
            return Err(Error::Config("checkpoint interval without steps".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.gamma < 0.0 {
            return Err(Error::Config(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `lr0` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: u64, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps || cfg.total_steps == 0 {
        return Err(Error::Config(format!(
            "schedule step {step} out of range 0..={}",
            cfg.total_steps
        )));
    }
    let progress = step as f64 / cfg.total_steps as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

// ── Loop ────────────────────────────────────────────────────────────────────

/// One (input image, target cube) pair; shapes `[H, W, in_channels]` and
/// `[H, W, bands]`.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub rgb: Tensor,
    pub hsi: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    /// 0-based; also the schedule argument that produced `lr`.
    pub step: u64,
    pub lr: f64,
    pub loss_mrae: f64,
    pub loss_dif: f64,
    pub loss_total: f64,
}

pub const CSV_HEADER: &str = "step,lr,loss_mrae,loss_dif,loss_total";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.lr, self.loss_mrae, self.loss_dif, self.loss_total
        )
    }
}

pub fn history_to_csv(history: &[StepLog]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in history {
        out.push_str(&row.csv_row());
        out.push('\n');
    }
    out
}

pub struct TrainOutcome {
    pub params: CcnetParams,
    pub opt: AdamState,
    pub history: Vec<StepLog>,
}

/// Runs `cfg.total_steps` Adam updates of a freshly initialized model.
///
/// Per step: draw `batch_size` sample indices, augment each pair, run the
/// forward pass, average the per-sample total losses in sample-index order,
/// backpropagate, optionally clip, and update with the cosine-annealed rate.
/// When `ckpt_out` is given, the checkpoint is written there every
/// `checkpoint_interval` steps (if nonzero) and once more at the end.
/// `on_step` sees every completed step in order.
pub fn train_loop(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &[TrainSample],
    ckpt_out: Option<&Path>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("train", "dataset is empty"));
    }

    let mut params = CcnetParams::init(model_cfg)?;
    let mut opt = AdamState::new(&params);
    let mut rng = SplitMix64::new(cfg.seed);
    let mut history = Vec::with_capacity(cfg.total_steps as usize);
    // Augmentation cycles through the eight square symmetries from a
    // seed-dependent phase instead of drawing them independently: any eight
    // consecutive samples then cover every view exactly once, which removes
    // view-sampling noise from the batch gradient on small datasets.
    let mut view_counter = rng.below(8) as u64;

    for step in 0..cfg.total_steps {
        let lr = cosine_lr(step, cfg)?;
        let tape = Tape::new();
        let bound = bind(&params, &tape);

        let mut batch_total: Option<Tensor> = None;
        let mut mrae_acc = 0.0;
        let mut dif_acc = 0.0;
        for _ in 0..cfg.batch_size {
            let sample = &data[rng.below(data.len())];
            let (rgb, hsi) = if cfg.augment {
                let op = (view_counter % 8) as u8;
                view_counter += 1;
                (dihedral(&sample.rgb, op)?, dihedral(&sample.hsi, op)?)
            } else {
                (sample.rgb.clone(), sample.hsi.clone())
            };
            let pred = ccnet_forward(&rgb, &bound, model_cfg, false)?;
            let (loss, mrae_val, dif_val) =
                total_loss(&pred, &hsi, cfg.gamma, cfg.dif_normalization)?;
            mrae_acc += mrae_val;
            dif_acc += dif_val;
            batch_total = Some(match batch_total {
                None => loss,
                Some(acc) => acc.add(&loss)?,
            });
        }
        let denom = cfg.batch_size as f64;
        let loss = batch_total
            .expect("batch_size >= 1")
            .affine(1.0 / denom, 0.0)?;
        let loss_total = loss.item()?;

        let grads = loss.backward()?;
        let mut gvecs = collect_grads(&bound, &grads);
        if let Some(max_norm) = cfg.clip_norm {
            clip_global_norm(&mut gvecs, max_norm);
        }
        adam_step(&mut params, &gvecs, &mut opt, lr)?;

        let log = StepLog {
            step,
            lr,
            loss_mrae: mrae_acc / denom,
            loss_dif: dif_acc / denom,
            loss_total,
        };
        history.push(log);
        on_step(&log);

        if let Some(path) = ckpt_out {
            if cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0 {
                save_checkpoint(path, model_cfg, &params, Some(&opt))?;
            }
        }
    }

    if let Some(path) = ckpt_out {
        save_checkpoint(path, model_cfg, &params, Some(&opt))?;
    }
    Ok(TrainOutcome { params, opt, history })
}

// ── Checkpoints ─────────────────────────────────────────────────────────────

pub const CKPT_MAGIC: &[u8; 4] = b"CCKP";
pub const CKPT_VERSION: u16 = 1;

fn push_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Binary layout, little-endian throughout: magic `CCKP`, u16 version, the
/// model config (nine u32 fields, u8 shared-memory flag, u64 seed), u32
/// tensor count, then per tensor in registry order: u32 name length, UTF-8
/// name, u32 rank, u32 dims, float32 values. A trailing presence byte
/// optionally introduces optimizer state: u64 step counter, then per tensor
/// its first and second moments as float32.
pub fn save_checkpoint(
    path: &Path,
    cfg: &ModelConfig,
    params: &CcnetParams,
    opt: Option<&AdamState>,
) -> Result<()> {
    let named = named_tensors(params, "");
    if let Some(o) = opt {
        if o.m.len() != named.len() {
            return Err(Error::invalid(
                "checkpoint",
                format!("optimizer tracks {} tensors, model has {}", o.m.len(), named.len()),
            ));
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    for v in [
        cfg.bands,
        cfg.in_channels,
        cfg.c_in,
        cfg.m,
        cfg.k,
        cfg.s,
        cfg.r0,
        cfg.depth,
        cfg.blocks_per_level,
    ] {
        push_u32(&mut buf, v);
    }
    buf.push(cfg.cmu_shared as u8);
    buf.extend_from_slice(&cfg.seed.to_le_bytes());
    push_u32(&mut buf, named.len());
    for (name, t) in &named {
        push_u32(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        push_u32(&mut buf, t.shape().len());
        for &d in t.shape() {
            push_u32(&mut buf, d);
        }
        for &x in t.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    match opt {
        None => buf.push(0),
        Some(o) => {
            buf.push(1);
            buf.extend_from_slice(&o.t.to_le_bytes());
            for i in 0..named.len() {
                for &x in &o.m[i] {
                    buf.extend_from_slice(&(x as f32).to_le_bytes());
                }
                for &x in &o.v[i] {
                    buf.extend_from_slice(&(x as f32).to_le_bytes());
                }
            }
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.display().to_string(),
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| self.fail("file truncated"))?;
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

/// Reads a checkpoint and validates its tensors against the registry the
/// config implies: a file tensor the model doesn't know is an "unknown
/// parameter" error, a model tensor the file lacks is a "missing parameter"
/// error, and both name the tensor.
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, CcnetParams, Option<AdamState>)> {
    let bytes = fs::read(path)?;
    let mut c = Cursor { bytes: &bytes, pos: 0, path };
    if c.take(4)? != CKPT_MAGIC {
        return Err(c.fail("bad magic; not a checkpoint"));
    }
    let version = c.u16()?;
    if version != CKPT_VERSION {
        return Err(c.fail(format!("unsupported version {version}")));
    }
    let cfg = ModelConfig {
        bands: c.u32()?,
        in_channels: c.u32()?,
        c_in: c.u32()?,
        m: c.u32()?,
        k: c.u32()?,
        s: c.u32()?,
        r0: c.u32()?,
        depth: c.u32()?,
        blocks_per_level: c.u32()?,
        cmu_shared: c.u8()? != 0,
        seed: c.u64()?,
    };
    cfg.validate()
        .map_err(|e| c.fail(format!("stored config invalid: {e}")))?;

    let count = c.u32()?;
    let mut stored: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32()?;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| c.fail("tensor name is not UTF-8"))?;
        let rank = c.u32()?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()?);
        }
        let numel: usize = shape.iter().product();
        let data = c.f32_vec(numel)?;
        stored.push((name, shape, data));
    }

    let has_opt = c.u8()?;
    let opt = match has_opt {
        0 => None,
        1 => {
            let t = c.u64()?;
            let mut m = Vec::with_capacity(count);
            let mut v = Vec::with_capacity(count);
            for (_, shape, _) in &stored {
                let numel: usize = shape.iter().product();
                m.push(c.f32_vec(numel)?);
                v.push(c.f32_vec(numel)?);
            }
            Some(AdamState { m, v, t })
        }
        other => return Err(c.fail(format!("bad optimizer presence byte {other}"))),
    };
    if c.pos != bytes.len() {
        return Err(c.fail(format!("{} trailing bytes", bytes.len() - c.pos)));
    }

    let mut params = CcnetParams::init(&cfg)
        .map_err(|e| c.fail(format!("stored config rejected: {e}")))?;
    let mut by_name: std::collections::HashMap<&str, usize> = stored
        .iter()
        .enumerate()
        .map(|(i, (n, _, _))| (n.as_str(), i))
        .collect();
    if by_name.len() != stored.len() {
        return Err(c.fail("duplicate tensor names"));
    }
    let mut err: Option<Error> = None;
    params.visit_mut("", &mut |name, tensor| {
        if err.is_some() {
            return;
        }
        match by_name.remove(name) {
            None => err = Some(c.fail(format!("missing parameter '{name}'"))),
            Some(i) => {
                let (_, shape, data) = &stored[i];
                if shape.as_slice() != tensor.shape() {
                    err = Some(c.fail(format!(
                        "parameter '{name}' has shape {shape:?}, model expects {:?}",
                        tensor.shape()
                    )));
                } else {
                    *tensor = Tensor::from_vec(data.clone(), shape).expect("validated shape");
                }
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(leftover) = by_name.keys().next() {
        return Err(c.fail(format!("unknown parameter '{leftover}'")));
    }
    Ok((cfg, params, opt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::gen_synthetic_hsi;
    use crate::dataio::{default_srf, hsi_to_rgb};
    use tempfile::tempdir;

    /// Minimal parameter pack for optimizer tests: a single tensor `x`.
    #[derive(Clone)]
    struct Lone {
        x: Tensor,
    }

    impl Params for Lone {
        fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
            f(&crate::params::key(prefix, "x"), &self.x);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
            f(&crate::params::key(prefix, "x"), &mut self.x);
        }
    }

    fn micro_model() -> ModelConfig {
        ModelConfig {
            bands: 5,
            in_channels: 3,
            c_in: 8,
            m: 1,
            k: 2,
            s: 3,
            r0: 4,
            depth: 1,
            blocks_per_level: 1,
            cmu_shared: true,
            seed: 11,
        }
    }

    fn micro_data(bands: usize) -> Vec<TrainSample> {
        let cube = gen_synthetic_hsi(8, 8, bands, 5).unwrap();
        let rgb = hsi_to_rgb(&cube, &default_srf());
        vec![TrainSample { rgb, hsi: cube.to_tensor() }]
    }

    #[test]
    fn adam_matches_the_update_formula() {
        let mut p = Lone { x: Tensor::from_vec(vec![0.5, -1.25], &[2]).unwrap() };
        let mut state = AdamState::new(&p);
        let mut expect = [0.5f64, -1.25];
        let (mut em, mut ev) = ([0.0f64; 2], [0.0f64; 2]);
        let steps = [[0.3, -0.7], [0.1, 0.2], [-0.4, 0.05]];
        let lr = 0.01;
        for (i, g) in steps.iter().enumerate() {
            adam_step(&mut p, &[g.to_vec()], &mut state, lr).unwrap();
            let t = (i + 1) as i32;
            for j in 0..2 {
                em[j] = ADAM_BETA1 * em[j] + (1.0 - ADAM_BETA1) * g[j];
                ev[j] = ADAM_BETA2 * ev[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                let mh = em[j] / (1.0 - ADAM_BETA1.powi(t));
                let vh = ev[j] / (1.0 - ADAM_BETA2.powi(t));
                // The engine rounds parameters to float32 after each step;
                // the oracle applies the same rounding.
                expect[j] = quantize_f32(expect[j] - lr * mh / (vh.sqrt() + ADAM_EPS));
            }
            for j in 0..2 {
                assert!(
                    (p.x.data()[j] - expect[j]).abs() <= 1e-12,
                    "step {t} coord {j}: {} vs {}",
                    p.x.data()[j],
                    expect[j]
                );
            }
        }
        assert_eq!(state.t, 3);
    }

    #[test]
    fn zero_gradients_leave_fresh_parameters_unchanged() {
        let mut p = Lone { x: Tensor::from_vec(vec![0.25, -3.5, 7.0], &[3]).unwrap() };
        let before = p.x.data().to_vec();
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &[vec![0.0; 3]], &mut state, 0.1).unwrap();
        assert_eq!(p.x.data(), &before[..]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_drives_a_quadratic_to_its_minimum() {
        let mut p = Lone { x: Tensor::scalar(1.0) };
        let mut state = AdamState::new(&p);
        for _ in 0..200 {
            let tape = Tape::new();
            let bound = bind(&p, &tape);
            let loss = bound.x.mul(&bound.x).unwrap();
            let grads = loss.backward().unwrap();
            let g = collect_grads(&bound, &grads);
            adam_step(&mut p, &g, &mut state, 0.1).unwrap();
        }
        assert!(p.x.data()[0].abs() < 1e-2, "x = {}", p.x.data()[0]);
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut p = Lone { x: Tensor::scalar(1.0) };
        let mut state = AdamState::new(&p);
        assert!(adam_step(&mut p, &[], &mut state, 0.1).is_err());
        assert!(adam_step(&mut p, &[vec![0.0, 0.0]], &mut state, 0.1).is_err());
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![vec![3.0, 0.0], vec![4.0]];
        let norm = clip_global_norm(&mut g, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let after: f64 = g.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);

        let mut small = vec![vec![0.3]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.3, "norms under the cap are untouched");
    }

    #[test]
    fn cosine_schedule_hits_its_endpoints_and_midpoint() {
        let cfg = TrainConfig { total_steps: 1000, ..TrainConfig::default() };
        assert_eq!(cosine_lr(0, &cfg).unwrap(), 4e-4);
        let end = cosine_lr(1000, &cfg).unwrap();
        assert!((end - 1e-5).abs() < 1e-18);
        let mid = cosine_lr(500, &cfg).unwrap();
        assert!((mid - (4e-4 + 1e-5) / 2.0).abs() < 1e-18);
        assert!(cosine_lr(1001, &cfg).is_err());
    }

    #[test]
    fn cosine_schedule_is_monotone_and_bounded() {
        let cfg = TrainConfig { total_steps: 137, ..TrainConfig::default() };
        let mut prev = f64::INFINITY;
        for step in 0..=137 {
            let lr = cosine_lr(step, &cfg).unwrap();
            assert!(lr <= prev, "schedule rose at step {step}");
            assert!((cfg.lr_min..=cfg.lr0).contains(&lr));
            prev = lr;
        }
    }

    #[test]
    fn zero_step_training_returns_the_initialization() {
        let model = micro_model();
        let cfg = TrainConfig { total_steps: 0, ..TrainConfig::default() };
        let out = train_loop(&model, &cfg, &micro_data(model.bands), None, |_| {}).unwrap();
        let init = CcnetParams::init(&model).unwrap();
        let a = named_tensors(&out.params, "");
        let b = named_tensors(&init, "");
        assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "{na} drifted with no steps");
        }
        assert!(out.history.is_empty());
        assert_eq!(out.opt.t, 0);
    }

    #[test]
    fn identical_seeds_give_identical_histories_and_parameters() {
        let model = micro_model();
        let cfg = TrainConfig { total_steps: 4, seed: 21, ..TrainConfig::default() };
        let run = || train_loop(&model, &cfg, &micro_data(model.bands), None, |_| {}).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.history, b.history);
        let (pa, pb) = (named_tensors(&a.params, ""), named_tensors(&b.params, ""));
        for ((_, ta), (_, tb)) in pa.iter().zip(&pb) {
            assert_eq!(ta.data(), tb.data());
        }
        assert_eq!(a.opt, b.opt);

        let other = TrainConfig { seed: 22, ..cfg };
        let c = train_loop(&model, &other, &micro_data(model.bands), None, |_| {}).unwrap();
        assert_ne!(a.history, c.history, "different seeds, same trajectory");
    }

    #[test]
    fn losses_fall_on_a_short_overfit_run() {
        let model = micro_model();
        let cfg = TrainConfig {
            total_steps: 30,
            seed: 2,
            lr0: 4e-3,
            lr_min: 4e-4,
            ..TrainConfig::default()
        };
        let out = train_loop(&model, &cfg, &micro_data(model.bands), None, |_| {}).unwrap();
        let first = out.history[0].loss_total;
        let last = out.history.last().unwrap().loss_total;
        assert!(
            last < 0.6 * first,
            "loss went {first} -> {last}; optimization is not biting"
        );
        for row in &out.history {
            assert!(row.loss_total.is_finite());
            assert!((row.loss_mrae + cfg.gamma * row.loss_dif - row.loss_total).abs() < 1e-9);
        }
    }

    #[test]
    fn csv_format_is_stable() {
        let history = vec![
            StepLog { step: 0, lr: 4e-4, loss_mrae: 1.5, loss_dif: 0.25, loss_total: 1.525 },
            StepLog { step: 1, lr: 3e-4, loss_mrae: 1.0, loss_dif: 0.2, loss_total: 1.02 },
        ];
        let csv = history_to_csv(&history);
        assert_eq!(
            csv,
            "step,lr,loss_mrae,loss_dif,loss_total\n0,0.0004,1.5,0.25,1.525\n1,0.0003,1,0.2,1.02\n"
        );
    }

    #[test]
    fn checkpoint_round_trips_byte_exactly_and_preserves_forwards() {
        let dir = tempdir().unwrap();
        let model = micro_model();
        let params = CcnetParams::init(&model).unwrap();
        let mut opt = AdamState::new(&params);
        opt.t = 7;
        for m in opt.m.iter_mut() {
            for x in m.iter_mut() {
                *x = 0.125;
            }
        }

        let p1 = dir.path().join("a.cckp");
        save_checkpoint(&p1, &model, &params, Some(&opt)).unwrap();
        let (cfg2, params2, opt2) = load_checkpoint(&p1).unwrap();
        assert_eq!(cfg2, model);
        assert_eq!(opt2.as_ref().map(|o| o.t), Some(7));
        assert_eq!(opt2.as_ref().unwrap().m[0][0], 0.125);

        let p2 = dir.path().join("b.cckp");
        save_checkpoint(&p2, &cfg2, &params2, opt2.as_ref()).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap(), "bytes changed across a round trip");

        // Same forward output to the last bit after reload.
        let cube = gen_synthetic_hsi(4, 4, model.bands, 9).unwrap();
        let rgb = hsi_to_rgb(&cube, &default_srf());
        let before = ccnet_forward(&rgb, &params, &model, true).unwrap();
        let after = ccnet_forward(&rgb, &params2, &model, true).unwrap();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn checkpoint_without_optimizer_state_loads_as_none() {
        let dir = tempdir().unwrap();
        let model = micro_model();
        let params = CcnetParams::init(&model).unwrap();
        let path = dir.path().join("bare.cckp");
        save_checkpoint(&path, &model, &params, None).unwrap();
        let (_, _, opt) = load_checkpoint(&path).unwrap();
        assert!(opt.is_none());
    }

    #[test]
    fn renamed_tensors_are_reported_as_missing_and_unknown() {
        let dir = tempdir().unwrap();
        let model = micro_model();
        let params = CcnetParams::init(&model).unwrap();
        let path = dir.path().join("ok.cckp");
        save_checkpoint(&path, &model, &params, None).unwrap();
        let bytes = fs::read(&path).unwrap();

        // Flip one byte inside the first tensor's name ("embed_w" starts
        // right after the fixed-size header).
        let name_pos = 4 + 2 + 9 * 4 + 1 + 8 + 4 + 4;
        let mut renamed = bytes.clone();
        renamed[name_pos] = b'x';
        let bad = dir.path().join("renamed.cckp");
        fs::write(&bad, &renamed).unwrap();
        let err = match load_checkpoint(&bad) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("renamed tensor accepted"),
        };
        assert!(err.contains("missing parameter"), "got: {err}");
        assert!(err.contains("embed_w"), "error does not name the tensor: {err}");

        // Magic and version gates.
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'Z';
        fs::write(&bad, &bad_magic).unwrap();
        assert!(load_checkpoint(&bad).is_err());
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        fs::write(&bad, &bad_version).unwrap();
        assert!(load_checkpoint(&bad).is_err());
        fs::write(&bad, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint(&bad).is_err());
    }

    #[test]
    fn interval_checkpoints_are_written_during_training() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("train.cckp");
        let model = micro_model();
        let cfg = TrainConfig {
            total_steps: 3,
            checkpoint_interval: 2,
            seed: 4,
            ..TrainConfig::default()
        };
        let data = micro_data(model.bands);
        // The interval write lands after step index 1 completes (and after
        // its on_step call); the final write happens after the loop.
        let mut seen_midrun = false;
        train_loop(&model, &cfg, &data, Some(&path), |log| {
            if log.step == 2 {
                seen_midrun = path.exists();
            }
        })
        .unwrap();
        assert!(seen_midrun, "no checkpoint on disk after the interval elapsed");
        assert!(path.exists());
        let (cfg2, _, opt) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg2, model);
        assert_eq!(opt.unwrap().t, 3);
    }
}

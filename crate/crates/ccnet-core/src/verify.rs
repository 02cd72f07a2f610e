//! Finite-difference verification of every differentiable module on small
//! fixed fixtures, as driven by the command-line `gradcheck` command.
//!
//! Each check builds a module at a deterministic size, seeds its parameters
//! and input, and compares analytic gradients of a scalar probe loss (the
//! mean of squared outputs) against central differences. The probe includes
//! the module input as well as every parameter tensor.

use crate::error::{Error, Result};
use crate::grscm::{grscm_forward, GrscmConfig, GrscmParams};
use crate::nescm::{nescm_forward, NescmConfig, NescmParams};
use crate::network::{
    ccnet_forward, csrm_block_forward, ffn_forward, BlockConfig, CcnetParams, CsrmParams,
    FfnParams, ModelConfig,
};
use crate::paf::{paf_fuse, PafConfig, PafParams};
use crate::params::{named_tensors, replace_from, Params};
use crate::rng::SplitMix64;
use crate::tensor::{grad_check_many, GradCheckReport, Tensor};

/// Relative error at or above which the `gradcheck` command exits nonzero.
pub const FAIL_THRESHOLD: f64 = 1e-4;
/// Default central-difference step. Probes are f64, but a composed network
/// evaluates hundreds of rounded operations per output, so a step much below
/// this drowns the difference quotient in cancellation noise.
pub const DEFAULT_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckModule {
    Grscm,
    Nescm,
    Paf,
    Ffn,
    Block,
    Net,
}

impl CheckModule {
    pub fn name(self) -> &'static str {
        match self {
            CheckModule::Grscm => "grscm",
            CheckModule::Nescm => "nescm",
            CheckModule::Paf => "paf",
            CheckModule::Ffn => "ffn",
            CheckModule::Block => "block",
            CheckModule::Net => "net",
        }
    }

    pub fn parse(s: &str) -> Result<CheckModule> {
        Ok(match s {
            "grscm" => CheckModule::Grscm,
            "nescm" => CheckModule::Nescm,
            "paf" => CheckModule::Paf,
            "ffn" => CheckModule::Ffn,
            "block" => CheckModule::Block,
            "net" => CheckModule::Net,
            other => {
                return Err(Error::invalid(
                    "gradcheck",
                    format!("unknown module '{other}' (expected all, grscm, nescm, paf, ffn, block, or net)"),
                ))
            }
        })
    }
}

pub const ALL_MODULES: [CheckModule; 6] = [
    CheckModule::Grscm,
    CheckModule::Nescm,
    CheckModule::Paf,
    CheckModule::Ffn,
    CheckModule::Block,
    CheckModule::Net,
];

fn random_tensor(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.uniform(-1.0, 1.0))
        .collect();
    Tensor::from_vec(data, shape).expect("length matches shape")
}

/// Mean of squared outputs: a smooth scalar that exercises every output.
fn probe_loss(out: &Tensor) -> Result<Tensor> {
    out.mul(out)?.mean_all()
}

/// With `corrupt`, a term whose analytic gradient is deliberately half its
/// true derivative is mixed in: `sum(t * detach(t))` backpropagates `t`
/// where the function actually varies as `2t`. Used to prove the harness
/// detects broken gradients.
fn maybe_corrupt(loss: Tensor, first_param: &Tensor, corrupt: bool) -> Result<Tensor> {
    if !corrupt {
        return Ok(loss);
    }
    let wrong = first_param.mul(&first_param.detached())?.sum_all()?;
    loss.add(&wrong)
}

/// Gradient check for params plus extra input tensors against `forward`.
fn check_with_inputs<P: Params>(
    params: &P,
    inputs: &[(&str, Tensor)],
    eps: f64,
    coords: usize,
    seed: u64,
    corrupt: bool,
    forward: impl Fn(&P, &[Tensor]) -> Result<Tensor>,
) -> Result<GradCheckReport> {
    let mut probes = named_tensors(params, "p");
    let n_params = probes.len();
    for (name, t) in inputs {
        probes.push((name.to_string(), t.clone()));
    }
    let template = params.clone();
    grad_check_many(
        |xs| {
            let mut p = template.clone();
            let mut it = xs[..n_params].iter().cloned();
            replace_from(&mut p, &mut it);
            let out = forward(&p, &xs[n_params..])?;
            maybe_corrupt(probe_loss(&out)?, &xs[0], corrupt)
        },
        &probes,
        eps,
        Some(coords),
        seed,
    )
}

/// Runs the finite-difference check for one module on its fixed fixture.
/// `corrupt` injects a known-bad gradient so callers can verify the failure
/// path end to end.
pub fn run(module: CheckModule, eps: f64, seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    let mut rng = SplitMix64::new(seed.wrapping_mul(0x9e37_79b9).wrapping_add(module as u64));
    match module {
        CheckModule::Grscm => {
            let cfg = GrscmConfig { channels: 8, c_in: 8, groups: 2 };
            let p = GrscmParams::init(&cfg, &mut rng)?;
            let x = random_tensor(&[8, 8, 8], &mut rng);
            check_with_inputs(&p, &[("input", x)], eps, 16, seed, corrupt, |p, xs| {
                grscm_forward(&xs[0], p, &cfg)
            })
        }
        CheckModule::Nescm => {
            let cfg = NescmConfig { channels: 8, c_in: 8, window: 3, shared: true };
            let p = NescmParams::init(&cfg, &mut rng)?;
            let x = random_tensor(&[8, 8, 8], &mut rng);
            check_with_inputs(&p, &[("input", x)], eps, 16, seed, corrupt, |p, xs| {
                nescm_forward(&xs[0], p, &cfg)
            })
        }
        CheckModule::Paf => {
            let cfg = PafConfig { channels: 8, groups: 2, patch: 4 };
            let p = PafParams::init(&cfg, &mut rng)?;
            let f_att = random_tensor(&[8, 8, 8], &mut rng);
            let f_cp = random_tensor(&[8, 8, 8], &mut rng);
            check_with_inputs(
                &p,
                &[("input_att", f_att), ("input_cp", f_cp)],
                eps,
                16,
                seed,
                corrupt,
                |p, xs| paf_fuse(&xs[0], &xs[1], p, &cfg),
            )
        }
        CheckModule::Ffn => {
            let p = FfnParams::init(8, &mut rng);
            let x = random_tensor(&[8, 8, 8], &mut rng);
            check_with_inputs(&p, &[("input", x)], eps, 16, seed, corrupt, |p, xs| {
                ffn_forward(&xs[0], p)
            })
        }
        CheckModule::Block => {
            let bc = BlockConfig {
                channels: 8,
                c_in: 8,
                groups: 2,
                window: 3,
                shared: true,
                patch: 4,
            };
            let p = CsrmParams::init(&bc, &mut rng)?;
            let x = random_tensor(&[8, 8, 8], &mut rng);
            check_with_inputs(&p, &[("input", x)], eps, 12, seed, corrupt, |p, xs| {
                csrm_block_forward(&xs[0], p, &bc)
            })
        }
        CheckModule::Net => {
            let cfg = ModelConfig {
                bands: 31,
                in_channels: 3,
                c_in: 8,
                m: 1,
                k: 2,
                s: 3,
                r0: 4,
                depth: 1,
                blocks_per_level: 1,
                cmu_shared: true,
                seed: rng.next_u64(),
            };
            let mut p = CcnetParams::init(&cfg)?;
            // Randomize every tensor: the head initializes to zero, which
            // would zero all body gradients and make the check vacuous.
            p.visit_mut("", &mut |_, t| {
                let data = (0..t.numel()).map(|_| rng.uniform(-0.5, 0.5)).collect();
                *t = Tensor::from_vec(data, t.shape()).expect("shape preserved");
            });
            let mut data = Vec::with_capacity(16 * 16 * 3);
            for _ in 0..16 * 16 * 3 {
                data.push(rng.uniform(0.0, 1.0));
            }
            let rgb = Tensor::from_vec(data, &[16, 16, 3])?;
            check_with_inputs(&p, &[("input", rgb)], eps, 6, seed, corrupt, |p, xs| {
                ccnet_forward(&xs[0], p, &cfg, false)
            })
        }
    }
}

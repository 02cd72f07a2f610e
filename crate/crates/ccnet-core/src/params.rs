//! Named parameter traversal shared by init, the optimizer and checkpoints.
//!
//! Every parameter struct walks its tensors in a fixed order under
//! dot-separated names. That single order defines optimizer state layout and
//! checkpoint layout, so the three never disagree.
//!
//! Parameter values are kept exactly representable in float32 at all times:
//! initialization and optimizer updates round each value through f32.
//! Checkpoints store float32, so saving never loses information and a
//! reloaded model computes bit-identical forward passes.

use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor};

pub trait Params: Clone {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

/// All (name, tensor) pairs in traversal order.
pub fn named_tensors<P: Params>(p: &P, prefix: &str) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    p.visit(prefix, &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

/// Total number of scalar parameters.
pub fn param_count<P: Params>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, t| n += t.numel());
    n
}

/// Copy of `p` whose tensors are leaves on `tape`, ready for a differentiable
/// forward pass. The original stays untracked.
pub fn bind<P: Params>(p: &P, tape: &Tape) -> P {
    let mut bound = p.clone();
    bound.visit_mut("", &mut |_, t| *t = t.tracked(tape));
    bound
}

/// Replaces `p`'s tensors from an iterator in traversal order. Used to
/// rebuild a parameter struct from a flat list (gradient checking drives
/// modules through this).
pub fn replace_from<P: Params>(p: &mut P, tensors: &mut impl Iterator<Item = Tensor>) {
    p.visit_mut("", &mut |name, t| {
        let nt = tensors
            .next()
            .unwrap_or_else(|| panic!("tensor list exhausted at {name}"));
        assert_eq!(nt.shape(), t.shape(), "shape mismatch at {name}");
        *t = nt;
    });
}

/// Rounds through f32 so the value is exactly representable in float32.
pub fn quantize_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// He-uniform initialization: uniform on [-limit, limit] with
/// limit = sqrt(6 / fan_in), each draw rounded through f32.
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut SplitMix64) -> Tensor {
    assert!(fan_in > 0);
    let limit = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| quantize_f32(rng.uniform(-limit, limit)))
        .collect();
    Tensor::from_vec(data, shape).expect("initializer length matches shape")
}

/// Joins a prefix and a field name with a dot, skipping the dot for an empty
/// prefix.
pub fn key(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.to_string()
    } else {
        format!("{prefix}.{field}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone)]
    struct Pair {
        a: Tensor,
        b: Tensor,
    }

    impl Params for Pair {
        fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
            f(&key(prefix, "a"), &self.a);
            f(&key(prefix, "b"), &self.b);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
            f(&key(prefix, "a"), &mut self.a);
            f(&key(prefix, "b"), &mut self.b);
        }
    }

    #[test]
    fn traversal_order_is_stable_and_named() {
        let p = Pair {
            a: Tensor::zeros(&[2]),
            b: Tensor::zeros(&[3]),
        };
        let named = named_tensors(&p, "m");
        assert_eq!(named[0].0, "m.a");
        assert_eq!(named[1].0, "m.b");
        assert_eq!(param_count(&p), 5);
    }

    #[test]
    fn bind_tracks_copies_not_originals() {
        let p = Pair {
            a: Tensor::zeros(&[2]),
            b: Tensor::zeros(&[3]),
        };
        let tape = Tape::new();
        let bound = bind(&p, &tape);
        assert!(bound.a.is_tracked() && bound.b.is_tracked());
        assert!(!p.a.is_tracked() && !p.b.is_tracked());
        assert_eq!(tape.len(), 2);
    }

    #[test]
    fn he_uniform_respects_limit_and_is_f32_exact() {
        let mut rng = SplitMix64::new(9);
        let t = he_uniform(&[64, 64], 64, &mut rng);
        let limit = (6.0f64 / 64.0).sqrt();
        for &v in t.data() {
            assert!(v.abs() <= limit);
            assert_eq!(v, v as f32 as f64);
        }
        // Spread sanity: draws actually fill the range.
        let max = t.data().iter().cloned().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max > limit * 0.9);
    }
}

//! Elementwise unary and binary ops with right-aligned broadcasting.

use super::*;

/// Denominator magnitude below which plain `div` refuses to divide.
pub(crate) const DIV_GUARD: f64 = 1e-12;

fn unary(
    op: &'static str,
    x: &Tensor,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Tensor> {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let xd = x.data_arc();
    let shape = x.shape().to_vec();
    finish_op(op, &[x], data, shape, move |ids, out| {
        let out = out.clone();
        Box::new(move |g, table| {
            if let Some(id) = ids[0] {
                let gx = table.acc(id, xd.len());
                for i in 0..xd.len() {
                    gx[i] += g[i] * df(xd[i], out[i]);
                }
            }
        })
    })
}

fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
    dfa: impl Fn(f64, f64) -> f64 + 'static,
    dfb: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Tensor> {
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let (ad, bd) = (a.data_arc(), b.data_arc());

    let numel: usize = out_shape.iter().product();
    let mut data = vec![0.0; numel];
    if a.shape() == b.shape() {
        for i in 0..numel {
            data[i] = f(ad[i], bd[i]);
        }
    } else {
        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
            data[o] = f(ad[ia], bd[ib]);
        });
    }

    let same = a.shape() == b.shape();
    let shape_for_back = out_shape.clone();
    finish_op(op, &[a, b], data, out_shape, move |ids, _| {
        Box::new(move |g, table| {
            if same {
                if let Some(id) = ids[0] {
                    let ga = table.acc(id, ad.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * dfa(ad[i], bd[i]);
                    }
                }
                if let Some(id) = ids[1] {
                    let gb = table.acc(id, bd.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * dfb(ad[i], bd[i]);
                    }
                }
                return;
            }
            if let Some(id) = ids[0] {
                let ga = table.acc(id, ad.len());
                for_each_broadcast(&shape_for_back, &sa, &sb, |o, ia, ib| {
                    ga[ia] += g[o] * dfa(ad[ia], bd[ib]);
                });
            }
            if let Some(id) = ids[1] {
                let gb = table.acc(id, bd.len());
                for_each_broadcast(&shape_for_back, &sa, &sb, |o, ia, ib| {
                    gb[ib] += g[o] * dfb(ad[ia], bd[ib]);
                });
            }
        })
    })
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary("add", self, other, |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary("sub", self, other, |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary("mul", self, other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    /// Elementwise division. Refuses denominators with magnitude below
    /// 1e-12; callers that want clamping instead use `div_clamped`.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let bad = other.data().iter().filter(|v| v.abs() < DIV_GUARD).count();
        if bad > 0 {
            return Err(Error::DivisionByZero { count: bad });
        }
        binary(
            "div",
            self,
            other,
            |a, b| a / b,
            |_, b| 1.0 / b,
            |a, b| -a / (b * b),
        )
    }

    /// Division with the denominator clamped away from zero: values with
    /// magnitude below `eps` become `eps` with the sign kept (exact zero
    /// counts as positive). Forward and backward both see the clamped value.
    pub fn div_clamped(&self, other: &Tensor, eps: f64) -> Result<Tensor> {
        let clamp = move |b: f64| {
            if b.abs() >= eps {
                b
            } else if b >= 0.0 {
                eps
            } else {
                -eps
            }
        };
        binary(
            "div_clamped",
            self,
            other,
            move |a, b| a / clamp(b),
            move |_, b| 1.0 / clamp(b),
            move |a, b| {
                let c = clamp(b);
                if b.abs() >= eps {
                    -a / (c * c)
                } else {
                    0.0
                }
            },
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        unary(
            "sigmoid",
            self,
            |x| 1.0 / (1.0 + (-x).exp()),
            |_, y| y * (1.0 - y),
        )
    }

    pub fn tanh_act(&self) -> Result<Tensor> {
        unary("tanh", self, |x| x.tanh(), |_, y| 1.0 - y * y)
    }

    pub fn relu(&self) -> Result<Tensor> {
        unary(
            "relu",
            self,
            |x| x.max(0.0),
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    /// Exact GELU: 0.5 * x * (1 + erf(x / sqrt(2))).
    pub fn gelu(&self) -> Result<Tensor> {
        const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
        let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        unary(
            "gelu",
            self,
            |x| 0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2)),
            move |x, _| {
                0.5 * (1.0 + libm::erf(x * INV_SQRT_2))
                    + x * inv_sqrt_2pi * (-0.5 * x * x).exp()
            },
        )
    }

    /// Absolute value with the subgradient convention abs'(0) = 0.
    pub fn abs(&self) -> Result<Tensor> {
        unary(
            "abs",
            self,
            |x| x.abs(),
            |x, _| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
        )
    }

    /// scale * x + shift with constant coefficients.
    pub fn affine(&self, scale: f64, shift: f64) -> Result<Tensor> {
        unary("affine", self, |x| scale * x + shift, move |_, _| scale)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.affine(-1.0, 0.0)
    }

    /// Clamp to [min, max]. Gradient passes through inside the closed range.
    pub fn clamp(&self, min: f64, max: f64) -> Result<Tensor> {
        if min > max {
            return Err(Error::invalid("clamp", format!("min {min} > max {max}")));
        }
        unary(
            "clamp",
            self,
            move |x| x.clamp(min, max),
            move |x, _| if (min..=max).contains(&x) { 1.0 } else { 0.0 },
        )
    }
}

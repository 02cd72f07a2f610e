//! Normalization-style ops: softmax over the last axis, layer norm with
//! learnable gain/bias, eps-guarded L2 normalization, and batched pairwise
//! cosine similarity with a zero-norm guard.

use super::*;

/// Norm guard for cosine similarity and L2 normalization.
pub const COSINE_EPS: f64 = 1e-8;

/// Variance guard inside layer norm.
const LN_EPS: f64 = 1e-5;

impl Tensor {
    /// Softmax along the last axis with the usual max shift, so any finite
    /// input row produces a valid distribution.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        let rank = self.shape().len();
        if rank == 0 {
            return Err(Error::invalid("softmax_lastdim", "scalar input"));
        }
        let d = self.shape()[rank - 1];
        if d == 0 {
            return Err(Error::invalid("softmax_lastdim", "empty last axis"));
        }
        let rows = self.numel() / d;
        let xd = self.data_arc();
        let mut data = vec![0.0; self.numel()];
        for row in 0..rows {
            let x = &xd[row * d..(row + 1) * d];
            let y = &mut data[row * d..(row + 1) * d];
            let mut m = x[0];
            for &v in &x[1..] {
                if v > m {
                    m = v;
                }
            }
            let mut s = 0.0;
            for i in 0..d {
                y[i] = (x[i] - m).exp();
                s += y[i];
            }
            let inv = 1.0 / s;
            for v in y.iter_mut() {
                *v *= inv;
            }
        }
        let shape = self.shape().to_vec();
        let n = self.numel();
        finish_op("softmax_lastdim", &[self], data, shape, move |ids, out| {
            let out = out.clone();
            Box::new(move |g, table| {
                let Some(id) = ids[0] else { return };
                let gx = table.acc(id, n);
                for row in 0..rows {
                    let y = &out[row * d..(row + 1) * d];
                    let gr = &g[row * d..(row + 1) * d];
                    let mut dot = 0.0;
                    for i in 0..d {
                        dot += gr[i] * y[i];
                    }
                    let gxr = &mut gx[row * d..(row + 1) * d];
                    for i in 0..d {
                        gxr[i] += y[i] * (gr[i] - dot);
                    }
                }
            })
        })
    }

    /// Layer norm over the last axis: per-position standardization followed
    /// by learnable gain and bias of that axis length.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let rank = self.shape().len();
        if rank == 0 {
            return Err(Error::invalid("layer_norm", "scalar input"));
        }
        let d = self.shape()[rank - 1];
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let rows = self.numel() / d;
        let xd = self.data_arc();
        let gd = gain.data_arc();
        let bd = bias.data_arc();

        let mut data = vec![0.0; self.numel()];
        // Saved per row for backward: 1/std and the standardized values.
        let mut inv_std = vec![0.0; rows];
        let mut xhat = vec![0.0; self.numel()];
        for row in 0..rows {
            let x = &xd[row * d..(row + 1) * d];
            let mut mean = 0.0;
            for &v in x {
                mean += v;
            }
            mean /= d as f64;
            let mut var = 0.0;
            for &v in x {
                var += (v - mean) * (v - mean);
            }
            var /= d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[row] = inv;
            for i in 0..d {
                let h = (x[i] - mean) * inv;
                xhat[row * d + i] = h;
                data[row * d + i] = h * gd[i] + bd[i];
            }
        }

        let shape = self.shape().to_vec();
        let n = self.numel();
        finish_op("layer_norm", &[self, gain, bias], data, shape, move |ids, _| {
            Box::new(move |g, table| {
                if let Some(id) = ids[1] {
                    let gg = table.acc(id, d);
                    for row in 0..rows {
                        for i in 0..d {
                            gg[i] += g[row * d + i] * xhat[row * d + i];
                        }
                    }
                }
                if let Some(id) = ids[2] {
                    let gb = table.acc(id, d);
                    for row in 0..rows {
                        for i in 0..d {
                            gb[i] += g[row * d + i];
                        }
                    }
                }
                if let Some(id) = ids[0] {
                    let gx = table.acc(id, n);
                    for row in 0..rows {
                        let gr = &g[row * d..(row + 1) * d];
                        let hr = &xhat[row * d..(row + 1) * d];
                        let mut mean_gy = 0.0;
                        let mut mean_gyh = 0.0;
                        for i in 0..d {
                            let gy = gr[i] * gd[i];
                            mean_gy += gy;
                            mean_gyh += gy * hr[i];
                        }
                        mean_gy /= d as f64;
                        mean_gyh /= d as f64;
                        let inv = inv_std[row];
                        for i in 0..d {
                            let gy = gr[i] * gd[i];
                            gx[row * d + i] += (gy - mean_gy - hr[i] * mean_gyh) * inv;
                        }
                    }
                }
            })
        })
    }

    /// Scales vectors along `axis` to unit L2 norm. Norms below `eps` are
    /// replaced by `eps`, so an all-zero lane stays all-zero.
    pub fn l2_normalize(&self, axis: usize, eps: f64) -> Result<Tensor> {
        if axis >= self.shape().len() {
            return Err(Error::invalid(
                "l2_normalize",
                format!("axis {axis} out of range for shape {:?}", self.shape()),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("l2_normalize", "eps must be positive"));
        }
        let n = self.shape()[axis];
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let xd = self.data_arc();

        let mut data = vec![0.0; self.numel()];
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut ss = 0.0;
                for j in 0..n {
                    let v = xd[base + j * inner];
                    ss += v * v;
                }
                let norm = ss.sqrt();
                norms[o * inner + i] = norm;
                let denom = if norm > eps { norm } else { eps };
                let inv = 1.0 / denom;
                for j in 0..n {
                    data[base + j * inner] = xd[base + j * inner] * inv;
                }
            }
        }

        let shape = self.shape().to_vec();
        let numel = self.numel();
        finish_op("l2_normalize", &[self], data, shape, move |ids, out| {
            let out = out.clone();
            Box::new(move |g, table| {
                let Some(id) = ids[0] else { return };
                let gx = table.acc(id, numel);
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let norm = norms[o * inner + i];
                        if norm > eps {
                            let mut dot = 0.0;
                            for j in 0..n {
                                dot += g[base + j * inner] * out[base + j * inner];
                            }
                            let inv = 1.0 / norm;
                            for j in 0..n {
                                let k = base + j * inner;
                                gx[k] += (g[k] - out[k] * dot) * inv;
                            }
                        } else {
                            let inv = 1.0 / eps;
                            for j in 0..n {
                                let k = base + j * inner;
                                gx[k] += g[k] * inv;
                            }
                        }
                    }
                }
            })
        })
    }

    /// Pairwise cosine similarity between the row vectors of two batched
    /// matrices: `[.., m, d] x [.., k, d] -> [.., m, k]`. A pair where either
    /// row's norm falls below `eps` gets similarity 0 and passes no gradient.
    pub fn cosine_pairs(&self, other: &Tensor, eps: f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        let err = || Error::ShapeMismatch {
            op: "cosine_pairs",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(err());
        }
        let d = sa[sa.len() - 1];
        if d != sb[sb.len() - 1] {
            return Err(err());
        }
        let m = sa[sa.len() - 2];
        let k = sb[sb.len() - 2];
        let batch: usize = sa[..sa.len() - 2].iter().product::<usize>().max(1);
        let (ad, bd) = (self.data_arc(), other.data_arc());

        let mut data = vec![0.0; batch * m * k];
        let mut na = vec![0.0; batch * m];
        let mut nb = vec![0.0; batch * k];
        for bi in 0..batch {
            for i in 0..m {
                let row = &ad[(bi * m + i) * d..(bi * m + i + 1) * d];
                na[bi * m + i] = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            }
            for j in 0..k {
                let row = &bd[(bi * k + j) * d..(bi * k + j + 1) * d];
                nb[bi * k + j] = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            }
            for i in 0..m {
                for j in 0..k {
                    let (pa, pb) = (na[bi * m + i], nb[bi * k + j]);
                    if pa < eps || pb < eps {
                        continue;
                    }
                    let ra = &ad[(bi * m + i) * d..(bi * m + i + 1) * d];
                    let rb = &bd[(bi * k + j) * d..(bi * k + j + 1) * d];
                    let mut dot = 0.0;
                    for t in 0..d {
                        dot += ra[t] * rb[t];
                    }
                    data[(bi * m + i) * k + j] = dot / (pa * pb);
                }
            }
        }

        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(k);
        finish_op("cosine_pairs", &[self, other], data, out_shape, move |ids, out| {
            let out = out.clone();
            Box::new(move |g, table| {
                let alen = ad.len();
                let blen = bd.len();
                if let Some(id) = ids[0] {
                    let ga = table.acc(id, alen);
                    for bi in 0..batch {
                        for i in 0..m {
                            let pa = na[bi * m + i];
                            if pa < eps {
                                continue;
                            }
                            let ra = &ad[(bi * m + i) * d..(bi * m + i + 1) * d];
                            let gi = &mut ga[(bi * m + i) * d..(bi * m + i + 1) * d];
                            for j in 0..k {
                                let pb = nb[bi * k + j];
                                if pb < eps {
                                    continue;
                                }
                                let gv = g[(bi * m + i) * k + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                let c = out[(bi * m + i) * k + j];
                                let rb = &bd[(bi * k + j) * d..(bi * k + j + 1) * d];
                                let inv_ab = 1.0 / (pa * pb);
                                let inv_aa = 1.0 / (pa * pa);
                                for t in 0..d {
                                    gi[t] += gv * (rb[t] * inv_ab - c * ra[t] * inv_aa);
                                }
                            }
                        }
                    }
                }
                if let Some(id) = ids[1] {
                    let gb = table.acc(id, blen);
                    for bi in 0..batch {
                        for j in 0..k {
                            let pb = nb[bi * k + j];
                            if pb < eps {
                                continue;
                            }
                            let rb = &bd[(bi * k + j) * d..(bi * k + j + 1) * d];
                            let gj = &mut gb[(bi * k + j) * d..(bi * k + j + 1) * d];
                            for i in 0..m {
                                let pa = na[bi * m + i];
                                if pa < eps {
                                    continue;
                                }
                                let gv = g[(bi * m + i) * k + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                let c = out[(bi * m + i) * k + j];
                                let ra = &ad[(bi * m + i) * d..(bi * m + i + 1) * d];
                                let inv_ab = 1.0 / (pa * pb);
                                let inv_bb = 1.0 / (pb * pb);
                                for t in 0..d {
                                    gj[t] += gv * (ra[t] * inv_ab - c * rb[t] * inv_bb);
                                }
                            }
                        }
                    }
                }
            })
        })
    }
}

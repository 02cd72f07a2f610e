//! Batched matrix multiplication. Each output element accumulates over the
//! shared dimension in ascending order, in forward and backward alike, so
//! results do not depend on the execution mode.

use super::*;
use crate::exec;

/// out[i,j] += sum_k a[i,k] * b[k,j], one call per row of out.
fn mm_nn_row(a_row: &[f64], b: &[f64], r: usize, out_row: &mut [f64]) {
    for (k, &av) in a_row.iter().enumerate() {
        let brow = &b[k * r..(k + 1) * r];
        for j in 0..r {
            out_row[j] += av * brow[j];
        }
    }
}

/// out[i,j] += sum_k at[k,i] * b[k,j] where at is [q, p] (a transposed).
/// Row-level form so output rows stay independently writable: for output row
/// i, walk k ascending.
fn mm_tn_row(at: &[f64], b: &[f64], i: usize, p: usize, q: usize, r: usize, out_row: &mut [f64]) {
    for k in 0..q {
        let av = at[k * p + i];
        let brow = &b[k * r..(k + 1) * r];
        for j in 0..r {
            out_row[j] += av * brow[j];
        }
    }
}

struct MatmulDims {
    batch: usize,
    p: usize,
    q: usize,
    r: usize,
    a_batched: bool,
    b_batched: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatmulDims, Vec<usize>)> {
    let err = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (p, qa) = (a[a.len() - 2], a[a.len() - 1]);
    let (qb, r) = (b[b.len() - 2], b[b.len() - 1]);
    if qa != qb {
        return Err(err());
    }
    let lead_a = &a[..a.len() - 2];
    let lead_b = &b[..b.len() - 2];
    let (lead, a_batched, b_batched) = if lead_a == lead_b {
        (lead_a.to_vec(), !lead_a.is_empty(), !lead_b.is_empty())
    } else if lead_a.is_empty() {
        (lead_b.to_vec(), false, true)
    } else if lead_b.is_empty() {
        (lead_a.to_vec(), true, false)
    } else {
        return Err(err());
    };
    let batch = lead.iter().product::<usize>().max(1);
    let mut out_shape = lead;
    out_shape.push(p);
    out_shape.push(r);
    Ok((
        MatmulDims {
            batch,
            p,
            q: qa,
            r,
            a_batched,
            b_batched,
        },
        out_shape,
    ))
}

impl Tensor {
    /// `[.., p, q] x [.., q, r] -> [.., p, r]`. Leading dims must match, or
    /// either operand may be a plain matrix shared across the other's batch.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (d, out_shape) = matmul_dims(self.shape(), other.shape())?;
        let (ad, bd) = (self.data_arc(), other.data_arc());
        let MatmulDims {
            batch,
            p,
            q,
            r,
            a_batched,
            b_batched,
        } = d;

        let mut data = vec![0.0; batch * p * r];
        exec::fill_chunks(&mut data, r, |row, out_row| {
            let (bi, i) = (row / p, row % p);
            let a_off = if a_batched { bi * p * q } else { 0 };
            let b_off = if b_batched { bi * q * r } else { 0 };
            mm_nn_row(&ad[a_off + i * q..a_off + (i + 1) * q], &bd[b_off..b_off + q * r], r, out_row);
        });

        finish_op("matmul", &[self, other], data, out_shape, move |ids, _| {
            Box::new(move |g, table| {
                // dA = g . B^T
                if let Some(id) = ids[0] {
                    let ga = table.acc(id, ad.len());
                    if a_batched || batch == 1 {
                        exec::fill_chunks(ga, q, |row, ga_row| {
                            let (bi, i) = (row / p, row % p);
                            let b_off = if b_batched { bi * q * r } else { 0 };
                            // ga[i,k] += sum_j g[i,j] * b[k,j] : nt with roles swapped
                            let g_row = &g[(bi * p + i) * r..(bi * p + i + 1) * r];
                            for k in 0..q {
                                let brow = &bd[b_off + k * r..b_off + (k + 1) * r];
                                let mut s = 0.0;
                                for j in 0..r {
                                    s += g_row[j] * brow[j];
                                }
                                ga_row[k] += s;
                            }
                        });
                    } else {
                        // a shared across batches: accumulate batches in order.
                        for bi in 0..batch {
                            let b_off = if b_batched { bi * q * r } else { 0 };
                            for i in 0..p {
                                let g_row = &g[(bi * p + i) * r..(bi * p + i + 1) * r];
                                let ga_row = &mut ga[i * q..(i + 1) * q];
                                for k in 0..q {
                                    let brow = &bd[b_off + k * r..b_off + (k + 1) * r];
                                    let mut s = 0.0;
                                    for j in 0..r {
                                        s += g_row[j] * brow[j];
                                    }
                                    ga_row[k] += s;
                                }
                            }
                        }
                    }
                }
                // dB = A^T . g
                if let Some(id) = ids[1] {
                    let gb = table.acc(id, bd.len());
                    if b_batched || batch == 1 {
                        exec::fill_chunks(gb, r, |row, gb_row| {
                            let (bi, k) = (row / q, row % q);
                            let a_off = if a_batched { bi * p * q } else { 0 };
                            let g_off = bi * p * r;
                            mm_tn_row(
                                &ad[a_off..a_off + p * q],
                                &g[g_off..g_off + p * r],
                                k,
                                q,
                                p,
                                r,
                                gb_row,
                            );
                        });
                    } else {
                        for bi in 0..batch {
                            let a_off = if a_batched { bi * p * q } else { 0 };
                            let g_off = bi * p * r;
                            for k in 0..q {
                                let gb_row = &mut gb[k * r..(k + 1) * r];
                                mm_tn_row(
                                    &ad[a_off..a_off + p * q],
                                    &g[g_off..g_off + p * r],
                                    k,
                                    q,
                                    p,
                                    r,
                                    gb_row,
                                );
                            }
                        }
                    }
                }
            })
        })
    }
}

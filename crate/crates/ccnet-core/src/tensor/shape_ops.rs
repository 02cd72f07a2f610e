//! Shape manipulation: reshape, permute, concat, split, slice and padding.
//! All of these are index remaps; their backward passes scatter gradients
//! through the inverse map, so round trips are bit-exact.

use super::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Mirror about the edge sample, which is not repeated. Pad amount must
    /// stay below the axis length.
    Reflect,
    /// Repeat the edge sample.
    Replicate,
}

/// Maps a padded-axis index to the source index, or None for zero fill.
fn pad_source(mode: PadMode, idx: isize, n: usize) -> Option<usize> {
    let n = n as isize;
    if (0..n).contains(&idx) {
        return Some(idx as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Reflect => {
            let m = if idx < 0 { -idx } else { 2 * n - 2 - idx };
            Some(m as usize)
        }
        PadMode::Replicate => Some(idx.clamp(0, n - 1) as usize),
    }
}

impl Tensor {
    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let xlen = self.numel();
        finish_op_shared("reshape", &[self], self.data_arc(), shape.to_vec(), move |ids| {
            Box::new(move |g, table| {
                if let Some(id) = ids[0] {
                    let gx = table.acc(id, xlen);
                    for i in 0..xlen {
                        gx[i] += g[i];
                    }
                }
            })
        })
    }

    /// Reorders axes: output axis i is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid(
                "permute",
                format!("axes {:?} is not a permutation of 0..{rank}", axes),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let in_strides = strides_of(self.shape());
        // Stride in the input for each output axis.
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let numel = self.numel();
        let xd = self.data_arc();

        let mut data = vec![0.0; numel];
        let mut src = vec![0usize; numel];
        let mut idx = vec![0usize; rank];
        let mut s = 0usize;
        for (o, slot) in data.iter_mut().enumerate() {
            *slot = xd[s];
            src[o] = s;
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                s += strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                s -= strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }

        finish_op("permute", &[self], data, out_shape, move |ids, _| {
            Box::new(move |g, table| {
                if let Some(id) = ids[0] {
                    let gx = table.acc(id, numel);
                    for o in 0..numel {
                        gx[src[o]] += g[o];
                    }
                }
            })
        })
    }

    /// Concatenates tensors along `axis`. All other dims must match.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no tensors given"));
        }
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for shape {:?}", parts[0].shape()),
            ));
        }
        let mut out_shape = parts[0].shape().to_vec();
        let mut total = 0;
        for p in parts {
            if p.shape().len() != rank
                || (0..rank).any(|i| i != axis && p.shape()[i] != parts[0].shape()[i])
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            total += p.shape()[axis];
        }
        out_shape[axis] = total;

        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * total * inner];
        let mut offset = 0;
        let mut spans = Vec::with_capacity(parts.len());
        for p in parts {
            let w = p.shape()[axis];
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                let srcbase = o * w * inner;
                data[dst..dst + w * inner].copy_from_slice(&p.data()[srcbase..srcbase + w * inner]);
            }
            spans.push((offset, w));
            offset += w;
        }

        let lens: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
        finish_op("concat", parts, data, out_shape, move |ids, _| {
            Box::new(move |g, table| {
                for (pi, id) in ids.iter().enumerate() {
                    let Some(id) = *id else { continue };
                    let (off, w) = spans[pi];
                    let gx = table.acc(id, lens[pi]);
                    for o in 0..outer {
                        let src = (o * total + off) * inner;
                        let dst = o * w * inner;
                        for i in 0..w * inner {
                            gx[dst + i] += g[src + i];
                        }
                    }
                }
            })
        })
    }

    /// Splits along `axis` into pieces of the given sizes (which must sum to
    /// the axis length).
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
        if axis >= self.shape().len() {
            return Err(Error::invalid(
                "split",
                format!("axis {axis} out of range for shape {:?}", self.shape()),
            ));
        }
        if sizes.iter().sum::<usize>() != self.shape()[axis] {
            return Err(Error::invalid(
                "split",
                format!(
                    "sizes {:?} do not sum to axis length {}",
                    sizes,
                    self.shape()[axis]
                ),
            ));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &w in sizes {
            out.push(self.slice(axis, start, w)?);
            start += w;
        }
        Ok(out)
    }

    /// Contiguous range [start, start+len) along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.shape().len() || start + len > self.shape()[axis] {
            return Err(Error::invalid(
                "slice",
                format!(
                    "range {start}..{} out of bounds on axis {axis} of {:?}",
                    start + len,
                    self.shape()
                ),
            ));
        }
        let n = self.shape()[axis];
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = (o * n + start) * inner;
            let dst = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&self.data()[src..src + len * inner]);
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let xlen = self.numel();
        finish_op("slice", &[self], data, out_shape, move |ids, _| {
            Box::new(move |g, table| {
                if let Some(id) = ids[0] {
                    let gx = table.acc(id, xlen);
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * len * inner;
                        for i in 0..len * inner {
                            gx[dst + i] += g[src + i];
                        }
                    }
                }
            })
        })
    }

    /// Pads every axis by `(before, after)` amounts in the given mode.
    pub fn pad(&self, pads: &[(usize, usize)], mode: PadMode) -> Result<Tensor> {
        let rank = self.shape().len();
        if pads.len() != rank {
            return Err(Error::invalid(
                "pad",
                format!("{} pad pairs for rank {rank}", pads.len()),
            ));
        }
        for (ax, &(b, a)) in pads.iter().enumerate() {
            let n = self.shape()[ax];
            if mode == PadMode::Reflect && (b >= n || a >= n) {
                return Err(Error::invalid(
                    "pad",
                    format!("reflect pad ({b},{a}) needs axis {ax} longer than the pad, length is {n}"),
                ));
            }
            if n == 0 && (b > 0 || a > 0) {
                return Err(Error::invalid("pad", "cannot pad an empty axis"));
            }
        }
        let out_shape: Vec<usize> = self
            .shape()
            .iter()
            .zip(pads)
            .map(|(&n, &(b, a))| n + b + a)
            .collect();
        let numel: usize = out_shape.iter().product();
        let in_strides = strides_of(self.shape());
        let xd = self.data_arc();
        let shape_in = self.shape().to_vec();
        let pads_v = pads.to_vec();

        // src[o] = source linear index + 1, or 0 for zero-filled cells.
        let mut data = vec![0.0; numel];
        let mut src = vec![0usize; numel];
        let mut idx = vec![0usize; out_shape.len()];
        for o in 0..numel {
            let mut lin = 0usize;
            let mut ok = true;
            for ax in 0..rank {
                let shifted = idx[ax] as isize - pads_v[ax].0 as isize;
                match pad_source(mode, shifted, shape_in[ax]) {
                    Some(s) => lin += s * in_strides[ax],
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                data[o] = xd[lin];
                src[o] = lin + 1;
            }
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }

        let xlen = self.numel();
        finish_op("pad", &[self], data, out_shape, move |ids, _| {
            Box::new(move |g, table| {
                if let Some(id) = ids[0] {
                    let gx = table.acc(id, xlen);
                    for (o, &s) in src.iter().enumerate() {
                        if s > 0 {
                            gx[s - 1] += g[o];
                        }
                    }
                }
            })
        })
    }
}

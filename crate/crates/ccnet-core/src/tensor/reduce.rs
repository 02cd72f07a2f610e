//! Axis reductions. Max routes its gradient to the first maximal element.

use super::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

impl Tensor {
    /// Reduces along `axis`, removing it from the shape.
    pub fn reduce(&self, axis: usize, kind: ReduceKind) -> Result<Tensor> {
        if axis >= self.shape().len() {
            return Err(Error::invalid(
                "reduce",
                format!("axis {axis} out of range for shape {:?}", self.shape()),
            ));
        }
        let n = self.shape()[axis];
        if n == 0 {
            return Err(Error::invalid("reduce", "cannot reduce over an empty axis"));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let xd = self.data_arc();

        let mut data = vec![0.0; outer * inner];
        let mut argmax: Vec<u32> = Vec::new();
        if kind == ReduceKind::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += xd[base + j * inner];
                        }
                        if kind == ReduceKind::Mean {
                            s /= n as f64;
                        }
                        data[o * inner + i] = s;
                    }
                    ReduceKind::Max => {
                        let mut best = xd[base];
                        let mut at = 0u32;
                        for j in 1..n {
                            let v = xd[base + j * inner];
                            if v > best {
                                best = v;
                                at = j as u32;
                            }
                        }
                        data[o * inner + i] = best;
                        argmax[o * inner + i] = at;
                    }
                }
            }
        }

        let mut out_shape = self.shape().to_vec();
        out_shape.remove(axis);
        let xlen = self.numel();
        finish_op("reduce", &[self], data, out_shape, move |ids, _| {
            Box::new(move |g, table| {
                let Some(id) = ids[0] else { return };
                let gx = table.acc(id, xlen);
                match kind {
                    ReduceKind::Sum => {
                        for o in 0..outer {
                            for i in 0..inner {
                                let gv = g[o * inner + i];
                                let base = o * n * inner + i;
                                for j in 0..n {
                                    gx[base + j * inner] += gv;
                                }
                            }
                        }
                    }
                    ReduceKind::Mean => {
                        let inv = 1.0 / n as f64;
                        for o in 0..outer {
                            for i in 0..inner {
                                let gv = g[o * inner + i] * inv;
                                let base = o * n * inner + i;
                                for j in 0..n {
                                    gx[base + j * inner] += gv;
                                }
                            }
                        }
                    }
                    ReduceKind::Max => {
                        for o in 0..outer {
                            for i in 0..inner {
                                let j = argmax[o * inner + i] as usize;
                                gx[o * n * inner + j * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            })
        })
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(&self) -> Result<Tensor> {
        let xd = self.data_arc();
        let mut s = 0.0;
        for &v in xd.iter() {
            s += v;
        }
        let xlen = self.numel();
        finish_op("sum_all", &[self], vec![s], Vec::new(), move |ids, _| {
            Box::new(move |g, table| {
                if let Some(id) = ids[0] {
                    let gx = table.acc(id, xlen);
                    for v in gx.iter_mut() {
                        *v += g[0];
                    }
                }
            })
        })
    }

    /// Mean of all elements as a scalar.
    pub fn mean_all(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(Error::invalid("mean_all", "empty tensor"));
        }
        let inv = 1.0 / self.numel() as f64;
        self.sum_all()?.affine(inv, 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_mean_max_along_middle_axis() {
        // shape [2, 3, 2]
        let x = Tensor::from_vec(
            vec![
                1.0, 2.0, 3.0, 4.0, 5.0, 6.0, //
                -1.0, 0.5, 7.0, -2.0, 0.0, 3.0,
            ],
            &[2, 3, 2],
        )
        .unwrap();
        let s = x.reduce(1, ReduceKind::Sum).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[9.0, 12.0, 6.0, 1.5]);

        let m = x.reduce(1, ReduceKind::Mean).unwrap();
        assert_eq!(m.data(), &[3.0, 4.0, 2.0, 0.5]);

        let mx = x.reduce(1, ReduceKind::Max).unwrap();
        assert_eq!(mx.data(), &[5.0, 6.0, 7.0, 3.0]);
    }

    #[test]
    fn max_gradient_goes_to_first_maximum_on_ties() {
        let tape = Tape::new();
        let x = Tensor::from_vec(vec![2.0, 5.0, 5.0, 1.0], &[4]).unwrap().tracked(&tape);
        let grads = x
            .reduce(0, ReduceKind::Max)
            .unwrap()
            .backward()
            .unwrap();
        assert_eq!(grads.wrt(&x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn reduce_rejects_bad_axis() {
        let x = Tensor::zeros(&[2, 2]);
        assert!(x.reduce(2, ReduceKind::Sum).is_err());
    }

    #[test]
    fn mean_all_matches_hand_value_and_backward_is_uniform() {
        let tape = Tape::new();
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap().tracked(&tape);
        let m = x.mean_all().unwrap();
        assert_eq!(m.item().unwrap(), 2.5);
        let grads = m.backward().unwrap();
        assert_eq!(grads.wrt(&x).unwrap(), &[0.25; 4]);
    }
}

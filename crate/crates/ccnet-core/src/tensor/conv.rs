//! Convolutions as cross-correlation, plus the stride-2 transposed variant.
//! Forward and backward both accumulate in fixed ascending index order and
//! parallelize only over disjoint output chunks, so results are bitwise
//! reproducible in either execution mode.

use super::*;
use crate::exec;

fn check_bias(op: &'static str, bias: Option<&Tensor>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::invalid(
                op,
                format!("bias shape {:?} does not match {cout} output channels", b.shape()),
            ));
        }
    }
    Ok(())
}

fn out_extent(op: &'static str, n: usize, k: usize, pad: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid(op, "stride must be at least 1"));
    }
    if k == 0 || n == 0 {
        return Err(Error::invalid(op, "zero-size kernel or input axis"));
    }
    let padded = n + 2 * pad;
    if k > padded {
        return Err(Error::invalid(
            op,
            format!("kernel extent {k} exceeds padded input extent {padded}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

impl Tensor {
    /// 2-D convolution (cross-correlation) over `[C_in, H, W]` with weights
    /// `[C_out, C_in/groups, kh, kw]`, zero padding and per-axis stride.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Result<Tensor> {
        let op = "conv2d";
        if self.shape().len() != 3 || weight.shape().len() != 4 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        let (cin, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (cout, wcin, kh, kw) = (
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        );
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::invalid(
                op,
                format!("channels ({cin} in, {cout} out) not divisible by groups {groups}"),
            ));
        }
        if wcin != cin / groups {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        check_bias(op, bias, cout)?;
        let oh = out_extent(op, h, kh, padding.0, stride.0)?;
        let ow = out_extent(op, w, kw, padding.1, stride.1)?;

        let xd = self.data_arc();
        let wd = weight.data_arc();
        let bd = bias.map(|b| b.data_arc());
        let cin_g = cin / groups;
        let cout_g = cout / groups;
        let (sh, sw) = stride;
        let (ph, pw) = padding;

        let mut data = vec![0.0; cout * oh * ow];
        {
            let bd = bd.clone();
            let xd = xd.clone();
            let wd = wd.clone();
            exec::fill_chunks(&mut data, oh * ow, move |oc, out_c| {
                let gi = oc / cout_g;
                let base_b = bd.as_ref().map_or(0.0, |b| b[oc]);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = base_b;
                        for icl in 0..cin_g {
                            let ic = gi * cin_g + icl;
                            for u in 0..kh {
                                let iy = (oy * sh + u) as isize - ph as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for v in 0..kw {
                                    let ix = (ox * sw + v) as isize - pw as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    s += xd[(ic * h + iy as usize) * w + ix as usize]
                                        * wd[((oc * cin_g + icl) * kh + u) * kw + v];
                                }
                            }
                        }
                        out_c[oy * ow + ox] = s;
                    }
                }
            });
        }

        let inputs: Vec<&Tensor> = match bias {
            Some(b) => vec![self, weight, b],
            None => vec![self, weight],
        };
        finish_op(op, &inputs, data, vec![cout, oh, ow], move |ids, _| {
            Box::new(move |g, table| {
                if let Some(id) = ids[0] {
                    let gx = table.acc(id, cin * h * w);
                    exec::fill_chunks(gx, h * w, |ic, gx_c| {
                        let gi = ic / cin_g;
                        let icl = ic % cin_g;
                        for iy in 0..h {
                            for ix in 0..w {
                                let mut s = 0.0;
                                for ocl in 0..cout_g {
                                    let oc = gi * cout_g + ocl;
                                    for u in 0..kh {
                                        let t = iy + ph;
                                        if t < u || (t - u) % sh != 0 {
                                            continue;
                                        }
                                        let oy = (t - u) / sh;
                                        if oy >= oh {
                                            continue;
                                        }
                                        for v in 0..kw {
                                            let tx = ix + pw;
                                            if tx < v || (tx - v) % sw != 0 {
                                                continue;
                                            }
                                            let ox = (tx - v) / sw;
                                            if ox >= ow {
                                                continue;
                                            }
                                            s += g[(oc * oh + oy) * ow + ox]
                                                * wd[((oc * cin_g + icl) * kh + u) * kw + v];
                                        }
                                    }
                                }
                                gx_c[iy * w + ix] += s;
                            }
                        }
                    });
                }
                if let Some(id) = ids[1] {
                    let gw = table.acc(id, cout * cin_g * kh * kw);
                    exec::fill_chunks(gw, cin_g * kh * kw, |oc, gw_c| {
                        let gi = oc / cout_g;
                        for icl in 0..cin_g {
                            let ic = gi * cin_g + icl;
                            for u in 0..kh {
                                for v in 0..kw {
                                    let mut s = 0.0;
                                    for oy in 0..oh {
                                        let iy = (oy * sh + u) as isize - ph as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for ox in 0..ow {
                                            let ix = (ox * sw + v) as isize - pw as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            s += g[(oc * oh + oy) * ow + ox]
                                                * xd[(ic * h + iy as usize) * w + ix as usize];
                                        }
                                    }
                                    gw_c[(icl * kh + u) * kw + v] += s;
                                }
                            }
                        }
                    });
                }
                if ids.len() > 2 {
                    if let Some(id) = ids[2] {
                        let gb = table.acc(id, cout);
                        for oc in 0..cout {
                            let mut s = 0.0;
                            for i in 0..oh * ow {
                                s += g[oc * oh * ow + i];
                            }
                            gb[oc] += s;
                        }
                    }
                }
            })
        })
    }

    /// 3-D convolution over `[C_in, D, H, W]` with weights
    /// `[C_out, C_in, kd, kh, kw]`, zero padding and per-axis stride.
    pub fn conv3d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: (usize, usize, usize),
        padding: (usize, usize, usize),
    ) -> Result<Tensor> {
        let op = "conv3d";
        if self.shape().len() != 4 || weight.shape().len() != 5 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        let (cin, d, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        let (cout, wcin, kd, kh, kw) = (
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
            weight.shape()[4],
        );
        if wcin != cin {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        check_bias(op, bias, cout)?;
        let od = out_extent(op, d, kd, padding.0, stride.0)?;
        let oh = out_extent(op, h, kh, padding.1, stride.1)?;
        let ow = out_extent(op, w, kw, padding.2, stride.2)?;

        let xd = self.data_arc();
        let wd = weight.data_arc();
        let bd = bias.map(|b| b.data_arc());
        let (sd, sh, sw) = stride;
        let (pd, ph, pw) = padding;

        let mut data = vec![0.0; cout * od * oh * ow];
        {
            let (xd, wd, bd) = (xd.clone(), wd.clone(), bd.clone());
            exec::fill_chunks(&mut data, od * oh * ow, move |oc, out_c| {
                let base_b = bd.as_ref().map_or(0.0, |b| b[oc]);
                for oz in 0..od {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = base_b;
                            for ic in 0..cin {
                                for t in 0..kd {
                                    let iz = (oz * sd + t) as isize - pd as isize;
                                    if iz < 0 || iz >= d as isize {
                                        continue;
                                    }
                                    for u in 0..kh {
                                        let iy = (oy * sh + u) as isize - ph as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for v in 0..kw {
                                            let ix = (ox * sw + v) as isize - pw as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            s += xd[((ic * d + iz as usize) * h + iy as usize) * w
                                                + ix as usize]
                                                * wd[(((oc * cin + ic) * kd + t) * kh + u) * kw + v];
                                        }
                                    }
                                }
                            }
                            out_c[(oz * oh + oy) * ow + ox] = s;
                        }
                    }
                }
            });
        }

        let inputs: Vec<&Tensor> = match bias {
            Some(b) => vec![self, weight, b],
            None => vec![self, weight],
        };
        finish_op(op, &inputs, data, vec![cout, od, oh, ow], move |ids, _| {
            Box::new(move |g, table| {
                if let Some(id) = ids[0] {
                    let gx = table.acc(id, cin * d * h * w);
                    exec::fill_chunks(gx, d * h * w, |ic, gx_c| {
                        for iz in 0..d {
                            for iy in 0..h {
                                for ix in 0..w {
                                    let mut s = 0.0;
                                    for oc in 0..cout {
                                        for t in 0..kd {
                                            let tz = iz + pd;
                                            if tz < t || (tz - t) % sd != 0 {
                                                continue;
                                            }
                                            let oz = (tz - t) / sd;
                                            if oz >= od {
                                                continue;
                                            }
                                            for u in 0..kh {
                                                let ty = iy + ph;
                                                if ty < u || (ty - u) % sh != 0 {
                                                    continue;
                                                }
                                                let oy = (ty - u) / sh;
                                                if oy >= oh {
                                                    continue;
                                                }
                                                for v in 0..kw {
                                                    let tx = ix + pw;
                                                    if tx < v || (tx - v) % sw != 0 {
                                                        continue;
                                                    }
                                                    let ox = (tx - v) / sw;
                                                    if ox >= ow {
                                                        continue;
                                                    }
                                                    s += g[((oc * od + oz) * oh + oy) * ow + ox]
                                                        * wd[(((oc * cin + ic) * kd + t) * kh + u)
                                                            * kw
                                                            + v];
                                                }
                                            }
                                        }
                                    }
                                    gx_c[(iz * h + iy) * w + ix] += s;
                                }
                            }
                        }
                    });
                }
                if let Some(id) = ids[1] {
                    let gw = table.acc(id, cout * cin * kd * kh * kw);
                    exec::fill_chunks(gw, cin * kd * kh * kw, |oc, gw_c| {
                        for ic in 0..cin {
                            for t in 0..kd {
                                for u in 0..kh {
                                    for v in 0..kw {
                                        let mut s = 0.0;
                                        for oz in 0..od {
                                            let iz = (oz * sd + t) as isize - pd as isize;
                                            if iz < 0 || iz >= d as isize {
                                                continue;
                                            }
                                            for oy in 0..oh {
                                                let iy = (oy * sh + u) as isize - ph as isize;
                                                if iy < 0 || iy >= h as isize {
                                                    continue;
                                                }
                                                for ox in 0..ow {
                                                    let ix =
                                                        (ox * sw + v) as isize - pw as isize;
                                                    if ix < 0 || ix >= w as isize {
                                                        continue;
                                                    }
                                                    s += g[((oc * od + oz) * oh + oy) * ow + ox]
                                                        * xd[((ic * d + iz as usize) * h
                                                            + iy as usize)
                                                            * w
                                                            + ix as usize];
                                                }
                                            }
                                        }
                                        gw_c[((ic * kd + t) * kh + u) * kw + v] += s;
                                    }
                                }
                            }
                        }
                    });
                }
                if ids.len() > 2 {
                    if let Some(id) = ids[2] {
                        let gb = table.acc(id, cout);
                        for oc in 0..cout {
                            let mut s = 0.0;
                            for i in 0..od * oh * ow {
                                s += g[oc * od * oh * ow + i];
                            }
                            gb[oc] += s;
                        }
                    }
                }
            })
        })
    }

    /// Transposed 2-D convolution over `[C_in, H, W]` with weights
    /// `[C_in, C_out, kh, kw]` and no padding: output extent is
    /// `(n-1)*stride + k`. With kernel 2x2 and stride 2 this exactly doubles
    /// the spatial dims.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: (usize, usize),
    ) -> Result<Tensor> {
        let op = "conv_transpose2d";
        if self.shape().len() != 3 || weight.shape().len() != 4 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        let (cin, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (wcin, cout, kh, kw) = (
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        );
        if wcin != cin {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        check_bias(op, bias, cout)?;
        let (sh, sw) = stride;
        if sh == 0 || sw == 0 || h == 0 || w == 0 || kh == 0 || kw == 0 {
            return Err(Error::invalid(op, "zero-size input, kernel or stride"));
        }
        let oh = (h - 1) * sh + kh;
        let ow = (w - 1) * sw + kw;

        let xd = self.data_arc();
        let wd = weight.data_arc();
        let bd = bias.map(|b| b.data_arc());

        let mut data = vec![0.0; cout * oh * ow];
        {
            let (xd, wd, bd) = (xd.clone(), wd.clone(), bd.clone());
            exec::fill_chunks(&mut data, oh * ow, move |oc, out_c| {
                let base_b = bd.as_ref().map_or(0.0, |b| b[oc]);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = base_b;
                        for ic in 0..cin {
                            for u in 0..kh {
                                if oy < u || (oy - u) % sh != 0 {
                                    continue;
                                }
                                let iy = (oy - u) / sh;
                                if iy >= h {
                                    continue;
                                }
                                for v in 0..kw {
                                    if ox < v || (ox - v) % sw != 0 {
                                        continue;
                                    }
                                    let ix = (ox - v) / sw;
                                    if ix >= w {
                                        continue;
                                    }
                                    s += xd[(ic * h + iy) * w + ix]
                                        * wd[((ic * cout + oc) * kh + u) * kw + v];
                                }
                            }
                        }
                        out_c[oy * ow + ox] = s;
                    }
                }
            });
        }

        let inputs: Vec<&Tensor> = match bias {
            Some(b) => vec![self, weight, b],
            None => vec![self, weight],
        };
        finish_op(op, &inputs, data, vec![cout, oh, ow], move |ids, _| {
            Box::new(move |g, table| {
                if let Some(id) = ids[0] {
                    let gx = table.acc(id, cin * h * w);
                    exec::fill_chunks(gx, h * w, |ic, gx_c| {
                        for iy in 0..h {
                            for ix in 0..w {
                                let mut s = 0.0;
                                for oc in 0..cout {
                                    for u in 0..kh {
                                        for v in 0..kw {
                                            s += g[(oc * oh + iy * sh + u) * ow + ix * sw + v]
                                                * wd[((ic * cout + oc) * kh + u) * kw + v];
                                        }
                                    }
                                }
                                gx_c[iy * w + ix] += s;
                            }
                        }
                    });
                }
                if let Some(id) = ids[1] {
                    let gw = table.acc(id, cin * cout * kh * kw);
                    exec::fill_chunks(gw, cout * kh * kw, |ic, gw_c| {
                        for oc in 0..cout {
                            for u in 0..kh {
                                for v in 0..kw {
                                    let mut s = 0.0;
                                    for iy in 0..h {
                                        for ix in 0..w {
                                            s += xd[(ic * h + iy) * w + ix]
                                                * g[(oc * oh + iy * sh + u) * ow + ix * sw + v];
                                        }
                                    }
                                    gw_c[(oc * kh + u) * kw + v] += s;
                                }
                            }
                        }
                    });
                }
                if ids.len() > 2 {
                    if let Some(id) = ids[2] {
                        let gb = table.acc(id, cout);
                        for oc in 0..cout {
                            let mut s = 0.0;
                            for i in 0..oh * ow {
                                s += g[oc * oh * ow + i];
                            }
                            gb[oc] += s;
                        }
                    }
                }
            })
        })
    }
}

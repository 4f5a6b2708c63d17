//! Spatial convolutions with reflect padding.

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::error::{config_err, Result};
use crate::ops::linalg::{gemm, MatView};
use crate::ops::shape::reflect_index;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output extent of a padded, strided convolution.
pub fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Source pixel (within one plane) for each `(kh, kw, ho, wo)` tap.
fn tap_map(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (Vec<usize>, usize, usize) {
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(w, k, stride, pad);
    let mut map = Vec::with_capacity(k * k * ho * wo);
    for kh in 0..k {
        for kw in 0..k {
            for oy in 0..ho {
                let sy = reflect_index((oy * stride + kh) as isize - pad as isize, h);
                for ox in 0..wo {
                    let sx = reflect_index((ox * stride + kw) as isize - pad as isize, w);
                    map.push(sy * w + sx);
                }
            }
        }
    }
    (map, ho, wo)
}

fn im2col<T: Scalar>(plane_data: &[T], cin: usize, hw: usize, map: &[usize], cols: &mut [T]) {
    let taps = map.len();
    for ci in 0..cin {
        let src = &plane_data[ci * hw..(ci + 1) * hw];
        let dst = &mut cols[ci * taps..(ci + 1) * taps];
        for (d, &m) in dst.iter_mut().zip(map) {
            *d = src[m];
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Dense convolution, `w` of shape `[Cout, Cin, k, k]`, reflect padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (bs, cin, h, wd) = self.value(x).dims4().expect("conv2d input rank 4");
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv2d weight must be rank 4");
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], cin, "conv2d channel mismatch");
        assert_eq!(ws[3], k, "conv2d kernel must be square");
        let (map, ho, wo) = tap_map(h, wd, k, stride, pad);
        let map = Rc::new(map);
        let hw = h * wd;
        let owo = ho * wo;
        let kk = cin * k * k;
        let mut out = vec![T::zero(); bs * cout * owo];
        {
            let xv = self.value(x).data();
            let wv = MatView::row_major(self.value(w).data(), cout, kk);
            let mut cols = vec![T::zero(); kk * owo];
            for i in 0..bs {
                im2col(&xv[i * cin * hw..(i + 1) * cin * hw], cin, hw, &map, &mut cols);
                gemm(
                    wv,
                    MatView::row_major(&cols, kk, owo),
                    T::zero(),
                    &mut out[i * cout * owo..(i + 1) * cout * owo],
                );
            }
        }
        self.add_macs(bs * cout * kk * owo);
        let y = Tensor::from_vec(&[bs, cout, ho, wo], out).unwrap();
        let y = self.push_op(y, &[x, w], move |c| {
            let xv = c.inputs[0].data();
            let wv = MatView::row_major(c.inputs[1].data(), cout, kk);
            let g = c.grad.data();
            let mut gx = c.needs[0].then(|| vec![T::zero(); bs * cin * hw]);
            let mut gw = c.needs[1].then(|| vec![T::zero(); cout * kk]);
            let mut cols = vec![T::zero(); kk * owo];
            for i in 0..bs {
                let gi = MatView::row_major(&g[i * cout * owo..(i + 1) * cout * owo], cout, owo);
                if let Some(gw) = gw.as_mut() {
                    im2col(&xv[i * cin * hw..(i + 1) * cin * hw], cin, hw, &map, &mut cols);
                    gemm(gi, MatView::row_major(&cols, kk, owo).t(), T::one(), gw);
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(wv.t(), gi, T::zero(), &mut cols);
                    let dst = &mut gx[i * cin * hw..(i + 1) * cin * hw];
                    let taps = map.len();
                    for ci in 0..cin {
                        let plane = &mut dst[ci * hw..(ci + 1) * hw];
                        for (&m, &v) in map.iter().zip(&cols[ci * taps..(ci + 1) * taps]) {
                            plane[m] += v;
                        }
                    }
                }
            }
            vec![
                gx.map(|d| Tensor::from_vec(c.inputs[0].shape(), d).unwrap()),
                gw.map(|d| Tensor::from_vec(c.inputs[1].shape(), d).unwrap()),
            ]
        });
        match b {
            Some(b) => self.add_channel_bias(y, b),
            None => y,
        }
    }

    /// Depthwise same-size convolution, `w` of shape `[C, k, k]`, odd `k`.
    pub fn dwconv(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (bs, ch, h, wd) = self.value(x).dims4()?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[0] != ch || ws[1] != ws[2] {
            return config_err(format!(
                "depthwise weight {ws:?} does not fit {ch} channels"
            ));
        }
        let k = ws[1];
        if k % 2 == 0 {
            return config_err(format!("depthwise kernel size must be odd, got {k}"));
        }
        let pad = k / 2;
        let rows: Rc<Vec<Vec<usize>>> = Rc::new(
            (0..k)
                .map(|kh| (0..h).map(|y| reflect_index((y + kh) as isize - pad as isize, h)).collect())
                .collect(),
        );
        let cols: Rc<Vec<Vec<usize>>> = Rc::new(
            (0..k)
                .map(|kw| (0..wd).map(|x| reflect_index((x + kw) as isize - pad as isize, wd)).collect())
                .collect(),
        );
        let hw = h * wd;
        let mut out = vec![T::zero(); bs * ch * hw];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for plane in 0..bs * ch {
                let c = plane % ch;
                let src = &xv[plane * hw..(plane + 1) * hw];
                let dst = &mut out[plane * hw..(plane + 1) * hw];
                for kh in 0..k {
                    for kw in 0..k {
                        let wt = wv[(c * k + kh) * k + kw];
                        let cx = &cols[kw];
                        for y in 0..h {
                            let srow = &src[rows[kh][y] * wd..rows[kh][y] * wd + wd];
                            let drow = &mut dst[y * wd..(y + 1) * wd];
                            for (d, &sx) in drow.iter_mut().zip(cx.iter()) {
                                *d += wt * srow[sx];
                            }
                        }
                    }
                }
            }
        }
        self.add_macs(bs * ch * hw * k * k);
        let y = Tensor::from_vec(&[bs, ch, h, wd], out).unwrap();
        let y = self.push_op(y, &[x, w], move |c| {
            let xv = c.inputs[0].data();
            let wv = c.inputs[1].data();
            let g = c.grad.data();
            let mut gx = c.needs[0].then(|| vec![T::zero(); bs * ch * hw]);
            let mut gw = c.needs[1].then(|| vec![T::zero(); ch * k * k]);
            for plane in 0..bs * ch {
                let cc = plane % ch;
                let src = &xv[plane * hw..(plane + 1) * hw];
                let gp = &g[plane * hw..(plane + 1) * hw];
                for kh in 0..k {
                    for kw in 0..k {
                        let widx = (cc * k + kh) * k + kw;
                        let cx = &cols[kw];
                        if let Some(gw) = gw.as_mut() {
                            let mut acc = T::zero();
                            for y in 0..h {
                                let srow = &src[rows[kh][y] * wd..rows[kh][y] * wd + wd];
                                let grow = &gp[y * wd..(y + 1) * wd];
                                for (&gg, &sx) in grow.iter().zip(cx.iter()) {
                                    acc += gg * srow[sx];
                                }
                            }
                            gw[widx] += acc;
                        }
                        if let Some(gx) = gx.as_mut() {
                            let wt = wv[widx];
                            let dplane = &mut gx[plane * hw..(plane + 1) * hw];
                            for y in 0..h {
                                let base = rows[kh][y] * wd;
                                let grow = &gp[y * wd..(y + 1) * wd];
                                for (&gg, &sx) in grow.iter().zip(cx.iter()) {
                                    dplane[base + sx] += wt * gg;
                                }
                            }
                        }
                    }
                }
            }
            vec![
                gx.map(|d| Tensor::from_vec(c.inputs[0].shape(), d).unwrap()),
                gw.map(|d| Tensor::from_vec(c.inputs[1].shape(), d).unwrap()),
            ]
        });
        Ok(match b {
            Some(b) => self.add_channel_bias(y, b),
            None => y,
        })
    }
}

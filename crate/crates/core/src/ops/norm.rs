use crate::autograd::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

impl<T: Scalar> Graph<T> {
    /// Layer normalization over `axis` with per-feature affine `gamma`/`beta`.
    ///
    /// Axis 1 of a `[B, C, H, W]` map normalizes each pixel over channels;
    /// the last axis of `[B, L, C]` tokens normalizes each token.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let c = xs[axis];
        assert_eq!(self.shape(gamma), &[c]);
        assert_eq!(self.shape(beta), &[c]);
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let n = T::from_usize(c).unwrap();
        let eps = T::lit(LN_EPS);

        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        let mut y = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |ch: usize| (o * c + ch) * inner + i;
                let mean = (0..c).map(|ch| xv[at(ch)]).sum::<T>() / n;
                let var = (0..c)
                    .map(|ch| {
                        let d = xv[at(ch)] - mean;
                        d * d
                    })
                    .sum::<T>()
                    / n;
                let r = T::one() / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for ch in 0..c {
                    let xh = (xv[at(ch)] - mean) * r;
                    xhat[at(ch)] = xh;
                    y[at(ch)] = xh * gv[ch] + bv[ch];
                }
            }
        }
        let y = Tensor::from_vec(&xs, y).unwrap();
        self.push_op(y, &[x, gamma, beta], move |cx| {
            let g = cx.grad.data();
            let gv = cx.inputs[1].data();
            let mut dx = vec![T::zero(); g.len()];
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |ch: usize| (o * c + ch) * inner + i;
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for ch in 0..c {
                        let gg = g[at(ch)];
                        let xh = xhat[at(ch)];
                        dgamma[ch] += gg * xh;
                        dbeta[ch] += gg;
                        let dxh = gg * gv[ch];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh;
                    }
                    mean_dxh /= n;
                    mean_dxh_xh /= n;
                    let r = rstd[o * inner + i];
                    for ch in 0..c {
                        let dxh = g[at(ch)] * gv[ch];
                        dx[at(ch)] = r * (dxh - mean_dxh - xhat[at(ch)] * mean_dxh_xh);
                    }
                }
            }
            vec![
                cx.needs[0].then(|| Tensor::from_vec(cx.inputs[0].shape(), dx).unwrap()),
                cx.needs[1].then(|| Tensor::from_vec(&[c], dgamma).unwrap()),
                cx.needs[2].then(|| Tensor::from_vec(&[c], dbeta).unwrap()),
            ]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.scaled_softmax(x, T::one())
    }

    /// `softmax(s·x)` over the last axis, `s > 0`.
    pub fn scaled_softmax(&mut self, x: Var, scale: T) -> Var {
        let n = *self.shape(x).last().unwrap();
        let mut y = self.value(x).clone();
        for row in y.data_mut().chunks_mut(n) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            for v in row.iter_mut() {
                *v = ((*v - m) * scale).fast_exp();
            }
            let s: T = row.iter().copied().sum();
            let inv = T::one() / s;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        self.push_op(y, &[x], move |c| {
            let mut d = c.grad.clone();
            for (drow, yrow) in d.data_mut().chunks_mut(n).zip(c.output.data().chunks(n)) {
                let dot: T = drow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                for (dv, &y) in drow.iter_mut().zip(yrow) {
                    *dv = scale * y * (*dv - dot);
                }
            }
            vec![Some(d)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_normalizes_each_pixel() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec(&[1, 3, 1, 2], vec![1., 10., 2., 20., 3., 30.]).unwrap());
        let ga = g.input(Tensor::ones(&[3]));
        let be = g.input(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, ga, be, 1);
        let v = g.value(y);
        for px in 0..2 {
            let col: Vec<f64> = (0..3).map(|ch| v.at(&[0, ch, 0, px])).collect();
            let mean: f64 = col.iter().sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-12);
            assert!((col[2] - 1.2247).abs() < 1e-3);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_vec(&[2, 3], vec![1000., 0., -5., 1., 2., 3.]).unwrap());
        let y = g.softmax(x);
        for row in g.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}

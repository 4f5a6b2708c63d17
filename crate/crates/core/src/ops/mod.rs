//! Differentiable primitives, implemented as extension methods on [`Graph`].

pub mod attention;
pub mod conv;
pub mod fft;
pub mod linalg;
pub mod norm;
pub mod resize;
pub mod scan;
pub mod shape;

use crate::autograd::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[inline]
pub(crate) fn gelu_tanh<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_tanh_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-(x.abs())).exp().ln_1p()
}

impl<T: Scalar> Graph<T> {
    /// Elementwise map with derivative `df(x, y)`.
    pub fn unary(
        &mut self,
        x: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        let y = self.value(x).map(f);
        self.push_op(y, &[x], move |c| {
            let g = c
                .grad
                .data()
                .iter()
                .zip(c.inputs[0].data())
                .zip(c.output.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_vec(c.grad.shape(), g).unwrap())]
        })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu_tanh, |x, _| gelu_tanh_grad(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, |x, _| sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |x| x.exp(), |_, y| y)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |x| -x, |_, _| -T::one())
    }

    /// `|x|` with subgradient 0 at the origin.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(
            x,
            move |v| v.max(lo).min(hi),
            move |v, _| {
                if v >= lo && v <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, move |v| v + s, |_, _| T::one())
    }

    fn binary_same(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        da: impl Fn(T, T, T) -> T + 'static,
        db: impl Fn(T, T, T) -> T + 'static,
    ) -> Var {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "elementwise op shape mismatch"
        );
        let y = self.value(a).zip_map(self.value(b), f);
        self.push_op(y, &[a, b], move |c| {
            let (xa, xb) = (c.inputs[0].data(), c.inputs[1].data());
            let g = c.grad.data();
            let ga = c.needs[0].then(|| {
                let v = (0..g.len()).map(|i| da(g[i], xa[i], xb[i])).collect();
                Tensor::from_vec(c.grad.shape(), v).unwrap()
            });
            let gb = c.needs[1].then(|| {
                let v = (0..g.len()).map(|i| db(g[i], xa[i], xb[i])).collect();
                Tensor::from_vec(c.grad.shape(), v).unwrap()
            });
            vec![ga, gb]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x + y, |g, _, _| g, |g, _, _| g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x - y, |g, _, _| g, |g, _, _| -g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x * y, |g, _, y| g * y, |g, x, _| g * x)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(
            a,
            b,
            |x, y| x / y,
            |g, _, y| g / y,
            |g, x, y| -g * x / (y * y),
        )
    }

    /// Sum of several same-shape tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x);
        }
        acc
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push_op(Tensor::scalar(s), &[x], |c| {
            let g = c.grad.data()[0];
            vec![Some(Tensor::full(c.inputs[0].shape(), g))]
        })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len()).unwrap();
        let s = self.sum_all(x);
        self.mul_scalar(s, T::one() / n)
    }

    /// Adds `b` (shape `[C]`) along axis 1 of `x`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let c = xs[1];
        assert_eq!(self.shape(b), &[c], "bias length must match axis 1");
        let inner: usize = xs[2..].iter().product();
        let outer = xs[0];
        let mut y = self.value(x).clone();
        {
            let bv = self.value(b).data().to_vec();
            let yd = y.data_mut();
            for o in 0..outer {
                for (ch, &bb) in bv.iter().enumerate() {
                    let base = (o * c + ch) * inner;
                    for v in &mut yd[base..base + inner] {
                        *v += bb;
                    }
                }
            }
        }
        self.push_op(y, &[x, b], move |cx| {
            let g = cx.grad.data();
            let gb = cx.needs[1].then(|| {
                let mut acc = vec![T::zero(); c];
                for o in 0..outer {
                    for (ch, a) in acc.iter_mut().enumerate() {
                        let base = (o * c + ch) * inner;
                        *a += g[base..base + inner].iter().copied().sum::<T>();
                    }
                }
                Tensor::from_vec(&[c], acc).unwrap()
            });
            vec![cx.needs[0].then(|| cx.grad.clone()), gb]
        })
    }

    /// `x[b, c, ..] * s[b, c]` for `x` of rank ≥ 2 and `s` of shape `[B, C]`.
    pub fn mul_bc(&mut self, x: Var, s: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(self.shape(s), &xs[..2], "mul_bc scale must be [B, C]");
        let inner: usize = xs[2..].iter().product();
        let sv = self.value(s).data().to_vec();
        let mut y = self.value(x).clone();
        for (bc, chunk) in y.data_mut().chunks_mut(inner).enumerate() {
            for v in chunk {
                *v *= sv[bc];
            }
        }
        self.push_op(y, &[x, s], move |c| {
            let g = c.grad.data();
            let xv = c.inputs[0].data();
            let sv = c.inputs[1].data();
            let gx = c.needs[0].then(|| {
                let mut d = c.grad.clone();
                for (bc, chunk) in d.data_mut().chunks_mut(inner).enumerate() {
                    for v in chunk {
                        *v *= sv[bc];
                    }
                }
                d
            });
            let gs = c.needs[1].then(|| {
                let v = (0..sv.len())
                    .map(|bc| {
                        let r = bc * inner..(bc + 1) * inner;
                        g[r.clone()]
                            .iter()
                            .zip(&xv[r])
                            .map(|(&a, &b)| a * b)
                            .sum()
                    })
                    .collect();
                Tensor::from_vec(c.inputs[1].shape(), v).unwrap()
            });
            vec![gx, gs]
        })
    }

    /// `x[b, c, ..] + s[b, c]`.
    pub fn add_bc(&mut self, x: Var, s: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(self.shape(s), &xs[..2], "add_bc shift must be [B, C]");
        let inner: usize = xs[2..].iter().product();
        let sv = self.value(s).data().to_vec();
        let mut y = self.value(x).clone();
        for (bc, chunk) in y.data_mut().chunks_mut(inner).enumerate() {
            for v in chunk {
                *v += sv[bc];
            }
        }
        self.push_op(y, &[x, s], move |c| {
            let g = c.grad.data();
            let gs = c.needs[1].then(|| {
                let v = (0..c.inputs[1].len())
                    .map(|bc| g[bc * inner..(bc + 1) * inner].iter().copied().sum())
                    .collect();
                Tensor::from_vec(c.inputs[1].shape(), v).unwrap()
            });
            vec![c.needs[0].then(|| c.grad.clone()), gs]
        })
    }

    /// Mean over every axis after the second: `[B, C, ..] -> [B, C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let inner: usize = xs[2..].iter().product();
        let inv = T::one() / T::from_usize(inner).unwrap();
        let v = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let y = Tensor::from_vec(&xs[..2], v).unwrap();
        self.push_op(y, &[x], move |c| {
            let mut d = Tensor::zeros(c.inputs[0].shape());
            for (bc, chunk) in d.data_mut().chunks_mut(inner).enumerate() {
                let g = c.grad.data()[bc] * inv;
                for v in chunk {
                    *v = g;
                }
            }
            vec![Some(d)]
        })
    }
}

//! Layout ops. Most are expressed as an index gather whose adjoint is a
//! scatter-add, so every permutation, crop and pad shares one backward.

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mirror an index into `[0, n)` without repeating the edge sample.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

impl<T: Scalar> Graph<T> {
    /// `y[i] = x[idx[i]]`. Duplicate indices accumulate in the backward pass.
    pub fn gather(&mut self, x: Var, idx: Rc<Vec<usize>>, out_shape: &[usize]) -> Var {
        debug_assert_eq!(idx.len(), out_shape.iter().product::<usize>());
        let xv = self.value(x).data();
        let data = idx.iter().map(|&i| xv[i]).collect();
        let y = Tensor::from_vec(out_shape, data).unwrap();
        self.push_op(y, &[x], move |c| {
            let mut d = Tensor::zeros(c.inputs[0].shape());
            let dd = d.data_mut();
            for (&i, &g) in idx.iter().zip(c.grad.data()) {
                dd[i] += g;
            }
            vec![Some(d)]
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let y = self.value(x).clone().reshape(shape).expect("reshape size");
        self.push_op(y, &[x], |c| {
            vec![Some(c.grad.clone().reshape(c.inputs[0].shape()).unwrap())]
        })
    }

    /// General axis permutation.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(perm.len(), xs.len());
        let out_shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        let mut in_strides = vec![1usize; xs.len()];
        for i in (0..xs.len().saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * xs[i + 1];
        }
        let n: usize = xs.iter().product();
        let mut idx = Vec::with_capacity(n);
        let mut counter = vec![0usize; xs.len()];
        for _ in 0..n {
            let off: usize = counter
                .iter()
                .zip(perm)
                .map(|(&c, &p)| c * in_strides[p])
                .sum();
            idx.push(off);
            for ax in (0..counter.len()).rev() {
                counter[ax] += 1;
                if counter[ax] < out_shape[ax] {
                    break;
                }
                counter[ax] = 0;
            }
        }
        self.gather(x, Rc::new(idx), &out_shape)
    }

    /// `[B, C, H, W] -> [B, H*W, C]`.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let t = self.reshape(x, &[s[0], s[1], s[2] * s[3]]);
        self.permute(t, &[0, 2, 1])
    }

    /// `[B, H*W, C] -> [B, C, H, W]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s[1], h * w, "token count must equal h*w");
        let t = self.permute(x, &[0, 2, 1]);
        self.reshape(t, &[s[0], s[2], h, w])
    }

    /// `[B, L, heads*d] -> [B*heads, L, d]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let (b, l, c) = self.value(x).dims3().unwrap();
        let t = self.reshape(x, &[b, l, heads, c / heads]);
        let t = self.permute(t, &[0, 2, 1, 3]);
        self.reshape(t, &[b * heads, l, c / heads])
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Var {
        let (bh, l, d) = self.value(x).dims3().unwrap();
        let b = bh / heads;
        let t = self.reshape(x, &[b, heads, l, d]);
        let t = self.permute(t, &[0, 2, 1, 3]);
        self.reshape(t, &[b, l, heads * d])
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert!(start + len <= xs[axis], "narrow out of range");
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let mut idx = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for a in start..start + len {
                let base = (o * xs[axis] + a) * inner;
                idx.extend(base..base + inner);
            }
        }
        let mut out = xs;
        out[axis] = len;
        self.gather(x, Rc::new(idx), &out)
    }

    /// Split `axis` into consecutive chunks of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Vec<Var> {
        let mut start = 0;
        sizes
            .iter()
            .map(|&n| {
                let v = self.narrow(x, axis, start, n);
                start += n;
                v
            })
            .collect()
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty());
        let first = self.shape(xs[0]).to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let sizes: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let s = self.shape(v);
                assert_eq!(s.len(), first.len(), "concat rank mismatch");
                for (i, (&a, &b)) in s.iter().zip(&first).enumerate() {
                    assert!(i == axis || a == b, "concat shape mismatch {s:?} vs {first:?}");
                }
                s[axis]
            })
            .collect();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &n) in xs.iter().zip(&sizes) {
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut out = first;
        out[axis] = total;
        let y = Tensor::from_vec(&out, data).unwrap();
        let sizes2 = sizes.clone();
        self.push_op(y, xs, move |c| {
            let g = c.grad.data();
            let mut grads: Vec<Vec<T>> = sizes2
                .iter()
                .map(|&n| Vec::with_capacity(outer * n * inner))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gi, &n) in grads.iter_mut().zip(&sizes2) {
                    gi.extend_from_slice(&g[off..off + n * inner]);
                    off += n * inner;
                }
            }
            grads
                .into_iter()
                .zip(&c.inputs)
                .zip(&c.needs)
                .map(|((gi, inp), &need)| {
                    need.then(|| Tensor::from_vec(inp.shape(), gi).unwrap())
                })
                .collect()
        })
    }

    /// Reflect-pad a `[B, C, H, W]` map on the bottom and right edges.
    pub fn pad_reflect_br(&mut self, x: Var, pad_h: usize, pad_w: usize) -> Var {
        if pad_h == 0 && pad_w == 0 {
            return x;
        }
        let (b, c, h, w) = self.value(x).dims4().unwrap();
        let (oh, ow) = (h + pad_h, w + pad_w);
        let mut idx = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            for y in 0..oh {
                let sy = reflect_index(y as isize, h);
                for xx in 0..ow {
                    let sx = reflect_index(xx as isize, w);
                    idx.push(plane * h * w + sy * w + sx);
                }
            }
        }
        self.gather(x, Rc::new(idx), &[b, c, oh, ow])
    }

    /// Top-left `h × w` window of a `[B, C, H, W]` map.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Var {
        let (b, c, ih, iw) = self.value(x).dims4().unwrap();
        if (ih, iw) == (h, w) {
            return x;
        }
        assert!(h <= ih && w <= iw, "crop larger than input");
        let mut idx = Vec::with_capacity(b * c * h * w);
        for plane in 0..b * c {
            for y in 0..h {
                let base = plane * ih * iw + y * iw;
                idx.extend(base..base + w);
            }
        }
        self.gather(x, Rc::new(idx), &[b, c, h, w])
    }

    /// Repeat a `[B, C]` tensor over an `h × w` grid.
    pub fn broadcast_spatial(&mut self, s: Var, h: usize, w: usize) -> Var {
        let sh = self.shape(s).to_vec();
        let (b, c) = (sh[0], sh[1]);
        let mut idx = Vec::with_capacity(b * c * h * w);
        for bc in 0..b * c {
            idx.extend(std::iter::repeat(bc).take(h * w));
        }
        self.gather(s, Rc::new(idx), &[b, c, h, w])
    }

    /// Checked variant of [`Graph::narrow`] over axis 1 into equal parts.
    pub fn chunk_channels(&mut self, x: Var, parts: usize) -> Result<Vec<Var>> {
        let c = self.shape(x)[1];
        if parts == 0 || c % parts != 0 {
            return shape_err(format!("{c} channels cannot be split into {parts} parts"));
        }
        Ok(self.split(x, 1, &vec![c / parts; parts]))
    }
}

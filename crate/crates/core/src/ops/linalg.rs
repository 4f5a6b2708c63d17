use crate::autograd::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Strided matrix view into a slice.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatView<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
        }
    }
}

/// `c = a·b + beta·c` with `c` row-major `a.rows × b.cols`.
pub(crate) fn gemm<T: Scalar>(a: MatView<'_, T>, b: MatView<'_, T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    assert!(a.max_offset() < a.data.len() && b.max_offset() < b.data.len());
    // SAFETY: bounds of every reachable element were asserted above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<T: Scalar> Graph<T> {
    /// Batched `op(a)·op(b)` for rank-3 operands, `op` optionally transposing
    /// the last two axes.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ba, ra, ca) = self.value(a).dims3().expect("matmul lhs rank 3");
        let (bb, rb, cb) = self.value(b).dims3().expect("matmul rhs rank 3");
        assert_eq!(ba, bb, "matmul batch mismatch");
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![T::zero(); ba * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..ba {
                let va = view(&av[i * ra * ca..(i + 1) * ra * ca], ra, ca, ta);
                let vb = view(&bv[i * rb * cb..(i + 1) * rb * cb], rb, cb, tb);
                gemm(va, vb, T::zero(), &mut out[i * m * n..(i + 1) * m * n]);
            }
        }
        self.add_macs(ba * m * n * k);
        let y = Tensor::from_vec(&[ba, m, n], out).unwrap();
        self.push_op(y, &[a, b], move |c| {
            let (av, bv, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
            let ga = c.needs[0].then(|| {
                let mut d = vec![T::zero(); ba * ra * ca];
                for i in 0..ba {
                    let gi = MatView::row_major(&g[i * m * n..(i + 1) * m * n], m, n);
                    let vb = view(&bv[i * rb * cb..(i + 1) * rb * cb], rb, cb, tb);
                    let di = &mut d[i * ra * ca..(i + 1) * ra * ca];
                    if ta {
                        // dA (k×m) = op(B) · dCᵀ
                        gemm(vb, gi.t(), T::zero(), di);
                    } else {
                        // dA (m×k) = dC · op(B)ᵀ
                        gemm(gi, vb.t(), T::zero(), di);
                    }
                }
                Tensor::from_vec(&[ba, ra, ca], d).unwrap()
            });
            let gb = c.needs[1].then(|| {
                let mut d = vec![T::zero(); bb * rb * cb];
                for i in 0..bb {
                    let gi = MatView::row_major(&g[i * m * n..(i + 1) * m * n], m, n);
                    let va = view(&av[i * ra * ca..(i + 1) * ra * ca], ra, ca, ta);
                    let di = &mut d[i * rb * cb..(i + 1) * rb * cb];
                    if tb {
                        // dB (n×k) = dCᵀ · op(A)
                        gemm(gi.t(), va, T::zero(), di);
                    } else {
                        // dB (k×n) = op(A)ᵀ · dC
                        gemm(va.t(), gi, T::zero(), di);
                    }
                }
                Tensor::from_vec(&[bb, rb, cb], d).unwrap()
            });
            vec![ga, gb]
        })
    }

    /// `y = x·wᵀ + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (out_f, in_f) = (ws[0], ws[1]);
        assert_eq!(*xs.last().unwrap(), in_f, "linear input features mismatch");
        let rows = self.value(x).len() / in_f;
        let mut out = vec![T::zero(); rows * out_f];
        gemm(
            MatView::row_major(self.value(x).data(), rows, in_f),
            MatView::row_major(self.value(w).data(), out_f, in_f).t(),
            T::zero(),
            &mut out,
        );
        self.add_macs(rows * in_f * out_f);
        let mut os = xs.clone();
        *os.last_mut().unwrap() = out_f;
        let y = Tensor::from_vec(&os, out).unwrap();
        let y = self.push_op(y, &[x, w], move |c| {
            let g = MatView::row_major(c.grad.data(), rows, out_f);
            let gx = c.needs[0].then(|| {
                let mut d = vec![T::zero(); rows * in_f];
                gemm(g, MatView::row_major(c.inputs[1].data(), out_f, in_f), T::zero(), &mut d);
                Tensor::from_vec(c.inputs[0].shape(), d).unwrap()
            });
            let gw = c.needs[1].then(|| {
                let mut d = vec![T::zero(); out_f * in_f];
                gemm(g.t(), MatView::row_major(c.inputs[0].data(), rows, in_f), T::zero(), &mut d);
                Tensor::from_vec(&[out_f, in_f], d).unwrap()
            });
            vec![gx, gw]
        });
        match b {
            Some(b) => self.add_last_bias(y, b),
            None => y,
        }
    }

    /// Adds `b` along the last axis.
    pub fn add_last_bias(&mut self, x: Var, b: Var) -> Var {
        let n = *self.shape(x).last().unwrap();
        assert_eq!(self.shape(b), &[n], "bias length mismatch");
        let bv = self.value(b).data().to_vec();
        let mut y = self.value(x).clone();
        for row in y.data_mut().chunks_mut(n) {
            for (v, &bb) in row.iter_mut().zip(&bv) {
                *v += bb;
            }
        }
        self.push_op(y, &[x, b], move |c| {
            let gb = c.needs[1].then(|| {
                let mut acc = vec![T::zero(); n];
                for row in c.grad.data().chunks(n) {
                    for (a, &g) in acc.iter_mut().zip(row) {
                        *a += g;
                    }
                }
                Tensor::from_vec(&[n], acc).unwrap()
            });
            vec![c.needs[0].then(|| c.grad.clone()), gb]
        })
    }

    /// Pointwise convolution on `[B, Cin, H, W]` with `w` of shape `[Cout, Cin]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (bs, cin, h, wd) = self.value(x).dims4().expect("conv1x1 input rank 4");
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "conv1x1 weight must be [Cout, Cin]");
        let cout = ws[0];
        assert_eq!(ws[1], cin, "conv1x1 channel mismatch");
        let hw = h * wd;
        let mut out = vec![T::zero(); bs * cout * hw];
        {
            let xv = self.value(x).data();
            let wv = MatView::row_major(self.value(w).data(), cout, cin);
            for i in 0..bs {
                gemm(
                    wv,
                    MatView::row_major(&xv[i * cin * hw..(i + 1) * cin * hw], cin, hw),
                    T::zero(),
                    &mut out[i * cout * hw..(i + 1) * cout * hw],
                );
            }
        }
        self.add_macs(bs * cout * cin * hw);
        let y = Tensor::from_vec(&[bs, cout, h, wd], out).unwrap();
        let y = self.push_op(y, &[x, w], move |c| {
            let xv = c.inputs[0].data();
            let wv = MatView::row_major(c.inputs[1].data(), cout, cin);
            let g = c.grad.data();
            let gx = c.needs[0].then(|| {
                let mut d = vec![T::zero(); bs * cin * hw];
                for i in 0..bs {
                    gemm(
                        wv.t(),
                        MatView::row_major(&g[i * cout * hw..(i + 1) * cout * hw], cout, hw),
                        T::zero(),
                        &mut d[i * cin * hw..(i + 1) * cin * hw],
                    );
                }
                Tensor::from_vec(c.inputs[0].shape(), d).unwrap()
            });
            let gw = c.needs[1].then(|| {
                let mut d = vec![T::zero(); cout * cin];
                for i in 0..bs {
                    gemm(
                        MatView::row_major(&g[i * cout * hw..(i + 1) * cout * hw], cout, hw),
                        MatView::row_major(&xv[i * cin * hw..(i + 1) * cin * hw], cin, hw).t(),
                        T::one(),
                        &mut d,
                    );
                }
                Tensor::from_vec(&[cout, cin], d).unwrap()
            });
            vec![gx, gw]
        });
        match b {
            Some(b) => self.add_channel_bias(y, b),
            None => y,
        }
    }
}

fn view<T>(data: &[T], rows: usize, cols: usize, transpose: bool) -> MatView<'_, T> {
    let v = MatView::row_major(data, rows, cols);
    if transpose {
        v.t()
    } else {
        v
    }
}

//! Four-direction cross-scan/merge and the selective state-space recurrence.

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Traversal order used to flatten a map into a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScanDirection {
    RowMajor,
    RowMajorReversed,
    ColumnMajor,
    ColumnMajorReversed,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::RowMajor,
        ScanDirection::RowMajorReversed,
        ScanDirection::ColumnMajor,
        ScanDirection::ColumnMajorReversed,
    ];

    /// `order[t]` is the flat spatial position visited at step `t`.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let l = h * w;
        let col = |t: usize| (t % h) * w + t / h;
        match self {
            ScanDirection::RowMajor => (0..l).collect(),
            ScanDirection::RowMajorReversed => (0..l).rev().collect(),
            ScanDirection::ColumnMajor => (0..l).map(col).collect(),
            ScanDirection::ColumnMajorReversed => (0..l).rev().map(col).collect(),
        }
    }

    /// `inverse[p]` is the step at which position `p` is visited.
    pub fn inverse_order(self, h: usize, w: usize) -> Vec<usize> {
        let order = self.order(h, w);
        let mut inv = vec![0; order.len()];
        for (t, &p) in order.iter().enumerate() {
            inv[p] = t;
        }
        inv
    }
}

/// A `[B, L, C]` sequence produced by one scan direction.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceTensor<T> {
    pub data: Tensor<T>,
    pub layout: ScanDirection,
}

fn scan_index(b: usize, c: usize, h: usize, w: usize, dir: ScanDirection) -> Vec<usize> {
    let l = h * w;
    let order = dir.order(h, w);
    let mut idx = Vec::with_capacity(b * l * c);
    for bi in 0..b {
        for &p in &order {
            for ci in 0..c {
                idx.push((bi * c + ci) * l + p);
            }
        }
    }
    idx
}

fn merge_index(b: usize, c: usize, h: usize, w: usize, dir: ScanDirection) -> Vec<usize> {
    let l = h * w;
    let inv = dir.inverse_order(h, w);
    let mut idx = Vec::with_capacity(b * l * c);
    for bi in 0..b {
        for ci in 0..c {
            for &t in &inv {
                idx.push((bi * l + t) * c + ci);
            }
        }
    }
    idx
}

/// Flatten `[B, C, H, W]` into the four directional sequences.
pub fn cross_scan<T: Scalar>(f: &Tensor<T>) -> Result<[SequenceTensor<T>; 4]> {
    let (b, c, h, w) = f.dims4()?;
    Ok(ScanDirection::ALL.map(|dir| {
        let idx = scan_index(b, c, h, w, dir);
        let data = idx.iter().map(|&i| f.data()[i]).collect();
        SequenceTensor {
            data: Tensor::from_vec(&[b, h * w, c], data).unwrap(),
            layout: dir,
        }
    }))
}

/// Undo each sequence's permutation and sum the four maps.
pub fn cross_merge<T: Scalar>(seqs: &[SequenceTensor<T>], h: usize, w: usize) -> Result<Tensor<T>> {
    if seqs.len() != 4 {
        return shape_err(format!("cross_merge needs 4 sequences, got {}", seqs.len()));
    }
    let (b, l, c) = seqs[0].data.dims3()?;
    if l != h * w {
        return shape_err(format!("sequence length {l} does not match {h}x{w}"));
    }
    for (i, s) in seqs.iter().enumerate() {
        if s.data.shape() != seqs[0].data.shape() {
            return shape_err(format!(
                "sequence {i} has shape {:?}, expected {:?}",
                s.data.shape(),
                seqs[0].data.shape()
            ));
        }
        if seqs[..i].iter().any(|o| o.layout == s.layout) {
            return shape_err(format!("duplicate layout tag {:?}", s.layout));
        }
    }
    let mut out = Tensor::zeros(&[b, c, h, w]);
    for s in seqs {
        let idx = merge_index(b, c, h, w, s.layout);
        for (o, &i) in out.data_mut().iter_mut().zip(&idx) {
            *o += s.data.data()[i];
        }
    }
    Ok(out)
}

/// Forward recurrence on plain tensors. Returns outputs and every post-update
/// hidden state (`[B, L, D, N]`).
///
/// `h_t = exp(Δ_t·A)⊙h_{t-1} + Δ_t·B_t·x_t`, `y_t = C_t·h_t + D⊙x_t`, `h_0 = 0`.
pub fn selective_scan_forward<T: Scalar>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    bm: &Tensor<T>,
    cm: &Tensor<T>,
    dskip: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (b, l, d) = x.dims3()?;
    if delta.shape() != x.shape() {
        return shape_err(format!("delta {:?} must match x {:?}", delta.shape(), x.shape()));
    }
    let ash = a.shape();
    if ash.len() != 2 || ash[0] != d {
        return shape_err(format!("A must be [{d}, N], got {ash:?}"));
    }
    let n = ash[1];
    for (name, t) in [("B", bm), ("C", cm)] {
        if t.shape() != [b, l, n] {
            return shape_err(format!("{name} must be [{b}, {l}, {n}], got {:?}", t.shape()));
        }
    }
    if dskip.shape() != [d] {
        return shape_err(format!("D must be [{d}], got {:?}", dskip.shape()));
    }
    let (xv, dv, av, bv, cv, sv) = (x.data(), delta.data(), a.data(), bm.data(), cm.data(), dskip.data());
    let mut y = vec![T::zero(); b * l * d];
    let mut states = vec![T::zero(); b * l * d * n];
    let mut h = vec![T::zero(); d * n];
    for bi in 0..b {
        h.iter_mut().for_each(|v| *v = T::zero());
        for t in 0..l {
            let row = (bi * l + t) * d;
            let brow = &bv[(bi * l + t) * n..(bi * l + t + 1) * n];
            let crow = &cv[(bi * l + t) * n..(bi * l + t + 1) * n];
            let mut finite = true;
            for di in 0..d {
                let dt = dv[row + di];
                let xt = xv[row + di];
                let mut acc = sv[di] * xt;
                for ni in 0..n {
                    let hv = &mut h[di * n + ni];
                    *hv = (dt * av[di * n + ni]).fast_exp() * *hv + dt * brow[ni] * xt;
                    acc += crow[ni] * *hv;
                }
                finite &= acc.is_finite();
                y[row + di] = acc;
            }
            if !finite {
                return Err(Error::NonFinite {
                    context: "selective_scan".into(),
                    index: t,
                });
            }
            states[(bi * l + t) * d * n..(bi * l + t + 1) * d * n].copy_from_slice(&h);
        }
    }
    Ok((Tensor::from_vec(&[b, l, d], y).unwrap(), states))
}

impl<T: Scalar> Graph<T> {
    /// One directional flattening `[B, C, H, W] -> [B, H*W, C]`.
    pub fn cross_scan_dir(&mut self, f: Var, dir: ScanDirection) -> Var {
        let (b, c, h, w) = self.value(f).dims4().expect("cross_scan input rank 4");
        let idx = scan_index(b, c, h, w, dir);
        self.gather(f, Rc::new(idx), &[b, h * w, c])
    }

    /// Differentiable [`cross_merge`].
    pub fn cross_merge(&mut self, seqs: &[(Var, ScanDirection)], h: usize, w: usize) -> Result<Var> {
        if seqs.len() != 4 {
            return shape_err("cross_merge needs 4 sequences");
        }
        let first = self.shape(seqs[0].0).to_vec();
        for (i, &(v, dir)) in seqs.iter().enumerate() {
            if self.shape(v) != first.as_slice() {
                return shape_err("cross_merge sequences differ in shape");
            }
            if seqs[..i].iter().any(|&(_, d)| d == dir) {
                return shape_err(format!("duplicate layout tag {dir:?}"));
            }
        }
        let (b, l, c) = (first[0], first[1], first[2]);
        if l != h * w {
            return shape_err(format!("sequence length {l} does not match {h}x{w}"));
        }
        let maps: Vec<Var> = seqs
            .iter()
            .map(|&(v, dir)| self.gather(v, Rc::new(merge_index(b, c, h, w, dir)), &[b, c, h, w]))
            .collect();
        Ok(self.add_n(&maps))
    }

    /// Differentiable selective scan; see [`selective_scan_forward`].
    pub fn selective_scan(
        &mut self,
        x: Var,
        delta: Var,
        a: Var,
        bm: Var,
        cm: Var,
        dskip: Var,
    ) -> Result<Var> {
        let (y, states) = selective_scan_forward(
            self.value(x),
            self.value(delta),
            self.value(a),
            self.value(bm),
            self.value(cm),
            self.value(dskip),
        )?;
        let (b, l, d) = y.dims3()?;
        let n = self.shape(a)[1];
        self.add_macs(b * l * d * (2 * n + 1));
        Ok(self.push_op(y, &[x, delta, a, bm, cm, dskip], move |c| {
            let (xv, dv, av, bv, cv, sv) = (
                c.inputs[0].data(),
                c.inputs[1].data(),
                c.inputs[2].data(),
                c.inputs[3].data(),
                c.inputs[4].data(),
                c.inputs[5].data(),
            );
            let gy = c.grad.data();
            let mut dx = vec![T::zero(); b * l * d];
            let mut ddelta = vec![T::zero(); b * l * d];
            let mut da = vec![T::zero(); d * n];
            let mut db = vec![T::zero(); b * l * n];
            let mut dc = vec![T::zero(); b * l * n];
            let mut dd = vec![T::zero(); d];
            let mut dh = vec![T::zero(); d * n];
            for bi in 0..b {
                dh.iter_mut().for_each(|v| *v = T::zero());
                for t in (0..l).rev() {
                    let row = (bi * l + t) * d;
                    let nrow = (bi * l + t) * n;
                    let h_t = &states[(bi * l + t) * d * n..(bi * l + t + 1) * d * n];
                    for di in 0..d {
                        let g = gy[row + di];
                        dx[row + di] += g * sv[di];
                        dd[di] += g * xv[row + di];
                        for ni in 0..n {
                            dc[nrow + ni] += g * h_t[di * n + ni];
                            dh[di * n + ni] += g * cv[nrow + ni];
                        }
                    }
                    for di in 0..d {
                        let dt = dv[row + di];
                        let xt = xv[row + di];
                        let mut acc_dt = T::zero();
                        let mut acc_x = T::zero();
                        for ni in 0..n {
                            let k = di * n + ni;
                            let at = (dt * av[k]).fast_exp();
                            let hprev = if t == 0 {
                                T::zero()
                            } else {
                                states[(bi * l + t - 1) * d * n + k]
                            };
                            let g = dh[k];
                            acc_dt += g * (av[k] * at * hprev + bv[nrow + ni] * xt);
                            da[k] += g * dt * at * hprev;
                            db[nrow + ni] += g * dt * xt;
                            acc_x += g * dt * bv[nrow + ni];
                            dh[k] = g * at;
                        }
                        ddelta[row + di] += acc_dt;
                        dx[row + di] += acc_x;
                    }
                }
            }
            let t = |shape: &[usize], v: Vec<T>| Tensor::from_vec(shape, v).unwrap();
            vec![
                c.needs[0].then(|| t(&[b, l, d], dx)),
                c.needs[1].then(|| t(&[b, l, d], ddelta)),
                c.needs[2].then(|| t(&[d, n], da)),
                c.needs[3].then(|| t(&[b, l, n], db)),
                c.needs[4].then(|| t(&[b, l, n], dc)),
                c.needs[5].then(|| t(&[d], dd)),
            ]
        }))
    }
}

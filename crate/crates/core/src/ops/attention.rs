use crate::autograd::{Graph, Var};
use crate::error::{config_err, shape_err, Result};
use crate::ops::linalg::{gemm, MatView};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Graph<T> {
    /// Multi-head `softmax(q·kᵀ/√d)·v` over token tensors `[B, L, C]`.
    ///
    /// Returns the merged output `[B, Lq, C]` and the attention weights
    /// `[B·heads, Lq, Lk]`.
    pub fn scaled_dot_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
    ) -> Result<(Var, Var)> {
        let (bq, _, c) = self.value(q).dims3()?;
        let (bk, lk, ck) = self.value(k).dims3()?;
        let (bv, lv, cv) = self.value(v).dims3()?;
        if heads == 0 || c % heads != 0 {
            return config_err(format!("{heads} heads do not divide {c} channels"));
        }
        if lk != lv {
            return shape_err(format!("keys ({lk}) and values ({lv}) differ in token count"));
        }
        if bq != bk || bq != bv || ck != c || cv != c {
            return shape_err("attention operands disagree in batch or channels");
        }
        let d = c / heads;
        let qh = self.split_heads(q, heads);
        let kh = self.split_heads(k, heads);
        let vh = self.split_heads(v, heads);
        let w = self.attention_weights(qh, kh, T::one() / T::from_usize(d).unwrap().sqrt());
        let out = self.matmul(w, vh, false, false);
        Ok((self.merge_heads(out, heads), w))
    }
}

impl<T: Scalar> Graph<T> {
    /// `softmax(s·q·kᵀ)` for `q: [B, Lq, d]`, `k: [B, Lk, d]`, as one node so
    /// the logits are never kept on the tape.
    pub fn attention_weights(&mut self, q: Var, k: Var, scale: T) -> Var {
        let (b, lq, d) = self.value(q).dims3().expect("attention query rank 3");
        let (bk, lk, dk) = self.value(k).dims3().expect("attention key rank 3");
        assert!(b == bk && d == dk, "attention operands disagree");
        let mut w = vec![T::zero(); b * lq * lk];
        {
            let (qv, kv) = (self.value(q).data(), self.value(k).data());
            for i in 0..b {
                let qi = MatView::row_major(&qv[i * lq * d..(i + 1) * lq * d], lq, d);
                let ki = MatView::row_major(&kv[i * lk * d..(i + 1) * lk * d], lk, d);
                gemm(qi, ki.t(), T::zero(), &mut w[i * lq * lk..(i + 1) * lq * lk]);
            }
        }
        if lk > 0 {
            for row in w.chunks_mut(lk) {
                let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                for v in row.iter_mut() {
                    *v = ((*v - m) * scale).fast_exp();
                }
                let inv = T::one() / row.iter().copied().sum::<T>();
                row.iter_mut().for_each(|v| *v *= inv);
            }
        }
        self.add_macs(b * lq * lk * d);
        let y = Tensor::from_vec(&[b, lq, lk], w).unwrap();
        self.push_op(y, &[q, k], move |c| {
            let (qv, kv, wv) = (c.inputs[0].data(), c.inputs[1].data(), c.output.data());
            // dL = s·W⊙(dW − rowsum(dW⊙W)), the logit gradient
            let mut dl = c.grad.data().to_vec();
            if lk > 0 {
                for (drow, wrow) in dl.chunks_mut(lk).zip(wv.chunks(lk)) {
                    let dot: T = drow.iter().zip(wrow).map(|(&g, &w)| g * w).sum();
                    for (g, &w) in drow.iter_mut().zip(wrow) {
                        *g = scale * w * (*g - dot);
                    }
                }
            }
            let gq = c.needs[0].then(|| {
                let mut out = vec![T::zero(); b * lq * d];
                for i in 0..b {
                    let li = MatView::row_major(&dl[i * lq * lk..(i + 1) * lq * lk], lq, lk);
                    let ki = MatView::row_major(&kv[i * lk * d..(i + 1) * lk * d], lk, d);
                    gemm(li, ki, T::zero(), &mut out[i * lq * d..(i + 1) * lq * d]);
                }
                Tensor::from_vec(&[b, lq, d], out).unwrap()
            });
            let gk = c.needs[1].then(|| {
                let mut out = vec![T::zero(); b * lk * d];
                for i in 0..b {
                    let li = MatView::row_major(&dl[i * lq * lk..(i + 1) * lq * lk], lq, lk);
                    let qi = MatView::row_major(&qv[i * lq * d..(i + 1) * lq * d], lq, d);
                    gemm(li.t(), qi, T::zero(), &mut out[i * lk * d..(i + 1) * lk * d]);
                }
                Tensor::from_vec(&[b, lk, d], out).unwrap()
            });
            vec![gq, gk]
        })
    }
}

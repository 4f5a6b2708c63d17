use crate::autograd::Var;
use crate::error::{config_err, Result};
use crate::scalar::Scalar;

use super::{Ctx, Init, ParamId};

fn fan_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// Pointwise convolution `Cin -> Cout`.
#[derive(Debug, Clone)]
pub struct Conv1x1 {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Conv1x1 {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, bias: bool) -> Self {
        init.scope(name, |i| Self {
            w: i.uniform("weight", &[cout, cin], fan_bound(cin)),
            b: bias.then(|| i.zeros("bias", &[cout])),
            cin,
            cout,
        })
    }

    /// Weight and bias start at zero so the layer outputs zeros.
    pub fn zeroed<T: Scalar>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, bias: bool) -> Self {
        init.scope(name, |i| Self {
            w: i.zeros("weight", &[cout, cin]),
            b: bias.then(|| i.zeros("bias", &[cout])),
            cin,
            cout,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = ctx.p(self.w);
        let b = self.b.map(|b| ctx.p(b));
        ctx.g.conv1x1(x, w, b)
    }

    pub fn params(&self) -> usize {
        self.cin * self.cout + self.b.map_or(0, |_| self.cout)
    }
}

/// Dense `k × k` convolution with reflect padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        init.scope(name, |i| Self {
            w: i.uniform("weight", &[cout, cin, k, k], fan_bound(cin * k * k)),
            b: Some(i.zeros("bias", &[cout])),
            cin,
            cout,
            k,
            stride,
        })
    }

    pub fn zeroed<T: Scalar>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        init.scope(name, |i| Self {
            w: i.zeros("weight", &[cout, cin, k, k]),
            b: Some(i.zeros("bias", &[cout])),
            cin,
            cout,
            k,
            stride: 1,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = ctx.p(self.w);
        let b = self.b.map(|b| ctx.p(b));
        ctx.g.conv2d(x, w, b, self.stride, self.k / 2)
    }

    pub fn params(&self) -> usize {
        self.cout * self.cin * self.k * self.k + self.b.map_or(0, |_| self.cout)
    }
}

/// Depthwise same-size convolution.
#[derive(Debug, Clone)]
pub struct DwConv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub c: usize,
    pub k: usize,
}

impl DwConv {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, c: usize, k: usize, bias: bool) -> Result<Self> {
        if k % 2 == 0 || k == 0 {
            return config_err(format!("depthwise kernel size must be odd, got {k}"));
        }
        Ok(init.scope(name, |i| Self {
            w: i.uniform("weight", &[c, k, k], fan_bound(k * k)),
            b: bias.then(|| i.zeros("bias", &[c])),
            c,
            k,
        }))
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.w);
        let b = self.b.map(|b| ctx.p(b));
        ctx.g.dwconv(x, w, b)
    }

    pub fn params(&self) -> usize {
        self.c * self.k * self.k + self.b.map_or(0, |_| self.c)
    }
}

/// Affine map over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fin: usize,
    pub fout: usize,
}

impl Linear {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, fin: usize, fout: usize, bias: bool) -> Self {
        init.scope(name, |i| Self {
            w: i.uniform("weight", &[fout, fin], fan_bound(fin)),
            b: bias.then(|| i.zeros("bias", &[fout])),
            fin,
            fout,
        })
    }

    pub fn zeroed<T: Scalar>(init: &mut Init<'_, T>, name: &str, fin: usize, fout: usize, bias: bool) -> Self {
        init.scope(name, |i| Self {
            w: i.zeros("weight", &[fout, fin]),
            b: bias.then(|| i.zeros("bias", &[fout])),
            fin,
            fout,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = ctx.p(self.w);
        let b = self.b.map(|b| ctx.p(b));
        ctx.g.linear(x, w, b)
    }

    pub fn params(&self) -> usize {
        self.fin * self.fout + self.b.map_or(0, |_| self.fout)
    }
}

/// Layer norm over channels of a map (`axis = 1`) or features of tokens.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub c: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, c: usize) -> Self {
        init.scope(name, |i| Self {
            gamma: i.ones("gamma", &[c]),
            beta: i.zeros("beta", &[c]),
            c,
        })
    }

    /// Normalize each pixel of `[B, C, H, W]` over channels.
    pub fn map<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        ctx.g.layer_norm(x, g, b, 1)
    }

    /// Normalize each token of `[.., C]`.
    pub fn tokens<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        let axis = ctx.g.shape(x).len() - 1;
        ctx.g.layer_norm(x, g, b, axis)
    }

    pub fn params(&self) -> usize {
        2 * self.c
    }
}

/// Multi-head attention with separate query / key / value / output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub c: usize,
}

impl MultiHeadAttention {
    /// `zero_out` starts the output projection at zero.
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        c: usize,
        heads: usize,
        zero_out: bool,
    ) -> Result<Self> {
        if heads == 0 || c % heads != 0 {
            return config_err(format!("{heads} heads do not divide {c} channels"));
        }
        Ok(init.scope(name, |i| Self {
            q: Linear::new(i, "q", c, c, true),
            k: Linear::new(i, "k", c, c, true),
            v: Linear::new(i, "v", c, c, true),
            o: if zero_out {
                Linear::zeroed(i, "o", c, c, true)
            } else {
                Linear::new(i, "o", c, c, true)
            },
            heads,
            c,
        }))
    }

    /// Attend token tensors: `q_tok [B, Lq, C]`, `kv_tok [B, Lk, C]`.
    pub fn tokens<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, q_tok: Var, kv_tok: Var) -> Result<Var> {
        let q = self.q.forward(ctx, q_tok);
        let k = self.k.forward(ctx, kv_tok);
        let v = self.v.forward(ctx, kv_tok);
        let (out, w) = ctx.g.scaled_dot_attention(q, k, v, self.heads)?;
        ctx.record_attention(w);
        Ok(self.o.forward(ctx, out))
    }

    /// Attend between maps `[B, C, H, W]`, with `q_map` providing the queries.
    ///
    /// When either map has more than `limit` pixels both are average-pooled
    /// by the smallest integer factor that brings them under the limit, and the
    /// result is bilinearly upsampled back to the query resolution.
    pub fn maps<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, q_map: Var, kv_map: Var, limit: usize) -> Result<Var> {
        let (_, _, h, w) = ctx.g.value(q_map).dims4()?;
        let (_, _, kh, kw) = ctx.g.value(kv_map).dims4()?;
        let (qh, qw) = pooled_dims(h, w, limit);
        let (ph, pw) = pooled_dims(kh, kw, limit);
        let q = ctx.g.adaptive_avg_pool(q_map, qh, qw);
        let kv = ctx.g.adaptive_avg_pool(kv_map, ph, pw);
        let qt = ctx.g.to_tokens(q);
        let kt = ctx.g.to_tokens(kv);
        let out = self.tokens(ctx, qt, kt)?;
        let out = ctx.g.from_tokens(out, qh, qw);
        Ok(ctx.g.bilinear_resize(out, h, w))
    }

    pub fn params(&self) -> usize {
        4 * self.c * (self.c + 1)
    }
}

/// Spatial size after the attention pooling guard.
pub fn pooled_dims(h: usize, w: usize, limit: usize) -> (usize, usize) {
    if h * w <= limit {
        return (h, w);
    }
    let mut s = 2;
    loop {
        let (ph, pw) = (h.div_ceil(s), w.div_ceil(s));
        if ph * pw <= limit {
            return (ph, pw);
        }
        s += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guard_only_pools_large_maps() {
        assert_eq!(pooled_dims(64, 64, 4096), (64, 64));
        assert_eq!(pooled_dims(128, 128, 4096), (64, 64));
        assert_eq!(pooled_dims(100, 70, 4096), (50, 35));
        let (h, w) = pooled_dims(257, 255, 4096);
        assert!(h * w <= 4096);
    }
}

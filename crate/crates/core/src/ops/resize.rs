//! Resolution changes: pixel (un)shuffle, bilinear resize, adaptive pooling.

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-compressed sparse linear map applied plane by plane.
struct PlaneMap<T> {
    offsets: Vec<usize>,
    taps: Vec<(usize, T)>,
    in_len: usize,
}

impl<T: Scalar> PlaneMap<T> {
    fn out_len(&self) -> usize {
        self.offsets.len() - 1
    }
}

/// Bilinear source taps along one axis, half-pixel centers (align-corners off).
fn linear_taps<T: Scalar>(n_in: usize, n_out: usize) -> Vec<[(usize, T); 2]> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let f = src - i0 as f64;
            let f = if i0 == i1 { 0.0 } else { f };
            [(i0, T::lit(1.0 - f)), (i1, T::lit(f))]
        })
        .collect()
}

fn bilinear_map<T: Scalar>(h: usize, w: usize, oh: usize, ow: usize) -> PlaneMap<T> {
    let ty = linear_taps::<T>(h, oh);
    let tx = linear_taps::<T>(w, ow);
    let mut offsets = vec![0];
    let mut taps = Vec::with_capacity(oh * ow * 4);
    for ry in &ty {
        for rx in &tx {
            for &(sy, wy) in ry {
                for &(sx, wx) in rx {
                    let wt = wy * wx;
                    if wt != T::zero() {
                        taps.push((sy * w + sx, wt));
                    }
                }
            }
            offsets.push(taps.len());
        }
    }
    PlaneMap {
        offsets,
        taps,
        in_len: h * w,
    }
}

fn adaptive_pool_map<T: Scalar>(h: usize, w: usize, oh: usize, ow: usize) -> PlaneMap<T> {
    let bins = |n_in: usize, n_out: usize, o: usize| {
        let start = o * n_in / n_out;
        let end = ((o + 1) * n_in).div_ceil(n_out);
        start..end
    };
    let mut offsets = vec![0];
    let mut taps = Vec::new();
    for oy in 0..oh {
        let ry = bins(h, oh, oy);
        for ox in 0..ow {
            let rx = bins(w, ow, ox);
            let wt = T::one() / T::from_usize(ry.len() * rx.len()).unwrap();
            for sy in ry.clone() {
                for sx in rx.clone() {
                    taps.push((sy * w + sx, wt));
                }
            }
            offsets.push(taps.len());
        }
    }
    PlaneMap {
        offsets,
        taps,
        in_len: h * w,
    }
}

fn apply_plane_map<T: Scalar>(map: &PlaneMap<T>, x: &[T]) -> Vec<T> {
    let planes = x.len() / map.in_len;
    let ol = map.out_len();
    let mut out = vec![T::zero(); planes * ol];
    for p in 0..planes {
        let src = &x[p * map.in_len..(p + 1) * map.in_len];
        let dst = &mut out[p * ol..(p + 1) * ol];
        for (o, d) in dst.iter_mut().enumerate() {
            *d = map.taps[map.offsets[o]..map.offsets[o + 1]]
                .iter()
                .map(|&(i, wt)| wt * src[i])
                .sum();
        }
    }
    out
}

fn apply_plane_map_t<T: Scalar>(map: &PlaneMap<T>, g: &[T]) -> Vec<T> {
    let ol = map.out_len();
    let planes = g.len() / ol;
    let mut out = vec![T::zero(); planes * map.in_len];
    for p in 0..planes {
        let src = &g[p * ol..(p + 1) * ol];
        let dst = &mut out[p * map.in_len..(p + 1) * map.in_len];
        for (o, &gv) in src.iter().enumerate() {
            for &(i, wt) in &map.taps[map.offsets[o]..map.offsets[o + 1]] {
                dst[i] += wt * gv;
            }
        }
    }
    out
}

fn unshuffle_index(b: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<usize> {
    let (oh, ow) = (h / r, w / r);
    let mut idx = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for ci in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    for y in 0..oh {
                        for x in 0..ow {
                            idx.push(((bi * c + ci) * h + y * r + dy) * w + x * r + dx);
                        }
                    }
                }
            }
        }
    }
    idx
}

impl<T: Scalar> Graph<T> {
    fn plane_map_op(&mut self, x: Var, map: PlaneMap<T>, oh: usize, ow: usize) -> Var {
        let (b, c, _, _) = self.value(x).dims4().expect("resize input rank 4");
        let y = apply_plane_map(&map, self.value(x).data());
        let y = Tensor::from_vec(&[b, c, oh, ow], y).unwrap();
        self.push_op(y, &[x], move |cx| {
            let d = apply_plane_map_t(&map, cx.grad.data());
            vec![Some(Tensor::from_vec(cx.inputs[0].shape(), d).unwrap())]
        })
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (_, _, h, w) = self.value(x).dims4().expect("resize input rank 4");
        if (h, w) == (oh, ow) {
            return x;
        }
        self.plane_map_op(x, bilinear_map(h, w, oh, ow), oh, ow)
    }

    /// Average over the adaptive bins that partition the input into `oh × ow`.
    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (_, _, h, w) = self.value(x).dims4().expect("pool input rank 4");
        if (h, w) == (oh, ow) {
            return x;
        }
        self.plane_map_op(x, adaptive_pool_map(h, w, oh, ow), oh, ow)
    }

    /// `[B, C, H, W] -> [B, C·r², H/r, W/r]`.
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return shape_err(format!("{h}x{w} is not divisible by factor {r}"));
        }
        let idx = unshuffle_index(b, c, h, w, r);
        Ok(self.gather(x, Rc::new(idx), &[b, c * r * r, h / r, w / r]))
    }

    /// `[B, C·r², H, W] -> [B, C, H·r, W·r]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (b, crr, h, w) = self.value(x).dims4()?;
        if r == 0 || crr % (r * r) != 0 {
            return shape_err(format!("{crr} channels not divisible by {r}^2"));
        }
        let c = crr / (r * r);
        let (oh, ow) = (h * r, w * r);
        // inverse permutation of unshuffle on the output shape
        let fwd = unshuffle_index(b, c, oh, ow, r);
        let mut idx = vec![0; fwd.len()];
        for (j, &i) in fwd.iter().enumerate() {
            idx[i] = j;
        }
        Ok(self.gather(x, Rc::new(idx), &[b, c, oh, ow]))
    }
}

/// Bilinear resize of a plain tensor (no graph).
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    if h == 0 || w == 0 || oh == 0 || ow == 0 {
        return shape_err("bilinear_resize needs non-empty dims");
    }
    let map = bilinear_map::<T>(h, w, oh, ow);
    Tensor::from_vec(&[b, c, oh, ow], apply_plane_map(&map, x.data()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_2x2_columns_interpolate() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[0., 1., 0., 1.]).unwrap();
        let y = bilinear_resize(&x, 4, 4).unwrap();
        for r in 0..4 {
            let row: Vec<f64> = (0..4).map(|c| y.at(&[0, 0, r, c])).collect();
            assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
        }
    }

    #[test]
    fn constant_maps_stay_constant() {
        let x = Tensor::<f64>::full(&[1, 2, 3, 5], 0.42);
        for (oh, ow) in [(7, 2), (1, 1), (12, 20)] {
            let y = bilinear_resize(&x, oh, ow).unwrap();
            assert!(y.data().iter().all(|&v| (v - 0.42).abs() < 1e-12));
        }
    }

    #[test]
    fn unshuffle_shuffle_is_bijection() {
        let t = Tensor::<f64>::from_vec(&[2, 3, 4, 6], (0..144).map(f64::from).collect()).unwrap();
        let mut g = Graph::new();
        let x = g.input(t.clone());
        let u = g.pixel_unshuffle(x, 2).unwrap();
        assert_eq!(g.shape(u), &[2, 12, 2, 3]);
        // channel 1 of the unshuffled map is sub-grid offset (0, 1)
        assert_eq!(g.value(u).at(&[0, 1, 0, 0]), 1.0);
        let s = g.pixel_shuffle(u, 2).unwrap();
        assert_eq!(g.value(s), &t);
        assert!(g.pixel_unshuffle(x, 5).is_err());
    }

    #[test]
    fn adaptive_pool_averages_blocks() {
        let t = Tensor::<f64>::from_vec(&[1, 1, 2, 4], vec![1., 3., 5., 7., 1., 3., 5., 7.]).unwrap();
        let mut g = Graph::new();
        let x = g.input(t);
        let p = g.adaptive_avg_pool(x, 1, 2);
        assert_eq!(g.value(p).data(), &[2.0, 6.0]);
    }
}

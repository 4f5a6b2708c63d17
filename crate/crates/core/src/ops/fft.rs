//! 2D discrete Fourier transforms over the trailing two axes.
//!
//! Convention: the forward transform is unnormalized, the inverse carries the
//! `1/(H·W)` factor. Complex results inside the graph are stored with real
//! parts in the first half of axis 1 and imaginary parts in the second half.

use rustfft::num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Complex spectrum of a `[B, C, H, W]` map.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum<T> {
    pub shape: [usize; 4],
    pub data: Vec<Complex<T>>,
}

impl<T: Scalar> ComplexSpectrum<T> {
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> Complex<T> {
        let [_, cs, h, w] = self.shape;
        self.data[((b * cs + c) * h + y) * w + x]
    }

    pub fn energy(&self) -> T {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }
}

/// In-place 2D FFT of `planes` contiguous `h × w` planes (unnormalized).
pub(crate) fn fft2_planes<T: Scalar>(data: &mut [Complex<T>], h: usize, w: usize, dir: FftDirection) {
    if data.is_empty() {
        return;
    }
    let mut planner = FftPlanner::<T>::new();
    let row = planner.plan_fft(w, dir);
    row.process(data);
    if h > 1 {
        let col = planner.plan_fft(h, dir);
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); h * w];
        for plane in data.chunks_mut(h * w) {
            for y in 0..h {
                for x in 0..w {
                    scratch[x * h + y] = plane[y * w + x];
                }
            }
            col.process(&mut scratch);
            for y in 0..h {
                for x in 0..w {
                    plane[y * w + x] = scratch[x * h + y];
                }
            }
        }
    }
}

fn to_complex<T: Scalar>(x: &[T]) -> Vec<Complex<T>> {
    x.iter().map(|&v| Complex::new(v, T::zero())).collect()
}

/// Forward transform of a real map.
pub fn fft2<T: Scalar>(x: &Tensor<T>) -> Result<ComplexSpectrum<T>> {
    let (b, c, h, w) = x.dims4()?;
    if h == 0 || w == 0 {
        return shape_err("fft2 needs spatial dims >= 1");
    }
    let mut data = to_complex(x.data());
    fft2_planes(&mut data, h, w, FftDirection::Forward);
    Ok(ComplexSpectrum {
        shape: [b, c, h, w],
        data,
    })
}

/// Normalized inverse transform; returns the real part.
pub fn ifft2<T: Scalar>(s: &ComplexSpectrum<T>) -> Tensor<T> {
    let [b, c, h, w] = s.shape;
    let mut data = s.data.clone();
    fft2_planes(&mut data, h, w, FftDirection::Inverse);
    let inv = T::one() / T::from_usize(h * w).unwrap();
    Tensor::from_vec(&[b, c, h, w], data.iter().map(|z| z.re * inv).collect()).unwrap()
}

/// Pack complex planes into the stacked real layout `[B, 2C, H, W']`.
fn stack<T: Scalar>(z: &[Complex<T>], b: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); b * 2 * c * plane];
    for bi in 0..b {
        for ci in 0..c {
            let src = &z[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
            let re = (bi * 2 * c + ci) * plane;
            let im = (bi * 2 * c + c + ci) * plane;
            for (k, v) in src.iter().enumerate() {
                out[re + k] = v.re;
                out[im + k] = v.im;
            }
        }
    }
    out
}

fn unstack<T: Scalar>(s: &[T], b: usize, c: usize, plane: usize) -> Vec<Complex<T>> {
    let mut out = vec![Complex::new(T::zero(), T::zero()); b * c * plane];
    for bi in 0..b {
        for ci in 0..c {
            let re = (bi * 2 * c + ci) * plane;
            let im = (bi * 2 * c + c + ci) * plane;
            for k in 0..plane {
                out[(bi * c + ci) * plane + k] = Complex::new(s[re + k], s[im + k]);
            }
        }
    }
    out
}

impl<T: Scalar> Graph<T> {
    /// Full spectrum of a real map, stacked as `[B, 2C, H, W]`.
    pub fn fft2_stacked(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4().expect("fft2 input rank 4");
        let spec = fft2(self.value(x)).expect("fft2");
        let y = Tensor::from_vec(&[b, 2 * c, h, w], stack(&spec.data, b, c, h * w)).unwrap();
        self.push_op(y, &[x], move |cx| {
            let mut z = unstack(cx.grad.data(), b, c, h * w);
            fft2_planes(&mut z, h, w, FftDirection::Inverse);
            let d = z.iter().map(|v| v.re).collect();
            vec![Some(Tensor::from_vec(&[b, c, h, w], d).unwrap())]
        })
    }

    /// Half spectrum (columns `0..=W/2`) of a real map, stacked as
    /// `[B, 2C, H, W/2+1]`.
    pub fn rfft2(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4().expect("rfft2 input rank 4");
        let wh = w / 2 + 1;
        let spec = fft2(self.value(x)).expect("fft2");
        let mut half = Vec::with_capacity(b * c * h * wh);
        for plane in spec.data.chunks(h * w) {
            for y in 0..h {
                half.extend_from_slice(&plane[y * w..y * w + wh]);
            }
        }
        let y = Tensor::from_vec(&[b, 2 * c, h, wh], stack(&half, b, c, h * wh)).unwrap();
        self.push_op(y, &[x], move |cx| {
            let gh = unstack(cx.grad.data(), b, c, h * wh);
            let mut full = vec![Complex::new(T::zero(), T::zero()); b * c * h * w];
            for (dst, src) in full.chunks_mut(h * w).zip(gh.chunks(h * wh)) {
                for y in 0..h {
                    dst[y * w..y * w + wh].copy_from_slice(&src[y * wh..(y + 1) * wh]);
                }
            }
            fft2_planes(&mut full, h, w, FftDirection::Inverse);
            let d = full.iter().map(|v| v.re).collect();
            vec![Some(Tensor::from_vec(&[b, c, h, w], d).unwrap())]
        })
    }

    /// Inverse of [`Graph::rfft2`]: rebuilds the full spectrum by Hermitian
    /// symmetry and returns the real `[B, C, H, w]` map.
    pub fn irfft2(&mut self, z: Var, w: usize) -> Var {
        let (b, c2, h, wh) = self.value(z).dims4().expect("irfft2 input rank 4");
        assert_eq!(wh, w / 2 + 1, "irfft2 width mismatch");
        let c = c2 / 2;
        let n = T::from_usize(h * w).unwrap();
        let half = unstack(self.value(z).data(), b, c, h * wh);
        let mut full = vec![Complex::new(T::zero(), T::zero()); b * c * h * w];
        for (dst, src) in full.chunks_mut(h * w).zip(half.chunks(h * wh)) {
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = if x < wh {
                        src[y * wh + x]
                    } else {
                        src[((h - y) % h) * wh + (w - x)].conj()
                    };
                }
            }
        }
        fft2_planes(&mut full, h, w, FftDirection::Inverse);
        let y = Tensor::from_vec(&[b, c, h, w], full.iter().map(|v| v.re / n).collect()).unwrap();
        self.push_op(y, &[z], move |cx| {
            let mut gf = to_complex(cx.grad.data());
            fft2_planes(&mut gf, h, w, FftDirection::Forward);
            let mut gh = vec![Complex::new(T::zero(), T::zero()); b * c * h * wh];
            for (dst, src) in gh.chunks_mut(h * wh).zip(gf.chunks(h * w)) {
                for y in 0..h {
                    for x in 0..w {
                        let g = src[y * w + x] / n;
                        if x < wh {
                            dst[y * wh + x] += g;
                        } else {
                            dst[((h - y) % h) * wh + (w - x)] += g.conj();
                        }
                    }
                }
            }
            vec![Some(Tensor::from_vec(&[b, c2, h, wh], stack(&gh, b, c, h * wh)).unwrap())]
        })
    }
}

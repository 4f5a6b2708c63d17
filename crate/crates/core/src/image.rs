use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// RGB raster in `[0, 1]`, stored planar as `[3, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    t: Tensor<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        Ok(Self {
            t: Tensor::from_vec(&[3, h, w], data)?,
        })
    }

    pub fn constant(h: usize, w: usize, v: T) -> Self {
        Self {
            t: Tensor::full(&[3, h, w], v),
        }
    }

    /// Accepts `[3, H, W]` or `[1, 3, H, W]`.
    pub fn from_tensor(t: Tensor<T>) -> Result<Self> {
        let s = t.shape().to_vec();
        let t = match s.as_slice() {
            [3, _, _] => t,
            [1, 3, h, w] => t.reshape(&[3, *h, *w])?,
            _ => return shape_err(format!("expected an RGB image, got shape {s:?}")),
        };
        Ok(Self { t })
    }

    pub fn height(&self) -> usize {
        self.t.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.t.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.t
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.t
    }

    pub fn data(&self) -> &[T] {
        self.t.data()
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        self.t.data_mut()
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.t.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let (h, w) = self.dims();
        self.t.data_mut()[(c * h + y) * w + x] = v;
    }

    pub fn clamped(&self) -> Self {
        Self {
            t: self.t.map(|v| v.max(T::zero()).min(T::one())),
        }
    }

    /// Rec. 601 luma plane.
    pub fn luminance(&self) -> Vec<T> {
        let n = self.height() * self.width();
        let d = self.t.data();
        let (wr, wg, wb) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
        (0..n)
            .map(|i| wr * d[i] + wg * d[n + i] + wb * d[2 * n + i])
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image { t: self.t.cast() }
    }

    /// Stack equally sized images into `[B, 3, H, W]`.
    pub fn to_batch(images: &[Self]) -> Result<Tensor<T>> {
        if images.is_empty() {
            return shape_err("cannot batch zero images");
        }
        let (h, w) = images[0].dims();
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for im in images {
            if im.dims() != (h, w) {
                return shape_err(format!("batch mixes {h}x{w} and {:?} images", im.dims()));
            }
            data.extend_from_slice(im.data());
        }
        Tensor::from_vec(&[images.len(), 3, h, w], data)
    }

    /// Image `i` of a `[B, 3, H, W]` batch.
    pub fn from_batch(t: &Tensor<T>, i: usize) -> Result<Self> {
        let (b, c, h, w) = t.dims4()?;
        if c != 3 || i >= b {
            return shape_err(format!("no RGB image {i} in batch of shape {:?}", t.shape()));
        }
        let n = 3 * h * w;
        Self::new(h, w, t.data()[i * n..(i + 1) * n].to_vec())
    }
}

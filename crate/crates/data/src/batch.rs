//! Cropped, optionally augmented mini-batches.

use mphm_core::image::Image;
use mphm_core::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{PairedDataset, PairedSample};
use crate::error::{DataError, Result};

#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// `[B, 3, crop, crop]`
    pub rain: Tensor<T>,
    pub clean: Tensor<T>,
    pub ids: Vec<String>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn rain_images(&self) -> Result<Vec<Image<T>>> {
        Ok((0..self.len())
            .map(|i| Image::from_batch(&self.rain, i))
            .collect::<mphm_core::Result<Vec<_>>>()?)
    }
}

/// `crop × crop` window at `(y0, x0)`, optionally mirrored left-right.
pub fn crop_image<T: Scalar>(img: &Image<T>, y0: usize, x0: usize, crop: usize, flip: bool) -> Image<T> {
    let mut out = Image::constant(crop, crop, T::zero());
    for c in 0..3 {
        for y in 0..crop {
            for x in 0..crop {
                let sx = if flip { x0 + crop - 1 - x } else { x0 + x };
                out.set(c, y, x, img.get(c, y0 + y, sx));
            }
        }
    }
    out
}

/// One pass over a dataset. Training mode shuffles, random-crops and flips
/// (the same transform on both images of a pair); eval mode keeps order and
/// center-crops. `crop = 0` keeps full images, which then must share dims.
pub struct BatchIter<'d, T> {
    ds: &'d PairedDataset<T>,
    order: Vec<usize>,
    pos: usize,
    crop: usize,
    batch: usize,
    augment: bool,
    rng: ChaCha8Rng,
}

pub fn batch_iter<T: Scalar>(
    ds: &PairedDataset<T>,
    crop: usize,
    batch: usize,
    augment: bool,
    seed: u64,
) -> Result<BatchIter<'_, T>> {
    if batch == 0 {
        return Err(DataError::Config("batch size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if augment {
        order.shuffle(&mut rng);
    }
    Ok(BatchIter {
        ds,
        order,
        pos: 0,
        crop,
        batch,
        augment,
        rng,
    })
}

impl<T: Scalar> BatchIter<'_, T> {
    fn transform(&mut self, s: PairedSample<T>) -> Result<PairedSample<T>> {
        let (h, w) = s.rainy.dims();
        if self.crop == 0 {
            return Ok(s);
        }
        if self.crop > h.min(w) {
            return Err(DataError::Config(format!(
                "crop {} exceeds image {} of size {h}×{w}",
                self.crop, s.id
            )));
        }
        let (y0, x0, flip) = if self.augment {
            (
                self.rng.gen_range(0..=h - self.crop),
                self.rng.gen_range(0..=w - self.crop),
                self.rng.gen_bool(0.5),
            )
        } else {
            ((h - self.crop) / 2, (w - self.crop) / 2, false)
        };
        Ok(PairedSample {
            rainy: crop_image(&s.rainy, y0, x0, self.crop, flip),
            clean: crop_image(&s.clean, y0, x0, self.crop, flip),
            id: s.id,
        })
    }

    fn next_batch(&mut self) -> Result<Batch<T>> {
        let end = (self.pos + self.batch).min(self.order.len());
        let idx: Vec<usize> = self.order[self.pos..end].to_vec();
        self.pos = end;
        let mut rains = Vec::with_capacity(idx.len());
        let mut cleans = Vec::with_capacity(idx.len());
        let mut ids = Vec::with_capacity(idx.len());
        for i in idx {
            let s = self.transform(self.ds.get(i)?)?;
            rains.push(s.rainy);
            cleans.push(s.clean);
            ids.push(s.id);
        }
        if rains.iter().any(|r| r.dims() != rains[0].dims()) {
            return Err(DataError::Config(
                "images of one batch differ in size; set a crop or use batch 1".into(),
            ));
        }
        Ok(Batch {
            rain: Image::to_batch(&rains)?,
            clean: Image::to_batch(&cleans)?,
            ids,
        })
    }
}

impl<T: Scalar> Iterator for BatchIter<'_, T> {
    type Item = Result<Batch<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let b = self.next_batch();
        if b.is_err() {
            self.pos = self.order.len();
        }
        Some(b)
    }
}

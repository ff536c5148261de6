use std::path::Path;

use super::synthetic::synthetic_images;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{Real, Rng, Tensor};

/// In-memory RGB training images.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Vec<Image>,
}

impl Dataset {
    pub fn new(images: Vec<Image>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        let images = images.into_iter().map(Image::into_rgb).collect();
        Ok(Dataset { images })
    }

    /// Every `.ppm`/`.pgm` file of `dir`, in file-name order.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir.as_ref())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("ppm") || e.eq_ignore_ascii_case("pgm"))
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::invalid(format!("no PPM/PGM images in {}", dir.as_ref().display())));
        }
        Self::new(paths.iter().map(Image::read).collect::<Result<_>>()?)
    }

    pub fn synthetic(count: usize, size: usize, seed: u64) -> Result<Self> {
        Self::new(synthetic_images(count, size, seed))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    /// All images as one batch; they must share a size.
    pub fn stack<S: Real>(&self) -> Result<Tensor<S>> {
        stack(&self.images)
    }
}

pub fn stack<S: Real>(images: &[Image]) -> Result<Tensor<S>> {
    let first = images.first().ok_or_else(|| Error::invalid("no images to stack"))?;
    let (w, h, c) = (first.width, first.height, first.channels);
    let mut data = Vec::with_capacity(images.len() * w * h * c);
    for img in images {
        if (img.width, img.height, img.channels) != (w, h, c) {
            return Err(Error::shape(
                "stack",
                format!("{}x{} image among {w}x{h}", img.width, img.height),
            ));
        }
        data.extend(img.to_tensor::<S>().into_data());
    }
    Tensor::new(&[images.len(), c, h, w], data)
}

/// Resumable position of a [`BatchIter`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IterState {
    pub epoch: u64,
    pub cursor: usize,
    pub crop_counter: u64,
}

/// Endless stream of random crops: each epoch visits every image once in a
/// seed-determined order, with a uniformly random crop position per visit.
#[derive(Clone, Debug)]
pub struct BatchIter<'a> {
    data: &'a Dataset,
    crop: usize,
    batch: usize,
    seed: u64,
    order: Vec<usize>,
    state: IterState,
}

impl<'a> BatchIter<'a> {
    pub fn new(data: &'a Dataset, crop: usize, batch: usize, seed: u64) -> Result<Self> {
        Self::resume(data, crop, batch, seed, IterState::default())
    }

    pub fn resume(data: &'a Dataset, crop: usize, batch: usize, seed: u64, state: IterState) -> Result<Self> {
        if crop == 0 || batch == 0 {
            return Err(Error::invalid("crop and batch must be positive"));
        }
        let mut it = BatchIter {
            data,
            crop,
            batch,
            seed,
            order: Vec::new(),
            state,
        };
        it.order = it.epoch_order(state.epoch);
        Ok(it)
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        Rng::new(self.seed).fork(epoch).shuffle(&mut order);
        order
    }

    pub fn state(&self) -> IterState {
        self.state
    }

    /// Next crop with its top-left position in the (padded) source image.
    pub fn next_crop(&mut self) -> (Image, usize, usize) {
        if self.state.cursor == self.order.len() {
            self.state.epoch += 1;
            self.state.cursor = 0;
            self.order = self.epoch_order(self.state.epoch);
        }
        let img = &self.data.images[self.order[self.state.cursor]];
        self.state.cursor += 1;
        let c = self.crop;
        let padded;
        let src = if img.width < c || img.height < c {
            padded = img.reflect_pad(img.width.max(c), img.height.max(c)).expect("growing pad");
            &padded
        } else {
            img
        };
        let mut rng = Rng::with_counter(Rng::new(self.seed).fork(u64::MAX).seed(), self.state.crop_counter);
        let x0 = rng.below(src.width - c + 1);
        let y0 = rng.below(src.height - c + 1);
        self.state.crop_counter = rng.counter();
        (src.crop(x0, y0, c, c).expect("in bounds"), x0, y0)
    }

    pub fn next_batch<S: Real>(&mut self) -> Tensor<S> {
        let crops: Vec<Image> = (0..self.batch).map(|_| self.next_crop().0).collect();
        stack(&crops).expect("equal crop sizes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_size_crop_is_identity() {
        let ds = Dataset::synthetic(1, 64, 3).unwrap();
        let mut it = BatchIter::new(&ds, 64, 1, 0).unwrap();
        for _ in 0..5 {
            let (c, x, y) = it.next_crop();
            assert_eq!((x, y), (0, 0));
            assert_eq!(&c, &ds.images()[0]);
        }
    }

    #[test]
    fn seeded_streams_repeat_and_resume() {
        let ds = Dataset::synthetic(5, 40, 3).unwrap();
        let mut a = BatchIter::new(&ds, 16, 3, 9).unwrap();
        let mut b = BatchIter::new(&ds, 16, 3, 9).unwrap();
        for _ in 0..4 {
            assert_eq!(a.next_batch::<f32>(), b.next_batch::<f32>());
        }
        let mut c = BatchIter::resume(&ds, 16, 3, 9, a.state()).unwrap();
        assert_eq!(a.next_batch::<f32>(), c.next_batch::<f32>());
    }

    #[test]
    fn each_epoch_visits_every_image() {
        let ds = Dataset::synthetic(6, 8, 3).unwrap();
        let mut it = BatchIter::new(&ds, 8, 1, 4).unwrap();
        for _ in 0..3 {
            let mut seen: Vec<Image> = (0..6).map(|_| it.next_crop().0).collect();
            seen.sort_by(|a, b| a.data.cmp(&b.data));
            let mut all = ds.images().to_vec();
            all.sort_by(|a, b| a.data.cmp(&b.data));
            assert_eq!(seen, all);
        }
    }

    #[test]
    fn small_images_are_padded() {
        let ds = Dataset::new(vec![Image::filled(5, 3, 1, 9)]).unwrap();
        let mut it = BatchIter::new(&ds, 8, 2, 0).unwrap();
        let t = it.next_batch::<f32>();
        assert_eq!(t.shape(), &[2, 3, 8, 8]);
    }
}

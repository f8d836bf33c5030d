use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::compute::Tensor;

const PAD: usize = 4;

/// Mirror an image (`C×H×W` slice) left to right in place.
pub fn flip_horizontal(img: &mut [f32], h: usize, w: usize) {
    debug_assert_eq!(img.len() % (h * w), 0);
    for row in img.chunks_mut(w) {
        row.reverse();
    }
}

/// Seeded mini-batch iterator over a dataset.
pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    augment: bool,
    rng: ChaCha8Rng,
}

/// Mini-batches of `batch_size` (the last one may be shorter). With a
/// `shuffle_seed` the order is a permutation drawn from `(seed, epoch)`;
/// augmentation (4-pixel zero pad, random crop, horizontal flip with
/// probability ½) is drawn from the same stream.
pub fn batches(dataset: &Dataset, batch_size: usize, shuffle_seed: Option<u64>, epoch: u64, augment: bool) -> Batches<'_> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let seed = shuffle_seed.unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if shuffle_seed.is_some() {
        order.shuffle(&mut rng);
    }
    Batches {
        data: dataset,
        order,
        batch_size,
        pos: 0,
        augment,
        rng,
    }
}

impl Batches<'_> {
    fn augmented(&mut self, src: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
        let dy = self.rng.random_range(0..=2 * PAD);
        let dx = self.rng.random_range(0..=2 * PAD);
        let flip = self.rng.random_bool(0.5);
        let mut out = vec![0.0f32; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                // padded coordinate (y + dy) maps to source row y + dy − PAD
                let sy = (y + dy) as isize - PAD as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let sx = (x + dx) as isize - PAD as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    out[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
        if flip {
            flip_horizontal(&mut out, h, w);
        }
        out
    }
}

impl Iterator for Batches<'_> {
    type Item = (Tensor<f32>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx: Vec<usize> = self.order[self.pos..end].to_vec();
        self.pos = end;
        let (c, h, w) = self.data.image_dims();
        let mut pixels = Vec::with_capacity(idx.len() * c * h * w);
        for &i in &idx {
            let src = self.data.image(i);
            if self.augment {
                let img = self.augmented(src, c, h, w);
                pixels.extend_from_slice(&img);
            } else {
                pixels.extend_from_slice(src);
            }
        }
        let labels = idx.iter().map(|&i| self.data.labels[i]).collect();
        let images = Tensor::new(&[idx.len(), c, h, w], pixels).expect("batch shape");
        Some((images, labels))
    }
}

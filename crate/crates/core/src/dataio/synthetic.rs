//! Mask-to-image pairs. The mask is a one-hot segmentation: plane 0 is
//! background and planes 1 and 2 hold the two shape classes, later shapes
//! painted over earlier ones. Each class renders in a fixed color with a
//! little per-sample shading.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// RGB per class; index 0 is the background.
pub const CLASS_COLORS: [[f32; 3]; 3] = [[-0.7, -0.7, -0.6], [0.8, -0.4, -0.6], [-0.5, 0.7, -0.3]];
pub const BACKGROUND: usize = 0;
const SHADING: f32 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    /// 1×3×H×W one-hot class planes.
    pub mask: Tensor,
    /// 1×3×H×W RGB in [−1, 1].
    pub image: Tensor,
}

/// Seed for the held-out set that accompanies a training set drawn with `seed`.
pub fn heldout_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

pub fn gen_synthetic_pairs(seed: u64, n: usize, size: usize) -> Vec<PairedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| one_sample(&mut rng, size)).collect()
}

fn one_sample(rng: &mut ChaCha8Rng, size: usize) -> PairedSample {
    let hw = size * size;
    let mut label = vec![BACKGROUND; hw];
    let shapes = rng.random_range(1..=3);
    for _ in 0..shapes {
        let class = rng.random_range(1..3usize);
        let ellipse = rng.random_bool(0.5);
        let cx = rng.random_range(0.15..0.85f32);
        let cy = rng.random_range(0.15..0.85f32);
        let rx = rng.random_range(0.1..0.35f32);
        let ry = rng.random_range(0.1..0.35f32);
        for y in 0..size {
            let v = (y as f32 + 0.5) / size as f32;
            for x in 0..size {
                let u = (x as f32 + 0.5) / size as f32;
                let (dx, dy) = ((u - cx) / rx, (v - cy) / ry);
                let inside = if ellipse { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
                if inside {
                    label[y * size + x] = class;
                }
            }
        }
    }
    let gx = rng.random_range(-1.0..1.0f32);
    let gy = rng.random_range(-1.0..1.0f32);
    let mut mask = vec![0.0f32; 3 * hw];
    let mut image = vec![0.0f32; 3 * hw];
    for y in 0..size {
        let v = 2.0 * (y as f32 + 0.5) / size as f32 - 1.0;
        for x in 0..size {
            let u = 2.0 * (x as f32 + 0.5) / size as f32 - 1.0;
            let p = y * size + x;
            mask[label[p] * hw + p] = 1.0;
            let color = CLASS_COLORS[label[p]];
            let shade = SHADING * 0.5 * (gx * u + gy * v);
            for ch in 0..3 {
                image[ch * hw + p] = (color[ch] + shade).clamp(-1.0, 1.0);
            }
        }
    }
    PairedSample {
        mask: Tensor::new(vec![1, 3, size, size], mask).expect("consistent shape"),
        image: Tensor::new(vec![1, 3, size, size], image).expect("consistent shape"),
    }
}

/// Concatenates the chosen samples into (masks, images) batches.
pub fn stack_batch(samples: &[PairedSample], indices: &[usize]) -> Result<(Tensor, Tensor)> {
    if indices.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let masks: Vec<&Tensor> = indices.iter().map(|&i| &samples[i].mask).collect();
    let images: Vec<&Tensor> = indices.iter().map(|&i| &samples[i].image).collect();
    Ok((Tensor::cat_batch(&masks)?, Tensor::cat_batch(&images)?))
}

use rand::Rng;

use crate::rng::ChaCha8Rng;
use crate::tensor::Tensor;

/// Per-image augmentation draw: crop offset into the zero-padded image and
/// whether to mirror horizontally.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

pub fn draw_augmentation(rng: &mut ChaCha8Rng, pad: usize, flip_probability: f64) -> Augmentation {
    Augmentation {
        dy: rng.random_range(0..=2 * pad),
        dx: rng.random_range(0..=2 * pad),
        flip: flip_probability > 0.0 && rng.random::<f64>() < flip_probability,
    }
}

/// Zero-pads `image` (`[C, H, W]` data) by `pad`, crops back to `H x W` at
/// the drawn offset, then optionally mirrors.
pub fn apply_augmentation(
    image: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    pad: usize,
    aug: Augmentation,
) -> Vec<f64> {
    let mut out = vec![0.0; channels * h * w];
    for c in 0..channels {
        for y in 0..h {
            let sy = (y + aug.dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + aug.dx) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let tx = if aug.flip { w - 1 - x } else { x };
                out[(c * h + y) * w + tx] = image[(c * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// Augments every image of a `[N, C, H, W]` batch.
pub fn augment(images: &Tensor, pad: usize, flip_probability: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let s = images.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut data = Vec::with_capacity(images.numel());
    for i in 0..s[0] {
        let aug = draw_augmentation(rng, pad, flip_probability);
        data.extend(apply_augmentation(images.row(i), c, h, w, pad, aug));
    }
    Tensor::new(s, data).expect("shape preserved")
}

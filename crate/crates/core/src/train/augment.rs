use rand::Rng;

use crate::raster::ImageTensor;

/// Side scale of a crop covering 87.5% of the image area.
const CROP_SIDE: f64 = 0.935_414_346_693_485_4; // sqrt(0.875)

/// Random flip, quarter-turn rotation and crop-resize, each applied with
/// probability ½. The output keeps the input shape.
pub fn augment<R: Rng + ?Sized>(image: &ImageTensor, rng: &mut R) -> ImageTensor {
    let (h, w) = (image.height, image.width);
    let mut out = image.clone();
    if rng.random_bool(0.5) {
        out = out.flip_horizontal();
    }
    if rng.random_bool(0.5) {
        let turns = rng.random_range(1..=3u32);
        out = out.rotate_quarter(turns);
        if out.height != h || out.width != w {
            out = out.resize(h, w);
        }
    }
    if rng.random_bool(0.5) {
        let ch = h as f64 * CROP_SIDE;
        let cw = w as f64 * CROP_SIDE;
        let top = rng.random_range(0.0..=(h as f64 - ch));
        let left = rng.random_range(0.0..=(w as f64 - cw));
        out = out.resample_window(top, left, ch, cw, h, w);
    }
    out
}

/// [`augment`] when enabled, the identity otherwise.
pub fn maybe_augment<R: Rng + ?Sized>(image: &ImageTensor, rng: &mut R, enabled: bool) -> ImageTensor {
    if enabled {
        augment(image, rng)
    } else {
        image.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(h: usize, w: usize) -> ImageTensor {
        let mut t = ImageTensor::zeros(h, w);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = ((i * 37) % 101) as f64 / 100.0;
        }
        t
    }

    #[test]
    fn disabled_is_identity() {
        let img = image(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(maybe_augment(&img, &mut rng, false), img);
    }

    #[test]
    fn deterministic_shape_preserving_and_bounded() {
        for (h, w) in [(8, 8), (6, 10)] {
            let img = image(h, w);
            for seed in 0..20 {
                let a = augment(&img, &mut ChaCha8Rng::seed_from_u64(seed));
                let b = augment(&img, &mut ChaCha8Rng::seed_from_u64(seed));
                assert_eq!(a, b);
                assert_eq!((a.height, a.width), (h, w));
                assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}

//! Image transform: resize to 128, crop to 112, scale to [0, 1].
//!
//! Train mode crops at a uniformly random offset in {0..16}^2; eval mode
//! center-crops at (8, 8). Given the same (image, mode, generator state) the
//! output is identical, so per-image generators derived from
//! (seed, epoch, image index) make the pipeline order-independent.

use image::DynamicImage;
use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const RESIZE_SIDE: usize = 128;
pub const CROP_SIDE: usize = 112;

/// `[3, 112, 112]` image in [0, 1].
pub type ImageTensor = Array3<f32>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformMode {
    Train,
    Eval,
}

/// Decode target: RGB bytes at RESIZE_SIDE x RESIZE_SIDE.
pub(crate) fn resize_to_grid(img: &DynamicImage) -> Vec<u8> {
    let rgb = img.to_rgb8();
    let resized = if rgb.width() as usize == RESIZE_SIDE && rgb.height() as usize == RESIZE_SIDE {
        rgb
    } else {
        image::imageops::resize(
            &rgb,
            RESIZE_SIDE as u32,
            RESIZE_SIDE as u32,
            image::imageops::FilterType::Triangle,
        )
    };
    resized.into_raw()
}

/// Crop offsets for this mode; the random draw consumes exactly two values.
pub(crate) fn crop_offsets(mode: TransformMode, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let max = RESIZE_SIDE - CROP_SIDE; // inclusive upper bound 16
    match mode {
        TransformMode::Train => (rng.random_range(0..=max), rng.random_range(0..=max)),
        TransformMode::Eval => (max / 2, max / 2),
    }
}

pub(crate) fn crop_to_tensor(
    rgb128: &[u8],
    mode: TransformMode,
    rng: &mut ChaCha8Rng,
) -> ImageTensor {
    let (oy, ox) = crop_offsets(mode, rng);
    let mut out = Array3::<f32>::zeros((3, CROP_SIDE, CROP_SIDE));
    for y in 0..CROP_SIDE {
        for x in 0..CROP_SIDE {
            let src = ((y + oy) * RESIZE_SIDE + (x + ox)) * 3;
            for c in 0..3 {
                out[[c, y, x]] = rgb128[src + c] as f32 / 255.0;
            }
        }
    }
    out
}

/// Full transform from a decoded image.
pub fn transform_image(
    img: &DynamicImage,
    mode: TransformMode,
    rng: &mut ChaCha8Rng,
) -> ImageTensor {
    let rgb = resize_to_grid(img);
    crop_to_tensor(&rgb, mode, rng)
}

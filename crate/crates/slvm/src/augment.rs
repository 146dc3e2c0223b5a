//! Geometric augmentation and label resizing.
//!
//! A [`Transform`] is a flip (horizontal, vertical, or none) followed by a
//! rotation in 90-degree steps, applied identically to an image and its
//! mask so the geometric correspondence survives. Angles are restricted to
//! quarter turns so masks stay exact.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::rng::rng_from_seed;
use crate::tensor::{BinaryMask, Tensor};

/// Output side length of [`augment`].
pub const AUGMENT_SIZE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flip {
    None,
    Horizontal,
    Vertical,
}

/// Flip then rotate by `quarter_turns` x 90 degrees clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transform {
    pub flip: Flip,
    pub quarter_turns: u8,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        flip: Flip::None,
        quarter_turns: 0,
    };

    pub fn is_identity(&self) -> bool {
        self.flip == Flip::None && self.quarter_turns % 4 == 0
    }

    /// The transform undoing this one: rotate back, then the same flip.
    pub fn inverse(&self) -> InverseTransform {
        InverseTransform(*self)
    }
}

/// See [`Transform::inverse`].
#[derive(Debug, Clone, Copy)]
pub struct InverseTransform(Transform);

/// Draw a transform: flip uniform over {none, horizontal, vertical},
/// rotation uniform over {0, 90, 180, 270} degrees.
pub fn sample_transform(seed: u64) -> Transform {
    let mut r = rng_from_seed(seed);
    let flip = match r.gen_range(0u8..3) {
        0 => Flip::None,
        1 => Flip::Horizontal,
        _ => Flip::Vertical,
    };
    Transform {
        flip,
        quarter_turns: r.gen_range(0u8..4),
    }
}

fn rot90_tensor(t: &Tensor) -> Tensor {
    let (h, w, c) = t.shape();
    let mut out = Tensor::zeros(w, h, c);
    for y in 0..w {
        for x in 0..h {
            for ch in 0..c {
                // clockwise: output (y, x) takes input (h-1-x, y)
                *out.at_mut(y, x, ch) = t.at(h - 1 - x, y, ch);
            }
        }
    }
    out
}

fn flip_tensor(t: &Tensor, flip: Flip) -> Tensor {
    let (h, w, c) = t.shape();
    match flip {
        Flip::None => t.clone(),
        Flip::Horizontal => {
            let mut out = Tensor::zeros(h, w, c);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        *out.at_mut(y, x, ch) = t.at(y, w - 1 - x, ch);
                    }
                }
            }
            out
        }
        Flip::Vertical => {
            let mut out = Tensor::zeros(h, w, c);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        *out.at_mut(y, x, ch) = t.at(h - 1 - y, x, ch);
                    }
                }
            }
            out
        }
    }
}

fn apply_tensor(t: &Tensor, tf: Transform) -> Tensor {
    let mut out = flip_tensor(t, tf.flip);
    for _ in 0..tf.quarter_turns % 4 {
        out = rot90_tensor(&out);
    }
    out
}

fn mask_as_tensor_op(m: &BinaryMask, f: impl Fn(&Tensor) -> Tensor) -> BinaryMask {
    let t = f(&m.to_tensor());
    let (h, w, _) = t.shape();
    let data = t.data().iter().map(|&v| (v >= 0.5) as u8).collect();
    BinaryMask::from_vec(h, w, data).expect("geometric op preserves mask validity")
}

/// Apply `tf` to an image/mask pair without resizing.
pub fn apply_transform(image: &Tensor, mask: &BinaryMask, tf: Transform) -> (Tensor, BinaryMask) {
    (
        apply_tensor(image, tf),
        mask_as_tensor_op(mask, |t| apply_tensor(t, tf)),
    )
}

/// Undo a transform applied by [`apply_transform`].
pub fn apply_inverse(image: &Tensor, mask: &BinaryMask, inv: InverseTransform) -> (Tensor, BinaryMask) {
    let back_rot = Transform {
        flip: Flip::None,
        quarter_turns: (4 - inv.0.quarter_turns % 4) % 4,
    };
    let flip_only = Transform {
        flip: inv.0.flip,
        quarter_turns: 0,
    };
    let (img, msk) = apply_transform(image, mask, back_rot);
    apply_transform(&img, &msk, flip_only)
}

/// Seeded flip/rotation of the pair, then resize to `target x target`
/// (bilinear for the image, nearest for the mask) if the size differs.
pub fn augment_to(
    image: &Tensor,
    mask: &BinaryMask,
    seed: u64,
    target: usize,
) -> Result<(Tensor, BinaryMask)> {
    let (h, w, _) = image.shape();
    if (h, w) != mask.shape() {
        return Err(Error::Shape(format!(
            "image {}x{} and mask {:?} disagree",
            h,
            w,
            mask.shape()
        )));
    }
    let tf = sample_transform(seed);
    let (img, msk) = apply_transform(image, mask, tf);
    Ok(resize_pair(&img, &msk, target, target))
}

/// Resize an image/mask pair: bilinear for the image, nearest for the mask.
pub fn resize_pair(image: &Tensor, mask: &BinaryMask, h: usize, w: usize) -> (Tensor, BinaryMask) {
    let img = if image.height() == h && image.width() == w {
        image.clone()
    } else {
        nn::bilinear_resize(image, h, w)
    };
    let msk = if mask.shape() == (h, w) {
        mask.clone()
    } else {
        resize_label(mask, h, w)
    };
    (img, msk)
}

/// Standard augmentation: transform, then resize to 256 x 256.
pub fn augment(image: &Tensor, mask: &BinaryMask, seed: u64) -> Result<(Tensor, BinaryMask)> {
    augment_to(image, mask, seed, AUGMENT_SIZE)
}

/// Nearest-neighbor resize of a binary mask using the index map
/// `src = floor(dst * in / out)`. Output stays `{0,1}`-valued.
pub fn resize_label(mask: &BinaryMask, h: usize, w: usize) -> BinaryMask {
    assert!(h >= 1 && w >= 1);
    let (ih, iw) = mask.shape();
    let mut out = BinaryMask::zeros(h, w);
    for y in 0..h {
        let yi = y * ih / h;
        for x in 0..w {
            out.set(y, x, mask.get(yi, x * iw / w));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn checkerboard(h: usize, w: usize) -> BinaryMask {
        let mut m = BinaryMask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                m.set(y, x, ((y + x) % 2) as u8);
            }
        }
        m
    }

    fn random_pair(h: usize, w: usize, seed: u64) -> (Tensor, BinaryMask) {
        let mut r = rng_from_seed(seed);
        let img = Tensor::from_vec(h, w, 3, (0..h * w * 3).map(|_| r.gen::<f64>()).collect())
            .unwrap();
        let mut m = BinaryMask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                m.set(y, x, r.gen_bool(0.4) as u8);
            }
        }
        (img, m)
    }

    #[test]
    fn identity_transform_is_a_noop() {
        let (img, m) = random_pair(8, 8, 1);
        let (img2, m2) = apply_transform(&img, &m, Transform::IDENTITY);
        assert_eq!(img, img2);
        assert_eq!(m, m2);
    }

    #[test]
    fn some_seed_draws_the_identity() {
        let hit = (0..200u64).find(|&s| sample_transform(s).is_identity());
        let seed = hit.expect("identity transform reachable");
        let (img, m) = random_pair(6, 6, 2);
        let (img2, m2) = augment_to(&img, &m, seed, 6).unwrap();
        assert_eq!(img, img2);
        assert_eq!(m, m2);
    }

    #[test]
    fn horizontal_flip_is_an_involution() {
        let (img, m) = random_pair(5, 9, 3);
        let tf = Transform {
            flip: Flip::Horizontal,
            quarter_turns: 0,
        };
        let (i1, m1) = apply_transform(&img, &m, tf);
        let (i2, m2) = apply_transform(&i1, &m1, tf);
        assert_eq!(img, i2);
        assert_eq!(m, m2);
    }

    #[test]
    fn four_quarter_turns_are_the_identity() {
        let (img, m) = random_pair(7, 7, 4);
        let tf = Transform {
            flip: Flip::None,
            quarter_turns: 1,
        };
        let (mut i, mut mm) = (img.clone(), m.clone());
        for _ in 0..4 {
            let (ni, nm) = apply_transform(&i, &mm, tf);
            i = ni;
            mm = nm;
        }
        assert_eq!(img, i);
        assert_eq!(m, mm);
    }

    #[test]
    fn resize_label_checkerboard_by_hand() {
        // 4x4 checkerboard to 2x2: src index floor(i*4/2) = 2i, so every
        // sample lands on an even-parity cell = 0
        let m = checkerboard(4, 4);
        let d = resize_label(&m, 2, 2);
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(d.get(y, x), 0);
            }
        }
    }

    #[test]
    fn resize_label_identity_and_all_ones() {
        let m = checkerboard(8, 8);
        assert_eq!(resize_label(&m, 8, 8), m);
        let ones = BinaryMask::from_vec(4, 4, vec![1; 16]).unwrap();
        let d = resize_label(&ones, 2, 2);
        assert_eq!(d.foreground(), 4);
    }

    proptest! {
        #[test]
        fn transform_preserves_foreground_count(seed in 0u64..500) {
            let (img, m) = random_pair(9, 9, seed);
            let tf = sample_transform(seed);
            let (_, m2) = apply_transform(&img, &m, tf);
            prop_assert_eq!(m.foreground(), m2.foreground());
        }

        #[test]
        fn inverse_recovers_originals(seed in 0u64..500) {
            let (img, m) = random_pair(10, 10, seed.wrapping_add(77));
            let tf = sample_transform(seed);
            let (i1, m1) = apply_transform(&img, &m, tf);
            let (i2, m2) = apply_inverse(&i1, &m1, tf.inverse());
            prop_assert_eq!(img, i2);
            prop_assert_eq!(m, m2);
        }
    }
}

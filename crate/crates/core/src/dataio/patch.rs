//! Patch extraction and per-patch target normalization.
//!
//! A patch vector is flattened in (row within patch, column within patch,
//! channel) order, and patches are listed in row-major grid order.

use crate::dataio::image::Image;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Target-normalization epsilon.
pub const TARGET_EPS: f64 = 1e-6;

/// Splits a frame into `[L, P*P*3]` non-overlapping patches.
pub fn patchify(frame: &Image, patch: usize) -> Result<Tensor> {
    if patch == 0 || frame.width % patch != 0 || frame.height % patch != 0 {
        return Err(Error::shape(
            "patchify",
            format!("{}x{} frame is not divisible by patch size {patch}", frame.width, frame.height),
        ));
    }
    let (gh, gw) = (frame.height / patch, frame.width / patch);
    let dim = patch * patch * 3;
    let mut data = Vec::with_capacity(gh * gw * dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for r in 0..patch {
                let y = gy * patch + r;
                let start = (y * frame.width + gx * patch) * 3;
                data.extend_from_slice(&frame.data[start..start + patch * 3]);
            }
        }
    }
    Tensor::new(vec![gh * gw, dim], data)
}

/// Inverse of [`patchify`] for a `width x height` frame.
pub fn unpatchify(patches: &Tensor, patch: usize, width: usize, height: usize) -> Result<Image> {
    if patch == 0 || width % patch != 0 || height % patch != 0 {
        return Err(Error::shape("unpatchify", format!("{width}x{height} not divisible by {patch}")));
    }
    let (gh, gw) = (height / patch, width / patch);
    let dim = patch * patch * 3;
    if patches.shape() != [gh * gw, dim] {
        return Err(Error::shape(
            "unpatchify",
            format!("expected [{}, {dim}], got {:?}", gh * gw, patches.shape()),
        ));
    }
    let mut img = Image::filled(width, height, [0.0; 3]);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = patches.row(gy * gw + gx);
            for r in 0..patch {
                let y = gy * patch + r;
                let start = (y * width + gx * patch) * 3;
                img.data[start..start + patch * 3].copy_from_slice(&row[r * patch * 3..(r + 1) * patch * 3]);
            }
        }
    }
    Ok(img)
}

/// `(x - mean) / sqrt(var + eps)` over all values of one patch.
pub fn normalize_target(patch: &[f64], eps: f64) -> Vec<f64> {
    if patch.is_empty() {
        return Vec::new();
    }
    let n = patch.len() as f64;
    let mean = patch.iter().sum::<f64>() / n;
    let var = patch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    patch.iter().map(|v| (v - mean) * inv).collect()
}

/// Normalizes every row of a patch matrix independently.
pub fn normalize_patches(patches: &Tensor, eps: f64) -> Tensor {
    let data = (0..patches.rows()).flat_map(|r| normalize_target(patches.row(r), eps)).collect();
    Tensor::new(patches.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn patch_counts() {
        let img = Image::filled(224, 224, [0.5; 3]);
        assert_eq!(patchify(&img, 16).unwrap().shape(), &[196, 768]);
        let small = Image::new(8, 8, (0..192).map(|v| v as f64).collect()).unwrap();
        let p = patchify(&small, 8).unwrap();
        assert_eq!(p.shape(), &[1, 192]);
        assert_eq!(p.data(), small.data.as_slice());
    }

    #[test]
    fn indivisible_rejected() {
        assert!(patchify(&Image::filled(10, 8, [0.0; 3]), 4).is_err());
    }

    #[test]
    fn flatten_order_is_row_col_channel() {
        let img = Image::new(4, 4, (0..48).map(f64::from).collect()).unwrap();
        let p = patchify(&img, 2).unwrap();
        // second patch of the first grid row starts at pixel (0, 2)
        assert_eq!(&p.row(1)[..6], &[6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
        assert_eq!(&p.row(1)[6..9], &[18.0, 19.0, 20.0]);
    }

    #[test]
    fn normalize_cases() {
        assert!(normalize_target(&[0.3; 12], TARGET_EPS).iter().all(|&v| v.abs() < 1e-12));
        assert!(normalize_target(&[0.25; 12], TARGET_EPS).iter().all(|&v| v == 0.0));
        let two: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
        let n = normalize_target(&two, 0.0);
        assert!(n.iter().all(|&v| (v.abs() - 1.0).abs() < 1e-15));
        assert_eq!(n[0], -1.0);
    }

    proptest! {
        #[test]
        fn patchify_roundtrip(gw in 1usize..4, gh in 1usize..4, p in 1usize..5, seed in any::<u64>()) {
            let mut rng = crate::numerics::Rng::new(seed, 0);
            let (w, h) = (gw * p, gh * p);
            let img = Image::new(w, h, (0..w * h * 3).map(|_| rng.uniform()).collect()).unwrap();
            let back = unpatchify(&patchify(&img, p).unwrap(), p, w, h).unwrap();
            prop_assert_eq!(back, img);
        }

        #[test]
        fn normalized_mean_zero_var_one(values in proptest::collection::vec(0.0f64..1.0, 48)) {
            let n = normalize_target(&values, TARGET_EPS);
            let mean = n.iter().sum::<f64>() / 48.0;
            prop_assert!(mean.abs() < 1e-12);
            let raw_mean = values.iter().sum::<f64>() / 48.0;
            let raw_var = values.iter().map(|v| (v - raw_mean).powi(2)).sum::<f64>() / 48.0;
            let var = n.iter().map(|v| v * v).sum::<f64>() / 48.0;
            let expected = raw_var / (raw_var + TARGET_EPS);
            prop_assert!((var - expected).abs() < 1e-9);
        }
    }
}

use crate::tensor::Tensor;

use super::ModelError;

/// Flat source indices that turn a `[C×S×S]` image into `[N×(C·P²)]` patches.
///
/// Patches run row-major over the grid; inside a patch values are ordered
/// (channel, row, col).
pub fn patch_indices(channels: usize, image_size: usize, patch: usize) -> Vec<usize> {
    let grid = image_size / patch;
    let mut idx = Vec::with_capacity(channels * image_size * image_size);
    for pr in 0..grid {
        for pc in 0..grid {
            for c in 0..channels {
                for r in 0..patch {
                    for col in 0..patch {
                        let y = pr * patch + r;
                        let x = pc * patch + col;
                        idx.push((c * image_size + y) * image_size + x);
                    }
                }
            }
        }
    }
    idx
}

fn check(image: &Tensor, patch: usize) -> Result<(usize, usize), ModelError> {
    let shape = image.shape();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(ModelError::ImageShape { expected: vec![0, 0, 0], got: shape.to_vec() });
    }
    if patch == 0 || shape[1] % patch != 0 {
        return Err(ModelError::InvalidConfig(format!(
            "image size {} not divisible by patch size {patch}",
            shape[1]
        )));
    }
    Ok((shape[0], shape[1]))
}

pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor, ModelError> {
    let (channels, size) = check(image, patch)?;
    let idx = patch_indices(channels, size, patch);
    let n = (size / patch) * (size / patch);
    let data = idx.iter().map(|&i| image.data()[i]).collect();
    Ok(Tensor::new(vec![n, channels * patch * patch], data)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, channels: usize, image_size: usize, patch: usize) -> Result<Tensor, ModelError> {
    let idx = patch_indices(channels, image_size, patch);
    if patches.numel() != idx.len() {
        return Err(ModelError::ImageShape {
            expected: vec![channels, image_size, image_size],
            got: patches.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; idx.len()];
    for (&src, &v) in idx.iter().zip(patches.data()) {
        out[src] = v;
    }
    Ok(Tensor::new(vec![channels, image_size, image_size], out)?)
}

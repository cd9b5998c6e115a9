use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Splits a `[C × H × W]` image into non-overlapping `p × p` patches in
/// row-major patch order. Each patch is flattened channel-major, then by row
/// and column within the patch, giving `[n_patches × C·p²]`.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::dim("patchify", image.shape(), &[0, 0, 0]));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::dim("patchify", image.shape(), &[patch, patch]));
    }
    let (ph, pw) = (h / patch, w / patch);
    let dim = c * patch * patch;
    let src = image.data();
    let mut out = Vec::with_capacity(ph * pw * dim);
    for py in 0..ph {
        for px in 0..pw {
            for ch in 0..c {
                for dy in 0..patch {
                    let row = (ch * h + py * patch + dy) * w + px * patch;
                    out.extend_from_slice(&src[row..row + patch]);
                }
            }
        }
    }
    Tensor::new([ph * pw, dim], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, channels: usize, height: usize, width: usize, patch: usize) -> Result<Tensor<T>> {
    let (n, dim) = patches.dims2("unpatchify")?;
    if patch == 0 || height % patch != 0 || width % patch != 0 || n != (height / patch) * (width / patch) || dim != channels * patch * patch {
        return Err(Error::dim("unpatchify", patches.shape(), &[channels, height, width]));
    }
    let pw = width / patch;
    let mut out = vec![T::zero(); channels * height * width];
    for (i, p) in patches.data().chunks_exact(dim).enumerate() {
        let (py, px) = (i / pw, i % pw);
        for ch in 0..channels {
            for dy in 0..patch {
                let row = (ch * height + py * patch + dy) * width + px * patch;
                let s = (ch * patch + dy) * patch;
                out[row..row + patch].copy_from_slice(&p[s..s + patch]);
            }
        }
    }
    Tensor::new([channels, height, width], out)
}

/// Patchifies every image of a `[B × C × H × W]` batch into `[B·n_patches × C·p²]`.
pub fn patchify_batch<T: Scalar>(batch: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let &[b, c, h, w] = batch.shape() else {
        return Err(Error::dim("patchify", batch.shape(), &[0, 0, 0, 0]));
    };
    let per = c * h * w;
    let mut rows = 0;
    let mut data = Vec::with_capacity(batch.numel());
    for i in 0..b {
        let img = Tensor::from_parts(vec![c, h, w], batch.data()[i * per..(i + 1) * per].to_vec());
        let p = patchify(&img, patch)?;
        rows += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    Tensor::new([rows, c * patch * patch], data)
}

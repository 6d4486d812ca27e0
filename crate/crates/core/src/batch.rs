//! Assembling training batches from samples.

use dcml_tensor::{Element, Tensor};

use crate::data::FaceSample;
use crate::error::{Error, Result};

/// Rendered images sit around mid-gray with small deviations; networks
/// see `(x - PIXEL_MEAN) / PIXEL_SCALE`.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_SCALE: f64 = 0.1;

pub fn normalize_pixel(v: f64) -> f64 {
    (v - PIXEL_MEAN) / PIXEL_SCALE
}

/// `[B, H, W, C]` stack of the normalized images at `idx`.
pub fn stack_images<T: Element>(samples: &[FaceSample], idx: &[usize]) -> Result<Tensor<T>> {
    if idx.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let first = samples[idx[0]].image.shape().to_vec();
    let mut data = Vec::with_capacity(idx.len() * samples[idx[0]].image.numel());
    for &i in idx {
        let img = &samples[i].image;
        if img.shape() != first.as_slice() {
            return Err(Error::Data(format!("image {i} has shape {:?}, expected {first:?}", img.shape())));
        }
        data.extend(img.data().iter().map(|&v| T::of(normalize_pixel(v as f64))));
    }
    let mut shape = vec![idx.len()];
    shape.extend(first);
    Ok(Tensor::new(&shape, data)?)
}

/// Rows `idx` of a `[N, ...]` tensor.
pub fn gather_rows<T: Element>(t: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let row = t.numel() / t.shape()[0];
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(&shape, data).expect("row gather shape")
}

/// Consecutive chunks of at most `size` items.
pub fn chunks(idx: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    idx.chunks(size.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gather_picks_rows() {
        let t = Tensor::from_fn(&[3, 2], |i| i as f32);
        assert_eq!(gather_rows(&t, &[2, 0]).data(), &[4.0, 5.0, 0.0, 1.0]);
    }
}

use dcml_tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Four overlapping crops of a square image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub image_size: [usize; 2],
    pub patch_size: [usize; 2],
    /// `(row, col)` of each patch's top-left corner.
    pub offsets: [[usize; 2]; 4],
}

impl PatchGeometry {
    /// 48x48 crops of a 64x64 image at the four corners of a 16-pixel grid.
    pub fn desk() -> Self {
        PatchGeometry {
            image_size: [64, 64],
            patch_size: [48, 48],
            offsets: [[0, 0], [0, 16], [16, 0], [16, 16]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [ih, iw] = self.image_size;
        let [ph, pw] = self.patch_size;
        if ih == 0 || iw == 0 || ph == 0 || pw == 0 {
            return Err(Error::Geometry(format!("zero size in {self:?}")));
        }
        for (n, &[r, c]) in self.offsets.iter().enumerate() {
            if r + ph > ih || c + pw > iw {
                return Err(Error::Geometry(format!(
                    "patch {n} at ({r}, {c}) of size {ph}x{pw} exceeds {ih}x{iw} image"
                )));
            }
        }
        for a in 0..4 {
            for b in a + 1..4 {
                let [ra, ca] = self.offsets[a];
                let [rb, cb] = self.offsets[b];
                if ra.abs_diff(rb) >= ph || ca.abs_diff(cb) >= pw {
                    return Err(Error::Geometry(format!("patches {a} and {b} do not overlap")));
                }
            }
        }
        Ok(())
    }
}

/// Copies the four sub-windows of an `[H, W, C]` image.
pub fn extract_patches<T: Element>(image: &Tensor<T>, geom: &PatchGeometry) -> Result<[Tensor<T>; 4]> {
    geom.validate()?;
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != geom.image_size[0] || shape[1] != geom.image_size[1] {
        return Err(Error::Geometry(format!(
            "image shape {shape:?} does not match {}x{}xC",
            geom.image_size[0], geom.image_size[1]
        )));
    }
    let (w, c) = (shape[1], shape[2]);
    let [ph, pw] = geom.patch_size;
    let src = image.data();
    let patches = geom.offsets.map(|[r0, c0]| {
        let mut data = Vec::with_capacity(ph * pw * c);
        for r in r0..r0 + ph {
            let start = (r * w + c0) * c;
            data.extend_from_slice(&src[start..start + pw * c]);
        }
        Tensor::new(&[ph, pw, c], data).expect("patch shape")
    });
    Ok(patches)
}

/// Patches of several images as one `[4N, h, w, C]` batch, sample-major:
/// rows `4i..4i+4` are the patches of image `i`. A `[4N, c]` feature batch
/// computed from it therefore reshapes to `[N, 4c]` = `U1 || U2 || U3 || U4`.
pub fn patch_batch<T: Element>(images: &[&Tensor<T>], geom: &PatchGeometry) -> Result<Tensor<T>> {
    if images.is_empty() {
        return Err(Error::Geometry("no images".into()));
    }
    let mut patches = Vec::with_capacity(4 * images.len());
    for img in images {
        patches.extend(extract_patches(img, geom)?);
    }
    let refs: Vec<&Tensor<T>> = patches.iter().collect();
    Ok(Tensor::stack(&refs)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Tensor<f32> {
        Tensor::from_fn(&[h, w, c], |i| i as f32)
    }

    #[test]
    fn desk_patch_origins() {
        let img = ramp(64, 64, 3);
        let p = extract_patches(&img, &PatchGeometry::desk()).unwrap();
        assert_eq!(p[0].at(&[0, 0, 0]), img.at(&[0, 0, 0]));
        assert_eq!(p[1].at(&[0, 0, 1]), img.at(&[0, 16, 1]));
        assert_eq!(p[2].at(&[0, 0, 2]), img.at(&[16, 0, 2]));
        assert_eq!(p[3].at(&[47, 47, 2]), img.at(&[63, 63, 2]));
        assert_eq!(p[3].shape(), &[48, 48, 3]);
    }

    #[test]
    fn full_overlap_copies_image() {
        let img = ramp(2, 2, 1);
        let geom = PatchGeometry {
            image_size: [2, 2],
            patch_size: [2, 2],
            offsets: [[0, 0]; 4],
        };
        for p in extract_patches(&img, &geom).unwrap() {
            assert_eq!(p, img);
        }
    }

    #[test]
    fn constant_image_gives_constant_patches() {
        let img = Tensor::full(&[64, 64, 3], 0.5f32);
        for p in extract_patches(&img, &PatchGeometry::desk()).unwrap() {
            assert!(p.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn out_of_bounds_and_disjoint_rejected() {
        let mut g = PatchGeometry::desk();
        g.offsets[3] = [17, 16];
        assert!(matches!(g.validate(), Err(Error::Geometry(_))));
        let g = PatchGeometry {
            image_size: [8, 8],
            patch_size: [4, 4],
            offsets: [[0, 0], [0, 4], [4, 0], [4, 4]],
        };
        assert!(g.validate().is_err());
    }

    #[test]
    fn batch_is_sample_major() {
        let a = Tensor::full(&[64, 64, 3], 0.0f32);
        let b = Tensor::full(&[64, 64, 3], 1.0f32);
        let batch = patch_batch(&[&a, &b], &PatchGeometry::desk()).unwrap();
        assert_eq!(batch.shape(), &[8, 48, 48, 3]);
        assert_eq!(batch.index_axis0(3).sum(), 0.0);
        assert_eq!(batch.index_axis0(4).at(&[0, 0, 0]), 1.0);
    }
}

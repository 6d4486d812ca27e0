//! Raw slice kernels behind the graph primitives.
//!
//! All reductions run in a fixed sequential order so results are
//! reproducible bit for bit.

use crate::Element;

const COL_BLOCK: usize = 512;
const CONV_CHUNK: usize = 512;

/// `out[m, n] += a[m, k] * b[k, n]`, all row-major.
pub fn gemm_acc<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + COL_BLOCK).min(n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n + j0..i * n + j1];
            for (p, &av) in arow.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let brow = &b[p * n + j0..p * n + j1];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        j0 = j1;
    }
}

pub fn gemm<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm_acc(a, b, &mut out, m, k, n);
    out
}

pub fn transpose<T: Element>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Dot product with eight interleaved partial sums.
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Geometry of a square-kernel convolution over NHWC input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn positions(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }
}

/// Input-space origin `(image, y0, x0)` of each output position in `m0..m1`.
fn origins(g: &ConvGeom, m0: usize, m1: usize) -> Vec<(usize, isize, isize)> {
    let (oh, ow) = (g.out_height(), g.out_width());
    (m0..m1)
        .map(|m| {
            let oy = (m / ow) % oh;
            let ox = m % ow;
            (
                m / (oh * ow),
                (oy * g.stride) as isize - g.padding as isize,
                (ox * g.stride) as isize - g.padding as isize,
            )
        })
        .collect()
}

/// Fills `cols[kc, m - m0]` for output positions `m0..m1`; row order of
/// `kc` is `(ky, kx, ci)`, matching a `[k, k, cin, cout]` weight layout.
fn im2col<T: Element>(g: &ConvGeom, x: &[T], origins: &[(usize, isize, isize)], cols: &mut [T]) {
    let mc = origins.len();
    let cin = g.in_channels;
    let (h, w) = (g.height as isize, g.width as isize);
    for ky in 0..g.kernel {
        for kx in 0..g.kernel {
            let row0 = (ky * g.kernel + kx) * cin;
            let rows = &mut cols[row0 * mc..(row0 + cin) * mc];
            for (col, &(n, y0, x0)) in origins.iter().enumerate() {
                let (iy, ix) = (y0 + ky as isize, x0 + kx as isize);
                if iy < 0 || ix < 0 || iy >= h || ix >= w {
                    for ci in 0..cin {
                        rows[ci * mc + col] = T::zero();
                    }
                } else {
                    let base = ((n * g.height + iy as usize) * g.width + ix as usize) * cin;
                    for ci in 0..cin {
                        rows[ci * mc + col] = x[base + ci];
                    }
                }
            }
        }
    }
}

fn col2im_acc<T: Element>(g: &ConvGeom, cols: &[T], origins: &[(usize, isize, isize)], dx: &mut [T]) {
    let mc = origins.len();
    let cin = g.in_channels;
    let (h, w) = (g.height as isize, g.width as isize);
    for ky in 0..g.kernel {
        for kx in 0..g.kernel {
            let row0 = (ky * g.kernel + kx) * cin;
            let rows = &cols[row0 * mc..(row0 + cin) * mc];
            for (col, &(n, y0, x0)) in origins.iter().enumerate() {
                let (iy, ix) = (y0 + ky as isize, x0 + kx as isize);
                if iy < 0 || ix < 0 || iy >= h || ix >= w {
                    continue;
                }
                let base = ((n * g.height + iy as usize) * g.width + ix as usize) * cin;
                for ci in 0..cin {
                    dx[base + ci] += rows[ci * mc + col];
                }
            }
        }
    }
}

/// NHWC convolution, weights `[k, k, cin, cout]`, output NHWC.
pub fn conv2d_forward<T: Element>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let kc = g.patch_len();
    let cout = g.out_channels;
    let total = g.positions();
    let wt = transpose(w, kc, cout);
    let mut out = vec![T::zero(); total * cout];
    let mut cols = vec![T::zero(); kc * CONV_CHUNK.min(total)];
    let mut m0 = 0;
    while m0 < total {
        let m1 = (m0 + CONV_CHUNK).min(total);
        let mc = m1 - m0;
        let cols = &mut cols[..kc * mc];
        im2col(g, x, &origins(g, m0, m1), cols);
        let out_t = gemm(&wt, cols, cout, kc, mc);
        for o in 0..cout {
            for c in 0..mc {
                out[(m0 + c) * cout + o] = out_t[o * mc + c];
            }
        }
        m0 = m1;
    }
    out
}

/// Gradients of [`conv2d_forward`]. Returns `(dx, dw)`, each only when asked.
pub fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    grad_out: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let kc = g.patch_len();
    let cout = g.out_channels;
    let total = g.positions();
    let grad_t = transpose(grad_out, total, cout);
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![T::zero(); w.len()]);
    let mut cols = vec![T::zero(); kc * CONV_CHUNK.min(total)];
    let mut gchunk = vec![T::zero(); cout * CONV_CHUNK.min(total)];
    let mut m0 = 0;
    while m0 < total {
        let m1 = (m0 + CONV_CHUNK).min(total);
        let mc = m1 - m0;
        let gchunk = &mut gchunk[..cout * mc];
        for o in 0..cout {
            gchunk[o * mc..(o + 1) * mc].copy_from_slice(&grad_t[o * total + m0..o * total + m1]);
        }
        let origins = origins(g, m0, m1);
        if let Some(dw) = dw.as_mut() {
            let cols = &mut cols[..kc * mc];
            im2col(g, x, &origins, cols);
            for r in 0..kc {
                let crow = &cols[r * mc..(r + 1) * mc];
                for o in 0..cout {
                    dw[r * cout + o] += dot(crow, &gchunk[o * mc..(o + 1) * mc]);
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dcols = gemm(w, gchunk, kc, cout, mc);
            col2im_acc(g, &dcols, &origins, dx);
        }
        m0 = m1;
    }
    (dx, dw)
}

/// Max pooling over NHWC input with implicit `-inf` padding. Returns the
/// pooled values and the flat input index each output was taken from.
pub fn max_pool_forward<T: Element>(
    x: &[T],
    dims: [usize; 4],
    kernel: usize,
    stride: usize,
    padding: usize,
) -> (Vec<T>, Vec<usize>, usize, usize) {
    let [n, h, w, c] = dims;
    let oh = (h + 2 * padding - kernel) / stride + 1;
    let ow = (w + 2 * padding - kernel) / stride + 1;
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut arg = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = ((b * h + iy as usize) * w + ix as usize) * c + ch;
                            if x[i] > best {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    (out, arg, oh, ow)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (3, 5, 300);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let c = gemm(&a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f64> = (0..19).map(|i| i as f64).collect();
        let want: f64 = a.iter().map(|x| x * x).sum();
        assert_eq!(dot(&a, &a), want);
    }

    #[test]
    fn transpose_roundtrip() {
        let a: Vec<f32> = (0..6).map(|i| i as f32).collect();
        let t = transpose(&a, 2, 3);
        assert_eq!(t, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert_eq!(transpose(&t, 3, 2), a);
    }
}

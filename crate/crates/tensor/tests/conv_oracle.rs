use dcml_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct six-loop convolution over a single NHWC image.
fn direct_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let (h, wd, cin) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (k, cout) = (w.shape()[0], w.shape()[3]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        for ci in 0..cin {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += x.at(&[0, iy as usize, ix as usize, ci]) * w.at(&[ky, kx, ci, co]);
                        }
                    }
                }
                out[(oy * ow + ox) * cout + co] = acc;
            }
        }
    }
    out
}

fn compare(h: usize, cin: usize, k: usize, cout: usize, stride: usize, pad: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(&[1, h, h, cin], |_| rng.random_range(-1.0..1.0));
    let w = Tensor::from_fn(&[k, k, cin, cout], |_| rng.random_range(-1.0..1.0));
    let want = direct_conv(&x, &w, stride, pad);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x).unwrap();
    let wv = g.constant(w).unwrap();
    let y = g.conv2d(xv, wv, stride, pad).unwrap();
    let got = g.value(y).data();
    assert_eq!(got.len(), want.len());
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn three_by_three_same_padding() {
    compare(5, 2, 3, 4, 1, 1, 1);
}

#[test]
fn strided_and_wide_kernels() {
    compare(9, 3, 7, 2, 1, 3, 2);
    compare(8, 2, 3, 3, 2, 1, 3);
    compare(6, 4, 1, 5, 2, 0, 4);
}

#[test]
fn large_batch_spans_chunks() {
    // more output positions than one im2col chunk
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::<f64>::from_fn(&[3, 16, 16, 2], |_| rng.random_range(-1.0..1.0));
    let w = Tensor::<f64>::from_fn(&[3, 3, 2, 2], |_| rng.random_range(-1.0..1.0));
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone()).unwrap();
    let wv = g.constant(w.clone()).unwrap();
    let y = g.conv2d(xv, wv, 1, 1).unwrap();
    for n in 0..3 {
        let xi = Tensor::stack(&[&x.index_axis0(n)]).unwrap();
        let want = direct_conv(&xi, &w, 1, 1);
        let got = g.value(y).index_axis0(n);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

//! Naive reference implementations the acceptance checks compare against.

use std::collections::VecDeque;

use plumeseg_core::metrics::Connectivity;
use plumeseg_core::spectral::PlumeMask;
use plumeseg_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Zero-padded cross-correlation, one output element at a time.
pub fn conv2d(x: &Tensor, k: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let s = x.shape();
    let ks = k.shape();
    let (n, cin, h, w) = (s[0], s[1], s[2], s[3]);
    let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for bn in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let y = (oy * stride + i) as isize - pad as isize;
                                let xx = (ox * stride + j) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                acc += x.data()[((bn * cin + ci) * h + y as usize) * w + xx as usize]
                                    * k.data()[((co * cin + ci) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((bn * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out).unwrap()
}

/// Scatter every input pixel through the `[Cin, Cout, kh, kw]` kernel.
pub fn conv_transpose2d(x: &Tensor, k: &Tensor, stride: usize) -> Tensor {
    let s = x.shape();
    let ks = k.shape();
    let (n, cin, h, w) = (s[0], s[1], s[2], s[3]);
    let (cout, kh, kw) = (ks[1], ks[2], ks[3]);
    let (oh, ow) = ((h - 1) * stride + kh, (w - 1) * stride + kw);
    let mut out = vec![0.0; n * cout * oh * ow];
    for bn in 0..n {
        for ci in 0..cin {
            for y in 0..h {
                for xx in 0..w {
                    let v = x.data()[((bn * cin + ci) * h + y) * w + xx];
                    for co in 0..cout {
                        for i in 0..kh {
                            for j in 0..kw {
                                out[((bn * cout + co) * oh + y * stride + i) * ow + xx * stride + j] +=
                                    v * k.data()[((ci * cout + co) * kh + i) * kw + j];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out).unwrap()
}

pub fn maxpool2d(x: &Tensor, k: usize) -> Tensor {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    Tensor::from_fn(&[n, c, h / k, w / k], |idx| {
        let ox = idx % (w / k);
        let oy = (idx / (w / k)) % (h / k);
        let p = idx / ((w / k) * (h / k));
        let mut best = f64::NEG_INFINITY;
        for i in 0..k {
            for j in 0..k {
                best = best.max(x.data()[(p * h + oy * k + i) * w + ox * k + j]);
            }
        }
        best
    })
}

/// Breadth-first labeling in raster order of each region's first pixel.
pub fn flood_fill(mask: &PlumeMask, conn: Connectivity) -> (Vec<u32>, Vec<usize>) {
    let (h, w) = (mask.height as isize, mask.width as isize);
    let mut labels = vec![0u32; mask.values.len()];
    let mut sizes = Vec::new();
    let reach = match conn {
        Connectivity::Four => 1,
        Connectivity::Eight => 2,
    };
    for start in 0..labels.len() {
        if !mask.values[start] || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        labels[start] = id;
        let mut queue = VecDeque::from([start]);
        let mut n = 0;
        while let Some(i) = queue.pop_front() {
            n += 1;
            let (y, x) = (i as isize / w, i as isize % w);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let steps = dy.abs() + dx.abs();
                    if steps == 0 || steps > reach {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h || nx >= w {
                        continue;
                    }
                    let j = (ny * w + nx) as usize;
                    if mask.values[j] && labels[j] == 0 {
                        labels[j] = id;
                        queue.push_back(j);
                    }
                }
            }
        }
        sizes.push(n);
    }
    (labels, sizes)
}

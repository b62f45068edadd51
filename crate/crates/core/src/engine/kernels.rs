//! Raw numeric kernels behind the graph ops. Everything here works on flat
//! NCHW slices; shape validation happens in the graph layer.

/// Geometry of a 2-D sliding window over one image plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kw) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// `c = a(m×k) · b(k×n) + beta·c`, all row-major unless strides say otherwise.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    // SAFETY: callers pass slices covering the strided extents. Checked below
    // for the contiguous row-major/column-major layouts used in this module.
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn im2col(plane: &[f64], g: &Window, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..g.channels {
        let src = &plane[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let y = (oy * g.stride + ki) as isize - pad;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if y < 0 || y >= g.height as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &src[y as usize * g.width..(y as usize + 1) * g.width];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let x = (ox * g.stride + kj) as isize - pad;
                        *d = if x < 0 || x >= g.width as isize {
                            0.0
                        } else {
                            srow[x as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a zeroed plane.
pub(crate) fn col2im(cols: &[f64], g: &Window, plane: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pad = g.padding as isize;
    plane.fill(0.0);
    let mut row = 0;
    for c in 0..g.channels {
        let dst = &mut plane[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let y = (oy * g.stride + ki) as isize - pad;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let drow = &mut dst[y as usize * g.width..(y as usize + 1) * g.width];
                    for ox in 0..ow {
                        let x = (ox * g.stride + kj) as isize - pad;
                        if x >= 0 && x < g.width as isize {
                            drow[x as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation `out[n] = K · im2col(x[n]) + bias`.
pub(crate) fn conv2d_forward(
    input: &[f64],
    batch: usize,
    g: &Window,
    kernel: &[f64],
    out_channels: usize,
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let in_len = g.channels * g.height * g.width;
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let out_len = out_channels * cols_n;
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * cols_n]
    };
    for n in 0..batch {
        let x = &input[n * in_len..(n + 1) * in_len];
        let y = &mut out[n * out_len..(n + 1) * out_len];
        match bias {
            Some(b) => {
                for (oc, chunk) in y.chunks_exact_mut(cols_n).enumerate() {
                    chunk.fill(b[oc]);
                }
            }
            None => y.fill(0.0),
        }
        let b: &[f64] = if g.is_pointwise() {
            x
        } else {
            im2col(x, g, &mut cols);
            &cols
        };
        gemm(
            out_channels,
            rows,
            cols_n,
            kernel,
            rows as isize,
            1,
            b,
            cols_n as isize,
            1,
            1.0,
            y,
        );
    }
}

/// Gradients of [`conv2d_forward`]. Each output buffer is accumulated into
/// only when present.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    input: &[f64],
    batch: usize,
    g: &Window,
    kernel: &[f64],
    out_channels: usize,
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_kernel: Option<&mut [f64]>,
    mut grad_bias: Option<&mut [f64]>,
) {
    let in_len = g.channels * g.height * g.width;
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let out_len = out_channels * cols_n;
    let pointwise = g.is_pointwise();
    let mut cols = vec![0.0; if pointwise { 0 } else { rows * cols_n }];
    let mut dcols = vec![0.0; if pointwise { 0 } else { rows * cols_n }];
    for n in 0..batch {
        let x = &input[n * in_len..(n + 1) * in_len];
        let dy = &grad_out[n * out_len..(n + 1) * out_len];
        if let Some(db) = grad_bias.as_deref_mut() {
            for (oc, chunk) in dy.chunks_exact(cols_n).enumerate() {
                db[oc] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dk) = grad_kernel.as_deref_mut() {
            let b: &[f64] = if pointwise {
                x
            } else {
                im2col(x, g, &mut cols);
                &cols
            };
            // dK += dY (oc × cols) · colsᵀ (cols × rows)
            gemm(
                out_channels,
                cols_n,
                rows,
                dy,
                cols_n as isize,
                1,
                b,
                1,
                cols_n as isize,
                1.0,
                dk,
            );
        }
        if let Some(dx_all) = grad_input.as_deref_mut() {
            let dx = &mut dx_all[n * in_len..(n + 1) * in_len];
            // dcols = Kᵀ (rows × oc) · dY (oc × cols)
            if pointwise {
                gemm(
                    rows,
                    out_channels,
                    cols_n,
                    kernel,
                    1,
                    rows as isize,
                    dy,
                    cols_n as isize,
                    1,
                    1.0,
                    dx,
                );
            } else {
                gemm(
                    rows,
                    out_channels,
                    cols_n,
                    kernel,
                    1,
                    rows as isize,
                    dy,
                    cols_n as isize,
                    1,
                    0.0,
                    &mut dcols,
                );
                let mut tmp = vec![0.0; in_len];
                col2im(&dcols, g, &mut tmp);
                for (a, b) in dx.iter_mut().zip(&tmp) {
                    *a += b;
                }
            }
        }
    }
}

/// Transposed convolution: the adjoint of a stride-`s` convolution whose
/// input plane is the output here. `g` describes that convolution (its
/// `channels/height/width` are the output of the transpose).
pub(crate) fn conv_transpose2d_forward(
    input: &[f64],
    batch: usize,
    in_channels: usize,
    g: &Window,
    kernel: &[f64],
    out: &mut [f64],
) {
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let in_len = in_channels * cols_n;
    let out_len = g.channels * g.height * g.width;
    let mut cols = vec![0.0; rows * cols_n];
    for n in 0..batch {
        let x = &input[n * in_len..(n + 1) * in_len];
        // cols = Kᵀ (rows × cin) · x (cin × cols), K stored as cin × rows
        gemm(
            rows,
            in_channels,
            cols_n,
            kernel,
            1,
            rows as isize,
            x,
            cols_n as isize,
            1,
            0.0,
            &mut cols,
        );
        col2im(&cols, g, &mut out[n * out_len..(n + 1) * out_len]);
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward(
    input: &[f64],
    batch: usize,
    in_channels: usize,
    g: &Window,
    kernel: &[f64],
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_kernel: Option<&mut [f64]>,
) {
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let in_len = in_channels * cols_n;
    let out_len = g.channels * g.height * g.width;
    let mut dcols = vec![0.0; rows * cols_n];
    for n in 0..batch {
        let x = &input[n * in_len..(n + 1) * in_len];
        im2col(&grad_out[n * out_len..(n + 1) * out_len], g, &mut dcols);
        if let Some(dx) = grad_input.as_deref_mut() {
            // dx = K (cin × rows) · dcols (rows × cols)
            gemm(
                in_channels,
                rows,
                cols_n,
                kernel,
                rows as isize,
                1,
                &dcols,
                cols_n as isize,
                1,
                1.0,
                &mut dx[n * in_len..(n + 1) * in_len],
            );
        }
        if let Some(dk) = grad_kernel.as_deref_mut() {
            // dK += x (cin × cols) · dcolsᵀ (cols × rows)
            gemm(
                in_channels,
                cols_n,
                rows,
                x,
                cols_n as isize,
                1,
                &dcols,
                1,
                cols_n as isize,
                1.0,
                dk,
            );
        }
    }
}

/// Non-overlapping `k×k` max pooling. Returns flat argmax indices into the
/// input; ties go to the first element in row-major window order.
pub(crate) fn maxpool2d_forward(
    input: &[f64],
    planes: usize,
    height: usize,
    width: usize,
    k: usize,
    out: &mut [f64],
) -> Vec<usize> {
    let (oh, ow) = (height / k, width / k);
    let mut argmax = vec![0usize; planes * oh * ow];
    for p in 0..planes {
        let base = p * height * width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + oy * k * width + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (oy * k + dy) * width + ox * k + dx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    argmax
}

/// Per-channel mean and biased variance over `(N, H, W)`.
pub(crate) fn channel_moments(
    input: &[f64],
    batch: usize,
    channels: usize,
    plane: usize,
) -> (Vec<f64>, Vec<f64>) {
    let count = (batch * plane) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let mut s = 0.0;
        for n in 0..batch {
            let off = (n * channels + c) * plane;
            s += input[off..off + plane].iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for n in 0..batch {
            let off = (n * channels + c) * plane;
            v += input[off..off + plane]
                .iter()
                .map(|x| (x - m) * (x - m))
                .sum::<f64>();
        }
        mean[c] = m;
        var[c] = v / count;
    }
    (mean, var)
}

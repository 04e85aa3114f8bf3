//! 2-D convolution kernels over NCHW buffers.
//!
//! Two independent routes are kept: a direct nested-loop kernel and an
//! im2col + GEMM kernel. They compute the same sums in different orders and
//! are cross-checked in tests.

/// Which convolution kernel a [`super::Graph`] dispatches to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvAlgo {
    #[default]
    Im2col,
    Direct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub oc: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Returns `None` when the kernel does not fit the padded input.
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Option<ConvGeom> {
        if x_shape.len() != 4 || w_shape.len() != 4 || stride == 0 {
            return None;
        }
        let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (oc, wc, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if wc != c || kh == 0 || kw == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Some(ConvGeom {
            n,
            c,
            h,
            w,
            oc,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.oc, self.oh, self.ow]
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Input coordinate for output position `o` and kernel tap `k`, or `None`
    /// when it falls in the zero padding.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        if pos < 0 || pos as usize >= extent {
            None
        } else {
            Some(pos as usize)
        }
    }
}

/// Row-major `c = op(a) * op(b) + beta * c`, with `op(a)` of shape `m x k`
/// and `op(b)` of shape `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches.
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

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let p = g.positions();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    match g.source(oy, ki, g.h) {
                        None => dst[oy * g.ow..(oy + 1) * g.ow].fill(0.0),
                        Some(iy) => {
                            for ox in 0..g.ow {
                                dst[oy * g.ow + ox] = match g.source(ox, kj, g.w) {
                                    Some(ix) => plane[iy * g.w + ix],
                                    None => 0.0,
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let p = g.positions();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let Some(iy) = g.source(oy, ki, g.h) else {
                        continue;
                    };
                    for ox in 0..g.ow {
                        if let Some(ix) = g.source(ox, kj, g.w) {
                            plane[iy * g.w + ix] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn forward(algo: ConvAlgo, g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    match algo {
        ConvAlgo::Im2col => forward_im2col(g, x, w),
        ConvAlgo::Direct => forward_direct(g, x, w),
    }
}

/// Returns `(dx, dw)`; either is skipped (empty) when not requested.
pub fn backward(
    algo: ConvAlgo,
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Vec<f64>, Vec<f64>) {
    match algo {
        ConvAlgo::Im2col => backward_im2col(g, x, w, dy, want_dx, want_dw),
        ConvAlgo::Direct => backward_direct(g, x, w, dy, want_dx, want_dw),
    }
}

fn forward_im2col(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (patch, p) = (g.patch(), g.positions());
    let in_len = g.c * g.h * g.w;
    let out_len = g.oc * p;
    let mut out = vec![0.0; g.n * out_len];
    let mut cols = vec![0.0; patch * p];
    for n in 0..g.n {
        im2col(g, &x[n * in_len..(n + 1) * in_len], &mut cols);
        gemm(
            g.oc,
            patch,
            p,
            w,
            false,
            &cols,
            false,
            0.0,
            &mut out[n * out_len..(n + 1) * out_len],
        );
    }
    out
}

fn backward_im2col(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Vec<f64>, Vec<f64>) {
    let (patch, p) = (g.patch(), g.positions());
    let in_len = g.c * g.h * g.w;
    let out_len = g.oc * p;
    let mut dx = if want_dx { vec![0.0; x.len()] } else { Vec::new() };
    let mut dw = if want_dw { vec![0.0; w.len()] } else { Vec::new() };
    let mut cols = vec![0.0; patch * p];
    for n in 0..g.n {
        let dy_n = &dy[n * out_len..(n + 1) * out_len];
        if want_dw {
            im2col(g, &x[n * in_len..(n + 1) * in_len], &mut cols);
            gemm(g.oc, p, patch, dy_n, false, &cols, true, 1.0, &mut dw);
        }
        if want_dx {
            gemm(patch, g.oc, p, w, true, dy_n, false, 0.0, &mut cols);
            col2im(g, &cols, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    (dx, dw)
}

fn forward_direct(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.oc * g.oh * g.ow];
    for n in 0..g.n {
        for o in 0..g.oc {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = 0.0;
                    for ci in 0..g.c {
                        for ki in 0..g.kh {
                            let Some(iy) = g.source(oy, ki, g.h) else {
                                continue;
                            };
                            for kj in 0..g.kw {
                                let Some(ix) = g.source(ox, kj, g.w) else {
                                    continue;
                                };
                                acc += x[((n * g.c + ci) * g.h + iy) * g.w + ix]
                                    * w[((o * g.c + ci) * g.kh + ki) * g.kw + kj];
                            }
                        }
                    }
                    out[((n * g.oc + o) * g.oh + oy) * g.ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn backward_direct(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    for n in 0..g.n {
        for o in 0..g.oc {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let d = dy[((n * g.oc + o) * g.oh + oy) * g.ow + ox];
                    for ci in 0..g.c {
                        for ki in 0..g.kh {
                            let Some(iy) = g.source(oy, ki, g.h) else {
                                continue;
                            };
                            for kj in 0..g.kw {
                                let Some(ix) = g.source(ox, kj, g.w) else {
                                    continue;
                                };
                                let xi = ((n * g.c + ci) * g.h + iy) * g.w + ix;
                                let wi = ((o * g.c + ci) * g.kh + ki) * g.kw + kj;
                                dx[xi] += d * w[wi];
                                dw[wi] += d * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        if want_dx { dx } else { Vec::new() },
        if want_dw { dw } else { Vec::new() },
    )
}

//! Raw numeric kernels behind the tape operations. Everything here works on
//! flat row-major slices; shape checking happens in the tape layer.

/// `c = a·b + beta·c` with `a: m×k`, `b: k×n`, both optionally transposed in
/// storage (`ta`: `a` is stored as `k×m`; `tb`: `b` is stored as `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: out too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays within
    // the slices; matrixmultiply reads a and b and writes only c.
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
    pub cout: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }
}

/// Valid-convolution output extent, `None` when the kernel does not fit.
pub(crate) fn conv_out_extent(input: usize, k: usize, stride: usize) -> Option<usize> {
    if stride == 0 || k == 0 || k > input {
        None
    } else {
        Some((input - k) / stride + 1)
    }
}

/// Unfolds `[N, H, W, Cin]` into a `(N·Ho·Wo) × (K·K·Cin)` patch matrix whose
/// column order `(ky, kx, ci)` matches the `[K, K, Cin, Cout]` kernel layout.
pub(crate) fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let row_len = g.k * g.cin;
    let mut out = vec![0.0; g.rows() * g.patch_len()];
    let mut dst = 0;
    for n in 0..g.n {
        let img = &input[n * g.h * g.w * g.cin..(n + 1) * g.h * g.w * g.cin];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                for ky in 0..g.k {
                    let y = oy * g.stride + ky;
                    let start = (y * g.w + ox * g.stride) * g.cin;
                    out[dst..dst + row_len].copy_from_slice(&img[start..start + row_len]);
                    dst += row_len;
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, dinput: &mut [f64]) {
    let row_len = g.k * g.cin;
    let mut src = 0;
    for n in 0..g.n {
        let img = &mut dinput[n * g.h * g.w * g.cin..(n + 1) * g.h * g.w * g.cin];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                for ky in 0..g.k {
                    let y = oy * g.stride + ky;
                    let start = (y * g.w + ox * g.stride) * g.cin;
                    for (d, s) in img[start..start + row_len].iter_mut().zip(&cols[src..src + row_len]) {
                        *d += s;
                    }
                    src += row_len;
                }
            }
        }
    }
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - max).exp();
            sum += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= sum;
        }
    }
    out
}

/// Integer rectangle on a feature map: half-open `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
}

pub const POOL_BINS: usize = 4;

/// Half-open bin `k` of `POOL_BINS` over an extent of `len` cells. Bins of
/// regions narrower than the bin count overlap rather than go empty.
pub fn pool_bin(k: usize, len: usize) -> (usize, usize) {
    let start = (k * len) / POOL_BINS;
    let end = ((k + 1) * len).div_ceil(POOL_BINS);
    (start, end)
}

/// Max-pools one rectangle of one `[H, W, C]` map into `4×4×C` values.
/// Writes the flat argmax index (into the map) of each output when asked.
pub(crate) fn roi_pool_map(
    map: &[f64],
    w: usize,
    c: usize,
    rect: Rect,
    out: &mut [f64],
    mut argmax: Option<&mut [u32]>,
) {
    for by in 0..POOL_BINS {
        let (ys, ye) = pool_bin(by, rect.height());
        for bx in 0..POOL_BINS {
            let (xs, xe) = pool_bin(bx, rect.width());
            let base = (by * POOL_BINS + bx) * c;
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for y in rect.y0 + ys..rect.y0 + ye {
                    for x in rect.x0 + xs..rect.x0 + xe {
                        let idx = (y * w + x) * c + ch;
                        // strict comparison keeps the lowest linear index on ties
                        if map[idx] > best {
                            best = map[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[base + ch] = best;
                if let Some(a) = argmax.as_deref_mut() {
                    a[base + ch] = best_idx as u32;
                }
            }
        }
    }
}

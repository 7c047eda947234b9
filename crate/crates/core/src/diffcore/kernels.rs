//! Raw numeric kernels behind the differentiable ops. All buffers are row-major.

/// `c = a · b` with `a: m×k`, `b: k×n`, `c: m×n` (overwritten when `accumulate` is false).
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds asserted above; strides describe dense row-major matrices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = aᵀ · b` with `a: k×m`, `b: k×n`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: as in `gemm`, with `a` read column-major.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a · bᵀ` with `a: m×k`, `b: n×k`.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: as in `gemm`, with `b` read column-major.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        (self.k - 1) / 2
    }
    pub fn h_out(&self) -> usize {
        (self.h + 2 * self.pad() - self.k) / self.stride + 1
    }
    pub fn w_out(&self) -> usize {
        (self.w + 2 * self.pad() - self.k) / self.stride + 1
    }
    pub fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }
}

fn im2col(x: &[f64], g: ConvGeom) -> Vec<f64> {
    let (ho, wo, pad) = (g.h_out(), g.w_out(), g.pad() as isize);
    let mut cols = vec![0.0; g.patch() * ho * wo];
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: ConvGeom, dx: &mut [f64]) {
    let (ho, wo, pad) = (g.h_out(), g.w_out(), g.pad() as isize);
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], kernel: &[f64], c_out: usize, g: ConvGeom) -> Vec<f64> {
    let n = g.h_out() * g.w_out();
    let mut out = vec![0.0; c_out * n];
    if g.is_pointwise() {
        gemm(c_out, g.patch(), n, kernel, x, &mut out, false);
    } else {
        let cols = im2col(x, g);
        gemm(c_out, g.patch(), n, kernel, &cols, &mut out, false);
    }
    out
}

/// Returns `(d_input, d_kernel)` for the requested sides.
pub(crate) fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    d_out: &[f64],
    c_out: usize,
    g: ConvGeom,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let n = g.h_out() * g.w_out();
    let p = g.patch();
    let cols_owned;
    let cols: &[f64] = if g.is_pointwise() {
        x
    } else {
        cols_owned = im2col(x, g);
        &cols_owned
    };
    let dk = want_kernel.then(|| {
        let mut dk = vec![0.0; c_out * p];
        gemm_nt(c_out, n, p, d_out, cols, &mut dk, false);
        dk
    });
    let dx = want_input.then(|| {
        let mut dcols = vec![0.0; p * n];
        gemm_tn(p, c_out, n, kernel, d_out, &mut dcols, false);
        if g.is_pointwise() {
            dcols
        } else {
            let mut dx = vec![0.0; g.c_in * g.h * g.w];
            col2im(&dcols, g, &mut dx);
            dx
        }
    });
    (dx, dk)
}

/// Snap a pixel coordinate within 1e-9 of an integer onto it so that exact grids sample exactly.
#[inline]
fn snap(p: f64) -> f64 {
    let r = p.round();
    if (p - r).abs() < 1e-9 {
        r
    } else {
        p
    }
}

#[inline]
fn to_pixel(coord: f64, size: usize) -> f64 {
    snap((coord + 1.0) * 0.5 * (size as f64 - 1.0))
}

struct Corners {
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
}

#[inline]
fn corners(gx: f64, gy: f64, h: usize, w: usize) -> Corners {
    let px = to_pixel(gx, w);
    let py = to_pixel(gy, h);
    let x0 = px.floor();
    let y0 = py.floor();
    Corners { x0: x0 as isize, y0: y0 as isize, fx: px - x0, fy: py - y0 }
}

#[inline]
fn fetch(plane: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
        plane[y as usize * w + x as usize]
    } else {
        0.0
    }
}

/// Bilinear sampling. `grid` holds `(x, y)` pairs, either one grid shared by all
/// channels (`per_channel == false`) or one grid per channel.
pub(crate) fn bilinear_forward(
    input: &[f64],
    grid: &[f64],
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    per_channel: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        let gbase = if per_channel { ch * ho * wo * 2 } else { 0 };
        for p in 0..ho * wo {
            let gx = grid[gbase + 2 * p];
            let gy = grid[gbase + 2 * p + 1];
            let cr = corners(gx, gy, h, w);
            let v00 = fetch(plane, h, w, cr.y0, cr.x0);
            let v01 = fetch(plane, h, w, cr.y0, cr.x0 + 1);
            let v10 = fetch(plane, h, w, cr.y0 + 1, cr.x0);
            let v11 = fetch(plane, h, w, cr.y0 + 1, cr.x0 + 1);
            let top = v00 * (1.0 - cr.fx) + v01 * cr.fx;
            let bottom = v10 * (1.0 - cr.fx) + v11 * cr.fx;
            out[ch * ho * wo + p] = top * (1.0 - cr.fy) + bottom * cr.fy;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bilinear_backward(
    input: &[f64],
    grid: &[f64],
    d_out: &[f64],
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    per_channel: bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut d_in = vec![0.0; input.len()];
    let mut d_grid = vec![0.0; grid.len()];
    let sx = 0.5 * (w as f64 - 1.0);
    let sy = 0.5 * (h as f64 - 1.0);
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        let gbase = if per_channel { ch * ho * wo * 2 } else { 0 };
        for p in 0..ho * wo {
            let g = d_out[ch * ho * wo + p];
            if g == 0.0 {
                continue;
            }
            let gx = grid[gbase + 2 * p];
            let gy = grid[gbase + 2 * p + 1];
            let cr = corners(gx, gy, h, w);
            let v00 = fetch(plane, h, w, cr.y0, cr.x0);
            let v01 = fetch(plane, h, w, cr.y0, cr.x0 + 1);
            let v10 = fetch(plane, h, w, cr.y0 + 1, cr.x0);
            let v11 = fetch(plane, h, w, cr.y0 + 1, cr.x0 + 1);
            let weights = [
                (cr.y0, cr.x0, (1.0 - cr.fx) * (1.0 - cr.fy)),
                (cr.y0, cr.x0 + 1, cr.fx * (1.0 - cr.fy)),
                (cr.y0 + 1, cr.x0, (1.0 - cr.fx) * cr.fy),
                (cr.y0 + 1, cr.x0 + 1, cr.fx * cr.fy),
            ];
            let dplane = &mut d_in[ch * h * w..(ch + 1) * h * w];
            for (y, x, wt) in weights {
                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    dplane[y as usize * w + x as usize] += g * wt;
                }
            }
            let dpx = (v01 - v00) * (1.0 - cr.fy) + (v11 - v10) * cr.fy;
            let dpy = (v10 - v00) * (1.0 - cr.fx) + (v11 - v01) * cr.fx;
            d_grid[gbase + 2 * p] += g * dpx * sx;
            d_grid[gbase + 2 * p + 1] += g * dpy * sy;
        }
    }
    (d_in, d_grid)
}

/// Normalized coordinate of index `i` along an axis of `n` samples; corners map to ±1.
#[inline]
pub(crate) fn normalized_coord(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n as f64 - 1.0)
    }
}

/// Build per-channel sampling grids `[C, H, W, 2]` from affine rows `[C, 6]`.
pub(crate) fn affine_grid_forward(theta: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w * 2];
    for ch in 0..c {
        let t = &theta[ch * 6..ch * 6 + 6];
        for i in 0..h {
            let y = normalized_coord(i, h);
            for j in 0..w {
                let x = normalized_coord(j, w);
                let o = ((ch * h + i) * w + j) * 2;
                out[o] = t[0] * x + t[1] * y + t[2];
                out[o + 1] = t[3] * x + t[4] * y + t[5];
            }
        }
    }
    out
}

pub(crate) fn affine_grid_backward(d_grid: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut dt = vec![0.0; c * 6];
    for ch in 0..c {
        let t = &mut dt[ch * 6..ch * 6 + 6];
        for i in 0..h {
            let y = normalized_coord(i, h);
            for j in 0..w {
                let x = normalized_coord(j, w);
                let o = ((ch * h + i) * w + j) * 2;
                let (gx, gy) = (d_grid[o], d_grid[o + 1]);
                t[0] += gx * x;
                t[1] += gx * y;
                t[2] += gx;
                t[3] += gy * x;
                t[4] += gy * y;
                t[5] += gy;
            }
        }
    }
    dt
}

//! 3×3, stride-1, zero-padded convolution via im2col + GEMM.

use crate::tensor::{gemm, Element, MatRef};

pub const KSIZE: usize = 3;
const TAPS: usize = KSIZE * KSIZE;

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvDims {
    fn plane(&self) -> usize {
        self.height * self.width
    }
    fn col_rows(&self) -> usize {
        self.in_ch * TAPS
    }
}

/// Unfolds one image (`cin × h × w`) into `(cin·9) × (h·w)` columns.
fn im2col<T: Element>(img: &[T], cin: usize, h: usize, w: usize, cols: &mut [T]) {
    let plane = h * w;
    for c in 0..cin {
        let src = &img[c * plane..(c + 1) * plane];
        for di in 0..KSIZE {
            for dj in 0..KSIZE {
                let row = (c * TAPS + di * KSIZE + dj) * plane;
                let dst = &mut cols[row..row + plane];
                // Valid output columns j satisfy 0 <= j + dj - 1 < w.
                let j_lo = if dj == 0 { 1 } else { 0 };
                let j_hi = if dj == 2 { w - 1 } else { w };
                for i in 0..h {
                    let out_row = &mut dst[i * w..(i + 1) * w];
                    let si = i as isize + di as isize - 1;
                    if si < 0 || si >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[si as usize * w..(si as usize + 1) * w];
                    if j_lo > 0 {
                        out_row[0] = T::zero();
                    }
                    if j_hi < w {
                        out_row[w - 1] = T::zero();
                    }
                    if j_hi > j_lo {
                        let s0 = j_lo + dj - 1;
                        out_row[j_lo..j_hi].copy_from_slice(&src_row[s0..s0 + (j_hi - j_lo)]);
                    }
                }
            }
        }
    }
}

/// [`im2col`] in transposed layout: `(h·w) × (cin·9)`, one row per output pixel.
fn im2col_t<T: Element>(img: &[T], cin: usize, h: usize, w: usize, out: &mut [T]) {
    let plane = h * w;
    let k = cin * TAPS;
    for i in 0..h {
        for j in 0..w {
            let row = &mut out[(i * w + j) * k..(i * w + j + 1) * k];
            for c in 0..cin {
                let src = &img[c * plane..(c + 1) * plane];
                for di in 0..KSIZE {
                    let si = i as isize + di as isize - 1;
                    for dj in 0..KSIZE {
                        let sj = j as isize + dj as isize - 1;
                        let inside = si >= 0 && sj >= 0 && si < h as isize && sj < w as isize;
                        row[c * TAPS + di * KSIZE + dj] =
                            if inside { src[si as usize * w + sj as usize] } else { T::zero() };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into the image.
fn col2im<T: Element>(cols: &[T], cin: usize, h: usize, w: usize, img: &mut [T]) {
    let plane = h * w;
    for c in 0..cin {
        let dst = &mut img[c * plane..(c + 1) * plane];
        for di in 0..KSIZE {
            for dj in 0..KSIZE {
                let row = (c * TAPS + di * KSIZE + dj) * plane;
                let src = &cols[row..row + plane];
                let j_lo = if dj == 0 { 1 } else { 0 };
                let j_hi = if dj == 2 { w - 1 } else { w };
                if j_hi <= j_lo {
                    continue;
                }
                for i in 0..h {
                    let si = i as isize + di as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let s0 = j_lo + dj - 1;
                    let d = &mut dst[si as usize * w + s0..si as usize * w + s0 + (j_hi - j_lo)];
                    let s = &src[i * w + j_lo..i * w + j_hi];
                    for (a, &b) in d.iter_mut().zip(s) {
                        *a = *a + b;
                    }
                }
            }
        }
    }
}

pub fn forward<T: Element>(input: &[T], kernel: &[T], bias: Option<&[T]>, d: ConvDims) -> Vec<T> {
    let plane = d.plane();
    let k = d.col_rows();
    let mut out = vec![T::zero(); d.batch * d.out_ch * plane];
    let mut cols = vec![T::zero(); k * plane];
    for b in 0..d.batch {
        let img = &input[b * d.in_ch * plane..(b + 1) * d.in_ch * plane];
        im2col(img, d.in_ch, d.height, d.width, &mut cols);
        let dst = &mut out[b * d.out_ch * plane..(b + 1) * d.out_ch * plane];
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                dst[o * plane..(o + 1) * plane].fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        gemm(MatRef::new(kernel, d.out_ch, k), MatRef::new(&cols, k, plane), beta, dst);
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn backward<T: Element>(
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    d: ConvDims,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_input, need_kernel, need_bias) = need;
    let plane = d.plane();
    let k = d.col_rows();
    let mut g_in = need_input.then(|| vec![T::zero(); input.len()]);
    let mut g_k = need_kernel.then(|| vec![T::zero(); kernel.len()]);
    let mut g_b = need_bias.then(|| vec![T::zero(); d.out_ch]);
    let mut cols = vec![T::zero(); k * plane];
    for b in 0..d.batch {
        let gy = &grad_out[b * d.out_ch * plane..(b + 1) * d.out_ch * plane];
        if let Some(gb) = g_b.as_mut() {
            for (o, acc) in gb.iter_mut().enumerate() {
                *acc = gy[o * plane..(o + 1) * plane].iter().fold(*acc, |s, &v| s + v);
            }
        }
        if let Some(gk) = g_k.as_mut() {
            let img = &input[b * d.in_ch * plane..(b + 1) * d.in_ch * plane];
            // dK += dY · colsᵀ, with colsᵀ built directly so the GEMM reads it densely.
            im2col_t(img, d.in_ch, d.height, d.width, &mut cols);
            gemm(MatRef::new(gy, d.out_ch, plane), MatRef::new(&cols, plane, k), T::one(), gk);
        }
        if let Some(gi) = g_in.as_mut() {
            // dCols = Kᵀ · dY
            gemm(MatRef::new(kernel, d.out_ch, k).t(), MatRef::new(gy, d.out_ch, plane), T::zero(), &mut cols);
            let dst = &mut gi[b * d.in_ch * plane..(b + 1) * d.in_ch * plane];
            col2im(&cols, d.in_ch, d.height, d.width, dst);
        }
    }
    ConvGrads { input: g_in, kernel: g_k, bias: g_b }
}

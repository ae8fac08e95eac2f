//! Kernels behind the layer types. Convolutions go through im2col and a
//! blocked GEMM; everything else is a direct loop.

use crate::tensor::Real;

/// Unfolds a zero-padded 3x3 neighbourhood of every pixel into the columns of
/// a `(c * 9) x (h * w)` matrix.
pub fn im2col<T: Real>(input: &[T], c: usize, h: usize, w: usize, cols: &mut Vec<T>) {
    let hw = h * w;
    cols.clear();
    cols.resize(c * 9 * hw, T::zero());
    for ch in 0..c {
        let plane = &input[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                let dx = kx as isize - 1;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    for x in x_lo..x_hi {
                        dst[x] = src[(x as isize + dx) as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back onto a `c x h x w` image.
pub fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, out: &mut [T]) {
    let hw = h * w;
    for v in out.iter_mut() {
        *v = T::zero();
    }
    for ch in 0..c {
        let plane = &mut out[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                let dx = kx as isize - 1;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..][..w];
                    let dst = &mut plane[sy as usize * w..][..w];
                    for x in x_lo..x_hi {
                        dst[(x as isize + dx) as usize] = dst[(x as isize + dx) as usize] + src[x];
                    }
                }
            }
        }
    }
}

/// 3x3 same-padding convolution. `weight` is `o x c x 3 x 3`.
pub fn conv3x3<T: Real>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: Option<&[T]>,
    o: usize,
) -> Vec<T> {
    let hw = h * w;
    let mut cols = Vec::new();
    im2col(input, c, h, w, &mut cols);
    let mut out = vec![T::zero(); o * hw];
    if let Some(bias) = bias {
        for (plane, &b) in out.chunks_mut(hw).zip(bias) {
            plane.iter_mut().for_each(|v| *v = b);
        }
    }
    let k = c * 9;
    T::gemm(
        o,
        k,
        hw,
        T::one(),
        weight,
        k as isize,
        1,
        &cols,
        hw as isize,
        1,
        if bias.is_some() { T::one() } else { T::zero() },
        &mut out,
        hw as isize,
        1,
    );
    out
}

/// Gradient of [`conv3x3`] with respect to its input (a transposed convolution).
pub fn conv3x3_transpose<T: Real>(
    grad_out: &[T],
    o: usize,
    h: usize,
    w: usize,
    weight: &[T],
    c: usize,
) -> Vec<T> {
    let hw = h * w;
    let k = c * 9;
    let mut dcols = vec![T::zero(); k * hw];
    // dcols = W^T (k x o) * grad_out (o x hw)
    T::gemm(
        k,
        o,
        hw,
        T::one(),
        weight,
        1,
        k as isize,
        grad_out,
        hw as isize,
        1,
        T::zero(),
        &mut dcols,
        hw as isize,
        1,
    );
    let mut grad_in = vec![T::zero(); c * hw];
    col2im(&dcols, c, h, w, &mut grad_in);
    grad_in
}

/// Accumulates weight and bias gradients of [`conv3x3`] into `dw`, `db`.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_param_grads<T: Real>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    grad_out: &[T],
    o: usize,
    dw: &mut [T],
    db: &mut [T],
) {
    let hw = h * w;
    let k = c * 9;
    let mut cols = Vec::new();
    im2col(input, c, h, w, &mut cols);
    // dw += grad_out (o x hw) * cols^T (hw x k)
    T::gemm(
        o,
        hw,
        k,
        T::one(),
        grad_out,
        hw as isize,
        1,
        &cols,
        1,
        hw as isize,
        T::one(),
        dw,
        k as isize,
        1,
    );
    for (d, plane) in db.iter_mut().zip(grad_out.chunks(hw)) {
        *d = *d + plane.iter().copied().sum();
    }
}

/// 2x2 stride-2 max pooling. Returns the pooled values and, per output, the
/// flat input index of the winner (first maximum in row-major window order).
pub fn maxpool2x2<T: Real>(input: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + (2 * y) * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * x + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

/// Routes each pooled value back to its recorded winner.
pub fn unpool<T: Real>(values: &[T], argmax: &[u32], input_len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); input_len];
    for (&v, &idx) in values.iter().zip(argmax) {
        out[idx as usize] = out[idx as usize] + v;
    }
    out
}

pub fn global_avg_pool<T: Real>(input: &[T], c: usize, hw: usize) -> Vec<T> {
    let scale = T::one() / T::from_f64(hw as f64);
    input
        .chunks(hw)
        .take(c)
        .map(|plane| plane.iter().copied().sum::<T>() * scale)
        .collect()
}

/// `weight` is `o x i`.
pub fn fully_connected<T: Real>(input: &[T], weight: &[T], bias: Option<&[T]>, o: usize) -> Vec<T> {
    let i = input.len();
    let mut out = match bias {
        Some(b) => b.to_vec(),
        None => vec![T::zero(); o],
    };
    T::gemm(
        o,
        i,
        1,
        T::one(),
        weight,
        i as isize,
        1,
        input,
        1,
        1,
        T::one(),
        &mut out,
        1,
        1,
    );
    out
}

/// `weight^T * grad_out`.
pub fn fully_connected_transpose<T: Real>(grad_out: &[T], weight: &[T], i: usize) -> Vec<T> {
    let o = grad_out.len();
    let mut out = vec![T::zero(); i];
    T::gemm(
        i,
        o,
        1,
        T::one(),
        weight,
        1,
        i as isize,
        grad_out,
        1,
        1,
        T::zero(),
        &mut out,
        1,
        1,
    );
    out
}

/// Norms below this are treated as zero by the normalization layer.
pub const NORM_EPS: f64 = 1e-12;

pub fn l2_normalize<T: Real>(input: &[T]) -> Vec<T> {
    let norm = input.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm.to_f64() < NORM_EPS {
        // A zero vector has no direction; fall back to the uniform unit vector.
        let v = T::one() / T::from_f64((input.len() as f64).sqrt());
        return vec![v; input.len()];
    }
    input.iter().map(|&v| v / norm).collect()
}

/// Vector-Jacobian product of [`l2_normalize`]: `(g - y (y . g)) / |x|`.
pub fn l2_normalize_backward<T: Real>(input: &[T], output: &[T], grad_out: &[T]) -> Vec<T> {
    let norm = input.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm.to_f64() < NORM_EPS {
        return vec![T::zero(); input.len()];
    }
    let proj: T = output.iter().zip(grad_out).map(|(&y, &g)| y * g).sum();
    output
        .iter()
        .zip(grad_out)
        .map(|(&y, &g)| (g - y * proj) / norm)
        .collect()
}

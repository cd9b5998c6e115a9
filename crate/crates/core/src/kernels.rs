// Flat-buffer numeric kernels shared by the eager tensor API and the tape.
//
// Every kernel fixes its accumulation order, so results are bitwise
// reproducible for identical inputs.

use crate::tensor::Scalar;

/// `out += a[m×k] · b[k×n]`, all row-major.
pub(crate) fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut i = 0;
    // Four output rows share each streamed row of `b`.
    while i + 4 <= m {
        let (c0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let (x0, x1, x2, x3) = (a0[p], a1[p], a2[p], a3[p]);
            for ((((bv, y0), y1), y2), y3) in brow
                .iter()
                .zip(c0.iter_mut())
                .zip(c1.iter_mut())
                .zip(c2.iter_mut())
                .zip(c3.iter_mut())
            {
                *y0 = *y0 + x0 * *bv;
                *y1 = *y1 + x1 * *bv;
                *y2 = *y2 + x2 * *bv;
                *y3 = *y3 + x3 * *bv;
            }
        }
        i += 4;
    }
    while i < m {
        let crow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for p in 0..k {
            let x = arow[p];
            let brow = &b[p * n..(p + 1) * n];
            for (y, bv) in crow.iter_mut().zip(brow) {
                *y = *y + x * *bv;
            }
        }
        i += 1;
    }
}

/// `out = a · b`.
pub(crate) fn gemm<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|v| *v = T::zero());
    gemm_acc(a, b, out, m, k, n);
}

/// `out += a · bᵀ` where `b` is `[n×k]`.
pub(crate) fn gemm_nt_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    let bt = transpose(b, n, k);
    gemm_acc(a, &bt, out, m, k, n);
}

/// `out += aᵀ · b` where `a` is `[k×m]`.
pub(crate) fn gemm_tn_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    let at = transpose(a, k, m);
    gemm_acc(&at, b, out, m, k, n);
}

pub(crate) fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    const BLOCK: usize = 32;
    for r0 in (0..rows).step_by(BLOCK) {
        for c0 in (0..cols).step_by(BLOCK) {
            for r in r0..(r0 + BLOCK).min(rows) {
                for c in c0..(c0 + BLOCK).min(cols) {
                    out[c * rows + r] = a[r * cols + c];
                }
            }
        }
    }
    out
}

/// In-place max-subtracted softmax over each contiguous row of width `cols`.
pub(crate) fn softmax_rows<T: Scalar>(x: &mut [T], cols: usize) {
    for row in x.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        let inv = T::one() / total;
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
}

/// Softmax backward for rows: `dx = y ∘ (dy − ⟨dy, y⟩)`, accumulated into `dx`.
pub(crate) fn softmax_rows_backward_acc<T: Scalar>(y: &[T], dy: &[T], dx: &mut [T], cols: usize) {
    for ((yr, dyr), dxr) in y
        .chunks_exact(cols)
        .zip(dy.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
    {
        let dot: T = yr.iter().zip(dyr).map(|(a, b)| *a * *b).sum();
        for ((g, yv), dyv) in dxr.iter_mut().zip(yr).zip(dyr) {
            *g = *g + *yv * (*dyv - dot);
        }
    }
}

pub(crate) fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

const GELU_COEF: f64 = 0.044_715;
// sqrt(2 / pi)
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Tanh-approximated GELU.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(SQRT_2_OVER_PI);
    let a = T::of(GELU_COEF);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(SQRT_2_OVER_PI);
    let a = T::of(GELU_COEF);
    let half = T::of(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// Geometry of a batched multi-head attention call. Queries are
/// `[batch·q_len × width]`, keys and values `[batch·kv_len × width]`, and
/// each head owns a contiguous `width / heads` column band.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct AttnShape {
    pub batch: usize,
    pub heads: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub width: usize,
}

impl AttnShape {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn probs_len(&self) -> usize {
        self.batch * self.heads * self.q_len * self.kv_len
    }
}

fn gather_head<T: Scalar>(src: &[T], rows: usize, width: usize, col0: usize, dh: usize, dst: &mut [T]) {
    for r in 0..rows {
        dst[r * dh..(r + 1) * dh].copy_from_slice(&src[r * width + col0..r * width + col0 + dh]);
    }
}

fn scatter_head_acc<T: Scalar>(src: &[T], rows: usize, width: usize, col0: usize, dh: usize, dst: &mut [T]) {
    for r in 0..rows {
        add_into(&mut dst[r * width + col0..r * width + col0 + dh], &src[r * dh..(r + 1) * dh]);
    }
}

/// Scaled dot-product attention for every (sample, head) pair. Writes the
/// concatenated head outputs to `out` and, when given, the row-stochastic
/// attention matrices to `probs` in (sample, head, query, key) order.
pub(crate) fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    s: AttnShape,
    out: &mut [T],
    mut probs: Option<&mut [T]>,
) {
    let dh = s.head_dim();
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut qh = vec![T::zero(); s.q_len * dh];
    let mut kh = vec![T::zero(); s.kv_len * dh];
    let mut vh = vec![T::zero(); s.kv_len * dh];
    let mut scores = vec![T::zero(); s.q_len * s.kv_len];
    let mut oh = vec![T::zero(); s.q_len * dh];
    out.iter_mut().for_each(|x| *x = T::zero());
    for b in 0..s.batch {
        let qb = &q[b * s.q_len * s.width..(b + 1) * s.q_len * s.width];
        let kb = &k[b * s.kv_len * s.width..(b + 1) * s.kv_len * s.width];
        let vb = &v[b * s.kv_len * s.width..(b + 1) * s.kv_len * s.width];
        for h in 0..s.heads {
            let col0 = h * dh;
            gather_head(qb, s.q_len, s.width, col0, dh, &mut qh);
            gather_head(kb, s.kv_len, s.width, col0, dh, &mut kh);
            gather_head(vb, s.kv_len, s.width, col0, dh, &mut vh);
            scores.iter_mut().for_each(|x| *x = T::zero());
            gemm_nt_acc(&qh, &kh, &mut scores, s.q_len, dh, s.kv_len);
            scores.iter_mut().for_each(|x| *x = *x * scale);
            softmax_rows(&mut scores, s.kv_len);
            gemm(&scores, &vh, &mut oh, s.q_len, s.kv_len, dh);
            let ob = &mut out[b * s.q_len * s.width..(b + 1) * s.q_len * s.width];
            scatter_head_acc(&oh, s.q_len, s.width, col0, dh, ob);
            if let Some(p) = probs.as_deref_mut() {
                let off = (b * s.heads + h) * s.q_len * s.kv_len;
                p[off..off + scores.len()].copy_from_slice(&scores);
            }
        }
    }
}

/// Gradients of [`attention_forward`] given its saved attention matrices.
/// Any of the three destination buffers may be absent.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    s: AttnShape,
    mut dq: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    mut dv: Option<&mut [T]>,
) {
    let dh = s.head_dim();
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut qh = vec![T::zero(); s.q_len * dh];
    let mut kh = vec![T::zero(); s.kv_len * dh];
    let mut vh = vec![T::zero(); s.kv_len * dh];
    let mut doh = vec![T::zero(); s.q_len * dh];
    let mut dp = vec![T::zero(); s.q_len * s.kv_len];
    let mut ds = vec![T::zero(); s.q_len * s.kv_len];
    let mut dqh = vec![T::zero(); s.q_len * dh];
    let mut dkh = vec![T::zero(); s.kv_len * dh];
    let mut dvh = vec![T::zero(); s.kv_len * dh];
    let qstride = s.q_len * s.width;
    let kstride = s.kv_len * s.width;
    for b in 0..s.batch {
        let qb = &q[b * qstride..(b + 1) * qstride];
        let kb = &k[b * kstride..(b + 1) * kstride];
        let vb = &v[b * kstride..(b + 1) * kstride];
        let dob = &dout[b * qstride..(b + 1) * qstride];
        for h in 0..s.heads {
            let col0 = h * dh;
            let off = (b * s.heads + h) * s.q_len * s.kv_len;
            let p = &probs[off..off + s.q_len * s.kv_len];
            gather_head(dob, s.q_len, s.width, col0, dh, &mut doh);
            if let Some(dv) = dv.as_deref_mut() {
                dvh.iter_mut().for_each(|x| *x = T::zero());
                gemm_tn_acc(p, &doh, &mut dvh, s.kv_len, s.q_len, dh);
                scatter_head_acc(&dvh, s.kv_len, s.width, col0, dh, &mut dv[b * kstride..(b + 1) * kstride]);
            }
            if dq.is_none() && dk.is_none() {
                continue;
            }
            gather_head(vb, s.kv_len, s.width, col0, dh, &mut vh);
            dp.iter_mut().for_each(|x| *x = T::zero());
            gemm_nt_acc(&doh, &vh, &mut dp, s.q_len, dh, s.kv_len);
            ds.iter_mut().for_each(|x| *x = T::zero());
            softmax_rows_backward_acc(p, &dp, &mut ds, s.kv_len);
            ds.iter_mut().for_each(|x| *x = *x * scale);
            if let Some(dq) = dq.as_deref_mut() {
                gather_head(kb, s.kv_len, s.width, col0, dh, &mut kh);
                gemm(&ds, &kh, &mut dqh, s.q_len, s.kv_len, dh);
                scatter_head_acc(&dqh, s.q_len, s.width, col0, dh, &mut dq[b * qstride..(b + 1) * qstride]);
            }
            if let Some(dk) = dk.as_deref_mut() {
                gather_head(qb, s.q_len, s.width, col0, dh, &mut qh);
                dkh.iter_mut().for_each(|x| *x = T::zero());
                gemm_tn_acc(&ds, &qh, &mut dkh, s.kv_len, s.q_len, dh);
                scatter_head_acc(&dkh, s.kv_len, s.width, col0, dh, &mut dk[b * kstride..(b + 1) * kstride]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn gemm_matches_triple_loop_on_odd_sizes() {
        for &(m, k, n) in &[(1, 1, 1), (5, 3, 7), (9, 11, 2), (4, 4, 4), (13, 1, 6)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
            let mut out = vec![0.0; m * n];
            gemm(&a, &b, &mut out, m, k, n);
            let expect = naive(&a, &b, m, k, n);
            for (x, y) in out.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_variants_agree() {
        let (m, k, n) = (6, 5, 3);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 - 7.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sqrt()).collect();
        let expect = naive(&a, &b, m, k, n);
        let mut nt = vec![0.0; m * n];
        gemm_nt_acc(&a, &transpose(&b, k, n), &mut nt, m, k, n);
        let mut tn = vec![0.0; m * n];
        gemm_tn_acc(&transpose(&a, m, k), &b, &mut tn, m, k, n);
        for i in 0..m * n {
            assert!((nt[i] - expect[i]).abs() < 1e-9);
            assert!((tn[i] - expect[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn gelu_fixed_points_and_derivative() {
        assert_eq!(gelu(0.0f64), 0.0);
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}

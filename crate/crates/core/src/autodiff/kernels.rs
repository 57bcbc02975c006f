//! Slice-level numeric kernels shared by forward and backward passes.
//! The matrix kernels accumulate into `out` (`out += ...`).

use super::tensor::Real;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn mm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn mm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = out[i * n + j] + dot(arow, brow);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn mm_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // Four accumulators let the compiler vectorize without reassociating one sum.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] = acc[l] + a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

#[inline]
pub fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// `y += alpha · x`
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o = *o + alpha * v;
    }
}

/// Stable softmax of one row; masked columns get exactly zero.
pub fn softmax_row<T: Real>(x: &[T], mask: Option<&[bool]>, out: &mut [T]) {
    let keep = |c: usize| mask.map_or(true, |m| m[c]);
    let mut max = T::neg_infinity();
    for (c, &v) in x.iter().enumerate() {
        if keep(c) && v > max {
            max = v;
        }
    }
    let mut total = T::zero();
    for (c, &v) in x.iter().enumerate() {
        out[c] = if keep(c) { (v - max).exp() } else { T::zero() };
        total = total + out[c];
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

/// GELU (tanh form) and its derivative.
#[inline]
pub fn gelu<T: Real>(x: T) -> (T, T) {
    let s = T::of((2.0 / std::f64::consts::PI).sqrt());
    let c = T::of(0.044_715);
    let half = T::of(0.5);
    let x2 = x * x;
    let inner = s * (x + c * x2 * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dinner = s * (T::one() + T::of(3.0) * c * x2);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (y, dy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_kernels_agree_with_nn() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut nn = [0.0; 4];
        mm_nn(&a, &b, &mut nn, 2, 3, 2);
        assert_eq!(nn, [58.0, 64.0, 139.0, 154.0]);

        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut nt = [0.0; 4];
        mm_nt(&a, &bt, &mut nt, 2, 3, 2);
        assert_eq!(nn, nt);

        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut tn = [0.0; 4];
        mm_tn(&at, &b, &mut tn, 3, 2, 2);
        assert_eq!(nn, tn);
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-2.0f64, -0.5, 0.0, 0.3, 1.7] {
            let h = 1e-6;
            let fd = (gelu(x + h).0 - gelu(x - h).0) / (2.0 * h);
            assert!((fd - gelu(x).1).abs() < 1e-8);
        }
    }
}

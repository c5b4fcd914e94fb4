//! Integer-order Bessel functions of the first kind and their zeros.
//!
//! Values come from Miller's backward recurrence normalized by
//! `J_0 + 2 * sum J_{2m} = 1`, which is accurate for every order at once.

const RESCALE: f64 = 1e250;

fn start_order(order: usize, x: f64) -> usize {
    let top = (order as f64).max(x);
    let m = top as usize + 20 + (40.0 * top).sqrt() as usize;
    m + (m & 1)
}

/// `J_0(x) ..= J_max_order(x)` for `x >= 0`.
pub fn bessel_j_all(max_order: usize, x: f64) -> Vec<f64> {
    let mut out = vec![0.0; max_order + 1];
    if x == 0.0 {
        out[0] = 1.0;
        return out;
    }
    let x = x.abs();
    let m = start_order(max_order, x);
    let two_over_x = 2.0 / x;
    let (mut next, mut cur) = (0.0f64, 1e-300f64);
    let mut norm = 0.0;
    for k in (0..=m).rev() {
        // cur holds the unnormalized J_k
        if k <= max_order {
            out[k] = cur;
        }
        if k % 2 == 0 {
            norm += if k == 0 { cur } else { 2.0 * cur };
        }
        if k == 0 {
            break;
        }
        let prev = k as f64 * two_over_x * cur - next;
        next = cur;
        cur = prev;
        if cur.abs() > RESCALE {
            cur /= RESCALE;
            next /= RESCALE;
            norm /= RESCALE;
            out.iter_mut().for_each(|v| *v /= RESCALE);
        }
    }
    out.iter_mut().for_each(|v| *v /= norm);
    out
}

/// `J_order(x)` for `x >= 0`.
pub fn bessel_j(order: usize, x: f64) -> f64 {
    if x == 0.0 {
        return if order == 0 { 1.0 } else { 0.0 };
    }
    let x = x.abs();
    let m = start_order(order, x);
    let two_over_x = 2.0 / x;
    let (mut next, mut cur) = (0.0f64, 1e-300f64);
    let mut norm = 0.0;
    let mut value = 0.0;
    for k in (0..=m).rev() {
        if k == order {
            value = cur;
        }
        if k % 2 == 0 {
            norm += if k == 0 { cur } else { 2.0 * cur };
        }
        if k == 0 {
            break;
        }
        let prev = k as f64 * two_over_x * cur - next;
        next = cur;
        cur = prev;
        if cur.abs() > RESCALE {
            cur /= RESCALE;
            next /= RESCALE;
            norm /= RESCALE;
            value /= RESCALE;
        }
    }
    value / norm
}

/// Positive zeros of `J_order` not exceeding `limit`, ascending.
pub fn bessel_zeros_below(order: usize, limit: f64) -> Vec<f64> {
    // no zeros of J_k lie in (0, k]
    let start = if order == 0 { 1e-3 } else { order as f64 };
    if start >= limit {
        return Vec::new();
    }
    const STEP: f64 = 0.1;
    let mut zeros = Vec::new();
    let mut a = start;
    let mut fa = bessel_j(order, a);
    while a < limit {
        let b = (a + STEP).min(limit);
        let fb = bessel_j(order, b);
        if fb == 0.0 {
            zeros.push(b);
        } else if fa != 0.0 && fa.signum() != fb.signum() {
            zeros.push(bisect(order, a, b, fa));
        }
        a = b;
        fa = fb;
    }
    zeros
}

fn bisect(order: usize, mut lo: f64, mut hi: f64, mut f_lo: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = bessel_j(order, mid);
        if fm == 0.0 {
            return mid;
        }
        if fm.signum() == f_lo.signum() {
            lo = mid;
            f_lo = fm;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

//! Polynomial exp/ln/sin/cos and vectorized slice kernels for the hot
//! activation and encoding paths.
//!
//! Accuracy is a few ulp over the ranges the networks use (validated against
//! the standard library in tests). Scalar and AVX-512 paths share the same
//! algorithm with fused multiply-adds, and every element is always processed
//! by the same lane structure, so results are reproducible run to run.

use std::f64::consts::{FRAC_PI_2, LOG2_E, SQRT_2};

// Cody-Waite split of ln(2).
const LN2_HI: f64 = 6.931471803691238e-1;
const LN2_LO: f64 = 1.9082149292705877e-10;

// exp Taylor coefficients 1/k! for k = 14 down to 2.
const EXP_COEFFS: [f64; 13] = [
    1.0 / 87178291200.0,
    1.0 / 6227020800.0,
    1.0 / 479001600.0,
    1.0 / 39916800.0,
    1.0 / 3628800.0,
    1.0 / 362880.0,
    1.0 / 40320.0,
    1.0 / 5040.0,
    1.0 / 720.0,
    1.0 / 120.0,
    1.0 / 24.0,
    1.0 / 6.0,
    0.5,
];

// atanh(z)/z series coefficients 1/(2k+1) for k = 10 down to 1.
const ATANH_COEFFS: [f64; 10] = [
    1.0 / 21.0,
    1.0 / 19.0,
    1.0 / 17.0,
    1.0 / 15.0,
    1.0 / 13.0,
    1.0 / 11.0,
    1.0 / 9.0,
    1.0 / 7.0,
    1.0 / 5.0,
    1.0 / 3.0,
];

/// e^x to within ~1 ulp for |x| <= ~700.
#[inline]
pub fn fast_exp(x: f64) -> f64 {
    if x > 709.0 {
        return f64::INFINITY;
    }
    if x < -745.0 {
        return 0.0;
    }
    let n = (x * LOG2_E).round();
    let r = n.mul_add(-LN2_LO, n.mul_add(-LN2_HI, x));
    let mut p = EXP_COEFFS[0];
    for &c in &EXP_COEFFS[1..] {
        p = p.mul_add(r, c);
    }
    p = p.mul_add(r, 1.0);
    p = p.mul_add(r, 1.0);
    let n = n as i64;
    if n >= -1021 {
        f64::from_bits((p.to_bits() as i64 + (n << 52)) as u64)
    } else {
        // Subnormal landing zone: scale in two steps.
        let half = f64::from_bits((p.to_bits() as i64 + ((n + 512) << 52)) as u64);
        half * f64::from_bits(((-512i64 + 1023) << 52) as u64)
    }
}

#[inline]
fn atanh_ratio(z2: f64) -> f64 {
    let mut s = ATANH_COEFFS[0];
    for &c in &ATANH_COEFFS[1..] {
        s = s.mul_add(z2, c);
    }
    s.mul_add(z2, 1.0)
}

/// Natural log for finite positive v.
#[inline]
pub fn fast_ln(v: f64) -> f64 {
    debug_assert!(v > 0.0 && v.is_finite());
    let bits = v.to_bits();
    let mut e = ((bits >> 52) & 0x7ff) as i64 - 1023;
    let mut m = f64::from_bits((bits & 0x000f_ffff_ffff_ffff) | 0x3ff0_0000_0000_0000);
    if m > SQRT_2 {
        m *= 0.5;
        e += 1;
    }
    let z = (m - 1.0) / (m + 1.0);
    (e as f64).mul_add(LN2_HI, (2.0 * z).mul_add(atanh_ratio(z * z), e as f64 * LN2_LO))
}

/// ln(1 + u) for u >= 0 without cancellation: 2 atanh(u / (2 + u)).
#[inline]
pub fn fast_ln_1p(u: f64) -> f64 {
    debug_assert!(u >= 0.0);
    if u <= 0.414 {
        let z = u / (2.0 + u);
        2.0 * z * atanh_ratio(z * z)
    } else {
        fast_ln(1.0 + u)
    }
}

/// Softplus ln(1 + exp(beta x)) / beta through the branch-free identity
/// `max(t, 0) + ln1p(exp(-|t|))` with the exp argument clamped away from the
/// subnormal range.
#[inline]
pub fn softplus_value(x: f64, beta: f64) -> f64 {
    let t = beta * x;
    let a = (-t.abs()).max(-708.0);
    (t.max(0.0) + fast_ln_1p(fast_exp(a))) / beta
}

/// Logistic function via one exp of a non-positive argument.
#[inline]
pub fn sigmoid_value(x: f64) -> f64 {
    let a = (-x.abs()).max(-708.0);
    let e = fast_exp(a);
    if x >= 0.0 {
        1.0 / (1.0 + e)
    } else {
        e / (1.0 + e)
    }
}

// Three-part split of pi/2 for argument reduction up to a few thousand
// quadrants without drift.
const PIO2_HI: f64 = 1.5707963267341256e0;
const PIO2_MID: f64 = 6.077100506506192e-11;
const PIO2_LO: f64 = 2.0222662487959506e-21;

// sin(r) = r - r^3 * P(r^2): P coefficients for k = 17 down to 3.
const SIN_COEFFS: [f64; 8] = [
    -1.0 / 355687428096000.0,
    1.0 / 1307674368000.0,
    -1.0 / 6227020800.0,
    1.0 / 39916800.0,
    -1.0 / 362880.0,
    1.0 / 5040.0,
    -1.0 / 120.0,
    1.0 / 6.0,
];

// cos(r) = 1 - r^2 * Q(r^2): Q coefficients for k = 16 down to 2.
const COS_COEFFS: [f64; 8] = [
    -1.0 / 20922789888000.0,
    1.0 / 87178291200.0,
    -1.0 / 479001600.0,
    1.0 / 3628800.0,
    -1.0 / 40320.0,
    1.0 / 720.0,
    -1.0 / 24.0,
    0.5,
];

#[inline]
fn sin_poly(r: f64) -> f64 {
    let r2 = r * r;
    let mut p = SIN_COEFFS[0];
    for &c in &SIN_COEFFS[1..] {
        p = p.mul_add(r2, c);
    }
    (-r * r2).mul_add(p, r)
}

#[inline]
fn cos_poly(r: f64) -> f64 {
    let r2 = r * r;
    let mut p = COS_COEFFS[0];
    for &c in &COS_COEFFS[1..] {
        p = p.mul_add(r2, c);
    }
    (-r2).mul_add(p, 1.0)
}

#[inline]
fn reduce_quadrant(a: f64) -> (i64, f64) {
    let k = (a * (1.0 / FRAC_PI_2)).round();
    let r = k.mul_add(-PIO2_LO, k.mul_add(-PIO2_MID, k.mul_add(-PIO2_HI, a)));
    (k as i64, r)
}

/// sin(a); intended for |a| up to a few thousand (encoding frequencies).
#[inline]
pub fn fast_sin(a: f64) -> f64 {
    let (k, r) = reduce_quadrant(a);
    match k.rem_euclid(4) {
        0 => sin_poly(r),
        1 => cos_poly(r),
        2 => -sin_poly(r),
        _ => -cos_poly(r),
    }
}

/// cos(a); same domain notes as [`fast_sin`].
#[inline]
pub fn fast_cos(a: f64) -> f64 {
    let (k, r) = reduce_quadrant(a);
    match k.rem_euclid(4) {
        0 => cos_poly(r),
        1 => -sin_poly(r),
        2 => -cos_poly(r),
        _ => sin_poly(r),
    }
}

// ---------------------------------------------------------------------------
// Slice kernels. Eight-lane AVX-512 bodies with a scalar tail; on targets
// without AVX-512 the scalar loop handles everything.

/// Elementwise softplus.
pub fn softplus_map(src: &[f64], beta: f64) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    #[cfg(all(target_arch = "x86_64", target_feature = "avx512f", target_feature = "avx512dq"))]
    let done = unsafe { avx512::softplus(src, beta, &mut out) };
    #[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f", target_feature = "avx512dq")))]
    let done = 0;
    for i in done..src.len() {
        out[i] = softplus_value(src[i], beta);
    }
    out
}

/// Elementwise logistic.
pub fn sigmoid_map(src: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    #[cfg(all(target_arch = "x86_64", target_feature = "avx512f", target_feature = "avx512dq"))]
    let done = unsafe { avx512::sigmoid(src, &mut out) };
    #[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f", target_feature = "avx512dq")))]
    let done = 0;
    for i in done..src.len() {
        out[i] = sigmoid_value(src[i]);
    }
    out
}

/// g[i] += u[i] * sigmoid(beta * x[i]): the softplus backward accumulation.
pub fn softplus_deriv_acc(g: &mut [f64], u: &[f64], x: &[f64], beta: f64) {
    #[cfg(all(target_arch = "x86_64", target_feature = "avx512f", target_feature = "avx512dq"))]
    let done = unsafe { avx512::softplus_deriv_acc(g, u, x, beta) };
    #[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f", target_feature = "avx512dq")))]
    let done = 0;
    for i in done..g.len() {
        g[i] += u[i] * sigmoid_value(beta * x[i]);
    }
}

/// Elementwise sine.
pub fn sin_map(src: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    #[cfg(all(target_arch = "x86_64", target_feature = "avx512f", target_feature = "avx512dq"))]
    let done = unsafe { avx512::sin_cos(src, &mut out, false) };
    #[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f", target_feature = "avx512dq")))]
    let done = 0;
    for i in done..src.len() {
        out[i] = fast_sin(src[i]);
    }
    out
}

/// Elementwise cosine.
pub fn cos_map(src: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    #[cfg(all(target_arch = "x86_64", target_feature = "avx512f", target_feature = "avx512dq"))]
    let done = unsafe { avx512::sin_cos(src, &mut out, true) };
    #[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f", target_feature = "avx512dq")))]
    let done = 0;
    for i in done..src.len() {
        out[i] = fast_cos(src[i]);
    }
    out
}

/// Elementwise exp.
pub fn exp_map(src: &[f64]) -> Vec<f64> {
    src.iter().map(|&x| fast_exp(x)).collect()
}

#[cfg(all(target_arch = "x86_64", target_feature = "avx512f", target_feature = "avx512dq"))]
mod avx512 {
    use super::*;
    use std::arch::x86_64::*;

    const ROUND_NEAREST: i32 = _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC;

    /// e^a for lanes with a in [-708, 0].
    #[inline]
    unsafe fn exp_nonpos(a: __m512d) -> __m512d {
        let n = _mm512_roundscale_pd::<ROUND_NEAREST>(_mm512_mul_pd(a, _mm512_set1_pd(LOG2_E)));
        let mut r = _mm512_fmadd_pd(n, _mm512_set1_pd(-LN2_HI), a);
        r = _mm512_fmadd_pd(n, _mm512_set1_pd(-LN2_LO), r);
        let mut p = _mm512_set1_pd(EXP_COEFFS[0]);
        for &c in &EXP_COEFFS[1..] {
            p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(c));
        }
        let one = _mm512_set1_pd(1.0);
        p = _mm512_fmadd_pd(p, r, one);
        p = _mm512_fmadd_pd(p, r, one);
        // Scale by 2^n through the exponent bits; n in [-1022, 0] here.
        let shifted = _mm512_slli_epi64::<52>(_mm512_cvtpd_epi64(n));
        _mm512_castsi512_pd(_mm512_add_epi64(_mm512_castpd_si512(p), shifted))
    }

    #[inline]
    unsafe fn atanh_ratio_v(z2: __m512d) -> __m512d {
        let mut s = _mm512_set1_pd(ATANH_COEFFS[0]);
        for &c in &ATANH_COEFFS[1..] {
            s = _mm512_fmadd_pd(s, z2, _mm512_set1_pd(c));
        }
        _mm512_fmadd_pd(s, z2, _mm512_set1_pd(1.0))
    }

    /// ln(1 + u) for lanes with u in [0, 1]: z = u/(2+u) never cancels.
    #[inline]
    unsafe fn ln_1p_unit(u: __m512d) -> __m512d {
        let z = _mm512_div_pd(u, _mm512_add_pd(_mm512_set1_pd(2.0), u));
        let z2 = _mm512_mul_pd(z, z);
        _mm512_mul_pd(_mm512_mul_pd(_mm512_set1_pd(2.0), z), atanh_ratio_v(z2))
    }

    pub unsafe fn softplus(src: &[f64], beta: f64, out: &mut [f64]) -> usize {
        let lanes = src.len() / 8 * 8;
        let vbeta = _mm512_set1_pd(beta);
        let inv_beta = _mm512_set1_pd(1.0 / beta);
        let zero = _mm512_setzero_pd();
        let clamp = _mm512_set1_pd(-708.0);
        let mut i = 0;
        while i < lanes {
            let x = _mm512_loadu_pd(src.as_ptr().add(i));
            let t = _mm512_mul_pd(x, vbeta);
            let neg_abs = _mm512_min_pd(t, _mm512_sub_pd(zero, t));
            let a = _mm512_max_pd(neg_abs, clamp);
            let lg = ln_1p_unit(exp_nonpos(a));
            let v = _mm512_mul_pd(_mm512_add_pd(_mm512_max_pd(t, zero), lg), inv_beta);
            _mm512_storeu_pd(out.as_mut_ptr().add(i), v);
            i += 8;
        }
        lanes
    }

    #[inline]
    unsafe fn sigmoid_vec(x: __m512d) -> __m512d {
        let zero = _mm512_setzero_pd();
        let one = _mm512_set1_pd(1.0);
        let neg_abs = _mm512_min_pd(x, _mm512_sub_pd(zero, x));
        let a = _mm512_max_pd(neg_abs, _mm512_set1_pd(-708.0));
        let e = exp_nonpos(a);
        let denom = _mm512_add_pd(one, e);
        let pos = _mm512_div_pd(one, denom);
        let neg = _mm512_div_pd(e, denom);
        let mask = _mm512_cmp_pd_mask::<_CMP_GE_OQ>(x, zero);
        _mm512_mask_blend_pd(mask, neg, pos)
    }

    pub unsafe fn sigmoid(src: &[f64], out: &mut [f64]) -> usize {
        let lanes = src.len() / 8 * 8;
        let mut i = 0;
        while i < lanes {
            let x = _mm512_loadu_pd(src.as_ptr().add(i));
            _mm512_storeu_pd(out.as_mut_ptr().add(i), sigmoid_vec(x));
            i += 8;
        }
        lanes
    }

    pub unsafe fn softplus_deriv_acc(g: &mut [f64], u: &[f64], x: &[f64], beta: f64) -> usize {
        let lanes = g.len() / 8 * 8;
        let vbeta = _mm512_set1_pd(beta);
        let mut i = 0;
        while i < lanes {
            let xv = _mm512_loadu_pd(x.as_ptr().add(i));
            let uv = _mm512_loadu_pd(u.as_ptr().add(i));
            let gv = _mm512_loadu_pd(g.as_ptr().add(i));
            let s = sigmoid_vec(_mm512_mul_pd(xv, vbeta));
            _mm512_storeu_pd(g.as_mut_ptr().add(i), _mm512_fmadd_pd(uv, s, gv));
            i += 8;
        }
        lanes
    }

    /// Writes sin (or cos when `cosine`) of each lane.
    pub unsafe fn sin_cos(src: &[f64], out: &mut [f64], cosine: bool) -> usize {
        let lanes = src.len() / 8 * 8;
        let inv_pio2 = _mm512_set1_pd(1.0 / FRAC_PI_2);
        let mut i = 0;
        while i < lanes {
            let a = _mm512_loadu_pd(src.as_ptr().add(i));
            let k = _mm512_roundscale_pd::<ROUND_NEAREST>(_mm512_mul_pd(a, inv_pio2));
            let mut r = _mm512_fmadd_pd(k, _mm512_set1_pd(-PIO2_HI), a);
            r = _mm512_fmadd_pd(k, _mm512_set1_pd(-PIO2_MID), r);
            r = _mm512_fmadd_pd(k, _mm512_set1_pd(-PIO2_LO), r);
            let r2 = _mm512_mul_pd(r, r);

            let mut sp = _mm512_set1_pd(SIN_COEFFS[0]);
            for &c in &SIN_COEFFS[1..] {
                sp = _mm512_fmadd_pd(sp, r2, _mm512_set1_pd(c));
            }
            let s = _mm512_fmadd_pd(
                _mm512_mul_pd(_mm512_sub_pd(_mm512_setzero_pd(), r), r2),
                sp,
                r,
            );
            let mut cp = _mm512_set1_pd(COS_COEFFS[0]);
            for &c in &COS_COEFFS[1..] {
                cp = _mm512_fmadd_pd(cp, r2, _mm512_set1_pd(c));
            }
            let c = _mm512_fmadd_pd(
                _mm512_sub_pd(_mm512_setzero_pd(), r2),
                cp,
                _mm512_set1_pd(1.0),
            );

            // Quadrant selection: q = k mod 4.
            // sin: q0 -> s, q1 -> c, q2 -> -s, q3 -> -c
            // cos: q0 -> c, q1 -> -s, q2 -> -c, q3 -> s
            let q = _mm512_and_epi64(_mm512_cvtpd_epi64(k), _mm512_set1_epi64(3));
            let odd = _mm512_cmpeq_epi64_mask(
                _mm512_and_epi64(q, _mm512_set1_epi64(1)),
                _mm512_set1_epi64(1),
            );
            // Odd quadrants take the co-function.
            let base = if cosine {
                _mm512_mask_blend_pd(odd, c, s)
            } else {
                _mm512_mask_blend_pd(odd, s, c)
            };
            // Negate when (q + [cos: 1, sin: 0]) & 2 != 0.
            let bias = if cosine { 1 } else { 0 };
            let negate = _mm512_cmpeq_epi64_mask(
                _mm512_and_epi64(
                    _mm512_add_epi64(q, _mm512_set1_epi64(bias)),
                    _mm512_set1_epi64(2),
                ),
                _mm512_set1_epi64(2),
            );
            let result =
                _mm512_mask_blend_pd(negate, base, _mm512_sub_pd(_mm512_setzero_pd(), base));
            _mm512_storeu_pd(out.as_mut_ptr().add(i), result);
            i += 8;
        }
        lanes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn assert_close(got: f64, want: f64, label: &str, x: f64) {
        let tol = 1e-13 * want.abs().max(1.0);
        assert!(
            (got - want).abs() <= tol,
            "{label}({x}): got {got}, want {want}"
        );
    }

    #[test]
    fn exp_matches_std() {
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..100_000 {
            let x = rng.gen_range(-60.0..60.0);
            assert_close(fast_exp(x), x.exp(), "exp", x);
        }
        for x in [-745.0, -300.0, 0.0, 1.0, 700.0] {
            assert_close(fast_exp(x), x.exp(), "exp", x);
        }
        assert_eq!(fast_exp(0.0), 1.0);
        assert_eq!(fast_exp(-1000.0), 0.0);
        assert!(fast_exp(800.0).is_infinite());
    }

    #[test]
    fn ln_matches_std() {
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..100_000 {
            let v = 10f64.powf(rng.gen_range(-12.0..12.0));
            let got = fast_ln(v);
            let want = v.ln();
            assert!(
                (got - want).abs() <= 1e-13 * want.abs().max(1.0),
                "ln({v}): {got} vs {want}"
            );
        }
        assert_eq!(fast_ln(1.0), 0.0);
    }

    #[test]
    fn ln_1p_matches_std() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..100_000 {
            let u = 10f64.powf(rng.gen_range(-16.0..2.0));
            let got = fast_ln_1p(u);
            let want = u.ln_1p();
            assert!(
                (got - want).abs() <= 1e-13 * want.abs().max(1e-20),
                "ln1p({u}): {got} vs {want}"
            );
        }
        assert_eq!(fast_ln_1p(0.0), 0.0);
    }

    #[test]
    fn sin_cos_match_std() {
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..200_000 {
            let a = rng.gen_range(-400.0..400.0);
            let s = fast_sin(a);
            let c = fast_cos(a);
            assert!((s - a.sin()).abs() < 1e-13, "sin({a}): {s} vs {}", a.sin());
            assert!((c - a.cos()).abs() < 1e-13, "cos({a}): {c} vs {}", a.cos());
        }
        assert_eq!(fast_sin(0.0), 0.0);
        assert_eq!(fast_cos(0.0), 1.0);
    }

    #[test]
    fn softplus_and_sigmoid_scalar_sanity() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..100_000 {
            let x = rng.gen_range(-3.0..3.0);
            let want = (100.0f64 * x).exp().ln_1p() / 100.0;
            let got = softplus_value(x, 100.0);
            assert!(
                (got - want).abs() <= 1e-13 * want.abs().max(1e-10) + 1e-15,
                "softplus({x}): {got} vs {want}"
            );
            let sg = sigmoid_value(x);
            let sw = 1.0 / (1.0 + (-x).exp());
            assert!((sg - sw).abs() < 1e-14, "sigmoid({x}): {sg} vs {sw}");
        }
        assert_eq!(sigmoid_value(0.0), 0.5);
    }

    /// The slice kernels must agree with the scalar functions on every lane,
    /// including the non-multiple-of-8 tail.
    #[test]
    fn slice_kernels_match_scalar() {
        let mut rng = StdRng::seed_from_u64(6);
        for len in [1usize, 7, 8, 9, 64, 1003] {
            let src: Vec<f64> = (0..len).map(|_| rng.gen_range(-40.0..40.0)).collect();
            let sp = softplus_map(&src, 100.0);
            let sg = sigmoid_map(&src);
            let sn = sin_map(&src);
            let cs = cos_map(&src);
            for i in 0..len {
                assert!((sp[i] - softplus_value(src[i], 100.0)).abs() < 1e-13);
                assert!((sg[i] - sigmoid_value(src[i])).abs() < 1e-13);
                assert!((sn[i] - fast_sin(src[i])).abs() < 1e-13);
                assert!((cs[i] - fast_cos(src[i])).abs() < 1e-13);
            }
            let u: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut g = vec![0.25; len];
            let mut g_ref = g.clone();
            softplus_deriv_acc(&mut g, &u, &src, 100.0);
            for i in 0..len {
                g_ref[i] += u[i] * sigmoid_value(100.0 * src[i]);
            }
            for i in 0..len {
                assert!((g[i] - g_ref[i]).abs() < 1e-13);
            }
        }
    }
}

//! Deterministic numeric helpers shared across the crate.

/// SplitMix64 finalizer. Bijective 64-bit mixing.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

/// Counter-based key derivation: folds the given words into one 64-bit key.
///
/// Keys for distinct word sequences are effectively independent, which makes
/// per-edge and per-replica streams order-free: the value drawn for an index
/// never depends on how many other indices were sampled before it.
pub fn stream_key(words: &[u64]) -> u64 {
    let mut acc: u64 = 0x243F_6A88_85A3_08D3; // pi fraction
    for &w in words {
        acc = mix64(acc ^ w).wrapping_add(0x9E37_79B9_7F4A_7C15);
    }
    mix64(acc)
}

/// Uniform in (0,1), 53-bit, strictly inside the open interval.
#[inline]
fn unit_open(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
}

/// One standard Gaussian deviate from a 64-bit key (Box-Muller).
#[inline]
pub fn standard_normal_from_key(key: u64) -> f64 {
    let u1 = unit_open(mix64(key ^ 0xD1B5_4A32_D192_ED03));
    let u2 = unit_open(mix64(key ^ 0x8CB9_2BA7_2F3D_8DD7));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Pairwise (cascade) summation. Deterministic for a fixed slice, and far
/// more accurate than a running sum on long vectors.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    const CUTOFF: usize = 64;
    if v.len() <= CUTOFF {
        let mut s = 0.0;
        for &x in v {
            s += x;
        }
        s
    } else {
        let mid = v.len() / 2;
        pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
    }
}

/// Pairwise-summed dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    fn go(a: &[f64], b: &[f64]) -> f64 {
        const CUTOFF: usize = 64;
        if a.len() <= CUTOFF {
            let mut s = 0.0;
            for i in 0..a.len() {
                s += a[i] * b[i];
            }
            s
        } else {
            let mid = a.len() / 2;
            go(&a[..mid], &b[..mid]) + go(&a[mid..], &b[mid..])
        }
    }
    go(a, b)
}

/// Euclidean norm via pairwise summation.
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Ordinary least squares for y = intercept + slope * x.
/// Returns (slope, intercept, r2). Requires at least two distinct x.
pub fn ols(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = pairwise_sum(x) / n;
    let my = pairwise_sum(y) / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, intercept, r2)
}

/// Mean and unbiased sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    assert!(n >= 2, "need at least two samples");
    let mean = pairwise_sum(v) / n as f64;
    let mut ss = 0.0;
    for &x in v {
        let d = x - mean;
        ss += d * d;
    }
    (mean, (ss / (n as f64 - 1.0)).sqrt())
}

//! Second-order Butterworth low-pass applied forward and backward.

/// `(b, a)` with `a[0] = 1`, from the bilinear transform.
pub fn butter2(cutoff_hz: f64, fs: f64) -> ([f64; 3], [f64; 3]) {
    let k = (std::f64::consts::PI * cutoff_hz / fs).tan();
    let s2 = std::f64::consts::SQRT_2;
    let norm = 1.0 / (1.0 + s2 * k + k * k);
    let b0 = k * k * norm;
    ([b0, 2.0 * b0, b0], [1.0, 2.0 * (k * k - 1.0) * norm, (1.0 - s2 * k + k * k) * norm])
}

/// Direct-form II transposed pass with the state initialized to the steady
/// state of a constant input equal to `x[0]`.
fn lfilter(b: &[f64; 3], a: &[f64; 3], x: &[f64]) -> Vec<f64> {
    let c = x[0];
    let mut z2 = (b[2] - a[2]) * c;
    let mut z1 = (b[1] - a[1]) * c + z2;
    x.iter()
        .map(|&xi| {
            let y = b[0] * xi + z1;
            z1 = b[1] * xi - a[1] * y + z2;
            z2 = b[2] * xi - a[2] * y;
            y
        })
        .collect()
}

/// Zero-phase filtering with odd extension at both ends.
pub fn filtfilt(b: &[f64; 3], a: &[f64; 3], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return x.to_vec();
    }
    let pad = 9.min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    let mut y = lfilter(b, a, &ext);
    y.reverse();
    let mut y = lfilter(b, a, &y);
    y.reverse();
    y[pad..pad + n].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_dc_gain_and_constant_passthrough() {
        let (b, a) = butter2(6.0, 30.0);
        let dc = (b[0] + b[1] + b[2]) / (a[0] + a[1] + a[2]);
        assert!((dc - 1.0).abs() < 1e-14);
        let y = filtfilt(&b, &a, &[2.5; 20]);
        assert!(y.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn attenuates_nyquist() {
        let (b, a) = butter2(6.0, 30.0);
        let x: Vec<f64> = (0..60).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let y = filtfilt(&b, &a, &x);
        assert!(y[20..40].iter().all(|v| v.abs() < 1e-2));
    }
}

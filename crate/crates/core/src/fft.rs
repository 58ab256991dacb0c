//! Iterative radix-2 complex FFT, sized to power-of-two frames.
//! Twiddle factors are evaluated in f64 and narrowed to the scalar type,
//! so f32 and f64 runs agree to scalar precision and repeated runs are
//! bitwise identical.

use crate::scalar::Scalar;

/// In-place forward DFT: X_k = sum_n x_n e^{-2*pi*i*k*n/N}.
/// `re.len()` must be a power of two and equal `im.len()`.
pub(crate) fn fft_in_place<S: Scalar>(re: &mut [S], im: &mut [S]) {
    let n = re.len();
    assert_eq!(n, im.len());
    assert!(n.is_power_of_two(), "fft length must be a power of two");
    if n < 2 {
        return;
    }

    // bit-reversal permutation
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = (i.reverse_bits() >> (usize::BITS - bits)) as usize;
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }

    let mut len = 2usize;
    while len <= n {
        let half = len / 2;
        let step = -2.0 * std::f64::consts::PI / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let angle = step * k as f64;
                let (wr, wi) = (S::of(angle.cos()), S::of(angle.sin()));
                let i = start + k;
                let j = i + half;
                let tr = wr * re[j] - wi * im[j];
                let ti = wr * im[j] + wi * re[j];
                re[j] = re[i] - tr;
                im[j] = im[i] - ti;
                re[i] = re[i] + tr;
                im[i] = im[i] + ti;
            }
        }
        len *= 2;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(x: &[f64]) -> Vec<(f64, f64)> {
        let n = x.len();
        (0..n)
            .map(|k| {
                let mut re = 0.0;
                let mut im = 0.0;
                for (i, &v) in x.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                (re, im)
            })
            .collect()
    }

    #[test]
    fn matches_naive_dft() {
        let x: Vec<f64> = (0..16).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
        let mut re = x.clone();
        let mut im = vec![0.0; x.len()];
        fft_in_place(&mut re, &mut im);
        for (k, (er, ei)) in naive_dft(&x).into_iter().enumerate() {
            assert!((re[k] - er).abs() < 1e-9, "bin {k} re");
            assert!((im[k] - ei).abs() < 1e-9, "bin {k} im");
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut re = vec![0.0f64; 8];
        let mut im = vec![0.0f64; 8];
        re[0] = 1.0;
        fft_in_place(&mut re, &mut im);
        for k in 0..8 {
            assert!((re[k] - 1.0).abs() < 1e-12);
            assert!(im[k].abs() < 1e-12);
        }
    }
}

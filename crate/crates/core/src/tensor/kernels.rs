//! Plain-loop matrix kernels. All accumulate into `out`.
//!
//! The row update is compiled twice: once for the baseline target and once
//! with AVX2 enabled, chosen at run time. Both perform the same scalar
//! multiply and add per element, so results are bitwise identical.

/// out[i] += a * b[i]
#[inline]
fn axpy(out: &mut [f64], a: f64, b: &[f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { axpy_avx2(out, a, b) };
            return;
        }
    }
    axpy_plain(out, a, b);
}

#[inline(always)]
fn axpy_plain(out: &mut [f64], a: f64, b: &[f64]) {
    for (o, &bv) in out.iter_mut().zip(b) {
        *o += a * bv;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn axpy_avx2(out: &mut [f64], a: f64, b: &[f64]) {
    axpy_plain(out, a, b);
}

/// out[m x n] += a[m x k] * b[k x n]
pub fn matmul_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            axpy(out_row, av, &b[p * n..(p + 1) * n]);
        }
    }
}

/// out[m x n] += a[m x k] * b[n x k]^T
pub fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    matmul_nn(a, &bt, out, m, k, n);
}

/// out[k x n] += a[m x k]^T * b[m x n]
pub fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            axpy(&mut out[p * n..(p + 1) * n], av, b_row);
        }
    }
}

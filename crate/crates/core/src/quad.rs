//! Adaptive Gauss–Kronrod (7/15) quadrature for vector-valued integrands.

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss weights for the odd Kronrod nodes (1, 3, 5) and the centre
const WG: [f64; 4] = [0.129_484_966_168_869_7, 0.279_705_391_489_276_7, 0.381_830_050_505_118_9, 0.417_959_183_673_469_4];

const MAX_INTERVALS: usize = 4000;

fn gk15<F: Fn(f64) -> Vec<f64>>(f: &F, a: f64, b: f64, dim: usize) -> (Vec<f64>, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut k = vec![0.0; dim];
    let mut g = vec![0.0; dim];
    let fc = f(c);
    for i in 0..dim {
        k[i] = WGK[7] * fc[i];
        g[i] = WG[3] * fc[i];
    }
    for (j, &x) in XGK.iter().take(7).enumerate() {
        let f1 = f(c - h * x);
        let f2 = f(c + h * x);
        for i in 0..dim {
            let s = f1[i] + f2[i];
            k[i] += WGK[j] * s;
            if j % 2 == 1 {
                g[i] += WG[j / 2] * s;
            }
        }
    }
    let mut err = 0.0f64;
    for i in 0..dim {
        k[i] *= h;
        g[i] *= h;
        err = err.max((k[i] - g[i]).abs());
    }
    (k, err)
}

/// ∫_a^b f over each of the `dim` components. Global adaptive bisection:
/// the interval with the largest Gauss/Kronrod difference is split until
/// the summed error is below `max(abs_tol, rel_tol·|I|)` or the
/// subinterval budget is spent (noisy integrands then cost a bounded
/// amount of work).
pub fn integrate_vec<F: Fn(f64) -> Vec<f64>>(f: &F, a: f64, b: f64, dim: usize, abs_tol: f64, rel_tol: f64) -> Vec<f64> {
    let (v, e) = gk15(f, a, b, dim);
    let mut parts = vec![(a, b, v, e)];
    loop {
        let mut total = vec![0.0; dim];
        let mut err = 0.0;
        for (_, _, v, e) in &parts {
            for i in 0..dim {
                total[i] += v[i];
            }
            err += e;
        }
        let scale = total.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if err <= abs_tol.max(rel_tol * scale) || parts.len() >= MAX_INTERVALS {
            return total;
        }
        let worst = (0..parts.len()).max_by(|&i, &j| parts[i].3.total_cmp(&parts[j].3)).unwrap_or(0);
        let (lo, hi, _, _) = parts.swap_remove(worst);
        let m = 0.5 * (lo + hi);
        if (hi - lo).abs() < 1e-14 * (1.0 + lo.abs()) {
            let (v, _) = gk15(f, lo, hi, dim);
            parts.push((lo, hi, v, 0.0));
            continue;
        }
        let (v1, e1) = gk15(f, lo, m, dim);
        let (v2, e2) = gk15(f, m, hi, dim);
        parts.push((lo, m, v1, e1));
        parts.push((m, hi, v2, e2));
    }
}

/// Scalar convenience wrapper.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> f64 {
    integrate_vec(&|x| vec![f(x)], a, b, 1, abs_tol, rel_tol)[0]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomials_are_exact() {
        let v = integrate(|x| x.powi(7) - 3.0 * x * x, -1.0, 2.0, 1e-14, 1e-14);
        let exact = (2f64.powi(8) - 1.0) / 8.0 - (8.0 + 1.0);
        assert!((v - exact).abs() < 1e-12);
    }

    #[test]
    fn smooth_and_peaked() {
        let v = integrate(|x| (-x).exp(), 0.0, 50.0, 1e-13, 1e-13);
        assert!((v - (1.0 - (-50f64).exp())).abs() < 1e-12);
        let v = integrate(|x| 1.0 / (1e-4 + x * x), -1.0, 1.0, 1e-10, 1e-12);
        let exact = 2.0 * (1.0 / 1e-2) * (1.0f64 / 1e-2).atan();
        assert!((v - exact).abs() < 1e-8 * exact);
    }
}

//! Gauss–Hermite rules.

/// Nodes and weights for `∫ f(x) e^{-x²} dx`, nodes in decreasing order.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5; // π^{-1/4}
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let mut z: f64 = 0.0;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let step = p1 / pp;
            z -= step;
            if step.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Rule for `E f(σ Z)`, `Z ~ N(0, 1)`: returns `(points, probabilities)`.
pub fn normal_rule(n: usize, sigma: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_hermite(n);
    let root_pi = std::f64::consts::PI.sqrt();
    let scale = std::f64::consts::SQRT_2 * sigma;
    (
        x.into_iter().map(|v| v * scale).collect(),
        w.into_iter().map(|v| v / root_pi).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_root_pi() {
        for n in [1, 2, 5, 20, 64, 128] {
            let (_, w) = gauss_hermite(n);
            let s: f64 = w.iter().sum();
            assert!((s - std::f64::consts::PI.sqrt()).abs() < 1e-12, "n = {n}: {s}");
        }
    }

    #[test]
    fn normal_moments() {
        for n in [8, 64, 128] {
            let (x, w) = normal_rule(n, 1.0);
            let m = |k: i32| x.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum::<f64>();
            assert!((m(2) - 1.0).abs() < 1e-12);
            assert!((m(4) - 3.0).abs() < 1e-11);
            assert!((m(6) - 15.0).abs() < 1e-10);
            assert!(m(3).abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_expectation_converges() {
        // E cos(Z) = e^{-1/2}
        let (x, w) = normal_rule(64, 1.0);
        let e: f64 = x.iter().zip(&w).map(|(x, w)| w * x.cos()).sum();
        assert!((e - (-0.5f64).exp()).abs() < 1e-14);
    }
}

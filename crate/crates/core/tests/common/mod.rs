#![allow(dead_code)]

//! Independent reference implementations used as test oracles.

/// Brute-force k-NN transduction: every distance is computed, sorted in
/// full and the first `kappa` summed.
pub mod oracle {
    fn dist(a: &[f64], b: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..a.len() {
            let d = a[i] - b[i];
            acc += d * d;
        }
        acc.sqrt()
    }

    fn knn_sum(mut d: Vec<f64>, kappa: usize) -> f64 {
        d.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let mut s = 0.0;
        for v in d.iter().take(kappa) {
            s += v;
        }
        s
    }

    pub fn baseline(x: &[Vec<f64>], kappa: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..x.len() {
            let mut d = Vec::new();
            for j in 0..x.len() {
                if i != j {
                    d.push(dist(&x[i], &x[j]));
                }
            }
            out.push(knn_sum(d, kappa));
        }
        out.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out
    }

    pub fn score(x: &[Vec<f64>], q: &[f64], kappa: usize) -> f64 {
        knn_sum(x.iter().map(|xi| dist(xi, q)).collect(), kappa)
    }

    /// `(1 + #{b >= score}) / (1 + n)` by linear scan.
    pub fn p_value(baseline: &[f64], score: f64) -> f64 {
        let mut index = 0;
        for &b in baseline {
            if b >= score {
                index += 1;
            }
        }
        (1 + index) as f64 / (1 + baseline.len()) as f64
    }
}

//! Frozen-rate matrix-exponential oracle for the PATH3 forward equations.

use nalgebra::{DMatrix, DVector};

/// Independent birth-death construction of the PATH3 generator for frozen
/// arrival intensities `r`; state per node is the queue length `0..=l` plus
/// the leak.
fn generator(l: usize, r: [f64; 3]) -> DMatrix<f64> {
    let w = l + 2;
    let mut q = DMatrix::<f64>::zeros(3 * w, 3 * w);
    // column-stochastic convention: dx/dt = Q x
    for v in 0..3 {
        let o = v * w;
        for n in 0..=l {
            let to = if n == l { l + 1 } else { n + 1 };
            q[(o + to, o + n)] += r[v];
            q[(o + n, o + n)] -= r[v];
            if n > 0 {
                q[(o + n - 1, o + n)] += 2.0;
                q[(o + n, o + n)] -= 2.0;
            }
        }
    }
    for (a, b) in [(0, 1), (1, 2)] {
        for k in 0..w {
            let (ia, ib) = (a * w + k, b * w + k);
            q[(ia, ib)] += 0.5;
            q[(ia, ia)] -= 0.5;
            q[(ib, ia)] += 0.5;
            q[(ib, ib)] -= 0.5;
        }
    }
    q
}

fn rates(l: usize, x: &DVector<f64>) -> [f64; 3] {
    // only v0 routes onward (to v1); v1 and v2 are within one hop of v2
    [1.0, 2.0 * (1.0 - x[0] - x[l + 1]), 0.0]
}

pub fn solve(l: usize, horizon: f64, h: f64) -> DVector<f64> {
    let w = l + 2;
    let mut x = DVector::<f64>::zeros(3 * w);
    for v in 0..3 {
        x[v * w] = 1.0;
    }
    let steps = (horizon / h).round() as usize;
    for _ in 0..steps {
        let mut r = rates(l, &x);
        let mut next = x.clone();
        for _ in 0..6 {
            next = (generator(l, r) * h).exp() * &x;
            let mid = (&x + &next) * 0.5;
            r = rates(l, &mid);
        }
        x = next;
    }
    x
}

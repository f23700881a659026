//! Central finite differences, for checking analytic gradients.

use crate::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the probed entries.
    pub relative_error: f64,
    /// Largest entrywise `|a − n| / max(|a|, |n|, floor)`.
    pub max_entry_error: f64,
    pub probed: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.relative_error < tol
    }
}

/// `(f(x + h e_i) − f(x − h e_i)) / 2h` for each probed index.
pub fn central_differences(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor, indices: &[usize], h: f64) -> Vec<f64> {
    let mut probe = x.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Compares `analytic` against central differences of `f` at the given
/// indices. `floor` guards the entrywise ratio against near-zero gradients.
pub fn check(
    f: &mut dyn FnMut(&Tensor) -> f64,
    x: &Tensor,
    analytic: &Tensor,
    indices: &[usize],
    h: f64,
    floor: f64,
) -> GradCheck {
    assert_eq!(x.shape(), analytic.shape());
    let numeric = central_differences(f, x, indices, h);
    let mut diff2 = 0.0;
    let mut a2 = 0.0;
    let mut n2 = 0.0;
    let mut worst: f64 = 0.0;
    for (&i, &n) in indices.iter().zip(&numeric) {
        let a = analytic.data()[i];
        diff2 += (a - n) * (a - n);
        a2 += a * a;
        n2 += n * n;
        worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(floor));
    }
    let denom = a2.sqrt().max(n2.sqrt());
    GradCheck {
        relative_error: if denom > 0.0 { diff2.sqrt() / denom } else { 0.0 },
        max_entry_error: worst,
        probed: indices.len(),
    }
}

/// Evenly spread probe indices (at most `count`) over `0..len`.
pub fn spread_indices(len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    (0..count).map(|i| i * (len - 1) / (count - 1).max(1)).collect()
}

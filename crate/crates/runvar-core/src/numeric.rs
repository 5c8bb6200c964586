//! Small numeric helpers shared across the crate.

/// Neumaier compensated accumulator. Keeps pairwise sums accurate to well
/// below 1e-12 relative error for the input sizes this crate handles.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub(crate) fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Sums a slice with compensation, in index order.
pub(crate) fn compensated_total(values: &[f64]) -> f64 {
    let mut acc = CompensatedSum::new();
    for &v in values {
        acc.add(v);
    }
    acc.value()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensation_beats_naive_on_adversarial_input() {
        // 1 + 2^-60 repeated: naive summation drops the small terms.
        let tiny = (2.0f64).powi(-60);
        let mut acc = CompensatedSum::new();
        acc.add(1.0);
        for _ in 0..1_000 {
            acc.add(tiny);
        }
        let expected = 1.0 + 1_000.0 * tiny;
        assert!((acc.value() - expected).abs() < 1e-30);
    }

    #[test]
    fn total_matches_simple_sum_on_benign_input() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64 * 0.5).collect();
        let simple: f64 = xs.iter().sum();
        assert_eq!(compensated_total(&xs), simple);
    }
}

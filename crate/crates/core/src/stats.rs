//! Summary statistics for per-task accuracies.

use alloc::vec::Vec;

use num_traits::Float;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.96;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (denominator `n − 1`); zero below two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    Float::sqrt(ss / (xs.len() - 1) as f64)
}

/// `1.96 · s / √n`.
pub fn ci95_half_width(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    Z95 * sample_std(xs) / Float::sqrt(xs.len() as f64)
}

/// `a[i] − b[i]`.
pub fn paired_differences(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub ci_half_width: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        Self {
            mean: mean(xs),
            ci_half_width: ci95_half_width(xs),
            n: xs.len(),
        }
    }

    pub fn lower(&self) -> f64 {
        self.mean - self.ci_half_width
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.ci_half_width
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn half_and_half() {
        let mut xs = vec![1.0; 500];
        xs.extend(vec![0.0; 500]);
        let s = Summary::of(&xs);
        assert_eq!(s.mean, 0.5);
        let expected = 1.96 * Float::sqrt(250.0 / 999.0) / Float::sqrt(1000.0);
        assert!((s.ci_half_width - expected).abs() < 1e-12);
        assert!((s.ci_half_width - 0.0310).abs() < 1e-4);
    }

    #[test]
    fn constant_has_zero_width() {
        assert_eq!(ci95_half_width(&[1.0; 10]), 0.0);
        assert_eq!(ci95_half_width(&[0.3]), 0.0);
        assert_eq!(mean(&[]), 0.0);
    }
}

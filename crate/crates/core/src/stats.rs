//! Mergeable sample moments (Chan–Pébay pairwise update).

use serde::{Deserialize, Serialize};

/// Count, mean and central moment sums `M2`, `M3`, `M4` of a sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments4 {
    pub n: u64,
    pub mean: f64,
    pub m2: f64,
    pub m3: f64,
    pub m4: f64,
}

impl Moments4 {
    pub fn from_value(x: f64) -> Self {
        Self { n: 1, mean: x, ..Self::default() }
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        xs.iter().fold(Self::default(), |acc, &x| acc.merge(&Self::from_value(x)))
    }

    pub fn push(&mut self, x: f64) {
        *self = self.merge(&Self::from_value(x));
    }

    /// Combined moments of two disjoint samples.
    pub fn merge(&self, other: &Self) -> Self {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let d = other.mean - self.mean;
        let d2 = d * d;
        let mean = self.mean + d * nb / n;
        let m2 = self.m2 + other.m2 + d2 * na * nb / n;
        let m3 = self.m3 + other.m3 + d * d2 * na * nb * (na - nb) / (n * n)
            + 3.0 * d * (na * other.m2 - nb * self.m2) / n;
        let m4 = self.m4
            + other.m4
            + d2 * d2 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * d2 * (na * na * other.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * d * (na * other.m3 - nb * self.m3) / n;
        Self { n: self.n + other.n, mean, m2, m3, m4 }
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    /// Standard error of the mean, `s/√N`.
    pub fn std_error(&self) -> f64 {
        if self.n == 0 {
            return f64::INFINITY;
        }
        (self.variance() / self.n as f64).sqrt()
    }

    /// Standard error of the sample variance, `√((m₄ − σ⁴(N−3)/(N−1))/N)` with plug-in moments.
    pub fn variance_std_error(&self) -> f64 {
        if self.n < 4 {
            return f64::INFINITY;
        }
        let n = self.n as f64;
        let m4 = self.m4 / n;
        let s2 = self.variance();
        ((m4 - s2 * s2 * (n - 3.0) / (n - 1.0)) / n).max(0.0).sqrt()
    }
}

//! Monte Carlo summaries: compensated sums, standard errors, ratio estimates
//! and rank correlation.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Kahan–Neumaier compensated accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct NeumaierSum<T> {
    sum: T,
    comp: T,
}

impl<T: Scalar> NeumaierSum<T> {
    pub fn new() -> Self {
        NeumaierSum {
            sum: T::zero(),
            comp: T::zero(),
        }
    }

    pub fn total(&self) -> T {
        self.sum + self.comp
    }
}

impl<T: Scalar> AddAssign<T> for NeumaierSum<T> {
    fn add_assign(&mut self, x: T) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }
}

pub fn compensated_sum<T: Scalar>(xs: impl IntoIterator<Item = T>) -> T {
    let mut acc = NeumaierSum::new();
    for x in xs {
        acc += x;
    }
    acc.total()
}

pub fn mean<T: Scalar>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    compensated_sum(xs.iter().copied()) / T::lit(xs.len() as f64)
}

/// Sample mean and its standard error (two-pass, compensated).
pub fn mean_and_se<T: Scalar>(xs: &[T]) -> (T, T) {
    let n = xs.len();
    let m = mean(xs);
    if n < 2 {
        return (m, T::zero());
    }
    let ss = compensated_sum(xs.iter().map(|&x| (x - m) * (x - m)));
    let var = ss / T::lit((n - 1) as f64);
    (m, (var / T::lit(n as f64)).sqrt())
}

/// Ratio of two paired sample means with a delta-method standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioEstimate<T> {
    pub ratio: T,
    pub se: T,
    pub numerator: T,
    pub numerator_se: T,
    pub denominator: T,
    pub denominator_se: T,
}

pub fn ratio_of_means<T: Scalar>(num: &[T], den: &[T]) -> RatioEstimate<T> {
    assert_eq!(num.len(), den.len(), "paired samples");
    let n = num.len();
    let (ma, sa) = mean_and_se(num);
    let (mb, sb) = mean_and_se(den);
    let ratio = ma / mb;
    let se = if n < 2 {
        T::zero()
    } else {
        let nn = T::lit(n as f64);
        let cov = compensated_sum(num.iter().zip(den).map(|(&a, &b)| (a - ma) * (b - mb)))
            / T::lit((n - 1) as f64);
        let va = sa * sa * nn;
        let vb = sb * sb * nn;
        let v = (va - (ratio + ratio) * cov + ratio * ratio * vb) / (mb * mb * nn);
        v.max(T::zero()).sqrt()
    };
    RatioEstimate {
        ratio,
        se,
        numerator: ma,
        numerator_se: sa,
        denominator: mb,
        denominator_se: sb,
    }
}

/// Ranks starting at 1, ties receiving their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
/// Returns NaN when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    pearson(&average_ranks(x), &average_ranks(y))
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let mx = mean(x);
    let my = mean(y);
    let sxy = compensated_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let sxx = compensated_sum(x.iter().map(|a| (a - mx) * (a - mx)));
    let syy = compensated_sum(y.iter().map(|b| (b - my) * (b - my)));
    sxy / (sxx * syy).sqrt()
}

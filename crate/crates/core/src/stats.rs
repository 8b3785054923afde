//! Tail probabilities used by the hypothesis tests.

use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor, Normal, StudentsT};

fn clamp_p(p: f64) -> f64 {
    if p.is_nan() {
        1.0
    } else {
        p.clamp(0.0, 1.0)
    }
}

pub fn chi_square_sf(x: f64, df: f64) -> f64 {
    if !(x > 0.0) {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    clamp_p(ChiSquared::new(df).expect("positive df").sf(x))
}

pub fn f_sf(x: f64, df1: f64, df2: f64) -> f64 {
    if !(x > 0.0) {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    clamp_p(FisherSnedecor::new(df1, df2).expect("positive df").sf(x))
}

/// Two-sided p-value of a standard normal statistic.
pub fn normal_two_sided(z: f64) -> f64 {
    if z.is_nan() {
        return 1.0;
    }
    if z.is_infinite() {
        return 0.0;
    }
    let n = Normal::standard();
    clamp_p(2.0 * n.sf(z.abs()))
}

/// Two-sided p-value of a Student-t statistic.
pub fn t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return 1.0;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive df");
    clamp_p(2.0 * dist.sf(t.abs()))
}

/// Welch two-sample t test from group sizes, means and sums of squared
/// deviations.
pub fn welch_t_test(n_a: f64, mean_a: f64, ss_a: f64, n_b: f64, mean_b: f64, ss_b: f64) -> f64 {
    let va = (ss_a / (n_a - 1.0)).max(0.0) / n_a;
    let vb = (ss_b / (n_b - 1.0)).max(0.0) / n_b;
    let se2 = va + vb;
    let diff = mean_a - mean_b;
    if se2 <= 0.0 {
        return if diff.abs() <= f64::EPSILON * (mean_a.abs() + mean_b.abs() + 1.0) { 1.0 } else { 0.0 };
    }
    let df = se2 * se2 / (va * va / (n_a - 1.0) + vb * vb / (n_b - 1.0));
    t_two_sided(diff / se2.sqrt(), df)
}

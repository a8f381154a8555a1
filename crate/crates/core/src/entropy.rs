//! Kernel entropy: the partition-refinement estimator, the fiber entropy
//! `(1/k) sum_j integral log Jac(f_j) dmu`, and the variational identity
//! `h_mu(Q) + integral integral phi dQ dmu = log k`.

use serde::Serialize;

use crate::correspondence::Correspondence;
use crate::error::{Error, Result};
use crate::kernel::{word_distributions, CylinderOptions, Kernel, Partition};
use crate::operator::{check_kernel_invariance, GridDensity};
use crate::orbits::{fit_inverse_n, pairwise_sum, Potential};

pub const MAX_ALPHABET: usize = 64;
pub const MAX_WORD_LENGTH: usize = 12;
/// Largest pushforward discrepancy accepted as kernel invariance.
pub const TOL_INVARIANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EntropyRate {
    pub n: usize,
    pub partition_size: usize,
    /// `H_n`, the entropy of the length-n cell-word distribution.
    pub entropy: f64,
    /// `H_n / n`.
    pub rate: f64,
}

fn dyadic_partition(dim: usize, m: usize) -> Result<Partition> {
    let per_dim = (m as f64).powf(1.0 / dim as f64).round() as usize;
    if per_dim == 0 || per_dim.pow(dim as u32) != m || !per_dim.is_power_of_two() {
        return Err(Error::config(format!(
            "partition size {m} is not a dyadic grid in dimension {dim}"
        )));
    }
    Ok(Partition::uniform(dim, per_dim))
}

/// `H_n / n` for `n = 1..=n_max` over the uniform dyadic partition with `m` cells.
pub fn partition_entropy_rate(
    mu: &GridDensity,
    kernel: &Kernel,
    t: &Correspondence,
    m: usize,
    n_max: usize,
    opts: &CylinderOptions,
) -> Result<Vec<EntropyRate>> {
    if m * t.k() > MAX_ALPHABET {
        return Err(Error::config(format!(
            "partition size {m} times {} generators exceeds {MAX_ALPHABET}",
            t.k()
        )));
    }
    if n_max == 0 || n_max > MAX_WORD_LENGTH {
        return Err(Error::config(format!("n_max must lie in 1..={MAX_WORD_LENGTH}")));
    }
    let partition = dyadic_partition(t.dim(), m)?;
    let opts = CylinderOptions {
        max_word: opts.max_word.max(n_max),
        ..*opts
    };
    let tables = word_distributions(mu, kernel, t, &partition, n_max, &opts)?;
    Ok(tables
        .iter()
        .map(|table| {
            let h = table.entropy();
            EntropyRate {
                n: table.length,
                partition_size: m,
                entropy: h,
                rate: h / table.length as f64,
            }
        })
        .collect())
}

/// Midpoint rule for `integral f dmu` at the density's own grid.
fn integrate(mu: &GridDensity, f: impl Fn(&crate::maps::Point) -> f64) -> f64 {
    pairwise_sum((0..mu.len()).map(|i| {
        let x = mu.cell_center(i);
        f(&x) * mu.values()[i]
    })) / mu.len() as f64
}

fn check_dims(t: &Correspondence, mu: &GridDensity) -> Result<()> {
    if mu.dim() != t.dim() {
        return Err(Error::config("density dimension does not match the correspondence"));
    }
    Ok(())
}

/// `integral log Jac(f_j) dmu` for every generator.
pub fn log_jacobian_integrals(t: &Correspondence, mu: &GridDensity) -> Result<Vec<f64>> {
    check_dims(t, mu)?;
    Ok(t.generators()
        .iter()
        .map(|g| {
            if g.has_constant_jacobian() {
                g.max_jacobian().ln() * mu.mean()
            } else {
                integrate(mu, |x| g.jacobian(x).ln())
            }
        })
        .collect())
}

/// `(1/k) sum_j integral log Jac(f_j) dmu`.
pub fn fiber_entropy(t: &Correspondence, mu: &GridDensity) -> Result<f64> {
    let logs = log_jacobian_integrals(t, mu)?;
    Ok(logs.iter().sum::<f64>() / t.k() as f64)
}

/// `log k + fiber_entropy`: the entropy of an invariant density under the uniform kernel.
pub fn kernel_entropy_analytic(t: &Correspondence, mu: &GridDensity) -> Result<f64> {
    Ok((t.k() as f64).ln() + fiber_entropy(t, mu)?)
}

/// Entropy for a kernel with point-independent weights `p`:
/// `-sum p_j log p_j + sum_j p_j integral log Jac(f_j) dmu`.
pub fn kernel_entropy_constant_weights(t: &Correspondence, mu: &GridDensity, kernel: &Kernel) -> Result<f64> {
    kernel.check_supported(t)?;
    let p = kernel.constant_weights().ok_or_else(|| {
        Error::precondition("the entropy formula needs point-independent kernel weights")
    })?;
    if kernel.is_uniform() {
        return kernel_entropy_analytic(t, mu);
    }
    let logs = log_jacobian_integrals(t, mu)?;
    let base: f64 = p.iter().filter(|&&w| w > 0.0).map(|&w| -w * w.ln()).sum();
    let fiber: f64 = p.iter().zip(&logs).map(|(w, l)| w * l).sum();
    Ok(base + fiber)
}

/// `integral sum_j P_j(x) phi(x, f_j(x)) dmu(x)`. The coincidence set of a torus-measurable
/// potential is Lebesgue-null and is left out of the integrand.
pub fn potential_integral(t: &Correspondence, phi: &Potential, mu: &GridDensity, kernel: &Kernel) -> Result<f64> {
    check_dims(t, mu)?;
    kernel.check_supported(t)?;
    phi.validate(t)?;
    let per_generator = |j: usize, x: &crate::maps::Point| match phi {
        Potential::TorusMeasurable { .. } => -t.generator(j).jacobian(x).ln(),
        _ => phi.log_weight(t, j, x),
    };
    Ok(integrate(mu, |x| {
        (0..t.k())
            .map(|j| kernel.weight(j, x) * per_generator(j, x))
            .sum()
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VariationalCheck {
    /// `h_mu(Q) + integral integral phi dQ dmu`.
    pub lhs: f64,
    /// `log k`.
    pub rhs: f64,
    /// `rhs - lhs`.
    pub gap: f64,
    pub entropy: f64,
    pub potential_integral: f64,
    /// Pushforward discrepancy `||mu Q - mu||_1`.
    pub invariance_discrepancy: f64,
}

/// Compares `h_mu(Q) + integral integral phi` with `log k` for a kernel-invariant `mu`.
pub fn variational_check(t: &Correspondence, phi: &Potential, mu: &GridDensity, kernel: &Kernel) -> Result<VariationalCheck> {
    let discrepancy = check_kernel_invariance(t, mu, kernel)?;
    if !(discrepancy <= TOL_INVARIANCE) {
        return Err(Error::precondition(format!(
            "measure is not kernel-invariant: pushforward discrepancy {discrepancy:e} > {TOL_INVARIANCE:e}"
        )));
    }
    let entropy = kernel_entropy_constant_weights(t, mu, kernel)?;
    let integral = potential_integral(t, phi, mu, kernel)?;
    let lhs = entropy + integral;
    let rhs = (t.k() as f64).ln();
    Ok(VariationalCheck {
        lhs,
        rhs,
        gap: rhs - lhs,
        entropy,
        potential_integral: integral,
        invariance_discrepancy: discrepancy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntropyReport {
    pub h_partition: Vec<EntropyRate>,
    /// Limit of the fit `a + b/n` over the upper half of the rate sequence.
    pub h_extrapolated: f64,
    pub h_analytic: f64,
    pub fiber_entropy: f64,
    pub shift_entropy: f64,
    pub variational_lhs: f64,
    pub pressure_rhs: f64,
}

/// Both entropy tracks and the variational identity for an invariant density under the
/// uniform kernel.
pub fn entropy_report(
    t: &Correspondence,
    phi: &Potential,
    mu: &GridDensity,
    m: usize,
    n_max: usize,
    opts: &CylinderOptions,
) -> Result<EntropyReport> {
    let kernel = Kernel::uniform(t.k());
    let h_partition = partition_entropy_rate(mu, &kernel, t, m, n_max, opts)?;
    let seq: Vec<(usize, f64)> = h_partition.iter().map(|r| (r.n, r.rate)).collect();
    let (h_extrapolated, _) = fit_inverse_n(&seq[seq.len() / 2..]);
    let fiber = fiber_entropy(t, mu)?;
    let shift_entropy = (t.k() as f64).ln();
    let check = variational_check(t, phi, mu, &kernel)?;
    Ok(EntropyReport {
        h_partition,
        h_extrapolated,
        h_analytic: shift_entropy + fiber,
        fiber_entropy: fiber,
        shift_entropy,
        variational_lhs: check.lhs,
        pressure_rhs: check.rhs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::{GeneratorMap, Point};
    use crate::operator::{invariant_density, PowerIterationOptions};
    use std::f64::consts::{LN_2, TAU};

    fn circle(maps: &[(u32, f64)]) -> Correspondence {
        Correspondence::new(
            maps.iter()
                .map(|&(p, c)| GeneratorMap::circle_linear(p, c).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn leb() -> GridDensity {
        GridDensity::uniform(1, 1024)
    }

    fn perturbed_pair() -> Correspondence {
        Correspondence::new(vec![
            GeneratorMap::circle_perturbed(2, 0.0, 0.3).unwrap(),
            GeneratorMap::circle_perturbed(2, 0.5, 0.3).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn fiber_entropy_of_linear_maps() {
        let f = fiber_entropy(&circle(&[(2, 0.0), (3, 0.0)]), &leb()).unwrap();
        assert!((f - 0.5 * (2f64.ln() + 3f64.ln())).abs() < 1e-15);
        assert!((f - 0.895880).abs() < 1e-6);
        let f = fiber_entropy(&circle(&[(2, 0.0), (2, 0.5)]), &leb()).unwrap();
        assert!((f - LN_2).abs() < 1e-15);
    }

    #[test]
    fn fiber_entropy_survives_grid_refinement() {
        let t = perturbed_pair();
        let r = invariant_density(&t, &Potential::Jacobian, &PowerIterationOptions::default(), None).unwrap();
        let f = fiber_entropy(&t, &r.density).unwrap();
        // 4x finer midpoint rule on the interpolated density
        let n = 4 * r.density.resolution();
        let fine: f64 = (0..n)
            .map(|i| {
                let x = (i as f64 + 0.5) / n as f64;
                (2.0 + 0.3 * (TAU * x).cos()).ln() * r.density.interpolate(&Point::circle(x))
            })
            .sum::<f64>()
            / n as f64;
        assert!((f - fine).abs() < 1e-6, "{f} vs {fine}");
    }

    #[test]
    fn analytic_entropy_examples() {
        let h = kernel_entropy_analytic(&circle(&[(2, 0.0), (3, 0.0)]), &leb()).unwrap();
        assert!((h - (LN_2 + 0.5 * 6f64.ln())).abs() < 1e-15);
        assert!((h - 1.589027).abs() < 1e-6);
        let h = kernel_entropy_analytic(&circle(&[(2, 0.0), (2, 0.5)]), &leb()).unwrap();
        assert!((h - 2.0 * LN_2).abs() < 1e-15);
        let h = kernel_entropy_analytic(&circle(&[(2, 0.0)]), &leb()).unwrap();
        assert!((h - LN_2).abs() < 1e-15);
    }

    #[test]
    fn partition_rates_trivial_cases() {
        let opts = CylinderOptions::default();
        let t = circle(&[(2, 0.0), (2, 0.5)]);
        let rates = partition_entropy_rate(&leb(), &Kernel::uniform(2), &t, 4, 1, &opts).unwrap();
        assert!((rates[0].entropy - 4f64.ln()).abs() < 1e-12);

        let doubling = circle(&[(2, 0.0)]);
        let rates = partition_entropy_rate(&leb(), &Kernel::uniform(1), &doubling, 2, 10, &opts).unwrap();
        for r in rates {
            assert!((r.rate - LN_2).abs() < 1e-12, "n={}: {}", r.n, r.rate);
        }
    }

    /// With 16 dyadic cells, a cell word of `x_{i+1} = 2 x_i + j/2` reveals the first four
    /// binary digits of `x_1` and then two fresh bits per step (one digit of `x`, one
    /// symbol), so `H_n = (2n + 2) log 2`.
    #[test]
    fn sixteen_cell_rates_count_revealed_bits() {
        let t = circle(&[(2, 0.0), (2, 0.5)]);
        let rates = partition_entropy_rate(&leb(), &Kernel::uniform(2), &t, 16, 8, &Default::default()).unwrap();
        for r in &rates {
            let want = (2 * r.n + 2) as f64 * LN_2;
            assert!((r.entropy - want).abs() < 1e-9, "n={}: {} vs {want}", r.n, r.entropy);
        }
    }

    #[test]
    fn cylinder_entropies_are_subadditive() {
        let t = circle(&[(2, 0.0), (3, 0.0)]);
        let rates = partition_entropy_rate(&leb(), &Kernel::uniform(2), &t, 4, 6, &Default::default()).unwrap();
        let h = |n: usize| rates[n - 1].entropy;
        for a in 1..=5 {
            for b in 1..=6 - a {
                assert!(h(a + b) <= h(a) + h(b) + 1e-9, "H_{} > H_{a} + H_{b}", a + b);
            }
        }
    }

    #[test]
    fn refining_the_partition_does_not_lower_the_rate() {
        let t = circle(&[(2, 0.0), (3, 0.0)]);
        let opts = CylinderOptions::default();
        let coarse = partition_entropy_rate(&leb(), &Kernel::uniform(2), &t, 4, 4, &opts).unwrap();
        let fine = partition_entropy_rate(&leb(), &Kernel::uniform(2), &t, 8, 4, &opts).unwrap();
        for (c, f) in coarse.iter().zip(&fine) {
            assert!(f.rate >= c.rate - 1e-9);
        }
    }

    #[test]
    fn partition_rate_limits() {
        let t = circle(&[(2, 0.0), (3, 0.0)]);
        let k = Kernel::uniform(2);
        let opts = CylinderOptions::default();
        assert!(matches!(partition_entropy_rate(&leb(), &k, &t, 64, 2, &opts), Err(Error::Config(_))));
        assert!(matches!(partition_entropy_rate(&leb(), &k, &t, 4, 13, &opts), Err(Error::Config(_))));
        assert!(matches!(partition_entropy_rate(&leb(), &k, &t, 6, 2, &opts), Err(Error::Config(_))));
    }

    #[test]
    fn variational_examples() {
        let t = circle(&[(2, 0.0), (3, 0.0)]);
        let c = variational_check(&t, &Potential::TorusMeasurable { c_e: None }, &leb(), &Kernel::uniform(2)).unwrap();
        assert!(c.gap.abs() <= 1e-9);
        assert!((c.lhs - LN_2).abs() <= 1e-9);
        assert!((c.potential_integral + 0.895880).abs() < 1e-6);

        let t = circle(&[(2, 0.0), (2, 0.5)]);
        let c = variational_check(&t, &Potential::Jacobian, &leb(), &Kernel::uniform(2)).unwrap();
        assert!(c.gap.abs() <= 1e-9);

        let skewed = Kernel::constant(vec![0.9, 0.1]).unwrap();
        let c = variational_check(&t, &Potential::Jacobian, &leb(), &skewed).unwrap();
        let bernoulli = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((c.entropy - (bernoulli + LN_2)).abs() < 1e-12);
        assert!((bernoulli - 0.325).abs() < 1e-3);
        assert!(c.lhs < LN_2);
        assert!(c.gap >= 0.3, "{}", c.gap);
    }

    #[test]
    fn variational_check_needs_invariance() {
        let t = circle(&[(2, 0.0)]);
        let bump = GridDensity::from_fn(1, 1024, |x| 1.0 + 0.5 * (TAU * x.x()).cos()).unwrap();
        assert!(matches!(
            variational_check(&t, &Potential::Jacobian, &bump, &Kernel::uniform(1)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn report_assembles_both_tracks() {
        let t = circle(&[(2, 0.0), (2, 0.5)]);
        let report = entropy_report(&t, &Potential::Jacobian, &leb(), 8, 6, &Default::default()).unwrap();
        assert_eq!(report.h_analytic, report.shift_entropy + report.fiber_entropy);
        for r in &report.h_partition {
            assert!(r.rate <= 8f64.ln() + 2f64.ln() + 1e-9);
        }
        assert!((report.h_extrapolated - 2.0 * LN_2).abs() < 1e-9);
        assert!((report.variational_lhs - report.pressure_rhs).abs() < 1e-9);
    }

    #[test]
    fn perturbed_rate_uses_quadrature() {
        let t = perturbed_pair();
        let r = invariant_density(&t, &Potential::Jacobian, &PowerIterationOptions::default(), None).unwrap();
        let rates = partition_entropy_rate(&r.density, &Kernel::uniform(2), &t, 4, 3, &Default::default()).unwrap();
        assert!((rates[0].entropy - 4f64.ln()).abs() < 1e-3);
        assert!(rates.iter().all(|x| x.rate <= 4f64.ln() + 2f64.ln() + 1e-9));
    }
}

//! Cross-module consistency on every shipped correspondence.

use corrtherm::checks::shipped_examples;
use corrtherm::entropy::variational_check;
use corrtherm::kernel::Kernel;
use corrtherm::maps::Point;
use corrtherm::operator::{invariant_density, GridDensity, PowerIterationOptions};
use corrtherm::orbits::{BackwardOrbits, Potential, TreeSettings};

fn potential_for(t: &corrtherm::correspondence::Correspondence) -> Potential {
    if t.is_coincidence_free().unwrap() {
        Potential::Jacobian
    } else {
        Potential::TorusMeasurable { c_e: None }
    }
}

#[test]
fn leading_eigenvalue_is_the_number_of_generators() {
    for (name, t) in shipped_examples() {
        let resolution = if t.dim() == 1 { 4096 } else { 256 };
        let opts = PowerIterationOptions {
            resolution,
            ..Default::default()
        };
        let r = invariant_density(&t, &potential_for(&t), &opts, None).unwrap();
        let k = t.k() as f64;
        assert!((r.eigenvalue - k).abs() <= 1e-4 * k, "{name}: {}", r.eigenvalue);
        assert!(r.residual <= 1e-6, "{name}: residual {}", r.residual);
        assert!((r.density.mean() - 1.0).abs() < 1e-12, "{name}");
    }
}

#[test]
fn variational_side_matches_orbit_growth() {
    for (name, t) in shipped_examples() {
        if !t.generators().iter().all(|g| g.has_constant_jacobian()) {
            continue;
        }
        let phi = potential_for(&t);
        let mu = GridDensity::uniform(t.dim(), if t.dim() == 1 { 4096 } else { 128 });
        let v = variational_check(&t, &phi, &mu, &Kernel::uniform(t.k())).unwrap();
        let orbits = BackwardOrbits::new(&t, &phi, TreeSettings::default()).unwrap();
        let root = Point::new(&vec![0.1; t.dim()]);
        let growth = orbits.pressure_via_growth(&root, 1, 6).unwrap();
        assert!((v.lhs - growth.estimate).abs() <= 0.02, "{name}: {} vs {}", v.lhs, growth.estimate);
        assert!((v.rhs - (t.k() as f64).ln()).abs() < 1e-15);
    }
}

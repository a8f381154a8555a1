//! Monte Carlo values pinned to the default seed. Any change here changes published numbers.

use corrtherm::checks::shipped_examples;
use corrtherm::kernel::{ks_uniform, sample_markov, Kernel, StartPoint, DEFAULT_SEED};

fn example(name: &str) -> corrtherm::correspondence::Correspondence {
    shipped_examples().into_iter().find(|(n, _)| *n == name).unwrap().1
}

#[test]
fn two_three_chain_at_default_seed() {
    assert_eq!(DEFAULT_SEED, 0x5EED);
    let s = sample_markov(&example("two_three"), &Kernel::uniform(2), &StartPoint::Lebesgue, 100_000, DEFAULT_SEED)
        .unwrap();
    let ks = ks_uniform(&s.circle_points());
    assert_eq!(ks.to_bits(), 4569555990067351424, "{ks}");
    let head: Vec<(u64, usize)> = s.trajectory[..4].iter().map(|(x, j)| (x.coords()[0].to_bits(), *j)).collect();
    assert_eq!(
        head,
        [
            (4603587070460566396, 1),
            (4605403573036405365, 0),
            (4603624727272793322, 1),
            (4605516543473086141, 1)
        ]
    );
    let symbols: Vec<usize> = s.trajectory.iter().take(32).map(|p| p.1).collect();
    assert_eq!(
        symbols,
        [1, 0, 1, 1, 1, 1, 1, 1, 0, 0, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 1, 0, 1, 1, 1, 1, 0, 0, 1, 1, 1, 0]
    );
}

#[test]
fn weighted_chain_from_a_fifth_stays_on_tenths() {
    let kernel = Kernel::constant(vec![0.7, 0.3]).unwrap();
    let s = sample_markov(&example("doubling_pair"), &kernel, &StartPoint::Fixed(vec![0.2]), 1000, DEFAULT_SEED)
        .unwrap();
    for (x, _) in &s.trajectory {
        let tenths = x.coords()[0] * 10.0;
        assert!((tenths - tenths.round()).abs() < 1e-9, "{}", x.coords()[0]);
    }
    let ones = s.trajectory.iter().filter(|p| p.1 == 1).count();
    assert_eq!(ones, 304);
    assert_eq!(s.trajectory.last().unwrap().0.coords()[0], 0.6);
}

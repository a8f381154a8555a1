//! Correspondences `T(x) = {f_1(x), ..., f_k(x)}` and their expansion constants.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{per_dim_resolution, GeneratorMap, Point};

/// Gaps at or below this are treated as coincidences.
pub const TOL_COINC: f64 = 1e-9;
/// Truncation depth of the infinite orbit metric.
pub const D_OMEGA_DEPTH: usize = 40;
/// Grid used when the expansion constants are computed lazily.
pub const DEFAULT_GAP_GRID: usize = 1 << 12;

const ETA_SAFETY: f64 = 0.9;
const VERIFY_PAIRS: usize = 100_000;
const VERIFY_SEED: u64 = 0x5EED;
const GOLDEN_ITERS: usize = 80;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CorrespondenceSpec {
    generators: Vec<GeneratorMap>,
}

#[derive(Serialize)]
struct CorrespondenceRef<'a> {
    generators: &'a [GeneratorMap],
}

/// A finitely generated correspondence. Immutable after construction.
#[derive(Debug)]
pub struct Correspondence {
    generators: Vec<GeneratorMap>,
    dim: usize,
    constants: OnceLock<ExpansionConstants>,
}

impl Clone for Correspondence {
    fn clone(&self) -> Self {
        Correspondence {
            generators: self.generators.clone(),
            dim: self.dim,
            constants: self.constants.clone(),
        }
    }
}

impl PartialEq for Correspondence {
    fn eq(&self, other: &Self) -> bool {
        self.generators == other.generators
    }
}

impl Serialize for Correspondence {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CorrespondenceRef {
            generators: &self.generators,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Correspondence {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let spec = CorrespondenceSpec::deserialize(d)?;
        Correspondence::new(spec.generators).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExpansionConstants {
    /// Minimal pairwise generator gap; `+inf` for a single generator.
    pub epsilon_star: f64,
    /// Radius within which `T` is distance-expanding. Zero when not coincidence-free.
    pub eta: f64,
    pub lambda_tilde: f64,
    pub u0: f64,
    pub coincidence_free: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HolderFit {
    pub alpha: f64,
    pub constant: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExpansivenessReport {
    pub trials: usize,
    pub separated: usize,
    pub skipped: usize,
    /// Steps allowed for a pair to separate beyond `eta`.
    pub step_bound: usize,
    /// Largest number of steps any separated pair needed.
    pub max_steps: usize,
}

impl ExpansivenessReport {
    pub fn is_expansive(&self) -> bool {
        self.separated + self.skipped == self.trials
    }
}

/// Distance on finite or infinite orbit segments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OrbitMetric {
    /// `d_n`: max over the coordinates.
    Finite,
    /// `d_omega`: `sum 2^-i d/(1+d)`, truncated after `depth` terms.
    Omega { depth: usize },
}

impl OrbitMetric {
    pub fn omega() -> Self {
        OrbitMetric::Omega {
            depth: D_OMEGA_DEPTH,
        }
    }

    pub fn distance(&self, a: &[Point], b: &[Point]) -> f64 {
        match *self {
            OrbitMetric::Finite => a
                .iter()
                .zip(b)
                .map(|(x, y)| x.distance(y))
                .fold(0.0, f64::max),
            OrbitMetric::Omega { depth } => a
                .iter()
                .zip(b)
                .take(depth)
                .enumerate()
                .map(|(i, (x, y))| {
                    let d = x.distance(y);
                    0.5f64.powi(i as i32 + 1) * d / (1.0 + d)
                })
                .sum(),
        }
    }
}

impl Correspondence {
    pub fn new(generators: Vec<GeneratorMap>) -> Result<Self> {
        let first = generators
            .first()
            .ok_or_else(|| Error::config("a correspondence needs at least one generator"))?;
        let dim = first.dim();
        if let Some(bad) = generators.iter().find(|g| g.dim() != dim) {
            return Err(Error::config(format!(
                "generator dimensions differ ({} vs {})",
                dim,
                bad.dim()
            )));
        }
        Ok(Correspondence {
            generators,
            dim,
            constants: OnceLock::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.generators.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn generators(&self) -> &[GeneratorMap] {
        &self.generators
    }

    pub fn generator(&self, j: usize) -> &GeneratorMap {
        &self.generators[j]
    }

    /// `T(x)` in generator order.
    pub fn images(&self, x: &Point) -> Result<Vec<Point>> {
        self.generators.iter().map(|g| g.eval(x)).collect()
    }

    /// Number of one-step backward branches at any point: the sum of degrees.
    pub fn total_degree(&self) -> usize {
        self.generators.iter().map(GeneratorMap::degree).sum()
    }

    pub fn max_degree(&self) -> usize {
        self.generators.iter().map(GeneratorMap::degree).max().unwrap_or(0)
    }

    /// `u0`: the smallest expansion rate over all generators.
    pub fn min_rate(&self) -> f64 {
        self.generators
            .iter()
            .map(GeneratorMap::min_rate)
            .fold(f64::INFINITY, f64::min)
    }

    /// `L'`: the largest Lipschitz constant over all generators.
    pub fn lipschitz(&self) -> f64 {
        self.generators
            .iter()
            .map(GeneratorMap::lipschitz)
            .fold(0.0, f64::max)
    }

    pub fn all_circle_affine(&self) -> bool {
        self.generators.iter().all(|g| g.affine_circle().is_some())
    }

    /// Whether `x` lies (within `TOL_COINC`) on the coincidence set of some generator pair.
    pub fn in_coincidence_set(&self, x: &Point) -> bool {
        let imgs: Vec<Point> = self.generators.iter().map(|g| g.eval_unchecked(x)).collect();
        for a in 0..imgs.len() {
            for b in a + 1..imgs.len() {
                if imgs[a].distance(&imgs[b]) <= TOL_COINC {
                    return true;
                }
            }
        }
        false
    }

    /// Grid lower estimate of `epsilon*`, the infimum over pairs of `d(f_j(x), f_j'(x))`,
    /// refined by a golden-section pass around each grid minimizer.
    pub fn coincidence_gap(&self, grid_resolution: usize) -> Result<f64> {
        if self.k() < 2 {
            return Ok(f64::INFINITY);
        }
        if grid_resolution < 1 << 10 {
            return Err(Error::config(format!(
                "coincidence grid resolution {grid_resolution} is below 1024"
            )));
        }
        let per_dim = per_dim_resolution(grid_resolution, self.dim);
        let total = per_dim.pow(self.dim as u32);
        let mut best = f64::INFINITY;
        for a in 0..self.k() {
            for b in a + 1..self.k() {
                let (fa, fb) = (&self.generators[a], &self.generators[b]);
                let gap = |x: &Point| fa.eval_unchecked(x).distance(&fb.eval_unchecked(x));
                let mut arg = Point::new(&vec![0.0; self.dim]);
                let mut min = f64::INFINITY;
                for idx in 0..total {
                    let x = crate::maps::grid_corner(idx, per_dim, self.dim);
                    let v = gap(&x);
                    if v < min {
                        min = v;
                        arg = x;
                    }
                }
                let h = 1.0 / per_dim as f64;
                let mut coords = arg.coords().to_vec();
                for d in 0..self.dim {
                    let (x, v) = golden_section(
                        |t| {
                            let mut c = coords.clone();
                            c[d] = t;
                            gap(&Point::new(&c))
                        },
                        coords[d] - h,
                        coords[d] + h,
                    );
                    if v < min {
                        min = v;
                        coords[d] = x;
                    }
                }
                best = best.min(min);
            }
        }
        Ok(best)
    }

    pub fn is_coincidence_free(&self) -> Result<bool> {
        Ok(self.expansion_constants()?.coincidence_free)
    }

    /// Expansion and separation constants, computed once and cached.
    pub fn expansion_constants(&self) -> Result<ExpansionConstants> {
        if let Some(c) = self.constants.get() {
            return Ok(c.clone());
        }
        let c = self.compute_expansion_constants()?;
        Ok(self.constants.get_or_init(|| c).clone())
    }

    fn compute_expansion_constants(&self) -> Result<ExpansionConstants> {
        let u0 = self.min_rate();
        let epsilon_star = self.coincidence_gap(DEFAULT_GAP_GRID)?;
        let coincidence_free = epsilon_star > TOL_COINC;
        if !coincidence_free {
            return Ok(ExpansionConstants {
                epsilon_star: 0.0,
                eta: 0.0,
                lambda_tilde: u0,
                u0,
                coincidence_free,
            });
        }
        let eta = ETA_SAFETY * (epsilon_star / 2.0).min(1.0 / (4.0 * self.max_degree() as f64)) / u0;
        let constants = ExpansionConstants {
            epsilon_star,
            eta,
            lambda_tilde: u0,
            u0,
            coincidence_free,
        };
        self.verify_distance_expanding(&constants)?;
        Ok(constants)
    }

    /// Samples pairs with `d(x,y) <= eta` and checks that every pair of images is at least
    /// `lambda_tilde d(x,y)` apart.
    fn verify_distance_expanding(&self, c: &ExpansionConstants) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(VERIFY_SEED);
        for _ in 0..VERIFY_PAIRS {
            let xs: Vec<f64> = (0..self.dim).map(|_| rng.random()).collect();
            let ys: Vec<f64> = xs
                .iter()
                .map(|v| v + c.eta * (2.0 * rng.random::<f64>() - 1.0))
                .collect();
            let (x, y) = (Point::new(&xs), Point::new(&ys));
            let d = x.distance(&y);
            if d == 0.0 {
                continue;
            }
            let ix: Vec<Point> = self.generators.iter().map(|g| g.eval_unchecked(&x)).collect();
            let iy: Vec<Point> = self.generators.iter().map(|g| g.eval_unchecked(&y)).collect();
            let closest = ix
                .iter()
                .flat_map(|a| iy.iter().map(move |b| a.distance(b)))
                .fold(f64::INFINITY, f64::min);
            if closest < c.lambda_tilde * d * (1.0 - 1e-9) {
                return Err(Error::ExpansionWitness {
                    x: xs,
                    y: ys,
                    ratio: closest / d,
                    required: c.lambda_tilde,
                });
            }
        }
        Ok(())
    }

    /// Lipschitz fit (`alpha = 1`) of the Jacobian potential on nearby pairs of
    /// two-step orbits, measured in `d_2`.
    pub fn holder_diagnostic(&self, samples: usize, seed: u64) -> Result<HolderFit> {
        let c = self.expansion_constants()?;
        if !c.coincidence_free {
            return Err(Error::precondition(
                "Hölder diagnostic needs a coincidence-free correspondence",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut constant: f64 = 0.0;
        for _ in 0..samples {
            let j = rng.random_range(0..self.k());
            let g = &self.generators[j];
            let radius = c.eta / g.lipschitz().max(1.0);
            let xs: Vec<f64> = (0..self.dim).map(|_| rng.random()).collect();
            let ys: Vec<f64> = xs
                .iter()
                .map(|v| v + radius * (2.0 * rng.random::<f64>() - 1.0))
                .collect();
            let (x1, y1) = (Point::new(&xs), Point::new(&ys));
            let (x2, y2) = (g.eval_unchecked(&x1), g.eval_unchecked(&y1));
            let d2 = OrbitMetric::Finite.distance(&[x1.clone(), x2], &[y1.clone(), y2]);
            if d2 == 0.0 {
                continue;
            }
            let diff = (g.jacobian(&x1).ln() - g.jacobian(&y1).ln()).abs();
            constant = constant.max(diff / d2);
        }
        Ok(HolderFit {
            alpha: 1.0,
            constant,
            samples,
        })
    }

    /// Runs pairs of orbits from starts `d0` apart under identical random symbol sequences
    /// and checks that each pair separates beyond `eta` within
    /// `ceil(log(eta/d0) / log(lambda_tilde)) + 1` steps.
    pub fn check_forward_expansive(&self, trials: usize, d0: f64, seed: u64) -> Result<ExpansivenessReport> {
        let c = self.expansion_constants()?;
        if !c.coincidence_free {
            return Err(Error::precondition(
                "forward expansiveness check needs a coincidence-free correspondence",
            ));
        }
        let step_bound = if d0 > 0.0 {
            ((c.eta / d0).ln() / c.lambda_tilde.ln()).ceil().max(0.0) as usize + 1
        } else {
            0
        };
        let depth = step_bound.max(20);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut report = ExpansivenessReport {
            trials,
            separated: 0,
            skipped: 0,
            step_bound,
            max_steps: 0,
        };
        for _ in 0..trials {
            let xs: Vec<f64> = (0..self.dim).map(|_| rng.random()).collect();
            let lead = rng.random_range(0..self.dim);
            let ys: Vec<f64> = xs
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    let scale = if i == lead { 1.0 } else { rng.random::<f64>() };
                    v + sign * scale * d0
                })
                .collect();
            let (mut x, mut y) = (Point::new(&xs), Point::new(&ys));
            if x.distance(&y) == 0.0 {
                report.skipped += 1;
                continue;
            }
            for step in 1..=depth {
                let j = rng.random_range(0..self.k());
                let g = &self.generators[j];
                x = g.eval_unchecked(&x);
                y = g.eval_unchecked(&y);
                if x.distance(&y) > c.eta {
                    if step <= step_bound {
                        report.separated += 1;
                        report.max_steps = report.max_steps.max(step);
                    }
                    break;
                }
            }
        }
        Ok(report)
    }
}

/// Minimizes `f` on `[a, b]`; returns the best point seen and its value.
fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    let (mut best_x, mut best_v) = if fc < fd { (c, fc) } else { (d, fd) };
    for _ in 0..GOLDEN_ITERS {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
        if fc < best_v {
            best_x = c;
            best_v = fc;
        }
        if fd < best_v {
            best_x = d;
            best_v = fd;
        }
    }
    (best_x, best_v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle(maps: &[(u32, f64)]) -> Correspondence {
        Correspondence::new(
            maps.iter()
                .map(|&(p, c)| GeneratorMap::circle_linear(p, c).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn perturbed_pair() -> Correspondence {
        Correspondence::new(vec![
            GeneratorMap::circle_perturbed(2, 0.0, 0.3).unwrap(),
            GeneratorMap::circle_perturbed(2, 0.5, 0.3).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn gap_examples() {
        assert!((circle(&[(2, 0.0), (2, 0.5)]).coincidence_gap(4096).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(circle(&[(2, 0.0), (3, 0.0)]).coincidence_gap(4096).unwrap(), 0.0);
        let g = circle(&[(2, 0.0), (2, 0.25), (2, 0.5)]).coincidence_gap(4096).unwrap();
        assert!((g - 0.25).abs() < 1e-12);
        assert_eq!(circle(&[(2, 0.0)]).coincidence_gap(4096).unwrap(), f64::INFINITY);
        assert!(circle(&[(2, 0.0), (2, 0.5)]).coincidence_gap(100).is_err());
    }

    #[test]
    fn gap_refinement_finds_off_grid_coincidence() {
        // 2x and 3x + 0.1 meet where x = 0.9 (mod 1), off the dyadic grid
        let t = circle(&[(2, 0.0), (3, 0.1)]);
        assert!(t.coincidence_gap(1024).unwrap() <= TOL_COINC);
    }

    #[test]
    fn gap_is_permutation_invariant() {
        let a = circle(&[(2, 0.0), (2, 0.3), (3, 0.65)]).coincidence_gap(2048).unwrap();
        let b = circle(&[(3, 0.65), (2, 0.0), (2, 0.3)]).coincidence_gap(2048).unwrap();
        assert_eq!(a, b);
    }

    /// Brute-force version of the distance-expanding inequality, independent of the
    /// implementation's sampler.
    fn sampled_min_ratio(t: &Correspondence, eta: f64, pairs: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut worst = f64::INFINITY;
        for _ in 0..pairs {
            let x: f64 = rng.random();
            let y = x + eta * rng.random_range(-1.0..1.0);
            let d = crate::maps::circle_distance(x, crate::maps::wrap(y));
            if d == 0.0 {
                continue;
            }
            for f in t.generators() {
                for g in t.generators() {
                    let a = f.eval(&Point::circle(x)).unwrap();
                    let b = g.eval(&Point::circle(y)).unwrap();
                    worst = worst.min(a.distance(&b) / d);
                }
            }
        }
        worst
    }

    #[test]
    fn constants_for_shifted_doubling_pair() {
        let t = circle(&[(2, 0.0), (2, 0.5)]);
        let c = t.expansion_constants().unwrap();
        assert_eq!(c.lambda_tilde, 2.0);
        assert!((c.epsilon_star - 0.5).abs() < 1e-12);
        assert!(c.coincidence_free);
        assert!((c.eta - 0.9 * 0.125 / 2.0).abs() < 1e-15);
        assert!(sampled_min_ratio(&t, c.eta, 100_000) >= 2.0 * (1.0 - 1e-9));
    }

    #[test]
    fn constants_with_coincidence_and_single_generator() {
        let c = circle(&[(2, 0.0), (3, 0.0)]).expansion_constants().unwrap();
        assert!(!c.coincidence_free);
        assert_eq!(c.epsilon_star, 0.0);

        let c = circle(&[(2, 0.0)]).expansion_constants().unwrap();
        assert_eq!(c.lambda_tilde, 2.0);
        assert_eq!(c.epsilon_star, f64::INFINITY);
        assert!(c.coincidence_free);
    }

    #[test]
    fn constants_for_perturbed_pair_pass_verification() {
        let t = perturbed_pair();
        let c = t.expansion_constants().unwrap();
        assert!((c.lambda_tilde - 1.7).abs() < 1e-12);
        assert!(c.coincidence_free);
        assert!(sampled_min_ratio(&t, c.eta, 50_000) >= c.lambda_tilde * (1.0 - 1e-9));
    }

    #[test]
    fn holder_constants() {
        let fit = circle(&[(2, 0.0), (2, 0.5)]).holder_diagnostic(10_000, 1).unwrap();
        assert_eq!(fit.constant, 0.0);
        assert_eq!(circle(&[(3, 0.0)]).holder_diagnostic(1000, 1).unwrap().constant, 0.0);

        // analytic bound: sup |d/dx log(2 + 0.3 cos 2 pi x)| on a dense grid
        let bound = (0..1_000_000)
            .map(|i| {
                let x = i as f64 / 1e6;
                let s = std::f64::consts::TAU * x;
                (0.6 * std::f64::consts::PI * s.sin() / (2.0 + 0.3 * s.cos())).abs()
            })
            .fold(0.0, f64::max);
        // cos(2 pi x) = -0.15 at the maximizer; 0.6 pi / 1.7 = 1.109 is only an upper bound
        assert!((bound - 0.953263).abs() < 1e-5, "{bound}");
        let fit = perturbed_pair().holder_diagnostic(100_000, 3).unwrap();
        assert!(fit.constant > 0.5 * bound && fit.constant <= bound * (1.0 + 1e-6), "{fit:?}");
        assert!(fit.constant <= 0.6 * std::f64::consts::PI / 1.7);
    }

    #[test]
    fn holder_requires_coincidence_free() {
        assert!(matches!(
            circle(&[(2, 0.0), (3, 0.0)]).holder_diagnostic(10, 1),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn forward_expansive_examples() {
        let r = circle(&[(2, 0.0), (2, 0.5)]).check_forward_expansive(500, 1e-6, 5).unwrap();
        assert!(r.is_expansive(), "{r:?}");
        assert!(r.max_steps <= 21);
        let r = circle(&[(3, 0.0), (3, 1.0 / 3.0)]).check_forward_expansive(500, 1e-8, 5).unwrap();
        assert!(r.is_expansive(), "{r:?}");
        let r = circle(&[(2, 0.0)]).check_forward_expansive(10, 0.0, 5).unwrap();
        assert_eq!(r.skipped, 10);
        assert_eq!(r.separated, 0);
    }

    #[test]
    fn orbit_metrics() {
        let a: Vec<Point> = [0.1, 0.2, 0.4].iter().map(|&x| Point::circle(x)).collect();
        let b: Vec<Point> = [0.1, 0.25, 0.9].iter().map(|&x| Point::circle(x)).collect();
        assert!((OrbitMetric::Finite.distance(&a, &b) - 0.5).abs() < 1e-15);
        let w = OrbitMetric::omega().distance(&a, &b);
        let want = 0.25 * 0.05 / 1.05 + 0.125 * 0.5 / 1.5;
        assert!((w - want).abs() < 1e-15);
    }

    #[test]
    fn config_fragment_round_trips() {
        let t: Correspondence = serde_json::from_str(
            r#"{"generators": [{"kind": "circle_linear", "p": 2, "c": 0.0}, {"kind": "circle_linear", "p": 3, "c": 0.0}]}"#,
        )
        .unwrap();
        assert_eq!(t.k(), 2);
        let back: Correspondence = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
        assert!(serde_json::from_str::<Correspondence>(r#"{"generators": []}"#).is_err());
    }
}

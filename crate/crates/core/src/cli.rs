//! Experiment runner: JSON configuration, task dispatch, and CSV/JSON artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checks::{check_suite, CheckRow};
use crate::correspondence::Correspondence;
use crate::entropy::{entropy_report, variational_check};
use crate::error::{Error, Result};
use crate::kernel::{
    cylinder_measure, ks_uniform, sample_trajectories, word_distributions, CylinderMode, CylinderOptions,
    CylinderSpec, Kernel, KernelSpec, MarkovOptions, Partition, StartPoint, DEFAULT_SEED,
};
use crate::maps::Point;
use crate::operator::{check_kernel_invariance, invariant_density, GridDensity, PowerIterationOptions};
use crate::orbits::{BackwardOrbits, Potential, TreeSettings, DEFAULT_BRANCH_BUDGET, DEFAULT_MATERIALIZE_CAP};

pub const TOOL_NAME: &str = "corrtherm";
pub const DEFAULT_OUT_DIR: &str = "out";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Pressure,
    Density,
    Entropy,
    Markov,
    Cylinders,
    Check,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Pressure => "pressure",
            Task::Density => "density",
            Task::Entropy => "entropy",
            Task::Markov => "markov",
            Task::Cylinders => "cylinders",
            Task::Check => "check",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Numerics {
    /// Grid cells per dimension for densities and quadrature.
    pub resolution: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub n_min: usize,
    pub n_max: usize,
    /// Root of the backward orbit trees; the origin when unset.
    pub root: Option<Vec<f64>>,
    /// Net spacing for the spanning-set estimate; skipped when unset.
    pub epsilon: Option<f64>,
    pub spanning_n: usize,
    pub probes: usize,
    pub partition_size: usize,
    pub seed: u64,
    /// Branch budget; falls back to the environment, then the built-in default.
    pub budget: Option<u64>,
    pub materialize_cap: usize,
}

impl Default for Numerics {
    fn default() -> Self {
        Numerics {
            resolution: 1 << 12,
            tol: 1e-10,
            max_iter: 1000,
            n_min: 1,
            n_max: 10,
            root: None,
            epsilon: None,
            spanning_n: 6,
            probes: 32,
            partition_size: 16,
            seed: DEFAULT_SEED,
            budget: None,
            materialize_cap: DEFAULT_MATERIALIZE_CAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarkovSettings {
    pub steps: usize,
    pub burnin: usize,
    pub x0: StartPoint,
    pub trajectories: usize,
}

impl Default for MarkovSettings {
    fn default() -> Self {
        MarkovSettings {
            steps: 100_000,
            burnin: 0,
            x0: StartPoint::Lebesgue,
            trajectories: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CylinderSettings {
    /// Uniform halves of each coordinate when unset.
    pub partition: Option<Partition>,
    /// Explicit cell words; the full table of length `length` when empty.
    pub words: Vec<Vec<usize>>,
    pub length: usize,
    pub mode: CylinderMode,
    pub max_word: usize,
}

impl Default for CylinderSettings {
    fn default() -> Self {
        CylinderSettings {
            partition: None,
            words: vec![],
            length: 3,
            mode: CylinderMode::Auto,
            max_word: crate::kernel::DEFAULT_MAX_WORD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub task: Option<Task>,
    #[serde(default)]
    pub correspondence: Option<Correspondence>,
    #[serde(default)]
    pub potential: Potential,
    #[serde(default)]
    pub kernel: KernelSpec,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default)]
    pub markov: MarkovSettings,
    #[serde(default)]
    pub cylinders: CylinderSettings,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn for_task(task: Task) -> Self {
        ExperimentConfig {
            task: Some(task),
            correspondence: None,
            potential: Potential::default(),
            kernel: KernelSpec::default(),
            numerics: Numerics::default(),
            markov: MarkovSettings::default(),
            cylinders: CylinderSettings::default(),
            out: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fills every default explicitly and validates the result. Command-line values take
    /// precedence over the file.
    pub fn resolve(mut self, task: Option<Task>, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        let task = match (task, self.task) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::config(format!(
                    "command line asks for task {} but the config names {}",
                    a.name(),
                    b.name()
                )))
            }
            (Some(a), _) | (None, Some(a)) => a,
            (None, None) => return Err(Error::config("no task given")),
        };
        self.task = Some(task);
        if let Some(s) = seed {
            self.numerics.seed = s;
        }
        if let Some(o) = out {
            self.out = Some(o);
        }
        self.out.get_or_insert_with(|| PathBuf::from(DEFAULT_OUT_DIR));
        if self.numerics.budget.is_none() {
            self.numerics.budget = Some(TreeSettings::from_env()?.branch_budget);
        }
        if task == Task::Check {
            return Ok(self);
        }
        let t = self
            .correspondence
            .as_ref()
            .ok_or_else(|| Error::config(format!("task {} needs a correspondence", task.name())))?;
        let dim = t.dim();
        match &self.numerics.root {
            Some(r) if r.len() != dim => {
                return Err(Error::config(format!("root needs {dim} coordinates")));
            }
            None => self.numerics.root = Some(vec![0.0; dim]),
            _ => {}
        }
        if self.cylinders.partition.is_none() {
            self.cylinders.partition = Some(Partition::uniform(dim, 2));
        }
        self.potential.validate(t)?;
        Kernel::from_spec(&self.kernel, t)?;
        let n = &self.numerics;
        if n.resolution < crate::operator::MIN_RESOLUTION && matches!(task, Task::Density | Task::Entropy) {
            return Err(Error::config(format!(
                "resolution {} is below {}",
                n.resolution,
                crate::operator::MIN_RESOLUTION
            )));
        }
        if n.n_min == 0 || n.n_max < n.n_min {
            return Err(Error::config("need 1 <= n_min <= n_max"));
        }
        Ok(self)
    }

    fn correspondence(&self) -> Result<&Correspondence> {
        self.correspondence
            .as_ref()
            .ok_or_else(|| Error::config("config has no correspondence"))
    }

    fn tree_settings(&self) -> TreeSettings {
        TreeSettings {
            branch_budget: self.numerics.budget.unwrap_or(DEFAULT_BRANCH_BUDGET),
            materialize_cap: self.numerics.materialize_cap,
        }
    }

    fn root(&self) -> Point {
        Point::new(self.numerics.root.as_deref().unwrap_or(&[0.0]))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub task: Task,
    pub config: ExperimentConfig,
    pub wall_clock_seconds: f64,
    pub summary: BTreeMap<String, Value>,
    pub checks: Vec<CheckRow>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// 0 on success, 2 when a built-in check failed.
    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            0
        } else {
            2
        }
    }
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

struct Outputs<'a> {
    dir: &'a Path,
    written: Vec<String>,
}

impl Outputs<'_> {
    fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
        let mut w = csv::Writer::from_path(self.dir.join(name))?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(&row)?;
        }
        w.flush()?;
        self.written.push(name.into());
        Ok(())
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        fs::write(self.dir.join(name), serde_json::to_string_pretty(value)? + "\n")?;
        self.written.push(name.into());
        Ok(())
    }
}

fn point_columns(prefix: &str, dim: usize) -> Vec<String> {
    if dim == 1 {
        vec![prefix.to_string()]
    } else {
        (1..=dim).map(|d| format!("{prefix}{d}")).collect()
    }
}

fn word_label(word: &[impl ToString]) -> String {
    word.iter().map(ToString::to_string).collect::<Vec<_>>().join("-")
}

/// Runs the task named by a resolved configuration, writes its artifacts and the manifest.
pub fn run(config: &ExperimentConfig) -> Result<RunManifest> {
    let start = Instant::now();
    let task = config.task.ok_or_else(|| Error::config("no task given"))?;
    let dir = config.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    fs::create_dir_all(&dir)?;
    let mut out = Outputs {
        dir: &dir,
        written: vec![],
    };
    let mut summary = BTreeMap::new();
    let mut checks = vec![];
    out.json("resolved_config.json", config)?;
    match task {
        Task::Pressure => pressure(config, &mut out, &mut summary)?,
        Task::Density => density(config, &mut out, &mut summary, &mut checks)?,
        Task::Entropy => entropy(config, &mut out, &mut summary, &mut checks)?,
        Task::Markov => markov(config, &mut out, &mut summary)?,
        Task::Cylinders => cylinders(config, &mut out, &mut summary)?,
        Task::Check => {
            checks = check_suite();
            out.csv(
                "check.csv",
                &["criterion", "expected", "observed", "tolerance", "pass", "seconds"],
                checks.iter().map(|c| {
                    vec![
                        c.id.clone(),
                        c.expected.clone(),
                        c.observed.clone(),
                        c.tolerance.clone(),
                        c.pass.to_string(),
                        format!("{:.3}", c.seconds),
                    ]
                }),
            )?;
            summary.insert("criteria".into(), json!(checks.len()));
            summary.insert("passed".into(), json!(checks.iter().filter(|c| c.pass).count()));
        }
    }
    let mut manifest = RunManifest {
        tool: TOOL_NAME.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        task,
        config: config.clone(),
        wall_clock_seconds: 0.0,
        summary,
        checks,
        outputs: vec![],
    };
    out.written.push("manifest.json".into());
    manifest.outputs = out.written.clone();
    manifest.wall_clock_seconds = start.elapsed().as_secs_f64();
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

fn pressure(config: &ExperimentConfig, out: &mut Outputs, summary: &mut BTreeMap<String, Value>) -> Result<()> {
    let t = config.correspondence()?;
    let n = &config.numerics;
    let orbits = BackwardOrbits::new(t, &config.potential, config.tree_settings())?;
    let root = config.root();
    let growth = orbits.pressure_via_growth(&root, n.n_min, n.n_max)?;
    out.csv(
        "pressure.csv",
        &["n", "log_phi_n", "rate"],
        growth
            .sequence
            .iter()
            .map(|&(k, rate)| vec![k.to_string(), fmt_f64(rate * k as f64), fmt_f64(rate)]),
    )?;
    summary.insert("pressure_estimate".into(), json!(growth.estimate));
    summary.insert("fit_slope".into(), json!(growth.slope));
    summary.insert("separated_lower".into(), json!(orbits.pressure_separated_lower(&root, n.n_max)?));
    if let Some(eps) = n.epsilon {
        summary.insert("spanning_upper".into(), json!(orbits.pressure_spanning_upper(eps, n.spanning_n)?));
        summary.insert("net_size".into(), json!(orbits.net_size(eps)?));
    }
    summary.insert("log_k".into(), json!((t.k() as f64).ln()));
    Ok(())
}

fn solve_density(config: &ExperimentConfig) -> Result<crate::operator::InvariantDensity> {
    let n = &config.numerics;
    invariant_density(
        config.correspondence()?,
        &config.potential,
        &PowerIterationOptions {
            resolution: n.resolution,
            tol: n.tol,
            max_iter: n.max_iter,
        },
        None,
    )
}

fn is_jacobian_type(phi: &Potential) -> bool {
    matches!(phi, Potential::Jacobian | Potential::TorusMeasurable { .. })
}

fn density(
    config: &ExperimentConfig,
    out: &mut Outputs,
    summary: &mut BTreeMap<String, Value>,
    checks: &mut Vec<CheckRow>,
) -> Result<()> {
    let t = config.correspondence()?;
    let r = solve_density(config)?;
    let d = &r.density;
    let mut header = vec!["cell".to_string()];
    header.extend(point_columns("x", d.dim()));
    header.push("density".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv(
        "density.csv",
        &header,
        (0..d.len()).map(|i| {
            let mut row = vec![i.to_string()];
            row.extend(d.cell_center(i).coords().iter().map(|&c| fmt_f64(c)));
            row.push(fmt_f64(d.values()[i]));
            row
        }),
    )?;
    summary.insert("eigenvalue".into(), json!(r.eigenvalue));
    summary.insert("residual".into(), json!(r.residual));
    summary.insert("iterations".into(), json!(r.iterations));
    summary.insert("max_over_min".into(), json!(d.max_over_min()));
    let kernel = Kernel::from_spec(&config.kernel, t)?;
    let discrepancy = check_kernel_invariance(t, d, &kernel)?;
    summary.insert("kernel_discrepancy".into(), json!(discrepancy));
    if is_jacobian_type(&config.potential) && kernel.is_uniform() {
        let k = t.k() as f64;
        checks.push(CheckRow {
            id: "eigenvalue".into(),
            expected: format!("{k}"),
            observed: format!("{}", r.eigenvalue),
            tolerance: "1e-4 relative".into(),
            pass: (r.eigenvalue - k).abs() <= 1e-4 * k,
            seconds: 0.0,
            budget_seconds: f64::NAN,
        });
        checks.push(CheckRow {
            id: "kernel_invariance".into(),
            expected: "0".into(),
            observed: format!("{discrepancy:e}"),
            tolerance: "1e-5".into(),
            pass: discrepancy <= 1e-5,
            seconds: 0.0,
            budget_seconds: f64::NAN,
        });
    }
    Ok(())
}

/// Lebesgue measure when every generator has constant Jacobian, the converged density
/// otherwise.
fn reference_density(config: &ExperimentConfig) -> Result<GridDensity> {
    let t = config.correspondence()?;
    if t.generators().iter().all(|g| g.has_constant_jacobian()) {
        Ok(GridDensity::uniform(t.dim(), config.numerics.resolution))
    } else {
        Ok(solve_density(&ExperimentConfig {
            potential: Potential::TorusMeasurable { c_e: None },
            ..config.clone()
        })?
        .density)
    }
}

fn entropy(
    config: &ExperimentConfig,
    out: &mut Outputs,
    summary: &mut BTreeMap<String, Value>,
    checks: &mut Vec<CheckRow>,
) -> Result<()> {
    let t = config.correspondence()?;
    let mu = reference_density(config)?;
    let n = &config.numerics;
    let opts = CylinderOptions {
        resolution: n.resolution,
        ..Default::default()
    };
    let report = entropy_report(t, &config.potential, &mu, n.partition_size, n.n_max, &opts)?;
    out.json("entropy.json", &report)?;
    out.csv(
        "entropy_rates.csv",
        &["n", "partition_size", "entropy", "rate"],
        report.h_partition.iter().map(|r| {
            vec![
                r.n.to_string(),
                r.partition_size.to_string(),
                fmt_f64(r.entropy),
                fmt_f64(r.rate),
            ]
        }),
    )?;
    summary.insert("h_analytic".into(), json!(report.h_analytic));
    summary.insert("h_extrapolated".into(), json!(report.h_extrapolated));
    summary.insert("fiber_entropy".into(), json!(report.fiber_entropy));
    summary.insert("variational_lhs".into(), json!(report.variational_lhs));
    summary.insert("pressure_rhs".into(), json!(report.pressure_rhs));
    if is_jacobian_type(&config.potential) {
        let gap = variational_check(t, &config.potential, &mu, &Kernel::uniform(t.k()))?.gap;
        checks.push(CheckRow {
            id: "variational_gap".into(),
            expected: "0".into(),
            observed: format!("{gap:e}"),
            tolerance: "1e-6".into(),
            pass: gap.abs() <= 1e-6,
            seconds: 0.0,
            budget_seconds: f64::NAN,
        });
    }
    Ok(())
}

fn markov(config: &ExperimentConfig, out: &mut Outputs, summary: &mut BTreeMap<String, Value>) -> Result<()> {
    let t = config.correspondence()?;
    let kernel = Kernel::from_spec(&config.kernel, t)?;
    let m = &config.markov;
    if m.trajectories == 0 {
        return Err(Error::config("trajectories must be at least 1"));
    }
    let opts = MarkovOptions {
        steps: m.steps,
        burnin: m.burnin,
        seed: config.numerics.seed,
    };
    let samples = sample_trajectories(t, &kernel, &m.x0, &opts, m.trajectories)?;
    let mut header = vec!["trajectory".to_string(), "step".to_string()];
    header.extend(point_columns("x", t.dim()));
    header.push("symbol".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv(
        "trajectory.csv",
        &header,
        samples.iter().flat_map(|s| {
            s.trajectory.iter().enumerate().map(move |(i, (x, j))| {
                let mut row = vec![s.stream.to_string(), i.to_string()];
                row.extend(x.coords().iter().map(|&c| fmt_f64(c)));
                row.push(j.to_string());
                row
            })
        }),
    )?;
    let points: Vec<f64> = samples.iter().flat_map(|s| s.circle_points()).collect();
    summary.insert("ks_uniform_first_coordinate".into(), json!(ks_uniform(&points)));
    summary.insert("points".into(), json!(points.len()));
    summary.insert("seed".into(), json!(config.numerics.seed));
    Ok(())
}

fn cylinders(config: &ExperimentConfig, out: &mut Outputs, summary: &mut BTreeMap<String, Value>) -> Result<()> {
    let t = config.correspondence()?;
    let kernel = Kernel::from_spec(&config.kernel, t)?;
    let c = &config.cylinders;
    let partition = c.partition.clone().unwrap_or_else(|| Partition::uniform(t.dim(), 2));
    let mu = GridDensity::uniform(t.dim(), config.numerics.resolution.max(1));
    let opts = CylinderOptions {
        mode: c.mode,
        resolution: config.numerics.resolution,
        max_word: c.max_word,
    };
    let mut rows = vec![];
    if c.words.is_empty() {
        let tables = word_distributions(&mu, &kernel, t, &partition, c.length, &opts)?;
        let last = tables.last().unwrap();
        summary.insert("mode".into(), json!(last.mode));
        summary.insert("words".into(), json!(last.words.len()));
        summary.insert("total".into(), json!(last.total()));
        for (w, p) in &last.words {
            rows.push(vec![word_label(w), fmt_f64(*p), String::new()]);
        }
    } else {
        for word in &c.words {
            let spec = CylinderSpec {
                partition: partition.clone(),
                word: word.clone(),
            };
            let m = cylinder_measure(&mu, &kernel, t, &spec, &opts)?;
            summary.insert("mode".into(), json!(m.mode));
            rows.push(vec![
                word_label(word),
                fmt_f64(m.value),
                m.exact.map(|r| r.to_string()).unwrap_or_default(),
            ]);
        }
    }
    out.csv("cylinders.csv", &["word", "measure", "exact"], rows)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const PAIR: &str = r#"{
        "correspondence": {"generators": [
            {"kind": "circle_linear", "p": 2, "c": 0.0},
            {"kind": "circle_linear", "p": 2, "c": 0.5}
        ]}
    }"#;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_json(r#"{"task": "pressure", "resolutoin": 4096}"#).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert!(ExperimentConfig::from_json(r#"{"numerics": {"bogus": 1}}"#).is_err());
    }

    #[test]
    fn resolution_below_minimum_is_a_config_error() {
        let mut c = ExperimentConfig::from_json(PAIR).unwrap();
        c.numerics.resolution = 3;
        let err = c.resolve(Some(Task::Density), None, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn conflicting_tasks_are_rejected() {
        let mut c = ExperimentConfig::from_json(PAIR).unwrap();
        c.task = Some(Task::Markov);
        assert!(c.resolve(Some(Task::Density), None, None).is_err());
        assert!(ExperimentConfig::from_json(PAIR).unwrap().resolve(None, None, None).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = ExperimentConfig::from_json(PAIR)
            .unwrap()
            .resolve(Some(Task::Pressure), Some(7), None)
            .unwrap();
        assert_eq!(c.numerics.seed, 7);
        assert_eq!(c.numerics.root, Some(vec![0.0]));
        assert!(c.numerics.budget.is_some());
        let again = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.clone().resolve(None, None, None).unwrap(), c);
    }

    #[test]
    fn csv_floats_carry_17_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(std::f64::consts::LN_2).parse::<f64>().unwrap(), std::f64::consts::LN_2);
    }

    #[test]
    fn failed_check_maps_to_exit_two() {
        let row = |pass| CheckRow {
            id: "x".into(),
            expected: "0".into(),
            observed: "0".into(),
            tolerance: "0".into(),
            pass,
            seconds: 0.0,
            budget_seconds: f64::NAN,
        };
        let mut m = RunManifest {
            tool: TOOL_NAME.into(),
            version: "0".into(),
            task: Task::Check,
            config: ExperimentConfig::for_task(Task::Check),
            wall_clock_seconds: 0.0,
            summary: BTreeMap::new(),
            checks: vec![row(true)],
            outputs: vec![],
        };
        assert_eq!(m.exit_code(), 0);
        m.checks.push(row(false));
        assert_eq!(m.exit_code(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn numerics_round_trip(res in 64usize..10_000, tol in 1e-14f64..1e-3, seed in any::<u64>(), eps in proptest::option::of(0.01f64..1.0)) {
            let mut c = ExperimentConfig::for_task(Task::Density);
            c.numerics.resolution = res;
            c.numerics.tol = tol;
            c.numerics.seed = seed;
            c.numerics.epsilon = eps;
            let again = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
            prop_assert_eq!(again, c);
        }
    }
}

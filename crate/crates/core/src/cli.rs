//! Batch driver: flat `key = value` configuration with command-line
//! overrides, the full solve pipeline and machine-readable outputs.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{FlowMetrics, ResidualReport, Solution};
use crate::geometry::{ClusterParams, ObstacleShape, TransformParams};
use crate::rbf::KernelParams;
use crate::system::{Discretisation, FlowSystem, JacobianMode};
use crate::trustregion::{validate_schedule, TrustRegionConfig};

/// Environment variable that overrides the output directory.
pub const OUT_ENV: &str = "RBFPU_FLOW_OUT";

/// Which output files a run writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Exports {
    pub metrics: bool,
    pub surface: bool,
    pub field: bool,
    pub residuals: bool,
}

impl Default for Exports {
    fn default() -> Self {
        Self { metrics: true, surface: true, field: true, residuals: true }
    }
}

impl Exports {
    fn names(&self) -> Vec<&'static str> {
        let all = [
            (self.metrics, "metrics"),
            (self.surface, "surface"),
            (self.field, "field"),
            (self.residuals, "residuals"),
        ];
        all.iter().filter(|(on, _)| *on).map(|(_, n)| *n).collect()
    }
}

/// Everything a run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub shape: ObstacleShape,
    pub h: f64,
    pub ell: f64,
    pub epsilon: f64,
    pub patch_radius: f64,
    pub cluster_lambda: f64,
    pub re_schedule: Vec<f64>,
    pub trust_region: TrustRegionConfig,
    pub jacobian_mode: JacobianMode,
    pub output: PathBuf,
    pub exports: Exports,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            shape: ObstacleShape::Circle,
            h: 0.05,
            ell: 2.0,
            epsilon: 2.0,
            patch_radius: 0.25,
            cluster_lambda: 0.1,
            re_schedule: vec![1.0, 20.0, 40.0],
            trust_region: TrustRegionConfig::default(),
            jacobian_mode: JacobianMode::ReducedDense,
            output: PathBuf::from("out"),
            exports: Exports::default(),
        }
    }
}

fn config_error(key: &str, message: impl Into<String>) -> Error {
    Error::Config { key: key.into(), message: message.into() }
}

fn number<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| config_error(key, format!("cannot parse `{value}`")))
}

/// `circle`, `rounded:<alpha>` or `square`.
pub fn parse_shape(value: &str) -> Result<ObstacleShape> {
    let v = value.trim();
    match v {
        "circle" => Ok(ObstacleShape::Circle),
        "square" => Ok(ObstacleShape::Square),
        _ => {
            let alpha = v
                .strip_prefix("rounded:")
                .ok_or_else(|| config_error("shape", format!("unknown shape `{v}`")))?;
            let alpha: u32 = number("shape", alpha)?;
            ObstacleShape::rounded(alpha).map_err(|e| config_error("shape", e.to_string()))
        }
    }
}

pub fn shape_name(shape: ObstacleShape) -> String {
    match shape {
        ObstacleShape::Circle => "circle".into(),
        ObstacleShape::RoundedSquare(a) => format!("rounded:{a}"),
        ObstacleShape::Square => "square".into(),
    }
}

fn mode_name(mode: JacobianMode) -> &'static str {
    match mode {
        JacobianMode::ReducedDense => "reduced-dense",
        JacobianMode::SparseAlternative => "sparse-alternative",
    }
}

impl RunConfig {
    /// Applies one `key = value` setting. Keys accept `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        let tr = &mut self.trust_region;
        match k {
            "shape" => self.shape = parse_shape(value)?,
            "h" => self.h = number(k, value)?,
            "ell" => self.ell = number(k, value)?,
            "epsilon" => self.epsilon = number(k, value)?,
            "patch_radius" => self.patch_radius = number(k, value)?,
            "cluster_lambda" => self.cluster_lambda = number(k, value)?,
            "re_schedule" | "re" => {
                self.re_schedule = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| number("re_schedule", s))
                    .collect::<Result<_>>()?
            }
            "delta0" => tr.delta0 = number(k, value)?,
            "delta_max" => tr.delta_max = number(k, value)?,
            "eta_accept" => tr.eta_accept = number(k, value)?,
            "shrink" => tr.shrink = number(k, value)?,
            "grow" => tr.grow = number(k, value)?,
            "tol_residual" => tr.tol_residual = number(k, value)?,
            "tol_step" => tr.tol_step = number(k, value)?,
            "max_iters" => tr.max_iters = number(k, value)?,
            "jacobian_mode" => {
                self.jacobian_mode = match value.trim() {
                    "reduced-dense" => JacobianMode::ReducedDense,
                    "sparse-alternative" => JacobianMode::SparseAlternative,
                    other => return Err(config_error(k, format!("unknown mode `{other}`"))),
                }
            }
            "output" => self.output = PathBuf::from(value.trim()),
            "export" => {
                let mut e = Exports { metrics: false, surface: false, field: false, residuals: false };
                for name in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    match name {
                        "metrics" => e.metrics = true,
                        "surface" => e.surface = true,
                        "field" => e.field = true,
                        "residuals" => e.residuals = true,
                        "all" => e = Exports::default(),
                        other => return Err(config_error(k, format!("unknown export `{other}`"))),
                    }
                }
                self.exports = e;
            }
            _ => return Err(config_error(k, "unknown key")),
        }
        Ok(())
    }

    /// Checks every invariant, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h < self.ell) {
            return Err(config_error("h", format!("must lie in (0, ell), got {}", self.h)));
        }
        if !(self.ell >= 1.0) || !self.ell.is_finite() {
            return Err(config_error("ell", format!("must be >= 1, got {}", self.ell)));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(config_error("epsilon", format!("must be > 0, got {}", self.epsilon)));
        }
        if !(self.patch_radius > self.h / 2.0) {
            return Err(config_error("patch_radius", "must exceed half the node spacing"));
        }
        if !(self.cluster_lambda > 0.0) {
            return Err(config_error("cluster_lambda", "must be > 0"));
        }
        validate_schedule(&self.re_schedule).map_err(|e| config_error("re_schedule", e.to_string()))?;
        self.trust_region.validate()
    }

    pub fn discretisation(&self) -> Result<Discretisation> {
        let mut d = Discretisation::new(self.shape, self.h).with_patch_radius(self.patch_radius);
        d.transform = TransformParams::new(self.ell)?;
        d.kernel = KernelParams::new(self.epsilon)?;
        d.cluster = ClusterParams::new(self.cluster_lambda)?;
        Ok(d)
    }

    /// Canonical settings in a fixed order. The output directory is left
    /// out so identical runs in different places produce identical files.
    pub fn settings(&self) -> Vec<(&'static str, String)> {
        let tr = &self.trust_region;
        let list = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("shape", shape_name(self.shape)),
            ("h", self.h.to_string()),
            ("ell", self.ell.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("patch_radius", self.patch_radius.to_string()),
            ("cluster_lambda", self.cluster_lambda.to_string()),
            ("re_schedule", list(&self.re_schedule)),
            ("delta0", tr.delta0.to_string()),
            ("delta_max", tr.delta_max.to_string()),
            ("eta_accept", tr.eta_accept.to_string()),
            ("shrink", tr.shrink.to_string()),
            ("grow", tr.grow.to_string()),
            ("tol_residual", tr.tol_residual.to_string()),
            ("tol_step", tr.tol_step.to_string()),
            ("max_iters", tr.max_iters.to_string()),
            ("jacobian_mode", mode_name(self.jacobian_mode).into()),
            ("export", self.exports.names().join(",")),
        ]
    }

    /// One-line `key=value` summary for file headers.
    pub fn header(&self) -> String {
        self.settings().iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
    }
}

/// Splits flat `key = value` text into pairs. `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_error(line, "expected `key = value`"))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Builds a validated configuration. Later sources win: defaults, then the
/// file, then the output directory from the environment, then flags.
pub fn load_config(file_text: Option<&str>, env_output: Option<&str>, flags: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(text) = file_text {
        for (k, v) in parse_config_text(text)? {
            cfg.set(&k, &v)?;
        }
    }
    if let Some(out) = env_output {
        cfg.set("output", out)?;
    }
    for (k, v) in flags {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Parser)]
#[command(name = "rbfpu-flow", version, about = "Steady flow past a cylinder with an RBF partition-of-unity solver")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve a Reynolds schedule and write the outputs.
    Run(RunArgs),
}

/// Flags mirror the configuration keys and override the file.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// circle, rounded:<alpha> or square.
    #[arg(long)]
    pub shape: Option<String>,
    /// Node spacing in the transformed domain.
    #[arg(long)]
    pub h: Option<String>,
    #[arg(long)]
    pub ell: Option<String>,
    #[arg(long)]
    pub epsilon: Option<String>,
    #[arg(long)]
    pub patch_radius: Option<String>,
    #[arg(long)]
    pub cluster_lambda: Option<String>,
    /// Comma separated, strictly increasing Reynolds numbers.
    #[arg(long, visible_alias = "re")]
    pub re_schedule: Option<String>,
    #[arg(long)]
    pub delta0: Option<String>,
    #[arg(long)]
    pub delta_max: Option<String>,
    #[arg(long)]
    pub eta_accept: Option<String>,
    #[arg(long)]
    pub shrink: Option<String>,
    #[arg(long)]
    pub grow: Option<String>,
    #[arg(long)]
    pub tol_residual: Option<String>,
    #[arg(long)]
    pub tol_step: Option<String>,
    #[arg(long)]
    pub max_iters: Option<String>,
    /// reduced-dense or sparse-alternative.
    #[arg(long)]
    pub jacobian_mode: Option<String>,
    /// Output directory.
    #[arg(long, short)]
    pub output: Option<String>,
    /// Comma separated subset of metrics, surface, field, residuals.
    #[arg(long)]
    pub export: Option<String>,
}

impl RunArgs {
    /// Flags that were given, as configuration pairs.
    pub fn overrides(&self) -> Vec<(String, String)> {
        let fields = [
            ("shape", &self.shape),
            ("h", &self.h),
            ("ell", &self.ell),
            ("epsilon", &self.epsilon),
            ("patch_radius", &self.patch_radius),
            ("cluster_lambda", &self.cluster_lambda),
            ("re_schedule", &self.re_schedule),
            ("delta0", &self.delta0),
            ("delta_max", &self.delta_max),
            ("eta_accept", &self.eta_accept),
            ("shrink", &self.shrink),
            ("grow", &self.grow),
            ("tol_residual", &self.tol_residual),
            ("tol_step", &self.tol_step),
            ("max_iters", &self.max_iters),
            ("jacobian_mode", &self.jacobian_mode),
            ("output", &self.output),
            ("export", &self.export),
        ];
        fields.iter().filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone()))).collect()
    }

    /// Reads the file named by `--config` and the environment, then applies
    /// the flags.
    pub fn to_config(&self) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| config_error("config", format!("{}: {e}", p.display())))?),
            None => None,
        };
        let env = std::env::var(OUT_ENV).ok();
        load_config(text.as_deref(), env.as_deref(), &self.overrides())
    }
}

/// Result of a run that got as far as the solver.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub converged: bool,
    pub failed_stage: Option<usize>,
    pub metrics: Vec<FlowMetrics>,
    pub files: Vec<PathBuf>,
}

impl RunOutcome {
    /// 0 on full convergence, 2 when a stage failed.
    pub fn exit_code(&self) -> i32 {
        if self.converged {
            0
        } else {
            2
        }
    }
}

#[derive(Serialize)]
struct ConfigRecord<'a> {
    shape: String,
    h: f64,
    ell: f64,
    epsilon: f64,
    patch_radius: f64,
    cluster_lambda: f64,
    re_schedule: &'a [f64],
    trust_region: &'a TrustRegionConfig,
    jacobian_mode: &'static str,
    export: Vec<&'static str>,
}

#[derive(Serialize)]
struct StageRecord {
    re: f64,
    converged: bool,
    iterations: usize,
    jacobian_evaluations: usize,
    final_residual_inf: f64,
    merit_history: Vec<f64>,
    metrics: Option<FlowMetrics>,
    residuals: Option<ResidualReport>,
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    config: ConfigRecord<'a>,
    converged: bool,
    failed_stage: Option<usize>,
    stages: Vec<StageRecord>,
}

/// Seventeen significant digits.
fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_csv(path: &Path, header: &str, columns: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    writeln!(file, "# rbfpu-flow {header}")?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(columns).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the pipeline and writes the selected outputs. Converged stages get
/// metrics, profiles and residuals; a failed stage is recorded with
/// `"converged": false`.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output)?;
    let sys = FlowSystem::build(cfg.discretisation()?)?;
    info!("{} nodes, {} interior", sys.n(), sys.n_interior());
    let cont = sys.continuation(&cfg.re_schedule, cfg.jacobian_mode, &cfg.trust_region)?;
    let header = cfg.header();

    let mut stages = Vec::new();
    let mut metrics = Vec::new();
    let (mut surface, mut field, mut residual_rows) = (Vec::new(), Vec::new(), Vec::new());
    for (stage, x) in cont.report.stages.iter().zip(&cont.solutions) {
        let rep = &stage.report;
        let mut record = StageRecord {
            re: stage.re,
            converged: rep.converged,
            iterations: rep.iterations,
            jacobian_evaluations: rep.jacobian_evaluations,
            final_residual_inf: rep.final_residual_inf,
            merit_history: rep.merit_history.clone(),
            metrics: None,
            residuals: None,
        };
        if rep.converged {
            let sol = Solution::new(&sys, x, stage.re)?;
            let m = sol.metrics()?;
            let r = sol.residual_report()?;
            let re = num(stage.re);
            if cfg.exports.surface {
                for s in sol.surface_profiles() {
                    surface.push(vec![re.clone(), num(s.phi_plot), num(s.pressure), num(s.vorticity)]);
                }
            }
            if cfg.exports.field {
                for f in sol.field_samples()? {
                    let inside = if f.inside { "1" } else { "0" };
                    field.push(vec![
                        re.clone(),
                        num(f.x),
                        num(f.y),
                        inside.into(),
                        num(f.u),
                        num(f.v),
                        num(f.p),
                        num(f.omega),
                    ]);
                }
            }
            for (name, s) in ["r1", "r2", "r3"].iter().zip(r.stats()) {
                residual_rows.push(vec![re.clone(), name.to_string(), num(s.rms), num(s.max), r.samples.to_string()]);
            }
            record.metrics = Some(m);
            record.residuals = Some(r);
            metrics.push(m);
        }
        stages.push(record);
    }

    let mut files = Vec::new();
    let out = &cfg.output;
    if cfg.exports.metrics {
        let doc = MetricsFile {
            config: ConfigRecord {
                shape: shape_name(cfg.shape),
                h: cfg.h,
                ell: cfg.ell,
                epsilon: cfg.epsilon,
                patch_radius: cfg.patch_radius,
                cluster_lambda: cfg.cluster_lambda,
                re_schedule: &cfg.re_schedule,
                trust_region: &cfg.trust_region,
                jacobian_mode: mode_name(cfg.jacobian_mode),
                export: cfg.exports.names(),
            },
            converged: cont.report.converged(),
            failed_stage: cont.report.failed_stage,
            stages,
        };
        let path = out.join("metrics.json");
        let mut text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        text.push('\n');
        fs::write(&path, text)?;
        files.push(path);
    }
    if cfg.exports.surface {
        let path = out.join("surface.csv");
        write_csv(&path, &header, &["re", "phi_plot", "p", "omega"], &surface)?;
        files.push(path);
    }
    if cfg.exports.field {
        let path = out.join("field.csv");
        write_csv(&path, &header, &["re", "x", "y", "inside", "u", "v", "p", "omega"], &field)?;
        files.push(path);
    }
    if cfg.exports.residuals {
        let path = out.join("residuals.csv");
        write_csv(&path, &header, &["re", "equation", "rms", "max", "samples"], &residual_rows)?;
        files.push(path);
    }
    Ok(RunOutcome { converged: cont.report.converged(), failed_stage: cont.report.failed_stage, metrics, files })
}

/// Human-readable summary of a finished run.
pub fn summary(outcome: &RunOutcome) -> String {
    let mut s = String::new();
    for m in &outcome.metrics {
        let _ = write!(
            s,
            "Re = {}: C_D = {:.4} (C_p = {:.4}, C_w = {:.4}), L = {:.4}",
            m.re, m.c_d, m.c_p, m.c_omega, m.wake_length
        );
        if let Some((a, b)) = m.eddy_centre {
            let _ = write!(s, ", eddy = ({a:.4}, {b:.4})");
        }
        s.push('\n');
    }
    if let Some(k) = outcome.failed_stage {
        let _ = writeln!(s, "stage {k} did not converge");
    }
    s
}

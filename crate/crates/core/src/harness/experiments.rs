//! The multi-arm desk experiments. Each writes one CSV per arm and a
//! `summary.csv` into the output directory; arms that do not depend on each
//! other train in parallel.

use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::config::ExperimentConfig;
use super::data::Dataset;
use super::model::{fold_rho_into_classifier, Weight, WeightParam};
use super::train::{emit_csv, train_model, RunResult, TrainSpec, EVAL_CHUNK};
use super::{HarnessError, Result};
use crate::activation_norm::{NormMetric, NormScheme};
use crate::constants::{mc_dispersion_ratio, ConstantQuery, McEstimate, Scheme};
use crate::dynamics::{
    default_claim_check, norm_growth_probe, ClaimReport, DynamicsError, GrowthReport, OptimizerMode, Trajectory,
};
use crate::numeric::{Execution, PrecisionMode};
use crate::weight_norm::{rho_init, NormOrder};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentName {
    WdEquivalence,
    NormSchedule,
    Constants,
    Claim,
    HalfPrecision,
    BwnInvariance,
    LpCompare,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 7] = [
        ExperimentName::WdEquivalence,
        ExperimentName::NormSchedule,
        ExperimentName::Constants,
        ExperimentName::Claim,
        ExperimentName::HalfPrecision,
        ExperimentName::BwnInvariance,
        ExperimentName::LpCompare,
    ];
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExperimentName::WdEquivalence => "wd-equivalence",
            ExperimentName::NormSchedule => "norm-schedule",
            ExperimentName::Constants => "constants",
            ExperimentName::Claim => "claim",
            ExperimentName::HalfPrecision => "half-precision",
            ExperimentName::BwnInvariance => "bwn-invariance",
            ExperimentName::LpCompare => "lp-compare",
        })
    }
}

impl FromStr for ExperimentName {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|n| n.to_string() == s).ok_or_else(|| HarnessError::UnknownExperiment(s.to_string()))
    }
}

/// One trained arm.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub name: String,
    pub result: RunResult,
}

impl Arm {
    pub fn accuracy(&self) -> f64 {
        self.result.final_val_acc()
    }
}

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

fn e6(v: f64) -> String {
    format!("{v:.6e}")
}

struct Summary {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Summary {
    fn new(header: &[&'static str]) -> Self {
        Self { header: header.to_vec(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Data plus the base training spec shared by an experiment's arms.
struct Base {
    train: Dataset,
    val: Dataset,
    spec: TrainSpec,
}

fn base(cfg: &ExperimentConfig) -> Result<Base> {
    let (train, val) = cfg.load_data()?;
    let spec = cfg.train_spec(&train)?;
    Ok(Base { train, val, spec })
}

fn run_arms(base: &Base, arms: Vec<(String, TrainSpec)>, reference: Option<&Trajectory>) -> Result<Vec<Arm>> {
    let results = Execution::default().map(arms.len(), |i| train_model(&arms[i].1, &base.train, &base.val, reference));
    arms.into_iter().zip(results).map(|((name, _), r)| r.map(|(result, _)| Arm { name, result })).collect()
}

fn write_arms(out: &Path, arms: &[Arm], files: &mut Vec<PathBuf>) -> Result<()> {
    for arm in arms {
        let path = out.join(format!("{}.csv", arm.name));
        emit_csv(&arm.result, &path)?;
        files.push(path);
    }
    Ok(())
}

fn write_trajectory(path: PathBuf, trajectory: &Trajectory, files: &mut Vec<PathBuf>) -> Result<()> {
    trajectory.write_csv(BufWriter::new(File::create(&path)?))?;
    files.push(path);
    Ok(())
}

fn with_norm(spec: &TrainSpec, norm: Option<NormScheme>) -> TrainSpec {
    let mut s = spec.clone();
    s.model.layers.iter_mut().for_each(|l| l.norm = norm);
    s
}

fn dispersion_norm(spec: &TrainSpec, metric: NormMetric) -> Option<NormScheme> {
    let template = spec.model.layers.iter().find_map(|l| l.norm).unwrap_or(NormScheme::batch(NormMetric::L2));
    Some(NormScheme { metric, mean_only: false, ..template })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WdEquivalenceReport {
    pub arms: Vec<Arm>,
    pub growth_wd_off: GrowthReport,
    pub growth_wd_on: GrowthReport,
    /// Largest relative difference between the corrected arm's applied
    /// effective steps and the WD-on arm's.
    pub max_effective_step_deviation: f64,
    pub files: Vec<PathBuf>,
}

impl WdEquivalenceReport {
    pub fn arm(&self, name: &str) -> Option<&Arm> {
        self.arms.iter().find(|a| a.name == name)
    }
}

pub const WD_ON: &str = "wd-on";
pub const WD_OFF: &str = "wd-off";
pub const WD_OFF_CORRECTED: &str = "wd-off-corrected";
pub const NORM_SCHEDULED: &str = "norm-schedule";

fn max_step_deviation(reference: &RunResult, other: &RunResult) -> f64 {
    if reference.effective_steps.len() != other.effective_steps.len() {
        return f64::INFINITY;
    }
    reference
        .effective_steps
        .iter()
        .zip(&other.effective_steps)
        .map(|(a, b)| {
            if (a.step, a.layer, a.channel) == (b.step, b.layer, b.channel) {
                (b.value / a.value - 1.0).abs()
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}

/// WD on, WD off, WD off with the learning-rate correction replaying the WD
/// run's norms, and WD on with norm scheduling in place of rate decay.
pub fn wd_equivalence(cfg: &ExperimentConfig, out: &Path) -> Result<WdEquivalenceReport> {
    let b = base(cfg)?;
    let lambda = b.spec.optimizer.weight_decay;
    if !(lambda > 0.0) {
        return Err(HarnessError::Config("wd-equivalence needs optimizer.weight_decay > 0".into()));
    }
    let mut files = Vec::new();
    let mut on_spec = b.spec.clone();
    on_spec.optimizer.mode = OptimizerMode::Plain;
    on_spec.record_trajectory = true;
    let on = run_arms(&b, vec![(WD_ON.to_string(), on_spec.clone())], None)?.remove(0);
    let trajectory_path = out.join(format!("{WD_ON}.trajectory.csv"));
    write_trajectory(trajectory_path.clone(), &on.result.trajectory, &mut files)?;
    let replay = Trajectory::read_csv(File::open(&trajectory_path)?)?;

    let mut off = on_spec.clone();
    off.optimizer.weight_decay = 0.0;
    let mut corrected = off.clone();
    corrected.optimizer.mode = OptimizerMode::LrCorrection;
    corrected.record_trajectory = false;
    let mut scheduled = on_spec.clone();
    scheduled.optimizer.mode = OptimizerMode::NormSchedule;
    scheduled.record_trajectory = false;
    let rest = run_arms(
        &b,
        vec![
            (WD_OFF.to_string(), off),
            (WD_OFF_CORRECTED.to_string(), corrected),
            (NORM_SCHEDULED.to_string(), scheduled),
        ],
        Some(&replay),
    )?;
    let mut arms = vec![on];
    arms.extend(rest);
    write_arms(out, &arms, &mut files)?;
    write_trajectory(out.join(format!("{WD_OFF}.trajectory.csv")), &arms[1].result.trajectory, &mut files)?;

    let growth_wd_on = norm_growth_probe(&arms[0].result.trajectory);
    let growth_wd_off = norm_growth_probe(&arms[1].result.trajectory);
    let max_effective_step_deviation = max_step_deviation(&arms[0].result, &arms[2].result);
    let reference = arms[0].accuracy();
    let mut summary = Summary::new(&[
        "arm",
        "final_val_acc",
        "gap_vs_wd_on",
        "grew_fraction",
        "growth",
        "trailing_ratio",
        "bounded",
        "diverged",
    ]);
    for (i, arm) in arms.iter().enumerate() {
        let growth = match i {
            0 => Some(&growth_wd_on),
            1 => Some(&growth_wd_off),
            _ => None,
        };
        summary.push(vec![
            arm.name.clone(),
            f6(arm.accuracy()),
            f6(arm.accuracy() - reference),
            growth.map(|g| f6(g.grew_fraction)).unwrap_or_default(),
            growth.map(|g| g.growth.to_string()).unwrap_or_default(),
            growth.map(|g| f6(g.trailing_ratio)).unwrap_or_default(),
            growth.map(|g| g.bounded.to_string()).unwrap_or_default(),
            arm.result.diverged().to_string(),
        ]);
    }
    let path = out.join("summary.csv");
    summary.write(&path)?;
    files.push(path);
    Ok(WdEquivalenceReport { arms, growth_wd_off, growth_wd_on, max_effective_step_deviation, files })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmsReport {
    pub arms: Vec<Arm>,
    pub files: Vec<PathBuf>,
}

impl ArmsReport {
    pub fn arm(&self, name: &str) -> Option<&Arm> {
        self.arms.iter().find(|a| a.name == name)
    }
}

fn simple_summary(out: &Path, arms: &[Arm], reference: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    let base = arms.iter().find(|a| a.name == reference).map(|a| a.accuracy()).unwrap_or(f64::NAN);
    let mut summary = Summary::new(&["arm", "final_val_acc", "gap_vs_reference", "final_mean_norm", "diverged"]);
    for arm in arms {
        let mean_norm = arm.result.epochs.last().map(|e| e.mean_norm).unwrap_or(f64::NAN);
        summary.push(vec![
            arm.name.clone(),
            f6(arm.accuracy()),
            f6(arm.accuracy() - base),
            f6(mean_norm),
            arm.result.diverged().to_string(),
        ]);
    }
    let path = out.join("summary.csv");
    summary.write(&path)?;
    files.push(path);
    Ok(())
}

/// Rate decay versus norm scheduling under the configured weight decay.
pub fn norm_schedule(cfg: &ExperimentConfig, out: &Path) -> Result<ArmsReport> {
    let b = base(cfg)?;
    let mut lr = b.spec.clone();
    lr.optimizer.mode = OptimizerMode::Plain;
    let mut ns = b.spec.clone();
    ns.optimizer.mode = OptimizerMode::NormSchedule;
    let arms = run_arms(&b, vec![("lr-schedule".into(), lr), ("norm-schedule".into(), ns)], None)?;
    let mut files = Vec::new();
    write_arms(out, &arms, &mut files)?;
    simple_summary(out, &arms, "lr-schedule", &mut files)?;
    Ok(ArmsReport { arms, files })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantRow {
    pub query: ConstantQuery,
    pub closed_form: f64,
    pub estimate: McEstimate,
}

pub const CONSTANT_HEADER: [&str; 6] = ["scheme", "n", "k", "closed_form", "mc_value", "mc_stderr"];

pub fn constant_record(row: &ConstantRow) -> [String; 6] {
    [
        row.query.scheme().to_string(),
        row.query.n().to_string(),
        row.query.k().to_string(),
        format!("{:.9}", row.closed_form),
        format!("{:.9}", row.estimate.value),
        format!("{:.9}", row.estimate.stderr),
    ]
}

/// Closed-form constants against their Monte Carlo ratios for every batch
/// size in `experiment.sizes`.
pub fn constants(cfg: &ExperimentConfig, out: &Path) -> Result<(Vec<ConstantRow>, Vec<PathBuf>)> {
    let e = &cfg.experiment;
    let mut rows = Vec::new();
    for &n in &e.sizes {
        let mut queries = vec![ConstantQuery::l1(n)?, ConstantQuery::linf(n)?];
        if e.top_k < n {
            queries.push(ConstantQuery::topk(n, e.top_k)?);
        }
        for q in queries {
            let estimate = mc_dispersion_ratio(q, e.trials, cfg.run.seed)?;
            rows.push(ConstantRow { query: q, closed_form: q.closed_form(), estimate });
        }
    }
    let mut files = Vec::new();
    let path = out.join("constants.csv");
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&path)?));
    w.write_record(CONSTANT_HEADER)?;
    for r in &rows {
        w.write_record(constant_record(r))?;
    }
    w.flush()?;
    files.push(path);

    let mut summary = Summary::new(&["scheme", "n", "k", "mc_value", "deviation_in_stderr", "within_5_stderr"]);
    for r in &rows {
        let z = (r.estimate.value - 1.0) / r.estimate.stderr;
        let within = match r.query.scheme() {
            Scheme::L1 => (z.abs() <= 5.0).to_string(),
            _ => String::new(),
        };
        summary.push(vec![
            r.query.scheme().to_string(),
            r.query.n().to_string(),
            r.query.k().to_string(),
            format!("{:.9}", r.estimate.value),
            format!("{z:.3}"),
            within,
        ]);
    }
    let path = out.join("summary.csv");
    summary.write(&path)?;
    files.push(path);
    Ok((rows, files))
}

pub const CLAIM_HEADER: [&str; 8] = [
    "eta",
    "residual",
    "residual_half",
    "ratio_at_half_eta",
    "tangent_error",
    "gradient_scaling_error",
    "direction_step",
    "predicted_step",
];

pub fn claim_record(r: &ClaimReport) -> [String; 8] {
    [
        e6(r.eta),
        e6(r.residual),
        e6(r.residual_half),
        f6(r.ratio_at_half_eta),
        e6(r.tangent_error),
        e6(r.gradient_scaling_error),
        e6(r.direction_step),
        e6(r.predicted_step),
    ]
}

/// The direction-update check at every `experiment.etas` value.
pub fn claim(cfg: &ExperimentConfig, out: &Path) -> Result<(Vec<ClaimReport>, Vec<PathBuf>)> {
    let reports = cfg
        .experiment
        .etas
        .iter()
        .map(|&eta| default_claim_check(eta, cfg.experiment.claim_seed))
        .collect::<Result<Vec<_>, DynamicsError>>()?;
    let mut files = Vec::new();
    let path = out.join("claim.csv");
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&path)?));
    w.write_record(CLAIM_HEADER)?;
    for r in &reports {
        w.write_record(claim_record(r))?;
    }
    w.flush()?;
    files.push(path);
    let mut summary = Summary::new(&["eta", "ratio_at_half_eta", "second_order", "step_ratio"]);
    for r in &reports {
        summary.push(vec![
            e6(r.eta),
            f6(r.ratio_at_half_eta),
            (3.5..=4.5).contains(&r.ratio_at_half_eta).to_string(),
            f6(r.direction_step / r.predicted_step),
        ]);
    }
    let path = out.join("summary.csv");
    summary.write(&path)?;
    files.push(path);
    Ok((reports, files))
}

/// Accuracy drop below the F32 twin that counts as degraded.
pub const DEGRADED_GAP: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HalfStatus {
    Ok,
    Degraded,
    Diverged,
}

impl fmt::Display for HalfStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HalfStatus::Ok => "ok",
            HalfStatus::Degraded => "degraded",
            HalfStatus::Diverged => "diverged",
        })
    }
}

pub fn half_status(half: &RunResult, twin: &RunResult) -> HalfStatus {
    if half.diverged() {
        HalfStatus::Diverged
    } else if !(half.final_val_acc() >= twin.final_val_acc() - DEGRADED_GAP) {
        HalfStatus::Degraded
    } else {
        HalfStatus::Ok
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HalfReport {
    pub arms: Vec<Arm>,
    pub l2_status: HalfStatus,
    pub l1_status: HalfStatus,
    pub files: Vec<PathBuf>,
}

impl HalfReport {
    pub fn arm(&self, name: &str) -> Option<&Arm> {
        self.arms.iter().find(|a| a.name == name)
    }
}

/// L2 and L1 batch normalization, each in F32 and in binary16 with a
/// binary16 accumulator, on inputs scaled by `experiment.input_scale`.
pub fn half_precision(cfg: &ExperimentConfig, out: &Path) -> Result<HalfReport> {
    let mut scaled = cfg.clone();
    scaled.dataset.input_scale = cfg.dataset.input_scale * cfg.experiment.input_scale;
    let b = base(&scaled)?;
    let mut arms = Vec::new();
    for metric in [NormMetric::L2, NormMetric::L1] {
        for (tag, precision) in [("f32", PrecisionMode::F32), ("half", PrecisionMode::HALF)] {
            let mut spec = with_norm(&b.spec, dispersion_norm(&b.spec, metric));
            spec.precision = precision;
            arms.push((format!("{metric}-{tag}"), spec));
        }
    }
    let arms = run_arms(&b, arms, None)?;
    let mut files = Vec::new();
    write_arms(out, &arms, &mut files)?;
    let l2_status = half_status(&arms[1].result, &arms[0].result);
    let l1_status = half_status(&arms[3].result, &arms[2].result);
    let mut summary = Summary::new(&["arm", "precision", "final_val_acc", "gap_vs_f32", "diverged", "status"]);
    for (i, arm) in arms.iter().enumerate() {
        let twin = &arms[i - i % 2];
        let status = if i % 2 == 0 {
            HalfStatus::Ok
        } else if i == 1 {
            l2_status
        } else {
            l1_status
        };
        summary.push(vec![
            arm.name.clone(),
            if i % 2 == 0 { PrecisionMode::F32 } else { PrecisionMode::HALF }.to_string(),
            f6(arm.accuracy()),
            f6(arm.accuracy() - twin.accuracy()),
            arm.result.diverged().to_string(),
            status.to_string(),
        ]);
    }
    let path = out.join("summary.csv");
    summary.write(&path)?;
    files.push(path);
    Ok(HalfReport { arms, l2_status, l1_status, files })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BwnReport {
    pub arm: Arm,
    pub rhos: Vec<f64>,
    /// `max |‖w_i‖ / rho - 1|` over every logged step and channel.
    pub max_norm_deviation: f64,
    /// Relative error of rho against `‖V‖_F / sqrt(N)` of a fresh model.
    pub rho_init_error: f64,
    /// Largest relative output difference after folding rho into the
    /// classifier, over the validation set.
    pub fold_error: f64,
    pub files: Vec<PathBuf>,
}

/// Bounded weight normalization (p = 2) with mean-only batch normalization:
/// norm invariance over training, rho at initialization, and folding.
pub fn bwn_invariance(cfg: &ExperimentConfig, out: &Path) -> Result<BwnReport> {
    let b = base(cfg)?;
    let mut spec = with_norm(&b.spec, Some(NormScheme::mean_only()));
    spec.model.layers.iter_mut().for_each(|l| l.weight = WeightParam::BWN(NormOrder::L2));
    spec.record_trajectory = true;
    let fresh = super::model::build_model(&spec.model, spec.seed, spec.precision)?;
    let mut rho_init_error: f64 = 0.0;
    for layer in &fresh.layers {
        if let Weight::Reparam(bw) = &layer.weight {
            let v = &bw.v;
            let frob = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            let expected = frob / (v.shape()[0] as f64).sqrt();
            rho_init_error = rho_init_error.max((bw.rho / expected - 1.0).abs());
            rho_init_error = rho_init_error.max((rho_init(v, NormOrder::L2, v.shape()[0]) / expected - 1.0).abs());
        }
    }
    let (result, model) = train_model(&spec, &b.train, &b.val, None)?;
    let rhos: Vec<f64> = model
        .layers
        .iter()
        .map(|l| match &l.weight {
            Weight::Reparam(bw) => bw.rho,
            Weight::Plain(_) => f64::NAN,
        })
        .collect();
    let max_norm_deviation =
        result.trajectory.records().iter().map(|r| (r.norm / rhos[r.layer] - 1.0).abs()).fold(0.0, f64::max);
    let folded = fold_rho_into_classifier(&model)?;
    let val_x = b.val.features().to_precision(spec.precision);
    let mut fold_error: f64 = 0.0;
    for start in (0..b.val.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(b.val.len());
        let cols = val_x.shape()[1];
        let part =
            crate::numeric::Tensor::from_f64(vec![end - start, cols], val_x.data()[start * cols..end * cols].to_vec())?;
        let (ya, yb) = (model.predict(&part)?, folded.predict(&part)?);
        let scale = ya.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for (a, c) in ya.data().iter().zip(yb.data()) {
            fold_error = fold_error.max((a - c).abs() / scale);
        }
    }
    let arm = Arm { name: "bwn".into(), result };
    let mut files = Vec::new();
    write_arms(out, std::slice::from_ref(&arm), &mut files)?;
    write_trajectory(out.join("bwn.trajectory.csv"), &arm.result.trajectory, &mut files)?;
    let mut summary =
        Summary::new(&["layer", "rho", "max_norm_deviation", "rho_init_error", "fold_error", "final_val_acc"]);
    for (l, rho) in rhos.iter().enumerate() {
        summary.push(vec![
            l.to_string(),
            format!("{rho:.9}"),
            e6(max_norm_deviation),
            e6(rho_init_error),
            e6(fold_error),
            f6(arm.accuracy()),
        ]);
    }
    let path = out.join("summary.csv");
    summary.write(&path)?;
    files.push(path);
    Ok(BwnReport { arm, rhos, max_norm_deviation, rho_init_error, fold_error, files })
}

/// L2, L1, L-infinity and Top(k) batch normalization on the same data and
/// initialization.
pub fn lp_compare(cfg: &ExperimentConfig, out: &Path) -> Result<ArmsReport> {
    let b = base(cfg)?;
    let metrics = [NormMetric::L2, NormMetric::L1, NormMetric::Linf, NormMetric::TopK(cfg.experiment.top_k)];
    let arms: Vec<(String, TrainSpec)> =
        metrics.iter().map(|&m| (m.to_string(), with_norm(&b.spec, dispersion_norm(&b.spec, m)))).collect();
    let arms = run_arms(&b, arms, None)?;
    let mut files = Vec::new();
    write_arms(out, &arms, &mut files)?;

    let path = out.join("accuracy.csv");
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&path)?));
    let mut header = vec!["epoch".to_string()];
    header.extend(arms.iter().map(|a| a.name.clone()));
    w.write_record(&header)?;
    let epochs = arms.iter().map(|a| a.result.epochs.len()).max().unwrap_or(0);
    for e in 0..epochs {
        let mut row = vec![(e + 1).to_string()];
        row.extend(arms.iter().map(|a| a.result.epochs.get(e).map(|m| f6(m.val_acc)).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;
    files.push(path);
    simple_summary(out, &arms, "l2", &mut files)?;
    Ok(ArmsReport { arms, files })
}

/// Run an experiment by name and return the files it wrote.
pub fn run_experiment(name: ExperimentName, cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    Ok(match name {
        ExperimentName::WdEquivalence => wd_equivalence(cfg, out)?.files,
        ExperimentName::NormSchedule => norm_schedule(cfg, out)?.files,
        ExperimentName::Constants => constants(cfg, out)?.1,
        ExperimentName::Claim => claim(cfg, out)?.1,
        ExperimentName::HalfPrecision => half_precision(cfg, out)?.files,
        ExperimentName::BwnInvariance => bwn_invariance(cfg, out)?.files,
        ExperimentName::LpCompare => lp_compare(cfg, out)?.files,
    })
}

/// A single run as configured; `lr-correction` reads `run.replay`.
pub fn train_from_config(cfg: &ExperimentConfig) -> Result<RunResult> {
    let (train, val) = cfg.load_data()?;
    let spec = cfg.train_spec(&train)?;
    let reference = match (&cfg.run.replay, spec.optimizer.mode) {
        (Some(path), _) => Some(Trajectory::read_csv(File::open(path)?)?),
        (None, OptimizerMode::LrCorrection) => {
            return Err(DynamicsError::MissingTrajectory { step: 0, layer: 0, channel: 0 }.into())
        }
        (None, _) => None,
    };
    Ok(train_model(&spec, &train, &val, reference.as_ref())?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for n in ExperimentName::ALL {
            assert_eq!(n.to_string().parse::<ExperimentName>().unwrap(), n);
        }
        assert!(matches!("wd".parse::<ExperimentName>(), Err(HarnessError::UnknownExperiment(_))));
    }

    #[test]
    fn small_lp_compare_writes_columns() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_toml(
            "[run]\nseed = 3\nepochs = 2\nbatch_size = 32\n[dataset]\nsamples = 256\nfeatures = 6\n[model]\nwidths = [16]\n",
        )
        .unwrap();
        let files = run_experiment(ExperimentName::LpCompare, &cfg, dir.path()).unwrap();
        assert_eq!(files.len(), 6);
        let acc = std::fs::read_to_string(dir.path().join("accuracy.csv")).unwrap();
        assert!(acc.starts_with("epoch,l2,l1,linf,top10\n"));
        assert_eq!(acc.lines().count(), 3);
    }
}

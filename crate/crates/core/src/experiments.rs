//! Registered experiments behind the command-line runner.
//!
//! Every experiment writes CSV files that start with `# key = value`
//! provenance lines (parameters, version, seed, tail certificates) and
//! contain no timestamps, so a fixed seed reproduces them byte for byte.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{Experiment, ExperimentConfig};
use crate::defect::{q_minus_parts, q_plus, smoothing_check, uniform_bound, DefectEvaluator, PairSums, Window};
use crate::error::{Error, Result};
use crate::lattice::{dist_sq, in_wedge, linf, preimage_multiplicity_bound, wedge_map_into, LatticeBox, Region};
use crate::model::{ModelSpec, TailCertificate};
use crate::montecarlo::{
    batch_means, chain_rng, continue_chain, estimate_magnetization, lower_bound_diagnostic, exponential_tail_test, read_snapshot, write_snapshot,
    ChainState, LowerBoundOutcome, TailTestOutcome, MeasurementPlan, ObservableSeries, Proposal, DEFAULT_BATCHES, DEFAULT_BURN_IN,
    DEFAULT_MEASURE_EVERY, MIN_BATCHES,
};
use crate::par;
use crate::scaling::{benchmark_scale, fit_loglog_slope, ScalingPoint};
use crate::spin::{DeformationProfile, SpinConfig};

/// Relative rounding slack allowed when comparing `|Δ|` with `U`.
pub const BOUND_SLACK_REL: f64 = 1e-9;
/// Largest accepted relative gap between `Σ Qᵢ⁻` and the direct `Q⁻`.
pub const DECOMPOSITION_TOL: f64 = 1e-9;

const BOUND_CHUNK: usize = 64;

/// Files written and checks made by one experiment run.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub checks: u64,
    pub violations: u64,
    pub notes: Vec<String>,
}

/// Writes a CSV table framed by `# key = value` header and footer lines.
pub fn write_table(path: &Path, header_lines: &[(String, String)], columns: &[String], rows: &[Vec<String>], footer: &[(String, String)]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for (k, v) in header_lines {
        writeln!(out, "# {k} = {v}")?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(columns)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    for (k, v) in footer {
        writeln!(out, "# {k} = {v}")?;
    }
    out.flush()?;
    Ok(())
}

fn kv(key: &str, value: impl ToString) -> (String, String) {
    (key.to_string(), value.to_string())
}

fn strings(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

fn tail_lines(prefix: &str, cert: &TailCertificate) -> Vec<(String, String)> {
    vec![kv(&format!("{prefix}_partial_sum"), cert.partial_sum), kv(&format!("{prefix}_tail_bound"), cert.tail_bound)]
}

pub fn run(experiment: Experiment, cfg: &ExperimentConfig, out: &Path, resume: bool) -> Result<Outcome> {
    std::fs::create_dir_all(out)?;
    match experiment {
        Experiment::BoundSuite => run_bound_suite(cfg, out),
        Experiment::ScalingGrid => run_scaling_grid(cfg, out),
        Experiment::McStudy => run_mc_study(cfg, out, resume),
        Experiment::WedgeCheck => run_wedge_check(cfg, out),
        Experiment::SmoothingScan => run_smoothing_scan(cfg, out),
    }
}

// ---------------------------------------------------------------- bound suite

/// `|Δ|` against `U` for random configurations at one `(L, a)`.
#[derive(Clone, Debug)]
pub struct BoundPoint {
    pub l: u64,
    pub a: u64,
    /// Storage half-side `M`; configurations live on `Λ_M`.
    pub storage: u64,
    pub window: Window,
    pub u_bound: f64,
    pub certificate: TailCertificate,
    pub deltas: Vec<f64>,
    pub violations: u64,
}

impl BoundPoint {
    pub fn max_abs_delta(&self) -> f64 {
        self.deltas.iter().fold(0.0, |m, d| m.max(d.abs()))
    }
}

/// Whether `|Δ| ≤ U` up to [`BOUND_SLACK_REL`].
pub fn within_bound(delta: f64, u: f64) -> bool {
    delta.abs() <= u * (1.0 + BOUND_SLACK_REL)
}

/// Draws `samples` uniform configurations on `Λ_{L+r+margin}` and compares
/// each `|Δ_{L,a}|` with `U_{L,a}` over `window`. Streams are fixed per
/// chunk of samples, so the result does not depend on the thread count.
pub fn bound_point(spec: &ModelSpec, l: u64, a: u64, margin: u64, window: Window, samples: usize, seed: u64, stream: u64) -> Result<BoundPoint> {
    let profile = DeformationProfile::new(spec.d, l, a)?;
    let storage = l + spec.potential.range() + margin;
    let window = match window {
        Window::Box(_) => Window::Box(storage),
        Window::Infinite => Window::Infinite,
    };
    let (u_bound, certificate) = uniform_bound(&profile, spec, window)?;
    let region = LatticeBox::new(spec.d, storage).region();
    let chunks = samples.div_ceil(BOUND_CHUNK);
    let per_chunk: Vec<Result<Vec<f64>>> = par::map_indexed(chunks, |c| {
        let mut rng = chain_rng(seed, (stream << 32) | c as u64);
        let mut evaluator = DefectEvaluator::new(&region, &profile, spec)?;
        let count = BOUND_CHUNK.min(samples - c * BOUND_CHUNK);
        (0..count)
            .map(|_| {
                let cfg = SpinConfig::random(region.clone(), spec.n, &mut rng)?;
                evaluator.evaluate(&cfg)
            })
            .collect()
    });
    let mut deltas = Vec::with_capacity(samples);
    for chunk in per_chunk {
        deltas.extend(chunk?);
    }
    let violations = deltas.iter().filter(|&&d| !within_bound(d, u_bound)).count() as u64;
    Ok(BoundPoint { l, a, storage, window, u_bound, certificate, deltas, violations })
}

fn default_bound_pairs(d: usize) -> Vec<(u64, u64)> {
    if d == 1 {
        vec![(32, 8), (64, 8), (128, 16)]
    } else {
        vec![(16, 4), (32, 8)]
    }
}

pub fn run_bound_suite(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let spec = cfg.model()?;
    let seed = cfg.seed()?;
    let pairs = cfg.pairs("pairs", default_bound_pairs(spec.d))?;
    if pairs.is_empty() {
        return Err(Error::Config("pairs is empty".into()));
    }
    let samples: usize = cfg.get_or("samples", 1000)?;
    let margin: u64 = cfg.get_or("margin", 2)?;
    let window = cfg.window(0, "box")?;
    let mut outcome = Outcome::default();
    let mut rows = Vec::new();
    let mut footer = Vec::new();
    for (k, &(l, a)) in pairs.iter().enumerate() {
        let point = bound_point(&spec, l, a, margin, window, samples, seed, k as u64)?;
        for (i, &delta) in point.deltas.iter().enumerate() {
            rows.push(vec![
                l.to_string(),
                a.to_string(),
                point.storage.to_string(),
                i.to_string(),
                delta.to_string(),
                point.u_bound.to_string(),
                (point.u_bound - delta.abs()).to_string(),
                u8::from(!within_bound(delta, point.u_bound)).to_string(),
            ]);
        }
        footer.push(kv(&format!("L{l}_a{a}_max_abs_delta"), point.max_abs_delta()));
        footer.extend(tail_lines(&format!("L{l}_a{a}_u"), &point.certificate));
        outcome.checks += point.deltas.len() as u64;
        outcome.violations += point.violations;
        outcome.notes.push(format!("L={l} a={a}: U={} max|Δ|={} violations={}", point.u_bound, point.max_abs_delta(), point.violations));
    }
    footer.push(kv("violations", outcome.violations));
    let mut header = cfg.provenance();
    header.push(kv("window_resolved", if window == Window::Infinite { "inf" } else { "box(L+r+margin)" }));
    let path = out.join("bound_suite.csv");
    write_table(&path, &header, &strings(&["L", "a", "M", "sample", "delta", "u_bound", "margin", "violation"]), &rows, &footer)?;
    outcome.files.push(path);
    Ok(outcome)
}

// --------------------------------------------------------------- scaling grid

/// Direct pair sums and model sums at one `(L, a)`.
#[derive(Clone, Copy, Debug)]
pub struct GridRow {
    pub point: ScalingPoint,
    pub q_plus: f64,
    pub q_minus: f64,
    pub q_minus_parts: [f64; 4],
    pub q_minus_tail: TailCertificate,
    pub u_bound: f64,
}

impl GridRow {
    pub fn compute(spec: &ModelSpec, l: u64, a: u64) -> Result<Self> {
        let profile = DeformationProfile::new(spec.d, l, a)?;
        let point = ScalingPoint::compute(spec.d, spec.s, l, a)?;
        let mut sums = PairSums::new(&profile, &spec.kernel, Window::Infinite)?;
        let (q_minus, q_minus_tail) = sums.q_minus();
        let parts = sums.q_minus_parts();
        let qp = q_plus(&profile, spec.potential.range());
        let u_bound = spec.potential.phi2_norm_bound() * qp + spec.lambda * q_minus;
        Ok(GridRow { point, q_plus: qp, q_minus, q_minus_parts: parts.parts, q_minus_tail, u_bound })
    }

    pub fn decomposition_error(&self) -> f64 {
        let total: f64 = self.q_minus_parts.iter().sum();
        (total - self.q_minus).abs() / self.q_minus.abs().max(f64::MIN_POSITIVE)
    }

    pub fn columns() -> Vec<String> {
        let mut cols = strings(&["Q_plus", "Q_minus", "Q1", "Q2", "Q3", "Q4", "decomposition_rel_err", "U", "U_over_lambda_I"]);
        let mut base: Vec<String> = ScalingPoint::csv_header().iter().map(|c| c.to_string()).collect();
        base.append(&mut cols);
        base.push("Q_minus_tail".into());
        base
    }

    pub fn row(&self, lambda: f64) -> Vec<String> {
        let mut row = self.point.csv_row();
        row.push(self.q_plus.to_string());
        row.push(self.q_minus.to_string());
        row.extend(self.q_minus_parts.iter().map(f64::to_string));
        row.push(self.decomposition_error().to_string());
        row.push(self.u_bound.to_string());
        row.push((self.u_bound / (lambda * self.point.i_value)).to_string());
        row.push(self.q_minus_tail.tail_bound.to_string());
        row
    }
}

/// `a` as a function of `L`: `ratio:k` (`L/k`), `sqrt` or `fixed:k`.
pub fn apply_a_rule(rule: &str, l: u64) -> Result<u64> {
    let bad = || Error::Config(format!("a_rule must be ratio:k, sqrt or fixed:k, got '{rule}'"));
    let a = match rule.split_once(':') {
        Some(("ratio", k)) => l / k.trim().parse::<u64>().map_err(|_| bad())?.max(1),
        Some(("fixed", k)) => k.trim().parse().map_err(|_| bad())?,
        None if rule == "sqrt" => (l as f64).sqrt().floor() as u64,
        _ => return Err(bad()),
    };
    if a < 2 || a >= l {
        return Err(Error::Config(format!("a_rule '{rule}' gives a = {a} for L = {l}; need 2 ≤ a < L")));
    }
    Ok(a)
}

pub fn run_scaling_grid(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let spec = cfg.model()?;
    let ls: Vec<u64> = cfg.list("L_list", Vec::new())?;
    if ls.is_empty() {
        return Err(Error::Config("L_list is empty or missing".into()));
    }
    let rule: String = cfg.get_or("a_rule", "ratio:16".to_string())?;
    let points = ls.iter().map(|&l| Ok((l, apply_a_rule(&rule, l)?))).collect::<Result<Vec<_>>>()?;
    let rows: Vec<GridRow> = par::map(&points, |&(l, a)| GridRow::compute(&spec, l, a)).into_iter().collect::<Result<_>>()?;
    let mut outcome = Outcome::default();
    for r in &rows {
        outcome.checks += 1;
        if r.decomposition_error() > DECOMPOSITION_TOL {
            outcome.violations += 1;
            outcome.notes.push(format!("decomposition mismatch at L={} a={}: {}", r.point.l, r.point.a, r.decomposition_error()));
        }
    }
    let mut footer = Vec::new();
    if rows.len() >= 2 {
        let fit = |f: &dyn Fn(&GridRow) -> (f64, f64)| fit_loglog_slope(&rows.iter().map(f).collect::<Vec<_>>());
        footer.push(kv("slope_Q_minus_vs_L", fit(&|r| (r.point.l as f64, r.q_minus))?.slope));
        footer.push(kv("slope_Q_minus_vs_a", fit(&|r| (r.point.a as f64, r.q_minus))?.slope));
        footer.push(kv("slope_U_vs_L", fit(&|r| (r.point.l as f64, r.u_bound))?.slope));
        footer.push(kv("slope_I_vs_L", fit(&|r| (r.point.l as f64, r.point.i_value))?.slope));
    }
    let ratios: Vec<f64> = rows.iter().map(|r| r.q_minus / r.point.i_value).collect();
    let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    footer.push(kv("Q_minus_over_I_min", lo));
    footer.push(kv("Q_minus_over_I_max", hi));
    footer.push(kv("violations", outcome.violations));
    let path = out.join("scaling_grid.csv");
    let mut header = cfg.provenance();
    header.push(kv("a_rule_used", &rule));
    let table: Vec<Vec<String>> = rows.iter().map(|r| r.row(spec.lambda)).collect();
    write_table(&path, &header, &GridRow::columns(), &table, &footer)?;
    outcome.files.push(path);
    Ok(outcome)
}

// ------------------------------------------------------------------- mc study

#[derive(Clone, Debug, Serialize)]
pub struct ChainSummary {
    pub stream: u64,
    pub sweeps: u64,
    pub acceptance_rate: f64,
    pub measurements: usize,
    pub energy_mean: f64,
    pub energy_se: f64,
    pub magnetization: Vec<f64>,
    pub magnetization_se: Vec<f64>,
    pub delta_mean: Option<f64>,
    pub delta_se: Option<f64>,
    pub exponential_tail: Option<TailTestSummary>,
    pub lower_bound: Option<LowerBoundSummary>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TailTestSummary {
    pub t: f64,
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub pass: bool,
}

impl TailTestSummary {
    fn new(t: f64, o: TailTestOutcome) -> Self {
        TailTestSummary { t, lhs: o.lhs, lhs_se: o.lhs_se, rhs: o.rhs, pass: o.pass }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LowerBoundSummary {
    pub zeta: f64,
    pub i_value: f64,
    pub lambda_over_c: f64,
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub rhs_se: f64,
    pub pass: bool,
}

impl LowerBoundSummary {
    fn new(zeta: f64, i_value: f64, lambda_over_c: f64, o: LowerBoundOutcome) -> Self {
        LowerBoundSummary { zeta, i_value, lambda_over_c, lhs: o.lhs, lhs_se: o.lhs_se, rhs: o.rhs, rhs_se: o.rhs_se, pass: o.pass }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StudySummary {
    pub experiment: String,
    pub version: String,
    pub parameters: BTreeMap<String, String>,
    pub u_bound: Option<f64>,
    pub u_tail_bound: Option<f64>,
    pub chains: Vec<ChainSummary>,
    pub pooled_exponential_tail: Option<TailTestSummary>,
    pub checks: u64,
    pub violations: u64,
}

/// The Monte Carlo study parameters after defaults.
#[derive(Clone, Debug)]
pub struct StudyPlan {
    pub spec: ModelSpec,
    pub seed: u64,
    pub region: Region,
    pub profile: Option<DeformationProfile>,
    pub chains: usize,
    pub plan: MeasurementPlan,
    pub proposal: Proposal,
    pub t_fraction: f64,
    pub zeta: Option<f64>,
    pub lambda_over_c: Option<f64>,
    pub checkpoint_every: usize,
}

/// Centred box with `sites` sites, which must be a `d`-th power.
pub fn centred_region(d: usize, sites: usize) -> Result<Region> {
    let side = (sites as f64).powf(1.0 / d as f64).round() as usize;
    if side < 2 || side.pow(d as u32) != sites {
        return Err(Error::Config(format!("sites = {sites} is not a d-th power (d = {d}) of a side ≥ 2")));
    }
    let lo = -((side / 2) as i64);
    let hi = lo + side as i64 - 1;
    Ok(Region::new(vec![lo; d], vec![hi; d]))
}

impl StudyPlan {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let spec = cfg.model()?;
        let seed = cfg.seed()?;
        let sites: usize = cfg.get_or("sites", 256)?;
        let region = centred_region(spec.d, sites)?;
        let profile = match (cfg.get::<u64>("L")?, cfg.get::<u64>("a")?) {
            (Some(l), Some(a)) => Some(DeformationProfile::new(spec.d, l, a).map_err(|e| Error::Config(e.to_string()))?),
            (None, None) => None,
            _ => return Err(Error::Config("L and a must be given together".into())),
        };
        let measurements: usize = cfg.get_or("measurements", 1000)?;
        if measurements < MIN_BATCHES {
            return Err(Error::Config(format!("measurements must be at least {MIN_BATCHES}")));
        }
        let mut plan = MeasurementPlan::new(measurements);
        plan.burn_in = cfg.get_or("burn_in", DEFAULT_BURN_IN)?;
        plan.measure_every = cfg.get_or("measure_every", DEFAULT_MEASURE_EVERY)?;
        if plan.measure_every == 0 {
            return Err(Error::Config("measure_every must be positive".into()));
        }
        plan.profile = profile;
        let proposal = match cfg.get_or("proposal", "uniform".to_string())?.as_str() {
            "uniform" => Proposal::Uniform,
            "gaussian" => Proposal::Gaussian(cfg.get_or("step", 0.5)?),
            other => return Err(Error::Config(format!("proposal must be uniform or gaussian, got '{other}'"))),
        };
        let chains: usize = cfg.get_or("chains", 1)?;
        if chains == 0 {
            return Err(Error::Config("chains must be positive".into()));
        }
        Ok(StudyPlan {
            spec,
            seed,
            region,
            profile,
            chains,
            plan,
            proposal,
            t_fraction: cfg.get_or("t_fraction", 0.25)?,
            zeta: cfg.get("zeta")?,
            lambda_over_c: cfg.get("lambda_over_c")?,
            checkpoint_every: cfg.get_or("checkpoint_every", 0)?,
        })
    }

    /// Fresh chain `k`: uniform random start drawn from its own stream.
    pub fn new_chain(&self, k: usize) -> Result<ChainState> {
        let mut init = chain_rng(self.seed, u64::MAX - k as u64);
        let config = SpinConfig::random(self.region.clone(), self.spec.n, &mut init)?;
        Ok(ChainState::new(config, self.spec.clone(), self.seed, k as u64)?.with_proposal(self.proposal))
    }
}

fn snapshot_path(out: &Path, k: usize) -> PathBuf {
    out.join(format!("chain_{k}.snapshot"))
}

fn save_snapshot(path: &Path, state: &ChainState, series: &ObservableSeries) -> Result<()> {
    let tmp = path.with_extension("snapshot.tmp");
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        write_snapshot(&mut f, state, series)?;
        f.flush()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

/// Runs or resumes chain `k`, checkpointing to `out`.
pub fn run_study_chain(study: &StudyPlan, k: usize, out: &Path, resume: bool) -> Result<(ChainState, ObservableSeries)> {
    let snap = snapshot_path(out, k);
    let (mut state, mut series) = if resume && snap.exists() {
        let (state, series) = read_snapshot(BufReader::new(File::open(&snap)?), &study.spec, &study.plan)?;
        if state.stream() != k as u64 || state.seed() != study.seed {
            return Err(Error::Snapshot(format!("{} belongs to another seed or chain", snap.display())));
        }
        (state.with_proposal(study.proposal), series)
    } else {
        (study.new_chain(k)?, ObservableSeries::new(&study.plan))
    };
    let every = study.checkpoint_every;
    continue_chain(&mut state, &study.plan, &mut series, |st, se| {
        if every > 0 && se.len() % every == 0 {
            save_snapshot(&snap, st, se)?;
        }
        Ok(())
    })?;
    save_snapshot(&snap, &state, &series)?;
    Ok((state, series))
}

fn study_bounds(study: &StudyPlan) -> Result<Option<(f64, TailCertificate, Option<f64>)>> {
    let Some(profile) = &study.profile else {
        return Ok(None);
    };
    let (u, cert) = uniform_bound(profile, &study.spec, Window::Infinite)?;
    let i_value = benchmark_scale(study.spec.d, study.spec.s, profile.l, profile.a).ok();
    Ok(Some((u, cert, i_value)))
}

fn summarize_chain(study: &StudyPlan, state: &ChainState, series: &ObservableSeries, bounds: Option<(f64, TailCertificate, Option<f64>)>) -> Result<ChainSummary> {
    let (energy_mean, energy_se) = batch_means(&series.energies(), DEFAULT_BATCHES)?;
    let (magnetization, magnetization_se) = estimate_magnetization(series)?;
    let deltas = series.deltas();
    let mut summary = ChainSummary {
        stream: state.stream(),
        sweeps: state.sweeps(),
        acceptance_rate: state.acceptance_rate(),
        measurements: series.len(),
        energy_mean,
        energy_se,
        magnetization,
        magnetization_se,
        delta_mean: None,
        delta_se: None,
        exponential_tail: None,
        lower_bound: None,
    };
    if let Some((u, _, i_value)) = bounds {
        let (m, se) = batch_means(&deltas, DEFAULT_BATCHES)?;
        summary.delta_mean = Some(m);
        summary.delta_se = Some(se);
        let t = study.t_fraction * u;
        summary.exponential_tail = Some(TailTestSummary::new(t, exponential_tail_test(&deltas, study.spec.beta, t)?));
        if let Some(i_value) = i_value {
            let lambda_over_c = study.lambda_over_c.unwrap_or(u / i_value);
            let zeta = study.zeta.unwrap_or(0.1 * lambda_over_c);
            summary.lower_bound = Some(LowerBoundSummary::new(zeta, i_value, lambda_over_c, lower_bound_diagnostic(&deltas, zeta, i_value, lambda_over_c)?));
        }
    }
    Ok(summary)
}

pub fn run_mc_study(cfg: &ExperimentConfig, out: &Path, resume: bool) -> Result<Outcome> {
    let study = StudyPlan::from_config(cfg)?;
    let bounds = study_bounds(&study)?;
    let runs: Vec<Result<(ChainState, ObservableSeries)>> = par::map_indexed(study.chains, |k| run_study_chain(&study, k, out, resume));
    let mut outcome = Outcome::default();
    let mut chains = Vec::new();
    let mut pooled = Vec::new();
    let mut header = cfg.provenance();
    if let Some((u, cert, i_value)) = &bounds {
        header.push(kv("u_bound", u));
        header.extend(tail_lines("u", cert));
        header.push(kv("I", i_value.map_or("none".to_string(), |v| v.to_string())));
    }
    for (k, run) in runs.into_iter().enumerate() {
        let (state, series) = run?;
        let path = out.join(format!("chain_{k}.csv"));
        let mut h = header.clone();
        h.push(kv("stream", k));
        h.push(kv("sweeps", state.sweeps()));
        h.push(kv("acceptance_rate", state.acceptance_rate()));
        series.write_csv(BufWriter::new(File::create(&path)?), study.spec.n, &h)?;
        outcome.files.push(path);
        outcome.files.push(snapshot_path(out, k));
        let summary = summarize_chain(&study, &state, &series, bounds)?;
        if let Some(tail) = &summary.exponential_tail {
            outcome.checks += 1;
            outcome.violations += u64::from(!tail.pass);
        }
        if let Some(lower) = &summary.lower_bound {
            outcome.checks += 1;
            outcome.violations += u64::from(!lower.pass);
        }
        pooled.extend(series.deltas());
        chains.push(summary);
    }
    let pooled_exponential_tail = match (&bounds, study.chains > 1) {
        (Some((u, _, _)), true) => {
            let t = study.t_fraction * u;
            Some(TailTestSummary::new(t, exponential_tail_test(&pooled, study.spec.beta, t)?))
        }
        _ => None,
    };
    for c in &chains {
        let m = c.magnetization.iter().map(|v| v * v).sum::<f64>().sqrt();
        outcome.notes.push(format!("chain {}: acceptance {:.3}, |m| = {m:.4}", c.stream, c.acceptance_rate));
        if let Some(l) = &c.exponential_tail {
            outcome.notes.push(format!("chain {}: μ̂(Δ ≥ {}) = {} ± {} vs e^(-βt/2) = {}", c.stream, l.t, l.lhs, l.lhs_se, l.rhs));
        }
    }
    let summary = StudySummary {
        experiment: cfg.experiment.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        parameters: cfg.provenance().into_iter().collect(),
        u_bound: bounds.map(|b| b.0),
        u_tail_bound: bounds.map(|b| b.1.tail_bound),
        chains,
        pooled_exponential_tail,
        checks: outcome.checks,
        violations: outcome.violations,
    };
    let path = out.join("summary.json");
    let mut f = BufWriter::new(File::create(&path)?);
    serde_json::to_writer_pretty(&mut f, &summary)?;
    writeln!(f)?;
    f.flush()?;
    outcome.files.push(path);
    Ok(outcome)
}

// ---------------------------------------------------------------- wedge check

/// Exhaustive check of the wedge map over `x, y ∈ Λ_R ∖ {0}`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WedgeReport {
    pub d: usize,
    pub radius: u64,
    pub pairs: u64,
    pub distance_violations: u64,
    pub wedge_violations: u64,
    pub linf_violations: u64,
    pub max_preimages: usize,
}

impl WedgeReport {
    pub fn violations(&self) -> u64 {
        self.distance_violations + self.wedge_violations + self.linf_violations + u64::from(self.max_preimages > preimage_multiplicity_bound(self.d))
    }
}

pub fn wedge_check(d: usize, radius: u64) -> WedgeReport {
    let region = LatticeBox::new(d, radius).region();
    let table: Vec<i64> = region.coordinate_table().chunks_exact(d).filter(|x| x.iter().any(|&c| c != 0)).flatten().copied().collect();
    let count = table.len() / d;
    let parts = par::map_indexed(count, |ix| {
        let x = &table[ix * d..(ix + 1) * d];
        let mut z = vec![0i64; d];
        let mut hits = vec![0u32; region.len()];
        let mut r = WedgeReport { d, radius, ..Default::default() };
        for y in table.chunks_exact(d) {
            wedge_map_into(x, y, &mut z);
            r.pairs += 1;
            r.distance_violations += u64::from(dist_sq(x, &z) > dist_sq(x, y));
            r.wedge_violations += u64::from(!in_wedge(x, &z));
            r.linf_violations += u64::from(linf(&z) != linf(y));
            if let Some(k) = region.index_of(&z) {
                hits[k] += 1;
            }
        }
        r.max_preimages = hits.iter().copied().max().unwrap_or(0) as usize;
        r
    });
    parts.into_iter().fold(WedgeReport { d, radius, ..Default::default() }, |mut acc, r| {
        acc.pairs += r.pairs;
        acc.distance_violations += r.distance_violations;
        acc.wedge_violations += r.wedge_violations;
        acc.linf_violations += r.linf_violations;
        acc.max_preimages = acc.max_preimages.max(r.max_preimages);
        acc
    })
}

pub fn run_wedge_check(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let dims: Vec<usize> = cfg.list("dims", vec![1, 2, 3])?;
    let radius: u64 = cfg.get_or("radius", 10)?;
    if dims.is_empty() || dims.contains(&0) || radius == 0 {
        return Err(Error::Config("dims must be non-empty and positive, radius positive".into()));
    }
    let mut outcome = Outcome::default();
    let mut rows = Vec::new();
    for &d in &dims {
        let r = wedge_check(d, radius);
        outcome.checks += r.pairs;
        outcome.violations += r.violations();
        outcome.notes.push(format!("d={d}: {} pairs, {} violations, max preimages {}", r.pairs, r.violations(), r.max_preimages));
        rows.push(vec![
            d.to_string(),
            radius.to_string(),
            r.pairs.to_string(),
            r.distance_violations.to_string(),
            r.wedge_violations.to_string(),
            r.linf_violations.to_string(),
            r.max_preimages.to_string(),
            preimage_multiplicity_bound(d).to_string(),
        ]);
    }
    let path = out.join("wedge_check.csv");
    let columns = strings(&["d", "radius", "pairs", "distance_violations", "wedge_violations", "linf_violations", "max_preimages", "preimage_bound"]);
    write_table(&path, &cfg.provenance(), &columns, &rows, &[kv("violations", outcome.violations)])?;
    outcome.files.push(path);
    Ok(outcome)
}

// ------------------------------------------------------------- smoothing scan

/// Mean `lhs / rhs` of the block-smoothing comparison at one separation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothingRow {
    pub separation: i64,
    pub mean_ratio: f64,
    pub se_ratio: f64,
    pub mean_lhs: f64,
    pub rhs: f64,
}

/// Block `V₁` of half-side `ℓ` in the interior shell `L − a − ℓ`, block `V₂`
/// at distance `separation` along the first axis, uniform random spins.
pub fn smoothing_scan(spec: &ModelSpec, l: u64, a: u64, ell: u64, separations: &[i64], samples: usize, seed: u64) -> Result<Vec<SmoothingRow>> {
    let profile = DeformationProfile::new(spec.d, l, a)?;
    let ell = ell as i64;
    let c1 = (l - a) as i64 - ell;
    if c1 - ell < 0 {
        return Err(Error::Config("ell too large for the interior of Λ_{L−a}".into()));
    }
    if samples < 2 {
        return Err(Error::Config("samples must be at least 2".into()));
    }
    let block = |c: i64| {
        let mut lo = vec![-ell; spec.d];
        let mut hi = vec![ell; spec.d];
        lo[0] += c;
        hi[0] += c;
        Region::new(lo, hi)
    };
    let v1 = block(c1);
    par::map_indexed(separations.len(), |k| {
        let sep = separations[k];
        let v2 = block(c1 + sep);
        let mut lo = vec![-ell; spec.d];
        let mut hi = vec![ell; spec.d];
        lo[0] = c1 - ell;
        hi[0] = c1 + sep + ell;
        let region = Region::new(lo, hi);
        let mut rng = chain_rng(seed, k as u64);
        let mut ratios = Vec::with_capacity(samples);
        let mut lhs_sum = 0.0;
        let mut rhs = 0.0;
        for _ in 0..samples {
            let cfg = SpinConfig::random(region.clone(), spec.n, &mut rng)?;
            let (lhs, r) = smoothing_check(&cfg, &v1, &v2, &profile, &spec.kernel)?;
            ratios.push(lhs / r);
            lhs_sum += lhs;
            rhs = r;
        }
        let n = samples as f64;
        let mean = ratios.iter().sum::<f64>() / n;
        let var = ratios.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(SmoothingRow { separation: sep, mean_ratio: mean, se_ratio: (var / n).sqrt(), mean_lhs: lhs_sum / n, rhs })
    })
    .into_iter()
    .collect()
}

pub fn run_smoothing_scan(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let spec = cfg.model()?;
    let l: u64 = cfg.get_or("L", 200)?;
    let a: u64 = cfg.get_or("a", 64)?;
    let ell: u64 = cfg.get_or("ell", 4)?;
    let multiples: Vec<i64> = cfg.list("separations", vec![32, 64, 128])?;
    if multiples.is_empty() || multiples.iter().any(|&m| m < 3) {
        return Err(Error::Config("separations must be non-empty multiples of ell, each at least 3".into()));
    }
    let samples: usize = cfg.get_or("samples", 200)?;
    let seps: Vec<i64> = multiples.iter().map(|m| m * ell as i64).collect();
    let rows = smoothing_scan(&spec, l, a, ell, &seps, samples, cfg.seed()?)?;
    let monotone = rows.windows(2).all(|w| w[1].mean_ratio < w[0].mean_ratio);
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.separation.to_string(), r.mean_ratio.to_string(), r.se_ratio.to_string(), r.mean_lhs.to_string(), r.rhs.to_string()])
        .collect();
    let path = out.join("smoothing_scan.csv");
    let columns = strings(&["separation", "mean_ratio", "se_ratio", "mean_lhs", "rhs_scale"]);
    write_table(&path, &cfg.provenance(), &columns, &table, &[kv("ratio_decreasing", monotone)])?;
    let mut outcome = Outcome { checks: rows.len() as u64, ..Default::default() };
    outcome.notes.push(format!("ratio decreasing along separations: {monotone}"));
    outcome.files.push(path);
    Ok(outcome)
}

/// Relative gap between `Σ Qᵢ⁻` and the direct `Q⁻` at one grid point.
pub fn decomposition_gap(spec: &ModelSpec, l: u64, a: u64, window: Window) -> Result<f64> {
    let profile = DeformationProfile::new(spec.d, l, a)?;
    let parts = q_minus_parts(&profile, &spec.kernel, window)?;
    let (direct, _) = crate::defect::q_minus(&profile, &spec.kernel, window)?;
    Ok((parts.total() - direct).abs() / direct.abs().max(f64::MIN_POSITIVE))
}

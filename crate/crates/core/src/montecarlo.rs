//! Metropolis sampling of the free-boundary Gibbs specification on a finite
//! box, observable series with batch-means errors, the defect-distribution
//! tests and an independent-spin oracle for the expected defect.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::defect::{ktilde_sum, DefectEvaluator, Window};
use crate::error::{invalid, Error, Result};
use crate::lattice::{linf, LatticeBox, Region};
use crate::model::{hamiltonian, local_energy_delta_with, DisplacementTable, ModelSpec, TailCertificate};
use crate::spin::{random_unit_spin, DeformationProfile, SpinConfig};
use crate::summation::PairwiseSum;

/// Sweeps between full energy re-evaluations.
pub const ENERGY_CHECK_INTERVAL: u64 = 1000;
/// Relative tolerance of the energy bookkeeping check.
pub const ENERGY_CHECK_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_BURN_IN: u64 = 1000;
pub const DEFAULT_MEASURE_EVERY: u64 = 10;
pub const DEFAULT_BATCHES: usize = 30;
/// Fewest batches accepted by the batch-means estimators.
pub const MIN_BATCHES: usize = 10;

const SNAPSHOT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Proposal {
    /// A fresh uniform spin on the sphere.
    Uniform,
    /// `normalize(σ + step·g)` with standard normal `g`; symmetric in angle.
    Gaussian(f64),
}

/// One Markov chain: configuration, model, RNG stream and counters.
#[derive(Clone, Debug)]
pub struct ChainState {
    config: SpinConfig,
    spec: ModelSpec,
    rng: ChaCha8Rng,
    seed: u64,
    stream: u64,
    proposal: Proposal,
    table: DisplacementTable,
    n_half: u64,
    energy: f64,
    sweeps: u64,
    proposed: u64,
    accepted: u64,
}

/// Generator for `(seed, stream)`.
pub fn chain_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl ChainState {
    pub fn new(config: SpinConfig, spec: ModelSpec, seed: u64, stream: u64) -> Result<Self> {
        if config.dim() != spec.d || config.n() != spec.n {
            return Err(invalid("configuration does not match model dimensions"));
        }
        let n_half = config.region().circumscribed_half_side();
        let table = DisplacementTable::new(&spec.kernel, config.region());
        let energy = hamiltonian(&config, n_half, &spec)?;
        Ok(ChainState {
            config,
            spec,
            rng: chain_rng(seed, stream),
            seed,
            stream,
            proposal: Proposal::Uniform,
            table,
            n_half,
            energy,
            sweeps: 0,
            proposed: 0,
            accepted: 0,
        })
    }

    pub fn with_proposal(mut self, proposal: Proposal) -> Self {
        self.proposal = proposal;
        self
    }

    pub fn config(&self) -> &SpinConfig {
        &self.config
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Tracked total energy `H_N` with `N` covering the whole region.
    pub fn energy(&self) -> f64 {
        self.energy
    }

    pub fn sweeps(&self) -> u64 {
        self.sweeps
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    pub fn counts(&self) -> (u64, u64) {
        (self.proposed, self.accepted)
    }

    /// Re-evaluates `H_N` and compares it with the tracked value.
    pub fn check_energy(&mut self) -> Result<()> {
        let full = hamiltonian(&self.config, self.n_half, &self.spec)?;
        if (full - self.energy).abs() > ENERGY_CHECK_TOLERANCE * full.abs().max(1.0) {
            return Err(Error::EstimationFailure(format!(
                "tracked energy {} drifted from {} after {} sweeps",
                self.energy, full, self.sweeps
            )));
        }
        self.energy = full;
        Ok(())
    }

    fn propose(&mut self, index: usize) -> Vec<f64> {
        let n = self.config.n();
        match self.proposal {
            Proposal::Uniform => random_unit_spin(&mut self.rng, n),
            Proposal::Gaussian(step) => loop {
                let old = self.config.get(index);
                let v: Vec<f64> = old
                    .iter()
                    .map(|&c| {
                        let g: f64 = self.rng.sample(StandardNormal);
                        c + step * g
                    })
                    .collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    break v.into_iter().map(|x| x / norm).collect();
                }
            },
        }
    }
}

/// One Metropolis update per site in lexicographic order. Every
/// [`ENERGY_CHECK_INTERVAL`] sweeps the tracked energy is re-evaluated.
pub fn metropolis_sweep(state: &mut ChainState) -> Result<()> {
    let beta = state.spec.beta;
    for index in 0..state.config.len() {
        let candidate = state.propose(index);
        let delta = local_energy_delta_with(&state.config, index, &candidate, &state.spec, &state.table);
        let u: f64 = state.rng.random();
        state.proposed += 1;
        if u < (-beta * delta).exp() {
            state.config.set(index, &candidate);
            state.energy += delta;
            state.accepted += 1;
        }
    }
    state.sweeps += 1;
    if state.sweeps % ENERGY_CHECK_INTERVAL == 0 {
        state.check_energy()?;
    }
    Ok(())
}

/// One measurement epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub sweep: u64,
    pub energy: f64,
    /// Volume average of `σ_x`.
    pub magnetization: Vec<f64>,
    pub delta: Option<f64>,
    /// Block averages of `P₁₂σ`, one per declared block.
    pub blocks: Vec<[f64; 2]>,
}

impl Measurement {
    pub fn p12(&self) -> [f64; 2] {
        [self.magnetization[0], self.magnetization[1]]
    }
}

/// What to record and how often.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementPlan {
    pub burn_in: u64,
    pub measure_every: u64,
    pub measurements: usize,
    pub blocks: Vec<Region>,
    pub profile: Option<DeformationProfile>,
}

impl MeasurementPlan {
    pub fn new(measurements: usize) -> Self {
        MeasurementPlan { burn_in: DEFAULT_BURN_IN, measure_every: DEFAULT_MEASURE_EVERY, measurements, blocks: Vec::new(), profile: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservableSeries {
    pub burn_in: u64,
    pub measure_every: u64,
    pub blocks: Vec<Region>,
    pub records: Vec<Measurement>,
}

impl ObservableSeries {
    pub fn new(plan: &MeasurementPlan) -> Self {
        ObservableSeries { burn_in: plan.burn_in, measure_every: plan.measure_every, blocks: plan.blocks.clone(), records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn energies(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.energy).collect()
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.delta).collect()
    }

    pub fn csv_header(&self, n: usize) -> Vec<String> {
        let mut h = vec!["sweep".to_string(), "energy".to_string(), "delta".to_string()];
        h.extend((1..=n).map(|i| format!("m{i}")));
        for b in 0..self.blocks.len() {
            h.push(format!("block{b}_1"));
            h.push(format!("block{b}_2"));
        }
        h
    }

    pub fn write_csv<W: Write>(&self, out: W, n: usize, provenance: &[(String, String)]) -> Result<()> {
        let mut out = out;
        for (k, v) in provenance {
            writeln!(out, "# {k} = {v}")?;
        }
        writeln!(out, "# burn_in = {}", self.burn_in)?;
        writeln!(out, "# measure_every = {}", self.measure_every)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.csv_header(n))?;
        for r in &self.records {
            w.write_record(record_fields(r))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn record_fields(r: &Measurement) -> Vec<String> {
    let mut row = vec![r.sweep.to_string(), r.energy.to_string(), r.delta.map_or_else(|| "none".to_string(), |d| d.to_string())];
    row.extend(r.magnetization.iter().map(f64::to_string));
    for b in &r.blocks {
        row.push(b[0].to_string());
        row.push(b[1].to_string());
    }
    row
}

/// Records observables of the current state.
pub struct Recorder {
    evaluator: Option<DefectEvaluator>,
}

impl Recorder {
    pub fn new(state: &ChainState, plan: &MeasurementPlan) -> Result<Self> {
        for b in &plan.blocks {
            if !(state.config.region().contains(b.lo()) && state.config.region().contains(b.hi())) {
                return Err(invalid("block outside the configuration region"));
            }
        }
        let evaluator = match &plan.profile {
            Some(p) => Some(DefectEvaluator::new(state.config.region(), p, &state.spec)?),
            None => None,
        };
        Ok(Recorder { evaluator })
    }

    pub fn record(&mut self, state: &ChainState, blocks: &[Region]) -> Result<Measurement> {
        let n = state.config.n();
        let mut m = vec![0.0; n];
        for (k, v) in state.config.values().iter().enumerate() {
            m[k % n] += v;
        }
        let count = state.config.len() as f64;
        m.iter_mut().for_each(|v| *v /= count);
        let delta = match &mut self.evaluator {
            Some(ev) => Some(ev.evaluate(&state.config)?),
            None => None,
        };
        let blocks = blocks.iter().map(|b| crate::defect::block_magnetization(&state.config, b)).collect::<Result<_>>()?;
        Ok(Measurement { sweep: state.sweeps, energy: state.energy, magnetization: m, delta, blocks })
    }
}

/// Runs burn-in (if not yet done) and then measures until the plan is met,
/// calling `checkpoint` after every measurement.
pub fn continue_chain(
    state: &mut ChainState,
    plan: &MeasurementPlan,
    series: &mut ObservableSeries,
    mut checkpoint: impl FnMut(&ChainState, &ObservableSeries) -> Result<()>,
) -> Result<()> {
    if plan.measure_every == 0 {
        return Err(invalid("measurement interval must be positive"));
    }
    let mut recorder = Recorder::new(state, plan)?;
    while state.sweeps < plan.burn_in {
        metropolis_sweep(state)?;
    }
    while series.records.len() < plan.measurements {
        for _ in 0..plan.measure_every {
            metropolis_sweep(state)?;
        }
        series.records.push(recorder.record(state, &plan.blocks)?);
        checkpoint(state, series)?;
    }
    Ok(())
}

pub fn run_chain(state: &mut ChainState, plan: &MeasurementPlan) -> Result<ObservableSeries> {
    let mut series = ObservableSeries::new(plan);
    continue_chain(state, plan, &mut series, |_, _| Ok(()))?;
    Ok(series)
}

/// Records `count` measurements of the current state without sweeping.
pub fn frozen_series(state: &ChainState, plan: &MeasurementPlan, count: usize) -> Result<ObservableSeries> {
    let mut recorder = Recorder::new(state, plan)?;
    let mut series = ObservableSeries::new(plan);
    for _ in 0..count {
        series.records.push(recorder.record(state, &plan.blocks)?);
    }
    Ok(series)
}

/// Mean and batch-means standard error with at most `batches` equal batches.
pub fn batch_means(values: &[f64], batches: usize) -> Result<(f64, f64)> {
    let b = batches.min(values.len());
    if b < MIN_BATCHES {
        return Err(Error::InsufficientSamples(format!("{} samples give fewer than {MIN_BATCHES} batches", values.len())));
    }
    let size = values.len() / b;
    let used = &values[..size * b];
    let means: Vec<f64> = used.chunks_exact(size).map(|c| c.iter().sum::<f64>() / size as f64).collect();
    let mean = means.iter().sum::<f64>() / b as f64;
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (b - 1) as f64;
    Ok((mean, (var / b as f64).sqrt()))
}

/// Time-averaged magnetization vector and its componentwise standard error.
pub fn estimate_magnetization(series: &ObservableSeries) -> Result<(Vec<f64>, Vec<f64>)> {
    let Some(first) = series.records.first() else {
        return Err(Error::InsufficientSamples("empty series".into()));
    };
    let n = first.magnetization.len();
    let mut mean = Vec::with_capacity(n);
    let mut se = Vec::with_capacity(n);
    for k in 0..n {
        let comp: Vec<f64> = series.records.iter().map(|r| r.magnetization[k]).collect();
        let (m, e) = batch_means(&comp, DEFAULT_BATCHES)?;
        mean.push(m);
        se.push(e);
    }
    Ok((mean, se))
}

/// Δ recorded every `measure_every` sweeps after burn-in.
pub fn defect_distribution(state: &mut ChainState, profile: &DeformationProfile, measurements: usize) -> Result<ObservableSeries> {
    let mut plan = MeasurementPlan::new(measurements);
    plan.profile = Some(*profile);
    run_chain(state, &plan)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TailTestOutcome {
    /// Empirical `μ(Δ ≥ t)`.
    pub lhs: f64,
    pub lhs_se: f64,
    /// `e^{−βt/2}`.
    pub rhs: f64,
    pub pass: bool,
}

/// One-sided check of `μ(Δ ≥ t) ≤ e^{−βt/2}` at three standard errors.
pub fn exponential_tail_test(deltas: &[f64], beta: f64, t: f64) -> Result<TailTestOutcome> {
    check_delta_series(deltas)?;
    let indicator: Vec<f64> = deltas.iter().map(|&d| if d >= t { 1.0 } else { 0.0 }).collect();
    let (lhs, lhs_se) = batch_means(&indicator, DEFAULT_BATCHES)?;
    let rhs = (-0.5 * beta * t).exp();
    Ok(TailTestOutcome { lhs, lhs_se, rhs, pass: lhs <= rhs + 3.0 * lhs_se })
}

/// Runs a chain and applies [`exponential_tail_test`] to its defect series.
pub fn exponential_tail_run(state: &mut ChainState, profile: &DeformationProfile, t: f64, samples: usize) -> Result<(TailTestOutcome, ObservableSeries)> {
    let series = defect_distribution(state, profile, samples)?;
    let outcome = exponential_tail_test(&series.deltas(), state.spec.beta, t)?;
    Ok((outcome, series))
}

fn check_delta_series(deltas: &[f64]) -> Result<()> {
    if deltas.is_empty() {
        return Err(Error::Degenerate("no Δ samples".into()));
    }
    if deltas.iter().all(|&d| d == deltas[0]) {
        return Err(Error::Degenerate("Δ series has zero variance".into()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LowerBoundOutcome {
    /// Empirical `μ(Δ ≥ ζI)`.
    pub lhs: f64,
    pub lhs_se: f64,
    /// `(Ê(Δ) − ζI) / ((λ/c − ζ) I)`.
    pub rhs: f64,
    pub rhs_se: f64,
    pub pass: bool,
}

/// `μ(Δ ≥ ζI) ≥ (E Δ − ζI)/((λ/c − ζ)I)` with empirical expectations.
pub fn lower_bound_diagnostic(deltas: &[f64], zeta: f64, i_value: f64, lambda_over_c: f64) -> Result<LowerBoundOutcome> {
    if !(zeta >= 0.0 && zeta < lambda_over_c) {
        return Err(invalid(format!("ζ = {zeta} must lie in [0, λ/c) with λ/c = {lambda_over_c}")));
    }
    if !(i_value > 0.0) {
        return Err(invalid("benchmark scale must be positive"));
    }
    let threshold = zeta * i_value;
    let indicator: Vec<f64> = deltas.iter().map(|&d| if d >= threshold { 1.0 } else { 0.0 }).collect();
    let (lhs, lhs_se) = batch_means(&indicator, DEFAULT_BATCHES)?;
    let (mean, mean_se) = batch_means(deltas, DEFAULT_BATCHES)?;
    let denom = (lambda_over_c - zeta) * i_value;
    let rhs = (mean - threshold) / denom;
    let rhs_se = mean_se / denom;
    Ok(LowerBoundOutcome { lhs, lhs_se, rhs, rhs_se, pass: lhs >= rhs - 3.0 * (lhs_se + rhs_se) })
}

/// Independent spins with mean `m★ ê₁`: `ê₁` with probability `m★`,
/// otherwise uniform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProductMeasureSpec {
    pub m_star: f64,
}

impl ProductMeasureSpec {
    pub fn new(m_star: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&m_star) {
            return Err(invalid(format!("bias m★ = {m_star} must lie in [0, 1)")));
        }
        Ok(ProductMeasureSpec { m_star })
    }
}

pub fn sample_biased_product<R: Rng + ?Sized>(measure: &ProductMeasureSpec, region: &Region, n: usize, rng: &mut R) -> Result<SpinConfig> {
    let measure = ProductMeasureSpec::new(measure.m_star)?;
    let mut values = Vec::with_capacity(region.len() * n);
    for _ in 0..region.len() {
        let u: f64 = rng.random();
        if u < measure.m_star {
            values.push(1.0);
            values.extend(std::iter::repeat_n(0.0, n - 1));
        } else {
            values.extend(random_unit_spin(rng, n));
        }
    }
    SpinConfig::from_values(region.clone(), n, values)
}

/// `Σ_bonds 4 sin²((θ_x − θ_y)/2)` over nearest-neighbour bonds of `Z^d`.
fn bond_ktilde_sum(profile: &DeformationProfile) -> f64 {
    let d = profile.d;
    let region = LatticeBox::new(d, profile.l + 1).region();
    let table = region.coordinate_table();
    let mut acc = PairwiseSum::new();
    let mut y = vec![0i64; d];
    for x in table.chunks_exact(d) {
        let tx = profile.theta_coords(x);
        for i in 0..d {
            y.copy_from_slice(x);
            y[i] += 1;
            // bonds leaving Λ_{L+1} upward have both ends outside Λ_L or start on its face
            if linf(&y) > profile.l + 1 && linf(x) > profile.l {
                continue;
            }
            acc.add(4.0 * (0.5 * (tx - profile.theta_coords(&y))).sin().powi(2));
        }
    }
    // bonds entering Λ_{L+1} from below on the lower face: x outside, y inside
    let mut lower = PairwiseSum::new();
    for y in table.chunks_exact(d) {
        for i in 0..d {
            let mut x = y.to_vec();
            x[i] -= 1;
            if linf(&x) > profile.l + 1 {
                lower.add(4.0 * (0.5 * (profile.theta_coords(y) - profile.theta_coords(&x))).sin().powi(2));
            }
        }
    }
    acc.total() + lower.total()
}

/// `E Δ` under independent spins with mean `m★ ê₁`:
/// `m★² (λ Σ_{x≠y} K̃_{xy} − J Σ_bonds 4 sin²((θ_x−θ_y)/2))`, with the pair sum
/// over the window (use `Box(M)` for configurations stored on `Λ_M`).
pub fn product_measure_defect_oracle(m_star: f64, profile: &DeformationProfile, spec: &ModelSpec, window: Window) -> Result<(f64, TailCertificate)> {
    ProductMeasureSpec::new(m_star)?;
    let j = spec
        .potential
        .nearest_neighbour_coupling()
        .ok_or_else(|| invalid(format!("no closed form for the '{}' potential", spec.potential.name())))?;
    let m2 = m_star * m_star;
    let (kt, cert) = if spec.lambda != 0.0 { ktilde_sum(profile, &spec.kernel, window)? } else { (0.0, TailCertificate::exact(0.0)) };
    let bonds = if j != 0.0 { bond_ktilde_sum(profile) } else { 0.0 };
    let value = m2 * (spec.lambda * kt - j * bonds);
    Ok((value, TailCertificate { r_cut: cert.r_cut, partial_sum: value, tail_bound: m2 * spec.lambda.abs() * cert.tail_bound }))
}

/// Sample mean and standard error of Δ over `samples` i.i.d. draws.
pub fn product_measure_defect_mc<R: Rng + ?Sized>(
    measure: &ProductMeasureSpec,
    region: &Region,
    profile: &DeformationProfile,
    spec: &ModelSpec,
    samples: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if samples < 2 {
        return Err(Error::InsufficientSamples("need at least two draws".into()));
    }
    let mut evaluator = DefectEvaluator::new(region, profile, spec)?;
    let mut values = Vec::with_capacity(samples);
    for _ in 0..samples {
        let cfg = sample_biased_product(measure, region, spec.n, rng)?;
        values.push(evaluator.evaluate(&cfg)?);
    }
    let mean = values.iter().sum::<f64>() / samples as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (samples - 1) as f64;
    Ok((mean, (var / samples as f64).sqrt()))
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// Asymptotic critical value of [`ks_statistic`] at level `alpha`.
pub fn ks_critical(n: usize, m: usize, alpha: f64) -> f64 {
    let c = (-0.5 * (0.5 * alpha).ln()).sqrt();
    c * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

/// Two-site `E(σ₀·σ₁)` for `O(2)` spins with weight `e^{βJ cos φ}`, by
/// composite Simpson quadrature in the relative angle.
pub fn two_site_correlation_quadrature(beta_j: f64, panels: usize) -> f64 {
    let panels = panels.max(2) & !1;
    let h = 2.0 * PI / panels as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..=panels {
        let phi = -PI + k as f64 * h;
        let w = if k == 0 || k == panels {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let g = (beta_j * phi.cos()).exp();
        num += w * phi.cos() * g;
        den += w * g;
    }
    num / den
}

/// Writes the chain and the series recorded so far.
pub fn write_snapshot<W: Write>(mut out: W, state: &ChainState, series: &ObservableSeries) -> Result<()> {
    writeln!(out, "# spinlab chain snapshot")?;
    writeln!(out, "version = {SNAPSHOT_VERSION}")?;
    writeln!(out, "seed = {}", state.seed)?;
    writeln!(out, "stream = {}", state.stream)?;
    writeln!(out, "word_pos = {}", state.rng.get_word_pos())?;
    writeln!(out, "sweeps = {}", state.sweeps)?;
    writeln!(out, "proposed = {}", state.proposed)?;
    writeln!(out, "accepted = {}", state.accepted)?;
    writeln!(out, "energy = {}", state.energy)?;
    writeln!(out, "blocks = {}", series.blocks.len())?;
    writeln!(out, "records = {}", series.records.len())?;
    for r in &series.records {
        writeln!(out, "{}", record_fields(r).join(","))?;
    }
    writeln!(out, "config")?;
    state.config.write_csv(&mut out, Some(state.seed))?;
    Ok(())
}

fn snapshot_field<T: std::str::FromStr>(lines: &mut impl Iterator<Item = std::io::Result<String>>, key: &str) -> Result<T> {
    let line = lines.next().ok_or_else(|| Error::Snapshot(format!("missing '{key}'")))??;
    let (k, v) = line.split_once('=').ok_or_else(|| Error::Snapshot(format!("malformed line '{line}'")))?;
    if k.trim() != key {
        return Err(Error::Snapshot(format!("expected '{key}', found '{}'", k.trim())));
    }
    v.trim().parse().map_err(|_| Error::Snapshot(format!("bad value for '{key}'")))
}

fn parse_record(line: &str, n: usize, blocks: usize) -> Result<Measurement> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 3 + n + 2 * blocks {
        return Err(Error::Snapshot(format!("record has {} fields", fields.len())));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Snapshot(format!("bad number '{s}'")));
    let sweep = fields[0].parse().map_err(|_| Error::Snapshot("bad sweep".into()))?;
    let delta = if fields[2] == "none" { None } else { Some(num(fields[2])?) };
    let magnetization = fields[3..3 + n].iter().map(|s| num(s)).collect::<Result<_>>()?;
    let blocks = fields[3 + n..].chunks_exact(2).map(|c| Ok([num(c[0])?, num(c[1])?])).collect::<Result<_>>()?;
    Ok(Measurement { sweep, energy: num(fields[1])?, magnetization, delta, blocks })
}

/// Restores a chain written by [`write_snapshot`] for the given model and
/// plan; the returned series carries the records taken so far.
pub fn read_snapshot<R: BufRead>(input: R, spec: &ModelSpec, plan: &MeasurementPlan) -> Result<(ChainState, ObservableSeries)> {
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| Error::Snapshot("empty snapshot".into()))??;
    if header.trim() != "# spinlab chain snapshot" {
        return Err(Error::Snapshot("not a chain snapshot".into()));
    }
    let version: u32 = snapshot_field(&mut lines, "version")?;
    if version != SNAPSHOT_VERSION {
        return Err(Error::Snapshot(format!("unsupported snapshot version {version}")));
    }
    let seed: u64 = snapshot_field(&mut lines, "seed")?;
    let stream: u64 = snapshot_field(&mut lines, "stream")?;
    let word_pos: u128 = snapshot_field(&mut lines, "word_pos")?;
    let sweeps: u64 = snapshot_field(&mut lines, "sweeps")?;
    let proposed: u64 = snapshot_field(&mut lines, "proposed")?;
    let accepted: u64 = snapshot_field(&mut lines, "accepted")?;
    let energy: f64 = snapshot_field(&mut lines, "energy")?;
    let blocks: usize = snapshot_field(&mut lines, "blocks")?;
    let count: usize = snapshot_field(&mut lines, "records")?;
    if blocks != plan.blocks.len() {
        return Err(Error::Snapshot("block count differs from the plan".into()));
    }
    let mut raw = Vec::with_capacity(count);
    for _ in 0..count {
        raw.push(lines.next().ok_or_else(|| Error::Snapshot("truncated records".into()))??);
    }
    let marker = lines.next().ok_or_else(|| Error::Snapshot("missing configuration".into()))??;
    if marker.trim() != "config" {
        return Err(Error::Snapshot("missing configuration marker".into()));
    }
    let rest: Vec<String> = lines.collect::<std::io::Result<_>>()?;
    let (config, _) = SpinConfig::read_csv(rest.join("\n").as_bytes())?;
    let records = raw.iter().map(|l| parse_record(l, config.n(), blocks)).collect::<Result<_>>()?;
    let mut state = ChainState::new(config, spec.clone(), seed, stream)?;
    state.rng.set_word_pos(word_pos);
    state.sweeps = sweeps;
    state.proposed = proposed;
    state.accepted = accepted;
    state.energy = energy;
    let mut series = ObservableSeries::new(plan);
    series.records = records;
    Ok((state, series))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defect::uniform_bound;
    use crate::model::builtin_nn_potential;
    use approx::assert_relative_eq;

    fn spec(d: usize, n: usize, s: f64, lambda: f64, beta: f64, j: f64) -> ModelSpec {
        ModelSpec::new(d, n, s, lambda, beta, builtin_nn_potential(j, d)).unwrap()
    }

    fn line(lo: i64, hi: i64) -> Region {
        Region::new(vec![lo], vec![hi])
    }

    #[test]
    fn infinite_temperature_accepts_everything() {
        let sp = spec(1, 3, 1.5, 1.0, 0.0, 1.0);
        let mut rng = chain_rng(1, 0);
        let cfg = SpinConfig::random(line(-8, 8), 3, &mut rng).unwrap();
        let mut state = ChainState::new(cfg, sp, 1, 0).unwrap();
        for _ in 0..20 {
            metropolis_sweep(&mut state).unwrap();
        }
        assert_eq!(state.acceptance_rate(), 1.0);
        assert!(state.config().is_normalized(1e-12));
    }

    #[test]
    fn energy_bookkeeping_survives_checkpoints() {
        let sp = spec(2, 3, 3.0, 0.7, 0.8, 1.0);
        let cfg = SpinConfig::aligned(LatticeBox::new(2, 3).region(), 3, 0).unwrap();
        let mut state = ChainState::new(cfg, sp, 5, 2).unwrap();
        for _ in 0..ENERGY_CHECK_INTERVAL + 3 {
            metropolis_sweep(&mut state).unwrap();
        }
        let full = hamiltonian(state.config(), state.n_half, state.spec()).unwrap();
        assert!((full - state.energy()).abs() <= 1e-8 * full.abs().max(1.0));
    }

    #[test]
    fn low_temperature_rarely_accepts() {
        let sp = spec(1, 2, 1.5, 0.0, 1e3, 1.0);
        let cfg = SpinConfig::aligned(line(0, 31), 2, 0).unwrap();
        let mut state = ChainState::new(cfg, sp, 3, 0).unwrap();
        let start = state.energy();
        for _ in 0..50 {
            metropolis_sweep(&mut state).unwrap();
        }
        assert!(state.acceptance_rate() < 0.05);
        assert!(state.energy() <= start + 1.0);
    }

    #[test]
    fn gaussian_proposal_keeps_unit_spins() {
        let sp = spec(1, 3, 1.5, 1.0, 2.0, 1.0);
        let cfg = SpinConfig::aligned(line(0, 15), 3, 0).unwrap();
        let mut state = ChainState::new(cfg, sp, 3, 1).unwrap().with_proposal(Proposal::Gaussian(0.3));
        for _ in 0..30 {
            metropolis_sweep(&mut state).unwrap();
        }
        assert!(state.config().is_normalized(1e-12));
        assert!(state.acceptance_rate() > 0.2);
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let sp = spec(1, 2, 1.5, 1.0, 0.5, 1.0);
        let run = || {
            let mut rng = chain_rng(9, 4);
            let cfg = SpinConfig::random(line(-10, 10), 2, &mut rng).unwrap();
            let mut state = ChainState::new(cfg, sp.clone(), 9, 4).unwrap();
            let mut plan = MeasurementPlan::new(20);
            plan.burn_in = 10;
            plan.measure_every = 2;
            run_chain(&mut state, &plan).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn magnetization_estimates() {
        let sp = spec(1, 2, 1.5, 0.0, 0.0, 1.0);
        let cfg = SpinConfig::aligned(line(0, 63), 2, 0).unwrap();
        let frozen_state = ChainState::new(cfg.clone(), sp.clone(), 1, 0).unwrap();
        let frozen = frozen_series(&frozen_state, &MeasurementPlan::new(40), 40).unwrap();
        let (m, se) = estimate_magnetization(&frozen).unwrap();
        assert_eq!(m, vec![1.0, 0.0]);
        assert_eq!(se, vec![0.0, 0.0]);

        let mut state = ChainState::new(cfg, sp, 2, 0).unwrap();
        let mut plan = MeasurementPlan::new(300);
        plan.burn_in = 10;
        plan.measure_every = 1;
        let series = run_chain(&mut state, &plan).unwrap();
        let (m, se) = estimate_magnetization(&series).unwrap();
        for k in 0..2 {
            assert!(m[k].abs() <= 3.0 * se[k] + 1e-12, "{m:?} {se:?}");
        }
        let short = ObservableSeries { records: series.records[..5].to_vec(), ..series.clone() };
        assert!(matches!(estimate_magnetization(&short), Err(Error::InsufficientSamples(_))));
    }

    #[test]
    fn defect_series_respects_uniform_bound_and_symmetry() {
        let sp = spec(1, 2, 1.5, 1.0, 0.0, 1.0);
        let p = DeformationProfile::new(1, 8, 2).unwrap();
        let region = line(-12, 12);
        let (u, _) = uniform_bound(&p, &sp, Window::Box(12)).unwrap();
        let cfg = SpinConfig::aligned(region, 2, 0).unwrap();
        let mut state = ChainState::new(cfg, sp, 4, 0).unwrap();
        let series = defect_distribution(&mut state, &p, 600).unwrap();
        let deltas = series.deltas();
        assert!(deltas.iter().all(|d| d.abs() <= u));
        let (mean, se) = batch_means(&deltas, DEFAULT_BATCHES).unwrap();
        assert!(mean.abs() <= 3.0 * se, "{mean} ± {se}");
    }

    #[test]
    fn cold_aligned_chain_has_positive_mean_defect() {
        // strong bonds and a weak long-range part keep the aligned start ordered
        // over the run; a stronger λ twists the chain into a spiral with Δ < 0
        let sp = spec(1, 2, 1.5, 0.05, 50.0, 1.0);
        let p = DeformationProfile::new(1, 32, 8).unwrap();
        let cfg = SpinConfig::aligned(line(-36, 36), 2, 0).unwrap();
        let mut state = ChainState::new(cfg, sp, 6, 0).unwrap().with_proposal(Proposal::Gaussian(0.1));
        let mut plan = MeasurementPlan::new(200);
        plan.burn_in = 20;
        plan.measure_every = 1;
        plan.profile = Some(p);
        let series = run_chain(&mut state, &plan).unwrap();
        let (mean, _) = batch_means(&series.deltas(), DEFAULT_BATCHES).unwrap();
        assert!(mean > 0.0);
        let (m, _) = estimate_magnetization(&series).unwrap();
        assert!(m[0] > 0.5);
    }

    #[test]
    fn defect_distribution_needs_room() {
        let sp = spec(1, 2, 1.5, 1.0, 1.0, 1.0);
        let p = DeformationProfile::new(1, 8, 2).unwrap();
        let cfg = SpinConfig::aligned(line(-8, 8), 2, 0).unwrap();
        let mut state = ChainState::new(cfg, sp, 1, 0).unwrap();
        assert!(matches!(defect_distribution(&mut state, &p, 10), Err(Error::BoxTooSmall { .. })));
    }

    #[test]
    fn exponential_tail_trivial_thresholds() {
        let deltas: Vec<f64> = (0..300).map(|k| (k as f64 * 0.37).sin()).collect();
        let below = exponential_tail_test(&deltas, 1.0, -2.0).unwrap();
        assert_eq!(below.lhs, 1.0);
        assert!(below.rhs >= 1.0 && below.pass);
        let zero = exponential_tail_test(&deltas, 1.0, 0.0).unwrap();
        assert_eq!(zero.rhs, 1.0);
        assert!(zero.pass);
        assert!(matches!(exponential_tail_test(&[], 1.0, 0.0), Err(Error::Degenerate(_))));
        assert!(matches!(exponential_tail_test(&[0.5; 40], 1.0, 0.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn lower_bound_examples() {
        let deltas: Vec<f64> = (0..300).map(|k| 0.1 * (k as f64 * 0.37).sin()).collect();
        let trivial = lower_bound_diagnostic(&deltas, 0.5, 1.0, 2.0).unwrap();
        assert!(trivial.rhs <= 0.0 && trivial.pass);
        let frozen = vec![3.0; 50];
        let out = lower_bound_diagnostic(&frozen, 0.5, 2.0, 4.0).unwrap();
        assert_eq!(out.lhs, 1.0);
        assert!(out.rhs <= 1.0 && out.pass);
        assert!(lower_bound_diagnostic(&deltas, 2.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn biased_product_sampler() {
        let mut rng = chain_rng(11, 0);
        assert!(ProductMeasureSpec::new(1.0).is_err());
        let measure = ProductMeasureSpec::new(0.5).unwrap();
        let region = line(0, 999);
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let draws = 1000;
        for _ in 0..draws {
            let cfg = sample_biased_product(&measure, &region, 3, &mut rng).unwrap();
            for s in cfg.values().chunks_exact(3) {
                for k in 0..3 {
                    sum[k] += s[k];
                    sq[k] += s[k] * s[k];
                }
            }
        }
        let total = (draws * 1000) as f64;
        let target = [0.5, 0.0, 0.0];
        for k in 0..3 {
            let mean = sum[k] / total;
            let se = ((sq[k] / total - mean * mean) / total).sqrt();
            assert!((mean - target[k]).abs() <= 3.0 * se, "component {k}: {mean}");
        }
        let zero = ProductMeasureSpec::new(0.0).unwrap();
        let cfg = sample_biased_product(&zero, &region, 3, &mut rng).unwrap();
        assert!(cfg.values().chunks_exact(3).all(|s| s[0] != 1.0));
    }

    #[test]
    fn product_oracle_closed_form_examples() {
        let p = DeformationProfile::new(1, 16, 4).unwrap();
        let sp0 = spec(1, 2, 1.5, 1.0, 1.0, 0.0);
        assert_eq!(product_measure_defect_oracle(0.0, &p, &sp0, Window::Infinite).unwrap().0, 0.0);
        let kt = ktilde_sum(&p, &sp0.kernel, Window::Infinite).unwrap().0;
        let mut previous = 0.0;
        for m in [0.1, 0.3, 0.6, 0.9] {
            let v = product_measure_defect_oracle(m, &p, &sp0, Window::Infinite).unwrap().0;
            assert_relative_eq!(v, m * m * kt, max_relative = 1e-14);
            assert!(v > previous);
            previous = v;
        }
    }

    #[test]
    fn bond_sum_matches_direct_enumeration() {
        for (d, l, a) in [(1usize, 6u64, 2u64), (2, 5, 3)] {
            let p = DeformationProfile::new(d, l, a).unwrap();
            let big = LatticeBox::new(d, l + 4).region();
            let mut direct = 0.0;
            for x in big.sites() {
                for i in 0..d {
                    let mut y = x.coords().to_vec();
                    y[i] += 1;
                    direct += 4.0 * (0.5 * (p.theta(&x) - p.theta_coords(&y))).sin().powi(2);
                }
            }
            assert_relative_eq!(bond_ktilde_sum(&p), direct, max_relative = 1e-13);
        }
    }

    #[test]
    fn product_oracle_matches_iid_sampling() {
        let sp = spec(1, 2, 1.5, 1.0, 1.0, 1.0);
        let p = DeformationProfile::new(1, 16, 4).unwrap();
        let m = 20;
        let region = LatticeBox::new(1, m).region();
        let (closed, _) = product_measure_defect_oracle(0.5, &p, &sp, Window::Box(m)).unwrap();
        let mut rng = chain_rng(12, 0);
        let (mean, se) = product_measure_defect_mc(&ProductMeasureSpec::new(0.5).unwrap(), &region, &p, &sp, 4000, &mut rng).unwrap();
        assert!((mean - closed).abs() <= 3.0 * se, "{mean} ± {se} vs {closed}");
    }

    #[test]
    fn ks_statistic_examples() {
        let a: Vec<f64> = (0..100).map(|k| k as f64).collect();
        assert_eq!(ks_statistic(&a, &a), 0.0);
        let b: Vec<f64> = (0..100).map(|k| k as f64 + 1000.0).collect();
        assert_eq!(ks_statistic(&a, &b), 1.0);
        assert_relative_eq!(ks_critical(100, 100, 0.05), 1.358 * 0.02f64.sqrt(), max_relative = 1e-3);
    }

    #[test]
    fn quadrature_reproduces_bessel_ratio() {
        // I₁(1)/I₀(1) from the power series
        let series = |nu: i32| (0..30).map(|k| 0.5f64.powi(2 * k + nu) / (factorial(k) * factorial(k + nu))).sum::<f64>();
        fn factorial(k: i32) -> f64 {
            (1..=k).map(f64::from).product()
        }
        assert_relative_eq!(two_site_correlation_quadrature(1.0, 2000), series(1) / series(0), max_relative = 1e-12);
        assert!((two_site_correlation_quadrature(1.0, 2000) - 0.4464).abs() < 5e-5);
    }

    #[test]
    fn snapshot_round_trip_resumes_identically() {
        let sp = spec(1, 2, 1.5, 1.0, 0.7, 1.0);
        let p = DeformationProfile::new(1, 4, 2).unwrap();
        let mut plan = MeasurementPlan::new(12);
        plan.burn_in = 5;
        plan.measure_every = 3;
        plan.profile = Some(p);
        plan.blocks = vec![line(-6, -4), line(2, 4)];
        let fresh = || {
            let mut rng = chain_rng(21, 3);
            let cfg = SpinConfig::random(line(-7, 7), 2, &mut rng).unwrap();
            ChainState::new(cfg, sp.clone(), 21, 3).unwrap()
        };
        let mut straight = fresh();
        let full = run_chain(&mut straight, &plan).unwrap();

        let mut first = fresh();
        let mut partial = ObservableSeries::new(&plan);
        let mut buf = Vec::new();
        let mut half = plan.clone();
        half.measurements = 5;
        continue_chain(&mut first, &half, &mut partial, |_, _| Ok(())).unwrap();
        write_snapshot(&mut buf, &first, &partial).unwrap();
        let (mut resumed, mut series) = read_snapshot(buf.as_slice(), &sp, &plan).unwrap();
        assert_eq!(series, partial);
        continue_chain(&mut resumed, &plan, &mut series, |_, _| Ok(())).unwrap();
        assert_eq!(series, full);
        assert_eq!(resumed.config(), straight.config());
        assert_eq!(resumed.energy().to_bits(), straight.energy().to_bits());
        assert!(read_snapshot("garbage".as_bytes(), &sp, &plan).is_err());
    }
}

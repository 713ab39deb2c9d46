//! Iterative parameter estimation from the selected sites.
//!
//! Each iteration forms the residual `dy = y_obs - y_sim(phi)` at the selected
//! sites, solves `dphi = J^+ dy` with `J = d y_sim / d phi`, and moves to
//! `phi + dphi`. With that residual and Jacobian the plus sign is the one that
//! reduces the linearized misfit `||dy - J dphi||`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{BandpassSpec, ForwardModel, FrequencyGrid, WavefieldSpectra};
use crate::model::{ParameterVector, PerturbationSpec, Scenario, PARAM_COUNT};
use crate::sensitivity::build_sensitivity;

pub const MAX_HALVINGS: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    /// Built once at the initial parameters.
    Frozen,
    /// Rebuilt at every iterate (Gauss-Newton).
    #[default]
    Refresh,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorOptions {
    pub max_iterations: usize,
    /// Stop once `||dy|| <= residual_tolerance * ||y_obs||`.
    pub residual_tolerance: f64,
    /// Singular values below `svd_cutoff * sigma_max` are dropped.
    pub svd_cutoff: f64,
    pub jacobian_mode: JacobianMode,
    /// Halve a step that increases the residual norm (up to ten times).
    pub line_search: bool,
    /// Finite-difference steps of the estimator's Jacobian. Defaults to a
    /// hundredth of the sensitivity-map steps (0.1% and 5 m): the map steps
    /// are too coarse for a Jacobian that has to drive the residual to zero.
    pub perturbation: PerturbationSpec,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions {
            max_iterations: 20,
            residual_tolerance: 1e-9,
            svd_cutoff: 1e-10,
            jacobian_mode: JacobianMode::Refresh,
            line_search: true,
            perturbation: PerturbationSpec::default().scaled(0.01),
        }
    }
}

impl EstimatorOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.residual_tolerance > 0.0) {
            return Err(Error::Argument("residual tolerance must be positive".into()));
        }
        if !(self.svd_cutoff > 0.0 && self.svd_cutoff < 1.0) {
            return Err(Error::Argument("singular-value cutoff must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub parameters: ParameterVector,
    pub residual_norm: f64,
    /// Full-network error against the true field, when one was supplied.
    pub reconstruction_error: Option<f64>,
    /// Fraction of the pseudo-inverse step that was taken.
    pub step_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum StopReason {
    Converged,
    MaxIterations,
    /// No damped step reduced the residual.
    Stalled,
    StepFailure(String),
    RankDeficient,
    ForwardFailure(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationTrace {
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
    pub reason: StopReason,
}

impl EstimationTrace {
    pub fn last(&self) -> &IterationRecord {
        self.iterations.last().expect("trace holds the initial state")
    }

    pub fn final_parameters(&self) -> ParameterVector {
        self.last().parameters
    }
}

/// `y_obs - y_sim`, flattened.
pub fn residual(observed: &WavefieldSpectra, simulated: &WavefieldSpectra) -> Result<Vec<f64>> {
    if !observed.same_layout(simulated) {
        return Err(Error::Shape(
            "observed and simulated spectra differ in stations or frequency grid".into(),
        ));
    }
    Ok(observed
        .flatten()
        .iter()
        .zip(simulated.flatten())
        .map(|(y, s)| y - s)
        .collect())
}

/// Minimum-norm least-squares `J^+ dy` by truncated SVD.
pub fn solve_update(j: &DMatrix<f64>, dy: &[f64], cutoff: f64) -> Result<DVector<f64>> {
    if j.nrows() != dy.len() {
        return Err(Error::Shape(format!(
            "Jacobian has {} rows but the residual has {} entries",
            j.nrows(),
            dy.len()
        )));
    }
    if j.iter().chain(dy).any(|x| !x.is_finite()) {
        return Err(Error::Matrix("non-finite entries in the update system".into()));
    }
    let svd = j.clone().svd(true, true);
    let u = svd.u.as_ref().expect("U requested");
    let v_t = svd.v_t.as_ref().expect("V^T requested");
    let sigma_max = svd.singular_values.max();
    let threshold = cutoff * sigma_max;
    if !(sigma_max > 0.0) || svd.singular_values.iter().all(|&s| s <= threshold) {
        return Err(Error::RankZero);
    }
    let rhs = DVector::from_column_slice(dy);
    let mut coeffs = u.transpose() * rhs;
    for (c, &s) in coeffs.iter_mut().zip(svd.singular_values.iter()) {
        *c = if s > threshold { *c / s } else { 0.0 };
    }
    Ok(v_t.transpose() * coeffs)
}

/// `phi + dphi`, halving the step until the scenario is physical.
///
/// Returns the new vector and the number of halvings used.
pub fn calibrate(
    phi: &ParameterVector,
    dphi: &[f64],
    base: &Scenario,
) -> Result<(ParameterVector, u32)> {
    if dphi.len() != PARAM_COUNT {
        return Err(Error::Shape(format!("update has {} entries", dphi.len())));
    }
    let mut scale = 1.0;
    let mut last_err = String::new();
    for halvings in 0..=MAX_HALVINGS {
        let mut next = *phi;
        for k in 0..PARAM_COUNT {
            next[k] += scale * dphi[k];
        }
        match base.with_parameters(&next) {
            Ok(_) => return Ok((next, halvings)),
            Err(e) => last_err = e.to_string(),
        }
        scale *= 0.5;
    }
    Err(Error::DampingExhausted { halvings: MAX_HALVINGS, reason: last_err })
}

/// `||X_true - X_rec||_F / ||X_true||_F`.
pub fn reconstruction_error(truth: &WavefieldSpectra, reconstructed: &WavefieldSpectra) -> Result<f64> {
    if !truth.same_layout(reconstructed) {
        return Err(Error::Shape("true and reconstructed fields differ in layout".into()));
    }
    relative_error(&truth.flatten(), &reconstructed.flatten())
}

/// `||a - b|| / ||a||` over flat vectors of equal length.
pub fn relative_error(truth: &[f64], reconstructed: &[f64]) -> Result<f64> {
    if truth.len() != reconstructed.len() {
        return Err(Error::Shape(format!(
            "vectors of length {} and {}",
            truth.len(),
            reconstructed.len()
        )));
    }
    let denom: f64 = truth.iter().map(|x| x * x).sum();
    if denom == 0.0 {
        return Err(Error::Argument("true field is identically zero".into()));
    }
    let num: f64 = truth
        .iter()
        .zip(reconstructed)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((num / denom).sqrt())
}

/// The same ratio evaluated station by station.
pub fn site_reconstruction_errors(
    truth: &WavefieldSpectra,
    reconstructed: &WavefieldSpectra,
) -> Result<Vec<f64>> {
    if !truth.same_layout(reconstructed) {
        return Err(Error::Shape("true and reconstructed fields differ in layout".into()));
    }
    truth
        .stations
        .iter()
        .zip(&reconstructed.stations)
        .map(|(t, r)| relative_error(&t.flatten(), &r.flatten()))
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Everything the estimation loop needs besides the data.
pub struct Estimator<'a> {
    pub forward: &'a dyn ForwardModel,
    pub grid: FrequencyGrid,
    pub filter: Option<BandpassSpec>,
    pub options: EstimatorOptions,
}

impl Estimator<'_> {
    fn simulate(&self, scenario: &Scenario) -> Result<WavefieldSpectra> {
        let w = self.forward.simulate(
            &scenario.layer_model(),
            &scenario.source,
            &scenario.stations,
            &self.grid,
        )?;
        match self.filter {
            Some(f) => f.apply(&w),
            None => Ok(w),
        }
    }

    fn jacobian(&self, scenario: &Scenario) -> Result<DMatrix<f64>> {
        Ok(build_sensitivity(
            self.forward,
            scenario,
            &self.grid,
            self.filter,
            &self.options.perturbation,
        )?
        .raw_jacobian())
    }

    /// Estimate parameters from `observed` (spectra at `selected`, in that
    /// order, already filtered like the simulations).
    ///
    /// `initial` carries the starting parameters and the full network; when
    /// `truth` (the clean filtered field over the full network) is given, each
    /// iterate's reconstruction error is recorded.
    pub fn run(
        &self,
        initial: &Scenario,
        selected: &[usize],
        observed: &WavefieldSpectra,
        truth: Option<&WavefieldSpectra>,
    ) -> Result<EstimationTrace> {
        self.options.validate()?;
        if selected.is_empty() {
            return Err(Error::Argument("no observation sites selected".into()));
        }
        let mut at_sites = initial.clone();
        at_sites.stations = initial.stations.subset(selected)?;
        if observed.station_ids != at_sites.stations.iter().map(|s| s.id.clone()).collect::<Vec<_>>() {
            return Err(Error::Shape("observed spectra do not match the selected sites".into()));
        }
        let y_norm = norm(&observed.flatten());

        let full_error = |phi: &ParameterVector| -> Result<Option<f64>> {
            match truth {
                Some(t) => {
                    let rec = self.simulate(&initial.with_parameters(phi)?)?;
                    reconstruction_error(t, &rec).map(Some)
                }
                None => Ok(None),
            }
        };
        let misfit = |phi: &ParameterVector| -> Result<Vec<f64>> {
            let sim = self.simulate(&at_sites.with_parameters(phi)?)?;
            residual(observed, &sim)
        };

        let mut phi = initial.parameters()?;
        let mut dy = misfit(&phi)?;
        let mut dy_norm = norm(&dy);
        let mut trace = EstimationTrace {
            iterations: vec![IterationRecord {
                iteration: 0,
                parameters: phi,
                residual_norm: dy_norm,
                reconstruction_error: full_error(&phi)?,
                step_scale: 0.0,
            }],
            converged: false,
            reason: StopReason::MaxIterations,
        };
        let done = |r: f64| r <= self.options.residual_tolerance * y_norm;
        if done(dy_norm) {
            trace.converged = true;
            trace.reason = StopReason::Converged;
            return Ok(trace);
        }

        let frozen = match self.options.jacobian_mode {
            JacobianMode::Frozen => Some(self.jacobian(&at_sites)?),
            JacobianMode::Refresh => None,
        };

        for t in 1..=self.options.max_iterations {
            let j = match &frozen {
                Some(j) => j.clone(),
                None => match at_sites.with_parameters(&phi).and_then(|s| self.jacobian(&s)) {
                    Ok(j) => j,
                    Err(e) => {
                        trace.reason = StopReason::ForwardFailure(e.to_string());
                        return Ok(trace);
                    }
                },
            };
            let dphi = match solve_update(&j, &dy, self.options.svd_cutoff) {
                Ok(d) => d,
                Err(Error::RankZero) => {
                    trace.reason = StopReason::RankDeficient;
                    return Ok(trace);
                }
                Err(e) => return Err(e),
            };
            let (mut candidate, halvings) = match calibrate(&phi, dphi.as_slice(), initial) {
                Ok(c) => c,
                Err(e) => {
                    trace.reason = StopReason::StepFailure(e.to_string());
                    return Ok(trace);
                }
            };
            let mut scale = 0.5f64.powi(halvings as i32);
            let mut next_dy = match misfit(&candidate) {
                Ok(r) => r,
                Err(e) => {
                    trace.reason = StopReason::ForwardFailure(e.to_string());
                    return Ok(trace);
                }
            };
            if self.options.line_search {
                let mut tries = halvings;
                while norm(&next_dy) > dy_norm {
                    if tries >= MAX_HALVINGS {
                        trace.reason = StopReason::Stalled;
                        return Ok(trace);
                    }
                    scale *= 0.5;
                    tries += 1;
                    for k in 0..PARAM_COUNT {
                        candidate[k] = phi[k] + scale * dphi[k];
                    }
                    next_dy = misfit(&candidate)?;
                }
            }
            phi = candidate;
            dy = next_dy;
            dy_norm = norm(&dy);
            trace.iterations.push(IterationRecord {
                iteration: t,
                parameters: phi,
                residual_norm: dy_norm,
                reconstruction_error: full_error(&phi)?,
                step_scale: scale,
            });
            if done(dy_norm) {
                trace.converged = true;
                trace.reason = StopReason::Converged;
                return Ok(trace);
            }
        }
        Ok(trace)
    }
}

pub const TRACE_HEADER_PREFIX: [&str; 3] = ["iteration", "residual_norm", "reconstruction_error"];

/// `iteration,residual_norm,reconstruction_error,<12 parameter columns>`.
pub fn write_trace_csv<W: std::io::Write>(
    trace: &EstimationTrace,
    preamble: Option<&str>,
    mut out: W,
) -> Result<()> {
    if let Some(p) = preamble {
        for line in p.lines() {
            writeln!(out, "# {line}").map_err(|e| Error::io("<csv>", e))?;
        }
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = TRACE_HEADER_PREFIX.to_vec();
    header.extend(crate::model::PARAMETER_NAMES);
    w.write_record(&header)?;
    for rec in &trace.iterations {
        let mut row = vec![
            rec.iteration.to_string(),
            format!("{:e}", rec.residual_norm),
            rec.reconstruction_error
                .map(|e| format!("{e:e}"))
                .unwrap_or_default(),
        ];
        row.extend(rec.parameters.as_array().iter().map(|v| format!("{v}")));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

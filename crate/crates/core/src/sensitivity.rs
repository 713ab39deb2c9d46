//! Normalized parameter-sensitivity matrix by central differences.
//!
//! Column `k` of the normalized matrix is
//! `scale_k * (x(phi + d_k e_k) - x(phi - d_k e_k)) / (2 d_k)`, where `x` is
//! the flattened (optionally band-passed) wavefield stacked over stations and
//! `scale_k` is the initial parameter value unless another normalization is
//! requested.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{BandpassSpec, ForwardModel, FrequencyGrid, WavefieldSpectra};
use crate::model::{
    ParamKind, ParameterVector, PerturbationSpec, Scenario, Sign, Station, PARAMETER_NAMES,
    PARAM_COUNT,
};

/// How columns are scaled to make them dimensionless.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Every column multiplied by its initial parameter value.
    #[default]
    InitialValue,
    /// Structure columns as above; source-coordinate columns multiplied by a
    /// fixed length in km, which removes the dependence on the coordinate
    /// origin.
    LocationScale(f64),
}

impl Normalization {
    pub fn scales(&self, phi0: &ParameterVector) -> [f64; PARAM_COUNT] {
        std::array::from_fn(|k| match (self, ParamKind::from_column(k).is_location()) {
            (Normalization::LocationScale(len), true) => *len,
            _ => phi0[k],
        })
    }
}

/// The `2r + 1` unfiltered forward runs behind a sensitivity matrix.
#[derive(Debug, Clone)]
pub struct SensitivityRuns {
    pub phi0: ParameterVector,
    pub steps: [f64; PARAM_COUNT],
    pub base: WavefieldSpectra,
    pub plus: Vec<WavefieldSpectra>,
    pub minus: Vec<WavefieldSpectra>,
    pub model_tag: String,
}

impl SensitivityRuns {
    pub fn compute(
        forward: &dyn ForwardModel,
        scenario: &Scenario,
        grid: &FrequencyGrid,
        pspec: &PerturbationSpec,
    ) -> Result<Self> {
        let phi0 = scenario.parameters()?;
        let steps = pspec.step_sizes(&phi0)?;
        let run = |phi: &ParameterVector| -> Result<WavefieldSpectra> {
            let s = scenario.with_parameters(phi)?;
            forward.simulate(&s.layer_model(), &s.source, &s.stations, grid)
        };

        let jobs: Vec<(usize, Sign)> = (0..PARAM_COUNT)
            .flat_map(|k| [(k, Sign::Plus), (k, Sign::Minus)])
            .collect();
        let mut results = jobs
            .par_iter()
            .map(|&(k, sign)| {
                let delta = match sign {
                    Sign::Plus => steps[k],
                    Sign::Minus => -steps[k],
                };
                let mut phi = phi0;
                phi[k] += delta;
                run(&phi).map_err(|e| Error::Forward {
                    parameter: PARAMETER_NAMES[k],
                    sign,
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter();
        let base = run(&phi0)?;

        let mut plus = Vec::with_capacity(PARAM_COUNT);
        let mut minus = Vec::with_capacity(PARAM_COUNT);
        for _ in 0..PARAM_COUNT {
            plus.push(results.next().expect("2r results"));
            minus.push(results.next().expect("2r results"));
        }
        Ok(SensitivityRuns { phi0, steps, base, plus, minus, model_tag: forward.tag() })
    }

    fn filtered(w: &WavefieldSpectra, filter: Option<&BandpassSpec>) -> Result<Vec<f64>> {
        match filter {
            Some(f) => Ok(f.apply(w)?.flatten()),
            None => Ok(w.flatten()),
        }
    }

    /// Assemble the normalized matrix for one filter band.
    pub fn matrix(
        &self,
        filter: Option<BandpassSpec>,
        normalization: Normalization,
    ) -> Result<SensitivityMatrix> {
        let scales = normalization.scales(&self.phi0);
        let rows = self.base.flat_len();
        let columns = (0..PARAM_COUNT)
            .into_par_iter()
            .map(|k| {
                let p = Self::filtered(&self.plus[k], filter.as_ref())?;
                let m = Self::filtered(&self.minus[k], filter.as_ref())?;
                let factor = scales[k] / (2.0 * self.steps[k]);
                Ok(p.iter().zip(&m).map(|(a, b)| factor * (a - b)).collect::<Vec<f64>>())
            })
            .collect::<Result<Vec<_>>>()?;
        let mut data = Vec::with_capacity(rows * PARAM_COUNT);
        for c in &columns {
            data.extend_from_slice(c);
        }
        let normalized = DMatrix::from_vec(rows, PARAM_COUNT, data);
        if normalized.iter().any(|x| !x.is_finite()) {
            return Err(Error::Matrix("sensitivity matrix has non-finite entries".into()));
        }
        let base = match filter {
            Some(f) => f.apply(&self.base)?,
            None => self.base.clone(),
        };
        Ok(SensitivityMatrix {
            normalized,
            scales,
            phi0: self.phi0,
            steps: self.steps,
            grid: self.base.grid,
            filter,
            normalization,
            model_tag: self.model_tag.clone(),
            station_ids: self.base.station_ids.clone(),
            base,
        })
    }
}

/// Stacked normalized Jacobian plus the metadata needed to reproduce it.
#[derive(Debug, Clone)]
pub struct SensitivityMatrix {
    /// `(6 i n) x r`, one `6 i`-row block per station in network order.
    pub normalized: DMatrix<f64>,
    /// Column normalization factors (the initial values under the default).
    pub scales: [f64; PARAM_COUNT],
    pub phi0: ParameterVector,
    pub steps: [f64; PARAM_COUNT],
    pub grid: FrequencyGrid,
    pub filter: Option<BandpassSpec>,
    pub normalization: Normalization,
    pub model_tag: String,
    pub station_ids: Vec<String>,
    /// Filtered spectra at `phi0`.
    pub base: WavefieldSpectra,
}

impl SensitivityMatrix {
    pub fn station_count(&self) -> usize {
        self.station_ids.len()
    }

    /// Rows per station block (`s = 6 i`).
    pub fn block_rows(&self) -> usize {
        self.grid.entries_per_station()
    }

    pub fn block(&self, j: usize) -> DMatrix<f64> {
        let s = self.block_rows();
        self.normalized.rows(j * s, s).into_owned()
    }

    /// Normalized matrix with column `k` divided by its scale.
    pub fn raw_jacobian(&self) -> DMatrix<f64> {
        let mut j = self.normalized.clone();
        for (k, mut col) in j.column_iter_mut().enumerate() {
            col /= self.scales[k];
        }
        j
    }

    /// Raw Jacobian rows of the given stations, stacked in the given order.
    pub fn raw_rows(&self, stations: &[usize]) -> DMatrix<f64> {
        let s = self.block_rows();
        let raw = self.raw_jacobian();
        let mut out = DMatrix::zeros(s * stations.len(), PARAM_COUNT);
        for (b, &j) in stations.iter().enumerate() {
            out.rows_mut(b * s, s).copy_from(&raw.rows(j * s, s));
        }
        out
    }

    /// `S_j^k = ||x_j(+) - x_j(-)||^2` for every station and parameter,
    /// recovered from the normalized matrix.
    pub fn site_sensitivities(&self) -> Vec<[f64; PARAM_COUNT]> {
        let s = self.block_rows();
        (0..self.station_count())
            .map(|j| {
                std::array::from_fn(|k| {
                    let col = self.normalized.view((j * s, k), (s, 1));
                    let factor = 2.0 * self.steps[k] / self.scales[k];
                    factor * factor * col.norm_squared()
                })
            })
            .collect()
    }

    pub fn sidecar(&self) -> SensitivitySidecar {
        SensitivitySidecar {
            parameters: PARAMETER_NAMES.iter().map(|s| s.to_string()).collect(),
            initial: *self.phi0.as_array(),
            steps: self.steps,
            scales: self.scales,
            normalization: self.normalization,
            grid: self.grid,
            band: self.filter,
            model_tag: self.model_tag.clone(),
            stations: self.station_ids.clone(),
        }
    }
}

/// Build the normalized sensitivity matrix of `scenario` at its own
/// parameters (`2r + 1` forward runs).
pub fn build_sensitivity(
    forward: &dyn ForwardModel,
    scenario: &Scenario,
    grid: &FrequencyGrid,
    filter: Option<BandpassSpec>,
    pspec: &PerturbationSpec,
) -> Result<SensitivityMatrix> {
    SensitivityRuns::compute(forward, scenario, grid, pspec)?.matrix(filter, Normalization::default())
}

/// `||x_j(phi + d_k e_k) - x_j(phi - d_k e_k)||^2` from two forward runs at
/// station `j` alone.
pub fn site_parameter_sensitivity(
    forward: &dyn ForwardModel,
    scenario: &Scenario,
    grid: &FrequencyGrid,
    filter: Option<BandpassSpec>,
    pspec: &PerturbationSpec,
    station: usize,
    parameter: usize,
) -> Result<f64> {
    if parameter >= PARAM_COUNT {
        return Err(Error::Argument(format!("parameter index {parameter} out of range")));
    }
    let one = scenario.stations.subset(&[station])?;
    let phi0 = scenario.parameters()?;
    let step = pspec.step_sizes(&phi0)?[parameter];
    let run = |delta: f64| -> Result<Vec<f64>> {
        let mut phi = phi0;
        phi[parameter] += delta;
        let s = scenario.with_parameters(&phi)?;
        let w = forward.simulate(&s.layer_model(), &s.source, &one, grid)?;
        Ok(match filter {
            Some(f) => f.apply(&w)?.flatten(),
            None => w.flatten(),
        })
    };
    let p = run(step)?;
    let m = run(-step)?;
    Ok(p.iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Per-parameter sum over sites.
pub fn summed_sensitivity(values: &[[f64; PARAM_COUNT]]) -> [f64; PARAM_COUNT] {
    let mut out = [0.0; PARAM_COUNT];
    for row in values {
        for k in 0..PARAM_COUNT {
            out[k] += row[k];
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySidecar {
    pub parameters: Vec<String>,
    pub initial: [f64; PARAM_COUNT],
    pub steps: [f64; PARAM_COUNT],
    pub scales: [f64; PARAM_COUNT],
    pub normalization: Normalization,
    pub grid: FrequencyGrid,
    pub band: Option<BandpassSpec>,
    pub model_tag: String,
    pub stations: Vec<String>,
}

pub const MAP_HEADER: [&str; 5] = ["site_id", "ns", "ew", "parameter", "S_value"];

/// One row per (site, parameter): `site_id,ns,ew,parameter,S_value`.
pub fn export_sensitivity_maps<W: Write>(
    values: &[[f64; PARAM_COUNT]],
    stations: &[Station],
    preamble: Option<&str>,
    mut out: W,
) -> Result<()> {
    if values.len() != stations.len() {
        return Err(Error::Shape(format!(
            "{} sensitivity rows for {} stations",
            values.len(),
            stations.len()
        )));
    }
    if let Some(p) = preamble {
        for line in p.lines() {
            writeln!(out, "# {line}").map_err(|e| Error::io("<csv>", e))?;
        }
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(MAP_HEADER)?;
    for (row, st) in values.iter().zip(stations) {
        for (k, v) in row.iter().enumerate() {
            w.write_record([
                st.id.as_str(),
                &format!("{}", st.ns),
                &format!("{}", st.ew),
                PARAMETER_NAMES[k],
                &format!("{v:e}"),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityRecord {
    pub site_id: String,
    pub ns: f64,
    pub ew: f64,
    pub parameter: String,
    pub value: f64,
}

pub fn read_sensitivity_maps<R: Read>(input: R) -> Result<Vec<SensitivityRecord>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(MAP_HEADER.iter().copied()) {
        return Err(Error::Format(format!("unexpected sensitivity header {header:?}")));
    }
    let num = |s: &str| -> Result<f64> {
        s.parse().map_err(|e| Error::Format(format!("bad number {s:?}: {e}")))
    };
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(SensitivityRecord {
                site_id: rec[0].to_string(),
                ns: num(&rec[1])?,
                ew: num(&rec[2])?,
                parameter: rec[3].to_string(),
                value: num(&rec[4])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::LinearModel;
    use crate::model::Scenario;

    fn small_setup() -> (Scenario, FrequencyGrid) {
        let mut s = Scenario::hypocenter1();
        s.stations = s.stations.subset(&[0, 5, 11, 17]).unwrap();
        (s, FrequencyGrid::new(9, 2.0).unwrap())
    }

    fn linear(s: &Scenario, grid: FrequencyGrid, dead_column: Option<usize>) -> LinearModel {
        LinearModel::from_fn(grid, &s.stations, |j, r, c| {
            if Some(c) == dead_column {
                0.0
            } else {
                ((j * 31 + r * 7 + c * 13) % 17) as f64 - 8.0
            }
        })
    }

    #[test]
    fn linear_model_columns_are_exact() {
        let (s, grid) = small_setup();
        let model = linear(&s, grid, None);
        let phi0 = s.parameters().unwrap();
        for pspec in [PerturbationSpec::default(), PerturbationSpec::uniform(0.37, 2.0)] {
            let d = build_sensitivity(&model, &s, &grid, None, &pspec).unwrap();
            for (j, st) in s.stations.iter().enumerate() {
                let a = model.block(&st.id).unwrap();
                let blk = d.block(j);
                for k in 0..PARAM_COUNT {
                    for r in 0..blk.nrows() {
                        let expect = phi0[k] * a[(r, k)];
                        assert!(
                            (blk[(r, k)] - expect).abs() <= 1e-9 * expect.abs().max(1.0),
                            "{j} {r} {k}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn ignored_parameter_gives_zero_column() {
        let (s, grid) = small_setup();
        let model = linear(&s, grid, Some(4));
        let d = build_sensitivity(&model, &s, &grid, None, &PerturbationSpec::default()).unwrap();
        assert!(d.normalized.column(4).iter().all(|&x| x == 0.0));
        let sens = d.site_sensitivities();
        assert!(sens.iter().all(|row| row[4] == 0.0));
        let direct = site_parameter_sensitivity(
            &model, &s, &grid, None, &PerturbationSpec::default(), 2, 4,
        )
        .unwrap();
        assert_eq!(direct, 0.0);
    }

    #[test]
    fn raw_jacobian_times_scale_is_normalized() {
        let (s, grid) = small_setup();
        let model = crate::forward::ReferenceModel::default();
        let d = build_sensitivity(&model, &s, &grid, Some(BandpassSpec::default()), &PerturbationSpec::default())
            .unwrap();
        let raw = d.raw_jacobian();
        for k in 0..PARAM_COUNT {
            for r in 0..raw.nrows() {
                let back = raw[(r, k)] * d.scales[k];
                assert!((back - d.normalized[(r, k)]).abs() <= 1e-15 * d.normalized[(r, k)].abs());
            }
        }
        assert_eq!(d.normalized.nrows(), 6 * 9 * 4);
        let sub = d.raw_rows(&[2, 0]);
        assert_eq!(sub.rows(0, 54), raw.rows(2 * 54, 54));
        assert_eq!(sub.rows(54, 54), raw.rows(0, 54));
    }

    #[test]
    fn site_sensitivity_matches_matrix_and_scales_quadratically() {
        let (s, grid) = small_setup();
        let model = crate::forward::ReferenceModel::default();
        let band = Some(BandpassSpec::default());
        let pspec = PerturbationSpec::default();
        let d = build_sensitivity(&model, &s, &grid, band, &pspec).unwrap();
        let table = d.site_sensitivities();
        for j in 0..4 {
            for k in 0..PARAM_COUNT {
                let direct = site_parameter_sensitivity(&model, &s, &grid, band, &pspec, j, k).unwrap();
                assert!((direct - table[j][k]).abs() <= 1e-10 * direct.max(1e-300), "{j} {k}");
            }
        }
        let lin = linear(&s, grid, None);
        let a = site_parameter_sensitivity(&lin, &s, &grid, None, &pspec, 1, 7).unwrap();
        let b = site_parameter_sensitivity(&lin, &s, &grid, None, &pspec.scaled(2.0), 1, 7).unwrap();
        assert!((b / a - 4.0).abs() < 1e-12);
    }

    #[test]
    fn filtering_is_diagonal_in_frequency() {
        let (s, grid) = small_setup();
        let model = crate::forward::ReferenceModel::default();
        let band = BandpassSpec::new(0.1, 0.8).unwrap();
        let runs = SensitivityRuns::compute(&model, &s, &grid, &PerturbationSpec::default()).unwrap();
        let filtered = runs.matrix(Some(band), Normalization::default()).unwrap();
        let unfiltered = runs.matrix(None, Normalization::default()).unwrap();
        let h: Vec<_> = grid.frequencies().into_iter().map(|f| band.response(f)).collect();
        for k in 0..PARAM_COUNT {
            let col = unfiltered.normalized.column(k).iter().copied().collect::<Vec<_>>();
            let w = WavefieldSpectra::from_flat(grid, unfiltered.station_ids.clone(), &col).unwrap();
            let expect = w.map(|_, i, z| z * h[i]).flatten();
            let scale = expect.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            for (r, e) in expect.iter().enumerate() {
                let got = filtered.normalized[(r, k)];
                assert!((got - e).abs() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn location_scale_normalization() {
        let (s, grid) = small_setup();
        let runs = SensitivityRuns::compute(
            &crate::forward::ReferenceModel::default(),
            &s,
            &grid,
            &PerturbationSpec::default(),
        )
        .unwrap();
        let lit = runs.matrix(None, Normalization::InitialValue).unwrap();
        let fixed = runs.matrix(None, Normalization::LocationScale(5.0)).unwrap();
        assert_eq!(lit.normalized.column(0), fixed.normalized.column(0));
        let ratio = fixed.normalized[(10, 9)] / lit.normalized[(10, 9)];
        assert!((ratio - 5.0 / 117.9655).abs() < 1e-12);
    }

    #[test]
    fn map_export_roundtrip() {
        let (s, grid) = small_setup();
        let d = build_sensitivity(
            &crate::forward::ReferenceModel::default(),
            &s,
            &grid,
            Some(BandpassSpec::default()),
            &PerturbationSpec::default(),
        )
        .unwrap();
        let values = d.site_sensitivities();
        let two = &values[..2];
        let mut buf = Vec::new();
        export_sensitivity_maps(two, &s.stations.as_slice()[..2], Some("hdr"), &mut buf).unwrap();
        let back = read_sensitivity_maps(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 24);
        for (i, rec) in back.iter().enumerate() {
            assert_eq!(rec.value.to_bits(), two[i / 12][i % 12].to_bits());
            assert_eq!(rec.parameter, PARAMETER_NAMES[i % 12]);
        }

        let mut empty = Vec::new();
        export_sensitivity_maps(&[], &[], None, &mut empty).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap(), "site_id,ns,ew,parameter,S_value\n");
    }
}

//! Scenario types: layered subsurface, point source, station network and the
//! twelve estimable parameters.
//!
//! Units are km, km/s, g/cm^3, degrees and metres of slip throughout.

use std::collections::HashSet;
use std::fmt;
use std::ops::{Index, IndexMut};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

/// Number of estimable parameters.
pub const PARAM_COUNT: usize = 12;

/// Number of stacked layers the estimable parameter set assumes.
pub const STACKED_LAYERS: usize = 3;

/// Canonical column order of every matrix indexed by parameter.
pub const PARAMETER_NAMES: [&str; PARAM_COUNT] = [
    "V_P1", "V_P2", "V_P3", "V_S1", "V_S2", "V_S3", "h_1", "h_2", "h_3", "S_NS", "S_EW", "S_UD",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Vp(usize),
    Vs(usize),
    Thickness(usize),
    SourceNs,
    SourceEw,
    SourceUd,
}

impl ParamKind {
    pub const ALL: [ParamKind; PARAM_COUNT] = [
        ParamKind::Vp(0),
        ParamKind::Vp(1),
        ParamKind::Vp(2),
        ParamKind::Vs(0),
        ParamKind::Vs(1),
        ParamKind::Vs(2),
        ParamKind::Thickness(0),
        ParamKind::Thickness(1),
        ParamKind::Thickness(2),
        ParamKind::SourceNs,
        ParamKind::SourceEw,
        ParamKind::SourceUd,
    ];

    pub fn column(self) -> usize {
        match self {
            ParamKind::Vp(m) => m,
            ParamKind::Vs(m) => 3 + m,
            ParamKind::Thickness(m) => 6 + m,
            ParamKind::SourceNs => 9,
            ParamKind::SourceEw => 10,
            ParamKind::SourceUd => 11,
        }
    }

    pub fn from_column(k: usize) -> ParamKind {
        ParamKind::ALL[k]
    }

    pub fn name(self) -> &'static str {
        PARAMETER_NAMES[self.column()]
    }

    /// Velocities and thicknesses. Source coordinates are not.
    pub fn is_structure(self) -> bool {
        !self.is_location()
    }

    pub fn is_location(self) -> bool {
        matches!(
            self,
            ParamKind::SourceNs | ParamKind::SourceEw | ParamKind::SourceUd
        )
    }
}

/// Direction of a finite-difference step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Plus,
    Minus,
}

impl fmt::Display for Sign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sign::Plus => f.write_str("+"),
            Sign::Minus => f.write_str("-"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub rho: f64,
    pub vp: f64,
    pub vs: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HalfSpace {
    pub rho: f64,
    pub vp: f64,
    pub vs: f64,
}

/// Stacked layers over a terminating half-space, listed top-down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerModel {
    pub layers: Vec<Layer>,
    pub half_space: HalfSpace,
}

fn check_medium(what: &str, rho: f64, vp: f64, vs: f64) -> Result<()> {
    let ok = rho.is_finite()
        && vp.is_finite()
        && vs.is_finite()
        && rho > 0.0
        && vs > 0.0
        && vp > vs;
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "{what}: need rho > 0 and vp > vs > 0, got rho={rho}, vp={vp}, vs={vs}"
        )))
    }
}

impl LayerModel {
    pub fn new(layers: Vec<Layer>, half_space: HalfSpace) -> Result<Self> {
        let model = LayerModel { layers, half_space };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        for (m, l) in self.layers.iter().enumerate() {
            check_medium(&format!("layer {}", m + 1), l.rho, l.vp, l.vs)?;
            if !(l.h.is_finite() && l.h > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "layer {}: thickness must be positive and finite, got {}",
                    m + 1,
                    l.h
                )));
            }
        }
        check_medium(
            "half-space",
            self.half_space.rho,
            self.half_space.vp,
            self.half_space.vs,
        )
    }

    pub fn total_thickness(&self) -> f64 {
        self.layers.iter().map(|l| l.h).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Location {
    pub ns: f64,
    pub ew: f64,
    /// Depth, positive down.
    pub ud: f64,
}

/// Double-couple point source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceModel {
    pub location: Location,
    pub strike: f64,
    pub rake: f64,
    pub dip: f64,
    pub slip: f64,
}

impl SourceModel {
    pub fn validate(&self, layers: &LayerModel) -> Result<()> {
        let loc = self.location;
        if !(loc.ns.is_finite() && loc.ew.is_finite() && loc.ud.is_finite()) {
            return Err(Error::InvalidParameter("source location must be finite".into()));
        }
        let top = layers.total_thickness();
        if loc.ud <= top {
            return Err(Error::InvalidParameter(format!(
                "source depth {} km must lie below the layer stack ({} km)",
                loc.ud, top
            )));
        }
        if !(0.0..=90.0).contains(&self.dip) {
            return Err(Error::InvalidParameter(format!("dip {} outside [0, 90]", self.dip)));
        }
        if !(0.0..360.0).contains(&self.strike) {
            return Err(Error::InvalidParameter(format!(
                "strike {} outside [0, 360)",
                self.strike
            )));
        }
        if !(-180.0..=180.0).contains(&self.rake) {
            return Err(Error::InvalidParameter(format!(
                "rake {} outside [-180, 180]",
                self.rake
            )));
        }
        if !(self.slip.is_finite() && self.slip > 0.0) {
            return Err(Error::InvalidParameter(format!("slip {} must be positive", self.slip)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Station {
    pub id: String,
    pub ns: f64,
    pub ew: f64,
}

/// Surface stations. Their order is the row-block order of every stacked
/// matrix and vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StationSet {
    stations: Vec<Station>,
}

impl StationSet {
    pub fn new(stations: Vec<Station>) -> Result<Self> {
        if stations.is_empty() {
            return Err(Error::ScenarioShape("station set is empty".into()));
        }
        let mut seen = HashSet::new();
        for s in &stations {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::ScenarioShape(format!("duplicate station id {:?}", s.id)));
            }
            if !(s.ns.is_finite() && s.ew.is_finite()) {
                return Err(Error::ScenarioShape(format!(
                    "station {:?} has non-finite coordinates",
                    s.id
                )));
            }
        }
        Ok(StationSet { stations })
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    pub fn as_slice(&self) -> &[Station] {
        &self.stations
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Station> {
        self.stations.iter()
    }

    pub fn get(&self, j: usize) -> Option<&Station> {
        self.stations.get(j)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.stations.iter().position(|s| s.id == id)
    }

    /// Stations at the given indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<StationSet> {
        let picked = indices
            .iter()
            .map(|&j| {
                self.stations
                    .get(j)
                    .cloned()
                    .ok_or_else(|| Error::Argument(format!("station index {j} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        StationSet::new(picked)
    }

    /// Fifty stations on a Fermat spiral of radius 30 km centred at
    /// (70, -25) km; coordinates rounded to 0.1 m.
    pub fn default_network() -> StationSet {
        const N: usize = 50;
        const RADIUS: f64 = 30.0;
        const CENTER: (f64, f64) = (70.0, -25.0);
        let golden_angle = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let round = |x: f64| (x * 1e4).round() / 1e4;
        let stations = (0..N)
            .map(|k| {
                let r = RADIUS * ((k as f64 + 0.5) / N as f64).sqrt();
                let theta = k as f64 * golden_angle;
                Station {
                    id: format!("S{:02}", k + 1),
                    ns: round(CENTER.0 + r * theta.cos()),
                    ew: round(CENTER.1 + r * theta.sin()),
                }
            })
            .collect();
        StationSet { stations }
    }
}

/// A full physical scenario as read from a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub layers: Vec<Layer>,
    pub half_space: HalfSpace,
    pub source: SourceModel,
    pub stations: StationSet,
}

impl Scenario {
    pub fn layer_model(&self) -> LayerModel {
        LayerModel {
            layers: self.layers.clone(),
            half_space: self.half_space,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.layer_model();
        model.validate()?;
        self.source.validate(&model)?;
        StationSet::new(self.stations.as_slice().to_vec())?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Scenario> {
        let s: Scenario =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("scenario: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Scenario::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Three layers on a half-space under the Kanto-basin-like values.
    pub fn kanto_layers() -> LayerModel {
        LayerModel {
            layers: vec![
                Layer { rho: 1.95, vp: 1.8, vs: 0.5, h: 0.4 },
                Layer { rho: 2.15, vp: 2.4, vs: 1.0, h: 1.1 },
                Layer { rho: 2.3, vp: 3.2, vs: 1.7, h: 1.0 },
            ],
            half_space: HalfSpace { rho: 2.7, vp: 5.8, vs: 3.4 },
        }
    }

    /// Distant source (southern Ibaraki analogue).
    pub fn hypocenter1() -> Scenario {
        let l = Scenario::kanto_layers();
        Scenario {
            layers: l.layers,
            half_space: l.half_space,
            source: SourceModel {
                location: Location { ns: 117.9655, ew: -4.2204, ud: 47.0 },
                strike: 254.0,
                rake: 118.0,
                dip: 28.0,
                slip: 0.4,
            },
            stations: StationSet::default_network(),
        }
    }

    /// Source directly beneath the network (central Tokyo analogue).
    pub fn hypocenter2() -> Scenario {
        let l = Scenario::kanto_layers();
        Scenario {
            layers: l.layers,
            half_space: l.half_space,
            source: SourceModel {
                location: Location { ns: 71.4339, ew: -22.5905, ud: 26.0 },
                strike: 126.0,
                rake: 103.0,
                dip: 80.0,
                slip: 0.05,
            },
            stations: StationSet::default_network(),
        }
    }

    pub fn with_parameters(&self, v: &ParameterVector) -> Result<Scenario> {
        let (layers, source) = apply_parameters(v, &self.layer_model(), &self.source)?;
        Ok(Scenario {
            layers: layers.layers,
            half_space: layers.half_space,
            source,
            stations: self.stations.clone(),
        })
    }

    pub fn parameters(&self) -> Result<ParameterVector> {
        pack_parameters(&self.layer_model(), &self.source)
    }
}

/// The twelve estimable entries in canonical order (see [`PARAMETER_NAMES`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(pub [f64; PARAM_COUNT]);

impl ParameterVector {
    pub fn as_array(&self) -> &[f64; PARAM_COUNT] {
        &self.0
    }

    pub fn get(&self, kind: ParamKind) -> f64 {
        self.0[kind.column()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamKind, f64)> + '_ {
        ParamKind::ALL.iter().map(move |&k| (k, self.get(k)))
    }

    pub fn with(mut self, kind: ParamKind, value: f64) -> Self {
        self.0[kind.column()] = value;
        self
    }

    /// Positive, finite velocities and thicknesses; finite source coordinates.
    pub fn check_positive(&self) -> Result<()> {
        for (kind, value) in self.iter() {
            if !value.is_finite() {
                return Err(Error::InvalidParameter(format!("{} is not finite", kind.name())));
            }
            if kind.is_structure() && value <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "{} must be positive, got {value}",
                    kind.name()
                )));
            }
        }
        Ok(())
    }
}

impl Index<usize> for ParameterVector {
    type Output = f64;
    fn index(&self, k: usize) -> &f64 {
        &self.0[k]
    }
}

impl IndexMut<usize> for ParameterVector {
    fn index_mut(&mut self, k: usize) -> &mut f64 {
        &mut self.0[k]
    }
}

pub fn pack_parameters(layers: &LayerModel, source: &SourceModel) -> Result<ParameterVector> {
    if layers.layers.len() != STACKED_LAYERS {
        return Err(Error::ScenarioShape(format!(
            "expected {STACKED_LAYERS} stacked layers, found {}",
            layers.layers.len()
        )));
    }
    layers.validate()?;
    let mut v = [0.0; PARAM_COUNT];
    for (m, l) in layers.layers.iter().enumerate() {
        v[ParamKind::Vp(m).column()] = l.vp;
        v[ParamKind::Vs(m).column()] = l.vs;
        v[ParamKind::Thickness(m).column()] = l.h;
    }
    v[9] = source.location.ns;
    v[10] = source.location.ew;
    v[11] = source.location.ud;
    Ok(ParameterVector(v))
}

/// Replace the estimable entries of `base` by `v`. Density and the focal
/// mechanism are carried over unchanged.
pub fn apply_parameters(
    v: &ParameterVector,
    layers: &LayerModel,
    source: &SourceModel,
) -> Result<(LayerModel, SourceModel)> {
    if layers.layers.len() != STACKED_LAYERS {
        return Err(Error::ScenarioShape(format!(
            "expected {STACKED_LAYERS} stacked layers, found {}",
            layers.layers.len()
        )));
    }
    v.check_positive()?;
    let mut out_layers = layers.clone();
    for (m, l) in out_layers.layers.iter_mut().enumerate() {
        l.vp = v.get(ParamKind::Vp(m));
        l.vs = v.get(ParamKind::Vs(m));
        l.h = v.get(ParamKind::Thickness(m));
    }
    let mut out_source = *source;
    out_source.location = Location {
        ns: v.get(ParamKind::SourceNs),
        ew: v.get(ParamKind::SourceEw),
        ud: v.get(ParamKind::SourceUd),
    };
    out_layers.validate()?;
    out_source.validate(&out_layers)?;
    Ok((out_layers, out_source))
}

/// Half-step rule for one parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    /// Fraction of the parameter's base value.
    Relative(f64),
    /// Absolute size in the parameter's own unit.
    Absolute(f64),
}

impl Step {
    pub fn size(self, base: f64) -> f64 {
        match self {
            Step::Relative(f) => f * base.abs(),
            Step::Absolute(a) => a,
        }
    }
}

/// Per-parameter finite-difference half steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub steps: [Step; PARAM_COUNT],
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        PerturbationSpec::uniform(0.10, 0.5)
    }
}

impl PerturbationSpec {
    /// `structure_fraction` of the base value for velocities and thicknesses,
    /// `location_km` for the source coordinates.
    pub fn uniform(structure_fraction: f64, location_km: f64) -> Self {
        let mut steps = [Step::Relative(structure_fraction); PARAM_COUNT];
        for k in [9, 10, 11] {
            steps[k] = Step::Absolute(location_km);
        }
        PerturbationSpec { steps }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut steps = self.steps;
        for s in steps.iter_mut() {
            *s = match *s {
                Step::Relative(f) => Step::Relative(f * factor),
                Step::Absolute(a) => Step::Absolute(a * factor),
            };
        }
        PerturbationSpec { steps }
    }

    pub fn step_sizes(&self, base: &ParameterVector) -> Result<[f64; PARAM_COUNT]> {
        let mut out = [0.0; PARAM_COUNT];
        for k in 0..PARAM_COUNT {
            out[k] = self.steps[k].size(base[k]);
            if !(out[k].is_finite() && out[k] > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "step for {} must be positive, got {}",
                    PARAMETER_NAMES[k], out[k]
                )));
            }
        }
        Ok(out)
    }
}

/// Scales of the random offset between initial and true parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthPerturbation {
    /// Standard deviation of velocity/thickness offsets as a fraction of the
    /// base value.
    pub structure_fraction: f64,
    /// Standard deviation of source-coordinate offsets in km.
    pub location_km: f64,
}

impl Default for TruthPerturbation {
    fn default() -> Self {
        TruthPerturbation { structure_fraction: 0.10, location_km: 5.0 }
    }
}

pub const TRUTH_STREAM_TAG: &str = "truth";
const MAX_RESAMPLES: u64 = 100;

/// Draw a "true" parameter vector around `base`.
///
/// Entry `k` uses stream `(seed, "truth", k)`; attempt `a` takes that
/// stream's `a`-th normal. An attempt is rejected when the entry would break
/// positivity, put a layer's vs at or above its already-accepted vp, or put
/// the source at or above the already-accepted layer stack.
pub fn perturb_true_parameters(
    base: &ParameterVector,
    scales: TruthPerturbation,
    seed: u64,
) -> Result<ParameterVector> {
    base.check_positive()?;
    let mut out = *base;
    for kind in ParamKind::ALL {
        let k = kind.column();
        let stream = Stream::new(seed, TRUTH_STREAM_TAG, k as u64);
        let sigma = if kind.is_location() {
            scales.location_km
        } else {
            scales.structure_fraction * base[k]
        };
        let mut accepted = None;
        for attempt in 0..MAX_RESAMPLES {
            let candidate = base[k] + stream.normal(attempt) * sigma;
            let ok = match kind {
                ParamKind::Vp(_) | ParamKind::Thickness(_) => candidate > 0.0,
                ParamKind::Vs(m) => candidate > 0.0 && candidate < out[ParamKind::Vp(m).column()],
                ParamKind::SourceUd => candidate > out[6] + out[7] + out[8],
                ParamKind::SourceNs | ParamKind::SourceEw => true,
            };
            if ok {
                accepted = Some(candidate);
                break;
            }
        }
        out[k] = accepted.ok_or_else(|| {
            Error::DegenerateScenario(format!(
                "{} rejected {MAX_RESAMPLES} consecutive draws",
                kind.name()
            ))
        })?;
    }
    Ok(out)
}

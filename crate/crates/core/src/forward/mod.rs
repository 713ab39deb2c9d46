//! Frequency-domain three-component ground-motion spectra.
//!
//! Downstream code only sees the [`ForwardModel`] trait; [`ReferenceModel`]
//! is the bundled layered-earth implementation.

mod filter;
pub mod io;
mod reference;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerModel, SourceModel, StationSet};
use crate::rng::{fnv1a64, Stream};

pub use filter::{BandpassSpec, FILTER_ORDER};
pub use reference::{site_transfer_function, Phase, ReferenceModel, SiteComponent};

/// Real entries per frequency sample at one station.
pub const ENTRIES_PER_FREQUENCY: usize = 6;

pub const NOISE_STREAM_TAG: &str = "noise";

/// Evenly spaced samples from DC to `f_max` inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrequencyGrid {
    pub count: usize,
    pub f_max: f64,
}

impl Default for FrequencyGrid {
    fn default() -> Self {
        FrequencyGrid { count: 205, f_max: 5.0 }
    }
}

impl FrequencyGrid {
    pub fn new(count: usize, f_max: f64) -> Result<Self> {
        let g = FrequencyGrid { count, f_max };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.count < 2 || !(self.f_max.is_finite() && self.f_max > 0.0) {
            return Err(Error::Argument(format!(
                "frequency grid needs count >= 2 and f_max > 0, got {} and {}",
                self.count, self.f_max
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn frequency(&self, k: usize) -> f64 {
        if k + 1 == self.count {
            self.f_max
        } else {
            self.f_max * k as f64 / (self.count - 1) as f64
        }
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.count).map(|k| self.frequency(k)).collect()
    }

    /// Flattened length at one station (`s`).
    pub fn entries_per_station(&self) -> usize {
        ENTRIES_PER_FREQUENCY * self.count
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    NS,
    EW,
    UD,
}

impl Direction {
    pub const ALL: [Direction; 3] = [Direction::NS, Direction::EW, Direction::UD];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::NS => "NS",
            Direction::EW => "EW",
            Direction::UD => "UD",
        }
    }

    pub fn parse(s: &str) -> Option<Direction> {
        match s {
            "NS" => Some(Direction::NS),
            "EW" => Some(Direction::EW),
            "UD" => Some(Direction::UD),
            _ => None,
        }
    }
}

/// Complex spectra of the NS, EW and UD components at one station.
#[derive(Debug, Clone, PartialEq)]
pub struct StationSpectrum {
    pub components: [Vec<Complex64>; 3],
}

impl StationSpectrum {
    pub fn zeros(count: usize) -> Self {
        let z = vec![Complex64::new(0.0, 0.0); count];
        StationSpectrum { components: [z.clone(), z.clone(), z] }
    }

    pub fn len(&self) -> usize {
        self.components[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn component(&self, d: Direction) -> &[Complex64] {
        &self.components[d.index()]
    }

    /// `[Re NS, Im NS, Re EW, Im EW, Re UD, Im UD]` per frequency, frequency-major.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for k in 0..self.len() {
            for c in &self.components {
                out.push(c[k].re);
                out.push(c[k].im);
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(ENTRIES_PER_FREQUENCY * self.len());
        self.flatten_into(&mut out);
        out
    }

    pub fn unflatten(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(ENTRIES_PER_FREQUENCY) {
            return Err(Error::Shape(format!(
                "flattened station spectrum length {} is not a multiple of {ENTRIES_PER_FREQUENCY}",
                flat.len()
            )));
        }
        let count = flat.len() / ENTRIES_PER_FREQUENCY;
        let mut s = StationSpectrum::zeros(count);
        for (k, chunk) in flat.chunks_exact(ENTRIES_PER_FREQUENCY).enumerate() {
            for c in 0..3 {
                s.components[c][k] = Complex64::new(chunk[2 * c], chunk[2 * c + 1]);
            }
        }
        Ok(s)
    }
}

/// Spectra at every station of a network, in network order.
#[derive(Debug, Clone, PartialEq)]
pub struct WavefieldSpectra {
    pub grid: FrequencyGrid,
    pub station_ids: Vec<String>,
    pub stations: Vec<StationSpectrum>,
}

impl WavefieldSpectra {
    pub fn new(
        grid: FrequencyGrid,
        station_ids: Vec<String>,
        stations: Vec<StationSpectrum>,
    ) -> Result<Self> {
        if station_ids.len() != stations.len() {
            return Err(Error::Shape(format!(
                "{} station ids for {} spectra",
                station_ids.len(),
                stations.len()
            )));
        }
        if let Some(bad) = stations.iter().find(|s| s.len() != grid.count) {
            return Err(Error::Shape(format!(
                "station spectrum of length {} on a grid of {}",
                bad.len(),
                grid.count
            )));
        }
        Ok(WavefieldSpectra { grid, station_ids, stations })
    }

    pub fn zeros(grid: FrequencyGrid, stations: &StationSet) -> Self {
        WavefieldSpectra {
            grid,
            station_ids: stations.iter().map(|s| s.id.clone()).collect(),
            stations: vec![StationSpectrum::zeros(grid.count); stations.len()],
        }
    }

    pub fn station_count(&self) -> usize {
        self.stations.len()
    }

    pub fn flat_len(&self) -> usize {
        self.grid.entries_per_station() * self.stations.len()
    }

    /// Stacked flattened vector, station-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for s in &self.stations {
            s.flatten_into(&mut out);
        }
        out
    }

    pub fn from_flat(grid: FrequencyGrid, station_ids: Vec<String>, flat: &[f64]) -> Result<Self> {
        let per = grid.entries_per_station();
        if flat.len() != per * station_ids.len() {
            return Err(Error::Shape(format!(
                "flat vector of length {} for {} stations of {per} entries",
                flat.len(),
                station_ids.len()
            )));
        }
        let stations = flat
            .chunks_exact(per)
            .map(StationSpectrum::unflatten)
            .collect::<Result<Vec<_>>>()?;
        WavefieldSpectra::new(grid, station_ids, stations)
    }

    /// Spectra at the given station indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut ids = Vec::with_capacity(indices.len());
        let mut st = Vec::with_capacity(indices.len());
        for &j in indices {
            let s = self
                .stations
                .get(j)
                .ok_or_else(|| Error::Argument(format!("station index {j} out of range")))?;
            ids.push(self.station_ids[j].clone());
            st.push(s.clone());
        }
        Ok(WavefieldSpectra { grid: self.grid, station_ids: ids, stations: st })
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|_, _, z| z * factor)
    }

    /// Apply `f(direction, frequency index, value)` to every sample.
    pub fn map(&self, f: impl Fn(Direction, usize, Complex64) -> Complex64) -> Self {
        let stations = self
            .stations
            .iter()
            .map(|s| {
                let mut out = s.clone();
                for d in Direction::ALL {
                    for (k, z) in out.components[d.index()].iter_mut().enumerate() {
                        *z = f(d, k, *z);
                    }
                }
                out
            })
            .collect();
        WavefieldSpectra { grid: self.grid, station_ids: self.station_ids.clone(), stations }
    }

    pub fn same_layout(&self, other: &WavefieldSpectra) -> bool {
        self.grid == other.grid && self.station_ids == other.station_ids
    }

    pub fn is_finite(&self) -> bool {
        self.stations.iter().all(|s| {
            s.components
                .iter()
                .all(|c| c.iter().all(|z| z.re.is_finite() && z.im.is_finite()))
        })
    }
}

/// Anything that maps a scenario to station spectra.
pub trait ForwardModel: Send + Sync {
    /// Short label recorded in artifacts.
    fn tag(&self) -> String;

    fn simulate(
        &self,
        layers: &LayerModel,
        source: &SourceModel,
        stations: &StationSet,
        grid: &FrequencyGrid,
    ) -> Result<WavefieldSpectra>;
}

/// Sum of squared real and imaginary parts of one direction, per station.
pub fn energy_map(spectra: &WavefieldSpectra, direction: Direction) -> Vec<f64> {
    spectra
        .stations
        .iter()
        .map(|s| s.component(direction).iter().map(|z| z.norm_sqr()).sum())
        .collect()
}

/// Add independent N(0, variance) draws to every real entry.
///
/// Station `id` draws from stream `(seed, "noise", fnv1a64(id))`, entry `m`
/// of its flattened vector takes that stream's `m`-th normal. A station
/// therefore gets the same noise whichever network it is part of.
pub fn add_noise(spectra: &WavefieldSpectra, variance: f64, seed: u64) -> Result<WavefieldSpectra> {
    if !(variance >= 0.0 && variance.is_finite()) {
        return Err(Error::Argument(format!("noise variance must be >= 0, got {variance}")));
    }
    if variance == 0.0 {
        return Ok(spectra.clone());
    }
    let sigma = variance.sqrt();
    let stations = spectra
        .stations
        .iter()
        .zip(&spectra.station_ids)
        .map(|(s, id)| {
            let stream = Stream::new(seed, NOISE_STREAM_TAG, fnv1a64(id.as_bytes()));
            let noisy: Vec<f64> = s
                .flatten()
                .into_iter()
                .enumerate()
                .map(|(m, x)| x + sigma * stream.normal(m as u64))
                .collect();
            StationSpectrum::unflatten(&noisy)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WavefieldSpectra {
        grid: spectra.grid,
        station_ids: spectra.station_ids.clone(),
        stations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WaveKind {
    P,
    S,
}

/// Change in vertical transit time through one layer when its velocity moves
/// by `±delta`, to first order: `h * 2 delta / v^2`, in seconds.
///
/// `layer_index` is 1-based.
pub fn arrival_time_difference(
    layers: &LayerModel,
    layer_index: usize,
    kind: WaveKind,
    delta: f64,
) -> Result<f64> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Argument(format!("velocity step must be positive, got {delta}")));
    }
    let layer = layer_index
        .checked_sub(1)
        .and_then(|m| layers.layers.get(m))
        .ok_or_else(|| Error::Argument(format!("no layer {layer_index}")))?;
    let v = match kind {
        WaveKind::P => layer.vp,
        WaveKind::S => layer.vs,
    };
    Ok(layer.h * 2.0 * delta / (v * v))
}

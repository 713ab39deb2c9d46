//! Forward models with known closed-form behaviour, for checking the
//! sensitivity, selection and estimation stages.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::forward::{ForwardModel, FrequencyGrid, WavefieldSpectra};
use crate::model::{pack_parameters, LayerModel, SourceModel, StationSet, PARAM_COUNT};

/// `x_j(phi) = A_j phi` for every station `j`.
///
/// `blocks` holds one `(6 * count) x 12` matrix per station id.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub grid: FrequencyGrid,
    pub blocks: Vec<(String, DMatrix<f64>)>,
}

impl LinearModel {
    pub fn new(grid: FrequencyGrid, blocks: Vec<(String, DMatrix<f64>)>) -> Result<Self> {
        let rows = grid.entries_per_station();
        for (id, b) in &blocks {
            if b.nrows() != rows || b.ncols() != PARAM_COUNT {
                return Err(Error::Shape(format!(
                    "block for {id} is {}x{}, expected {rows}x{PARAM_COUNT}",
                    b.nrows(),
                    b.ncols()
                )));
            }
        }
        Ok(LinearModel { grid, blocks })
    }

    /// Blocks with entries from `f(station, row, column)`.
    pub fn from_fn(
        grid: FrequencyGrid,
        stations: &StationSet,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Self {
        let rows = grid.entries_per_station();
        let blocks = stations
            .iter()
            .enumerate()
            .map(|(j, s)| (s.id.clone(), DMatrix::from_fn(rows, PARAM_COUNT, |r, c| f(j, r, c))))
            .collect();
        LinearModel { grid, blocks }
    }

    pub fn block(&self, id: &str) -> Option<&DMatrix<f64>> {
        self.blocks.iter().find(|(b, _)| b == id).map(|(_, m)| m)
    }
}

impl ForwardModel for LinearModel {
    fn tag(&self) -> String {
        "linear-harness".into()
    }

    fn simulate(
        &self,
        layers: &LayerModel,
        source: &SourceModel,
        stations: &StationSet,
        grid: &FrequencyGrid,
    ) -> Result<WavefieldSpectra> {
        if *grid != self.grid {
            return Err(Error::Argument("linear harness evaluated on a foreign grid".into()));
        }
        let phi = DVector::from_row_slice(pack_parameters(layers, source)?.as_array());
        let mut flat = Vec::with_capacity(grid.entries_per_station() * stations.len());
        for s in stations.iter() {
            let a = self
                .block(&s.id)
                .ok_or_else(|| Error::Argument(format!("no harness block for station {}", s.id)))?;
            flat.extend((a * &phi).iter());
        }
        WavefieldSpectra::from_flat(*grid, stations.iter().map(|s| s.id.clone()).collect(), &flat)
    }
}

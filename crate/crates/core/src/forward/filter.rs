use std::f64::consts::SQRT_2;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::WavefieldSpectra;
use crate::error::{Error, Result};

pub const FILTER_ORDER: usize = 2;

/// Second-order Butterworth band-pass, applied as the analog response
/// `H(f) = H_hp(f; low) * H_lp(f; high)` sample by sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandpassSpec {
    pub low: f64,
    pub high: f64,
}

impl Default for BandpassSpec {
    fn default() -> Self {
        BandpassSpec { low: 0.1, high: 1.0 }
    }
}

impl BandpassSpec {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        let b = BandpassSpec { low, high };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.low > 0.0 && self.high > self.low && self.high.is_finite()) {
            return Err(Error::Argument(format!(
                "band-pass needs 0 < low < high, got {}:{}",
                self.low, self.high
            )));
        }
        Ok(())
    }

    /// `1 / (1 + sqrt2 s + s^2)` with `s = i f / high`.
    pub fn lowpass_response(&self, f: f64) -> Complex64 {
        let s = Complex64::new(0.0, f / self.high);
        (Complex64::new(1.0, 0.0) + s * SQRT_2 + s * s).inv()
    }

    /// `s^2 / (1 + sqrt2 s + s^2)` with `s = i f / low`.
    pub fn highpass_response(&self, f: f64) -> Complex64 {
        let s = Complex64::new(0.0, f / self.low);
        s * s / (Complex64::new(1.0, 0.0) + s * SQRT_2 + s * s)
    }

    pub fn response(&self, f: f64) -> Complex64 {
        if f == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        self.highpass_response(f) * self.lowpass_response(f)
    }

    pub fn apply(&self, spectra: &WavefieldSpectra) -> Result<WavefieldSpectra> {
        self.validate()?;
        if self.high > spectra.grid.f_max {
            return Err(Error::Argument(format!(
                "upper cutoff {} exceeds grid maximum {}",
                self.high, spectra.grid.f_max
            )));
        }
        let h: Vec<Complex64> = spectra
            .grid
            .frequencies()
            .into_iter()
            .map(|f| self.response(f))
            .collect();
        Ok(spectra.map(|_, k, z| z * h[k]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{FrequencyGrid, StationSpectrum};

    #[test]
    fn band_edges_are_minus_3db() {
        let b = BandpassSpec::new(0.1, 1.0).unwrap();
        let target = 1.0 / SQRT_2;
        assert!((b.lowpass_response(1.0).norm() - target).abs() < 1e-12);
        assert!((b.highpass_response(0.1).norm() - target).abs() < 1e-12);
        // Passband gains of the one-sided sections are 1.
        assert!((b.lowpass_response(1e-9).norm() - 1.0).abs() < 1e-12);
        assert!((b.highpass_response(1e9).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rolloff_is_twelve_db_per_octave() {
        let b = BandpassSpec::new(0.1, 0.5).unwrap();
        let db = |f: f64| 20.0 * b.response(f).norm().log10();
        let slope = db(4.0 * b.high) - db(2.0 * b.high);
        assert!((slope + 12.0).abs() < 0.05 * 12.0, "slope {slope}");
    }

    #[test]
    fn rejects_inverted_band() {
        assert!(BandpassSpec::new(1.0, 0.5).is_err());
        assert!(BandpassSpec::new(0.0, 0.5).is_err());
        let grid = FrequencyGrid::new(3, 1.0).unwrap();
        let w = WavefieldSpectra::new(grid, vec!["a".into()], vec![StationSpectrum::zeros(3)])
            .unwrap();
        assert!(BandpassSpec { low: 0.1, high: 2.0 }.apply(&w).is_err());
    }

    #[test]
    fn double_application_squares_response() {
        let grid = FrequencyGrid::new(11, 5.0).unwrap();
        let ones = WavefieldSpectra::new(grid, vec!["a".into()], vec![StationSpectrum::zeros(11)])
            .unwrap()
            .map(|_, _, _| Complex64::new(1.0, 0.0));
        let b = BandpassSpec::default();
        let twice = b.apply(&b.apply(&ones).unwrap()).unwrap();
        for (k, f) in grid.frequencies().into_iter().enumerate() {
            let expect = b.response(f) * b.response(f);
            let got = twice.stations[0].components[0][k];
            assert!((got - expect).norm() < 1e-15);
        }
        assert_eq!(twice.stations[0].components[2][0], Complex64::new(0.0, 0.0));
    }

    #[test]
    fn commutes_with_scaling_and_keeps_zero() {
        let grid = FrequencyGrid::new(11, 5.0).unwrap();
        let w = WavefieldSpectra::new(grid, vec!["a".into()], vec![StationSpectrum::zeros(11)])
            .unwrap();
        let b = BandpassSpec::default();
        assert_eq!(b.apply(&w).unwrap(), w);
        let v = w.map(|d, k, _| Complex64::new(k as f64 + 1.0, d.index() as f64));
        let lhs = b.apply(&v.scale(3.0)).unwrap();
        let rhs = b.apply(&v).unwrap().scale(3.0);
        for (a, c) in lhs.flatten().iter().zip(rhs.flatten()) {
            assert!((a - c).abs() <= 1e-14 * c.abs().max(1.0));
        }
    }
}

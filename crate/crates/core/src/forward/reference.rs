//! Straight-ray far-field point source over a vertically stratified site.
//!
//! For each station the model combines
//!
//! * the far-field P and S radiation of a double couple (Aki & Richards),
//!   with `1 / (4 pi rho c^3 R)` spreading evaluated in the half-space,
//! * an omega-squared source spectrum `slip * scale / (1 + (f / fc)^2)`,
//! * a travel-time phase `exp(-i 2 pi f T)` along the straight ray, where the
//!   ray crosses the half-space and every layer at the same incidence angle,
//! * a vertical-incidence layer-stack response on top: SH (vs) for the two
//!   horizontal components, P (vp) for the vertical one.
//!
//! Output is displacement-like spectra with the DC sample set to zero.
//! Coordinates are NS (north), EW (east) and UD (up) at the surface.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ForwardModel, FrequencyGrid, StationSpectrum, WavefieldSpectra};
use crate::error::{Error, Result};
use crate::model::{LayerModel, SourceModel, Station, StationSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SiteComponent {
    Horizontal,
    Vertical,
}

/// Which body waves contribute to the simulated spectra.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    P,
    S,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceModel {
    /// Brune corner frequency, Hz.
    pub corner_frequency: f64,
    /// Multiplies slip to give the low-frequency source level.
    pub amplitude_scale: f64,
}

impl Default for ReferenceModel {
    fn default() -> Self {
        ReferenceModel { corner_frequency: 1.0, amplitude_scale: 1.0e5 }
    }
}

/// Surface motion over outcrop motion for a vertically incident wave.
///
/// The pure transit delay through the stack, `exp(-i w sum h/v)`, is removed
/// because the ray phase already carries it, so an impedance-matched stack
/// gives exactly 1.
pub fn site_transfer_function(layers: &LayerModel, f: f64, component: SiteComponent) -> Complex64 {
    let one = Complex64::new(1.0, 0.0);
    if f == 0.0 || layers.layers.is_empty() {
        return one;
    }
    let omega = 2.0 * PI * f;
    let speed = |vp: f64, vs: f64| match component {
        SiteComponent::Horizontal => vs,
        SiteComponent::Vertical => vp,
    };
    // Displacement and traction, surface downwards; traction-free at the top.
    let (mut u, mut tau) = (1.0f64, 0.0f64);
    let mut transit = 0.0;
    for l in &layers.layers {
        let v = speed(l.vp, l.vs);
        let kh = omega * l.h / v;
        let impedance = l.rho * v * omega; // mu * k
        let (s, c) = kh.sin_cos();
        let u_next = u * c + tau * s / impedance;
        let tau_next = -impedance * u * s + tau * c;
        u = u_next;
        tau = tau_next;
        transit += l.h / v;
    }
    let hs = layers.half_space;
    let v = speed(hs.vp, hs.vs);
    let impedance = hs.rho * v * omega;
    // u_surface / (2 * upgoing amplitude at the half-space top).
    let outcrop = Complex64::new(u, -tau / impedance);
    Complex64::from_polar(1.0, omega * transit) / outcrop
}

/// Unit double-couple moment tensor in north-east-down coordinates.
fn moment_tensor(source: &SourceModel) -> [[f64; 3]; 3] {
    let (phi, delta, lambda) = (
        source.strike.to_radians(),
        source.dip.to_radians(),
        source.rake.to_radians(),
    );
    let (sd, cd) = delta.sin_cos();
    let (sl, cl) = lambda.sin_cos();
    let (s2d, c2d) = (2.0 * delta).sin_cos();
    let (sp, cp) = phi.sin_cos();
    let (s2p, c2p) = (2.0 * phi).sin_cos();
    let mxx = -(sd * cl * s2p + s2d * sl * sp * sp);
    let mxy = sd * cl * c2p + 0.5 * s2d * sl * s2p;
    let mxz = -(cd * cl * cp + c2d * sl * sp);
    let myy = sd * cl * s2p - s2d * sl * cp * cp;
    let myz = -(cd * cl * sp - c2d * sl * cp);
    let mzz = s2d * sl;
    [[mxx, mxy, mxz], [mxy, myy, myz], [mxz, myz, mzz]]
}

struct RayTerms {
    /// P displacement direction times amplitude, (NS, EW, UD).
    p: [f64; 3],
    s: [f64; 3],
    t_p: f64,
    t_s: f64,
}

fn ray_terms(layers: &LayerModel, source: &SourceModel, station: &Station) -> Result<RayTerms> {
    let loc = source.location;
    let dn = station.ns - loc.ns;
    let de = station.ew - loc.ew;
    let dz = -loc.ud; // station at depth 0, NED
    let r = (dn * dn + de * de + dz * dz).sqrt();
    if !(r > 0.0) || loc.ud <= 0.0 {
        return Err(Error::Geometry(format!(
            "station {} coincides with the source or lies below it",
            station.id
        )));
    }
    let gamma = [dn / r, de / r, dz / r];
    let cos_incidence = loc.ud / r;

    let m = moment_tensor(source);
    let m_gamma: [f64; 3] =
        std::array::from_fn(|i| (0..3).map(|j| m[i][j] * gamma[j]).sum::<f64>());
    let radial: f64 = (0..3).map(|i| gamma[i] * m_gamma[i]).sum();

    let hs = layers.half_space;
    let p_spread = 1.0 / (4.0 * PI * hs.rho * hs.vp.powi(3) * r);
    let s_spread = 1.0 / (4.0 * PI * hs.rho * hs.vs.powi(3) * r);
    let ned_p: [f64; 3] = std::array::from_fn(|i| radial * gamma[i] * p_spread);
    let ned_s: [f64; 3] = std::array::from_fn(|i| (m_gamma[i] - radial * gamma[i]) * s_spread);
    let to_surface = |v: [f64; 3]| [v[0], v[1], -v[2]];

    let below_stack = loc.ud - layers.total_thickness();
    let vertical_p = below_stack / hs.vp + layers.layers.iter().map(|l| l.h / l.vp).sum::<f64>();
    let vertical_s = below_stack / hs.vs + layers.layers.iter().map(|l| l.h / l.vs).sum::<f64>();

    Ok(RayTerms {
        p: to_surface(ned_p),
        s: to_surface(ned_s),
        t_p: vertical_p / cos_incidence,
        t_s: vertical_s / cos_incidence,
    })
}

impl ReferenceModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.corner_frequency > 0.0 && self.corner_frequency.is_finite()) {
            return Err(Error::Argument(format!(
                "corner frequency must be positive, got {}",
                self.corner_frequency
            )));
        }
        if !(self.amplitude_scale > 0.0 && self.amplitude_scale.is_finite()) {
            return Err(Error::Argument(format!(
                "amplitude scale must be positive, got {}",
                self.amplitude_scale
            )));
        }
        Ok(())
    }

    pub fn simulate_phase(
        &self,
        layers: &LayerModel,
        source: &SourceModel,
        stations: &StationSet,
        grid: &FrequencyGrid,
        phase: Phase,
    ) -> Result<WavefieldSpectra> {
        self.validate()?;
        grid.validate()?;
        layers.validate()?;
        source.validate(layers)?;

        let freqs = grid.frequencies();
        let horizontal: Vec<Complex64> = freqs
            .iter()
            .map(|&f| site_transfer_function(layers, f, SiteComponent::Horizontal))
            .collect();
        let vertical: Vec<Complex64> = freqs
            .iter()
            .map(|&f| site_transfer_function(layers, f, SiteComponent::Vertical))
            .collect();
        let level = self.amplitude_scale * source.slip;
        let fc = self.corner_frequency;
        let (use_p, use_s) = match phase {
            Phase::P => (1.0, 0.0),
            Phase::S => (0.0, 1.0),
            Phase::Both => (1.0, 1.0),
        };

        let spectra = stations
            .as_slice()
            .par_iter()
            .map(|station| {
                let ray = ray_terms(layers, source, station)?;
                let mut out = StationSpectrum::zeros(grid.count);
                for (k, &f) in freqs.iter().enumerate().skip(1) {
                    let omega = 2.0 * PI * f;
                    let brune = level / (1.0 + (f / fc).powi(2));
                    let delay_p = Complex64::from_polar(brune * use_p, -omega * ray.t_p);
                    let delay_s = Complex64::from_polar(brune * use_s, -omega * ray.t_s);
                    for c in 0..3 {
                        let site = if c == 2 { vertical[k] } else { horizontal[k] };
                        out.components[c][k] = (delay_p * ray.p[c] + delay_s * ray.s[c]) * site;
                    }
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;

        WavefieldSpectra::new(
            *grid,
            stations.iter().map(|s| s.id.clone()).collect(),
            spectra,
        )
    }
}

impl ForwardModel for ReferenceModel {
    fn tag(&self) -> String {
        format!(
            "reference-ray-v1(fc={},scale={})",
            self.corner_frequency, self.amplitude_scale
        )
    }

    fn simulate(
        &self,
        layers: &LayerModel,
        source: &SourceModel,
        stations: &StationSet,
        grid: &FrequencyGrid,
    ) -> Result<WavefieldSpectra> {
        self.simulate_phase(layers, source, stations, grid, Phase::Both)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{energy_map, Direction};
    use crate::model::{HalfSpace, Layer, Location, Scenario};

    fn uniform_stack(n: usize) -> LayerModel {
        let hs = HalfSpace { rho: 2.7, vp: 5.8, vs: 3.4 };
        LayerModel {
            layers: vec![Layer { rho: hs.rho, vp: hs.vp, vs: hs.vs, h: 0.7 }; n],
            half_space: hs,
        }
    }

    #[test]
    fn matched_stack_is_transparent() {
        let l = uniform_stack(3);
        for f in [0.0, 0.1, 0.77, 2.5, 5.0] {
            for c in [SiteComponent::Horizontal, SiteComponent::Vertical] {
                let t = site_transfer_function(&l, f, c);
                assert!((t - Complex64::new(1.0, 0.0)).norm() < 1e-12, "{f} {t}");
            }
        }
        let empty = uniform_stack(0);
        assert_eq!(site_transfer_function(&empty, 1.3, SiteComponent::Vertical), Complex64::new(1.0, 0.0));
    }

    #[test]
    fn static_limit_is_one() {
        let l = Scenario::kanto_layers();
        assert_eq!(
            site_transfer_function(&l, 0.0, SiteComponent::Horizontal),
            Complex64::new(1.0, 0.0)
        );
        let t = site_transfer_function(&l, 1e-6, SiteComponent::Horizontal);
        assert!((t - Complex64::new(1.0, 0.0)).norm() < 1e-4);
    }

    #[test]
    fn quarter_wavelength_resonance() {
        let l = LayerModel {
            layers: vec![Layer { rho: 1.95, vp: 1.8, vs: 0.5, h: 0.4 }],
            half_space: HalfSpace { rho: 2.7, vp: 5.8, vs: 3.4 },
        };
        let expected = 0.5 / (4.0 * 0.4);
        let df = 1e-4;
        let mag = |f: f64| site_transfer_function(&l, f, SiteComponent::Horizontal).norm();
        let mut f = df;
        let peak = loop {
            if mag(f) > mag(f - df) && mag(f) >= mag(f + df) {
                break f;
            }
            f += df;
            assert!(f < 2.0);
        };
        assert!((peak - expected).abs() < 2.0 * df, "peak at {peak}");
        // Amplification at resonance equals the impedance ratio.
        let ratio = (2.7 * 3.4) / (1.95 * 0.5);
        assert!((mag(expected) - ratio).abs() < 1e-9);
    }

    #[test]
    fn slip_is_linear_and_dc_is_zero() {
        let s = Scenario::hypocenter1();
        let model = ReferenceModel::default();
        let grid = FrequencyGrid::default();
        let a = model.simulate(&s.layer_model(), &s.source, &s.stations, &grid).unwrap();
        let mut src2 = s.source;
        src2.slip *= 2.0;
        let b = model.simulate(&s.layer_model(), &src2, &s.stations, &grid).unwrap();
        assert_eq!(b, a.scale(2.0));
        assert!(a.is_finite());
        for st in &a.stations {
            for c in &st.components {
                assert_eq!(c[0], Complex64::new(0.0, 0.0));
            }
        }
    }

    #[test]
    fn phases_superpose() {
        let s = Scenario::hypocenter1();
        let model = ReferenceModel::default();
        let grid = FrequencyGrid::new(40, 5.0).unwrap();
        let l = s.layer_model();
        let both = model.simulate_phase(&l, &s.source, &s.stations, &grid, Phase::Both).unwrap();
        let p = model.simulate_phase(&l, &s.source, &s.stations, &grid, Phase::P).unwrap();
        let sw = model.simulate_phase(&l, &s.source, &s.stations, &grid, Phase::S).unwrap();
        for ((x, y), z) in both.flatten().iter().zip(p.flatten()).zip(sw.flatten()) {
            assert!((x - y - z).abs() <= 1e-12 * x.abs().max(1e-12));
        }
    }

    #[test]
    fn mirror_stations_have_equal_magnitudes() {
        // Vertical strike-slip on a N-S plane is antisymmetric across it.
        let l = Scenario::kanto_layers();
        let source = SourceModel {
            location: Location { ns: 0.0, ew: 0.0, ud: 20.0 },
            strike: 0.0,
            rake: 0.0,
            dip: 90.0,
            slip: 1.0,
        };
        let stations = StationSet::new(vec![
            Station { id: "east".into(), ns: 7.0, ew: 11.0 },
            Station { id: "west".into(), ns: 7.0, ew: -11.0 },
        ])
        .unwrap();
        let w = ReferenceModel::default()
            .simulate(&l, &source, &stations, &FrequencyGrid::default())
            .unwrap();
        for c in 0..3 {
            for (a, b) in w.stations[0].components[c].iter().zip(&w.stations[1].components[c]) {
                assert!((a.norm() - b.norm()).abs() <= 1e-12 * a.norm().max(1e-30));
            }
        }
    }

    #[test]
    fn s_wave_dominates_nearest_station() {
        let s = Scenario::hypocenter1();
        let model = ReferenceModel::default();
        let grid = FrequencyGrid::default();
        let l = s.layer_model();
        let nearest = s
            .stations
            .iter()
            .enumerate()
            .min_by(|a, b| {
                let d = |st: &Station| {
                    (st.ns - s.source.location.ns).hypot(st.ew - s.source.location.ew)
                };
                d(a.1).total_cmp(&d(b.1))
            })
            .unwrap()
            .0;
        let one = s.stations.subset(&[nearest]).unwrap();
        let p = model.simulate_phase(&l, &s.source, &one, &grid, Phase::P).unwrap();
        let sw = model.simulate_phase(&l, &s.source, &one, &grid, Phase::S).unwrap();
        let total = |w: &WavefieldSpectra| -> f64 {
            Direction::ALL.iter().map(|&d| energy_map(w, d)[0]).sum()
        };
        assert!(total(&sw) > total(&p));
    }

    #[test]
    fn rejects_source_above_stack() {
        let mut s = Scenario::hypocenter1();
        s.source.location.ud = 1.0;
        let r = ReferenceModel::default().simulate(
            &s.layer_model(),
            &s.source,
            &s.stations,
            &FrequencyGrid::default(),
        );
        assert!(r.is_err());
    }
}

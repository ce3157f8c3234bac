//! Low-dose measurement simulation for fan-beam sinograms.
//!
//! A clean sinogram holds line integrals of attenuation. Each sample is
//! turned into a transmitted photon count with Poisson statistics, gets
//! additive Gaussian electronic noise, and is log-converted back into a
//! noisy line integral. Counts are clamped below at one photon so the log
//! stays defined even at photon starvation.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::geometry::Sinogram;

// Counts at or below this clamp simulate a starved detector channel.
const MIN_COUNT: f64 = 1.0;

/// Incident photon budget and electronic noise floor of one acquisition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoseModel {
    /// Photons leaving the source along each ray.
    pub incident_photons: f64,
    /// Variance of the additive electronic noise, in counts squared.
    pub electronic_variance: f64,
}

const PRESETS: [(&str, f64); 4] = [
    ("100%", 1.0e6),
    ("10%", 1.0e5),
    ("5%", 5.0e4),
    ("2.5%", 2.5e4),
];

const PRESET_ELECTRONIC_VARIANCE: f64 = 10.0;

impl DoseModel {
    pub fn new(incident_photons: f64, electronic_variance: f64) -> Result<Self> {
        if !(incident_photons > 0.0) || !incident_photons.is_finite() {
            return Err(Error::config(format!(
                "incident photon count must be positive, got {incident_photons}"
            )));
        }
        if !(electronic_variance >= 0.0) || !electronic_variance.is_finite() {
            return Err(Error::config(format!(
                "electronic variance must be non-negative, got {electronic_variance}"
            )));
        }
        Ok(DoseModel {
            incident_photons,
            electronic_variance,
        })
    }

    /// Named dose levels relative to a routine scan: "100%", "10%", "5%"
    /// and "2.5%".
    pub fn preset(name: &str) -> Result<Self> {
        for (tag, photons) in PRESETS {
            if tag == name {
                return DoseModel::new(photons, PRESET_ELECTRONIC_VARIANCE);
            }
        }
        Err(Error::config(format!(
            "unknown dose preset {name:?}; expected one of {}",
            PRESETS.map(|(t, _)| t).join(", ")
        )))
    }

    pub fn preset_names() -> impl Iterator<Item = &'static str> {
        PRESETS.iter().map(|(t, _)| *t)
    }

    /// Largest line integral observable before the count clamp engages.
    pub fn saturation_level(&self) -> f64 {
        self.incident_photons.ln()
    }
}

/// Corrupt a clean sinogram of line integrals with photon and electronic
/// noise. Samples are drawn in row-major order, so results are fully
/// determined by the generator's state.
pub fn simulate_lowdose(
    clean: &Sinogram,
    dose: &DoseModel,
    rng: &mut impl Rng,
) -> Result<Sinogram> {
    if let Some(bad) = clean.values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::input(format!(
            "clean sinogram must be non-negative and finite, found {bad}"
        )));
    }
    let electronic = Normal::new(0.0, dose.electronic_variance.sqrt())
        .map_err(|e| Error::config(format!("electronic noise model: {e}")))?;
    let mut noisy = Sinogram {
        values: clean.values.clone(),
    };
    for v in noisy.values.iter_mut() {
        let expected = dose.incident_photons * (-*v).exp();
        // Long paths underflow the expected count; the photon term is then
        // zero and only electronic noise remains.
        let photons = if expected > 0.0 {
            Poisson::new(expected)
                .map_err(|e| Error::internal(format!("poisson({expected}): {e}")))?
                .sample(rng)
        } else {
            0.0
        };
        let measured = (photons + electronic.sample(rng)).max(MIN_COUNT);
        *v = (dose.incident_photons / measured).ln();
    }
    Ok(noisy)
}

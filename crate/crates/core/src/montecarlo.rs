//! Seeded Poisson noise and estimator statistics.
//!
//! Every trial draws its counts from ChaCha8 streams keyed by
//! `(base_seed, trial, view)`: the generator is seeded with `base_seed` and
//! the stream index is `trial * 2^20 + view`. Pixels of one view consume the
//! stream in row-major order. Trials are therefore independent of the order
//! (and the thread) in which they run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{ComplexField, RealField};
use crate::fisher_crlb::{crlb, fisher_dipoles, fisher_rect};
use crate::fit::{
    dipole_initial_guess, fit_dipoles, fit_rect_object, rect_bounds, rect_initial_guess, DipoleSpectrum,
    FitOptions, FitResult, RectObjectFit,
};
use crate::forward_dipole::{calibrate_a_in, simulate_dark_field, DarkFieldSetup, DipoleScene};
use crate::forward_rect::{
    bandlimited_rect_object, calibrate_probe_scale, simulate_ptycho, PtychoSetup, RectParams, RECT_PARAM_NAMES,
};
use crate::recon::{fourier_pty_reconstruct, pie_reconstruct, ReconConfig};

/// Views per trial addressable by the stream layout.
const VIEW_BITS: u32 = 20;

/// Generator for one view of one trial.
pub fn view_rng(base_seed: u64, trial: u64, view: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream((trial << VIEW_BITS) | view);
    rng
}

/// Independent Poisson draws with the given means, in pixel order.
pub fn sample_poisson(intensity: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    intensity
        .iter()
        .enumerate()
        .map(|(index, &mean)| {
            if !(mean >= 0.0) || !mean.is_finite() {
                return Err(Error::NegativeMeasurement { index, value: mean });
            }
            if mean == 0.0 {
                return Ok(0.0);
            }
            let d = Poisson::new(mean).map_err(|e| Error::InvalidParameter(format!("poisson mean {mean}: {e}")))?;
            Ok(d.sample(rng))
        })
        .collect()
}

/// Noisy copy of a full measurement set for one trial.
pub fn sample_measurements(expected: &[RealField], base_seed: u64, trial: u64) -> Result<Vec<RealField>> {
    expected
        .iter()
        .enumerate()
        .map(|(v, img)| {
            let mut rng = view_rng(base_seed, trial, v as u64);
            Ok(RealField {
                grid: img.grid,
                data: sample_poisson(&img.data, &mut rng)?,
            })
        })
        .collect()
}

/// Dark-field experiment: truth scene (its `a_in` is recalibrated per plan)
/// and retrieval settings.
#[derive(Debug, Clone)]
pub struct DipoleExperiment {
    pub truth: DipoleScene,
    pub setup: DarkFieldSetup,
    pub recon: ReconConfig,
    pub fit: FitOptions,
}

/// Real-space experiment: truth rectangle, setup with the unscaled probe,
/// and the starting point of the fit (`None` derives it from the reconstruction).
#[derive(Debug, Clone)]
pub struct RectExperiment {
    pub truth: RectParams,
    pub setup: PtychoSetup,
    pub guess: Option<RectParams>,
    pub recon: ReconConfig,
    pub fit: FitOptions,
}

#[derive(Debug, Clone)]
pub enum Experiment {
    Dipole(DipoleExperiment),
    Rect(RectExperiment),
}

impl Experiment {
    pub fn parameter_names(&self) -> Vec<String> {
        match self {
            Experiment::Dipole(d) => d.truth.parameter_names(),
            Experiment::Rect(_) => RECT_PARAM_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn truth(&self) -> Vec<f64> {
        match self {
            Experiment::Dipole(d) => d.truth.theta(),
            Experiment::Rect(r) => r.truth.theta().to_vec(),
        }
    }
}

/// Illumination amplitude giving `pn` photons: `A_in` for the dipole
/// experiment (photons scattered by dipole 1), the probe scale for the
/// rectangle (photons in the probe).
pub fn calibrate_flux(exp: &Experiment, pn: f64) -> Result<f64> {
    match exp {
        Experiment::Dipole(d) => calibrate_a_in(&d.truth, &d.setup, 0, pn),
        Experiment::Rect(r) => calibrate_probe_scale(&r.setup.probe, pn),
    }
}

/// Copy of the experiment with its flux set to `pn`.
pub fn at_flux(exp: &Experiment, pn: f64) -> Result<Experiment> {
    let s = calibrate_flux(exp, pn)?;
    Ok(match exp {
        Experiment::Dipole(d) => {
            let mut d = d.clone();
            d.truth.a_in = s;
            Experiment::Dipole(d)
        }
        Experiment::Rect(r) => {
            let mut r = r.clone();
            r.setup = r.setup.with_probe(r.setup.probe.scaled(s));
            Experiment::Rect(r)
        }
    })
}

/// Outcome of reconstruction followed by parameter fitting.
#[derive(Debug, Clone)]
pub struct Retrieval {
    pub fit: FitResult,
    pub recon_iterations: usize,
    pub recon_cost: f64,
}

/// Fourier-ptychographic reconstruction of the spectrum, blob-based start
/// and dipole fit on the retrievable region.
pub fn retrieve_dipoles(
    data: &[RealField],
    setup: &DarkFieldSetup,
    z: f64,
    a_in: f64,
    count: usize,
    recon: &ReconConfig,
    fit: &FitOptions,
) -> Result<Retrieval> {
    let r = fourier_pty_reconstruct(data, setup, z, a_in, recon)?;
    let f = fit_dipoles_to_estimate(&r.estimate, data, setup, z, a_in, count, fit)?;
    Ok(Retrieval {
        fit: f,
        recon_iterations: r.iterations,
        recon_cost: r.cost,
    })
}

/// Dipole fit on a reconstructed spectrum. The starting point and bounds come
/// from the blobs of the summed measurements.
pub fn fit_dipoles_to_estimate(
    estimate: &ComplexField,
    data: &[RealField],
    setup: &DarkFieldSetup,
    z: f64,
    a_in: f64,
    count: usize,
    fit: &FitOptions,
) -> Result<FitResult> {
    let first = data.first().ok_or(Error::InvalidParameter("no measurements".into()))?;
    let mut sum = RealField::zeros(first.grid);
    for d in data {
        for (a, b) in sum.data.iter_mut().zip(&d.data) {
            *a += b;
        }
    }
    let q_energy: f64 = setup
        .views(z, a_in)?
        .iter()
        .map(|v| v.q.iter().map(|q| q.norm_sqr()).sum::<f64>())
        .sum();
    let (theta0, bounds) = dipole_initial_guess(&sum, count, q_energy)?;
    let omega = setup.omega()?;
    let spec = DipoleSpectrum::from_field(estimate, &omega.values)?;
    fit_dipoles(&spec, &theta0, &bounds, fit)
}

/// PIE reconstruction of the object and rectangle fit on the illuminated support.
pub fn retrieve_rect(
    data: &[RealField],
    setup: &PtychoSetup,
    guess: Option<&RectParams>,
    recon: &ReconConfig,
    fit: &FitOptions,
) -> Result<Retrieval> {
    let r = pie_reconstruct(data, setup, recon)?;
    let f = fit_rect_to_estimate(r.estimate, setup, guess, fit)?;
    Ok(Retrieval {
        fit: f,
        recon_iterations: r.iterations,
        recon_cost: r.cost,
    })
}

/// Rectangle fit on a reconstructed object; `None` derives the start from it.
pub fn fit_rect_to_estimate(
    estimate: ComplexField,
    setup: &PtychoSetup,
    guess: Option<&RectParams>,
    fit: &FitOptions,
) -> Result<FitResult> {
    let illum = setup.illumination();
    let start = match guess {
        Some(g) => *g,
        None => rect_initial_guess(&estimate, &illum)?,
    };
    let bounds = rect_bounds(&start)?;
    let problem = RectObjectFit::on_support(estimate, &illum)?;
    fit_rect_object(&problem, &start.theta(), &bounds, fit)
}

/// Campaign description. `pn` is applied through [`calibrate_flux`].
#[derive(Debug, Clone)]
pub struct TrialPlan {
    pub base_seed: u64,
    pub trials: usize,
    pub pn: f64,
    pub experiment: Experiment,
    /// Parameters reported; empty means all.
    pub track: Vec<String>,
    /// Use the expected intensities as data (no noise).
    pub bypass_noise: bool,
}

impl TrialPlan {
    pub fn validate(&self) -> Result<()> {
        if self.trials < 2 {
            return Err(Error::InvalidParameter(format!("need at least 2 trials, got {}", self.trials)));
        }
        if !(self.pn > 0.0) {
            return Err(Error::InvalidParameter(format!("photon number must be positive, got {}", self.pn)));
        }
        let names = self.experiment.parameter_names();
        if let Some(bad) = self.track.iter().find(|t| !names.contains(t)) {
            return Err(Error::InvalidParameter(format!("unknown parameter {bad}")));
        }
        Ok(())
    }
}

/// Per-trial outcome; `estimate` is `None` when the trial failed.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub trial: usize,
    pub estimate: Option<Vec<f64>>,
    pub note: String,
}

#[derive(Debug, Clone)]
pub struct McReport {
    pub names: Vec<String>,
    pub truth: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub bias2: Vec<f64>,
    pub crlb: Vec<f64>,
    pub trials_used: usize,
    pub failures: usize,
    pub pn: f64,
    /// All trials in index order.
    pub outcomes: Vec<TrialOutcome>,
}

impl McReport {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("parameter,truth,mean,variance,bias2,crlb,trials_used\n");
        for i in 0..self.names.len() {
            s.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{}\n",
                self.names[i], self.truth[i], self.mean[i], self.variance[i], self.bias2[i], self.crlb[i], self.trials_used
            ));
        }
        s
    }

    /// One row per trial, failed trials marked.
    pub fn estimates_csv(&self, all_names: &[String]) -> String {
        let mut s = format!("trial,status,{}\n", all_names.join(","));
        for o in &self.outcomes {
            match &o.estimate {
                Some(e) => {
                    let vals: Vec<String> = e.iter().map(|v| format!("{v:.17e}")).collect();
                    s.push_str(&format!("{},ok,{}\n", o.trial, vals.join(",")));
                }
                None => s.push_str(&format!("{},failed,{}\n", o.trial, o.note.replace(',', ";"))),
            }
        }
        s
    }
}

/// Unbiased sample variance and squared bias `(mean - truth)^2` per parameter.
pub fn variance_bias(estimates: &[Vec<f64>], truth: &[f64]) -> Result<Vec<(f64, f64)>> {
    if estimates.len() < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 estimates, got {}", estimates.len())));
    }
    if let Some(e) = estimates.iter().find(|e| e.len() != truth.len()) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}", truth.len()),
            found: format!("{}", e.len()),
        });
    }
    let n = estimates.len() as f64;
    Ok((0..truth.len())
        .map(|p| {
            let mean = estimates.iter().map(|e| e[p]).sum::<f64>() / n;
            let var = estimates.iter().map(|e| (e[p] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var, (mean - truth[p]).powi(2))
        })
        .collect())
}

/// Fraction of failed trials above which a campaign is rejected.
pub const MAX_FAILURE_FRACTION: f64 = 0.2;

fn trial_failure(f: &FitResult) -> Option<String> {
    if !f.converged {
        return Some("fit did not converge".into());
    }
    if f.any_active() {
        return Some("parameter pinned at a bound".into());
    }
    None
}

/// Runs every trial (in parallel), then reduces in trial order.
pub fn run_campaign(plan: &TrialPlan) -> Result<McReport> {
    plan.validate()?;
    let exp = at_flux(&plan.experiment, plan.pn)?;
    let (expected, fisher) = match &exp {
        Experiment::Dipole(d) => (simulate_dark_field(&d.truth, &d.setup)?, fisher_dipoles(&d.truth, &d.setup)?),
        Experiment::Rect(r) => {
            let o = bandlimited_rect_object(&r.truth, &r.setup.object_grid)?;
            (simulate_ptycho(&r.setup, &o)?, fisher_rect(&r.truth, &r.setup)?)
        }
    };
    let bound = crlb(&fisher, plan.pn)?;
    let outcomes: Vec<TrialOutcome> = (0..plan.trials)
        .into_par_iter()
        .map(|t| {
            let data = if plan.bypass_noise {
                Ok(expected.clone())
            } else {
                sample_measurements(&expected, plan.base_seed, t as u64)
            };
            let result = data.and_then(|data| match &exp {
                Experiment::Dipole(d) => retrieve_dipoles(
                    &data,
                    &d.setup,
                    d.truth.z,
                    d.truth.a_in,
                    d.truth.dipoles.len(),
                    &d.recon,
                    &d.fit,
                ),
                Experiment::Rect(r) => retrieve_rect(&data, &r.setup, r.guess.as_ref(), &r.recon, &r.fit),
            });
            match result {
                Ok(r) => match trial_failure(&r.fit) {
                    None => TrialOutcome {
                        trial: t,
                        estimate: Some(r.fit.theta),
                        note: String::new(),
                    },
                    Some(note) => TrialOutcome {
                        trial: t,
                        estimate: None,
                        note,
                    },
                },
                Err(e) => TrialOutcome {
                    trial: t,
                    estimate: None,
                    note: e.to_string(),
                },
            }
        })
        .collect();
    let good: Vec<Vec<f64>> = outcomes.iter().filter_map(|o| o.estimate.clone()).collect();
    let failures = plan.trials - good.len();
    if failures as f64 > MAX_FAILURE_FRACTION * plan.trials as f64 || good.len() < 2 {
        return Err(Error::CampaignFailed {
            failed: failures,
            total: plan.trials,
        });
    }
    let all_names = exp.parameter_names();
    let truth = exp.truth();
    let stats = variance_bias(&good, &truth)?;
    let picked: Vec<usize> = if plan.track.is_empty() {
        (0..all_names.len()).collect()
    } else {
        plan.track.iter().filter_map(|t| all_names.iter().position(|n| n == t)).collect()
    };
    let n = good.len() as f64;
    Ok(McReport {
        names: picked.iter().map(|&i| all_names[i].clone()).collect(),
        truth: picked.iter().map(|&i| truth[i]).collect(),
        mean: picked.iter().map(|&i| good.iter().map(|e| e[i]).sum::<f64>() / n).collect(),
        variance: picked.iter().map(|&i| stats[i].0).collect(),
        bias2: picked.iter().map(|&i| stats[i].1).collect(),
        crlb: picked.iter().map(|&i| bound.values[i]).collect(),
        trials_used: good.len(),
        failures,
        pn: plan.pn,
        outcomes,
    })
}

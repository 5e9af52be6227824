//! PIE-style reconstruction of a complex object from intensity data.
//!
//! One engine serves both geometries. A view is a window into the estimate,
//! an illumination multiplied onto that window, and a unitary transform that
//! carries the product to the detector. Real-space ptychography uses the
//! forward transform with the probe as illumination; dark-field Fourier
//! ptychography uses the inverse transform with the shifted pupil `Q` as
//! illumination and an estimate that lives on the spectrum grid.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fields::{with_plan, ComplexField, GridSpec, OmegaMask, RealField, C64};
use crate::fisher_crlb::{poisson_nll, INTENSITY_FLOOR};
use crate::forward_dipole::DarkFieldSetup;
use crate::forward_rect::PtychoSetup;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Forward,
    Inverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewOrder {
    Raster,
    /// Reshuffled every sweep from a ChaCha8 stream with this seed.
    Shuffled(u64),
}

#[derive(Debug, Clone)]
pub struct View {
    pub ox: usize,
    pub oy: usize,
    pub illum: Vec<C64>,
}

/// Everything the engine needs to know about the measurement, apart from the data.
#[derive(Debug, Clone)]
pub struct ReconGeometry {
    pub grid: GridSpec,
    pub wx: usize,
    pub wy: usize,
    pub views: Vec<View>,
    pub transform: Transform,
    /// Samples allowed to be nonzero; `None` leaves the estimate unconstrained.
    pub support: Option<Vec<bool>>,
}

impl ReconGeometry {
    pub fn from_ptycho(setup: &PtychoSetup) -> Result<Self> {
        let pg = setup.probe.grid();
        let views = (0..setup.views())
            .map(|j| {
                let (ox, oy) = setup.window_origin(j)?;
                Ok(View {
                    ox,
                    oy,
                    illum: setup.probe.field.data.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid: setup.object_grid,
            wx: pg.nx,
            wy: pg.ny,
            views,
            transform: Transform::Forward,
            support: None,
        })
    }

    /// Views use `Q(k + k_j)` at the given observation plane and amplitude;
    /// the estimate is confined to the union of pupil footprints.
    pub fn from_dark_field(setup: &DarkFieldSetup, z: f64, a_in: f64) -> Result<Self> {
        let views = setup
            .views(z, a_in)?
            .into_iter()
            .map(|v| View {
                ox: v.ox,
                oy: v.oy,
                illum: v.q,
            })
            .collect();
        let omega: OmegaMask = setup.omega()?;
        Ok(Self {
            grid: setup.spectrum_grid,
            wx: setup.detector,
            wy: setup.detector,
            views,
            transform: Transform::Inverse,
            support: Some(omega.values),
        })
    }

    fn window_len(&self) -> usize {
        self.wx * self.wy
    }

    fn check_data(&self, data: &[RealField]) -> Result<()> {
        if data.len() != self.views.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} views", self.views.len()),
                found: format!("{}", data.len()),
            });
        }
        for img in data {
            if img.grid.nx != self.wx || img.grid.ny != self.wy {
                return Err(Error::ShapeMismatch {
                    expected: format!("{}x{}", self.wx, self.wy),
                    found: format!("{}x{}", img.grid.nx, img.grid.ny),
                });
            }
            if let Some((index, &value)) = img.data.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
                return Err(Error::NegativeMeasurement { index, value });
            }
        }
        Ok(())
    }

    fn check_estimate(&self, est: &ComplexField) -> Result<()> {
        if !est.grid.same_shape(&self.grid) {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.grid.nx, self.grid.ny),
                found: format!("{}x{}", est.grid.nx, est.grid.ny),
            });
        }
        Ok(())
    }

    /// Detector field of view `j` for the estimate, written into `buf`.
    pub fn propagate(&self, est: &ComplexField, j: usize, buf: &mut Vec<C64>) {
        let v = &self.views[j];
        buf.clear();
        for wy in 0..self.wy {
            let row = &est.data[(v.oy + wy) * self.grid.nx + v.ox..][..self.wx];
            let il = &v.illum[wy * self.wx..(wy + 1) * self.wx];
            buf.extend(row.iter().zip(il).map(|(o, p)| o * p));
        }
        self.to_detector(buf);
    }

    fn to_detector(&self, buf: &mut [C64]) {
        match self.transform {
            Transform::Forward => with_plan(self.wx, self.wy, |p| p.forward(buf)),
            Transform::Inverse => with_plan(self.wx, self.wy, |p| p.inverse(buf)),
        }
    }

    fn from_detector(&self, buf: &mut [C64]) {
        match self.transform {
            Transform::Forward => with_plan(self.wx, self.wy, |p| p.inverse(buf)),
            Transform::Inverse => with_plan(self.wx, self.wy, |p| p.forward(buf)),
        }
    }

    /// Model intensities of every view.
    pub fn intensities(&self, est: &ComplexField) -> Result<Vec<Vec<f64>>> {
        self.check_estimate(est)?;
        let mut buf = Vec::with_capacity(self.window_len());
        Ok((0..self.views.len())
            .map(|j| {
                self.propagate(est, j, &mut buf);
                buf.iter().map(|v| v.norm_sqr()).collect()
            })
            .collect())
    }

    pub fn apply_support(&self, est: &mut ComplexField) {
        if let Some(s) = &self.support {
            for (v, &m) in est.data.iter_mut().zip(s) {
                if !m {
                    *v = C64::new(0.0, 0.0);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconConfig {
    pub max_iters: usize,
    pub beta: f64,
    /// Stop once the relative change of the sweep cost drops below this.
    pub tol: f64,
    pub order: ViewOrder,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            beta: 1.0,
            tol: 1e-10,
            order: ViewOrder::Raster,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be at least 1".into()));
        }
        if !(self.beta > 0.0 && self.beta <= 2.0) {
            return Err(Error::InvalidParameter(format!("beta must lie in (0, 2], got {}", self.beta)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!("tolerance must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ReconResult {
    pub estimate: ComplexField,
    /// Cost of the final estimate.
    pub cost: f64,
    /// Cost accumulated during each sweep (or the objective per accepted step
    /// for likelihood refinement).
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub order: ViewOrder,
}

/// Replaces the modulus of `phi` by `amp`, keeping the phase (zero phase where `phi` vanishes).
pub fn amplitude_project(phi: &mut [C64], amp: &[f64]) {
    for (v, &a) in phi.iter_mut().zip(amp) {
        let m = v.norm_sqr().sqrt();
        *v = if m > 0.0 { *v * (a / m) } else { C64::new(a, 0.0) };
    }
}

/// Amplitude projection that also returns `sum (amp - |phi|)^2` before projecting.
fn project_with_cost(phi: &mut [C64], amp: &[f64]) -> f64 {
    let mut cost = 0.0;
    for (v, &a) in phi.iter_mut().zip(amp) {
        let m = v.norm_sqr().sqrt();
        cost += (a - m) * (a - m);
        *v = if m > 0.0 { *v * (a / m) } else { C64::new(a, 0.0) };
    }
    cost
}

/// `sum_j sum_pixels (sqrt(I_j) - |F(psi_j)|)^2`.
pub fn cost_e(est: &ComplexField, data: &[RealField], geom: &ReconGeometry) -> Result<f64> {
    geom.check_data(data)?;
    geom.check_estimate(est)?;
    let mut buf = Vec::with_capacity(geom.window_len());
    let mut total = 0.0;
    for (j, img) in data.iter().enumerate() {
        geom.propagate(est, j, &mut buf);
        total += buf
            .iter()
            .zip(&img.data)
            .map(|(v, &i)| (i.sqrt() - v.norm_sqr().sqrt()).powi(2))
            .sum::<f64>();
    }
    Ok(total)
}

fn check_divergence(trace: &[f64]) -> Result<()> {
    let n = trace.len();
    if n > 20 && trace[n - 1] > 10.0 * trace[n - 21] {
        return Err(Error::Diverged { trace: trace.to_vec() });
    }
    Ok(())
}

/// Sequential PIE sweeps starting from `init`.
pub fn run_pie(init: ComplexField, data: &[RealField], geom: &ReconGeometry, cfg: &ReconConfig) -> Result<ReconResult> {
    cfg.validate()?;
    geom.check_data(data)?;
    geom.check_estimate(&init)?;
    init.check_finite()?;
    let amps: Vec<Vec<f64>> = data.iter().map(|d| d.data.iter().map(|v| v.sqrt()).collect()).collect();
    let weights: Vec<f64> = geom
        .views
        .iter()
        .map(|v| v.illum.iter().map(|p| p.norm_sqr()).fold(0.0, f64::max))
        .collect();
    // sweep costs below this are rounding noise
    let floor = 1e-30 * data.iter().map(|d| d.total()).sum::<f64>();
    let mut est = init;
    geom.apply_support(&mut est);
    let n = geom.window_len();
    let mut psi = Vec::with_capacity(n);
    let mut phi = Vec::with_capacity(n);
    let mut order: Vec<usize> = (0..geom.views.len()).collect();
    let mut rng = match cfg.order {
        ViewOrder::Shuffled(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        ViewOrder::Raster => None,
    };
    let mut trace = Vec::new();
    let mut converged = false;
    let nx = geom.grid.nx;
    for _ in 0..cfg.max_iters {
        if let Some(r) = rng.as_mut() {
            order.shuffle(r);
        }
        let mut sweep = 0.0;
        for &j in &order {
            let v = &geom.views[j];
            if weights[j] == 0.0 {
                continue;
            }
            psi.clear();
            for wy in 0..geom.wy {
                let row = &est.data[(v.oy + wy) * nx + v.ox..][..geom.wx];
                let il = &v.illum[wy * geom.wx..(wy + 1) * geom.wx];
                psi.extend(row.iter().zip(il).map(|(o, p)| o * p));
            }
            phi.clear();
            phi.extend_from_slice(&psi);
            geom.to_detector(&mut phi);
            sweep += project_with_cost(&mut phi, &amps[j]);
            geom.from_detector(&mut phi);
            let step = cfg.beta / weights[j];
            for wy in 0..geom.wy {
                let base = (v.oy + wy) * nx + v.ox;
                for wx in 0..geom.wx {
                    let w = wy * geom.wx + wx;
                    let p = v.illum[w];
                    if p.re != 0.0 || p.im != 0.0 {
                        est.data[base + wx] += p.conj() * (phi[w] - psi[w]) * step;
                    }
                }
            }
        }
        geom.apply_support(&mut est);
        if !sweep.is_finite() {
            return Err(Error::Diverged { trace });
        }
        trace.push(sweep);
        check_divergence(&trace)?;
        let k = trace.len();
        if sweep <= floor || (k > 1 && (trace[k - 2] - sweep).abs() <= cfg.tol * trace[k - 2]) {
            converged = true;
            break;
        }
    }
    let cost = cost_e(&est, data, geom)?;
    Ok(ReconResult {
        estimate: est,
        cost,
        iterations: trace.len(),
        trace,
        converged,
        order: cfg.order,
    })
}

/// Real-space ptychography with a known probe, starting from the unit object.
pub fn pie_reconstruct(data: &[RealField], setup: &PtychoSetup, cfg: &ReconConfig) -> Result<ReconResult> {
    let geom = ReconGeometry::from_ptycho(setup)?;
    let init = ComplexField::constant(setup.object_grid, C64::new(1.0, 0.0));
    run_pie(init, data, &geom, cfg)
}

/// Dark-field Fourier ptychography with known `Q`, starting from a zero spectrum.
pub fn fourier_pty_reconstruct(
    data: &[RealField],
    setup: &DarkFieldSetup,
    z: f64,
    a_in: f64,
    cfg: &ReconConfig,
) -> Result<ReconResult> {
    let geom = ReconGeometry::from_dark_field(setup, z, a_in)?;
    let init = ComplexField::zeros(setup.spectrum_grid);
    run_pie(init, data, &geom, cfg)
}

/// Poisson negative log-likelihood of `counts` under the estimate.
pub fn likelihood(est: &ComplexField, counts: &[RealField], geom: &ReconGeometry) -> Result<f64> {
    let model = geom.intensities(est)?;
    let mut total = 0.0;
    for (m, c) in model.iter().zip(counts) {
        total += poisson_nll(&c.data, m)?;
    }
    Ok(total)
}

/// Wirtinger gradient `2 dL/dO*` of the Poisson likelihood.
pub fn likelihood_gradient(est: &ComplexField, counts: &[RealField], geom: &ReconGeometry) -> Result<ComplexField> {
    geom.check_data(counts)?;
    geom.check_estimate(est)?;
    let mut g = ComplexField::zeros(geom.grid);
    let mut buf = Vec::with_capacity(geom.window_len());
    let nx = geom.grid.nx;
    for (j, c) in counts.iter().enumerate() {
        geom.propagate(est, j, &mut buf);
        for (v, &n) in buf.iter_mut().zip(&c.data) {
            let i = v.norm_sqr().max(INTENSITY_FLOOR);
            *v *= 1.0 - n / i;
        }
        geom.from_detector(&mut buf);
        let view = &geom.views[j];
        for wy in 0..geom.wy {
            let base = (view.oy + wy) * nx + view.ox;
            for wx in 0..geom.wx {
                let w = wy * geom.wx + wx;
                g.data[base + wx] += view.illum[w].conj() * buf[w] * 2.0;
            }
        }
    }
    geom.apply_support(&mut g);
    Ok(g)
}

/// Gradient descent on the Poisson likelihood with backtracking.
///
/// Model intensities are floored at [`INTENSITY_FLOOR`] photons where they
/// would otherwise vanish under a nonzero count.
pub fn mle_poisson_refine(
    init: ComplexField,
    counts: &[RealField],
    geom: &ReconGeometry,
    cfg: &ReconConfig,
) -> Result<ReconResult> {
    cfg.validate()?;
    geom.check_data(counts)?;
    for c in counts {
        if let Some((index, &value)) = c.data.iter().enumerate().find(|(_, v)| v.fract() != 0.0) {
            return Err(Error::InvalidParameter(format!("count {value} at index {index} is not an integer")));
        }
    }
    let mut est = init;
    geom.apply_support(&mut est);
    let mut f = likelihood(&est, counts, geom)?;
    let mut trace = vec![f];
    // first trial step from the classic PIE scale
    let wmax = geom
        .views
        .iter()
        .flat_map(|v| v.illum.iter().map(|p| p.norm_sqr()))
        .fold(0.0, f64::max);
    let mut step = if wmax > 0.0 { 0.25 / (wmax * geom.views.len() as f64) } else { 1.0 };
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        iterations += 1;
        let g = likelihood_gradient(&est, counts, geom)?;
        let gn: f64 = g.data.iter().map(|v| v.norm_sqr()).sum();
        if gn == 0.0 {
            converged = true;
            break;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let mut trial = est.clone();
            for (t, d) in trial.data.iter_mut().zip(&g.data) {
                *t -= d * step;
            }
            let ft = likelihood(&trial, counts, geom)?;
            if ft.is_finite() && ft <= f - 0.25 * step * gn {
                est = trial;
                let rel = (f - ft).abs() / f.abs().max(1.0);
                f = ft;
                trace.push(f);
                accepted = true;
                step *= 2.0;
                if rel < cfg.tol {
                    converged = true;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // no descent along the gradient at machine precision
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    Ok(ReconResult {
        cost: f,
        estimate: est,
        trace,
        iterations,
        converged,
        order: cfg.order,
    })
}

/// Rotates the estimate so that its largest-modulus sample has the phase of
/// the same sample in `reference`.
pub fn anchor_phase(est: &mut ComplexField, reference: &ComplexField) {
    let Some((idx, _)) = est
        .data
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.norm_sqr().total_cmp(&b.1.norm_sqr()))
    else {
        return;
    };
    let (a, r) = (est.data[idx], reference.data[idx]);
    if a.norm() == 0.0 || r.norm() == 0.0 {
        return;
    }
    let rot = C64::from_polar(1.0, r.arg() - a.arg());
    est.scale(rot);
}

/// Relative RMS difference of two fields over the flagged samples.
pub fn relative_rms(a: &ComplexField, b: &ComplexField, mask: Option<&[bool]>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..a.data.len() {
        if mask.is_none_or(|m| m[i]) {
            num += (a.data[i] - b.data[i]).norm_sqr();
            den += b.data[i].norm_sqr();
        }
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

//! Bound-constrained least-squares retrieval of dipole and rectangle parameters.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::fields::{ifft2, reciprocal_grid, ComplexField, GridSpec, RealField, C64};
use crate::forward_rect::{rect_spectrum_model, rect_spectrum_model_grad, RectParams};

#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}", lower.len()),
                found: format!("{}", upper.len()),
            });
        }
        if let Some(i) = (0..lower.len()).find(|&i| !(lower[i] <= upper[i])) {
            return Err(Error::InvalidParameter(format!(
                "bound {i}: lower {} exceeds upper {}",
                lower[i], upper[i]
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.len() && theta.iter().enumerate().all(|(i, &t)| t >= self.lower[i] && t <= self.upper[i])
    }

    pub fn project(&self, theta: &mut [f64]) {
        for (i, t) in theta.iter_mut().enumerate() {
            *t = t.clamp(self.lower[i], self.upper[i]);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta: Vec<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Parameters that ended on a bound.
    pub active: Vec<bool>,
}

impl FitResult {
    pub fn any_active(&self) -> bool {
        self.active.iter().any(|&a| a)
    }
}

/// Cost function for [`box_minimize`]. Without an analytic gradient the
/// minimizer falls back to central differences.
pub trait Objective {
    fn value(&self, theta: &[f64]) -> f64;

    fn value_grad(&self, _theta: &[f64]) -> Option<(f64, Vec<f64>)> {
        None
    }
}

impl<F: Fn(&[f64]) -> f64> Objective for F {
    fn value(&self, theta: &[f64]) -> f64 {
        self(theta)
    }
}

/// Pairs a cost closure with its gradient closure.
pub struct WithGradient<F, G>(pub F, pub G);

impl<F, G> Objective for WithGradient<F, G>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn value(&self, theta: &[f64]) -> f64 {
        (self.0)(theta)
    }

    fn value_grad(&self, theta: &[f64]) -> Option<(f64, Vec<f64>)> {
        Some(((self.0)(theta), (self.1)(theta)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iters: usize,
    /// Relative cost change that ends the search.
    pub ftol: f64,
    /// Projected-gradient norm (in bound-scaled variables) that ends the search.
    pub gtol: f64,
    /// Finite-difference step relative to each bound width.
    pub fd_step: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            ftol: 1e-12,
            gtol: 1e-10,
            fd_step: 1e-6,
        }
    }
}

/// Evaluates the objective in unit-box coordinates `u = (theta - lower) / width`.
struct Scaled<'a, O: Objective + ?Sized> {
    obj: &'a O,
    lower: &'a [f64],
    upper: &'a [f64],
    width: Vec<f64>,
    fd_step: f64,
}

impl<O: Objective + ?Sized> Scaled<'_, O> {
    fn theta(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(i, &v)| (self.lower[i] + v * self.width[i]).clamp(self.lower[i], self.upper[i]))
            .collect()
    }

    fn value(&self, u: &[f64]) -> Result<f64> {
        let t = self.theta(u);
        let f = self.obj.value(&t);
        if !f.is_finite() {
            return Err(Error::NonFiniteCost { theta: t });
        }
        Ok(f)
    }

    fn value_grad(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        let t = self.theta(u);
        if let Some((f, g)) = self.obj.value_grad(&t) {
            if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteCost { theta: t });
            }
            return Ok((f, g.iter().zip(&self.width).map(|(g, w)| g * w).collect()));
        }
        let f = self.value(u)?;
        let h = self.fd_step;
        let mut g = vec![0.0; u.len()];
        for i in 0..u.len() {
            if self.width[i] == 0.0 {
                continue;
            }
            // stay inside the box near a bound
            let (hp, hm) = (h.min(1.0 - u[i]), h.min(u[i]));
            let mut up = u.to_vec();
            up[i] += hp;
            let mut um = u.to_vec();
            um[i] -= hm;
            let (fp, fm) = (self.value(&up)?, self.value(&um)?);
            g[i] = if hp + hm > 0.0 { (fp - fm) / (hp + hm) } else { 0.0 };
        }
        Ok((f, g))
    }
}

fn projected_gradient_norm(u: &[f64], g: &[f64], fixed: &[bool]) -> f64 {
    u.iter()
        .zip(g)
        .zip(fixed)
        .map(|((&x, &gi), &f)| if f { 0.0 } else { (x - (x - gi).clamp(0.0, 1.0)).abs() })
        .fold(0.0, f64::max)
}

/// Projected quasi-Newton (BFGS) minimization inside a box.
///
/// Variables are rescaled to the unit box by the bound widths; every
/// evaluated point lies inside the bounds.
pub fn box_minimize<O: Objective + ?Sized>(obj: &O, theta0: &[f64], bounds: &BoxBounds, opts: &FitOptions) -> Result<FitResult> {
    let n = theta0.len();
    if n != bounds.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} parameters", bounds.len()),
            found: format!("{n}"),
        });
    }
    if !bounds.contains(theta0) {
        return Err(Error::InvalidParameter(format!("initial guess {theta0:?} lies outside the bounds")));
    }
    let width: Vec<f64> = (0..n).map(|i| bounds.upper[i] - bounds.lower[i]).collect();
    let fixed: Vec<bool> = width.iter().map(|&w| w == 0.0).collect();
    let sc = Scaled {
        obj,
        lower: &bounds.lower,
        upper: &bounds.upper,
        width: width.clone(),
        fd_step: opts.fd_step,
    };
    let mut u: Vec<f64> = (0..n)
        .map(|i| if fixed[i] { 0.0 } else { ((theta0[i] - bounds.lower[i]) / width[i]).clamp(0.0, 1.0) })
        .collect();
    let (mut f, mut g) = sc.value_grad(&u)?;
    let mut h = nalgebra::DMatrix::<f64>::identity(n, n);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        if projected_gradient_norm(&u, &g, &fixed) < opts.gtol || f == 0.0 {
            converged = true;
            break;
        }
        iterations += 1;
        let active: Vec<bool> = (0..n)
            .map(|i| fixed[i] || (u[i] <= 0.0 && g[i] > 0.0) || (u[i] >= 1.0 && g[i] < 0.0))
            .collect();
        let gv = nalgebra::DVector::from_iterator(n, (0..n).map(|i| if active[i] { 0.0 } else { g[i] }));
        let mut d: Vec<f64> = (-&h * &gv).iter().copied().collect();
        for i in 0..n {
            if active[i] {
                d[i] = 0.0;
            }
        }
        let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if !(slope < 0.0) {
            h.fill_with_identity();
            for i in 0..n {
                d[i] = if active[i] { 0.0 } else { -g[i] };
            }
        }
        // projected Armijo backtracking
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = (0..n)
                .map(|i| if fixed[i] { 0.0 } else { (u[i] + t * d[i]).clamp(0.0, 1.0) })
                .collect();
            let decrease: f64 = (0..n).map(|i| g[i] * (trial[i] - u[i])).sum();
            if trial == u {
                break;
            }
            let ft = sc.value(&trial)?;
            if ft <= f + 1e-4 * decrease {
                accepted = Some((trial, ft));
                break;
            }
            t *= 0.5;
        }
        let Some((un, fn_)) = accepted else {
            if h != nalgebra::DMatrix::identity(n, n) {
                h.fill_with_identity();
                continue;
            }
            // no descent possible at this resolution
            converged = true;
            break;
        };
        let (fnew, gnew) = sc.value_grad(&un)?;
        debug_assert_eq!(fnew.to_bits(), fn_.to_bits());
        let s = nalgebra::DVector::from_iterator(n, (0..n).map(|i| un[i] - u[i]));
        let y = nalgebra::DVector::from_iterator(n, (0..n).map(|i| gnew[i] - g[i]));
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            let rho = 1.0 / sy;
            let i_n = nalgebra::DMatrix::<f64>::identity(n, n);
            let a = &i_n - rho * &s * y.transpose();
            let b = &i_n - rho * &y * s.transpose();
            h = &a * &h * &b + rho * &s * s.transpose();
        }
        let rel = (f - fnew).abs() / f.abs().max(f64::MIN_POSITIVE);
        u = un;
        f = fnew;
        g = gnew;
        if rel < opts.ftol {
            converged = true;
            break;
        }
    }
    let theta = sc.theta(&u);
    let active = (0..n)
        .map(|i| !fixed[i] && (u[i] <= 1e-9 || u[i] >= 1.0 - 1e-9))
        .collect();
    Ok(FitResult {
        theta,
        cost: f,
        iterations,
        converged,
        active,
    })
}

/// Reconstructed dipole spectrum restricted to the retrievable region.
#[derive(Debug, Clone)]
pub struct DipoleSpectrum {
    pub kx: Vec<f64>,
    pub ky: Vec<f64>,
    pub values: Vec<C64>,
}

impl DipoleSpectrum {
    /// Samples of `spectrum` where `mask` is set.
    pub fn from_field(spectrum: &ComplexField, mask: &[bool]) -> Result<Self> {
        if mask.len() != spectrum.data.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}", spectrum.data.len()),
                found: format!("{}", mask.len()),
            });
        }
        let mut s = Self {
            kx: Vec::new(),
            ky: Vec::new(),
            values: Vec::new(),
        };
        for (idx, &m) in mask.iter().enumerate() {
            if m {
                let (kx, ky) = spectrum.grid.coords(idx);
                s.kx.push(kx);
                s.ky.push(ky);
                s.values.push(spectrum.data[idx]);
            }
        }
        Ok(s)
    }

    fn terms(&self, theta: &[f64]) -> Vec<Vec<C64>> {
        theta
            .chunks_exact(3)
            .map(|c| {
                self.kx
                    .iter()
                    .zip(&self.ky)
                    .map(|(kx, ky)| C64::from_polar(1.0, -(kx * c[1] + ky * c[2])))
                    .collect()
            })
            .collect()
    }

    fn model(&self, theta: &[f64], terms: &[Vec<C64>]) -> Vec<C64> {
        let mut m = vec![C64::new(0.0, 0.0); self.values.len()];
        for (c, e) in theta.chunks_exact(3).zip(terms) {
            for (mv, ev) in m.iter_mut().zip(e) {
                *mv += ev * c[0];
            }
        }
        m
    }

    /// Derivatives of the model with respect to `(alpha, x, y)` of dipole `i`,
    /// contracted against `w`: returns `sum conj(dM) w` for each parameter.
    fn contract(&self, theta: &[f64], terms: &[Vec<C64>], w: &[C64]) -> Vec<C64> {
        let mut out = Vec::with_capacity(theta.len());
        for (c, e) in theta.chunks_exact(3).zip(terms) {
            let mut s = [C64::new(0.0, 0.0); 3];
            for p in 0..w.len() {
                let base = e[p].conj() * w[p];
                s[0] += base;
                // dM/dx = -i kx alpha e, so conj(dM) = i kx alpha conj(e)
                s[1] += C64::new(0.0, self.kx[p] * c[0]) * base;
                s[2] += C64::new(0.0, self.ky[p] * c[0]) * base;
            }
            out.extend_from_slice(&s);
        }
        out
    }

    /// `|| O_hat - sum_i alpha_i exp(-i k.r_i) ||^2` over the samples.
    pub fn cost(&self, theta: &[f64]) -> f64 {
        let terms = self.terms(theta);
        let m = self.model(theta, &terms);
        self.values.iter().zip(&m).map(|(o, m)| (o - m).norm_sqr()).sum()
    }

    pub fn cost_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let terms = self.terms(theta);
        let m = self.model(theta, &terms);
        let r: Vec<C64> = self.values.iter().zip(&m).map(|(o, m)| o - m).collect();
        let f = r.iter().map(|v| v.norm_sqr()).sum();
        let g = self.contract(theta, &terms, &r).iter().map(|c| -2.0 * c.re).collect();
        (f, g)
    }

    /// Cost minimized over a global phase of the model,
    /// `||O_hat||^2 + ||M||^2 - 2 |<M, O_hat>|`.
    pub fn profiled_cost(&self, theta: &[f64]) -> f64 {
        self.profiled_cost_grad(theta).0
    }

    pub fn profiled_cost_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let terms = self.terms(theta);
        let m = self.model(theta, &terms);
        let oo: f64 = self.values.iter().map(|v| v.norm_sqr()).sum();
        let mm: f64 = m.iter().map(|v| v.norm_sqr()).sum();
        let c: C64 = m.iter().zip(&self.values).map(|(m, o)| m.conj() * o).sum();
        let cn = c.norm();
        let f = (oo + mm - 2.0 * cn).max(0.0);
        // d||M||^2 = 2 Re sum conj(dM) M ; d|c| = Re(conj(c) sum conj(dM) O) / |c|
        let dm = self.contract(theta, &terms, &m);
        let dc = self.contract(theta, &terms, &self.values);
        let g = dm
            .iter()
            .zip(&dc)
            .map(|(a, b)| {
                let dabs = if cn > 0.0 { (c.conj() * b).re / cn } else { 0.0 };
                2.0 * a.re - 2.0 * dabs
            })
            .collect();
        (f, g)
    }

    /// Global phase that best aligns the model with the data.
    pub fn best_phase(&self, theta: &[f64]) -> f64 {
        let terms = self.terms(theta);
        let m = self.model(theta, &terms);
        m.iter().zip(&self.values).map(|(m, o)| m.conj() * o).sum::<C64>().arg()
    }
}

/// `|| O_hat - sum_i alpha_i exp(-i k.r_i) ||^2` over the samples flagged in `mask`.
pub fn dipole_cost(theta: &[f64], spectrum: &ComplexField, mask: &[bool]) -> Result<f64> {
    Ok(DipoleSpectrum::from_field(spectrum, mask)?.cost(theta))
}

/// Sorts dipole triples by x position.
pub fn canonicalize_dipoles(theta: &mut [f64]) {
    let mut triples: Vec<[f64; 3]> = theta.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    triples.sort_by(|a, b| a[1].total_cmp(&b[1]));
    for (dst, src) in theta.chunks_exact_mut(3).zip(triples) {
        dst.copy_from_slice(&src);
    }
}

/// Fits `n` real-strength dipoles to a reconstructed spectrum. The model is
/// compared up to a global phase, which the reconstruction cannot fix.
pub fn fit_dipoles(spectrum: &DipoleSpectrum, theta0: &[f64], bounds: &BoxBounds, opts: &FitOptions) -> Result<FitResult> {
    if theta0.len() % 3 != 0 || theta0.is_empty() {
        return Err(Error::InvalidParameter("dipole parameters come in (alpha, x, y) triples".into()));
    }
    let obj = WithGradient(|t: &[f64]| spectrum.profiled_cost(t), |t: &[f64]| spectrum.profiled_cost_grad(t).1);
    let mut r = box_minimize(&obj, theta0, bounds, opts)?;
    // reorder the active flags along with the parameters
    let mut tagged: Vec<([f64; 3], [bool; 3])> = r
        .theta
        .chunks_exact(3)
        .zip(r.active.chunks_exact(3))
        .map(|(t, a)| ([t[0], t[1], t[2]], [a[0], a[1], a[2]]))
        .collect();
    tagged.sort_by(|a, b| a.0[1].total_cmp(&b.0[1]));
    r.theta = tagged.iter().flat_map(|t| t.0).collect();
    r.active = tagged.iter().flat_map(|t| t.1).collect();
    Ok(r)
}

/// A connected bright region of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub centroid: (f64, f64),
    /// Brightest pixel (column, row).
    pub peak: (usize, usize),
    pub energy: f64,
}

/// Connected components (8-neighbour) above `frac` of the image maximum,
/// strongest first.
pub fn find_blobs(img: &RealField, frac: f64) -> Vec<Blob> {
    let g = img.grid;
    let peak = img.data.iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Vec::new();
    }
    let thr = frac * peak;
    let mut label = vec![usize::MAX; g.len()];
    let mut blobs = Vec::new();
    for start in 0..g.len() {
        if img.data[start] < thr || label[start] != usize::MAX {
            continue;
        }
        let id = blobs.len();
        let mut stack = vec![start];
        label[start] = id;
        let (mut e, mut sx, mut sy) = (0.0, 0.0, 0.0);
        let mut best = (start, img.data[start]);
        while let Some(p) = stack.pop() {
            let (ix, iy) = (p % g.nx, p / g.nx);
            let v = img.data[p];
            e += v;
            sx += v * g.x(ix);
            sy += v * g.y(iy);
            if v > best.1 {
                best = (p, v);
            }
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx_, ny_) = (ix as i64 + dx, iy as i64 + dy);
                    if nx_ < 0 || ny_ < 0 || nx_ >= g.nx as i64 || ny_ >= g.ny as i64 {
                        continue;
                    }
                    let q = ny_ as usize * g.nx + nx_ as usize;
                    if label[q] == usize::MAX && img.data[q] >= thr {
                        label[q] = id;
                        stack.push(q);
                    }
                }
            }
        }
        blobs.push(Blob {
            centroid: (sx / e, sy / e),
            peak: (best.0 % g.nx, best.0 / g.nx),
            energy: e,
        });
    }
    blobs.sort_by(|a, b| b.energy.total_cmp(&a.energy));
    blobs
}

/// Initial guess and bounds for `n` dipoles from the summed dark-field image.
///
/// Positions start at blob centroids and are bounded by the outer edge of the
/// 5x5 pixel block centred on each blob's brightest pixel. Strengths follow
/// from blob energy, `alpha = sqrt(E / q_energy)` where `q_energy` is the
/// summed pupil energy `sum_j ||Q_j||^2`, and are bounded to a factor of four
/// either way.
pub fn dipole_initial_guess(sum_image: &RealField, n: usize, q_energy: f64) -> Result<(Vec<f64>, BoxBounds)> {
    let blobs = find_blobs(sum_image, 0.1);
    if blobs.len() < n {
        return Err(Error::BlobDetection {
            expected: n,
            found: blobs.len(),
            centroids: blobs.iter().map(|b| b.centroid).collect(),
        });
    }
    if !(q_energy > 0.0) {
        return Err(Error::InvalidParameter("pupil energy must be positive".into()));
    }
    let g = sum_image.grid;
    let mut picked: Vec<&Blob> = blobs.iter().take(n).collect();
    picked.sort_by(|a, b| a.centroid.0.total_cmp(&b.centroid.0));
    let mut theta = Vec::with_capacity(3 * n);
    let mut lower = Vec::with_capacity(3 * n);
    let mut upper = Vec::with_capacity(3 * n);
    for b in picked {
        let alpha = (b.energy / q_energy).sqrt();
        let (px, py) = (g.x(b.peak.0), g.y(b.peak.1));
        let (hx, hy) = (2.5 * g.dx, 2.5 * g.dy);
        let inset = 1e-6;
        theta.extend([
            alpha,
            b.centroid.0.clamp(px - hx + inset, px + hx - inset),
            b.centroid.1.clamp(py - hy + inset, py + hy - inset),
        ]);
        lower.extend([alpha / 4.0, px - hx, py - hy]);
        upper.extend([alpha * 4.0, px + hx, py + hy]);
    }
    Ok((theta, BoxBounds::new(lower, upper)?))
}

/// Spectrum of the reconstructed rectangle object, `F(O_hat - 1)`.
#[derive(Debug, Clone)]
pub struct RectSpectrum {
    pub field: ComplexField,
}

impl RectSpectrum {
    /// Subtracts the unit background in real space, then transforms.
    pub fn from_object(estimate: &ComplexField) -> Result<Self> {
        let mut d = estimate.clone();
        for v in &mut d.data {
            *v -= 1.0;
        }
        Ok(Self {
            field: crate::fields::fft2(&d)?,
        })
    }

    pub fn kgrid(&self) -> GridSpec {
        self.field.grid
    }

    /// `G = || F(O_hat - 1) - model ||^2`.
    pub fn cost(&self, theta: &[f64]) -> f64 {
        let m = rect_spectrum_model(&RectParams::from_theta(theta), &self.field.grid);
        self.field.data.iter().zip(&m.data).map(|(s, m)| (s - m).norm_sqr()).sum()
    }

    pub fn cost_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let (m, d) = rect_spectrum_model_grad(&RectParams::from_theta(theta), &self.field.grid);
        let r: Vec<C64> = self.field.data.iter().zip(&m).map(|(s, m)| s - m).collect();
        let f = r.iter().map(|v| v.norm_sqr()).sum();
        let g = d
            .iter()
            .map(|dl| -2.0 * dl.iter().zip(&r).map(|(a, b)| (a.conj() * b).re).sum::<f64>())
            .collect();
        (f, g)
    }
}

/// Rectangle cost `G` for the parameter vector `[a, b, x, y, amp, phase]`.
pub fn rect_cost_g(theta: &[f64], spectrum: &RectSpectrum) -> f64 {
    spectrum.cost(theta)
}

pub fn wrap_phase(p: f64) -> f64 {
    p.rem_euclid(2.0 * PI)
}

/// Fits the rectangle parameters; the returned phase is wrapped into `[0, 2 pi)`.
pub fn fit_rect(spectrum: &RectSpectrum, theta0: &[f64], bounds: &BoxBounds, opts: &FitOptions) -> Result<FitResult> {
    if theta0.len() != 6 {
        return Err(Error::InvalidParameter(format!("rectangle fit needs 6 parameters, got {}", theta0.len())));
    }
    let obj = WithGradient(|t: &[f64]| spectrum.cost(t), |t: &[f64]| spectrum.cost_grad(t).1);
    let mut r = box_minimize(&obj, theta0, bounds, opts)?;
    r.theta[5] = wrap_phase(r.theta[5]);
    Ok(r)
}

/// Rectangle fit against a real-space reconstruction.
///
/// The residual `O_hat - exp(i g) (1 + F^-1(model))` is weighted per sample
/// and the global phase `g`, which ptychography leaves undetermined, is
/// eliminated in closed form. With unit weights everywhere and `g = 0` this
/// equals [`rect_cost_g`] by Parseval; restricting the weights to the
/// illuminated area keeps unmeasured samples out of the fit.
#[derive(Debug, Clone)]
pub struct RectObjectFit {
    pub estimate: ComplexField,
    pub weights: Vec<f64>,
}

impl RectObjectFit {
    pub fn new(estimate: ComplexField, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != estimate.data.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}", estimate.data.len()),
                found: format!("{}", weights.len()),
            });
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidParameter("fit weights must be nonnegative".into()));
        }
        Ok(Self { estimate, weights })
    }

    /// Unit weight wherever any probe position deposits light.
    pub fn on_support(estimate: ComplexField, illumination: &RealField) -> Result<Self> {
        let w = illumination.data.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        Self::new(estimate, w)
    }

    fn residual(&self, m: &ComplexField) -> Result<(f64, Vec<C64>)> {
        let f = crate::fields::ifft2(m)?;
        let c: C64 = f
            .data
            .iter()
            .zip(&self.estimate.data)
            .zip(&self.weights)
            .map(|((f, o), w)| (f + 1.0).conj() * o * *w)
            .sum();
        let rot = if c.norm() > 0.0 { c.conj() / c.norm() } else { C64::new(1.0, 0.0) };
        let mut cost = 0.0;
        let r = f
            .data
            .iter()
            .zip(&self.estimate.data)
            .zip(&self.weights)
            .map(|((f, o), w)| {
                let d = f + 1.0 - o * rot;
                cost += w * d.norm_sqr();
                d * *w
            })
            .collect();
        Ok((cost, r))
    }

    pub fn cost(&self, theta: &[f64]) -> f64 {
        let kg = crate::fields::reciprocal_grid(&self.estimate.grid);
        let m = rect_spectrum_model(&RectParams::from_theta(theta), &kg);
        self.residual(&m).map(|r| r.0).unwrap_or(f64::NAN)
    }

    pub fn cost_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let kg = crate::fields::reciprocal_grid(&self.estimate.grid);
        let (m, d) = rect_spectrum_model_grad(&RectParams::from_theta(theta), &kg);
        let Ok(model) = ComplexField::from_vec(kg, m) else {
            return (f64::NAN, vec![f64::NAN; 6]);
        };
        let Ok((cost, r)) = self.residual(&model) else {
            return (f64::NAN, vec![f64::NAN; 6]);
        };
        let mut rk = r;
        crate::fields::with_plan(kg.nx, kg.ny, |p| p.forward(&mut rk));
        let g = d
            .iter()
            .map(|dl| 2.0 * dl.iter().zip(&rk).map(|(a, b)| (a.conj() * b).re).sum::<f64>())
            .collect();
        (cost, g)
    }
}

/// Fits the rectangle to a real-space reconstruction; phase wrapped into `[0, 2 pi)`.
pub fn fit_rect_object(problem: &RectObjectFit, theta0: &[f64], bounds: &BoxBounds, opts: &FitOptions) -> Result<FitResult> {
    if theta0.len() != 6 {
        return Err(Error::InvalidParameter(format!("rectangle fit needs 6 parameters, got {}", theta0.len())));
    }
    let obj = WithGradient(|t: &[f64]| problem.cost(t), |t: &[f64]| problem.cost_grad(t).1);
    let mut r = box_minimize(&obj, theta0, bounds, opts)?;
    r.theta[5] = wrap_phase(r.theta[5]);
    Ok(r)
}

/// Default search box around a rectangle guess: widths within a factor 1.5,
/// centre within half a width, amplitude within 0.5 (capped at 1), phase
/// within a quarter turn.
pub fn rect_bounds(guess: &RectParams) -> Result<BoxBounds> {
    let g = guess;
    BoxBounds::new(
        vec![
            g.a / 3.0,
            g.b / 3.0,
            g.x - g.a / 2.0,
            g.y - g.b / 2.0,
            (g.amp - 0.5).max(1e-3),
            g.phase - PI / 2.0,
        ],
        vec![g.a * 1.5, g.b * 1.5, g.x + g.a / 2.0, g.y + g.b / 2.0, 1.0, g.phase + PI / 2.0],
    )
}

/// Rough rectangle from a reconstruction: bounding box of the samples whose
/// deviation from the background exceeds half the largest deviation in the
/// well-lit region, with the mean interior value as contrast.
pub fn rect_initial_guess(estimate: &ComplexField, illumination: &RealField) -> Result<RectParams> {
    let g = estimate.grid;
    let lit_max = illumination.data.iter().copied().fold(0.0, f64::max);
    let lit: Vec<bool> = illumination.data.iter().map(|&v| v > 0.1 * lit_max).collect();
    let dev: Vec<f64> = estimate.data.iter().map(|v| (v - 1.0).norm()).collect();
    let peak = dev.iter().zip(&lit).filter(|(_, &l)| l).map(|(d, _)| *d).fold(0.0, f64::max);
    if peak == 0.0 {
        return Err(Error::SingularModel("reconstruction shows no contrast".into()));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    let mut sum = C64::new(0.0, 0.0);
    let mut count = 0.0;
    for idx in 0..g.len() {
        if lit[idx] && dev[idx] > 0.5 * peak {
            let (x, y) = g.coords(idx);
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
            sum += estimate.data[idx];
            count += 1.0;
        }
    }
    let (a, b) = (x1 - x0 + g.dx, y1 - y0 + g.dy);
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    // contrast by linear least squares against the band-limited unit-contrast shape,
    // which stays meaningful for features only a pixel or two wide
    let unit = RectParams {
        a,
        b,
        x: cx,
        y: cy,
        amp: 1.0,
        phase: PI,
    };
    let shape = ifft2(&rect_spectrum_model(&unit, &reciprocal_grid(&g)))?;
    let (mut num, mut den) = (C64::new(0.0, 0.0), 0.0);
    for idx in 0..g.len() {
        if lit[idx] {
            let s = shape.data[idx] / unit.c1();
            num += s.conj() * (estimate.data[idx] - 1.0);
            den += s.norm_sqr();
        }
    }
    let inside = if den > 0.0 { num / den + 1.0 } else { sum / count };
    RectParams::new(a, b, cx, cy, inside.norm().clamp(1e-3, 1.0), wrap_phase(inside.arg()))
}

//! Poisson likelihood, Fisher information and Cramér-Rao bounds.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{fft2, ifft2, reciprocal_grid, with_plan, ComplexField, GridSpec, C64};
use crate::forward_dipole::{window_phases, DarkFieldSetup, DarkFieldView, DipoleScene, Optics};
use crate::forward_rect::{
    bandlimited_rect_object, exit_wave, rect_spectrum_model_grad, PtychoSetup, RectParams, RECT_PARAM_NAMES,
};

/// Model intensities below this many photons are raised to it wherever the
/// likelihood divides by them.
pub const INTENSITY_FLOOR: f64 = 1e-12;

fn ln_factorial(n: f64) -> f64 {
    libm::lgamma(n + 1.0)
}

/// `-sum [n ln I - I - ln n!]` with the model floored at [`INTENSITY_FLOOR`].
pub fn poisson_nll(counts: &[f64], model: &[f64]) -> Result<f64> {
    if counts.len() != model.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}", model.len()),
            found: format!("{}", counts.len()),
        });
    }
    let mut total = 0.0;
    for (index, (&n, &i)) in counts.iter().zip(model).enumerate() {
        if !(n >= 0.0) {
            return Err(Error::NegativeMeasurement { index, value: n });
        }
        let i = i.max(INTENSITY_FLOOR);
        total += i - if n > 0.0 { n * i.ln() - ln_factorial(n) } else { 0.0 };
    }
    Ok(total)
}

/// Derivative of [`poisson_nll`] with respect to each model intensity, `1 - n / I`.
pub fn poisson_nll_grad(counts: &[f64], model: &[f64]) -> Result<Vec<f64>> {
    if counts.len() != model.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}", model.len()),
            found: format!("{}", counts.len()),
        });
    }
    counts
        .iter()
        .zip(model)
        .enumerate()
        .map(|(index, (&n, &i))| {
            if !(n >= 0.0) {
                return Err(Error::NegativeMeasurement { index, value: n });
            }
            Ok(1.0 - n / i.max(INTENSITY_FLOOR))
        })
        .collect()
}

/// Fisher information over a named parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherMatrix {
    pub matrix: DMatrix<f64>,
    pub names: Vec<String>,
    /// Pixels whose intensity was raised to [`INTENSITY_FLOOR`] while a
    /// derivative there was nonzero.
    pub floored: usize,
}

impl FisherMatrix {
    pub fn new(matrix: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() != names.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{0}x{0}", names.len()),
                found: format!("{}x{}", matrix.nrows(), matrix.ncols()),
            });
        }
        Ok(Self {
            matrix,
            names,
            floored: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    /// Largest `|M_ij - M_ji|` relative to the Frobenius norm.
    pub fn asymmetry(&self) -> f64 {
        let m = &self.matrix;
        let norm = m.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let mut worst = 0.0f64;
        for i in 0..m.nrows() {
            for j in 0..i {
                worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
            }
        }
        worst / norm
    }

    pub fn check_symmetric(&self) -> Result<()> {
        let a = self.asymmetry();
        if a > 1e-10 {
            return Err(Error::NotSymmetric(a));
        }
        Ok(())
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let sym = (&self.matrix + self.matrix.transpose()) * 0.5;
        let mut v: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        v
    }

    /// Eigenvalues no lower than `-1e-10 ||M||`.
    pub fn is_psd(&self) -> bool {
        let tol = 1e-10 * self.matrix.norm();
        self.eigenvalues().first().is_none_or(|&l| l >= -tol)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            matrix: &self.matrix * c,
            ..self.clone()
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.matrix.diagonal().iter().copied().collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// `||self - other||_F / ||other||_F`.
    pub fn relative_distance(&self, other: &FisherMatrix) -> f64 {
        (&self.matrix - &other.matrix).norm() / other.matrix.norm()
    }

    /// CSV with the parameter names as header row.
    pub fn to_csv(&self) -> String {
        let mut s = format!("parameter,{}\n", self.names.join(","));
        for (i, name) in self.names.iter().enumerate() {
            s.push_str(name);
            for j in 0..self.dim() {
                s.push_str(&format!(",{:.17e}", self.matrix[(i, j)]));
            }
            s.push('\n');
        }
        s
    }
}

/// Accumulates `sum dI_a dI_b / I` over pixels. Only the upper triangle is
/// summed, so the result is exactly symmetric.
#[derive(Debug, Clone)]
pub struct FisherAccumulator {
    m: DMatrix<f64>,
    floored: usize,
    peak: f64,
}

impl FisherAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            m: DMatrix::zeros(dim, dim),
            floored: 0,
            peak: 0.0,
        }
    }

    /// Adds one image: `intensity[p]` and `derivs[a][p] = dI/dtheta_a`.
    pub fn add_image(&mut self, intensity: &[f64], derivs: &[Vec<f64>]) {
        let dim = self.m.nrows();
        assert_eq!(derivs.len(), dim, "one derivative image per parameter");
        let mut d = vec![0.0; dim];
        for (p, &i) in intensity.iter().enumerate() {
            self.peak = self.peak.max(i);
            let mut any = false;
            for a in 0..dim {
                d[a] = derivs[a][p];
                any |= d[a] != 0.0;
            }
            if !any {
                continue;
            }
            let i = if i < INTENSITY_FLOOR {
                self.floored += 1;
                INTENSITY_FLOOR
            } else {
                i
            };
            let inv = 1.0 / i;
            for a in 0..dim {
                let da = d[a] * inv;
                for b in a..dim {
                    self.m[(a, b)] += da * d[b];
                }
            }
        }
    }

    pub fn merge(&mut self, other: &FisherAccumulator) {
        self.m += &other.m;
        self.floored += other.floored;
        self.peak = self.peak.max(other.peak);
    }

    pub fn finish(mut self, names: Vec<String>) -> Result<FisherMatrix> {
        if !(self.peak > 0.0) {
            return Err(Error::SingularModel("model intensity vanishes everywhere".into()));
        }
        let dim = self.m.nrows();
        for a in 0..dim {
            for b in 0..a {
                self.m[(a, b)] = self.m[(b, a)];
            }
        }
        let mut f = FisherMatrix::new(self.m, names)?;
        f.floored = self.floored;
        Ok(f)
    }
}

/// `I = |psi|^2` and `dI = 2 Re(psi* dpsi)` for each derivative field.
pub fn intensity_derivatives(psi: &[C64], dpsi: &[Vec<C64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let intensity = psi.iter().map(|v| v.norm_sqr()).collect();
    let derivs = dpsi
        .iter()
        .map(|d| psi.iter().zip(d).map(|(p, q)| 2.0 * (p.conj() * q).re).collect())
        .collect();
    (intensity, derivs)
}

/// Fisher matrix assembled from central differences of a model that maps
/// parameters to a set of intensity images.
pub fn finite_difference_fisher<F>(theta: &[f64], steps: &[f64], names: Vec<String>, model: F) -> Result<FisherMatrix>
where
    F: Fn(&[f64]) -> Result<Vec<Vec<f64>>>,
{
    if steps.len() != theta.len() || names.len() != theta.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} steps and names", theta.len()),
            found: format!("{} steps, {} names", steps.len(), names.len()),
        });
    }
    let base = model(theta)?;
    let mut derivs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(theta.len());
    for (a, &h) in steps.iter().enumerate() {
        let mut tp = theta.to_vec();
        let mut tm = theta.to_vec();
        tp[a] += h;
        tm[a] -= h;
        let ip = model(&tp)?;
        let im = model(&tm)?;
        derivs.push(
            ip.iter()
                .zip(&im)
                .map(|(p, m)| p.iter().zip(m).map(|(u, v)| (u - v) / (2.0 * h)).collect())
                .collect(),
        );
    }
    let mut acc = FisherAccumulator::new(theta.len());
    for (v, img) in base.iter().enumerate() {
        let d: Vec<Vec<f64>> = derivs.iter().map(|da| da[v].clone()).collect();
        acc.add_image(img, &d);
    }
    acc.finish(names)
}

/// Fisher matrix of the dipole parameters `[alpha_i, x_i, y_i]...` for the
/// dark-field measurement set.
pub fn fisher_dipoles(scene: &DipoleScene, setup: &DarkFieldSetup) -> Result<FisherMatrix> {
    if scene.dipoles.is_empty() {
        return Err(Error::SingularModel("scene has no dipoles".into()));
    }
    let views = setup.views(scene.z, scene.a_in)?;
    let dim = 3 * scene.dipoles.len();
    let parts: Vec<FisherAccumulator> = views
        .par_iter()
        .map(|view| {
            let (psi, dpsi) = dipole_view_derivatives(scene, setup, view);
            let (i, d) = intensity_derivatives(&psi, &dpsi);
            let mut acc = FisherAccumulator::new(dim);
            acc.add_image(&i, &d);
            acc
        })
        .collect();
    let mut total = FisherAccumulator::new(dim);
    for p in &parts {
        total.merge(p);
    }
    total.finish(scene.parameter_names())
}

/// Detector field of one view and its derivatives with respect to every dipole parameter.
fn dipole_view_derivatives(scene: &DipoleScene, setup: &DarkFieldSetup, view: &DarkFieldView) -> (Vec<C64>, Vec<Vec<C64>>) {
    let n = setup.detector;
    let g = &setup.spectrum_grid;
    let mut psi = vec![C64::new(0.0, 0.0); n * n];
    let mut dpsi = Vec::with_capacity(3 * scene.dipoles.len());
    for d in &scene.dipoles {
        let (px, py) = window_phases(g, view.ox, view.oy, n, d.x, d.y);
        let mut da = vec![C64::new(0.0, 0.0); n * n];
        let mut dx = vec![C64::new(0.0, 0.0); n * n];
        let mut dy = vec![C64::new(0.0, 0.0); n * n];
        for wy in 0..n {
            let ky = g.y(view.oy + wy);
            for wx in 0..n {
                let idx = wy * n + wx;
                let q = view.q[idx];
                if q.re == 0.0 && q.im == 0.0 {
                    continue;
                }
                let kx = g.x(view.ox + wx);
                let unit = q * px[wx] * py[wy];
                let t = unit * d.alpha;
                psi[idx] += t;
                da[idx] = unit;
                dx[idx] = t * C64::new(0.0, -kx);
                dy[idx] = t * C64::new(0.0, -ky);
            }
        }
        dpsi.push(da);
        dpsi.push(dx);
        dpsi.push(dy);
    }
    with_plan(n, n, |p| {
        p.inverse(&mut psi);
        for d in &mut dpsi {
            p.inverse(d);
        }
    });
    (psi, dpsi)
}

/// Single-dipole Fisher diagonals written through the pupil constant and
/// the order-2 Bessel function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingleDipoleClosed {
    pub alpha_alpha: f64,
    /// Position block `[[I_xx, I_xy], [I_yx, I_yy]]`.
    pub rr: [[f64; 2]; 2],
}

impl SingleDipoleClosed {
    /// Trace of the position block, the radially symmetric total.
    pub fn rr_trace(&self) -> f64 {
        self.rr[0][0] + self.rr[1][1]
    }
}

/// `C1 = alpha A_in exp(i k |z|) k^4 NA^2 / (8 i pi k)`, the pupil constant
/// with the axial wavenumber taken at the pupil centre.
pub fn pupil_constant(alpha: f64, a_in: f64, z: f64, optics: Optics) -> C64 {
    let k = optics.k;
    C64::from_polar(1.0, k * z.abs()) * (alpha * a_in * k.powi(4) * optics.na * optics.na) / C64::new(0.0, 8.0 * PI * k)
}

/// `J2(x)^2 / x^2` without the removable singularity at the origin.
fn j2_over_x_sq(x: f64) -> f64 {
    if x.abs() < 1e-6 {
        // J2(x) ~ x^2 / 8
        return x * x / 64.0;
    }
    let j = libm::jn(2, x);
    j * j / (x * x)
}

/// Closed-form single-dipole diagonals. `I_aa` is `4 sum |F^-1[Q_j exp(-i k.r1)]|^2`;
/// the position block is `4 |s C1|^2 sum J2(k NA rho)^2 / rho^2 (rho_hat rho_hat^T)`
/// over detector pixels and views, where `s = 2 pi / (n dk^2)` converts the
/// continuous transform of a flat pupil to the discrete unitary one.
pub fn fisher_single_dipole_closed(scene: &DipoleScene, setup: &DarkFieldSetup) -> Result<SingleDipoleClosed> {
    if scene.dipoles.len() != 1 {
        return Err(Error::InvalidParameter(format!(
            "closed form needs exactly one dipole, scene has {}",
            scene.dipoles.len()
        )));
    }
    let d = scene.dipoles[0];
    let views = setup.views(scene.z, scene.a_in)?;
    let n = setup.detector;
    let g = &setup.spectrum_grid;
    let mut alpha_alpha = 0.0;
    for view in &views {
        let (px, py) = window_phases(g, view.ox, view.oy, n, d.x, d.y);
        let mut f: Vec<C64> = (0..n * n).map(|idx| view.q[idx] * px[idx % n] * py[idx / n]).collect();
        with_plan(n, n, |p| p.inverse(&mut f));
        alpha_alpha += 4.0 * f.iter().map(|v| v.norm_sqr()).sum::<f64>();
    }
    let s = 2.0 * PI / (n as f64 * g.dx * g.dy);
    let c = (pupil_constant(d.alpha, scene.a_in, scene.z, setup.optics) * s).norm_sqr();
    let k_na = setup.optics.k * setup.optics.na;
    let det = setup.detector_grid();
    let mut rr = [[0.0; 2]; 2];
    for iy in 0..det.ny {
        let ry = det.y(iy) - d.y;
        for ix in 0..det.nx {
            let rx = det.x(ix) - d.x;
            let rho2 = rx * rx + ry * ry;
            if rho2 == 0.0 {
                continue;
            }
            // J2(K rho)^2 / rho^2 = K^2 J2(u)^2 / u^2 with u = K rho
            let w = k_na * k_na * j2_over_x_sq(k_na * rho2.sqrt()) / rho2;
            rr[0][0] += w * rx * rx;
            rr[0][1] += w * rx * ry;
            rr[1][1] += w * ry * ry;
        }
    }
    let scale = 4.0 * c * views.len() as f64;
    for row in &mut rr {
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    rr[1][0] = rr[0][1];
    Ok(SingleDipoleClosed { alpha_alpha, rr })
}

/// Parameter names of the rectangle in [`RectParams::theta`] order.
pub fn rect_parameter_names() -> Vec<String> {
    RECT_PARAM_NAMES.iter().map(|s| s.to_string()).collect()
}

/// Object `1 + F^-1(model)` together with the six derivative objects.
fn rect_object_derivatives(p: &RectParams, g: &GridSpec) -> Result<(ComplexField, Vec<ComplexField>)> {
    p.validate()?;
    let kg = reciprocal_grid(g);
    let (m, d) = rect_spectrum_model_grad(p, &kg);
    let mut o = ifft2(&ComplexField::from_vec(kg, m)?)?;
    for v in &mut o.data {
        *v += 1.0;
    }
    let dobj = d
        .into_iter()
        .map(|dd| ifft2(&ComplexField::from_vec(kg, dd)?))
        .collect::<Result<Vec<_>>>()?;
    Ok((o, dobj))
}

/// Fisher matrix of the band-limited rectangle parameters for the
/// real-space scan, from exact derivatives of every far-field image.
pub fn fisher_rect(p: &RectParams, setup: &PtychoSetup) -> Result<FisherMatrix> {
    check_rect_inside(p, &setup.object_grid)?;
    let (o, dobj) = rect_object_derivatives(p, &setup.object_grid)?;
    let pg = setup.probe.grid();
    let parts = (0..setup.views())
        .into_par_iter()
        .map(|j| {
            let mut psi = exit_wave(setup, &o, j)?.data;
            let mut dpsi = dobj
                .iter()
                .map(|d| exit_wave(setup, d, j).map(|f| f.data))
                .collect::<Result<Vec<_>>>()?;
            with_plan(pg.nx, pg.ny, |plan| {
                plan.forward(&mut psi);
                for d in &mut dpsi {
                    plan.forward(d);
                }
            });
            let (i, d) = intensity_derivatives(&psi, &dpsi);
            let mut acc = FisherAccumulator::new(6);
            acc.add_image(&i, &d);
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = FisherAccumulator::new(6);
    for a in &parts {
        total.merge(a);
    }
    total.finish(rect_parameter_names())
}

fn check_rect_inside(p: &RectParams, g: &GridSpec) -> Result<()> {
    let (x0, x1) = (g.x(0), g.x(g.nx - 1));
    let (y0, y1) = (g.y(0), g.y(g.ny - 1));
    if p.x - p.a / 2.0 < x0 || p.x + p.a / 2.0 > x1 || p.y - p.b / 2.0 < y0 || p.y + p.b / 2.0 > y1 {
        return Err(Error::Geometry("rectangle edge outside the object grid".into()));
    }
    Ok(())
}

/// Bilinear interpolation of a window-sized field at continuous window coordinates;
/// zero outside the window.
fn bilinear(f: &ComplexField, x: f64, y: f64) -> C64 {
    let g = &f.grid;
    let fx = g.to_index_x(x);
    let fy = g.to_index_y(y);
    if fx < 0.0 || fy < 0.0 || fx > (g.nx - 1) as f64 || fy > (g.ny - 1) as f64 {
        return C64::new(0.0, 0.0);
    }
    let ix = (fx.floor() as usize).min(g.nx - 2);
    let iy = (fy.floor() as usize).min(g.ny - 2);
    let tx = fx - ix as f64;
    let ty = fy - iy as f64;
    f.get(ix, iy) * ((1.0 - tx) * (1.0 - ty))
        + f.get(ix + 1, iy) * (tx * (1.0 - ty))
        + f.get(ix, iy + 1) * ((1.0 - tx) * ty)
        + f.get(ix + 1, iy + 1) * (tx * ty)
}

/// Phase-only spectrum `F(psi) / F(psi)*` of one view.
fn phase_ratio(spectrum: &[C64]) -> Vec<C64> {
    spectrum
        .iter()
        .map(|v| {
            let n2 = v.norm_sqr();
            if n2 > 0.0 {
                v * v / n2
            } else {
                C64::new(0.0, 0.0)
            }
        })
        .collect()
}

/// Direct inverse DFT of a spectrum at continuous real-space points.
struct PointIdft<'a> {
    kgrid: GridSpec,
    spectrum: &'a [C64],
}

impl PointIdft<'_> {
    fn at(&self, x: f64, y: f64) -> C64 {
        let g = &self.kgrid;
        let norm = 1.0 / (g.len() as f64).sqrt();
        let ex: Vec<C64> = (0..g.nx).map(|i| C64::from_polar(1.0, g.x(i) * x)).collect();
        let mut total = C64::new(0.0, 0.0);
        for iy in 0..g.ny {
            let row = &self.spectrum[iy * g.nx..(iy + 1) * g.nx];
            let inner: C64 = row.iter().zip(&ex).map(|(a, b)| a * b).sum();
            total += inner * C64::from_polar(1.0, g.y(iy) * y);
        }
        total * norm
    }
}

/// Rectangle Fisher diagonals evaluated from the edge-sampled closed
/// expressions, in [`RectParams::theta`] order. The edge deltas become line
/// sums over grid rows (columns) with unit weight, `P_j` is interpolated
/// bilinearly and the phase kernel `F^-1(F(psi_j) / F(psi_j)*)` is summed
/// directly at the required off-grid points. Every point is expressed in the
/// frame of the view's own window. `I_phiphi` is `A^2 I_AA`.
pub fn rect_fisher_edge_diagonals(p: &RectParams, setup: &PtychoSetup) -> Result<[f64; 6]> {
    check_rect_inside(p, &setup.object_grid)?;
    let o = bandlimited_rect_object(p, &setup.object_grid)?;
    let pg = setup.probe.grid();
    let g = setup.object_grid;
    let c1 = p.c1();
    let mut i_aa = 0.0;
    let mut d_a = 0.0;
    let mut d_b = 0.0;
    let mut d_x = 0.0;
    let mut d_y = 0.0;
    for j in 0..setup.views() {
        let s = setup.shift(j);
        let psi = exit_wave(setup, &o, j)?;
        let spec = fft2(&psi)?;
        let ratio = phase_ratio(&spec.data);
        let mut kernel = ratio.clone();
        with_plan(pg.nx, pg.ny, |plan| plan.inverse(&mut kernel));
        let idft = PointIdft {
            kgrid: spec.grid,
            spectrum: &ratio,
        };
        // amplitude term on the window grid with the sharp rectangle
        let e = C64::from_polar(1.0, -2.0 * p.phase);
        for wy in 0..pg.ny {
            for wx in 0..pg.nx {
                let (u, v) = pg.coords(wy * pg.nx + wx);
                let (x, y) = (u + s[0], v + s[1]);
                if (x - p.x).abs() <= p.a / 2.0 && (y - p.y).abs() <= p.b / 2.0 {
                    let pp = setup.probe.field.data[wy * pg.nx + wx];
                    i_aa += 2.0 * pp.norm_sqr() + 2.0 * (kernel[wy * pg.nx + wx] * e * pp.conj() * pp.conj()).re;
                }
            }
        }
        // x edges: rows inside the y extent
        let (ux, uy) = (p.x - s[0], p.y - s[1]);
        let edge = |lines: &mut dyn Iterator<Item = f64>, along_x: bool, half: f64, centre: f64| -> (f64, f64) {
            let (mut sa, mut sx) = (0.0, 0.0);
            for l in lines {
                let at = |c: f64| {
                    if along_x {
                        bilinear(&setup.probe.field, c, l)
                    } else {
                        bilinear(&setup.probe.field, l, c)
                    }
                };
                let kern = |c: f64| {
                    if along_x {
                        idft.at(c, l)
                    } else {
                        idft.at(l, c)
                    }
                };
                let pp = at(centre + half);
                let pm = at(centre - half);
                let w = (c1.conj() * c1.conj()) * 1.0;
                let t0 = c1.norm_sqr() * (pp.norm_sqr() + pm.norm_sqr());
                let tp = (w * kern(2.0 * centre + 2.0 * half) * pp.conj() * pp.conj()).re;
                let tm = (w * kern(2.0 * centre - 2.0 * half) * pm.conj() * pm.conj()).re;
                let tc = (w * kern(2.0 * centre) * pp.conj() * pm.conj()).re;
                sa += 0.5 * (t0 + tp + tm) + tc;
                sx += 2.0 * (t0 + tp + tm) - 4.0 * tc;
            }
            (sa, sx)
        };
        let rows = (0..g.ny).map(|iy| g.y(iy)).filter(|&y| (y - p.y).abs() <= p.b / 2.0).map(|y| y - s[1]);
        let (a, x) = edge(&mut rows.collect::<Vec<_>>().into_iter(), true, p.a / 2.0, ux);
        d_a += a;
        d_x += x;
        let cols = (0..g.nx).map(|ix| g.x(ix)).filter(|&x| (x - p.x).abs() <= p.a / 2.0).map(|x| x - s[0]);
        let (b, y) = edge(&mut cols.collect::<Vec<_>>().into_iter(), false, p.b / 2.0, uy);
        d_b += b;
        d_y += y;
    }
    Ok([d_a, d_b, d_x, d_y, i_aa, p.amp * p.amp * i_aa])
}

/// Cramér-Rao bounds of every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct CrlbReport {
    pub names: Vec<String>,
    /// Lower bounds on the variance, squared parameter units.
    pub values: Vec<f64>,
    pub pn: f64,
    /// `lambda_max / lambda_min` of the Fisher matrix (infinite if singular).
    pub condition: f64,
    /// Set when small eigenvalues were dropped.
    pub pseudo_inverse: bool,
}

impl CrlbReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("parameter,crlb,pn,condition\n");
        for (n, v) in self.names.iter().zip(&self.values) {
            s.push_str(&format!("{n},{v:.17e},{:e},{:e}\n", self.pn, self.condition));
        }
        s
    }
}

/// Eigenvalues below this fraction of the largest are dropped from the inverse.
pub const PSEUDO_INVERSE_CUTOFF: f64 = 1e-12;

/// Diagonal of the inverse Fisher matrix via a symmetric eigendecomposition.
pub fn crlb(m: &FisherMatrix, pn: f64) -> Result<CrlbReport> {
    m.check_symmetric()?;
    let eig = SymmetricEigen::new(m.matrix.clone());
    let lmax = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
    if !(lmax > 0.0) {
        return Err(Error::SingularModel("Fisher matrix has no positive eigenvalue".into()));
    }
    let lmin = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let condition = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    let cut = PSEUDO_INVERSE_CUTOFF * lmax;
    let mut pseudo_inverse = false;
    let dim = m.dim();
    let mut values = vec![0.0; dim];
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l <= cut {
            pseudo_inverse = true;
            continue;
        }
        for (i, v) in values.iter_mut().enumerate() {
            let e = eig.eigenvectors[(i, k)];
            *v += e * e / l;
        }
    }
    Ok(CrlbReport {
        names: m.names.clone(),
        values,
        pn,
        condition,
        pseudo_inverse,
    })
}

/// Bounds that ignore parameter coupling, `1 / M_ll`.
pub fn crlb_diagonal_only(m: &FisherMatrix, pn: f64) -> Result<CrlbReport> {
    m.check_symmetric()?;
    let values = m
        .diagonal()
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { f64::INFINITY })
        .collect();
    let full = crlb(m, pn)?;
    Ok(CrlbReport { values, ..full })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_dipole::{calibrate_a_in, simulate_dark_field, reference_dipoles, Dipole, TiltSet};
    use crate::forward_rect::{simulate_ptycho, reference_rect};

    fn toy_setup(tilts: usize) -> DarkFieldSetup {
        let k = 2.0 * PI;
        DarkFieldSetup {
            optics: Optics { na: 0.4, k },
            tilts: TiltSet {
                polar: PI / 3.0,
                count: tilts,
                k,
            }
            .vectors(),
            spectrum_grid: GridSpec::square(64, 2.0 * PI / 16.0).unwrap(),
            detector: 32,
        }
    }

    fn toy_scene() -> DipoleScene {
        let d = vec![
            Dipole {
                alpha: 1e-3,
                x: -2.3,
                y: 0.4,
            },
            Dipole {
                alpha: 0.6e-3,
                x: 2.1,
                y: -0.7,
            },
        ];
        DipoleScene::new(d, 1e5, 0.0).unwrap()
    }

    #[test]
    fn nll_examples() {
        let v = poisson_nll(&[2.0], &[1.0]).unwrap();
        assert!((v - (1.0 + 2f64.ln())).abs() < 1e-14);
        let g = poisson_nll_grad(&[3.0, 0.0, 5.0], &[3.0, 1.0, 5.0]).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[2], 0.0);
        assert!(poisson_nll(&[-1.0], &[1.0]).is_err());
    }

    #[test]
    fn nll_gradient_matches_differences() {
        let n = [0.0, 1.0, 4.0, 17.0];
        let model = [0.3, 2.5, 3.1, 20.0];
        let g = poisson_nll_grad(&n, &model).unwrap();
        for p in 0..4 {
            let h = 1e-6 * model[p];
            let mut up = model;
            let mut dn = model;
            up[p] += h;
            dn[p] -= h;
            let fd = (poisson_nll(&n, &up).unwrap() - poisson_nll(&n, &dn).unwrap()) / (2.0 * h);
            assert!((fd - g[p]).abs() <= 1e-6 * g[p].abs().max(1e-3), "{p}: {fd} vs {}", g[p]);
        }
    }

    #[test]
    fn diagonal_and_two_by_two_inverses() {
        let m = FisherMatrix::new(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 5.0, 0.5])), vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let c = crlb(&m, 1.0).unwrap();
        for (v, d) in c.values.iter().zip([2.0, 5.0, 0.5]) {
            assert!((v - 1.0 / d).abs() < 1e-14);
        }
        let (a, b, d) = (4.0, 1.5, 3.0);
        let m2 = FisherMatrix::new(DMatrix::from_row_slice(2, 2, &[a, b, b, d]), vec!["p".into(), "q".into()]).unwrap();
        let c2 = crlb(&m2, 1.0).unwrap();
        let det = a * d - b * b;
        assert!((c2.values[0] - d / det).abs() < 1e-14);
        assert!((c2.values[1] - a / det).abs() < 1e-14);
        assert!(!c2.pseudo_inverse);
    }

    #[test]
    fn asymmetric_matrix_rejected_and_singular_pseudo_inverted() {
        let m = FisherMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]), vec!["p".into(), "q".into()]).unwrap();
        assert!(matches!(crlb(&m, 1.0), Err(Error::NotSymmetric(_))));
        let s = FisherMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]), vec!["p".into(), "q".into()]).unwrap();
        let c = crlb(&s, 1.0).unwrap();
        assert!(c.pseudo_inverse);
        assert!(c.condition.is_infinite());
        assert!((c.values[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn dipole_fisher_symmetric_psd_and_flux_linear() {
        let setup = toy_setup(8);
        let scene = toy_scene();
        let f = fisher_dipoles(&scene, &setup).unwrap();
        assert_eq!(f.asymmetry(), 0.0);
        assert!(f.is_psd());
        let mut brighter = scene.clone();
        brighter.a_in *= 3.0;
        let g = fisher_dipoles(&brighter, &setup).unwrap();
        let rel = (&g.matrix - &f.matrix * 9.0).norm() / g.matrix.norm();
        assert!(rel < 1e-13, "{rel}");
    }

    #[test]
    fn dipole_fisher_matches_finite_differences() {
        let setup = toy_setup(8);
        let scene = toy_scene();
        let f = fisher_dipoles(&scene, &setup).unwrap();
        let theta = scene.theta();
        let steps: Vec<f64> = theta.iter().enumerate().map(|(i, v)| if i % 3 == 0 { 1e-5 * v } else { 1e-5 }).collect();
        let fd = finite_difference_fisher(&theta, &steps, scene.parameter_names(), |t| {
            Ok(simulate_dark_field(&scene.with_theta(t), &setup)?.into_iter().map(|i| i.data).collect())
        })
        .unwrap();
        let rel = f.relative_distance(&fd);
        assert!(rel < 1e-4, "{rel}");
    }

    #[test]
    fn empty_scene_is_singular() {
        let setup = toy_setup(4);
        let mut scene = toy_scene();
        scene.a_in = 0.0;
        assert!(matches!(fisher_dipoles(&scene, &setup), Err(Error::SingularModel(_))));
    }

    #[test]
    fn closed_form_alpha_matches_general() {
        let setup = toy_setup(8);
        let scene = DipoleScene::new(vec![toy_scene().dipoles[0]], 1e5, 0.0).unwrap();
        let f = fisher_dipoles(&scene, &setup).unwrap();
        let c = fisher_single_dipole_closed(&scene, &setup).unwrap();
        assert!((c.alpha_alpha / f.matrix[(0, 0)] - 1.0).abs() < 1e-10);
        assert!(fisher_single_dipole_closed(&toy_scene(), &setup).is_err());
    }

    #[test]
    fn bessel_derivative_identity() {
        // d/dx (J1(x) / x) = -J2(x) / x
        for &x in &[0.3, 1.0, 2.7, 5.0, 11.2] {
            let f = |u: f64| libm::j1(u) / u;
            let h = 1e-5;
            let fd = (f(x + h) - f(x - h)) / (2.0 * h);
            let rhs = -libm::jn(2, x) / x;
            assert!((fd - rhs).abs() <= 1e-6 * rhs.abs(), "{x}: {fd} vs {rhs}");
        }
        assert_eq!(j2_over_x_sq(0.0), 0.0);
        let x = 1e-3;
        assert!((j2_over_x_sq(x) - libm::jn(2, x).powi(2) / (x * x)).abs() < 1e-18);
    }

    #[test]
    fn closed_form_position_block_ignores_tilt_azimuth() {
        let mut setup = toy_setup(8);
        let scene = DipoleScene::new(vec![toy_scene().dipoles[0]], 1e5, 0.0).unwrap();
        let a = fisher_single_dipole_closed(&scene, &setup).unwrap();
        setup.tilts = TiltSet {
            polar: PI / 3.0,
            count: 8,
            k: 2.0 * PI,
        }
        .vectors()
        .iter()
        .map(|t| {
            let (s, c) = 0.3f64.sin_cos();
            [c * t[0] - s * t[1], s * t[0] + c * t[1]]
        })
        .collect();
        let b = fisher_single_dipole_closed(&scene, &setup).unwrap();
        assert_eq!(a.rr, b.rr);
    }

    #[test]
    fn reference_crlb_scales_with_photon_number() {
        let setup = DarkFieldSetup::reference(36);
        let mut scene = DipoleScene::new(reference_dipoles(), 1.0, 0.0).unwrap();
        let mut x1 = Vec::new();
        for pn in [1e6, 1e8] {
            scene.a_in = calibrate_a_in(&scene, &setup, 0, pn).unwrap();
            x1.push(crlb(&fisher_dipoles(&scene, &setup).unwrap(), pn).unwrap().values[1]);
        }
        assert!((x1[0] / x1[1] / 100.0 - 1.0).abs() < 1e-9);
        assert!(x1[1] <= 4.23e-10);
    }

    fn rect_setup() -> PtychoSetup {
        let s = PtychoSetup::reference();
        let c = crate::forward_rect::calibrate_probe_scale(&s.probe, 1e8).unwrap();
        s.with_probe(s.probe.scaled(c))
    }

    #[test]
    fn rect_fisher_matches_finite_differences() {
        let setup = rect_setup();
        let p = reference_rect();
        let f = fisher_rect(&p, &setup).unwrap();
        assert!(f.is_psd());
        let fd = finite_difference_fisher(&p.theta(), &[1e-4; 6], rect_parameter_names(), |t| {
            let o = bandlimited_rect_object(&RectParams::from_theta(t), &setup.object_grid)?;
            Ok(simulate_ptycho(&setup, &o)?.into_iter().map(|i| i.data).collect())
        })
        .unwrap();
        let rel = f.relative_distance(&fd);
        assert!(rel < 1e-3, "{rel}");
        for (a, b) in f.diagonal().iter().zip(fd.diagonal()) {
            assert!((a / b - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn rect_fisher_quadruples_with_probe_amplitude() {
        let setup = rect_setup();
        let p = reference_rect();
        let f = fisher_rect(&p, &setup).unwrap();
        let g = fisher_rect(&p, &setup.with_probe(setup.probe.scaled(2.0))).unwrap();
        assert!((&g.matrix - &f.matrix * 4.0).norm() / g.matrix.norm() < 1e-13);
    }

    #[test]
    fn edge_diagonals_phase_equals_amp_sq_times_amplitude() {
        let setup = rect_setup();
        let p = reference_rect();
        let d = rect_fisher_edge_diagonals(&p, &setup).unwrap();
        assert_eq!(d[5], p.amp * p.amp * d[4]);
        let mut outside = p;
        outside.x = 40.0;
        assert!(matches!(rect_fisher_edge_diagonals(&outside, &setup), Err(Error::Geometry(_))));
        assert!(matches!(fisher_rect(&outside, &setup), Err(Error::Geometry(_))));
    }

    #[test]
    fn csv_has_layout_header() {
        let m = FisherMatrix::new(DMatrix::identity(2, 2), vec!["p".into(), "q".into()]).unwrap();
        let s = m.to_csv();
        assert!(s.starts_with("parameter,p,q\n"));
        assert_eq!(s.lines().count(), 3);
    }
}

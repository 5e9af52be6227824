//! Dark-field Fourier ptychography of point dipoles on a substrate.
//!
//! Each dipole `i` has a real polarisability `alpha_i` and an in-plane
//! position `r_i`. Under a tilted plane wave with transverse wavevector `k_j`
//! the field in the exit pupil is `Q(k) O(k - k_j)`, where
//! `O(k) = sum_i alpha_i exp(-i k.r_i)` and `Q` carries the scalar
//! propagator restricted to the objective aperture. The detector records the
//! squared modulus of the inverse transform of the pupil field.
//!
//! The measurement operator is evaluated in the frame of the object spectrum:
//! for view `j` the aperture `Q(k + k_j)` is sampled on the spectrum grid and a
//! detector-sized window around `-k_j` is inverse transformed. This keeps the
//! simulated data exactly representable by the reconstruction grid.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::fields::{in_pupil, reciprocal_grid, with_plan, ComplexField, GridSpec, RealField, C64};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dipole {
    /// Polarisability in wavelength-cubed units.
    pub alpha: f64,
    pub x: f64,
    pub y: f64,
}

/// Parameter layout: `[alpha_1, x_1, y_1, alpha_2, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DipoleScene {
    pub dipoles: Vec<Dipole>,
    /// Illumination amplitude (square root of photons).
    pub a_in: f64,
    /// Axial position of the observation plane.
    pub z: f64,
}

impl DipoleScene {
    pub fn new(dipoles: Vec<Dipole>, a_in: f64, z: f64) -> Result<Self> {
        if let Some(d) = dipoles.iter().find(|d| !(d.alpha > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "polarisability must be positive, got {}",
                d.alpha
            )));
        }
        Ok(Self { dipoles, a_in, z })
    }

    pub fn theta(&self) -> Vec<f64> {
        self.dipoles.iter().flat_map(|d| [d.alpha, d.x, d.y]).collect()
    }

    pub fn with_theta(&self, theta: &[f64]) -> Self {
        assert_eq!(theta.len() % 3, 0, "dipole parameter vector length");
        Self {
            dipoles: theta
                .chunks_exact(3)
                .map(|c| Dipole {
                    alpha: c[0],
                    x: c[1],
                    y: c[2],
                })
                .collect(),
            a_in: self.a_in,
            z: self.z,
        }
    }

    pub fn parameter_names(&self) -> Vec<String> {
        (1..=self.dipoles.len())
            .flat_map(|i| [format!("alpha{i}"), format!("x{i}"), format!("y{i}")])
            .collect()
    }

    /// Smallest pairwise distance, `inf` for fewer than two dipoles.
    pub fn min_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.dipoles.iter().enumerate() {
            for b in &self.dipoles[i + 1..] {
                best = best.min((a.x - b.x).hypot(a.y - b.y));
            }
        }
        best
    }
}

/// Dipole moment prefactor of a small dielectric sphere in the quasi-static
/// regime, `(eps_r - 2) / (eps_r + 1) * d^3`, as used by the scanner model.
pub fn sphere_dipole_factor(eps_r: f64, diameter: f64) -> f64 {
    (eps_r - 2.0) / (eps_r + 1.0) * diameter.powi(3)
}

/// Illumination directions at a fixed polar angle with evenly spread azimuths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TiltSet {
    /// Polar angle of incidence in radians.
    pub polar: f64,
    pub count: usize,
    pub k: f64,
}

impl TiltSet {
    pub fn vectors(&self) -> Vec<[f64; 2]> {
        let kt = self.k * self.polar.sin();
        (0..self.count)
            .map(|j| {
                let phi = 2.0 * PI * j as f64 / self.count as f64;
                [kt * phi.cos(), kt * phi.sin()]
            })
            .collect()
    }
}

/// Pupil factor `Q(k) = 1_{kNA} A_in k^2 exp(i kz |z|) / (8 i pi kz)`.
pub fn q_value(kx: f64, ky: f64, z: f64, a_in: f64, na: f64, k: f64) -> C64 {
    if !in_pupil(kx, ky, k * na) {
        return C64::new(0.0, 0.0);
    }
    let kz2 = k * k - kx * kx - ky * ky;
    assert!(kz2 > 0.0, "evanescent component inside the pupil");
    let kz = kz2.sqrt();
    let prop = C64::from_polar(1.0, kz * z.abs());
    prop * (a_in * k * k) / (C64::new(0.0, 8.0 * PI * kz))
}

pub fn q_factor(grid: &GridSpec, z: f64, a_in: f64, na: f64, k: f64) -> ComplexField {
    ComplexField::from_fn(*grid, |kx, ky| q_value(kx, ky, z, a_in, na, k))
}

pub fn object_spectrum_at(dipoles: &[Dipole], kx: f64, ky: f64) -> C64 {
    dipoles
        .iter()
        .map(|d| C64::from_polar(d.alpha, -(kx * d.x + ky * d.y)))
        .sum()
}

/// `O(k) = sum_i alpha_i exp(-i k.r_i)` evaluated analytically on `grid`.
pub fn object_spectrum(scene: &DipoleScene, grid: &GridSpec) -> ComplexField {
    ComplexField::from_fn(*grid, |kx, ky| object_spectrum_at(&scene.dipoles, kx, ky))
}

/// Optical constants shared by all views.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Optics {
    pub na: f64,
    pub k: f64,
}

/// Exit-pupil field `Q(k) O(k - k_j)` on `grid`.
pub fn pupil_field(scene: &DipoleScene, tilt: [f64; 2], grid: &GridSpec, optics: Optics) -> ComplexField {
    ComplexField::from_fn(*grid, |kx, ky| {
        let q = q_value(kx, ky, scene.z, scene.a_in, optics.na, optics.k);
        if q == C64::new(0.0, 0.0) {
            return q;
        }
        q * object_spectrum_at(&scene.dipoles, kx - tilt[0], ky - tilt[1])
    })
}

/// Contribution of dipole `i` in the spectrum frame, `Q(k + k_j) alpha_i exp(-i k.r_i)`.
pub fn partial_pupil_field(
    scene: &DipoleScene,
    i: usize,
    tilt: [f64; 2],
    grid: &GridSpec,
    optics: Optics,
) -> Result<ComplexField> {
    let d = *scene.dipoles.get(i).ok_or(Error::OutOfRange {
        index: i,
        len: scene.dipoles.len(),
    })?;
    Ok(ComplexField::from_fn(*grid, |kx, ky| {
        let q = q_value(kx + tilt[0], ky + tilt[1], scene.z, scene.a_in, optics.na, optics.k);
        q * C64::from_polar(d.alpha, -(kx * d.x + ky * d.y))
    }))
}

/// Complete measurement geometry of the dark-field scanner.
#[derive(Debug, Clone, PartialEq)]
pub struct DarkFieldSetup {
    pub optics: Optics,
    pub tilts: Vec<[f64; 2]>,
    /// Grid of the synthesized object spectrum (reciprocal-space units).
    pub spectrum_grid: GridSpec,
    /// Detector side length in pixels.
    pub detector: usize,
}

/// Detector-sized window of the spectrum grid seen by one illumination.
#[derive(Debug, Clone)]
pub struct DarkFieldView {
    pub tilt: [f64; 2],
    /// Top-left sample of the window on the spectrum grid.
    pub ox: usize,
    pub oy: usize,
    /// `Q(k + k_j)` over the window, row-major.
    pub q: Vec<C64>,
}

impl DarkFieldSetup {
    /// Wavelength 500 nm, 60 degree incidence, NA 0.4, 200x200 detector with
    /// 250 nm object-referred pixels and a 375-sample extended spectrum grid.
    pub fn reference(tilt_count: usize) -> Self {
        let k = 2.0 * PI;
        let detector = 200;
        let pixel = 0.5;
        let dk = 2.0 * PI / (detector as f64 * pixel);
        let tilts = TiltSet {
            polar: PI / 3.0,
            count: tilt_count,
            k,
        }
        .vectors();
        Self {
            optics: Optics { na: 0.4, k },
            tilts,
            spectrum_grid: GridSpec::square(375, dk).expect("static grid"),
            detector,
        }
    }

    /// Real-space grid of the detector images (object-referred).
    pub fn detector_grid(&self) -> GridSpec {
        let det_k = GridSpec {
            nx: self.detector,
            ny: self.detector,
            dx: self.spectrum_grid.dx,
            dy: self.spectrum_grid.dy,
        };
        reciprocal_grid(&det_k)
    }

    /// Real-space grid conjugate to the full spectrum grid.
    pub fn object_grid(&self) -> GridSpec {
        reciprocal_grid(&self.spectrum_grid)
    }

    pub fn view_count(&self) -> usize {
        self.tilts.len()
    }

    pub fn views(&self, z: f64, a_in: f64) -> Result<Vec<DarkFieldView>> {
        let g = self.spectrum_grid;
        let n = self.detector;
        let half = n / 2;
        self.tilts
            .iter()
            .map(|&tilt| {
                let ic = g.to_index_x(-tilt[0]).round() as isize;
                let jc = g.to_index_y(-tilt[1]).round() as isize;
                let ox = ic - half as isize;
                let oy = jc - half as isize;
                if ox < 0 || oy < 0 || ox as usize + n > g.nx || oy as usize + n > g.ny {
                    return Err(Error::Geometry(format!(
                        "view window for tilt ({:.3}, {:.3}) leaves the spectrum grid",
                        tilt[0], tilt[1]
                    )));
                }
                let (ox, oy) = (ox as usize, oy as usize);
                let mut q = Vec::with_capacity(n * n);
                for wy in 0..n {
                    let ky = g.y(oy + wy);
                    for wx in 0..n {
                        let kx = g.x(ox + wx);
                        q.push(q_value(kx + tilt[0], ky + tilt[1], z, a_in, self.optics.na, self.optics.k));
                    }
                }
                Ok(DarkFieldView { tilt, ox, oy, q })
            })
            .collect()
    }

    /// Aperture footprint on the spectrum grid for all views.
    pub fn omega(&self) -> Result<crate::fields::OmegaMask> {
        crate::fields::make_omega(&self.tilts, self.optics.na, self.optics.k, &self.spectrum_grid)
    }

    /// Untilted aperture on a detector-sized window centred on `k = 0`.
    pub fn centered_q(&self, z: f64, a_in: f64) -> (usize, usize, Vec<C64>) {
        let g = self.spectrum_grid;
        let n = self.detector;
        let ox = g.cx() - n / 2;
        let oy = g.cy() - n / 2;
        let mut q = Vec::with_capacity(n * n);
        for wy in 0..n {
            for wx in 0..n {
                q.push(q_value(g.x(ox + wx), g.y(oy + wy), z, a_in, self.optics.na, self.optics.k));
            }
        }
        (ox, oy, q)
    }
}

/// Separable phase factors `exp(-i kx x)` and `exp(-i ky y)` over a window.
pub(crate) fn window_phases(g: &GridSpec, ox: usize, oy: usize, n: usize, x: f64, y: f64) -> (Vec<C64>, Vec<C64>) {
    let px = (0..n).map(|w| C64::from_polar(1.0, -g.x(ox + w) * x)).collect();
    let py = (0..n).map(|w| C64::from_polar(1.0, -g.y(oy + w) * y)).collect();
    (px, py)
}

/// Pupil field of one view in the spectrum frame, `Q(k + k_j) O(k)` over the window.
pub fn view_pupil_field(scene: &DipoleScene, setup: &DarkFieldSetup, view: &DarkFieldView) -> Vec<C64> {
    let n = setup.detector;
    let g = &setup.spectrum_grid;
    let mut out = vec![C64::new(0.0, 0.0); n * n];
    for d in &scene.dipoles {
        let (px, py) = window_phases(g, view.ox, view.oy, n, d.x, d.y);
        for wy in 0..n {
            let row = &mut out[wy * n..(wy + 1) * n];
            let qrow = &view.q[wy * n..(wy + 1) * n];
            let pyv = py[wy] * d.alpha;
            for wx in 0..n {
                if qrow[wx].re != 0.0 || qrow[wx].im != 0.0 {
                    row[wx] += qrow[wx] * px[wx] * pyv;
                }
            }
        }
    }
    out
}

/// Detector intensity (expected photons per pixel) for view `j`.
pub fn dark_field_intensity(scene: &DipoleScene, setup: &DarkFieldSetup, j: usize) -> Result<RealField> {
    let views = setup.views(scene.z, scene.a_in)?;
    let view = views.get(j).ok_or(Error::OutOfRange {
        index: j,
        len: views.len(),
    })?;
    Ok(view_intensity(scene, setup, view))
}

pub fn view_intensity(scene: &DipoleScene, setup: &DarkFieldSetup, view: &DarkFieldView) -> RealField {
    let n = setup.detector;
    let mut field = view_pupil_field(scene, setup, view);
    with_plan(n, n, |p| p.inverse(&mut field));
    RealField {
        grid: setup.detector_grid(),
        data: field.iter().map(|v| v.norm_sqr()).collect(),
    }
}

/// All dark-field images of the scene, one per tilt.
pub fn simulate_dark_field(scene: &DipoleScene, setup: &DarkFieldSetup) -> Result<Vec<RealField>> {
    let views = setup.views(scene.z, scene.a_in)?;
    Ok(views.iter().map(|v| view_intensity(scene, setup, v)).collect())
}

/// Photons scattered by dipole `i` into the untilted aperture,
/// `|| F^-1( Q alpha_i exp(-i k.r_i) ) ||^2`.
pub fn photon_count_dip(scene: &DipoleScene, setup: &DarkFieldSetup, i: usize) -> Result<f64> {
    let d = *scene.dipoles.get(i).ok_or(Error::OutOfRange {
        index: i,
        len: scene.dipoles.len(),
    })?;
    let n = setup.detector;
    let (ox, oy, q) = setup.centered_q(scene.z, scene.a_in);
    let (px, py) = window_phases(&setup.spectrum_grid, ox, oy, n, d.x, d.y);
    let mut field: Vec<C64> = (0..n * n)
        .map(|idx| q[idx] * px[idx % n] * py[idx / n] * d.alpha)
        .collect();
    with_plan(n, n, |p| p.inverse(&mut field));
    Ok(field.iter().map(|v| v.norm_sqr()).sum())
}

/// Illumination amplitude for which dipole `i` scatters `pn` photons.
pub fn calibrate_a_in(scene: &DipoleScene, setup: &DarkFieldSetup, i: usize, pn: f64) -> Result<f64> {
    if pn < 0.0 {
        return Err(Error::InvalidParameter(format!("photon count must be >= 0, got {pn}")));
    }
    if pn == 0.0 {
        return Ok(0.0);
    }
    let mut unit = scene.clone();
    unit.a_in = 1.0;
    let base = photon_count_dip(&unit, setup, i)?;
    if base <= 0.0 {
        return Err(Error::SingularModel("dipole scatters no light into the aperture".into()));
    }
    Ok((pn / base).sqrt())
}

/// Two dipoles of the noise-free retrieval example (lengths in wavelengths of 500 nm).
pub fn reference_dipoles() -> Vec<Dipole> {
    vec![
        Dipole {
            alpha: 1.000e-3,
            x: -8.333 / 0.5,
            y: 0.0,
        },
        Dipole {
            alpha: 0.512e-3,
            x: 8.356 / 0.5,
            y: 0.088 / 0.5,
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_setup() -> DarkFieldSetup {
        // 32-pixel detector, 0.5 wavelength pixels, 48-sample spectrum grid
        let k = 2.0 * PI;
        let det = 32;
        let dk = 2.0 * PI / (det as f64 * 0.5);
        DarkFieldSetup {
            optics: Optics { na: 0.4, k },
            tilts: TiltSet {
                polar: PI / 3.0,
                count: 6,
                k,
            }
            .vectors(),
            spectrum_grid: GridSpec::square(det * 2, dk).unwrap(),
            detector: det,
        }
    }

    #[test]
    fn q_outside_pupil_is_zero() {
        let k = 2.0 * PI;
        assert_eq!(q_value(0.41 * k, 0.0, 0.0, 1.0, 0.4, k), C64::new(0.0, 0.0));
    }

    #[test]
    fn q_at_origin() {
        let k = 2.0 * PI;
        let a = 3.0;
        let q = q_value(0.0, 0.0, 0.0, a, 0.4, k);
        let expect = C64::new(0.0, -a * k / (8.0 * PI));
        assert!((q - expect).norm() < 1e-14);
    }

    #[test]
    fn q_ring_matches_scalar_formula() {
        let k = 2.0 * PI;
        let z = 1.7;
        for t in 0..12 {
            let phi = t as f64 * 0.5;
            let kp = 0.3 * k;
            let kz = (k * k - kp * kp).sqrt();
            let q = q_value(kp * phi.cos(), kp * phi.sin(), z, 2.0, 0.4, k);
            let expect = C64::from_polar(1.0, kz * z) * 2.0 * k * k / C64::new(0.0, 8.0 * PI * kz);
            assert!((q - expect).norm() < 1e-13 * expect.norm());
        }
    }

    #[test]
    fn single_dipole_at_origin_spectrum_is_one() {
        let scene = DipoleScene::new(vec![Dipole { alpha: 1.0, x: 0.0, y: 0.0 }], 1.0, 0.0).unwrap();
        let g = GridSpec::square(8, 0.3).unwrap();
        let o = object_spectrum(&scene, &g);
        assert!(o.data.iter().all(|v| (v - C64::new(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn reference_dc_value() {
        let o = object_spectrum_at(&reference_dipoles(), 0.0, 0.0);
        assert!((o.re - 1.512e-3).abs() < 1e-15 && o.im.abs() < 1e-15);
    }

    #[test]
    fn spectrum_matches_term_summation() {
        let ds = reference_dipoles();
        let pts = [(0.3, -1.2), (4.1, 2.2), (-3.3, 0.7), (0.0, 5.5), (1.1, 1.1)];
        for &(kx, ky) in &pts {
            let mut re = 0.0;
            let mut im = 0.0;
            for d in &ds {
                let ph = kx * d.x + ky * d.y;
                re += d.alpha * ph.cos();
                im -= d.alpha * ph.sin();
            }
            let v = object_spectrum_at(&ds, kx, ky);
            assert!((v.re - re).abs() < 1e-15 && (v.im - im).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_scene_gives_dark_images() {
        let setup = small_setup();
        let scene = DipoleScene::new(vec![], 1.0, 0.0).unwrap();
        for img in simulate_dark_field(&scene, &setup).unwrap() {
            assert!(img.data.iter().all(|&v| v == 0.0));
        }
        let pf = pupil_field(&scene, setup.tilts[0], &setup.spectrum_grid, setup.optics);
        assert!(pf.data.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn pupil_field_superposes_partials_and_stays_in_pupil() {
        let setup = small_setup();
        let scene = DipoleScene::new(
            vec![
                Dipole { alpha: 1.0, x: 1.3, y: -0.4 },
                Dipole { alpha: 0.4, x: -2.0, y: 2.5 },
            ],
            2.0,
            0.3,
        )
        .unwrap();
        let g = setup.spectrum_grid;
        let tilt = setup.tilts[2];
        let full = pupil_field(&scene, tilt, &g, setup.optics);
        // superposition in the spectrum frame, then shifted back by the tilt
        let frame = |kx: f64, ky: f64| -> C64 {
            (0..2)
                .map(|i| {
                    let d = scene.dipoles[i];
                    q_value(kx, ky, scene.z, scene.a_in, 0.4, setup.optics.k)
                        * C64::from_polar(d.alpha, -((kx - tilt[0]) * d.x + (ky - tilt[1]) * d.y))
                })
                .sum()
        };
        for idx in 0..g.len() {
            let (kx, ky) = g.coords(idx);
            assert!((full.data[idx] - frame(kx, ky)).norm() < 1e-12);
            if !in_pupil(kx, ky, setup.optics.k * 0.4) {
                assert_eq!(full.data[idx], C64::new(0.0, 0.0));
            }
        }
        let p0 = partial_pupil_field(&scene, 0, tilt, &g, setup.optics).unwrap();
        let p1 = partial_pupil_field(&scene, 1, tilt, &g, setup.optics).unwrap();
        for idx in 0..g.len() {
            let (kx, ky) = g.coords(idx);
            let q = q_value(kx + tilt[0], ky + tilt[1], scene.z, scene.a_in, 0.4, setup.optics.k);
            let expect = q * object_spectrum_at(&scene.dipoles, kx, ky);
            assert!((p0.data[idx] + p1.data[idx] - expect).norm() < 1e-12);
        }
        assert!(partial_pupil_field(&scene, 2, tilt, &g, setup.optics).is_err());
    }

    #[test]
    fn single_dipole_image_is_translated_psf() {
        let setup = small_setup();
        let det = setup.detector_grid();
        // dipole on a detector pixel so the translation is an exact roll
        let (sx, sy) = (3usize, 2usize);
        let d = Dipole {
            alpha: 0.7,
            x: sx as f64 * det.dx,
            y: sy as f64 * det.dy,
        };
        let moved = DipoleScene::new(vec![d], 1.5, 0.0).unwrap();
        let origin = DipoleScene::new(vec![Dipole { alpha: 0.7, x: 0.0, y: 0.0 }], 1.5, 0.0).unwrap();
        for j in 0..setup.tilts.len() {
            let a = dark_field_intensity(&origin, &setup, j).unwrap();
            let b = dark_field_intensity(&moved, &setup, j).unwrap();
            let n = setup.detector;
            for iy in 0..n {
                for ix in 0..n {
                    let src = a.data[iy * n + ix];
                    let dst = b.data[((iy + sy) % n) * n + (ix + sx) % n];
                    assert!((src - dst).abs() < 1e-12 * a.total());
                }
            }
        }
    }

    #[test]
    fn photon_count_scaling_and_calibration() {
        let setup = small_setup();
        let mut scene = DipoleScene::new(vec![Dipole { alpha: 0.3, x: 0.4, y: -1.0 }], 1.0, 0.0).unwrap();
        let p1 = photon_count_dip(&scene, &setup, 0).unwrap();
        scene.a_in = 2.0;
        let p2 = photon_count_dip(&scene, &setup, 0).unwrap();
        assert!((p2 / p1 - 4.0).abs() < 1e-12);
        let a = calibrate_a_in(&scene, &setup, 0, 1e6).unwrap();
        scene.a_in = a;
        let p = photon_count_dip(&scene, &setup, 0).unwrap();
        assert!((p / 1e6 - 1.0).abs() < 1e-10);
        assert_eq!(calibrate_a_in(&scene, &setup, 0, 0.0).unwrap(), 0.0);
        assert!(DipoleScene::new(vec![Dipole { alpha: 0.0, x: 0.0, y: 0.0 }], 1.0, 0.0).is_err());
    }

    #[test]
    fn reference_darkfield_geometry() {
        let s = DarkFieldSetup::reference(36);
        let obj = s.object_grid();
        // 133.3 nm at 500 nm wavelength
        assert!((obj.dx * 500.0 - 133.333).abs() < 1e-2);
        let det = s.detector_grid();
        assert!((det.dx - 0.5).abs() < 1e-12);
        assert_eq!(s.views(0.0, 1.0).unwrap().len(), 36);
        for t in &s.tilts {
            assert!((t[0].hypot(t[1]) - 2.0 * PI * (PI / 3.0).sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn sphere_factor_as_printed() {
        assert!((sphere_dipole_factor(2.5, 0.1) - (0.5 / 3.5) * 1e-3).abs() < 1e-18);
    }
}

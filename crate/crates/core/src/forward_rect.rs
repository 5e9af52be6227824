//! Real-space ptychography of a rectangle in a unit background.
//!
//! The object is `O = 1 + C1 * rect(a, b) shifted to (x1, y1)` with
//! `C1 = A1 exp(i phi1) - 1`. A probe with circular support is stepped over
//! the object on an integer-pixel raster and the far-field intensity of each
//! exit wave is recorded.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::fields::{fft2, ifft2, reciprocal_grid, with_plan, ComplexField, GridSpec, RealField, C64};

/// Parameter layout: `[a, b, x, y, amp, phase]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RectParams {
    pub a: f64,
    pub b: f64,
    pub x: f64,
    pub y: f64,
    pub amp: f64,
    pub phase: f64,
}

pub const RECT_PARAM_NAMES: [&str; 6] = ["a1", "b1", "x1", "y1", "A1", "phi1"];

impl RectParams {
    pub fn new(a: f64, b: f64, x: f64, y: f64, amp: f64, phase: f64) -> Result<Self> {
        let p = Self { a, b, x, y, amp, phase };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.b > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "rectangle widths must be positive, got a={} b={}",
                self.a, self.b
            )));
        }
        if !(self.amp > 0.0 && self.amp <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "amplitude transmission must lie in (0, 1], got {}",
                self.amp
            )));
        }
        if !(self.x.is_finite() && self.y.is_finite() && self.phase.is_finite()) {
            return Err(Error::InvalidParameter("non-finite rectangle parameter".into()));
        }
        Ok(())
    }

    /// Contrast against the background, `A exp(i phi) - 1`.
    pub fn c1(&self) -> C64 {
        C64::from_polar(self.amp, self.phase) - 1.0
    }

    pub fn theta(&self) -> [f64; 6] {
        [self.a, self.b, self.x, self.y, self.amp, self.phase]
    }

    pub fn from_theta(t: &[f64]) -> Self {
        Self {
            a: t[0],
            b: t[1],
            x: t[2],
            y: t[3],
            amp: t[4],
            phase: t[5],
        }
    }
}

/// Ground truth of the noise-free rectangle example (wavelength units).
pub fn reference_rect() -> RectParams {
    RectParams {
        a: 11.46,
        b: 25.99,
        x: 5.71,
        y: 1.42,
        amp: 0.70,
        phase: 3.14,
    }
}

/// Starting point of the noise-free rectangle example.
pub fn reference_rect_guess() -> RectParams {
    RectParams {
        a: 11.00,
        b: 28.00,
        x: 4.00,
        y: 3.00,
        amp: 0.73,
        phase: 3.17,
    }
}

/// Sampled rectangle: interior value `A exp(i phi)`, background 1. Cells whose
/// centre lies exactly on an edge take the interior value.
pub fn rasterize_rect(p: &RectParams, g: &GridSpec) -> Result<ComplexField> {
    p.validate()?;
    let (x0, x1) = (g.x(0), g.x(g.nx - 1));
    let (y0, y1) = (g.y(0), g.y(g.ny - 1));
    if p.x - p.a / 2.0 < x0 || p.x + p.a / 2.0 > x1 || p.y - p.b / 2.0 < y0 || p.y + p.b / 2.0 > y1 {
        return Err(Error::Geometry("rectangle extends beyond the field of view".into()));
    }
    let inside = C64::from_polar(p.amp, p.phase);
    Ok(ComplexField::from_fn(*g, |x, y| {
        if (x - p.x).abs() <= p.a / 2.0 && (y - p.y).abs() <= p.b / 2.0 {
            inside
        } else {
            C64::new(1.0, 0.0)
        }
    }))
}

fn sinc(u: f64) -> f64 {
    if u.abs() < 1e-8 {
        1.0 - u * u / 6.0
    } else {
        u.sin() / u
    }
}

fn dsinc(u: f64) -> f64 {
    if u.abs() < 1e-4 {
        -u / 3.0 + u * u * u / 30.0
    } else {
        (u * u.cos() - u.sin()) / (u * u)
    }
}

/// Spacing of the real-space grid conjugate to `kgrid`.
fn conjugate_spacing(kgrid: &GridSpec) -> (f64, f64) {
    let r = reciprocal_grid(kgrid);
    (r.dx, r.dy)
}

/// Analytic spectrum of `O - 1` on `kgrid` under the unitary discrete
/// transform: `C1 a b sinc(a kx / 2) sinc(b ky / 2) exp(-i k.r1) / (dx dy sqrt(nx ny))`.
pub fn rect_spectrum_model(p: &RectParams, kgrid: &GridSpec) -> ComplexField {
    let (dx, dy) = conjugate_spacing(kgrid);
    let norm = 1.0 / (dx * dy * ((kgrid.nx * kgrid.ny) as f64).sqrt());
    let c = p.c1() * (p.a * p.b * norm);
    let sx: Vec<C64> = (0..kgrid.nx)
        .map(|i| {
            let kx = kgrid.x(i);
            C64::from_polar(sinc(p.a * kx / 2.0), -kx * p.x)
        })
        .collect();
    let sy: Vec<C64> = (0..kgrid.ny)
        .map(|i| {
            let ky = kgrid.y(i);
            C64::from_polar(sinc(p.b * ky / 2.0), -ky * p.y)
        })
        .collect();
    let mut out = ComplexField::zeros(*kgrid);
    for iy in 0..kgrid.ny {
        for ix in 0..kgrid.nx {
            out.data[iy * kgrid.nx + ix] = c * sx[ix] * sy[iy];
        }
    }
    out
}

/// Model spectrum together with its six parameter derivatives.
pub fn rect_spectrum_model_grad(p: &RectParams, kgrid: &GridSpec) -> (Vec<C64>, [Vec<C64>; 6]) {
    let (dx, dy) = conjugate_spacing(kgrid);
    let norm = 1.0 / (dx * dy * ((kgrid.nx * kgrid.ny) as f64).sqrt());
    let c1 = p.c1();
    let e = C64::from_polar(1.0, p.phase);
    let (nx, ny) = (kgrid.nx, kgrid.ny);
    let mut fx = Vec::with_capacity(nx);
    let mut fxa = Vec::with_capacity(nx);
    let mut fxx = Vec::with_capacity(nx);
    for i in 0..nx {
        let kx = kgrid.x(i);
        let ph = C64::from_polar(1.0, -kx * p.x);
        let u = p.a * kx / 2.0;
        // a sinc(a k / 2) and its derivatives
        let v = p.a * sinc(u);
        fx.push(ph * v);
        fxa.push(ph * (sinc(u) + u * dsinc(u)));
        fxx.push(ph * v * C64::new(0.0, -kx));
    }
    let mut gy = Vec::with_capacity(ny);
    let mut gyb = Vec::with_capacity(ny);
    let mut gyy = Vec::with_capacity(ny);
    for i in 0..ny {
        let ky = kgrid.y(i);
        let ph = C64::from_polar(1.0, -ky * p.y);
        let u = p.b * ky / 2.0;
        let v = p.b * sinc(u);
        gy.push(ph * v);
        gyb.push(ph * (sinc(u) + u * dsinc(u)));
        gyy.push(ph * v * C64::new(0.0, -ky));
    }
    let n = nx * ny;
    let mut m = vec![C64::new(0.0, 0.0); n];
    let mut d: [Vec<C64>; 6] = std::array::from_fn(|_| vec![C64::new(0.0, 0.0); n]);
    let dc_damp = e * norm;
    let dc_dphi = C64::new(0.0, p.amp) * e * norm;
    let c = c1 * norm;
    for iy in 0..ny {
        for ix in 0..nx {
            let idx = iy * nx + ix;
            let s = fx[ix] * gy[iy];
            m[idx] = c * s;
            d[0][idx] = c * fxa[ix] * gy[iy];
            d[1][idx] = c * fx[ix] * gyb[iy];
            d[2][idx] = c * fxx[ix] * gy[iy];
            d[3][idx] = c * fx[ix] * gyy[iy];
            d[4][idx] = dc_damp * s;
            d[5][idx] = dc_dphi * s;
        }
    }
    (m, d)
}

/// Band-limited rectangle object, `1 + F^-1(model)` on the real-space grid `g`.
pub fn bandlimited_rect_object(p: &RectParams, g: &GridSpec) -> Result<ComplexField> {
    p.validate()?;
    let model = rect_spectrum_model(p, &reciprocal_grid(g));
    let mut o = ifft2(&model)?;
    o.grid = *g;
    for v in &mut o.data {
        *v += 1.0;
    }
    Ok(o)
}

/// Illumination with a circular support of radius `r0` centred on its grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub field: ComplexField,
    pub r0: f64,
}

impl Probe {
    /// Validates that the field vanishes outside the support.
    pub fn new(field: ComplexField, r0: f64) -> Result<Self> {
        field.check_finite()?;
        if !(r0 > 0.0) {
            return Err(Error::InvalidParameter(format!("support radius must be positive, got {r0}")));
        }
        for idx in 0..field.data.len() {
            let (x, y) = field.grid.coords(idx);
            if x.hypot(y) > r0 * (1.0 + 1e-12) && field.data[idx].norm() != 0.0 {
                return Err(Error::InvalidField(format!(
                    "probe is nonzero at ({x}, {y}) outside its support"
                )));
            }
        }
        Ok(Self { field, r0 })
    }

    /// Flat-phase Gaussian whose intensity has the given FWHM, truncated at `r0`.
    pub fn gaussian(n: usize, dx: f64, fwhm: f64, r0: f64) -> Result<Self> {
        let grid = GridSpec::square(n, dx)?;
        let c = 2.0 * 2f64.ln() / (fwhm * fwhm);
        let field = ComplexField::from_fn(grid, |x, y| {
            let r2 = x * x + y * y;
            if r2.sqrt() <= r0 {
                C64::new((-c * r2).exp(), 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        });
        Self::new(field, r0)
    }

    pub fn grid(&self) -> GridSpec {
        self.field.grid
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut field = self.field.clone();
        field.scale(C64::new(s, 0.0));
        Self { field, r0: self.r0 }
    }
}

/// Total probe photons, `sum |P|^2`.
pub fn photon_count_rect(probe: &Probe) -> f64 {
    probe.field.energy()
}

/// Amplitude factor that brings the probe to `pn` photons.
pub fn calibrate_probe_scale(probe: &Probe, pn: f64) -> Result<f64> {
    if pn < 0.0 {
        return Err(Error::InvalidParameter(format!("photon count must be >= 0, got {pn}")));
    }
    if pn == 0.0 {
        return Ok(0.0);
    }
    let e = photon_count_rect(probe);
    if e <= 0.0 {
        return Err(Error::SingularModel("probe carries no photons".into()));
    }
    Ok((pn / e).sqrt())
}

/// Fraction of the area shared by two discs of radius `r0` whose centres are `d` apart.
pub fn disc_overlap_ratio(d: f64, r0: f64) -> f64 {
    let u = (d / (2.0 * r0)).clamp(0.0, 1.0);
    2.0 / PI * (u.acos() - u * (1.0 - u * u).sqrt())
}

/// Probe positions in whole object pixels relative to the object centre.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanPlan {
    pub shifts: Vec<[isize; 2]>,
    /// Area overlap of adjacent positions, for reporting.
    pub overlap: f64,
}

impl ScanPlan {
    /// Square raster of `m x m` positions with the given pitch (pixels), row by row.
    pub fn raster(m: usize, pitch: usize, r0_px: f64) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidParameter("scan raster must contain at least one position".into()));
        }
        let half = (m as isize - 1) * pitch as isize / 2;
        let mut shifts = Vec::with_capacity(m * m);
        for j in 0..m as isize {
            for i in 0..m as isize {
                shifts.push([i * pitch as isize - half, j * pitch as isize - half]);
            }
        }
        Ok(Self {
            shifts,
            overlap: disc_overlap_ratio(pitch as f64, r0_px),
        })
    }

    pub fn len(&self) -> usize {
        self.shifts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shifts.is_empty()
    }
}

/// Object grid, probe and scan plan of one real-space ptychography experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct PtychoSetup {
    pub object_grid: GridSpec,
    pub probe: Probe,
    pub plan: ScanPlan,
}

impl PtychoSetup {
    pub fn new(object_grid: GridSpec, probe: Probe, plan: ScanPlan) -> Result<Self> {
        let s = Self {
            object_grid,
            probe,
            plan,
        };
        if s.plan.is_empty() {
            return Err(Error::InvalidParameter("empty scan plan".into()));
        }
        let pg = s.probe.grid();
        if (pg.dx - object_grid.dx).abs() > 1e-12 * pg.dx || (pg.dy - object_grid.dy).abs() > 1e-12 * pg.dy {
            return Err(Error::ShapeMismatch {
                expected: format!("probe spacing {}", object_grid.dx),
                found: format!("{}", pg.dx),
            });
        }
        for j in 0..s.plan.len() {
            s.window_origin(j)?;
        }
        Ok(s)
    }

    /// 90x90 object of 1-wavelength cells, 60x60 Gaussian probe (FWHM 15,
    /// support radius 15) on a 5x5 raster with 6-pixel pitch.
    pub fn reference() -> Self {
        let object_grid = GridSpec::square(90, 1.0).expect("static grid");
        let probe = Probe::gaussian(60, 1.0, 15.0, 15.0).expect("static probe");
        let plan = ScanPlan::raster(5, 6, 15.0).expect("static plan");
        Self::new(object_grid, probe, plan).expect("static setup")
    }

    pub fn views(&self) -> usize {
        self.plan.len()
    }

    /// Top-left object pixel covered by the probe window of view `j`.
    pub fn window_origin(&self, j: usize) -> Result<(usize, usize)> {
        let s = self.plan.shifts.get(j).ok_or(Error::OutOfRange {
            index: j,
            len: self.plan.len(),
        })?;
        let pg = self.probe.grid();
        let ox = self.object_grid.cx() as isize - pg.cx() as isize + s[0];
        let oy = self.object_grid.cy() as isize - pg.cy() as isize + s[1];
        if ox < 0 || oy < 0 || ox as usize + pg.nx > self.object_grid.nx || oy as usize + pg.ny > self.object_grid.ny {
            return Err(Error::Geometry(format!(
                "probe window for shift ({}, {}) leaves the object grid",
                s[0], s[1]
            )));
        }
        Ok((ox as usize, oy as usize))
    }

    /// Probe shift of view `j` in length units.
    pub fn shift(&self, j: usize) -> [f64; 2] {
        let s = self.plan.shifts[j];
        [s[0] as f64 * self.object_grid.dx, s[1] as f64 * self.object_grid.dy]
    }

    /// `sum_j |P(r - R_j)|^2` on the object grid.
    pub fn illumination(&self) -> RealField {
        let mut out = RealField::zeros(self.object_grid);
        let pg = self.probe.grid();
        for j in 0..self.views() {
            let (ox, oy) = self.window_origin(j).expect("validated");
            for wy in 0..pg.ny {
                for wx in 0..pg.nx {
                    out.data[(oy + wy) * self.object_grid.nx + ox + wx] += self.probe.field.data[wy * pg.nx + wx].norm_sqr();
                }
            }
        }
        out
    }

    pub fn with_probe(&self, probe: Probe) -> Self {
        Self {
            probe,
            ..self.clone()
        }
    }
}

/// `psi_j = P(r - R_j) O(r)` over the probe window of view `j`.
pub fn exit_wave(setup: &PtychoSetup, object: &ComplexField, j: usize) -> Result<ComplexField> {
    if !object.grid.same_shape(&setup.object_grid) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", setup.object_grid.nx, setup.object_grid.ny),
            found: format!("{}x{}", object.grid.nx, object.grid.ny),
        });
    }
    let (ox, oy) = setup.window_origin(j)?;
    let pg = setup.probe.grid();
    let mut out = ComplexField::zeros(pg);
    for wy in 0..pg.ny {
        for wx in 0..pg.nx {
            out.data[wy * pg.nx + wx] = setup.probe.field.data[wy * pg.nx + wx] * object.data[(oy + wy) * object.grid.nx + ox + wx];
        }
    }
    Ok(out)
}

/// `|F(psi)|^2` on the detector.
pub fn far_field_intensity(psi: &ComplexField) -> Result<RealField> {
    Ok(fft2(psi)?.intensity())
}

/// Far-field intensities of every view.
pub fn simulate_ptycho(setup: &PtychoSetup, object: &ComplexField) -> Result<Vec<RealField>> {
    (0..setup.views())
        .map(|j| {
            let mut psi = exit_wave(setup, object, j)?;
            let g = reciprocal_grid(&psi.grid);
            with_plan(psi.grid.nx, psi.grid.ny, |p| p.forward(&mut psi.data));
            Ok(RealField {
                grid: g,
                data: psi.data.iter().map(|v| v.norm_sqr()).collect(),
            })
        })
        .collect()
}

/// Fresnel number `(2 r0)^2 / (lambda z)` of a circular aperture.
pub fn fresnel_number(r0: f64, wavelength: f64, z: f64) -> f64 {
    (2.0 * r0).powi(2) / (wavelength * z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invisible_object_is_unit() {
        let g = GridSpec::square(20, 1.0).unwrap();
        let p = RectParams::new(4.0, 3.0, 0.5, -1.0, 1.0, 0.0).unwrap();
        let o = rasterize_rect(&p, &g).unwrap();
        assert!(o.data.iter().all(|v| (v - C64::new(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn reference_rect_interior_and_contrast() {
        let p = reference_rect();
        let v = C64::from_polar(p.amp, p.phase);
        assert!((v.re + 0.6999).abs() < 1e-4 && (v.im - 0.0011).abs() < 5e-5);
        assert!((p.c1().norm() - 1.6999).abs() < 1e-4);
        let o = rasterize_rect(&p, &GridSpec::square(90, 1.0).unwrap()).unwrap();
        assert_eq!(o.get(45 + 6, 45 + 1), v);
    }

    #[test]
    fn interior_count_matches_point_test() {
        let g = GridSpec::new(31, 27, 0.7, 1.1).unwrap();
        let p = RectParams::new(5.3, 7.9, 1.23, -2.2, 0.5, 1.0).unwrap();
        let o = rasterize_rect(&p, &g).unwrap();
        let inside = o.data.iter().filter(|v| (*v - C64::new(1.0, 0.0)).norm() > 0.0).count();
        let mut oracle = 0;
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                let x = (ix as f64 - 15.0) * 0.7;
                let y = (iy as f64 - 13.0) * 1.1;
                if x >= 1.23 - 2.65 && x <= 1.23 + 2.65 && y >= -2.2 - 3.95 && y <= -2.2 + 3.95 {
                    oracle += 1;
                }
            }
        }
        assert_eq!(inside, oracle);
        let far = RectParams::new(5.0, 5.0, 100.0, 0.0, 0.5, 0.0).unwrap();
        assert!(rasterize_rect(&far, &g).is_err());
    }

    #[test]
    fn model_zeros_and_dc() {
        let kg = reciprocal_grid(&GridSpec::square(64, 0.5).unwrap());
        let p = RectParams::new(8.0, 4.0, 0.0, 0.0, 0.6, 0.3).unwrap();
        let m = rect_spectrum_model(&p, &kg);
        // kx = 2 pi / a lands on the grid: dk = 2 pi / 32, a = 8 -> index 4
        let z = m.get(kg.cx() + 4, kg.cy());
        assert!(z.norm() < 1e-14);
        let dc = m.get(kg.cx(), kg.cy());
        let expect = p.c1() * p.a * p.b / (0.25 * 64.0);
        assert!((dc - expect).norm() < 1e-12);
    }

    #[test]
    fn model_matches_transform_of_aligned_raster() {
        // rectangle whose edges fall between cell centres, odd cell counts
        let g = GridSpec::square(128, 0.25).unwrap();
        let p = RectParams::new(5.25, 3.25, 0.0, 0.0, 0.5, 1.0).unwrap();
        let mut o = rasterize_rect(&p, &g).unwrap();
        for v in &mut o.data {
            *v -= 1.0;
        }
        let f = fft2(&o).unwrap();
        let kg = reciprocal_grid(&g);
        let m = rect_spectrum_model(&p, &kg);
        // compare at low frequencies where the Dirichlet kernel matches sinc
        let mut worst: f64 = 0.0;
        let dc = m.get(kg.cx(), kg.cy()).norm();
        for dy in -3i64..=3 {
            for dx in -3i64..=3 {
                let ix = (kg.cx() as i64 + dx) as usize;
                let iy = (kg.cy() as i64 + dy) as usize;
                worst = worst.max((f.get(ix, iy) - m.get(ix, iy)).norm() / dc);
            }
        }
        assert!(worst < 2e-3, "worst {worst}");
        assert!((f.get(kg.cx(), kg.cy()) - m.get(kg.cx(), kg.cy())).norm() < 1e-12 * dc);
    }

    #[test]
    fn model_gradient_matches_differences() {
        let kg = reciprocal_grid(&GridSpec::square(16, 1.0).unwrap());
        let p = RectParams::new(4.3, 5.1, 0.7, -1.1, 0.6, 2.0).unwrap();
        let (_, d) = rect_spectrum_model_grad(&p, &kg);
        let t = p.theta();
        for l in 0..6 {
            let h = 1e-6;
            let mut tp = t;
            tp[l] += h;
            let mut tm = t;
            tm[l] -= h;
            let mp = rect_spectrum_model(&RectParams::from_theta(&tp), &kg);
            let mm = rect_spectrum_model(&RectParams::from_theta(&tm), &kg);
            for idx in 0..kg.len() {
                let fd = (mp.data[idx] - mm.data[idx]) / (2.0 * h);
                assert!((fd - d[l][idx]).norm() < 1e-7, "param {l} idx {idx}");
            }
        }
    }

    #[test]
    fn edge_convention_does_not_touch_model() {
        let kg = reciprocal_grid(&GridSpec::square(32, 1.0).unwrap());
        let g = GridSpec::square(32, 1.0).unwrap();
        // edges exactly on cell centres: raster depends on the edge rule, the model does not
        let p = RectParams::new(6.0, 4.0, 1.0, 0.0, 0.5, 0.0).unwrap();
        let inclusive = rasterize_rect(&p, &g).unwrap();
        let exclusive = ComplexField::from_fn(g, |x, y| {
            if (x - 1.0).abs() < 3.0 && y.abs() < 2.0 {
                C64::new(0.5, 0.0)
            } else {
                C64::new(1.0, 0.0)
            }
        });
        assert_ne!(inclusive, exclusive);
        let a = rect_spectrum_model(&p, &kg);
        let b = rect_spectrum_model(&p, &kg);
        assert_eq!(a, b);
    }

    #[test]
    fn bandlimited_object_dc_matches_area() {
        let g = GridSpec::square(64, 1.0).unwrap();
        let p = RectParams::new(10.3, 7.7, 2.2, -3.1, 0.8, 0.5).unwrap();
        let o = bandlimited_rect_object(&p, &g).unwrap();
        let mean: C64 = o.data.iter().sum::<C64>() / 4096.0;
        let expect = 1.0 + p.c1() * p.a * p.b / 4096.0;
        assert!((mean - expect).norm() < 1e-12);
    }

    #[test]
    fn exit_wave_of_unit_object_is_probe() {
        let s = PtychoSetup::reference();
        let o = ComplexField::constant(s.object_grid, C64::new(1.0, 0.0));
        for j in [0, 7, 24] {
            let psi = exit_wave(&s, &o, j).unwrap();
            assert_eq!(psi.data, s.probe.field.data);
        }
    }

    #[test]
    fn exit_wave_product_and_modulus_bound() {
        let s = PtychoSetup::reference();
        let o = rasterize_rect(&reference_rect(), &s.object_grid).unwrap();
        let j = 13;
        let psi = exit_wave(&s, &o, j).unwrap();
        let (ox, oy) = s.window_origin(j).unwrap();
        for wy in 0..60 {
            for wx in 0..60 {
                let p = s.probe.field.get(wx, wy);
                let v = psi.get(wx, wy);
                assert_eq!(v, p * o.get(ox + wx, oy + wy));
                assert!(v.norm() <= p.norm() + 1e-15);
            }
        }
    }

    #[test]
    fn far_field_of_delta_is_flat_and_parseval_holds() {
        let g = GridSpec::square(8, 1.0).unwrap();
        let mut d = ComplexField::zeros(g);
        d.data[g.index(4, 4)] = C64::new(2.0, 0.0);
        let i = far_field_intensity(&d).unwrap();
        assert!(i.data.iter().all(|&v| (v - 4.0 / 64.0).abs() < 1e-15));
        let s = PtychoSetup::reference();
        let o = bandlimited_rect_object(&reference_rect(), &s.object_grid).unwrap();
        let imgs = simulate_ptycho(&s, &o).unwrap();
        for (j, img) in imgs.iter().enumerate() {
            let e = exit_wave(&s, &o, j).unwrap().energy();
            assert!((img.total() - e).abs() < 1e-12 * e);
        }
    }

    #[test]
    fn far_field_two_by_two_oracle() {
        let g = GridSpec::square(2, 1.0).unwrap();
        let v = [C64::new(1.0, 0.5), C64::new(-0.3, 0.2), C64::new(0.7, -1.0), C64::new(0.1, 0.0)];
        let psi = ComplexField::from_vec(g, v.to_vec()).unwrap();
        let i = far_field_intensity(&psi).unwrap();
        // centred grid: samples at x in {-1, 0}, k in {-pi, 0}
        for ky in 0..2 {
            for kx in 0..2 {
                let (kxv, kyv) = ((kx as f64 - 1.0) * PI, (ky as f64 - 1.0) * PI);
                let mut acc = C64::new(0.0, 0.0);
                for y in 0..2 {
                    for x in 0..2 {
                        let ph = -(kxv * (x as f64 - 1.0) + kyv * (y as f64 - 1.0));
                        acc += v[y * 2 + x] * C64::from_polar(1.0, ph);
                    }
                }
                assert!((i.data[ky * 2 + kx] - acc.norm_sqr() / 4.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn photon_count_scaling() {
        let p = Probe::gaussian(60, 1.0, 15.0, 15.0).unwrap();
        let e = photon_count_rect(&p);
        assert!((photon_count_rect(&p.scaled(3.0)) - 9.0 * e).abs() < 1e-9 * e);
        let s = calibrate_probe_scale(&p, 1e8).unwrap();
        assert!((photon_count_rect(&p.scaled(s)) / 1e8 - 1.0).abs() < 1e-12);
        assert_eq!(photon_count_rect(&p.scaled(0.0)), 0.0);
    }

    #[test]
    fn reference_ptycho_geometry() {
        let s = PtychoSetup::reference();
        assert_eq!(s.views(), 25);
        assert!((s.plan.overlap - 0.75).abs() < 0.01);
        // r0 = 0.45 um, lambda = 30 nm, z = 1.88 cm
        assert!((fresnel_number(0.45e-6, 30e-9, 1.88e-2) - 0.0014).abs() < 5e-5);
        // probe intensity at half maximum 7.5 wavelengths from the centre
        let c = 2.0 * 2f64.ln() / 225.0;
        assert!(((-2.0 * c * 56.25f64).exp() - 0.5).abs() < 1e-12);
        assert!(Probe::new(ComplexField::constant(GridSpec::square(8, 1.0).unwrap(), C64::new(1.0, 0.0)), 2.0).is_err());
    }
}

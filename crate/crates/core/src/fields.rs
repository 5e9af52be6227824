//! Physical grids, complex fields, the centered unitary Fourier transform and
//! the pupil / retrievable-region masks.
//!
//! All lengths are in wavelength units. A grid with `n` samples and spacing
//! `d` places the origin at sample `n / 2`, so sample `i` sits at
//! `(i - n / 2) * d`. The forward transform uses the kernel `exp(-i k.r)` and
//! is unitary, which makes `|value|^2` summed over a field invariant between
//! real and reciprocal space.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

/// Regular sampling grid, origin at sample `n / 2` on each axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, dx: f64, dy: f64) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::InvalidGrid(format!(
                "sample counts must be >= 2, got {nx}x{ny}"
            )));
        }
        if !(dx > 0.0 && dy > 0.0 && dx.is_finite() && dy.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "spacings must be positive and finite, got ({dx}, {dy})"
            )));
        }
        Ok(Self { nx, ny, dx, dy })
    }

    pub fn square(n: usize, d: f64) -> Result<Self> {
        Self::new(n, n, d, d)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of the origin sample along x.
    pub fn cx(&self) -> usize {
        self.nx / 2
    }

    pub fn cy(&self) -> usize {
        self.ny / 2
    }

    pub fn x(&self, ix: usize) -> f64 {
        (ix as f64 - self.cx() as f64) * self.dx
    }

    pub fn y(&self, iy: usize) -> f64 {
        (iy as f64 - self.cy() as f64) * self.dy
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    /// Coordinates of flat sample `idx` (row-major, y outer).
    pub fn coords(&self, idx: usize) -> (f64, f64) {
        (self.x(idx % self.nx), self.y(idx / self.nx))
    }

    /// Total field of view `(nx dx, ny dy)`.
    pub fn fov(&self) -> (f64, f64) {
        (self.nx as f64 * self.dx, self.ny as f64 * self.dy)
    }

    /// Fractional sample position of a physical coordinate.
    pub fn to_index_x(&self, x: f64) -> f64 {
        x / self.dx + self.cx() as f64
    }

    pub fn to_index_y(&self, y: f64) -> f64 {
        y / self.dy + self.cy() as f64
    }

    pub fn same_shape(&self, other: &GridSpec) -> bool {
        self.nx == other.nx && self.ny == other.ny
    }
}

/// Grid conjugate to `g` under the discrete transform: `dk = 2 pi / (n dx)`.
pub fn reciprocal_grid(g: &GridSpec) -> GridSpec {
    GridSpec {
        nx: g.nx,
        ny: g.ny,
        dx: 2.0 * PI / (g.nx as f64 * g.dx),
        dy: 2.0 * PI / (g.ny as f64 * g.dy),
    }
}

/// Spacing of an extended grid of `n_ext` samples covering the same extent
/// as `n_det` samples of spacing `det_spacing`.
pub fn extended_spacing(n_det: usize, det_spacing: f64, n_ext: usize) -> f64 {
    n_det as f64 * det_spacing / n_ext as f64
}

/// Complex samples on a grid, row-major with y as the outer index.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    pub grid: GridSpec,
    pub data: Vec<C64>,
}

impl ComplexField {
    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            grid,
            data: vec![C64::new(0.0, 0.0); grid.len()],
        }
    }

    pub fn constant(grid: GridSpec, value: C64) -> Self {
        Self {
            grid,
            data: vec![value; grid.len()],
        }
    }

    pub fn from_vec(grid: GridSpec, data: Vec<C64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} samples", grid.len()),
                found: format!("{} samples", data.len()),
            });
        }
        let field = Self { grid, data };
        field.check_finite()?;
        Ok(field)
    }

    /// Evaluates `f(x, y)` at every sample.
    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(f64, f64) -> C64) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for iy in 0..grid.ny {
            let y = grid.y(iy);
            for ix in 0..grid.nx {
                data.push(f(grid.x(ix), y));
            }
        }
        Self { grid, data }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self
            .data
            .iter()
            .position(|v| !(v.re.is_finite() && v.im.is_finite()))
        {
            Some(i) => Err(Error::InvalidField(format!(
                "non-finite sample at index {i}"
            ))),
            None => Ok(()),
        }
    }

    pub fn get(&self, ix: usize, iy: usize) -> C64 {
        self.data[self.grid.index(ix, iy)]
    }

    /// Sum of `|value|^2`.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn intensity(&self) -> RealField {
        RealField {
            grid: self.grid,
            data: self.data.iter().map(|v| v.norm_sqr()).collect(),
        }
    }

    pub fn scale(&mut self, s: C64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}

/// Real samples on a grid (intensities, photon counts).
#[derive(Debug, Clone, PartialEq)]
pub struct RealField {
    pub grid: GridSpec,
    pub data: Vec<f64>,
}

impl RealField {
    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            grid,
            data: vec![0.0; grid.len()],
        }
    }

    pub fn from_vec(grid: GridSpec, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} samples", grid.len()),
                found: format!("{} samples", data.len()),
            });
        }
        Ok(Self { grid, data })
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn to_complex(&self) -> ComplexField {
        ComplexField {
            grid: self.grid,
            data: self.data.iter().map(|&v| C64::new(v, 0.0)).collect(),
        }
    }
}

/// Planned centered 2D transform for one array shape.
pub struct Fft2 {
    nx: usize,
    ny: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    buf: Vec<C64>,
    tbuf: Vec<C64>,
    scratch: Vec<C64>,
}

impl Fft2 {
    pub fn new(nx: usize, ny: usize) -> Self {
        let mut planner = FftPlanner::new();
        let row_fwd = planner.plan_fft_forward(nx);
        let row_inv = planner.plan_fft_inverse(nx);
        let col_fwd = planner.plan_fft_forward(ny);
        let col_inv = planner.plan_fft_inverse(ny);
        let scratch_len = [&row_fwd, &row_inv, &col_fwd, &col_inv]
            .iter()
            .map(|p| p.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        Self {
            nx,
            ny,
            row_fwd,
            row_inv,
            col_fwd,
            col_inv,
            buf: vec![C64::default(); nx * ny],
            tbuf: vec![C64::default(); nx * ny],
            scratch: vec![C64::default(); scratch_len],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    /// Centered unitary forward transform, kernel `exp(-i k.r)`, in place.
    pub fn forward(&mut self, data: &mut [C64]) {
        self.transform(data, false);
    }

    /// Exact inverse of [`Fft2::forward`], in place.
    pub fn inverse(&mut self, data: &mut [C64]) {
        self.transform(data, true);
    }

    fn transform(&mut self, data: &mut [C64], inverse: bool) {
        let (nx, ny) = (self.nx, self.ny);
        assert_eq!(data.len(), nx * ny, "buffer does not match planned shape");
        let (cx, cy) = (nx / 2, ny / 2);
        // move the origin sample to index 0
        for iy in 0..ny {
            let sy = (iy + cy) % ny;
            let src = &data[sy * nx..(sy + 1) * nx];
            let dst = &mut self.buf[iy * nx..(iy + 1) * nx];
            dst[..nx - cx].copy_from_slice(&src[cx..]);
            dst[nx - cx..].copy_from_slice(&src[..cx]);
        }
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        row.process_with_scratch(&mut self.buf, &mut self.scratch);
        for iy in 0..ny {
            for ix in 0..nx {
                self.tbuf[ix * ny + iy] = self.buf[iy * nx + ix];
            }
        }
        col.process_with_scratch(&mut self.tbuf, &mut self.scratch);
        let norm = 1.0 / ((nx * ny) as f64).sqrt();
        for ix in 0..nx {
            let dx = (ix + cx) % nx;
            for iy in 0..ny {
                let dy = (iy + cy) % ny;
                data[dy * nx + dx] = self.tbuf[ix * ny + iy] * norm;
            }
        }
    }
}

thread_local! {
    static PLANS: RefCell<HashMap<(usize, usize), Fft2>> = RefCell::new(HashMap::new());
}

/// Runs `f` with a cached per-thread plan for the given shape.
pub fn with_plan<R>(nx: usize, ny: usize, f: impl FnOnce(&mut Fft2) -> R) -> R {
    PLANS.with(|cell| {
        let mut plans = cell.borrow_mut();
        let plan = plans.entry((nx, ny)).or_insert_with(|| Fft2::new(nx, ny));
        f(plan)
    })
}

/// Forward transform onto the reciprocal grid.
pub fn fft2(f: &ComplexField) -> Result<ComplexField> {
    f.check_finite()?;
    let mut data = f.data.clone();
    with_plan(f.grid.nx, f.grid.ny, |p| p.forward(&mut data));
    Ok(ComplexField {
        grid: reciprocal_grid(&f.grid),
        data,
    })
}

/// Inverse transform; `ifft2(fft2(f)) == f` including the grid.
pub fn ifft2(f: &ComplexField) -> Result<ComplexField> {
    f.check_finite()?;
    let mut data = f.data.clone();
    with_plan(f.grid.nx, f.grid.ny, |p| p.inverse(&mut data));
    Ok(ComplexField {
        grid: reciprocal_grid(&f.grid),
        data,
    })
}

/// Pupil membership test shared by every mask and model evaluation.
#[inline]
pub fn in_pupil(kx: f64, ky: f64, k_na: f64) -> bool {
    kx * kx + ky * ky <= k_na * k_na * (1.0 + 1e-12)
}

/// Indicator of the objective aperture, `|k| <= k NA`.
#[derive(Debug, Clone)]
pub struct PupilMask {
    pub grid: GridSpec,
    pub na: f64,
    pub k: f64,
    pub values: Vec<bool>,
}

impl PupilMask {
    pub fn new(grid: GridSpec, na: f64, k: f64) -> Result<Self> {
        if !(na > 0.0 && na < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "numerical aperture must lie in (0, 1), got {na}"
            )));
        }
        let k_na = k * na;
        let mut values = Vec::with_capacity(grid.len());
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                values.push(in_pupil(grid.x(ix), grid.y(iy), k_na));
            }
        }
        Ok(Self {
            grid,
            na,
            k,
            values,
        })
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }
}

/// Union of the tilted pupil disks: the part of the object spectrum that the
/// dark-field measurements can recover.
#[derive(Debug, Clone)]
pub struct OmegaMask {
    pub grid: GridSpec,
    pub tilts: Vec<[f64; 2]>,
    pub na: f64,
    pub k: f64,
    pub values: Vec<bool>,
    /// Tilts with `|k_j| <= k NA`, i.e. bright-field illumination.
    pub dark_field_violations: Vec<usize>,
}

impl OmegaMask {
    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.values[idx]
    }

    /// Flat indices of the samples inside the region.
    pub fn indices(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| v.then_some(i))
            .collect()
    }

    pub fn apply(&self, f: &mut ComplexField) {
        for (v, &m) in f.data.iter_mut().zip(&self.values) {
            if !m {
                *v = C64::new(0.0, 0.0);
            }
        }
    }
}

/// Builds the indicator of `U_j { k : |k + k_j| <= k NA }` on the spectrum grid.
pub fn make_omega(tilts: &[[f64; 2]], na: f64, k: f64, grid: &GridSpec) -> Result<OmegaMask> {
    if tilts.is_empty() {
        return Err(Error::InvalidParameter("empty tilt set".into()));
    }
    if !(na > 0.0 && na < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "numerical aperture must lie in (0, 1), got {na}"
        )));
    }
    let k_na = k * na;
    let dark_field_violations = tilts
        .iter()
        .enumerate()
        .filter(|(_, t)| t[0].hypot(t[1]) <= k_na)
        .map(|(i, _)| i)
        .collect();
    let mut values = vec![false; grid.len()];
    for iy in 0..grid.ny {
        let ky = grid.y(iy);
        for ix in 0..grid.nx {
            let kx = grid.x(ix);
            values[grid.index(ix, iy)] = tilts.iter().any(|t| in_pupil(kx + t[0], ky + t[1], k_na));
        }
    }
    Ok(OmegaMask {
        grid: *grid,
        tilts: tilts.to_vec(),
        na,
        k,
        values,
        dark_field_violations,
    })
}

const PTYF_MAGIC: &[u8; 4] = b"PTYF";
const PTYF_VERSION: u8 = 1;

/// Serializes a field in the PTYF v1 layout.
pub fn write_ptyf<W: Write>(mut w: W, f: &ComplexField) -> Result<()> {
    w.write_all(PTYF_MAGIC)?;
    w.write_all(&[PTYF_VERSION])?;
    w.write_all(&(f.grid.nx as u32).to_le_bytes())?;
    w.write_all(&(f.grid.ny as u32).to_le_bytes())?;
    w.write_all(&f.grid.dx.to_le_bytes())?;
    w.write_all(&f.grid.dy.to_le_bytes())?;
    let mut buf = Vec::with_capacity(16 * f.data.len());
    for v in &f.data {
        buf.extend_from_slice(&v.re.to_le_bytes());
        buf.extend_from_slice(&v.im.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_ptyf<R: Read>(mut r: R) -> Result<ComplexField> {
    let mut head = [0u8; 4 + 1 + 4 + 4 + 8 + 8];
    r.read_exact(&mut head)
        .map_err(|e| Error::Format(format!("truncated PTYF header: {e}")))?;
    if &head[0..4] != PTYF_MAGIC {
        return Err(Error::Format("bad magic, expected PTYF".into()));
    }
    if head[4] != PTYF_VERSION {
        return Err(Error::Format(format!("unsupported PTYF version {}", head[4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap()) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(head[o..o + 8].try_into().unwrap());
    let grid = GridSpec::new(u32_at(5), u32_at(9), f64_at(13), f64_at(21))?;
    let mut body = vec![0u8; 16 * grid.len()];
    r.read_exact(&mut body)
        .map_err(|e| Error::Format(format!("truncated PTYF body: {e}")))?;
    let data = body
        .chunks_exact(16)
        .map(|c| {
            C64::new(
                f64::from_le_bytes(c[0..8].try_into().unwrap()),
                f64::from_le_bytes(c[8..16].try_into().unwrap()),
            )
        })
        .collect();
    Ok(ComplexField { grid, data })
}

pub fn save_ptyf(path: impl AsRef<Path>, f: &ComplexField) -> Result<()> {
    let mut bytes = Vec::new();
    write_ptyf(&mut bytes, f)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_ptyf(path: impl AsRef<Path>) -> Result<ComplexField> {
    let bytes = std::fs::read(path)?;
    read_ptyf(bytes.as_slice())
}

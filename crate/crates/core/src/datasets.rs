//! Point sets backing the empirical data distribution, their generators and
//! the `FMDS` binary format.
//!
//! `FMDS` layout, little-endian:
//!
//! | offset | size    | field                               |
//! |--------|---------|-------------------------------------|
//! | 0      | 4       | magic `b"FMDS"`                     |
//! | 4      | 4       | version (`u32`, = 1)                |
//! | 8      | 4       | n (`u32`)                           |
//! | 12     | 4       | d (`u32`)                           |
//! | 16     | 4       | flags (`u32`, bit 0 = standardized) |
//! | 20     | 4       | reserved (`u32`, = 0)               |
//! | 24     | 4·n·d   | `f32` payload, row-major            |

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;

pub const FMDS_MAGIC: &[u8; 4] = b"FMDS";
pub const FMDS_VERSION: u32 = 1;
pub const FMDS_HEADER_LEN: usize = 24;
const FLAG_STANDARDIZED: u32 = 1;

/// Affine map applied at load time: stored = (raw - shift) / scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Normalization {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }
}

/// `n` points in `R^d`, stored as `f32` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    points: Array2<f32>,
    pub name: String,
    pub normalization: Normalization,
    pub standardized: bool,
}

impl TrainingSet {
    pub fn new(points: Array2<f32>, name: impl Into<String>) -> Result<Self> {
        let (n, d) = points.dim();
        if n == 0 || d == 0 {
            return Err(Error::invalid(format!("training set must be non-empty, got {n}x{d}")));
        }
        if let Some(pos) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite value at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        Ok(TrainingSet {
            points,
            name: name.into(),
            normalization: Normalization::identity(d),
            standardized: false,
        })
    }

    /// Builds a set from `f64` rows (rounded to `f32` storage).
    pub fn from_rows(rows: &[Vec<f64>], name: impl Into<String>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("rows have differing lengths"));
        }
        let flat: Vec<f32> = rows.iter().flatten().map(|&v| v as f32).collect();
        let points = Array2::from_shape_vec((rows.len(), d), flat).map_err(|e| Error::invalid(e.to_string()))?;
        Self::new(points, name)
    }

    pub fn n(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &Array2<f32> {
        &self.points
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.points.row(i)
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.points.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    /// All points widened to `f64`, row-major.
    pub fn to_f64(&self) -> Array2<f64> {
        self.points.mapv(f64::from)
    }

    /// Per-coordinate mean and (population) standard deviation.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n() as f64;
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for row in self.points.rows() {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += f64::from(v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in self.points.rows() {
            for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
                let c = f64::from(v) - m;
                *s += c * c;
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
        (mean, std)
    }

    /// Overall data scale: root of the mean per-coordinate variance.
    pub fn data_std(&self) -> f64 {
        let (_, std) = self.moments();
        (std.iter().map(|s| s * s).sum::<f64>() / std.len() as f64).sqrt()
    }

    /// Shifts and scales every coordinate to zero mean and unit standard
    /// deviation. Coordinates with zero variance keep scale 1; coordinates
    /// that are already standardized to within 1e-6 are left untouched, which
    /// makes the operation idempotent.
    pub fn standardize(&self) -> TrainingSet {
        const TOL: f64 = 1e-6;
        let (mean, std) = self.moments();
        let d = self.dim();
        let mut shift = vec![0.0; d];
        let mut scale = vec![1.0; d];
        for j in 0..d {
            let already = mean[j].abs() <= TOL && (std[j] - 1.0).abs() <= TOL;
            if already {
                continue;
            }
            shift[j] = mean[j];
            if std[j] > 0.0 {
                scale[j] = std[j];
            }
        }
        let mut points = self.points.clone();
        for mut row in points.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = ((f64::from(*v) - shift[j]) / scale[j]) as f32;
            }
        }
        // Compose with any earlier normalization so `normalization` always maps raw data.
        let prev = &self.normalization;
        let normalization = Normalization {
            shift: (0..d).map(|j| prev.shift[j] + prev.scale[j] * shift[j]).collect(),
            scale: (0..d).map(|j| prev.scale[j] * scale[j]).collect(),
        };
        TrainingSet {
            points,
            name: self.name.clone(),
            normalization,
            standardized: true,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_bytes(&bytes, name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, d) = self.points.dim();
        let mut out = Vec::with_capacity(FMDS_HEADER_LEN + 4 * n * d);
        out.extend_from_slice(FMDS_MAGIC);
        for word in [
            FMDS_VERSION,
            n as u32,
            d as u32,
            if self.standardized { FLAG_STANDARDIZED } else { 0 },
            0,
        ] {
            out.extend_from_slice(&word.to_le_bytes());
        }
        for v in self.points.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], name: impl Into<String>) -> Result<Self> {
        if bytes.len() < FMDS_HEADER_LEN {
            return Err(Error::format(
                bytes.len() as u64,
                format!("truncated header: {} of {FMDS_HEADER_LEN} bytes", bytes.len()),
            ));
        }
        if &bytes[0..4] != FMDS_MAGIC {
            return Err(Error::format(0, "bad magic, expected \"FMDS\""));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = word(4);
        if version != FMDS_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let n = word(8) as usize;
        let d = word(12) as usize;
        let flags = word(16);
        if n == 0 || d == 0 {
            return Err(Error::format(8, format!("empty shape {n}x{d}")));
        }
        if flags & !FLAG_STANDARDIZED != 0 {
            return Err(Error::format(16, format!("unknown flag bits {flags:#x}")));
        }
        let expected = FMDS_HEADER_LEN as u64 + 4 * n as u64 * d as u64;
        if (bytes.len() as u64) < expected {
            return Err(Error::format(
                bytes.len() as u64,
                format!("truncated payload: expected {expected} bytes"),
            ));
        }
        if (bytes.len() as u64) > expected {
            return Err(Error::format(expected, "trailing bytes after payload"));
        }
        let payload: Vec<f32> = bytes[FMDS_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(pos) = payload.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(
                (FMDS_HEADER_LEN + 4 * pos) as u64,
                "non-finite value in payload",
            ));
        }
        let points = Array2::from_shape_vec((n, d), payload).expect("shape checked");
        let mut ts = TrainingSet::new(points, name)?;
        ts.standardized = flags & FLAG_STANDARDIZED != 0;
        Ok(ts)
    }

    /// CSV mirror of the point set, header `x0,...,x{d-1}`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for row in self.points.rows() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Two interleaved half-circles of radius 1. The upper moon is centered at the
/// origin; the lower one is its point reflection shifted so that
/// `(x, y) = (1 - cos θ, 1 - sin θ - 0.5)`. The first `n - n/2` points belong
/// to the upper moon.
pub fn gen_two_moons(n: usize, noise_std: f64, seed: u64) -> Result<TrainingSet> {
    if n == 0 {
        return Err(Error::invalid("two-moons needs n >= 1"));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid(format!("noise_std must be >= 0, got {noise_std}")));
    }
    let mut rng = rng::stream(seed, "datasets/two-moons");
    let n_upper = n - n / 2;
    let mut flat = Vec::with_capacity(2 * n);
    for i in 0..n {
        let theta = rng.random::<f64>() * PI;
        let (mut x, mut y) = if i < n_upper {
            (theta.cos(), theta.sin())
        } else {
            (1.0 - theta.cos(), 1.0 - theta.sin() - 0.5)
        };
        let ex: f64 = StandardNormal.sample(&mut rng);
        let ey: f64 = StandardNormal.sample(&mut rng);
        x += noise_std * ex;
        y += noise_std * ey;
        flat.push(x as f32);
        flat.push(y as f32);
    }
    let points = Array2::from_shape_vec((n, 2), flat).expect("shape");
    TrainingSet::new(points, "two-moons")
}

/// Centers of the two moons, for labeling points.
pub const MOON_CENTERS: [[f64; 2]; 2] = [[0.0, 0.0], [1.0, 0.5]];

/// `k` unit-variance Gaussian components with means uniform in
/// `[-spread, spread]^dim`; point `i` belongs to component `i mod k`.
pub fn gen_gaussian_mixture(n: usize, dim: usize, k: usize, spread: f64, seed: u64) -> Result<TrainingSet> {
    if n == 0 || dim == 0 || k == 0 {
        return Err(Error::invalid(format!(
            "mixture needs n, dim, k >= 1 (got n={n}, dim={dim}, k={k})"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::invalid(format!("spread must be >= 0, got {spread}")));
    }
    let means = mixture_means(dim, k, spread, seed);
    let mut rng = rng::stream(seed, "datasets/mixture/points");
    let mut points = Array2::<f32>::zeros((n, dim));
    for (i, mut row) in points.rows_mut().into_iter().enumerate() {
        let mean = means.row(i % k);
        for (v, &m) in row.iter_mut().zip(mean) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = (m + z) as f32;
        }
    }
    TrainingSet::new(points, format!("mixture-k{k}-d{dim}"))
}

/// Component means used by [`gen_gaussian_mixture`] for the same arguments.
pub fn mixture_means(dim: usize, k: usize, spread: f64, seed: u64) -> Array2<f64> {
    let mut rng = rng::stream(seed, "datasets/mixture/means");
    Array2::from_shape_fn((k, dim), |_| {
        if spread == 0.0 {
            0.0
        } else {
            rng.random_range(-spread..=spread)
        }
    })
}

/// Keeps coordinates `floor(j * d / target_dim)` for `j < target_dim`.
pub fn subsample_dim(ts: &TrainingSet, target_dim: usize) -> Result<TrainingSet> {
    let d = ts.dim();
    if target_dim == 0 || target_dim > d {
        return Err(Error::invalid(format!(
            "target dimension {target_dim} must lie in 1..={d}"
        )));
    }
    let cols: Vec<usize> = (0..target_dim).map(|j| j * d / target_dim).collect();
    let points = Array2::from_shape_fn((ts.n(), target_dim), |(i, j)| ts.points[[i, cols[j]]]);
    let normalization = Normalization {
        shift: cols.iter().map(|&c| ts.normalization.shift[c]).collect(),
        scale: cols.iter().map(|&c| ts.normalization.scale[c]).collect(),
    };
    Ok(TrainingSet {
        points,
        name: ts.name.clone(),
        normalization,
        standardized: ts.standardized,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    StandardNormal,
}

/// The source distribution `N(0, I_d)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SourceSpec {
    pub kind: SourceKind,
    pub dim: usize,
}

impl SourceSpec {
    pub fn standard_normal(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("source dimension must be >= 1"));
        }
        Ok(SourceSpec {
            kind: SourceKind::StandardNormal,
            dim,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Array1<f64> {
        Array1::from_shape_fn(self.dim, |_| StandardNormal.sample(rng))
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        for v in out {
            *v = StandardNormal.sample(rng);
        }
    }
}

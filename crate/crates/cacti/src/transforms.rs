//! Separable orthonormal 3D transforms used by the sparsity prior.
//!
//! Each axis carries one square orthonormal factor matrix; the volume
//! transform applies the factors along rows, columns, and frames in turn.
//! Supported factors: orthonormal type-II DCT, full-depth Haar (power-of-two
//! sizes only), and the identity.

use crate::cube::Datacube;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisKind {
    Identity,
    Dct,
    Haar,
}

impl AxisKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "identity" | "id" => Ok(AxisKind::Identity),
            "dct" => Ok(AxisKind::Dct),
            "haar" => Ok(AxisKind::Haar),
            other => Err(Error::invalid(
                "transform",
                format!("unknown axis transform '{other}' (identity, dct, haar)"),
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AxisKind::Identity => "identity",
            AxisKind::Dct => "dct",
            AxisKind::Haar => "haar",
        }
    }
}

/// One orthonormal factor matrix, stored dense row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisTransform {
    kind: AxisKind,
    n: usize,
    matrix: Vec<f64>,
}

/// Builds the n x n orthonormal factor for one axis.
pub fn build_axis_transform(kind: AxisKind, n: usize) -> Result<AxisTransform> {
    if n == 0 {
        return Err(Error::invalid("n", "axis length must be >= 1"));
    }
    let matrix = match kind {
        AxisKind::Identity => {
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                m[i * n + i] = 1.0;
            }
            m
        }
        AxisKind::Dct => {
            // Orthonormal DCT-II: row 0 scaled by sqrt(1/n), others sqrt(2/n).
            let mut m = vec![0.0; n * n];
            let nf = n as f64;
            for k in 0..n {
                let scale = if k == 0 {
                    (1.0 / nf).sqrt()
                } else {
                    (2.0 / nf).sqrt()
                };
                for i in 0..n {
                    let angle = std::f64::consts::PI * (2.0 * i as f64 + 1.0) * k as f64
                        / (2.0 * nf);
                    m[k * n + i] = scale * angle.cos();
                }
            }
            m
        }
        AxisKind::Haar => {
            if !n.is_power_of_two() {
                return Err(Error::invalid(
                    "n",
                    format!("haar requires a power-of-two axis length, got {n}"),
                ));
            }
            haar_matrix(n)
        }
    };
    Ok(AxisTransform { kind, n, matrix })
}

/// Full-depth orthonormal Haar matrix built by the standard doubling
/// recursion: averages on top, pairwise differences below.
fn haar_matrix(n: usize) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = vec![vec![1.0]];
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let mut size = 1;
    while size < n {
        let mut next: Vec<Vec<f64>> = Vec::with_capacity(2 * size);
        for row in &rows {
            let mut expanded = Vec::with_capacity(2 * size);
            for &v in row {
                expanded.push(v * inv_sqrt2);
                expanded.push(v * inv_sqrt2);
            }
            next.push(expanded);
        }
        for i in 0..size {
            let mut detail = vec![0.0; 2 * size];
            detail[2 * i] = inv_sqrt2;
            detail[2 * i + 1] = -inv_sqrt2;
            next.push(detail);
        }
        rows = next;
        size *= 2;
    }
    rows.into_iter().flatten().collect()
}

impl AxisTransform {
    pub fn kind(&self) -> AxisKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Row-major n x n factor matrix.
    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    /// Applies the factor (or its transpose, for `inverse = true`) along one
    /// axis of a volume stored frame-major.
    pub fn apply_along(
        &self,
        data: &[f64],
        dims: (usize, usize, usize),
        axis: usize,
        inverse: bool,
    ) -> Result<Vec<f64>> {
        let (rows, cols, frames) = dims;
        if data.len() != rows * cols * frames {
            return Err(Error::dims(
                "AxisTransform::apply_along",
                format!("{} values", rows * cols * frames),
                format!("{}", data.len()),
            ));
        }
        let axis_len = [rows, cols, frames][axis];
        if axis_len != self.n {
            return Err(Error::dims(
                "AxisTransform::apply_along",
                format!("axis length {}", self.n),
                format!("{axis_len}"),
            ));
        }
        if self.kind == AxisKind::Identity {
            return Ok(data.to_vec());
        }
        let n = self.n;
        let mut out = vec![0.0; data.len()];
        let mut line = vec![0.0; n];
        let mut result = vec![0.0; n];
        let plane = rows * cols;
        let (stride, line_starts): (usize, Box<dyn Iterator<Item = usize>>) = match axis {
            0 => (
                cols,
                Box::new(
                    (0..frames).flat_map(move |k| (0..cols).map(move |j| k * plane + j)),
                ),
            ),
            1 => (
                1,
                Box::new(
                    (0..frames)
                        .flat_map(move |k| (0..rows).map(move |i| k * plane + i * cols)),
                ),
            ),
            2 => (plane, Box::new(0..plane)),
            _ => return Err(Error::invalid("axis", "axis must be 0, 1, or 2")),
        };
        for start in line_starts {
            for (t, slot) in line.iter_mut().enumerate() {
                *slot = data[start + t * stride];
            }
            for (r, slot) in result.iter_mut().enumerate() {
                let mut acc = 0.0;
                if inverse {
                    for (t, &x) in line.iter().enumerate() {
                        acc += self.matrix[t * n + r] * x;
                    }
                } else {
                    let row = &self.matrix[r * n..(r + 1) * n];
                    for (t, &x) in line.iter().enumerate() {
                        acc += row[t] * x;
                    }
                }
                *slot = acc;
            }
            for (t, &v) in result.iter().enumerate() {
                out[start + t * stride] = v;
            }
        }
        Ok(out)
    }
}

/// The separable volume transform Q = Q1 (rows) x Q2 (cols) x Q3 (frames).
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSpec {
    q1: AxisTransform,
    q2: AxisTransform,
    q3: AxisTransform,
}

impl TransformSpec {
    pub fn new(
        kinds: (AxisKind, AxisKind, AxisKind),
        dims: (usize, usize, usize),
    ) -> Result<Self> {
        Ok(Self {
            q1: build_axis_transform(kinds.0, dims.0)?,
            q2: build_axis_transform(kinds.1, dims.1)?,
            q3: build_axis_transform(kinds.2, dims.2)?,
        })
    }

    pub fn identity(dims: (usize, usize, usize)) -> Result<Self> {
        Self::new(
            (AxisKind::Identity, AxisKind::Identity, AxisKind::Identity),
            dims,
        )
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.q1.n, self.q2.n, self.q3.n)
    }

    pub fn kinds(&self) -> (AxisKind, AxisKind, AxisKind) {
        (self.q1.kind, self.q2.kind, self.q3.kind)
    }

    pub fn factors(&self) -> (&AxisTransform, &AxisTransform, &AxisTransform) {
        (&self.q1, &self.q2, &self.q3)
    }

    fn check_dims(&self, dims: (usize, usize, usize), context: &'static str) -> Result<()> {
        if dims != self.dims() {
            return Err(Error::dims(
                context,
                format!("{:?}", self.dims()),
                format!("{dims:?}"),
            ));
        }
        Ok(())
    }

    /// Maps voxels to transform coefficients (same frame-major layout).
    pub fn apply(&self, cube: &Datacube) -> Result<Vec<f64>> {
        let dims = (cube.rows(), cube.cols(), cube.frames());
        self.check_dims(dims, "TransformSpec::apply")?;
        let w = self.q1.apply_along(cube.data(), dims, 0, false)?;
        let w = self.q2.apply_along(&w, dims, 1, false)?;
        self.q3.apply_along(&w, dims, 2, false)
    }

    /// Maps coefficients back to voxels; exact inverse of [`apply`] up to
    /// floating-point roundoff since every factor is orthonormal.
    pub fn apply_inverse(&self, coeffs: &[f64]) -> Result<Datacube> {
        let dims = self.dims();
        if coeffs.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::dims(
                "TransformSpec::apply_inverse",
                format!("{} coefficients", dims.0 * dims.1 * dims.2),
                format!("{}", coeffs.len()),
            ));
        }
        let f = self.q3.apply_along(coeffs, dims, 2, true)?;
        let f = self.q2.apply_along(&f, dims, 1, true)?;
        let f = self.q1.apply_along(&f, dims, 0, true)?;
        Ok(Datacube::raw(dims.0, dims.1, dims.2, f))
    }
}

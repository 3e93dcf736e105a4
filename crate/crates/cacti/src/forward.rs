//! The compressive forward model: mask generation, triangle-wave motion,
//! shifted-mask operators, and the measurement map g = Hf + n.
//!
//! The operator is kept in factored form as one transmission plane per
//! temporal channel; the block-diagonal measurement matrix can be
//! materialized for small instances via [`explicit_matrix`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cube::{Datacube, Mask, Snapshot};
use crate::error::{Error, Result};

/// Relative slack when deciding whether C/d is an integer channel count.
const CHANNEL_COUNT_TOLERANCE: f64 = 1e-6;

/// Default cap on explicit-matrix entries (nonzeros), per small-instance use.
pub const EXPLICIT_MATRIX_CAP: u64 = 1_000_000;

/// Draws a random binary mask with the given fill fraction.
///
/// The generator is pinned to ChaCha8 seeded with `seed`, sampling entries in
/// row-major order, so masks are bit-reproducible across platforms.
pub fn generate_mask(rows: usize, cols: usize, fill: f64, seed: u64) -> Result<Mask> {
    if !(fill > 0.0 && fill < 1.0) {
        return Err(Error::invalid(
            "fill",
            format!("fill fraction must lie in (0, 1), got {fill}"),
        ));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("rows/cols", "mask dimensions must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rows * cols;
    let bits: Vec<u8> = (0..n)
        .map(|_| if rng.random::<f64>() < fill { 1u8 } else { 0u8 })
        .collect();
    let mask = Mask::from_bits(rows, cols, bits, seed, fill)?;

    // Fill fraction must sit within 5 standard deviations of the binomial
    // expectation; a seed violating this is rejected rather than silently
    // accepted as a valid code.
    let mean = n as f64 * fill;
    let sd = (n as f64 * fill * (1.0 - fill)).sqrt();
    let ones = mask.ones_count() as f64;
    if (ones - mean).abs() > 5.0 * sd {
        return Err(Error::invalid(
            "seed",
            format!(
                "mask fill {ones} of {n} deviates more than 5 sigma from expectation {mean:.1}"
            ),
        ));
    }
    Ok(mask)
}

/// The mask positions visited during one integration window.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionProfile {
    c: f64,
    d: f64,
    positions: Vec<f64>,
}

impl MotionProfile {
    pub fn compression_ratio(&self) -> f64 {
        self.c
    }

    pub fn step(&self) -> f64 {
        self.d
    }

    pub fn n_frames(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn max_shift(&self) -> f64 {
        *self.positions.last().expect("profile is never empty")
    }
}

/// Samples the ascending half-period of the triangle drive at spacing `d`:
/// positions k*d for k = 0..N_F with N_F = C/d. The descending sweep reuses
/// the same operator, so only one monotone ramp is materialized.
pub fn triangle_positions(c: f64, d: f64) -> Result<MotionProfile> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::invalid("C", format!("must be > 0, got {c}")));
    }
    if !(d > 0.0) || d > c {
        return Err(Error::invalid(
            "d",
            format!("must satisfy 0 < d <= C, got d = {d} with C = {c}"),
        ));
    }
    let ratio = c / d;
    let n_frames = ratio.round();
    if (ratio - n_frames).abs() > CHANNEL_COUNT_TOLERANCE * n_frames.max(1.0) {
        return Err(Error::invalid(
            "d",
            format!("C/d = {ratio} is not an integer channel count"),
        ));
    }
    let n_frames = n_frames as usize;
    let positions = (0..n_frames).map(|k| k as f64 * d).collect();
    Ok(MotionProfile { c, d, positions })
}

/// Embeds a mask in a zero-padded active area, translated `p` pixels along
/// rows. Non-integer shifts interpolate linearly between the two nearest
/// integer embeddings, giving grayscale plane values in [0, 1].
pub fn shift_mask(mask: &Mask, p: f64, active_rows: usize, active_cols: usize) -> Result<Snapshot> {
    if !(p >= 0.0) || !p.is_finite() {
        return Err(Error::invalid("p", format!("shift must be >= 0, got {p}")));
    }
    let hi = p.ceil() as usize;
    if mask.rows() + hi > active_rows || mask.cols() > active_cols {
        return Err(Error::ShiftOutOfBounds {
            shift: p,
            mask_rows: mask.rows(),
            mask_cols: mask.cols(),
            active_rows,
            active_cols,
        });
    }
    let lo = p.floor() as usize;
    let frac = p - p.floor();
    let mut data = vec![0.0; active_rows * active_cols];
    for i in 0..mask.rows() {
        for j in 0..mask.cols() {
            let v = mask.get(i, j) as f64;
            if v == 0.0 {
                continue;
            }
            data[(i + lo) * active_cols + j] += (1.0 - frac) * v;
            if frac > 0.0 {
                data[(i + hi) * active_cols + j] += frac * v;
            }
        }
    }
    Ok(Snapshot::raw(active_rows, active_cols, data))
}

/// The factored measurement operator: one transmission plane per channel
/// plus the cached per-pixel sum of squared code values.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOperator {
    active_rows: usize,
    active_cols: usize,
    n_frames: usize,
    planes: Vec<f64>,
    normalizer: Vec<f64>,
}

impl ForwardOperator {
    /// Assembles an operator from explicit planes, validating shapes and the
    /// [0, 1] transmission range.
    pub fn from_planes(planes: Vec<Snapshot>) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::invalid("planes", "operator needs at least one plane"))?;
        let (active_rows, active_cols) = (first.rows(), first.cols());
        let n = active_rows * active_cols;
        let n_frames = planes.len();
        let mut data = Vec::with_capacity(n * n_frames);
        for plane in &planes {
            if plane.rows() != active_rows || plane.cols() != active_cols {
                return Err(Error::dims(
                    "ForwardOperator::from_planes",
                    format!("{active_rows}x{active_cols}"),
                    format!("{}x{}", plane.rows(), plane.cols()),
                ));
            }
            if plane.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::invalid(
                    "planes",
                    "transmission values must lie in [0, 1]",
                ));
            }
            data.extend_from_slice(plane.data());
        }
        let mut normalizer = vec![0.0; n];
        for k in 0..n_frames {
            let plane = &data[k * n..(k + 1) * n];
            for (px, &t) in plane.iter().enumerate() {
                normalizer[px] += t * t;
            }
        }
        Ok(Self {
            active_rows,
            active_cols,
            n_frames,
            planes: data,
            normalizer,
        })
    }

    pub fn active_rows(&self) -> usize {
        self.active_rows
    }

    pub fn active_cols(&self) -> usize {
        self.active_cols
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    /// Detector pixels in the active area.
    pub fn pixels(&self) -> usize {
        self.active_rows * self.active_cols
    }

    pub fn plane(&self, k: usize) -> &[f64] {
        let n = self.pixels();
        &self.planes[k * n..(k + 1) * n]
    }

    /// Per-pixel sum of squared code values over channels.
    pub fn normalizer(&self) -> &[f64] {
        &self.normalizer
    }

    /// Pixels whose code column is identically zero (never measured).
    pub fn zero_code_pixels(&self) -> usize {
        self.normalizer.iter().filter(|&&v| v == 0.0).count()
    }

    fn check_cube(&self, cube: &Datacube, context: &'static str) -> Result<()> {
        if cube.rows() != self.active_rows
            || cube.cols() != self.active_cols
            || cube.frames() != self.n_frames
        {
            return Err(Error::dims(
                context,
                format!(
                    "{}x{}x{}",
                    self.active_rows, self.active_cols, self.n_frames
                ),
                format!("{}x{}x{}", cube.rows(), cube.cols(), cube.frames()),
            ));
        }
        Ok(())
    }

    fn check_snapshot(&self, snapshot: &Snapshot, context: &'static str) -> Result<()> {
        if snapshot.rows() != self.active_rows || snapshot.cols() != self.active_cols {
            return Err(Error::dims(
                context,
                format!("{}x{}", self.active_rows, self.active_cols),
                format!("{}x{}", snapshot.rows(), snapshot.cols()),
            ));
        }
        Ok(())
    }
}

/// Builds the translated-mask operator: plane k is the mask shifted by the
/// profile's position s_k.
pub fn build_operator(
    mask: &Mask,
    profile: &MotionProfile,
    active_rows: usize,
    active_cols: usize,
) -> Result<ForwardOperator> {
    let planes: Result<Vec<Snapshot>> = profile
        .positions()
        .iter()
        .map(|&p| shift_mask(mask, p, active_rows, active_cols))
        .collect();
    ForwardOperator::from_planes(planes?)
}

/// Builds an operator whose planes are statistically independent masks, the
/// software stand-in for per-frame re-randomized (LCoS-style) coding.
pub fn build_rerandomized_operator(
    rows: usize,
    cols: usize,
    n_frames: usize,
    fill: f64,
    seed: u64,
) -> Result<ForwardOperator> {
    if n_frames == 0 {
        return Err(Error::invalid("n_frames", "must be >= 1"));
    }
    let planes: Result<Vec<Snapshot>> = (0..n_frames)
        .map(|k| {
            let mask = generate_mask(rows, cols, fill, seed.wrapping_add(k as u64))?;
            Ok(mask.to_cube().into_snapshot()?)
        })
        .collect();
    ForwardOperator::from_planes(planes?)
}

/// Additive measurement noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    None,
    Gaussian { sigma: f64, seed: u64 },
}

impl NoiseModel {
    pub fn gaussian(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(
                "sigma",
                format!("must be >= 0, got {sigma}"),
            ));
        }
        Ok(NoiseModel::Gaussian { sigma, seed })
    }
}

/// Applies the operator: g_ij = sum_k T_ijk f_ijk + n_ij.
pub fn forward(
    operator: &ForwardOperator,
    cube: &Datacube,
    noise: &NoiseModel,
) -> Result<Snapshot> {
    operator.check_cube(cube, "forward")?;
    let n = operator.pixels();
    let mut g = vec![0.0; n];
    for k in 0..operator.n_frames() {
        let plane = operator.plane(k);
        let frame = cube.frame(k);
        for px in 0..n {
            g[px] += plane[px] * frame[px];
        }
    }
    match *noise {
        NoiseModel::None => {}
        NoiseModel::Gaussian { sigma, seed } => {
            if sigma > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let normal = Normal::new(0.0, sigma)
                    .map_err(|e| Error::invalid("sigma", e.to_string()))?;
                for v in g.iter_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
        }
    }
    Ok(Snapshot::raw(operator.active_rows, operator.active_cols, g))
}

/// The transpose map: (H^T g)_ijk = T_ijk g_ij.
pub fn adjoint(operator: &ForwardOperator, snapshot: &Snapshot) -> Result<Datacube> {
    operator.check_snapshot(snapshot, "adjoint")?;
    let n = operator.pixels();
    let g = snapshot.data();
    let mut data = vec![0.0; n * operator.n_frames()];
    for k in 0..operator.n_frames() {
        let plane = operator.plane(k);
        let out = &mut data[k * n..(k + 1) * n];
        for px in 0..n {
            out[px] = plane[px] * g[px];
        }
    }
    Ok(Datacube::raw(
        operator.active_rows,
        operator.active_cols,
        operator.n_frames,
        data,
    ))
}

/// A sparse matrix stored as (row, col, value) triplets.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    triplets: Vec<(u32, u32, f64)>,
}

impl SparseMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.triplets.len()
    }

    pub fn triplets(&self) -> &[(u32, u32, f64)] {
        &self.triplets
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::dims(
                "SparseMatrix::matvec",
                format!("{}", self.cols),
                format!("{}", x.len()),
            ));
        }
        let mut y = vec![0.0; self.rows];
        for &(r, c, v) in &self.triplets {
            y[r as usize] += v * x[c as usize];
        }
        Ok(y)
    }

    pub fn matvec_transpose(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::dims(
                "SparseMatrix::matvec_transpose",
                format!("{}", self.rows),
                format!("{}", y.len()),
            ));
        }
        let mut x = vec![0.0; self.cols];
        for &(r, c, v) in &self.triplets {
            x[c as usize] += v * y[r as usize];
        }
        Ok(x)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.rows];
        for &(r, _, v) in &self.triplets {
            sums[r as usize] += v;
        }
        sums
    }
}

/// Materializes the operator as the N x N*N_F block-row of diagonals, with
/// the default small-instance cap on entries.
pub fn explicit_matrix(operator: &ForwardOperator) -> Result<SparseMatrix> {
    explicit_matrix_with_cap(operator, EXPLICIT_MATRIX_CAP)
}

/// As [`explicit_matrix`], with an explicit entry cap.
pub fn explicit_matrix_with_cap(operator: &ForwardOperator, cap: u64) -> Result<SparseMatrix> {
    let n = operator.pixels() as u64;
    let entries = n * operator.n_frames() as u64;
    if entries > cap {
        return Err(Error::ExplicitMatrixCap { entries, cap });
    }
    let n = operator.pixels();
    let mut triplets = Vec::with_capacity(n * operator.n_frames());
    for k in 0..operator.n_frames() {
        let plane = operator.plane(k);
        for px in 0..n {
            let v = plane[px];
            if v != 0.0 {
                triplets.push((px as u32, (k * n + px) as u32, v));
            }
        }
    }
    Ok(SparseMatrix {
        rows: n,
        cols: n * operator.n_frames(),
        triplets,
    })
}

//! Generalized Alternating Projection: alternating Euclidean projections
//! between the data-fidelity linear manifold and a weighted l2,1 ball whose
//! radius is re-selected every iteration.
//!
//! One iteration maps the coefficient-space iterate theta back to voxels,
//! projects onto the manifold (exact per-pixel correction, since the
//! block-diagonal operator makes H H^T diagonal), transforms the feasible
//! volume, soft-thresholds its coefficient groups against the radius
//! selection rule, and stores the shrunk coefficients as the next theta.

use std::io::Write as _;
use std::path::Path;

use crate::cube::{Datacube, Snapshot};
use crate::error::{Error, Result};
use crate::forward::ForwardOperator;
use crate::partition::GroupPartition;
use crate::transforms::{AxisKind, TransformSpec};

/// Result of projecting onto the linear manifold, with per-pixel diagnostics.
#[derive(Debug, Clone)]
pub struct ManifoldProjection {
    pub cube: Datacube,
    /// Pixels whose code column is identically zero; theta passes through.
    pub zero_code_pixels: usize,
    /// Zero-code pixels that nevertheless carry a nonzero measurement.
    pub infeasible_pixels: usize,
}

/// Euclidean projection of `theta` onto {f : Hf = g}.
///
/// f_ijk = theta_ijk + T_ijk / (sum_k' T_ijk'^2) * (g_ij - sum_k' theta_ijk' T_ijk').
pub fn project_linear_manifold(
    operator: &ForwardOperator,
    snapshot: &Snapshot,
    theta: &Datacube,
) -> Result<ManifoldProjection> {
    if snapshot.rows() != operator.active_rows() || snapshot.cols() != operator.active_cols() {
        return Err(Error::dims(
            "project_linear_manifold",
            format!("{}x{}", operator.active_rows(), operator.active_cols()),
            format!("{}x{}", snapshot.rows(), snapshot.cols()),
        ));
    }
    if theta.rows() != operator.active_rows()
        || theta.cols() != operator.active_cols()
        || theta.frames() != operator.n_frames()
    {
        return Err(Error::dims(
            "project_linear_manifold",
            format!(
                "{}x{}x{}",
                operator.active_rows(),
                operator.active_cols(),
                operator.n_frames()
            ),
            format!("{}x{}x{}", theta.rows(), theta.cols(), theta.frames()),
        ));
    }
    let n = operator.pixels();
    let n_frames = operator.n_frames();
    // Per-pixel residual of theta against the measurement.
    let mut correction: Vec<f64> = snapshot.data().to_vec();
    for k in 0..n_frames {
        let plane = operator.plane(k);
        let frame = theta.frame(k);
        for px in 0..n {
            correction[px] -= plane[px] * frame[px];
        }
    }
    let mut zero_code_pixels = 0usize;
    let mut infeasible_pixels = 0usize;
    for px in 0..n {
        let norm = operator.normalizer()[px];
        if norm == 0.0 {
            zero_code_pixels += 1;
            if snapshot.data()[px] != 0.0 {
                infeasible_pixels += 1;
            }
            correction[px] = 0.0;
        } else {
            correction[px] /= norm;
        }
    }
    let mut data = theta.data().to_vec();
    for k in 0..n_frames {
        let plane = operator.plane(k);
        let out = &mut data[k * n..(k + 1) * n];
        for px in 0..n {
            out[px] += plane[px] * correction[px];
        }
    }
    Ok(ManifoldProjection {
        cube: Datacube::raw(
            operator.active_rows(),
            operator.active_cols(),
            n_frames,
            data,
        ),
        zero_code_pixels,
        infeasible_pixels,
    })
}

/// Euclidean norm of each coefficient group.
pub fn group_norms(coeffs: &[f64], partition: &GroupPartition) -> Result<Vec<f64>> {
    if coeffs.len() != partition.index_count() {
        return Err(Error::dims(
            "group_norms",
            format!("{} coefficients", partition.index_count()),
            format!("{}", coeffs.len()),
        ));
    }
    Ok(partition
        .groups()
        .iter()
        .map(|group| {
            group
                .iter()
                .map(|&idx| coeffs[idx as usize].powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// The weighted l2,1 norm: sum of beta_l times the group norms.
pub fn weighted_l21_norm(coeffs: &[f64], partition: &GroupPartition) -> Result<f64> {
    let norms = group_norms(coeffs, partition)?;
    Ok(norms
        .iter()
        .zip(partition.weights())
        .map(|(n, b)| b * n)
        .sum())
}

/// Outcome of the radius selection rule for the current coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadiusSelection {
    /// Number of leading groups (in beta-normalized norm order) whose indices
    /// first cover at least the measurement count.
    pub m_star: usize,
    /// Radius of the l2,1 ball for this iteration.
    pub radius: f64,
    /// Beta-normalized norm of group l_{m*+1}; zero when m* exhausts the
    /// partition, in which case the projection shrinks nothing.
    pub reference_normalized_norm: f64,
}

/// Radius selection: sort groups by beta-normalized norm (descending, ties by
/// group index), take the smallest prefix covering `measurement_count`
/// indices, and accumulate the weighted gaps against the next group's
/// normalized norm.
pub fn select_radius(
    coeffs: &[f64],
    partition: &GroupPartition,
    measurement_count: usize,
) -> Result<RadiusSelection> {
    let norms = group_norms(coeffs, partition)?;
    select_radius_from_norms(&norms, partition, measurement_count)
}

/// As [`select_radius`], reusing precomputed group norms.
pub fn select_radius_from_norms(
    norms: &[f64],
    partition: &GroupPartition,
    measurement_count: usize,
) -> Result<RadiusSelection> {
    if norms.len() != partition.group_count() {
        return Err(Error::dims(
            "select_radius",
            format!("{} group norms", partition.group_count()),
            format!("{}", norms.len()),
        ));
    }
    if measurement_count == 0 {
        return Err(Error::invalid(
            "measurement_count",
            "must be >= 1 detector pixel",
        ));
    }
    let weights = partition.weights();
    let m = partition.group_count();
    let mut order: Vec<usize> = (0..m).collect();
    // Stable sort keeps ties in group-index order, pinning the permutation.
    order.sort_by(|&a, &b| {
        let na = norms[a] / weights[a];
        let nb = norms[b] / weights[b];
        nb.partial_cmp(&na).expect("group norms are finite")
    });
    let mut covered = 0usize;
    let mut m_star = m;
    for (q, &l) in order.iter().enumerate() {
        covered += partition.group(l).len();
        if covered >= measurement_count {
            m_star = q + 1;
            break;
        }
    }
    let reference_normalized_norm = if m_star < m {
        let l_ref = order[m_star];
        norms[l_ref] / weights[l_ref]
    } else {
        0.0
    };
    let mut radius = 0.0;
    for &l in order.iter().take(m_star) {
        let normalized = norms[l] / weights[l];
        radius += weights[l] * weights[l] * (normalized - reference_normalized_norm);
    }
    Ok(RadiusSelection {
        m_star,
        radius,
        reference_normalized_norm,
    })
}

/// Projection onto the weighted l2,1 ball for the selected radius: group-wise
/// soft shrinkage with per-group threshold beta_l times the reference
/// normalized norm. Zero-norm groups stay zero; shrink factors lie in [0, 1].
pub fn project_l21_ball(
    coeffs: &[f64],
    partition: &GroupPartition,
    selection: &RadiusSelection,
) -> Result<Vec<f64>> {
    let norms = group_norms(coeffs, partition)?;
    Ok(shrink_with_norms(coeffs, &norms, partition, selection))
}

fn shrink_with_norms(
    coeffs: &[f64],
    norms: &[f64],
    partition: &GroupPartition,
    selection: &RadiusSelection,
) -> Vec<f64> {
    let mut out = coeffs.to_vec();
    for (l, group) in partition.groups().iter().enumerate() {
        let norm = norms[l];
        let factor = if norm == 0.0 {
            0.0
        } else {
            (1.0 - partition.weights()[l] * selection.reference_normalized_norm / norm).max(0.0)
        };
        if factor == 1.0 {
            continue;
        }
        for &idx in group {
            out[idx as usize] *= factor;
        }
    }
    out
}

/// Loop-control and prior configuration for one solve, with factors already
/// sized to the operator dimensions.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Relative gap-norm change below which an iteration counts toward the
    /// three-in-a-row convergence rule.
    pub stop_tolerance: f64,
    pub transform: TransformSpec,
    pub partition: GroupPartition,
    pub record_history: bool,
    /// When set, writes one line per iteration (t, gap norm, residual) to
    /// stderr.
    pub verbose: bool,
}

impl SolverConfig {
    pub fn validate(&self, dims: (usize, usize, usize)) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations", "must be >= 1"));
        }
        if !(self.stop_tolerance > 0.0) {
            return Err(Error::invalid("stop_tolerance", "must be > 0"));
        }
        if self.transform.dims() != dims {
            return Err(Error::dims(
                "SolverConfig",
                format!("{dims:?}"),
                format!("{:?}", self.transform.dims()),
            ));
        }
        if self.partition.index_count() != dims.0 * dims.1 * dims.2 {
            return Err(Error::dims(
                "SolverConfig",
                format!("{} indices", dims.0 * dims.1 * dims.2),
                format!("{}", self.partition.index_count()),
            ));
        }
        Ok(())
    }
}

/// How a solve stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    /// Gap norm change stayed below tolerance for three consecutive
    /// iterations (or hit exact zero).
    Converged,
    /// Iteration budget exhausted before convergence; the estimate is still
    /// the best feasible iterate (warning, not a failure).
    MaxIterations,
}

/// Inspectable, resumable iteration state.
#[derive(Debug, Clone)]
pub struct SolverState {
    /// Coefficient-space iterate: the shrunk transform coefficients.
    pub theta: Vec<f64>,
    /// Voxel-space iterate: the last manifold projection.
    pub f: Datacube,
    pub iteration: usize,
    /// ||f(t) - theta(t)||_2 per iteration, theta mapped to voxel space.
    pub gap_norm_history: Vec<f64>,
    /// Normalized residual ||g - H theta(t)|| / ||g|| per iteration, over
    /// pixels with nonzero code energy. The manifold iterate f(t) fits the
    /// data exactly by construction, so the regularized iterate is the one
    /// whose fidelity is worth tracking.
    pub residual_history: Vec<f64>,
    pub zero_code_pixels: usize,
    pub infeasible_pixels: usize,
}

/// Estimate plus the state and status it was produced with.
#[derive(Debug, Clone)]
pub struct Solution {
    pub estimate: Datacube,
    pub state: SolverState,
    pub status: SolveStatus,
}

/// The alternating-projection iteration. Supports stepping, inspection
/// between steps, and resuming from a saved state, so computation can halt
/// anytime and continue later.
pub struct GapSolver<'a> {
    operator: &'a ForwardOperator,
    snapshot: &'a Snapshot,
    config: &'a SolverConfig,
    state: SolverState,
    /// Q^{-1}(theta), cached for the next manifold projection.
    theta_voxel: Datacube,
    below_tolerance_streak: usize,
    status: Option<SolveStatus>,
    /// ||g||_2 over fittable pixels, for residual normalization.
    fittable_norm: f64,
}

impl<'a> GapSolver<'a> {
    /// Starts from theta = 0.
    pub fn new(
        operator: &'a ForwardOperator,
        snapshot: &'a Snapshot,
        config: &'a SolverConfig,
    ) -> Result<Self> {
        let dims = (
            operator.active_rows(),
            operator.active_cols(),
            operator.n_frames(),
        );
        config.validate(dims)?;
        if snapshot.rows() != dims.0 || snapshot.cols() != dims.1 {
            return Err(Error::dims(
                "GapSolver::new",
                format!("{}x{}", dims.0, dims.1),
                format!("{}x{}", snapshot.rows(), snapshot.cols()),
            ));
        }
        let state = SolverState {
            theta: vec![0.0; dims.0 * dims.1 * dims.2],
            f: Datacube::zeros(dims.0, dims.1, dims.2)?,
            iteration: 0,
            gap_norm_history: Vec::new(),
            residual_history: Vec::new(),
            zero_code_pixels: 0,
            infeasible_pixels: 0,
        };
        Ok(Self::from_parts(operator, snapshot, config, state))
    }

    /// Resumes from a previously captured state.
    pub fn resume(
        operator: &'a ForwardOperator,
        snapshot: &'a Snapshot,
        config: &'a SolverConfig,
        state: SolverState,
    ) -> Result<Self> {
        let dims = (
            operator.active_rows(),
            operator.active_cols(),
            operator.n_frames(),
        );
        config.validate(dims)?;
        if state.theta.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::dims(
                "GapSolver::resume",
                format!("{} coefficients", dims.0 * dims.1 * dims.2),
                format!("{}", state.theta.len()),
            ));
        }
        Ok(Self::from_parts(operator, snapshot, config, state))
    }

    fn from_parts(
        operator: &'a ForwardOperator,
        snapshot: &'a Snapshot,
        config: &'a SolverConfig,
        state: SolverState,
    ) -> Self {
        let theta_voxel = config
            .transform
            .apply_inverse(&state.theta)
            .expect("state length was validated");
        let fittable_norm = snapshot
            .data()
            .iter()
            .zip(operator.normalizer())
            .filter(|(_, &nz)| nz != 0.0)
            .map(|(&g, _)| g * g)
            .sum::<f64>()
            .sqrt();
        Self {
            operator,
            snapshot,
            config,
            state,
            theta_voxel,
            below_tolerance_streak: 0,
            status: None,
            fittable_norm,
        }
    }

    pub fn state(&self) -> &SolverState {
        &self.state
    }

    pub fn status(&self) -> Option<SolveStatus> {
        self.status
    }

    /// Current voxel-space estimate (the last manifold projection).
    pub fn estimate(&self) -> &Datacube {
        &self.state.f
    }

    /// One alternating-projection iteration.
    pub fn step(&mut self) -> Result<()> {
        let previous_gap = self.state.gap_norm_history.last().copied();

        // 1) Projection on the linear manifold.
        let projection =
            project_linear_manifold(self.operator, self.snapshot, &self.theta_voxel)?;
        self.state.zero_code_pixels = projection.zero_code_pixels;
        self.state.infeasible_pixels = projection.infeasible_pixels;
        let f = projection.cube;

        // 2) Projection on the weighted l2,1 ball of the selected radius.
        let coeffs = self.config.transform.apply(&f)?;
        let norms = group_norms(&coeffs, &self.config.partition)?;
        let selection = select_radius_from_norms(
            &norms,
            &self.config.partition,
            self.operator.pixels(),
        )?;
        let theta = shrink_with_norms(&coeffs, &norms, &self.config.partition, &selection);
        let theta_voxel = self.config.transform.apply_inverse(&theta)?;

        let gap_norm = f
            .data()
            .iter()
            .zip(theta_voxel.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let residual = self.fittable_residual(&theta_voxel);

        self.state.f = f;
        self.state.theta = theta;
        self.theta_voxel = theta_voxel;
        self.state.iteration += 1;
        if self.config.record_history {
            self.state.gap_norm_history.push(gap_norm);
            self.state.residual_history.push(residual);
        }
        if self.config.verbose {
            eprintln!(
                "iter {:4}  gap {:.6e}  residual {:.6e}",
                self.state.iteration, gap_norm, residual
            );
        }

        if gap_norm == 0.0 {
            self.status = Some(SolveStatus::Converged);
        } else if let Some(prev) = previous_gap {
            let rel = (gap_norm - prev).abs() / prev.max(f64::MIN_POSITIVE);
            if rel < self.config.stop_tolerance {
                self.below_tolerance_streak += 1;
                if self.below_tolerance_streak >= 3 {
                    self.status = Some(SolveStatus::Converged);
                }
            } else {
                self.below_tolerance_streak = 0;
            }
        }
        Ok(())
    }

    /// Normalized residual of a candidate volume over fittable pixels.
    fn fittable_residual(&self, cube: &Datacube) -> f64 {
        let n = self.operator.pixels();
        let mut acc = 0.0;
        for px in 0..n {
            if self.operator.normalizer()[px] == 0.0 {
                continue;
            }
            let mut model = 0.0;
            for k in 0..self.operator.n_frames() {
                model += self.operator.plane(k)[px] * cube.data()[k * n + px];
            }
            let diff = self.snapshot.data()[px] - model;
            acc += diff * diff;
        }
        let num = acc.sqrt();
        if self.fittable_norm > 0.0 {
            num / self.fittable_norm
        } else {
            num
        }
    }

    /// Iterates until convergence or the iteration budget.
    pub fn run(&mut self) -> Result<SolveStatus> {
        while self.status.is_none() && self.state.iteration < self.config.max_iterations {
            self.step()?;
        }
        let status = self.status.unwrap_or(SolveStatus::MaxIterations);
        Ok(status)
    }

    pub fn into_solution(self) -> Solution {
        let status = self.status.unwrap_or(SolveStatus::MaxIterations);
        Solution {
            estimate: self.state.f.clone(),
            state: self.state,
            status,
        }
    }
}

/// Runs the full alternating iteration from theta = 0.
pub fn solve(
    operator: &ForwardOperator,
    snapshot: &Snapshot,
    config: &SolverConfig,
) -> Result<Solution> {
    let mut solver = GapSolver::new(operator, snapshot, config)?;
    solver.run()?;
    Ok(solver.into_solution())
}

/// Data-fidelity error of an estimate, with the zero-measurement edge case
/// reported as an absolute norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualReport {
    pub value: f64,
    /// Set when the snapshot is identically zero and the value is the
    /// absolute (unnormalized) residual norm.
    pub absolute: bool,
}

/// ||g - Hf||_2 / ||g||_2 over the whole active area.
pub fn normalized_residual(
    operator: &ForwardOperator,
    estimate: &Datacube,
    snapshot: &Snapshot,
) -> Result<ResidualReport> {
    let model = crate::forward::forward(operator, estimate, &crate::forward::NoiseModel::None)?;
    if model.rows() != snapshot.rows() || model.cols() != snapshot.cols() {
        return Err(Error::dims(
            "normalized_residual",
            format!("{}x{}", model.rows(), model.cols()),
            format!("{}x{}", snapshot.rows(), snapshot.cols()),
        ));
    }
    let num = model
        .data()
        .iter()
        .zip(snapshot.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let denom = snapshot.norm();
    if denom == 0.0 {
        Ok(ResidualReport {
            value: num,
            absolute: true,
        })
    } else {
        Ok(ResidualReport {
            value: num / denom,
            absolute: false,
        })
    }
}

/// Writes the iteration history as a CSV sidecar (iteration, gap norm,
/// residual).
pub fn write_history_csv(path: &Path, state: &SolverState) -> Result<()> {
    let mut out = String::from("iteration,gap_norm,residual\n");
    for (t, (gap, res)) in state
        .gap_norm_history
        .iter()
        .zip(&state.residual_history)
        .enumerate()
    {
        out.push_str(&format!("{},{:.17e},{:.17e}\n", t + 1, gap, res));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Partition scheme selector, materialized per volume size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionScheme {
    /// Non-overlapping coefficient blocks (the default is 2x2x2).
    Blocks {
        rows: usize,
        cols: usize,
        frames: usize,
    },
    /// Pure l1: one group per coefficient.
    Singletons,
}

impl Default for PartitionScheme {
    fn default() -> Self {
        PartitionScheme::Blocks {
            rows: 2,
            cols: 2,
            frames: 2,
        }
    }
}

impl PartitionScheme {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "singletons" {
            return Ok(PartitionScheme::Singletons);
        }
        if let Some(spec) = s.strip_prefix("blocks:") {
            let sides: Vec<&str> = spec.split('x').collect();
            if sides.len() == 3 {
                let parse = |t: &str| -> Result<usize> {
                    t.parse::<usize>()
                        .map_err(|_| Error::invalid("partition", format!("bad block side '{t}'")))
                };
                return Ok(PartitionScheme::Blocks {
                    rows: parse(sides[0])?,
                    cols: parse(sides[1])?,
                    frames: parse(sides[2])?,
                });
            }
        }
        Err(Error::invalid(
            "partition",
            format!("unknown partition scheme '{s}' (blocks:RxCxF or singletons)"),
        ))
    }

    pub fn describe(&self) -> String {
        match self {
            PartitionScheme::Blocks { rows, cols, frames } => {
                format!("blocks:{rows}x{cols}x{frames}")
            }
            PartitionScheme::Singletons => "singletons".to_string(),
        }
    }

    pub fn build(&self, dims: (usize, usize, usize), subband_weights: bool) -> Result<GroupPartition> {
        match *self {
            PartitionScheme::Blocks { rows, cols, frames } => {
                if subband_weights {
                    GroupPartition::blocks_with_subband_weights(dims, (rows, cols, frames))
                } else {
                    GroupPartition::blocks(dims, (rows, cols, frames))
                }
            }
            PartitionScheme::Singletons => GroupPartition::singletons(dims),
        }
    }
}

/// Size-independent solver settings; materialize with [`config_for`] once the
/// operator dimensions are known.
///
/// [`config_for`]: SolverSettings::config_for
#[derive(Debug, Clone)]
pub struct SolverSettings {
    pub transform: (AxisKind, AxisKind, AxisKind),
    pub partition: PartitionScheme,
    pub subband_weights: bool,
    pub max_iterations: usize,
    pub stop_tolerance: f64,
    pub record_history: bool,
    pub verbose: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            transform: (AxisKind::Dct, AxisKind::Dct, AxisKind::Dct),
            partition: PartitionScheme::default(),
            subband_weights: false,
            max_iterations: 300,
            stop_tolerance: 1e-6,
            record_history: true,
            verbose: false,
        }
    }
}

impl SolverSettings {
    pub fn config_for(&self, dims: (usize, usize, usize)) -> Result<SolverConfig> {
        Ok(SolverConfig {
            max_iterations: self.max_iterations,
            stop_tolerance: self.stop_tolerance,
            transform: TransformSpec::new(self.transform, dims)?,
            partition: self.partition.build(dims, self.subband_weights)?,
            record_history: self.record_history,
            verbose: self.verbose,
        })
    }

    pub fn describe_transform(&self) -> String {
        format!(
            "{},{},{}",
            self.transform.0.name(),
            self.transform.1.name(),
            self.transform.2.name()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{build_operator, forward, generate_mask, triangle_positions, NoiseModel};
    use crate::partition::GroupPartition;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_instance(
        seed: u64,
    ) -> (ForwardOperator, Datacube, Snapshot) {
        let mask = generate_mask(5, 8, 0.5, seed).unwrap();
        let profile = triangle_positions(4.0, 1.0).unwrap();
        let op = build_operator(&mask, &profile, 8, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(999));
        let cube = Datacube::from_vec(
            8,
            8,
            4,
            (0..8 * 8 * 4).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap();
        let g = forward(&op, &cube, &NoiseModel::None).unwrap();
        (op, cube, g)
    }

    #[test]
    fn feasible_theta_passes_through() {
        let (op, cube, g) = small_instance(1);
        let projected = project_linear_manifold(&op, &g, &cube).unwrap();
        for (a, b) in projected.cube.data().iter().zip(cube.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn hand_example_single_pixel_two_channels() {
        // N = 1, N_F = 2, H = [1, 1], g = 4, theta = [1, 1] -> f = [2, 2].
        let p = Snapshot::from_vec(1, 1, vec![1.0]).unwrap();
        let op = ForwardOperator::from_planes(vec![p.clone(), p]).unwrap();
        let g = Snapshot::from_vec(1, 1, vec![4.0]).unwrap();
        let theta = Datacube::from_vec(1, 1, 2, vec![1.0, 1.0]).unwrap();
        let projected = project_linear_manifold(&op, &g, &theta).unwrap();
        assert!((projected.cube.get(0, 0, 0) - 2.0).abs() < 1e-15);
        assert!((projected.cube.get(0, 0, 1) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn projection_restores_feasibility() {
        let (op, _cube, g) = small_instance(2);
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let theta = Datacube::from_vec(
            8,
            8,
            4,
            (0..8 * 8 * 4).map(|_| rng.random::<f64>() - 0.5).collect(),
        )
        .unwrap();
        let projected = project_linear_manifold(&op, &g, &theta).unwrap();
        let refit = forward(&op, &projected.cube, &NoiseModel::None).unwrap();
        let err: f64 = refit
            .data()
            .iter()
            .zip(g.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-10 * g.norm().max(1.0));
    }

    #[test]
    fn projection_is_idempotent() {
        let (op, _cube, g) = small_instance(3);
        let theta = Datacube::filled(8, 8, 4, 0.3).unwrap();
        let once = project_linear_manifold(&op, &g, &theta).unwrap();
        let twice = project_linear_manifold(&op, &g, &once.cube).unwrap();
        for (a, b) in once.cube.data().iter().zip(twice.cube.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_code_pixels_pass_through_and_flag_infeasible() {
        // Plane with a dead pixel at (0, 1).
        let plane = Snapshot::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let op = ForwardOperator::from_planes(vec![plane]).unwrap();
        let g = Snapshot::from_vec(1, 2, vec![2.0, 5.0]).unwrap();
        let theta = Datacube::from_vec(1, 2, 1, vec![0.5, 0.7]).unwrap();
        let projected = project_linear_manifold(&op, &g, &theta).unwrap();
        assert_eq!(projected.zero_code_pixels, 1);
        assert_eq!(projected.infeasible_pixels, 1);
        assert_eq!(projected.cube.get(0, 1, 0), 0.7);
        assert_eq!(projected.cube.get(0, 0, 0), 2.0);
    }

    #[test]
    fn group_norms_three_four_five() {
        let p = GroupPartition::new(vec![vec![0, 1]], vec![1.0], 2).unwrap();
        let norms = group_norms(&[3.0, 4.0], &p).unwrap();
        assert_eq!(norms, vec![5.0]);
    }

    #[test]
    fn group_norms_zero_vector() {
        let p = GroupPartition::blocks((2, 2, 1), (2, 2, 2)).unwrap();
        let norms = group_norms(&[0.0; 4], &p).unwrap();
        assert!(norms.iter().all(|&n| n == 0.0));
    }

    #[test]
    fn singleton_weighted_norm_reduces_to_l1() {
        let p = GroupPartition::singletons((2, 2, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w: Vec<f64> = (0..8).map(|_| rng.random::<f64>() - 0.5).collect();
        let l21 = weighted_l21_norm(&w, &p).unwrap();
        let l1: f64 = w.iter().map(|v| v.abs()).sum();
        assert!((l21 - l1).abs() < 1e-14);
    }

    #[test]
    fn radius_two_singleton_groups() {
        // Norms (5, 1), unit weights, one measurement: m* = 1, R = 4.
        let p = GroupPartition::new(vec![vec![0], vec![1]], vec![1.0, 1.0], 2).unwrap();
        let sel = select_radius(&[5.0, 1.0], &p, 1).unwrap();
        assert_eq!(sel.m_star, 1);
        assert!((sel.radius - 4.0).abs() < 1e-15);
        assert!((sel.reference_normalized_norm - 1.0).abs() < 1e-15);
    }

    #[test]
    fn radius_equal_norms_gives_zero_radius() {
        let p =
            GroupPartition::new(vec![vec![0], vec![1], vec![2]], vec![1.0; 3], 3).unwrap();
        let sel = select_radius(&[2.0, 2.0, 2.0], &p, 2).unwrap();
        assert_eq!(sel.m_star, 2);
        assert_eq!(sel.radius, 0.0);
        assert_eq!(sel.reference_normalized_norm, 2.0);
        // Shrinkage against an equal reference removes the tied norms
        // entirely: every factor is max(1 - 2/2, 0) = 0.
        let shrunk = project_l21_ball(&[2.0, 2.0, 2.0], &p, &sel).unwrap();
        assert_eq!(shrunk, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn radius_zero_coefficients() {
        let p = GroupPartition::new(vec![vec![0], vec![1]], vec![1.0, 1.0], 2).unwrap();
        let sel = select_radius(&[0.0, 0.0], &p, 1).unwrap();
        assert_eq!(sel.radius, 0.0);
    }

    #[test]
    fn radius_exhausted_partition_uses_zero_reference() {
        let p = GroupPartition::new(vec![vec![0], vec![1]], vec![1.0, 1.0], 2).unwrap();
        let sel = select_radius(&[5.0, 3.0], &p, 2).unwrap();
        assert_eq!(sel.m_star, 2);
        assert_eq!(sel.reference_normalized_norm, 0.0);
        assert!((sel.radius - 8.0).abs() < 1e-15);
        // Zero reference -> shrinkage leaves everything unchanged.
        let shrunk = project_l21_ball(&[5.0, 3.0], &p, &sel).unwrap();
        assert_eq!(shrunk, vec![5.0, 3.0]);
    }

    #[test]
    fn shrinkage_hand_example() {
        // w = (5, 1), singleton groups, reference norm 1 -> w' = (4, 0).
        let p = GroupPartition::new(vec![vec![0], vec![1]], vec![1.0, 1.0], 2).unwrap();
        let sel = select_radius(&[5.0, 1.0], &p, 1).unwrap();
        let shrunk = project_l21_ball(&[5.0, 1.0], &p, &sel).unwrap();
        assert!((shrunk[0] - 4.0).abs() < 1e-15);
        assert_eq!(shrunk[1], 0.0);
    }

    #[test]
    fn shrinkage_soft_thresholds_group_norms() {
        // Brute-force check on a random 100-group instance.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let count = 400usize;
        let mut indices: Vec<u32> = (0..count as u32).collect();
        // Deterministic shuffle via random swaps.
        for i in (1..count).rev() {
            let j = rng.random_range(0..=i);
            indices.swap(i, j);
        }
        let mut groups = Vec::new();
        for chunk in indices.chunks(4) {
            groups.push(chunk.to_vec());
        }
        let weights: Vec<f64> = (0..groups.len())
            .map(|_| 0.5 + 1.5 * rng.random::<f64>())
            .collect();
        let p = GroupPartition::new(groups, weights, count).unwrap();
        let w: Vec<f64> = (0..count).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let sel = select_radius(&w, &p, 120).unwrap();
        let shrunk = project_l21_ball(&w, &p, &sel).unwrap();
        let before = group_norms(&w, &p).unwrap();
        let after = group_norms(&shrunk, &p).unwrap();
        for l in 0..p.group_count() {
            let threshold = p.weights()[l] * sel.reference_normalized_norm;
            let expected = (before[l] - threshold).max(0.0);
            assert!(
                (after[l] - expected).abs() <= 1e-10,
                "group {l}: {} vs {}",
                after[l],
                expected
            );
        }
    }

    #[test]
    fn shrinkage_never_flips_sign_or_grows() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = GroupPartition::blocks((4, 4, 4), (2, 2, 2)).unwrap();
        let w: Vec<f64> = (0..64).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let sel = select_radius(&w, &p, 20).unwrap();
        let shrunk = project_l21_ball(&w, &p, &sel).unwrap();
        for (a, b) in w.iter().zip(&shrunk) {
            assert!(b.abs() <= a.abs() + 1e-15);
            assert!(a * b >= 0.0);
        }
        let before = weighted_l21_norm(&w, &p).unwrap();
        let after = weighted_l21_norm(&shrunk, &p).unwrap();
        assert!(after <= before + 1e-12);
    }

    #[test]
    fn shrinkage_is_non_expansive_for_shared_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = GroupPartition::blocks((4, 4, 2), (2, 2, 2)).unwrap();
        for _ in 0..20 {
            let a: Vec<f64> = (0..32).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let b: Vec<f64> = (0..32).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let sel = select_radius(&a, &p, 10).unwrap();
            let pa = project_l21_ball(&a, &p, &sel).unwrap();
            let pb = project_l21_ball(&b, &p, &sel).unwrap();
            let d_in: f64 = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            let d_out: f64 = pa
                .iter()
                .zip(&pb)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            assert!(d_out <= d_in + 1e-12);
        }
    }

    #[test]
    fn fully_determined_single_channel_recovers_in_one_projection() {
        let plane = Snapshot::from_vec(3, 3, vec![1.0; 9]).unwrap();
        let op = ForwardOperator::from_planes(vec![plane]).unwrap();
        let truth = Datacube::from_vec(3, 3, 1, (1..=9).map(|v| v as f64).collect()).unwrap();
        let g = forward(&op, &truth, &NoiseModel::None).unwrap();
        let settings = SolverSettings {
            max_iterations: 10,
            ..Default::default()
        };
        let config = settings.config_for((3, 3, 1)).unwrap();
        let solution = solve(&op, &g, &config).unwrap();
        assert_eq!(solution.status, SolveStatus::Converged);
        for (a, b) in solution.estimate.data().iter().zip(truth.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn solver_histories_are_deterministic() {
        let (op, _cube, g) = small_instance(4);
        let settings = SolverSettings {
            max_iterations: 20,
            stop_tolerance: 1e-14,
            ..Default::default()
        };
        let config = settings.config_for((8, 8, 4)).unwrap();
        let s1 = solve(&op, &g, &config).unwrap();
        let s2 = solve(&op, &g, &config).unwrap();
        assert_eq!(s1.state.gap_norm_history, s2.state.gap_norm_history);
        assert_eq!(s1.state.residual_history, s2.state.residual_history);
        assert_eq!(s1.estimate.data(), s2.estimate.data());
    }

    #[test]
    fn solver_is_resumable_mid_run() {
        let (op, _cube, g) = small_instance(5);
        let settings = SolverSettings {
            max_iterations: 12,
            stop_tolerance: 1e-14,
            ..Default::default()
        };
        let config = settings.config_for((8, 8, 4)).unwrap();

        let mut reference = GapSolver::new(&op, &g, &config).unwrap();
        reference.run().unwrap();

        let mut first = GapSolver::new(&op, &g, &config).unwrap();
        for _ in 0..5 {
            first.step().unwrap();
        }
        let saved = first.state().clone();
        let mut second = GapSolver::resume(&op, &g, &config, saved).unwrap();
        second.run().unwrap();

        assert_eq!(
            reference.state().gap_norm_history,
            second.state().gap_norm_history
        );
        assert_eq!(reference.estimate().data(), second.estimate().data());
    }

    #[test]
    fn normalized_residual_basics() {
        let (op, cube, g) = small_instance(6);
        let exact = normalized_residual(&op, &cube, &g).unwrap();
        assert!(!exact.absolute);
        assert!(exact.value < 1e-14);
        let zero = Datacube::zeros(8, 8, 4).unwrap();
        let whole = normalized_residual(&op, &zero, &g).unwrap();
        assert!((whole.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalized_residual_tracks_perturbations() {
        let (op, cube, g) = small_instance(7);
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let delta: Vec<f64> = (0..cube.data().len())
            .map(|_| 1e-3 * (rng.random::<f64>() - 0.5))
            .collect();
        let perturbed = Datacube::from_vec(
            8,
            8,
            4,
            cube.data().iter().zip(&delta).map(|(a, d)| a + d).collect(),
        )
        .unwrap();
        let report = normalized_residual(&op, &perturbed, &g).unwrap();
        let delta_cube = Datacube::from_vec(8, 8, 4, delta).unwrap();
        let h_delta = forward(&op, &delta_cube, &NoiseModel::None).unwrap();
        let expected = h_delta.norm() / g.norm();
        assert!((report.value - expected).abs() < 1e-12);
    }

    #[test]
    fn normalized_residual_zero_snapshot_is_flagged() {
        let (op, cube, _g) = small_instance(8);
        let zero_g = Snapshot::zeros(8, 8).unwrap();
        let report = normalized_residual(&op, &cube, &zero_g).unwrap();
        assert!(report.absolute);
        assert!(report.value > 0.0);
    }

    #[test]
    fn manifold_projection_matches_minimum_norm_closed_form() {
        // Against theta + H^T (H H^T)^{-1} (g - H theta) with diagonal H H^T.
        use crate::forward::explicit_matrix;
        for seed in 0..5u64 {
            let (op, _cube, g) = small_instance(40 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta = Datacube::from_vec(
                8,
                8,
                4,
                (0..8 * 8 * 4).map(|_| rng.random::<f64>() - 0.5).collect(),
            )
            .unwrap();
            let projected = project_linear_manifold(&op, &g, &theta).unwrap();

            let h = explicit_matrix(&op).unwrap();
            let h_theta = h.matvec(theta.data()).unwrap();
            let mut v: Vec<f64> = g
                .data()
                .iter()
                .zip(&h_theta)
                .map(|(gi, hi)| gi - hi)
                .collect();
            for (vi, &nz) in v.iter_mut().zip(op.normalizer()) {
                if nz != 0.0 {
                    *vi /= nz;
                } else {
                    *vi = 0.0;
                }
            }
            let correction = h.matvec_transpose(&v).unwrap();
            for (idx, (&out, &th)) in projected
                .cube
                .data()
                .iter()
                .zip(theta.data())
                .enumerate()
            {
                let oracle = th + correction[idx];
                assert!((out - oracle).abs() <= 1e-8, "index {idx}");
            }
        }
    }
}

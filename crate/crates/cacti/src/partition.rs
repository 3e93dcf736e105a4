//! Index groups and weights defining the weighted l2,1 norm on transform
//! coefficients.

use crate::error::{Error, Result};

/// A disjoint, exhaustive grouping of the coefficient indices, with one
/// positive weight per group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPartition {
    groups: Vec<Vec<u32>>,
    weights: Vec<f64>,
    index_count: usize,
}

impl GroupPartition {
    /// Validates that `groups` is a partition of `0..index_count` and that
    /// every weight is positive.
    pub fn new(groups: Vec<Vec<u32>>, weights: Vec<f64>, index_count: usize) -> Result<Self> {
        if groups.len() != weights.len() {
            return Err(Error::dims(
                "GroupPartition::new",
                format!("{} weights", groups.len()),
                format!("{}", weights.len()),
            ));
        }
        if groups.is_empty() {
            return Err(Error::invalid("groups", "partition needs at least one group"));
        }
        if let Some(w) = weights.iter().find(|&&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::invalid(
                "weights",
                format!("group weights must be positive and finite, got {w}"),
            ));
        }
        let mut seen = vec![false; index_count];
        let mut covered = 0usize;
        for group in &groups {
            for &idx in group {
                let idx = idx as usize;
                if idx >= index_count {
                    return Err(Error::invalid(
                        "groups",
                        format!("index {idx} out of range {index_count}"),
                    ));
                }
                if seen[idx] {
                    return Err(Error::invalid(
                        "groups",
                        format!("index {idx} appears in more than one group"),
                    ));
                }
                seen[idx] = true;
                covered += 1;
            }
        }
        if covered != index_count {
            return Err(Error::invalid(
                "groups",
                format!("groups cover {covered} of {index_count} indices"),
            ));
        }
        Ok(Self {
            groups,
            weights,
            index_count,
        })
    }

    /// Non-overlapping blocks of coefficients; trailing blocks are clipped at
    /// the volume boundary. The 2x2x2 block is the solver default.
    pub fn blocks(
        dims: (usize, usize, usize),
        block: (usize, usize, usize),
    ) -> Result<Self> {
        let (rows, cols, frames) = dims;
        let (br, bc, bf) = block;
        if br == 0 || bc == 0 || bf == 0 {
            return Err(Error::invalid("block", "block sides must be >= 1"));
        }
        let mut groups = Vec::new();
        for k0 in (0..frames).step_by(bf) {
            for i0 in (0..rows).step_by(br) {
                for j0 in (0..cols).step_by(bc) {
                    let mut group = Vec::new();
                    for k in k0..(k0 + bf).min(frames) {
                        for i in i0..(i0 + br).min(rows) {
                            for j in j0..(j0 + bc).min(cols) {
                                group.push((k * rows * cols + i * cols + j) as u32);
                            }
                        }
                    }
                    groups.push(group);
                }
            }
        }
        let weights = vec![1.0; groups.len()];
        Self::new(groups, weights, rows * cols * frames)
    }

    /// One group per coefficient; with unit weights the weighted l2,1 norm
    /// reduces to the l1 norm.
    pub fn singletons(dims: (usize, usize, usize)) -> Result<Self> {
        let count = dims.0 * dims.1 * dims.2;
        if count == 0 {
            return Err(Error::invalid("dims", "volume must be non-empty"));
        }
        let groups = (0..count).map(|i| vec![i as u32]).collect();
        Self::new(groups, vec![1.0; count], count)
    }

    /// Blocks with weights growing by coefficient frequency band:
    /// beta = 1 + max dyadic level of the block's lowest corner. Off by
    /// default; exposed for experimentation.
    pub fn blocks_with_subband_weights(
        dims: (usize, usize, usize),
        block: (usize, usize, usize),
    ) -> Result<Self> {
        let base = Self::blocks(dims, block)?;
        let (rows, cols, _) = dims;
        let level = |x: usize| -> usize {
            if x == 0 {
                0
            } else {
                (usize::BITS - x.leading_zeros()) as usize
            }
        };
        let weights = base
            .groups
            .iter()
            .map(|group| {
                let first = group[0] as usize;
                let k = first / (rows * cols);
                let i = (first % (rows * cols)) / cols;
                let j = first % cols;
                (1 + level(i).max(level(j)).max(level(k))) as f64
            })
            .collect();
        Self::new(base.groups, weights, base.index_count)
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[Vec<u32>] {
        &self.groups
    }

    pub fn group(&self, l: usize) -> &[u32] {
        &self.groups[l]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn index_count(&self) -> usize {
        self.index_count
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_partition_the_volume_with_remainders() {
        let p = GroupPartition::blocks((3, 3, 3), (2, 2, 2)).unwrap();
        assert_eq!(p.index_count(), 27);
        let total: usize = p.groups().iter().map(|g| g.len()).sum();
        assert_eq!(total, 27);
        assert_eq!(p.group_count(), 8);
        // Corner block is clipped to a single coefficient.
        assert!(p.groups().iter().any(|g| g.len() == 1));
    }

    #[test]
    fn singletons_cover_every_index() {
        let p = GroupPartition::singletons((2, 2, 2)).unwrap();
        assert_eq!(p.group_count(), 8);
        assert!(p.groups().iter().all(|g| g.len() == 1));
    }

    #[test]
    fn rejects_overlap_gap_and_bad_weights() {
        assert!(GroupPartition::new(vec![vec![0], vec![0]], vec![1.0, 1.0], 2).is_err());
        assert!(GroupPartition::new(vec![vec![0]], vec![1.0], 2).is_err());
        assert!(GroupPartition::new(vec![vec![0], vec![1]], vec![1.0, 0.0], 2).is_err());
        assert!(GroupPartition::new(vec![vec![0], vec![2]], vec![1.0, 1.0], 2).is_err());
    }

    #[test]
    fn subband_weights_grow_with_frequency() {
        let p = GroupPartition::blocks_with_subband_weights((8, 8, 4), (2, 2, 2)).unwrap();
        let first = p.weights()[0];
        let last = *p.weights().last().unwrap();
        assert_eq!(first, 1.0);
        assert!(last > first);
    }
}

//! Group partitions and sparse connectivity masks.
//!
//! A layer's neurons are split into balanced groups; consecutive layers are
//! wired group-to-group with a high within-pair probability `p` and a much
//! lower cross-pair probability `p'`, giving an approximately block-diagonal
//! adjacency. An Erdős–Rényi builder provides the unstructured baseline at a
//! matched density.

mod mask;

pub use mask::{
    build_er_mask, build_g2g_mask, mask_stats, BlockDensities, ConnectivityMask, MaskProvenance,
    MaskStats,
};

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// A balanced partition of a layer's neurons into groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAssignment {
    layer_size: usize,
    group_count: usize,
    assignment: Vec<u32>,
}

impl GroupAssignment {
    fn validate(layer_size: usize, group_count: usize) -> Result<()> {
        if layer_size == 0 || group_count == 0 {
            return Err(Error::Config(format!(
                "layer size ({layer_size}) and group count ({group_count}) must be positive"
            )));
        }
        if layer_size % group_count != 0 {
            return Err(Error::Config(format!(
                "group count {group_count} does not divide layer size {layer_size}"
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn layer_size(&self) -> usize {
        self.layer_size
    }

    #[inline]
    pub fn group_count(&self) -> usize {
        self.group_count
    }

    #[inline]
    pub fn group_size(&self) -> usize {
        self.layer_size / self.group_count
    }

    #[inline]
    pub fn group_of(&self, neuron: usize) -> u32 {
        self.assignment[neuron]
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    /// Neuron indices belonging to group `k`, ascending.
    pub fn members(&self, k: u32) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &g)| g == k)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Contiguous blocks by index: neuron `l` goes to group `⌊l / (N/G)⌋`.
pub fn partition_index(layer_size: usize, group_count: usize) -> Result<GroupAssignment> {
    GroupAssignment::validate(layer_size, group_count)?;
    let block = layer_size / group_count;
    Ok(GroupAssignment {
        layer_size,
        group_count,
        assignment: (0..layer_size).map(|l| (l / block) as u32).collect(),
    })
}

/// Interleaved assignment: neuron `l` goes to group `l mod G`.
pub fn partition_interleaved(layer_size: usize, group_count: usize) -> Result<GroupAssignment> {
    GroupAssignment::validate(layer_size, group_count)?;
    Ok(GroupAssignment {
        layer_size,
        group_count,
        assignment: (0..layer_size).map(|l| (l % group_count) as u32).collect(),
    })
}

/// Uniformly random balanced partition: a seeded permutation of the
/// index-based blocks. The same seed always yields the same assignment.
pub fn partition_random(
    layer_size: usize,
    group_count: usize,
    seed: u64,
) -> Result<GroupAssignment> {
    GroupAssignment::validate(layer_size, group_count)?;
    let mut rng = crate::rng::seeded(seed);
    let mut perm: Vec<usize> = (0..layer_size).collect();
    // Fisher-Yates, descending, so draw k uses range 0..=k.
    for i in (1..layer_size).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    let block = layer_size / group_count;
    let mut assignment = vec![0u32; layer_size];
    for (pos, &neuron) in perm.iter().enumerate() {
        assignment[neuron] = (pos / block) as u32;
    }
    Ok(GroupAssignment {
        layer_size,
        group_count,
        assignment,
    })
}

/// Alternating scheme: even layers partition by index, odd layers interleave.
pub fn partition_mixer(
    layer_size: usize,
    group_count: usize,
    layer_index: usize,
) -> Result<GroupAssignment> {
    if layer_index % 2 == 0 {
        partition_index(layer_size, group_count)
    } else {
        partition_interleaved(layer_size, group_count)
    }
}

/// Expected mask density `p/G + p'·(G−1)/G` of a group-to-group layer.
pub fn expected_density(p: f64, p_prime: f64, group_count: usize) -> Result<f64> {
    if group_count == 0 {
        return Err(Error::Config("group count must be >= 1".into()));
    }
    check_probabilities(p, p_prime)?;
    let g = group_count as f64;
    Ok(p / g + p_prime * (g - 1.0) / g)
}

pub(crate) fn check_probabilities(p: f64, p_prime: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) || !(0.0..=1.0).contains(&p_prime) {
        return Err(Error::Config(format!(
            "probabilities must lie in [0,1]: p = {p}, p' = {p_prime}"
        )));
    }
    if p_prime > p {
        return Err(Error::Config(format!(
            "p' ({p_prime}) must not exceed p ({p})"
        )));
    }
    Ok(())
}

pub(crate) use check_probabilities as validate_probabilities;

use super::{validate_probabilities, GroupAssignment};
use crate::error::{Error, Result};
use crate::tensor::Matrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

const MASK_MAGIC: &[u8; 4] = b"G2GM";
const MASK_VERSION: u32 = 1;

/// How a mask was constructed. Rewiring mutates the bits but keeps the
/// original construction record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskProvenance {
    GroupToGroup {
        p: f64,
        p_prime: f64,
        src: GroupAssignment,
        dst: GroupAssignment,
        seed: u64,
    },
    ErdosRenyi {
        density: f64,
        seed: u64,
    },
    Dense,
}

/// Binary adjacency between two consecutive layers, bit-packed row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityMask {
    rows: usize,
    cols: usize,
    words: Vec<u64>,
    active: usize,
    provenance: MaskProvenance,
}

impl ConnectivityMask {
    fn empty(rows: usize, cols: usize, provenance: MaskProvenance) -> Self {
        let nbits = rows * cols;
        ConnectivityMask {
            rows,
            cols,
            words: vec![0u64; nbits.div_ceil(64)],
            active: 0,
            provenance,
        }
    }

    /// All-ones mask (a dense layer expressed in mask form).
    pub fn dense(rows: usize, cols: usize) -> Self {
        let mut m = Self::empty(rows, cols, MaskProvenance::Dense);
        for w in &mut m.words {
            *w = u64::MAX;
        }
        let nbits = rows * cols;
        let extra = m.words.len() * 64 - nbits;
        if extra > 0 {
            *m.words.last_mut().unwrap() >>= extra;
        }
        m.active = nbits;
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        let bit = r * self.cols + c;
        (self.words[bit / 64] >> (bit % 64)) & 1 == 1
    }

    /// Sets one bit, keeping the active count in sync.
    pub fn set(&mut self, r: usize, c: usize, value: bool) {
        let bit = r * self.cols + c;
        let word = &mut self.words[bit / 64];
        let m = 1u64 << (bit % 64);
        let was = *word & m != 0;
        if value && !was {
            *word |= m;
            self.active += 1;
        } else if !value && was {
            *word &= !m;
            self.active -= 1;
        }
    }

    #[inline]
    pub fn active_count(&self) -> usize {
        self.active
    }

    pub fn density(&self) -> f64 {
        self.active as f64 / (self.rows * self.cols) as f64
    }

    pub fn provenance(&self) -> &MaskProvenance {
        &self.provenance
    }

    pub fn is_all_ones(&self) -> bool {
        self.active == self.rows * self.cols
    }

    /// Active edges in row-major order.
    pub fn iter_active(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let cols = self.cols;
        (0..self.rows).flat_map(move |r| {
            (0..cols).filter_map(move |c| self.get(r, c).then_some((r as u32, c as u32)))
        })
    }

    /// Inactive edges in row-major order.
    pub fn iter_inactive(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let cols = self.cols;
        (0..self.rows).flat_map(move |r| {
            (0..cols).filter_map(move |c| (!self.get(r, c)).then_some((r as u32, c as u32)))
        })
    }

    /// Returns `weights ⊙ mask` without touching the input.
    pub fn apply_copy(&self, weights: &Matrix) -> Matrix {
        let mut out = weights.clone();
        self.zero_inactive(&mut out);
        out
    }

    /// Zeroes every inactive position of `m` in place.
    pub fn zero_inactive(&self, m: &mut Matrix) {
        debug_assert_eq!((m.rows(), m.cols()), (self.rows, self.cols));
        let data = m.as_mut_slice();
        for (i, v) in data.iter_mut().enumerate() {
            if (self.words[i / 64] >> (i % 64)) & 1 == 0 {
                *v = 0.0;
            }
        }
    }

    /// True when every nonzero entry of `m` sits on an active edge.
    pub fn permits(&self, m: &Matrix) -> bool {
        m.as_slice()
            .iter()
            .enumerate()
            .all(|(i, &v)| v == 0.0 || (self.words[i / 64] >> (i % 64)) & 1 == 1)
    }

    /// Serialize: magic, version, dims, active count, provenance (JSON),
    /// then the row-major bitset payload as little-endian words.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MASK_MAGIC)?;
        w.write_all(&MASK_VERSION.to_le_bytes())?;
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u64).to_le_bytes())?;
        w.write_all(&(self.active as u64).to_le_bytes())?;
        let prov = serde_json::to_vec(&self.provenance)?;
        w.write_all(&(prov.len() as u64).to_le_bytes())?;
        w.write_all(&prov)?;
        for word in &self.words {
            w.write_all(&word.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MASK_MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad mask magic {magic:?}, expected {MASK_MAGIC:?}"
            )));
        }
        let version = read_u32(r)?;
        if version != MASK_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported mask version {version}"
            )));
        }
        let rows = read_u64(r)? as usize;
        let cols = read_u64(r)? as usize;
        let active = read_u64(r)? as usize;
        let prov_len = read_u64(r)? as usize;
        let mut prov = vec![0u8; prov_len];
        r.read_exact(&mut prov)?;
        let provenance: MaskProvenance = serde_json::from_slice(&prov)?;
        let nwords = (rows * cols).div_ceil(64);
        let mut words = vec![0u64; nwords];
        for w in &mut words {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            *w = u64::from_le_bytes(buf);
        }
        let counted: usize = words.iter().map(|w| w.count_ones() as usize).sum();
        if counted != active {
            return Err(Error::Checkpoint(format!(
                "mask active count mismatch: header {active}, payload {counted}"
            )));
        }
        Ok(ConnectivityMask {
            rows,
            cols,
            words,
            active,
            provenance,
        })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Group-to-group mask: entry `(i,j)` is Bernoulli(`p`) when the source and
/// destination neurons share a group index, Bernoulli(`p'`) otherwise.
///
/// One uniform draw is consumed per entry in row-major order regardless of
/// the group pattern, so the stream alignment never depends on the grouping.
pub fn build_g2g_mask(
    src: &GroupAssignment,
    dst: &GroupAssignment,
    p: f64,
    p_prime: f64,
    seed: u64,
) -> Result<ConnectivityMask> {
    if src.group_count() != dst.group_count() {
        return Err(Error::Config(format!(
            "group counts differ: src {} vs dst {}",
            src.group_count(),
            dst.group_count()
        )));
    }
    validate_probabilities(p, p_prime)?;

    let mut mask = ConnectivityMask::empty(
        src.layer_size(),
        dst.layer_size(),
        MaskProvenance::GroupToGroup {
            p,
            p_prime,
            src: src.clone(),
            dst: dst.clone(),
            seed,
        },
    );
    let mut rng = crate::rng::seeded(seed);
    for i in 0..src.layer_size() {
        let gi = src.group_of(i);
        for j in 0..dst.layer_size() {
            let prob = if gi == dst.group_of(j) { p } else { p_prime };
            let u: f64 = rng.random();
            if u < prob {
                mask.set(i, j, true);
            }
        }
    }
    Ok(mask)
}

/// Erdős–Rényi mask: every entry independently active with the given density.
pub fn build_er_mask(rows: usize, cols: usize, density: f64, seed: u64) -> Result<ConnectivityMask> {
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::Config(format!(
            "density must lie in [0,1]: {density}"
        )));
    }
    let mut mask = ConnectivityMask::empty(rows, cols, MaskProvenance::ErdosRenyi { density, seed });
    let mut rng = crate::rng::seeded(seed);
    for i in 0..rows {
        for j in 0..cols {
            let u: f64 = rng.random();
            if u < density {
                mask.set(i, j, true);
            }
        }
    }
    Ok(mask)
}

/// Per-group-pair densities, row-major over (src group, dst group).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockDensities {
    pub group_count: usize,
    pub densities: Vec<f64>,
}

impl BlockDensities {
    pub fn get(&self, src_group: usize, dst_group: usize) -> f64 {
        self.densities[src_group * self.group_count + dst_group]
    }
}

/// Exact counts for a mask; block densities when the provenance carries
/// group assignments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskStats {
    pub rows: usize,
    pub cols: usize,
    pub active_count: usize,
    pub density: f64,
    pub per_block: Option<BlockDensities>,
}

pub fn mask_stats(mask: &ConnectivityMask) -> MaskStats {
    let per_block = match mask.provenance() {
        MaskProvenance::GroupToGroup { src, dst, .. } => {
            let g = src.group_count();
            let mut counts = vec![0usize; g * g];
            for (r, c) in mask.iter_active() {
                let gs = src.group_of(r as usize) as usize;
                let gd = dst.group_of(c as usize) as usize;
                counts[gs * g + gd] += 1;
            }
            let block_cells = (src.group_size() * dst.group_size()) as f64;
            Some(BlockDensities {
                group_count: g,
                densities: counts.iter().map(|&c| c as f64 / block_cells).collect(),
            })
        }
        _ => None,
    };
    MaskStats {
        rows: mask.rows(),
        cols: mask.cols(),
        active_count: mask.active_count(),
        density: mask.density(),
        per_block,
    }
}

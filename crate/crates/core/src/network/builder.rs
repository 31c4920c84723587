use super::{
    DenseLinear, EmbedderGeometry, G2GModel, GroupingStrategy, ModelKind, PatchEmbedder,
    SparseLinearLayer,
};
use crate::error::{Error, Result};
use crate::rng::{substream, Purpose};
use crate::tensor::{AdamParams, AdamState, Matrix};
use crate::topology::{
    build_er_mask, build_g2g_mask, expected_density, partition_index, partition_mixer,
    partition_random, ConnectivityMask, GroupAssignment,
};
use rand::Rng;

/// Everything the builder needs to materialize a model.
#[derive(Debug, Clone)]
pub struct NetworkConfig {
    pub kind: ModelKind,
    pub grouping: GroupingStrategy,
    pub p: f64,
    pub p_prime: f64,
    pub groups: usize,
    pub hidden_width: usize,
    pub hidden_depth: usize,
    pub class_count: usize,
    pub image_channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub patch_grid: (usize, usize),
    pub embed_channels: usize,
    pub topology_seed: u64,
    pub init_seed: u64,
    pub adam: AdamParams,
}

impl NetworkConfig {
    fn geometry(&self) -> Result<EmbedderGeometry> {
        EmbedderGeometry::new(
            self.image_channels,
            self.image_h,
            self.image_w,
            self.patch_grid.0,
            self.patch_grid.1,
            self.embed_channels,
        )
    }
}

/// Derive a raw seed for one of the pure topology builders.
fn derived_seed(master: u64, purpose: Purpose, layer: u32) -> u64 {
    substream(master, purpose, layer, 0).random()
}

/// Width of the uniform fully-connected baseline matching `target` parameters
/// across `depth` hidden matrices fed by an `embed`-wide input:
/// solves `embed·w + (depth−1)·w² = target`.
pub fn fc_v1_width(embed: usize, depth: usize, target: usize) -> usize {
    let e = embed as f64;
    let t = target as f64;
    if depth <= 1 {
        return (t / e).round() as usize;
    }
    let k = (depth - 1) as f64;
    let w = (-e + (e * e + 4.0 * k * t).sqrt()) / (2.0 * k);
    w.round().max(1.0) as usize
}

/// Build a model of the requested kind. Masks come from the topology seed;
/// weights from the init seed; both are reproducible bit-for-bit.
pub fn build_model(cfg: &NetworkConfig) -> Result<G2GModel> {
    if cfg.hidden_depth == 0 {
        return Err(Error::Config("hidden depth must be >= 1".into()));
    }
    if cfg.hidden_width == 0 || cfg.class_count == 0 {
        return Err(Error::Config("widths and class count must be positive".into()));
    }
    let geom = cfg.geometry()?;
    let embed_len = geom.embedding_len();

    let (widths, masks, grouping) = match cfg.kind {
        ModelKind::G2g => {
            let widths = layer_widths(embed_len, cfg.hidden_width, cfg.hidden_depth);
            let masks = g2g_masks(cfg, &widths)?;
            (widths, masks, Some(cfg.grouping))
        }
        ModelKind::Er => {
            let widths = layer_widths(embed_len, cfg.hidden_width, cfg.hidden_depth);
            let density = expected_density(cfg.p, cfg.p_prime, cfg.groups)?;
            let masks = widths
                .windows(2)
                .enumerate()
                .map(|(l, w)| {
                    build_er_mask(
                        w[0],
                        w[1],
                        density,
                        derived_seed(cfg.topology_seed, Purpose::Mask, l as u32),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            (widths, masks, None)
        }
        ModelKind::FcV2 => {
            let widths = layer_widths(embed_len, cfg.hidden_width, cfg.hidden_depth);
            let masks = dense_masks(&widths);
            (widths, masks, None)
        }
        ModelKind::FcV1 => {
            let density = expected_density(cfg.p, cfg.p_prime, cfg.groups)?;
            let g2g_widths = layer_widths(embed_len, cfg.hidden_width, cfg.hidden_depth);
            let dense_total: usize = g2g_widths.windows(2).map(|w| w[0] * w[1]).sum();
            let target = (density * dense_total as f64).round() as usize;
            let w = fc_v1_width(embed_len, cfg.hidden_depth, target);
            let widths = layer_widths(embed_len, w, cfg.hidden_depth);
            let masks = dense_masks(&widths);
            (widths, masks, None)
        }
    };

    let mut hidden = Vec::with_capacity(cfg.hidden_depth);
    for (l, mask) in masks.into_iter().enumerate() {
        hidden.push(init_sparse_layer(
            mask,
            substream(cfg.init_seed, Purpose::WeightInit, l as u32, 0),
            cfg.adam,
        ));
    }

    let last_width = *widths.last().unwrap();
    let classifier = init_dense(
        last_width,
        cfg.class_count,
        substream(cfg.init_seed, Purpose::ClassifierInit, 0, 0),
        cfg.adam,
    );
    let embedder = PatchEmbedder::init(geom, cfg.init_seed, cfg.adam);

    Ok(G2GModel {
        embedder,
        hidden,
        classifier,
        kind: cfg.kind,
        grouping,
    })
}

fn layer_widths(embed_len: usize, hidden_width: usize, depth: usize) -> Vec<usize> {
    let mut widths = vec![embed_len];
    widths.extend(std::iter::repeat(hidden_width).take(depth));
    widths
}

fn dense_masks(widths: &[usize]) -> Vec<ConnectivityMask> {
    widths
        .windows(2)
        .map(|w| ConnectivityMask::dense(w[0], w[1]))
        .collect()
}

fn g2g_masks(cfg: &NetworkConfig, widths: &[usize]) -> Result<Vec<ConnectivityMask>> {
    let assignments: Vec<GroupAssignment> = widths
        .iter()
        .enumerate()
        .map(|(l, &n)| partition_for(cfg, n, l))
        .collect::<Result<_>>()?;
    assignments
        .windows(2)
        .enumerate()
        .map(|(l, pair)| {
            build_g2g_mask(
                &pair[0],
                &pair[1],
                cfg.p,
                cfg.p_prime,
                derived_seed(cfg.topology_seed, Purpose::Mask, l as u32),
            )
        })
        .collect()
}

fn partition_for(cfg: &NetworkConfig, layer_size: usize, layer_index: usize) -> Result<GroupAssignment> {
    match cfg.grouping {
        GroupingStrategy::Index => partition_index(layer_size, cfg.groups),
        GroupingStrategy::Mixer => partition_mixer(layer_size, cfg.groups, layer_index),
        GroupingStrategy::Random => partition_random(
            layer_size,
            cfg.groups,
            derived_seed(cfg.topology_seed, Purpose::GroupShuffle, layer_index as u32),
        ),
    }
}

/// Kaiming-uniform init where each output column's bound uses its ACTIVE
/// fan-in. One uniform is drawn per entry in row-major order regardless of
/// the mask, keeping the stream aligned across topologies.
fn init_sparse_layer(
    mask: ConnectivityMask,
    mut rng: rand_chacha::ChaCha8Rng,
    adam: AdamParams,
) -> SparseLinearLayer {
    let (rows, cols) = (mask.rows(), mask.cols());
    let mut fan_in = vec![0usize; cols];
    for (_, c) in mask.iter_active() {
        fan_in[c as usize] += 1;
    }
    let bounds: Vec<f32> = fan_in
        .iter()
        .map(|&f| if f == 0 { 0.0 } else { (6.0 / f as f32).sqrt() })
        .collect();

    let mut weight = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let row = weight.row_mut(r);
        for (c, v) in row.iter_mut().enumerate() {
            let u: f32 = rng.random_range(-1.0..1.0);
            *v = if mask.get(r, c) { u * bounds[c] } else { 0.0 };
        }
    }

    SparseLinearLayer {
        weight,
        bias: Matrix::zeros(1, cols),
        adam_w: AdamState::new(rows, cols, adam),
        adam_b: AdamState::new(1, cols, adam),
        mask,
    }
}

fn init_dense(
    rows: usize,
    cols: usize,
    mut rng: rand_chacha::ChaCha8Rng,
    adam: AdamParams,
) -> DenseLinear {
    let bound = (6.0 / rows as f32).sqrt();
    let weight = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0f32..1.0) * bound);
    DenseLinear {
        weight,
        bias: Matrix::zeros(1, cols),
        adam_w: AdamState::new(rows, cols, adam),
        adam_b: AdamState::new(1, cols, adam),
    }
}

use crate::error::{Error, Result};
use crate::rng::{substream, Purpose};
use crate::tensor::{adam_step, AdamParams, AdamState, Matrix};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Patch/convolution geometry of the embedder.
///
/// The image splits into a `grid_rows × grid_cols` grid of patches; one shared
/// conv kernel of height `patch_h` slides horizontally across each patch. The
/// stride is `⌊patch_w/2⌋` and the kernel width `patch_w − stride`, which puts
/// two kernel positions in every patch and makes each patch contribute
/// `2 · out_channels` embedding features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderGeometry {
    pub in_channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub out_channels: usize,
}

impl EmbedderGeometry {
    pub fn new(
        in_channels: usize,
        image_h: usize,
        image_w: usize,
        grid_rows: usize,
        grid_cols: usize,
        out_channels: usize,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || grid_rows == 0 || grid_cols == 0 {
            return Err(Error::Config("embedder dimensions must be positive".into()));
        }
        if image_h % grid_rows != 0 || image_w % grid_cols != 0 {
            return Err(Error::Config(format!(
                "image {image_h}x{image_w} not divisible by patch grid {grid_rows}x{grid_cols}"
            )));
        }
        let patch_h = image_h / grid_rows;
        let patch_w = image_w / grid_cols;
        let stride = patch_w / 2;
        if stride == 0 {
            return Err(Error::Config(format!(
                "patch width {patch_w} too small for a strided kernel"
            )));
        }
        let kernel_w = patch_w - stride;
        Ok(EmbedderGeometry {
            in_channels,
            image_h,
            image_w,
            grid_rows,
            grid_cols,
            patch_h,
            patch_w,
            kernel_h: patch_h,
            kernel_w,
            stride,
            out_channels,
        })
    }

    #[inline]
    pub fn out_positions(&self) -> usize {
        (self.patch_w - self.kernel_w) / self.stride + 1
    }

    #[inline]
    pub fn patch_count(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    #[inline]
    pub fn features_per_patch(&self) -> usize {
        self.out_channels * self.out_positions()
    }

    #[inline]
    pub fn embedding_len(&self) -> usize {
        self.patch_count() * self.features_per_patch()
    }

    #[inline]
    pub fn kernel_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    #[inline]
    pub fn image_len(&self) -> usize {
        self.in_channels * self.image_h * self.image_w
    }
}

/// Shared per-patch convolution producing the embedding vector.
#[derive(Debug, Clone)]
pub struct PatchEmbedder {
    pub geom: EmbedderGeometry,
    /// `out_channels × (in_channels·kernel_h·kernel_w)` kernel, row per channel.
    pub weight: Matrix,
    /// `1 × out_channels`.
    pub bias: Matrix,
    pub adam_w: AdamState,
    pub adam_b: AdamState,
}

#[derive(Debug, Clone)]
pub struct EmbedderGrads {
    pub grad_w: Matrix,
    pub grad_b: Matrix,
}

impl PatchEmbedder {
    pub fn init(geom: EmbedderGeometry, init_seed: u64, adam: AdamParams) -> Self {
        let mut rng = substream(init_seed, Purpose::EmbedderInit, 0, 0);
        let bound = (6.0 / geom.kernel_len() as f32).sqrt();
        let weight = Matrix::from_fn(geom.out_channels, geom.kernel_len(), |_, _| {
            rng.random_range(-1.0f32..1.0) * bound
        });
        PatchEmbedder {
            geom,
            weight,
            bias: Matrix::zeros(1, geom.out_channels),
            adam_w: AdamState::new(geom.out_channels, geom.kernel_len(), adam),
            adam_b: AdamState::new(1, geom.out_channels, adam),
        }
    }

    /// Embeds a batch of flattened `C×H×W` images into `B × embedding_len`.
    ///
    /// Patch features are concatenated in row-major patch order; within a
    /// patch the layout is channel-major (`channel · out_positions + x`).
    pub fn forward(&self, images: &Matrix) -> Result<Matrix> {
        if images.cols() != self.geom.image_len() {
            return Err(Error::shape(
                "embed",
                format!("{} pixels per image", self.geom.image_len()),
                format!("{}", images.cols()),
            ));
        }
        let g = self.geom;
        let mut out = Matrix::zeros(images.rows(), g.embedding_len());
        let emb_len = g.embedding_len();

        let run = |(row_out, img): (&mut [f32], &[f32])| {
            self.forward_one(img, row_out);
        };

        #[cfg(feature = "parallel")]
        out.as_mut_slice()
            .par_chunks_mut(emb_len)
            .zip(images.as_slice().par_chunks(g.image_len()))
            .for_each(run);

        #[cfg(not(feature = "parallel"))]
        out.as_mut_slice()
            .chunks_mut(emb_len)
            .zip(images.as_slice().chunks(g.image_len()))
            .for_each(run);

        Ok(out)
    }

    fn forward_one(&self, img: &[f32], emb: &mut [f32]) {
        let g = self.geom;
        let hw = g.image_h * g.image_w;
        let out_pos = g.out_positions();
        for pr in 0..g.grid_rows {
            for pc in 0..g.grid_cols {
                let patch = pr * g.grid_cols + pc;
                let base = patch * g.features_per_patch();
                for oc in 0..g.out_channels {
                    let k_row = self.weight.row(oc);
                    for ox in 0..out_pos {
                        let mut acc = self.bias.get(0, oc);
                        let x0 = pc * g.patch_w + ox * g.stride;
                        let y0 = pr * g.patch_h;
                        for ic in 0..g.in_channels {
                            for kh in 0..g.kernel_h {
                                let img_off = ic * hw + (y0 + kh) * g.image_w + x0;
                                let k_off = (ic * g.kernel_h + kh) * g.kernel_w;
                                for kw in 0..g.kernel_w {
                                    acc += k_row[k_off + kw] * img[img_off + kw];
                                }
                            }
                        }
                        emb[base + oc * out_pos + ox] = acc;
                    }
                }
            }
        }
    }

    /// Parameter gradients given `∂L/∂embedding`. The gradient with respect
    /// to the input image is never needed (the embedder is the first layer).
    pub fn backward(&self, images: &Matrix, upstream: &Matrix) -> Result<EmbedderGrads> {
        let g = self.geom;
        if upstream.rows() != images.rows() || upstream.cols() != g.embedding_len() {
            return Err(Error::shape(
                "embed_backward",
                format!("{}x{}", images.rows(), g.embedding_len()),
                format!("{}x{}", upstream.rows(), upstream.cols()),
            ));
        }
        let mut grad_w = Matrix::zeros(g.out_channels, g.kernel_len());
        let mut grad_b = Matrix::zeros(1, g.out_channels);

        // One task per output channel; each accumulates over the batch in a
        // fixed order, so the result is thread-count independent.
        let kernel_len = g.kernel_len();
        let gb = grad_b.as_mut_slice();
        let run = |(oc, (gw_row, gb_val)): (usize, (&mut [f32], &mut f32))| {
            self.backward_channel(oc, images, upstream, gw_row, gb_val);
        };

        #[cfg(feature = "parallel")]
        grad_w
            .as_mut_slice()
            .par_chunks_mut(kernel_len)
            .zip(gb.par_iter_mut())
            .enumerate()
            .for_each(run);

        #[cfg(not(feature = "parallel"))]
        grad_w
            .as_mut_slice()
            .chunks_mut(kernel_len)
            .zip(gb.iter_mut())
            .enumerate()
            .for_each(run);

        Ok(EmbedderGrads { grad_w, grad_b })
    }

    fn backward_channel(
        &self,
        oc: usize,
        images: &Matrix,
        upstream: &Matrix,
        gw_row: &mut [f32],
        gb_val: &mut f32,
    ) {
        let g = self.geom;
        let hw = g.image_h * g.image_w;
        let out_pos = g.out_positions();
        for b in 0..images.rows() {
            let img = images.row(b);
            let up = upstream.row(b);
            for pr in 0..g.grid_rows {
                for pc in 0..g.grid_cols {
                    let patch = pr * g.grid_cols + pc;
                    let base = patch * g.features_per_patch();
                    for ox in 0..out_pos {
                        let u = up[base + oc * out_pos + ox];
                        *gb_val += u;
                        let x0 = pc * g.patch_w + ox * g.stride;
                        let y0 = pr * g.patch_h;
                        for ic in 0..g.in_channels {
                            for kh in 0..g.kernel_h {
                                let img_off = ic * hw + (y0 + kh) * g.image_w + x0;
                                let k_off = (ic * g.kernel_h + kh) * g.kernel_w;
                                for kw in 0..g.kernel_w {
                                    gw_row[k_off + kw] += u * img[img_off + kw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn step(&mut self, grads: &EmbedderGrads) -> Result<()> {
        adam_step(&mut self.weight, &grads.grad_w, &mut self.adam_w, None)?;
        adam_step(&mut self.bias, &grads.grad_b, &mut self.adam_b, None)
    }

    pub fn weight_param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_geom() -> EmbedderGeometry {
        // 2-channel 8x8 image, 4x4 patch grid -> 2x2 patches, stride 1,
        // kernel 2x1, two positions per patch.
        EmbedderGeometry::new(2, 8, 8, 4, 4, 3).unwrap()
    }

    #[test]
    fn cifar_geometry_gives_1024_embedding() {
        let g = EmbedderGeometry::new(3, 32, 32, 4, 4, 32).unwrap();
        assert_eq!((g.kernel_h, g.kernel_w, g.stride), (8, 4, 4));
        assert_eq!(g.out_positions(), 2);
        assert_eq!(g.features_per_patch(), 64);
        assert_eq!(g.embedding_len(), 1024);
    }

    #[test]
    fn fashion_mnist_geometry_gives_1024_embedding() {
        let g = EmbedderGeometry::new(1, 28, 28, 4, 4, 32).unwrap();
        assert_eq!((g.kernel_h, g.kernel_w, g.stride), (7, 4, 3));
        assert_eq!(g.out_positions(), 2);
        assert_eq!(g.embedding_len(), 1024);
    }

    #[test]
    fn indivisible_image_rejected() {
        assert!(EmbedderGeometry::new(1, 30, 32, 4, 4, 32).is_err());
    }

    #[test]
    fn zero_image_produces_bias_pattern() {
        let geom = small_geom();
        let mut emb = PatchEmbedder::init(geom, 5, AdamParams::default());
        for (i, v) in emb.bias.as_mut_slice().iter_mut().enumerate() {
            *v = i as f32 + 1.0;
        }
        let images = Matrix::zeros(2, geom.image_len());
        let out = emb.forward(&images).unwrap();
        let out_pos = geom.out_positions();
        for b in 0..2 {
            for (i, &v) in out.row(b).iter().enumerate() {
                let oc = (i % geom.features_per_patch()) / out_pos;
                assert_eq!(v, (oc + 1) as f32);
            }
        }
    }

    #[test]
    fn permuting_patches_permutes_embedding_slots() {
        let geom = small_geom();
        let emb = PatchEmbedder::init(geom, 6, AdamParams::default());
        let mut rng = crate::rng::seeded(8);
        let base = Matrix::from_fn(1, geom.image_len(), |_, _| rng.random_range(-1.0..1.0));

        // Swap patch (0,0) with patch (1,2) in the input image.
        let mut swapped = base.clone();
        let hw = geom.image_h * geom.image_w;
        for ic in 0..geom.in_channels {
            for y in 0..geom.patch_h {
                for x in 0..geom.patch_w {
                    let a = ic * hw + y * geom.image_w + x;
                    let b = ic * hw + (geom.patch_h + y) * geom.image_w + (2 * geom.patch_w + x);
                    let tmp = swapped.get(0, a);
                    swapped.set(0, a, swapped.get(0, b));
                    swapped.set(0, b, tmp);
                }
            }
        }

        let e_base = emb.forward(&base).unwrap();
        let e_swap = emb.forward(&swapped).unwrap();
        let fpp = geom.features_per_patch();
        let (pa, pb) = (0usize, geom.grid_cols + 2);
        for f in 0..fpp {
            assert_eq!(e_base.get(0, pa * fpp + f), e_swap.get(0, pb * fpp + f));
            assert_eq!(e_base.get(0, pb * fpp + f), e_swap.get(0, pa * fpp + f));
        }
        for p in 0..geom.patch_count() {
            if p == pa || p == pb {
                continue;
            }
            for f in 0..fpp {
                assert_eq!(e_base.get(0, p * fpp + f), e_swap.get(0, p * fpp + f));
            }
        }
    }

    #[test]
    fn conv_grads_match_finite_differences() {
        let geom = small_geom();
        let emb = PatchEmbedder::init(geom, 7, AdamParams::default());
        let mut rng = crate::rng::seeded(9);
        let images = Matrix::from_fn(2, geom.image_len(), |_, _| rng.random_range(-1.0..1.0));

        // Scalar objective: L = Σ t_k · emb_k with fixed random t, so
        // ∂L/∂emb = t and the analytic parameter grads flow through backward.
        let t: Vec<f32> = (0..geom.embedding_len() * 2)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let upstream = Matrix::from_vec(2, geom.embedding_len(), t).unwrap();
        let grads = emb.backward(&images, &upstream).unwrap();

        // f64 forward oracle.
        let loss_f64 = |w: &Matrix, bias: &Matrix| -> f64 {
            let mut total = 0.0f64;
            let mut probe = emb.clone();
            probe.weight = w.clone();
            probe.bias = bias.clone();
            let out = probe.forward(&images).unwrap();
            for (o, u) in out.as_slice().iter().zip(upstream.as_slice()) {
                total += *o as f64 * *u as f64;
            }
            total
        };

        let eps = 1e-3f32;
        for r in 0..emb.weight.rows() {
            for c in 0..emb.weight.cols() {
                let mut wp = emb.weight.clone();
                wp.set(r, c, wp.get(r, c) + eps);
                let mut wm = emb.weight.clone();
                wm.set(r, c, wm.get(r, c) - eps);
                let numeric = (loss_f64(&wp, &emb.bias) - loss_f64(&wm, &emb.bias))
                    / (2.0 * eps as f64);
                let analytic = grads.grad_w.get(r, c);
                let denom = analytic.abs().max(numeric.abs() as f32).max(1e-4);
                assert!(
                    (analytic - numeric as f32).abs() / denom <= 2e-3,
                    "w[{r},{c}]: analytic {analytic} numeric {numeric}"
                );
            }
        }
        for c in 0..geom.out_channels {
            let mut bp = emb.bias.clone();
            bp.set(0, c, bp.get(0, c) + eps);
            let mut bm = emb.bias.clone();
            bm.set(0, c, bm.get(0, c) - eps);
            let numeric =
                (loss_f64(&emb.weight, &bp) - loss_f64(&emb.weight, &bm)) / (2.0 * eps as f64);
            let analytic = grads.grad_b.get(0, c);
            let denom = analytic.abs().max(numeric.abs() as f32).max(1e-4);
            assert!(
                (analytic - numeric as f32).abs() / denom <= 2e-3,
                "bias[{c}]: analytic {analytic} numeric {numeric}"
            );
        }
    }
}

//! Patch-embedding image encoder producing a row-major grid of visual tokens.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisionConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub dim: usize,
    /// Number of residual 3×3 token-mixing layers after the patch embedding.
    pub mixing_layers: usize,
    /// Shift and scale each image to zero mean and unit variance first.
    pub standardize: bool,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            image_height: 64,
            image_width: 64,
            patch_size: 4,
            dim: 32,
            mixing_layers: 1,
            standardize: true,
        }
    }
}

impl VisionConfig {
    pub fn grid_shape(&self) -> Result<(usize, usize)> {
        let p = self.patch_size;
        if p == 0 || self.image_height % p != 0 || self.image_width % p != 0 {
            return Err(Error::Shape(format!(
                "image {}×{} is not divisible into {p}-pixel patches",
                self.image_height, self.image_width
            )));
        }
        Ok((self.image_height / p, self.image_width / p))
    }

    pub fn num_tokens(&self) -> Result<usize> {
        self.grid_shape().map(|(r, c)| r * c)
    }
}

/// Visual tokens on a graph. Token `k` covers patch `(k / cols, k % cols)`.
#[derive(Debug, Clone, Copy)]
pub struct VisualGrid {
    pub tokens: Var,
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
}

impl VisualGrid {
    pub fn num_tokens(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LocalMixer {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionEncoder {
    pub config: VisionConfig,
    pub patch: Linear,
    mixers: Vec<LocalMixer>,
    /// For each of the 9 neighbour offsets, the source token per token
    /// (`n_tokens` denotes the zero padding row).
    neighbours: Vec<Vec<usize>>,
}

impl VisionEncoder {
    pub fn new(store: &mut ParamStore, config: VisionConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (rows, cols) = config.grid_shape()?;
        let p2 = config.patch_size * config.patch_size;
        let patch = Linear::new(store, "vision.patch", p2, config.dim, true, rng);
        let mixers = (0..config.mixing_layers)
            .map(|k| LocalMixer {
                weight: store.uniform(
                    format!("vision.mix{k}.weight"),
                    9 * config.dim,
                    config.dim,
                    9 * config.dim,
                    rng,
                ),
                bias: store.zeros(format!("vision.mix{k}.bias"), 1, config.dim),
            })
            .collect();
        let n = rows * cols;
        let mut neighbours = Vec::with_capacity(9);
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                neighbours.push(
                    (0..n)
                        .map(|k| {
                            let (r, c) = ((k / cols) as i64 + dy, (k % cols) as i64 + dx);
                            if r < 0 || c < 0 || r >= rows as i64 || c >= cols as i64 {
                                n
                            } else {
                                r as usize * cols + c as usize
                            }
                        })
                        .collect(),
                );
            }
        }
        Ok(VisionEncoder {
            config,
            patch,
            mixers,
            neighbours,
        })
    }

    /// Flattens non-overlapping patches row-major: `[n_tokens × p²]`, after
    /// standardization when enabled. A constant image only loses its mean.
    pub fn patchify(&self, image: &Array2<f64>) -> Result<Array2<f64>> {
        let (h, w) = image.dim();
        let p = self.config.patch_size;
        if (h, w) != (self.config.image_height, self.config.image_width) {
            return Err(Error::Shape(format!(
                "encoder expects {}×{} images, got {h}×{w}",
                self.config.image_height, self.config.image_width
            )));
        }
        let (rows, cols) = self.config.grid_shape()?;
        let (shift, scale) = if self.config.standardize {
            let n = (h * w) as f64;
            let mean = image.sum() / n;
            let sd = (image.mapv(|v| (v - mean) * (v - mean)).sum() / n).sqrt();
            (mean, if sd > 1e-12 { 1.0 / sd } else { 1.0 })
        } else {
            (0.0, 1.0)
        };
        Ok(Array2::from_shape_fn((rows * cols, p * p), |(k, q)| {
            let (r, c) = (k / cols, k % cols);
            (image[[r * p + q / p, c * p + q % p]] - shift) * scale
        }))
    }

    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: &Array2<f64>,
    ) -> Result<VisualGrid> {
        let patches = g.input(self.patchify(image)?);
        self.encode_patches(g, store, patches)
    }

    pub fn encode_patches(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        patches: Var,
    ) -> Result<VisualGrid> {
        let (rows, cols) = self.config.grid_shape()?;
        let mut x = self.patch.forward(g, store, patches);
        for mixer in &self.mixers {
            let pad = g.input(Array2::zeros((1, self.config.dim)));
            let padded = g.concat_rows(&[x, pad]);
            let shifted: Vec<Var> = self
                .neighbours
                .iter()
                .map(|idx| g.gather(padded, idx))
                .collect();
            let stacked = g.concat_cols(&shifted);
            let w = g.param(store, mixer.weight);
            let b = g.param(store, mixer.bias);
            let mixed = g.matmul(stacked, w);
            let mixed = g.add_row(mixed, b);
            let mixed = g.gelu(mixed);
            x = g.add(x, mixed);
        }
        Ok(VisualGrid {
            tokens: x,
            rows,
            cols,
            patch_size: self.config.patch_size,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn encoder(mixing_layers: usize) -> (ParamStore, VisionEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let cfg = VisionConfig {
            patch_size: 8,
            mixing_layers,
            standardize: false,
            ..VisionConfig::default()
        };
        let enc = VisionEncoder::new(&mut store, cfg, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn grid_shape_for_default_image() {
        let (store, enc) = encoder(1);
        let mut g = Graph::new();
        let grid = enc
            .encode(&mut g, &store, &Array2::zeros((64, 64)))
            .unwrap();
        assert_eq!((grid.rows, grid.cols), (8, 8));
        assert_eq!(g.shape(grid.tokens), (64, 32));
    }

    #[test]
    fn indivisible_image_is_a_shape_error() {
        let cfg = VisionConfig {
            image_height: 60,
            patch_size: 8,
            ..VisionConfig::default()
        };
        assert!(matches!(cfg.grid_shape(), Err(Error::Shape(_))));
        let (store, enc) = encoder(0);
        let mut g = Graph::new();
        assert!(enc
            .encode(&mut g, &store, &Array2::zeros((60, 64)))
            .is_err());
    }

    #[test]
    fn zero_image_with_zero_bias_gives_equal_tokens() {
        let (store, enc) = encoder(0);
        let mut g = Graph::new();
        let grid = enc
            .encode(&mut g, &store, &Array2::zeros((64, 64)))
            .unwrap();
        let t = g.value(grid.tokens);
        for row in t.outer_iter() {
            assert_eq!(row, t.row(0));
        }
    }

    #[test]
    fn swapping_patches_swaps_tokens_without_mixing() {
        let (store, enc) = encoder(0);
        let img = Array2::from_shape_fn((64, 64), |(y, x)| ((y * 7 + x * 3) % 11) as f64 / 11.0);
        let mut swapped = img.clone();
        // patch (0,0) <-> patch (2,5)
        for q in 0..64 {
            let (dy, dx) = (q / 8, q % 8);
            let a = img[[dy, dx]];
            let b = img[[16 + dy, 40 + dx]];
            swapped[[dy, dx]] = b;
            swapped[[16 + dy, 40 + dx]] = a;
        }
        let mut g = Graph::new();
        let t1 = enc.encode(&mut g, &store, &img).unwrap().tokens;
        let t2 = enc.encode(&mut g, &store, &swapped).unwrap().tokens;
        let (a, b) = (g.value(t1), g.value(t2));
        assert_eq!(a.row(0), b.row(21));
        assert_eq!(a.row(21), b.row(0));
        assert_eq!(a.row(5), b.row(5));
    }

    #[test]
    fn standardized_patches_ignore_brightness_and_contrast() {
        let cfg = VisionConfig {
            mixing_layers: 0,
            ..VisionConfig::default()
        };
        let mut store = ParamStore::new();
        let enc = VisionEncoder::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let img = Array2::from_shape_fn((64, 64), |(y, x)| ((y * 5 + x * 3) % 13) as f64 / 13.0);
        let p = enc.patchify(&img).unwrap();
        assert!(p.mean().unwrap().abs() < 1e-12);
        assert!((p.mapv(|v| v * v).mean().unwrap() - 1.0).abs() < 1e-12);
        let q = enc.patchify(&img.mapv(|v| 0.3 * v + 0.2)).unwrap();
        assert!(p.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn patchify_is_row_major() {
        let (_, enc) = encoder(0);
        let img = Array2::from_shape_fn((64, 64), |(y, x)| (y * 64 + x) as f64);
        let p = enc.patchify(&img).unwrap();
        // token 9 = patch row 1, col 1; its first pixel is (8, 8)
        assert_eq!(p[[9, 0]], (8 * 64 + 8) as f64);
        assert_eq!(p[[9, 63]], (15 * 64 + 15) as f64);
    }
}

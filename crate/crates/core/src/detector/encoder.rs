use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Linear, ParamStore, Tensor2};
use crate::synthgen::BevRaster;

/// Patchify-and-project BEV encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct BevEncoder {
    pub proj: Linear,
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub dim: usize,
}

/// Encoder output. Keys and values both carry content plus position.
#[derive(Debug, Clone)]
pub struct EncodedBev {
    pub keys: Tensor2,
    pub values: Tensor2,
    pub positions: Tensor2,
    patches: Tensor2,
}

impl BevEncoder {
    pub fn init(
        height: usize,
        width: usize,
        channels: usize,
        patch: usize,
        dim: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        BevEncoder {
            proj: Linear::init("enc.patch", patch * patch * channels, dim, store, rng),
            patch,
            height,
            width,
            channels,
            dim,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    /// Row-major token grid; each patch flattened as `[dy][dx][channel]`.
    pub fn patchify(&self, raster: &BevRaster) -> Result<Tensor2> {
        let want = (self.height, self.width, self.channels);
        let got = (raster.height, raster.width, raster.channels);
        if want != got {
            return Err(Error::InvalidArgument(format!(
                "raster is {}x{}x{}, encoder expects {}x{}x{}",
                got.0, got.1, got.2, want.0, want.1, want.2
            )));
        }
        let p = self.patch;
        let (gh, gw) = self.grid();
        let mut out = Tensor2::zeros(gh * gw, p * p * self.channels);
        for tr in 0..gh {
            for tc in 0..gw {
                let row = out.row_mut(tr * gw + tc);
                let mut k = 0;
                for dy in 0..p {
                    let start = raster.index(tr * p + dy, tc * p, 0);
                    for &v in &raster.data[start..start + p * self.channels] {
                        row[k] = v as f64;
                        k += 1;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn forward(&self, store: &ParamStore, raster: &BevRaster) -> Result<EncodedBev> {
        let patches = self.patchify(raster)?;
        let content = self.proj.forward(store, &patches)?;
        let (gh, gw) = self.grid();
        let positions = sinusoidal_2d(gh, gw, self.dim);
        let keys = content.add(&positions)?;
        Ok(EncodedBev {
            values: keys.clone(),
            keys,
            positions,
            patches,
        })
    }

    pub fn backward(&self, store: &mut ParamStore, enc: &EncodedBev, dkeys: &Tensor2, dvalues: &Tensor2) -> Result<()> {
        let dcontent = dkeys.add(dvalues)?;
        self.proj.backward_params(store, &enc.patches, &dcontent)
    }
}

/// Fixed 2-D sinusoidal encodings: the first `d/2` columns encode the token
/// row, the rest the token column, as interleaved sin/cos pairs.
pub fn sinusoidal_2d(rows: usize, cols: usize, d: usize) -> Tensor2 {
    let quarter = d / 4;
    Tensor2::from_fn(rows * cols, d, |t, j| {
        let (pos, j) = if j < d / 2 {
            ((t / cols) as f64, j)
        } else {
            ((t % cols) as f64, j - d / 2)
        };
        let freq = 1.0 / 10000f64.powf((j / 2) as f64 / quarter as f64);
        if j % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(h: usize, w: usize, d: usize, store: &mut ParamStore) -> BevEncoder {
        BevEncoder::init(h, w, 4, 10, d, store, &mut ChaCha8Rng::seed_from_u64(1))
    }

    fn random_raster(h: usize, w: usize, seed: u64) -> BevRaster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = BevRaster::zeros(h, w, 4, 0.3);
        r.data.iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
        r
    }

    #[test]
    fn default_grid_gives_200_tokens() {
        let mut store = ParamStore::new();
        let enc = encoder(200, 100, 16, &mut store);
        let out = enc.forward(&store, &BevRaster::zeros(200, 100, 4, 0.3)).unwrap();
        assert_eq!(out.keys.shape(), (200, 16));
    }

    #[test]
    fn zero_raster_keys_are_positions_plus_bias() {
        let mut store = ParamStore::new();
        let enc = encoder(20, 30, 8, &mut store);
        store.value_mut("enc.patch.b").data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = i as f64);
        let out = enc.forward(&store, &BevRaster::zeros(20, 30, 4, 1.0)).unwrap();
        for t in 0..6 {
            for c in 0..8 {
                assert_eq!(out.keys.get(t, c), out.positions.get(t, c) + c as f64);
            }
        }
    }

    #[test]
    fn shifting_content_by_a_patch_permutes_features() {
        let mut store = ParamStore::new();
        let enc = encoder(20, 30, 8, &mut store);
        let r = random_raster(20, 30, 2);
        // move everything one patch to the right; the leftmost patch column becomes empty
        let mut shifted = BevRaster::zeros(20, 30, 4, 0.3);
        for row in 0..20 {
            for col in 0..20 {
                for ch in 0..4 {
                    let v = r.get(row, col, ch);
                    let i = shifted.index(row, col + 10, ch);
                    shifted.data[i] = v;
                }
            }
        }
        let a = enc.forward(&store, &r).unwrap();
        let b = enc.forward(&store, &shifted).unwrap();
        let content = |e: &EncodedBev| e.keys.sub(&e.positions).unwrap();
        let (ca, cb) = (content(&a), content(&b));
        for tr in 0..2 {
            for tc in 0..2 {
                for c in 0..8 {
                    assert!((cb.get(tr * 3 + tc + 1, c) - ca.get(tr * 3 + tc, c)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let mut store = ParamStore::new();
        let enc = encoder(20, 30, 8, &mut store);
        assert!(enc.forward(&store, &BevRaster::zeros(30, 20, 4, 1.0)).is_err());
    }

    #[test]
    fn positions_differ_between_tokens() {
        let p = sinusoidal_2d(20, 10, 16);
        for a in 0..200 {
            for b in a + 1..200 {
                let d: f64 = (0..16).map(|c| (p.get(a, c) - p.get(b, c)).abs()).sum();
                assert!(d > 1e-3, "{a} {b}");
            }
        }
    }
}

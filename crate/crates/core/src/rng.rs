//! Counter-keyed random streams.
//!
//! A stream is identified by a root seed plus a path of integer keys, e.g.
//! `(step, task, sample)`. Streams never depend on the order in which they
//! are requested, so parallel evaluation cannot change results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::Mat;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for the stream `root / keys[0] / keys[1] / ...`.
pub fn substream(root: u64, keys: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix64(root);
    for &k in keys {
        h = splitmix64(h ^ splitmix64(k.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    let mut seed = [0u8; 32];
    let mut s = h;
    for chunk in seed.chunks_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// Named sub-seed, for handing a derived root to another component.
pub fn derive_seed(root: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix64(root), |h, &k| splitmix64(h ^ splitmix64(k)))
}

/// Source of standard-normal reparameterisation noise for weight samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSource {
    pub seed: u64,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    /// `rows x cols` standard-normal matrix for the given stream keys.
    pub fn normal(&self, keys: &[u64], rows: usize, cols: usize) -> Mat {
        let mut rng = substream(self.seed, keys);
        // column-major fill so column k only depends on draws before it
        Mat::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    /// Noise for weight sample path `sample` of layer `layer` (0-based).
    pub fn layer_noise(&self, sample: usize, layer: usize, size: usize) -> Mat {
        self.normal(&[sample as u64, layer as u64], size, 1)
    }

    pub fn child(&self, keys: &[u64]) -> NoiseSource {
        NoiseSource::new(derive_seed(self.seed, keys))
    }
}

use rand::Rng;
use serde::{Deserialize, Serialize};
use u2kws_nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecAugmentConfig {
    pub freq_masks: usize,
    pub max_freq_width: usize,
    pub time_masks: usize,
    pub max_time_width: usize,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        SpecAugmentConfig {
            freq_masks: 2,
            max_freq_width: 10,
            time_masks: 2,
            max_time_width: 50,
        }
    }
}

impl SpecAugmentConfig {
    pub fn disabled() -> Self {
        SpecAugmentConfig {
            freq_masks: 0,
            max_freq_width: 0,
            time_masks: 0,
            max_time_width: 0,
        }
    }
}

/// Zeroes up to `freq_masks` bands of bins and `time_masks` bands of frames.
/// Widths are uniform in `0..=max`, clipped to the matrix.
pub fn spec_augment(
    x: &Tensor<f32>,
    config: &SpecAugmentConfig,
    rng: &mut impl Rng,
) -> Tensor<f32> {
    let mut out = x.clone();
    let (t, f) = (x.rows(), x.cols());
    for _ in 0..config.freq_masks {
        let w = rng.random_range(0..=config.max_freq_width.min(f));
        let start = rng.random_range(0..=f - w);
        for r in 0..t {
            out.row_mut(r)[start..start + w].fill(0.0);
        }
    }
    for _ in 0..config.time_masks {
        let w = rng.random_range(0..=config.max_time_width.min(t));
        let start = rng.random_range(0..=t - w);
        for r in start..start + w {
            out.row_mut(r).fill(0.0);
        }
    }
    out
}

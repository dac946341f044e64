//! Synthetic "speech" directly in feature space. Each phone has a prototype
//! frame; an utterance tiles prototypes for random durations, blends the
//! edges of neighbouring segments (coarticulation) and adds Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use u2kws_nn::Tensor;

use crate::error::{KwsError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_phones: usize,
    pub feat_dim: usize,
    /// Row 0 is silence, row `p` is phone `p`.
    pub prototypes: Vec<Vec<f32>>,
    pub min_frames: usize,
    pub max_frames: usize,
    pub noise: f32,
    /// Weight given to the neighbouring prototype at a segment edge, in `[0, 0.5]`.
    pub coarticulation: f32,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeParams {
    /// Phones per confusion group sharing a base spectrum.
    pub group_size: usize,
    /// Scale of the group-shared component.
    pub group_scale: f32,
    /// Scale of the phone-specific component.
    pub phone_scale: f32,
}

impl Default for PrototypeParams {
    fn default() -> Self {
        PrototypeParams {
            group_size: 4,
            group_scale: 1.0,
            phone_scale: 0.6,
        }
    }
}

/// One synthesized unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Unit {
    Phone(usize),
    Silence(usize),
}

/// Features plus the frame span `[start, end)` of every unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Synthesized {
    pub frames: Tensor<f32>,
    pub spans: Vec<(usize, usize)>,
}

impl SynthSpec {
    /// Random smooth prototypes: phones in the same confusion group share a
    /// base spectrum and differ by a smaller phone-specific part.
    pub fn generate(
        n_phones: usize,
        feat_dim: usize,
        params: PrototypeParams,
        seed: u64,
    ) -> Result<Self> {
        if n_phones == 0 {
            return Err(KwsError::Config(
                "synthetic inventory needs at least one phone".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut smooth = |scale: f32| -> Vec<f32> {
            let bumps = 3;
            let mut v = vec![0.0f32; feat_dim];
            for _ in 0..bumps {
                let center = rng.random_range(0.0..feat_dim as f32);
                let width = rng.random_range(1.5..feat_dim as f32 / 6.0 + 2.0);
                let amp = rng.random_range(-1.0f32..1.0) * scale;
                for (i, x) in v.iter_mut().enumerate() {
                    let d = (i as f32 - center) / width;
                    *x += amp * (-0.5 * d * d).exp();
                }
            }
            v
        };
        let groups = n_phones.div_ceil(params.group_size.max(1));
        let bases: Vec<Vec<f32>> = (0..groups)
            .map(|_| smooth(params.group_scale * 2.0))
            .collect();
        let mut prototypes = vec![vec![-1.5f32; feat_dim]];
        for p in 0..n_phones {
            let own = smooth(params.phone_scale * 2.0);
            let base = &bases[p / params.group_size.max(1)];
            prototypes.push(base.iter().zip(&own).map(|(b, o)| b + o).collect());
        }
        Ok(SynthSpec {
            n_phones,
            feat_dim,
            prototypes,
            min_frames: 3,
            max_frames: 8,
            noise: 0.3,
            coarticulation: 0.3,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_phones == 0 || self.prototypes.len() != self.n_phones + 1 {
            return Err(KwsError::Config(
                "prototype table does not match the inventory".into(),
            ));
        }
        if self.prototypes.iter().any(|p| p.len() != self.feat_dim) {
            return Err(KwsError::Config(
                "prototype width differs from feature dim".into(),
            ));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(KwsError::Config("phone duration range".into()));
        }
        if !(0.0..=0.5).contains(&self.coarticulation) || !(self.noise >= 0.0) {
            return Err(KwsError::Config(
                "noise or coarticulation out of range".into(),
            ));
        }
        Ok(())
    }

    /// Output-vocabulary size the inventory implies (phones plus blank,
    /// `<sos/eos>` and `<eok>`).
    pub fn vocab_size(&self) -> usize {
        self.n_phones + 3
    }
}

/// Synthesizes a sequence of units.
pub fn synth_units(spec: &SynthSpec, units: &[Unit], rng: &mut impl Rng) -> Result<Synthesized> {
    spec.validate()?;
    let mut lens = Vec::with_capacity(units.len());
    for u in units {
        lens.push(match *u {
            Unit::Phone(p) => {
                if p == 0 || p > spec.n_phones {
                    return Err(KwsError::PhoneIdOutOfRange {
                        id: p,
                        size: spec.n_phones + 1,
                    });
                }
                rng.random_range(spec.min_frames..=spec.max_frames)
            }
            Unit::Silence(n) => n,
        });
    }
    let proto = |u: &Unit| -> &[f32] {
        match *u {
            Unit::Phone(p) => &spec.prototypes[p],
            Unit::Silence(_) => &spec.prototypes[0],
        }
    };
    let total: usize = lens.iter().sum();
    let mut frames = Tensor::zeros(total, spec.feat_dim);
    let mut spans = Vec::with_capacity(units.len());
    let noise =
        Normal::new(0.0f32, spec.noise.max(0.0)).map_err(|e| KwsError::Config(e.to_string()))?;
    let mut t = 0;
    for (i, u) in units.iter().enumerate() {
        let n = lens[i];
        let own = proto(u);
        let prev = i.checked_sub(1).map(|j| proto(&units[j]));
        let next = units.get(i + 1).map(proto);
        for k in 0..n {
            let pos = (k as f32 + 0.5) / n as f32;
            let (w, other) = if pos < 0.5 {
                (spec.coarticulation * (1.0 - 2.0 * pos), prev)
            } else {
                (spec.coarticulation * (2.0 * pos - 1.0), next)
            };
            let row = frames.row_mut(t + k);
            match other {
                Some(o) if w > 0.0 => {
                    for ((r, a), b) in row.iter_mut().zip(own).zip(o) {
                        *r = (1.0 - w) * a + w * b;
                    }
                }
                _ => row.copy_from_slice(own),
            }
            if spec.noise > 0.0 {
                for r in row.iter_mut() {
                    *r += noise.sample(rng);
                }
            }
        }
        spans.push((t, t + n));
        t += n;
    }
    Ok(Synthesized { frames, spans })
}

/// Phones only, no surrounding silence, deterministic in `(spec.seed, key)`.
pub fn synth_utterance(spec: &SynthSpec, transcript: &[usize], key: u64) -> Result<Tensor<f32>> {
    Ok(synth_utterance_spans(spec, transcript, key)?.frames)
}

/// As [`synth_utterance`], keeping the frame span of every phone.
pub fn synth_utterance_spans(
    spec: &SynthSpec,
    transcript: &[usize],
    key: u64,
) -> Result<Synthesized> {
    if transcript.is_empty() {
        return Err(KwsError::EmptyKeyword);
    }
    let units: Vec<Unit> = transcript.iter().map(|&p| Unit::Phone(p)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(key);
    synth_units(spec, &units, &mut rng)
}

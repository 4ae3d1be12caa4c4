//! Synthetic features with known content and speaker structure.
//!
//! Every frame is `phone_centroid[p] + speaker_offset[s] + noise`: content
//! clusters are shared by all speakers and each speaker adds one fixed offset.
//! Frames that are close therefore share a phone while the offset carries the
//! speaker identity, which is exactly the geometry cosine kNN conversion
//! relies on. Nothing here models real SSL statistics.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureSequence, DEFAULT_FRAME_RATE_HZ};

const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_phones: usize,
    pub dim: usize,
    pub n_speakers: usize,
    pub frames_per_utterance: usize,
    pub utterances_per_speaker: usize,
    /// Expected norm of a phone centroid; centroids are at least this far apart.
    pub content_scale: f64,
    /// Expected norm of a speaker offset; offsets are at least this far apart.
    pub speaker_scale: f64,
    /// Expected norm of the per-frame noise vector.
    pub noise_scale: f64,
    pub seed: u64,
    /// Frames per phone segment. 1 draws a fresh phone every frame.
    pub segment_frames: usize,
    /// Zipf exponent of the phone distribution; 0 is uniform.
    pub phone_zipf_exponent: f64,
    pub frame_rate_hz: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_phones: 8,
            dim: 64,
            n_speakers: 2,
            frames_per_utterance: 250,
            utterances_per_speaker: 12,
            content_scale: 1.0,
            speaker_scale: 1.0,
            noise_scale: 0.05,
            seed: 0,
            segment_frames: 1,
            phone_zipf_exponent: 0.0,
            frame_rate_hz: DEFAULT_FRAME_RATE_HZ,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_phones", self.n_phones),
            ("dim", self.dim),
            ("n_speakers", self.n_speakers),
            ("frames_per_utterance", self.frames_per_utterance),
            ("utterances_per_speaker", self.utterances_per_speaker),
            ("segment_frames", self.segment_frames),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        let pos_real = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )))
            }
        };
        pos_real("content_scale", self.content_scale)?;
        pos_real("speaker_scale", self.speaker_scale)?;
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise_scale must be non-negative, got {}",
                self.noise_scale
            )));
        }
        if !(self.phone_zipf_exponent.is_finite() && self.phone_zipf_exponent >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "phone_zipf_exponent must be non-negative, got {}",
                self.phone_zipf_exponent
            )));
        }
        if !(self.frame_rate_hz.is_finite() && self.frame_rate_hz > 0.0) {
            return Err(Error::InvalidFrameRate(self.frame_rate_hz));
        }
        Ok(())
    }

    /// Noise small enough that every frame stays nearest its own centroid.
    pub fn is_separable(&self) -> bool {
        self.noise_scale < self.content_scale / 4.0
    }
}

/// Ground truth behind a generated data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub phone_centroids: Vec<Vec<f32>>,
    pub speaker_offsets: Vec<Vec<f32>>,
    /// `labels[speaker][utterance][frame]` is the generating phone id.
    pub labels: Vec<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    /// `speakers[s][u]` is utterance `u` of speaker `s`.
    pub speakers: Vec<Vec<FeatureSequence>>,
    pub truth: SynthTruth,
}

pub fn utterance_id(speaker: usize, utterance: usize) -> String {
    format!("spk{speaker:02}_utt{utterance:03}")
}

fn gaussian_vector(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f32> {
    let sd = scale / (dim as f64).sqrt();
    (0..dim)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            (z * sd) as f32
        })
        .collect()
}

fn dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn separated_set(
    rng: &mut ChaCha8Rng,
    count: usize,
    dim: usize,
    scale: f64,
    what: &str,
) -> Result<Vec<Vec<f32>>> {
    for _ in 0..MAX_ATTEMPTS {
        let set: Vec<Vec<f32>> = (0..count)
            .map(|_| gaussian_vector(rng, dim, scale))
            .collect();
        let ok = (0..count).all(|i| (i + 1..count).all(|j| dist(&set[i], &set[j]) >= scale));
        if ok {
            return Ok(set);
        }
    }
    Err(Error::SeparationUnattainable(format!(
        "{count} {what} separated by {scale} in dim {dim} after {MAX_ATTEMPTS} attempts"
    )))
}

/// Generates all speakers' utterances. Deterministic in `config`; each
/// utterance draws from its own ChaCha stream keyed by (speaker, utterance).
pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let centroids = separated_set(
        &mut rng,
        config.n_phones,
        config.dim,
        config.content_scale,
        "phone centroids",
    )?;
    let offsets = separated_set(
        &mut rng,
        config.n_speakers,
        config.dim,
        config.speaker_scale,
        "speaker offsets",
    )?;
    let weights: Vec<f64> = (0..config.n_phones)
        .map(|p| ((p + 1) as f64).powf(-config.phone_zipf_exponent))
        .collect();
    let phones = WeightedIndex::new(&weights).expect("positive weights");
    let noise_sd = config.noise_scale / (config.dim as f64).sqrt();

    let mut speakers = Vec::with_capacity(config.n_speakers);
    let mut labels = Vec::with_capacity(config.n_speakers);
    for (s, offset) in offsets.iter().enumerate() {
        let mut utts = Vec::with_capacity(config.utterances_per_speaker);
        let mut utt_labels = Vec::with_capacity(config.utterances_per_speaker);
        for u in 0..config.utterances_per_speaker {
            let mut urng = ChaCha8Rng::seed_from_u64(config.seed);
            urng.set_stream((s * config.utterances_per_speaker + u) as u64 + 1);
            let mut frames = Vec::with_capacity(config.frames_per_utterance * config.dim);
            let mut ids = Vec::with_capacity(config.frames_per_utterance);
            let mut phone = 0;
            for t in 0..config.frames_per_utterance {
                if t % config.segment_frames == 0 {
                    phone = phones.sample(&mut urng);
                }
                for (c, o) in centroids[phone].iter().zip(offset) {
                    let n = if noise_sd > 0.0 {
                        let z: f64 = urng.sample(StandardNormal);
                        z * noise_sd
                    } else {
                        0.0
                    };
                    frames.push((*c as f64 + *o as f64 + n) as f32);
                }
                ids.push(phone);
            }
            utts.push(FeatureSequence::new(
                frames,
                config.dim,
                config.frame_rate_hz,
                utterance_id(s, u),
            )?);
            utt_labels.push(ids);
        }
        speakers.push(utts);
        labels.push(utt_labels);
    }
    Ok(SynthData {
        speakers,
        truth: SynthTruth {
            phone_centroids: centroids,
            speaker_offsets: offsets,
            labels,
        },
    })
}

/// Nearest phone centroid of each frame after removing `speaker`'s offset.
/// Equidistant centroids resolve to the lower phone id.
pub fn label_frames(
    frames: &FeatureSequence,
    truth: &SynthTruth,
    speaker: usize,
) -> Result<Vec<usize>> {
    let offset = truth
        .speaker_offsets
        .get(speaker)
        .ok_or(Error::UnknownSpeaker(speaker))?;
    if offset.len() != frames.dim() {
        return Err(Error::DimensionMismatch {
            expected: offset.len(),
            found: frames.dim(),
        });
    }
    Ok(frames
        .frames()
        .map(|f| {
            let mut best = (f64::INFINITY, 0);
            for (p, c) in truth.phone_centroids.iter().enumerate() {
                let d2: f64 = f
                    .iter()
                    .zip(offset)
                    .zip(c)
                    .map(|((x, o), c)| {
                        let d = *x as f64 - *o as f64 - *c as f64;
                        d * d
                    })
                    .sum();
                if d2 < best.0 {
                    best = (d2, p);
                }
            }
            best.1
        })
        .collect())
}

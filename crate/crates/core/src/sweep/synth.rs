//! Planted-peak synthetic store: every layer carries the same rank-one MOS
//! pattern `(mos - 3) * u w^T` scaled by a per-layer SNR that peaks at a
//! known layer, plus i.i.d. Gaussian noise. A correct sweep must rank the
//! peak layer first.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::feature_store::{
    write_feature_file, DatasetManifest, ManifestEntry, Split, UtteranceFeatures,
};

use super::SweepError;

pub const SYNTH_MODEL_ID: &str = "synthetic";
pub const MANIFEST_NAME: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_layers: u16,
    pub feat_dim: usize,
    pub num_frames: usize,
    /// 1-based.
    pub peak_layer: u16,
    /// Signal scale per layer, `snr_profile[l - 1]` for layer `l`.
    pub snr_profile: Vec<f64>,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub noise_std: f64,
    pub seed: u64,
}

pub const DEFAULT_PEAK_SNR: f64 = 8.0;
pub const DEFAULT_HALF_WIDTH: u16 = 1;

/// Tent-shaped profile: linear from `peak_snr` at `peak` down to
/// `peak_snr / (half_width + 1)` at distance `half_width`, then halving
/// with every further layer so the profile stays strictly unimodal.
pub fn triangular_profile(num_layers: u16, peak: u16, peak_snr: f64, half_width: u16) -> Vec<f64> {
    let w = half_width as f64;
    (1..=num_layers)
        .map(|l| {
            let d = (l as f64 - peak as f64).abs();
            if d <= w {
                peak_snr * (1.0 - d / (w + 1.0))
            } else {
                peak_snr / (w + 1.0) * 0.5f64.powf(d - w)
            }
        })
        .collect()
}

impl SynthConfig {
    /// Triangular profile with the default peak SNR and width.
    #[allow(clippy::too_many_arguments)]
    pub fn planted(
        num_layers: u16,
        feat_dim: usize,
        num_frames: usize,
        peak_layer: u16,
        counts: (usize, usize, usize),
        noise_std: f64,
        seed: u64,
    ) -> Self {
        Self {
            num_layers,
            feat_dim,
            num_frames,
            peak_layer,
            snr_profile: triangular_profile(num_layers, peak_layer, DEFAULT_PEAK_SNR, DEFAULT_HALF_WIDTH),
            train: counts.0,
            validation: counts.1,
            test: counts.2,
            noise_std,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SweepError> {
        let bad = |m: String| Err(SweepError::Plan(format!("synthetic config: {m}")));
        if self.num_layers == 0 || self.feat_dim == 0 || self.num_frames == 0 {
            return bad("layers, dim and frames must be >= 1".into());
        }
        if !(1..=self.num_layers).contains(&self.peak_layer) {
            return bad(format!("peak layer {} outside 1..={}", self.peak_layer, self.num_layers));
        }
        if self.snr_profile.len() != self.num_layers as usize {
            return bad(format!(
                "profile has {} entries for {} layers",
                self.snr_profile.len(),
                self.num_layers
            ));
        }
        let p = self.peak_layer as usize - 1;
        let rising = self.snr_profile[..=p].windows(2).all(|w| w[0] < w[1]);
        let falling = self.snr_profile[p..].windows(2).all(|w| w[0] > w[1]);
        if !rising || !falling || self.snr_profile.iter().any(|v| !v.is_finite()) {
            return bad("profile must be strictly unimodal with its maximum at the peak layer".into());
        }
        if self.train < 2 || self.validation < 2 || self.test < 2 {
            return bad("each split needs at least 2 utterances".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and >= 0".into());
        }
        Ok(())
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Writes `feat/<utt>.sslf` for every utterance and `manifest.csv` into
/// `destination`. Output is a pure function of the config.
pub fn generate_synthetic(config: &SynthConfig, destination: &Path) -> Result<DatasetManifest, SweepError> {
    config.validate()?;
    let feat_dir = destination.join("feat");
    std::fs::create_dir_all(&feat_dir).map_err(|e| SweepError::io(&feat_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let u = unit_vector(&mut rng, config.num_frames);
    let w = unit_vector(&mut rng, config.feat_dim);
    let pattern: Array2<f64> = Array2::from_shape_fn((config.num_frames, config.feat_dim), |(t, d)| u[t] * w[d]);
    let mos_dist = Uniform::new_inclusive(1.0, 5.0);

    let splits = [
        (Split::Train, config.train),
        (Split::Validation, config.validation),
        (Split::Test, config.test),
    ];
    let mut entries = Vec::with_capacity(config.train + config.validation + config.test);
    let mut index = 0usize;
    for (split, count) in splits {
        for _ in 0..count {
            let utt_id = format!("synth{index:05}");
            index += 1;
            let mos: f64 = mos_dist.sample(&mut rng);
            let mut layers = BTreeMap::new();
            for (l, &snr) in (1..=config.num_layers).zip(&config.snr_profile) {
                let scale = snr * (mos - 3.0);
                let m = pattern.mapv(|p| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    (scale * p + config.noise_std * noise) as f32
                });
                layers.insert(l, m);
            }
            let rel = PathBuf::from("feat").join(format!("{utt_id}.sslf"));
            let features = UtteranceFeatures::new(utt_id.clone(), SYNTH_MODEL_ID, layers)?;
            write_feature_file(&features, &destination.join(&rel))?;
            entries.push(ManifestEntry {
                utt_id,
                path: rel,
                mos,
                split,
            });
        }
    }
    let manifest = DatasetManifest::new(destination, entries)?;
    manifest.write(&destination.join(MANIFEST_NAME))?;
    Ok(manifest)
}

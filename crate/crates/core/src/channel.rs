//! Synthetic time-correlated MIMO-OFDM CSI trajectories, dataset splitting and
//! normalization.
//!
//! Each sample is a sum of `n_paths` plane-wave components. Path `p` carries a
//! Doppler shift `f_d·cos(α_p)` with `α_p` uniform on the circle, a random
//! phase, a delay `τ_p ~ U[0, 1 µs]` that produces a phase ramp across PRBs,
//! and an independent complex Gaussian gain for every (tx, rx) pair:
//!
//! ```text
//! H[t, tx, rx, b] = Σ_p g_p[tx, rx] · exp(j(2π f_d cos α_p · t·T + φ_p)) · exp(−j 2π f_b τ_p)
//! ```
//!
//! Averaged over realizations the temporal autocorrelation of every entry is
//! `J₀(2π f_d τ)`, the Clarke/Jakes spectrum.

use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{ScenarioConfig, StepShape, MAX_PATH_DELAY_S, PRB_SPACING_HZ};
use crate::error::{Error, Result};

/// One UE trajectory: `[n_steps, 2, n_tx, n_rx, n_prb]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    pub csi: Vec<f32>,
    /// `None` when the source does not record it (mixture files on disk).
    pub speed_kmh: Option<f64>,
    pub sample_id: u64,
}

impl ChannelSample {
    pub fn n_steps(&self, shape: StepShape) -> usize {
        self.csi.len() / shape.feature_dim()
    }

    pub fn step(&self, shape: StepShape, t: usize) -> &[f32] {
        let f = shape.feature_dim();
        &self.csi[t * f..(t + 1) * f]
    }

    /// Steps `start..start + len`, flattened.
    pub fn steps(&self, shape: StepShape, start: usize, len: usize) -> &[f32] {
        let f = shape.feature_dim();
        &self.csi[start * f..(start + len) * f]
    }

    /// Mean of `|H|²` over all complex entries.
    pub fn mean_power(&self) -> f64 {
        let sum: f64 = self.csi.iter().map(|&v| (v as f64) * (v as f64)).sum();
        2.0 * sum / self.csi.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDataset {
    pub samples: Vec<ChannelSample>,
    pub scenario: ScenarioConfig,
    pub norm_stats: Option<NormStats>,
    pub split_tag: SplitTag,
}

impl ChannelDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn shape(&self) -> StepShape {
        self.scenario.step_shape()
    }

    /// Checks shape agreement, finiteness and id uniqueness.
    pub fn validate(&self) -> Result<()> {
        let expected = self.scenario.sample_len();
        let mut ids = BTreeSet::new();
        for s in &self.samples {
            if s.csi.len() != expected {
                return Err(Error::dim("ChannelDataset sample", expected, s.csi.len()));
            }
            if !s.csi.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("ChannelDataset sample"));
            }
            if !ids.insert(s.sample_id) {
                return Err(Error::config(
                    "dataset",
                    format!("duplicate sample_id {}", s.sample_id),
                ));
            }
        }
        Ok(())
    }
}

/// Draws a standard complex Gaussian scaled to variance `var` (split evenly
/// between real and imaginary parts).
fn complex_normal(rng: &mut ChaCha8Rng, var: f64) -> (f64, f64) {
    let s = libm::sqrt(var / 2.0);
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    (re * s, im * s)
}

/// Generates the sample with the given id. Pure in `(scenario, sample_id)`.
pub fn generate_sample(scenario: &ScenarioConfig, sample_id: u64) -> ChannelSample {
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    rng.set_stream(sample_id);

    let speeds = scenario.speed_kmh.speeds();
    let speed = if speeds.len() == 1 {
        speeds[0]
    } else {
        speeds[rng.random_range(0..speeds.len())]
    };
    let fd = scenario.doppler_hz(speed);
    let (n_tx, n_rx, n_prb, n_paths) = (
        scenario.n_tx,
        scenario.n_rx,
        scenario.n_prb,
        scenario.n_paths,
    );
    let pairs = n_tx * n_rx;

    // Per-path geometry, then per-path per-antenna-pair gains.
    let mut doppler = vec![0.0; n_paths];
    let mut phase = vec![0.0; n_paths];
    let mut delay = vec![0.0; n_paths];
    for p in 0..n_paths {
        let alpha = rng.random::<f64>() * 2.0 * PI;
        doppler[p] = fd * libm::cos(alpha);
        phase[p] = rng.random::<f64>() * 2.0 * PI;
        delay[p] = rng.random::<f64>() * MAX_PATH_DELAY_S;
    }
    let mut gains = vec![(0.0, 0.0); n_paths * pairs];
    let path_var = 1.0 / n_paths as f64;
    for g in gains.iter_mut() {
        *g = complex_normal(&mut rng, path_var);
    }

    // Frequency response of each path at each PRB center.
    let center = (n_prb as f64 - 1.0) / 2.0;
    let mut freq_resp = vec![(0.0, 0.0); n_paths * n_prb];
    for p in 0..n_paths {
        for b in 0..n_prb {
            let f_b = (b as f64 - center) * PRB_SPACING_HZ;
            let ang = -2.0 * PI * f_b * delay[p];
            freq_resp[p * n_prb + b] = (libm::cos(ang), libm::sin(ang));
        }
    }

    let plane = pairs * n_prb;
    let mut csi = vec![0.0f32; scenario.n_steps * 2 * plane];
    let mut acc = vec![(0.0f64, 0.0f64); plane];
    for t in 0..scenario.n_steps {
        acc.iter_mut().for_each(|a| *a = (0.0, 0.0));
        let time = t as f64 * scenario.tti_s;
        for p in 0..n_paths {
            let ang = 2.0 * PI * doppler[p] * time + phase[p];
            let rot = (libm::cos(ang), libm::sin(ang));
            for b in 0..n_prb {
                let fr = freq_resp[p * n_prb + b];
                let w = cmul(rot, fr);
                for pair in 0..pairs {
                    let h = cmul(gains[p * pairs + pair], w);
                    let a = &mut acc[pair * n_prb + b];
                    a.0 += h.0;
                    a.1 += h.1;
                }
            }
        }
        let base = t * 2 * plane;
        for (i, a) in acc.iter().enumerate() {
            csi[base + i] = a.0 as f32;
            csi[base + plane + i] = a.1 as f32;
        }
    }

    ChannelSample {
        csi,
        speed_kmh: Some(speed),
        sample_id,
    }
}

#[inline]
fn cmul(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0)
}

/// Generates `n_samples` trajectories with ids `0..n_samples`.
pub fn generate_synthetic_dataset(
    scenario: &ScenarioConfig,
    n_samples: usize,
) -> Result<ChannelDataset> {
    scenario.validate()?;
    if n_samples == 0 {
        return Err(Error::config("n_samples", "must be at least 1"));
    }
    let samples = (0..n_samples as u64)
        .map(|id| generate_sample(scenario, id))
        .collect();
    Ok(ChannelDataset {
        samples,
        scenario: scenario.clone(),
        norm_stats: None,
        split_tag: SplitTag::All,
    })
}

/// Seeded shuffle followed by a contiguous `(train, val, test)` partition.
pub fn split_dataset(
    ds: &ChannelDataset,
    counts: (usize, usize, usize),
    seed: u64,
) -> Result<(ChannelDataset, ChannelDataset, ChannelDataset)> {
    let (n_train, n_val, n_test) = counts;
    if n_train + n_val + n_test != ds.len() {
        return Err(Error::config(
            "split.counts",
            format!(
                "counts ({n_train}, {n_val}, {n_test}) sum to {} but the dataset has {} samples",
                n_train + n_val + n_test,
                ds.len()
            ),
        ));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let take = |range: core::ops::Range<usize>, tag| ChannelDataset {
        samples: order[range]
            .iter()
            .map(|&i| ds.samples[i].clone())
            .collect(),
        scenario: ds.scenario.clone(),
        norm_stats: ds.norm_stats.clone(),
        split_tag: tag,
    };
    Ok((
        take(0..n_train, SplitTag::Train),
        take(n_train..n_train + n_val, SplitTag::Val),
        take(n_train + n_val..ds.len(), SplitTag::Test),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    GlobalStd,
    PerSampleStd,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mode: NormMode,
    /// Dataset-wide divisor (1 for `none`, unused for per-sample mode).
    pub scale: f64,
    /// Per-sample divisors keyed by sample id (per-sample mode only).
    #[serde(default)]
    pub per_sample: BTreeMap<u64, f64>,
}

fn std_of<'a>(values: impl Iterator<Item = &'a f32>) -> f64 {
    let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
    for &v in values {
        let v = v as f64;
        n += 1;
        sum += v;
        sq += v * v;
    }
    if n == 0 {
        return 0.0;
    }
    let mean = sum / n as f64;
    libm::sqrt((sq / n as f64 - mean * mean).max(0.0))
}

fn checked_scale(scale: f64, what: &str) -> Result<f64> {
    if scale.is_finite() && scale > 0.0 {
        Ok(scale)
    } else {
        Err(Error::DegenerateScale(format!(
            "{what} has standard deviation {scale}"
        )))
    }
}

impl NormStats {
    pub fn identity() -> Self {
        Self {
            mode: NormMode::None,
            scale: 1.0,
            per_sample: BTreeMap::new(),
        }
    }

    /// Fits statistics on `ds` (normally the training split).
    pub fn fit(ds: &ChannelDataset, mode: NormMode) -> Result<Self> {
        match mode {
            NormMode::None => Ok(Self::identity()),
            NormMode::GlobalStd => {
                let scale = std_of(ds.samples.iter().flat_map(|s| s.csi.iter()));
                Ok(Self {
                    mode,
                    scale: checked_scale(scale, "dataset")?,
                    per_sample: BTreeMap::new(),
                })
            }
            NormMode::PerSampleStd => {
                let mut per_sample = BTreeMap::new();
                for s in &ds.samples {
                    let what = format!("sample {}", s.sample_id);
                    per_sample.insert(s.sample_id, checked_scale(std_of(s.csi.iter()), &what)?);
                }
                Ok(Self {
                    mode,
                    scale: 1.0,
                    per_sample,
                })
            }
        }
    }

    fn divisor(&self, sample_id: u64) -> Option<f64> {
        match self.mode {
            NormMode::PerSampleStd => self.per_sample.get(&sample_id).copied(),
            _ => Some(self.scale),
        }
    }

    /// Normalizes `ds` with these statistics. In per-sample mode samples not
    /// seen at fit time get their own scale, recorded in the returned stats.
    pub fn apply(&self, ds: &ChannelDataset) -> Result<ChannelDataset> {
        if ds.norm_stats.is_some() {
            return Err(Error::config("normalize", "dataset is already normalized"));
        }
        let stats = match self.mode {
            NormMode::PerSampleStd => {
                let mut stats = self.clone();
                for s in &ds.samples {
                    if let alloc::collections::btree_map::Entry::Vacant(e) =
                        stats.per_sample.entry(s.sample_id)
                    {
                        let what = format!("sample {}", s.sample_id);
                        e.insert(checked_scale(std_of(s.csi.iter()), &what)?);
                    }
                }
                stats
            }
            _ => self.clone(),
        };
        let samples = ds
            .samples
            .iter()
            .map(|s| {
                let inv = 1.0 / stats.divisor(s.sample_id).unwrap();
                ChannelSample {
                    csi: s.csi.iter().map(|&v| (v as f64 * inv) as f32).collect(),
                    ..s.clone()
                }
            })
            .collect();
        Ok(ChannelDataset {
            samples,
            scenario: ds.scenario.clone(),
            norm_stats: Some(stats),
            split_tag: ds.split_tag,
        })
    }
}

/// Fits `mode` on `ds` and applies it.
pub fn normalize(ds: &ChannelDataset, mode: NormMode) -> Result<(ChannelDataset, NormStats)> {
    let stats = NormStats::fit(ds, mode)?;
    let out = stats.apply(ds)?;
    let stats = out.norm_stats.clone().unwrap();
    Ok((out, stats))
}

/// Inverts the normalization recorded on `ds`.
pub fn denormalize(ds: &ChannelDataset) -> Result<ChannelDataset> {
    let stats = ds
        .norm_stats
        .as_ref()
        .ok_or_else(|| Error::config("denormalize", "dataset carries no normalization"))?;
    let mut samples = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        let scale = stats.divisor(s.sample_id).ok_or_else(|| {
            Error::config(
                "denormalize",
                format!("no scale for sample {}", s.sample_id),
            )
        })?;
        samples.push(ChannelSample {
            csi: s.csi.iter().map(|&v| (v as f64 * scale) as f32).collect(),
            ..s.clone()
        });
    }
    Ok(ChannelDataset {
        samples,
        scenario: ds.scenario.clone(),
        norm_stats: None,
        split_tag: ds.split_tag,
    })
}

/// Normalized lag-`lag` autocorrelation `Re Σ H[t+lag]·H*[t] / Σ |H[t]|²`,
/// pooled over every entry of every sample.
pub fn lag_autocorrelation(ds: &ChannelDataset, lag: usize) -> f64 {
    let shape = ds.shape();
    let plane = shape.plane_len();
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for s in &ds.samples {
        let n = s.n_steps(shape);
        for t in 0..n.saturating_sub(lag) {
            let a = s.step(shape, t);
            let b = s.step(shape, t + lag);
            for i in 0..plane {
                let (ar, ai) = (a[i] as f64, a[plane + i] as f64);
                let (br, bi) = (b[i] as f64, b[plane + i] as f64);
                num += br * ar + bi * ai;
                den += ar * ar + ai * ai;
            }
        }
    }
    num / den
}

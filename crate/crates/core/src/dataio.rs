//! Trial ingestion, preprocessing, overlapped windowing, and the synthetic
//! multi-channel gesture generator with covariate-shift transforms.
//!
//! File formats: a trial is a headerless CSV (rows = frames, columns =
//! channels); a manifest is a JSON array of trial descriptors with paths
//! resolved relative to the manifest location.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, derived_rng, tags};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Maximum window duration in milliseconds (real-time constraint).
pub const MAX_WINDOW_MS: f64 = 300.0;

// ── Core data carriers ──────────────────────────────────────────────

/// One recorded trial: raw or preprocessed frames of a single gesture.
#[derive(Debug, Clone)]
pub struct Trial {
    /// T_raw × C frame matrix.
    pub samples: Tensor,
    pub sample_rate_hz: f64,
    pub gesture: usize,
    pub subject: u32,
    pub session: u32,
    pub trial_no: u32,
}

impl Trial {
    pub fn frames(&self) -> usize {
        self.samples.rows()
    }

    pub fn channels(&self) -> usize {
        self.samples.cols()
    }
}

/// One T×C classification unit cut from a preprocessed trial.
/// Values are non-negative (rectification happens upstream).
#[derive(Debug, Clone)]
pub struct Window {
    pub data: Tensor,
    pub label: usize,
    pub subject: u32,
    pub session: u32,
}

/// An ordered collection of windows plus its class/channel arity.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub windows: Vec<Window>,
    pub n_classes: usize,
    pub n_channels: usize,
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.windows.iter().map(|w| w.label).collect()
    }
}

/// Per-channel standardization statistics. Computed once on the source
/// training trials and reused verbatim for every later domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Preprocessing knobs beyond the persisted statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessCfg {
    /// Causal moving-average length in frames.
    pub smooth_len: usize,
}

impl PreprocessCfg {
    /// 16 frames at dense (≥500 Hz) rates, 3 frames at sparse rates.
    pub fn default_for_rate(sample_rate_hz: f64) -> Self {
        PreprocessCfg {
            smooth_len: if sample_rate_hz >= 500.0 { 16 } else { 3 },
        }
    }
}

// ── Manifest I/O ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    path: String,
    gesture: usize,
    subject: u32,
    session: u32,
    trial: u32,
    sample_rate_hz: f64,
}

fn parse_trial_csv(path: &Path) -> Result<Tensor> {
    let file = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = 0usize;
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for cell in line.split(',') {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                file: file.clone(),
                line: lineno,
                msg: format!("not a number: '{}'", cell.trim()),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    file: file.clone(),
                    line: lineno,
                    msg: "non-finite value".into(),
                });
            }
            row.push(v);
        }
        if rows.is_empty() {
            width = row.len();
        } else if row.len() != width {
            return Err(Error::Parse {
                file,
                line: lineno,
                msg: format!("ragged row: {} cells, expected {}", row.len(), width),
            });
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            file,
            line: 1,
            msg: "empty trial file".into(),
        });
    }
    let t = rows.len();
    Tensor::from_vec(vec![t, width], rows.into_iter().flatten().collect())
}

/// Load all trials referenced by a JSON manifest, in manifest order.
pub fn load_trials(manifest_path: &Path) -> Result<Vec<Trial>> {
    let text =
        std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut trials = Vec::with_capacity(entries.len());
    for entry in entries {
        if entry.sample_rate_hz <= 0.0 {
            return Err(Error::Data(format!(
                "trial '{}' has non-positive sample rate",
                entry.path
            )));
        }
        let samples = parse_trial_csv(&base.join(&entry.path))?;
        trials.push(Trial {
            samples,
            sample_rate_hz: entry.sample_rate_hz,
            gesture: entry.gesture,
            subject: entry.subject,
            session: entry.session,
            trial_no: entry.trial,
        });
    }
    Ok(trials)
}

/// Write trials as CSV files plus a manifest under `dir`. Trial files are
/// named `{prefix}_{index:04}.csv`; returns the manifest path.
pub fn save_trials(
    dir: &Path,
    manifest_name: &str,
    trials: &[Trial],
    prefix: &str,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(trials.len());
    for (idx, trial) in trials.iter().enumerate() {
        let name = format!("{}_{:04}.csv", prefix, idx);
        let mut text = String::new();
        let c = trial.channels();
        for r in 0..trial.frames() {
            let row = trial.samples.row(r);
            for (j, v) in row.iter().enumerate() {
                if j + 1 < c {
                    write!(text, "{},", v).unwrap();
                } else {
                    writeln!(text, "{}", v).unwrap();
                }
            }
        }
        let path = dir.join(&name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            path: name,
            gesture: trial.gesture,
            subject: trial.subject,
            session: trial.session,
            trial: trial.trial_no,
            sample_rate_hz: trial.sample_rate_hz,
        });
    }
    let manifest_path = dir.join(manifest_name);
    let json = serde_json::to_string_pretty(&entries)?;
    std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

// ── Preprocessing ───────────────────────────────────────────────────

/// Per-channel mean and (population) standard deviation over all frames of
/// all given trials.
pub fn channel_stats(trials: &[Trial]) -> Result<ChannelStats> {
    let first = trials.first().ok_or_else(|| Error::Data("no trials".into()))?;
    let c = first.channels();
    let mut sum = vec![0.0; c];
    let mut sum_sq = vec![0.0; c];
    let mut count = 0usize;
    for trial in trials {
        if trial.channels() != c {
            return Err(Error::Shape(format!(
                "trial channel count {} != {}",
                trial.channels(),
                c
            )));
        }
        for r in 0..trial.frames() {
            for (j, &v) in trial.samples.row(r).iter().enumerate() {
                sum[j] += v;
                sum_sq[j] += v * v;
            }
        }
        count += trial.frames();
    }
    if count == 0 {
        return Err(Error::Data("trials contain no frames".into()));
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std: Vec<f64> = sum_sq
        .iter()
        .zip(&mean)
        .map(|(&sq, &m)| (sq / n - m * m).max(0.0).sqrt())
        .collect();
    Ok(ChannelStats { mean, std })
}

/// Standardize with the persisted source statistics, rectify, and apply a
/// causal moving average. Channels with std below 1e-9 get an epsilon
/// denominator and a warning.
pub fn preprocess(trial: &Trial, stats: &ChannelStats, cfg: &PreprocessCfg) -> Result<Trial> {
    let c = trial.channels();
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(Error::Shape(format!(
            "stats cover {} channels, trial has {}",
            stats.mean.len(),
            c
        )));
    }
    if cfg.smooth_len == 0 {
        return Err(Error::Config("smoothing length must be at least 1".into()));
    }
    let denom: Vec<f64> = stats
        .std
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            if s < 1e-9 {
                log::warn!("channel {} is degenerate (std {:.3e}); guarding with epsilon", j, s);
                s + 1e-9
            } else {
                s
            }
        })
        .collect();

    let t = trial.frames();
    // standardize + rectify
    let mut rectified = vec![0.0; t * c];
    for r in 0..t {
        for (j, &v) in trial.samples.row(r).iter().enumerate() {
            rectified[r * c + j] = ((v - stats.mean[j]) / denom[j]).abs();
        }
    }
    // causal moving average: leading frames use the partial prefix
    let l = cfg.smooth_len;
    let mut smoothed = vec![0.0; t * c];
    for j in 0..c {
        let mut acc = 0.0;
        for r in 0..t {
            acc += rectified[r * c + j];
            if r >= l {
                acc -= rectified[(r - l) * c + j];
            }
            let span = (r + 1).min(l) as f64;
            smoothed[r * c + j] = acc / span;
        }
    }
    Ok(Trial {
        samples: Tensor::from_vec(vec![t, c], smoothed)?,
        ..trial.clone()
    })
}

// ── Windowing ───────────────────────────────────────────────────────

/// Cut a trial into overlapped windows starting at 0, stride, 2·stride, …;
/// a trailing partial window is discarded. Window duration must stay under
/// 300 ms at the trial's sample rate.
pub fn segment(trial: &Trial, window_frames: usize, stride_frames: usize) -> Result<Vec<Window>> {
    if stride_frames == 0 {
        return Err(Error::Config("stride must be at least 1 frame".into()));
    }
    if window_frames == 0 {
        return Err(Error::Config("window must be at least 1 frame".into()));
    }
    let duration_ms = window_frames as f64 * 1000.0 / trial.sample_rate_hz;
    if duration_ms >= MAX_WINDOW_MS {
        return Err(Error::Config(format!(
            "window of {} frames at {} Hz is {:.1} ms; must be < {} ms",
            window_frames, trial.sample_rate_hz, duration_ms, MAX_WINDOW_MS
        )));
    }
    let t_raw = trial.frames();
    if window_frames > t_raw {
        return Err(Error::Data(format!(
            "segmentation: window of {} frames exceeds trial length {}",
            window_frames, t_raw
        )));
    }
    let count = (t_raw - window_frames) / stride_frames + 1;
    let c = trial.channels();
    let mut windows = Vec::with_capacity(count);
    for k in 0..count {
        let start = k * stride_frames;
        let mut data = Vec::with_capacity(window_frames * c);
        for r in start..start + window_frames {
            data.extend_from_slice(trial.samples.row(r));
        }
        windows.push(Window {
            data: Tensor::from_vec(vec![window_frames, c], data)?,
            label: trial.gesture,
            subject: trial.subject,
            session: trial.session,
        });
    }
    Ok(windows)
}

/// Preprocess and segment a set of trials into a dataset; manifest order
/// defines window order.
pub fn build_dataset(
    trials: &[Trial],
    stats: &ChannelStats,
    prep: &PreprocessCfg,
    window_frames: usize,
    stride_frames: usize,
    provenance: &str,
) -> Result<Dataset> {
    if trials.is_empty() {
        return Err(Error::Data("no trials to build a dataset from".into()));
    }
    let n_channels = trials[0].channels();
    let mut windows = Vec::new();
    let mut max_label = 0usize;
    for trial in trials {
        let prepped = preprocess(trial, stats, prep)?;
        max_label = max_label.max(trial.gesture);
        windows.extend(segment(&prepped, window_frames, stride_frames)?);
    }
    Ok(Dataset {
        windows,
        n_classes: max_label + 1,
        n_channels,
        provenance: provenance.to_string(),
    })
}

// ── Synthetic gesture generator ─────────────────────────────────────

/// Parameters of the synthetic multi-channel gesture source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthCfg {
    pub n_classes: usize,
    pub n_channels: usize,
    pub trials_per_class: usize,
    pub frames: usize,
    pub sample_rate_hz: f64,
    pub seed: u64,
    /// Varies trial-level draws while keeping the class structure; two
    /// datasets with equal seeds and different salts are fresh samples of
    /// the same classes.
    pub sample_salt: u64,
    pub noise_sigma: f64,
}

impl SynthCfg {
    pub fn new(
        n_classes: usize,
        n_channels: usize,
        trials_per_class: usize,
        frames: usize,
        seed: u64,
    ) -> Self {
        SynthCfg {
            n_classes,
            n_channels,
            trials_per_class,
            frames,
            sample_rate_hz: 1000.0,
            seed,
            sample_salt: 0,
            noise_sigma: 0.25,
        }
    }
}

struct ClassComponent {
    freq_hz: f64,
    amplitude: f64,
    mixing: Vec<f64>,
}

fn class_components(cfg: &SynthCfg, class: usize) -> Vec<ClassComponent> {
    let mut rng = derived_rng(cfg.seed, &[tags::SYNTH_CLASS, class as u64]);
    (0..3)
        .map(|_| {
            let freq_hz = rng.random_range(20.0..180.0_f64);
            let amplitude = rng.random_range(0.6..1.4);
            let mut mixing: Vec<f64> =
                (0..cfg.n_channels).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = mixing.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            mixing.iter_mut().for_each(|v| *v /= norm);
            ClassComponent {
                freq_hz,
                amplitude,
                mixing,
            }
        })
        .collect()
}

/// Generate per-class mixtures of amplitude-modulated band-limited
/// oscillations plus Gaussian noise. Classes differ in frequency content
/// and cross-channel mixing but share near-zero raw channel means, so a
/// single channel's mean cannot separate them. Deterministic per
/// (seed, salt).
pub fn synth_gestures(cfg: &SynthCfg) -> Result<Vec<Trial>> {
    if cfg.n_classes < 2 {
        return Err(Error::Config("need at least 2 gesture classes".into()));
    }
    if cfg.n_channels == 0 || cfg.frames == 0 || cfg.trials_per_class == 0 {
        return Err(Error::Config("channels, frames and trials must be positive".into()));
    }
    if cfg.sample_rate_hz <= 0.0 {
        return Err(Error::Config("sample rate must be positive".into()));
    }
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0))
        .map_err(|e| Error::Config(format!("bad noise sigma: {}", e)))?;

    let mut trials = Vec::with_capacity(cfg.n_classes * cfg.trials_per_class);
    for class in 0..cfg.n_classes {
        let components = class_components(cfg, class);
        for trial_idx in 0..cfg.trials_per_class {
            let mut rng = derived_rng(
                cfg.seed,
                &[
                    tags::SYNTH_TRIAL,
                    cfg.sample_salt,
                    class as u64,
                    trial_idx as u64,
                ],
            );
            let phases: Vec<f64> = components
                .iter()
                .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                .collect();
            let env_freq = rng.random_range(1.0..4.0_f64);
            let env_phase = rng.random_range(0.0..std::f64::consts::TAU);

            let c = cfg.n_channels;
            let mut data = vec![0.0; cfg.frames * c];
            for t in 0..cfg.frames {
                let secs = t as f64 / cfg.sample_rate_hz;
                let env = 1.0 + 0.4 * (std::f64::consts::TAU * env_freq * secs + env_phase).sin();
                for (comp, &phase) in components.iter().zip(&phases) {
                    let osc = comp.amplitude
                        * (std::f64::consts::TAU * comp.freq_hz * secs + phase).sin();
                    for (j, &m) in comp.mixing.iter().enumerate() {
                        data[t * c + j] += env * osc * m;
                    }
                }
                for j in 0..c {
                    data[t * c + j] += noise.sample(&mut rng);
                }
            }
            trials.push(Trial {
                samples: Tensor::from_vec(vec![cfg.frames, c], data)?,
                sample_rate_hz: cfg.sample_rate_hz,
                gesture: class,
                subject: 0,
                session: 0,
                trial_no: trial_idx as u32,
            });
        }
    }
    Ok(trials)
}

// ── Covariate shift ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftKind {
    None,
    Affine,
    Nonlinear,
}

impl std::str::FromStr for ShiftKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ShiftKind::None),
            "affine" => Ok(ShiftKind::Affine),
            "nonlinear" => Ok(ShiftKind::Nonlinear),
            other => Err(Error::Config(format!("unknown shift kind '{}'", other))),
        }
    }
}

fn default_gamma() -> f64 {
    1.7
}
fn default_shift_noise() -> f64 {
    0.05
}
fn default_condition_target() -> f64 {
    3.0
}

/// Seeded covariate-shift description; the mixing matrix and offset are
/// generated from `seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub seed: u64,
    /// Channel-wise warp exponent for the nonlinear kind.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_shift_noise")]
    pub noise_sigma: f64,
    /// Spread of the scaling singular values; also bounds the mixing
    /// matrix condition number.
    #[serde(default = "default_condition_target")]
    pub condition_target: f64,
}

impl ShiftSpec {
    pub fn new(kind: ShiftKind, seed: u64) -> Self {
        ShiftSpec {
            kind,
            seed,
            gamma: default_gamma(),
            noise_sigma: default_shift_noise(),
            condition_target: default_condition_target(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1.0..1e6).contains(&self.condition_target) {
            return Err(Error::Config(format!(
                "condition_target must be in [1, 1e6), got {}",
                self.condition_target
            )));
        }
        if self.gamma <= 0.0 {
            return Err(Error::Config("gamma must be positive".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Build the affine map (A, c) of a shift spec for `n_channels` channels:
/// a channel permutation combined with a log-spread positive scaling
/// (condition number = condition_target) and a mild dense mixing term,
/// mimicking electrode displacement.
pub fn shift_transform(spec: &ShiftSpec, n_channels: usize) -> Result<(Tensor, Vec<f64>)> {
    spec.validate()?;
    let f = n_channels;
    let mut rng = derived_rng(spec.seed, &[tags::SHIFT_MATRIX]);

    let mut perm: Vec<usize> = (0..f).collect();
    perm.shuffle(&mut rng);

    let scales: Vec<f64> = (0..f)
        .map(|i| {
            let expo = if f > 1 {
                i as f64 / (f - 1) as f64 - 0.5
            } else {
                0.0
            };
            spec.condition_target.powf(expo)
        })
        .collect();

    // A = Pd · (I + ρG): out_i = d_i · (x_{π(i)} + ρ Σ_j G[π(i),j] x_j)
    let rho = 0.1;
    let mixing_std = 1.0 / (f as f64).sqrt();
    let normal = Normal::new(0.0, mixing_std).unwrap();
    let mut g = vec![0.0; f * f];
    for v in g.iter_mut() {
        *v = normal.sample(&mut rng);
    }
    let mut a = vec![0.0; f * f];
    for i in 0..f {
        let src = perm[i];
        for j in 0..f {
            let base = if j == src { 1.0 } else { 0.0 };
            a[i * f + j] = scales[i] * (base + rho * g[src * f + j]);
        }
    }
    let offset_dist = Normal::new(0.0, 0.2).unwrap();
    let c: Vec<f64> = (0..f).map(|_| offset_dist.sample(&mut rng)).collect();
    Ok((Tensor::from_vec(vec![f, f], a)?, c))
}

/// Apply `x' = A·x + c + noise` frame-wise to raw trials. Exposed so tests
/// can drive hand-built matrices (e.g. exact permutations).
pub fn apply_affine(
    trials: &[Trial],
    a: &Tensor,
    c: &[f64],
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<Trial>> {
    let f = c.len();
    if a.shape() != [f, f] {
        return Err(Error::Shape(format!(
            "mixing matrix shape {:?} does not match offset length {}",
            a.shape(),
            f
        )));
    }
    let noise = Normal::new(0.0, noise_sigma.max(0.0))
        .map_err(|e| Error::Config(format!("bad noise sigma: {}", e)))?;
    let mut out = Vec::with_capacity(trials.len());
    for (trial_idx, trial) in trials.iter().enumerate() {
        if trial.channels() != f {
            return Err(Error::Shape(format!(
                "trial has {} channels, shift expects {}",
                trial.channels(),
                f
            )));
        }
        let mut rng = derived_rng(seed, &[tags::SHIFT_NOISE, trial_idx as u64]);
        let t = trial.frames();
        let mut data = vec![0.0; t * f];
        for r in 0..t {
            let x = trial.samples.row(r);
            for i in 0..f {
                let mut v = c[i];
                for (j, &xj) in x.iter().enumerate() {
                    v += a.data()[i * f + j] * xj;
                }
                if noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                data[r * f + i] = v;
            }
        }
        out.push(Trial {
            samples: Tensor::from_vec(vec![t, f], data)?,
            ..trial.clone()
        });
    }
    Ok(out)
}

/// Apply a covariate shift to raw trials (labels unchanged). `none` is a
/// strict identity; `nonlinear` composes a channel-wise monotone warp
/// sign(x)·|x|^γ with the affine map.
pub fn apply_shift(trials: &[Trial], spec: &ShiftSpec) -> Result<Vec<Trial>> {
    spec.validate()?;
    match spec.kind {
        ShiftKind::None => Ok(trials.to_vec()),
        ShiftKind::Affine => {
            let f = trials
                .first()
                .ok_or_else(|| Error::Data("no trials to shift".into()))?
                .channels();
            let (a, c) = shift_transform(spec, f)?;
            apply_affine(trials, &a, &c, spec.noise_sigma, spec.seed)
        }
        ShiftKind::Nonlinear => {
            let f = trials
                .first()
                .ok_or_else(|| Error::Data("no trials to shift".into()))?
                .channels();
            let warped: Vec<Trial> = trials
                .iter()
                .map(|trial| {
                    let data: Vec<f64> = trial
                        .samples
                        .data()
                        .iter()
                        .map(|&v| v.signum() * v.abs().powf(spec.gamma))
                        .collect();
                    Ok(Trial {
                        samples: Tensor::from_vec(trial.samples.shape().to_vec(), data)?,
                        ..trial.clone()
                    })
                })
                .collect::<Result<_>>()?;
            let (a, c) = shift_transform(spec, f)?;
            apply_affine(&warped, &a, &c, spec.noise_sigma, spec.seed)
        }
    }
}

/// Derive the trial-noise seed used for a fresh sample of the same classes.
pub fn fresh_sample_salt(base_salt: u64) -> u64 {
    derive_seed(base_salt, &[0x5a17])
}

//! Source-data-absent divergence metrics: the empirical distribution of
//! per-window cross-entropy losses of a frozen source classifier, its mean
//! difference as a Wasserstein lower bound, Jensen–Shannon divergence over
//! shared-edge histograms, and the Proxy-A distance from a linear domain
//! classifier.

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::rng::{derived_rng, tags};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

// ── Histograms ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramCfg {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl Default for HistogramCfg {
    fn default() -> Self {
        HistogramCfg {
            lo: 0.0,
            hi: 8.0,
            bins: 64,
        }
    }
}

impl HistogramCfg {
    pub fn validate(&self) -> Result<()> {
        if !(self.hi > self.lo) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::Config(format!(
                "histogram range [{}, {}) is invalid",
                self.lo, self.hi
            )));
        }
        if self.bins == 0 {
            return Err(Error::Config("histogram needs at least one bin".into()));
        }
        Ok(())
    }
}

/// Uniform-bin counting histogram; values outside the range land in the
/// first / last bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn from_values(values: &[f64], cfg: &HistogramCfg) -> Result<Self> {
        cfg.validate()?;
        let mut counts = vec![0u64; cfg.bins];
        let width = (cfg.hi - cfg.lo) / cfg.bins as f64;
        for &v in values {
            let raw = ((v - cfg.lo) / width).floor();
            let idx = (raw.max(0.0) as usize).min(cfg.bins - 1);
            counts[idx] += 1;
        }
        Ok(Histogram {
            lo: cfg.lo,
            hi: cfg.hi,
            counts,
        })
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let width = (self.hi - self.lo) / self.bins() as f64;
        (self.lo + i as f64 * width, self.lo + (i + 1) as f64 * width)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn same_edges(&self, other: &Histogram) -> bool {
        self.lo == other.lo && self.hi == other.hi && self.bins() == other.bins()
    }

    /// CSV export: `bin_left,bin_right,count` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,bin_right,count\n");
        for (i, &count) in self.counts.iter().enumerate() {
            let (left, right) = self.bin_edges(i);
            out.push_str(&format!("{},{},{}\n", left, right, count));
        }
        out
    }
}

// ── Loss distributions ──────────────────────────────────────────────

/// Ordered per-window cross-entropy losses with their mean and histogram:
/// the carrier of the divergence metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossDistribution {
    pub losses: Vec<f64>,
    pub mean: f64,
    pub histogram: Histogram,
}

impl LossDistribution {
    pub fn from_losses(losses: Vec<f64>, cfg: &HistogramCfg) -> Result<Self> {
        if losses.is_empty() {
            return Err(Error::Data("no losses to summarize".into()));
        }
        if losses.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::Numeric(
                "loss distribution requires finite non-negative losses".into(),
            ));
        }
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        let histogram = Histogram::from_values(&losses, cfg)?;
        Ok(LossDistribution {
            losses,
            mean,
            histogram,
        })
    }
}

/// |μ_a − μ_b|: a lower bound on the Wasserstein distance between the two
/// loss distributions.
pub fn wasserstein_lower_bound(a: &LossDistribution, b: &LossDistribution) -> f64 {
    (a.mean - b.mean).abs()
}

/// Jensen–Shannon divergence in nats between two histograms with identical
/// bin edges; 0·log(0/·) is taken as 0.
pub fn js_divergence(a: &Histogram, b: &Histogram) -> Result<f64> {
    if !a.same_edges(b) {
        return Err(Error::Config(
            "histograms must share bin edges for JS divergence".into(),
        ));
    }
    let (na, nb) = (a.total(), b.total());
    if na == 0 || nb == 0 {
        return Err(Error::Data("empty histogram in JS divergence".into()));
    }
    let p: Vec<f64> = a.counts.iter().map(|&c| c as f64 / na as f64).collect();
    let q: Vec<f64> = b.counts.iter().map(|&c| c as f64 / nb as f64).collect();
    let mut js = 0.0;
    for (pi, qi) in p.iter().zip(&q) {
        let m = 0.5 * (pi + qi);
        if *pi > 0.0 {
            js += 0.5 * pi * (pi / m).ln();
        }
        if *qi > 0.0 {
            js += 0.5 * qi * (qi / m).ln();
        }
    }
    // exact-arithmetic bound is ln 2; clamp round-off
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

// ── Proxy-A distance ────────────────────────────────────────────────

/// 2(1 − 2·risk) clamped into [0, 2].
pub fn proxy_a_from_risk(risk: f64) -> f64 {
    (2.0 * (1.0 - 2.0 * risk)).clamp(0.0, 2.0)
}

/// Per-window summary features for the domain classifier: channel-wise mean
/// and standard deviation over time (2f dimensions).
pub fn window_features(data: &Dataset) -> Vec<Vec<f64>> {
    data.windows
        .iter()
        .map(|w| {
            let t = w.data.rows();
            let c = w.data.cols();
            let mut mean = vec![0.0; c];
            for r in 0..t {
                for (j, &v) in w.data.row(r).iter().enumerate() {
                    mean[j] += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= t as f64);
            let mut var = vec![0.0; c];
            for r in 0..t {
                for (j, &v) in w.data.row(r).iter().enumerate() {
                    let d = v - mean[j];
                    var[j] += d * d;
                }
            }
            let mut feat = mean;
            feat.extend(var.iter().map(|v| (v / t as f64).sqrt()));
            feat
        })
        .collect()
}

/// Train a linear (logistic) domain classifier to distinguish source from
/// target feature vectors and report (proxy_a, risk).
///
/// Domains are balanced by resampling the smaller one with replacement;
/// each domain is split 80/20 into train/test; features are standardized
/// with statistics pooled over the training split; risk is 1 − balanced
/// test accuracy.
pub fn proxy_a_distance(
    source_features: &[Vec<f64>],
    target_features: &[Vec<f64>],
    seed: u64,
) -> Result<(f64, f64)> {
    if source_features.len() < 10 || target_features.len() < 10 {
        return Err(Error::Data(format!(
            "proxy-A needs at least 10 windows per domain, got {} and {}",
            source_features.len(),
            target_features.len()
        )));
    }
    let dim = source_features[0].len();
    if source_features
        .iter()
        .chain(target_features)
        .any(|f| f.len() != dim)
    {
        return Err(Error::Shape("inconsistent feature dimensions".into()));
    }

    let mut rng = derived_rng(seed, &[tags::DOMAIN_CLF]);
    let n = source_features.len().max(target_features.len());
    let balance = |feats: &[Vec<f64>], rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = feats.to_vec();
        use rand::Rng as _;
        while out.len() < n {
            out.push(feats[rng.random_range(0..feats.len())].clone());
        }
        out.shuffle(rng);
        out
    };
    let src = balance(source_features, &mut rng);
    let tgt = balance(target_features, &mut rng);

    let split = (n * 4) / 5;
    let (src_train, src_test) = src.split_at(split);
    let (tgt_train, tgt_test) = tgt.split_at(split);

    // pooled standardization from the training split
    let train_count = (src_train.len() + tgt_train.len()) as f64;
    let mut mean = vec![0.0; dim];
    for f in src_train.iter().chain(tgt_train.iter()) {
        for (m, &v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train_count);
    let mut std = vec![0.0; dim];
    for f in src_train.iter().chain(tgt_train.iter()) {
        for (s, (&v, &m)) in std.iter_mut().zip(f.iter().zip(&mean)) {
            *s += (v - m) * (v - m);
        }
    }
    std.iter_mut()
        .for_each(|s| *s = (*s / train_count).sqrt().max(1e-9));
    let norm = |f: &[f64]| -> Vec<f64> {
        f.iter()
            .zip(mean.iter().zip(&std))
            .map(|(&v, (&m, &s))| (v - m) / s)
            .collect()
    };

    // logistic regression, bias folded in, full-batch gradient descent
    let mut w = vec![0.0; dim + 1];
    let lr = 0.01;
    let epochs = 500;
    let train: Vec<(Vec<f64>, f64)> = src_train
        .iter()
        .map(|f| (norm(f), 0.0))
        .chain(tgt_train.iter().map(|f| (norm(f), 1.0)))
        .collect();
    for _ in 0..epochs {
        let mut grad = vec![0.0; dim + 1];
        for (x, y) in &train {
            let mut z = w[dim];
            for (wi, xi) in w[..dim].iter().zip(x) {
                z += wi * xi;
            }
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - y;
            for (g, xi) in grad[..dim].iter_mut().zip(x) {
                *g += err * xi;
            }
            grad[dim] += err;
        }
        let scale = lr / train.len() as f64;
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= scale * g;
        }
    }

    let classify = |f: &[f64]| -> f64 {
        let x = norm(f);
        let mut z = w[dim];
        for (wi, xi) in w[..dim].iter().zip(&x) {
            z += wi * xi;
        }
        if z >= 0.0 {
            1.0
        } else {
            0.0
        }
    };
    let src_correct = src_test.iter().filter(|f| classify(f) == 0.0).count();
    let tgt_correct = tgt_test.iter().filter(|f| classify(f) == 1.0).count();
    let balanced_acc = 0.5
        * (src_correct as f64 / src_test.len() as f64
            + tgt_correct as f64 / tgt_test.len() as f64);
    let risk = 1.0 - balanced_acc;
    Ok((proxy_a_from_risk(risk), risk))
}

// ── Report assembly ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrePost {
    #[serde(rename = "pre-DA")]
    PreDa,
    #[serde(rename = "post-DA")]
    PostDa,
}

/// Bundle of divergence metrics between a source and a target loss
/// distribution.
///
/// `mu_target` is the empirical cross-entropy of the source model on the
/// target domain; `kl_estimate = max(0, mu_target − mu_source)` uses the
/// source mean as a stand-in for the unavailable source entropy, so it is
/// an estimate rather than an exact KL value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub pre_post_tag: PrePost,
    pub mu_source: f64,
    pub mu_target: f64,
    pub wasserstein_lower_bound: f64,
    pub kl_estimate: f64,
    pub js_divergence: f64,
    pub proxy_a: f64,
    pub domain_classifier_risk: f64,
}

pub fn divergence_report(
    source_losses: &LossDistribution,
    target_losses: &LossDistribution,
    source_features: &[Vec<f64>],
    target_features: &[Vec<f64>],
    tag: PrePost,
    seed: u64,
) -> Result<DivergenceReport> {
    let (proxy_a, risk) = proxy_a_distance(source_features, target_features, seed)?;
    Ok(DivergenceReport {
        pre_post_tag: tag,
        mu_source: source_losses.mean,
        mu_target: target_losses.mean,
        wasserstein_lower_bound: wasserstein_lower_bound(source_losses, target_losses),
        kl_estimate: (target_losses.mean - source_losses.mean).max(0.0),
        js_divergence: js_divergence(&source_losses.histogram, &target_losses.histogram)?,
        proxy_a,
        domain_classifier_risk: risk,
    })
}

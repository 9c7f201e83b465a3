//! Depth, flow and descriptor-histogram objectives, used as verification
//! metrics and for loop-closure appearance similarity.

use crate::error::{Error, Result};
use crate::flow::Flow;
use crate::map::DenseMap;

pub const DEFAULT_EPSILON: f64 = 1e-4;
pub const DEFAULT_BINS: usize = 100;
pub const DEFAULT_MARGIN: f64 = 0.3;

/// `4 / (5K)`.
pub fn default_bandwidth(bins: usize) -> f64 {
    4.0 / (5.0 * bins as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistogramConfig {
    pub bins: usize,
    pub bandwidth: f64,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            bandwidth: default_bandwidth(DEFAULT_BINS),
        }
    }
}

impl HistogramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::Config(format!(
                "histogram needs at least 2 bins, got {}",
                self.bins
            )));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::Config(format!(
                "histogram bandwidth must be positive, got {}",
                self.bandwidth
            )));
        }
        Ok(())
    }

    /// Centre of bin `k`: `-1 + (2k + 1) / K`.
    pub fn center(&self, k: usize) -> f64 {
        -1.0 + (2 * k + 1) as f64 / self.bins as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftHistogram {
    pub bins: Vec<f64>,
    pub bandwidth: f64,
}

impl SoftHistogram {
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.bins.iter().sum()
    }

    pub fn cdf(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.bins
            .iter()
            .map(|b| {
                acc += b;
                acc
            })
            .collect()
    }
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// Variance-form scale-invariant log depth loss over the mask.
///
/// Pixels outside the mask contribute `log(eps) - log(eps) = 0`, so only the
/// masked pixels are visited.
pub fn scale_invariant_loss(est: &[f64], gt: &[f64], mask: &[bool], eps: f64) -> Result<f64> {
    check_len(est.len(), gt.len())?;
    check_len(est.len(), mask.len())?;
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for i in 0..est.len() {
        if !mask[i] {
            continue;
        }
        if est[i] < 0.0 || gt[i] < 0.0 {
            return Err(Error::InvalidDepth(est[i].min(gt[i])));
        }
        let r = (est[i] + eps).ln() - (gt[i] + eps).ln();
        n += 1;
        sum += r;
        sum_sq += r * r;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let n = n as f64;
    Ok(sum_sq / n - (sum / n) * (sum / n))
}

/// Soft histogram of one channel over the mask.
pub fn soft_histogram(values: &[f64], mask: &[bool], cfg: &HistogramConfig) -> Result<SoftHistogram> {
    cfg.validate()?;
    check_len(values.len(), mask.len())?;
    let k = cfg.bins;
    // bin j spans [e_j, e_{j+1}] with e_j = -1 + 2j/K, so adjacent bins share
    // one sigmoid evaluation
    let edges: Vec<f64> = (0..=k).map(|j| -1.0 + (2 * j) as f64 / k as f64).collect();
    let mut bins = vec![0.0; k];
    let mut upper = vec![0.0; k + 1];
    let mut n = 0usize;
    for (v, _) in values.iter().zip(mask).filter(|(_, &m)| m) {
        n += 1;
        for (u, e) in upper.iter_mut().zip(&edges) {
            *u = sigmoid((v - e) / cfg.bandwidth);
        }
        for (j, b) in bins.iter_mut().enumerate() {
            *b += upper[j] - upper[j + 1];
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    for b in &mut bins {
        *b /= n as f64;
    }
    Ok(SoftHistogram {
        bins,
        bandwidth: cfg.bandwidth,
    })
}

/// One histogram per channel of `map`, over the map's own mask.
pub fn channel_histograms(map: &DenseMap, cfg: &HistogramConfig) -> Result<Vec<SoftHistogram>> {
    (0..map.channels())
        .map(|c| soft_histogram(map.channel(c), map.mask(), cfg))
        .collect()
}

/// Squared L2 distance between the two CDFs.
pub fn emd_distance(a: &SoftHistogram, b: &SoftHistogram) -> Result<f64> {
    check_len(a.len(), b.len())?;
    let (ca, cb) = (a.cdf(), b.cdf());
    Ok(ca.iter().zip(&cb).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Mean per-channel EMD divided by K.
pub fn signature_distance(a: &[SoftHistogram], b: &[SoftHistogram]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::Config("empty signature".into()));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        total += emd_distance(x, y)? / x.len() as f64;
    }
    Ok(total / a.len() as f64)
}

/// Appearance similarity in (0, 1]; 1 for identical signatures.
pub fn signature_similarity(a: &[SoftHistogram], b: &[SoftHistogram]) -> Result<f64> {
    Ok(1.0 / (1.0 + signature_distance(a, b)?))
}

/// `(1/C) sum_i max(d(src,tgt)/K - d(src,far)/K + margin, 0)`.
pub fn triplet_histogram_loss(
    src: &DenseMap,
    tgt: &DenseMap,
    far: &DenseMap,
    cfg: &HistogramConfig,
    margin: f64,
) -> Result<f64> {
    check_len(src.channels(), tgt.channels())?;
    check_len(src.channels(), far.channels())?;
    if src.channels() == 0 {
        return Err(Error::Config("descriptor maps have no channels".into()));
    }
    let hs = channel_histograms(src, cfg)?;
    let ht = channel_histograms(tgt, cfg)?;
    let hf = channel_histograms(far, cfg)?;
    let k = cfg.bins as f64;
    let mut total = 0.0;
    for i in 0..hs.len() {
        let pos = emd_distance(&hs[i], &ht[i])? / k;
        let neg = emd_distance(&hs[i], &hf[i])? / k;
        total += (pos - neg + margin).max(0.0);
    }
    Ok(total / hs.len() as f64)
}

/// Normalized squared flow difference over `mask`; `gt` and `est` are
/// compared on the source grid. Zero when both flows vanish on the mask.
pub fn flow_loss(gt: &Flow, est: &Flow, mask: &[bool]) -> Result<f64> {
    let n = gt.u.len();
    check_len(n, est.u.len())?;
    check_len(n, mask.len())?;
    let mut count = 0usize;
    let mut diff = 0.0;
    let mut norm = 0.0;
    for i in (0..n).filter(|&i| mask[i]) {
        count += 1;
        let (du, dv) = (gt.u[i] - est.u[i], gt.v[i] - est.v[i]);
        diff += du * du + dv * dv;
        norm += gt.u[i] * gt.u[i] + gt.v[i] * gt.v[i] + est.u[i] * est.u[i] + est.v[i] * est.v[i];
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let omega = 0.5 * norm;
    if omega == 0.0 {
        return Ok(0.0);
    }
    Ok(diff / (omega * count as f64))
}

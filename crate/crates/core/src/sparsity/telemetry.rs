//! Scaling-factor snapshots, histograms and per-channel gradient logs.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::compute::Scalar;
use crate::model::{Gradients, ModelGraph};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGammas {
    pub layer: String,
    /// `|γ|` per channel.
    pub values: Vec<f32>,
}

/// `|γ|` of every BN layer at one point of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSnapshot {
    pub stage: String,
    pub epoch: usize,
    pub layers: Vec<LayerGammas>,
}

impl GammaSnapshot {
    pub fn capture<T: Scalar>(graph: &ModelGraph<T>, stage: &str, epoch: usize) -> Self {
        let layers = graph
            .bn_layers()
            .into_iter()
            .map(|l| LayerGammas {
                layer: graph.layers()[l].name.clone(),
                values: graph
                    .bn(l)
                    .map(|s| s.gamma.iter().map(|g| g.abs().as_f64() as f32).collect())
                    .unwrap_or_default(),
            })
            .collect();
        Self {
            stage: stage.into(),
            epoch,
            layers,
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f32> + '_ {
        self.layers.iter().flat_map(|l| l.values.iter().copied())
    }

    pub fn channel_count(&self) -> usize {
        self.layers.iter().map(|l| l.values.len()).sum()
    }

    /// Median over all channels (mean of the middle pair for even counts).
    pub fn median(&self) -> f32 {
        median(self.values().collect())
    }

    /// JSON-lines records, one per layer, carrying raw values.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for l in &self.layers {
            let rec = serde_json::json!({
                "stage": self.stage,
                "epoch": self.epoch,
                "layer": l.layer,
                "values": l.values,
            });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        out
    }

    /// Parses records written by [`GammaSnapshot::to_jsonl`]; records of
    /// several snapshots are grouped by `(stage, epoch)` in order of first
    /// appearance.
    pub fn from_jsonl(text: &str) -> Result<Vec<Self>> {
        #[derive(Deserialize)]
        struct Rec {
            stage: String,
            epoch: usize,
            layer: String,
            values: Vec<f32>,
        }
        let mut out: Vec<GammaSnapshot> = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r: Rec = serde_json::from_str(line)
                .map_err(|e| Error::InvalidArgument(format!("snapshot line {}: {e}", i + 1)))?;
            let layer = LayerGammas {
                layer: r.layer,
                values: r.values,
            };
            match out.iter_mut().find(|s| s.stage == r.stage && s.epoch == r.epoch) {
                Some(s) => s.layers.push(layer),
                None => out.push(GammaSnapshot {
                    stage: r.stage,
                    epoch: r.epoch,
                    layers: vec![layer],
                }),
            }
        }
        Ok(out)
    }
}

pub(crate) fn median(mut v: Vec<f32>) -> f32 {
    if v.is_empty() {
        return f32::NAN;
    }
    v.sort_by(f32::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Fixed-width histogram over `[lo, hi)` with a trailing overflow bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    /// `num_bins` regular bins followed by one overflow bin (`≥ hi`).
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn num_bins(&self) -> usize {
        self.counts.len() - 1
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Left edges of the regular bins.
    pub fn edges(&self) -> Vec<f64> {
        let n = self.num_bins();
        (0..=n)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / n as f64)
            .collect()
    }

    fn add(&mut self, v: f64) {
        let n = self.num_bins();
        let bin = if v >= self.hi {
            n
        } else if v <= self.lo {
            0
        } else {
            (((v - self.lo) / (self.hi - self.lo) * n as f64) as usize).min(n - 1)
        };
        self.counts[bin] += 1;
    }
}

fn empty_histogram(num_bins: usize, range: (f64, f64)) -> Result<Histogram> {
    if num_bins == 0 || !(range.1 > range.0) {
        return Err(Error::InvalidArgument(format!(
            "histogram needs at least one bin and a non-empty range, got {num_bins} bins over {range:?}"
        )));
    }
    Ok(Histogram {
        lo: range.0,
        hi: range.1,
        counts: vec![0; num_bins + 1],
    })
}

/// Bins every `|γ|` in the snapshot. Values below `range.0` land in the
/// first bin, so the counts always sum to the channel count.
pub fn gamma_histogram(snapshot: &GammaSnapshot, num_bins: usize, range: (f64, f64)) -> Result<Histogram> {
    let mut h = empty_histogram(num_bins, range)?;
    for v in snapshot.values() {
        h.add(v as f64);
    }
    Ok(h)
}

/// One JSON-lines record of histogram data for external plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRecord {
    pub stage: String,
    pub epoch: usize,
    /// BN layer name, or `"all"` for the whole network.
    pub layer: String,
    pub edges: Vec<f64>,
    pub bins: Vec<u64>,
}

impl HistogramRecord {
    /// Whole-network record followed by one record per layer.
    pub fn from_snapshot(snapshot: &GammaSnapshot, num_bins: usize, range: (f64, f64)) -> Result<Vec<Self>> {
        let whole = gamma_histogram(snapshot, num_bins, range)?;
        let mut out = vec![Self {
            stage: snapshot.stage.clone(),
            epoch: snapshot.epoch,
            layer: "all".into(),
            edges: whole.edges(),
            bins: whole.counts,
        }];
        for l in &snapshot.layers {
            let mut h = empty_histogram(num_bins, range)?;
            l.values.iter().for_each(|&v| h.add(v as f64));
            out.push(Self {
                stage: snapshot.stage.clone(),
                epoch: snapshot.epoch,
                layer: l.layer.clone(),
                edges: h.edges(),
                bins: h.counts,
            });
        }
        Ok(out)
    }
}

/// Fraction of channels with `|γ| < low` plus the fraction with
/// `|γ| > high`; close to 1 when the distribution has separated into two
/// peaks around the gap `[low, high]`.
pub fn bimodality_index(snapshot: &GammaSnapshot, low: f32, high: f32) -> f64 {
    let n = snapshot.channel_count();
    if n == 0 {
        return 0.0;
    }
    let outside = snapshot.values().filter(|&v| v < low || v > high).count();
    outside as f64 / n as f64
}

/// A `(BN layer, channel)` pair whose gradient is logged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackedChannel {
    pub layer: usize,
    pub channel: usize,
}

/// Per-iteration `|∂L_total/∂γ|` for a fixed set of channels.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientNormLog {
    tracked: Vec<TrackedChannel>,
    series: Vec<VecDeque<f32>>,
    window: Option<usize>,
    observed: usize,
}

impl GradientNormLog {
    /// `window` caps how many most-recent values are retained per channel.
    pub fn new<T: Scalar>(graph: &ModelGraph<T>, tracked: Vec<TrackedChannel>, window: Option<usize>) -> Result<Self> {
        for t in &tracked {
            let ok = graph.bn(t.layer).is_some_and(|s| t.channel < s.channels());
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "unknown channel {} of layer {}",
                    t.channel, t.layer
                )));
            }
        }
        if window == Some(0) {
            return Err(Error::InvalidArgument("gradient log window must be positive".into()));
        }
        Ok(Self {
            series: vec![VecDeque::new(); tracked.len()],
            tracked,
            window,
            observed: 0,
        })
    }

    /// Appends one value per tracked channel from the combined gradients
    /// (task loss plus any penalty).
    pub fn record<T: Scalar>(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (t, s) in self.tracked.iter().zip(self.series.iter_mut()) {
            let g = grads
                .gamma(t.layer)
                .and_then(|g| g.get(t.channel))
                .ok_or_else(|| Error::InvalidArgument(format!("no γ gradient for layer {}", t.layer)))?;
            s.push_back(g.abs().as_f64() as f32);
            if let Some(w) = self.window {
                while s.len() > w {
                    s.pop_front();
                }
            }
        }
        self.observed += 1;
        Ok(())
    }

    pub fn tracked(&self) -> &[TrackedChannel] {
        &self.tracked
    }

    /// Retained values for the `i`-th tracked channel.
    pub fn series(&self, i: usize) -> Vec<f32> {
        self.series[i].iter().copied().collect()
    }

    /// Iterations recorded so far.
    pub fn observed(&self) -> usize {
        self.observed
    }

    /// Mean of the retained values per tracked channel.
    pub fn means(&self) -> Vec<f32> {
        self.series
            .iter()
            .map(|s| s.iter().sum::<f32>() / s.len().max(1) as f32)
            .collect()
    }
}

//! Pruning masks over BN channels: thresholding, uniform ratios, import,
//! coupling resolution and the JSON mask file.
//!
//! A mask entry of `true` marks a channel for removal (and, during masked
//! sparsity training, for regularization); `false` keeps it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compute::Scalar;
use crate::model::ModelGraph;
use crate::{Error, Result};

pub const MASK_FORMAT_VERSION: u32 = 1;

/// How a mask was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Provenance {
    Threshold { theta: f64 },
    Uniform { ratio: f64 },
    Imported,
}

/// Prune flags of one BN layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    /// Index of the BN layer in the graph.
    pub layer: usize,
    pub name: String,
    pub prune: Vec<bool>,
}

impl LayerMask {
    pub fn total(&self) -> usize {
        self.prune.len()
    }

    pub fn pruned(&self) -> usize {
        self.prune.iter().filter(|&&p| p).count()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.prune.len()).filter(|&i| !self.prune[i]).collect()
    }

    pub fn pruned_indices(&self) -> Vec<usize> {
        (0..self.prune.len()).filter(|&i| self.prune[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMask {
    /// One entry per BN layer, in graph order.
    pub layers: Vec<LayerMask>,
    pub provenance: Provenance,
    /// Notes produced while resolving constraints (e.g. a layer that would
    /// have lost every channel).
    pub warnings: Vec<String>,
}

impl ChannelMask {
    /// A mask that prunes nothing.
    pub fn keep_all<T: Scalar>(graph: &ModelGraph<T>) -> Self {
        Self::from_fn(graph, Provenance::Imported, |_, _| false)
    }

    /// A mask that marks every channel (before constraint resolution).
    pub fn prune_all_raw<T: Scalar>(graph: &ModelGraph<T>) -> Self {
        Self::from_fn(graph, Provenance::Imported, |_, _| true)
    }

    pub fn from_fn<T: Scalar>(graph: &ModelGraph<T>, provenance: Provenance, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let layers = graph
            .bn_layers()
            .into_iter()
            .map(|l| {
                let n = graph.bn(l).map_or(0, |s| s.channels());
                LayerMask {
                    layer: l,
                    name: graph.layers()[l].name.clone(),
                    prune: (0..n).map(|c| f(l, c)).collect(),
                }
            })
            .collect();
        Self {
            layers,
            provenance,
            warnings: Vec::new(),
        }
    }

    pub fn layer(&self, bn: usize) -> Option<&LayerMask> {
        self.layers.iter().find(|m| m.layer == bn)
    }

    /// Whether channel `c` of BN layer `bn` is marked.
    pub fn is_pruned(&self, bn: usize, c: usize) -> bool {
        self.layer(bn).is_some_and(|m| m.prune.get(c).copied().unwrap_or(false))
    }

    pub fn total_channels(&self) -> usize {
        self.layers.iter().map(|m| m.total()).sum()
    }

    pub fn pruned_channels(&self) -> usize {
        self.layers.iter().map(|m| m.pruned()).sum()
    }

    /// Fraction of all BN channels marked for pruning.
    pub fn prune_fraction(&self) -> f64 {
        self.pruned_channels() as f64 / self.total_channels().max(1) as f64
    }

    /// Checks layer identity and sizes against `graph`.
    pub fn check_shape<T: Scalar>(&self, graph: &ModelGraph<T>) -> Result<()> {
        let bns = graph.bn_layers();
        let mut diffs = Vec::new();
        if bns.len() != self.layers.len() {
            diffs.push(format!(
                "graph has {} BN layers, mask has {}",
                bns.len(),
                self.layers.len()
            ));
        }
        for (&l, m) in bns.iter().zip(&self.layers) {
            let name = &graph.layers()[l].name;
            let n = graph.bn(l).map_or(0, |s| s.channels());
            if m.layer != l || &m.name != name || m.total() != n {
                diffs.push(format!(
                    "{name}: graph has {n} channels, mask entry {} has {}",
                    m.name,
                    m.total()
                ));
            }
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidMask(diffs.join("; ")))
        }
    }

    /// Full invariant check: shapes, a kept channel in every layer and
    /// identical vectors within each coupling group.
    pub fn validate<T: Scalar>(&self, graph: &ModelGraph<T>) -> Result<()> {
        self.check_shape(graph)?;
        if let Some(m) = self.layers.iter().find(|m| m.pruned() == m.total()) {
            return Err(Error::InvalidMask(format!("layer {} would lose every channel", m.name)));
        }
        for group in graph.coupling_groups() {
            let first = self.layer(group[0]).map(|m| &m.prune);
            if group.iter().any(|&g| self.layer(g).map(|m| &m.prune) != first) {
                return Err(Error::InvalidMask(format!(
                    "coupled layers {:?} carry different masks",
                    group
                        .iter()
                        .map(|&g| graph.layers()[g].name.as_str())
                        .collect::<Vec<_>>()
                )));
            }
        }
        Ok(())
    }
}

fn abs_gammas<T: Scalar>(graph: &ModelGraph<T>, bn: usize) -> Vec<f64> {
    graph
        .bn(bn)
        .map(|s| s.gamma.iter().map(|g| g.abs().as_f64()).collect())
        .unwrap_or_default()
}

/// Marks channel `i` of layer `l` iff `|γ⁽ˡ⁾ᵢ| < theta`, before resolution.
pub fn threshold_mask_raw<T: Scalar>(graph: &ModelGraph<T>, theta: f64) -> Result<ChannelMask> {
    if !(theta > 0.0) {
        return Err(Error::InvalidArgument(format!("theta must be positive, got {theta}")));
    }
    Ok(ChannelMask::from_fn(graph, Provenance::Threshold { theta }, |l, c| {
        graph.bn(l).is_some_and(|s| s.gamma[c].abs().as_f64() < theta)
    }))
}

/// Thresholds `|γ|` at `theta`, then resolves coupling constraints.
pub fn threshold_mask<T: Scalar>(graph: &ModelGraph<T>, theta: f64) -> Result<ChannelMask> {
    resolve_constraints(&threshold_mask_raw(graph, theta)?, graph)
}

/// Marks the `⌊ratio·N⌋` smallest-`|γ|` channels of every layer (ties go to
/// the lower index), before resolution.
pub fn uniform_mask_raw<T: Scalar>(graph: &ModelGraph<T>, ratio: f64) -> Result<ChannelMask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("ratio must lie in [0, 1), got {ratio}")));
    }
    let mut mask = ChannelMask::keep_all(graph);
    mask.provenance = Provenance::Uniform { ratio };
    for m in &mut mask.layers {
        let g = abs_gammas(graph, m.layer);
        let count = (ratio * g.len() as f64).floor() as usize;
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&a, &b| g[a].total_cmp(&g[b]).then(a.cmp(&b)));
        for &i in &order[..count] {
            m.prune[i] = true;
        }
    }
    Ok(mask)
}

/// Uniform per-layer pruning followed by coupling resolution.
pub fn uniform_mask<T: Scalar>(graph: &ModelGraph<T>, ratio: f64) -> Result<ChannelMask> {
    resolve_constraints(&uniform_mask_raw(graph, ratio)?, graph)
}

/// Within each coupling group a channel stays marked only if every member
/// marked it. Afterwards any layer (or group) left without a kept channel
/// keeps its largest-`|γ|` channel, summed over the group for coupled layers.
pub fn resolve_constraints<T: Scalar>(mask: &ChannelMask, graph: &ModelGraph<T>) -> Result<ChannelMask> {
    mask.check_shape(graph)?;
    let mut out = mask.clone();
    let pos: BTreeMap<usize, usize> = out
        .layers
        .iter()
        .enumerate()
        .map(|(i, m)| (m.layer, i))
        .collect();

    let mut units: Vec<Vec<usize>> = graph.coupling_groups().to_vec();
    for m in &out.layers {
        if graph.group_of(m.layer).is_none() {
            units.push(vec![m.layer]);
        }
    }

    for unit in units {
        let n = out.layers[pos[&unit[0]]].total();
        let joint: Vec<bool> = (0..n)
            .map(|c| unit.iter().all(|l| out.layers[pos[l]].prune[c]))
            .collect();
        let mut joint = joint;
        if joint.iter().all(|&p| p) {
            let mut score = vec![0.0f64; n];
            for l in &unit {
                for (s, g) in score.iter_mut().zip(abs_gammas(graph, *l)) {
                    *s += g;
                }
            }
            // Largest score, lowest index on ties.
            let best = (0..n).fold(0, |b, c| if score[c] > score[b] { c } else { b });
            joint[best] = false;
            let names: Vec<&str> = unit.iter().map(|l| out.layers[pos[l]].name.as_str()).collect();
            let msg = format!(
                "every channel of {} fell below the pruning criterion; keeping channel {best}",
                names.join(", ")
            );
            log::warn!("{msg}");
            out.warnings.push(msg);
        }
        for l in &unit {
            out.layers[pos[l]].prune = joint.clone();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskFileLayer {
    pub name: String,
    pub total: usize,
    pub prune: Vec<usize>,
}

/// On-disk mask document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskFile {
    pub format_version: u32,
    pub model_fingerprint: String,
    pub layers: Vec<MaskFileLayer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

/// SHA-256 over the BN layer names and channel counts, which is all a
/// mask depends on.
pub fn mask_fingerprint<T: Scalar>(graph: &ModelGraph<T>) -> String {
    let mut h = Sha256::new();
    for (name, n) in graph.bn_channel_table_ordered() {
        h.update(name.as_bytes());
        h.update([0]);
        h.update((n as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl<T: Scalar> ModelGraph<T> {
    fn bn_channel_table_ordered(&self) -> Vec<(String, usize)> {
        self.bn_layers()
            .into_iter()
            .map(|l| (self.layers()[l].name.clone(), self.bn(l).map_or(0, |s| s.channels())))
            .collect()
    }
}

impl ChannelMask {
    pub fn to_file<T: Scalar>(&self, graph: &ModelGraph<T>) -> MaskFile {
        MaskFile {
            format_version: MASK_FORMAT_VERSION,
            model_fingerprint: mask_fingerprint(graph),
            layers: self
                .layers
                .iter()
                .map(|m| MaskFileLayer {
                    name: m.name.clone(),
                    total: m.total(),
                    prune: m.pruned_indices(),
                })
                .collect(),
            provenance: Some(self.provenance.clone()),
        }
    }

    /// Rebuilds a mask from its file form, checking it against `graph`.
    pub fn from_file<T: Scalar>(file: &MaskFile, graph: &ModelGraph<T>) -> Result<Self> {
        if file.format_version != MASK_FORMAT_VERSION {
            return Err(Error::InvalidMask(format!(
                "unsupported mask format version {}",
                file.format_version
            )));
        }
        let table = graph.bn_channel_table_ordered();
        let mut diffs = Vec::new();
        let by_name: BTreeMap<&str, &MaskFileLayer> =
            file.layers.iter().map(|l| (l.name.as_str(), l)).collect();
        for (name, n) in &table {
            match by_name.get(name.as_str()) {
                None => diffs.push(format!("{name}: missing from mask")),
                Some(l) if l.total != *n => {
                    diffs.push(format!("{name}: model has {n} channels, mask has {}", l.total))
                }
                _ => {}
            }
        }
        for l in &file.layers {
            if !table.iter().any(|(n, _)| n == &l.name) {
                diffs.push(format!("{}: not a BN layer of this model", l.name));
            }
        }
        if !diffs.is_empty() {
            return Err(Error::InvalidMask(format!(
                "mask does not match model: {}",
                diffs.join("; ")
            )));
        }
        if file.model_fingerprint != mask_fingerprint(graph) {
            return Err(Error::InvalidMask("model fingerprint mismatch".into()));
        }
        let mut mask = ChannelMask::keep_all(graph);
        mask.provenance = Provenance::Imported;
        for m in &mut mask.layers {
            let entry = by_name[m.name.as_str()];
            if entry.prune.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidMask(format!(
                    "{}: prune indices must be strictly increasing",
                    m.name
                )));
            }
            for &i in &entry.prune {
                if i >= m.total() {
                    return Err(Error::InvalidMask(format!(
                        "{}: prune index {i} out of range",
                        m.name
                    )));
                }
                m.prune[i] = true;
            }
        }
        Ok(mask)
    }
}

pub fn save_mask<T: Scalar>(mask: &ChannelMask, graph: &ModelGraph<T>, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(&mask.to_file(graph))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

/// Loads a mask file and checks it against `graph`. The loaded mask keeps
/// the recorded provenance when present.
pub fn load_mask<T: Scalar>(path: &Path, graph: &ModelGraph<T>) -> Result<ChannelMask> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: MaskFile =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let mut mask = ChannelMask::from_file(&file, graph)?;
    if let Some(p) = file.provenance {
        mask.provenance = p;
    }
    Ok(mask)
}

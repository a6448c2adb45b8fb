//! Layer importance from IGIA matrices, and prune plans built on it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::igia::IgiaMap;
use crate::merging::{merge_layer, MergeConfig};
use crate::model::{linear_name, parse_linear_name, ModelState, Sublayer};
use crate::numerics::total_sum;

/// `(layer id, score)` in ascending layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerScores(pub Vec<(usize, f64)>);

impl LayerScores {
    pub fn ids(&self) -> Vec<usize> {
        self.0.iter().map(|(id, _)| *id).collect()
    }

    pub fn get(&self, id: usize) -> Option<f64> {
        self.0.iter().find(|(i, _)| *i == id).map(|(_, s)| *s)
    }
}

/// Sum of every IGIA entry over the layer's seven projections.
pub fn layer_score(igia: &IgiaMap, layer: usize) -> Result<f64> {
    let mut score = 0.0;
    for sub in Sublayer::ALL {
        let name = linear_name(layer, sub);
        let m = igia.get(&name).ok_or(Error::MissingIgia(name))?;
        score += total_sum(&m.f);
    }
    Ok(score)
}

/// Scores every layer that has IGIA matrices.
pub fn score_layers(igia: &IgiaMap) -> Result<LayerScores> {
    let ids: BTreeSet<usize> = igia
        .keys()
        .filter_map(|name| parse_linear_name(name).map(|(id, _)| id))
        .collect();
    if ids.is_empty() {
        return Err(Error::MissingIgia("no layer IGIA matrices".into()));
    }
    ids.into_iter()
        .map(|id| Ok((id, layer_score(igia, id)?)))
        .collect::<Result<Vec<_>>>()
        .map(LayerScores)
}

/// Most important first; equal scores keep the lower layer id first.
pub fn rank_layers(scores: &LayerScores) -> Vec<usize> {
    let mut v = scores.0.clone();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().map(|(id, _)| id).collect()
}

/// Fraction of block parameters removed. Shared with the parameter report so
/// both agree bit for bit.
pub fn block_ratio(removed: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        removed as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunePlan {
    pub retained: Vec<usize>,
    pub pruned_discard: Vec<usize>,
    pub pruned_merge: Vec<usize>,
    /// Pruned id → nearest preceding retained id.
    pub merge_target: BTreeMap<usize, usize>,
    pub achieved_ratio: f64,
}

/// Requested plan shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanRequest {
    pub prune_count: usize,
    pub merge_count: usize,
    /// Layers that may never be pruned; `None` protects the first layer.
    pub protect: Option<BTreeSet<usize>>,
}

impl PlanRequest {
    pub fn new(prune_count: usize, merge_count: usize) -> Self {
        Self {
            prune_count,
            merge_count,
            protect: None,
        }
    }
}

/// Prunes the `prune_count` lowest-ranked unprotected layers; the
/// `merge_count` highest-scoring of those are merged rather than discarded.
/// `layer_params` gives the block parameter count of each layer.
pub fn make_prune_plan(
    scores: &LayerScores,
    request: &PlanRequest,
    layer_params: &BTreeMap<usize, usize>,
) -> Result<PrunePlan> {
    let ids = scores.ids();
    let (n, m) = (request.prune_count, request.merge_count);
    if ids.is_empty() {
        return Err(Error::Plan("no layers to plan over".into()));
    }
    if n >= ids.len() {
        return Err(Error::Plan(format!("cannot prune {n} of {} layers", ids.len())));
    }
    if m > n {
        return Err(Error::Plan(format!("merge count {m} exceeds prune count {n}")));
    }
    let protect = request.protect.clone().unwrap_or_else(|| BTreeSet::from([ids[0]]));
    let ranking = rank_layers(scores);
    // Least important first.
    let candidates: Vec<usize> = ranking.iter().rev().copied().filter(|id| !protect.contains(id)).collect();
    if candidates.len() < n {
        return Err(Error::Plan(format!(
            "only {} unprotected layers, cannot prune {n}",
            candidates.len()
        )));
    }
    let pruned = &candidates[..n];
    // `pruned` is in ascending score order, so the merged ones sit at its end.
    let pruned_merge: BTreeSet<usize> = pruned[n - m..].iter().copied().collect();
    let pruned_discard: BTreeSet<usize> = pruned[..n - m].iter().copied().collect();
    let pruned_all: BTreeSet<usize> = pruned.iter().copied().collect();
    let retained: Vec<usize> = ids.iter().copied().filter(|id| !pruned_all.contains(id)).collect();
    let mut merge_target = BTreeMap::new();
    for &j in &pruned_merge {
        let target = retained
            .iter()
            .copied()
            .filter(|&r| r < j)
            .max()
            .ok_or_else(|| Error::Plan(format!("layer {j} has no preceding retained layer to merge into")))?;
        merge_target.insert(j, target);
    }
    let count = |id: &usize| -> Result<usize> {
        layer_params
            .get(id)
            .copied()
            .ok_or_else(|| Error::Plan(format!("no parameter count for layer {id}")))
    };
    let total = ids.iter().map(count).sum::<Result<usize>>()?;
    let removed = pruned_all.iter().map(count).sum::<Result<usize>>()?;
    Ok(PrunePlan {
        retained,
        pruned_discard: pruned_discard.into_iter().collect(),
        pruned_merge: pruned_merge.into_iter().collect(),
        merge_target,
        achieved_ratio: block_ratio(removed, total),
    })
}

/// Block parameter count of each layer of `model`.
pub fn layer_param_counts(model: &ModelState) -> BTreeMap<usize, usize> {
    model
        .layer_ids()
        .into_iter()
        .map(|id| (id, model.layer(id).expect("listed id").base_param_count()))
        .collect()
}

impl PrunePlan {
    /// A plan that keeps every layer.
    pub fn keep_all(ids: &[usize]) -> Self {
        Self {
            retained: ids.to_vec(),
            pruned_discard: Vec::new(),
            pruned_merge: Vec::new(),
            merge_target: BTreeMap::new(),
            achieved_ratio: 0.0,
        }
    }

    pub fn pruned(&self) -> BTreeSet<usize> {
        self.pruned_discard.iter().chain(&self.pruned_merge).copied().collect()
    }

    pub fn layers(&self) -> BTreeSet<usize> {
        self.retained.iter().copied().chain(self.pruned()).collect()
    }

    /// Checks the partition, merge-target and first-layer rules.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &id in self.retained.iter().chain(&self.pruned_discard).chain(&self.pruned_merge) {
            if !seen.insert(id) {
                return Err(Error::Plan(format!("layer {id} listed twice")));
            }
        }
        let first = *seen.iter().next().ok_or_else(|| Error::Plan("empty plan".into()))?;
        if !self.retained.contains(&first) {
            return Err(Error::Plan(format!("first layer {first} must be retained")));
        }
        let merged: BTreeSet<usize> = self.pruned_merge.iter().copied().collect();
        let keys: BTreeSet<usize> = self.merge_target.keys().copied().collect();
        if merged != keys {
            return Err(Error::Plan("merge targets do not match merged layers".into()));
        }
        for (&j, &i) in &self.merge_target {
            let nearest = self.retained.iter().copied().filter(|&r| r < j).max();
            if nearest != Some(i) {
                return Err(Error::Plan(format!(
                    "layer {j} must merge into its nearest preceding retained layer, not {i}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.achieved_ratio) {
            return Err(Error::Plan(format!("ratio {} not in [0, 1]", self.achieved_ratio)));
        }
        Ok(())
    }

    /// One directive per line, ordered by layer id, then the ratio.
    pub fn to_directives(&self) -> String {
        let mut out = String::from("# prune plan\n");
        for id in self.layers() {
            if self.retained.contains(&id) {
                writeln!(out, "RETAIN {id}").unwrap();
            } else if let Some(t) = self.merge_target.get(&id) {
                writeln!(out, "MERGE {id} INTO {t}").unwrap();
            } else {
                writeln!(out, "DISCARD {id}").unwrap();
            }
        }
        writeln!(out, "RATIO {}", self.achieved_ratio).unwrap();
        out
    }

    pub fn parse_directives(text: &str) -> Result<Self> {
        let mut plan = PrunePlan::keep_all(&[]);
        let mut ratio = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Plan(format!("line {}: cannot parse `{line}`", no + 1));
            let idx = |s: &str| s.parse::<usize>().map_err(|_| bad());
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["RETAIN", j] => plan.retained.push(idx(j)?),
                ["DISCARD", j] => plan.pruned_discard.push(idx(j)?),
                ["MERGE", j, "INTO", i] => {
                    let j = idx(j)?;
                    plan.pruned_merge.push(j);
                    if plan.merge_target.insert(j, idx(i)?).is_some() {
                        return Err(Error::Plan(format!("layer {j} merged twice")));
                    }
                }
                ["RATIO", x] if ratio.is_none() => ratio = Some(x.parse::<f64>().map_err(|_| bad())?),
                _ => return Err(bad()),
            }
        }
        plan.achieved_ratio = ratio.ok_or_else(|| Error::Plan("missing RATIO directive".into()))?;
        plan.retained.sort_unstable();
        plan.pruned_discard.sort_unstable();
        plan.pruned_merge.sort_unstable();
        plan.validate()?;
        Ok(plan)
    }

    /// Human-readable summary with optional scores.
    pub fn report(&self, scores: Option<&LayerScores>) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let mut out = String::new();
        writeln!(out, "retained: {}", list(&self.retained)).unwrap();
        writeln!(out, "discarded: {}", list(&self.pruned_discard)).unwrap();
        let merges: Vec<String> = self.merge_target.iter().map(|(j, i)| format!("{j}->{i}")).collect();
        writeln!(out, "merged: {}", merges.join(" ")).unwrap();
        writeln!(out, "block params removed: {:.4}", self.achieved_ratio).unwrap();
        if let Some(scores) = scores {
            for (id, s) in &scores.0 {
                writeln!(out, "score {id}: {s:.6e}").unwrap();
            }
        }
        out
    }
}

/// Merges the plan's merge layers into their targets, then drops every
/// pruned layer.
pub fn apply_prune(model: &ModelState, plan: &PrunePlan, igia: &IgiaMap, merge_cfg: &MergeConfig) -> Result<ModelState> {
    plan.validate()?;
    let have: BTreeSet<usize> = model.layer_ids().into_iter().collect();
    if have != plan.layers() {
        return Err(Error::Plan(format!(
            "plan covers layers {:?} but the model has {:?}",
            plan.layers(),
            have
        )));
    }
    let pruned = plan.pruned();
    if pruned.is_empty() {
        return Ok(model.clone());
    }
    let merged = if plan.merge_target.is_empty() {
        model.clone()
    } else {
        merge_layer(model, plan, igia, merge_cfg)?
    };
    merged.drop_layers(&pruned)
}

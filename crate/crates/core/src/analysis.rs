//! Evaluation metrics, ranking stability and parameter accounting.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::merging::keep_count;
use crate::model::ModelState;
use crate::numerics::Tensor;
use crate::scoring::block_ratio;
use crate::trainer::Sample;

/// A layer ranking (most important first) captured after `step` steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingSnapshot {
    pub step: usize,
    pub ranking: Vec<usize>,
}

/// `ceil(0.6 · layers)`.
pub fn default_k(layers: usize) -> usize {
    keep_count(0.6, layers).max(1)
}

/// Fraction of `reference`'s top-`k` set that also appears in the
/// candidate's top-`k` set.
pub fn topk_overlap(candidate: &RankingSnapshot, reference: &RankingSnapshot, k: usize) -> Result<f64> {
    let n = candidate.ranking.len().min(reference.ranking.len());
    if k == 0 || k > n {
        return Err(Error::Input(format!("k = {k} outside 1..={n}")));
    }
    let a: BTreeSet<usize> = candidate.ranking[..k].iter().copied().collect();
    let b: BTreeSet<usize> = reference.ranking[..k].iter().copied().collect();
    Ok(a.intersection(&b).count() as f64 / k as f64)
}

/// Step-ordered `(step, overlap)` series.
pub fn sensitivity_curve(
    snapshots: &[RankingSnapshot],
    reference: &RankingSnapshot,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    if snapshots.is_empty() {
        return Err(Error::Input("no snapshots".into()));
    }
    let mut out = snapshots
        .iter()
        .map(|s| Ok((s.step, topk_overlap(s, reference, k)?)))
        .collect::<Result<Vec<_>>>()?;
    out.sort_by_key(|(step, _)| *step);
    Ok(out)
}

/// CSV with columns `step,topk_overlap`; the metric is the top-`k` set
/// overlap with the reference ranking.
pub fn curve_csv(curve: &[(usize, f64)], k: usize) -> String {
    let mut out = format!("# top-{k} set overlap with the full-run ranking\nstep,topk_overlap\n");
    for (step, overlap) in curve {
        writeln!(out, "{step},{overlap}").unwrap();
    }
    out
}

/// Spearman correlation between two rankings of the same layer set.
pub fn rank_correlation(a: &RankingSnapshot, b: &RankingSnapshot) -> Result<f64> {
    let set_a: BTreeSet<usize> = a.ranking.iter().copied().collect();
    let set_b: BTreeSet<usize> = b.ranking.iter().copied().collect();
    let n = a.ranking.len();
    if set_a != set_b || set_a.len() != n || b.ranking.len() != n {
        return Err(Error::Input("rankings cover different layer sets".into()));
    }
    if n < 2 {
        return Err(Error::Input("rank correlation needs at least two layers".into()));
    }
    let d2: f64 = a
        .ranking
        .iter()
        .enumerate()
        .map(|(ra, id)| {
            let rb = b.ranking.iter().position(|x| x == id).expect("same set");
            let d = ra as f64 - rb as f64;
            d * d
        })
        .sum();
    let n = n as f64;
    Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
}

/// Anything that maps a token sequence to `[len × vocab]` logits.
pub trait Predictor {
    fn logits(&self, tokens: &[u32]) -> Result<Tensor>;
}

impl Predictor for ModelState {
    fn logits(&self, tokens: &[u32]) -> Result<Tensor> {
        Ok(self.forward(tokens)?.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean cross-entropy per scored token.
    pub loss: f64,
    pub perplexity: f64,
    /// Fraction of scored tokens whose argmax (lowest index on ties) is correct.
    pub accuracy: f64,
    pub samples: usize,
    pub tokens: usize,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        format!(
            "loss={}\nperplexity={}\naccuracy={}\nsamples={}\ntokens={}\n",
            self.loss, self.perplexity, self.accuracy, self.samples, self.tokens
        )
    }
}

pub fn evaluate(model: &dyn Predictor, heldout: &[Sample]) -> Result<EvalReport> {
    if heldout.is_empty() {
        return Err(Error::Input("empty held-out split".into()));
    }
    let (mut nll, mut correct, mut tokens) = (0.0, 0usize, 0usize);
    for s in heldout {
        let logits = model.logits(&s.input)?;
        for pos in s.score_from..s.target.len() {
            let row = logits.row(pos);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let target = s.target[pos] as usize;
            nll += lse - row[target];
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
            correct += usize::from(best == target);
            tokens += 1;
        }
    }
    if tokens == 0 {
        return Err(Error::Input("held-out split has no scored tokens".into()));
    }
    let loss = nll / tokens as f64;
    Ok(EvalReport {
        loss,
        perplexity: loss.exp(),
        accuracy: correct as f64 / tokens as f64,
        samples: heldout.len(),
        tokens,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub total_before: usize,
    pub total_after: usize,
    pub block_before: usize,
    pub block_after: usize,
    /// Fraction of block parameters removed.
    pub ratio: f64,
    /// `(layer id, block params, kept)` for every layer of `before`.
    pub per_layer: Vec<(usize, usize, bool)>,
}

pub fn param_report(before: &ModelState, after: &ModelState) -> ParamReport {
    let kept: BTreeSet<usize> = after.layer_ids().into_iter().collect();
    let per_layer: Vec<(usize, usize, bool)> = before
        .layer_ids()
        .into_iter()
        .map(|id| {
            let n = before.layer(id).expect("listed id").base_param_count();
            (id, n, kept.contains(&id))
        })
        .collect();
    let removed = per_layer.iter().filter(|(_, _, k)| !k).map(|(_, n, _)| n).sum();
    ParamReport {
        total_before: before.base_param_count(),
        total_after: after.base_param_count(),
        block_before: before.block_param_count(),
        block_after: after.block_param_count(),
        ratio: block_ratio(removed, before.block_param_count()),
        per_layer,
    }
}

impl ParamReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "total params: {} -> {}", self.total_before, self.total_after).unwrap();
        writeln!(out, "block params: {} -> {}", self.block_before, self.block_after).unwrap();
        writeln!(out, "block ratio removed: {}", self.ratio).unwrap();
        for (id, n, kept) in &self.per_layer {
            writeln!(out, "layer {id}: {n} {}", if *kept { "kept" } else { "removed" }).unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn snap(r: &[usize]) -> RankingSnapshot {
        RankingSnapshot {
            step: 0,
            ranking: r.to_vec(),
        }
    }

    #[test]
    fn overlap_examples() {
        let a = snap(&[3, 1, 0, 2]);
        assert_eq!(topk_overlap(&a, &a, 3).unwrap(), 1.0);
        assert_eq!(topk_overlap(&snap(&[0, 1, 2, 3]), &snap(&[2, 3, 0, 1]), 2).unwrap(), 0.0);
        let reference: Vec<usize> = (0..32).collect();
        let mut cand = reference.clone();
        cand.swap(0, 30);
        cand.swap(1, 31);
        assert_eq!(topk_overlap(&snap(&cand), &snap(&reference), 20).unwrap(), 0.9);
        assert!(topk_overlap(&a, &a, 0).is_err());
        assert!(topk_overlap(&a, &a, 5).is_err());
    }

    #[test]
    fn curve_is_step_ordered() {
        let r = snap(&[0, 1, 2]);
        let snaps = vec![
            RankingSnapshot {
                step: 9,
                ranking: vec![0, 1, 2],
            },
            RankingSnapshot {
                step: 2,
                ranking: vec![2, 1, 0],
            },
        ];
        let c = sensitivity_curve(&snaps, &r, 1).unwrap();
        assert_eq!(c, vec![(2, 0.0), (9, 1.0)]);
        assert!(curve_csv(&c, 1).contains("step,topk_overlap\n2,0\n9,1\n"));
        assert!(sensitivity_curve(&[], &r, 1).is_err());
    }

    #[test]
    fn spearman_examples() {
        let id = snap(&[0, 1, 2, 3]);
        assert_eq!(rank_correlation(&id, &id).unwrap(), 1.0);
        assert_eq!(rank_correlation(&id, &snap(&[3, 2, 1, 0])).unwrap(), -1.0);
        assert!((rank_correlation(&id, &snap(&[0, 2, 1, 3])).unwrap() - 0.8).abs() < 1e-15);
        assert!(rank_correlation(&id, &snap(&[0, 1, 2, 4])).is_err());
    }

    #[test]
    fn default_k_values() {
        assert_eq!(default_k(32), 20);
        assert_eq!(default_k(4), 3);
    }

    struct Flat(usize);

    impl Predictor for Flat {
        fn logits(&self, tokens: &[u32]) -> Result<Tensor> {
            // Small deterministic jitter around uniform.
            let mut t = Tensor::zeros(&[tokens.len(), self.0]);
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = 1e-3 * ((i * 37 % 11) as f64 - 5.0);
            }
            Ok(t)
        }
    }

    struct Oracle;

    impl Predictor for Oracle {
        fn logits(&self, tokens: &[u32]) -> Result<Tensor> {
            // Copy task: position p predicts the token L+1 places earlier.
            let l = tokens.iter().position(|&t| t == 0).unwrap();
            let mut t = Tensor::zeros(&[tokens.len(), 16]);
            for p in l..tokens.len() {
                t.row_mut(p)[tokens[p - l] as usize] = 10.0;
            }
            Ok(t)
        }
    }

    #[test]
    fn evaluate_reference_predictors() {
        use crate::trainer::{make_dataset, TaskSpec};
        let spec = TaskSpec {
            vocab_size: 16,
            max_seq: 12,
        };
        let d = make_dataset("copy", 50, 4, spec).unwrap();
        let flat = evaluate(&Flat(16), &d.heldout).unwrap();
        assert!((flat.perplexity / 16.0 - 1.0).abs() < 0.02);
        assert_eq!(flat.perplexity, flat.loss.exp());
        let exact = evaluate(&Oracle, &d.heldout).unwrap();
        assert_eq!(exact.accuracy, 1.0);
        assert_eq!(exact, evaluate(&Oracle, &d.heldout).unwrap());
        assert!(evaluate(&Oracle, &[]).is_err());
    }

    #[test]
    fn param_report_counts() {
        let cfg = ModelConfig {
            n_layers: 32,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 8,
            max_seq: 8,
            lora_rank: 2,
            lora_alpha: 4.0,
        };
        let m = ModelState::build(&cfg, 0).unwrap();
        let same = param_report(&m, &m);
        assert_eq!(same.ratio, 0.0);
        let pruned = m.drop_layers(&(0..13).map(|i| i * 2 + 1).collect()).unwrap();
        let r = param_report(&m, &pruned);
        assert!((r.ratio - 13.0 / 32.0).abs() < 1e-15);
        assert_eq!(r.per_layer.iter().map(|x| x.1).sum::<usize>(), r.block_before);
        let kept: usize = r.per_layer.iter().filter(|x| x.2).map(|x| x.1).sum();
        assert_eq!(kept, r.block_after);
        assert_eq!(r.total_before - r.total_after, r.block_before - r.block_after);
    }
}

//! Turns final learnable-query predictions into a per-primitive panoptic map.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::drawing::{ClassVocab, STUFF_INSTANCE};
use crate::metrics::{Label, ScoredSymbol};

/// One predicted symbol with the query that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedSymbol {
    pub label: usize,
    pub instance: i64,
    pub members: Vec<usize>,
    /// Class probability times mean mask probability over the members.
    pub score: f64,
    pub queries: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PanopticOutput {
    /// Aligned with the drawing's primitives; `None` is background.
    pub labels: Vec<Label>,
    pub symbols: Vec<PredictedSymbol>,
}

impl PanopticOutput {
    pub fn scored_things(&self, vocab: &ClassVocab) -> Vec<ScoredSymbol> {
        self.symbols
            .iter()
            .filter(|s| vocab.is_thing(s.label))
            .map(|s| ScoredSymbol {
                label: s.label,
                members: s.members.clone(),
                score: s.score,
            })
            .collect()
    }
}

fn softmax(row: ndarray::ArrayView1<'_, f64>) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Keeps queries whose most likely class is a real class with probability at
/// least `tau_cls`, gives every primitive to the kept query maximizing
/// `class prob × mask prob`, and leaves it as background when that query's
/// mask probability is below `tau_mask`. Thing queries get fresh instance
/// ids in query order; stuff queries of one class share a single region.
pub fn panoptic_inference(
    class_logits: &Array2<f64>,
    mask_logits: &Array2<f64>,
    vocab: &ClassVocab,
    tau_cls: f64,
    tau_mask: f64,
) -> PanopticOutput {
    let (queries, n) = mask_logits.dim();
    let no_object = class_logits.ncols() - 1;
    let mut kept: Vec<(usize, usize, f64)> = Vec::new();
    for q in 0..queries {
        let probs = softmax(class_logits.row(q));
        let (best, p) = probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (c, &p)| if p > acc.1 { (c, p) } else { acc });
        if best != no_object && p >= tau_cls {
            kept.push((q, best, p));
        }
    }

    let mut owner: Vec<Option<usize>> = vec![None; n];
    for (j, slot) in owner.iter_mut().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (k, &(q, _, p)) in kept.iter().enumerate() {
            let s = p * sigmoid(mask_logits[[q, j]]);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((k, s));
            }
        }
        if let Some((k, _)) = best {
            if sigmoid(mask_logits[[kept[k].0, j]]) >= tau_mask {
                *slot = Some(k);
            }
        }
    }

    let mut symbols: Vec<PredictedSymbol> = Vec::new();
    let mut next_instance = 0i64;
    let mut prob_sums: Vec<f64> = Vec::new();
    for (k, &(q, class, p)) in kept.iter().enumerate() {
        let members: Vec<usize> = (0..n).filter(|&j| owner[j] == Some(k)).collect();
        if members.is_empty() {
            continue;
        }
        let mask_sum: f64 = members.iter().map(|&j| sigmoid(mask_logits[[q, j]])).sum();
        let existing = if vocab.is_thing(class) {
            None
        } else {
            symbols.iter().position(|s| s.label == class)
        };
        match existing {
            Some(i) => {
                let s = &mut symbols[i];
                s.members.extend(members);
                s.members.sort_unstable();
                s.queries.push(q);
                prob_sums[i] += p * mask_sum;
            }
            None => {
                let instance = if vocab.is_thing(class) {
                    next_instance += 1;
                    next_instance - 1
                } else {
                    STUFF_INSTANCE
                };
                symbols.push(PredictedSymbol {
                    label: class,
                    instance,
                    members,
                    score: 0.0,
                    queries: vec![q],
                });
                prob_sums.push(p * mask_sum);
            }
        }
    }
    let mut labels: Vec<Label> = vec![None; n];
    for (s, sum) in symbols.iter_mut().zip(prob_sums) {
        s.score = sum / s.members.len() as f64;
        for &j in &s.members {
            labels[j] = Some((s.label, s.instance));
        }
    }
    PanopticOutput { labels, symbols }
}

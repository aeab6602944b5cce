//! Set-prediction loss with deep supervision.
//!
//! Each decoder layer's learnable predictions are matched to ground truth
//! with the Hungarian solver on the weighted BCE + Dice + class cost, then
//! charged the same weighted terms; unmatched queries only receive the
//! no-object class term. Center queries skip matching: row `i` is always
//! charged against its own object. Layer losses are summed.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{bce_with_logit, sigmoid, Graph, Var};
use crate::decoder::{HeadOutput, LayerOutput};
use crate::error::{Error, Result};
use crate::matching::{hungarian, MatchResult};
use crate::pgt::GtObject;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub bce: f64,
    pub dice: f64,
    pub cls: f64,
    /// Class-loss weight of the no-object target.
    pub no_object: f64,
    /// Additive smoothing in the Dice numerator and denominator.
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            bce: 5.0,
            dice: 5.0,
            cls: 2.0,
            no_object: 0.1,
            dice_smooth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("bce", self.bce),
            ("dice", self.dice),
            ("cls", self.cls),
            ("no_object", self.no_object),
            ("dice_smooth", self.dice_smooth),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss.{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms summed over layers, plus the weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub dice: f64,
    pub cls: f64,
    pub aux_bce: f64,
    pub aux_dice: f64,
    pub aux_cls: f64,
    /// Weighted learnable-query loss `L_Q`.
    pub query: f64,
    /// Weighted center-query loss `L_aux`.
    pub aux: f64,
    pub total: f64,
}

pub fn dice_value(probs: &[f64], target: &[f64], smooth: f64) -> f64 {
    let inter: f64 = probs.iter().zip(target).map(|(p, y)| p * y).sum();
    let sp: f64 = probs.iter().sum();
    let sy: f64 = target.iter().sum();
    1.0 - (2.0 * inter + smooth) / (sp + sy + smooth)
}

fn softmax_row(row: ndarray::ArrayView1<'_, f64>) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Stacked binary masks of `objects` over `n` samples.
pub fn target_masks(objects: &[GtObject], n: usize) -> Array2<f64> {
    let mut m = Array2::zeros((objects.len(), n));
    for (g, obj) in objects.iter().enumerate() {
        for &i in &obj.members {
            m[[g, i]] = 1.0;
        }
    }
    m
}

/// `cost[q, g] = λ_bce·BCE + λ_dice·Dice − λ_cls·p_q(class_g)`.
pub fn match_cost(
    class_logits: &Array2<f64>,
    mask_logits: &Array2<f64>,
    objects: &[GtObject],
    cfg: &LossConfig,
) -> Array2<f64> {
    let (o, n) = mask_logits.dim();
    let targets = target_masks(objects, n);
    let mut cost = Array2::zeros((o, objects.len()));
    for q in 0..o {
        let logits = mask_logits.row(q);
        let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        let class_probs = softmax_row(class_logits.row(q));
        for (g, obj) in objects.iter().enumerate() {
            let y = targets.row(g);
            let bce = logits.iter().zip(y.iter()).map(|(z, t)| bce_with_logit(*z, *t)).sum::<f64>() / n.max(1) as f64;
            let dice = dice_value(&probs, y.as_slice().expect("row-major"), cfg.dice_smooth);
            cost[[q, g]] = cfg.bce * bce + cfg.dice * dice - cfg.cls * class_probs[obj.class];
        }
    }
    cost
}

/// Graph nodes of the three raw terms for one group of query rows.
pub struct Terms {
    pub bce: Var,
    pub dice: Var,
    pub cls: Var,
}

/// Loss terms of `head` given `(row, gt)` pairs; rows not paired get the
/// no-object class target.
pub fn group_terms(
    g: &mut Graph,
    head: HeadOutput,
    targets: &Array2<f64>,
    objects: &[GtObject],
    pairs: &[(usize, usize)],
    num_classes: usize,
    cfg: &LossConfig,
) -> Terms {
    let rows = g.shape(head.class_logits).0;
    let mut cls_target = vec![num_classes; rows];
    let mut cls_weight = vec![cfg.no_object; rows];
    for &(q, gt) in pairs {
        cls_target[q] = objects[gt].class;
        cls_weight[q] = 1.0;
    }
    let cls = g.cross_entropy(head.class_logits, &cls_target, &cls_weight);
    if pairs.is_empty() {
        let zero = g.constant(Array2::zeros((1, 1)));
        return Terms {
            bce: zero,
            dice: zero,
            cls,
        };
    }
    let k = pairs.len() as f64;
    let q_idx: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let g_idx: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let logits = g.gather_rows(head.mask_logits, &q_idx);
    let y = targets.select(Axis(0), &g_idx);

    let per_row = g.bce_logits_rows(logits, y.clone());
    let bce_sum = g.sum_all(per_row);
    let bce = g.scale(bce_sum, 1.0 / k);

    let probs = g.sigmoid(logits);
    let yv = g.constant(y.clone());
    let py = g.mul(probs, yv);
    let inter = g.sum_cols(py);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, cfg.dice_smooth);
    let sp = g.sum_cols(probs);
    let sy = g.constant(y.sum_axis(Axis(1)).insert_axis(Axis(1)) + cfg.dice_smooth);
    let den = g.add(sp, sy);
    let ratio = g.div(num, den);
    let ratio_sum = g.sum_all(ratio);
    let mean_ratio = g.scale(ratio_sum, -1.0 / k);
    let dice = g.add_scalar(mean_ratio, 1.0);
    Terms { bce, dice, cls }
}

fn weighted(g: &mut Graph, t: &Terms, cfg: &LossConfig) -> Var {
    let b = g.scale(t.bce, cfg.bce);
    let d = g.scale(t.dice, cfg.dice);
    let c = g.scale(t.cls, cfg.cls);
    let bd = g.add(b, d);
    g.add(bd, c)
}

pub struct LossOutput {
    pub total: Var,
    /// `L_Q` alone, as a graph node.
    pub query: Var,
    pub breakdown: LossBreakdown,
    /// Matching of each layer's learnable queries.
    pub matches: Vec<MatchResult>,
    /// Unweighted learnable mask BCE of each layer.
    pub layer_bce: Vec<f64>,
}

/// `L = L_Q + L_aux` over every emitted layer.
///
/// `center_gt[i]` is the object assigned to center row `i`.
pub fn loss_total(
    g: &mut Graph,
    outputs: &[LayerOutput],
    objects: &[GtObject],
    center_gt: &[usize],
    num_classes: usize,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    if outputs.is_empty() {
        return Err(Error::Contract("loss over zero decoder outputs".into()));
    }
    let n = g.shape(outputs[0].learnable.mask_logits).1;
    let targets = target_masks(objects, n);
    let mut breakdown = LossBreakdown::default();
    let mut matches = Vec::with_capacity(outputs.len());
    let mut query_parts = Vec::new();
    let mut aux_parts = Vec::new();
    let mut layer_bce = Vec::with_capacity(outputs.len());
    for out in outputs {
        let head = out.learnable;
        let cost = match_cost(g.value(head.class_logits), g.value(head.mask_logits), objects, cfg);
        let m = hungarian(&cost)?;
        let terms = group_terms(g, head, &targets, objects, &m.pairs, num_classes, cfg);
        layer_bce.push(g.scalar(terms.bce));
        breakdown.bce += g.scalar(terms.bce);
        breakdown.dice += g.scalar(terms.dice);
        breakdown.cls += g.scalar(terms.cls);
        query_parts.push(weighted(g, &terms, cfg));
        matches.push(m);

        if let Some(center) = out.center {
            if g.shape(center.class_logits).0 != center_gt.len() {
                return Err(Error::Contract("center rows and assignments disagree".into()));
            }
            if !center_gt.is_empty() {
                let pairs: Vec<(usize, usize)> = center_gt.iter().copied().enumerate().collect();
                let terms = group_terms(g, center, &targets, objects, &pairs, num_classes, cfg);
                breakdown.aux_bce += g.scalar(terms.bce);
                breakdown.aux_dice += g.scalar(terms.dice);
                breakdown.aux_cls += g.scalar(terms.cls);
                aux_parts.push(weighted(g, &terms, cfg));
            }
        }
    }
    let query = sum_vars(g, &query_parts);
    breakdown.query = g.scalar(query);
    let total = if aux_parts.is_empty() {
        query
    } else {
        let aux = sum_vars(g, &aux_parts);
        breakdown.aux = g.scalar(aux);
        g.add(query, aux)
    };
    breakdown.total = g.scalar(total);
    Ok(LossOutput {
        total,
        query,
        breakdown,
        matches,
        layer_bce,
    })
}

fn sum_vars(g: &mut Graph, parts: &[Var]) -> Var {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn object(class: usize, members: Vec<usize>) -> GtObject {
        GtObject {
            class,
            instance: 0,
            members,
            center: [0.5, 0.5],
            size: [0.1, 0.1],
        }
    }

    fn head(g: &mut Graph, class: Array2<f64>, mask: Array2<f64>) -> HeadOutput {
        HeadOutput {
            class_logits: g.input(class),
            mask_logits: g.input(mask),
        }
    }

    #[test]
    fn single_query_single_sample_by_hand() {
        let cfg = LossConfig {
            dice_smooth: 0.0,
            ..Default::default()
        };
        let z: f64 = 0.3;
        let p = 1.0 / (1.0 + (-z).exp());
        let mut g = Graph::new();
        let h = head(&mut g, array![[0.0, 0.0]], array![[z]]);
        let objs = [object(0, vec![0])];
        let t = group_terms(&mut g, h, &target_masks(&objs, 1), &objs, &[(0, 0)], 1, &cfg);
        let bce = -(p.ln());
        let dice = 1.0 - 2.0 * p / (p + 1.0);
        assert!((g.scalar(t.bce) - bce).abs() < 1e-9);
        assert!((g.scalar(t.dice) - dice).abs() < 1e-9);
        assert!((g.scalar(t.cls) - 2f64.ln()).abs() < 1e-9);

        // negative target for the bce half
        let mut g = Graph::new();
        let h = head(&mut g, array![[0.0, 0.0]], array![[z]]);
        let objs = [object(0, vec![])];
        let t = group_terms(&mut g, h, &target_masks(&objs, 1), &objs, &[(0, 0)], 1, &cfg);
        assert!((g.scalar(t.bce) + (1.0 - p).ln()).abs() < 1e-9);
    }

    #[test]
    fn smoothed_dice_by_hand() {
        let cfg = LossConfig::default();
        let probs = [0.2, 0.9, 0.5];
        let y = [0.0, 1.0, 1.0];
        let expected = 1.0 - (2.0 * 1.4 + 1.0) / (1.6 + 2.0 + 1.0);
        assert!((dice_value(&probs, &y, cfg.dice_smooth) - expected).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_prediction_has_zero_mask_loss() {
        let cfg = LossConfig::default();
        let mut g = Graph::new();
        let h = head(&mut g, array![[40.0, 0.0, 0.0]], array![[60.0, -60.0, 60.0]]);
        let objs = [object(0, vec![0, 2])];
        let t = group_terms(&mut g, h, &target_masks(&objs, 3), &objs, &[(0, 0)], 2, &cfg);
        assert!(g.scalar(t.bce) < 1e-20);
        assert!(g.scalar(t.dice) < 1e-20);
        assert!(g.scalar(t.cls) < 1e-15);
    }

    #[test]
    fn cost_matches_scalar_recomputation() {
        let cfg = LossConfig::default();
        let class = array![[0.2, -1.0, 0.4], [1.5, 0.3, -0.2]];
        let mask = array![[0.5, -2.0, 1.0], [-0.3, 0.8, 2.2]];
        let objs = [object(1, vec![1]), object(0, vec![0, 2])];
        let cost = match_cost(&class, &mask, &objs, &cfg);
        for q in 0..2 {
            let e: Vec<f64> = class.row(q).iter().map(|v| v.exp()).collect();
            let z: f64 = e.iter().sum();
            for (gi, obj) in objs.iter().enumerate() {
                let y: Vec<f64> = (0..3).map(|j| if obj.members.contains(&j) { 1.0 } else { 0.0 }).collect();
                let mut bce = 0.0;
                let mut inter = 0.0;
                let mut sp = 0.0;
                for j in 0..3 {
                    let p = 1.0 / (1.0 + (-mask[[q, j]]).exp());
                    bce -= y[j] * p.ln() + (1.0 - y[j]) * (1.0 - p).ln();
                    inter += p * y[j];
                    sp += p;
                }
                let sy: f64 = y.iter().sum();
                let dice = 1.0 - (2.0 * inter + 1.0) / (sp + sy + 1.0);
                let expected = 5.0 * bce / 3.0 + 5.0 * dice - 2.0 * e[obj.class] / z;
                assert!((cost[[q, gi]] - expected).abs() < 1e-9);
            }
        }
    }

    fn layer(g: &mut Graph, center: bool) -> LayerOutput {
        let learnable = head(
            g,
            array![[0.3, -0.2, 0.1], [0.0, 0.5, -0.4], [1.0, 0.2, 0.0]],
            array![[0.4, -1.0, 2.0, 0.1], [1.2, 0.3, -0.7, -2.0], [0.0, 0.9, 0.2, -0.3]],
        );
        let center = center.then(|| head(g, array![[0.2, 0.1, -0.3]], array![[1.0, -1.0, 0.5, 0.0]]));
        LayerOutput { learnable, center }
    }

    #[test]
    fn disabling_center_queries_leaves_query_loss_unchanged() {
        let cfg = LossConfig::default();
        let objs = [object(1, vec![0, 2]), object(0, vec![3])];
        let mut g1 = Graph::new();
        let outs: Vec<_> = (0..2).map(|_| layer(&mut g1, false)).collect();
        let a = loss_total(&mut g1, &outs, &objs, &[], 2, &cfg).unwrap();
        assert_eq!(a.breakdown.aux, 0.0);
        assert_eq!(a.breakdown.total, a.breakdown.query);
        let mut g2 = Graph::new();
        let outs: Vec<_> = (0..2).map(|_| layer(&mut g2, true)).collect();
        let b = loss_total(&mut g2, &outs, &objs, &[1], 2, &cfg).unwrap();
        assert_eq!(a.breakdown.query, b.breakdown.query);
        assert!(b.breakdown.aux > 0.0);
        assert_eq!(b.breakdown.total, b.breakdown.query + b.breakdown.aux);
    }

    #[test]
    fn empty_ground_truth_is_only_no_object_ce() {
        let cfg = LossConfig::default();
        let mut g = Graph::new();
        let outs = vec![layer(&mut g, false)];
        let out = loss_total(&mut g, &outs, &[], &[], 2, &cfg).unwrap();
        assert_eq!(out.breakdown.bce, 0.0);
        assert_eq!(out.breakdown.dice, 0.0);
        assert!((out.breakdown.total - cfg.cls * out.breakdown.cls).abs() < 1e-12);
        assert!(out.matches[0].pairs.is_empty());
    }

    #[test]
    fn deep_supervision_sums_layers() {
        let cfg = LossConfig::default();
        let objs = [object(1, vec![0, 2])];
        let mut g = Graph::new();
        let one = vec![layer(&mut g, false)];
        let single = loss_total(&mut g, &one, &objs, &[], 2, &cfg).unwrap().breakdown.total;
        let three: Vec<_> = (0..3).map(|_| layer(&mut g, false)).collect();
        let triple = loss_total(&mut g, &three, &objs, &[], 2, &cfg).unwrap().breakdown.total;
        assert!((triple - 3.0 * single).abs() < 1e-12);
    }

    #[test]
    fn too_many_objects_is_an_error() {
        let cfg = LossConfig::default();
        let objs: Vec<_> = (0..4).map(|i| object(0, vec![i])).collect();
        let mut g = Graph::new();
        let outs = vec![layer(&mut g, false)];
        assert!(matches!(
            loss_total(&mut g, &outs, &objs, &[], 2, &cfg),
            Err(Error::TooManyTargets { .. })
        ));
    }

    #[test]
    fn invalid_weights_rejected() {
        let cfg = LossConfig {
            dice: -1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}

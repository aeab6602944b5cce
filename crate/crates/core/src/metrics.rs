//! Panoptic, semantic and detection metrics over primitives.
//!
//! Every overlap is measured by primitive weight, normally `log(1 + L)` of
//! the primitive's arc length, so long primitives count more than short
//! ones without dominating.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::drawing::{BBox, ClassVocab, Drawing};
use crate::error::{Error, Result};

/// Primitive label as `(class, instance)`; `None` is background.
pub type Label = Option<(usize, i64)>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    #[default]
    LogLength,
    Length,
}

impl WeightMode {
    pub fn weights(self, drawing: &Drawing) -> Vec<f64> {
        match self {
            WeightMode::LogLength => drawing.log_lengths(),
            WeightMode::Length => drawing.samples().iter().map(|s| s.arc_length).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SymbolMask {
    pub label: usize,
    pub instance: i64,
    /// Sorted, distinct primitive indices.
    pub members: Vec<usize>,
    pub weight: f64,
}

impl SymbolMask {
    pub fn new(label: usize, instance: i64, mut members: Vec<usize>, weights: &[f64]) -> Result<Self> {
        members.sort_unstable();
        members.dedup();
        if members.is_empty() {
            return Err(Error::Contract(format!("symbol ({label}, {instance}) has no members")));
        }
        if let Some(&bad) = members.iter().find(|&&i| i >= weights.len()) {
            return Err(Error::Contract(format!("member {bad} out of range for {} primitives", weights.len())));
        }
        let weight = members.iter().map(|&i| weights[i]).sum();
        Ok(Self {
            label,
            instance,
            members,
            weight,
        })
    }
}

/// Groups per-primitive labels into symbols, ordered by `(class, instance)`.
pub fn symbols_from_labels(labels: &[Label], weights: &[f64]) -> Result<Vec<SymbolMask>> {
    let mut groups: BTreeMap<(usize, i64), Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        if let Some(key) = l {
            groups.entry(*key).or_default().push(i);
        }
    }
    groups
        .into_iter()
        .map(|((c, z), m)| SymbolMask::new(c, z, m, weights))
        .collect()
}

/// Weighted intersection over union of two member sets.
pub fn arc_iou(a: &SymbolMask, b: &SymbolMask, weights: &[f64]) -> f64 {
    let (mut i, mut j) = (0, 0);
    let mut inter = 0.0;
    while i < a.members.len() && j < b.members.len() {
        match a.members[i].cmp(&b.members[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += weights[a.members[i]];
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.weight + b.weight - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PqCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub iou_sum: f64,
}

impl PqCounts {
    pub fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    pub fn sq(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.iou_sum / self.tp as f64
        }
    }

    pub fn rq(&self) -> f64 {
        let den = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if den == 0.0 {
            0.0
        } else {
            self.tp as f64 / den
        }
    }

    pub fn pq(&self) -> f64 {
        self.sq() * self.rq()
    }

    fn merge(&mut self, other: &PqCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.iou_sum += other.iou_sum;
    }
}

fn check_unique(symbols: &[SymbolMask]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for s in symbols {
        if !seen.insert((s.label, s.instance)) {
            return Err(Error::DuplicateSymbol {
                label: s.label,
                instance: s.instance,
            });
        }
    }
    Ok(())
}

/// Per-class TP/FP/FN counts for one drawing. A prediction matches a ground
/// truth symbol of the same class when their IoU strictly exceeds
/// `threshold`; each ground truth is matched at most once.
pub fn panoptic_counts(
    preds: &[SymbolMask],
    gts: &[SymbolMask],
    weights: &[f64],
    num_classes: usize,
    threshold: f64,
) -> Result<Vec<PqCounts>> {
    check_unique(preds)?;
    check_unique(gts)?;
    for s in preds.iter().chain(gts) {
        if s.label >= num_classes {
            return Err(Error::ClassOutOfRange {
                id: s.label,
                classes: num_classes,
            });
        }
    }
    let mut counts = vec![PqCounts::default(); num_classes];
    let mut gt_used = vec![false; gts.len()];
    for p in preds {
        let hit = gts
            .iter()
            .enumerate()
            .filter(|(gi, g)| !gt_used[*gi] && g.label == p.label)
            .map(|(gi, g)| (gi, arc_iou(p, g, weights)))
            .find(|(_, iou)| *iou > threshold);
        match hit {
            Some((gi, iou)) => {
                gt_used[gi] = true;
                counts[p.label].tp += 1;
                counts[p.label].iou_sum += iou;
            }
            None => counts[p.label].fp += 1,
        }
    }
    for (g, used) in gts.iter().zip(&gt_used) {
        if !used {
            counts[g.label].fn_ += 1;
        }
    }
    Ok(counts)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    /// Classes averaged.
    pub classes: usize,
}

/// Mean PQ, SQ and RQ over classes with any TP, FP or FN.
pub fn aggregate(counts: &[PqCounts], include: impl Fn(usize) -> bool) -> Quality {
    let rows: Vec<&PqCounts> = counts
        .iter()
        .enumerate()
        .filter(|(c, k)| include(*c) && !k.is_empty())
        .map(|(_, k)| k)
        .collect();
    if rows.is_empty() {
        return Quality::default();
    }
    let n = rows.len() as f64;
    Quality {
        pq: rows.iter().map(|k| k.pq()).sum::<f64>() / n,
        sq: rows.iter().map(|k| k.sq()).sum::<f64>() / n,
        rq: rows.iter().map(|k| k.rq()).sum::<f64>() / n,
        classes: rows.len(),
    }
}

/// Weighted per-class confusion sums for F1 and IoU.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SemanticCounts {
    pub tp: Vec<f64>,
    pub fp: Vec<f64>,
    pub fn_: Vec<f64>,
}

impl SemanticCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            tp: vec![0.0; num_classes],
            fp: vec![0.0; num_classes],
            fn_: vec![0.0; num_classes],
        }
    }

    pub fn add(&mut self, pred: &[Option<usize>], gt: &[Option<usize>], weights: &[f64]) {
        for ((p, g), w) in pred.iter().zip(gt).zip(weights) {
            match (p, g) {
                (Some(p), Some(g)) if p == g => self.tp[*p] += w,
                _ => {
                    if let Some(p) = p {
                        self.fp[*p] += w;
                    }
                    if let Some(g) = g {
                        self.fn_[*g] += w;
                    }
                }
            }
        }
    }

    fn merge(&mut self, other: &SemanticCounts) {
        for c in 0..self.tp.len() {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
    }

    /// Micro-averaged F1 over non-background primitives.
    pub fn micro_f1(&self) -> f64 {
        let tp: f64 = self.tp.iter().sum();
        let fp: f64 = self.fp.iter().sum();
        let fn_: f64 = self.fn_.iter().sum();
        f1(tp, fp, fn_)
    }

    /// Mean per-class F1 over classes seen in prediction or ground truth.
    pub fn macro_f1(&self) -> f64 {
        let scores: Vec<f64> = (0..self.tp.len())
            .filter(|&c| self.tp[c] + self.fp[c] + self.fn_[c] > 0.0)
            .map(|c| f1(self.tp[c], self.fp[c], self.fn_[c]))
            .collect();
        mean_or_zero(&scores)
    }

    /// Mean per-class IoU `tp / (tp + fp + fn)` over classes seen anywhere.
    pub fn mean_iou(&self) -> f64 {
        let scores: Vec<f64> = (0..self.tp.len())
            .filter(|&c| self.tp[c] + self.fp[c] + self.fn_[c] > 0.0)
            .map(|c| self.tp[c] / (self.tp[c] + self.fp[c] + self.fn_[c]))
            .collect();
        mean_or_zero(&scores)
    }
}

fn f1(tp: f64, fp: f64, fn_: f64) -> f64 {
    let den = 2.0 * tp + fp + fn_;
    if den == 0.0 {
        0.0
    } else {
        2.0 * tp / den
    }
}

fn mean_or_zero(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// `(F1, wF1)` for aligned per-primitive labels: the first counts
/// primitives, the second weighs each by `weights`.
pub fn semantic_f1(pred: &[Option<usize>], gt: &[Option<usize>], weights: &[f64], num_classes: usize) -> (f64, f64) {
    let ones = vec![1.0; pred.len()];
    let mut plain = SemanticCounts::new(num_classes);
    plain.add(pred, gt, &ones);
    let mut weighted = SemanticCounts::new(num_classes);
    weighted.add(pred, gt, weights);
    (plain.micro_f1(), weighted.micro_f1())
}

/// Weighted mean IoU over classes for aligned per-primitive labels.
pub fn mean_iou(pred: &[Option<usize>], gt: &[Option<usize>], weights: &[f64], num_classes: usize) -> f64 {
    let mut c = SemanticCounts::new(num_classes);
    c.add(pred, gt, weights);
    c.mean_iou()
}

pub fn box_iou(a: BBox, b: BBox) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: BBox| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub label: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtBox {
    pub image: usize,
    pub label: usize,
    pub bbox: BBox,
}

pub const AP_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// 101-point interpolated average precision of one class at one threshold.
fn class_ap(dets: &[&Detection], gts: &[&GtBox], threshold: f64) -> f64 {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(dets.len());
    let mut recall = Vec::with_capacity(dets.len());
    for (rank, &d) in order.iter().enumerate() {
        let det = dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if used[gi] || gt.image != det.image {
                continue;
            }
            let iou = box_iou(det.bbox, gt.bbox);
            if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            used[gi] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / gts.len() as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r - 1e-12);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    total / 101.0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxAp {
    pub ap50: f64,
    pub ap75: f64,
    pub map: f64,
}

/// Box AP over the listed classes that have ground truth.
pub fn instance_box_ap(dets: &[Detection], gts: &[GtBox], classes: &[usize]) -> BoxAp {
    let per_threshold: Vec<f64> = AP_THRESHOLDS
        .iter()
        .map(|&t| {
            let scores: Vec<f64> = classes
                .iter()
                .filter_map(|&c| {
                    let g: Vec<&GtBox> = gts.iter().filter(|b| b.label == c).collect();
                    if g.is_empty() {
                        return None;
                    }
                    let d: Vec<&Detection> = dets.iter().filter(|b| b.label == c).collect();
                    Some(class_ap(&d, &g, t))
                })
                .collect();
            mean_or_zero(&scores)
        })
        .collect();
    BoxAp {
        ap50: per_threshold[0],
        ap75: per_threshold[5],
        map: mean_or_zero(&per_threshold),
    }
}

/// A predicted thing instance for detection scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSymbol {
    pub label: usize,
    pub members: Vec<usize>,
    pub score: f64,
}

/// Folds per-drawing results into a [`PanopticReport`].
#[derive(Clone, Debug)]
pub struct Evaluator {
    vocab: ClassVocab,
    mode: WeightMode,
    threshold: f64,
    pq: Vec<PqCounts>,
    semantic: SemanticCounts,
    semantic_plain: SemanticCounts,
    dets: Vec<Detection>,
    gt_boxes: Vec<GtBox>,
    drawings: usize,
}

impl Evaluator {
    pub fn new(vocab: &ClassVocab, mode: WeightMode) -> Self {
        let c = vocab.len();
        Self {
            vocab: vocab.clone(),
            mode,
            threshold: 0.5,
            pq: vec![PqCounts::default(); c],
            semantic: SemanticCounts::new(c),
            semantic_plain: SemanticCounts::new(c),
            dets: Vec::new(),
            gt_boxes: Vec::new(),
            drawings: 0,
        }
    }

    /// Adds one drawing. `pred` is aligned with the drawing's primitives;
    /// `scored` lists predicted thing instances with confidences.
    pub fn add(&mut self, drawing: &Drawing, pred: &[Label], scored: &[ScoredSymbol]) -> Result<()> {
        if pred.len() != drawing.len() {
            return Err(Error::Contract(format!(
                "{} predicted labels for {} primitives",
                pred.len(),
                drawing.len()
            )));
        }
        let c = self.vocab.len();
        let log_w = drawing.log_lengths();
        let gt: Vec<Label> = drawing.gt_labels().into_iter().map(Some).collect();
        let ps = symbols_from_labels(pred, &log_w)?;
        let gs = symbols_from_labels(&gt, &log_w)?;
        let counts = panoptic_counts(&ps, &gs, &log_w, c, self.threshold)?;
        for (acc, k) in self.pq.iter_mut().zip(&counts) {
            acc.merge(k);
        }

        let p_sem: Vec<Option<usize>> = pred.iter().map(|l| l.map(|x| x.0)).collect();
        let g_sem: Vec<Option<usize>> = gt.iter().map(|l| l.map(|x| x.0)).collect();
        let f1_w = self.mode.weights(drawing);
        let mut sem = SemanticCounts::new(c);
        sem.add(&p_sem, &g_sem, &f1_w);
        self.semantic.merge(&sem);
        let mut plain = SemanticCounts::new(c);
        plain.add(&p_sem, &g_sem, &vec![1.0; pred.len()]);
        self.semantic_plain.merge(&plain);

        let image = self.drawings;
        for s in scored {
            if self.vocab.is_thing(s.label) && !s.members.is_empty() {
                self.dets.push(Detection {
                    image,
                    label: s.label,
                    bbox: drawing.bbox_of(&s.members),
                    score: s.score,
                });
            }
        }
        for g in gs.iter().filter(|g| self.vocab.is_thing(g.label)) {
            self.gt_boxes.push(GtBox {
                image,
                label: g.label,
                bbox: drawing.bbox_of(&g.members),
            });
        }
        self.drawings += 1;
        Ok(())
    }

    /// Folds another evaluator's drawings in after this one's.
    pub fn merge(&mut self, other: Evaluator) {
        for (a, b) in self.pq.iter_mut().zip(&other.pq) {
            a.merge(b);
        }
        self.semantic.merge(&other.semantic);
        self.semantic_plain.merge(&other.semantic_plain);
        let offset = self.drawings;
        self.dets.extend(other.dets.into_iter().map(|mut d| {
            d.image += offset;
            d
        }));
        self.gt_boxes.extend(other.gt_boxes.into_iter().map(|mut g| {
            g.image += offset;
            g
        }));
        self.drawings += other.drawings;
    }

    pub fn finish(&self) -> PanopticReport {
        let vocab = &self.vocab;
        let classes = vocab
            .classes()
            .iter()
            .map(|info| {
                let k = self.pq[info.id];
                ClassRow {
                    id: info.id,
                    name: info.name.clone(),
                    is_thing: info.is_thing,
                    pq: k.pq(),
                    sq: k.sq(),
                    rq: k.rq(),
                    tp: k.tp,
                    fp: k.fp,
                    fn_: k.fn_,
                }
            })
            .collect();
        let things: Vec<usize> = vocab.thing_ids().collect();
        PanopticReport {
            drawings: self.drawings,
            weight_mode: self.mode,
            classes,
            total: aggregate(&self.pq, |_| true),
            thing: aggregate(&self.pq, |c| vocab.is_thing(c)),
            stuff: aggregate(&self.pq, |c| !vocab.is_thing(c)),
            f1: self.semantic_plain.micro_f1(),
            wf1: self.semantic.micro_f1(),
            macro_f1: self.semantic_plain.macro_f1(),
            miou: self.semantic.mean_iou(),
            boxes: instance_box_ap(&self.dets, &self.gt_boxes, &things),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub id: usize,
    pub name: String,
    pub is_thing: bool,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanopticReport {
    pub drawings: usize,
    pub weight_mode: WeightMode,
    pub classes: Vec<ClassRow>,
    pub total: Quality,
    pub thing: Quality,
    pub stuff: Quality,
    pub f1: f64,
    pub wf1: f64,
    pub macro_f1: f64,
    pub miou: f64,
    pub boxes: BoxAp,
}

impl PanopticReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned per-class table (percentages) followed by the aggregates.
    pub fn to_table(&self) -> String {
        let name_w = self.classes.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>5}  {:>6}  {:>6}  {:>6}  {:>5}  {:>5}  {:>5}",
            "class", "kind", "PQ", "RQ", "SQ", "TP", "FP", "FN"
        );
        for c in &self.classes {
            let _ = writeln!(
                out,
                "{:<name_w$}  {:>5}  {:>6.1}  {:>6.1}  {:>6.1}  {:>5}  {:>5}  {:>5}",
                c.name,
                if c.is_thing { "thing" } else { "stuff" },
                100.0 * c.pq,
                100.0 * c.rq,
                100.0 * c.sq,
                c.tp,
                c.fp,
                c.fn_
            );
        }
        let _ = writeln!(out);
        for (name, q) in [("total", self.total), ("thing", self.thing), ("stuff", self.stuff)] {
            let _ = writeln!(
                out,
                "{:<name_w$}  {:>5}  {:>6.1}  {:>6.1}  {:>6.1}",
                name,
                "",
                100.0 * q.pq,
                100.0 * q.rq,
                100.0 * q.sq
            );
        }
        let _ = writeln!(
            out,
            "\nF1 {:.1}  wF1 {:.1}  macro-F1 {:.1}  mIoU {:.1}  AP50 {:.1}  AP75 {:.1}  mAP {:.1}",
            100.0 * self.f1,
            100.0 * self.wf1,
            100.0 * self.macro_f1,
            100.0 * self.miou,
            100.0 * self.boxes.ap50,
            100.0 * self.boxes.ap75,
            100.0 * self.boxes.map
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::E;

    fn sym(label: usize, instance: i64, members: &[usize], w: &[f64]) -> SymbolMask {
        SymbolMask::new(label, instance, members.to_vec(), w).unwrap()
    }

    #[test]
    fn arc_iou_cases() {
        let w = [(E - 1.0).ln_1p(), (E - 1.0).ln_1p(), 2.0];
        let a = sym(0, 0, &[0, 1], &w);
        let b = sym(0, 1, &[0], &w);
        assert!((arc_iou(&a, &b, &w) - 0.5).abs() < 1e-12);
        assert_eq!(arc_iou(&a, &a, &w), 1.0);
        assert_eq!(arc_iou(&b, &sym(0, 2, &[2], &w), &w), 0.0);
    }

    #[test]
    fn empty_symbol_rejected() {
        assert!(SymbolMask::new(0, 0, vec![], &[1.0]).is_err());
        assert!(SymbolMask::new(0, 0, vec![3], &[1.0]).is_err());
    }

    #[test]
    fn duplicate_prediction_keys_rejected() {
        let w = [1.0, 1.0];
        let p = [sym(0, 0, &[0], &w), sym(0, 0, &[1], &w)];
        assert!(matches!(
            panoptic_counts(&p, &[], &w, 1, 0.5),
            Err(Error::DuplicateSymbol { label: 0, instance: 0 })
        ));
    }

    #[test]
    fn tp_with_fn_by_hand() {
        // pred covers 4 of the 5 unit-weight primitives of gt A; gt B is missed
        let w = vec![1.0; 8];
        let preds = [sym(1, 0, &[0, 1, 2, 3], &w)];
        let gts = [sym(1, 0, &[0, 1, 2, 3, 4], &w), sym(1, 1, &[6, 7], &w)];
        let k = panoptic_counts(&preds, &gts, &w, 2, 0.5).unwrap()[1];
        assert_eq!((k.tp, k.fp, k.fn_), (1, 0, 1));
        assert!((k.sq() - 0.8).abs() < 1e-12);
        assert!((k.rq() - 2.0 / 3.0).abs() < 1e-12);
        assert!((k.pq() - 0.8 * 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_exactly_half_is_not_a_match() {
        let w = vec![1.0; 3];
        let preds = [sym(0, 0, &[0, 1], &w)];
        let gts = [sym(0, 0, &[0], &w)];
        let k = panoptic_counts(&preds, &gts, &w, 1, 0.5).unwrap()[0];
        assert_eq!((k.tp, k.fp, k.fn_), (0, 1, 1));
    }

    #[test]
    fn f1_cases() {
        let gt = [Some(0), Some(1), Some(0), Some(1)];
        let w = [4.5, 4.5, 0.5, 0.5];
        let pred = [Some(0), Some(1), Some(1), Some(0)];
        let (f1, wf1) = semantic_f1(&pred, &gt, &w, 2);
        assert!((f1 - 0.5).abs() < 1e-12);
        assert!((wf1 - 0.9).abs() < 1e-12);
        assert_eq!(semantic_f1(&gt, &gt, &w, 2), (1.0, 1.0));
        let wrong = [Some(1), Some(0), Some(1), Some(0)];
        assert_eq!(semantic_f1(&wrong, &gt, &w, 2), (0.0, 0.0));
    }

    #[test]
    fn miou_cases() {
        let w = [1.0, 1.0, 1.0];
        let gt = [None, Some(0), Some(0)];
        let pred = [Some(0), Some(0), None];
        assert!((mean_iou(&pred, &gt, &w, 1) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(mean_iou(&gt, &gt, &w, 1), 1.0);
        assert_eq!(mean_iou(&[None, None, None], &gt, &w, 1), 0.0);
    }

    #[test]
    fn box_iou_by_hand() {
        assert!((box_iou([0.0, 0.0, 1.0, 1.0], [0.5, 0.0, 1.5, 1.0]) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(box_iou([0.0, 0.0, 1.0, 1.0], [2.0, 2.0, 3.0, 3.0]), 0.0);
    }

    #[test]
    fn ap_cases() {
        let gts = vec![
            GtBox { image: 0, label: 1, bbox: [0.0, 0.0, 1.0, 1.0] },
            GtBox { image: 0, label: 1, bbox: [2.0, 0.0, 3.0, 1.0] },
        ];
        let perfect: Vec<Detection> = gts
            .iter()
            .map(|g| Detection { image: 0, label: 1, bbox: g.bbox, score: 1.0 })
            .collect();
        assert_eq!(instance_box_ap(&perfect, &gts, &[1]), BoxAp { ap50: 1.0, ap75: 1.0, map: 1.0 });
        assert_eq!(instance_box_ap(&[], &gts, &[1]), BoxAp::default());

        // a confident false positive ahead of one of two hits:
        // precision 0, 1/2, 2/3 at recalls 0, .5, 1 → envelope 2/3 everywhere
        let mut dets = perfect.clone();
        dets.insert(0, Detection { image: 0, label: 1, bbox: [5.0, 5.0, 6.0, 6.0], score: 2.0 });
        let ap = instance_box_ap(&dets, &gts, &[1]);
        assert!((ap.ap50 - 2.0 / 3.0).abs() < 1e-12);

        // only half the gt found with one clean hit: recall ≤ 0.5 covers 51 of 101 points
        let ap = instance_box_ap(&perfect[..1], &gts, &[1]);
        assert!((ap.ap50 - 51.0 / 101.0).abs() < 1e-12);

        // box IoU 1/3 passes no threshold
        let shifted = [Detection { image: 0, label: 1, bbox: [0.5, 0.0, 1.5, 1.0], score: 1.0 }];
        assert_eq!(instance_box_ap(&shifted, &gts[..1], &[1]).map, 0.0);
    }

    fn brute_counts(preds: &[SymbolMask], gts: &[SymbolMask], w: &[f64], c: usize) -> Vec<PqCounts> {
        let mut counts = vec![PqCounts::default(); c];
        let mut pairs = Vec::new();
        for (pi, p) in preds.iter().enumerate() {
            for (gi, g) in gts.iter().enumerate() {
                let iou = arc_iou(p, g, w);
                if p.label == g.label && iou > 0.5 {
                    pairs.push((pi, gi, iou));
                }
            }
        }
        for (i, a) in pairs.iter().enumerate() {
            for b in &pairs[i + 1..] {
                assert!(a.0 != b.0 && a.1 != b.1, "IoU > 0.5 pairs must be unique");
            }
        }
        for &(pi, _, iou) in &pairs {
            counts[preds[pi].label].tp += 1;
            counts[preds[pi].label].iou_sum += iou;
        }
        for (pi, p) in preds.iter().enumerate() {
            if !pairs.iter().any(|x| x.0 == pi) {
                counts[p.label].fp += 1;
            }
        }
        for (gi, g) in gts.iter().enumerate() {
            if !pairs.iter().any(|x| x.1 == gi) {
                counts[g.label].fn_ += 1;
            }
        }
        counts
    }

    /// Random partition labels for `n` primitives into at most `k` symbols.
    fn partition(n: usize, k: usize, classes: usize, seed: u64, drop: bool) -> Vec<Label> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let keys: Vec<(usize, i64)> = (0..k).map(|i| (rng.random_range(0..classes), i as i64)).collect();
        (0..n)
            .map(|_| {
                if drop && rng.random_bool(0.15) {
                    None
                } else {
                    Some(keys[rng.random_range(0..k)])
                }
            })
            .collect()
    }

    proptest! {
        #[test]
        fn counts_match_brute_force(n in 1usize..30, kp in 1usize..=10, kg in 1usize..=10, seed in any::<u64>()) {
            let w: Vec<f64> = (0..n).map(|i| 0.2 + (i % 7) as f64 * 0.3).collect();
            let gt = symbols_from_labels(&partition(n, kg, 3, seed, false), &w).unwrap();
            let pr = symbols_from_labels(&partition(n, kp, 3, seed ^ 0x9e37, true), &w).unwrap();
            let got = panoptic_counts(&pr, &gt, &w, 3, 0.5).unwrap();
            prop_assert_eq!(got, brute_counts(&pr, &gt, &w, 3));
        }

        #[test]
        fn arc_iou_symmetric_and_bounded(n in 1usize..20, seed in any::<u64>()) {
            let w: Vec<f64> = (0..n).map(|i| 0.1 + i as f64).collect();
            let a = symbols_from_labels(&partition(n, 3, 1, seed, true), &w).unwrap();
            let b = symbols_from_labels(&partition(n, 3, 1, seed + 1, true), &w).unwrap();
            for x in &a {
                for y in &b {
                    let i1 = arc_iou(x, y, &w);
                    prop_assert!(i1 == arc_iou(y, x, &w));
                    prop_assert!((0.0..=1.0).contains(&i1));
                    prop_assert_eq!(i1 == 1.0, x.members == y.members);
                }
            }
        }

        #[test]
        fn factorization_and_fp_monotonicity(tp in 0usize..20, fp in 0usize..20, fn_ in 0usize..20, q in 0.5f64..1.0) {
            let k = PqCounts { tp, fp, fn_, iou_sum: q * tp as f64 };
            prop_assert!((k.pq() - k.sq() * k.rq()).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&k.pq()));
            let more = PqCounts { fp: fp + 1, ..k };
            prop_assert!(more.rq() <= k.rq());
        }
    }

    #[test]
    fn aggregate_skips_absent_classes() {
        let counts = [
            PqCounts { tp: 1, fp: 0, fn_: 0, iou_sum: 1.0 },
            PqCounts::default(),
            PqCounts { tp: 0, fp: 1, fn_: 0, iou_sum: 0.0 },
        ];
        let q = aggregate(&counts, |_| true);
        assert_eq!(q.classes, 2);
        assert!((q.pq - 0.5).abs() < 1e-12);
    }
}

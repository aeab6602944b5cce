//! Training loop, evaluation and prediction export.

use std::f64::consts::PI;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, Schedule};
use crate::drawing::{ClassVocab, Drawing};
use crate::error::{Error, Result};
use crate::inference::{panoptic_inference, PanopticOutput};
use crate::loss::{loss_total, LossBreakdown};
use crate::metrics::{arc_iou, Evaluator, PanopticReport, SymbolMask};
use crate::model::{Mode, Model};
use crate::params::AdamW;
use crate::pgt::{gt_objects, GtObject};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Headline numbers of an evaluation inside the epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_thing: f64,
    pub pq_stuff: f64,
    pub f1: f64,
    pub wf1: f64,
    pub query_recall: f64,
}

impl From<&Evaluation> for EvalSummary {
    fn from(e: &Evaluation) -> Self {
        let r = &e.report;
        Self {
            pq: r.total.pq,
            sq: r.total.sq,
            rq: r.total.rq,
            pq_thing: r.thing.pq,
            pq_stuff: r.stuff.pq,
            f1: r.f1,
            wf1: r.wf1,
            query_recall: e.query_recall,
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub lr: f64,
    /// Per-drawing mean of every loss term.
    pub loss: LossBreakdown,
    /// Per-drawing mean mask BCE of the last decoder layer's learnable queries.
    pub mask_bce: f64,
    /// Fraction of training objects some learnable query covers at IoU > 0.5.
    pub query_recall: f64,
    /// Mean gradient norm before clipping.
    pub grad_norm: f64,
    pub seconds: f64,
    pub eval: Option<EvalSummary>,
}

/// Objects hit by at least one binarized learnable mask, and the total.
pub fn recall_counts(mask_logits: &ndarray::Array2<f64>, objects: &[GtObject], weights: &[f64]) -> (usize, usize) {
    let preds: Vec<SymbolMask> = mask_logits
        .outer_iter()
        .filter_map(|row| {
            let members: Vec<usize> = (0..row.len()).filter(|&j| row[j] >= 0.0).collect();
            SymbolMask::new(0, 0, members, weights).ok()
        })
        .collect();
    let hit = objects
        .iter()
        .filter(|obj| {
            let gt = SymbolMask::new(0, 0, obj.members.clone(), weights).expect("objects are non-empty");
            preds.iter().any(|p| arc_iou(p, &gt, weights) > 0.5)
        })
        .count();
    (hit, objects.len())
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(config: &RunConfig, vocab: &ClassVocab) -> Result<Self> {
        let model = Model::new(config, vocab)?;
        let rng = model.training_rng();
        Ok(Self {
            optimizer: AdamW::new(config.optim.weight_decay),
            model,
            rng,
            epoch: 0,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            model: ck.model()?,
            optimizer: ck.optimizer.clone(),
            rng: ck.rng.clone(),
            epoch: ck.epoch,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, &self.optimizer, &self.rng, self.epoch)
    }

    fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.model.config.optim.batch_size).max(1)
    }

    /// Learning rate of optimizer step `step` (0-based) out of `total`.
    pub fn learning_rate(&self, step: u64, total: u64) -> f64 {
        let o = &self.model.config.optim;
        match o.schedule {
            Schedule::Constant => o.lr,
            Schedule::Cosine => {
                let t = (step as f64 / total.max(1) as f64).min(1.0);
                o.min_lr + 0.5 * (o.lr - o.min_lr) * (1.0 + (PI * t).cos())
            }
        }
    }

    /// One pass over `data` in a freshly shuffled order.
    pub fn train_epoch(&mut self, data: &[Drawing]) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        let start = Instant::now();
        let cfg = self.model.config.clone();
        let epoch = self.epoch + 1;
        let total_steps = (cfg.epochs * self.steps_per_epoch(data.len())) as u64;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);

        let mut sum = LossBreakdown::default();
        let mut mask_bce = 0.0;
        let (mut hits, mut objects) = (0usize, 0usize);
        let mut grad_norms = Vec::new();
        let mut lr = self.learning_rate(self.optimizer.step, total_steps);
        let num_classes = self.model.vocab.len();
        self.model.store.zero_grads();
        for (chunk_idx, chunk) in order.chunks(cfg.optim.batch_size).enumerate() {
            for &i in chunk {
                let drawing = &data[i];
                let mut g = Graph::new();
                let out = self.model.forward(&mut g, drawing, Mode::Train { rng: &mut self.rng })?;
                let loss = loss_total(&mut g, &out.outputs, &out.objects, &out.center_gt, num_classes, &cfg.loss)?;
                if !loss.breakdown.total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step: chunk_idx,
                    });
                }
                let grads = g.backward(loss.total);
                self.model.store.accumulate(&g, &grads);
                add_breakdown(&mut sum, &loss.breakdown);
                mask_bce += loss.layer_bce.last().copied().unwrap_or(0.0);
                let (h, t) = recall_counts(g.value(out.last().learnable.mask_logits), &out.objects, &drawing.log_lengths());
                hits += h;
                objects += t;
            }
            self.model.store.scale_grads(1.0 / chunk.len() as f64);
            let norm = self.model.store.grad_norm();
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: chunk_idx,
                });
            }
            grad_norms.push(norm);
            if cfg.optim.clip_norm > 0.0 && norm > cfg.optim.clip_norm {
                self.model.store.scale_grads(cfg.optim.clip_norm / norm);
            }
            lr = self.learning_rate(self.optimizer.step, total_steps);
            self.optimizer.update(&mut self.model.store, lr);
            self.model.store.zero_grads();
        }
        self.epoch = epoch;
        let n = data.len() as f64;
        scale_breakdown(&mut sum, 1.0 / n);
        Ok(EpochRecord {
            epoch,
            steps: self.optimizer.step,
            lr,
            loss: sum,
            mask_bce: mask_bce / n,
            query_recall: if objects == 0 { 0.0 } else { hits as f64 / objects as f64 },
            grad_norm: grad_norms.iter().sum::<f64>() / grad_norms.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
            eval: None,
        })
    }

    /// Trains until `config.epochs`, evaluating every `eval_every` epochs on
    /// `eval_data` (or the training set). With `output_dir`, appends one JSON
    /// line per epoch to the metrics log and rewrites the checkpoint after
    /// each successful epoch, so a divergence leaves the last good one.
    pub fn fit(
        &mut self,
        data: &[Drawing],
        eval_data: Option<&[Drawing]>,
        output_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<Vec<EpochRecord>> {
        if let Some(dir) = output_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let cfg = self.model.config.clone();
        let mut records = Vec::new();
        while self.epoch < cfg.epochs {
            let mut rec = self.train_epoch(data)?;
            let last = self.epoch == cfg.epochs;
            if cfg.eval_every > 0 && (self.epoch.is_multiple_of(cfg.eval_every) || last) {
                let ev = evaluate(&self.model, eval_data.unwrap_or(data), cfg.threads)?;
                rec.eval = Some(EvalSummary::from(&ev));
            }
            if let Some(dir) = output_dir {
                append_record(&dir.join(METRICS_FILE), &rec)?;
                self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
            }
            on_epoch(&rec);
            records.push(rec);
        }
        Ok(records)
    }
}

fn add_breakdown(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.bce += b.bce;
    acc.dice += b.dice;
    acc.cls += b.cls;
    acc.aux_bce += b.aux_bce;
    acc.aux_dice += b.aux_dice;
    acc.aux_cls += b.aux_cls;
    acc.query += b.query;
    acc.aux += b.aux;
    acc.total += b.total;
}

fn scale_breakdown(acc: &mut LossBreakdown, c: f64) {
    for v in [
        &mut acc.bce,
        &mut acc.dice,
        &mut acc.cls,
        &mut acc.aux_bce,
        &mut acc.aux_dice,
        &mut acc.aux_cls,
        &mut acc.query,
        &mut acc.aux,
        &mut acc.total,
    ] {
        *v *= c;
    }
}

fn append_record(path: &Path, rec: &EpochRecord) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(rec)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn worker_count(requested: usize, jobs: usize) -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let n = if requested == 0 { available } else { requested };
    n.clamp(1, jobs.max(1))
}

/// Applies `f` to every item on `threads` workers (0: all cores), keeping
/// the input order.
pub fn par_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let workers = worker_count(threads, items.len());
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(f).collect::<Result<Vec<U>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Inference on every drawing; outputs keep the input order.
pub fn predict_all(model: &Model, drawings: &[Drawing], threads: usize) -> Result<Vec<PanopticOutput>> {
    par_map(drawings, threads, |d| model.predict(d))
}

pub struct Evaluation {
    pub report: PanopticReport,
    pub outputs: Vec<PanopticOutput>,
    /// Query recall of the learnable queries on the evaluated drawings.
    pub query_recall: f64,
}

/// Full metric suite of `model` on `drawings`.
pub fn evaluate(model: &Model, drawings: &[Drawing], threads: usize) -> Result<Evaluation> {
    for d in drawings {
        if d.vocab != model.vocab {
            return Err(Error::VocabMismatch(format!(
                "drawing '{}' does not share the checkpoint's class vocabulary",
                d.id
            )));
        }
    }
    let cfg = &model.config.decoder;
    let per_drawing = par_map(drawings, threads, |d| {
        let mut g = Graph::new();
        let out = model.forward(&mut g, d, Mode::Eval)?;
        let last = out.last().learnable;
        let masks = g.value(last.mask_logits);
        let recall = recall_counts(masks, &gt_objects(d), &d.log_lengths());
        let pred = panoptic_inference(g.value(last.class_logits), masks, &model.vocab, cfg.tau_cls, cfg.tau_mask);
        Ok((pred, recall))
    })?;
    let mut ev = Evaluator::new(&model.vocab, model.config.data.f1_weighting);
    let (mut hits, mut total) = (0, 0);
    let mut outputs = Vec::with_capacity(drawings.len());
    for (d, (o, (h, t))) in drawings.iter().zip(per_drawing) {
        ev.add(d, &o.labels, &o.scored_things(&model.vocab))?;
        hits += h;
        total += t;
        outputs.push(o);
    }
    Ok(Evaluation {
        report: ev.finish(),
        outputs,
        query_recall: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
    })
}

/// Per-primitive prediction record for one drawing.
pub fn prediction_json(drawing: &Drawing, output: &PanopticOutput) -> serde_json::Value {
    let primitives: Vec<serde_json::Value> = drawing
        .primitives()
        .iter()
        .zip(&output.labels)
        .enumerate()
        .map(|(i, (p, l))| {
            json!({
                "index": i,
                "kind": p.kind.name(),
                "label": l.map(|x| x.0),
                "class": l.map(|x| drawing.vocab.name(x.0).to_string()),
                "instance": l.map(|x| x.1),
            })
        })
        .collect();
    let symbols: Vec<serde_json::Value> = output
        .symbols
        .iter()
        .map(|s| {
            json!({
                "label": s.label,
                "class": drawing.vocab.name(s.label),
                "instance": s.instance,
                "score": s.score,
                "members": s.members,
            })
        })
        .collect();
    json!({ "id": drawing.id, "primitives": primitives, "symbols": symbols })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drawing::synth::{generate_set, GeneratorSpec};

    pub fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.epochs = 2;
        c.backbone.dim = 16;
        c.backbone.levels = 3;
        c.decoder.layers = 2;
        c.decoder.heads = 2;
        c.decoder.num_queries = 12;
        c.lfe.hidden_dim = 16;
        c.optim.batch_size = 2;
        c.optim.lr = 1e-3;
        c
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let data = generate_set(0, 1, &GeneratorSpec::default()).unwrap();
        let t = Trainer::new(&tiny(), &data[0].vocab).unwrap();
        assert_eq!(t.learning_rate(0, 10), 1e-3);
        assert!((t.learning_rate(5, 10) - 5e-4).abs() < 1e-15);
        assert!(t.learning_rate(10, 10).abs() < 1e-15);
    }

    #[test]
    fn recall_counts_by_hand() {
        let objs = vec![
            GtObject { class: 1, instance: 0, members: vec![0, 1], center: [0.0; 2], size: [0.0; 2] },
            GtObject { class: 1, instance: 1, members: vec![2], center: [0.0; 2], size: [0.0; 2] },
        ];
        let masks = ndarray::array![[1.0, 1.0, -1.0], [-1.0, -1.0, -1.0]];
        assert_eq!(recall_counts(&masks, &objs, &[1.0, 1.0, 1.0]), (1, 2));
    }

    #[test]
    fn epochs_are_deterministic_and_logged() {
        let data = generate_set(4, 3, &GeneratorSpec::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut a = Trainer::new(&tiny(), &data[0].vocab).unwrap();
        let ra = a.fit(&data, None, Some(dir.path()), |_| {}).unwrap();
        let mut b = Trainer::new(&tiny(), &data[0].vocab).unwrap();
        let rb = b.fit(&data, None, None, |_| {}).unwrap();
        assert_eq!(ra.len(), 2);
        assert_eq!(ra[0].loss, rb[0].loss);
        assert_eq!(ra[1].loss, rb[1].loss);
        let log = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(log.lines().count(), 2);
        let ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(ck.epoch, 2);
        assert_eq!(ck.params, a.model.store.to_records());
    }

    #[test]
    fn evaluation_is_read_only_and_order_preserving() {
        let data = generate_set(6, 5, &GeneratorSpec::default()).unwrap();
        let model = Model::new(&tiny(), &data[0].vocab).unwrap();
        let before = serde_json::to_string(&model.store.to_records()).unwrap();
        let ev = evaluate(&model, &data, 3).unwrap();
        let (report, outs) = (ev.report, ev.outputs);
        let serial: Vec<_> = data.iter().map(|d| model.predict(d).unwrap()).collect();
        assert_eq!(outs, serial);
        assert_eq!(serde_json::to_string(&model.store.to_records()).unwrap(), before);
        assert!(report.total.pq.is_finite());
        for (d, o) in data.iter().zip(&outs) {
            let v = prediction_json(d, o);
            assert_eq!(v["primitives"].as_array().unwrap().len(), d.len());
        }
    }

    #[test]
    fn vocab_mismatch_is_reported() {
        let data = generate_set(6, 1, &GeneratorSpec::default()).unwrap();
        let other = crate::drawing::synth::synthetic_vocab(3).unwrap();
        let model = Model::new(&tiny(), &other).unwrap();
        assert!(matches!(evaluate(&model, &data, 1), Err(Error::VocabMismatch(_))));
    }

    #[test]
    fn nan_loss_aborts_and_keeps_last_checkpoint() {
        let data = generate_set(7, 2, &GeneratorSpec::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.epochs = 3;
        let mut t = Trainer::new(&cfg, &data[0].vocab).unwrap();
        t.train_epoch(&data).unwrap();
        t.checkpoint().save(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        let id = t.model.decoder.query_features;
        t.model.store.value_mut(id).fill(f64::NAN);
        let err = t.fit(&data, None, Some(dir.path()), |_| {}).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLogits { .. } | Error::Diverged { .. }));
        let ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(ck.epoch, 1);
        assert!(ck.params.values().all(|r| r.data.iter().all(|v| v.is_finite())));
    }
}

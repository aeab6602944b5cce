//! Query decoder with masked cross-attention.
//!
//! Each layer runs pre-norm cross-attention against one pyramid level, then
//! self-attention, then a feed-forward block, all residual. Cross-attention is
//! restricted to keys whose sample the query's previous mask prediction
//! covers (`sigmoid ≥ τ_mask`); a query whose mask covers nothing attends
//! everywhere. Class and mask heads are shared across layers and mask logits
//! are always taken against the enhanced finest level.
//!
//! Learnable and center queries travel as two separate matrices. Learnable
//! rows self-attend over learnable rows only, center rows over both, which is
//! the same computation as a joint attention with the leak-guard mask.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Var};
use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::params::{normal, LayerNorm, Linear, Mlp, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub num_queries: usize,
    pub tau_mask: f64,
    pub tau_cls: f64,
    /// Hidden width of the feed-forward block as a multiple of `D`.
    pub ffn_mult: usize,
    /// Emit (and supervise) the prediction made before the first layer.
    pub predict_initial: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            heads: 8,
            num_queries: 100,
            tau_mask: 0.5,
            tau_cls: 0.5,
            ffn_mult: 2,
            predict_initial: true,
        }
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    /// Returns the attended output and the per-head attention weights.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        key: Var,
        value: Var,
        blocked: Option<&Array2<bool>>,
    ) -> (Var, Vec<Var>) {
        let q = self.query.forward(g, store, query);
        let k = self.key.forward(g, store, key);
        let v = self.value.forward(g, store, value);
        let dim = g.shape(q).1;
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let w = g.softmax_rows(scores, blocked);
            outs.push(g.matmul(w, vh));
            weights.push(w);
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        (self.out.forward(g, store, joined), weights)
    }
}

/// Cross-attention blocking pattern from the previous mask logits.
///
/// `blocked[q, j]` is true when key `j` (sample `index_map[j]`) lies outside
/// query `q`'s predicted mask. Rows that would block every key are cleared.
pub fn attention_mask(mask_logits: &Array2<f64>, index_map: &[usize], tau: f64) -> Array2<bool> {
    let rows = mask_logits.nrows();
    let mut blocked = Array2::from_elem((rows, index_map.len()), false);
    for q in 0..rows {
        let mut all = true;
        for (j, &s) in index_map.iter().enumerate() {
            let b = sigmoid(mask_logits[[q, s]]) < tau;
            blocked[[q, j]] = b;
            all &= b;
        }
        if all {
            blocked.row_mut(q).fill(false);
        }
    }
    blocked
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub cross: Attention,
    pub self_attn: Attention,
    pub ffn: Mlp,
    pub norm_cross: LayerNorm,
    pub norm_self: LayerNorm,
    pub norm_ffn: LayerNorm,
}

impl DecoderLayer {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, cfg: &DecoderConfig, rng: &mut R) -> Self {
        Self {
            cross: Attention::new(store, &format!("{name}.cross"), dim, cfg.heads, rng),
            self_attn: Attention::new(store, &format!("{name}.self"), dim, cfg.heads, rng),
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[dim, cfg.ffn_mult.max(1) * dim, dim], rng),
            norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), dim),
            norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), dim),
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), dim),
        }
    }

    /// `X + cross(LN(X) + pos, keys + key_pos, keys)`.
    #[allow(clippy::too_many_arguments)]
    pub fn cross_step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        pos: Var,
        keys: Var,
        key_pos: Var,
        blocked: Option<&Array2<bool>>,
    ) -> Var {
        let h = self.norm_cross.forward(g, store, x);
        let q = g.add(h, pos);
        let k = g.add(keys, key_pos);
        let (a, _) = self.cross.forward(g, store, q, k, keys, blocked);
        g.add(x, a)
    }

    pub fn ffn_step(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.norm_ffn.forward(g, store, x);
        let f = self.ffn.forward(g, store, h);
        g.add(x, f)
    }
}

/// Class and mask predictions for one group of queries.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `rows × (C + 1)`, no-object last.
    pub class_logits: Var,
    /// `rows × N`.
    pub mask_logits: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    pub learnable: HeadOutput,
    pub center: Option<HeadOutput>,
}

/// Center queries for one forward pass.
#[derive(Clone, Debug)]
pub struct CenterInput {
    /// Class embeddings, `O_c × D`.
    pub features: Var,
    /// Encoded sampled centers, `O_c × D`.
    pub positions: Array2<f64>,
}

pub struct DecoderInput<'a> {
    pub pyramid: &'a FeaturePyramid,
    /// Positional encoding of every level's rows.
    pub key_positions: &'a [Array2<f64>],
    /// Enhanced finest-level features used for mask logits.
    pub mask_features: Var,
    pub center: Option<CenterInput>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub query_features: ParamId,
    pub query_positions: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
    pub class_head: Linear,
    pub mask_head: Mlp,
}

/// `M[q, j] = ⟨E[q], F[j]⟩`.
pub fn mask_logits(g: &mut Graph, embedding: Var, features: Var) -> Var {
    g.matmul_t(embedding, features)
}

/// Level used as keys by decoder layer `layer`: coarsest to finest, cycling,
/// skipping level 0 unless it is the only one.
pub fn level_schedule(layer: usize, num_levels: usize) -> usize {
    if num_levels <= 1 {
        0
    } else {
        num_levels - 1 - layer % (num_levels - 1)
    }
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        num_classes: usize,
        config: &DecoderConfig,
        rng: &mut R,
    ) -> Self {
        let query_features = store.add("decoder.query_feat", normal(config.num_queries, dim, 1.0, rng), false);
        let query_positions = store.add("decoder.query_pos", normal(config.num_queries, dim, 1.0, rng), false);
        let layers = (0..config.layers)
            .map(|i| DecoderLayer::new(store, &format!("decoder.layer{i}"), dim, config, rng))
            .collect();
        Self {
            config: config.clone(),
            query_features,
            query_positions,
            layers,
            final_norm: LayerNorm::new(store, "decoder.final_norm", dim),
            class_head: Linear::new(store, "decoder.class_head", dim, num_classes + 1, rng),
            mask_head: Mlp::new(store, "decoder.mask_head", &[dim, dim, dim], rng),
        }
    }

    pub fn predict_heads(&self, g: &mut Graph, store: &ParamStore, x: Var, mask_features: Var) -> HeadOutput {
        let h = self.final_norm.forward(g, store, x);
        let class_logits = self.class_head.forward(g, store, h);
        let embedding = self.mask_head.forward(g, store, h);
        HeadOutput {
            class_logits,
            mask_logits: mask_logits(g, embedding, mask_features),
        }
    }

    fn checked_heads(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask_features: Var,
        layer: usize,
    ) -> Result<HeadOutput> {
        let out = self.predict_heads(g, store, x, mask_features);
        let finite = g.value(out.class_logits).iter().all(|v| v.is_finite())
            && g.value(out.mask_logits).iter().all(|v| v.is_finite());
        if finite {
            Ok(out)
        } else {
            Err(Error::NonFiniteLogits { layer })
        }
    }

    /// Runs every layer; returns one prediction per layer, preceded by the
    /// initial prediction when `predict_initial` is set.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, input: &DecoderInput<'_>) -> Result<Vec<LayerOutput>> {
        let levels = &input.pyramid.levels;
        if input.key_positions.len() != levels.len() {
            return Err(Error::Contract(format!(
                "{} key position tables for {} pyramid levels",
                input.key_positions.len(),
                levels.len()
            )));
        }
        let mut xl = g.param(store, self.query_features);
        let pl = g.param(store, self.query_positions);
        let mut center = match &input.center {
            Some(c) => {
                if c.positions.nrows() != g.shape(c.features).0 {
                    return Err(Error::Contract("center features and positions disagree".into()));
                }
                let pos = g.constant(c.positions.clone());
                Some((c.features, pos))
            }
            None => None,
        };
        let key_pos: Vec<Var> = input.key_positions.iter().map(|p| g.constant(p.clone())).collect();

        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        let mut prev_l = self.checked_heads(g, store, xl, input.mask_features, 0)?;
        let mut prev_c = match center {
            Some((xc, _)) => Some(self.checked_heads(g, store, xc, input.mask_features, 0)?),
            None => None,
        };
        if self.config.predict_initial {
            outputs.push(LayerOutput {
                learnable: prev_l,
                center: prev_c,
            });
        }

        for (i, layer) in self.layers.iter().enumerate() {
            let r = level_schedule(i, levels.len());
            let level = &levels[r];
            let tau = self.config.tau_mask;

            let blocked = attention_mask(g.value(prev_l.mask_logits), &level.index_map, tau);
            xl = layer.cross_step(g, store, xl, pl, level.features, key_pos[r], Some(&blocked));
            if let (Some((xc, pc)), Some(prev)) = (center.as_mut(), prev_c) {
                let blocked = attention_mask(g.value(prev.mask_logits), &level.index_map, tau);
                *xc = layer.cross_step(g, store, *xc, *pc, level.features, key_pos[r], Some(&blocked));
            }

            let hl = layer.norm_self.forward(g, store, xl);
            let kl = g.add(hl, pl);
            if let Some((xc, pc)) = center.as_mut() {
                let hc = layer.norm_self.forward(g, store, *xc);
                let qc = g.add(hc, *pc);
                let keys = g.concat_rows(&[kl, qc]);
                let values = g.concat_rows(&[hl, hc]);
                let (a, _) = layer.self_attn.forward(g, store, qc, keys, values, None);
                *xc = g.add(*xc, a);
            }
            let (a, _) = layer.self_attn.forward(g, store, kl, kl, hl, None);
            xl = g.add(xl, a);

            xl = layer.ffn_step(g, store, xl);
            prev_l = self.checked_heads(g, store, xl, input.mask_features, i + 1)?;
            prev_c = match center.as_mut() {
                Some((xc, _)) => {
                    *xc = layer.ffn_step(g, store, *xc);
                    Some(self.checked_heads(g, store, *xc, input.mask_features, i + 1)?)
                }
                None => None,
            };
            outputs.push(LayerOutput {
                learnable: prev_l,
                center: prev_c,
            });
        }
        Ok(outputs)
    }
}

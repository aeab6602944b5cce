//! The full spotting model: backbone, layer enhancement, decoder and the
//! training-only center queries.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::backbone::{Backbone, FeaturePyramid};
use crate::config::RunConfig;
use crate::decoder::{CenterInput, Decoder, DecoderInput, LayerOutput};
use crate::drawing::{ClassVocab, Drawing};
use crate::error::{Error, Result};
use crate::inference::{panoptic_inference, PanopticOutput};
use crate::lfe::Lfe;
use crate::params::{ParamStore, TensorRecord};
use crate::pgt::{build_center_queries, gt_objects, ClassEmbedding, EncodingKind, GtObject, PositionalEncoder};

/// Name of the frozen Fourier frequency matrix in checkpoints.
pub const FOURIER_BUFFER: &str = "pgt.fourier_b";

/// Separates the frequency stream from the parameter stream.
const FOURIER_STREAM: u64 = 0x5eed_f00d;

pub enum Mode<'a> {
    /// Center queries are sampled from `rng` when position guidance is on.
    Train { rng: &'a mut ChaCha8Rng },
    Eval,
}

pub struct ForwardOutput {
    pub outputs: Vec<LayerOutput>,
    pub objects: Vec<GtObject>,
    /// Object index of each center row.
    pub center_gt: Vec<usize>,
}

impl ForwardOutput {
    pub fn last(&self) -> &LayerOutput {
        self.outputs.last().expect("decoder emits at least one prediction")
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub vocab: ClassVocab,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub lfe: Option<Lfe>,
    pub decoder: Decoder,
    pub class_embed: ClassEmbedding,
    pub encoder: PositionalEncoder,
}

impl Model {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: &RunConfig, vocab: &ClassVocab) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.backbone.dim;
        let backbone = Backbone::new(&mut store, &config.backbone, &mut rng);
        let lfe = config
            .lfe
            .enabled
            .then(|| Lfe::new(&mut store, d, &config.lfe, &mut rng));
        let decoder = Decoder::new(&mut store, d, vocab.len(), &config.decoder, &mut rng);
        let class_embed = ClassEmbedding::new(&mut store, vocab.len(), d, &mut rng);
        let mut freq_rng = ChaCha8Rng::seed_from_u64(config.seed ^ FOURIER_STREAM);
        let encoder = match config.pgt.encoding {
            EncodingKind::Fourier => PositionalEncoder::fourier(d, config.pgt.fourier_scale, &mut freq_rng),
            EncodingKind::Sine => PositionalEncoder::sine(d),
        };
        Ok(Self {
            config: config.clone(),
            vocab: vocab.clone(),
            store,
            backbone,
            lfe,
            decoder,
            class_embed,
            encoder,
        })
    }

    /// Non-trainable tensors saved alongside the parameters.
    pub fn buffers(&self) -> BTreeMap<String, TensorRecord> {
        let mut out = BTreeMap::new();
        if let PositionalEncoder::Fourier { frequencies } = &self.encoder {
            out.insert(FOURIER_BUFFER.to_string(), TensorRecord::from_array(frequencies));
        }
        out
    }

    pub fn load_buffers(&mut self, buffers: &BTreeMap<String, TensorRecord>) -> Result<()> {
        if let PositionalEncoder::Fourier { frequencies } = &mut self.encoder {
            let rec = buffers
                .get(FOURIER_BUFFER)
                .ok_or_else(|| Error::Checkpoint(format!("missing buffer {FOURIER_BUFFER}")))?;
            let arr = rec
                .to_array()
                .filter(|a| a.dim() == frequencies.dim())
                .ok_or_else(|| Error::Checkpoint(format!("buffer {FOURIER_BUFFER} has the wrong shape")))?;
            *frequencies = arr;
        }
        Ok(())
    }

    fn key_positions(&self, pyramid: &FeaturePyramid, drawing: &Drawing) -> Vec<Array2<f64>> {
        let positions = drawing.normalized_positions();
        pyramid
            .levels
            .iter()
            .map(|level| {
                let pts: Vec<_> = level.index_map.iter().map(|&i| positions[i]).collect();
                self.encoder.encode_many(&pts)
            })
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, drawing: &Drawing, mode: Mode<'_>) -> Result<ForwardOutput> {
        if drawing.is_empty() {
            return Err(Error::Contract(format!("drawing '{}' has no primitives", drawing.id)));
        }
        if drawing.vocab != self.vocab {
            return Err(Error::VocabMismatch(format!(
                "drawing '{}' uses a different class vocabulary",
                drawing.id
            )));
        }
        let store = &self.store;
        let raw = self.backbone.encode(g, store, drawing);
        let pyramid = match &self.lfe {
            Some(lfe) => lfe.enhance_pyramid(g, store, &raw, &drawing.layer_ids())?,
            None => raw,
        };
        let key_positions = self.key_positions(&pyramid, drawing);

        let mut objects = Vec::new();
        let mut center_gt = Vec::new();
        let center = match mode {
            Mode::Train { rng } => {
                objects = gt_objects(drawing);
                if self.config.pgt.enabled {
                    let specs = build_center_queries(
                        &objects,
                        &self.encoder,
                        self.config.pgt.epsilon,
                        self.config.pgt.max_center_queries,
                        rng,
                    );
                    if specs.is_empty() {
                        None
                    } else {
                        let labels: Vec<usize> = specs.iter().map(|s| s.class).collect();
                        let mut positions = Array2::zeros((specs.len(), self.encoder.dim()));
                        for (i, s) in specs.iter().enumerate() {
                            positions.row_mut(i).assign(&s.position);
                        }
                        center_gt = specs.iter().map(|s| s.gt_index).collect();
                        Some(CenterInput {
                            features: self.class_embed.lookup(g, store, &labels)?,
                            positions,
                        })
                    }
                } else {
                    None
                }
            }
            Mode::Eval => None,
        };

        let input = DecoderInput {
            pyramid: &pyramid,
            key_positions: &key_positions,
            mask_features: pyramid.finest(),
            center,
        };
        let outputs = self.decoder.decode(g, store, &input)?;
        Ok(ForwardOutput {
            outputs,
            objects,
            center_gt,
        })
    }

    /// Inference-mode prediction for one drawing.
    pub fn predict(&self, drawing: &Drawing) -> Result<PanopticOutput> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, drawing, Mode::Eval)?;
        let last = out.last().learnable;
        Ok(panoptic_inference(
            g.value(last.class_logits),
            g.value(last.mask_logits),
            &self.vocab,
            self.config.decoder.tau_cls,
            self.config.decoder.tau_mask,
        ))
    }

    /// Draws a fresh training rng from the run seed.
    pub fn training_rng(&self) -> ChaCha8Rng {
        let mut seed_rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        ChaCha8Rng::seed_from_u64(seed_rng.random::<u64>() ^ 0x7261_6e64)
    }
}

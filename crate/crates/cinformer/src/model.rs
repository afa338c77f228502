//! Full model assembly: CNN stem with FPN, injected transformer encoder,
//! UNet-style decoder, all driven by one dimension bundle.

use crate::attention::TopkVariant;
use crate::config::ConfigFile;
use crate::decoder::{decoder_forward, init_decoder, DecoderDims};
use crate::encoder::{encoder_forward, init_encoder, AttentionKind, EncoderDims, EncoderOutputs};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::{Bound, ParamInit, ParamStore};
use crate::real::Real;
use crate::rng::SeededRng;
use crate::stem::{init_stem, stem_forward, FeaturePyramid, StemDims};

#[derive(Debug, Clone)]
pub struct ModelDims {
    pub input_size: usize,
    pub num_classes: usize,
    pub freeze_stem: bool,
    pub stem: StemDims,
    pub encoder: EncoderDims,
    pub decoder: DecoderDims,
}

impl ModelDims {
    pub fn from_config(cfg: &ConfigFile) -> Result<ModelDims> {
        cfg.validate()?;
        let stem = cfg.model.stem_dims();
        let encoder = cfg.model.encoder_dims()?;
        encoder.validate()?;
        let decoder = cfg.model.decoder_dims(stem.stem_stride);
        Ok(ModelDims {
            input_size: cfg.model.input_size,
            num_classes: cfg.model.num_classes,
            freeze_stem: cfg.model.freeze_stem,
            stem,
            encoder,
            decoder,
        })
    }

    /// Tiny model for finite-difference gradient checks: 16x16 input with a
    /// stride-1 leading conv so the deepest stage still has a 2x2 token grid.
    pub fn micro() -> ModelDims {
        // stage-4 stem features are 1x1 spatial; widths keep every norm
        // group above one element there so activations never sit exactly on
        // the relu kink (which would break finite-difference checks)
        let stem = StemDims {
            widths: [4, 4, 12, 12],
            stem_stride: 1,
            fpn_width: 4,
        };
        let encoder = EncoderDims {
            stage_widths: [4, 8, 16, 32],
            stage_depths: [1, 1, 1, 1],
            kinds: [
                AttentionKind::Window,
                AttentionKind::Window,
                AttentionKind::Topk,
                AttentionKind::Topk,
            ],
            heads: 2,
            window: 2,
            k_tokens: 3,
            k_channels: 6,
            variant: TopkVariant::FullKey,
            inject: true,
            fpn_width: 4,
            mlp_expansion: 4,
        };
        let decoder = DecoderDims {
            stage_widths: encoder.stage_widths,
            num_classes: 2,
            head_upsample: stem.stem_stride * 2,
        };
        ModelDims {
            input_size: 16,
            num_classes: 2,
            freeze_stem: false,
            stem,
            encoder,
            decoder,
        }
    }
}

/// Initialize every parameter from one seeded stream, then apply freezing.
pub fn init_model<R: Real>(dims: &ModelDims, seed: u64) -> ParamStore<R> {
    let mut store = ParamStore::new();
    let mut rng = SeededRng::new(seed);
    {
        let mut init = ParamInit::new(&mut store, &mut rng);
        init_stem(&mut init, &dims.stem);
        init_encoder(&mut init, &dims.encoder);
        init_decoder(&mut init, &dims.decoder);
    }
    if dims.freeze_stem {
        store.set_trainable_prefix("stem.", false);
        store.set_trainable_prefix("fpn.", false);
    }
    store
}

pub struct ModelOutputs {
    pub logits: Var,
    pub pyramid: FeaturePyramid,
    pub encoder: EncoderOutputs,
}

/// Run the whole network: image [B,3,H,W] to logits [B,K,H,W].
pub fn forward<R: Real>(
    graph: &mut Graph<R>,
    bound: &Bound,
    image: Var,
    dims: &ModelDims,
) -> Result<ModelOutputs> {
    let pyramid = stem_forward(graph, bound, image, &dims.stem)?;
    let encoder = encoder_forward(graph, bound, &pyramid, &dims.encoder)?;
    let logits = decoder_forward(graph, bound, &encoder, &dims.decoder)?;
    Ok(ModelOutputs {
        logits,
        pyramid,
        encoder,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Tensor;

    fn random_image<R: Real>(g: &mut Graph<R>, b: usize, side: usize, seed: u64) -> Var {
        let mut rng = SeededRng::new(seed);
        let data: Vec<R> = (0..b * 3 * side * side)
            .map(|_| R::from_f64(rng.uniform(0.0, 1.0)))
            .collect();
        g.constant(Tensor::new(vec![b, 3, side, side], data).unwrap())
    }

    #[test]
    fn default_config_forward_shapes() {
        let mut cfg = ConfigFile::default();
        // shrink widths for test speed; geometry contract is unchanged
        cfg.model.stem_widths = [4, 8, 8, 16];
        cfg.model.fpn_width = 8;
        cfg.model.stage_widths = [8, 16, 32, 64];
        cfg.model.stage_depths = [1, 1, 1, 1];
        cfg.model.attention.heads = 2;
        cfg.model.attention.window = 2;
        let dims = ModelDims::from_config(&cfg).unwrap();
        let store: ParamStore<f32> = init_model(&dims, 11);
        let mut g: Graph<f32> = Graph::new();
        let bound = Bound::bind(&mut g, &store);
        let img = random_image(&mut g, 1, 64, 1);
        let out = forward(&mut g, &bound, img, &dims).unwrap();
        assert_eq!(g.shape(out.logits), &[1, 4, 64, 64]);
        assert!(out.encoder.selections[2].is_some());
    }

    #[test]
    fn micro_model_forward_shapes() {
        let dims = ModelDims::micro();
        let store: ParamStore<f64> = init_model(&dims, 3);
        let mut g: Graph<f64> = Graph::new();
        let bound = Bound::bind(&mut g, &store);
        let img = random_image(&mut g, 1, 16, 2);
        let out = forward(&mut g, &bound, img, &dims).unwrap();
        assert_eq!(g.shape(out.logits), &[1, 2, 16, 16]);
        // stage grids at 16x16 input with a stride-1 stem: 8,4,2,1
        assert_eq!(g.shape(out.encoder.stages[0].values), &[1, 64, 4]);
        assert_eq!(g.shape(out.encoder.stages[3].values), &[1, 1, 32]);
    }

    #[test]
    fn freeze_stem_marks_stem_and_fpn_untrainable() {
        let mut cfg = ConfigFile::default();
        cfg.model.freeze_stem = true;
        cfg.model.stem_widths = [4, 4, 8, 8];
        cfg.model.fpn_width = 4;
        cfg.model.stage_widths = [4, 8, 16, 32];
        cfg.model.stage_depths = [1, 1, 1, 1];
        cfg.model.attention.heads = 2;
        let dims = ModelDims::from_config(&cfg).unwrap();
        let store: ParamStore<f32> = init_model(&dims, 1);
        for (path, p) in store.iter() {
            let frozen = path.starts_with("stem.") || path.starts_with("fpn.");
            assert_eq!(p.trainable, !frozen, "{path}");
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let dims = ModelDims::micro();
        let a: ParamStore<f32> = init_model(&dims, 9);
        let b: ParamStore<f32> = init_model(&dims, 9);
        for ((pa, ta), (pb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(pa, pb);
            assert_eq!(ta.tensor.data, tb.tensor.data);
        }
    }
}

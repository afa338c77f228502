//! UNet-style decoder: fuse encoder skips top-down, then a 1x1 head and a
//! final bilinear upsample back to input resolution.

use crate::attention::tokens_to_image;
use crate::encoder::EncoderOutputs;
use crate::error::Result;
use crate::graph::{Graph, UpsampleMode, Var};
use crate::nn::{conv, groupnorm_affine, Bound, ParamInit};
use crate::real::Real;

#[derive(Debug, Clone)]
pub struct DecoderDims {
    pub stage_widths: [usize; 4],
    pub num_classes: usize,
    /// Stride of the finest encoder stage; the head upsamples by this factor.
    pub head_upsample: usize,
}

pub fn init_decoder<R: Real>(init: &mut ParamInit<'_, R>, dims: &DecoderDims) {
    for i in (1..=3).rev() {
        let cin = dims.stage_widths[i] + dims.stage_widths[i - 1];
        let c = dims.stage_widths[i - 1];
        init.conv(&format!("decoder.stage{i}.conv1"), c, cin, 3, true);
        init.norm_chw(&format!("decoder.stage{i}.norm1"), c);
        init.conv(&format!("decoder.stage{i}.conv2"), c, c, 3, true);
        init.norm_chw(&format!("decoder.stage{i}.norm2"), c);
    }
    init.conv("decoder.head", dims.num_classes, dims.stage_widths[0], 1, true);
}

fn conv_block<R: Real>(
    graph: &mut Graph<R>,
    bound: &Bound,
    path: &str,
    x: Var,
) -> Result<Var> {
    let h = conv(graph, bound, &format!("{path}.conv1"), x, 1, 1)?;
    let h = groupnorm_affine(graph, bound, &format!("{path}.norm1"), h)?;
    let h = graph.relu(h)?;
    let h = conv(graph, bound, &format!("{path}.conv2"), h, 1, 1)?;
    let h = groupnorm_affine(graph, bound, &format!("{path}.norm2"), h)?;
    graph.relu(h)
}

/// Per-pixel class logits at input resolution.
pub fn decoder_forward<R: Real>(
    graph: &mut Graph<R>,
    bound: &Bound,
    enc: &EncoderOutputs,
    dims: &DecoderDims,
) -> Result<Var> {
    let mut d = tokens_to_image(graph, &enc.stages[3])?;
    for i in (1..=3).rev() {
        let up = graph.upsample(d, 2, UpsampleMode::Bilinear)?;
        let skip = tokens_to_image(graph, &enc.stages[i - 1])?;
        let cat = graph.concat(&[up, skip], 1)?;
        d = conv_block(graph, bound, &format!("decoder.stage{i}"), cat)?;
    }
    let logits = conv(graph, bound, "decoder.head", d, 1, 0)?;
    if dims.head_upsample > 1 {
        graph.upsample(logits, dims.head_upsample, UpsampleMode::Bilinear)
    } else {
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::TokenMap;
    use crate::graph::Tensor;
    use crate::nn::ParamStore;
    use crate::rng::SeededRng;

    fn outputs(g: &mut Graph<f64>, widths: &[usize; 4], base: usize, rng: &mut SeededRng) -> EncoderOutputs {
        let mut stages = Vec::new();
        for i in 0..4 {
            let side = base >> i;
            let n = side * side;
            let data: Vec<f64> = (0..n * widths[i]).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let v = g.constant(Tensor::new(vec![1, n, widths[i]], data).unwrap());
            stages.push(TokenMap::new(g, v, side, side).unwrap());
        }
        EncoderOutputs {
            stages: [stages[0], stages[1], stages[2], stages[3]],
            selections: [None, None, None, None],
        }
    }

    fn dims() -> DecoderDims {
        DecoderDims {
            stage_widths: [8, 16, 32, 64],
            num_classes: 4,
            head_upsample: 4,
        }
    }

    fn store(d: &DecoderDims, seed: u64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut rng = SeededRng::new(seed);
        let mut init = ParamInit::new(&mut s, &mut rng);
        init_decoder(&mut init, d);
        s
    }

    #[test]
    fn logits_shape_matches_input_extent() {
        let d = dims();
        let s = store(&d, 1);
        let mut g: Graph<f64> = Graph::new();
        let bound = Bound::bind(&mut g, &s);
        let mut rng = SeededRng::new(2);
        let enc = outputs(&mut g, &d.stage_widths, 8, &mut rng);
        let logits = decoder_forward(&mut g, &bound, &enc, &d).unwrap();
        assert_eq!(g.shape(logits), &[1, 4, 32, 32]);
    }

    #[test]
    fn zero_head_weights_give_zero_logits() {
        let d = dims();
        let mut s = store(&d, 1);
        s.get_mut("decoder.head.weight")
            .unwrap()
            .tensor
            .data
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let mut g: Graph<f64> = Graph::new();
        let bound = Bound::bind(&mut g, &s);
        let mut rng = SeededRng::new(2);
        let enc = outputs(&mut g, &d.stage_widths, 8, &mut rng);
        let logits = decoder_forward(&mut g, &bound, &enc, &d).unwrap();
        assert!(g.value(logits).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn every_stage_influences_logits() {
        let d = dims();
        let s = store(&d, 3);
        let base_run = |zero_stage: Option<usize>| {
            let mut g: Graph<f64> = Graph::new();
            let bound = Bound::bind(&mut g, &s);
            let mut rng = SeededRng::new(4);
            let mut enc = outputs(&mut g, &d.stage_widths, 8, &mut rng);
            if let Some(i) = zero_stage {
                let shape = g.shape(enc.stages[i].values).to_vec();
                let z = g.constant(Tensor::zeros(&shape));
                enc.stages[i] =
                    TokenMap::new(&g, z, enc.stages[i].h, enc.stages[i].w).unwrap();
            }
            let logits = decoder_forward(&mut g, &bound, &enc, &d).unwrap();
            g.value(logits).data.clone()
        };
        let reference = base_run(None);
        for i in 0..4 {
            assert_ne!(reference, base_run(Some(i)), "stage {i} has no influence");
        }
    }
}

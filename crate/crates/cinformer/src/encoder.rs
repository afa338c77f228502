//! Four-stage transformer encoder with one-way CNN feature injection,
//! patch merging, and per-stage attention kind.

use crate::attention::{
    image_to_tokens, init_topk_attention, init_window_attention, topk_attention,
    window_attention, TokenMap, TopKSelection, TopkConfig, TopkVariant,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{conv, layernorm_affine, linear, Bound, ParamInit};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Window,
    Topk,
}

/// Encoder geometry and attention configuration.
#[derive(Debug, Clone)]
pub struct EncoderDims {
    pub stage_widths: [usize; 4],
    pub stage_depths: [usize; 4],
    pub kinds: [AttentionKind; 4],
    pub heads: usize,
    pub window: usize,
    pub k_tokens: usize,
    pub k_channels: usize,
    pub variant: TopkVariant,
    pub inject: bool,
    pub fpn_width: usize,
    pub mlp_expansion: usize,
}

impl EncoderDims {
    pub fn validate(&self) -> Result<()> {
        for i in 1..4 {
            if self.stage_widths[i] != 2 * self.stage_widths[i - 1] {
                return Err(Error::Config(format!(
                    "stage widths must double: {:?}",
                    self.stage_widths
                )));
            }
        }
        for (i, &w) in self.stage_widths.iter().enumerate() {
            if self.kinds[i] == AttentionKind::Window && w % self.heads != 0 {
                return Err(Error::Config(format!(
                    "stage {} width {} not divisible by {} heads",
                    i + 1,
                    w,
                    self.heads
                )));
            }
        }
        Ok(())
    }
}

/// Encoder stage outputs, with the Top-K selection of each stage's last
/// Top-K block (for feature dumps).
pub struct EncoderOutputs {
    pub stages: [TokenMap; 4],
    pub selections: [Option<Vec<TopKSelection>>; 4],
}

pub fn init_encoder<R: Real>(init: &mut ParamInit<'_, R>, dims: &EncoderDims) {
    init.linear(
        "encoder.stage1.embed",
        dims.fpn_width,
        dims.stage_widths[0],
        true,
    );
    for i in 2..=4 {
        let c_prev = dims.stage_widths[i - 2];
        let c = dims.stage_widths[i - 1];
        init.norm(&format!("encoder.stage{i}.merge.norm"), 4 * c_prev);
        init.linear(&format!("encoder.stage{i}.merge.linear"), 4 * c_prev, c, false);
        if dims.inject {
            init.conv(
                &format!("encoder.stage{i}.inject.conv"),
                dims.fpn_width,
                dims.fpn_width,
                1,
                true,
            );
            init.linear(
                &format!("encoder.stage{i}.inject.linear"),
                c + dims.fpn_width,
                c,
                true,
            );
        }
    }
    for i in 1..=4 {
        let c = dims.stage_widths[i - 1];
        for j in 0..dims.stage_depths[i - 1] {
            let path = format!("encoder.stage{i}.block{j}");
            init.norm(&format!("{path}.ln1"), c);
            match dims.kinds[i - 1] {
                AttentionKind::Window => init_window_attention(init, &format!("{path}.attn"), c),
                AttentionKind::Topk => init_topk_attention(init, &format!("{path}.attn"), c),
            }
            init.norm(&format!("{path}.ln2"), c);
            init.linear(&format!("{path}.mlp.fc1"), c, dims.mlp_expansion * c, true);
            init.linear(&format!("{path}.mlp.fc2"), dims.mlp_expansion * c, c, true);
        }
    }
}

/// Fuse CNN feature r_i into the incoming token map: 1x1 conv, reshape to
/// tokens, channel concat, linear projection back to the stage width. The
/// fusion is one-way; nothing is written back into the CNN path.
pub fn inject<R: Real>(
    graph: &mut Graph<R>,
    bound: &Bound,
    path: &str,
    s_prev: &TokenMap,
    r_i: Var,
) -> Result<TokenMap> {
    let rs = graph.shape(r_i).to_vec();
    if rs.len() != 4 || rs[2] != s_prev.h || rs[3] != s_prev.w {
        return Err(Error::Dimension(format!(
            "injected feature {:?} does not match {}x{} token grid",
            rs, s_prev.h, s_prev.w
        )));
    }
    let adjusted = conv(graph, bound, &format!("{path}.conv"), r_i, 1, 0)?;
    let r_tokens = image_to_tokens(graph, adjusted)?;
    let cat = graph.concat(&[s_prev.values, r_tokens.values], 2)?;
    let fused = linear(graph, bound, &format!("{path}.linear"), cat)?;
    TokenMap::new(graph, fused, s_prev.h, s_prev.w)
}

/// 2x2 token-neighborhood concat, layernorm, linear to double width.
pub fn patch_merge<R: Real>(
    graph: &mut Graph<R>,
    bound: &Bound,
    path: &str,
    tm: &TokenMap,
) -> Result<TokenMap> {
    if tm.h % 2 != 0 || tm.w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "patch merge needs even token grid, got {}x{}",
            tm.h, tm.w
        )));
    }
    let (h2, w2) = (tm.h / 2, tm.w / 2);
    let mut parts = Vec::with_capacity(4);
    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let idx: Vec<usize> = (0..h2)
            .flat_map(|y| (0..w2).map(move |x| (2 * y + dy) * tm.w + 2 * x + dx))
            .collect();
        parts.push(graph.index_select(tm.values, 1, &idx)?);
    }
    let cat = graph.concat(&parts, 2)?;
    let normed = layernorm_affine(graph, bound, &format!("{path}.norm"), cat)?;
    let merged = linear(graph, bound, &format!("{path}.linear"), normed)?;
    TokenMap::new(graph, merged, h2, w2)
}

/// Pre-norm transformer block: x + Attn(LN(x)); x + MLP(LN(x)).
/// Returns the output map and, for Top-K blocks, the per-sample selection.
pub fn transformer_block<R: Real>(
    graph: &mut Graph<R>,
    bound: &Bound,
    path: &str,
    tm: &TokenMap,
    dims: &EncoderDims,
    kind: AttentionKind,
) -> Result<(TokenMap, Option<Vec<TopKSelection>>)> {
    let normed = layernorm_affine(graph, bound, &format!("{path}.ln1"), tm.values)?;
    let normed_tm = TokenMap::new(graph, normed, tm.h, tm.w)?;
    let (update, selection) = match kind {
        AttentionKind::Window => (
            window_attention(
                graph,
                bound,
                &format!("{path}.attn"),
                &normed_tm,
                dims.heads,
                dims.window,
            )?,
            None,
        ),
        AttentionKind::Topk => {
            let shape = graph.shape(tm.values);
            let (n, c) = (shape[1], shape[2]);
            let cfg = TopkConfig {
                k_tokens: dims.k_tokens.min(n),
                k_channels: dims.k_channels.min(c),
                variant: dims.variant,
                ac_override_one: false,
            };
            let (update, selection) =
                topk_attention(graph, bound, &format!("{path}.attn"), &normed_tm, &cfg)?;
            (update, Some(selection))
        }
    };
    let x = graph.add(tm.values, update)?;
    let normed2 = layernorm_affine(graph, bound, &format!("{path}.ln2"), x)?;
    let h = linear(graph, bound, &format!("{path}.mlp.fc1"), normed2)?;
    let h = graph.gelu(h)?;
    let h = linear(graph, bound, &format!("{path}.mlp.fc2"), h)?;
    let out = graph.add(x, h)?;
    let out_tm = TokenMap::new(graph, out, tm.h, tm.w)?;
    Ok((out_tm, selection))
}

/// Run the four encoder stages over a feature pyramid.
pub fn encoder_forward<R: Real>(
    graph: &mut Graph<R>,
    bound: &Bound,
    pyramid: &crate::stem::FeaturePyramid,
    dims: &EncoderDims,
) -> Result<EncoderOutputs> {
    dims.validate()?;
    let r1 = pyramid.r[0];
    let r1_tokens = image_to_tokens(graph, r1)?;
    let embedded = linear(graph, bound, "encoder.stage1.embed", r1_tokens.values)?;
    let mut tm = TokenMap::new(graph, embedded, r1_tokens.h, r1_tokens.w)?;

    let mut stages: Vec<TokenMap> = Vec::with_capacity(4);
    let mut selections: [Option<Vec<TopKSelection>>; 4] = [None, None, None, None];
    for i in 1..=4 {
        if i > 1 {
            tm = patch_merge(graph, bound, &format!("encoder.stage{i}.merge"), &tm)?;
            if dims.inject {
                tm = inject(
                    graph,
                    bound,
                    &format!("encoder.stage{i}.inject"),
                    &tm,
                    pyramid.r[i - 1],
                )?;
            }
        }
        for j in 0..dims.stage_depths[i - 1] {
            let (next, sel) = transformer_block(
                graph,
                bound,
                &format!("encoder.stage{i}.block{j}"),
                &tm,
                dims,
                dims.kinds[i - 1],
            )?;
            tm = next;
            if sel.is_some() {
                selections[i - 1] = sel;
            }
        }
        stages.push(tm);
    }
    Ok(EncoderOutputs {
        stages: [stages[0], stages[1], stages[2], stages[3]],
        selections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Tensor;
    use crate::nn::{ParamStore, ParamInit};
    use crate::rng::SeededRng;
    use crate::stem::FeaturePyramid;

    fn dims(inject: bool) -> EncoderDims {
        EncoderDims {
            stage_widths: [8, 16, 32, 64],
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
            k_channels: 8,
            variant: TopkVariant::FullKey,
            inject,
            fpn_width: 8,
            mlp_expansion: 4,
        }
    }

    fn store(d: &EncoderDims, seed: u64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut rng = SeededRng::new(seed);
        let mut init = ParamInit::new(&mut s, &mut rng);
        init_encoder(&mut init, d);
        s
    }

    fn pyramid(g: &mut Graph<f64>, fpn_width: usize, base: usize, rng: &mut SeededRng) -> FeaturePyramid {
        let mut maps = Vec::new();
        for i in 0..4 {
            let side = base >> i;
            let data: Vec<f64> = (0..fpn_width * side * side)
                .map(|_| rng.uniform(-1.0, 1.0))
                .collect();
            maps.push(g.constant(Tensor::new(vec![1, fpn_width, side, side], data).unwrap()));
        }
        FeaturePyramid {
            r: [maps[0], maps[1], maps[2], maps[3]],
        }
    }

    #[test]
    fn encoder_stage_shapes() {
        let d = dims(true);
        let s = store(&d, 1);
        let mut g: Graph<f64> = Graph::new();
        let bound = Bound::bind(&mut g, &s);
        let mut rng = SeededRng::new(2);
        let pyr = pyramid(&mut g, 8, 16, &mut rng);
        let out = encoder_forward(&mut g, &bound, &pyr, &d).unwrap();
        for (i, tm) in out.stages.iter().enumerate() {
            let shape = g.shape(tm.values);
            assert_eq!(shape[1], (16 >> i) * (16 >> i));
            assert_eq!(shape[2], d.stage_widths[i]);
        }
        assert!(out.selections[2].is_some());
        assert!(out.selections[3].is_some());
        assert!(out.selections[0].is_none());
    }

    #[test]
    fn inject_false_is_bit_invariant_to_deep_pyramid() {
        let d = dims(false);
        let s = store(&d, 3);
        let run = |perturb: f64| {
            let mut g: Graph<f64> = Graph::new();
            let bound = Bound::bind(&mut g, &s);
            let mut rng = SeededRng::new(4);
            let mut pyr = pyramid(&mut g, 8, 16, &mut rng);
            // perturb R2..R4
            for i in 1..4 {
                let t = g.value(pyr.r[i]).clone();
                let shifted = Tensor::new(
                    t.shape.clone(),
                    t.data.iter().map(|&v| v + perturb).collect(),
                )
                .unwrap();
                pyr.r[i] = g.constant(shifted);
            }
            let out = encoder_forward(&mut g, &bound, &pyr, &d).unwrap();
            g.value(out.stages[3].values).data.clone()
        };
        assert_eq!(run(0.0), run(100.0));
    }

    #[test]
    fn inject_true_depends_on_deep_pyramid() {
        let d = dims(true);
        let s = store(&d, 3);
        let run = |perturb: f64| {
            let mut g: Graph<f64> = Graph::new();
            let bound = Bound::bind(&mut g, &s);
            let mut rng = SeededRng::new(4);
            let mut pyr = pyramid(&mut g, 8, 16, &mut rng);
            for i in 1..4 {
                let t = g.value(pyr.r[i]).clone();
                let shifted = Tensor::new(
                    t.shape.clone(),
                    t.data.iter().map(|&v| v + perturb).collect(),
                )
                .unwrap();
                pyr.r[i] = g.constant(shifted);
            }
            let out = encoder_forward(&mut g, &bound, &pyr, &d).unwrap();
            g.value(out.stages[3].values).data.clone()
        };
        assert_ne!(run(0.0), run(1.0));
    }

    #[test]
    fn patch_merge_shapes_and_constant_input() {
        let mut s: ParamStore<f64> = ParamStore::new();
        let mut rng = SeededRng::new(5);
        {
            let mut init = ParamInit::new(&mut s, &mut rng);
            init.norm("m.norm", 16);
            init.linear("m.linear", 16, 8, false);
        }
        let mut g: Graph<f64> = Graph::new();
        let bound = Bound::bind(&mut g, &s);
        let x = g.constant(Tensor::filled(&[1, 16, 4], 2.0));
        let tm = TokenMap::new(&g, x, 4, 4).unwrap();
        let merged = patch_merge(&mut g, &bound, "m", &tm).unwrap();
        assert_eq!(g.shape(merged.values), &[1, 4, 8]);
        // constant input -> identical merged tokens
        let d = &g.value(merged.values).data;
        for tok in 1..4 {
            for c in 0..8 {
                assert_eq!(d[tok * 8 + c], d[c]);
            }
        }
        // odd grid rejected
        let x = g.constant(Tensor::filled(&[1, 9, 4], 0.0));
        let tm = TokenMap::new(&g, x, 3, 3).unwrap();
        assert!(matches!(
            patch_merge(&mut g, &bound, "m", &tm),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_update_block_is_identity() {
        let d = dims(true);
        let mut s = store(&d, 6);
        // zero the output projections of stage1.block0 and its MLP tail
        for path in [
            "encoder.stage1.block0.attn.wo.weight",
            "encoder.stage1.block0.mlp.fc2.weight",
        ] {
            let t = &mut s.get_mut(path).unwrap().tensor;
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g: Graph<f64> = Graph::new();
        let bound = Bound::bind(&mut g, &s);
        let mut rng = SeededRng::new(7);
        let data: Vec<f64> = (0..16 * 8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let x = g.constant(Tensor::new(vec![1, 16, 8], data).unwrap());
        let tm = TokenMap::new(&g, x, 4, 4).unwrap();
        let (out, _) = transformer_block(
            &mut g,
            &bound,
            "encoder.stage1.block0",
            &tm,
            &d,
            AttentionKind::Window,
        )
        .unwrap();
        assert_eq!(g.value(out.values).data, g.value(x).data);
    }
}

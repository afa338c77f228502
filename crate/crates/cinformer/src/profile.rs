//! Analytic parameter and FLOP counts for one forward pass at the configured
//! input size (batch 1).
//!
//! Conventions: a multiply-add counts as 2 FLOPs; a normalization costs
//! `NORM_FLOPS_PER_ELEM` per element (statistics, scaling, affine); GELU
//! costs `GELU_FLOPS_PER_ELEM` per element; ReLU and residual adds cost 1;
//! bilinear interpolation costs 8 per output element; nearest is a copy.

use serde::Serialize;

use crate::attention::{flops_of_attention, AttentionFlavor};
use crate::encoder::AttentionKind;
use crate::model::{init_model, ModelDims};
use crate::nn::ParamStore;

pub const NORM_FLOPS_PER_ELEM: u64 = 8;
pub const GELU_FLOPS_PER_ELEM: u64 = 14;
pub const BILINEAR_FLOPS_PER_ELEM: u64 = 8;

#[derive(Debug, Clone, Serialize)]
pub struct ComponentProfile {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Profile {
    pub components: Vec<ComponentProfile>,
    pub total_params: u64,
    pub total_flops: u64,
}

pub fn conv_flops(cin: u64, cout: u64, k: u64, hout: u64, wout: u64, bias: bool) -> u64 {
    let macs = cin * k * k * cout * hout * wout;
    2 * macs + if bias { cout * hout * wout } else { 0 }
}

pub fn linear_flops(n: u64, cin: u64, cout: u64, bias: bool) -> u64 {
    2 * n * cin * cout + if bias { n * cout } else { 0 }
}

fn params_with_prefix(store: &ParamStore<f32>, prefix: &str) -> u64 {
    store
        .iter()
        .filter(|(path, _)| path.starts_with(prefix))
        .map(|(_, p)| p.tensor.numel() as u64)
        .sum()
}

fn residual_block_flops(cin: u64, cout: u64, hout: u64, wout: u64, projected: bool) -> u64 {
    let mut f = conv_flops(cin, cout, 3, hout, wout, true);
    f += NORM_FLOPS_PER_ELEM * cout * hout * wout;
    f += cout * hout * wout; // relu
    f += conv_flops(cout, cout, 3, hout, wout, true);
    f += NORM_FLOPS_PER_ELEM * cout * hout * wout;
    if projected {
        f += conv_flops(cin, cout, 1, hout, wout, false);
        f += NORM_FLOPS_PER_ELEM * cout * hout * wout;
    }
    f += 2 * cout * hout * wout; // residual add + final relu
    f
}

fn stem_flops(dims: &ModelDims) -> u64 {
    let s = dims.input_size as u64;
    let stride = dims.stem.stem_stride as u64;
    let mut side = s / stride;
    let w0 = dims.stem.widths[0] as u64;
    let mut f = conv_flops(3, w0, 3, side, side, true);
    f += NORM_FLOPS_PER_ELEM * w0 * side * side;
    f += w0 * side * side;
    let mut cin = w0;
    for &w in &dims.stem.widths {
        let w = w as u64;
        side /= 2;
        f += residual_block_flops(cin, w, side, side, true);
        f += residual_block_flops(w, w, side, side, false);
        cin = w;
    }
    f
}

fn fpn_flops(dims: &ModelDims) -> u64 {
    let cf = dims.stem.fpn_width as u64;
    let base = dims.input_size as u64 / (dims.stem.stem_stride as u64 * 2);
    let mut f = 0;
    for i in 0..4u64 {
        let side = base >> i;
        let w = dims.stem.widths[i as usize] as u64;
        f += conv_flops(w, cf, 1, side, side, true); // lateral
        let fuse_in = if i == 3 { cf } else { 2 * cf };
        f += conv_flops(fuse_in, cf, 3, side, side, true);
    }
    f
}

fn encoder_stage_flops(dims: &ModelDims, stage: usize) -> u64 {
    let cf = dims.stem.fpn_width as u64;
    let base = dims.input_size as u64 / (dims.stem.stem_stride as u64 * 2);
    let side = base >> stage;
    let n = side * side;
    let c = dims.encoder.stage_widths[stage] as u64;
    let mut f = 0;
    if stage == 0 {
        f += linear_flops(n, cf, c, true); // embed
    } else {
        let c_prev = dims.encoder.stage_widths[stage - 1] as u64;
        f += NORM_FLOPS_PER_ELEM * n * 4 * c_prev; // merge norm
        f += linear_flops(n, 4 * c_prev, c, false);
        if dims.encoder.inject {
            f += conv_flops(cf, cf, 1, side, side, true);
            f += linear_flops(n, c + cf, c, true);
        }
    }
    let kt = dims.encoder.k_tokens.min(n as usize);
    let kc = dims.encoder.k_channels.min(c as usize);
    let flavor = match dims.encoder.kinds[stage] {
        AttentionKind::Window => AttentionFlavor::Window,
        AttentionKind::Topk => match dims.encoder.variant {
            crate::attention::TopkVariant::FullKey => AttentionFlavor::TopkFullKey,
            crate::attention::TopkVariant::SelectedKey => AttentionFlavor::TopkSelectedKey,
        },
    };
    for _ in 0..dims.encoder.stage_depths[stage] {
        f += NORM_FLOPS_PER_ELEM * n * c; // ln1
        f += flops_of_attention(
            flavor,
            n as usize,
            c as usize,
            dims.encoder.heads,
            dims.encoder.window,
            kt,
            kc,
        );
        f += n * c; // residual
        f += NORM_FLOPS_PER_ELEM * n * c; // ln2
        let hidden = dims.encoder.mlp_expansion as u64 * c;
        f += linear_flops(n, c, hidden, true);
        f += GELU_FLOPS_PER_ELEM * n * hidden;
        f += linear_flops(n, hidden, c, true);
        f += n * c; // residual
    }
    f
}

/// Attention FLOPs of one stage if its blocks used the given flavor, with the
/// projection and MLP costs excluded. Used for the flavor comparison table.
pub fn stage_attention_flops(dims: &ModelDims, stage: usize, flavor: AttentionFlavor) -> u64 {
    let base = dims.input_size as u64 / (dims.stem.stem_stride as u64 * 2);
    let side = base >> stage;
    let n = (side * side) as usize;
    let c = dims.encoder.stage_widths[stage];
    let kt = dims.encoder.k_tokens.min(n);
    let kc = dims.encoder.k_channels.min(c);
    dims.encoder.stage_depths[stage] as u64
        * flops_of_attention(
            flavor,
            n,
            c,
            dims.encoder.heads,
            dims.encoder.window,
            kt,
            kc,
        )
}

fn decoder_flops(dims: &ModelDims) -> u64 {
    let base = dims.input_size as u64 / (dims.stem.stem_stride as u64 * 2);
    let mut f = 0;
    let mut side = base >> 3;
    for i in (1..=3).rev() {
        let c_deep = dims.decoder.stage_widths[i] as u64;
        let c = dims.decoder.stage_widths[i - 1] as u64;
        side *= 2;
        f += BILINEAR_FLOPS_PER_ELEM * c_deep * side * side;
        f += conv_flops(c_deep + c, c, 3, side, side, true);
        f += NORM_FLOPS_PER_ELEM * c * side * side;
        f += c * side * side;
        f += conv_flops(c, c, 3, side, side, true);
        f += NORM_FLOPS_PER_ELEM * c * side * side;
        f += c * side * side;
    }
    let k = dims.decoder.num_classes as u64;
    f += conv_flops(dims.decoder.stage_widths[0] as u64, k, 1, side, side, true);
    if dims.decoder.head_upsample > 1 {
        let out = dims.input_size as u64;
        f += BILINEAR_FLOPS_PER_ELEM * k * out * out;
    }
    f
}

pub fn profile(dims: &ModelDims) -> Profile {
    let store: ParamStore<f32> = init_model(dims, 0);
    let mut components = Vec::new();
    components.push(ComponentProfile {
        name: "stem".into(),
        params: params_with_prefix(&store, "stem."),
        flops: stem_flops(dims),
    });
    components.push(ComponentProfile {
        name: "fpn".into(),
        params: params_with_prefix(&store, "fpn."),
        flops: fpn_flops(dims),
    });
    for i in 0..4 {
        components.push(ComponentProfile {
            name: format!("encoder.stage{}", i + 1),
            params: params_with_prefix(&store, &format!("encoder.stage{}.", i + 1)),
            flops: encoder_stage_flops(dims, i),
        });
    }
    components.push(ComponentProfile {
        name: "decoder".into(),
        params: params_with_prefix(&store, "decoder."),
        flops: decoder_flops(dims),
    });
    let total_params = components.iter().map(|c| c.params).sum();
    let total_flops = components.iter().map(|c| c.flops).sum();
    Profile {
        components,
        total_params,
        total_flops,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ConfigFile;

    fn small_dims() -> ModelDims {
        let mut cfg = ConfigFile::default();
        cfg.model.stem_widths = [4, 8, 8, 16];
        cfg.model.fpn_width = 8;
        cfg.model.stage_widths = [8, 16, 32, 64];
        cfg.model.stage_depths = [1, 1, 1, 1];
        cfg.model.attention.heads = 2;
        cfg.model.attention.window = 2;
        cfg.model.attention.k_tokens = 3;
        cfg.model.attention.k_channels = 8;
        ModelDims::from_config(&cfg).unwrap()
    }

    #[test]
    fn param_count_matches_store_exactly() {
        let dims = small_dims();
        let p = profile(&dims);
        let store: ParamStore<f32> = init_model(&dims, 0);
        assert_eq!(p.total_params, store.num_scalars() as u64);
    }

    #[test]
    fn linear_param_count_definition() {
        // a C -> C linear with bias contributes C^2 + C parameters
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = crate::rng::SeededRng::new(0);
        let mut init = crate::nn::ParamInit::new(&mut store, &mut rng);
        init.linear("l", 6, 6, true);
        assert_eq!(store.num_scalars(), 6 * 6 + 6);
    }

    #[test]
    fn topk_attention_cheaper_than_dense_in_stages_3_and_4() {
        let dims = small_dims();
        for stage in 2..4 {
            let side = (dims.input_size / 4) >> stage;
            let n = side * side;
            let c = dims.encoder.stage_widths[stage];
            // dominance precondition: clamped k below N and C
            assert!(dims.encoder.k_tokens.min(n) < n || dims.encoder.k_channels.min(c) < c);
            let dense = stage_attention_flops(&dims, stage, AttentionFlavor::DenseGlobal);
            let topk = stage_attention_flops(&dims, stage, AttentionFlavor::TopkFullKey);
            assert!(topk < dense, "stage {stage}: topk {topk} >= dense {dense}");
        }
    }

    #[test]
    fn hand_derived_conv_and_linear_flops() {
        // 3x3 conv, 2->4 channels, 5x5 output, bias:
        // 2*2*9*4*25 + 4*25 = 3600 + 100
        assert_eq!(conv_flops(2, 4, 3, 5, 5, true), 3700);
        // linear 8 tokens, 3->7, bias: 2*8*3*7 + 8*7 = 336 + 56
        assert_eq!(linear_flops(8, 3, 7, true), 392);
    }

    #[test]
    fn micro_model_total_is_sum_of_components() {
        let dims = ModelDims::micro();
        let p = profile(&dims);
        let sum: u64 = p.components.iter().map(|c| c.flops).sum();
        assert_eq!(p.total_flops, sum);
        assert!(p.total_flops > 0);
        for c in &p.components {
            assert!(c.flops > 0, "{} has zero flops", c.name);
            assert!(c.params > 0, "{} has zero params", c.name);
        }
    }
}

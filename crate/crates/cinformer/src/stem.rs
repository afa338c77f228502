//! Residual CNN stem and the FPN top-down path producing the injected
//! feature pyramid R1..R4.

use crate::error::{Error, Result};
use crate::graph::{Graph, UpsampleMode, Var};
use crate::nn::{
    conv, groupnorm_affine, init_residual_basic_block, residual_basic_block, Bound, ParamInit,
};
use crate::real::Real;

/// CNN features injected into the transformer: four maps at consecutive
/// strides sharing one channel width.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    /// r[0] is the finest (stride stem_stride*2), r[3] the coarsest.
    pub r: [Var; 4],
}

/// Geometry of the stem: four stage widths plus the stride of the leading
/// 3x3 conv (2 normally; 1 for the tiny gradient-check model).
#[derive(Debug, Clone)]
pub struct StemDims {
    pub widths: [usize; 4],
    pub stem_stride: usize,
    pub fpn_width: usize,
}

impl StemDims {
    /// Total downsampling factor of the deepest backbone output.
    pub fn max_stride(&self) -> usize {
        self.stem_stride * 16
    }
}

pub fn init_stem<R: Real>(init: &mut ParamInit<'_, R>, dims: &StemDims) {
    init.conv("stem.conv", dims.widths[0], 3, 3, true);
    init.norm_chw("stem.norm", dims.widths[0]);
    let mut cin = dims.widths[0];
    for (i, &w) in dims.widths.iter().enumerate() {
        init_residual_basic_block(init, &format!("stem.stage{}.block0", i + 1), cin, w, 2);
        init_residual_basic_block(init, &format!("stem.stage{}.block1", i + 1), w, w, 1);
        cin = w;
    }
    for (i, &w) in dims.widths.iter().enumerate() {
        init.conv(&format!("fpn.lat{}", i + 1), dims.fpn_width, w, 1, true);
        let fuse_in = if i == 3 {
            dims.fpn_width
        } else {
            2 * dims.fpn_width
        };
        init.conv(&format!("fpn.fuse{}", i + 1), dims.fpn_width, fuse_in, 3, true);
    }
}

/// Backbone features B1..B4 at strides stem_stride * {2,4,8,16}.
pub fn backbone_forward<R: Real>(
    graph: &mut Graph<R>,
    bound: &Bound,
    image: Var,
    dims: &StemDims,
) -> Result<[Var; 4]> {
    let shape = graph.shape(image).to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::Dimension(format!(
            "backbone expects [B,3,H,W], got {:?}",
            shape
        )));
    }
    let stride = dims.max_stride();
    if shape[2] % stride != 0 || shape[3] % stride != 0 {
        return Err(Error::Dimension(format!(
            "input {}x{} not divisible by total stride {}",
            shape[2], shape[3], stride
        )));
    }
    let x = conv(graph, bound, "stem.conv", image, dims.stem_stride, 1)?;
    let x = groupnorm_affine(graph, bound, "stem.norm", x)?;
    let mut x = graph.relu(x)?;
    let mut outputs = Vec::with_capacity(4);
    for i in 1..=4 {
        x = residual_basic_block(graph, bound, &format!("stem.stage{i}.block0"), x, 2)?;
        x = residual_basic_block(graph, bound, &format!("stem.stage{i}.block1"), x, 1)?;
        outputs.push(x);
    }
    Ok([outputs[0], outputs[1], outputs[2], outputs[3]])
}

/// FPN top-down fusion: laterals to a common width, upsample-concat-fuse.
pub fn fpn_topdown<R: Real>(
    graph: &mut Graph<R>,
    bound: &Bound,
    backbone: &[Var; 4],
    _dims: &StemDims,
) -> Result<FeaturePyramid> {
    let lat4 = conv(graph, bound, "fpn.lat4", backbone[3], 1, 0)?;
    let r4 = conv(graph, bound, "fpn.fuse4", lat4, 1, 1)?;
    let mut above = r4;
    let mut maps = vec![r4];
    for i in (1..=3).rev() {
        let up = graph.upsample(above, 2, UpsampleMode::Nearest)?;
        let lat = conv(graph, bound, &format!("fpn.lat{i}"), backbone[i - 1], 1, 0)?;
        let cat = graph.concat(&[up, lat], 1)?;
        let fused = conv(graph, bound, &format!("fpn.fuse{i}"), cat, 1, 1)?;
        maps.push(fused);
        above = fused;
    }
    maps.reverse();
    Ok(FeaturePyramid {
        r: [maps[0], maps[1], maps[2], maps[3]],
    })
}

pub fn stem_forward<R: Real>(
    graph: &mut Graph<R>,
    bound: &Bound,
    image: Var,
    dims: &StemDims,
) -> Result<FeaturePyramid> {
    let backbone = backbone_forward(graph, bound, image, dims)?;
    fpn_topdown(graph, bound, &backbone, dims)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Tensor;
    use crate::nn::ParamStore;
    use crate::rng::SeededRng;

    fn dims() -> StemDims {
        StemDims {
            widths: [8, 8, 16, 16],
            stem_stride: 2,
            fpn_width: 8,
        }
    }

    fn store(dims: &StemDims, seed: u64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut rng = SeededRng::new(seed);
        let mut init = ParamInit::new(&mut s, &mut rng);
        init_stem(&mut init, dims);
        s
    }

    #[test]
    fn backbone_shapes_at_64() {
        let d = dims();
        let s = store(&d, 1);
        let mut g: Graph<f64> = Graph::new();
        let bound = Bound::bind(&mut g, &s);
        let img = g.constant(Tensor::zeros(&[1, 3, 64, 64]));
        let b = backbone_forward(&mut g, &bound, img, &d).unwrap();
        assert_eq!(g.shape(b[0]), &[1, 8, 16, 16]);
        assert_eq!(g.shape(b[1]), &[1, 8, 8, 8]);
        assert_eq!(g.shape(b[2]), &[1, 16, 4, 4]);
        assert_eq!(g.shape(b[3]), &[1, 16, 2, 2]);
    }

    #[test]
    fn indivisible_input_rejected() {
        let d = dims();
        let s = store(&d, 1);
        let mut g: Graph<f64> = Graph::new();
        let bound = Bound::bind(&mut g, &s);
        let img = g.constant(Tensor::zeros(&[1, 3, 48, 48]));
        assert!(matches!(
            backbone_forward(&mut g, &bound, img, &d),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn pyramid_invariants_hold() {
        let d = dims();
        let s = store(&d, 2);
        let mut g: Graph<f64> = Graph::new();
        let bound = Bound::bind(&mut g, &s);
        let mut rng = SeededRng::new(3);
        let data: Vec<f64> = (0..3 * 64 * 64).map(|_| rng.uniform(0.0, 1.0)).collect();
        let img = g.constant(Tensor::new(vec![1, 3, 64, 64], data).unwrap());
        let pyr = stem_forward(&mut g, &bound, img, &d).unwrap();
        for i in 0..4 {
            let shape = g.shape(pyr.r[i]);
            assert_eq!(shape[1], d.fpn_width);
            assert_eq!(shape[2], 16 >> i);
            assert_eq!(shape[3], 16 >> i);
        }
    }

    #[test]
    fn grads_reach_every_stem_and_fpn_parameter() {
        // B4 must keep >1 element per norm group, so use a 64x64 input
        // (1x1 spatial with group size 1 would normalize to exactly zero)
        let d = StemDims {
            widths: [4, 4, 8, 8],
            stem_stride: 2,
            fpn_width: 4,
        };
        let s = store(&d, 4);
        let mut g: Graph<f64> = Graph::new();
        let bound = Bound::bind(&mut g, &s);
        let mut rng = SeededRng::new(5);
        let data: Vec<f64> = (0..3 * 64 * 64).map(|_| rng.uniform(0.0, 1.0)).collect();
        let img = g.constant(Tensor::new(vec![1, 3, 64, 64], data).unwrap());
        let pyr = stem_forward(&mut g, &bound, img, &d).unwrap();
        // sum of squared pyramid values so norm-gradients do not cancel
        let mut loss = None;
        for m in pyr.r {
            let sq = g.mul(m, m).unwrap();
            let s = g.sum(sq, None).unwrap();
            loss = Some(match loss {
                None => s,
                Some(acc) => g.add(acc, s).unwrap(),
            });
        }
        g.backward(loss.unwrap()).unwrap();
        let grads = bound.grads(&g);
        for (path, _) in s.iter() {
            let gt = grads.get(path).unwrap_or_else(|| panic!("no grad for {path}"));
            assert!(
                gt.data.iter().any(|&v| v != 0.0),
                "gradient identically zero for {path}"
            );
        }
    }
}

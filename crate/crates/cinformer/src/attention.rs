//! Window multi-head self-attention and variance-ranked Top-K self-attention
//! with a constraint vector.
//!
//! Top-K selection ranks tokens by population variance over channels and
//! channels by population variance over tokens, both computed on Q only; the
//! same indexes then restrict K and V so positions stay aligned.

use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::nn::{Bound, ParamInit};
use crate::real::Real;

/// Transformer stage features as (batch, N, C) tokens with their grid shape.
#[derive(Debug, Clone, Copy)]
pub struct TokenMap {
    pub values: Var,
    pub h: usize,
    pub w: usize,
}

impl TokenMap {
    pub fn new<R: Real>(graph: &Graph<R>, values: Var, h: usize, w: usize) -> Result<Self> {
        let shape = graph.shape(values);
        if shape.len() != 3 || shape[1] != h * w {
            return Err(Error::Dimension(format!(
                "token map shape {:?} inconsistent with {}x{} grid",
                shape, h, w
            )));
        }
        Ok(TokenMap { values, h, w })
    }

    pub fn n(&self) -> usize {
        self.h * self.w
    }
}

/// [B,C,H,W] image map to [B,N,C] tokens.
pub fn image_to_tokens<R: Real>(graph: &mut Graph<R>, x: Var) -> Result<TokenMap> {
    let s = graph.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::Dimension(format!(
            "expected [B,C,H,W], got {:?}",
            s
        )));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let p = graph.permute(x, &[0, 2, 3, 1])?;
    let values = graph.reshape(p, &[b, h * w, c])?;
    TokenMap::new(graph, values, h, w)
}

/// Inverse of `image_to_tokens`.
pub fn tokens_to_image<R: Real>(graph: &mut Graph<R>, tm: &TokenMap) -> Result<Var> {
    let s = graph.shape(tm.values).to_vec();
    let (b, c) = (s[0], s[2]);
    let r = graph.reshape(tm.values, &[b, tm.h, tm.w, c])?;
    graph.permute(r, &[0, 3, 1, 2])
}

// ---------------------------------------------------------------------------
// Top-K selection

/// Ranked token/channel indexes for one sample.
#[derive(Debug, Clone)]
pub struct TopKSelection {
    /// k_t token indexes, highest variance first; ties broken by lower index.
    pub token_indexes: Vec<usize>,
    /// k_c channel indexes, same ordering rule.
    pub channel_indexes: Vec<usize>,
    /// Population variance of every token (length N).
    pub token_variances: Vec<f64>,
    /// Population variance of every channel (length C).
    pub channel_variances: Vec<f64>,
}

fn ranked_topk(variances: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..variances.len()).collect();
    idx.sort_by(|&a, &b| {
        variances[b]
            .partial_cmp(&variances[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

fn population_variance(values: impl Iterator<Item = f64> + Clone, n: usize) -> f64 {
    let mut sum = 0.0;
    for v in values.clone() {
        sum += v;
    }
    let mean = sum / n as f64;
    let mut acc = 0.0;
    for v in values {
        let d = v - mean;
        acc += d * d;
    }
    acc / n as f64
}

/// Variance-ranked Top-K indexes, one selection per sample of a [B,N,C] Q.
pub fn compute_selection<R: Real>(
    q: &Tensor<R>,
    k_tokens: usize,
    k_channels: usize,
) -> Result<Vec<TopKSelection>> {
    if q.rank() != 3 {
        return Err(Error::Dimension(format!(
            "selection expects [B,N,C], got {:?}",
            q.shape
        )));
    }
    let (b, n, c) = (q.shape[0], q.shape[1], q.shape[2]);
    if k_tokens == 0 || k_tokens > n {
        return Err(Error::Config(format!(
            "k_tokens {} out of range for {} tokens",
            k_tokens, n
        )));
    }
    if k_channels == 0 || k_channels > c {
        return Err(Error::Config(format!(
            "k_channels {} out of range for {} channels",
            k_channels, c
        )));
    }
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let base = bi * n * c;
        let token_variances: Vec<f64> = (0..n)
            .map(|t| {
                population_variance(
                    (0..c).map(move |j| q.data[base + t * c + j].to_f64()),
                    c,
                )
            })
            .collect();
        let channel_variances: Vec<f64> = (0..c)
            .map(|j| {
                population_variance(
                    (0..n).map(move |t| q.data[base + t * c + j].to_f64()),
                    n,
                )
            })
            .collect();
        out.push(TopKSelection {
            token_indexes: ranked_topk(&token_variances, k_tokens),
            channel_indexes: ranked_topk(&channel_variances, k_channels),
            token_variances,
            channel_variances,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Top-K self-attention

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopkVariant {
    /// Keys/values keep all N tokens, channel-restricted (canonical).
    FullKey,
    /// Keys/values restricted to the selected tokens as well.
    SelectedKey,
}

#[derive(Debug, Clone)]
pub struct TopkConfig {
    pub k_tokens: usize,
    pub k_channels: usize,
    pub variant: TopkVariant,
    /// Test hook: replace the constraint vector with ones so the k_t = N,
    /// k_c = C case reduces to dense single-head attention.
    pub ac_override_one: bool,
}

pub fn init_topk_attention<R: Real>(init: &mut ParamInit<'_, R>, path: &str, c: usize) {
    init.linear(&format!("{path}.wq"), c, c, false);
    init.linear(&format!("{path}.wk"), c, c, false);
    init.linear(&format!("{path}.wv"), c, c, false);
    init.linear(&format!("{path}.wo"), c, c, false);
    init.gate(&format!("{path}.gamma"));
}

/// Top-K self-attention update for a token map. Returns the additive update;
/// the residual connection is the caller's.
///
/// Unselected positions receive an exactly-zero update, and a zero gate
/// (gamma = 0) makes the whole update exactly zero.
pub fn topk_attention<R: Real>(
    graph: &mut Graph<R>,
    bound: &Bound,
    path: &str,
    x: &TokenMap,
    cfg: &TopkConfig,
) -> Result<(Var, Vec<TopKSelection>)> {
    let shape = graph.shape(x.values).to_vec();
    let (b, n, c) = (shape[0], shape[1], shape[2]);
    let wq = bound.var(&format!("{path}.wq.weight"))?;
    let wk = bound.var(&format!("{path}.wk.weight"))?;
    let wv = bound.var(&format!("{path}.wv.weight"))?;
    let wo = bound.var(&format!("{path}.wo.weight"))?;
    let gamma = bound.var(&format!("{path}.gamma"))?;

    let q = graph.matmul(x.values, wq)?;
    let k = graph.matmul(x.values, wk)?;
    let v = graph.matmul(x.values, wv)?;

    let selections = compute_selection(graph.value(q), cfg.k_tokens, cfg.k_channels)?;
    let tok: Vec<Vec<usize>> = selections.iter().map(|s| s.token_indexes.clone()).collect();
    let ch: Vec<Vec<usize>> = selections
        .iter()
        .map(|s| s.channel_indexes.clone())
        .collect();

    let q_sel = graph.gather_tk(q, &tok, &ch)?;
    let key_tok: Vec<Vec<usize>> = match cfg.variant {
        TopkVariant::FullKey => (0..b).map(|_| (0..n).collect()).collect(),
        TopkVariant::SelectedKey => tok.clone(),
    };
    let k_sel = graph.gather_tk(k, &key_tok, &ch)?;
    let v_sel = graph.gather_tk(v, &key_tok, &ch)?;

    // S = Q' K'^T / sqrt(C); scale uses the full block width C.
    let scores = graph.matmul_nt(q_sel, k_sel)?;
    let scores = graph.scale(scores, 1.0 / (c as f64).sqrt());
    let attn = graph.softmax(scores, 2)?;
    graph.ensure_finite(attn, &format!("attention map of {path}"))?;

    // Constraint vector: per-key gate from scores averaged over the query axis.
    let n_keys = graph.shape(attn)[2];
    let gate = if cfg.ac_override_one {
        graph.constant(Tensor::filled(&[b, 1, n_keys], R::ONE))
    } else {
        let col_mean = graph.mean(scores, Some(1))?; // [B, n_keys]
        let normed = graph.layernorm(col_mean, 1, crate::nn::LN_EPS)?;
        let sig = graph.sigmoid(normed)?;
        let scaled = graph.mul(sig, gamma)?;
        graph.reshape(scaled, &[b, 1, n_keys])?
    };
    let attn_gated = graph.mul(attn, gate)?;

    let z = graph.matmul(attn_gated, v_sel)?;
    let update = graph.scatter_tk(z, &tok, &ch, n, c)?;
    let out = graph.matmul(update, wo)?;
    Ok((out, selections))
}

// ---------------------------------------------------------------------------
// window attention

pub fn init_window_attention<R: Real>(init: &mut ParamInit<'_, R>, path: &str, c: usize) {
    init.linear(&format!("{path}.wq"), c, c, false);
    init.linear(&format!("{path}.wk"), c, c, false);
    init.linear(&format!("{path}.wv"), c, c, false);
    init.linear(&format!("{path}.wo"), c, c, false);
}

/// Window-major token permutation for an H x W grid and window size w.
pub fn window_permutation(h: usize, w: usize, win: usize) -> Vec<usize> {
    let mut perm = Vec::with_capacity(h * w);
    for wy in 0..h / win {
        for wx in 0..w / win {
            for iy in 0..win {
                for ix in 0..win {
                    perm.push((wy * win + iy) * w + wx * win + ix);
                }
            }
        }
    }
    perm
}

fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Non-overlapping window multi-head self-attention update (no shifted
/// windows, no relative position bias).
pub fn window_attention<R: Real>(
    graph: &mut Graph<R>,
    bound: &Bound,
    path: &str,
    x: &TokenMap,
    heads: usize,
    win: usize,
) -> Result<Var> {
    let shape = graph.shape(x.values).to_vec();
    let (b, n, c) = (shape[0], shape[1], shape[2]);
    if x.h % win != 0 || x.w % win != 0 {
        return Err(Error::Dimension(format!(
            "{}x{} token grid not divisible by window {}",
            x.h, x.w, win
        )));
    }
    if c % heads != 0 {
        return Err(Error::Dimension(format!(
            "width {} not divisible by {} heads",
            c, heads
        )));
    }
    let head_dim = c / heads;
    let w2 = win * win;
    let nw = n / w2;

    let perm = window_permutation(x.h, x.w, win);
    let xp = graph.index_select(x.values, 1, &perm)?;
    let xw = graph.reshape(xp, &[b * nw, w2, c])?;

    let wq = bound.var(&format!("{path}.wq.weight"))?;
    let wk = bound.var(&format!("{path}.wk.weight"))?;
    let wv = bound.var(&format!("{path}.wv.weight"))?;
    let wo = bound.var(&format!("{path}.wo.weight"))?;
    let q = graph.matmul(xw, wq)?;
    let k = graph.matmul(xw, wk)?;
    let v = graph.matmul(xw, wv)?;

    let mut head_outputs = Vec::with_capacity(heads);
    for hi in 0..heads {
        let cols: Vec<usize> = (hi * head_dim..(hi + 1) * head_dim).collect();
        let qh = graph.index_select(q, 2, &cols)?;
        let kh = graph.index_select(k, 2, &cols)?;
        let vh = graph.index_select(v, 2, &cols)?;
        let scores = graph.matmul_nt(qh, kh)?;
        let scores = graph.scale(scores, 1.0 / (head_dim as f64).sqrt());
        let attn = graph.softmax(scores, 2)?;
        graph.ensure_finite(attn, &format!("attention map of {path} head {hi}"))?;
        head_outputs.push(graph.matmul(attn, vh)?);
    }
    let merged = graph.concat(&head_outputs, 2)?;
    let flat = graph.reshape(merged, &[b, n, c])?;
    let unperm = graph.index_select(flat, 1, &invert_permutation(&perm))?;
    graph.matmul(unperm, wo)
}

// ---------------------------------------------------------------------------
// analytic FLOPs

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionFlavor {
    DenseGlobal,
    Window,
    TopkFullKey,
    TopkSelectedKey,
}

/// Analytic FLOP count for one attention application over N tokens of width
/// C. A multiply-add counts as 2 FLOPs. All four flavors include the four
/// C x C projections (8NC^2); Top-K flavors add the selection's two variance
/// passes (2NC each).
pub fn flops_of_attention(
    flavor: AttentionFlavor,
    n: usize,
    c: usize,
    heads: usize,
    window: usize,
    k_tokens: usize,
    k_channels: usize,
) -> u64 {
    let (n, c, kt, kc) = (n as u64, c as u64, k_tokens as u64, k_channels as u64);
    let projections = 8 * n * c * c;
    match flavor {
        AttentionFlavor::DenseGlobal => projections + 4 * n * n * c,
        AttentionFlavor::Window => {
            let _ = heads;
            let w2 = (window * window) as u64;
            projections + 4 * n * w2 * c
        }
        AttentionFlavor::TopkFullKey => projections + 4 * kt * n * kc + 4 * n * c,
        AttentionFlavor::TopkSelectedKey => projections + 4 * kt * kt * kc + 4 * n * c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::rng::SeededRng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn selection_hand_case() {
        let q = t(&[1, 3, 2], &[1.0, 1.0, 0.0, 2.0, 5.0, 5.0]);
        let sel = compute_selection(&q, 1, 1).unwrap();
        assert_eq!(sel[0].token_indexes, vec![1]);
        assert_eq!(sel[0].token_variances, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn selection_tie_break_ascending() {
        let q = t(&[1, 4, 2], &[3.0; 8]);
        let sel = compute_selection(&q, 3, 2).unwrap();
        assert_eq!(sel[0].token_indexes, vec![0, 1, 2]);
        assert_eq!(sel[0].channel_indexes, vec![0, 1]);
    }

    #[test]
    fn selection_k_out_of_range() {
        let q = t(&[1, 2, 2], &[0.0; 4]);
        assert!(matches!(
            compute_selection(&q, 3, 1),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            compute_selection(&q, 1, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn token_selection_invariant_under_channel_permutation() {
        let mut rng = SeededRng::new(11);
        for _ in 0..20 {
            let (n, c) = (6, 5);
            let data: Vec<f64> = (0..n * c).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let q = t(&[1, n, c], &data);
            // rotate channels by 2
            let mut pdata = vec![0.0; n * c];
            for ti in 0..n {
                for j in 0..c {
                    pdata[ti * c + (j + 2) % c] = data[ti * c + j];
                }
            }
            let qp = t(&[1, n, c], &pdata);
            let a = compute_selection(&q, 3, 2).unwrap();
            let b = compute_selection(&qp, 3, 2).unwrap();
            let mut sa = a[0].token_indexes.clone();
            let mut sb = b[0].token_indexes.clone();
            sa.sort_unstable();
            sb.sort_unstable();
            assert_eq!(sa, sb);
        }
    }

    fn topk_setup(c: usize, seed: u64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(seed);
        let mut init = ParamInit::new(&mut store, &mut rng);
        init_topk_attention(&mut init, "attn", c);
        store
    }

    #[test]
    fn gamma_zero_is_zero_map() {
        let mut store = topk_setup(4, 3);
        store.get_mut("attn.gamma").unwrap().tensor.data[0] = 0.0;
        let mut g: Graph<f64> = Graph::new();
        let bound = Bound::bind(&mut g, &store);
        let mut rng = SeededRng::new(8);
        let data: Vec<f64> = (0..2 * 9 * 4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let x = g.constant(t(&[2, 9, 4], &data));
        let tm = TokenMap::new(&g, x, 3, 3).unwrap();
        let cfg = TopkConfig {
            k_tokens: 4,
            k_channels: 2,
            variant: TopkVariant::FullKey,
            ac_override_one: false,
        };
        let (y, _) = topk_attention(&mut g, &bound, "attn", &tm, &cfg).unwrap();
        assert!(g.value(y).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unselected_rows_are_exactly_zero_before_wo() {
        // With W_o = I the update at unselected token rows must be zero.
        let mut store = topk_setup(4, 9);
        {
            let wo = &mut store.get_mut("attn.wo.weight").unwrap().tensor;
            for i in 0..4 {
                for j in 0..4 {
                    wo.data[i * 4 + j] = if i == j { 1.0 } else { 0.0 };
                }
            }
        }
        let mut g: Graph<f64> = Graph::new();
        let bound = Bound::bind(&mut g, &store);
        let mut rng = SeededRng::new(21);
        let data: Vec<f64> = (0..1 * 9 * 4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let xv = g.constant(t(&[1, 9, 4], &data));
        let tm = TokenMap::new(&g, xv, 3, 3).unwrap();
        let cfg = TopkConfig {
            k_tokens: 3,
            k_channels: 2,
            variant: TopkVariant::FullKey,
            ac_override_one: false,
        };
        let (y, sel) = topk_attention(&mut g, &bound, "attn", &tm, &cfg).unwrap();
        let yd = &g.value(y).data;
        for token in 0..9 {
            if !sel[0].token_indexes.contains(&token) {
                for j in 0..4 {
                    assert_eq!(yd[token * 4 + j], 0.0, "token {token} channel {j}");
                }
            }
        }
    }

    #[test]
    fn window_partition_counts() {
        let perm = window_permutation(4, 4, 2);
        assert_eq!(perm.len(), 16);
        // first window is the top-left 2x2 block
        assert_eq!(&perm[..4], &[0, 1, 4, 5]);
        let inv = invert_permutation(&perm);
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(inv[p], i);
        }
    }

    #[test]
    fn window_attention_rows_sum_to_one_and_shapes() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = SeededRng::new(4);
        {
            let mut init = ParamInit::new(&mut store, &mut rng);
            init_window_attention(&mut init, "attn", 8);
        }
        let mut g: Graph<f64> = Graph::new();
        let bound = Bound::bind(&mut g, &store);
        let data: Vec<f64> = (0..1 * 16 * 8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let x = g.constant(t(&[1, 16, 8], &data));
        let tm = TokenMap::new(&g, x, 4, 4).unwrap();
        let y = window_attention(&mut g, &bound, "attn", &tm, 2, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 16, 8]);
        // indivisible window geometry
        let bad = window_attention(&mut g, &bound, "attn", &tm, 2, 3);
        assert!(matches!(bad, Err(Error::Dimension(_))));
    }

    #[test]
    fn image_token_round_trip() {
        let mut g: Graph<f64> = Graph::new();
        let data: Vec<f64> = (0..2 * 3 * 2 * 2).map(|i| i as f64).collect();
        let x = g.constant(t(&[2, 3, 2, 2], &data));
        let tm = image_to_tokens(&mut g, x).unwrap();
        let back = tokens_to_image(&mut g, &tm).unwrap();
        assert_eq!(g.value(back).data, g.value(x).data);
    }

    #[test]
    fn flops_hand_cases() {
        // dense QK^T term for N=16, C=8: 2*16*16*8 = 4096
        let dense = flops_of_attention(AttentionFlavor::DenseGlobal, 16, 8, 1, 0, 0, 0);
        let qk_term = 2 * 16 * 16 * 8;
        assert_eq!(dense, 8 * 16 * 64 + 2 * qk_term);
        // hand total for topk full-key (N=16, C=8, kt=4, kc=4):
        // 8NC^2 + 4*kt*N*kc + 4NC = 8192 + 1024 + 512 = 9728
        let topk = flops_of_attention(AttentionFlavor::TopkFullKey, 16, 8, 1, 0, 4, 4);
        assert_eq!(topk, 9728);
        assert!(topk < dense);
    }

    #[test]
    fn topk_strictly_cheaper_when_truncated() {
        for &(n, c) in &[(16usize, 8usize), (64, 32), (256, 32)] {
            for kt in 1..n {
                let kc = c - 1;
                let dense = flops_of_attention(AttentionFlavor::DenseGlobal, n, c, 1, 0, 0, 0);
                let topk =
                    flops_of_attention(AttentionFlavor::TopkFullKey, n, c, 1, 0, kt, kc);
                assert!(topk < dense, "n={n} c={c} kt={kt}");
            }
        }
    }
}

//! The full detection model: document and query projections into the shared
//! embedding space, per-segment occurrence scoring, the minimum-length head,
//! and the chunk loss with its hand-written backward pass.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::cn::SegmentFeatures;
use crate::error::{Error, Result};

use super::lstm::{
    dir_backward, dir_forward, sigmoid, stack_backward, stack_forward_cached,
    stack_forward_light, DirCache, DirGrads, LayerCache,
};
use super::params::{ModelParams, Pipeline};

/// Log arguments in the BCE loss are clamped at this floor.
pub const BCE_CLAMP: f64 = 1e-7;

/// Query-side projection: the three pooled embeddings (`(3, width)`) and the
/// predicted minimum occurrence length in segments.
#[derive(Debug, Clone)]
pub struct QueryProjection {
    pub q: Array2<f64>,
    pub min_len: f64,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// One confusion-network segment resolved into model space: embedding row
/// (the null row for padded slots) and probability per top slot.
#[derive(Debug, Clone, Copy)]
struct ResolvedRow {
    duration: f64,
    slots: [(usize, f64); 3],
}

fn resolve_features(
    params: &ModelParams,
    features: &[SegmentFeatures],
    cn_vocab: &[String],
) -> Result<Vec<ResolvedRow>> {
    let layout = &params.layout;
    let map: Result<Vec<usize>> = cn_vocab
        .iter()
        .map(|s| layout.grapheme_id(s).ok_or_else(|| Error::UnknownGrapheme(s.clone())))
        .collect();
    let map = map?;
    let null_row = layout.null_grapheme_row();
    features
        .iter()
        .map(|f| {
            let mut slots = [(null_row, 0.0f64); 3];
            for (slot, &(g, p)) in slots.iter_mut().zip(&f.top) {
                *slot = match g {
                    Some(idx) => {
                        let &row = map.get(idx).ok_or_else(|| {
                            Error::UnknownGrapheme(format!("feature grapheme id {idx}"))
                        })?;
                        (row, p)
                    }
                    None => (null_row, 0.0),
                };
            }
            Ok(ResolvedRow { duration: f.duration_s, slots })
        })
        .collect()
}

/// Feature rows -> `(N, feature_dim)` input matrix:
/// `[duration, emb(top1), p1, emb(top2), p2, emb(top3), p3]`.
fn doc_input_matrix(params: &ModelParams, rows: &[ResolvedRow]) -> Array2<f64> {
    let layout = &params.layout;
    let e = layout.arch.cn_embed_dim;
    let emb = layout.mat(&params.data, layout.cn_embed);
    let mut x0 = Array2::<f64>::zeros((rows.len(), layout.arch.cn_feature_dim()));
    for (i, row) in rows.iter().enumerate() {
        x0[(i, 0)] = row.duration;
        for (s, &(g, p)) in row.slots.iter().enumerate() {
            let base = 1 + s * (e + 1);
            for j in 0..e {
                x0[(i, base + j)] = emb[(g, j)];
            }
            x0[(i, base + e)] = p;
        }
    }
    x0
}

fn doc_project_input(params: &ModelParams, x0: &Array2<f64>) -> Array2<f64> {
    let layout = &params.layout;
    let w = layout.mat(&params.data, layout.cn_proj_w);
    let b = layout.vec(&params.data, layout.cn_proj_b);
    x0.dot(&w.t()) + &b
}

/// Projects a featurized confusion network to its segment embeddings
/// (`(N, width)`, row `i` is the embedding of segment `i`). Query
/// independent, so results can be precomputed and indexed.
pub fn project_document(
    params: &ModelParams,
    features: &[SegmentFeatures],
    cn_vocab: &[String],
) -> Result<Array2<f64>> {
    let rows = resolve_features(params, features, cn_vocab)?;
    let x0 = doc_input_matrix(params, &rows);
    let xp = doc_project_input(params, &x0);
    Ok(stack_forward_light(params, Pipeline::Document, xp))
}

/// 0-indexed, half-open pooling ranges for the three query embeddings:
/// first half, middle half (clamped non-empty), second half.
pub(crate) fn pool_ranges(m: usize) -> [(usize, usize); 3] {
    debug_assert!(m >= 1);
    let ceil = |a: usize, b: usize| a.div_ceil(b);
    let q1 = (0, ceil(m, 2));
    let q3 = (m / 2, m);
    let mut lo = ceil(m, 4);
    let hi = ceil(3 * m, 4);
    lo = lo.min(m - 1);
    let hi = hi.max(lo + 1);
    [q1, (lo, hi), q3]
}

struct QueryForward {
    g: Array2<f64>,
    stack: Vec<LayerCache>,
    ranges: [(usize, usize); 3],
    /// Row index of the max per (pooling range, output dim).
    argmax: Vec<Vec<usize>>,
    q: Array2<f64>,
    minlen_fwd: DirCache,
    minlen_bwd: DirCache,
    concat: Array1<f64>,
    raw: f64,
    min_len: f64,
}

fn query_forward(params: &ModelParams, ids: &[usize]) -> Result<QueryForward> {
    if ids.is_empty() {
        return Err(Error::Config("empty query term".into()));
    }
    let layout = &params.layout;
    let m = ids.len();
    let e = layout.arch.query_embed_dim;
    let d = layout.arch.proj_width;

    let emb = layout.mat(&params.data, layout.q_embed);
    let mut g = Array2::<f64>::zeros((m, e));
    for (i, &id) in ids.iter().enumerate() {
        if id >= layout.graphemes.len() {
            return Err(Error::UnknownGrapheme(format!("grapheme id {id}")));
        }
        g.row_mut(i).assign(&emb.row(id));
    }

    let w = layout.mat(&params.data, layout.q_proj_w);
    let b = layout.vec(&params.data, layout.q_proj_b);
    let xq = g.dot(&w.t()) + &b;

    let stack = stack_forward_cached(params, Pipeline::Query, xq.clone());
    let o = stack.last().map(|c| c.output()).unwrap_or(xq);

    let ranges = pool_ranges(m);
    let mut q = Array2::<f64>::zeros((3, d));
    let mut argmax = vec![vec![0usize; d]; 3];
    for (k, &(lo, hi)) in ranges.iter().enumerate() {
        for dim in 0..d {
            let mut best = lo;
            let mut best_v = o[(lo, dim)];
            for row in lo + 1..hi {
                if o[(row, dim)] > best_v {
                    best_v = o[(row, dim)];
                    best = row;
                }
            }
            q[(k, dim)] = best_v;
            argmax[k][dim] = best;
        }
    }

    // Minimum-length head over the raw grapheme embeddings.
    let minlen_fwd = dir_forward(&params.minlen_dir(0), &g.view(), false);
    let minlen_bwd = dir_forward(&params.minlen_dir(1), &g.view(), true);
    let mh = layout.arch.minlen_hidden;
    let mut concat = Array1::<f64>::zeros(2 * mh);
    concat.slice_mut(ndarray::s![0..mh]).assign(&minlen_fwd.h.row(m - 1));
    concat.slice_mut(ndarray::s![mh..2 * mh]).assign(&minlen_bwd.h.row(0));
    let head_w = layout.mat(&params.data, layout.minlen_head_w);
    let head_b = layout.scalar(&params.data, layout.minlen_head_b);
    let raw = head_w.row(0).dot(&concat) + head_b;
    let min_len = softplus(raw);

    Ok(QueryForward {
        g,
        stack,
        ranges,
        argmax,
        q,
        minlen_fwd,
        minlen_bwd,
        concat,
        raw,
        min_len,
    })
}

/// Projects a query term (model grapheme ids) to its three pooled
/// embeddings and predicted minimum segment count.
pub fn project_query_ids(params: &ModelParams, ids: &[usize]) -> Result<QueryProjection> {
    let f = query_forward(params, ids)?;
    Ok(QueryProjection { q: f.q, min_len: f.min_len })
}

/// Convenience wrapper mapping each character of `term` to a grapheme.
pub fn project_query(params: &ModelParams, term: &str) -> Result<QueryProjection> {
    project_query_ids(params, &params.term_to_ids(term)?)
}

/// Calibrated per-segment occurrence probabilities:
/// `r_i = sigmoid(alpha * max_k(R_i . Q_k) + beta)`.
pub fn score_segments(
    r: ArrayView2<'_, f64>,
    q: ArrayView2<'_, f64>,
    alpha: f64,
    beta: f64,
) -> Vec<f64> {
    assert_eq!(r.ncols(), q.ncols(), "embedding widths differ");
    let s = r.dot(&q.t()); // (N, K)
    s.rows()
        .into_iter()
        .map(|row| {
            let mut best = f64::NEG_INFINITY;
            for &v in row {
                if v > best {
                    best = v;
                }
            }
            sigmoid(alpha * best + beta)
        })
        .collect()
}

/// One training chunk: a window of featurized segments, the query, per-
/// segment binary targets and mask weights, and the occurrence length in
/// segments (0 for negative chunks).
#[derive(Debug, Clone)]
pub struct ChunkSample {
    pub features: Vec<SegmentFeatures>,
    pub cn_vocab: Vec<String>,
    pub query_ids: Vec<usize>,
    pub y: Vec<u8>,
    pub w: Vec<u8>,
    pub occurrence_len: usize,
}

/// Loss terms of one chunk. `skipped` is set when the mask removes every
/// position, which contributes nothing rather than erroring.
#[derive(Debug, Clone, Copy, Default)]
pub struct ChunkStats {
    pub total: f64,
    pub bce: f64,
    pub minlen: f64,
    pub skipped: bool,
    pub positive_segments: usize,
    pub masked_segments: usize,
}

fn check_chunk(sample: &ChunkSample) -> Result<()> {
    if sample.y.len() != sample.features.len() || sample.w.len() != sample.features.len() {
        return Err(Error::Mismatch(format!(
            "chunk lengths differ: {} features, {} targets, {} weights",
            sample.features.len(),
            sample.y.len(),
            sample.w.len()
        )));
    }
    Ok(())
}

fn bce_terms(r: &[f64], y: &[u8], w: &[u8]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut cnt = 0usize;
    for ((&ri, &yi), &wi) in r.iter().zip(y).zip(w) {
        if wi == 0 {
            continue;
        }
        let rc = ri.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        sum += if yi == 1 { -rc.ln() } else { -(1.0 - rc).ln() };
        cnt += 1;
    }
    (sum, cnt)
}

/// Pinball loss for the minimum-length regressor.
pub fn minlen_loss(predicted: f64, occurrence_len: usize, tau: f64) -> f64 {
    let diff = occurrence_len as f64 - predicted;
    (tau * diff).max((tau - 1.0) * diff)
}

fn pinball_grad(predicted: f64, occurrence_len: usize, tau: f64) -> f64 {
    // d/dp of max(tau*(t-p), (tau-1)*(t-p)); subgradient 0 at the kink.
    let t = occurrence_len as f64;
    if predicted < t {
        -tau
    } else if predicted > t {
        1.0 - tau
    } else {
        0.0
    }
}

struct ChunkForward {
    doc_rows: Vec<ResolvedRow>,
    x0: Array2<f64>,
    doc_stack: Vec<LayerCache>,
    r_emb: Array2<f64>,
    query: QueryForward,
    scores: Vec<f64>,
    maxes: Vec<f64>,
    k_star: Vec<usize>,
    stats: ChunkStats,
    bce_count: usize,
}

fn chunk_forward(
    params: &ModelParams,
    sample: &ChunkSample,
    minlen_weight: f64,
    tau: f64,
) -> Result<ChunkForward> {
    check_chunk(sample)?;
    let doc_rows = resolve_features(params, &sample.features, &sample.cn_vocab)?;
    let x0 = doc_input_matrix(params, &doc_rows);
    let xp = doc_project_input(params, &x0);
    let doc_stack = stack_forward_cached(params, Pipeline::Document, xp.clone());
    let r_emb = doc_stack.last().map(|c| c.output()).unwrap_or(xp);

    let query = query_forward(params, &sample.query_ids)?;
    let alpha = params.alpha();
    let beta = params.beta();

    let s = r_emb.dot(&query.q.t()); // (N, 3)
    let n = r_emb.nrows();
    let mut maxes = vec![0.0f64; n];
    let mut k_star = vec![0usize; n];
    let mut scores = vec![0.0f64; n];
    for i in 0..n {
        let mut best = s[(i, 0)];
        let mut best_k = 0usize;
        for k in 1..3 {
            if s[(i, k)] > best {
                best = s[(i, k)];
                best_k = k;
            }
        }
        maxes[i] = best;
        k_star[i] = best_k;
        scores[i] = sigmoid(alpha * best + beta);
    }

    let (bce_sum, cnt) = bce_terms(&scores, &sample.y, &sample.w);
    let mut stats = ChunkStats {
        positive_segments: sample.y.iter().filter(|&&v| v == 1).count(),
        masked_segments: sample.w.iter().filter(|&&v| v == 0).count(),
        ..Default::default()
    };
    if cnt == 0 {
        stats.skipped = true;
    } else {
        stats.bce = bce_sum / cnt as f64;
        if sample.occurrence_len >= 1 {
            stats.minlen = minlen_loss(query.min_len, sample.occurrence_len, tau);
        }
        stats.total = stats.bce + minlen_weight * stats.minlen;
    }

    Ok(ChunkForward {
        doc_rows,
        x0,
        doc_stack,
        r_emb,
        query,
        scores,
        maxes,
        k_star,
        stats,
        bce_count: cnt,
    })
}

/// Forward-only chunk loss.
pub fn chunk_loss(
    params: &ModelParams,
    sample: &ChunkSample,
    minlen_weight: f64,
    tau: f64,
) -> Result<ChunkStats> {
    Ok(chunk_forward(params, sample, minlen_weight, tau)?.stats)
}

/// Chunk loss plus gradients, accumulated into `grad` with weight `scale`
/// (callers pass `1 / batch_size` to average over a batch).
pub fn chunk_loss_backward(
    params: &ModelParams,
    sample: &ChunkSample,
    minlen_weight: f64,
    tau: f64,
    scale: f64,
    grad: &mut [f64],
) -> Result<ChunkStats> {
    let fwd = chunk_forward(params, sample, minlen_weight, tau)?;
    if fwd.stats.skipped {
        return Ok(fwd.stats);
    }
    let layout = params.layout.clone();
    let d = layout.arch.proj_width;
    let n = fwd.r_emb.nrows();
    let m = sample.query_ids.len();
    let alpha = params.alpha();
    let cnt = fwd.bce_count as f64;

    // d(loss)/d(z_i) for the sigmoid-BCE composite, zero at masked positions.
    let mut d_alpha = 0.0;
    let mut d_beta = 0.0;
    let mut d_r = Array2::<f64>::zeros((n, d));
    let mut d_q = Array2::<f64>::zeros((3, d));
    for i in 0..n {
        if sample.w[i] == 0 {
            continue;
        }
        let dz = scale * (fwd.scores[i] - sample.y[i] as f64) / cnt;
        d_alpha += dz * fwd.maxes[i];
        d_beta += dz;
        let dm = dz * alpha;
        let k = fwd.k_star[i];
        for dim in 0..d {
            d_r[(i, dim)] += dm * fwd.query.q[(k, dim)];
            d_q[(k, dim)] += dm * fwd.r_emb[(i, dim)];
        }
    }
    {
        let a_off = layout.specs[layout.alpha].offset;
        let b_off = layout.specs[layout.beta].offset;
        grad[a_off] += d_alpha;
        grad[b_off] += d_beta;
    }

    // Document pipeline.
    let d_xp = stack_backward(params, Pipeline::Document, &fwd.doc_stack, d_r, grad);
    {
        let w = layout.mat(&params.data, layout.cn_proj_w);
        let d_w = d_xp.t().dot(&fwd.x0);
        let d_b = d_xp.sum_axis(Axis(0));
        layout.mat_mut(grad, layout.cn_proj_w).scaled_add(1.0, &d_w);
        layout.vec_mut(grad, layout.cn_proj_b).scaled_add(1.0, &d_b);
        let d_x0 = d_xp.dot(&w);
        let e = layout.arch.cn_embed_dim;
        let mut d_emb = layout.mat_mut(grad, layout.cn_embed);
        for (i, row) in fwd.doc_rows.iter().enumerate() {
            for (s, &(g, _)) in row.slots.iter().enumerate() {
                let base = 1 + s * (e + 1);
                for j in 0..e {
                    d_emb[(g, j)] += d_x0[(i, base + j)];
                }
            }
        }
    }

    // Query pipeline: unpool, stack, projection.
    let mut d_o = Array2::<f64>::zeros((m, d));
    for (k, _) in fwd.query.ranges.iter().enumerate() {
        for dim in 0..d {
            d_o[(fwd.query.argmax[k][dim], dim)] += d_q[(k, dim)];
        }
    }
    let d_xq = stack_backward(params, Pipeline::Query, &fwd.query.stack, d_o, grad);
    let mut d_g = {
        let w = layout.mat(&params.data, layout.q_proj_w);
        let d_w = d_xq.t().dot(&fwd.query.g);
        let d_b = d_xq.sum_axis(Axis(0));
        layout.mat_mut(grad, layout.q_proj_w).scaled_add(1.0, &d_w);
        layout.vec_mut(grad, layout.q_proj_b).scaled_add(1.0, &d_b);
        d_xq.dot(&w)
    };

    // Minimum-length head (positive chunks only).
    if sample.occurrence_len >= 1 {
        let d_p = scale * minlen_weight * pinball_grad(fwd.query.min_len, sample.occurrence_len, tau);
        if d_p != 0.0 {
            let d_raw = d_p * sigmoid(fwd.query.raw);
            let mh = layout.arch.minlen_hidden;
            let head_w = layout.mat(&params.data, layout.minlen_head_w);
            {
                let mut d_head_w = layout.mat_mut(grad, layout.minlen_head_w);
                for j in 0..2 * mh {
                    d_head_w[(0, j)] += d_raw * fwd.query.concat[j];
                }
                grad[layout.specs[layout.minlen_head_b].offset] += d_raw;
            }
            let mut d_h_fwd = Array2::<f64>::zeros((m, mh));
            let mut d_h_bwd = Array2::<f64>::zeros((m, mh));
            for j in 0..mh {
                d_h_fwd[(m - 1, j)] = d_raw * head_w[(0, j)];
                d_h_bwd[(0, j)] = d_raw * head_w[(0, mh + j)];
            }
            for (dir, (cache, dh)) in
                [(0usize, (&fwd.query.minlen_fwd, &d_h_fwd)), (1, (&fwd.query.minlen_bwd, &d_h_bwd))]
            {
                let view = params.minlen_dir(dir);
                let mut g = DirGrads::from_flat(&layout, grad, layout.minlen[dir]);
                let dg = dir_backward(&view, &fwd.query.g.view(), cache, dh, dir == 1, &mut g);
                d_g += &dg;
            }
        }
    }

    // Query grapheme embeddings collect from both the projection and the
    // minimum-length branch.
    {
        let mut d_emb = layout.mat_mut(grad, layout.q_embed);
        for (i, &id) in sample.query_ids.iter().enumerate() {
            for j in 0..layout.arch.query_embed_dim {
                d_emb[(id, j)] += d_g[(i, j)];
            }
        }
    }

    Ok(fwd.stats)
}

/// Per-segment scores for one already-projected document against one query,
/// convenience over [`score_segments`].
pub fn score_document(params: &ModelParams, r: &Array2<f64>, q: &QueryProjection) -> Vec<f64> {
    score_segments(r.view(), q.q.view(), params.alpha(), params.beta())
}

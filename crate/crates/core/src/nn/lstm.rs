//! LSTM primitives: the standard gated cell, single-direction passes over a
//! sequence, and the residual bidirectional stack.
//!
//! Gate order in every `4h`-row tensor is input, forget, candidate, output.
//! Sequences are `(N, width)` matrices, one row per position. The backward
//! direction reads the sequence in reverse but stores its hidden state at
//! the position it belongs to, so `concat(fwd, bwd)` lines up per position.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

use super::params::{LstmIds, ModelParams, Pipeline};

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Parameter views of one LSTM direction: `w_x (4h, in)`, `w_h (4h, h)`,
/// `b (4h)`.
#[derive(Clone, Copy)]
pub struct LstmDirView<'a> {
    pub w_x: ArrayView2<'a, f64>,
    pub w_h: ArrayView2<'a, f64>,
    pub b: ArrayView1<'a, f64>,
}

impl<'a> LstmDirView<'a> {
    pub(crate) fn from_ids(params: &'a ModelParams, ids: LstmIds) -> Self {
        LstmDirView {
            w_x: params.layout.mat(&params.data, ids.w_x),
            w_h: params.layout.mat(&params.data, ids.w_h),
            b: params.layout.vec(&params.data, ids.b),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.ncols()
    }
}

impl ModelParams {
    /// Parameter views for one direction of one stack layer.
    /// `direction` 0 is forward, 1 is backward.
    pub fn stack_dir(&self, pipeline: Pipeline, layer: usize, direction: usize) -> LstmDirView<'_> {
        let stack = match pipeline {
            Pipeline::Document => &self.layout.cn_stack,
            Pipeline::Query => &self.layout.q_stack,
        };
        LstmDirView::from_ids(self, stack[layer][direction])
    }

    pub(crate) fn minlen_dir(&self, direction: usize) -> LstmDirView<'_> {
        LstmDirView::from_ids(self, self.layout.minlen[direction])
    }
}

/// One step of the standard LSTM cell.
///
/// Gates are logistic functions of affine maps of `[input; previous hidden]`,
/// the candidate is a tanh, the new cell is `f*c + i*g`, and the hidden is
/// `o*tanh(cell)`.
pub fn lstm_cell(
    params: &LstmDirView<'_>,
    input: ArrayView1<'_, f64>,
    h_prev: ArrayView1<'_, f64>,
    c_prev: ArrayView1<'_, f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let h = params.hidden();
    if input.len() != params.input_dim()
        || h_prev.len() != h
        || c_prev.len() != h
        || params.w_x.nrows() != 4 * h
        || params.b.len() != 4 * h
    {
        return Err(Error::Mismatch(format!(
            "lstm_cell shapes: input {}, hidden {}, w_x {:?}, w_h {:?}",
            input.len(),
            h_prev.len(),
            params.w_x.dim(),
            params.w_h.dim()
        )));
    }
    let z = params.w_x.dot(&input) + params.w_h.dot(&h_prev) + params.b;
    let mut c = Array1::<f64>::zeros(h);
    let mut hid = Array1::<f64>::zeros(h);
    for j in 0..h {
        let i_g = sigmoid(z[j]);
        let f_g = sigmoid(z[h + j]);
        let g_g = z[2 * h + j].tanh();
        let o_g = sigmoid(z[3 * h + j]);
        c[j] = f_g * c_prev[j] + i_g * g_g;
        hid[j] = o_g * c[j].tanh();
    }
    Ok((hid, c))
}

/// Forward-pass caches of one direction over one sequence.
pub(crate) struct DirCache {
    /// Post-activation gates, `(N, 4h)`.
    pub gates: Array2<f64>,
    /// Cell states, `(N, h)`.
    pub c: Array2<f64>,
    /// `tanh` of the cell states, `(N, h)`.
    pub tanh_c: Array2<f64>,
    /// Hidden states, `(N, h)`.
    pub h: Array2<f64>,
}

/// Time order of a direction: forward walks `0..n`, backward walks `n-1..=0`.
fn time_order(n: usize, reversed: bool) -> Box<dyn Iterator<Item = usize>> {
    if reversed {
        Box::new((0..n).rev())
    } else {
        Box::new(0..n)
    }
}

/// Runs one direction over `x` (`(N, in)`), caching everything the backward
/// pass needs.
pub(crate) fn dir_forward(p: &LstmDirView<'_>, x: &ArrayView2<'_, f64>, reversed: bool) -> DirCache {
    let n = x.nrows();
    let h = p.hidden();
    let mut cache = DirCache {
        gates: Array2::zeros((n, 4 * h)),
        c: Array2::zeros((n, h)),
        tanh_c: Array2::zeros((n, h)),
        h: Array2::zeros((n, h)),
    };
    if n == 0 {
        return cache;
    }
    // One GEMM for all input contributions, then a cheap recurrence.
    let xw = x.dot(&p.w_x.t()); // (N, 4h)
    let mut h_prev = Array1::<f64>::zeros(h);
    let mut c_prev = Array1::<f64>::zeros(h);
    for t in time_order(n, reversed) {
        let wh = p.w_h.dot(&h_prev);
        for j in 0..h {
            let i_g = sigmoid(xw[(t, j)] + wh[j] + p.b[j]);
            let f_g = sigmoid(xw[(t, h + j)] + wh[h + j] + p.b[h + j]);
            let g_g = (xw[(t, 2 * h + j)] + wh[2 * h + j] + p.b[2 * h + j]).tanh();
            let o_g = sigmoid(xw[(t, 3 * h + j)] + wh[3 * h + j] + p.b[3 * h + j]);
            let c = f_g * c_prev[j] + i_g * g_g;
            let tc = c.tanh();
            cache.gates[(t, j)] = i_g;
            cache.gates[(t, h + j)] = f_g;
            cache.gates[(t, 2 * h + j)] = g_g;
            cache.gates[(t, 3 * h + j)] = o_g;
            cache.c[(t, j)] = c;
            cache.tanh_c[(t, j)] = tc;
            cache.h[(t, j)] = o_g * tc;
        }
        h_prev.assign(&cache.h.row(t));
        c_prev.assign(&cache.c.row(t));
    }
    cache
}

/// Gradient views of one direction, mutable slices into the flat gradient
/// buffer.
pub(crate) struct DirGrads<'a> {
    pub w_x: ndarray::ArrayViewMut2<'a, f64>,
    pub w_h: ndarray::ArrayViewMut2<'a, f64>,
    pub b: ndarray::ArrayViewMut1<'a, f64>,
}

impl<'a> DirGrads<'a> {
    /// Carves the three tensors of one direction out of the flat gradient
    /// buffer. The layout guarantees they are adjacent in w_x, w_h, b order.
    pub(crate) fn from_flat(
        layout: &super::params::Layout,
        grad: &'a mut [f64],
        ids: LstmIds,
    ) -> Self {
        let sx = &layout.specs[ids.w_x];
        let sh = &layout.specs[ids.w_h];
        let sb = &layout.specs[ids.b];
        debug_assert_eq!(sh.offset, sx.offset + sx.rows * sx.cols);
        debug_assert_eq!(sb.offset, sh.offset + sh.rows * sh.cols);
        let (_, rest) = grad.split_at_mut(sx.offset);
        let (wx, rest) = rest.split_at_mut(sx.rows * sx.cols);
        let (wh, rest) = rest.split_at_mut(sh.rows * sh.cols);
        let (b, _) = rest.split_at_mut(sb.rows * sb.cols);
        DirGrads {
            w_x: ndarray::ArrayViewMut2::from_shape((sx.rows, sx.cols), wx).unwrap(),
            w_h: ndarray::ArrayViewMut2::from_shape((sh.rows, sh.cols), wh).unwrap(),
            b: ndarray::ArrayViewMut1::from(b),
        }
    }
}

/// Backpropagates one direction. `d_h` is the loss gradient with respect to
/// this direction's hidden outputs (`(N, h)`); returns the gradient with
/// respect to `x` and accumulates parameter gradients into `grads`.
pub(crate) fn dir_backward(
    p: &LstmDirView<'_>,
    x: &ArrayView2<'_, f64>,
    cache: &DirCache,
    d_h: &Array2<f64>,
    reversed: bool,
    grads: &mut DirGrads<'_>,
) -> Array2<f64> {
    let n = x.nrows();
    let h = p.hidden();
    let mut d_z_all = Array2::<f64>::zeros((n, 4 * h));
    if n == 0 {
        return Array2::zeros((n, x.ncols()));
    }

    let order: Vec<usize> = time_order(n, reversed).collect();
    let mut dh_rec = Array1::<f64>::zeros(h);
    let mut dc_rec = Array1::<f64>::zeros(h);
    // Walk time in reverse of the forward order.
    for (step, &t) in order.iter().enumerate().rev() {
        let prev_t = if step == 0 { None } else { Some(order[step - 1]) };
        let mut d_z = Array1::<f64>::zeros(4 * h);
        for j in 0..h {
            let i_g = cache.gates[(t, j)];
            let f_g = cache.gates[(t, h + j)];
            let g_g = cache.gates[(t, 2 * h + j)];
            let o_g = cache.gates[(t, 3 * h + j)];
            let tc = cache.tanh_c[(t, j)];
            let c_prev = match prev_t {
                Some(pt) => cache.c[(pt, j)],
                None => 0.0,
            };
            let dh = d_h[(t, j)] + dh_rec[j];
            let dc = dc_rec[j] + dh * o_g * (1.0 - tc * tc);
            d_z[j] = dc * g_g * i_g * (1.0 - i_g);
            d_z[h + j] = dc * c_prev * f_g * (1.0 - f_g);
            d_z[2 * h + j] = dc * i_g * (1.0 - g_g * g_g);
            d_z[3 * h + j] = dh * tc * o_g * (1.0 - o_g);
            dc_rec[j] = dc * f_g;
        }
        // Recurrent gradient and per-step weight updates against h_{t-1}.
        dh_rec = p.w_h.t().dot(&d_z);
        if let Some(pt) = prev_t {
            let h_prev = cache.h.row(pt);
            for r in 0..4 * h {
                let dz_r = d_z[r];
                if dz_r != 0.0 {
                    for j in 0..h {
                        grads.w_h[(r, j)] += dz_r * h_prev[j];
                    }
                }
            }
        }
        for r in 0..4 * h {
            grads.b[r] += d_z[r];
        }
        d_z_all.row_mut(t).assign(&d_z);
    }
    // Batched input-side gradients.
    grads.w_x.scaled_add(1.0, &d_z_all.t().dot(x));
    d_z_all.dot(&p.w_x)
}

/// Caches of one residual biLSTM layer.
pub(crate) struct LayerCache {
    pub input: Array2<f64>,
    pub fwd: DirCache,
    pub bwd: DirCache,
}

impl LayerCache {
    /// Layer output: `concat(fwd, bwd) + input`.
    pub fn output(&self) -> Array2<f64> {
        let h = self.fwd.h.ncols();
        let mut out = self.input.clone();
        out.slice_mut(s![.., 0..h]).scaled_add(1.0, &self.fwd.h);
        out.slice_mut(s![.., h..2 * h]).scaled_add(1.0, &self.bwd.h);
        out
    }
}

/// Runs a pipeline's full residual stack, returning per-layer caches.
pub(crate) fn stack_forward_cached(
    params: &ModelParams,
    pipeline: Pipeline,
    input: Array2<f64>,
) -> Vec<LayerCache> {
    let layers = params.layout.arch.layers;
    let mut caches = Vec::with_capacity(layers);
    let mut x = input;
    for l in 0..layers {
        let fwd = dir_forward(&params.stack_dir(pipeline, l, 0), &x.view(), false);
        let bwd = dir_forward(&params.stack_dir(pipeline, l, 1), &x.view(), true);
        let cache = LayerCache { input: x, fwd, bwd };
        x = cache.output();
        caches.push(cache);
    }
    caches
}

/// Backpropagates the full stack; returns the gradient with respect to the
/// stack input and accumulates parameter gradients.
pub(crate) fn stack_backward(
    params: &ModelParams,
    pipeline: Pipeline,
    caches: &[LayerCache],
    mut d_out: Array2<f64>,
    grad: &mut [f64],
) -> Array2<f64> {
    let h = params.layout.arch.hidden();
    let stack = match pipeline {
        Pipeline::Document => &params.layout.cn_stack,
        Pipeline::Query => &params.layout.q_stack,
    };
    for (l, cache) in caches.iter().enumerate().rev() {
        let d_fwd = d_out.slice(s![.., 0..h]).to_owned();
        let d_bwd = d_out.slice(s![.., h..2 * h]).to_owned();
        let ids = stack[l];
        let x = cache.input.view();

        let mut dx = d_out; // residual path
        for (dir, (dh, c)) in [(0usize, (&d_fwd, &cache.fwd)), (1, (&d_bwd, &cache.bwd))] {
            let view = params.stack_dir(pipeline, l, dir);
            let mut g = DirGrads::from_flat(&params.layout, grad, ids[dir]);
            let dxc = dir_backward(&view, &x, c, dh, dir == 1, &mut g);
            dx += &dxc;
        }
        d_out = dx;
    }
    d_out
}

/// Like [`dir_forward`] but keeps only the hidden states, for inference.
fn dir_forward_light(p: &LstmDirView<'_>, x: &ArrayView2<'_, f64>, reversed: bool) -> Array2<f64> {
    let n = x.nrows();
    let h = p.hidden();
    let mut hs = Array2::<f64>::zeros((n, h));
    if n == 0 {
        return hs;
    }
    let xw = x.dot(&p.w_x.t());
    let mut h_prev = Array1::<f64>::zeros(h);
    let mut c_prev = Array1::<f64>::zeros(h);
    for t in time_order(n, reversed) {
        let wh = p.w_h.dot(&h_prev);
        for j in 0..h {
            let i_g = sigmoid(xw[(t, j)] + wh[j] + p.b[j]);
            let f_g = sigmoid(xw[(t, h + j)] + wh[h + j] + p.b[h + j]);
            let g_g = (xw[(t, 2 * h + j)] + wh[2 * h + j] + p.b[2 * h + j]).tanh();
            let o_g = sigmoid(xw[(t, 3 * h + j)] + wh[3 * h + j] + p.b[3 * h + j]);
            let c = f_g * c_prev[j] + i_g * g_g;
            c_prev[j] = c;
            hs[(t, j)] = o_g * c.tanh();
        }
        h_prev.assign(&hs.row(t));
    }
    hs
}

/// Stack forward without caches; returns only the final layer output.
pub(crate) fn stack_forward_light(
    params: &ModelParams,
    pipeline: Pipeline,
    input: Array2<f64>,
) -> Array2<f64> {
    let layers = params.layout.arch.layers;
    let h = params.layout.arch.hidden();
    let mut x = input;
    for l in 0..layers {
        let fwd = dir_forward_light(&params.stack_dir(pipeline, l, 0), &x.view(), false);
        let bwd = dir_forward_light(&params.stack_dir(pipeline, l, 1), &x.view(), true);
        x.slice_mut(s![.., 0..h]).scaled_add(1.0, &fwd);
        x.slice_mut(s![.., h..2 * h]).scaled_add(1.0, &bwd);
    }
    x
}

/// Runs the residual biLSTM stack of the given pipeline over `inputs`
/// (`(N, width)`, one row per position) and returns the final layer output.
///
/// With all-zero LSTM weights this is the identity map: every layer reduces
/// to its residual connection.
pub fn bilstm_stack_forward(
    params: &ModelParams,
    pipeline: Pipeline,
    inputs: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    let d = params.layout.arch.proj_width;
    if inputs.ncols() != d {
        return Err(Error::Mismatch(format!(
            "stack input width {} != {}",
            inputs.ncols(),
            d
        )));
    }
    let caches = stack_forward_cached(params, pipeline, inputs.to_owned());
    Ok(match caches.last() {
        Some(c) => c.output(),
        None => inputs.to_owned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ArchConfig;
    use ndarray::array;

    fn zeroed_params() -> ModelParams {
        let mut p = ModelParams::init(
            ArchConfig { proj_width: 4, layers: 2, cn_embed_dim: 2, query_embed_dim: 3, minlen_hidden: 2 },
            vec!["a".into(), "b".into()],
            3,
        )
        .unwrap();
        p.data.iter_mut().for_each(|v| *v = 0.0);
        p
    }

    #[test]
    fn zero_cell_maps_anything_to_zero() {
        let p = zeroed_params();
        let view = p.stack_dir(Pipeline::Document, 0, 0);
        let x = array![0.3, -1.2, 0.7, 2.0];
        let h0 = Array1::zeros(2);
        let c0 = Array1::zeros(2);
        let (h, c) = lstm_cell(&view, x.view(), h0.view(), c0.view()).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
        assert!(c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cell_matches_direct_equation_transcription() {
        // Independent 64-bit transcription of the cell equations.
        let p = ModelParams::init(
            ArchConfig { proj_width: 4, layers: 1, cn_embed_dim: 2, query_embed_dim: 3, minlen_hidden: 2 },
            vec!["a".into(), "b".into()],
            11,
        )
        .unwrap();
        let view = p.stack_dir(Pipeline::Query, 0, 1);
        let x = array![0.5, -0.25, 1.5, -2.0];
        let h_prev = array![0.1, -0.2];
        let c_prev = array![0.3, 0.05];
        let (h, c) = lstm_cell(&view, x.view(), h_prev.view(), c_prev.view()).unwrap();

        let hidden = 2usize;
        for j in 0..hidden {
            let affine = |row: usize| -> f64 {
                let mut z = view.b[row];
                for (k, &xv) in x.iter().enumerate() {
                    z += view.w_x[(row, k)] * xv;
                }
                for (k, &hv) in h_prev.iter().enumerate() {
                    z += view.w_h[(row, k)] * hv;
                }
                z
            };
            let i_g = 1.0 / (1.0 + (-affine(j)).exp());
            let f_g = 1.0 / (1.0 + (-affine(hidden + j)).exp());
            let g_g = affine(2 * hidden + j).tanh();
            let o_g = 1.0 / (1.0 + (-affine(3 * hidden + j)).exp());
            let c_ref = f_g * c_prev[j] + i_g * g_g;
            let h_ref = o_g * c_ref.tanh();
            assert!((c[j] - c_ref).abs() < 1e-6);
            assert!((h[j] - h_ref).abs() < 1e-6);
        }
    }

    #[test]
    fn cell_rejects_shape_mismatch() {
        let p = zeroed_params();
        let view = p.stack_dir(Pipeline::Document, 0, 0);
        let x = array![1.0, 2.0]; // wrong input width
        let h0 = Array1::zeros(2);
        let c0 = Array1::zeros(2);
        assert!(lstm_cell(&view, x.view(), h0.view(), c0.view()).is_err());
    }

    #[test]
    fn zero_weight_stack_is_the_identity() {
        let p = zeroed_params();
        let x = array![[0.1, 0.2, -0.3, 0.4], [1.0, -1.0, 0.5, 0.25], [0.0, 2.0, -2.0, 1.0]];
        let out = bilstm_stack_forward(&p, Pipeline::Document, x.view()).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn single_position_sequence_reaches_both_directions() {
        let p = ModelParams::init(
            ArchConfig { proj_width: 4, layers: 1, cn_embed_dim: 2, query_embed_dim: 3, minlen_hidden: 2 },
            vec!["a".into(), "b".into()],
            5,
        )
        .unwrap();
        let x = array![[0.4, -0.4, 0.8, 0.0]];
        let out = bilstm_stack_forward(&p, Pipeline::Query, x.view()).unwrap();
        // Both halves differ from the pure residual, so both directions ran.
        assert_ne!(out[(0, 0)], x[(0, 0)]);
        assert_ne!(out[(0, 2)], x[(0, 2)]);
    }

    #[test]
    fn empty_sequence_is_legal() {
        let p = zeroed_params();
        let x = Array2::<f64>::zeros((0, 4));
        let out = bilstm_stack_forward(&p, Pipeline::Document, x.view()).unwrap();
        assert_eq!(out.nrows(), 0);
    }
}

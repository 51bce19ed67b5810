//! Reverse-mode differentiation over a fixed kernel set.
//!
//! A [`Tape`] is built per forward pass: each operation runs eagerly,
//! records its inputs, and stashes whatever the backward pass needs
//! (argmax indices, im2col buffers, sample taps). `backward` walks the
//! nodes in reverse, producing one gradient array per node; gradients of
//! parameter leaves are then folded into a
//! [`ParamStore`](super::params::ParamStore).
//!
//! Shape errors in these kernels are programmer errors and assert; user-facing
//! validation happens in the layer wrappers.

use super::array::NdArray;
use super::params::{ParamId, ParamStore};
use crate::distributions::{
    self, constrain_params, constrain_params_vjp, gauss2_nll, transform_params,
    transform_params_vjp, vonmises_nll, Gauss2, VonMisesDist, PARAMS_PER_STEP,
};
use crate::geometry::wrap_angle;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// One bilinear sample: up to four `(spatial_index, weight)` taps into an
/// `H*W` plane. Out-of-bounds taps are simply absent (zero padding).
#[derive(Debug, Clone, Default)]
pub struct BilinearTaps {
    pub taps: [(usize, f64); 4],
    pub count: usize,
}

/// Ground-truth waypoints for one actor: `(x, y, heading)` per forecast
/// step, expressed in the same frame as the actor's predicted parameters.
pub type WaypointTargets = Vec<[f64; 3]>;

enum Op {
    Leaf,
    Matmul(Var, Var),
    AddRowBroadcast(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    /// `(1 - z) * h + z * c`, elementwise.
    GruCombine { z: Var, h: Var, c: Var },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterMax { src: Var, argmax: Vec<i64> },
    Conv2d { input: Var, weight: Var, bias: Var, stride: usize, pad: usize, cols: NdArray },
    GlobalMaxPool { src: Var, argmax: Vec<usize> },
    BilinearGather { src: Var, samples: Vec<BilinearTaps> },
    SliceChannel { src: Var, channel: usize },
    ChannelsAsCols { src: Var, from: usize },
    SumAll(Var),
    RowConstrain(Var),
    // The translation is not stored: it shifts the mean additively, so the
    // reverse pass depends on the rotation alone.
    RowTransform { src: Var, rots: Vec<f64> },
    TrajectoryNll { con: Var, rows: Vec<usize>, targets: Vec<WaypointTargets> },
    BceSelected { logits: Var, items: Vec<(usize, f64)> },
    SmoothL1Selected { pred: Var, items: Vec<(usize, [f64; 6])> },
}

struct Node {
    value: NdArray,
    op: Op,
    param: Option<ParamId>,
    /// Distance of this node to its nearest non-differentiable point
    /// (ReLU zero crossing, max-op tie, angle-wrap seam). Infinity for
    /// smooth ops. Used to reject finite-difference check points that sit
    /// on a kink.
    kink_margin: f64,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads {
    by_node: Vec<Option<NdArray>>,
}

impl Grads {
    /// Gradient of the loss with respect to a node (zero array if the node
    /// does not influence the loss).
    pub fn of(&self, tape: &Tape, var: Var) -> NdArray {
        self.by_node[var.0]
            .clone()
            .unwrap_or_else(|| NdArray::zeros(tape.nodes[var.0].value.shape()))
    }

    /// Fold parameter-leaf gradients into the store, scaled.
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore, scale: f64) {
        for (i, node) in tape.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, &self.by_node[i]) {
                store.accumulate_grad(id, g, scale);
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &NdArray {
        &self.nodes[var.0].value
    }

    /// Smallest kink margin over the whole graph (see [`Node::kink_margin`]).
    pub fn kink_margin(&self) -> f64 {
        self.nodes.iter().map(|n| n.kink_margin).fold(f64::INFINITY, f64::min)
    }

    fn push(&mut self, value: NdArray, op: Op, param: Option<ParamId>, kink: f64) -> Var {
        self.nodes.push(Node { value, op, param, kink_margin: kink });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (no gradient tracking beyond this node).
    pub fn constant(&mut self, value: NdArray) -> Var {
        self.push(value, Op::Leaf, None, f64::INFINITY)
    }

    /// A leaf bound to a store parameter; its gradient is folded back into
    /// the store by [`Grads::accumulate_into`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Leaf, Some(id), f64::INFINITY)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::Matmul(a, b), None, f64::INFINITY)
    }

    /// `[r, c] + [c]`, broadcasting the bias across rows.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(bias);
        assert_eq!(xv.rank(), 2, "add_row_broadcast: x rank {}", xv.rank());
        assert_eq!(bv.rank(), 1, "add_row_broadcast: bias rank {}", bv.rank());
        assert_eq!(xv.cols(), bv.len(), "add_row_broadcast: {} vs {}", xv.cols(), bv.len());
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = xv.clone();
        for i in 0..r {
            for j in 0..c {
                let v = out.at2(i, j) + bv.data()[j];
                out.set2(i, j, v);
            }
        }
        self.push(out, Op::AddRowBroadcast(x, bias), None, f64::INFINITY)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add: {:?} vs {:?}", av.shape(), bv.shape());
        let mut out = av.clone();
        out.add_scaled(bv, 1.0);
        self.push(out, Op::Add(a, b), None, f64::INFINITY)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul: {:?} vs {:?}", av.shape(), bv.shape());
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = NdArray::from_vec(av.shape(), data);
        self.push(out, Op::Mul(a, b), None, f64::INFINITY)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s), None, f64::INFINITY)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let margin = av.data().iter().fold(f64::INFINITY, |m, &v| m.min(v.abs()));
        let out = av.map(|v| v.max(0.0));
        self.push(out, Op::Relu(a), None, margin)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(distributions::sigmoid);
        self.push(out, Op::Sigmoid(a), None, f64::INFINITY)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), None, f64::INFINITY)
    }

    /// GRU state blend `(1 - z) * h + z * c`.
    pub fn gru_combine(&mut self, z: Var, h: Var, c: Var) -> Var {
        let (zv, hv, cv) = (self.value(z), self.value(h), self.value(c));
        assert_eq!(zv.shape(), hv.shape(), "gru_combine shapes");
        assert_eq!(zv.shape(), cv.shape(), "gru_combine shapes");
        let data = zv
            .data()
            .iter()
            .zip(hv.data())
            .zip(cv.data())
            .map(|((&z, &h), &c)| (1.0 - z) * h + z * c)
            .collect();
        let out = NdArray::from_vec(zv.shape(), data);
        self.push(out, Op::GruCombine { z, h, c }, None, f64::INFINITY)
    }

    /// Concatenate rank-2 arrays with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = NdArray::zeros(&[rows, total]);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols: row mismatch");
            for r in 0..rows {
                for c in 0..pv.cols() {
                    out.set2(r, offset + c, pv.at2(r, c));
                }
            }
            offset += pv.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), None, f64::INFINITY)
    }

    /// Stack rank-1 arrays of equal length into a rank-2 array.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack_rows: no inputs");
        let cols = self.value(parts[0]).len();
        let mut data = Vec::with_capacity(parts.len() * cols);
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rank(), 1, "stack_rows: rank {} input", pv.rank());
            assert_eq!(pv.len(), cols, "stack_rows: length mismatch");
            data.extend_from_slice(pv.data());
        }
        let out = NdArray::from_vec(&[parts.len(), cols], data);
        self.push(out, Op::StackRows(parts.to_vec()), None, f64::INFINITY)
    }

    /// `out[r] = src[indices[r]]` over rows of a rank-2 array.
    pub fn gather_rows(&mut self, src: Var, indices: Vec<usize>) -> Var {
        let sv = self.value(src);
        let cols = sv.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in &indices {
            assert!(i < sv.rows(), "gather_rows: index {i} out of {}", sv.rows());
            data.extend_from_slice(sv.row(i));
        }
        let out = NdArray::from_vec(&[indices.len(), cols], data);
        self.push(out, Op::GatherRows(src, indices), None, f64::INFINITY)
    }

    /// Feature-wise max reduction of edge rows onto destination rows.
    ///
    /// `src` is `[E, F]`, `dest[e]` names the output row for source row `e`,
    /// and rows of the `[rows_out, F]` output with no contributing source
    /// are zero-filled. Gradients flow to the argmax entry only; ties break
    /// toward the lowest source index.
    pub fn scatter_max(&mut self, src: Var, dest: &[usize], rows_out: usize) -> Var {
        let sv = self.value(src);
        assert_eq!(sv.rank(), 2, "scatter_max: src rank {}", sv.rank());
        assert_eq!(sv.rows(), dest.len(), "scatter_max: {} rows vs {} ids", sv.rows(), dest.len());
        let cols = sv.cols();
        let mut best = vec![f64::NEG_INFINITY; rows_out * cols];
        let mut second = vec![f64::NEG_INFINITY; rows_out * cols];
        let mut argmax = vec![-1i64; rows_out * cols];
        for (e, &d) in dest.iter().enumerate() {
            assert!(d < rows_out, "scatter_max: dest {d} out of {rows_out}");
            for c in 0..cols {
                let v = sv.at2(e, c);
                let slot = d * cols + c;
                if v > best[slot] {
                    second[slot] = best[slot];
                    best[slot] = v;
                    argmax[slot] = e as i64;
                } else if v > second[slot] {
                    second[slot] = v;
                }
            }
        }
        let mut margin = f64::INFINITY;
        let mut out = NdArray::zeros(&[rows_out, cols]);
        for slot in 0..rows_out * cols {
            if argmax[slot] >= 0 {
                out.data_mut()[slot] = best[slot];
                if second[slot].is_finite() {
                    margin = margin.min(best[slot] - second[slot]);
                }
            }
        }
        self.push(out, Op::ScatterMax { src, argmax }, None, margin)
    }

    /// 2-D cross-correlation with zero padding.
    ///
    /// `input` is `[C_in, H, W]`, `weight` `[C_out, C_in, k, k]`, `bias`
    /// `[C_out]`; output is `[C_out, H_out, W_out]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let iv = self.value(input);
        let wv = self.value(weight);
        let bv = self.value(bias);
        assert_eq!(iv.rank(), 3, "conv2d: input rank {}", iv.rank());
        assert_eq!(wv.rank(), 4, "conv2d: weight rank {}", wv.rank());
        let (c_in, h, w) = (iv.shape()[0], iv.shape()[1], iv.shape()[2]);
        let (c_out, c_in2, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(c_in, c_in2, "conv2d: {c_in} input channels vs weight {c_in2}");
        assert_eq!(kh, kw, "conv2d: only square kernels supported");
        assert_eq!(bv.len(), c_out, "conv2d: bias length");
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d: kernel larger than input");
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (w + 2 * pad - kw) / stride + 1;

        let cols = im2col(iv, kh, stride, pad, h_out, w_out);
        let w_mat = NdArray::from_vec(&[c_out, c_in * kh * kw], wv.data().to_vec());
        let mut out_mat = w_mat.matmul(&cols);
        for c in 0..c_out {
            let b = bv.data()[c];
            for v in &mut out_mat.data_mut()[c * h_out * w_out..(c + 1) * h_out * w_out] {
                *v += b;
            }
        }
        let out = NdArray::from_vec(&[c_out, h_out, w_out], out_mat.into_data());
        self.push(out, Op::Conv2d { input, weight, bias, stride, pad, cols }, None, f64::INFINITY)
    }

    /// Per-channel max over all spatial positions: `[C, H, W] -> [C]`.
    /// Ties break toward the lowest spatial index.
    pub fn global_max_pool(&mut self, src: Var) -> Var {
        let sv = self.value(src);
        assert_eq!(sv.rank(), 3, "global_max_pool: rank {}", sv.rank());
        let (c, spatial) = (sv.shape()[0], sv.shape()[1] * sv.shape()[2]);
        assert!(spatial > 0, "global_max_pool: empty plane");
        let mut out = NdArray::zeros(&[c]);
        let mut argmax = vec![0usize; c];
        let mut margin = f64::INFINITY;
        for ch in 0..c {
            let plane = &sv.data()[ch * spatial..(ch + 1) * spatial];
            let (mut best, mut arg, mut second) = (f64::NEG_INFINITY, 0usize, f64::NEG_INFINITY);
            for (i, &v) in plane.iter().enumerate() {
                if v > best {
                    second = best;
                    best = v;
                    arg = i;
                } else if v > second {
                    second = v;
                }
            }
            if second.is_finite() {
                margin = margin.min(best - second);
            }
            out.data_mut()[ch] = best;
            argmax[ch] = arg;
        }
        self.push(out, Op::GlobalMaxPool { src, argmax }, None, margin)
    }

    /// Gather precomputed bilinear samples from every channel of a feature
    /// plane: `src` is `[C, H, W]`, `samples` has one tap set per output
    /// cell, and the output is `[C, rows, cols]`. Differentiable with
    /// respect to the features only.
    pub fn bilinear_gather(
        &mut self,
        src: Var,
        samples: Vec<BilinearTaps>,
        rows: usize,
        cols: usize,
    ) -> Var {
        let sv = self.value(src);
        assert_eq!(sv.rank(), 3, "bilinear_gather: rank {}", sv.rank());
        assert_eq!(samples.len(), rows * cols, "bilinear_gather: sample count");
        let (c, spatial) = (sv.shape()[0], sv.shape()[1] * sv.shape()[2]);
        let mut out = NdArray::zeros(&[c, rows, cols]);
        for ch in 0..c {
            let plane = &sv.data()[ch * spatial..(ch + 1) * spatial];
            let out_plane = &mut out.data_mut()[ch * rows * cols..(ch + 1) * rows * cols];
            for (cell, s) in samples.iter().enumerate() {
                let mut acc = 0.0;
                for &(idx, w) in &s.taps[..s.count] {
                    acc += w * plane[idx];
                }
                out_plane[cell] = acc;
            }
        }
        self.push(out, Op::BilinearGather { src, samples }, None, f64::INFINITY)
    }

    /// Extract one channel of a `[C, H, W]` array as a flat `[H*W]` vector.
    pub fn slice_channel(&mut self, src: Var, channel: usize) -> Var {
        let sv = self.value(src);
        assert_eq!(sv.rank(), 3, "slice_channel: rank {}", sv.rank());
        let spatial = sv.shape()[1] * sv.shape()[2];
        assert!(channel < sv.shape()[0], "slice_channel: {channel} out of {}", sv.shape()[0]);
        let data = sv.data()[channel * spatial..(channel + 1) * spatial].to_vec();
        let out = NdArray::from_vec(&[spatial], data);
        self.push(out, Op::SliceChannel { src, channel }, None, f64::INFINITY)
    }

    /// View trailing channels of a `[C, H, W]` array as per-cell feature
    /// rows: output `[H*W, C - from]` with `out[a, j] = src[from + j, a]`.
    pub fn channels_as_cols(&mut self, src: Var, from: usize) -> Var {
        let sv = self.value(src);
        assert_eq!(sv.rank(), 3, "channels_as_cols: rank {}", sv.rank());
        let c = sv.shape()[0];
        assert!(from < c, "channels_as_cols: from {from} out of {c}");
        let spatial = sv.shape()[1] * sv.shape()[2];
        let n = c - from;
        let mut out = NdArray::zeros(&[spatial, n]);
        for j in 0..n {
            let plane = &sv.data()[(from + j) * spatial..(from + j + 1) * spatial];
            for a in 0..spatial {
                out.set2(a, j, plane[a]);
            }
        }
        self.push(out, Op::ChannelsAsCols { src, from }, None, f64::INFINITY)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(NdArray::scalar(s), Op::SumAll(a), None, f64::INFINITY)
    }

    /// Apply the raw-to-constrained parameter map to every 7-channel block
    /// of every row.
    pub fn row_constrain(&mut self, src: Var) -> Var {
        let sv = self.value(src);
        assert_eq!(sv.rank(), 2, "row_constrain: rank {}", sv.rank());
        assert_eq!(sv.cols() % PARAMS_PER_STEP, 0, "row_constrain: cols {}", sv.cols());
        let mut out = sv.clone();
        let mut margin = f64::INFINITY;
        for r in 0..sv.rows() {
            for t in 0..sv.cols() / PARAMS_PER_STEP {
                let base = r * sv.cols() + t * PARAMS_PER_STEP;
                let block: [f64; PARAMS_PER_STEP] =
                    sv.data()[base..base + PARAMS_PER_STEP].try_into().unwrap();
                let con = constrain_params(&block);
                out.data_mut()[base..base + PARAMS_PER_STEP].copy_from_slice(&con);
                // Wrapping the heading mean is non-differentiable at the seam.
                let eta = block[distributions::channel::ETA];
                margin = margin.min(std::f64::consts::PI - wrap_angle(eta).abs());
            }
        }
        self.push(out, Op::RowConstrain(src), None, margin)
    }

    /// Re-express every 7-channel block of row `r` through the rigid motion
    /// `(rots[r], trans[r])`. The motions are constants.
    pub fn row_transform(&mut self, src: Var, rots: Vec<f64>, trans: Vec<[f64; 2]>) -> Var {
        let sv = self.value(src);
        assert_eq!(sv.rank(), 2, "row_transform: rank {}", sv.rank());
        assert_eq!(sv.rows(), rots.len(), "row_transform: rows vs rots");
        assert_eq!(sv.rows(), trans.len(), "row_transform: rows vs trans");
        assert_eq!(sv.cols() % PARAMS_PER_STEP, 0, "row_transform: cols {}", sv.cols());
        let mut out = sv.clone();
        let mut margin = f64::INFINITY;
        for r in 0..sv.rows() {
            for t in 0..sv.cols() / PARAMS_PER_STEP {
                let base = r * sv.cols() + t * PARAMS_PER_STEP;
                let block: [f64; PARAMS_PER_STEP] =
                    sv.data()[base..base + PARAMS_PER_STEP].try_into().unwrap();
                let moved = transform_params(&block, rots[r], trans[r]);
                out.data_mut()[base..base + PARAMS_PER_STEP].copy_from_slice(&moved);
                margin = margin
                    .min(std::f64::consts::PI - moved[distributions::channel::ETA].abs());
            }
        }
        self.push(out, Op::RowTransform { src, rots }, None, margin)
    }

    /// Summed forecast negative log-likelihood over selected actor rows.
    ///
    /// `con` holds constrained parameters (`[N, steps*7]`); `rows[i]` names
    /// the actor row scored against `targets[i]`. Returns a scalar along
    /// with the position/heading components of the sum.
    pub fn trajectory_nll(
        &mut self,
        con: Var,
        rows: Vec<usize>,
        targets: Vec<WaypointTargets>,
    ) -> (Var, NllBreakdown) {
        let cv = self.value(con);
        assert_eq!(cv.rank(), 2, "trajectory_nll: rank {}", cv.rank());
        assert_eq!(rows.len(), targets.len(), "trajectory_nll: rows vs targets");
        let steps = cv.cols() / PARAMS_PER_STEP;
        let mut gauss_sum = 0.0;
        let mut vm_sum = 0.0;
        let mut count = 0usize;
        for (i, &r) in rows.iter().enumerate() {
            assert!(r < cv.rows(), "trajectory_nll: row {r} out of {}", cv.rows());
            assert_eq!(targets[i].len(), steps, "trajectory_nll: target steps");
            for t in 0..steps {
                let base = r * cv.cols() + t * PARAMS_PER_STEP;
                let block: [f64; PARAMS_PER_STEP] =
                    cv.data()[base..base + PARAMS_PER_STEP].try_into().unwrap();
                let (g, vm) = block_distributions(&block);
                let tgt = targets[i][t];
                gauss_sum += gauss2_nll(&g, [tgt[0], tgt[1]]).loss;
                vm_sum += vonmises_nll(&vm, tgt[2]).loss;
                count += 1;
            }
        }
        let breakdown = NllBreakdown { position: gauss_sum, heading: vm_sum, terms: count };
        let var = self.push(
            NdArray::scalar(gauss_sum + vm_sum),
            Op::TrajectoryNll { con, rows, targets },
            None,
            f64::INFINITY,
        );
        (var, breakdown)
    }

    /// Binary cross-entropy (with logits) summed over selected anchors.
    /// `items` pairs a flat anchor index with its 0/1 target.
    pub fn bce_selected(&mut self, logits: Var, items: Vec<(usize, f64)>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rank(), 1, "bce_selected: rank {}", lv.rank());
        let mut sum = 0.0;
        for &(idx, y) in &items {
            assert!(idx < lv.len(), "bce_selected: index {idx} out of {}", lv.len());
            let l = lv.data()[idx];
            // Stable formulation of -y log s - (1-y) log(1-s).
            sum += l.max(0.0) - l * y + (-l.abs()).exp().ln_1p();
        }
        self.push(NdArray::scalar(sum), Op::BceSelected { logits, items }, None, f64::INFINITY)
    }

    /// Smooth-L1 (beta = 1) summed over selected anchor rows and their six
    /// regression channels.
    pub fn smooth_l1_selected(&mut self, pred: Var, items: Vec<(usize, [f64; 6])>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.rank(), 2, "smooth_l1_selected: rank {}", pv.rank());
        assert_eq!(pv.cols(), 6, "smooth_l1_selected: cols {}", pv.cols());
        let mut sum = 0.0;
        let mut margin = f64::INFINITY;
        for &(idx, target) in &items {
            assert!(idx < pv.rows(), "smooth_l1_selected: row {idx} out of {}", pv.rows());
            for j in 0..6 {
                let d = pv.at2(idx, j) - target[j];
                margin = margin.min((d.abs() - 1.0).abs());
                sum += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
            }
        }
        self.push(NdArray::scalar(sum), Op::SmoothL1Selected { pred, items }, None, margin)
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward: loss is not scalar");
        let mut grads: Vec<Option<NdArray>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(NdArray::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { by_node: grads }
    }

    fn backward_node(&self, i: usize, g: &NdArray, grads: &mut [Option<NdArray>]) {
        let acc = |grads: &mut [Option<NdArray>], p: Var, delta: NdArray| {
            match &mut grads[p.0] {
                Some(existing) => existing.add_scaled(&delta, 1.0),
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let da = g.matmul(&self.value(*b).transpose2());
                let db = self.value(*a).transpose2().matmul(g);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::AddRowBroadcast(x, bias) => {
                let (r, c) = (g.rows(), g.cols());
                let mut db = NdArray::zeros(&[c]);
                for j in 0..c {
                    let mut s = 0.0;
                    for row in 0..r {
                        s += g.at2(row, j);
                    }
                    db.data_mut()[j] = s;
                }
                acc(grads, *x, g.clone());
                acc(grads, *bias, db);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = NdArray::from_vec(
                    g.shape(),
                    g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
                );
                let db = NdArray::from_vec(
                    g.shape(),
                    g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect(),
                );
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Scale(a, s) => {
                acc(grads, *a, g.map(|v| v * s));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let da = NdArray::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(av.data())
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect(),
                );
                acc(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let da = NdArray::from_vec(
                    g.shape(),
                    g.data().iter().zip(y.data()).map(|(&gv, &s)| gv * s * (1.0 - s)).collect(),
                );
                acc(grads, *a, da);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                let da = NdArray::from_vec(
                    g.shape(),
                    g.data().iter().zip(y.data()).map(|(&gv, &t)| gv * (1.0 - t * t)).collect(),
                );
                acc(grads, *a, da);
            }
            Op::GruCombine { z, h, c } => {
                let (zv, hv, cv) = (self.value(*z), self.value(*h), self.value(*c));
                let mut dz = NdArray::zeros(g.shape());
                let mut dh = NdArray::zeros(g.shape());
                let mut dc = NdArray::zeros(g.shape());
                for idx in 0..g.len() {
                    let gv = g.data()[idx];
                    dz.data_mut()[idx] = gv * (cv.data()[idx] - hv.data()[idx]);
                    dh.data_mut()[idx] = gv * (1.0 - zv.data()[idx]);
                    dc.data_mut()[idx] = gv * zv.data()[idx];
                }
                acc(grads, *z, dz);
                acc(grads, *h, dh);
                acc(grads, *c, dc);
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    let mut dp = NdArray::zeros(&[rows, cols]);
                    for r in 0..rows {
                        for c in 0..cols {
                            dp.set2(r, c, g.at2(r, offset + c));
                        }
                    }
                    offset += cols;
                    acc(grads, p, dp);
                }
            }
            Op::StackRows(parts) => {
                for (r, &p) in parts.iter().enumerate() {
                    let dp = NdArray::from_vec(&[g.cols()], g.row(r).to_vec());
                    acc(grads, p, dp);
                }
            }
            Op::GatherRows(src, indices) => {
                let sv = self.value(*src);
                let mut ds = NdArray::zeros(sv.shape());
                for (r, &idx) in indices.iter().enumerate() {
                    for c in 0..g.cols() {
                        let v = ds.at2(idx, c) + g.at2(r, c);
                        ds.set2(idx, c, v);
                    }
                }
                acc(grads, *src, ds);
            }
            Op::ScatterMax { src, argmax } => {
                let sv = self.value(*src);
                let cols = sv.cols();
                let mut ds = NdArray::zeros(sv.shape());
                for (slot, &arg) in argmax.iter().enumerate() {
                    if arg >= 0 {
                        let (_out_row, c) = (slot / cols, slot % cols);
                        let v = ds.at2(arg as usize, c) + g.data()[slot];
                        ds.set2(arg as usize, c, v);
                    }
                }
                acc(grads, *src, ds);
            }
            Op::Conv2d { input, weight, bias, stride, pad, cols } => {
                let iv = self.value(*input);
                let wv = self.value(*weight);
                let (c_in, h, w) = (iv.shape()[0], iv.shape()[1], iv.shape()[2]);
                let c_out = wv.shape()[0];
                let k = wv.shape()[2];
                let (h_out, w_out) = (g.shape()[1], g.shape()[2]);
                let g_mat = NdArray::from_vec(&[c_out, h_out * w_out], g.data().to_vec());

                let dw_mat = g_mat.matmul(&cols.transpose2());
                let dw = NdArray::from_vec(wv.shape(), dw_mat.into_data());

                let mut db = NdArray::zeros(&[c_out]);
                for c in 0..c_out {
                    db.data_mut()[c] =
                        g_mat.data()[c * h_out * w_out..(c + 1) * h_out * w_out].iter().sum();
                }

                let w_mat = NdArray::from_vec(&[c_out, c_in * k * k], wv.data().to_vec());
                let d_cols = w_mat.transpose2().matmul(&g_mat);
                let di = col2im(&d_cols, c_in, h, w, k, *stride, *pad, h_out, w_out);

                acc(grads, *input, di);
                acc(grads, *weight, dw);
                acc(grads, *bias, db);
            }
            Op::GlobalMaxPool { src, argmax } => {
                let sv = self.value(*src);
                let spatial = sv.shape()[1] * sv.shape()[2];
                let mut ds = NdArray::zeros(sv.shape());
                for (c, &arg) in argmax.iter().enumerate() {
                    ds.data_mut()[c * spatial + arg] = g.data()[c];
                }
                acc(grads, *src, ds);
            }
            Op::BilinearGather { src, samples } => {
                let sv = self.value(*src);
                let spatial = sv.shape()[1] * sv.shape()[2];
                let cells = samples.len();
                let channels = sv.shape()[0];
                let mut ds = NdArray::zeros(sv.shape());
                for ch in 0..channels {
                    for (cell, s) in samples.iter().enumerate() {
                        let gv = g.data()[ch * cells + cell];
                        if gv == 0.0 {
                            continue;
                        }
                        for &(idx, wt) in &s.taps[..s.count] {
                            ds.data_mut()[ch * spatial + idx] += wt * gv;
                        }
                    }
                }
                acc(grads, *src, ds);
            }
            Op::SliceChannel { src, channel } => {
                let sv = self.value(*src);
                let spatial = sv.shape()[1] * sv.shape()[2];
                let mut ds = NdArray::zeros(sv.shape());
                ds.data_mut()[channel * spatial..(channel + 1) * spatial]
                    .copy_from_slice(g.data());
                acc(grads, *src, ds);
            }
            Op::ChannelsAsCols { src, from } => {
                let sv = self.value(*src);
                let spatial = sv.shape()[1] * sv.shape()[2];
                let mut ds = NdArray::zeros(sv.shape());
                let n = sv.shape()[0] - from;
                for j in 0..n {
                    for a in 0..spatial {
                        ds.data_mut()[(from + j) * spatial + a] = g.at2(a, j);
                    }
                }
                acc(grads, *src, ds);
            }
            Op::SumAll(a) => {
                let gv = g.item();
                acc(grads, *a, NdArray::filled(self.value(*a).shape(), gv));
            }
            Op::RowConstrain(src) => {
                let sv = self.value(*src);
                let mut ds = NdArray::zeros(sv.shape());
                for r in 0..sv.rows() {
                    for t in 0..sv.cols() / PARAMS_PER_STEP {
                        let base = r * sv.cols() + t * PARAMS_PER_STEP;
                        let raw: [f64; PARAMS_PER_STEP] =
                            sv.data()[base..base + PARAMS_PER_STEP].try_into().unwrap();
                        let up: [f64; PARAMS_PER_STEP] =
                            g.data()[base..base + PARAMS_PER_STEP].try_into().unwrap();
                        let back = constrain_params_vjp(&raw, &up);
                        ds.data_mut()[base..base + PARAMS_PER_STEP].copy_from_slice(&back);
                    }
                }
                acc(grads, *src, ds);
            }
            Op::RowTransform { src, rots } => {
                let sv = self.value(*src);
                let mut ds = NdArray::zeros(sv.shape());
                for r in 0..sv.rows() {
                    for t in 0..sv.cols() / PARAMS_PER_STEP {
                        let base = r * sv.cols() + t * PARAMS_PER_STEP;
                        let con: [f64; PARAMS_PER_STEP] =
                            sv.data()[base..base + PARAMS_PER_STEP].try_into().unwrap();
                        let up: [f64; PARAMS_PER_STEP] =
                            g.data()[base..base + PARAMS_PER_STEP].try_into().unwrap();
                        let back = transform_params_vjp(&con, rots[r], &up);
                        ds.data_mut()[base..base + PARAMS_PER_STEP].copy_from_slice(&back);
                    }
                }
                acc(grads, *src, ds);
            }
            Op::TrajectoryNll { con, rows, targets } => {
                let cv = self.value(*con);
                let steps = cv.cols() / PARAMS_PER_STEP;
                let gv = g.item();
                let mut ds = NdArray::zeros(cv.shape());
                for (i, &r) in rows.iter().enumerate() {
                    for t in 0..steps {
                        let base = r * cv.cols() + t * PARAMS_PER_STEP;
                        let block: [f64; PARAMS_PER_STEP] =
                            cv.data()[base..base + PARAMS_PER_STEP].try_into().unwrap();
                        let (gauss, vm) = block_distributions(&block);
                        let tgt = targets[i][t];
                        let gn = gauss2_nll(&gauss, [tgt[0], tgt[1]]);
                        let vn = vonmises_nll(&vm, tgt[2]);
                        use distributions::channel::*;
                        let d = &mut ds.data_mut()[base..base + PARAMS_PER_STEP];
                        d[MU_X] += gv * gn.d_mean[0];
                        d[MU_Y] += gv * gn.d_mean[1];
                        d[SIGMA_X] += gv * gn.d_sigma[0];
                        d[SIGMA_Y] += gv * gn.d_sigma[1];
                        d[RHO] += gv * gn.d_rho;
                        d[ETA] += gv * vn.d_eta;
                        d[KAPPA] += gv * vn.d_kappa;
                    }
                }
                acc(grads, *con, ds);
            }
            Op::BceSelected { logits, items } => {
                let lv = self.value(*logits);
                let gv = g.item();
                let mut dl = NdArray::zeros(lv.shape());
                for &(idx, y) in items {
                    dl.data_mut()[idx] += gv * (distributions::sigmoid(lv.data()[idx]) - y);
                }
                acc(grads, *logits, dl);
            }
            Op::SmoothL1Selected { pred, items } => {
                let pv = self.value(*pred);
                let gv = g.item();
                let mut dp = NdArray::zeros(pv.shape());
                for &(idx, target) in items {
                    for j in 0..6 {
                        let d = pv.at2(idx, j) - target[j];
                        let slope = if d.abs() < 1.0 { d } else { d.signum() };
                        let v = dp.at2(idx, j) + gv * slope;
                        dp.set2(idx, j, v);
                    }
                }
                acc(grads, *pred, dp);
            }
        }
    }
}

/// Position/heading split of a summed trajectory NLL.
#[derive(Debug, Clone, Copy, Default)]
pub struct NllBreakdown {
    pub position: f64,
    pub heading: f64,
    pub terms: usize,
}

impl NllBreakdown {
    pub fn total(&self) -> f64 {
        self.position + self.heading
    }
}

fn block_distributions(block: &[f64; PARAMS_PER_STEP]) -> (Gauss2, VonMisesDist) {
    use distributions::channel::*;
    // Constrained blocks are valid by construction of the constraint map.
    let g = Gauss2 {
        mean: [block[MU_X], block[MU_Y]],
        sigma: [block[SIGMA_X], block[SIGMA_Y]],
        rho: block[RHO],
    };
    let vm = VonMisesDist { eta: block[ETA], kappa: block[KAPPA] };
    (g, vm)
}

fn im2col(
    input: &NdArray,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
) -> NdArray {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let mut cols = NdArray::zeros(&[c_in * k * k, h_out * w_out]);
    let cols_w = h_out * w_out;
    for c in 0..c_in {
        let plane = &input.data()[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let out_row = &mut cols.data_mut()[row * cols_w..(row + 1) * cols_w];
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out_row[oy * w_out + ox] = plane[iy as usize * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    d_cols: &NdArray,
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
) -> NdArray {
    let mut out = NdArray::zeros(&[c_in, h, w]);
    let cols_w = h_out * w_out;
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src_row = &d_cols.data()[row * cols_w..(row + 1) * cols_w];
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out.data_mut()[(c * h + iy as usize) * w + ix as usize] +=
                            src_row[oy * w_out + ox];
                    }
                }
            }
        }
    }
    out
}

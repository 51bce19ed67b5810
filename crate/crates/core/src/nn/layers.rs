//! Layer wrappers over the tape kernels: multi-layer perceptron, GRU
//! cell, and 2-D convolution.
//!
//! Each layer registers its parameters in a [`ParamStore`] under
//! `"{name}.{slot}"` and replays them onto a [`Tape`] at forward time, so
//! one layer instance can be applied repeatedly within a single graph
//! (weight sharing) with gradients from every application summed.

use rand::Rng;

use super::array::NdArray;
use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Scale for variance-preserving random init given the activation that
/// consumes the output: `sqrt(2/fan_in)` ahead of ReLU, `sqrt(1/fan_in)`
/// ahead of linear/sigmoid/tanh outputs.
fn init_weight<R: Rng>(rng: &mut R, rows: usize, cols: usize, gain2: f64) -> NdArray {
    NdArray::randn(rng, &[rows, cols], (gain2 / rows as f64).sqrt())
}

/// Architecture of an [`Mlp`]: input width plus the width of every layer
/// (hidden layers use ReLU, the final entry is the linear output width).
#[derive(Debug, Clone)]
pub struct MlpSpec {
    pub input: usize,
    pub layers: Vec<usize>,
}

impl MlpSpec {
    pub fn new(input: usize, layers: &[usize]) -> Self {
        MlpSpec { input, layers: layers.to_vec() }
    }

    pub fn output(&self) -> usize {
        *self.layers.last().expect("MlpSpec has at least one layer")
    }
}

/// Fully-connected network with ReLU hidden activations and a linear
/// output layer. Row-vector convention: `y = x W + b` with `x` of shape
/// `[batch, input]`.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    weights: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Register freshly initialized parameters `"{name}.w{i}"` /
    /// `"{name}.b{i}"` (biases start at zero).
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        spec: MlpSpec,
    ) -> Result<Self> {
        if spec.layers.is_empty() {
            return Err(Error::domain("Mlp::new", "at least one layer required"));
        }
        let mut weights = Vec::with_capacity(spec.layers.len());
        let mut fan_in = spec.input;
        for (i, &width) in spec.layers.iter().enumerate() {
            let last = i + 1 == spec.layers.len();
            let gain2 = if last { 1.0 } else { 2.0 };
            let w = store.add(&format!("{name}.w{i}"), init_weight(rng, fan_in, width, gain2))?;
            let b = store.add(&format!("{name}.b{i}"), NdArray::zeros(&[width]))?;
            weights.push((w, b));
            fan_in = width;
        }
        Ok(Mlp { spec, weights })
    }

    /// Rebind to parameters already present in the store (e.g. after
    /// loading a checkpoint), validating shapes against the spec.
    pub fn from_store(store: &ParamStore, name: &str, spec: MlpSpec) -> Result<Self> {
        let mut weights = Vec::with_capacity(spec.layers.len());
        let mut fan_in = spec.input;
        for (i, &width) in spec.layers.iter().enumerate() {
            let w = store.id(&format!("{name}.w{i}"))?;
            let b = store.id(&format!("{name}.b{i}"))?;
            expect_shape(store, w, &[fan_in, width])?;
            expect_shape(store, b, &[width])?;
            weights.push((w, b));
            fan_in = width;
        }
        Ok(Mlp { spec, weights })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Apply to `[batch, input]`, producing `[batch, output]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (i, &(w, b)) in self.weights.iter().enumerate() {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            let lin = tape.matmul(h, wv);
            h = tape.add_row_broadcast(lin, bv);
            if i + 1 < self.weights.len() {
                h = tape.relu(h);
            }
        }
        h
    }
}

/// Gated recurrent unit cell on concatenated `[x, h]` rows:
///
/// ```text
/// z  = sigmoid([x, h] Wz + bz)
/// r  = sigmoid([x, h] Wr + br)
/// c  = tanh([x, r*h] Wh + bh)
/// h' = (1 - z) * h + z * c
/// ```
///
/// With all parameters zero, `h' = 0.5 h`.
#[derive(Debug, Clone)]
pub struct GruCell {
    input: usize,
    hidden: usize,
    wz: ParamId,
    bz: ParamId,
    wr: ParamId,
    br: ParamId,
    wh: ParamId,
    bh: ParamId,
}

impl GruCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        let rows = input + hidden;
        let wz = store.add(&format!("{name}.wz"), init_weight(rng, rows, hidden, 1.0))?;
        let bz = store.add(&format!("{name}.bz"), NdArray::zeros(&[hidden]))?;
        let wr = store.add(&format!("{name}.wr"), init_weight(rng, rows, hidden, 1.0))?;
        let br = store.add(&format!("{name}.br"), NdArray::zeros(&[hidden]))?;
        let wh = store.add(&format!("{name}.wh"), init_weight(rng, rows, hidden, 1.0))?;
        let bh = store.add(&format!("{name}.bh"), NdArray::zeros(&[hidden]))?;
        Ok(GruCell { input, hidden, wz, bz, wr, br, wh, bh })
    }

    pub fn from_store(store: &ParamStore, name: &str, input: usize, hidden: usize) -> Result<Self> {
        let rows = input + hidden;
        let cell = GruCell {
            input,
            hidden,
            wz: store.id(&format!("{name}.wz"))?,
            bz: store.id(&format!("{name}.bz"))?,
            wr: store.id(&format!("{name}.wr"))?,
            br: store.id(&format!("{name}.br"))?,
            wh: store.id(&format!("{name}.wh"))?,
            bh: store.id(&format!("{name}.bh"))?,
        };
        for w in [cell.wz, cell.wr, cell.wh] {
            expect_shape(store, w, &[rows, cell.hidden])?;
        }
        for b in [cell.bz, cell.br, cell.bh] {
            expect_shape(store, b, &[cell.hidden])?;
        }
        Ok(cell)
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input(&self) -> usize {
        self.input
    }

    /// One update over `[batch, input]` inputs and `[batch, hidden]` state.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Var {
        let xh = tape.concat_cols(&[x, h]);

        let wz = tape.param(store, self.wz);
        let bz = tape.param(store, self.bz);
        let z_lin = tape.matmul(xh, wz);
        let z_aff = tape.add_row_broadcast(z_lin, bz);
        let z = tape.sigmoid(z_aff);

        let wr = tape.param(store, self.wr);
        let br = tape.param(store, self.br);
        let r_lin = tape.matmul(xh, wr);
        let r_aff = tape.add_row_broadcast(r_lin, br);
        let r = tape.sigmoid(r_aff);

        let rh = tape.mul(r, h);
        let xrh = tape.concat_cols(&[x, rh]);
        let wh = tape.param(store, self.wh);
        let bh = tape.param(store, self.bh);
        let c_lin = tape.matmul(xrh, wh);
        let c_aff = tape.add_row_broadcast(c_lin, bh);
        let c = tape.tanh(c_aff);

        tape.gru_combine(z, h, c)
    }
}

/// 2-D convolution layer (square kernel, zero padding).
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    weight: ParamId,
    bias: ParamId,
}

impl Conv2dLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = store.add(
            &format!("{name}.w"),
            NdArray::randn(rng, &[c_out, c_in, kernel, kernel], std),
        )?;
        let bias = store.add(&format!("{name}.b"), NdArray::zeros(&[c_out]))?;
        Ok(Conv2dLayer { c_in, c_out, kernel, stride, pad, weight, bias })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_store(
        store: &ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let weight = store.id(&format!("{name}.w"))?;
        let bias = store.id(&format!("{name}.b"))?;
        expect_shape(store, weight, &[c_out, c_in, kernel, kernel])?;
        expect_shape(store, bias, &[c_out])?;
        Ok(Conv2dLayer { c_in, c_out, kernel, stride, pad, weight, bias })
    }

    /// Apply to a `[C_in, H, W]` plane stack.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }
}

fn expect_shape(store: &ParamStore, id: ParamId, shape: &[usize]) -> Result<()> {
    let actual = store.value(id).shape();
    if actual != shape {
        return Err(Error::shape(
            "layer::from_store",
            format!("parameter `{}` has shape {:?}, expected {:?}", store.name(id), actual, shape),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zeroed_store(build: impl Fn(&mut ParamStore, &mut ChaCha8Rng)) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        build(&mut store, &mut rng);
        for id in store.ids() {
            store.value_mut(id).data_mut().fill(0.0);
        }
        store
    }

    #[test]
    fn mlp_forward_matches_hand_computation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&mut store, &mut rng, "f", MlpSpec::new(2, &[2, 1])).unwrap();
        // Overwrite the random init with a hand-picked case.
        let w0 = store.id("f.w0").unwrap();
        store.value_mut(w0).data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let b0 = store.id("f.b0").unwrap();
        store.value_mut(b0).data_mut().copy_from_slice(&[0.5, -3.0]);
        let w1 = store.id("f.w1").unwrap();
        store.value_mut(w1).data_mut().copy_from_slice(&[2.0, 1.0]);
        let b1 = store.id("f.b1").unwrap();
        store.value_mut(b1).data_mut().copy_from_slice(&[0.25]);

        let mut tape = Tape::new();
        let x = tape.constant(NdArray::from_vec(&[1, 2], vec![1.0, 2.0]));
        let y = mlp.forward(&mut tape, &store, x);
        // relu([1, 2] + [0.5, -3]) = [1.5, 0]; [1.5, 0] . [2, 1] + 0.25 = 3.25
        assert_eq!(tape.value(y).shape(), &[1, 1]);
        assert!((tape.value(y).item() - 3.25).abs() < 1e-12);
    }

    #[test]
    fn mlp_registers_expected_parameter_names() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        Mlp::new(&mut store, &mut rng, "enc", MlpSpec::new(4, &[8, 8, 3])).unwrap();
        let names: Vec<&str> = store.names().collect();
        assert_eq!(names, ["enc.w0", "enc.b0", "enc.w1", "enc.b1", "enc.w2", "enc.b2"]);
        assert_eq!(store.value(store.id("enc.w1").unwrap()).shape(), &[8, 8]);
    }

    #[test]
    fn mlp_from_store_rejects_wrong_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Mlp::new(&mut store, &mut rng, "f", MlpSpec::new(2, &[3, 1])).unwrap();
        assert!(Mlp::from_store(&store, "f", MlpSpec::new(2, &[3, 1])).is_ok());
        assert!(Mlp::from_store(&store, "f", MlpSpec::new(2, &[4, 1])).is_err());
        assert!(Mlp::from_store(&store, "g", MlpSpec::new(2, &[3, 1])).is_err());
    }

    #[test]
    fn zero_parameter_gru_halves_the_state() {
        let store = zeroed_store(|store, rng| {
            GruCell::new(store, rng, "gru", 3, 4).unwrap();
        });
        let gru = GruCell::from_store(&store, "gru", 3, 4).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(NdArray::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]));
        let h_data = vec![0.2, -0.4, 0.6, -0.8, 1.0, 1.2, -1.4, 1.6];
        let h = tape.constant(NdArray::from_vec(&[2, 4], h_data.clone()));
        let h2 = gru.forward(&mut tape, &store, x, h);
        for (out, orig) in tape.value(h2).data().iter().zip(&h_data) {
            assert!(
                (out - 0.5 * orig).abs() < 1e-15,
                "expected exact halving, got {out} for state {orig}"
            );
        }
    }

    #[test]
    fn identity_kernel_convolution_reproduces_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let conv = Conv2dLayer::new(&mut store, &mut rng, "c", 1, 1, 3, 1, 1).unwrap();
        let w = store.id("c.w").unwrap();
        store.value_mut(w).data_mut().copy_from_slice(&[
            0.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0,
        ]);
        let b = store.id("c.b").unwrap();
        store.value_mut(b).data_mut().fill(0.0);

        let mut tape = Tape::new();
        let data: Vec<f64> = (0..12).map(|v| v as f64 * 0.3 - 1.0).collect();
        let x = tape.constant(NdArray::from_vec(&[1, 3, 4], data.clone()));
        let y = conv.forward(&mut tape, &store, x);
        assert_eq!(tape.value(y).shape(), &[1, 3, 4]);
        for (a, b) in tape.value(y).data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn convolution_matches_nested_loop_reference() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (stride, pad) in [(1usize, 1usize), (2, 0), (2, 1)] {
            let name = format!("c{stride}{pad}");
            let conv = Conv2dLayer::new(&mut store, &mut rng, &name, 2, 3, 3, stride, pad).unwrap();
            let input = NdArray::randn(&mut rng, &[2, 6, 5], 1.0);

            let mut tape = Tape::new();
            let x = tape.constant(input.clone());
            let y = conv.forward(&mut tape, &store, x);

            let wv = store.value(store.id(&format!("{name}.w")).unwrap()).clone();
            let bv = store.value(store.id(&format!("{name}.b")).unwrap()).clone();
            let (h_out, w_out) = conv.output_size(6, 5);
            assert_eq!(tape.value(y).shape(), &[3, h_out, w_out]);
            for co in 0..3 {
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let mut acc = bv.data()[co];
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || iy >= 6 || ix < 0 || ix >= 5 {
                                        continue;
                                    }
                                    let iv =
                                        input.data()[(ci * 6 + iy as usize) * 5 + ix as usize];
                                    let wv = wv.data()[((co * 2 + ci) * 3 + ky) * 3 + kx];
                                    acc += iv * wv;
                                }
                            }
                        }
                        let got = tape.value(y).data()[(co * h_out + oy) * w_out + ox];
                        assert!(
                            (got - acc).abs() < 1e-12,
                            "stride {stride} pad {pad} at ({co},{oy},{ox}): {got} vs {acc}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn shared_layer_applied_twice_accumulates_both_gradient_contributions() {
        // f(x) = sum(mlp(mlp(x))) uses the same weights twice; the analytic
        // gradient must equal the sum of both applications' contributions,
        // which the finite-difference harness verifies elsewhere. Here we
        // check the cheaper invariant: the gradient differs from the
        // single-application gradient.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mlp = Mlp::new(&mut store, &mut rng, "f", MlpSpec::new(2, &[2])).unwrap();
        let x_val = NdArray::from_vec(&[1, 2], vec![0.3, -0.7]);

        let grad_once = {
            let mut tape = Tape::new();
            let x = tape.constant(x_val.clone());
            let y = mlp.forward(&mut tape, &store, x);
            let loss = tape.sum_all(y);
            let grads = tape.backward(loss);
            store.zero_grads();
            grads.accumulate_into(&tape, &mut store, 1.0);
            store.grad(store.id("f.w0").unwrap()).clone()
        };
        let grad_twice = {
            let mut tape = Tape::new();
            let x = tape.constant(x_val);
            let y1 = mlp.forward(&mut tape, &store, x);
            let y2 = mlp.forward(&mut tape, &store, y1);
            let loss = tape.sum_all(y2);
            let grads = tape.backward(loss);
            store.zero_grads();
            grads.accumulate_into(&tape, &mut store, 1.0);
            store.grad(store.id("f.w0").unwrap()).clone()
        };
        let diff: f64 = grad_once
            .data()
            .iter()
            .zip(grad_twice.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9, "weight sharing left no trace in the gradient");
    }
}

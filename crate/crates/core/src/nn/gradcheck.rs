//! Finite-difference verification of tape gradients.
//!
//! For every parameter coordinate, the analytic gradient from
//! [`Tape::backward`] is compared against a central difference of the
//! rebuilt loss. Graphs whose forward pass sits too close to a
//! non-differentiable point (ReLU crossing, max tie, angle-wrap seam,
//! smooth-L1 corner) are rejected so callers can re-roll the seed instead
//! of chasing phantom mismatches.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Minimum kink margin for a graph to be eligible for checking. Two
/// orders of magnitude above [`FD_STEP`] so perturbed evaluations stay on
/// the same smooth branch.
pub const KINK_REJECT: f64 = 1e-3;

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Total scalar coordinates compared.
    pub checked: usize,
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_err: f64,
    /// Parameter name and flat coordinate of the worst comparison.
    pub worst: Option<(String, usize)>,
    /// Kink margin of the base graph.
    pub kink_margin: f64,
}

/// Compare analytic gradients of `build`'s scalar loss against central
/// differences over every coordinate of every parameter in `store`.
///
/// `build` must be a pure function of the store values (it is re-run many
/// times with perturbed parameters). Returns an error if the base graph's
/// kink margin is below [`KINK_REJECT`]; re-roll the initialization seed
/// and try again.
pub fn check_gradients<F>(store: &mut ParamStore, mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Var,
{
    let (margin, analytic) = {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store);
        if tape.value(loss).len() != 1 {
            return Err(Error::shape("check_gradients", "loss must be scalar"));
        }
        let margin = tape.kink_margin();
        if margin < KINK_REJECT {
            return Err(Error::domain(
                "check_gradients",
                format!("kink margin {margin:.3e} below {KINK_REJECT:.0e}; re-roll the seed"),
            ));
        }
        let grads = tape.backward(loss);
        store.zero_grads();
        grads.accumulate_into(&tape, store, 1.0);
        let analytic: Vec<(ParamId, Vec<f64>)> =
            store.ids().map(|id| (id, store.grad(id).data().to_vec())).collect();
        (margin, analytic)
    };

    let mut eval = |store: &ParamStore| -> f64 {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store);
        tape.value(loss).item()
    };

    let mut report =
        GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None, kink_margin: margin };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for j in 0..store.value(id).len() {
            let original = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = original + FD_STEP;
            let plus = eval(store);
            store.value_mut(id).data_mut()[j] = original - FD_STEP;
            let minus = eval(store);
            store.value_mut(id).data_mut()[j] = original;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[id.0].1[j];
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((store.name(id).to_string(), j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::PARAMS_PER_STEP;
    use crate::nn::array::NdArray;
    use crate::nn::layers::{Conv2dLayer, GruCell, Mlp, MlpSpec};
    use crate::nn::tape::BilinearTaps;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-6;
    const VIABLE_SEEDS: usize = 10;

    /// Run a seeded scenario over the deterministic seed sequence until
    /// ten graphs pass the kink-margin gate, asserting each one's
    /// gradients match finite differences.
    fn assert_grad_check<S, B>(make: S)
    where
        S: Fn(u64) -> (ParamStore, B),
        B: FnMut(&mut Tape, &ParamStore) -> Var,
    {
        let mut viable = 0;
        for seed in 0..200u64 {
            let (mut store, build) = make(seed);
            match check_gradients(&mut store, build) {
                Ok(report) => {
                    assert!(
                        report.max_rel_err < TOL,
                        "seed {seed}: max rel err {:.3e} at {:?} over {} coords",
                        report.max_rel_err,
                        report.worst,
                        report.checked
                    );
                    assert!(report.checked > 0, "seed {seed}: nothing checked");
                    viable += 1;
                    if viable == VIABLE_SEEDS {
                        return;
                    }
                }
                Err(crate::Error::Domain { .. }) => continue,
                Err(other) => panic!("seed {seed}: unexpected error {other}"),
            }
        }
        panic!("only {viable} of {VIABLE_SEEDS} viable seeds in 200 attempts");
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        assert_grad_check(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let mlp = Mlp::new(&mut store, &mut rng, "f", MlpSpec::new(3, &[5, 4, 2])).unwrap();
            let x = store.add("x", NdArray::randn(&mut rng, &[4, 3], 1.0)).unwrap();
            let build = move |tape: &mut Tape, store: &ParamStore| {
                let xv = tape.param(store, x);
                let y = mlp.forward(tape, store, xv);
                tape.sum_all(y)
            };
            (store, build)
        });
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        assert_grad_check(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let mut store = ParamStore::new();
            let gru = GruCell::new(&mut store, &mut rng, "g", 3, 4).unwrap();
            let x = store.add("x", NdArray::randn(&mut rng, &[2, 3], 1.0)).unwrap();
            let h = store.add("h", NdArray::randn(&mut rng, &[2, 4], 1.0)).unwrap();
            let build = move |tape: &mut Tape, store: &ParamStore| {
                let xv = tape.param(store, x);
                let hv = tape.param(store, h);
                // Two chained applications exercise weight sharing.
                let h1 = gru.forward(tape, store, xv, hv);
                let h2 = gru.forward(tape, store, xv, h1);
                tape.sum_all(h2)
            };
            (store, build)
        });
    }

    #[test]
    fn convolution_and_max_pool_gradients_match_finite_differences() {
        assert_grad_check(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
            let mut store = ParamStore::new();
            let c1 = Conv2dLayer::new(&mut store, &mut rng, "c1", 2, 3, 3, 1, 1).unwrap();
            let c2 = Conv2dLayer::new(&mut store, &mut rng, "c2", 3, 4, 3, 2, 1).unwrap();
            let x = store.add("x", NdArray::randn(&mut rng, &[2, 5, 6], 1.0)).unwrap();
            let build = move |tape: &mut Tape, store: &ParamStore| {
                let xv = tape.param(store, x);
                let a = c1.forward(tape, store, xv);
                let a = tape.relu(a);
                let b = c2.forward(tape, store, a);
                let pooled = tape.global_max_pool(b);
                let rows = tape.stack_rows(&[pooled]);
                tape.sum_all(rows)
            };
            (store, build)
        });
    }

    #[test]
    fn gather_scatter_gradients_match_finite_differences() {
        assert_grad_check(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
            let mut store = ParamStore::new();
            let src = store.add("src", NdArray::randn(&mut rng, &[4, 3], 1.0)).unwrap();
            let build = move |tape: &mut Tape, store: &ParamStore| {
                let s = tape.param(store, src);
                let gathered = tape.gather_rows(s, vec![0, 1, 2, 3, 0, 2]);
                let reduced = tape.scatter_max(gathered, &[0, 0, 1, 1, 2, 2], 4);
                // Row 3 of the output has no contributors (zero-filled).
                let weights = tape.constant(NdArray::randn(
                    &mut ChaCha8Rng::seed_from_u64(99),
                    &[4, 3],
                    1.0,
                ));
                let weighted = tape.mul(reduced, weights);
                tape.sum_all(weighted)
            };
            (store, build)
        });
    }

    #[test]
    fn bilinear_gather_gradients_match_finite_differences() {
        assert_grad_check(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
            let mut store = ParamStore::new();
            let feat = store.add("feat", NdArray::randn(&mut rng, &[2, 4, 5], 1.0)).unwrap();
            // Taps with mixed counts, including an all-out-of-bounds cell.
            let mut samples = Vec::new();
            for cell in 0..6usize {
                let mut taps = BilinearTaps::default();
                let count = cell % 5;
                for t in 0..count.min(4) {
                    let idx = rng.gen_range(0..20);
                    let w = rng.gen_range(0.05..0.95);
                    taps.taps[t] = (idx, w);
                    taps.count = t + 1;
                }
                samples.push(taps);
            }
            let build = move |tape: &mut Tape, store: &ParamStore| {
                let f = tape.param(store, feat);
                let g = tape.bilinear_gather(f, samples.clone(), 2, 3);
                let pooled = tape.global_max_pool(g);
                let rows = tape.stack_rows(&[pooled]);
                tape.sum_all(rows)
            };
            (store, build)
        });
    }

    #[test]
    fn forecast_loss_gradients_match_finite_differences() {
        assert_grad_check(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
            let mut store = ParamStore::new();
            let steps = 2;
            let raw = store
                .add("raw", NdArray::randn(&mut rng, &[3, steps * PARAMS_PER_STEP], 0.8))
                .unwrap();
            let rots = vec![0.4, -1.3, 2.2];
            let trans = vec![[1.0, -2.0], [0.5, 0.5], [-3.0, 0.1]];
            let targets: Vec<Vec<[f64; 3]>> = (0..2)
                .map(|_| {
                    (0..steps)
                        .map(|_| {
                            [
                                rng.gen_range(-2.0..2.0),
                                rng.gen_range(-2.0..2.0),
                                rng.gen_range(-2.5..2.5),
                            ]
                        })
                        .collect()
                })
                .collect();
            let build = move |tape: &mut Tape, store: &ParamStore| {
                let r = tape.param(store, raw);
                let con = tape.row_constrain(r);
                let moved = tape.row_transform(con, rots.clone(), trans.clone());
                let (loss, _) = tape.trajectory_nll(moved, vec![0, 2], targets.clone());
                loss
            };
            (store, build)
        });
    }

    #[test]
    fn detection_loss_gradients_match_finite_differences() {
        assert_grad_check(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(6000 + seed);
            let mut store = ParamStore::new();
            let logits = store.add("logits", NdArray::randn(&mut rng, &[8], 1.5)).unwrap();
            let reg = store.add("reg", NdArray::randn(&mut rng, &[8, 6], 1.2)).unwrap();
            let targets: Vec<(usize, [f64; 6])> = vec![
                (1, [0.2, -0.3, 0.1, 0.0, 0.7, -0.7]),
                (5, [1.8, 0.4, -0.2, 0.3, 0.0, 1.0]),
            ];
            let build = move |tape: &mut Tape, store: &ParamStore| {
                let l = tape.param(store, logits);
                let p = tape.param(store, reg);
                let cls = tape.bce_selected(l, vec![(0, 1.0), (1, 1.0), (4, 0.0), (6, 0.0)]);
                let fit = tape.smooth_l1_selected(p, targets.clone());
                tape.add(cls, fit)
            };
            (store, build)
        });
    }

    #[test]
    fn slice_and_channel_view_gradients_match_finite_differences() {
        assert_grad_check(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
            let mut store = ParamStore::new();
            let feat = store.add("feat", NdArray::randn(&mut rng, &[7, 2, 3], 1.0)).unwrap();
            let build = move |tape: &mut Tape, store: &ParamStore| {
                let f = tape.param(store, feat);
                let logits = tape.slice_channel(f, 0);
                let reg = tape.channels_as_cols(f, 1);
                let cls = tape.bce_selected(logits, vec![(0, 1.0), (3, 0.0), (5, 1.0)]);
                let fit = tape.smooth_l1_selected(
                    reg,
                    vec![(2, [0.1, 0.2, 0.3, -0.1, -0.2, -0.3])],
                );
                tape.add(cls, fit)
            };
            (store, build)
        });
    }

    #[test]
    fn kink_rejection_triggers_on_relu_at_zero() {
        let mut store = ParamStore::new();
        store.add("x", NdArray::from_vec(&[1, 2], vec![0.0, 5.0])).unwrap();
        let x = store.id("x").unwrap();
        let err = check_gradients(&mut store, |tape, store| {
            let xv = tape.param(store, x);
            let y = tape.relu(xv);
            tape.sum_all(y)
        })
        .unwrap_err();
        assert!(err.to_string().contains("kink margin"), "got: {err}");
    }
}

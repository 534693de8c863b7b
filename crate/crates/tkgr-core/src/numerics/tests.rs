use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::gradcheck::finite_difference_check;
use crate::numerics::params::ParameterStore;
use crate::numerics::tape::{Activation, Tape};
use crate::numerics::tensor::{softmax, Tensor};
use crate::Result;

fn store_with(entries: &[(&str, Tensor)]) -> ParameterStore {
    let mut store = ParameterStore::new();
    for (name, t) in entries {
        store.register(name, t.clone()).unwrap();
    }
    store
}

// -- matmul ------------------------------------------------------------------

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let i2 = tape.constant(Tensor::eye(2));
    let a = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let y = tape.matmul(i2, a).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(a).data());
}

#[test]
fn matmul_hand_arithmetic() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = tape.constant(Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap());
    let y = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0, 4.0]);
}

#[test]
fn matmul_shape_mismatch_is_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    assert!(tape.matmul(a, b).is_err());
}

#[test]
fn matmul_random_matches_triple_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = Tensor::uniform(vec![5, 7], 1.0, &mut rng);
    let b = Tensor::uniform(vec![7, 3], 1.0, &mut rng);
    let mut want = vec![0.0; 5 * 3];
    for i in 0..5 {
        for j in 0..3 {
            for p in 0..7 {
                want[i * 3 + j] += a.data()[i * 7 + p] * b.data()[p * 3 + j];
            }
        }
    }
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a), tape.constant(b));
    let y = tape.matmul(av, bv).unwrap();
    for (g, w) in tape.value(y).data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-6);
    }
}

// -- conv --------------------------------------------------------------------

fn conv_oracle(
    subj: &[f64],
    rel: &[f64],
    kernels: &[f64], // [C,2,ks] flattened
    bias: &[f64],
    d: usize,
    channels: usize,
    ksize: usize,
) -> Vec<f64> {
    // direct summation, independently indexed
    let pad = (ksize as i64 - 1) / 2;
    let rows = [subj, rel];
    let mut out = vec![0.0; channels * d];
    for c in 0..channels {
        for j in 0..d as i64 {
            let mut acc = bias[c];
            for u in 0..2usize {
                for v in 0..ksize as i64 {
                    let src = j + v - pad;
                    if src >= 0 && src < d as i64 {
                        acc += kernels[c * 2 * ksize + u * ksize + v as usize]
                            * rows[u][src as usize];
                    }
                }
            }
            out[c * d + j as usize] = acc;
        }
    }
    out
}

#[test]
fn conv_zero_kernels_zero_bias_gives_zero() {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let r = tape.constant(Tensor::matrix(1, 4, vec![4.0, 3.0, 2.0, 1.0]).unwrap());
    let k = tape.constant(Tensor::zeros(vec![1, 2 * 2 * 3]));
    let b = tape.constant(Tensor::zeros(vec![1, 2]));
    let y = tape.conv_decode(s, r, k, b, 2, 3).unwrap();
    assert!(tape.value(y).data().iter().all(|&x| x == 0.0));
}

#[test]
fn conv_delta_kernel_copies_subject_row() {
    // one kernel that is 1 at (u=0, v=center) reproduces the subject row
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let r = tape.constant(Tensor::matrix(1, 4, vec![9.0, 9.0, 9.0, 9.0]).unwrap());
    let mut kern = vec![0.0; 6];
    kern[1] = 1.0; // u=0, v=1 (center of a width-3 kernel)
    let k = tape.constant(Tensor::matrix(1, 6, kern).unwrap());
    let b = tape.constant(Tensor::zeros(vec![1, 1]));
    let y = tape.conv_decode(s, r, k, b, 1, 3).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn conv_random_matches_direct_summation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (d, c, ks) = (6, 4, 3);
    let subj = Tensor::uniform(vec![1, d], 1.0, &mut rng);
    let rel = Tensor::uniform(vec![1, d], 1.0, &mut rng);
    let kern = Tensor::uniform(vec![1, c * 2 * ks], 1.0, &mut rng);
    let bias = Tensor::uniform(vec![1, c], 1.0, &mut rng);
    let want = conv_oracle(subj.data(), rel.data(), kern.data(), bias.data(), d, c, ks);

    let mut tape = Tape::new();
    let (s, r) = (tape.constant(subj), tape.constant(rel));
    let (k, b) = (tape.constant(kern), tape.constant(bias));
    let y = tape.conv_decode(s, r, k, b, c, ks).unwrap();
    for (g, w) in tape.value(y).data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-6);
    }
}

#[test]
fn conv_rejects_even_kernel_width() {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::zeros(vec![1, 4]));
    let r = tape.constant(Tensor::zeros(vec![1, 4]));
    let k = tape.constant(Tensor::zeros(vec![1, 2 * 2 * 2]));
    let b = tape.constant(Tensor::zeros(vec![1, 2]));
    assert!(tape.conv_decode(s, r, k, b, 2, 2).is_err());
}

// -- activations ---------------------------------------------------------------

#[test]
fn activation_fixed_points() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0, -3.0, 2.0]));
    let sig = tape.sigmoid(x).unwrap();
    let tan = tape.tanh(x).unwrap();
    let rel = tape.relu(x).unwrap();
    assert!((tape.value(sig).data()[0] - 0.5).abs() < 1e-12);
    assert_eq!(tape.value(tan).data()[0], 0.0);
    assert_eq!(tape.value(rel).data()[1], 0.0);
    assert_eq!(tape.value(rel).data()[2], 2.0);
}

#[test]
fn activation_gradients_match_finite_differences() {
    for kind in [Activation::Sigmoid, Activation::Tanh, Activation::Relu] {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // keep relu inputs away from the kink
        let data: Vec<f64> = (0..12)
            .map(|_| {
                let v: f64 = rng.gen_range(0.1..1.0);
                if rng.gen::<bool>() {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let store = store_with(&[("x", Tensor::vector(data))]);
        let forward = |s: &ParameterStore| -> Result<f64> {
            let mut tape = Tape::new();
            let x = tape.param(s, "x")?;
            let y = tape.activation(x, kind)?;
            let sq = tape.mul(y, y)?;
            let loss = tape.sum(sq)?;
            Ok(tape.value(loss).item())
        };
        let mut store = store;
        {
            let mut tape = Tape::new();
            let x = tape.param(&store, "x").unwrap();
            let y = tape.activation(x, kind).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let loss = tape.sum(sq).unwrap();
            tape.backward(loss, &mut store).unwrap();
        }
        let report =
            finite_difference_check(&store, &forward, 12, 1e-3, 1e-4, 1e-8, 5).unwrap();
        assert!(report.passed(), "{:?} failed: {:?}", kind, report.failures);
    }
}

// -- softmax cross-entropy -----------------------------------------------------

#[test]
fn cross_entropy_uniform_logits_is_ln_k() {
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::matrix(1, 7, vec![0.3; 7]).unwrap());
    let loss = tape
        .cross_entropy_sum(logits, Rc::new(vec![4]))
        .unwrap();
    assert!((tape.value(loss).item() - (7.0f64).ln()).abs() < 1e-6);
}

#[test]
fn cross_entropy_confident_logit_approaches_zero() {
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::matrix(1, 3, vec![50.0, 0.0, -1.0]).unwrap());
    let loss = tape.cross_entropy_sum(logits, Rc::new(vec![0])).unwrap();
    assert!(tape.value(loss).item() < 1e-6);
}

#[test]
fn cross_entropy_matches_explicit_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let logits = Tensor::uniform(vec![1, 9], 2.0, &mut rng);
    // explicit exponent/normalize oracle
    let exps: Vec<f64> = logits.data().iter().map(|&x| x.exp()).collect();
    let z: f64 = exps.iter().sum();
    let want = -(exps[5] / z).ln();

    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let loss = tape.cross_entropy_sum(l, Rc::new(vec![5])).unwrap();
    assert!((tape.value(loss).item() - want).abs() < 1e-6);
}

#[test]
fn cross_entropy_target_out_of_range_is_error() {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::zeros(vec![1, 3]));
    assert!(tape.cross_entropy_sum(l, Rc::new(vec![3])).is_err());
}

proptest! {
    #[test]
    fn softmax_is_probability_vector(xs in proptest::collection::vec(-30.0f64..30.0, 1..40)) {
        let p = softmax(&xs);
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn decay_weights_sum_to_one_per_group(
        dts in proptest::collection::vec(0.0f64..40.0, 1..12),
        delta in 0.01f64..10.0,
    ) {
        let mut tape = Tape::new();
        let d = tape.constant(Tensor::scalar(delta));
        let n = dts.len();
        let w = tape
            .decay_normalize(d, Rc::new(dts), Rc::new(vec![(0, n)]))
            .unwrap();
        let sum: f64 = tape.value(w).data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
    }
}

// -- backward ------------------------------------------------------------------

#[test]
fn backward_of_sum_is_all_ones() {
    let mut store = store_with(&[("w", Tensor::matrix(2, 3, vec![1.0; 6]).unwrap())]);
    let mut tape = Tape::new();
    let w = tape.param(&store, "w").unwrap();
    let loss = tape.sum(w).unwrap();
    tape.backward(loss, &mut store).unwrap();
    assert!(store.grad("w").unwrap().data().iter().all(|&g| g == 1.0));
}

#[test]
fn backward_of_half_squared_norm_is_w() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w0 = Tensor::uniform(vec![3, 3], 1.0, &mut rng);
    let mut store = store_with(&[("w", w0.clone())]);
    let mut tape = Tape::new();
    let w = tape.param(&store, "w").unwrap();
    let sq = tape.mul(w, w).unwrap();
    let s = tape.sum(sq).unwrap();
    let loss = tape.scale(s, 0.5).unwrap();
    tape.backward(loss, &mut store).unwrap();
    for (g, v) in store.grad("w").unwrap().data().iter().zip(w0.data()) {
        assert!((g - v).abs() < 1e-12);
    }
}

#[test]
fn backward_twice_is_error() {
    let mut store = store_with(&[("w", Tensor::scalar(1.0))]);
    let mut tape = Tape::new();
    let w = tape.param(&store, "w").unwrap();
    let loss = tape.sum(w).unwrap();
    tape.backward(loss, &mut store).unwrap();
    assert!(tape.backward(loss, &mut store).is_err());
}

#[test]
fn unreachable_parameter_keeps_zero_gradient() {
    let mut store = store_with(&[("used", Tensor::scalar(2.0)), ("idle", Tensor::scalar(3.0))]);
    let mut tape = Tape::new();
    let w = tape.param(&store, "used").unwrap();
    let _idle = tape.param(&store, "idle").unwrap();
    let loss = tape.sum(w).unwrap();
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(store.grad("idle").unwrap().data(), &[0.0]);
}

#[test]
fn non_finite_forward_aborts_with_producing_op() {
    let mut tape = Tape::new();
    let big = tape.constant(Tensor::scalar(1e308));
    let err = tape.mul(big, big).unwrap_err();
    let msg = format!("{}", err);
    assert!(msg.contains("mul"), "diagnostic should name the op: {msg}");
}

// one composite graph exercising every differentiable op, checked against
// central finite differences
#[test]
fn kitchen_sink_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let entities = 5;
    let d = 4;
    let store = store_with(&[
        ("emb", Tensor::uniform(vec![entities, d], 0.8, &mut rng)),
        ("w", Tensor::uniform(vec![d, d], 0.8, &mut rng)),
        ("bias", Tensor::uniform(vec![d], 0.5, &mut rng)),
        ("kern", Tensor::uniform(vec![2 * 2 * 3], 0.6, &mut rng)),
        ("kbias", Tensor::uniform(vec![2], 0.5, &mut rng)),
        ("delta", Tensor::scalar(0.4)),
        ("gate", Tensor::scalar(0.3)),
        ("alpha_w", Tensor::uniform(vec![2 * d, 2 * 2 * 3], 0.4, &mut rng)),
    ]);

    let build = |s: &ParameterStore, tape: &mut Tape| -> Result<crate::numerics::Var> {
        let emb = tape.param(s, "emb")?;
        let w = tape.param(s, "w")?;
        let bias = tape.param(s, "bias")?;
        let kern = tape.param(s, "kern")?;
        let kbias = tape.param(s, "kbias")?;
        let delta_raw = tape.param(s, "delta")?;
        let gate_raw = tape.param(s, "gate")?;
        let alpha_w = tape.param(s, "alpha_w")?;

        // message-passing style: gather, transform, decay-weight, scatter
        let ids = Rc::new(vec![0usize, 1, 1, 3, 4]);
        let dests = Rc::new(vec![1usize, 1, 2, 2, 2]);
        let groups = Rc::new(vec![(0usize, 2usize), (2, 5)]);
        let msgs = tape.gather_rows(emb, Rc::clone(&ids))?;
        let transformed = tape.matmul(msgs, w)?;
        let shifted = tape.add_row(transformed, bias)?;
        let act = tape.tanh(shifted)?;
        let delta = tape.softplus(delta_raw)?;
        let wts = tape.decay_normalize(delta, Rc::new(vec![1.0, 2.0, 1.0, 3.0, 0.5]), groups)?;
        let weighted = tape.row_scale(act, wts)?;
        let agg = tape.scatter_add_rows(weighted, dests, entities)?;

        // gated blend of aggregate and original rows
        let gate = tape.sigmoid(gate_raw)?;
        let mixed = tape.lerp(agg, emb, gate)?;
        let gates_per_row = tape.col(mixed, 0)?;
        let squashed = tape.sigmoid(gates_per_row)?;
        let mixed2 = tape.row_lerp(mixed, emb, squashed)?;

        // decode two queries with film-modulated kernels
        let subj = tape.gather_rows(mixed2, Rc::new(vec![0, 2]))?;
        let rel = tape.gather_rows(mixed2, Rc::new(vec![1, 3]))?;
        let both = tape.concat_cols(subj, rel)?;
        let alpha_full = tape.matmul(both, alpha_w)?;
        let alpha = tape.tanh(alpha_full)?;
        let beta = tape.scale(alpha, 0.5)?;
        let kern_q = tape.film_modulate(kern, alpha, beta)?;
        let kb_row = tape.constant(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        let kbias_mat = tape.film_modulate(kbias, kb_row, kb_row)?;
        let conv = tape.conv_decode(subj, rel, kern_q, kbias_mat, 2, 3)?;
        let sliced = tape.slice_cols(conv, 1, 2 * d)?;
        let dropped = tape.dropout(sliced, 0.25, true, 99)?;
        let scores = tape.matmul_nt(dropped, dropped)?;
        let sub = tape.sub(scores, scores)?;
        let scores2 = tape.add(scores, sub)?;
        let pooled = tape.mean_rows(scores2)?;
        let pvec = tape.relu(pooled)?;
        let logits = tape.matmul_nt(scores2, scores2)?;
        let ce = tape.cross_entropy_sum(logits, Rc::new(vec![1, 0]))?;
        let psum = tape.sum(pvec)?;
        let scaled = tape.scale(psum, 0.1)?;
        tape.add(ce, scaled)
    };

    let mut store = store;
    {
        let mut tape = Tape::new();
        let loss = build(&store, &mut tape).unwrap();
        tape.backward(loss, &mut store).unwrap();
    }
    let forward = |s: &ParameterStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build(s, &mut tape)?;
        Ok(tape.value(loss).item())
    };
    let report = finite_difference_check(&store, &forward, 20, 1e-4, 1e-3, 1e-7, 7).unwrap();
    assert!(
        report.passed(),
        "max diff {}, failures {:?}",
        report.max_abs_diff,
        report.failures
    );
}

// -- adam ------------------------------------------------------------------------

#[test]
fn adam_zero_gradient_leaves_parameters_unchanged() {
    let mut store = store_with(&[("w", Tensor::vector(vec![1.0, -2.0]))]);
    store.adam_step(0.1, 0.9, 0.999, 1e-8).unwrap();
    assert_eq!(store.value("w").unwrap().data(), &[1.0, -2.0]);
}

#[test]
fn adam_descends_on_square() {
    let mut store = store_with(&[("w", Tensor::scalar(1.0))]);
    // f(w) = w^2, grad = 2w
    let g = Tensor::scalar(2.0);
    store.accumulate_grad("w", &g).unwrap();
    store.adam_step(0.1, 0.9, 0.999, 1e-8).unwrap();
    let w = store.value("w").unwrap().item();
    assert!(w < 1.0, "one step should decrease w, got {w}");
}

#[test]
fn adam_converges_on_convex_quadratic() {
    // f(w) = 0.5 * sum((w - c)^2) for a fixed target c
    let target = [0.3, -1.2, 0.7, 2.0];
    let mut store = store_with(&[("w", Tensor::vector(vec![0.0; 4]))]);
    let mut grad_norm = f64::INFINITY;
    for _ in 0..200 {
        let w = store.value("w").unwrap().clone();
        let grad: Vec<f64> = w.data().iter().zip(&target).map(|(&x, &c)| x - c).collect();
        grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        store
            .accumulate_grad("w", &Tensor::vector(grad))
            .unwrap();
        store.adam_step(0.05, 0.9, 0.999, 1e-8).unwrap();
    }
    assert!(grad_norm < 1e-3, "grad norm after 200 steps: {grad_norm}");
}

#[test]
fn adam_rejects_nonpositive_learning_rate() {
    let mut store = store_with(&[("w", Tensor::scalar(1.0))]);
    assert!(store.adam_step(0.0, 0.9, 0.999, 1e-8).is_err());
    assert!(store.adam_step(-0.1, 0.9, 0.999, 1e-8).is_err());
}

#[test]
fn adam_zeroes_gradients_afterwards() {
    let mut store = store_with(&[("w", Tensor::scalar(1.0))]);
    store.accumulate_grad("w", &Tensor::scalar(3.0)).unwrap();
    store.adam_step(0.1, 0.9, 0.999, 1e-8).unwrap();
    assert_eq!(store.grad("w").unwrap().data(), &[0.0]);
}

// -- dropout -----------------------------------------------------------------------

#[test]
fn dropout_rate_zero_is_identity() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let y = tape.dropout(x, 0.0, true, 1).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn dropout_outside_training_is_identity() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let y = tape.dropout(x, 0.9, false, 1).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn dropout_rejects_rate_one() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0]));
    assert!(tape.dropout(x, 1.0, true, 1).is_err());
}

#[test]
fn dropout_empirical_zero_fraction_matches_rate() {
    let n = 100_000;
    let rate = 0.37;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0; n]));
    let y = tape.dropout(x, rate, true, 123).unwrap();
    let zeros = tape.value(y).data().iter().filter(|&&v| v == 0.0).count();
    let frac = zeros as f64 / n as f64;
    assert!((frac - rate).abs() < 0.01, "zero fraction {frac}");
    // survivors are scaled by 1/(1-rate)
    let survivor = tape
        .value(y)
        .data()
        .iter()
        .find(|&&v| v != 0.0)
        .copied()
        .unwrap();
    assert!((survivor - 1.0 / (1.0 - rate)).abs() < 1e-12);
}

#[test]
fn dropout_mask_is_deterministic_per_seed() {
    let make = |seed| {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0; 64]));
        let y = tape.dropout(x, 0.5, true, seed).unwrap();
        tape.value(y).data().to_vec()
    };
    assert_eq!(make(9), make(9));
    assert_ne!(make(9), make(10));
}

// -- decay weights ---------------------------------------------------------------

#[test]
fn decay_single_edge_weight_is_one() {
    let mut tape = Tape::new();
    let d = tape.constant(Tensor::scalar(2.7));
    let w = tape
        .decay_normalize(d, Rc::new(vec![5.0]), Rc::new(vec![(0, 1)]))
        .unwrap();
    assert_eq!(tape.value(w).data(), &[1.0]);
}

#[test]
fn decay_equal_gaps_split_evenly() {
    let mut tape = Tape::new();
    let d = tape.constant(Tensor::scalar(1.3));
    let w = tape
        .decay_normalize(d, Rc::new(vec![2.0, 2.0]), Rc::new(vec![(0, 2)]))
        .unwrap();
    assert!((tape.value(w).data()[0] - 0.5).abs() < 1e-12);
    assert!((tape.value(w).data()[1] - 0.5).abs() < 1e-12);
}

#[test]
fn decay_ln2_closed_form() {
    // delta = ln 2, dts = [0, 1]: kappa = [1, 0.5] -> [2/3, 1/3]
    let mut tape = Tape::new();
    let d = tape.constant(Tensor::scalar((2.0f64).ln()));
    let w = tape
        .decay_normalize(d, Rc::new(vec![0.0, 1.0]), Rc::new(vec![(0, 2)]))
        .unwrap();
    assert!((tape.value(w).data()[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!((tape.value(w).data()[1] - 1.0 / 3.0).abs() < 1e-12);
}

// -- checkpoint ---------------------------------------------------------------------

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let store = store_with(&[
        ("a.weight", Tensor::uniform(vec![3, 4], 1.0, &mut rng)),
        ("b.bias", Tensor::uniform(vec![7], 1.0, &mut rng)),
        ("c.scalar", Tensor::scalar(0.123)),
    ]);
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("one.ckpt");
    let p2 = dir.path().join("two.ckpt");
    store.save(&p1).unwrap();
    let loaded = ParameterStore::load(&p1).unwrap();
    loaded.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(loaded.len(), 3);
    assert_eq!(loaded.value("a.weight").unwrap().shape(), &[3, 4]);
}

#[test]
fn checkpoint_detects_corruption_and_truncation() {
    let store = store_with(&[("w", Tensor::vector(vec![1.0, 2.0, 3.0]))]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    store.save(&path).unwrap();

    let mut bytes = std::fs::read(&path).unwrap();
    let flip = bytes.len() - 12; // inside the float payload
    bytes[flip] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        ParameterStore::load(&path),
        Err(crate::Error::Checkpoint(_))
    ));

    let orig = {
        store.save(&path).unwrap();
        std::fs::read(&path).unwrap()
    };
    std::fs::write(&path, &orig[..orig.len() - 3]).unwrap();
    assert!(ParameterStore::load(&path).is_err());
}

#[test]
fn checkpoint_rejects_bad_magic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
    assert!(ParameterStore::load(&path).is_err());
}

#[test]
fn duplicate_parameter_registration_is_error() {
    let mut store = ParameterStore::new();
    store.register("w", Tensor::scalar(1.0)).unwrap();
    assert!(store.register("w", Tensor::scalar(2.0)).is_err());
}

// -- determinism -----------------------------------------------------------------

#[test]
fn fixed_seed_gives_bit_identical_forward_and_backward() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut store = store_with(&[
            ("w", Tensor::uniform(vec![4, 4], 1.0, &mut rng)),
            ("x", Tensor::uniform(vec![2, 4], 1.0, &mut rng)),
        ]);
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let x = tape.param(&store, "x").unwrap();
        let y = tape.matmul(x, w).unwrap();
        let a = tape.tanh(y).unwrap();
        let loss = tape.sum(a).unwrap();
        let value = tape.value(loss).item();
        tape.backward(loss, &mut store).unwrap();
        (value, store.grad("w").unwrap().data().to_vec())
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert_eq!(v1.to_bits(), v2.to_bits());
    assert_eq!(g1, g2);
}

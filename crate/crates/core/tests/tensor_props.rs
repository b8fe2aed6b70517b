//! Property tests for the tensor ops and their gradients.

mod common;

use caai_core::nn::{resample, resample_value};
use caai_core::tensor::concat;
use caai_core::{Tape, Tensor, Var};
use common::uniform;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-4;

type Binary = for<'t> fn(Var<'t, f64>, Var<'t, f64>) -> Var<'t, f64>;

/// `Σ w ⊙ f(a, b)` and its gradients with respect to `a` and `b`.
fn projected(f: Binary, a: &Tensor<f64>, b: &Tensor<f64>, w: &Tensor<f64>) -> (f64, Tensor<f64>, Tensor<f64>) {
    let tape = Tape::new();
    let (va, vb) = (tape.input(a.clone()), tape.input(b.clone()));
    let loss = f(va, vb).mul(tape.constant(w.clone())).unwrap().sum();
    let grads = tape.backward(loss).unwrap();
    (
        loss.value().item(),
        grads.get(va).unwrap().clone(),
        grads.get(vb).unwrap().clone(),
    )
}

fn assert_fd(f: Binary, a: &Tensor<f64>, b: &Tensor<f64>, w: &Tensor<f64>) -> Result<(), TestCaseError> {
    let (_, ga, gb) = projected(f, a, b, w);
    for (which, analytic) in [(0, &ga), (1, &gb)] {
        for i in 0..analytic.numel() {
            let eval = |delta: f64| {
                let (mut a2, mut b2) = (a.clone(), b.clone());
                let t = if which == 0 { &mut a2 } else { &mut b2 };
                t.data_mut()[i] += delta;
                projected(f, &a2, &b2, w).0
            };
            let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            let an = analytic.data()[i];
            let rel = (an - numeric).abs() / an.abs().max(numeric.abs()).max(1e-6);
            prop_assert!(rel < TOL, "input {which}[{i}]: analytic {an}, numeric {numeric}");
        }
    }
    Ok(())
}

/// A shape up to 2×4×8×8 and a broadcastable partner with some axes set to 1.
fn broadcast_shapes() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, u64)> {
    (
        1usize..=2,
        1usize..=4,
        1usize..=8,
        1usize..=8,
        prop::array::uniform4(prop::bool::ANY),
        any::<u64>(),
    )
        .prop_map(|(n, c, h, w, ones, seed)| {
            let full = vec![n, c, h, w];
            let partner = full.iter().zip(ones).map(|(&d, one)| if one { 1 } else { d }).collect();
            (full, partner, seed)
        })
}

fn add<'t>(a: Var<'t, f64>, b: Var<'t, f64>) -> Var<'t, f64> {
    a.add(b).unwrap()
}

fn sub<'t>(a: Var<'t, f64>, b: Var<'t, f64>) -> Var<'t, f64> {
    a.sub(b).unwrap()
}

fn mul<'t>(a: Var<'t, f64>, b: Var<'t, f64>) -> Var<'t, f64> {
    a.mul(b).unwrap()
}

fn div<'t>(a: Var<'t, f64>, b: Var<'t, f64>) -> Var<'t, f64> {
    a.div(b).unwrap()
}

fn cat<'t>(a: Var<'t, f64>, b: Var<'t, f64>) -> Var<'t, f64> {
    concat(&[a, b], 1).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn broadcast_gradients_match_differences((full, partner, seed) in broadcast_shapes()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = uniform(&full, -1.0, 1.0, &mut rng);
        let b = uniform(&partner, 0.5, 1.5, &mut rng);
        let w = uniform(&full, -1.0, 1.0, &mut rng);
        for f in [add as Binary, sub, mul, div] {
            assert_fd(f, &a, &b, &w)?;
        }
    }

    #[test]
    fn concat_gradients_match_differences(
        n in 1usize..=2, ca in 1usize..=4, cb in 1usize..=4, h in 1usize..=8, w in 1usize..=8, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = uniform(&[n, ca, h, w], -1.0, 1.0, &mut rng);
        let b = uniform(&[n, cb, h, w], -1.0, 1.0, &mut rng);
        let wt = uniform(&[n, ca + cb, h, w], -1.0, 1.0, &mut rng);
        assert_fd(cat, &a, &b, &wt)?;
        // Gradient slices are exactly the matching slices of the upstream.
        let (_, ga, gb) = projected(cat, &a, &b, &wt);
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    for c in 0..ca {
                        prop_assert_eq!(ga.at4(i, c, y, x), wt.at4(i, c, y, x));
                    }
                    for c in 0..cb {
                        prop_assert_eq!(gb.at4(i, c, y, x), wt.at4(i, ca + c, y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn reverse_plus_input_is_one(v in prop::collection::vec(0.0f64..=1.0, 1..64)) {
        let tape = Tape::new();
        let x = tape.input(Tensor::new(vec![v.len()], v.clone()).unwrap());
        let r = x.reverse();
        let total = r.add(x).unwrap();
        prop_assert!(total.value().data().iter().all(|&t| (t - 1.0).abs() <= f64::EPSILON));
        let grads = tape.backward(r.sum()).unwrap();
        prop_assert!(grads.get(x).unwrap().data().iter().all(|&g| g == -1.0));
    }

    #[test]
    fn resampling_preserves_constants(
        c in -3.0f64..3.0, h in 1usize..=9, w in 1usize..=9, oh in 1usize..=17, ow in 1usize..=17
    ) {
        let x = Tensor::full([1, 2, h, w], c);
        let y = resample_value(&x, oh, ow).unwrap();
        prop_assert_eq!(y.shape(), &[1, 2, oh, ow]);
        prop_assert!(y.data().iter().all(|&v| (v - c).abs() <= 4.0 * f64::EPSILON * c.abs()));
    }

    #[test]
    fn resampling_gradient_matches_differences(
        h in 1usize..=6, w in 1usize..=6, oh in 1usize..=9, ow in 1usize..=9, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&[1, 2, h, w], -1.0, 1.0, &mut rng);
        let wt = uniform(&[1, 2, oh, ow], -1.0, 1.0, &mut rng);
        let loss = |x: &Tensor<f64>| resample_value(x, oh, ow).unwrap().zip_map(&wt, |a, b| a * b).unwrap().sum();
        let tape = Tape::new();
        let xv = tape.input(x.clone());
        let l = resample(xv, oh, ow).unwrap().mul(tape.constant(wt.clone())).unwrap().sum();
        let grads = tape.backward(l).unwrap();
        let g = grads.get(xv).unwrap();
        for i in 0..x.numel() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += STEP;
            m.data_mut()[i] -= STEP;
            let numeric = (loss(&p) - loss(&m)) / (2.0 * STEP);
            // The map is linear, so differences are exact up to roundoff.
            prop_assert!((g.data()[i] - numeric).abs() <= 1e-9);
        }
    }

    #[test]
    fn forward_is_deterministic((full, partner, seed) in broadcast_shapes()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = uniform(&full, -1.0, 1.0, &mut rng);
        let b = uniform(&partner, 0.5, 1.5, &mut rng);
        let run = || {
            let tape = Tape::new();
            let (va, vb) = (tape.input(a.clone()), tape.input(b.clone()));
            let y = va.mul(vb).unwrap().sigmoid().div(vb).unwrap().relu();
            let grads = tape.backward(y.sum()).unwrap();
            ((*y.value()).clone(), grads.get(va).unwrap().clone())
        };
        prop_assert_eq!(run(), run());
    }
}

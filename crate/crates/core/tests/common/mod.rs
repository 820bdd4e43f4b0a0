//! Shared oracles for the integration suites.
//!
//! The central-difference gradient oracle here is the independent ground
//! truth the tape's backward pass is judged against: it only ever runs
//! forward evaluations, so a bug in a VJP rule cannot hide in it.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use triqdef_core::{NodeId, Tape};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Uniform samples with magnitude at least `margin`, for probing ops with
/// kinks at zero (relu, abs, sign-like masks) away from the kink.
pub fn uniform_away_from_zero(rng: &mut ChaCha8Rng, n: usize, hi: f64, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(margin..hi)
        })
        .collect()
}

/// A graph builder: given a fresh tape and the flat parameter vector,
/// returns the scalar loss node plus the gradient-requiring leaves in the
/// order their elements appear in the parameter vector.
pub type BuildFn<'a> = &'a dyn Fn(&mut Tape, &[f64]) -> (NodeId, Vec<NodeId>);

/// Loss value at `x` through a freshly built graph.
pub fn eval_loss(build: BuildFn, x: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let (loss, _) = build(&mut tape, x);
    tape.value(loss).item()
}

/// Analytic gradient at `x` via one reverse pass, flattened across leaves.
pub fn analytic_grad(build: BuildFn, x: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let (loss, leaves) = build(&mut tape, x);
    let grads = tape.backward(loss).expect("backward failed");
    let mut out = Vec::with_capacity(x.len());
    for leaf in leaves {
        out.extend_from_slice(tape.grad_tensor(&grads, leaf).data());
    }
    assert_eq!(out.len(), x.len(), "leaves do not cover the parameter vector");
    out
}

/// Central finite differences with step `eps`, one forward pair per
/// coordinate. This is the oracle: no backward machinery involved.
pub fn numeric_grad(build: BuildFn, x: &[f64], eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + eps;
        let fp = eval_loss(build, &xp);
        xp[i] = x[i] - eps;
        let fm = eval_loss(build, &xp);
        xp[i] = x[i];
        out.push((fp - fm) / (2.0 * eps));
    }
    out
}

/// Relative disagreement, guarded so that near-zero pairs compare near
/// zero instead of dividing noise by noise.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs().max(n.abs()) + 1e-6)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// First-order check: backward vs central differences at step 1e-5,
/// asserting the maximum relative error stays under `tol`. Returns the
/// number of coordinates compared so callers can account for coverage.
pub fn assert_grad_matches(name: &str, build: BuildFn, x: &[f64], tol: f64) -> usize {
    let a = analytic_grad(build, x);
    let n = numeric_grad(build, x, 1e-5);
    let err = max_rel_err(&a, &n);
    assert!(
        err < tol,
        "{name}: gradient mismatch: max rel err {err:.3e} >= {tol:.1e}\n analytic[..4] {:?}\n numeric[..4] {:?}",
        &a[..a.len().min(4)],
        &n[..n.len().min(4)]
    );
    x.len()
}

/// Analytic Hessian-vector product via double backward: one reverse pass
/// to get the gradient as graph nodes, a dot with `v`, and a second
/// reverse pass through the emitted gradient graph.
pub fn analytic_hvp(build: BuildFn, x: &[f64], v: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let (loss, leaves) = build(&mut tape, x);
    let grads = tape.backward(loss).expect("first backward failed");

    let mut offset = 0;
    let mut dot: Option<NodeId> = None;
    for &leaf in &leaves {
        let n = tape.value(leaf).numel();
        let g = grads
            .node(leaf)
            .expect("loss does not reach a leaf during hvp");
        let seg = triqdef_core::Tensor::new(
            tape.value(leaf).shape().to_vec(),
            v[offset..offset + n].to_vec(),
        )
        .unwrap();
        let vc = tape.constant(seg);
        let prod = tape.mul(g, vc).unwrap();
        let s = tape.sum_all(prod).unwrap();
        dot = Some(match dot {
            None => s,
            Some(d) => tape.add(d, s).unwrap(),
        });
        offset += n;
    }
    let gdotv = dot.expect("no leaves");
    let hv = tape.backward(gdotv).expect("second backward failed");
    let mut out = Vec::with_capacity(x.len());
    for leaf in leaves {
        out.extend_from_slice(tape.grad_tensor(&hv, leaf).data());
    }
    out
}

/// Finite-difference Hessian-vector product: central difference of the
/// *first-order backward gradient* along direction `v`. First-order
/// backward is validated independently, so this is a sound oracle for the
/// second-order path.
pub fn numeric_hvp(build: BuildFn, x: &[f64], v: &[f64], eps: f64) -> Vec<f64> {
    let xp: Vec<f64> = x.iter().zip(v).map(|(&a, &b)| a + eps * b).collect();
    let xm: Vec<f64> = x.iter().zip(v).map(|(&a, &b)| a - eps * b).collect();
    let gp = analytic_grad(build, &xp);
    let gm = analytic_grad(build, &xm);
    gp.iter()
        .zip(&gm)
        .map(|(&p, &m)| (p - m) / (2.0 * eps))
        .collect()
}

/// Second-order check at step 1e-4 against tolerance `tol`.
pub fn assert_hvp_matches(name: &str, build: BuildFn, x: &[f64], v: &[f64], tol: f64) -> usize {
    let a = analytic_hvp(build, x, v);
    let n = numeric_hvp(build, x, v, 1e-4);
    let err = max_rel_err(&a, &n);
    assert!(
        err < tol,
        "{name}: hessian-vector mismatch: max rel err {err:.3e} >= {tol:.1e}\n analytic[..4] {:?}\n numeric[..4] {:?}",
        &a[..a.len().min(4)],
        &n[..n.len().min(4)]
    );
    x.len()
}

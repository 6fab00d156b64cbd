//! Joint-error metrics and Procrustes alignment.

use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xformer::metrics::{mpjpe, pa_mpjpe, procrustes_align, MetricOptions, H36M_EVAL_14};
use xformer::tensor::Tensor;

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::from_fn(&[n, 3], |_| rng.random_range(-1.0..1.0)).unwrap()
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation3<f64> {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    Rotation3::new(axis.normalize() * rng.random_range(-3.1..3.1))
}

fn transform(t: &Tensor, r: &Rotation3<f64>, s: f64, shift: Vector3<f64>) -> Tensor {
    let n = t.shape()[0];
    let mut out = Vec::with_capacity(n * 3);
    for i in 0..n {
        let p = r * Vector3::from_row_slice(t.row(i)) * s + shift;
        out.extend(p.iter());
    }
    Tensor::new(&[n, 3], out).unwrap()
}

fn residual(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum()
}

#[test]
fn aligned_error_never_exceeds_raw_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [17, 14, 5] {
        let opts = MetricOptions::for_joint_count(n, 0);
        for _ in 0..1000 / 3 + 1 {
            let (p, g) = (random_points(&mut rng, n), random_points(&mut rng, n));
            let (raw, pa) = (
                mpjpe(&p, &g, &opts).unwrap(),
                pa_mpjpe(&p, &g, &opts).unwrap(),
            );
            assert!(pa <= raw + 1e-12, "pa {pa} > mpjpe {raw}");
        }
    }
}

proptest! {
    #[test]
    fn similarity_transforms_are_invisible_after_alignment(seed in any::<u64>(), s in 0.2f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_points(&mut rng, 17);
        let shift = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let pred = transform(&gt, &random_rotation(&mut rng), s, shift);
        let opts = MetricOptions::for_joint_count(17, 0);
        prop_assert!(pa_mpjpe(&pred, &gt, &opts).unwrap() < 1e-9);
        // translation alone is removed by root-centering
        let moved = transform(&gt, &Rotation3::identity(), 1.0, shift);
        prop_assert!(mpjpe(&moved, &gt, &opts).unwrap() < 1e-9);
    }
}

/// Coarse-to-fine search over rotation vectors and scale; translation and
/// scale given a rotation come from centroids and least squares.
fn grid_search_residual(x: &Tensor, y: &Tensor) -> f64 {
    let n = x.shape()[0];
    let pts = |t: &Tensor| -> Vec<Vector3<f64>> {
        (0..n).map(|i| Vector3::from_row_slice(t.row(i))).collect()
    };
    let (xp, yp) = (pts(x), pts(y));
    let mx = xp.iter().sum::<Vector3<f64>>() / n as f64;
    let my = yp.iter().sum::<Vector3<f64>>() / n as f64;
    let xc: Vec<_> = xp.iter().map(|p| p - mx).collect();
    let yc: Vec<_> = yp.iter().map(|p| p - my).collect();
    let cost = |w: &Vector3<f64>| -> f64 {
        let r = Rotation3::new(*w);
        let rx: Vec<_> = xc.iter().map(|p| r * p).collect();
        let num: f64 = rx.iter().zip(&yc).map(|(a, b)| a.dot(b)).sum();
        let den: f64 = rx.iter().map(|a| a.norm_squared()).sum();
        let s = (num / den).max(0.0);
        rx.iter()
            .zip(&yc)
            .map(|(a, b)| (a * s - b).norm_squared())
            .sum()
    };
    let mut best = (Vector3::zeros(), f64::INFINITY);
    let steps = 12;
    for i in 0..=steps {
        for j in 0..=steps {
            for k in 0..=steps {
                let f = |t: usize| {
                    -std::f64::consts::PI + 2.0 * std::f64::consts::PI * t as f64 / steps as f64
                };
                let w = Vector3::new(f(i), f(j), f(k));
                let c = cost(&w);
                if c < best.1 {
                    best = (w, c);
                }
            }
        }
    }
    let mut h = 2.0 * std::f64::consts::PI / steps as f64;
    while h > 1e-7 {
        let mut improved = false;
        for axis in 0..3 {
            for sign in [-1.0, 1.0] {
                let mut w = best.0;
                w[axis] += sign * h;
                let c = cost(&w);
                if c < best.1 {
                    best = (w, c);
                    improved = true;
                }
            }
        }
        if !improved {
            h /= 2.0;
        }
    }
    best.1
}

#[test]
fn closed_form_alignment_agrees_with_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..20 {
        let x = random_points(&mut rng, 5);
        let y = transform(
            &x,
            &random_rotation(&mut rng),
            rng.random_range(0.5..2.0),
            Vector3::new(0.3, -0.2, 0.1),
        );
        let noise = random_points(&mut rng, 5);
        let y = Tensor::from_fn(&[5, 3], |i| y.data()[i] + 0.2 * noise.data()[i]).unwrap();
        let closed = residual(&procrustes_align(&x, &y).unwrap(), &y);
        let searched = grid_search_residual(&x, &y);
        assert!(
            closed <= searched + 1e-9,
            "closed form {closed} worse than search {searched}"
        );
        assert!(
            (closed - searched).abs() < 1e-3,
            "closed {closed} vs search {searched}"
        );
    }
}

#[test]
fn excluded_joints_do_not_affect_the_score() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let opts = MetricOptions::for_joint_count(17, 0);
    let excluded: Vec<usize> = (0..17)
        .filter(|j| !H36M_EVAL_14.contains(j) && *j != 0)
        .collect();
    assert_eq!(excluded.len(), 2);
    for _ in 0..100 {
        let (p, g) = (random_points(&mut rng, 17), random_points(&mut rng, 17));
        let base = (
            mpjpe(&p, &g, &opts).unwrap(),
            pa_mpjpe(&p, &g, &opts).unwrap(),
        );
        let mut q = p.clone();
        for &j in &excluded {
            for c in 0..3 {
                q.set(&[j, c], q.get(&[j, c]) + rng.random_range(-5.0..5.0));
            }
        }
        assert_eq!(
            (
                mpjpe(&q, &g, &opts).unwrap(),
                pa_mpjpe(&q, &g, &opts).unwrap()
            ),
            base
        );
        let j = H36M_EVAL_14[rng.random_range(0..14)];
        let mut r = p.clone();
        r.set(&[j, 0], r.get(&[j, 0]) + 1.0);
        assert_ne!(mpjpe(&r, &g, &opts).unwrap(), base.0);
        assert_ne!(pa_mpjpe(&r, &g, &opts).unwrap(), base.1);
    }
}

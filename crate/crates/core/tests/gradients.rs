//! Finite-difference checks of every differentiable op, the attention and
//! GCN modules, and the composed small-toy forward pass with its loss.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xformer::attention::{CrossModalAttention, EncoderLayer};
use xformer::keypoint::{Gcn, SkeletonGraph};
use xformer::params::{Init, ParamStore};
use xformer::tensor::gradcheck::check_gradients;
use xformer::tensor::{Graph, Tensor, Var};

mod support;
use support::*;

const TOL: f64 = GRAD_TOL;

fn opts() -> xformer::tensor::gradcheck::GradCheckOptions {
    grad_opts()
}

fn cases() -> ProptestConfig {
    ProptestConfig {
        cases: 12,
        ..ProptestConfig::default()
    }
}

fn assert_grads<F>(inputs: &[Tensor], f: F)
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> xformer::tensor::Result<Var<'g>>,
{
    let report = check_gradients(inputs, f, opts()).unwrap();
    assert!(!report.checks.is_empty());
    let worst = report.worst().unwrap();
    assert!(worst.rel_error < TOL, "worst coordinate {worst:?}");
}

macro_rules! unary_check {
    ($name:ident, $gen:ident, |$g:ident, $x:ident| $body:expr) => {
        proptest! {
            #![proptest_config(cases())]
            #[test]
            fn $name(seed in any::<u64>(), r in 1usize..4, c in 1usize..5) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = $gen(&mut rng, &[r, c]);
                assert_grads(&[x], |$g, v| {
                    let $x = v[0];
                    project($g, $body)
                });
            }
        }
    };
}

unary_check!(neg, wide, |g, x| x.neg()?);
unary_check!(scale, wide, |g, x| x.scale(-1.7)?);
unary_check!(add_scalar, wide, |g, x| x.add_scalar(0.3)?.mul(x)?);
unary_check!(transpose, wide, |g, x| x.t()?);
unary_check!(reshape, wide, |g, x| x.reshape(&[x.numel()])?);
unary_check!(relu, off_zero, |g, x| x.relu()?);
unary_check!(gelu, wide, |g, x| x.gelu()?);
unary_check!(sigmoid, wide, |g, x| x.sigmoid()?);
unary_check!(tanh, wide, |g, x| x.tanh()?);
unary_check!(softplus, wide, |g, x| x.softplus()?);
unary_check!(abs, off_zero, |g, x| x.abs()?);
unary_check!(sum, wide, |g, x| x.mul(x)?.sum()?);
unary_check!(mean, wide, |g, x| x.mul(x)?.mean()?);
unary_check!(sum_axis0, wide, |g, x| x.sum_axis(0)?);
unary_check!(sum_axis1, wide, |g, x| x.sum_axis(1)?);
unary_check!(mean_axis0, wide, |g, x| x.mean_axis(0)?);
unary_check!(mean_axis1, wide, |g, x| x.mean_axis(1)?);
unary_check!(softmax_rows, wide, |g, x| x.softmax(1)?);
unary_check!(softmax_cols, wide, |g, x| x.softmax(0)?);
unary_check!(l1_sum, off_zero, |g, x| x.l1_sum()?);
unary_check!(sum_squares, wide, |g, x| x.sum_squares()?);
unary_check!(l2_norm, off_zero, |g, x| x.l2_norm()?);
unary_check!(div, positive, |g, x| x.add_scalar(1.0)?.div(x)?);

proptest! {
    #![proptest_config(cases())]

    #[test]
    fn binary_broadcasting(seed in any::<u64>(), r in 1usize..4, c in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = wide(&mut rng, &[r, c]);
        let b = wide(&mut rng, &[c]);
        let d = positive(&mut rng, &[r, 1]);
        assert_grads(&[a, b, d], |g, v| {
            let out = v[0].add(v[1])?.mul(v[0])?.sub(v[1])?.div(v[2])?;
            project(g, out)
        });
    }

    #[test]
    fn matmul_and_affine(seed in any::<u64>(), m in 1usize..4, k in 1usize..5, n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = wide(&mut rng, &[m, k]);
        let w = wide(&mut rng, &[k, n]);
        let b = wide(&mut rng, &[n]);
        assert_grads(&[x, w, b], |g, v| project(g, v[0].affine(v[1], v[2])?.matmul(v[1].t()?)?));
    }

    #[test]
    fn broadcast_to(seed in any::<u64>(), r in 1usize..4, c in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = wide(&mut rng, &[1, c]);
        assert_grads(&[x], |g, v| project(g, v[0].broadcast_to(&[r, c])?));
    }

    #[test]
    fn concat_slice_rows(seed in any::<u64>(), r in 2usize..5, c in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = wide(&mut rng, &[r, c]);
        let b = wide(&mut rng, &[r, c + 1]);
        assert_grads(&[a, b], |g, v| {
            let cat = Var::concat(&[v[0], v[1]], 1)?;
            let cat0 = Var::concat(&[cat.rows(0, 1)?, cat], 0)?;
            project(g, cat0.slice(1, 1, 2 * c)?)
        });
    }

    #[test]
    fn layer_norm(seed in any::<u64>(), r in 1usize..4, c in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = wide(&mut rng, &[r, c]);
        let gamma = wide(&mut rng, &[c]);
        let beta = wide(&mut rng, &[c]);
        assert_grads(&[x, gamma, beta], |g, v| project(g, v[0].layer_norm(v[1], v[2], 1e-5)?));
    }

    #[test]
    fn conv2d(seed in any::<u64>(), stride in 1usize..3, padding in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = wide(&mut rng, &[2, 5, 5]);
        let w = wide(&mut rng, &[3, 2, 3, 3]);
        let b = wide(&mut rng, &[3]);
        assert_grads(&[x, w, b], |g, v| project(g, v[0].conv2d(v[1], Some(v[2]), stride, padding)?));
    }

    #[test]
    fn conv_transpose2d(seed in any::<u64>(), stride in 1usize..3, padding in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = wide(&mut rng, &[2, 3, 3]);
        let w = wide(&mut rng, &[2, 3, 4, 4]);
        let b = wide(&mut rng, &[3]);
        assert_grads(&[x, w, b], |g, v| project(g, v[0].conv_transpose2d(v[1], Some(v[2]), stride, padding)?));
    }

    #[test]
    fn max_pool2d(seed in any::<u64>(), kernel in 1usize..3, stride in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = distinct(&mut rng, &[2, 4, 4]);
        assert_grads(&[x], |g, v| project(g, v[0].max_pool2d(kernel, stride)?));
    }

    #[test]
    fn gcn_layers(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let skeleton = SkeletonGraph::chain(5).unwrap();
        let gcn = Gcn::new("gcn", 2, 4, 2);
        let x = off_zero(&mut rng, &[5, 2]);
        let w0 = wide(&mut rng, &[2, 4]);
        let b0 = uniform(&mut rng, &[4], 0.1, 0.5);
        let w1 = wide(&mut rng, &[4, 4]);
        let b1 = uniform(&mut rng, &[4], 0.1, 0.5);
        let mut store = ParamStore::new();
        for (name, t) in [("gcn.0.weight", &w0), ("gcn.0.bias", &b0), ("gcn.1.weight", &w1), ("gcn.1.bias", &b1)] {
            store.insert(name, t.clone());
        }
        let (names, mut inputs) = module_inputs(&store);
        inputs.push(x);
        let n = names.len();
        let report = check_gradients(&inputs, |g, v| {
            let b = bind_inputs(&store, g, &names, &v[..n]);
            project(g, lift(gcn.forward(&b, v[n], &skeleton.adjacency))?)
        }, opts()).unwrap();
        prop_assert!(report.max_rel_error() < TOL, "{:?}", report.worst());
    }
}

proptest! {
    #![proptest_config(cases())]

    #[test]
    fn encoder_layer(seed in any::<u64>(), tokens in 1usize..5) {
        let layer = EncoderLayer::new("enc", 4, 2, 1e-5);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        layer.init(&mut store, &mut Init::new(&mut rng)).unwrap();
        let (names, mut inputs) = module_inputs(&store);
        inputs.push(wide(&mut rng, &[tokens, 4]));
        let n = names.len();
        let report = check_gradients(&inputs, |g, v| {
            let b = bind_inputs(&store, g, &names, &v[..n]);
            let (out, _) = lift(layer.forward(&b, v[n]))?;
            project(g, out)
        }, opts()).unwrap();
        prop_assert!(report.max_rel_error() < TOL, "{:?}", report.worst());
    }

    #[test]
    fn cross_modal_module(seed in any::<u64>(), ti in 1usize..4, tk in 1usize..4, with_image: bool) {
        let module = CrossModalAttention::new("x", 4, 2, 1e-5, true);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        module.init(&mut store, &mut Init::new(&mut rng)).unwrap();
        let (names, mut inputs) = module_inputs(&store);
        inputs.push(wide(&mut rng, &[ti, 4]));
        inputs.push(wide(&mut rng, &[tk, 4]));
        let n = names.len();
        let report = check_gradients(&inputs, |g, v| {
            let b = bind_inputs(&store, g, &names, &v[..n]);
            let out = lift(module.forward(&b, with_image.then_some(v[n]), v[n + 1]))?;
            let mut total = project(g, out.kp_att)?;
            if let Some(img) = out.img_att {
                total = total.add(project(g, img)?)?;
            }
            if let Some((a, s)) = out.consistency_pair() {
                total = total.add(a.sub(s)?.sum_squares()?)?;
            }
            Ok(total)
        }, opts()).unwrap();
        prop_assert!(report.max_rel_error() < TOL, "{:?}", report.worst());
    }
}

/// The full small-toy network plus its training loss, checked on random
/// parameter coordinates.
#[test]
fn composed_small_toy_forward_and_loss() {
    let r = composed_small_toy_check(10, 6);
    assert_eq!(r.smooth, 60);
    assert!(
        r.kinks <= 20,
        "{} kink crossings is implausibly many",
        r.kinks
    );
    eprintln!(
        "composed forward+loss: 60 smooth coordinates (+{} at kinks), worst relative error {:.2e}",
        r.kinks, r.worst
    );
}

#[test]
fn shared_op_table_passes() {
    for case in op_cases() {
        let worst = check_case(&case, 10);
        assert!(worst < TOL, "{}: {worst:e}", case.name);
    }
}

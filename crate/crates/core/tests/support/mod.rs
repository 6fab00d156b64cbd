//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xformer::attention::{CrossModalAttention, EncoderLayer};
use xformer::config::{BranchMode, DatasetSpec, ExperimentConfig, FusionMode};
use xformer::data::SampleGenerator;
use xformer::keypoint::{Gcn, SkeletonGraph};
use xformer::params::{Binder, Init, ParamStore};
use xformer::tensor::gradcheck::{check_gradients, rel_error, GradCheckOptions};
use xformer::tensor::{Graph, Tensor, TensorError, Var};
use xformer::train::{routing_for, sample_gradients};

pub const GRAD_TOL: f64 = 1e-4;

/// Gradients smaller than this are compared in absolute terms; central
/// differences of an O(1) loss carry ~1e-10 of rounding noise.
pub const GRAD_FLOOR: f64 = 1e-5;

pub fn grad_opts() -> GradCheckOptions {
    GradCheckOptions {
        floor: GRAD_FLOOR,
        ..GradCheckOptions::default()
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi)).unwrap()
}

pub fn wide(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -2.0, 2.0)
}

pub fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, 0.5, 2.0)
}

/// Values with magnitude in `[0.05, 1]` and random sign, away from kinks at 0.
pub fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
    .unwrap()
}

/// Distinct values spaced at least 0.01 apart, shuffled.
pub fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape, v).unwrap()
}

/// Scalar `Σ out ⊙ R` with a fixed pseudo-random `R`, so every output
/// coordinate gets a distinct upstream gradient.
pub fn project<'g>(g: &'g Graph, out: Var<'g>) -> xformer::tensor::Result<Var<'g>> {
    let mut rng = ChaCha8Rng::seed_from_u64(out.numel() as u64);
    let r = uniform(&mut rng, &out.shape(), -1.0, 1.0);
    out.mul(g.constant(r)?)?.sum()
}

/// Module errors surfaced through the tensor-level check closure.
pub fn lift<T>(r: xformer::Result<T>) -> xformer::tensor::Result<T> {
    r.map_err(|e| TensorError::Contract(e.to_string()))
}

/// Parameters of a module flattened into check inputs, in store order.
pub fn module_inputs(store: &ParamStore) -> (Vec<String>, Vec<Tensor>) {
    store.iter().map(|(n, t)| (n.clone(), t.clone())).unzip()
}

/// Binder whose parameters resolve to the checked input vars.
pub fn bind_inputs<'g, 's>(
    store: &'s ParamStore,
    g: &'g Graph,
    names: &[String],
    vars: &[Var<'g>],
) -> Binder<'g, 's> {
    let b = store.bind_frozen(g);
    for (n, v) in names.iter().zip(vars) {
        b.bind_var(n, *v).unwrap();
    }
    b
}

pub type CheckFn = Box<dyn for<'g> Fn(&'g Graph, &[Var<'g>]) -> xformer::tensor::Result<Var<'g>>>;

/// One differentiable operation (or module) with an input generator.
pub struct OpCase {
    pub name: &'static str,
    pub build: fn(&mut ChaCha8Rng) -> (Vec<Tensor>, CheckFn),
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..4), rng.random_range(1..5))
}

macro_rules! unary {
    ($name:literal, $gen:ident, |$g:ident, $x:ident| $body:expr) => {
        OpCase {
            name: $name,
            build: |rng| {
                let (r, c) = dims(rng);
                let x = $gen(rng, &[r, c]);
                let f: CheckFn = Box::new(|$g, v| {
                    let $x = v[0];
                    project($g, $body)
                });
                (vec![x], f)
            },
        }
    };
}

/// Every differentiable tensor operation plus the GCN, encoder and
/// cross-modal modules.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        unary!("neg", wide, |g, x| x.neg()?),
        unary!("scale", wide, |g, x| x.scale(-1.7)?),
        unary!("add_scalar", wide, |g, x| x.add_scalar(0.3)?.mul(x)?),
        unary!("transpose", wide, |g, x| x.t()?),
        unary!("reshape", wide, |g, x| x.reshape(&[x.numel()])?),
        unary!("relu", off_zero, |g, x| x.relu()?),
        unary!("gelu", wide, |g, x| x.gelu()?),
        unary!("sigmoid", wide, |g, x| x.sigmoid()?),
        unary!("tanh", wide, |g, x| x.tanh()?),
        unary!("softplus", wide, |g, x| x.softplus()?),
        unary!("abs", off_zero, |g, x| x.abs()?),
        unary!("sum", wide, |g, x| x.mul(x)?.sum()?),
        unary!("mean", wide, |g, x| x.mul(x)?.mean()?),
        unary!("sum_axis", wide, |g, x| x
            .sum_axis(0)?
            .add(x.sum_axis(1)?.sum()?)?),
        unary!("mean_axis", wide, |g, x| x
            .mean_axis(0)?
            .add(x.mean_axis(1)?.sum()?)?),
        unary!("softmax", wide, |g, x| x.softmax(1)?.add(x.softmax(0)?)?),
        unary!("l1_sum", off_zero, |g, x| x.l1_sum()?),
        unary!("sum_squares", wide, |g, x| x.sum_squares()?),
        unary!("l2_norm", off_zero, |g, x| x.l2_norm()?),
        unary!("div", positive, |g, x| x.add_scalar(1.0)?.div(x)?),
        OpCase {
            name: "add_sub_mul_div_broadcast",
            build: |rng| {
                let (r, c) = dims(rng);
                let inputs = vec![wide(rng, &[r, c]), wide(rng, &[c]), positive(rng, &[r, 1])];
                let f: CheckFn =
                    Box::new(|g, v| project(g, v[0].add(v[1])?.mul(v[0])?.sub(v[1])?.div(v[2])?));
                (inputs, f)
            },
        },
        OpCase {
            name: "matmul_affine",
            build: |rng| {
                let (m, k) = dims(rng);
                let n = rng.random_range(1..4);
                let inputs = vec![wide(rng, &[m, k]), wide(rng, &[k, n]), wide(rng, &[n])];
                let f: CheckFn =
                    Box::new(|g, v| project(g, v[0].affine(v[1], v[2])?.matmul(v[1].t()?)?));
                (inputs, f)
            },
        },
        OpCase {
            name: "broadcast_to",
            build: |rng| {
                let (r, c) = dims(rng);
                let f: CheckFn = Box::new(move |g, v| project(g, v[0].broadcast_to(&[r, c])?));
                (vec![wide(rng, &[1, c])], f)
            },
        },
        OpCase {
            name: "concat_slice_rows",
            build: |rng| {
                let (r, c) = (rng.random_range(2..5), rng.random_range(1..4));
                let inputs = vec![wide(rng, &[r, c]), wide(rng, &[r, c + 1])];
                let f: CheckFn = Box::new(move |g, v| {
                    let cat = Var::concat(&[v[0], v[1]], 1)?;
                    let cat0 = Var::concat(&[cat.rows(0, 1)?, cat], 0)?;
                    project(g, cat0.slice(1, 1, 2 * c)?)
                });
                (inputs, f)
            },
        },
        OpCase {
            name: "layer_norm",
            build: |rng| {
                let (r, c) = (rng.random_range(1..4), rng.random_range(2..6));
                let inputs = vec![wide(rng, &[r, c]), wide(rng, &[c]), wide(rng, &[c])];
                let f: CheckFn = Box::new(|g, v| project(g, v[0].layer_norm(v[1], v[2], 1e-5)?));
                (inputs, f)
            },
        },
        OpCase {
            name: "conv2d",
            build: |rng| {
                let (stride, padding) = (rng.random_range(1..3), rng.random_range(0..2));
                let inputs = vec![
                    wide(rng, &[2, 5, 5]),
                    wide(rng, &[3, 2, 3, 3]),
                    wide(rng, &[3]),
                ];
                let f: CheckFn = Box::new(move |g, v| {
                    project(g, v[0].conv2d(v[1], Some(v[2]), stride, padding)?)
                });
                (inputs, f)
            },
        },
        OpCase {
            name: "conv_transpose2d",
            build: |rng| {
                let (stride, padding) = (rng.random_range(1..3), rng.random_range(0..2));
                let inputs = vec![
                    wide(rng, &[2, 3, 3]),
                    wide(rng, &[2, 3, 4, 4]),
                    wide(rng, &[3]),
                ];
                let f: CheckFn = Box::new(move |g, v| {
                    project(g, v[0].conv_transpose2d(v[1], Some(v[2]), stride, padding)?)
                });
                (inputs, f)
            },
        },
        OpCase {
            name: "max_pool2d",
            build: |rng| {
                let (kernel, stride) = (rng.random_range(1..3), rng.random_range(1..3));
                let f: CheckFn = Box::new(move |g, v| project(g, v[0].max_pool2d(kernel, stride)?));
                (vec![distinct(rng, &[2, 4, 4])], f)
            },
        },
        OpCase {
            name: "gcn",
            build: |rng| {
                let skeleton = SkeletonGraph::chain(5).unwrap();
                let gcn = Gcn::new("gcn", 2, 4, 2);
                let mut store = ParamStore::new();
                store.insert("gcn.0.weight", wide(rng, &[2, 4]));
                store.insert("gcn.0.bias", uniform(rng, &[4], 0.1, 0.5));
                store.insert("gcn.1.weight", wide(rng, &[4, 4]));
                store.insert("gcn.1.bias", uniform(rng, &[4], 0.1, 0.5));
                let (names, mut inputs) = module_inputs(&store);
                inputs.push(off_zero(rng, &[5, 2]));
                let f: CheckFn = Box::new(move |g, v| {
                    let n = names.len();
                    let b = bind_inputs(&store, g, &names, &v[..n]);
                    project(g, lift(gcn.forward(&b, v[n], &skeleton.adjacency))?)
                });
                (inputs, f)
            },
        },
        OpCase {
            name: "encoder_layer",
            build: |rng| {
                let layer = EncoderLayer::new("enc", 4, 2, 1e-5);
                let mut store = ParamStore::new();
                layer.init(&mut store, &mut Init::new(rng)).unwrap();
                let (names, mut inputs) = module_inputs(&store);
                let tokens = rng.random_range(1..5);
                inputs.push(wide(rng, &[tokens, 4]));
                let f: CheckFn = Box::new(move |g, v| {
                    let n = names.len();
                    let b = bind_inputs(&store, g, &names, &v[..n]);
                    let (out, _) = lift(layer.forward(&b, v[n]))?;
                    project(g, out)
                });
                (inputs, f)
            },
        },
        OpCase {
            name: "cross_modal",
            build: |rng| {
                let module = CrossModalAttention::new("x", 4, 2, 1e-5, true);
                let mut store = ParamStore::new();
                module.init(&mut store, &mut Init::new(rng)).unwrap();
                let (names, mut inputs) = module_inputs(&store);
                let (ti, tk) = (rng.random_range(1..4), rng.random_range(1..4));
                let with_image = rng.random::<bool>();
                inputs.push(wide(rng, &[ti, 4]));
                inputs.push(wide(rng, &[tk, 4]));
                let f: CheckFn = Box::new(move |g, v| {
                    let n = names.len();
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
                });
                (inputs, f)
            },
        },
    ]
}

/// Worst relative error of `case` over `instances` random draws.
pub fn check_case(case: &OpCase, instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        let (inputs, f) = (case.build)(&mut rng);
        let report = check_gradients(&inputs, &*f, grad_opts()).unwrap();
        assert!(!report.checks.is_empty(), "{}: nothing checked", case.name);
        worst = worst.max(report.max_rel_error());
    }
    worst
}

#[derive(Debug, Clone, Copy)]
pub struct ComposedCheck {
    pub smooth: usize,
    pub kinks: usize,
    pub worst: f64,
}

/// The full small-toy network plus its training loss, checked on `coords`
/// random parameter coordinates for each of `instances` initializations.
pub fn composed_small_toy_check(instances: u64, coords: usize) -> ComposedCheck {
    let mut cfg = ExperimentConfig::small_toy();
    cfg.data.train.seed = 21;
    let generator = SampleGenerator::new(&cfg.model, &cfg.data).unwrap();
    let samples = generator.make_dataset(&cfg.data.train).unwrap();
    let model = xformer::model::XFormerModel::new(cfg.model.clone()).unwrap();
    let routing = routing_for(&cfg);
    let step = 1e-5;
    let mut out = ComposedCheck {
        smooth: 0,
        kinks: 0,
        worst: 0.0,
    };
    for instance in 0..instances {
        let mut params = model.init_params(100 + instance).unwrap();
        // Cycle through dataset types so every loss route is exercised.
        let sample = &samples[(instance as usize * 7) % samples.len()];
        let (grads, _) = sample_gradients(&model, &params, sample, &cfg.train, &routing).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(instance);
        let names: Vec<String> = grads.keys().cloned().collect();
        let mut picked = 0;
        while picked < coords {
            let name = &names[rng.random_range(0..names.len())];
            let g = grads.get(name).unwrap();
            let j = rng.random_range(0..g.len());
            let analytic = g[j];
            let orig = params.get(name).unwrap().data()[j];
            let mut eval = |v: f64| {
                params.get_mut(name).unwrap().data_mut()[j] = v;
                sample_gradients(&model, &params, sample, &cfg.train, &routing)
                    .unwrap()
                    .1
                    .total
            };
            let (up, mid, down) = (eval(orig + step), eval(orig), eval(orig - step));
            params.get_mut(name).unwrap().data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let (right, left) = ((up - mid) / step, (mid - down) / step);
            // ReLU, max-pool and L1 kinks inside [x−h, x+h] make the one-sided
            // slopes disagree; there the tape must pick one of them.
            if rel_error(left, right, GRAD_FLOOR) > 1e-2 {
                let (lo, hi) = (left.min(right), left.max(right));
                assert!(
                    analytic >= lo - 1e-6 && analytic <= hi + 1e-6,
                    "{name}[{j}] at a kink: analytic {analytic} outside [{lo}, {hi}]"
                );
                out.kinks += 1;
                continue;
            }
            let err = rel_error(analytic, numeric, GRAD_FLOOR);
            assert!(
                err < GRAD_TOL,
                "instance {instance} ({}): {name}[{j}] analytic {analytic} numeric {numeric}",
                sample.dataset_type
            );
            out.worst = out.worst.max(err);
            picked += 1;
            out.smooth += 1;
        }
    }
    out
}

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

pub fn max_diff(a: &Mat, t: &Tensor) -> f64 {
    let b = to_mat(t);
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(&b)
        .flat_map(|(r, s)| r.iter().zip(s).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// Cross-modal attention written out with loops over store parameters.
pub mod oracle {
    use super::Mat;
    use xformer::params::ParamStore;

    fn p(store: &ParamStore, name: &str) -> Vec<f64> {
        store.get(name).unwrap().data().to_vec()
    }

    /// `x·W + b` with `W` stored row-major as `d_in × d_out`.
    pub fn linear(store: &ParamStore, name: &str, x: &Mat) -> Mat {
        let w = p(store, &format!("{name}.weight"));
        let b = p(store, &format!("{name}.bias"));
        let d_out = b.len();
        let d_in = w.len() / d_out;
        x.iter()
            .map(|row| {
                (0..d_out)
                    .map(|o| b[o] + (0..d_in).map(|i| row[i] * w[i * d_out + o]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    /// softmax(Q_h K_hᵀ / √d_head) V_h per head, heads concatenated.
    pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
        let d = q[0].len();
        let dh = d / heads;
        let mut out = vec![vec![0.0; d]; q.len()];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for (i, qi) in q.iter().enumerate() {
                let scores: Vec<f64> = k
                    .iter()
                    .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for c in cols.clone() {
                    out[i][c] = exps.iter().zip(v).map(|(e, vj)| e / z * vj[c]).sum();
                }
            }
        }
        out
    }

    pub fn layer_norm(store: &ParamStore, name: &str, x: &Mat, eps: f64) -> Mat {
        let g = p(store, &format!("{name}.gamma"));
        let b = p(store, &format!("{name}.beta"));
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(i, v)| (v - mean) / (var + eps).sqrt() * g[i] + b[i])
                    .collect()
            })
            .collect()
    }

    pub fn add(a: &Mat, b: &Mat) -> Mat {
        a.iter()
            .zip(b)
            .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
            .collect()
    }

    pub fn gelu(x: &Mat) -> Mat {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        x.iter()
            .map(|r| {
                r.iter()
                    .map(|v| 0.5 * v * (1.0 + (c * (v + 0.044715 * v.powi(3))).tanh()))
                    .collect()
            })
            .collect()
    }

    /// `(img_att, kp_att with image, kp_mha, kp_mlp, kp_att without image)`
    /// for module `x` with layer-norm epsilon `eps`.
    pub fn cross_modal(store: &ParamStore, xi: &Mat, xk: &Mat, heads: usize, eps: f64) -> [Mat; 5] {
        let lin = |name: &str, x: &Mat| linear(store, name, x);
        let img_mha = lin(
            "x.img.out",
            &attention(
                &lin("x.img.q", xi),
                &lin("x.kp.k", xk),
                &lin("x.kp.v", xk),
                heads,
            ),
        );
        let kp_mha = lin(
            "x.kp.out",
            &attention(
                &lin("x.kp.q", xk),
                &lin("x.img.k", xi),
                &lin("x.img.v", xi),
                heads,
            ),
        );
        let kp_mlp = lin("x.switch.fc2", &gelu(&lin("x.switch.fc1", xk)));
        let img_att = layer_norm(store, "x.ln_img", &add(&img_mha, xi), eps);
        let kp_att = layer_norm(store, "x.ln_kp", &add(&kp_mha, xk), eps);
        let kp_switch = layer_norm(store, "x.ln_kp", &add(&kp_mlp, xk), eps);
        [img_att, kp_att, kp_mha, kp_mlp, kp_switch]
    }
}

/// Store with every parameter of a `d`-wide module `x` drawn uniformly from
/// [−1, 1], layer-norm gains and biases included.
pub fn randomized_cross_modal(
    seed: u64,
    d: usize,
    heads: usize,
) -> (CrossModalAttention, ParamStore) {
    let module = CrossModalAttention::new("x", d, heads, 1e-5, true);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    module.init(&mut store, &mut Init::new(&mut rng)).unwrap();
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    (module, store)
}

/// Small mixed-type experiment that trains in well under a second per step.
pub fn tiny_experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::small_toy();
    cfg.train.batch_size = 2;
    cfg.train.lr = 1e-3;
    cfg.data.train = DatasetSpec {
        image_3d: 4,
        image_2d_only: 1,
        image_pseudo3d: 1,
        mocap: 2,
        seed: 11,
    };
    cfg.data.eval = DatasetSpec {
        image_3d: 3,
        seed: 12,
        ..DatasetSpec::default()
    };
    cfg
}

pub const ABLATIONS: [&str; 8] = [
    "image-only",
    "keypoint-only",
    "add",
    "concat",
    "cross-no-switch",
    "no-consistency",
    "no-mocap",
    "full",
];

pub fn ablation(name: &str) -> ExperimentConfig {
    let mut cfg = tiny_experiment();
    match name {
        "image-only" => cfg.model.branches = BranchMode::ImageOnly,
        "keypoint-only" => cfg.model.branches = BranchMode::KeypointOnly,
        "add" => cfg.model.blocks.fusion = FusionMode::Add,
        "concat" => cfg.model.blocks.fusion = FusionMode::Concat,
        "cross-no-switch" => cfg.model.modality_switch = false,
        "no-consistency" => cfg.train.consistency_loss = false,
        "no-mocap" => cfg.train.skip_mocap = true,
        "full" => {}
        other => panic!("unknown variant {other}"),
    }
    cfg
}

//! Central finite-difference checks of every differentiable op and of the
//! full model with each module kind, in 64-bit mode.

use fedyolo_core::peft::{attach, ModuleKind, ModuleSpec};
use fedyolo_core::tensor::{with_precision, Graph, Precision, Tensor, Var};
use fedyolo_core::vit::{self, build_vit, Bindings, ModelConfig, NoExtension, ParamSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Checks d(loss)/d(inputs) for a scalar-valued builder over a few leaves.
fn check_op(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
    with_precision(Precision::Double, || {
        let eval = |ts: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let out = build(&mut g, &vars);
            g.value(out).data()[0]
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &vars);
        g.backward(out).unwrap();
        let h = 1e-3;
        for (i, v) in vars.iter().enumerate() {
            let analytic = g.grad(*v).unwrap();
            for j in 0..inputs[i].numel() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let err = rel_err(analytic.data()[j], fd);
                assert!(err < TOL, "input {i} coord {j}: analytic {} fd {fd}", analytic.data()[j]);
            }
        }
    });
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    with_precision(Precision::Double, || {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    })
}

/// A fixed random weighting turns any tensor into a scalar with a
/// non-trivial upstream gradient.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
    let w = g.leaf(rand_t(g.shape(x), seed), false);
    let p = g.mul(x, w).unwrap();
    g.sum(p).unwrap()
}

#[test]
fn matmul_gradient_matches_reference_values() {
    with_precision(Precision::Double, || {
        let a = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![2.0, 3.0, 4.0, 5.0]).unwrap();
        let h = 1e-3;
        let f = |a: &Tensor| {
            let mut g = Graph::new();
            let av = g.leaf(a.clone(), false);
            let bv = g.leaf(b.clone(), false);
            let p = g.matmul(av, bv).unwrap();
            let s = g.sum(p).unwrap();
            g.value(s).data()[0]
        };
        let mut fd = Vec::new();
        for j in 0..4 {
            let mut p = a.clone();
            p.data_mut()[j] += h;
            let mut m = a.clone();
            m.data_mut()[j] -= h;
            fd.push((f(&p) - f(&m)) / (2.0 * h));
        }
        let expected = [5.0, 9.0, 5.0, 9.0];
        for (x, e) in fd.iter().zip(expected) {
            assert!((x - e).abs() < 1e-9);
        }
    });
    check_op(vec![rand_t(&[3, 4], 1), rand_t(&[4, 2], 2)], |g, v| {
        let p = g.matmul(v[0], v[1]).unwrap();
        weighted_sum(g, p, 3)
    });
}

#[test]
fn softmax_gradient() {
    check_op(vec![rand_t(&[1, 3], 4)], |g, v| {
        let s = g.softmax(v[0]).unwrap();
        weighted_sum(g, s, 5)
    });
}

#[test]
fn gelu_gradient_at_reference_points() {
    let x = Tensor::from_vec(vec![-1.0, 0.0, 1.0]).unwrap();
    check_op(vec![x], |g, v| {
        let y = g.gelu(v[0]).unwrap();
        weighted_sum(g, y, 6)
    });
}

#[test]
fn layer_norm_gradient() {
    check_op(vec![rand_t(&[3, 5], 7), rand_t(&[5], 8), rand_t(&[5], 9)], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-6).unwrap();
        weighted_sum(g, y, 10)
    });
}

#[test]
fn cross_entropy_gradient() {
    check_op(vec![rand_t(&[3, 4], 11)], |g, v| g.cross_entropy(v[0], &[0, 3, 1]).unwrap());
}

#[test]
fn attention_gradient() {
    check_op(vec![rand_t(&[6, 4], 12), rand_t(&[6, 4], 13), rand_t(&[6, 4], 14)], |g, v| {
        let y = g.attention(v[0], v[1], v[2], 2, 2).unwrap();
        weighted_sum(g, y, 15)
    });
}

#[test]
fn elementwise_and_broadcast_gradients() {
    check_op(vec![rand_t(&[4, 3], 16), rand_t(&[3], 17), rand_t(&[2, 3], 18)], |g, v| {
        let a = g.add_bias(v[0], v[1]).unwrap();
        let b = g.add_rows(a, v[2]).unwrap();
        let c = g.sub(b, a).unwrap();
        let d = g.mul(c, b).unwrap();
        let e = g.scale(d, 0.7).unwrap();
        let f = g.add(e, a).unwrap();
        weighted_sum(g, f, 19)
    });
}

#[test]
fn row_surgery_gradients() {
    check_op(vec![rand_t(&[6, 2], 20), rand_t(&[2, 2], 21)], |g, v| {
        let x = g.insert_rows(v[0], v[1], 2, 1).unwrap();
        let y = g.mul(x, x).unwrap();
        let z = g.remove_rows(y, 2, 2, 1).unwrap();
        let w = g.select_row(x, 2, 1).unwrap();
        let s1 = weighted_sum(g, z, 22);
        let s2 = weighted_sum(g, w, 23);
        g.add(s1, s2).unwrap()
    });
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let a = g.leaf(rand_t(&[4, 4], 30), true);
        let b = g.leaf(rand_t(&[4, 4], 31), true);
        let p = g.matmul(a, b).unwrap();
        let s = g.softmax(p).unwrap();
        let l = weighted_sum(&mut g, s, 32);
        g.backward(l).unwrap();
        (g.grad(a).unwrap(), g.grad(b).unwrap())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert!(a1.is_bitwise_eq(&a2) && b1.is_bitwise_eq(&b2));
}

/// Samples `count` coordinates over the trainable entries of `trainable`
/// and compares backprop against central differences of the full loss.
fn check_model(cfg: &ModelConfig, frozen: &ParamSet, trainable: &ParamSet, spec: Option<&ModuleSpec>, seed: u64, count: usize) -> f64 {
    with_precision(Precision::Double, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = Tensor::randn(&[2, cfg.channels, cfg.image_size, cfg.image_size], 0.5, &mut rng);
        let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..cfg.num_classes)).collect();
        let loss_of = |t: &ParamSet, grad: bool| {
            let mut g = Graph::new();
            let mut vars = Bindings::new();
            vars.bind(&mut g, frozen, false);
            vars.bind(&mut g, t, grad);
            let out = match spec {
                Some(s) => vit::forward(&mut g, &vars, cfg, s, &images).unwrap(),
                None => vit::forward(&mut g, &vars, cfg, &NoExtension, &images).unwrap(),
            };
            let loss = g.cross_entropy(out.logits, &labels).unwrap();
            (g, vars, loss)
        };
        let (mut g, vars, loss) = loss_of(trainable, true);
        g.backward(loss).unwrap();

        let names: Vec<String> = trainable.names().map(str::to_string).collect();
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for _ in 0..count {
            let name = &names[rng.random_range(0..names.len())];
            let numel = trainable.tensor(name).unwrap().numel();
            let j = rng.random_range(0..numel);
            let analytic = g.grad(vars.get(name).unwrap()).unwrap().data()[j];
            let mut plus = trainable.clone();
            plus.tensor_mut(name).unwrap().data_mut()[j] += h;
            let mut minus = trainable.clone();
            minus.tensor_mut(name).unwrap().data_mut()[j] -= h;
            let (gp, _, lp) = loss_of(&plus, false);
            let (gm, _, lm) = loss_of(&minus, false);
            let fd = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * h);
            worst = worst.max(rel_err(analytic, fd));
        }
        worst
    })
}

fn randomize(set: &mut ParamSet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = set.names().map(str::to_string).collect();
    for name in names {
        let t = set.tensor_mut(&name).unwrap();
        for x in t.data_mut() {
            *x += 0.3 * rng.random_range(-1.0..1.0);
        }
    }
}

#[test]
fn full_model_gradient() {
    let cfg = ModelConfig::preset("micro").unwrap();
    let params = with_precision(Precision::Double, || build_vit(&cfg, 40).unwrap());
    let worst = check_model(&cfg, &ParamSet::new(), &params, None, 41, 50);
    assert!(worst < TOL, "max relative error {worst}");
}

#[test]
fn module_gradients_for_every_kind() {
    let cfg = ModelConfig::preset("micro").unwrap();
    let backbone = with_precision(Precision::Double, || build_vit(&cfg, 50).unwrap());
    for (i, kind) in [ModuleKind::Adapter, ModuleKind::Lora, ModuleKind::Prompt, ModuleKind::HeadOnly]
        .into_iter()
        .enumerate()
    {
        let spec = ModuleSpec::new(kind);
        let mut m = with_precision(Precision::Double, || attach(&backbone, &cfg, &spec, 51).unwrap());
        // Zero-initialized factors would make half the gradients trivially zero.
        randomize(&mut m.module_params, 52 + i as u64);
        let worst = check_model(&cfg, &m.backbone, &m.module_params, Some(&spec), 60 + i as u64, 50);
        assert!(worst < TOL, "{kind:?}: max relative error {worst}");
    }
}

use fairgrpo::numerics::{softmax, Tape, Tensor, Var};
use fairgrpo::rng;
use proptest::prelude::*;

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

/// Projects a non-scalar output to a scalar with fixed pseudo-random
/// weights so every output entry contributes to the check.
fn weighted_sum(tape: &mut Tape<f64>, y: Var) -> Var {
    let shape = tape.value(y).shape().to_vec();
    let w = Tensor::randn(&shape, 1.0, &mut rng::seeded(99));
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

fn eval(build: &Build, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = build(&mut tape, &vars);
    let y = if tape.value(y).is_scalar() { y } else { weighted_sum(&mut tape, y) };
    tape.value(y).item().unwrap()
}

fn check(name: &str, build: &Build, inputs: Vec<Tensor<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let y = build(&mut tape, &vars);
    let y = if tape.value(y).is_scalar() { y } else { weighted_sum(&mut tape, y) };
    let grads = tape.backward(y).unwrap();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap();
        for j in 0..inputs[k].numel() {
            let h = 1e-5;
            let mut plus = inputs.clone();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[j] -= h;
            let numeric = (eval(build, &plus) - eval(build, &minus)) / (2.0 * h);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel <= 1e-4, "{name}: input {k}[{j}] analytic {a} numeric {numeric}");
        }
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng::seeded(seed))
}

#[test]
fn sum_of_squares_gradient_is_twice_w() {
    let mut tape = Tape::new();
    let w = tape.input(Tensor::vector(vec![1.0, 2.0]));
    let sq = tape.mul(w, w).unwrap();
    let loss = tape.sum(sq);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn constant_loss_gives_zero_gradients() {
    let mut tape = Tape::new();
    let w = tape.input(Tensor::vector(vec![1.0, -3.0]));
    let c = tape.constant(Tensor::scalar(5.0));
    let _unused = tape.scale(w, 2.0);
    let g = tape.backward(c).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn non_scalar_loss_is_a_contract_error() {
    let mut tape = Tape::<f64>::new();
    let w = tape.input(Tensor::vector(vec![1.0, 2.0]));
    assert!(tape.backward(w).is_err());
}

#[test]
fn gradient_check_linear() {
    check(
        "linear",
        &|t, v| t.linear(v[0], v[1], Some(v[2])).unwrap(),
        vec![randn(&[3, 4], 1), randn(&[5, 4], 2), randn(&[5], 3)],
    );
}

#[test]
fn gradient_check_matmul() {
    check("matmul", &|t, v| t.matmul(v[0], v[1]).unwrap(), vec![randn(&[2, 3], 4), randn(&[3, 4], 5)]);
    check("matmul_nt", &|t, v| t.matmul_nt(v[0], v[1]).unwrap(), vec![randn(&[2, 3], 6), randn(&[4, 3], 7)]);
}

#[test]
fn gradient_check_elementwise() {
    let a = randn(&[2, 3], 8);
    let b = randn(&[2, 3], 9);
    check("add", &|t, v| t.add(v[0], v[1]).unwrap(), vec![a.clone(), b.clone()]);
    check("sub", &|t, v| t.sub(v[0], v[1]).unwrap(), vec![a.clone(), b.clone()]);
    check("mul", &|t, v| t.mul(v[0], v[1]).unwrap(), vec![a.clone(), b.clone()]);
    check("minimum", &|t, v| t.minimum(v[0], v[1]).unwrap(), vec![a.clone(), b.clone()]);
    check("scale", &|t, v| t.scale(v[0], -1.7), vec![a.clone()]);
    check("add_scalar", &|t, v| t.add_scalar(v[0], 0.3), vec![a.clone()]);
    check("exp", &|t, v| t.exp(v[0]), vec![a.clone()]);
    check("log", &|t, v| t.log(v[0]), vec![a.map(|x| x.abs() + 0.5)]);
    check("gelu", &|t, v| t.gelu(v[0]), vec![a.clone()]);
    // keep every entry away from the clamp edges
    let c = Tensor::vector(vec![-2.0, -0.5, 0.1, 0.6, 3.0]);
    check("clamp", &|t, v| t.clamp(v[0], -1.0, 1.0), vec![c]);
}

#[test]
fn gradient_check_layer_norm() {
    check(
        "layer_norm",
        &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
        vec![randn(&[3, 6], 10), randn(&[6], 11), randn(&[6], 12)],
    );
}

#[test]
fn gradient_check_attention() {
    for causal in [true, false] {
        check(
            "attention",
            &move |t, v| t.attention(v[0], v[1], v[2], 2, causal).unwrap(),
            vec![randn(&[4, 6], 13), randn(&[4, 6], 14), randn(&[4, 6], 15)],
        );
    }
}

#[test]
fn gradient_check_embedding_gather() {
    check("embedding", &|t, v| t.embedding(v[0], &[2, 0, 2, 3]).unwrap(), vec![randn(&[4, 3], 16)]);
}

#[test]
fn gradient_check_cross_entropy() {
    // -mean log softmax(x)[target]
    check(
        "cross_entropy",
        &|t, v| {
            let lp = t.log_softmax_rows(v[0]).unwrap();
            let p = t.pick(lp, &[1, 0, 4]).unwrap();
            let m = t.mean(p);
            t.scale(m, -1.0)
        },
        vec![randn(&[3, 5], 17)],
    );
    check("softmax", &|t, v| t.softmax_rows(v[0]).unwrap(), vec![randn(&[2, 4], 18)]);
}

#[test]
fn gradient_check_reductions() {
    check("slice_rows", &|t, v| t.slice_rows(v[0], 1, 3).unwrap(), vec![randn(&[4, 3], 19)]);
    check("mean_rows", &|t, v| t.mean_rows(v[0]).unwrap(), vec![randn(&[4, 3], 20)]);
    check("mean", &|t, v| t.mean(v[0]), vec![randn(&[4, 3], 21)]);
}

#[test]
fn reused_input_accumulates() {
    check(
        "shared",
        &|t, v| {
            let a = t.matmul_nt(v[0], v[0]).unwrap();
            let b = t.exp(v[0]);
            let s1 = t.sum(a);
            let s2 = t.sum(b);
            t.add(s1, s2).unwrap()
        },
        vec![randn(&[2, 3], 22)],
    );
}

#[test]
fn operations_are_deterministic() {
    let build = |t: &mut Tape<f64>, v: &[Var]| {
        let a = t.attention(v[0], v[0], v[0], 2, true).unwrap();
        t.layer_norm(a, v[1], v[2], 1e-5).unwrap()
    };
    let inputs = vec![randn(&[3, 4], 23), randn(&[4], 24), randn(&[4], 25)];
    assert_eq!(eval(&build, &inputs).to_bits(), eval(&build, &inputs).to_bits());
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(xs in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
        let n = xs.len();
        let s = softmax(&Tensor::new(vec![n], xs).unwrap(), 0).unwrap();
        prop_assert!(s.data().iter().all(|&p| p >= 0.0));
        prop_assert!((s.data().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
}

#![allow(clippy::needless_range_loop)]

use rand::Rng as _;

use super::gradcheck::{grad_check, relative_error, DEFAULT_EPS};
use super::*;
use crate::rng::stream;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream(seed, &[]);
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Loss `Σ y⊙r` for a fixed random `r`, so that no output direction is
/// degenerate (a plain sum of a softmax has zero gradient).
fn weighted_loss(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let r = random(&g.value(y).shape.clone(), seed ^ 0xabc);
    let r = g.input(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

/// Max relative error of every input coordinate of an op against central
/// differences.
fn check_op<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor]| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|x| g.input_with_grad(x.clone())).collect();
        let y = build(&mut g, &vars).unwrap();
        let loss = weighted_loss(&mut g, y, 5).unwrap();
        let grads = g.backward(loss).unwrap();
        let gs = vars
            .iter()
            .map(|&v| grads.wrt(v).map_or_else(|| vec![0.0; g.value(v).len()], <[f64]>::to_vec))
            .collect();
        (g.value(loss).data[0], gs)
    };
    let (_, analytic) = eval(inputs);
    let mut worst = 0.0f64;
    let mut ins = inputs.to_vec();
    for i in 0..ins.len() {
        for j in 0..ins[i].len() {
            let orig = ins[i].data[j];
            ins[i].data[j] = orig + DEFAULT_EPS;
            let plus = eval(&ins).0;
            ins[i].data[j] = orig - DEFAULT_EPS;
            let minus = eval(&ins).0;
            ins[i].data[j] = orig;
            let numeric = (plus - minus) / (2.0 * DEFAULT_EPS);
            worst = worst.max(relative_error(analytic[i][j], numeric));
        }
    }
    worst
}

#[test]
fn matmul_values_and_identity() {
    let mut g = Graph::new();
    let a = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = g.input(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data, vec![19.0, 22.0, 43.0, 50.0]);
    let i = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let ib = g.matmul(i, b).unwrap();
    assert_eq!(g.value(ib).data, g.value(b).data);
    let bad = g.input(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.matmul(a, bad), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn matmul_gradient() {
    let err = check_op(&[random(&[3, 4], 1), random(&[4, 2], 2)], |g, v| g.matmul(v[0], v[1]));
    assert!(err < 1e-6, "{err}");
}

#[test]
fn linear_and_bmm_gradients() {
    let err = check_op(
        &[random(&[2, 3, 4], 3), random(&[5, 4], 4), random(&[5], 5)],
        |g, v| g.linear(v[0], v[1], Some(v[2])),
    );
    assert!(err < 1e-6, "{err}");
    for trans_b in [false, true] {
        let b_shape = if trans_b { [2, 5, 4] } else { [2, 4, 5] };
        let err = check_op(&[random(&[2, 3, 4], 6), random(&b_shape, 7)], |g, v| g.bmm(v[0], v[1], trans_b));
        assert!(err < 1e-6, "trans_b={trans_b}: {err}");
    }
}

#[test]
fn activations() {
    let mut g = Graph::new();
    let x = g.input(t(&[4], &[0.0, -1.0, 50.0, -800.0]));
    let s = g.sigmoid(x);
    let th = g.tanh(x);
    let r = g.relu(x);
    assert_eq!(g.value(s).data[0], 0.5);
    assert!((g.value(s).data[2] - 1.0).abs() < 1e-9);
    assert!(g.value(s).is_finite());
    assert_eq!(g.value(th).data[0], 0.0);
    assert_eq!(g.value(r).data[..2], [0.0, 0.0]);
    for build in [Graph::sigmoid, Graph::tanh] {
        let err = check_op(&[random(&[3, 4], 8)], |g, v| Ok(build(g, v[0])));
        assert!(err < 1e-6, "{err}");
    }
    // Away from the kink.
    let mut x = random(&[3, 4], 9);
    x.data.iter_mut().for_each(|v| *v += v.signum() * 0.1);
    let err = check_op(&[x], |g, v| Ok(g.relu(v[0])));
    assert!(err < 1e-6, "{err}");
}

#[test]
fn softmax_rows() {
    let mut g = Graph::new();
    let x = g.input(t(&[3, 3], &[0.0, 0.0, 0.0, 1000.0, 0.0, 0.0, 1.0, 2.0, 3.0]));
    let y = g.softmax_last(x);
    let v = g.value(y).data.clone();
    assert!(close(&v[..3], &[1.0 / 3.0; 3], 1e-15));
    assert!(close(&v[3..6], &[1.0, 0.0, 0.0], 1e-12));
    let shifted = g.input(t(&[1, 3], &[-41.0, -40.0, -39.0]));
    let ys = g.softmax_last(shifted);
    assert!(close(&g.value(ys).data, &v[6..], 1e-12));
    for row in v.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let err = check_op(&[random(&[3, 4], 10)], |g, v| Ok(g.softmax_last(v[0])));
    assert!(err < 1e-6, "{err}");
}

#[test]
fn layer_norm_rows() {
    let mut g = Graph::new();
    let x = g.input(t(&[2, 4], &[3.0, 3.0, 3.0, 3.0, 1.0, 2.0, 4.0, 19.0]));
    let gain = g.input(Tensor::full(&[4], 1.0));
    let bias = g.input(Tensor::zeros(&[4]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    let v = &g.value(y).data;
    assert!(v[..4].iter().all(|&z| z == 0.0));
    let row = &v[4..];
    let mean = row.iter().sum::<f64>() / 4.0;
    let var = row.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12);
    // ε inside the root shrinks the variance by var/(var+ε).
    assert!((var - 1.0).abs() < 1e-6, "{var}");
    let err = check_op(&[random(&[3, 5], 11), random(&[5], 12), random(&[5], 13)], |g, v| {
        g.layer_norm(v[0], v[1], v[2])
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn batch_norm_train_and_eval() {
    let x0 = random(&[3, 2, 4, 2], 14);
    let mut g = Graph::new();
    let x = g.input(x0.clone());
    let gain = g.input(Tensor::full(&[2], 1.0));
    let bias = g.input(Tensor::zeros(&[2]));
    let (y, stats) = g.batch_norm_train(x, gain, bias).unwrap();
    let v = g.value(y).data.clone();
    for c in 0..2 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|b| v[(b * 2 + c) * 8..][..8].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4, "{var}");
    }
    let e = g.batch_norm_eval(x, gain, bias, &stats.mean, &stats.var).unwrap();
    assert!(close(&g.value(e).data, &v, 1e-12));

    let one = g.input(Tensor::zeros(&[1, 2, 4, 2]));
    assert!(matches!(g.batch_norm_train(one, gain, bias), Err(Error::BatchTooSmall(1))));

    let err = check_op(&[x0.clone(), random(&[2], 15), random(&[2], 16)], |g, v| {
        Ok(g.batch_norm_train(v[0], v[1], v[2])?.0)
    });
    assert!(err < 1e-4, "{err}");
    let err = check_op(&[x0, random(&[2], 15), random(&[2], 16)], |g, v| {
        g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0])
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn conv_time_examples() {
    let mut g = Graph::new();
    let x = g.input(t(&[1, 1, 4, 1], &[1.0, 2.0, 3.0, 4.0]));
    let ones = g.input(Tensor::full(&[1, 1, 3, 1], 1.0));
    let y = g.conv_time(x, ones).unwrap();
    assert_eq!(g.value(y).data, vec![3.0, 6.0, 9.0, 7.0]);
    assert_eq!(g.value(y).shape, vec![1, 1, 4, 1]);

    let x2 = random(&[2, 1, 7, 3], 17);
    let xv = g.input(x2.clone());
    let delta = g.input(t(&[1, 1, 3, 1], &[0.0, 1.0, 0.0]));
    let id = g.conv_time(xv, delta).unwrap();
    assert_eq!(g.value(id).data, x2.data);

    // Even kernel: taps cover t-1..t+2 with the extra tap on the right.
    let ramp = g.input(t(&[1, 1, 4, 1], &[1.0, 2.0, 3.0, 4.0]));
    let k4 = g.input(t(&[1, 1, 4, 1], &[0.0, 0.0, 0.0, 1.0]));
    let shifted = g.conv_time(ramp, k4).unwrap();
    assert_eq!(g.value(shifted).data, vec![3.0, 4.0, 0.0, 0.0]);

    let bad = g.input(Tensor::zeros(&[1, 1, 3, 2]));
    assert!(g.conv_time(x, bad).is_err());

    let err = check_op(&[random(&[2, 3, 4, 2], 25), random(&[3], 26)], |g, v| g.channel_bias(v[0], v[1]));
    assert!(err < 1e-6, "{err}");
    let err = check_op(&[random(&[2, 3, 6, 2], 18), random(&[4, 3, 5, 1], 19)], |g, v| {
        g.conv_time(v[0], v[1])
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn max_pool_time_examples() {
    let mut g = Graph::new();
    let x = g.input(t(&[1, 1, 4, 1], &[1.0, 3.0, 2.0, 5.0]));
    let y = g.max_pool_time(x, 2).unwrap();
    assert_eq!(g.value(y).data, vec![3.0, 5.0]);
    let long = g.input(Tensor::zeros(&[2, 3, 50, 4]));
    let p = g.max_pool_time(long, 2).unwrap();
    assert_eq!(g.value(p).shape, vec![2, 3, 25, 4]);
    let odd = g.input(Tensor::zeros(&[1, 1, 25, 1]));
    let p = g.max_pool_time(odd, 2).unwrap();
    assert_eq!(g.value(p).shape[2], 12);

    // Distinct values so the argmax is stable under ±ε.
    let vals: Vec<f64> = (0..2 * 2 * 7 * 3).map(|i| ((i * 37) % 83) as f64 * 0.1).collect();
    let err = check_op(&[t(&[2, 2, 7, 3], &vals)], |g, v| g.max_pool_time(v[0], 2));
    assert!(err < 1e-6, "{err}");

    let mut g = Graph::new();
    let x = g.input_with_grad(t(&[1, 1, 4, 1], &[1.0, 3.0, 2.0, 5.0]));
    let y = g.max_pool_time(x, 2).unwrap();
    let s = g.sum(y);
    let gr = g.backward(s).unwrap();
    assert_eq!(gr.wrt(x).unwrap(), &[0.0, 1.0, 0.0, 1.0]);
}

#[test]
fn dropout_modes_and_expectation() {
    let mut rng = stream(3, &[]);
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[100_000], 1.0));
    assert_eq!(dropout(&mut g, x, 0.0, Mode::Train, &mut rng).unwrap(), x);
    assert_eq!(dropout(&mut g, x, 0.5, Mode::Eval, &mut rng).unwrap(), x);
    let y = dropout(&mut g, x, 0.5, Mode::Train, &mut rng).unwrap();
    let v = &g.value(y).data;
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    assert!((mean - 1.0).abs() < 0.01, "{mean}");
    assert!(v.iter().all(|&z| z == 0.0 || z == 2.0));
    assert!(dropout(&mut g, x, 1.0, Mode::Train, &mut rng).is_err());
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let z = g.input(Tensor::zeros(&[2, 3]));
    let l = g.cross_entropy(z, &[0, 2]).unwrap();
    assert!((g.value(l).data[0] - 3f64.ln()).abs() < 1e-12);
    let s = g.input(t(&[1, 3], &[50.0, 0.0, 0.0]));
    let l = g.cross_entropy(s, &[0]).unwrap();
    assert!(g.value(l).data[0].abs() < 1e-9);
    assert!(matches!(g.cross_entropy(s, &[3]), Err(Error::BadLabel(3))));

    let logits = random(&[4, 3], 20);
    let labels = [0, 2, 1, 2];
    let mut g = Graph::new();
    let x = g.input_with_grad(logits.clone());
    let l = g.cross_entropy(x, &labels).unwrap();
    let grads = g.backward(l).unwrap();
    let gx = grads.wrt(x).unwrap();
    for (r, &lab) in labels.iter().enumerate() {
        let mut row = logits.data[r * 3..r * 3 + 3].to_vec();
        softmax_in_place(&mut row);
        row[lab] -= 1.0;
        for c in 0..3 {
            assert!((gx[r * 3 + c] - row[c] / 4.0).abs() < 1e-12);
        }
    }
    let err = check_op(&[logits], |g, v| g.cross_entropy(v[0], &labels));
    assert!(err < 1e-6, "{err}");
}

#[test]
fn shape_op_gradients() {
    let err = check_op(&[random(&[2, 3, 4], 21)], |g, v| {
        let a = g.slice_last(v[0], 1, 2)?;
        let b = g.slice_last(v[0], 0, 1)?;
        let c = g.concat_last(&[a, b, a])?;
        let s0 = g.select_axis1(c, 0)?;
        let s2 = g.select_axis1(c, 2)?;
        let st = g.stack_axis1(&[s2, s0])?;
        let m = g.mean_axis1(v[0])?;
        let r = g.reshape(m, vec![8])?;
        let f = g.reshape(st, vec![20])?;
        let rr = g.concat_last(&[r, f])?;
        Ok(g.scale(rr, 1.5))
    });
    assert!(err < 1e-6, "{err}");
    let err = check_op(&[random(&[2, 3], 22), random(&[3], 23), random(&[2, 3], 24)], |g, v| {
        let a = g.add_bias(v[0], v[1])?;
        let b = g.mul(a, v[2])?;
        let c = g.add(b, v[0])?;
        g.mul_const(c, vec![0.0, 2.0, 2.0, 0.0, 2.0, 2.0])
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.input_with_grad(t(&[2], &[1.0, 2.0]));
    let s = g.sum(x);
    let gr = g.backward(s).unwrap();
    assert_eq!(gr.wrt(x).unwrap(), &[1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.input_with_grad(t(&[2], &[1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let gr = g.backward(s).unwrap();
    assert_eq!(gr.wrt(x).unwrap(), &[2.0, 4.0]);
    assert!(matches!(g.backward(sq), Err(Error::GraphNotScalar(_))));

    // Bitwise deterministic.
    let a = g.backward(s).unwrap();
    assert_eq!(a.wrt(x), gr.wrt(x));
}

#[test]
fn params_share_one_node_and_collect_grads() {
    let mut store = ParamStore::new();
    let w = store.add("w", t(&[2], &[3.0, 4.0]));
    let unused = store.add("u", Tensor::zeros(&[3]));
    let mut g = Graph::new();
    let a = g.param(&store, w);
    let b = g.param(&store, w);
    assert_eq!(a, b);
    let p = g.mul(a, b).unwrap();
    let s = g.sum(p);
    let grads = g.backward(s).unwrap().for_params(&store);
    assert_eq!(grads[w], vec![6.0, 8.0]);
    assert_eq!(grads[unused], vec![0.0; 3]);
}

#[test]
fn adam_examples() {
    let mut store = ParamStore::new();
    store.add("p", t(&[3], &[1.0, -2.0, 0.5]));
    let before = store.clone();
    let mut st = AdamState::new(AdamHyper::new(0.01, 0.0), &store);
    st.step(&mut store, &[vec![0.0; 3]]).unwrap();
    assert_eq!(store, before);

    let mut st = AdamState::new(AdamHyper::new(0.01, 0.0), &store);
    st.step(&mut store, &[vec![0.3, -7.0, 1e-3]]).unwrap();
    for (a, b) in store.get(0).data.iter().zip(&before.get(0).data) {
        assert!(((a - b).abs() - 0.01).abs() < 1e-5, "{a} {b}");
    }

    let mut store = before.clone();
    let mut st = AdamState::new(AdamHyper::new(0.0007, 0.004), &store);
    st.step(&mut store, &[vec![0.0; 3]]).unwrap();
    for (a, b) in store.get(0).data.iter().zip(&before.get(0).data) {
        assert!((a - b * (1.0 - 2.8e-6)).abs() < 1e-15);
    }

    let mut store = before.clone();
    let mut st = AdamState::new(AdamHyper::new(0.0, 0.0), &store);
    st.step(&mut store, &[vec![5.0, 5.0, 5.0]]).unwrap();
    assert_eq!(store, before);

    assert!(matches!(st.step(&mut store, &[vec![0.0; 2]]), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn grad_check_examples() {
    let mut store = ParamStore::new();
    store.add("w", t(&[3], &[0.5, -1.0, 2.0]));
    let xs = [1.0, 2.0, -3.0];
    let f = |p: &ParamStore| -> Result<f64> {
        Ok(p.get(0).data.iter().zip(&xs).map(|(a, b)| a * b).sum())
    };
    let analytic = vec![xs.to_vec()];
    let coords = [(0, 0), (0, 1), (0, 2)];
    let err = grad_check(f, &mut store, &analytic, &coords, DEFAULT_EPS).unwrap();
    assert!(err < 1e-9, "{err}");
    let corrupted = vec![xs.iter().map(|v| v * 2.0).collect()];
    let err = grad_check(f, &mut store, &corrupted, &coords, DEFAULT_EPS).unwrap();
    assert!((err - 1.0).abs() < 1e-6, "{err}");
}

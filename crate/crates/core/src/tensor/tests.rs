use rand::Rng;

use crate::gradcheck::GradCheck;
use crate::rng::stream;
use crate::tensor::Tensor;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, 0xB00, 0, 0);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            // Box-Muller keeps this independent of rand_distr.
            let u1: f64 = rng.gen_range(1e-9..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::var_from_vec(data, shape).unwrap()
}

#[test]
fn matmul_identity() {
    let eye = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    let b = Tensor::from_vec(vec![3.0, -1.0, 2.5, 0.5], &[2, 2]).unwrap();
    let c = eye.matmul(&b).unwrap();
    assert_eq!(c.data(), b.data());
}

#[test]
fn matmul_hand_product() {
    let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let b = Tensor::from_vec(vec![1.0, 1.0], &[2, 1]).unwrap();
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), &[2, 1]);
    assert_eq!(c.data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    let b = Tensor::<f64>::zeros(&[4, 2]);
    let err = a.matmul(&b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let a = randn(&[5, 4], 1);
    let b = randn(&[4, 3], 2);
    GradCheck::with_tol(1e-6)
        .check(&[a, b], |ins| Ok(ins[0].matmul(&ins[1])?.sum_all()))
        .unwrap();
}

#[test]
fn batched_matmul_gradient() {
    let a = randn(&[3, 4, 2], 3);
    let b = randn(&[3, 2, 5], 4);
    GradCheck::with_tol(1e-6)
        .check(&[a, b], |ins| Ok(ins[0].matmul(&ins[1])?.sum_all()))
        .unwrap();
}

#[test]
fn softmax_uniform() {
    let x = Tensor::<f64>::from_vec(vec![0.0, 0.0, 0.0], &[3]).unwrap();
    let s = x.softmax(0).unwrap();
    for &v in s.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_large_logits_no_overflow() {
    let x = Tensor::<f64>::from_vec(vec![1000.0, 0.0], &[2]).unwrap();
    let s = x.softmax(0).unwrap();
    assert!(s.all_finite());
    assert!((s.data()[0] - 1.0).abs() < 1e-12);
    assert!(s.data()[1] < 1e-12);
}

#[test]
fn softmax_nan_input_fails_fast() {
    let x = Tensor::from_vec(vec![f64::NAN, 0.0], &[2]).unwrap();
    assert!(x.softmax(0).is_err());
}

#[test]
fn softmax_rows_sum_to_one_and_shift_invariant() {
    let x = randn(&[6, 9], 5);
    let s = x.softmax(1).unwrap();
    for row in s.data().chunks(9) {
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
    let shifted = x.add(&Tensor::full(1000.0, &[6, 9])).unwrap().softmax(1).unwrap();
    for (a, b) in s.data().iter().zip(shifted.data()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn softmax_gradient() {
    for (seed, shape) in [(7u64, vec![4usize, 6]), (8, vec![2, 3, 5]), (9, vec![10])] {
        let x = randn(&shape, seed);
        let w = randn(&shape, seed + 100).detach();
        let axis = shape.len() - 1;
        GradCheck::with_tol(1e-6)
            .check(&[x], |ins| Ok(ins[0].softmax(axis)?.mul(&w)?.sum_all()))
            .unwrap();
    }
}

#[test]
fn cross_entropy_uniform_logits() {
    for c in [2usize, 5, 17] {
        let logits = Tensor::from_vec(vec![0.25; 3 * c], &[3, c]).unwrap();
        let loss = logits.cross_entropy_from_logits(&[0, c - 1, c / 2]).unwrap();
        assert!((loss.item() - (c as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_saturated() {
    let mut data = vec![0.0; 2 * 4];
    data[1] = 50.0; // row 0, label 1
    data[4 + 2] = 50.0; // row 1, label 2
    let logits = Tensor::from_vec(data, &[2, 4]).unwrap();
    let loss = logits.cross_entropy_from_logits(&[1, 2]).unwrap();
    assert!(loss.item() < 1e-6);
}

#[test]
fn cross_entropy_label_out_of_range() {
    let logits = Tensor::<f64>::zeros(&[2, 3]);
    assert!(logits.cross_entropy_from_logits(&[0, 3]).is_err());
}

#[test]
fn cross_entropy_gradient() {
    let logits = randn(&[8, 5], 11);
    let labels = [0usize, 1, 2, 3, 4, 0, 2, 4];
    GradCheck::with_tol(1e-6)
        .check(&[logits], |ins| ins[0].cross_entropy_from_logits(&labels))
        .unwrap();
}

#[test]
fn layer_norm_normalizes() {
    let x = randn(&[4, 7], 13).detach();
    let gamma = Tensor::ones(&[7]);
    let beta = Tensor::zeros(&[7]);
    let y = x.layer_norm(&gamma, &beta, 1e-12).unwrap();
    for row in y.data().chunks(7) {
        let mean: f64 = row.iter().sum::<f64>() / 7.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }
}

#[test]
fn layer_norm_constant_input_is_zero() {
    let x = Tensor::full(3.5, &[2, 6]);
    let y = x.layer_norm(&Tensor::ones(&[6]), &Tensor::zeros(&[6]), 1e-5).unwrap();
    for &v in y.data() {
        assert_eq!(v, 0.0);
    }
}

#[test]
fn norm_eps_must_be_positive() {
    let x = Tensor::<f64>::zeros(&[2, 3]);
    assert!(x.layer_norm(&Tensor::ones(&[3]), &Tensor::zeros(&[3]), 0.0).is_err());
    assert!(x.batch_norm_train(&Tensor::ones(&[3]), &Tensor::zeros(&[3]), -1.0).is_err());
}

#[test]
fn layer_norm_gradient() {
    let x = randn(&[3, 6], 17);
    let gamma = randn(&[6], 18);
    let beta = randn(&[6], 19);
    let w = randn(&[3, 6], 20).detach();
    GradCheck::with_tol(1e-5)
        .check(&[x, gamma, beta], |ins| {
            Ok(ins[0].layer_norm(&ins[1], &ins[2], 1e-5)?.mul(&w)?.sum_all())
        })
        .unwrap();
}

#[test]
fn batch_norm_normalizes_and_gradient() {
    let x = randn(&[8, 5], 21);
    let gamma = randn(&[5], 22);
    let beta = randn(&[5], 23);
    let (y, mean, var) = x
        .detach()
        .batch_norm_train(&Tensor::ones(&[5]), &Tensor::zeros(&[5]), 1e-12)
        .unwrap();
    assert_eq!(mean.len(), 5);
    assert_eq!(var.len(), 5);
    for j in 0..5 {
        let col: Vec<f64> = y.data().iter().skip(j).step_by(5).copied().collect();
        let m: f64 = col.iter().sum::<f64>() / 8.0;
        let v: f64 = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 8.0;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-8);
    }
    let w = randn(&[8, 5], 24).detach();
    GradCheck::with_tol(1e-5)
        .check(&[x, gamma, beta], |ins| {
            Ok(ins[0].batch_norm_train(&ins[1], &ins[2], 1e-5)?.0.mul(&w)?.sum_all())
        })
        .unwrap();
}

#[test]
fn batch_norm_training_needs_batch() {
    let x = Tensor::<f64>::zeros(&[1, 3]);
    assert!(x.batch_norm_train(&Tensor::ones(&[3]), &Tensor::zeros(&[3]), 1e-5).is_err());
}

#[test]
fn l2_normalize_three_four_five() {
    let x = Tensor::<f64>::from_vec(vec![3.0, 4.0], &[1, 2]).unwrap();
    let y = x.l2_normalize().unwrap();
    assert!((y.data()[0] - 0.6).abs() < 1e-15);
    assert!((y.data()[1] - 0.8).abs() < 1e-15);
}

#[test]
fn l2_normalize_idempotent_and_unit() {
    let x = randn(&[5, 8], 25).detach();
    let y = x.l2_normalize().unwrap();
    for row in y.data().chunks(8) {
        let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }
    let z = y.l2_normalize().unwrap();
    for (a, b) in y.data().iter().zip(z.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn l2_normalize_gradient() {
    let x = randn(&[4, 6], 26);
    let w = randn(&[4, 6], 27).detach();
    GradCheck::with_tol(1e-5)
        .check(&[x], |ins| Ok(ins[0].l2_normalize()?.mul(&w)?.sum_all()))
        .unwrap();
}

#[test]
fn detach_severs_gradient_flow() {
    let x = randn(&[3, 3], 29);
    let loss = x.detach().scale(2.0).sum_all();
    let grads = loss.backward().unwrap();
    assert!(grads.is_empty(), "no gradient may flow through detach");
}

#[test]
fn detach_keeps_query_gradient_only() {
    let q = randn(&[1, 4], 30);
    let k = randn(&[1, 4], 31);
    let loss = q.mul(&k.detach()).unwrap().sum_all();
    let grads = loss.backward().unwrap();
    let gq = grads.get(&q).expect("q gradient present");
    for (g, kv) in gq.iter().zip(k.data()) {
        assert!((g - kv).abs() < 1e-15);
    }
    assert!(grads.get(&k).is_none(), "k gradient must be absent");
}

#[test]
fn backward_of_sum_is_ones() {
    let x = randn(&[2, 5], 32);
    let grads = x.sum_all().backward().unwrap();
    assert_eq!(grads.get(&x).unwrap(), vec![1.0; 10].as_slice());
}

#[test]
fn backward_accumulates_over_fanout() {
    let x = randn(&[4], 33);
    let y1 = x.scale(1.0);
    let y2 = x.scale(1.0);
    let loss = y1.add(&y2).unwrap().sum_all();
    let grads = loss.backward().unwrap();
    assert_eq!(grads.get(&x).unwrap(), vec![2.0; 4].as_slice());
}

#[test]
fn backward_requires_scalar() {
    let x = randn(&[3], 34);
    assert!(x.scale(1.0).backward().is_err());
}

#[test]
fn elementwise_and_shape_op_gradients() {
    // One pass over the remaining primitives, three shapes each.
    for (seed, shape) in [(40u64, vec![3usize, 4]), (41, vec![2, 3, 4]), (42, vec![7])] {
        let last = *shape.last().unwrap();
        let x = randn(&shape, seed);
        let y = randn(&shape, seed + 50);
        let bias = randn(&[last], seed + 60);
        GradCheck::default()
            .check(&[x.clone(), y.clone()], |ins| Ok(ins[0].mul(&ins[1])?.sum_all()))
            .unwrap();
        GradCheck::default()
            .check(&[x.clone(), bias.clone()], |ins| Ok(ins[0].add(&ins[1])?.sum_all()))
            .unwrap();
        GradCheck::default()
            .check(&[x.clone(), bias.clone()], |ins| Ok(ins[0].mul(&ins[1])?.sum_all()))
            .unwrap();
        GradCheck::default()
            .check(&[x.clone()], |ins| Ok(ins[0].gelu().sum_all()))
            .unwrap();
        GradCheck::default()
            .check(&[x.clone()], |ins| Ok(ins[0].relu().mean_all()))
            .unwrap();
        GradCheck::default()
            .check(&[x.clone()], |ins| Ok(ins[0].sub(&ins[0].gelu())?.sum_all()))
            .unwrap();
        GradCheck::default()
            .check(&[x.clone()], |ins| Ok(ins[0].mean_axis(0)?.sum_all()))
            .unwrap();
        GradCheck::default()
            .check(&[x.clone()], |ins| Ok(ins[0].sum_axis(shape.len() - 1)?.mean_all()))
            .unwrap();
    }
}

#[test]
fn permute_narrow_concat_gather_gradients() {
    let x = randn(&[2, 3, 4], 70);
    let w = randn(&[4, 3, 2], 71).detach();
    GradCheck::default()
        .check(&[x.clone()], |ins| Ok(ins[0].permute(&[2, 1, 0])?.mul(&w)?.sum_all()))
        .unwrap();

    let wn = randn(&[2, 2, 4], 72).detach();
    GradCheck::default()
        .check(&[x.clone()], |ins| Ok(ins[0].narrow(1, 1, 2)?.mul(&wn)?.sum_all()))
        .unwrap();

    let y = randn(&[2, 2, 4], 73);
    let wc = randn(&[2, 5, 4], 74).detach();
    GradCheck::default()
        .check(&[x.clone(), y], |ins| {
            Ok(Tensor::concat(&[ins[0].clone(), ins[1].clone()], 1)?.mul(&wc)?.sum_all())
        })
        .unwrap();

    let table = randn(&[6, 3], 75);
    let idx = [0usize, 5, 2, 2, 4];
    let wg = randn(&[5, 3], 76).detach();
    GradCheck::default()
        .check(&[table], |ins| Ok(ins[0].gather_rows(&idx)?.mul(&wg)?.sum_all()))
        .unwrap();
}

#[test]
fn permute_round_trip() {
    let x = randn(&[2, 3, 4, 5], 80).detach();
    let p = x.permute(&[3, 1, 0, 2]).unwrap();
    assert_eq!(p.shape(), &[5, 3, 2, 4]);
    let back = p.permute(&[2, 1, 3, 0]).unwrap();
    assert_eq!(back.shape(), x.shape());
    assert_eq!(back.data(), x.data());
}

#[test]
fn reshape_shares_storage() {
    let x = randn(&[4, 6], 81).detach();
    let r = x.reshape(&[2, 12]).unwrap();
    assert_eq!(r.data().as_ptr(), x.data().as_ptr());
    assert!(x.reshape(&[5, 5]).is_err());
}

#[test]
fn concat_narrow_round_trip() {
    let x = randn(&[3, 4], 82).detach();
    let a = x.narrow(1, 0, 2).unwrap();
    let b = x.narrow(1, 2, 2).unwrap();
    let r = Tensor::concat(&[a, b], 1).unwrap();
    assert_eq!(r.data(), x.data());
}

#[test]
fn first_nonfinite_op_names_the_culprit() {
    let x = Tensor::var_from_vec(vec![1.0, -2.0], &[2]).unwrap();
    let y = x.scale(f64::INFINITY); // scale output becomes non-finite
    let loss = y.gelu().sum_all();
    let name = super::first_nonfinite_op(&loss).expect("non-finite value present");
    assert_eq!(name, "scale");
}

#[test]
fn deterministic_ops_bit_identical() {
    let x = randn(&[16, 16], 90).detach();
    let y = randn(&[16, 16], 91).detach();
    let a = x.matmul(&y).unwrap();
    let b = x.matmul(&y).unwrap();
    assert_eq!(a.data(), b.data());
}

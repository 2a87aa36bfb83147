use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::grad_check;
use super::*;
use crate::error::Error;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

const TOL: f64 = 1e-4;

#[test]
fn identity_kernel_conv_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = Params::new();
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let w = p.add("w", Tensor::new(&[1, 1, 3, 3], k).unwrap());
    let x = rand_tensor(&[1, 1, 5, 6], &mut rng);
    let mut t = Tape::new(&p);
    let xi = t.input(x.clone()).unwrap();
    let y = t.conv(xi, w, None, [1; 3], [0, 1, 1]).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn linear_sum_weight_grad_is_broadcast_input() {
    let mut p = Params::new();
    let w = p.add("w", Tensor::new(&[3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
    let mut t = Tape::new(&p);
    let x = t.input(Tensor::new(&[1, 2], vec![2.0, -1.0]).unwrap()).unwrap();
    let y = t.linear(x, w, None).unwrap();
    let s = t.sum(y).unwrap();
    let mut g = p.zero_grads();
    t.backward(&[(s, &Tensor::scalar(1.0))], &mut g).unwrap();
    assert_eq!(g.get(w).data(), &[2.0, -1.0, 2.0, -1.0, 2.0, -1.0]);
}

#[test]
fn flatten_contract() {
    let data: Vec<f64> = (0..96).map(|v| v as f64).collect();
    let t = Tensor::new(&[1, 2, 3, 4, 4], data.clone()).unwrap();
    let f = t.flatten_3d_to_2d().unwrap();
    assert_eq!(f.shape(), &[1, 6, 4, 4]);
    assert_eq!(f.data(), data.as_slice());
    let d1 = Tensor::new(&[2, 3, 1, 2, 2], (0..24).map(|v| v as f64).collect()).unwrap();
    assert_eq!(d1.clone().flatten_3d_to_2d().unwrap().data(), d1.data());
    assert!(matches!(Tensor::zeros(&[1, 2, 3, 4]).flatten_3d_to_2d(), Err(Error::ShapeMismatch(_))));

    let p = Params::new();
    let mut tape = Tape::new(&p);
    let x = tape.input(Tensor::new(&[1, 2, 3, 4, 4], data).unwrap()).unwrap();
    let f = tape.flatten_3d_to_2d(x).unwrap();
    let s = tape.sum(f).unwrap();
    let g = tape.backward(&[(s, &Tensor::scalar(1.0))], &mut p.zero_grads()).unwrap();
    assert_eq!(g[x.index()].as_ref().unwrap(), &Tensor::full(&[1, 2, 3, 4, 4], 1.0));
}

#[test]
fn shape_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = Params::new();
    let mut lay = Layout::default();
    let c = Conv::new(&mut p, &mut lay, "c", 2, 3, 4, 3, 1, 1, true, &mut rng);
    let l = Linear::new(&mut p, &mut lay, "l", 5, 2, &mut rng);
    let mut t = Tape::new(&p);
    let x = t.input(Tensor::zeros(&[1, 2, 8, 8])).unwrap();
    assert!(matches!(c.forward(&mut t, x), Err(Error::ShapeMismatch(_))));
    assert!(matches!(l.forward(&mut t, x), Err(Error::ShapeMismatch(_))));
    let y = t.input(Tensor::zeros(&[1, 2, 4, 8])).unwrap();
    assert!(matches!(t.add(x, y), Err(Error::ShapeMismatch(_))));
}

#[test]
fn non_finite_values_fault() {
    let p = Params::new();
    let mut t = Tape::new(&p);
    let x = t.input(Tensor::scalar(1e308)).unwrap();
    assert!(matches!(t.scale(x, 10.0), Err(Error::NonFiniteFault { .. })));
}

#[test]
fn grad_check_conv_2d_and_3d() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (dims, shape, stride) in [(2, vec![2, 3, 7, 6], 1), (2, vec![1, 2, 8, 7], 2), (3, vec![1, 2, 5, 4, 6], 2), (3, vec![2, 1, 4, 4, 4], 1)] {
        let mut p = Params::new();
        let c = Conv::new(&mut p, &mut Layout::default(), "c", dims, shape[1], 3, 3, stride, 1, true, &mut rng);
        for id in p.ids().collect::<Vec<_>>() {
            let n = p.value(id).len();
            p.value_mut(id).data_mut().copy_from_slice(&rand_tensor(&[n], &mut rng).into_data());
        }
        let x = rand_tensor(&shape, &mut rng);
        let r = grad_check(&p, &[x], |t, i| c.forward(t, i[0]), 1e-5, 64).unwrap();
        assert!(r.max_rel_err < TOL, "{:?} {:?}", shape, r);
    }
}

#[test]
fn grad_check_linear_relu_add_scale_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p = Params::new();
    let l = Linear::new(&mut p, &mut Layout::default(), "l", 6, 4, &mut rng);
    let a = rand_tensor(&[3, 6], &mut rng);
    let b = rand_tensor(&[3, 4], &mut rng);
    let r = grad_check(
        &p,
        &[a, b],
        |t, i| {
            let y = l.forward(t, i[0])?;
            let y = t.relu(y)?;
            let z = t.add(y, i[1])?;
            let z = t.scale(z, -1.5)?;
            t.concat(&[z, i[1], y])
        },
        1e-5,
        64,
    )
    .unwrap();
    assert!(r.max_rel_err < TOL, "{:?}", r);
}

#[test]
fn grad_check_norms_and_upsample() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for spec in [NormSpec::Batch, NormSpec::Group(2), NormSpec::Group(1)] {
        for mode in [Mode::Train, Mode::Eval] {
            let mut p = Params::new();
            let n = Norm::new(&mut p, &mut Layout::default(), "n", 4, spec);
            for id in p.ids().collect::<Vec<_>>() {
                let len = p.value(id).len();
                let v: Vec<f64> = (0..len).map(|_| rng.random_range(0.5..1.5)).collect();
                p.value_mut(id).data_mut().copy_from_slice(&v);
            }
            let x = rand_tensor(&[2, 4, 3, 5], &mut rng);
            let r = grad_check(
                &p,
                &[x],
                |t, i| {
                    let y = n.forward(t, i[0], mode)?;
                    t.upsample(y, [1, 2, 3])
                },
                1e-5,
                64,
            )
            .unwrap();
            assert!(r.max_rel_err < TOL, "{:?} {:?} {:?}", spec, mode, r);
        }
    }
    let p = Params::new();
    let x = rand_tensor(&[1, 2, 2, 3, 2], &mut rng);
    let r = grad_check(&p, &[x.clone()], |t, i| t.upsample(i[0], [2, 2, 2]), 1e-5, 64).unwrap();
    assert!(r.max_rel_err < TOL);
    let r = grad_check(&p, &[x], |t, i| t.repeat_batch(i[0], 3), 1e-5, 64).unwrap();
    assert!(r.max_rel_err < TOL);
}

#[test]
fn grad_check_masked_mean_and_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = rand_tensor(&[1, 2, 4, 4], &mut rng);
    let b = rand_tensor(&[1, 2, 4, 4], &mut rng);
    let mask: Vec<f64> = (0..32).map(|k| (k % 3 != 0) as u8 as f64).collect();
    for squared in [false, true] {
        let r = grad_check(&Params::new(), &[a.clone(), b.clone()], |t, i| t.masked_abs_mean(i[0], i[1], &mask, squared), 1e-6, 64).unwrap();
        assert!(r.max_rel_err < TOL, "{:?}", r);
    }
    let mut p = Params::new();
    let blk = ResidualBlock::new(&mut p, &mut Layout::default(), "r", 2, NormSpec::Group(1), &mut rng);
    let r = grad_check(&p, &[a], |t, i| blk.forward(t, i[0], Mode::Train), 1e-5, 48).unwrap();
    assert!(r.max_rel_err < TOL, "{:?}", r);
}

#[test]
fn batch_norm_train_output_is_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut p = Params::new();
    let n = Norm::new(&mut p, &mut Layout::default(), "n", 3, NormSpec::Batch);
    let x = Tensor::new(&[4, 3, 5, 5], (0..300).map(|_| rng.random_range(-5.0..20.0)).collect()).unwrap();
    let mut t = Tape::new(&p);
    let xi = t.input(x).unwrap();
    let y = n.forward(&mut t, xi, Mode::Train).unwrap();
    let d = t.value(y).data();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|b| d[(b * 3 + c) * 25..(b * 3 + c + 1) * 25].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-6);
        assert!((v - 1.0).abs() < 1e-4);
    }
    assert_eq!(t.batch_stats().len(), 1);
}

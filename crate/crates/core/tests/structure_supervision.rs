use crossdsr::data::{DepthMap, Scale, StructureMap};
use crossdsr::networks::UncertaintyConvs;
use crossdsr::supervision::{attention_fuse, structure_loss, uncertainty_map};
use crossdsr::Error;
use crossdsr_tensor::Tensor;
use ndarray::{array, Array2};
use proptest::prelude::*;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn conv_params(weight: f64, bias: f64) -> crossdsr::networks::NetworkParams<f64> {
    let mut p = UncertaintyConvs.init::<f64>(Scale::X4);
    for name in [UncertaintyConvs::SR, UncertaintyConvs::DE] {
        p.insert(format!("{name}.weight"), Tensor::from_vec(&[1, 1, 1, 1], vec![weight]).unwrap());
        p.insert(format!("{name}.bias"), Tensor::from_vec(&[1], vec![bias]).unwrap());
    }
    p
}

#[test]
fn uncertainty_convs_start_as_identity() {
    let p = UncertaintyConvs.init::<f64>(Scale::X2);
    for name in [UncertaintyConvs::SR, UncertaintyConvs::DE] {
        assert_eq!(p.get(&format!("{name}.weight")).unwrap().data(), &[1.0]);
        assert_eq!(p.get(&format!("{name}.bias")).unwrap().data(), &[0.0]);
    }
}

#[test]
fn zero_residual_gives_one_half() {
    let gt = DepthMap::from_fn(5, 6, |y, x| (y * 6 + x) as f64 / 30.0);
    let u = uncertainty_map(&gt, Some(&gt), &conv_params(0.7, 0.0), UncertaintyConvs::SR).unwrap();
    assert!(u.values().iter().all(|&v| v == 0.5));
}

#[test]
fn residual_two_gives_sigmoid_two() {
    let gt = DepthMap::constant(2, 2, 0.0);
    let pred = DepthMap::new(array![[0.0, 2.0], [2.0, 0.0]]).unwrap();
    let u = uncertainty_map(&pred, Some(&gt), &conv_params(1.0, 0.0), UncertaintyConvs::DE).unwrap();
    assert_eq!(u.values()[[0, 0]], 0.5);
    assert!((u.values()[[0, 1]] - sigmoid(2.0)).abs() < 1e-12);
    assert!((u.values()[[0, 1]] - 0.8808).abs() < 1e-4);
}

#[test]
fn uncertainty_needs_ground_truth() {
    let pred = DepthMap::constant(3, 3, 0.2);
    let err = uncertainty_map(&pred, None, &conv_params(1.0, 0.0), UncertaintyConvs::SR).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

fn fuse_inputs(c: usize, fsr: f64, fde: f64) -> (Tensor<f64>, Tensor<f64>) {
    (Tensor::full(&[1, c, 3, 4], fsr), Tensor::full(&[1, c, 3, 4], fde))
}

#[test]
fn fusion_puts_super_resolution_branch_first() {
    let (a, b) = fuse_inputs(2, 1.0, 0.0);
    let u_sr = DepthMap::constant(3, 4, 0.5);
    let u_de = DepthMap::constant(3, 4, 0.25);
    let f = attention_fuse(&a, &b, &u_sr, &u_de).unwrap();
    assert_eq!(f.shape(), &[1, 4, 3, 4]);
    let (first, last) = f.data().split_at(24);
    assert!(first.iter().all(|&v| v == 1.5));
    assert!(last.iter().all(|&v| v == 0.0));

    // distinct constants per branch reveal the order
    let (a, b) = fuse_inputs(3, 2.0, 7.0);
    let zero = DepthMap::constant(3, 4, 0.0);
    let one = DepthMap::constant(3, 4, 1.0);
    let f = attention_fuse(&a, &b, &zero, &one).unwrap();
    assert_eq!(f.shape(), &[1, 6, 3, 4]);
    assert!(f.data()[..36].iter().all(|&v| v == 2.0));
    assert!(f.data()[36..].iter().all(|&v| v == 14.0));
}

#[test]
fn fusion_rejects_spatial_mismatch() {
    let (a, b) = fuse_inputs(2, 1.0, 1.0);
    let u = DepthMap::constant(3, 4, 0.5);
    let wrong = DepthMap::constant(4, 4, 0.5);
    assert!(attention_fuse(&a, &b, &u, &wrong).is_err());
}

#[test]
fn structure_loss_examples() {
    let s = StructureMap::new(array![[0.3, -0.2], [0.0, 1.0]]);
    assert_eq!(structure_loss(&s, &s).unwrap(), 0.0);
    let shifted = StructureMap::new(s.values() + 0.1);
    assert!((structure_loss(&shifted, &s).unwrap() - 0.1).abs() < 1e-12);
    let other = StructureMap::new(array![[0.5, 0.2], [-0.3, 0.4]]);
    // |0.2| + |0.4| + |0.3| + |0.6| = 1.5
    assert!((structure_loss(&other, &s).unwrap() - 0.375).abs() < 1e-12);
    let wrong = StructureMap::new(Array2::zeros((3, 2)));
    assert!(matches!(structure_loss(&wrong, &s), Err(Error::Dimension(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn uncertainty_is_monotone_in_preactivation(w in prop::sample::select(vec![-1.5f64, 0.5, 2.0]), bias in -1.0f64..1.0, r1 in -1.0f64..1.0, r2 in -1.0f64..1.0) {
        let gt = DepthMap::constant(1, 2, 0.0);
        let pred = DepthMap::new(array![[r1, r2]]).unwrap();
        let u = uncertainty_map(&pred, Some(&gt), &conv_params(w, bias), UncertaintyConvs::SR).unwrap();
        let (u1, u2) = (u.values()[[0, 0]], u.values()[[0, 1]]);
        prop_assert!(u1 > 0.0 && u1 < 1.0 && u2 > 0.0 && u2 < 1.0);
        prop_assert!((u1 - sigmoid(w * r1 + bias)).abs() < 1e-12);
        let (p1, p2) = (w * r1 + bias, w * r2 + bias);
        if p1 < p2 {
            prop_assert!(u1 <= u2);
        } else if p1 > p2 {
            prop_assert!(u1 >= u2);
        }
    }
}

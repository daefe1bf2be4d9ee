mod common;

use common::*;
use orthoconv::dbt::DenseMatrix;
use orthoconv::orthreg::{
    combined_loss, conv_orth_loss, kernel_orth_loss, kernel_orthonormal, lemma_gap, orth_loss, OrthMode, Orientation,
};
use orthoconv::{ConvGeometry, DbtMatrix, KernelTensor, Rng, Tensor};
use proptest::prelude::*;

const CONFIGS: [(usize, usize, usize, usize); 5] = [(1, 1, 1, 1), (2, 1, 2, 1), (3, 2, 3, 1), (4, 4, 3, 2), (2, 3, 4, 2)];

fn modes(stride: usize) -> Vec<OrthMode> {
    let mut v = vec![OrthMode::ConvRow, OrthMode::KernelRow, OrthMode::KernelCol];
    if stride == 1 {
        v.push(OrthMode::ConvCol);
    }
    v
}

fn reference_loss(k: &KernelTensor, stride: usize, mode: OrthMode) -> f64 {
    match mode {
        OrthMode::ConvRow => row_loss_bruteforce(k, stride),
        OrthMode::ConvCol => col_loss_bruteforce(k),
        OrthMode::KernelRow => kernel_loss_bruteforce(k, true),
        OrthMode::KernelCol => kernel_loss_bruteforce(k, false),
    }
}

#[test]
fn losses_match_bruteforce() {
    for (n, &(m, c, k, s)) in CONFIGS.iter().enumerate() {
        let kernel = KernelTensor::randn(m, c, k, &mut Rng::new(n as u64)).unwrap();
        for mode in modes(s) {
            let got = orth_loss(&kernel, s, mode).unwrap().loss;
            let want = reference_loss(&kernel, s, mode);
            assert!((got - want).abs() <= 1e-10 * want.max(1.0), "{mode} {:?}: {got} vs {want}", (m, c, k, s));
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    for (n, &(m, c, k, s)) in CONFIGS.iter().enumerate() {
        let kernel = KernelTensor::randn(m, c, k, &mut Rng::new(10 + n as u64)).unwrap();
        for mode in modes(s) {
            let grad = orth_loss(&kernel, s, mode).unwrap().grad;
            let numeric = fd_grad(
                |q| reference_loss(&KernelTensor::from_vec(m, c, k, q.to_vec()).unwrap(), s, mode),
                kernel.data(),
                1e-5,
            );
            let err = rel_err(grad.data(), &numeric, 1e-7);
            assert!(err <= 1e-5, "{mode} {:?}: {err}", (m, c, k, s));
        }
    }
}

#[test]
fn col_mode_rejects_strides() {
    let kernel = KernelTensor::randn(2, 2, 3, &mut Rng::new(1)).unwrap();
    assert!(conv_orth_loss(&kernel, 2, Orientation::Col).is_err());
}

#[test]
fn box_filter_witness() {
    // all-ones 3x3 filter scaled to unit norm: overlaps are (3-|du|)(3-|dv|)/9,
    // so the off-center squares sum to (19^2 - 81) / 81
    let kernel = KernelTensor::from_vec(1, 1, 3, vec![1.0 / 3.0; 9]).unwrap();
    assert!(kernel_orth_loss(&kernel, Orientation::Row).unwrap().loss <= 1e-16);
    let conv = conv_orth_loss(&kernel, 1, Orientation::Row).unwrap().loss;
    assert!((conv - 280.0 / 81.0).abs() < 1e-12);
}

// conv-row loss of kernel_orthonormal(2, 1, 3, 11), from the brute-force shifted-overlap oracle
const WITNESS_2_1_3: f64 = 3.1706565356993894;

#[test]
fn orthonormal_rows_are_not_orthogonal_convolutions() {
    let kernel = kernel_orthonormal(2, 1, 3, 11).unwrap();
    assert!(kernel_orth_loss(&kernel, Orientation::Row).unwrap().loss <= 1e-16);
    let oracle = row_loss_bruteforce(&kernel, 1);
    assert!((oracle - WITNESS_2_1_3).abs() < 1e-12, "oracle {oracle}");
    let got = conv_orth_loss(&kernel, 1, Orientation::Row).unwrap().loss;
    assert!((got - WITNESS_2_1_3).abs() < 1e-12);
}

#[test]
fn stride_k_reduces_to_kernel_loss() {
    for (n, &(m, c, k)) in [(2, 3, 2), (4, 2, 3), (3, 1, 4)].iter().enumerate() {
        let kernel = KernelTensor::randn(m, c, k, &mut Rng::new(30 + n as u64)).unwrap();
        let a = conv_orth_loss(&kernel, k, Orientation::Row).unwrap();
        let b = kernel_orth_loss(&kernel, Orientation::Row).unwrap();
        assert!((a.loss - b.loss).abs() <= 1e-12 * b.loss.max(1.0));
        assert!(max_abs(a.grad.data(), b.grad.data()) <= 1e-12 * b.loss.max(1.0));
    }
}

#[test]
fn lemma_on_the_small_dbt() {
    let kernel = KernelTensor::randn(1, 1, 2, &mut Rng::new(4)).unwrap();
    let geom = ConvGeometry::for_kernel(&kernel, 4, 4, 1, 0).unwrap();
    let dense = DbtMatrix::build(&kernel, &geom).unwrap().to_dense().unwrap();
    assert_eq!((dense.rows(), dense.cols()), (9, 16));
    assert!((lemma_gap(&dense).gap + 7.0).abs() < 1e-10);
}

#[test]
fn combined_loss_adds_layers() {
    let mut rng = Rng::new(8);
    let k1 = KernelTensor::randn(4, 1, 3, &mut rng).unwrap();
    let k2 = KernelTensor::randn(4, 4, 3, &mut rng).unwrap();
    let g1 = ConvGeometry::for_kernel(&k1, 8, 8, 1, 1).unwrap();
    let g2 = ConvGeometry::for_kernel(&k2, 8, 8, 2, 1).unwrap();
    let total = combined_loss(1.5, &[(&k1, g1), (&k2, g2)], 0.25).unwrap();
    // layer 1 is tall at stride 1 (column form), layer 2 is fat (row form)
    let want = 1.5 + 0.25 * (col_loss_bruteforce(&k1) + row_loss_bruteforce(&k2, 2));
    assert!((total - want).abs() < 1e-9 * want);
    assert!(combined_loss(0.0, &[(&k1, g1)], -1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lemma_gap_is_shape_difference(rows in 1usize..12, cols in 1usize..12, seed in 0u64..10_000) {
        let t = Tensor::randn(&[rows, cols], &mut Rng::new(seed)).unwrap();
        let a = DenseMatrix::from_vec(rows, cols, t.into_data()).unwrap();
        let g = lemma_gap(&a);
        let scale = g.l_r.abs().max(g.l_c.abs()).max(1.0);
        prop_assert!((g.gap - (rows as f64 - cols as f64)).abs() <= 1e-10 * scale);
    }

    #[test]
    fn losses_are_nonnegative_and_zero_kernel_leaves_target(seed in 0u64..10_000, m in 1usize..4, c in 1usize..4, k in 1usize..4) {
        let kernel = KernelTensor::randn(m, c, k, &mut Rng::new(seed)).unwrap();
        for mode in modes(1) {
            let l = orth_loss(&kernel, 1, mode).unwrap().loss;
            prop_assert!(l >= 0.0);
        }
        // for a vanishing kernel the self-overlaps vanish and only the target remains
        let zero = KernelTensor::zeros(m, c, k).unwrap();
        prop_assert!((orth_loss(&zero, 1, OrthMode::ConvRow).unwrap().loss - m as f64).abs() < 1e-15);
        prop_assert!((orth_loss(&zero, 1, OrthMode::ConvCol).unwrap().loss - c as f64).abs() < 1e-15);
    }
}

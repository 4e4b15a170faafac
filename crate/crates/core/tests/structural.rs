mod common;

use common::{attention_checks, gate_spread, involution_mismatches};
use lemore::cartesian::View;
use lemore::tensor::Tensor;

#[test]
fn attention_rows_are_distributions() {
    let c = attention_checks(11);
    assert!(
        c.row_sum_error < 1e-9,
        "row sum error {:e}",
        c.row_sum_error
    );
}

#[test]
fn nine_pair_attention_equals_factored_form() {
    let c = attention_checks(12);
    assert!(c.pairwise_gap < 1e-10, "gap {:e}", c.pairwise_gap);
}

#[test]
fn view_permutations_are_involutions() {
    assert_eq!(involution_mismatches(13), 0);
}

#[test]
fn view_axes_swap_expected_dimensions() {
    let x = Tensor::zeros(&[2, 3, 5]).unwrap();
    let shapes: Vec<Vec<usize>> = View::ALL
        .iter()
        .map(|v| x.permute(&v.axes()).unwrap().shape().to_vec())
        .collect();
    assert_eq!(shapes, vec![vec![2, 3, 5], vec![3, 2, 5], vec![5, 3, 2]]);
}

#[test]
fn channel_gate_is_spatially_constant() {
    let spread = gate_spread(14);
    assert!(spread < 1e-12, "spread {spread:e}");
}

//! Finite-difference checks for every differentiable primitive and for the
//! composed codebook training loss. The check bodies live in
//! `common::gradcheck` so the acceptance gate can time the whole suite.

mod common;
use common::gradcheck as gc;

#[test]
fn elementwise_binary_ops() {
    gc::elementwise_binary_ops();
}

#[test]
fn bias_scale_and_scalar_gate() {
    gc::bias_scale_and_scalar_gate();
}

#[test]
fn matmul_ops() {
    gc::matmul_ops();
}

#[test]
fn activations() {
    gc::activations();
}

#[test]
fn softmax_and_norms() {
    gc::softmax_and_norms();
}

#[test]
fn convolutions() {
    gc::convolutions();
}

#[test]
fn reductions_and_losses() {
    gc::reductions_and_losses();
}

#[test]
fn structural_ops() {
    gc::structural_ops();
}

#[test]
fn gradient_gates() {
    gc::gradient_gates();
}

#[test]
fn composed_codebook_loss() {
    gc::composed_codebook_loss();
}

#[test]
fn transformer_block_composed() {
    gc::transformer_block_composed();
}

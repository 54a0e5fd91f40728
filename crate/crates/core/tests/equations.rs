mod common;

use common::checks;

const SEEDS: u64 = 120;

fn run(check: fn(u64) -> f64) {
    for seed in 0..SEEDS {
        let err = check(seed);
        assert!(err < 1e-9, "seed {seed}: deviation {err:e}");
    }
}

#[test]
fn temporal_conv_matches_sliding_dot_products() {
    run(checks::temporal_conv_error);
}

#[test]
fn similarity_matches_scalar_formula() {
    run(checks::similarity_error);
}

#[test]
fn attention_matches_restricted_softmax() {
    run(checks::attention_error);
}

#[test]
fn attention_layer_matches_dense_matrix() {
    run(checks::gat_layer_error);
}

#[test]
fn embedding_matches_residual_concatenation() {
    run(checks::embed_error);
}

#[test]
fn lstm_matches_scalar_recurrence() {
    run(checks::lstm_error);
}

#[test]
fn pattern_attention_matches_scalar_scores() {
    run(checks::tpa_score_error);
}

#[test]
fn readout_matches_scalar_projection() {
    run(checks::projection_error);
}

#[test]
fn elasticity_laws_match_closed_forms() {
    run(checks::local_law_error);
    run(checks::spillover_law_error);
}

#[test]
fn forward_pass_matches_composed_oracles() {
    run(checks::model_error);
}

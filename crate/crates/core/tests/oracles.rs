mod common;

use common::*;
use lcr_ser::eval::{ndcg_at_k, RankedList};
use lcr_ser::objectives::{bce_loss, tcl_loss, Distance};
use lcr_ser::rl::{advantages, kl_estimate};

#[test]
fn attention_matches_naive_loops() {
    check_attention(11).unwrap();
}

#[test]
fn feed_forward_matches_naive_loops() {
    check_ffn(12).unwrap();
}

#[test]
fn query_embedding_is_mean_of_word_rows() {
    check_query_mean(13).unwrap();
}

#[test]
fn target_aware_aggregation_matches_naive_loops() {
    check_target_aggregation(14).unwrap();
}

#[test]
fn bce_matches_naive_sum() {
    check_bce(15).unwrap();
}

#[test]
fn tcl_matches_naive_hinge() {
    check_tcl(16).unwrap();
}

#[test]
fn advantages_match_naive_standardization() {
    check_advantages(17).unwrap();
}

#[test]
fn kl_estimator_matches_naive_formula() {
    check_kl(18).unwrap();
}

#[test]
fn tcl_equals_margin_for_identical_states() {
    let t = [0.3, -1.0, 2.0];
    let h = [1.0, 0.5, -0.25];
    for distance in [Distance::Euclidean, Distance::Cosine] {
        let parts = tcl_loss(&t, &h, &h, &h, &h, 0.5, distance);
        assert_eq!(parts.search, 0.5);
        assert_eq!(parts.rec, 0.5);
    }
}

#[test]
fn bce_of_even_odds_is_ln_two() {
    assert_eq!(bce_loss(&[(0.5, 1.0)]).unwrap(), std::f64::consts::LN_2);
}

#[test]
fn ndcg_at_rank_three_is_one_half() {
    let list = RankedList::from_scores(&[1, 2, 3, 4], &[0.9, 0.8, 0.7, 0.1], 3).unwrap();
    assert_eq!(list.target_rank, 3);
    assert_eq!(ndcg_at_k(&list, 5), 0.5);
    assert_eq!(naive_ndcg(3, 5), 0.5);
}

#[test]
fn advantages_of_two_point_group() {
    assert_eq!(advantages(&[1.0, 0.0]), vec![1.0, -1.0]);
}

#[test]
fn kl_closed_forms() {
    assert_eq!(kl_estimate(0.4, 0.4), 0.0);
    assert_eq!(kl_estimate(0.4, 0.2), 2.0 - std::f64::consts::LN_2 - 1.0);
}

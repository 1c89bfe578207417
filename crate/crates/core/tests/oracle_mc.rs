mod common;

#[test]
fn monte_carlo_agrees_with_exact_two_segment_rates() {
    let grid = common::oracle_grid(0.95, 200, 10_000, 17);
    assert_eq!(grid.len(), 12);
    for g in &grid {
        assert!(g.within_ci(), "{g:?}");
    }
}

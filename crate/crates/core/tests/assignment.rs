use facetnet::assignment::{greedy_match, hungarian, CostMatrix};
use proptest::prelude::*;

/// Minimum over all injective row→column maps by exhaustive search.
fn brute_force(c: &CostMatrix) -> f64 {
    fn rec(c: &CostMatrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == c.rows {
            *best = best.min(acc);
            return;
        }
        for col in 0..c.cols {
            if !used[col] {
                used[col] = true;
                rec(c, row + 1, used, acc + c.at(row, col), best);
                used[col] = false;
            }
        }
    }
    let c = if c.rows > c.cols { c.transpose() } else { c.clone() };
    let mut best = f64::INFINITY;
    rec(&c, 0, &mut vec![false; c.cols], 0.0, &mut best);
    best
}

fn matrix() -> impl Strategy<Value = CostMatrix> {
    (1usize..=6, 1usize..=6).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f64..10.0, r * c).prop_map(move |d| CostMatrix::new(r, c, d))
    })
}

fn assert_injective(mapping: &[Option<usize>], rows: usize, cols: usize) {
    let mut seen = vec![false; cols];
    for c in mapping.iter().flatten() {
        assert!(!seen[*c]);
        seen[*c] = true;
    }
    assert_eq!(mapping.iter().flatten().count(), rows.min(cols));
}

proptest! {
    #[test]
    fn hungarian_is_optimal(c in matrix()) {
        let h = hungarian(&c);
        assert_injective(&h.mapping, c.rows, c.cols);
        prop_assert!((h.total_cost - brute_force(&c)).abs() < 1e-9);
    }

    #[test]
    fn greedy_never_beats_hungarian(c in matrix()) {
        let g = greedy_match(&c);
        assert_injective(&g.mapping, c.rows, c.cols);
        prop_assert!(hungarian(&c).total_cost <= g.total_cost + 1e-9);
    }

    #[test]
    fn positive_scaling_keeps_the_optimum(c in matrix(), lambda in 0.01f64..100.0) {
        let scaled = CostMatrix::new(c.rows, c.cols, c.data.iter().map(|v| v * lambda).collect());
        let a = hungarian(&scaled);
        let cost_under_original: f64 = a.pairs().map(|(r, col)| c.at(r, col)).sum();
        prop_assert!((cost_under_original - hungarian(&c).total_cost).abs() < 1e-9 * (1.0 + lambda.recip()));
    }
}

#[test]
fn integer_ties_are_deterministic() {
    let c = CostMatrix::new(3, 3, vec![1.0; 9]);
    assert_eq!(hungarian(&c), hungarian(&c));
    assert_eq!(greedy_match(&c).mapping, vec![Some(0), Some(1), Some(2)]);
}

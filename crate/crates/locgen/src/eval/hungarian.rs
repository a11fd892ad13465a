//! Minimum-cost bipartite assignment.
//!
//! The solver is the O(n³) potentials-and-augmenting-paths formulation:
//! rows are inserted one at a time, each insertion growing a shortest
//! augmenting path under reduced costs. Rectangular inputs are handled by
//! transposing so the smaller side is inserted; every element of the
//! smaller side ends up assigned. Ties are broken toward lower column
//! index, so equal-cost inputs resolve deterministically.
//!
//! [`brute_force_min_cost`] enumerates every maximal assignment and exists
//! to cross-check the solver on small instances; its cost is factorial.

use crate::error::{Error, Result};

fn validate(cost: &[f64], rows: usize, cols: usize) -> Result<()> {
    if cost.len() != rows * cols {
        return Err(Error::shape(
            "assignment",
            format!("{rows}x{cols} matrix needs {} entries, got {}", rows * cols, cost.len()),
        ));
    }
    if let Some(bad) = cost.iter().find(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite assignment cost {bad}")));
    }
    Ok(())
}

/// Assigns rows to columns minimizing total cost. Returns, per row, the
/// column it was assigned or `None`; exactly `min(rows, cols)` rows are
/// assigned.
pub fn min_cost_assignment(cost: &[f64], rows: usize, cols: usize) -> Result<Vec<Option<usize>>> {
    validate(cost, rows, cols)?;
    if rows == 0 || cols == 0 {
        return Ok(vec![None; rows]);
    }
    if rows > cols {
        let mut transposed = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                transposed[c * rows + r] = cost[r * cols + c];
            }
        }
        let by_col = solve(&transposed, cols, rows);
        let mut assign = vec![None; rows];
        for (col, row) in by_col.iter().enumerate() {
            if let Some(r) = row {
                assign[*r] = Some(col);
            }
        }
        return Ok(assign);
    }
    Ok(solve(cost, rows, cols))
}

/// Core solver; requires `rows <= cols`, both at least 1.
fn solve(cost: &[f64], rows: usize, cols: usize) -> Vec<Option<usize>> {
    let n = rows;
    let m = cols;
    // 1-indexed potentials; p[j] is the row assigned to column j (0 = free),
    // with p[0] holding the row currently being inserted.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let reduced = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        // Unwind the augmenting path.
        while j0 != 0 {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        }
    }
    let mut assign = vec![None; rows];
    for (j, &row) in p.iter().enumerate().skip(1) {
        if row != 0 {
            assign[row - 1] = Some(j - 1);
        }
    }
    assign
}

/// Total cost of an assignment over the matrix it was computed from.
pub fn assignment_cost(cost: &[f64], cols: usize, assign: &[Option<usize>]) -> f64 {
    assign
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| cost[r * cols + c]))
        .sum()
}

/// Exhaustive minimum over all assignments of cardinality `min(rows, cols)`.
/// Intended for cross-checking on small matrices; do not feed it more than
/// about eight rows or columns.
pub fn brute_force_min_cost(cost: &[f64], rows: usize, cols: usize) -> Result<f64> {
    validate(cost, rows, cols)?;
    if rows == 0 || cols == 0 {
        return Ok(0.0);
    }
    if rows > cols {
        let mut transposed = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                transposed[c * rows + r] = cost[r * cols + c];
            }
        }
        return brute_force_min_cost(&transposed, cols, rows);
    }
    fn descend(cost: &[f64], cols: usize, row: usize, rows: usize, taken: &mut [bool], acc: f64, best: &mut f64) {
        if row == rows {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        for c in 0..cols {
            if taken[c] {
                continue;
            }
            taken[c] = true;
            descend(cost, cols, row + 1, rows, taken, acc + cost[row * cols + c], best);
            taken[c] = false;
        }
    }
    let mut best = f64::INFINITY;
    let mut taken = vec![false; cols];
    descend(cost, cols, 0, rows, &mut taken, 0.0, &mut best);
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn solves_a_hand_checked_square() {
        // Row minima conflict, forcing a non-greedy assignment:
        // optimal is (0→1, 1→0, 2→2) with cost 1 + 2 + 2 = 5.
        let cost = vec![
            4.0, 1.0, 3.0, //
            2.0, 0.0, 5.0, //
            3.0, 2.0, 2.0,
        ];
        let assign = min_cost_assignment(&cost, 3, 3).unwrap();
        assert_eq!(assign, vec![Some(1), Some(0), Some(2)]);
        assert_eq!(assignment_cost(&cost, 3, &assign), 5.0);
    }

    #[test]
    fn handles_both_rectangular_orientations() {
        let wide = vec![
            9.0, 1.0, 9.0, 9.0, //
            9.0, 9.0, 9.0, 2.0,
        ];
        let assign = min_cost_assignment(&wide, 2, 4).unwrap();
        assert_eq!(assign, vec![Some(1), Some(3)]);

        let tall = vec![
            9.0, 9.0, //
            1.0, 9.0, //
            9.0, 9.0, //
            9.0, 2.0,
        ];
        let assign = min_cost_assignment(&tall, 4, 2).unwrap();
        assert_eq!(assign, vec![None, Some(0), None, Some(1)]);
    }

    #[test]
    fn empty_sides_assign_nothing() {
        assert_eq!(min_cost_assignment(&[], 0, 5).unwrap(), Vec::<Option<usize>>::new());
        assert_eq!(min_cost_assignment(&[], 3, 0).unwrap(), vec![None; 3]);
    }

    #[test]
    fn equal_costs_resolve_to_lowest_columns() {
        let cost = vec![1.0; 9];
        let assign = min_cost_assignment(&cost, 3, 3).unwrap();
        assert_eq!(assign, vec![Some(0), Some(1), Some(2)]);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(min_cost_assignment(&[1.0, 2.0], 2, 2).is_err());
        assert!(min_cost_assignment(&[1.0, f64::NAN, 0.0, 1.0], 2, 2).is_err());
    }

    #[test]
    fn matches_exhaustive_search_on_random_matrices() {
        let mut rng = Rng::new(0x68756e67);
        for trial in 0..300 {
            let rows = rng.range_u32(1, 7) as usize;
            let cols = rng.range_u32(1, 7) as usize;
            // Coarse cost grid so ties actually occur.
            let cost: Vec<f64> =
                (0..rows * cols).map(|_| f64::from(rng.range_u32(0, 24)) / 8.0).collect();
            let assign = min_cost_assignment(&cost, rows, cols).unwrap();
            let matched = assign.iter().filter(|a| a.is_some()).count();
            assert_eq!(matched, rows.min(cols), "trial {trial}: partial assignment");
            let mut seen: Vec<usize> = assign.iter().filter_map(|&a| a).collect();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), matched, "trial {trial}: duplicate column");
            let got = assignment_cost(&cost, cols, &assign);
            let want = brute_force_min_cost(&cost, rows, cols).unwrap();
            assert!((got - want).abs() < 1e-9, "trial {trial}: {got} vs {want}");
        }
    }
}

//! Non-dominated filtering of robustness/utility operating points, with
//! sparsity acting as a budget filter.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::types::{Budget, Preference};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub preference: Preference,
    pub sparsity: f64,
    pub j_rob: f64,
    pub j_util: f64,
    pub dominated: bool,
}

/// `a` is at least as good in both objectives and better in one.
pub fn dominates(a: &ParetoPoint, b: &ParetoPoint) -> bool {
    a.j_rob >= b.j_rob && a.j_util >= b.j_util && (a.j_rob > b.j_rob || a.j_util > b.j_util)
}

/// Sets every `dominated` flag. With a budget, points whose sparsity falls
/// outside it are flagged and take no part in dominating others.
pub fn flag_dominance(points: &mut [ParetoPoint], budget: Option<Budget>) {
    let eligible: Vec<bool> = points
        .iter()
        .map(|p| {
            let finite = p.j_rob.is_finite() && p.j_util.is_finite();
            finite && budget.is_none_or(|b| b.contains(p.sparsity))
        })
        .collect();
    let mut order: Vec<usize> = (0..points.len()).filter(|&i| eligible[i]).collect();
    order.sort_by(|&a, &b| points[b].j_rob.total_cmp(&points[a].j_rob));

    for (i, p) in points.iter_mut().enumerate() {
        p.dominated = !eligible[i];
    }
    // Sweep groups of equal robustness from best to worst.
    let mut best_util_above = f64::NEG_INFINITY;
    let mut start = 0;
    while start < order.len() {
        let rob = points[order[start]].j_rob;
        let mut end = start;
        while end < order.len() && points[order[end]].j_rob == rob {
            end += 1;
        }
        let group_max = order[start..end]
            .iter()
            .map(|&i| points[i].j_util)
            .fold(f64::NEG_INFINITY, f64::max);
        for &i in &order[start..end] {
            let u = points[i].j_util;
            points[i].dominated = best_util_above >= u || group_max > u;
        }
        best_util_above = best_util_above.max(group_max);
        start = end;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn pt(r: f64, u: f64) -> ParetoPoint {
        ParetoPoint {
            preference: Preference::uniform(),
            sparsity: 0.3,
            j_rob: r,
            j_util: u,
            dominated: false,
        }
    }

    #[test]
    fn single_point_survives() {
        let mut v = vec![pt(0.0, 0.0)];
        flag_dominance(&mut v, None);
        assert!(!v[0].dominated);
    }

    #[test]
    fn strictly_worse_is_dominated() {
        let mut v = vec![pt(1.0, 1.0), pt(0.5, 0.5), pt(2.0, 0.0)];
        flag_dominance(&mut v, None);
        assert_eq!(v.iter().map(|p| p.dominated).collect::<Vec<_>>(), [false, true, false]);
    }

    #[test]
    fn ties_and_duplicates() {
        let mut v = vec![pt(1.0, 1.0), pt(1.0, 1.0), pt(1.0, 0.5), pt(0.5, 1.0)];
        flag_dominance(&mut v, None);
        assert_eq!(v.iter().map(|p| p.dominated).collect::<Vec<_>>(), [false, false, true, true]);
    }

    #[test]
    fn budget_filters_points() {
        let mut v = vec![pt(1.0, 1.0), pt(0.5, 0.5)];
        v[0].sparsity = 0.9;
        flag_dominance(&mut v, Some(Budget::default()));
        assert!(v[0].dominated);
        assert!(!v[1].dominated);
    }
}

//! Benjamini–Hochberg step-up selection.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FdrError {
    #[error("no p-values supplied")]
    EmptyInput,
    #[error("p-value {p} for {id} outside [0, 1]")]
    InvalidPValue { id: String, p: f64 },
    #[error("q = {0} outside (0, 1)")]
    InvalidQ(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTest {
    pub id: String,
    pub p_value: f64,
    /// 1-based rank in ascending p order.
    pub rank: usize,
    /// rank · q / m
    pub bh_threshold: f64,
    pub interesting: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdrOutcome {
    pub q: f64,
    pub m: usize,
    /// Ascending by p, ties in input order.
    pub sorted: Vec<RankedTest>,
    /// Largest k with p(k) ≤ k·q/m, or 0.
    pub threshold_rank: usize,
    /// Selection flag in input order.
    pub interesting: Vec<bool>,
}

impl FdrOutcome {
    pub fn n_selected(&self) -> usize {
        self.threshold_rank
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("test_id,p_value,rank,bh_threshold,interesting\n");
        for t in &self.sorted {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                t.id, t.p_value, t.rank, t.bh_threshold, t.interesting
            ));
        }
        out
    }
}

pub fn bh_select<S: AsRef<str>>(tests: &[(S, f64)], q: f64) -> Result<FdrOutcome, FdrError> {
    if tests.is_empty() {
        return Err(FdrError::EmptyInput);
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(FdrError::InvalidQ(q));
    }
    if let Some((id, p)) = tests.iter().find(|(_, p)| !(0.0..=1.0).contains(p)) {
        return Err(FdrError::InvalidPValue {
            id: id.as_ref().to_string(),
            p: *p,
        });
    }
    let m = tests.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| tests[a].1.total_cmp(&tests[b].1));
    let threshold_rank = order
        .iter()
        .enumerate()
        .rev()
        .find(|&(k, &i)| tests[i].1 <= (k + 1) as f64 * q / m as f64)
        .map_or(0, |(k, _)| k + 1);
    let mut interesting = vec![false; m];
    let sorted = order
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let selected = k < threshold_rank;
            interesting[i] = selected;
            RankedTest {
                id: tests[i].0.as_ref().to_string(),
                p_value: tests[i].1,
                rank: k + 1,
                bh_threshold: (k + 1) as f64 * q / m as f64,
                interesting: selected,
            }
        })
        .collect();
    Ok(FdrOutcome {
        q,
        m,
        sorted,
        threshold_rank,
        interesting,
    })
}

/// Reference selection by testing every k directly.
pub fn brute_force_select(p: &[f64], q: f64) -> Vec<bool> {
    let m = p.len();
    let best_k = (1..=m)
        .filter(|&k| {
            let at_or_below = p.iter().filter(|&&x| x <= k as f64 * q / m as f64).count();
            at_or_below >= k
        })
        .max()
        .unwrap_or(0);
    if best_k == 0 {
        return vec![false; m];
    }
    let mut sorted = p.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cutoff = sorted[best_k - 1];
    p.iter().map(|&x| x <= cutoff).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(p: &[f64]) -> Vec<(String, f64)> {
        p.iter().enumerate().map(|(i, &x)| (format!("t{i}"), x)).collect()
    }

    #[test]
    fn worked_example() {
        let out = bh_select(&ids(&[0.01, 0.02, 0.03, 0.5, 0.9]), 0.1).unwrap();
        assert_eq!(out.threshold_rank, 3);
        assert_eq!(out.interesting, vec![true, true, true, false, false]);
        let thresholds: Vec<f64> = out.sorted.iter().map(|t| t.bh_threshold).collect();
        for (a, b) in thresholds.iter().zip([0.02, 0.04, 0.06, 0.08, 0.1]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn trivial_cases() {
        let none = bh_select(&ids(&[1.0; 4]), 0.01).unwrap();
        assert_eq!(none.threshold_rank, 0);
        assert!(none.interesting.iter().all(|x| !x));
        let one = bh_select(&ids(&[0.005]), 0.01).unwrap();
        assert_eq!(one.interesting, vec![true]);
    }

    #[test]
    fn rejects_bad_input() {
        let empty: Vec<(String, f64)> = vec![];
        assert_eq!(bh_select(&empty, 0.1), Err(FdrError::EmptyInput));
        assert!(matches!(bh_select(&ids(&[0.1]), 0.0), Err(FdrError::InvalidQ(_))));
        assert!(matches!(
            bh_select(&ids(&[0.1, 1.5]), 0.1),
            Err(FdrError::InvalidPValue { .. })
        ));
    }

    #[test]
    fn step_up_passes_over_failing_middle_ranks() {
        // p(1) fails its own threshold but p(2) passes, so both are selected.
        let out = bh_select(&ids(&[0.04, 0.045, 0.9]), 0.1).unwrap();
        assert_eq!(out.threshold_rank, 2);
    }

    #[test]
    fn ties_keep_input_order() {
        let out = bh_select(&ids(&[0.3, 0.001, 0.3, 0.001]), 0.05).unwrap();
        let order: Vec<&str> = out.sorted.iter().map(|t| t.id.as_str()).collect();
        assert_eq!(order, ["t1", "t3", "t0", "t2"]);
    }

    #[test]
    fn csv_layout() {
        let out = bh_select(&ids(&[0.2, 0.01]), 0.05).unwrap();
        assert_eq!(
            out.to_csv(),
            "test_id,p_value,rank,bh_threshold,interesting\nt1,0.01,1,0.025,true\nt0,0.2,2,0.05,false\n"
        );
    }

    fn p_vec() -> impl Strategy<Value = Vec<f64>> {
        // Coarse grid so ties are common.
        prop::collection::vec((0u32..=200).prop_map(|k| k as f64 / 200.0), 1..=12)
    }

    proptest! {
        #[test]
        fn matches_brute_force(p in p_vec(), q in 0.01f64..0.5) {
            let out = bh_select(&ids(&p), q).unwrap();
            prop_assert_eq!(out.interesting, brute_force_select(&p, q));
        }

        #[test]
        fn selection_has_no_gaps(p in p_vec(), q in 0.01f64..0.5) {
            let out = bh_select(&ids(&p), q).unwrap();
            prop_assert!(out.threshold_rank <= out.m);
            if out.threshold_rank > 0 {
                let cutoff = out.sorted[out.threshold_rank - 1].p_value;
                for (i, &x) in p.iter().enumerate() {
                    prop_assert_eq!(out.interesting[i], x <= cutoff);
                }
            }
        }

        #[test]
        fn monotone_in_p_and_q(p in p_vec(), q in 0.01f64..0.4, idx in any::<prop::sample::Index>(), factor in 0.0f64..1.0) {
            let base = bh_select(&ids(&p), q).unwrap();
            let mut lowered = p.clone();
            let i = idx.index(p.len());
            lowered[i] *= factor;
            let after = bh_select(&ids(&lowered), q).unwrap();
            for (b, a) in base.interesting.iter().zip(&after.interesting) {
                prop_assert!(!b || *a);
            }
            let wider = bh_select(&ids(&p), q * 1.5).unwrap();
            for (b, a) in base.interesting.iter().zip(&wider.interesting) {
                prop_assert!(!b || *a);
            }
        }
    }
}

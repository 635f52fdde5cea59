use ensemble_uq::selection::{
    load_candidates, pearson, rank, ranking_table, select, spearman, Budget, CandidateScan,
    SelectionMode, SelectionPolicy,
};
use proptest::prelude::*;

fn candidates() -> impl Strategy<Value = Vec<CandidateScan>> {
    prop::collection::vec((0u8..6, 0.0f64..0.25), 1..20).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (bucket, uc))| CandidateScan {
                scan_id: format!("s{:02}", (i * 7) % 20),
                // coarse buckets force ties
                mean_uncertainty: if bucket < 3 { bucket as f64 * 0.01 } else { uc },
                correction_percentage: None,
                cost: None,
            })
            .collect()
    })
}

fn pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..30).prop_flat_map(|n| {
        (
            prop::collection::vec(-10.0f64..10.0, n),
            prop::collection::vec(-10.0f64..10.0, n),
        )
    })
}

proptest! {
    #[test]
    fn rank_is_a_stable_permutation(c in candidates(), highest in any::<bool>(), rot in 0usize..20) {
        let mode = if highest { SelectionMode::Highest } else { SelectionMode::Lowest };
        let ranked = rank(&c, mode);
        let mut a: Vec<_> = ranked.iter().map(|x| (x.scan_id.clone(), x.mean_uncertainty.to_bits())).collect();
        let mut b: Vec<_> = c.iter().map(|x| (x.scan_id.clone(), x.mean_uncertainty.to_bits())).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
        prop_assert_eq!(&rank(&ranked, mode), &ranked);
        let mut rotated = c.clone();
        rotated.rotate_left(rot % c.len());
        prop_assert_eq!(&rank(&rotated, mode), &ranked);
        for w in ranked.windows(2) {
            let ordered = match mode {
                SelectionMode::Lowest => w[0].mean_uncertainty <= w[1].mean_uncertainty,
                SelectionMode::Highest => w[0].mean_uncertainty >= w[1].mean_uncertainty,
            };
            prop_assert!(ordered);
        }
    }

    #[test]
    fn highest_reverses_lowest_on_distinct_values(n in 1usize..15) {
        let c: Vec<_> = (0..n)
            .map(|i| CandidateScan {
                scan_id: format!("{i}"),
                mean_uncertainty: ((i * 37) % 101) as f64 / 1000.0,
                correction_percentage: None,
                cost: None,
            })
            .collect();
        let mut low = rank(&c, SelectionMode::Lowest);
        low.reverse();
        prop_assert_eq!(low, rank(&c, SelectionMode::Highest));
    }

    #[test]
    fn budget_of_everything_selects_everything(c in candidates()) {
        let policy = SelectionPolicy { mode: SelectionMode::Lowest, budget: Budget::Count(c.len()) };
        prop_assert_eq!(select(&c, &policy).unwrap(), rank(&c, SelectionMode::Lowest));
    }

    #[test]
    fn correlations_are_symmetric_and_invariant((xs, ys) in pairs(), a in 0.1f64..5.0, b in -5.0f64..5.0) {
        if let Ok(r) = pearson(&xs, &ys) {
            prop_assert!((-1.0..=1.0).contains(&r));
            prop_assert!((r - pearson(&ys, &xs).unwrap()).abs() < 1e-12);
            let scaled: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            prop_assert!((r - pearson(&scaled, &ys).unwrap()).abs() < 1e-9);
        }
        if let Ok(rho) = spearman(&xs, &ys) {
            prop_assert!((rho - spearman(&ys, &xs).unwrap()).abs() < 1e-12);
            let cubed: Vec<f64> = xs.iter().map(|x| x.powi(3) + 1.0).collect();
            prop_assert!((rho - spearman(&cubed, &ys).unwrap()).abs() < 1e-12);
        }
    }
}

#[test]
fn ranking_json_shape() {
    let c = vec![
        CandidateScan {
            scan_id: "a".into(),
            mean_uncertainty: 0.02,
            correction_percentage: None,
            cost: None,
        },
        CandidateScan {
            scan_id: "b".into(),
            mean_uncertainty: 0.01,
            correction_percentage: None,
            cost: None,
        },
    ];
    let table = ranking_table(
        &c,
        &SelectionPolicy {
            mode: SelectionMode::Lowest,
            budget: Budget::Count(1),
        },
    )
    .unwrap();
    let json = serde_json::to_value(&table).unwrap();
    assert_eq!(
        json,
        serde_json::json!([
            {"scan_id": "b", "mean_uncertainty": 0.01, "rank": 1, "selected": true},
            {"scan_id": "a", "mean_uncertainty": 0.02, "rank": 2, "selected": false}
        ])
    );
}

#[test]
fn candidates_from_report_directory() {
    let dir = tempfile::tempdir().unwrap();
    for (id, uc) in [("x", 0.03), ("y", 0.01)] {
        std::fs::write(
            dir.path().join(format!("{id}.json")),
            format!(r#"{{"scan_id": "{id}", "ensemble_size": 6, "mean_uncertainty": {uc}, "num_voxels": 10, "num_classes": 3}}"#),
        )
        .unwrap();
    }
    std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    let c = load_candidates(dir.path()).unwrap();
    assert_eq!(c.len(), 2);
    assert_eq!(rank(&c, SelectionMode::Lowest)[0].scan_id, "y");

    let list = dir.path().join("all.json");
    std::fs::write(&list, r#"[{"scan_id": "z", "mean_uncertainty": 0.2}]"#).unwrap();
    assert_eq!(load_candidates(&list).unwrap()[0].scan_id, "z");
}

use opsd_core::lawfit::{
    append_law_csv, average_ranks, correlation_t_p, fit_law, law_csv_hashes, law_from_constants, loocv, ols_fit,
    pearson, predict, read_fit_report, read_law_csv, spearman, write_fit_report, write_plot_data, FitReport, LabelBy,
    LawRow, PointSet, P_FLOOR,
};
use opsd_core::Error;
use proptest::prelude::*;

fn on_line(slope: f64, intercept: f64) -> PointSet {
    let xs = [0.0, 0.02, 0.05, 0.07, 0.11, 0.16];
    let ys: Vec<f64> = xs.iter().map(|x| slope * x + intercept).collect();
    PointSet::from_xy(&xs, &ys).unwrap()
}

#[test]
fn reported_line_constants_are_recovered() {
    for (slope, intercept) in [(1.492, -0.003), (0.663, 0.004)] {
        let fit = ols_fit(&on_line(slope, intercept)).unwrap();
        assert!((fit.slope - slope).abs() < 1e-9);
        assert!((fit.intercept - intercept).abs() < 1e-9);
        assert!((fit.r_squared - 1.0).abs() < 1e-9);
    }
}

#[test]
fn predictions_from_reported_constants() {
    assert!((predict(&law_from_constants(1.492, -0.003), 0.10) - 0.1462).abs() < 1e-12);
    assert!((predict(&law_from_constants(0.663, 0.004), 0.10) - 0.0703).abs() < 1e-12);
    assert_eq!(predict(&law_from_constants(0.663, 0.004), 0.0), 0.004);
}

#[test]
fn flat_and_degenerate_inputs() {
    let flat = PointSet::from_xy(&[0.0, 1.0, 2.0], &[0.5, 0.5, 0.5]).unwrap();
    let fit = ols_fit(&flat).unwrap();
    assert_eq!((fit.slope, fit.intercept, fit.r_squared), (0.0, 0.5, 1.0));
    assert!(matches!(pearson(&flat), Err(Error::Degenerate(_))));
    let same_x = PointSet::from_xy(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]).unwrap();
    assert!(matches!(ols_fit(&same_x), Err(Error::Degenerate(_))));
    let two = PointSet::from_xy(&[0.0, 1.0], &[0.0, 1.0]).unwrap();
    assert!(ols_fit(&two).is_err());
    assert!(loocv(&on_line(1.0, 0.0).points[..3].to_vec().into_set()).is_err());
}

trait IntoSet {
    fn into_set(self) -> PointSet;
}

impl IntoSet for Vec<opsd_core::lawfit::Point> {
    fn into_set(self) -> PointSet {
        PointSet { points: self }
    }
}

#[test]
fn pearson_small_fixture() {
    // scipy.stats.pearsonr([1, 2, 3], [2, 1, 4])
    let c = pearson(&PointSet::from_xy(&[1.0, 2.0, 3.0], &[2.0, 1.0, 4.0]).unwrap()).unwrap();
    assert!((c.r - 0.654653670707977).abs() < 1e-9);
    assert!((c.p - 0.5456289483429901).abs() < 1e-9);
}

#[test]
fn perfect_correlation_hits_the_floor() {
    let c = pearson(&on_line(2.0, 1.0)).unwrap();
    assert!((c.r - 1.0).abs() < 1e-12);
    assert_eq!(c.p, P_FLOOR);
}

#[test]
fn t_test_p_values() {
    // two-sided Student-t tail, from scipy.stats.t.sf
    for (n, r, want) in [(6, 0.974, 0.001005212000000001), (3, 0.998, 0.040270083266754984), (4, 0.988, 0.012)] {
        let p = correlation_t_p(r, n);
        assert!((p - want).abs() < 1e-9, "n={n} r={r}: {p}");
    }
}

#[test]
fn t_test_p_values_agree_with_reported_ones() {
    for (n, r, reported) in [(6, 0.974, 0.001), (3, 0.998, 0.043), (4, 0.988, 0.012)] {
        let p = correlation_t_p(r, n);
        assert!(p / reported < 2.0 && reported / p < 2.0, "n={n}: {p} vs {reported}");
    }
}

#[test]
fn exact_spearman_p_values() {
    let three = spearman(&PointSet::from_xy(&[1.0, 2.0, 3.0], &[1.0, 5.0, 9.0]).unwrap()).unwrap();
    assert!((three.r - 1.0).abs() < 1e-12);
    assert!((three.p - 2.0 / 6.0).abs() < 1e-12);
    let six = spearman(&on_line(0.663, 0.004)).unwrap();
    assert!((six.r - 1.0).abs() < 1e-12);
    assert!((six.p - 2.0 / 720.0).abs() < 1e-12);
    let down = spearman(&on_line(-1.0, 0.0)).unwrap();
    assert!((down.r + 1.0).abs() < 1e-12);
    assert!((down.p - 2.0 / 720.0).abs() < 1e-12);
}

#[test]
fn average_ranks_share_ties() {
    assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
}

#[test]
fn loocv_three_collinear_plus_offset() {
    // (3, 3 + d) with d = 0.3: folds give residuals 2d/3, -d/7, -4d/7, d
    let set = PointSet::from_xy(&[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 2.0, 3.3]).unwrap();
    let cv = loocv(&set).unwrap();
    let d: f64 = 0.3;
    let hand = ((2.0 * d / 3.0).powi(2) + (d / 7.0).powi(2) + (4.0 * d / 7.0).powi(2) + d * d) / 4.0;
    assert!((cv.rmse - hand.sqrt()).abs() < 1e-12);
    assert!((cv.rmse - 0.20076384746507342).abs() < 1e-9);
    assert!((cv.r_squared - 0.9729829091251081).abs() < 1e-9);
}

#[test]
fn fit_law_bundles_every_statistic() {
    let fit = fit_law(&on_line(1.492, -0.003)).unwrap();
    assert_eq!(fit.n_points, 6);
    assert!(fit.loocv_rmse.unwrap() < 1e-12);
    let three = fit_law(&PointSet::from_xy(&[1.0, 2.0, 3.0], &[2.0, 1.0, 4.0]).unwrap()).unwrap();
    assert_eq!(three.loocv_rmse, None);
}

fn row(context: &str, model: &str, seed: u64, gap: f64, imp: f64) -> LawRow {
    LawRow {
        context: context.into(),
        model: model.into(),
        seed,
        initial_gap: gap,
        improvement: imp,
    }
}

#[test]
fn rows_group_into_mean_points() {
    let rows = vec![
        row("feedback", "S", 1, 0.1, 0.05),
        row("feedback", "S", 2, 0.3, 0.15),
        row("none", "S", 1, 0.0, 0.01),
    ];
    let set = PointSet::from_rows(&rows, LabelBy::Context);
    assert_eq!(set.len(), 2);
    let fb = set.points.iter().find(|p| p.label == "feedback").unwrap();
    assert!((fb.x - 0.2).abs() < 1e-15 && (fb.y - 0.1).abs() < 1e-15);
    assert!((fb.y_std.unwrap() - 0.05f64.hypot(0.05)).abs() < 1e-12);
}

#[test]
fn csv_report_and_plot_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("law.csv");
    append_law_csv(&csv, &[row("none", "S", 1, 0.0, 0.01)], "aaa").unwrap();
    append_law_csv(&csv, &[row("feedback", "S", 1, 0.2, 0.1), row("psf", "S", 2, 0.4, 0.3)], "bbb").unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("context,model,seed,initial_gap,improvement\n"));
    assert_eq!(text.matches("context,").count(), 1);
    let rows = read_law_csv(&csv).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2], row("psf", "S", 2, 0.4, 0.3));
    assert_eq!(law_csv_hashes(&csv).unwrap(), vec!["aaa", "bbb"]);

    let set = PointSet::from_rows(&rows, LabelBy::Context);
    let report = FitReport {
        config_hash: "bbb".into(),
        fit: fit_law(&set).unwrap(),
        points: set.clone(),
    };
    let path = dir.path().join("fit_report.json");
    write_fit_report(&path, &report).unwrap();
    assert_eq!(read_fit_report(&path).unwrap(), report);
    let plot = dir.path().join("plot.csv");
    write_plot_data(&plot, &report.fit, &set).unwrap();
    let lines: Vec<String> = std::fs::read_to_string(&plot).unwrap().lines().map(String::from).collect();
    assert_eq!(lines[0], "x,y,y_err,label,fitted_y");
    assert_eq!(lines.len(), 4);
}

fn cloud() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (4usize..12).prop_flat_map(|n| {
        (
            prop::collection::vec(-1.0f64..1.0, n),
            prop::collection::vec(-1.0f64..1.0, n),
        )
    })
}

proptest! {
    #[test]
    fn residuals_are_orthogonal((xs, ys) in cloud()) {
        let set = PointSet::from_xy(&xs, &ys).unwrap();
        if let Ok(fit) = ols_fit(&set) {
            let resid: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| y - (fit.slope * x + fit.intercept)).collect();
            prop_assert!(resid.iter().sum::<f64>().abs() < 1e-9);
            prop_assert!(resid.iter().zip(&xs).map(|(r, x)| r * x).sum::<f64>().abs() < 1e-9);
            prop_assert!(fit.r_squared <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn pearson_affine_invariance((xs, ys) in cloud(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let base = pearson(&PointSet::from_xy(&xs, &ys).unwrap());
        let moved: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
        if let Ok(base) = base {
            let other = pearson(&PointSet::from_xy(&moved, &ys).unwrap()).unwrap();
            prop_assert!((base.r - other.r).abs() < 1e-12);
            prop_assert!(base.r.abs() <= 1.0);
        }
    }

    #[test]
    fn spearman_monotone_invariance((xs, ys) in cloud()) {
        let base = spearman(&PointSet::from_xy(&xs, &ys).unwrap());
        let warped: Vec<f64> = xs.iter().map(|x| (3.0 * x).exp() + x.powi(3)).collect();
        if let Ok(base) = base {
            let other = spearman(&PointSet::from_xy(&warped, &ys).unwrap()).unwrap();
            prop_assert_eq!(base.r, other.r);
            prop_assert_eq!(base.p, other.p);
        }
    }

    #[test]
    fn loocv_is_zero_exactly_on_lines((xs, ys) in cloud(), slope in -2.0f64..2.0) {
        let line: Vec<f64> = xs.iter().map(|x| slope * x + 0.25).collect();
        if let Ok(cv) = loocv(&PointSet::from_xy(&xs, &line).unwrap()) {
            prop_assert!(cv.rmse < 1e-9);
        }
        if let Ok(cv) = loocv(&PointSet::from_xy(&xs, &ys).unwrap()) {
            prop_assert!(cv.rmse >= 0.0);
        }
    }

    #[test]
    fn fitted_predictions_have_zero_mean_residual((xs, ys) in cloud()) {
        if let Ok(fit) = fit_law(&PointSet::from_xy(&xs, &ys).unwrap()) {
            let mean: f64 = xs.iter().zip(&ys).map(|(x, y)| y - predict(&fit, *x)).sum::<f64>() / xs.len() as f64;
            prop_assert!(mean.abs() < 1e-12);
        }
    }
}

//! The predictive law: improvement as a linear function of the initial
//! teacher-student gap, with correlation tests and leave-one-out
//! validation.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::{Error, Result};

/// Smallest p-value ever reported.
pub const P_FLOOR: f64 = 1e-12;

pub const LAW_CSV_HEADER: [&str; 5] = ["context", "model", "seed", "initial_gap", "improvement"];

/// One row of the law CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LawRow {
    pub context: String,
    pub model: String,
    pub seed: u64,
    pub initial_gap: f64,
    pub improvement: f64,
}

/// Appends rows under a `# config_hash=...` provenance line, writing the
/// header first when the file is new or empty.
pub fn append_law_csv(path: &Path, rows: &[LawRow], config_hash: &str) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    if fresh {
        writeln!(out, "{}", LAW_CSV_HEADER.join(",")).map_err(io)?;
    }
    writeln!(out, "# config_hash={config_hash}").map_err(io)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(io)
}

pub fn read_law_csv(path: &Path) -> Result<Vec<LawRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let header = r.headers().map_err(|e| Error::Format(e.to_string()))?;
    if header.iter().ne(LAW_CSV_HEADER) {
        return Err(Error::Format(format!("{}: unexpected header {header:?}", path.display())));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Provenance hashes recorded in a law CSV, in file order.
pub fn law_csv_hashes(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.strip_prefix("# config_hash="))
        .map(str::to_string)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub label: String,
    pub y_std: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    pub points: Vec<Point>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelBy {
    Context,
    Model,
}

impl PointSet {
    pub fn from_xy(xs: &[f64], ys: &[f64]) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::Shape(format!("{} x values for {} y values", xs.len(), ys.len())));
        }
        Ok(PointSet {
            points: xs
                .iter()
                .zip(ys)
                .enumerate()
                .map(|(i, (&x, &y))| Point {
                    x,
                    y,
                    label: i.to_string(),
                    y_std: None,
                })
                .collect(),
        })
    }

    /// One point per label: mean gap, mean improvement and the sample
    /// standard deviation of improvement across seeds.
    pub fn from_rows(rows: &[LawRow], by: LabelBy) -> Self {
        let mut groups: BTreeMap<&str, Vec<&LawRow>> = BTreeMap::new();
        for r in rows {
            let key = match by {
                LabelBy::Context => r.context.as_str(),
                LabelBy::Model => r.model.as_str(),
            };
            groups.entry(key).or_default().push(r);
        }
        let points = groups
            .into_iter()
            .map(|(label, rs)| {
                let n = rs.len() as f64;
                let x = rs.iter().map(|r| r.initial_gap).sum::<f64>() / n;
                let y = rs.iter().map(|r| r.improvement).sum::<f64>() / n;
                let y_std = (rs.len() > 1).then(|| {
                    (rs.iter().map(|r| (r.improvement - y).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                });
                Point {
                    x,
                    y,
                    label: label.to_string(),
                    y_std,
                }
            })
            .collect();
        PointSet { points }
    }

    /// Labels by model when every row shares one context, else by context.
    pub fn from_rows_auto(rows: &[LawRow]) -> Self {
        let single_context = rows.windows(2).all(|w| w[0].context == w[1].context);
        let by = if single_context && rows.len() > 1 { LabelBy::Model } else { LabelBy::Context };
        Self::from_rows(rows, by)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn xs(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.x).collect()
    }

    pub fn ys(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.y).collect()
    }

    fn check(&self, min: usize) -> Result<()> {
        if self.len() < min {
            return Err(Error::Degenerate(format!("{} points; need at least {min}", self.len())));
        }
        if self.points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::NumericDomain("non-finite point".into()));
        }
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn centered_sums(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let (mx, my) = (mean(xs), mean(ys));
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    (sxx, syy, sxy)
}

fn ols_raw(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    let (sxx, _, sxy) = centered_sums(xs, ys);
    if sxx == 0.0 {
        return Err(Error::Degenerate("all x values are equal".into()));
    }
    let slope = sxy / sxx;
    Ok((slope, mean(ys) - slope * mean(xs)))
}

/// `1 - ss_res / ss_tot`, with flat `y` giving 1 only for a perfect fit.
fn r_squared(ss_res: f64, ss_tot: f64) -> Result<f64> {
    if ss_tot == 0.0 {
        if ss_res == 0.0 {
            Ok(1.0)
        } else {
            Err(Error::Degenerate("constant y with non-zero residuals".into()))
        }
    } else {
        Ok(1.0 - ss_res / ss_tot)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn ols_fit(points: &PointSet) -> Result<OlsFit> {
    points.check(3)?;
    let (xs, ys) = (points.xs(), points.ys());
    let (slope, intercept) = ols_raw(&xs, &ys)?;
    let my = mean(&ys);
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        ss_res += (y - (slope * x + intercept)).powi(2);
        ss_tot += (y - my).powi(2);
    }
    Ok(OlsFit {
        slope,
        intercept,
        r_squared: r_squared(ss_res, ss_tot)?,
    })
}

fn correlation(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let (sxx, syy, sxy) = centered_sums(xs, ys);
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Two-sided p-value of the t-test for a correlation of `r` over `n` points.
pub fn correlation_t_p(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    let one_minus = 1.0 - r * r;
    if one_minus <= 0.0 {
        return P_FLOOR;
    }
    let t2 = r * r * df / one_minus;
    beta_reg(df / 2.0, 0.5, df / (df + t2)).max(P_FLOOR)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p: f64,
}

pub fn pearson(points: &PointSet) -> Result<Correlation> {
    points.check(3)?;
    let r = correlation(&points.xs(), &points.ys())?;
    Ok(Correlation {
        r,
        p: correlation_t_p(r, points.len()),
    })
}

/// Ranks from 1, ties sharing their mean rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Largest n for which the Spearman p-value is exact.
pub const EXACT_SPEARMAN_MAX_N: usize = 8;

fn permutation_p(rx: &[f64], ry: &[f64], observed: f64) -> Result<f64> {
    let mut perm = ry.to_vec();
    let n = perm.len();
    let mut c = vec![0usize; n];
    let target = observed.abs() - 1e-12;
    let mut hits = 0u64;
    let mut total = 0u64;
    let mut visit = |p: &[f64]| -> Result<()> {
        total += 1;
        if correlation(rx, p)?.abs() >= target {
            hits += 1;
        }
        Ok(())
    };
    // Heap's algorithm
    visit(&perm)?;
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            visit(&perm)?;
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok((hits as f64 / total as f64).max(P_FLOOR))
}

pub fn spearman(points: &PointSet) -> Result<Correlation> {
    points.check(3)?;
    let rx = average_ranks(&points.xs());
    let ry = average_ranks(&points.ys());
    let rho = correlation(&rx, &ry)?;
    let p = if points.len() <= EXACT_SPEARMAN_MAX_N {
        permutation_p(&rx, &ry, rho)?
    } else {
        correlation_t_p(rho, points.len())
    };
    Ok(Correlation { r: rho, p })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Loocv {
    pub rmse: f64,
    pub r_squared: f64,
}

pub fn loocv(points: &PointSet) -> Result<Loocv> {
    points.check(4)?;
    let (xs, ys) = (points.xs(), points.ys());
    let n = xs.len();
    let mut ss_res = 0.0;
    for i in 0..n {
        let fx: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| xs[j]).collect();
        let fy: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| ys[j]).collect();
        let (slope, intercept) = ols_raw(&fx, &fy)?;
        ss_res += (ys[i] - (slope * xs[i] + intercept)).powi(2);
    }
    let my = mean(&ys);
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    Ok(Loocv {
        rmse: (ss_res / n as f64).sqrt(),
        r_squared: r_squared(ss_res, ss_tot)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LawFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub pearson_r: f64,
    pub pearson_p: f64,
    pub spearman_rho: f64,
    pub spearman_p: f64,
    /// Absent below four points.
    pub loocv_rmse: Option<f64>,
    pub loocv_r_squared: Option<f64>,
    pub n_points: usize,
}

pub fn fit_law(points: &PointSet) -> Result<LawFit> {
    let ols = ols_fit(points)?;
    let pr = pearson(points)?;
    let sr = spearman(points)?;
    let cv = if points.len() >= 4 { Some(loocv(points)?) } else { None };
    Ok(LawFit {
        slope: ols.slope,
        intercept: ols.intercept,
        r_squared: ols.r_squared,
        pearson_r: pr.r,
        pearson_p: pr.p,
        spearman_rho: sr.r,
        spearman_p: sr.p,
        loocv_rmse: cv.map(|c| c.rmse),
        loocv_r_squared: cv.map(|c| c.r_squared),
        n_points: points.len(),
    })
}

/// A law given only by its constants, e.g. a published fit.
pub fn law_from_constants(slope: f64, intercept: f64) -> LawFit {
    LawFit {
        slope,
        intercept,
        r_squared: f64::NAN,
        pearson_r: f64::NAN,
        pearson_p: f64::NAN,
        spearman_rho: f64::NAN,
        spearman_p: f64::NAN,
        loocv_rmse: None,
        loocv_r_squared: None,
        n_points: 0,
    }
}

pub fn predict(fit: &LawFit, gap: f64) -> f64 {
    fit.slope * gap + fit.intercept
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub config_hash: String,
    pub fit: LawFit,
    pub points: PointSet,
}

pub fn write_fit_report(path: &Path, report: &FitReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_fit_report(path: &Path) -> Result<FitReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct PlotRow<'a> {
    x: f64,
    y: f64,
    y_err: Option<f64>,
    label: &'a str,
    fitted_y: f64,
}

/// `x,y,y_err,label,fitted_y` rows, one per point.
pub fn write_plot_data(path: &Path, fit: &LawFit, points: &PointSet) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for p in &points.points {
        w.serialize(PlotRow {
            x: p.x,
            y: p.y,
            y_err: p.y_std,
            label: &p.label,
            fitted_y: predict(fit, p.x),
        })
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

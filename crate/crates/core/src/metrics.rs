//! Point and interval scores for bivariate predictions.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::BivariateObservations;

/// Root mean squared difference of two equal-length series.
pub fn rmse(truth: &[f64], pred: &[f64]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::Argument("RMSPE of an empty sample".into()));
    }
    if truth.len() != pred.len() {
        return Err(Error::Argument(format!(
            "{} truths but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let ss: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p) * (t - p)).sum();
    Ok((ss / truth.len() as f64).sqrt())
}

/// Per-variable RMSPE. Sites are matched by position.
pub fn rmspe(truth: &BivariateObservations, pred: &BivariateObservations) -> Result<[f64; 2]> {
    Ok([rmse(&truth.z1, &pred.z1)?, rmse(&truth.z2, &pred.z2)?])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub picp: f64,
    pub mpiw: f64,
}

/// Fraction of truths inside the closed `[lo, hi]` and the mean width.
pub fn coverage(truth: &[f64], lo: &[f64], hi: &[f64]) -> Result<Coverage> {
    if truth.is_empty() {
        return Err(Error::Argument("coverage of an empty sample".into()));
    }
    if lo.len() != truth.len() || hi.len() != truth.len() {
        return Err(Error::Argument(format!(
            "{} truths, {} lower and {} upper bounds",
            truth.len(),
            lo.len(),
            hi.len()
        )));
    }
    let mut inside = 0usize;
    let mut width = 0.0;
    for (i, ((&z, &l), &h)) in truth.iter().zip(lo).zip(hi).enumerate() {
        if l > h || l.is_nan() || h.is_nan() {
            return Err(Error::Argument(format!("bounds cross at row {i}: [{l}, {h}]")));
        }
        if l <= z && z <= h {
            inside += 1;
        }
        width += h - l;
    }
    let n = truth.len() as f64;
    Ok(Coverage {
        picp: inside as f64 / n,
        mpiw: width / n,
    })
}

/// PICP and MPIW for both variables; `lo[u]`, `hi[u]` bound variable `u`.
pub fn picp_mpiw(truth: &BivariateObservations, lo: [&[f64]; 2], hi: [&[f64]; 2]) -> Result<[Coverage; 2]> {
    Ok([coverage(&truth.z1, lo[0], hi[0])?, coverage(&truth.z2, lo[1], hi[1])?])
}

/// Scores of one method on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub rmspe: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub picp: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpiw: Option<[f64; 2]>,
    pub n_test: usize,
    /// Seconds per phase, keyed by phase name.
    #[serde(default)]
    pub wall_times: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn point(method: &str, truth: &BivariateObservations, pred: &BivariateObservations) -> Result<Self> {
        Ok(EvalReport {
            method: method.to_string(),
            rmspe: rmspe(truth, pred)?,
            picp: None,
            mpiw: None,
            n_test: truth.len(),
            wall_times: BTreeMap::new(),
        })
    }

    pub fn with_intervals(mut self, truth: &BivariateObservations, lo: [&[f64]; 2], hi: [&[f64]; 2]) -> Result<Self> {
        let c = picp_mpiw(truth, lo, hi)?;
        self.picp = Some([c[0].picp, c[1].picp]);
        self.mpiw = Some([c[0].mpiw, c[1].mpiw]);
        Ok(self)
    }

    pub fn check(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Argument(format!("{}: {what} out of range", self.method)));
        if self.rmspe.iter().any(|r| !(*r >= 0.0)) {
            return bad("rmspe");
        }
        if self.picp.is_some_and(|p| p.iter().any(|v| !(0.0..=1.0).contains(v))) {
            return bad("picp");
        }
        if self.mpiw.is_some_and(|m| m.iter().any(|v| !(*v >= 0.0))) {
            return bad("mpiw");
        }
        Ok(())
    }
}

fn opt(v: Option<[f64; 2]>, u: usize) -> String {
    v.map(|a| format!("{}", a[u])).unwrap_or_default()
}

/// One CSV row per report. Wall times are left out so the file is
/// reproducible; write them with [`write_timings`].
pub fn write_reports_csv<W: Write>(reports: &[EvalReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["method", "n_test", "rmspe1", "rmspe2", "picp1", "picp2", "mpiw1", "mpiw2"])?;
    for r in reports {
        w.write_record([
            r.method.clone(),
            r.n_test.to_string(),
            format!("{}", r.rmspe[0]),
            format!("{}", r.rmspe[1]),
            opt(r.picp, 0),
            opt(r.picp, 1),
            opt(r.mpiw, 0),
            opt(r.mpiw, 1),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_reports_file(reports: &[EvalReport], path: &Path) -> Result<()> {
    write_reports_csv(reports, std::fs::File::create(path)?)
}

/// `method,phase,seconds` rows.
pub fn write_timings<W: Write>(reports: &[EvalReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["method", "phase", "seconds"])?;
    for r in reports {
        for (phase, s) in &r.wall_times {
            w.write_record([r.method.as_str(), phase, &format!("{s}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Fixed-width table for terminals.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut out = format!(
        "{:<24} {:>6} {:>10} {:>10} {:>7} {:>7} {:>10} {:>10}\n",
        "method", "n", "rmspe1", "rmspe2", "picp1", "picp2", "mpiw1", "mpiw2"
    );
    let cell = |v: Option<[f64; 2]>, u: usize, prec: usize, w: usize| match v {
        Some(a) => format!("{:>w$.prec$}", a[u]),
        None => format!("{:>w$}", "-"),
    };
    for r in reports {
        out.push_str(&format!(
            "{:<24} {:>6} {:>10.4} {:>10.4} {} {} {} {}\n",
            r.method,
            r.n_test,
            r.rmspe[0],
            r.rmspe[1],
            cell(r.picp, 0, 3, 7),
            cell(r.picp, 1, 3, 7),
            cell(r.mpiw, 0, 4, 10),
            cell(r.mpiw, 1, 4, 10),
        ));
    }
    out
}

/// Averages reports of the same method over replicates, field by field.
pub fn mean_report(method: &str, reports: &[EvalReport]) -> Result<EvalReport> {
    if reports.is_empty() {
        return Err(Error::Argument("no reports to average".into()));
    }
    let n = reports.len() as f64;
    let avg = |get: &dyn Fn(&EvalReport) -> Option<[f64; 2]>| -> Option<[f64; 2]> {
        let mut acc = [0.0; 2];
        for r in reports {
            let v = get(r)?;
            acc[0] += v[0];
            acc[1] += v[1];
        }
        Some([acc[0] / n, acc[1] / n])
    };
    let mut wall_times = BTreeMap::new();
    for r in reports {
        for (k, v) in &r.wall_times {
            *wall_times.entry(k.clone()).or_insert(0.0) += v / n;
        }
    }
    Ok(EvalReport {
        method: method.to_string(),
        rmspe: avg(&|r| Some(r.rmspe)).unwrap_or([f64::NAN; 2]),
        picp: avg(&|r| r.picp),
        mpiw: avg(&|r| r.mpiw),
        n_test: reports.iter().map(|r| r.n_test).sum::<usize>() / reports.len(),
        wall_times,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::SiteSet;
    use proptest::prelude::*;

    fn obs(z1: Vec<f64>, z2: Vec<f64>) -> BivariateObservations {
        let coords: Vec<(f64, f64)> = (0..z1.len()).map(|i| (i as f64, 0.0)).collect();
        BivariateObservations::new(SiteSet::from_coords(&coords).unwrap(), z1, z2).unwrap()
    }

    #[test]
    fn exact_prediction_scores_zero() {
        let t = obs(vec![1.0, -2.0, 3.5], vec![0.0, 4.0, 1.0]);
        assert_eq!(rmspe(&t, &t).unwrap(), [0.0, 0.0]);
    }

    #[test]
    fn constant_residual() {
        let t = obs(vec![1.0, 2.0, 3.0, 4.0], vec![0.0; 4]);
        let p = obs(vec![3.0, 0.0, 5.0, 2.0], vec![-2.0; 4]);
        let r = rmspe(&t, &p).unwrap();
        assert!((r[0] - 2.0).abs() < 1e-15 && (r[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn ten_values_by_hand() {
        let t = [0.3, -1.2, 2.5, 0.0, 4.1, -0.7, 1.9, 3.3, -2.2, 0.8];
        let p = [0.1, -1.0, 2.0, 0.4, 4.0, -1.5, 2.2, 3.0, -2.0, 1.1];
        // squared residuals: .04 .04 .25 .16 .01 .64 .09 .09 .04 .09 -> 1.45
        let expect = (1.45f64 / 10.0).sqrt();
        assert!((rmse(&t, &p).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        assert!(matches!(rmse(&[], &[]), Err(Error::Argument(_))));
        assert!(matches!(rmse(&[1.0], &[1.0, 2.0]), Err(Error::Argument(_))));
        assert!(matches!(coverage(&[], &[], &[]), Err(Error::Argument(_))));
    }

    #[test]
    fn coverage_extremes() {
        let z = [0.0, 1.0, 2.0];
        let all = coverage(&z, &[-1.0, 1.0, 1.5], &[0.0, 2.0, 2.0]).unwrap();
        assert_eq!(all.picp, 1.0);
        let none = coverage(&z, &[1.0, 2.0, 3.0], &[1.5, 2.5, 3.5]).unwrap();
        assert_eq!(none.picp, 0.0);
        assert!((none.mpiw - 0.5).abs() < 1e-15 && (all.mpiw - (1.0 + 1.0 + 0.5) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn crossing_bounds_rejected() {
        assert!(matches!(coverage(&[0.0], &[1.0], &[0.5]), Err(Error::Argument(_))));
    }

    #[test]
    fn report_roundtrip_and_table() {
        let t = obs(vec![0.0, 1.0], vec![2.0, 3.0]);
        let p = obs(vec![0.5, 1.0], vec![2.0, 2.0]);
        let r = EvalReport::point("m", &t, &p)
            .unwrap()
            .with_intervals(&t, [&[-1.0, 0.0], &[1.0, 2.9]], [&[1.0, 2.0], &[3.0, 3.1]])
            .unwrap();
        r.check().unwrap();
        assert_eq!(r.picp, Some([1.0, 1.0]));
        let mut buf = Vec::new();
        write_reports_csv(std::slice::from_ref(&r), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("method,n_test,rmspe1"));
        assert_eq!(text.lines().count(), 2);
        assert!(format_table(&[r]).contains("1.000"));
    }

    #[test]
    fn mean_of_reports() {
        let mk = |a: f64| EvalReport {
            method: "x".into(),
            rmspe: [a, 2.0 * a],
            picp: None,
            mpiw: None,
            n_test: 4,
            wall_times: BTreeMap::from([("fit".to_string(), a)]),
        };
        let m = mean_report("x", &[mk(1.0), mk(3.0)]).unwrap();
        assert_eq!(m.rmspe, [2.0, 4.0]);
        assert_eq!(m.wall_times["fit"], 2.0);
        assert!(m.picp.is_none());
    }

    proptest! {
        #[test]
        fn widening_never_lowers_coverage(
            rows in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0.0f64..3.0), 1..40),
            widen in 0.0f64..2.0,
        ) {
            let z: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let lo: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let hi: Vec<f64> = rows.iter().map(|r| r.1 + r.2).collect();
            let lo_w: Vec<f64> = lo.iter().map(|l| l - widen).collect();
            let hi_w: Vec<f64> = hi.iter().map(|h| h + widen).collect();
            let a = coverage(&z, &lo, &hi).unwrap();
            let b = coverage(&z, &lo_w, &hi_w).unwrap();
            prop_assert!(b.picp >= a.picp);
            prop_assert!(b.mpiw >= a.mpiw);
        }

        #[test]
        fn rmse_ignores_joint_order(
            pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..50),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut crate::rng::from_seed(seed));
            let (t, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let (ts, ps): (Vec<f64>, Vec<f64>) = shuffled.into_iter().unzip();
            let a = rmse(&t, &p).unwrap();
            let b = rmse(&ts, &ps).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
        }
    }
}

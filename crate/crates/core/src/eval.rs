//! RMSE, the comparison table and grayscale map renders.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::roles::{IoConfig, Method};

/// Pooled root-mean-square error over the named channels of every sample,
/// accumulated in `f64`.
pub fn rmse(pred: &[Field], truth: &[Field], channels: &[impl AsRef<str>]) -> Result<f64> {
    let (sum, n) = squared_error(pred, truth, channels)?;
    if n == 0 {
        return Err(Error::Missing("no elements to compare".into()));
    }
    Ok((sum / n as f64).sqrt())
}

/// Mean of per-sample RMSEs; the alternative reduction for sensitivity checks.
pub fn rmse_per_sample(pred: &[Field], truth: &[Field], channels: &[impl AsRef<str>]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Missing("no samples to compare".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!("{} predictions for {} targets", pred.len(), truth.len())));
    }
    let mut acc = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        acc += rmse(std::slice::from_ref(p), std::slice::from_ref(t), channels)?;
    }
    Ok(acc / pred.len() as f64)
}

fn squared_error(pred: &[Field], truth: &[Field], channels: &[impl AsRef<str>]) -> Result<(f64, usize)> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!("{} predictions for {} targets", pred.len(), truth.len())));
    }
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        if (p.height(), p.width()) != (t.height(), t.width()) {
            return Err(Error::DimensionMismatch(format!(
                "prediction {}x{} vs truth {}x{}",
                p.height(),
                p.width(),
                t.height(),
                t.width()
            )));
        }
        for c in channels {
            let a = p.plane(p.channel_index(c.as_ref())?);
            let b = t.plane(t.channel_index(c.as_ref())?);
            sum += a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>();
            n += a.len();
        }
    }
    Ok((sum, n))
}

/// `100·(baseline − ours)/baseline`.
pub fn percent_improvement(ours: f64, baseline: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::InvalidRange(format!("baseline RMSE must be positive, got {baseline}")));
    }
    Ok(100.0 * (baseline - ours) / baseline)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: Method,
    /// `None` for interpolation methods.
    pub io_config: Option<IoConfig>,
    pub scale: usize,
    pub rmse: f64,
    pub n: usize,
}

impl EvalRow {
    fn sort_key(&self) -> (usize, Method, Option<IoConfig>) {
        (self.scale, self.method, self.io_config)
    }
}

pub const CSV_HEADER: &str = "method,io_config,scale,rmse,n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub seed: u64,
    pub dataset_hash: String,
    pub timestamp: String,
    pub units: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Sorts rows by scale, then table order of method and io config.
    pub fn new(mut rows: Vec<EvalRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Missing("a report needs at least one row".into()));
        }
        if let Some(r) = rows.iter().find(|r| !(r.rmse >= 0.0)) {
            return Err(Error::InvalidRange(format!("negative or undefined RMSE {} for {}", r.rmse, r.method)));
        }
        rows.sort_by_key(|a| a.sort_key());
        if rows.windows(2).any(|w| w[0].sort_key() == w[1].sort_key()) {
            return Err(Error::Config("duplicate (method, io config, scale) row".into()));
        }
        Ok(Self { rows })
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let io = r.io_config.map_or("-", |c| c.as_str());
            // `{:?}` prints the shortest string that parses back to the same f64
            writeln!(s, "{},{io},{},{:?},{}", r.method, r.scale, r.rmse, r.n).unwrap();
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::Malformed(format!("report CSV must start with `{CSV_HEADER}`")));
        }
        let rows = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let cols: Vec<&str> = l.split(',').collect();
                let bad = |what: &str| Error::Malformed(format!("{what} in report line `{l}`"));
                if cols.len() != 5 {
                    return Err(bad("wrong column count"));
                }
                Ok(EvalRow {
                    method: cols[0].parse()?,
                    io_config: if cols[1] == "-" { None } else { Some(cols[1].parse()?) },
                    scale: cols[2].parse().map_err(|_| bad("bad scale"))?,
                    rmse: cols[3].parse().map_err(|_| bad("bad rmse"))?,
                    n: cols[4].parse().map_err(|_| bad("bad sample count"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows)
    }

    pub fn find(&self, method: Method, io: Option<IoConfig>, scale: usize) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.method == method && r.io_config == io && r.scale == scale)
    }

    /// Aligned text table with a percent-improvement column against bicubic
    /// at the same scale (blank when bicubic was not evaluated).
    pub fn to_table(&self) -> String {
        let mut s =
            format!("{:<10} {:<8} {:>5} {:>12} {:>6} {:>10}\n", "method", "io", "scale", "rmse", "n", "vs_bicubic");
        for r in &self.rows {
            let io = r.io_config.map_or("-", |c| c.as_str());
            let vs = self
                .find(Method::Bicubic, None, r.scale)
                .and_then(|b| percent_improvement(r.rmse, b.rmse).ok())
                .map_or(String::new(), |p| format!("{p:+.2}%"));
            writeln!(s, "{:<10} {:<8} {:>4}x {:>12.6} {:>6} {:>10}", r.method.as_str(), io, r.scale, r.rmse, r.n, vs)
                .unwrap();
        }
        s
    }
}

/// 8-bit P5 image of one channel, min–max scaled per image; a constant
/// channel maps to mid-gray 128. Row 0 of the field is the top image row.
pub fn pgm_bytes(f: &Field, channel: &str) -> Result<Vec<u8>> {
    let plane = f.plane(f.channel_index(channel)?);
    let (lo, hi) = plane.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mut out = format!("P5\n{} {}\n255\n", f.width(), f.height()).into_bytes();
    if hi > lo {
        let span = (hi - lo) as f64;
        out.extend(plane.iter().map(|&v| ((v - lo) as f64 / span * 255.0).round().clamp(0.0, 255.0) as u8));
    } else {
        out.extend(std::iter::repeat_n(128u8, plane.len()));
    }
    Ok(out)
}

pub fn render_map(f: &Field, channel: &str, path: impl AsRef<Path>) -> Result<()> {
    Ok(std::fs::write(path, pgm_bytes(f, channel)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(v: &[f32]) -> Field {
        Field::new(vec!["PRECT".into()], 1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[f(&[0.0, 0.0])], &[f(&[3.0, 4.0])], &["PRECT"]).unwrap(), (12.5f64).sqrt());
        assert_eq!(rmse(&[f(&[1.0, 2.0])], &[f(&[1.0, 2.0])], &["PRECT"]).unwrap(), 0.0);
        assert!(rmse(&[f(&[1.0])], &[f(&[1.0, 2.0])], &["PRECT"]).is_err());
        assert!(rmse(&[f(&[1.0])], &[f(&[1.0])], &["TS"]).is_err());
        // per-sample averaging differs from pooling when sample errors differ
        let p = [f(&[0.0]), f(&[0.0])];
        let t = [f(&[3.0]), f(&[4.0])];
        assert_eq!(rmse_per_sample(&p, &t, &["PRECT"]).unwrap(), 3.5);
    }

    #[test]
    fn percent_examples() {
        assert!((percent_improvement(3.3447, 4.0235).unwrap() - 16.87).abs() < 0.01);
        assert_eq!(percent_improvement(4.0, 4.0).unwrap(), 0.0);
        assert!((percent_improvement(5.1803, 5.3193).unwrap() - 2.61).abs() < 0.005);
        assert!(percent_improvement(1.0, 0.0).is_err());
    }

    #[test]
    fn csv_round_trip_and_order() {
        let rows = vec![
            EvalRow {
                method: Method::Ddpm,
                io_config: Some(IoConfig::ThreeInOneOut),
                scale: 4,
                rmse: 0.1 + 0.2,
                n: 150,
            },
            EvalRow { method: Method::Bicubic, io_config: None, scale: 8, rmse: 1.0 / 3.0, n: 150 },
            EvalRow { method: Method::Bicubic, io_config: None, scale: 4, rmse: 0.5, n: 150 },
            EvalRow { method: Method::Ddpm, io_config: Some(IoConfig::ThreeInThreeOut), scale: 4, rmse: 0.4, n: 150 },
        ];
        let r = EvalReport::new(rows).unwrap();
        let order: Vec<_> = r.rows.iter().map(|r| (r.scale, r.method, r.io_config)).collect();
        assert_eq!(
            order,
            vec![
                (4, Method::Bicubic, None),
                (4, Method::Ddpm, Some(IoConfig::ThreeInThreeOut)),
                (4, Method::Ddpm, Some(IoConfig::ThreeInOneOut)),
                (8, Method::Bicubic, None)
            ]
        );
        assert_eq!(EvalReport::from_csv(&r.to_csv()).unwrap(), r);
        assert!(r.to_table().contains("+40.00%"));
    }

    #[test]
    fn pgm_scaling() {
        let bytes = pgm_bytes(&f(&[2.0, 4.0, 3.0]), "PRECT").unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 255, 128]);
        let c = pgm_bytes(&f(&[7.0, 7.0]), "PRECT").unwrap();
        assert!(c.ends_with(&[128, 128]));
        assert!(c.starts_with(b"P5\n2 1\n255\n"));
    }
}

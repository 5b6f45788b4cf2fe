//! Append-only metric streams written as schema-tagged CSV, plus the sliced 1-Wasserstein
//! distance used as a sample-quality proxy.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};

/// One row of experiment output: a step index plus named scalars in schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub step: u64,
    pub values: Vec<f64>,
}

/// CSV writer that enforces a fixed column list and a non-decreasing step column.
///
/// The first line is `# schema: <name> v1`, the second the header.
pub struct MetricWriter {
    path: PathBuf,
    columns: Vec<String>,
    writer: csv::Writer<File>,
    last_step: Option<u64>,
}

impl MetricWriter {
    /// `columns` excludes the leading step column, which is named `step_name`.
    pub fn create(path: &Path, schema: &str, step_name: &str, columns: &[&str]) -> Result<Self> {
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "# schema: {schema} v1").map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(f);
        let mut header = vec![step_name];
        header.extend_from_slice(columns);
        writer.write_record(&header)?;
        Ok(Self {
            path: path.to_path_buf(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            writer,
            last_step: None,
        })
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn append(&mut self, rec: &MetricRecord) -> Result<()> {
        check_dim("metric record", self.columns.len(), rec.values.len())?;
        if let Some(prev) = self.last_step {
            if rec.step < prev {
                return Err(Error::Config(format!(
                    "metric steps must be non-decreasing ({} after {prev})",
                    rec.step
                )));
            }
        }
        self.last_step = Some(rec.step);
        let mut row = vec![rec.step.to_string()];
        row.extend(rec.values.iter().map(|v| format_value(*v)));
        self.writer.write_record(&row)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl Drop for MetricWriter {
    fn drop(&mut self) {
        let _ = self.writer.flush();
    }
}

/// Shortest round-trip representation, so identical values give identical bytes.
pub fn format_value(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// A CSV metric table read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub schema: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl MetricTable {
    pub fn read(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(f);
        let mut first = String::new();
        reader
            .read_line(&mut first)
            .map_err(|e| Error::io(path, e))?;
        let schema = first
            .trim()
            .strip_prefix("# schema:")
            .ok_or_else(|| Error::Config(format!("{} has no schema line", path.display())))?
            .trim()
            .to_string();
        let mut csv = csv::Reader::from_reader(reader);
        let header: Vec<String> = csv.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in csv.records() {
            let rec = rec?;
            rows.push(
                rec.iter()
                    .map(|s| s.parse::<f64>().unwrap_or(f64::NAN))
                    .collect(),
            );
        }
        Ok(Self {
            schema,
            header,
            rows,
        })
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }
}

/// Sliced 1-Wasserstein distance between two equally sized point clouds, averaged over
/// `n_proj` random unit directions.
pub fn sliced_w1<R: Rng + ?Sized>(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    n_proj: usize,
    rng: &mut R,
) -> Result<f64> {
    check_dim("sliced_w1 (sizes)", a.len(), b.len())?;
    if a.is_empty() || n_proj == 0 {
        return Err(Error::EmptyBatch("sliced_w1"));
    }
    let d = a[0].len();
    let mut total = 0.0;
    for _ in 0..n_proj {
        let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|x| *x /= norm);
        let proj = |pts: &[Vec<f64>]| {
            let mut p: Vec<f64> = pts
                .iter()
                .map(|x| x.iter().zip(&dir).map(|(u, v)| u * v).sum())
                .collect();
            p.sort_by(f64::total_cmp);
            p
        };
        let (pa, pb) = (proj(a), proj(b));
        total += pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    Ok(total / n_proj as f64)
}

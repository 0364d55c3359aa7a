use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CliError, Result};

pub const METRICS_HEADER: [&str; 9] = [
    "epoch",
    "combiner",
    "lr",
    "train_loss",
    "test_acc",
    "ensemble_acc",
    "similarity",
    "wall_seconds",
    "params_total",
];

/// One row of the metrics CSV. Per-subnet lists are `;`-joined in the file.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub combiner: String,
    pub lr: f64,
    pub train_loss: Vec<f64>,
    pub test_acc: Vec<f64>,
    pub ensemble_acc: f64,
    pub similarity: f64,
    pub wall_seconds: f64,
    pub params_total: usize,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(";")
}

fn parse_list(field: &str, s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|v| v.parse().map_err(|_| CliError::Report(format!("{field}: {v:?} is not a number"))))
        .collect()
}

impl MetricsRecord {
    pub fn to_row(&self) -> [String; 9] {
        [
            self.epoch.to_string(),
            self.combiner.clone(),
            format!("{:.6}", self.lr),
            join(&self.train_loss),
            join(&self.test_acc),
            format!("{:.6}", self.ensemble_acc),
            format!("{:.6}", self.similarity),
            format!("{:.3}", self.wall_seconds),
            self.params_total.to_string(),
        ]
    }

    pub fn best_subnet_acc(&self) -> f64 {
        self.test_acc.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(METRICS_HEADER).map_err(csv_err)?;
        inner.flush().map_err(CliError::io("metrics"))?;
        Ok(Self { inner })
    }

    pub fn append(&mut self, r: &MetricsRecord) -> Result<()> {
        self.inner.write_record(r.to_row()).map_err(csv_err)?;
        self.inner.flush().map_err(CliError::io("metrics"))
    }
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Report(format!("csv: {e}"))
}

pub fn read_metrics<R: Read>(r: R) -> Result<Vec<MetricsRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers().map_err(csv_err)?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Report(format!("missing column {name:?}")))
    };
    let idx: Vec<usize> = METRICS_HEADER.iter().map(|h| col(h)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let get = |i: usize| rec.get(idx[i]).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            get(i).parse().map_err(|_| {
                CliError::Report(format!("row {}: {} = {:?} is not a number", line + 1, METRICS_HEADER[i], get(i)))
            })
        };
        let int = |i: usize| -> Result<usize> {
            get(i).parse().map_err(|_| {
                CliError::Report(format!("row {}: {} = {:?} is not an integer", line + 1, METRICS_HEADER[i], get(i)))
            })
        };
        out.push(MetricsRecord {
            epoch: int(0)?,
            combiner: get(1).to_string(),
            lr: num(2)?,
            train_loss: parse_list("train_loss", get(3))?,
            test_acc: parse_list("test_acc", get(4))?,
            ensemble_acc: num(5)?,
            similarity: num(6)?,
            wall_seconds: num(7)?,
            params_total: int(8)?,
        });
    }
    Ok(out)
}

pub fn read_metrics_file(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = std::fs::File::open(path).map_err(CliError::io(path.display().to_string()))?;
    read_metrics(f).map_err(|e| match e {
        CliError::Report(m) => CliError::Report(format!("{}: {m}", path.display())),
        other => other,
    })
}

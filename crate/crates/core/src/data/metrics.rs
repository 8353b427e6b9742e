//! Per-epoch metrics as CSV.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 9] = [
    "epoch",
    "phase",
    "loss",
    "acc",
    "s",
    "y",
    "z",
    "resource",
    "counted_sparsity",
];

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: u64,
    pub phase: String,
    pub loss: f64,
    pub acc: f64,
    pub s: f64,
    pub y: f64,
    pub z: f64,
    pub resource: f64,
    pub counted_sparsity: f64,
}

impl EpochRow {
    fn fields(&self) -> [String; 9] {
        [
            self.epoch.to_string(),
            self.phase.clone(),
            self.loss.to_string(),
            self.acc.to_string(),
            self.s.to_string(),
            self.y.to_string(),
            self.z.to_string(),
            self.resource.to_string(),
            self.counted_sparsity.to_string(),
        ]
    }
}

/// Appends rows to a metrics file, writing the header only if the file is empty.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl MetricsWriter<std::fs::File> {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let empty = file.metadata()?.len() == 0;
        Self::with_header(file, empty)
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn with_header(sink: W, write_header: bool) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(sink);
        if write_header {
            inner.write_record(METRICS_HEADER)?;
            inner.flush()?;
        }
        Ok(Self { inner })
    }

    pub fn append(&mut self, row: &EpochRow) -> Result<()> {
        self.inner.write_record(row.fields())?;
        self.inner.flush()?;
        Ok(())
    }

    /// The underlying sink.
    pub fn into_inner(self) -> Result<W> {
        self.inner
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}

/// Parse a metrics file back into rows.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    if reader.headers()?.iter().ne(METRICS_HEADER) {
        return Err(Error::format("metrics header does not match"));
    }
    let num = |rec: &csv::StringRecord, i: usize| -> Result<f64> {
        rec[i]
            .parse()
            .map_err(|_| Error::format(format!("column {} is not a number: {}", METRICS_HEADER[i], &rec[i])))
    };
    reader
        .records()
        .map(|rec| {
            let rec = rec?;
            Ok(EpochRow {
                epoch: rec[0]
                    .parse()
                    .map_err(|_| Error::format(format!("bad epoch {}", &rec[0])))?,
                phase: rec[1].to_string(),
                loss: num(&rec, 2)?,
                acc: num(&rec, 3)?,
                s: num(&rec, 4)?,
                y: num(&rec, 5)?,
                z: num(&rec, 6)?,
                resource: num(&rec, 7)?,
                counted_sparsity: num(&rec, 8)?,
            })
        })
        .collect()
}

//! CSV series files: a header row, a leading date or id column, then one
//! numeric column per channel.

use std::path::Path;

use mlf_core::data::SeriesDataset;

use crate::error::{AppError, Result};

pub fn load_csv(path: &Path) -> Result<SeriesDataset> {
    let file = std::fs::File::open(path).map_err(|e| AppError::io(path, e))?;
    read_csv(file, path)
}

/// Parses from any reader; `path` only labels errors. Rows and columns in
/// errors are 1-based positions in the file, header included.
pub fn read_csv(reader: impl std::io::Read, path: &Path) -> Result<SeriesDataset> {
    let fail = |row: usize, column: usize, reason: String| AppError::Csv {
        path: path.to_path_buf(),
        row,
        column,
        reason,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| fail(1, 1, e.to_string()))?.clone();
    if header.len() < 2 {
        return Err(fail(1, header.len(), "need a date column and at least one value column".into()));
    }
    let channels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut stamps = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| fail(row, 1, e.to_string()))?;
        if rec.len() != header.len() {
            return Err(fail(row, rec.len(), format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        stamps.push(rec[0].to_string());
        for (j, cell) in rec.iter().enumerate().skip(1) {
            let v: f64 = cell
                .parse()
                .map_err(|_| fail(row, j + 1, format!("'{cell}' is not a number")))?;
            if !v.is_finite() {
                return Err(fail(row, j + 1, format!("'{cell}' is not finite")));
            }
            values.push(v);
        }
    }
    if stamps.len() < 2 {
        return Err(fail(stamps.len() + 1, 1, format!("need at least 2 data rows, found {}", stamps.len())));
    }
    let ds = SeriesDataset::new(channels, values)?;
    Ok(ds.with_timestamps(stamps)?)
}

/// Creates missing parent directories.
pub fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(header).map_err(|e| csv_io(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

/// Writes a dataset with a leading `date` column (row index when the dataset
/// has no timestamps).
pub fn save_dataset(path: &Path, ds: &SeriesDataset) -> Result<()> {
    let mut header = vec!["date".to_string()];
    header.extend(ds.channels.iter().cloned());
    let rows = (0..ds.len()).map(|t| {
        let mut r = vec![ds.timestamps.as_ref().map_or_else(|| t.to_string(), |s| s[t].clone())];
        r.extend((0..ds.num_channels()).map(|c| ds.get(t, c).to_string()));
        r
    });
    write_csv(path, &header, rows)
}

fn csv_io(path: &Path, e: csv::Error) -> AppError {
    AppError::io(path, std::io::Error::other(e))
}

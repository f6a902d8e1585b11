use std::path::Path;

use super::{Column, CohortError, FeatureTable, TransformLog};

/// Fixed CSV column order.
pub const CSV_COLUMNS: [&str; 18] = [
    "subject_id",
    "age",
    "bsa",
    "brain_vol",
    "vent_vol",
    "wmh_vol",
    "wmh_count",
    "dbp",
    "sbp",
    "mbp",
    "sv",
    "edv",
    "ef",
    "sigma0",
    "r0",
    "c1",
    "rp",
    "tau",
];

fn io_err(path: &Path, e: impl std::fmt::Display) -> CohortError {
    CohortError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Write in the fixed column order; masked cells are empty strings.
pub fn write_csv(table: &FeatureTable, path: &Path) -> Result<(), CohortError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(CSV_COLUMNS).map_err(|e| io_err(path, e))?;
    let cols: Vec<&Column> = CSV_COLUMNS[1..]
        .iter()
        .map(|n| table.column(n).ok_or_else(|| CohortError::MissingColumn(n.to_string())))
        .collect::<Result<_, _>>()?;
    let mut record = Vec::with_capacity(CSV_COLUMNS.len());
    for (i, id) in table.subject_ids.iter().enumerate() {
        record.clear();
        record.push(id.to_string());
        for c in &cols {
            // `Display` for f64 is the shortest representation that round-trips.
            record.push(if c.observed[i] { c.values[i].to_string() } else { String::new() });
        }
        w.write_record(&record).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_csv(path: &Path) -> Result<FeatureTable, CohortError> {
    let mut r = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| io_err(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if let Some(unknown) = header.iter().find(|h| !CSV_COLUMNS.contains(&h.as_str())) {
        return Err(CohortError::UnknownColumn(unknown.clone()));
    }
    let position = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CohortError::MissingColumn(name.to_string()))
    };
    let id_pos = position("subject_id")?;
    let positions: Vec<usize> = CSV_COLUMNS[1..].iter().map(|n| position(n)).collect::<Result<_, _>>()?;

    let mut ids = Vec::new();
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); positions.len()];
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        if rec.len() != header.len() {
            return Err(CohortError::RaggedRow {
                row: row + 1,
                expected: header.len(),
                found: rec.len(),
            });
        }
        let id_cell = rec[id_pos].trim();
        ids.push(id_cell.parse::<u64>().map_err(|_| CohortError::NonNumeric {
            row: row + 1,
            column: "subject_id".into(),
            value: id_cell.into(),
        })?);
        for (k, &p) in positions.iter().enumerate() {
            let cell = rec[p].trim();
            let v = if cell.is_empty() {
                f64::NAN
            } else {
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| !v.is_nan())
                    .ok_or_else(|| CohortError::NonNumeric {
                        row: row + 1,
                        column: CSV_COLUMNS[k + 1].into(),
                        value: cell.into(),
                    })?
            };
            values[k].push(v);
        }
    }
    let columns = CSV_COLUMNS[1..]
        .iter()
        .zip(values)
        .map(|(n, v)| Column::new(n, v))
        .collect();
    Ok(FeatureTable::new(ids, columns))
}

pub fn write_transform_log(log: &TransformLog, path: &Path) -> Result<(), CohortError> {
    let text = serde_json::to_string_pretty(log).map_err(|e| io_err(path, e))?;
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_transform_log(path: &Path) -> Result<TransformLog, CohortError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

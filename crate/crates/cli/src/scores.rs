//! Per-essay score tables: `id,cohesion,syntax,vocabulary,phraseology,grammar,conventions`.

use std::collections::BTreeMap;
use std::path::Path;

use transgat_core::data::{Trait, TRAIT_COUNT};

use crate::CliError;

pub fn header() -> Vec<&'static str> {
    let mut h = vec!["id"];
    h.extend(Trait::ALL.iter().map(|t| t.key()));
    h
}

/// Rows keyed by essay id. Values must be finite; ids unique.
pub fn read_scores(path: &Path) -> Result<BTreeMap<String, [f64; TRAIT_COUNT]>, CliError> {
    let bad = |msg: String| CliError::BadInput(format!("{}: {msg}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let found: Vec<String> = reader
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if found != header() {
        return Err(bad(format!("header must be {}", header().join(","))));
    }
    let mut out = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        let id = row[0].to_string();
        let mut values = [0.0; TRAIT_COUNT];
        for (i, slot) in values.iter_mut().enumerate() {
            let cell = &row[i + 1];
            *slot = cell
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("line {line}: {:?} is not a finite {}", cell, Trait::ALL[i].key())))?;
        }
        if out.insert(id.clone(), values).is_some() {
            return Err(bad(format!("line {line}: duplicate id {id:?}")));
        }
    }
    Ok(out)
}

pub fn write_scores(path: &Path, rows: &[(String, Vec<f64>)]) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Internal(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header()).map_err(io)?;
    for (id, values) in rows {
        let mut rec = vec![id.clone()];
        rec.extend(values.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Internal(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_scores(&p, &[("a".into(), vec![1.0, 1.5, 2.0, 2.5, 3.0, 3.5])]).unwrap();
        let back = read_scores(&p).unwrap();
        assert_eq!(back["a"], [1.0, 1.5, 2.0, 2.5, 3.0, 3.5]);

        std::fs::write(&p, "id,cohesion\na,1\n").unwrap();
        assert!(read_scores(&p).unwrap_err().to_string().contains("header"));

        let h = header().join(",");
        std::fs::write(&p, format!("{h}\na,1,2,3,4,5,x\n")).unwrap();
        assert!(read_scores(&p).unwrap_err().to_string().contains("line 2"));

        std::fs::write(&p, format!("{h}\na,1,2,3,4,5,5\na,1,2,3,4,5,5\n")).unwrap();
        assert!(read_scores(&p).unwrap_err().to_string().contains("duplicate"));
    }
}

use std::fmt::Write as _;

use super::AnalysisError;
use crate::model::Model;
use crate::tensor::Tensor;

/// Square map with token labels as both header and first column.
pub fn attention_map_csv(map: &Tensor, labels: &[String]) -> Result<String, AnalysisError> {
    let n = labels.len();
    if map.shape() != [n, n] {
        return Err(AnalysisError::Invalid(format!("map shape {:?} does not match {n} labels", map.shape())));
    }
    let mut out = String::from("token");
    for l in labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for (i, l) in labels.iter().enumerate() {
        out.push_str(l);
        for v in map.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterRow {
    pub block: usize,
    /// `rtg`, `state`, `action` or `unified`.
    pub bank: String,
    pub dim: usize,
    /// Tap `j` weights the token `j` positions back.
    pub taps: Vec<f64>,
}

/// Every conv block's filters, one row per channel and bank. Values are
/// written in shortest round-trip form so reloading is exact.
pub fn filters_csv(model: &Model) -> String {
    let l = model.config().filter_len;
    let mut out = String::from("block,bank,dim");
    for j in 0..l {
        let _ = write!(out, ",lag{j}");
    }
    out.push('\n');
    for b in 0..model.block_kinds().len() {
        let Some(banks) = model.conv_filters(b) else { continue };
        for (name, t) in banks {
            for d in 0..t.rows() {
                let _ = write!(out, "{b},{name},{d}");
                for v in t.row(d) {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        }
    }
    out
}

pub fn read_filters_csv(text: &str) -> Result<Vec<FilterRow>, AnalysisError> {
    let bad = |line: usize, m: &str| AnalysisError::Invalid(format!("filters csv line {line}: {m}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "missing header"))?;
    let taps = header.split(',').count().checked_sub(3).filter(|_| header.starts_with("block,bank,dim"));
    let taps = taps.ok_or_else(|| bad(1, "expected block,bank,dim,lag0,..."))?;
    let mut rows = vec![];
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != taps + 3 {
            return Err(bad(i + 2, &format!("expected {} cells, found {}", taps + 3, cells.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(i + 2, &e.to_string()));
        let int = |s: &str| s.parse::<usize>().map_err(|e| bad(i + 2, &e.to_string()));
        rows.push(FilterRow {
            block: int(cells[0])?,
            bank: cells[1].to_string(),
            dim: int(cells[2])?,
            taps: cells[3..].iter().map(|c| num(c)).collect::<Result<_, _>>()?,
        });
    }
    Ok(rows)
}

//! Conversion of LINQS citation dumps (`<name>.content`, `<name>.cites`)
//! into bundles.
//!
//! `.content` lines are `paper_id f_1 … f_d label`, `.cites` lines are
//! `cited citing`. Nodes keep the order of the content file, class ids are
//! assigned in sorted order of the label strings, and citations touching
//! papers absent from the content file are dropped.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::data::{parse_err, Bundle};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::matrix::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConversionReport {
    pub dropped_citations: usize,
}

pub fn convert_linqs(content: &Path, cites: &Path) -> Result<(Bundle, ConversionReport)> {
    let text = fs::read_to_string(content).map_err(|e| Error::io_at(content, e))?;
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() < 3 {
            return Err(parse_err(content, i + 1, "expected `id features… label`"));
        }
        let d = toks.len() - 2;
        if *dim.get_or_insert(d) != d {
            return Err(parse_err(
                content,
                i + 1,
                format!("row has {d} features, expected {}", dim.unwrap()),
            ));
        }
        let feats = toks[1..toks.len() - 1]
            .iter()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| parse_err(content, i + 1, format!("bad feature `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if ids.insert(toks[0].to_string(), rows.len()).is_some() {
            return Err(parse_err(content, i + 1, format!("duplicate paper id `{}`", toks[0])));
        }
        rows.push(feats);
        raw_labels.push(toks[toks.len() - 1].to_string());
    }
    let n = rows.len();
    if n == 0 {
        return Err(Error::EmptyGraph);
    }
    let names: BTreeSet<&String> = raw_labels.iter().collect();
    let class_of: HashMap<&String, usize> = names.into_iter().enumerate().map(|(c, s)| (s, c)).collect();
    let labels = raw_labels.iter().map(|s| class_of[s]).collect();

    let text = fs::read_to_string(cites).map_err(|e| Error::io_at(cites, e))?;
    let mut edges = Vec::new();
    let mut report = ConversionReport::default();
    for (i, line) in text.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() != 2 {
            return Err(parse_err(cites, i + 1, "expected `cited citing`"));
        }
        match (ids.get(toks[0]), ids.get(toks[1])) {
            (Some(&u), Some(&v)) => edges.push((u, v)),
            _ => report.dropped_citations += 1,
        }
    }
    let d = dim.unwrap_or(0);
    let features = DenseMatrix::new(n, d, rows.into_iter().flatten().collect())?;
    let graph = Graph::build(&edges, n)?;
    let name = content
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok((Bundle::new(name, graph, features, labels, None)?, report))
}

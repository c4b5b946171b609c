use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic};
use crate::tensor::Matrix;

/// Contents of `manifest.json`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_nodes: usize,
    pub num_features: usize,
    pub num_classes: usize,
}

fn parse_err(file: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { file: file.to_string(), line, msg: msg.into() }
}

fn parse_id(file: &str, line: usize, tok: &str) -> Result<usize> {
    tok.parse().map_err(|_| parse_err(file, line, format!("bad node id {tok:?}")))
}

/// Load a dataset directory: `manifest.json`, `edges.tsv`, `features.csv`
/// and optionally `labels.csv`.
pub fn load_graph(dir: &Path) -> Result<Graph> {
    let manifest: Manifest = serde_json::from_str(&read_to_string(&dir.join("manifest.json"))?)?;
    let n = manifest.num_nodes;

    let mut edges = Vec::new();
    for (ln, line) in read_to_string(&dir.join("edges.tsv"))?.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let (Some(a), Some(b), None) = (toks.next(), toks.next(), toks.next()) else {
            return Err(parse_err("edges.tsv", ln + 1, "expected two node ids"));
        };
        let (a, b) = (parse_id("edges.tsv", ln + 1, a)?, parse_id("edges.tsv", ln + 1, b)?);
        for id in [a, b] {
            if id >= n {
                return Err(Error::NodeOutOfRange { id, num_nodes: n });
            }
        }
        if a == b {
            return Err(Error::SelfLoop(a));
        }
        edges.push((a, b));
    }

    let mut data = Vec::with_capacity(n * manifest.num_features);
    let mut rows = 0;
    for (ln, line) in read_to_string(&dir.join("features.csv"))?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for tok in line.split(',') {
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|_| parse_err("features.csv", ln + 1, format!("bad real {tok:?}")))?;
            data.push(v);
        }
        if data.len() - before != manifest.num_features {
            return Err(parse_err(
                "features.csv",
                ln + 1,
                format!("expected {} values, got {}", manifest.num_features, data.len() - before),
            ));
        }
        rows += 1;
    }
    if rows != n {
        return Err(Error::FeatureRows { expected: n, found: rows });
    }
    let features = Matrix::from_vec(n, manifest.num_features, data)?;

    let labels_path = dir.join("labels.csv");
    let labels = if labels_path.exists() {
        let mut labels = Vec::with_capacity(n);
        for (ln, line) in read_to_string(&labels_path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let y: usize = line
                .trim()
                .parse()
                .map_err(|_| parse_err("labels.csv", ln + 1, format!("bad label {line:?}")))?;
            labels.push(y);
        }
        Some(labels)
    } else {
        None
    };

    Graph::new(features, edges, labels, manifest.num_classes)
}

/// Write `graph` in the dataset directory format. Each file is written
/// atomically.
pub fn write_graph(graph: &Graph, dir: &Path) -> Result<()> {
    let manifest = Manifest {
        num_nodes: graph.num_nodes(),
        num_features: graph.num_features(),
        num_classes: graph.num_classes(),
    };
    write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;

    let mut edges = String::new();
    for &(a, b) in graph.edges() {
        writeln!(edges, "{a}\t{b}").unwrap();
    }
    write_atomic(&dir.join("edges.tsv"), edges.as_bytes())?;

    let mut feats = String::new();
    for r in 0..graph.num_nodes() {
        for (k, v) in graph.features().row(r).iter().enumerate() {
            if k > 0 {
                feats.push(',');
            }
            write!(feats, "{v}").unwrap();
        }
        feats.push('\n');
    }
    write_atomic(&dir.join("features.csv"), feats.as_bytes())?;

    if let Some(labels) = graph.labels() {
        let mut s = String::new();
        for y in labels {
            writeln!(s, "{y}").unwrap();
        }
        write_atomic(&dir.join("labels.csv"), s.as_bytes())?;
    }
    Ok(())
}

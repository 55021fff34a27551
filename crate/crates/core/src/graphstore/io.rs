//! On-disk dataset format.
//!
//! A dataset directory holds:
//! - `edges.tsv`: one undirected edge per line, `u<TAB>v`, 0-based decimal
//!   ids; `#`-prefixed comment lines allowed; duplicates and reversed
//!   pairs are merged, self-loop lines dropped with a counted warning.
//! - `labels.tsv`: `node<TAB>label`, label −1 for unlabeled.
//! - features: either `features.csv` (comma-separated decimal floats, one
//!   row per node) or `features.bin` (magic `SRNCFEAT`, two little-endian
//!   u64 for rows/cols, then row-major little-endian f32).
//! - `meta.json`: `{"num_classes": N, "name": str}`.
//! - `times.tsv` (optional): `node<TAB>integer-time`.
//!
//! Feature storage precision is f32 (the binary format's element type);
//! CSV values are parsed as f32 then widened, so save/load round-trips
//! are bit-exact regardless of the source format.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{Error, Result};

const FEATURES_MAGIC: &[u8; 8] = b"SRNCFEAT";

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    num_classes: usize,
    name: String,
}

/// What the loader cleaned up or observed while reading a directory.
#[derive(Debug, Clone, Default, Serialize)]
pub struct LoadReport {
    pub self_loops_dropped: usize,
    pub duplicate_edges_merged: usize,
    pub num_nodes: usize,
    pub num_edges: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub labeled_nodes: usize,
}

fn data_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push((lineno + 1, trimmed.to_string()));
    }
    Ok(out)
}

fn parse_id(tok: &str, path: &Path, lineno: usize) -> Result<u64> {
    tok.parse::<u64>().map_err(|_| {
        Error::data(format!(
            "{}:{lineno}: non-numeric token '{tok}'",
            path.display()
        ))
    })
}

/// Loads a dataset directory into a [`Graph`], returning the cleanup
/// report alongside.
pub fn load_graph_with_report(dir: &Path) -> Result<(Graph, LoadReport)> {
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", meta_path.display())))?;
    let meta: Meta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::data(format!("{}: {e}", meta_path.display())))?;

    let edges_path = dir.join("edges.tsv");
    let mut edges = BTreeSet::new();
    let mut self_loops = 0usize;
    let mut raw_lines = 0usize;
    let mut max_id = 0u64;
    for (lineno, line) in data_lines(&edges_path)? {
        let mut toks = line.split_whitespace();
        let (u, v) = match (toks.next(), toks.next()) {
            (Some(a), Some(b)) => (parse_id(a, &edges_path, lineno)?, parse_id(b, &edges_path, lineno)?),
            _ => {
                return Err(Error::data(format!(
                    "{}:{lineno}: expected 'u<TAB>v'",
                    edges_path.display()
                )))
            }
        };
        raw_lines += 1;
        max_id = max_id.max(u).max(v);
        if u == v {
            self_loops += 1;
            continue;
        }
        edges.insert((u.min(v), u.max(v)));
    }
    let duplicate_edges_merged = raw_lines - self_loops - edges.len();
    if self_loops > 0 {
        log::warn!("{}: dropped {self_loops} self-loop line(s)", edges_path.display());
    }

    let labels_path = dir.join("labels.tsv");
    let mut label_pairs = Vec::new();
    for (lineno, line) in data_lines(&labels_path)? {
        let mut toks = line.split_whitespace();
        let (node, label) = match (toks.next(), toks.next()) {
            (Some(a), Some(b)) => {
                let node = parse_id(a, &labels_path, lineno)?;
                let label = b.parse::<i64>().map_err(|_| {
                    Error::data(format!(
                        "{}:{lineno}: non-numeric token '{b}'",
                        labels_path.display()
                    ))
                })?;
                (node, label)
            }
            _ => {
                return Err(Error::data(format!(
                    "{}:{lineno}: expected 'node<TAB>label'",
                    labels_path.display()
                )))
            }
        };
        max_id = max_id.max(node);
        label_pairs.push((node, label));
    }

    let num_nodes = (max_id + 1) as usize;
    let features = load_features(dir, num_nodes)?;

    let mut labels = vec![-1i64; num_nodes];
    let mut seen = vec![false; num_nodes];
    for (node, label) in label_pairs {
        let node = node as usize;
        if seen[node] {
            return Err(Error::data(format!(
                "{}: node {node} listed twice",
                labels_path.display()
            )));
        }
        seen[node] = true;
        labels[node] = label;
    }

    let edge_vec: Vec<(u32, u32)> = edges.into_iter().map(|(u, v)| (u as u32, v as u32)).collect();
    let graph = Graph::new(&edge_vec, features, labels, meta.num_classes, meta.name)?;
    let report = LoadReport {
        self_loops_dropped: self_loops,
        duplicate_edges_merged,
        num_nodes: graph.num_nodes(),
        num_edges: graph.num_edges(),
        num_classes: graph.num_classes(),
        feature_dim: graph.feature_dim(),
        labeled_nodes: graph.labeled_nodes().len(),
    };
    Ok((graph, report))
}

pub fn load_graph(dir: &Path) -> Result<Graph> {
    load_graph_with_report(dir).map(|(g, _)| g)
}

fn load_features(dir: &Path, num_nodes: usize) -> Result<Array2<f64>> {
    let bin = dir.join("features.bin");
    let csv = dir.join("features.csv");
    let features = if bin.exists() {
        load_features_bin(&bin)?
    } else if csv.exists() {
        load_features_csv(&csv)?
    } else {
        return Err(Error::data(format!(
            "missing features.bin or features.csv in {}",
            dir.display()
        )));
    };
    if features.nrows() != num_nodes {
        return Err(Error::data(format!(
            "feature row count {} != num_nodes {} (max node id + 1)",
            features.nrows(),
            num_nodes
        )));
    }
    Ok(features)
}

fn load_features_bin(path: &Path) -> Result<Array2<f64>> {
    let mut file = BufReader::new(
        fs::File::open(path)
            .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != FEATURES_MAGIC {
        return Err(Error::data(format!("{}: bad magic", path.display())));
    }
    let mut dims = [0u8; 16];
    file.read_exact(&mut dims)?;
    let rows = u64::from_le_bytes(dims[..8].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(dims[8..].try_into().unwrap()) as usize;
    let mut buf = vec![0u8; rows * cols * 4];
    file.read_exact(&mut buf)?;
    let mut out = Array2::zeros((rows, cols));
    for (i, chunk) in buf.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        out[[i / cols.max(1), i % cols.max(1)]] = v as f64;
    }
    Ok(out)
}

fn load_features_csv(path: &Path) -> Result<Array2<f64>> {
    let lines = data_lines(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(lines.len());
    let mut cols = None;
    for (lineno, line) in lines {
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f32>().map(|v| v as f64).map_err(|_| {
                    Error::data(format!(
                        "{}:{lineno}: non-numeric token '{}'",
                        path.display(),
                        tok.trim()
                    ))
                })
            })
            .collect::<Result<_>>()?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(Error::data(format!(
                    "{}:{lineno}: expected {c} columns, found {}",
                    path.display(),
                    row.len()
                )))
            }
            _ => {}
        }
        rows.push(row);
    }
    let cols = cols.unwrap_or(0);
    let mut out = Array2::zeros((rows.len(), cols));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    Ok(out)
}

/// Writes a graph back out in the canonical layout (`features.bin` for
/// features). `save(load(dir))` reproduces edge set, labels, and features
/// bit-for-bit.
pub fn save_graph(g: &Graph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut ef = BufWriter::new(fs::File::create(dir.join("edges.tsv"))?);
    for (u, v) in g.edge_list() {
        writeln!(ef, "{u}\t{v}")?;
    }
    ef.flush()?;

    let mut lf = BufWriter::new(fs::File::create(dir.join("labels.tsv"))?);
    for (i, &l) in g.labels().iter().enumerate() {
        writeln!(lf, "{i}\t{l}")?;
    }
    lf.flush()?;

    write_features_bin(&g.features().view(), &dir.join("features.bin"))?;

    let meta = Meta {
        num_classes: g.num_classes(),
        name: g.name().to_string(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Writes a dense matrix in the `features.bin` layout (f32 storage).
pub fn write_features_bin(m: &ndarray::ArrayView2<f64>, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(FEATURES_MAGIC)?;
    f.write_all(&(m.nrows() as u64).to_le_bytes())?;
    f.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for &v in m.iter() {
        f.write_all(&(v as f32).to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

/// Reads a `features.bin`-layout matrix (used for exported embeddings too).
pub fn read_features_bin(path: &Path) -> Result<Array2<f64>> {
    load_features_bin(path)
}

/// Optional per-node integer times from `times.tsv`; `None` when the file
/// is absent. Every node must be listed when the file exists.
pub fn load_times(dir: &Path, num_nodes: usize) -> Result<Option<Vec<i64>>> {
    let path = dir.join("times.tsv");
    if !path.exists() {
        return Ok(None);
    }
    let mut times = vec![None; num_nodes];
    for (lineno, line) in data_lines(&path)? {
        let mut toks = line.split_whitespace();
        match (toks.next(), toks.next()) {
            (Some(a), Some(b)) => {
                let node = parse_id(a, &path, lineno)? as usize;
                if node >= num_nodes {
                    return Err(Error::data(format!(
                        "{}:{lineno}: node {node} out of range",
                        path.display()
                    )));
                }
                let t = b.parse::<i64>().map_err(|_| {
                    Error::data(format!("{}:{lineno}: non-numeric token '{b}'", path.display()))
                })?;
                times[node] = Some(t);
            }
            _ => {
                return Err(Error::data(format!(
                    "{}:{lineno}: expected 'node<TAB>time'",
                    path.display()
                )))
            }
        }
    }
    let mut out = Vec::with_capacity(num_nodes);
    for (i, t) in times.into_iter().enumerate() {
        out.push(t.ok_or_else(|| Error::data(format!("times.tsv: node {i} missing")))?);
    }
    Ok(Some(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn write_dataset(dir: &Path, edges: &str, labels: &str, features_csv: &str, meta: &str) {
        fs::create_dir_all(dir).unwrap();
        fs::write(dir.join("edges.tsv"), edges).unwrap();
        fs::write(dir.join("labels.tsv"), labels).unwrap();
        fs::write(dir.join("features.csv"), features_csv).unwrap();
        fs::write(dir.join("meta.json"), meta).unwrap();
    }

    #[test]
    fn loads_smallest_graph() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(
            dir.path(),
            "0\t1\n",
            "0\t0\n1\t1\n",
            "1.0,0.0\n0.0,1.0\n",
            r#"{"num_classes": 2, "name": "tiny"}"#,
        );
        let (g, report) = load_graph_with_report(dir.path()).unwrap();
        assert_eq!(g.num_nodes(), 2);
        assert_eq!(g.num_edges(), 1);
        assert_eq!(g.degrees(), &[1, 1]);
        assert_eq!(report.self_loops_dropped, 0);
    }

    #[test]
    fn dedups_reversed_and_duplicate_edges() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(
            dir.path(),
            "# comment\n0 1\n1 0\n0\t1\n1\t1\n",
            "0\t0\n1\t0\n",
            "0.5\n0.25\n",
            r#"{"num_classes": 1, "name": "dup"}"#,
        );
        let (g, report) = load_graph_with_report(dir.path()).unwrap();
        assert_eq!(g.num_edges(), 1);
        assert_eq!(report.duplicate_edges_merged, 2);
        assert_eq!(report.self_loops_dropped, 1);
    }

    #[test]
    fn missing_file_and_row_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("d")).unwrap();
        assert!(load_graph(&dir.path().join("d")).is_err());

        write_dataset(
            dir.path(),
            "0\t1\n",
            "0\t0\n1\t0\n2\t0\n",
            "1.0\n2.0\n",
            r#"{"num_classes": 1, "name": "mismatch"}"#,
        );
        let err = load_graph(dir.path()).unwrap_err().to_string();
        assert!(err.contains("2") && err.contains("3"), "{err}");
    }

    #[test]
    fn non_numeric_token_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(
            dir.path(),
            "0\tx\n",
            "0\t0\n",
            "1.0\n",
            r#"{"num_classes": 1, "name": "bad"}"#,
        );
        assert!(load_graph(dir.path()).is_err());
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(
            dir.path(),
            "0\t1\n1\t2\n",
            "0\t0\n1\t1\n2\t-1\n",
            "0.125,1.5\n-3.75,0.1\n0.0,2.25\n",
            r#"{"num_classes": 2, "name": "rt"}"#,
        );
        let g = load_graph(dir.path()).unwrap();
        let out = dir.path().join("copy");
        save_graph(&g, &out).unwrap();
        let g2 = load_graph(&out).unwrap();
        assert_eq!(g.edge_list(), g2.edge_list());
        assert_eq!(g.labels(), g2.labels());
        assert_eq!(g.features(), g2.features());
        assert_eq!(g.num_classes(), g2.num_classes());

        // second hop must be bit-identical files
        let out2 = dir.path().join("copy2");
        save_graph(&g2, &out2).unwrap();
        for f in ["edges.tsv", "labels.tsv", "features.bin", "meta.json"] {
            assert_eq!(
                fs::read(out.join(f)).unwrap(),
                fs::read(out2.join(f)).unwrap(),
                "file {f} differs"
            );
        }
    }

    #[test]
    fn bin_features_round_trip() {
        let m = array![[0.1f64, 2.0], [3.5, -1.25]];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("features.bin");
        write_features_bin(&m.view(), &p).unwrap();
        let back = read_features_bin(&p).unwrap();
        let expect = m.mapv(|v| v as f32 as f64);
        assert_eq!(back, expect);
    }

    #[test]
    fn times_loading() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(
            dir.path(),
            "0\t1\n",
            "0\t0\n1\t0\n",
            "1.0\n2.0\n",
            r#"{"num_classes": 1, "name": "t"}"#,
        );
        assert!(load_times(dir.path(), 2).unwrap().is_none());
        fs::write(dir.path().join("times.tsv"), "0\t5\n1\t-2\n").unwrap();
        assert_eq!(load_times(dir.path(), 2).unwrap(), Some(vec![5, -2]));
        fs::write(dir.path().join("times.tsv"), "0\t5\n").unwrap();
        assert!(load_times(dir.path(), 2).is_err());
    }
}

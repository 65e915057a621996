//! Dataset files on disk and synthetic graph generation with controllable
//! edge homophily.
//!
//! Text formats: edges are `src<TAB>dst` lines ('#' comments allowed),
//! features are comma-separated rows (row i is node i), labels are one
//! integer per line. A `.bin` feature file is little-endian f32 with a
//! `rows cols` text header line. Parsers reject malformed input rather than
//! repairing it.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::init::class_feature_row;
use crate::matrix::Matrix;
use crate::Prng;

/// Paths for one dataset.
#[derive(Clone, Debug)]
pub struct DatasetOnDisk {
    pub edges_path: PathBuf,
    pub features_path: PathBuf,
    pub labels_path: PathBuf,
    pub undirected: bool,
}

impl DatasetOnDisk {
    /// Conventional layout inside a directory: `edges.tsv`, `labels.txt`,
    /// and `features.csv` (or `features.bin` if only that exists).
    pub fn in_dir(dir: &Path) -> Self {
        let csv = dir.join("features.csv");
        let features_path = if csv.exists() {
            csv
        } else {
            dir.join("features.bin")
        };
        DatasetOnDisk {
            edges_path: dir.join("edges.tsv"),
            features_path,
            labels_path: dir.join("labels.txt"),
            undirected: true,
        }
    }
}

fn parse_error(file: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        line,
        detail: detail.into(),
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))
}

fn parse_edges(path: &Path) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (idx, raw) in read_lines(path)?.iter().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let (src, dst) = match (fields.next(), fields.next(), fields.next()) {
            (Some(s), Some(d), None) => (s, d),
            _ => {
                return Err(parse_error(
                    path,
                    line_no,
                    "expected exactly two tab-separated fields",
                ))
            }
        };
        let src: usize = src
            .trim()
            .parse()
            .map_err(|_| parse_error(path, line_no, format!("bad node index {src:?}")))?;
        let dst: usize = dst
            .trim()
            .parse()
            .map_err(|_| parse_error(path, line_no, format!("bad node index {dst:?}")))?;
        edges.push((src, dst));
    }
    Ok(edges)
}

fn parse_features_text(path: &Path) -> Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (idx, raw) in read_lines(path)?.iter().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_error(path, line_no, format!("bad real {f:?}")))
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(parse_error(
                    path,
                    line_no,
                    format!("ragged row: {} fields, expected {w}", row.len()),
                ))
            }
            _ => {}
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_error(path, 1, "no feature rows"));
    }
    Ok(Matrix::from_rows(&rows))
}

fn parse_features_binary(path: &Path) -> Result<Matrix> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut header = String::new();
    reader
        .read_line(&mut header)
        .map_err(|e| Error::io(path, e))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|f| {
            f.parse::<usize>()
                .map_err(|_| parse_error(path, 1, format!("bad header field {f:?}")))
        })
        .collect::<Result<_>>()?;
    let [rows, cols] = dims[..] else {
        return Err(parse_error(path, 1, "header must be `rows cols`"));
    };
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() != rows * cols * 4 {
        return Err(parse_error(
            path,
            2,
            format!("expected {} payload bytes, got {}", rows * cols * 4, bytes.len()),
        ));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Matrix::from_vec(rows, cols, data))
}

fn parse_labels(path: &Path) -> Result<Vec<usize>> {
    let mut labels = Vec::new();
    for (idx, raw) in read_lines(path)?.iter().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let label: usize = line
            .parse()
            .map_err(|_| parse_error(path, line_no, format!("bad label {line:?}")))?;
        labels.push(label);
    }
    Ok(labels)
}

/// Load a graph from disk; indices are validated, duplicate edges collapse,
/// and input self-loops are dropped (normalization re-adds them).
pub fn load_dataset(spec: &DatasetOnDisk) -> Result<Graph> {
    let features = if spec.features_path.extension().is_some_and(|e| e == "bin") {
        parse_features_binary(&spec.features_path)?
    } else {
        parse_features_text(&spec.features_path)?
    };
    let labels = parse_labels(&spec.labels_path)?;
    if labels.len() != features.rows() {
        return Err(Error::contract(
            "load_dataset",
            format!(
                "{} labels in {} but {} feature rows in {}",
                labels.len(),
                spec.labels_path.display(),
                features.rows(),
                spec.features_path.display()
            ),
        ));
    }
    let edges = parse_edges(&spec.edges_path)?;
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    Graph::new(features, labels, num_classes, &edges, spec.undirected)
}

/// Write the three text files (`edges.tsv`, `features.csv`, `labels.txt`)
/// into `dir`. Floats use the shortest round-trip decimal form, so loading
/// reproduces the graph exactly.
pub fn write_dataset(g: &Graph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, content: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, content).map_err(|e| Error::io(&path, e))
    };
    let mut edges = String::new();
    for (u, v) in g.edges_once() {
        edges.push_str(&format!("{u}\t{v}\n"));
    }
    write("edges.tsv", edges)?;
    let mut features = String::new();
    for i in 0..g.num_nodes() {
        let row: Vec<String> = g.features().row(i).iter().map(|x| x.to_string()).collect();
        features.push_str(&row.join(","));
        features.push('\n');
    }
    write("features.csv", features)?;
    let mut labels = String::new();
    for &y in g.labels() {
        labels.push_str(&format!("{y}\n"));
    }
    write("labels.txt", labels)
}

/// Write features in the binary form (`rows cols` header, f32 LE payload).
pub fn write_features_binary(g: &Graph, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let f = g.features();
    let mut bytes = format!("{} {}\n", f.rows(), f.cols()).into_bytes();
    for &x in f.data() {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Recipe for a synthetic node-classification graph.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Probability that a sampled edge joins same-class endpoints.
    pub edge_homophily: f64,
    pub mean_degree: f64,
    pub feature_noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.edge_homophily) {
            return Err(Error::contract(
                "generate_synthetic",
                format!("edge_homophily {} not in [0,1]", self.edge_homophily),
            ));
        }
        if self.mean_degree < 1.0 {
            return Err(Error::contract("generate_synthetic", "mean_degree must be >= 1"));
        }
        if self.num_classes == 0 || self.feature_dim == 0 {
            return Err(Error::contract("generate_synthetic", "classes and dim must be >= 1"));
        }
        if self.num_nodes < self.num_classes {
            return Err(Error::contract(
                "generate_synthetic",
                "need at least one node per class",
            ));
        }
        Ok(())
    }
}

/// Round-robin labels, per-class Gaussian features, and edges sampled one at
/// a time: pick a node uniformly, then a same-class partner with probability
/// `edge_homophily` (different-class otherwise), rejecting self-loops and
/// duplicates until |V|·k/2 undirected edges exist.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Graph> {
    spec.validate()?;
    let n = spec.num_nodes;
    let c = spec.num_classes;
    let mut rng = Prng::seed_from_u64(spec.seed);

    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let mut class_members: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (node, &y) in labels.iter().enumerate() {
        class_members[y].push(node);
    }

    let mut rows = Vec::with_capacity(n);
    for &y in &labels {
        rows.push(class_feature_row(y, spec.feature_dim, spec.feature_noise, &mut rng));
    }
    let features = Matrix::from_rows(&rows);

    let target = ((n as f64 * spec.mean_degree) / 2.0).round() as usize;
    if target > n * (n - 1) / 2 {
        return Err(Error::contract(
            "generate_synthetic",
            format!("{target} edges exceed the possible pairs of {n} nodes"),
        ));
    }
    // complement pools so the partner draw is uniform within its branch
    let class_others: Vec<Vec<usize>> = (0..c)
        .map(|y| (0..n).filter(|&v| labels[v] != y).collect())
        .collect();

    let mut edge_set = std::collections::BTreeSet::new();
    let mut attempts = 0usize;
    let max_attempts = 200 * target + 1000;
    while edge_set.len() < target {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::contract(
                "generate_synthetic",
                format!(
                    "could not place {target} edges (homophily {}, {} classes)",
                    spec.edge_homophily, c
                ),
            ));
        }
        let u = rng.gen_range(0..n);
        let same_class = rng.gen::<f64>() < spec.edge_homophily;
        let pool = if same_class {
            &class_members[labels[u]]
        } else {
            &class_others[labels[u]]
        };
        if pool.is_empty() {
            continue;
        }
        let v = pool[rng.gen_range(0..pool.len())];
        if v == u {
            continue;
        }
        let key = if u < v { (u, v) } else { (v, u) };
        edge_set.insert(key);
    }
    let edges: Vec<(usize, usize)> = edge_set.into_iter().collect();
    Graph::new(features, labels, c, &edges, true)
}

/// Fraction of edges joining same-label endpoints, each edge counted once.
pub fn measure_homophily(g: &Graph) -> Result<f64> {
    let edges = g.edges_once();
    if edges.is_empty() {
        return Err(Error::contract("measure_homophily", "graph has no edges"));
    }
    let same = edges
        .iter()
        .filter(|&&(u, v)| g.labels()[u] == g.labels()[v])
        .count();
    Ok(same as f64 / edges.len() as f64)
}

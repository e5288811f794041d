//! Dataset bundles on disk, seeded splits and synthetic block-model graphs.
//!
//! A bundle directory holds:
//!
//! * `edges.txt`: one `u v` pair per line, `#` starts a comment;
//! * `features.bin`: `n` and `d` as little-endian `u32`, then `n·d`
//!   little-endian `f32` values, row-major;
//! * `labels.txt`: one class id per line;
//! * `splits.txt` (optional): `node split` per line, split being
//!   `train`, `val` or `test`.

pub mod planetoid;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::matrix::DenseMatrix;

pub const EDGES_FILE: &str = "edges.txt";
pub const FEATURES_FILE: &str = "features.bin";
pub const LABELS_FILE: &str = "labels.txt";
pub const SPLITS_FILE: &str = "splits.txt";

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Checks ids are in range, sets are disjoint and none is empty.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (name, set) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            if set.is_empty() {
                return Err(Error::invalid(format!("{name} split is empty")));
            }
            for &i in set {
                if i >= n {
                    return Err(Error::NodeOutOfRange { id: i, n });
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::invalid(format!("node {i} appears in two splits")));
                }
            }
        }
        Ok(())
    }

    /// Boolean masks `(train, val, test)`.
    pub fn masks(&self, n: usize) -> (Vec<bool>, Vec<bool>, Vec<bool>) {
        let mask = |ids: &[usize]| {
            let mut m = vec![false; n];
            for &i in ids {
                m[i] = true;
            }
            m
        };
        (mask(&self.train), mask(&self.val), mask(&self.test))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub name: String,
    pub graph: Graph,
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub splits: Option<Splits>,
}

/// `(n, |E|, d, classes)`
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BundleStats {
    pub nodes: usize,
    pub edges: usize,
    pub features: usize,
    pub classes: usize,
}

impl Bundle {
    pub fn new(
        name: impl Into<String>,
        graph: Graph,
        features: DenseMatrix,
        labels: Vec<usize>,
        splits: Option<Splits>,
    ) -> Result<Self> {
        let n = graph.n();
        if features.rows() != n || labels.len() != n {
            return Err(Error::shape(
                "bundle",
                format!("{} nodes, {} feature rows, {} labels", n, features.rows(), labels.len()),
            ));
        }
        if let Some(s) = &splits {
            s.validate(n)?;
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Self {
            name: name.into(),
            graph,
            features,
            labels,
            classes,
            splits,
        })
    }

    pub fn stats(&self) -> BundleStats {
        BundleStats {
            nodes: self.graph.n(),
            edges: self.graph.num_edges(),
            features: self.features.cols(),
            classes: self.classes,
        }
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Non-empty, comment-stripped lines with their 1-based numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line = raw.split('#').next().unwrap_or("").trim();
        (!line.is_empty()).then_some((i + 1, line))
    })
}

fn parse_usize(path: &Path, line: usize, tok: &str) -> Result<usize> {
    tok.parse()
        .map_err(|_| parse_err(path, line, format!("expected a non-negative integer, found `{tok}`")))
}

pub fn read_edges(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    let mut edges = Vec::new();
    for (no, line) in content_lines(&text) {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(parse_err(path, no, "expected `u v`"));
        }
        edges.push((parse_usize(path, no, toks[0])?, parse_usize(path, no, toks[1])?));
    }
    Ok(edges)
}

pub fn read_features(path: &Path) -> Result<DenseMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Format(format!(
            "{}: header shorter than 8 bytes",
            path.display()
        )));
    }
    let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let want = n
        .checked_mul(d)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(8))
        .ok_or_else(|| Error::Format(format!("{}: header overflows", path.display())))?;
    if bytes.len() != want {
        return Err(Error::Format(format!(
            "{}: header declares {n}x{d} ({want} bytes), file has {}",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    DenseMatrix::new(n, d, data)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    content_lines(&text)
        .map(|(no, line)| parse_usize(path, no, line))
        .collect()
}

pub fn read_splits(path: &Path, n: usize) -> Result<Splits> {
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    let mut s = Splits::default();
    for (no, line) in content_lines(&text) {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(parse_err(path, no, "expected `node split`"));
        }
        let id = parse_usize(path, no, toks[0])?;
        if id >= n {
            return Err(parse_err(path, no, format!("node {id} out of range for {n} nodes")));
        }
        match toks[1] {
            "train" => s.train.push(id),
            "val" => s.val.push(id),
            "test" => s.test.push(id),
            other => return Err(parse_err(path, no, format!("unknown split `{other}`"))),
        }
    }
    Ok(s)
}

pub fn load_bundle(dir: &Path) -> Result<Bundle> {
    let features = read_features(&dir.join(FEATURES_FILE))?;
    let n = features.rows();
    let labels_path = dir.join(LABELS_FILE);
    let labels = read_labels(&labels_path)?;
    if labels.len() != n {
        return Err(parse_err(
            &labels_path,
            0,
            format!("{} labels for {n} nodes", labels.len()),
        ));
    }
    let graph = Graph::build(&read_edges(&dir.join(EDGES_FILE))?, n)?;
    let splits_path = dir.join(SPLITS_FILE);
    let splits = if splits_path.exists() {
        Some(read_splits(&splits_path, n)?)
    } else {
        None
    };
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Bundle::new(name, graph, features, labels, splits)
}

/// Writes the bundle; features are narrowed to `f32`.
pub fn write_bundle(bundle: &Bundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(fs::File::create(dir.join(EDGES_FILE))?);
    writeln!(w, "# {} undirected edges", bundle.graph.num_edges())?;
    for &(u, v) in bundle.graph.edges() {
        writeln!(w, "{u} {v}")?;
    }
    w.flush()?;

    let f = &bundle.features;
    let too_big = |v: usize| u32::try_from(v).map_err(|_| Error::invalid("dimension exceeds u32"));
    let mut w = BufWriter::new(fs::File::create(dir.join(FEATURES_FILE))?);
    w.write_all(&too_big(f.rows())?.to_le_bytes())?;
    w.write_all(&too_big(f.cols())?.to_le_bytes())?;
    for &v in f.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;

    let mut w = BufWriter::new(fs::File::create(dir.join(LABELS_FILE))?);
    for l in &bundle.labels {
        writeln!(w, "{l}")?;
    }
    w.flush()?;

    let splits_path = dir.join(SPLITS_FILE);
    if let Some(s) = &bundle.splits {
        let mut w = BufWriter::new(fs::File::create(&splits_path)?);
        for (name, ids) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
            for i in ids {
                writeln!(w, "{i} {name}")?;
            }
        }
        w.flush()?;
    } else if splits_path.exists() {
        fs::remove_file(splits_path)?;
    }
    Ok(())
}

/// Seeded split: `per_class` training nodes from every class, `val_size`
/// validation nodes from the rest, everything else for testing.
pub fn make_splits(labels: &[usize], classes: usize, seed: u64, per_class: usize, val_size: usize) -> Result<Splits> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::invalid(format!(
                "label {l} of node {i} exceeds {classes} classes"
            )));
        }
        by_class[l].push(i);
    }
    let mut train = Vec::with_capacity(per_class * classes);
    let mut rest = Vec::new();
    for (c, mut nodes) in by_class.into_iter().enumerate() {
        if nodes.len() < per_class {
            return Err(Error::invalid(format!(
                "class {c} has {} nodes, {per_class} requested for training",
                nodes.len()
            )));
        }
        nodes.shuffle(&mut rng);
        train.extend_from_slice(&nodes[..per_class]);
        rest.extend_from_slice(&nodes[per_class..]);
    }
    rest.sort_unstable();
    rest.shuffle(&mut rng);
    if rest.len() <= val_size {
        return Err(Error::invalid(format!(
            "{} nodes left after training, need more than {val_size} for validation and test",
            rest.len()
        )));
    }
    let mut val = rest[..val_size].to_vec();
    let mut test = rest[val_size..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Splits { train, val, test })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SbmSpec {
    pub seed: u64,
    pub blocks: usize,
    pub n: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    /// Distance between class means, in units of the feature noise.
    pub separation: f64,
}

/// Stochastic block model with Gaussian class-conditional features.
///
/// Node `i` belongs to block `i mod blocks`. Class means are random
/// directions scaled to norm `separation / 2` (so two means are about
/// `separation` apart); features add unit Gaussian noise and are rounded
/// to `f32`, so the bundle survives a disk round trip unchanged.
pub fn generate_sbm(spec: &SbmSpec) -> Result<Bundle> {
    let SbmSpec {
        seed,
        blocks,
        n,
        p_in,
        p_out,
        feature_dim,
        separation,
    } = *spec;
    if !(0.0..=1.0).contains(&p_in) || !(0.0..=1.0).contains(&p_out) || p_in <= p_out {
        return Err(Error::invalid(format!(
            "block probabilities need 0 <= p_out < p_in <= 1, got p_in={p_in} p_out={p_out}"
        )));
    }
    if blocks == 0 || n < blocks || feature_dim == 0 {
        return Err(Error::invalid("need at least one node per block and one feature"));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::invalid("separation must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % blocks).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if labels[i] == labels[j] { p_in } else { p_out };
            if rng.gen::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let means: Vec<Vec<f64>> = (0..blocks)
        .map(|_| {
            let v: Vec<f64> = (0..feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm * separation / 2.0).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(n * feature_dim);
    for &l in &labels {
        for mean in &means[l] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push((mean + noise) as f32 as f64);
        }
    }
    let graph = Graph::build(&edges, n)?;
    let features = DenseMatrix::new(n, feature_dim, data)?;
    Bundle::new(format!("sbm-{seed}"), graph, features, labels, None)
}

/// `$QGNN_DATA_DIR/<name>`, or `<name>` itself when the variable is unset.
pub fn dataset_path(name: &str) -> PathBuf {
    match std::env::var_os("QGNN_DATA_DIR") {
        Some(root) => PathBuf::from(root).join(name),
        None => PathBuf::from(name),
    }
}

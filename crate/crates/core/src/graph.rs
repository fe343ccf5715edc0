//! Text-attributed graph data: topology, node texts and labels, embeddings,
//! plus the BFS and normalized-adjacency primitives the rest of the crate
//! builds on.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

/// Undirected simple graph over nodes `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from arbitrary (possibly directed, duplicated) pairs.
    /// Pairs are symmetrized and deduplicated; self-loops are dropped.
    pub fn from_edges<I>(n: usize, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut set = BTreeSet::new();
        for (u, v) in pairs {
            if u >= n || v >= n {
                return Err(Error::Invalid(format!(
                    "edge ({u}, {v}) references a node outside 0..{n}"
                )));
            }
            if u == v {
                continue;
            }
            set.insert((u.min(v), u.max(v)));
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut adjacency = vec![Vec::new(); n];
        for &(u, v) in &edges {
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Ok(Graph {
            n,
            edges,
            adjacency,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Edges as `(u, v)` with `u < v`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    /// Hop counts from `core`; `None` marks nodes outside its component.
    pub fn hop_distances(&self, core: usize) -> Result<Vec<Option<usize>>> {
        if core >= self.n {
            return Err(Error::Invalid(format!(
                "core {core} out of range for graph with {} nodes",
                self.n
            )));
        }
        let mut dist = vec![None; self.n];
        dist[core] = Some(0);
        let mut queue = VecDeque::from([core]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or_default();
            for &v in &self.adjacency[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        Ok(dist)
    }

    /// Fraction of edges joining same-label endpoints.
    pub fn homophily(&self, labels: &[usize]) -> f64 {
        if self.edges.is_empty() {
            return 0.0;
        }
        let same = self
            .edges
            .iter()
            .filter(|&&(u, v)| labels[u] == labels[v])
            .count();
        same as f64 / self.edges.len() as f64
    }
}

/// Reads an edge list: `u v` per line, `#` comments, optional `n <count>` header.
pub fn load_edge_list(path: &Path) -> Result<Graph> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut declared_n = None;
    let mut pairs = Vec::new();
    let mut max_index = None::<usize>;
    let mut seen_content = false;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !seen_content && fields.len() == 2 && fields[0] == "n" {
            let n = fields[1]
                .parse::<usize>()
                .map_err(|e| Error::parse(path, lineno, format!("bad node count: {e}")))?;
            declared_n = Some(n);
            seen_content = true;
            continue;
        }
        seen_content = true;
        if fields.len() != 2 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected two node indices, found {} fields", fields.len()),
            ));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::parse(path, lineno, format!("bad node index {s:?}: {e}")))
        };
        let (u, v) = (parse(fields[0])?, parse(fields[1])?);
        if u == v {
            warn!("{}:{lineno}: skipping self-loop on node {u}", path.display());
        }
        max_index = Some(max_index.map_or(u.max(v), |m| m.max(u).max(v)));
        pairs.push((u, v));
    }

    let n = match (declared_n, max_index) {
        (Some(n), Some(m)) if m >= n => {
            return Err(Error::Invalid(format!(
                "{}: header declares {n} nodes but index {m} appears",
                path.display()
            )))
        }
        (Some(n), _) => n,
        (None, Some(m)) => m + 1,
        (None, None) => {
            return Err(Error::Invalid(format!("{}: empty edge list", path.display())))
        }
    };
    Graph::from_edges(n, pairs)
}

pub fn save_edge_list(graph: &Graph, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "n {}", graph.n())?;
        for &(u, v) in graph.edges() {
            writeln!(w, "{u} {v}")?;
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

fn fold_name(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Per-node texts and labels with the class vocabulary.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NodeTable {
    pub texts: Option<Vec<String>>,
    pub labels: Option<Vec<usize>>,
    pub class_names: Vec<String>,
}

impl NodeTable {
    pub fn new(
        texts: Option<Vec<String>>,
        labels: Option<Vec<usize>>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        validate_class_names(&class_names)?;
        if let Some(labels) = &labels {
            if let Some(bad) = labels.iter().find(|&&l| l >= class_names.len()) {
                return Err(Error::Invalid(format!(
                    "label {bad} out of range for {} classes",
                    class_names.len()
                )));
            }
        }
        if let (Some(t), Some(l)) = (&texts, &labels) {
            if t.len() != l.len() {
                return Err(Error::Invalid(format!(
                    "{} texts but {} labels",
                    t.len(),
                    l.len()
                )));
            }
        }
        Ok(NodeTable {
            texts,
            labels,
            class_names,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Case-insensitive lookup of a class name.
    pub fn class_index(&self, name: &str) -> Option<usize> {
        let key = fold_name(name);
        self.class_names.iter().position(|c| fold_name(c) == key)
    }
}

pub fn validate_class_names(class_names: &[String]) -> Result<()> {
    if class_names.is_empty() {
        return Err(Error::Invalid("class list is empty".into()));
    }
    let mut seen = BTreeSet::new();
    for name in class_names {
        let key = fold_name(name);
        if key.is_empty() {
            return Err(Error::Invalid("blank class name".into()));
        }
        if !seen.insert(key) {
            return Err(Error::Invalid(format!("duplicate class name {name:?}")));
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeRecord {
    id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

/// Loads a JSONL node table; label strings resolve case-insensitively.
pub fn load_node_table(path: &Path, class_names: &[String]) -> Result<NodeTable> {
    validate_class_names(class_names)?;
    let records: Vec<NodeRecord> = jsonl::read(path)?;
    let lookup = NodeTable {
        class_names: class_names.to_vec(),
        ..Default::default()
    };

    let any_text = records.iter().any(|r| r.text.is_some());
    let labeled = records.iter().filter(|r| r.label.is_some()).count();
    if labeled != 0 && labeled != records.len() {
        return Err(Error::Invalid(format!(
            "{}: only {labeled} of {} records carry a label",
            path.display(),
            records.len()
        )));
    }

    let mut texts = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for (expected, rec) in records.into_iter().enumerate() {
        if rec.id != expected {
            return Err(Error::Invalid(format!(
                "{}: record {expected} has id {} (ids must run 0..n without gaps)",
                path.display(),
                rec.id
            )));
        }
        if let Some(name) = &rec.label {
            let idx = lookup.class_index(name).ok_or_else(|| {
                Error::Invalid(format!(
                    "{}: record {}: unknown class {name:?}",
                    path.display(),
                    rec.id
                ))
            })?;
            labels.push(idx);
        }
        texts.push(rec.text.unwrap_or_default());
    }

    NodeTable::new(
        any_text.then_some(texts),
        (labeled > 0).then_some(labels),
        class_names.to_vec(),
    )
}

pub fn save_node_table(table: &NodeTable, n: usize, path: &Path) -> Result<()> {
    let records: Vec<NodeRecord> = (0..n)
        .map(|id| NodeRecord {
            id,
            text: table.texts.as_ref().map(|t| t[id].clone()),
            label: table
                .labels
                .as_ref()
                .map(|l| table.class_names[l[id]].clone()),
        })
        .collect();
    jsonl::write(path, &records)
}

/// Dense `n x d` node features, all finite.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(Array2<f64>);

impl EmbeddingMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if let Some(((r, c), v)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "non-finite embedding value {v} at row {r}, column {c}"
            )));
        }
        Ok(EmbeddingMatrix(data))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Reads the `n d` header + rows text format.
pub fn load_matrix(path: &Path) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());

    let (hline, header) = lines
        .next()
        .ok_or_else(|| Error::Invalid(format!("{}: empty matrix file", path.display())))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|e| Error::parse(path, hline + 1, format!("bad header: {e}")))?;
    let [rows, cols] = dims[..] else {
        return Err(Error::parse(path, hline + 1, "header must be \"<rows> <cols>\""));
    };

    let mut data = Vec::with_capacity(rows * cols);
    let mut seen_rows = 0;
    for (idx, line) in lines {
        let lineno = idx + 1;
        seen_rows += 1;
        if seen_rows > rows {
            continue;
        }
        let before = data.len();
        for (col, tok) in line.split_whitespace().enumerate() {
            let v: f64 = tok
                .parse()
                .map_err(|e| Error::parse(path, lineno, format!("column {}: {e}", col + 1)))?;
            if !v.is_finite() {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("non-finite value {tok:?} at row {seen_rows}, column {}", col + 1),
                ));
            }
            data.push(v);
        }
        let got = data.len() - before;
        if got != cols {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected {cols} columns, found {got}"),
            ));
        }
    }
    if seen_rows != rows {
        return Err(Error::Shape(format!(
            "{}: header declares {rows} rows, found {seen_rows}",
            path.display()
        )));
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Shape(e.to_string()))
}

pub fn save_matrix(m: &Array2<f64>, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "{} {}", m.nrows(), m.ncols())?;
        for row in m.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::new(load_matrix(path)?)
}

pub fn save_embeddings(x: &EmbeddingMatrix, path: &Path) -> Result<()> {
    save_matrix(x.data(), path)
}

/// `D^-1/2 (A + I) D^-1/2` in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn new(graph: &Graph) -> Self {
        let n = graph.n();
        let inv_sqrt: Vec<f64> = (0..n)
            .map(|i| 1.0 / ((graph.degree(i) + 1) as f64).sqrt())
            .collect();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::with_capacity(n + 2 * graph.edge_count());
        let mut vals = Vec::with_capacity(cols.capacity());
        row_ptr.push(0);
        for i in 0..n {
            let nbrs = graph.neighbors(i);
            let split = nbrs.partition_point(|&j| j < i);
            let ordered = nbrs[..split]
                .iter()
                .chain(std::iter::once(&i))
                .chain(&nbrs[split..]);
            for &j in ordered {
                cols.push(j);
                vals.push(inv_sqrt[i] * inv_sqrt[j]);
            }
            row_ptr.push(cols.len());
        }
        NormalizedAdjacency {
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn n(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()]
            .iter()
            .copied()
            .zip(self.vals[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[span.clone()].binary_search(&j) {
            Ok(k) => self.vals[span.start + k],
            Err(_) => 0.0,
        }
    }

    /// `Â · m` for a dense right-hand side.
    pub fn matmul(&self, m: &Array2<f64>) -> Result<Array2<f64>> {
        if m.nrows() != self.n() {
            return Err(Error::Shape(format!(
                "adjacency is {n}x{n} but right-hand side has {} rows",
                m.nrows(),
                n = self.n()
            )));
        }
        let mut out = Array2::zeros((self.n(), m.ncols()));
        for (i, mut out_row) in out.rows_mut().into_iter().enumerate() {
            for (j, a) in self.row(i) {
                out_row.scaled_add(a, &m.row(j));
            }
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.n();
        let mut out = Array2::zeros((n, n));
        for i in 0..n {
            for (j, a) in self.row(i) {
                out[[i, j]] = a;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use tempfile::NamedTempFile;

    fn file_with(contents: &str) -> NamedTempFile {
        let mut f = NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn edge_list_basic() {
        let f = file_with("0 1\n1 2");
        let g = load_edge_list(f.path()).unwrap();
        assert_eq!(g.n(), 3);
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn edge_list_dedups_reversed_pairs() {
        let f = file_with("0 1\n1 0\n0 1\n");
        let g = load_edge_list(f.path()).unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(1), &[0]);
    }

    #[test]
    fn edge_list_skips_self_loops() {
        let f = file_with("2 2\n");
        let g = load_edge_list(f.path()).unwrap();
        assert_eq!(g.n(), 3);
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn edge_list_header_and_comments() {
        let f = file_with("# toy\nn 5\n0 1\n# more\n3 4\n");
        let g = load_edge_list(f.path()).unwrap();
        assert_eq!(g.n(), 5);
        assert_eq!(g.edge_count(), 2);
    }

    #[test]
    fn edge_list_errors() {
        let f = file_with("0 1\n1 x\n");
        match load_edge_list(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let f = file_with("0 1 2\n");
        assert!(matches!(load_edge_list(f.path()), Err(Error::Parse { line: 1, .. })));
        let f = file_with("");
        assert!(load_edge_list(f.path()).is_err());
        let f = file_with("n 2\n0 5\n");
        assert!(load_edge_list(f.path()).is_err());
    }

    fn classes(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn node_table_resolves_labels() {
        let f = file_with(
            "{\"id\":0,\"text\":\"a\",\"label\":\"A\"}\n{\"id\":1,\"text\":\"b\",\"label\":\"a\"}\n{\"id\":2,\"label\":\"B\"}\n",
        );
        let t = load_node_table(f.path(), &classes(&["A", "B"])).unwrap();
        assert_eq!(t.labels, Some(vec![0, 0, 1]));
        assert_eq!(t.texts.as_ref().unwrap()[2], "");
    }

    #[test]
    fn node_table_unknown_class() {
        let f = file_with("{\"id\":0,\"label\":\"Z\"}\n");
        let err = load_node_table(f.path(), &classes(&["A", "B"])).unwrap_err();
        assert!(err.to_string().contains("unknown class"), "{err}");
    }

    #[test]
    fn node_table_id_gap() {
        let f = file_with("{\"id\":0}\n{\"id\":2}\n");
        assert!(load_node_table(f.path(), &classes(&["A"])).is_err());
    }

    #[test]
    fn class_names_must_be_distinct_after_folding() {
        assert!(validate_class_names(&classes(&["Databases", " databases "])).is_err());
        assert!(validate_class_names(&classes(&["A", "B"])).is_ok());
    }

    #[test]
    fn embeddings_read() {
        let f = file_with("2 2\n0 1\n1 0\n");
        let x = load_embeddings(f.path()).unwrap();
        assert_eq!(x.data(), &array![[0.0, 1.0], [1.0, 0.0]]);
    }

    #[test]
    fn embeddings_row_count_mismatch() {
        let f = file_with("3 2\n0 1\n1 0\n");
        let err = load_embeddings(f.path()).unwrap_err();
        assert!(err.to_string().contains("3 rows"), "{err}");
        let f = file_with("2 2\n0 1\n1\n");
        assert!(load_embeddings(f.path()).is_err());
    }

    #[test]
    fn embeddings_reject_non_finite() {
        for bad in ["nan", "inf", "-inf", "NaN"] {
            let f = file_with(&format!("2 2\n0 1\n1 {bad}\n"));
            assert!(load_embeddings(f.path()).is_err(), "{bad} accepted");
        }
    }

    #[test]
    fn hop_distances_cases() {
        let tri = Graph::from_edges(3, [(0, 1), (1, 2), (2, 0)]).unwrap();
        assert_eq!(tri.hop_distances(0).unwrap(), vec![Some(0), Some(1), Some(1)]);

        let path = Graph::from_edges(4, [(0, 1), (1, 2), (2, 3)]).unwrap();
        assert_eq!(
            path.hop_distances(0).unwrap(),
            vec![Some(0), Some(1), Some(2), Some(3)]
        );

        let iso = Graph::from_edges(4, [(0, 1), (1, 2)]).unwrap();
        assert_eq!(iso.hop_distances(0).unwrap()[3], None);
        assert!(iso.hop_distances(4).is_err());
    }

    #[test]
    fn normalized_adjacency_small_cases() {
        let single = Graph::from_edges(1, []).unwrap();
        assert_eq!(NormalizedAdjacency::new(&single).to_dense(), array![[1.0]]);

        let pair = Graph::from_edges(2, [(0, 1)]).unwrap();
        let a = NormalizedAdjacency::new(&pair).to_dense();
        for v in a.iter() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    fn arb_graph() -> impl Strategy<Value = Graph> {
        (1usize..25).prop_flat_map(|n| {
            proptest::collection::vec((0..n, 0..n), 0..60)
                .prop_map(move |pairs| Graph::from_edges(n, pairs).unwrap())
        })
    }

    proptest! {
        #[test]
        fn graph_invariants(g in arb_graph()) {
            for i in 0..g.n() {
                let nb = g.neighbors(i);
                prop_assert!(nb.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(!nb.contains(&i));
            }
            for &(u, v) in g.edges() {
                prop_assert!(u < v && v < g.n());
            }
        }

        #[test]
        fn bfs_edges_differ_by_at_most_one(g in arb_graph(), seed in 0usize..1000) {
            let core = seed % g.n();
            let d = g.hop_distances(core).unwrap();
            for &(u, v) in g.edges() {
                if let (Some(a), Some(b)) = (d[u], d[v]) {
                    prop_assert!(a.abs_diff(b) <= 1);
                }
            }
        }

        #[test]
        fn adjacency_symmetric_with_self_loop_pattern(g in arb_graph()) {
            let a = NormalizedAdjacency::new(&g).to_dense();
            for i in 0..g.n() {
                for j in 0..g.n() {
                    prop_assert_eq!(a[[i, j]], a[[j, i]]);
                    let linked = i == j || g.neighbors(i).binary_search(&j).is_ok();
                    if linked {
                        prop_assert!(a[[i, j]] > 0.0 && a[[i, j]] <= 1.0);
                    } else {
                        prop_assert_eq!(a[[i, j]], 0.0);
                    }
                }
            }
        }

        #[test]
        fn matrix_round_trip(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1e6..1e6) * rng.random::<f64>());
            let f = NamedTempFile::new().unwrap();
            save_matrix(&m, f.path()).unwrap();
            prop_assert_eq!(load_matrix(f.path()).unwrap(), m);
        }
    }
}

//! Directory-based dataset format.
//!
//! ```text
//! meta.json   {"task": "node"|"graph", "num_classes": K, "feature_dim": D}
//! nodes.csv   graph_id,node_id,f_1,...,f_D
//! edges.csv   graph_id,src,dst          (one row per directed edge)
//! labels.csv  node_id,label | graph_id,label
//! ```
//!
//! No header rows; lines starting with `#` are comments. Node ids are local
//! to their graph and must cover `0..n` exactly once.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Graph, GraphError, Labels};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: invalid meta.json: {message}")]
    Meta { path: PathBuf, message: String },
    #[error("{file} line {line}: {message}")]
    Row { file: String, line: u64, message: String },
    #[error("{file}: {message}")]
    Inconsistent { file: String, message: String },
    #[error("graph {graph_id}: {source}")]
    Graph { graph_id: u64, source: GraphError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Node,
    Graph,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub task: Task,
    pub num_classes: usize,
    pub feature_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S> {
    pub meta: DatasetMeta,
    pub graphs: Vec<Graph<S>>,
}

impl<S: Scalar> Dataset<S> {
    /// Wraps one node-labelled graph as a node-classification dataset.
    pub fn node_task(graph: Graph<S>, num_classes: usize) -> Self {
        Self {
            meta: DatasetMeta {
                task: Task::Node,
                num_classes,
                feature_dim: graph.feature_dim(),
            },
            graphs: vec![graph],
        }
    }

    pub fn task(&self) -> Task {
        self.meta.task
    }

    /// Node labels of a node task, or per-graph labels of a graph task.
    pub fn labels(&self) -> Vec<usize> {
        match self.meta.task {
            Task::Node => self.graphs[0].node_labels().map(<[_]>::to_vec).unwrap_or_default(),
            Task::Graph => self.graphs.iter().filter_map(Graph::graph_label).collect(),
        }
    }

    pub fn map_graphs(&self, f: impl Fn(&Graph<S>) -> Result<Graph<S>, GraphError>) -> Result<Self, GraphError> {
        Ok(Self {
            meta: self.meta.clone(),
            graphs: self.graphs.iter().map(f).collect::<Result<_, _>>()?,
        })
    }
}

struct Row {
    line: u64,
    fields: Vec<String>,
}

fn read_rows(dir: &Path, file: &str) -> Result<Vec<Row>, DatasetError> {
    let path = dir.join(file);
    let text = fs::read_to_string(&path).map_err(|source| DatasetError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
        .map(|(i, l)| Row {
            line: i as u64 + 1,
            fields: l.split(',').map(|f| f.trim().to_owned()).collect(),
        })
        .collect())
}

fn field<T: std::str::FromStr>(file: &str, row: &Row, col: usize) -> Result<T, DatasetError> {
    let raw = &row.fields[col];
    raw.parse().map_err(|_| DatasetError::Row {
        file: file.into(),
        line: row.line,
        message: format!("column {} value {raw:?} is not valid", col + 1),
    })
}

fn expect_width(file: &str, row: &Row, width: usize) -> Result<(), DatasetError> {
    if row.fields.len() == width {
        Ok(())
    } else {
        Err(DatasetError::Row {
            file: file.into(),
            line: row.line,
            message: format!("expected {width} fields, found {}", row.fields.len()),
        })
    }
}

#[derive(Default)]
struct GraphParts {
    nodes: BTreeMap<usize, Vec<f64>>,
    edges: Vec<(usize, usize)>,
    node_labels: BTreeMap<usize, usize>,
    graph_label: Option<usize>,
}

pub fn load_dataset<S: Scalar>(dir: impl AsRef<Path>) -> Result<Dataset<S>, DatasetError> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|source| DatasetError::Io {
        path: meta_path.clone(),
        source,
    })?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text).map_err(|e| DatasetError::Meta {
        path: meta_path.clone(),
        message: e.to_string(),
    })?;
    if meta.num_classes == 0 {
        return Err(DatasetError::Meta {
            path: meta_path,
            message: "num_classes must be positive".into(),
        });
    }

    let mut parts: BTreeMap<u64, GraphParts> = BTreeMap::new();
    for row in read_rows(dir, "nodes.csv")? {
        expect_width("nodes.csv", &row, 2 + meta.feature_dim)?;
        let gid: u64 = field("nodes.csv", &row, 0)?;
        let nid: usize = field("nodes.csv", &row, 1)?;
        let feats = (0..meta.feature_dim)
            .map(|k| field::<f64>("nodes.csv", &row, 2 + k))
            .collect::<Result<Vec<_>, _>>()?;
        if parts.entry(gid).or_default().nodes.insert(nid, feats).is_some() {
            return Err(DatasetError::Row {
                file: "nodes.csv".into(),
                line: row.line,
                message: format!("duplicate node {nid} in graph {gid}"),
            });
        }
    }
    if parts.is_empty() {
        return Err(DatasetError::Inconsistent {
            file: "nodes.csv".into(),
            message: "no nodes".into(),
        });
    }
    if meta.task == Task::Node && parts.len() != 1 {
        return Err(DatasetError::Inconsistent {
            file: "nodes.csv".into(),
            message: format!("node task expects one graph, found {}", parts.len()),
        });
    }
    let node_gid = *parts.keys().next().expect("non-empty");

    for row in read_rows(dir, "edges.csv")? {
        expect_width("edges.csv", &row, 3)?;
        let gid: u64 = field("edges.csv", &row, 0)?;
        let src: usize = field("edges.csv", &row, 1)?;
        let dst: usize = field("edges.csv", &row, 2)?;
        let Some(p) = parts.get_mut(&gid) else {
            return Err(DatasetError::Row {
                file: "edges.csv".into(),
                line: row.line,
                message: format!("unknown graph {gid}"),
            });
        };
        p.edges.push((src, dst));
    }

    for row in read_rows(dir, "labels.csv")? {
        expect_width("labels.csv", &row, 2)?;
        let id: u64 = field("labels.csv", &row, 0)?;
        let label: usize = field("labels.csv", &row, 1)?;
        let bad = |message: String| DatasetError::Row {
            file: "labels.csv".into(),
            line: row.line,
            message,
        };
        if label >= meta.num_classes {
            return Err(bad(format!("label {label} >= num_classes {}", meta.num_classes)));
        }
        let duplicate = match meta.task {
            Task::Node => parts
                .get_mut(&node_gid)
                .expect("node graph")
                .node_labels
                .insert(id as usize, label)
                .is_some(),
            Task::Graph => match parts.get_mut(&id) {
                Some(p) => p.graph_label.replace(label).is_some(),
                None => return Err(bad(format!("unknown graph {id}"))),
            },
        };
        if duplicate {
            return Err(bad(format!("duplicate label for {id}")));
        }
    }

    let mut graphs = Vec::with_capacity(parts.len());
    for (gid, p) in parts {
        let n = p.nodes.len();
        if p.nodes.keys().copied().ne(0..n) {
            return Err(DatasetError::Inconsistent {
                file: "nodes.csv".into(),
                message: format!("graph {gid}: node ids are not 0..{n}"),
            });
        }
        let data: Vec<S> = p.nodes.values().flatten().map(|&x| S::lit(x)).collect();
        let features = Tensor::new(n, meta.feature_dim, data).expect("row widths checked");
        let labels = match meta.task {
            Task::Node => {
                if p.node_labels.len() != n || p.node_labels.keys().copied().ne(0..n) {
                    return Err(DatasetError::Inconsistent {
                        file: "labels.csv".into(),
                        message: format!("expected one label for each of {n} nodes"),
                    });
                }
                Labels::Node(p.node_labels.into_values().collect())
            }
            Task::Graph => match p.graph_label {
                Some(y) => Labels::Graph(y),
                None => {
                    return Err(DatasetError::Inconsistent {
                        file: "labels.csv".into(),
                        message: format!("graph {gid} has no label"),
                    })
                }
            },
        };
        let g = Graph::build(n, &p.edges, features, labels)
            .map_err(|source| DatasetError::Graph { graph_id: gid, source })?;
        graphs.push(g);
    }
    Ok(Dataset { meta, graphs })
}

fn write_file(path: PathBuf, contents: &[u8]) -> Result<(), DatasetError> {
    let mut f = fs::File::create(&path).map_err(|source| DatasetError::Io {
        path: path.clone(),
        source,
    })?;
    f.write_all(contents)
        .map_err(|source| DatasetError::Io { path, source })
}

/// Writes `dataset` in the directory layout read by [`load_dataset`].
/// Self-loops stored in the graphs are written as ordinary edges.
pub fn save_dataset<S: Scalar>(dataset: &Dataset<S>, dir: impl AsRef<Path>) -> Result<(), DatasetError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let meta = serde_json::to_string_pretty(&dataset.meta).expect("meta serializes");
    write_file(dir.join("meta.json"), format!("{meta}\n").as_bytes())?;

    let (mut nodes, mut edges, mut labels) = (String::new(), String::new(), String::new());
    for (gid, g) in dataset.graphs.iter().enumerate() {
        for i in 0..g.num_nodes() {
            nodes.push_str(&format!("{gid},{i}"));
            for &x in g.features().row_slice(i) {
                nodes.push_str(&format!(",{}", x.to_f64_lossy()));
            }
            nodes.push('\n');
        }
        for (s, d) in g.edges() {
            edges.push_str(&format!("{gid},{s},{d}\n"));
        }
        match g.labels() {
            Labels::Node(l) => {
                for (i, y) in l.iter().enumerate() {
                    labels.push_str(&format!("{i},{y}\n"));
                }
            }
            Labels::Graph(y) => labels.push_str(&format!("{gid},{y}\n")),
            Labels::None => {}
        }
    }
    write_file(dir.join("nodes.csv"), nodes.as_bytes())?;
    write_file(dir.join("edges.csv"), edges.as_bytes())?;
    write_file(dir.join("labels.csv"), labels.as_bytes())
}

//! Static directed road-graph topology and its CSV form.
//!
//! Edge CSV header: `tail,head,distance_km[,freeflow_kmh,shockwave_kmh]`.
//! The per-edge model attribute is the distance divided by the largest
//! distance in the file, so it always lies in `[0, 1]`.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub tail: usize,
    pub head: usize,
}

/// Per-edge propagation speeds, km/h.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSpeeds {
    pub freeflow_kmh: Vec<f64>,
    pub shockwave_kmh: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectedGraph {
    num_nodes: usize,
    edges: Vec<Edge>,
    edge_attr: Tensor2,
    distance_km: Option<Vec<f64>>,
    speeds: Option<EdgeSpeeds>,
}

impl DirectedGraph {
    /// A graph whose only edge attribute is the normalized distance.
    pub fn from_distances(num_nodes: usize, edges: Vec<Edge>, distance_km: Vec<f64>) -> Result<Self> {
        if distance_km.len() != edges.len() {
            return Err(Error::Contract(format!(
                "{} distances for {} edges",
                distance_km.len(),
                edges.len()
            )));
        }
        if let Some(bad) = distance_km.iter().position(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::Data(format!(
                "edge {bad} has non-positive distance {}",
                distance_km[bad]
            )));
        }
        let max = distance_km.iter().copied().fold(0.0, f64::max);
        let attr: Vec<f64> = distance_km.iter().map(|d| d / max).collect();
        let edge_attr = Tensor2::from_vec(edges.len(), 1, attr)?;
        let mut g = Self::with_edge_attr(num_nodes, edges, edge_attr)?;
        g.distance_km = Some(distance_km);
        Ok(g)
    }

    /// A graph with caller-supplied edge attributes (one row per edge).
    pub fn with_edge_attr(num_nodes: usize, edges: Vec<Edge>, edge_attr: Tensor2) -> Result<Self> {
        if edge_attr.rows() != edges.len() {
            return Err(Error::Contract(format!(
                "{} attribute rows for {} edges",
                edge_attr.rows(),
                edges.len()
            )));
        }
        let mut seen = HashSet::with_capacity(edges.len());
        for (k, e) in edges.iter().enumerate() {
            if e.tail >= num_nodes || e.head >= num_nodes {
                return Err(Error::Data(format!(
                    "edge {k} ({} -> {}) references a node outside 0..{num_nodes}",
                    e.tail, e.head
                )));
            }
            if !seen.insert(*e) {
                return Err(Error::Data(format!(
                    "edge {k} duplicates ({} -> {})",
                    e.tail, e.head
                )));
            }
        }
        Ok(Self {
            num_nodes,
            edges,
            edge_attr,
            distance_km: None,
            speeds: None,
        })
    }

    pub fn with_speeds(mut self, speeds: EdgeSpeeds) -> Result<Self> {
        let n = self.edges.len();
        if speeds.freeflow_kmh.len() != n || speeds.shockwave_kmh.len() != n {
            return Err(Error::Contract("speed columns must have one entry per edge".into()));
        }
        self.speeds = Some(speeds);
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge_attr(&self) -> &Tensor2 {
        &self.edge_attr
    }

    pub fn attr_dim(&self) -> usize {
        self.edge_attr.cols()
    }

    pub fn distance_km(&self) -> Option<&[f64]> {
        self.distance_km.as_deref()
    }

    pub fn speeds(&self) -> Option<&EdgeSpeeds> {
        self.speeds.as_ref()
    }

    /// Ids of edges whose head is `node`, ascending.
    pub fn incoming(&self, node: usize) -> Vec<usize> {
        (0..self.edges.len())
            .filter(|&k| self.edges[k].head == node)
            .collect()
    }

    /// Ids of edges whose tail is `node`, ascending.
    pub fn outgoing(&self, node: usize) -> Vec<usize> {
        (0..self.edges.len())
            .filter(|&k| self.edges[k].tail == node)
            .collect()
    }

    /// Induced subgraph on `nodes` (global ids, any order). Local node `j` is
    /// `nodes[j]`; surviving edges keep their relative order.
    pub fn induced(&self, nodes: &[usize]) -> Result<(Self, Vec<usize>)> {
        let mut local = vec![usize::MAX; self.num_nodes];
        for (j, &g) in nodes.iter().enumerate() {
            local[g] = j;
        }
        let mut edges = Vec::new();
        let mut kept = Vec::new();
        for (k, e) in self.edges.iter().enumerate() {
            if local[e.tail] != usize::MAX && local[e.head] != usize::MAX {
                edges.push(Edge {
                    tail: local[e.tail],
                    head: local[e.head],
                });
                kept.push(k);
            }
        }
        let cols = self.edge_attr.cols();
        let mut attr = Tensor2::zeros(kept.len(), cols);
        for (j, &k) in kept.iter().enumerate() {
            attr.row_mut(j).copy_from_slice(self.edge_attr.row(k));
        }
        let mut g = Self::with_edge_attr(nodes.len(), edges, attr)?;
        g.distance_km = self
            .distance_km
            .as_ref()
            .map(|d| kept.iter().map(|&k| d[k]).collect());
        g.speeds = self.speeds.as_ref().map(|s| EdgeSpeeds {
            freeflow_kmh: kept.iter().map(|&k| s.freeflow_kmh[k]).collect(),
            shockwave_kmh: kept.iter().map(|&k| s.shockwave_kmh[k]).collect(),
        });
        Ok((g, kept))
    }

    /// Relabels node `i` as `perm[i]`. Edge order is unchanged.
    pub fn relabeled(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_nodes {
            return Err(Error::Contract("permutation length differs from node count".into()));
        }
        let edges = self
            .edges
            .iter()
            .map(|e| Edge {
                tail: perm[e.tail],
                head: perm[e.head],
            })
            .collect();
        let mut g = Self::with_edge_attr(self.num_nodes, edges, self.edge_attr.clone())?;
        g.distance_km = self.distance_km.clone();
        g.speeds = self.speeds.clone();
        Ok(g)
    }
}

/// Reads an edge CSV. With `num_nodes = None` the node count is inferred as
/// one past the largest index mentioned.
pub fn read_graph<R: Read>(reader: R, source_name: &str, num_nodes: Option<usize>) -> Result<DirectedGraph> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let with_speeds = match header.as_slice() {
        [t, h, d] if t == "tail" && h == "head" && d == "distance_km" => false,
        [t, h, d, f, w]
            if t == "tail"
                && h == "head"
                && d == "distance_km"
                && f == "freeflow_kmh"
                && w == "shockwave_kmh" =>
        {
            true
        }
        _ => {
            return Err(Error::ingestion(
                source_name,
                0,
                None,
                format!(
                    "expected header `tail,head,distance_km[,freeflow_kmh,shockwave_kmh]`, got `{}`",
                    header.join(",")
                ),
            ))
        }
    };

    let mut edges = Vec::new();
    let mut dist = Vec::new();
    let mut freeflow = Vec::new();
    let mut shockwave = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::ingestion(source_name, row, None, e.to_string()))?;
        if rec.len() != header.len() {
            return Err(Error::ingestion(
                source_name,
                row,
                None,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        let idx = |c: usize| -> Result<usize> {
            rec[c].parse::<usize>().map_err(|_| {
                Error::ingestion(source_name, row, Some(c + 1), format!("`{}` is not a node index", &rec[c]))
            })
        };
        let num = |c: usize| -> Result<f64> {
            rec[c]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::ingestion(source_name, row, Some(c + 1), format!("`{}` is not a number", &rec[c])))
        };
        let (tail, head) = (idx(0)?, idx(1)?);
        if let Some(n) = num_nodes {
            if tail >= n || head >= n {
                return Err(Error::ingestion(
                    source_name,
                    row,
                    None,
                    format!("dangling node index in {tail} -> {head}; graph has nodes 0..{n}"),
                ));
            }
        }
        let e = Edge { tail, head };
        if !seen.insert(e) {
            return Err(Error::ingestion(
                source_name,
                row,
                None,
                format!("duplicate edge {tail} -> {head}"),
            ));
        }
        let d = num(2)?;
        if d <= 0.0 {
            return Err(Error::ingestion(source_name, row, Some(3), format!("non-positive distance {d}")));
        }
        if with_speeds {
            let (f, w) = (num(3)?, num(4)?);
            if f <= 0.0 || w <= 0.0 {
                return Err(Error::ingestion(source_name, row, None, "speeds must be positive"));
            }
            freeflow.push(f);
            shockwave.push(w);
        }
        edges.push(e);
        dist.push(d);
    }

    let n = num_nodes.unwrap_or_else(|| {
        edges
            .iter()
            .map(|e| e.tail.max(e.head) + 1)
            .max()
            .unwrap_or(0)
    });
    let g = DirectedGraph::from_distances(n, edges, dist)?;
    if with_speeds {
        g.with_speeds(EdgeSpeeds {
            freeflow_kmh: freeflow,
            shockwave_kmh: shockwave,
        })
    } else {
        Ok(g)
    }
}

pub fn load_graph(path: &Path, num_nodes: Option<usize>) -> Result<DirectedGraph> {
    let file = std::fs::File::open(path)?;
    read_graph(file, &path.display().to_string(), num_nodes)
}

pub fn write_graph<W: Write>(graph: &DirectedGraph, writer: W) -> Result<()> {
    let dist = graph
        .distance_km()
        .ok_or_else(|| Error::Contract("graph has no physical distances to write".into()))?;
    let mut w = csv::Writer::from_writer(writer);
    match graph.speeds() {
        Some(_) => w.write_record(["tail", "head", "distance_km", "freeflow_kmh", "shockwave_kmh"])?,
        None => w.write_record(["tail", "head", "distance_km"])?,
    }
    for (k, e) in graph.edges().iter().enumerate() {
        let mut rec = vec![e.tail.to_string(), e.head.to_string(), dist[k].to_string()];
        if let Some(s) = graph.speeds() {
            rec.push(s.freeflow_kmh[k].to_string());
            rec.push(s.shockwave_kmh[k].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_graph(graph: &DirectedGraph, path: &Path) -> Result<()> {
    write_graph(graph, std::fs::File::create(path)?)
}

//! Per-cell metadata, client shards, dataset manifests and partitioning.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{load_matrix, SparseBinaryMatrix};
use crate::seed;

/// One cell's metadata. `depth` is the nonzero count of the cell's row in the
/// full, pre-selection matrix and never changes after feature sampling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell_id: String,
    pub label: u32,
    pub batch_id: u32,
    pub depth: u64,
}

impl CellRecord {
    /// Key for per-cell noise streams; independent of row position.
    pub fn noise_key(&self) -> u64 {
        seed::fnv1a(self.cell_id.as_bytes())
    }
}

pub fn read_cells<R: Read>(reader: R) -> Result<Vec<CellRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["cell_id", "label", "batch_id", "depth"];
    if headers.len() != expected.len() || headers.iter().zip(expected).any(|(a, b)| a != b) {
        return Err(Error::InvalidShard(format!(
            "cell metadata header must be `cell_id,label,batch_id,depth`, found `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_cells<W: Write>(cells: &[CellRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if cells.is_empty() {
        w.write_record(["cell_id", "label", "batch_id", "depth"])?;
    }
    for c in cells {
        w.serialize(c)?;
    }
    w.flush().map_err(|e| Error::io("<cells csv>", e))?;
    Ok(())
}

pub fn load_cells(path: impl AsRef<Path>) -> Result<Vec<CellRecord>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_cells(f)
}

pub fn save_cells(cells: &[CellRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_cells(cells, f)
}

/// One client's private data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    matrix: SparseBinaryMatrix,
    cells: Vec<CellRecord>,
}

impl ClientShard {
    pub fn new(matrix: SparseBinaryMatrix, cells: Vec<CellRecord>) -> Result<Self> {
        if matrix.n_rows() != cells.len() {
            return Err(Error::InvalidShard(format!(
                "{} matrix rows but {} cell records",
                matrix.n_rows(),
                cells.len()
            )));
        }
        Ok(Self { matrix, cells })
    }

    pub fn matrix(&self) -> &SparseBinaryMatrix {
        &self.matrix
    }

    pub fn cells(&self) -> &[CellRecord] {
        &self.cells
    }

    pub fn n_i(&self) -> usize {
        self.cells.len()
    }

    pub fn n_cols(&self) -> usize {
        self.matrix.n_cols()
    }

    /// The client id, taken from the batch id its cells carry.
    pub fn client_id(&self) -> u32 {
        self.cells.first().map_or(0, |c| c.batch_id)
    }

    pub fn labels(&self) -> Vec<u32> {
        self.cells.iter().map(|c| c.label).collect()
    }
}

/// Checks that every shard is nonempty and all share one column count.
pub fn check_federation(shards: &[ClientShard]) -> Result<usize> {
    let d = shards
        .first()
        .ok_or_else(|| Error::InvalidShard("federation has no clients".into()))?
        .n_cols();
    for (i, s) in shards.iter().enumerate() {
        if s.n_i() == 0 {
            return Err(Error::EmptyShard);
        }
        if s.n_cols() != d {
            return Err(Error::InvalidShard(format!(
                "client {i} has {} features, expected {d}",
                s.n_cols()
            )));
        }
    }
    Ok(d)
}

/// Sets each cell's depth to its row's nonzero count.
pub fn with_depths(matrix: &SparseBinaryMatrix, mut cells: Vec<CellRecord>) -> Vec<CellRecord> {
    for (c, n) in cells.iter_mut().zip(matrix.row_sums()) {
        c.depth = n as u64;
    }
    cells
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestClient {
    pub matrix: PathBuf,
    pub cells: PathBuf,
}

/// JSON manifest listing each client's matrix and metadata files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub clients: Vec<ManifestClient>,
    pub d: usize,
    pub scenario: String,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(text)?;
        if m.clients.is_empty() {
            return Err(Error::InvalidManifest("no clients listed".into()));
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Loads every client, resolving relative paths against `base`.
    pub fn load_shards(&self, base: impl AsRef<Path>) -> Result<Vec<ClientShard>> {
        let base = base.as_ref();
        let shards = self
            .clients
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mpath = base.join(&c.matrix);
                let cpath = base.join(&c.cells);
                for p in [&mpath, &cpath] {
                    if !p.exists() {
                        return Err(Error::InvalidManifest(format!(
                            "client {i}: {} does not exist",
                            p.display()
                        )));
                    }
                }
                let matrix = load_matrix(&mpath)?;
                if matrix.n_cols() != self.d {
                    return Err(Error::InvalidManifest(format!(
                        "client {i}: matrix has {} features, manifest says {}",
                        matrix.n_cols(),
                        self.d
                    )));
                }
                ClientShard::new(matrix, load_cells(&cpath)?)
            })
            .collect::<Result<Vec<_>>>()?;
        check_federation(&shards)?;
        Ok(shards)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    /// Random split into `n` near-equal shards.
    IidUniform(usize),
    /// `table[client][label]` cells of each label per client.
    ByTable(Vec<Vec<usize>>),
}

/// Splits a dataset into client shards. Each shard keeps its cells in input
/// order and has its batch ids set to the client index.
pub fn partition_dataset(
    matrix: &SparseBinaryMatrix,
    cells: &[CellRecord],
    scheme: &PartitionScheme,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    if matrix.n_rows() != cells.len() {
        return Err(Error::InvalidShard("matrix rows and cell records disagree".into()));
    }
    let mut rng = seed::rng(seed, &[seed::stream::PARTITION]);
    let mut assignment: Vec<Vec<usize>> = match scheme {
        PartitionScheme::IidUniform(n) => {
            let n = *n;
            if n == 0 || n > cells.len() {
                return Err(Error::InvalidShard(format!(
                    "cannot split {} cells into {n} shards",
                    cells.len()
                )));
            }
            let mut order: Vec<usize> = (0..cells.len()).collect();
            order.shuffle(&mut rng);
            let (q, r) = (cells.len() / n, cells.len() % n);
            let mut out = Vec::with_capacity(n);
            let mut start = 0;
            for k in 0..n {
                let len = q + usize::from(k < r);
                out.push(order[start..start + len].to_vec());
                start += len;
            }
            out
        }
        PartitionScheme::ByTable(table) => {
            let mut by_label: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
            for (i, c) in cells.iter().enumerate() {
                by_label.entry(c.label).or_default().push(i);
            }
            let n_labels = table.iter().map(Vec::len).max().unwrap_or(0);
            let mut out = vec![Vec::new(); table.len()];
            for label in 0..n_labels as u32 {
                let needed: usize = table
                    .iter()
                    .map(|row| row.get(label as usize).copied().unwrap_or(0))
                    .sum();
                let pool = by_label.entry(label).or_default();
                if needed > pool.len() {
                    return Err(Error::InsufficientCells {
                        label,
                        needed,
                        available: pool.len(),
                    });
                }
                pool.shuffle(&mut rng);
                let mut taken = 0;
                for (client, row) in table.iter().enumerate() {
                    let k = row.get(label as usize).copied().unwrap_or(0);
                    out[client].extend_from_slice(&pool[taken..taken + k]);
                    taken += k;
                }
            }
            out
        }
    };

    assignment
        .iter_mut()
        .enumerate()
        .map(|(client, rows)| {
            rows.sort_unstable();
            let sub = matrix.select_rows(rows);
            let sub_cells = rows
                .iter()
                .map(|&r| CellRecord {
                    batch_id: client as u32,
                    ..cells[r].clone()
                })
                .collect();
            ClientShard::new(sub, sub_cells)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn toy(n: usize, labels: u32) -> (SparseBinaryMatrix, Vec<CellRecord>) {
        let rows: Vec<Vec<u32>> = (0..n).map(|i| vec![(i % 7) as u32]).collect();
        let m = SparseBinaryMatrix::from_rows(7, &rows).unwrap();
        let cells = (0..n)
            .map(|i| CellRecord {
                cell_id: format!("cell{i}"),
                label: i as u32 % labels,
                batch_id: 0,
                depth: 1,
            })
            .collect();
        (m, cells)
    }

    #[test]
    fn iid_single_shard_is_identity() {
        let (m, cells) = toy(30, 3);
        let shards = partition_dataset(&m, &cells, &PartitionScheme::IidUniform(1), 5).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].matrix(), &m);
        assert_eq!(shards[0].cells(), cells.as_slice());
    }

    #[test]
    fn iid_five_way_split_covers_input() {
        let (m, cells) = toy(1000, 5);
        let shards = partition_dataset(&m, &cells, &PartitionScheme::IidUniform(5), 11).unwrap();
        let sizes: Vec<usize> = shards.iter().map(ClientShard::n_i).collect();
        assert_eq!(sizes, vec![200; 5]);
        let ids: BTreeSet<&str> = shards
            .iter()
            .flat_map(|s| s.cells().iter().map(|c| c.cell_id.as_str()))
            .collect();
        assert_eq!(ids.len(), 1000);
        assert_eq!(ids, cells.iter().map(|c| c.cell_id.as_str()).collect());
        for (k, s) in shards.iter().enumerate() {
            assert!(s.cells().iter().all(|c| c.batch_id == k as u32));
        }
    }

    #[test]
    fn partition_is_deterministic() {
        let (m, cells) = toy(100, 4);
        let scheme = PartitionScheme::ByTable(vec![vec![5, 5, 5, 5], vec![10, 0, 3, 1]]);
        let a = partition_dataset(&m, &cells, &scheme, 3).unwrap();
        let b = partition_dataset(&m, &cells, &scheme, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[1].labels().iter().filter(|&&l| l == 0).count(), 10);
    }

    #[test]
    fn table_demanding_too_many_cells_fails() {
        let (m, cells) = toy(20, 2);
        let scheme = PartitionScheme::ByTable(vec![vec![8, 0], vec![8, 0]]);
        let err = partition_dataset(&m, &cells, &scheme, 0).unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientCells {
                label: 0,
                needed: 16,
                available: 10
            }
        ));
    }

    #[test]
    fn cells_csv_roundtrip_and_header_check() {
        let (_, cells) = toy(4, 2);
        let mut buf = Vec::new();
        write_cells(&cells, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("cell_id,label,batch_id,depth\n"));
        assert_eq!(read_cells(buf.as_slice()).unwrap(), cells);
        assert!(read_cells("id,label,batch,depth\na,1,2,3\n".as_bytes()).is_err());
        assert!(read_cells("cell_id,label,batch_id,depth\na,-1,2,3\n".as_bytes()).is_err());
    }

    #[test]
    fn manifest_rejects_unknown_keys() {
        let ok = r#"{"clients":[{"matrix":"a.mtx","cells":"a.csv"}],"d":10,"scenario":"x","seed":1}"#;
        assert!(DatasetManifest::from_json(ok).is_ok());
        let bad = r#"{"clients":[],"d":10,"scenario":"x","seed":1,"extra":0}"#;
        assert!(DatasetManifest::from_json(bad).is_err());
        let empty = r#"{"clients":[],"d":10,"scenario":"x","seed":1}"#;
        assert!(DatasetManifest::from_json(empty).is_err());
    }

    #[test]
    fn manifest_loads_shards_and_checks_d() {
        let dir = tempfile::tempdir().unwrap();
        let (m, cells) = toy(6, 2);
        crate::matrix::save_matrix(&m, dir.path().join("c0.mtx")).unwrap();
        save_cells(&cells, dir.path().join("c0.csv")).unwrap();
        let mut manifest = DatasetManifest {
            clients: vec![ManifestClient {
                matrix: "c0.mtx".into(),
                cells: "c0.csv".into(),
            }],
            d: 7,
            scenario: "toy".into(),
            seed: 0,
        };
        let shards = manifest.load_shards(dir.path()).unwrap();
        assert_eq!(shards[0].n_i(), 6);
        manifest.d = 8;
        assert!(manifest.load_shards(dir.path()).is_err());
        manifest.clients[0].cells = "missing.csv".into();
        assert!(matches!(
            manifest.load_shards(dir.path()),
            Err(Error::InvalidManifest(_))
        ));
    }
}

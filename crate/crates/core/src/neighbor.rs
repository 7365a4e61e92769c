//! Test-time retrieval of the K nearest inducing inputs per query.
//!
//! Two index kinds: an exact flat scan, and a coarse inverted-file index
//! (k-means cells, exact distances within the probed cells, no product
//! quantization). Distances are squared internally and square-rooted only at
//! the API boundary; ordering is identical either way.

use crate::error::{GapaError, Result};
use crate::fileio::*;
use crate::inducing::{kmeans_pp_rows, InducingSet};
use crate::tensor::{dist2, Matrix, Vector};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

const SECTION_MAGIC: &[u8; 8] = b"GAPAINDX";

/// Index flavor requested at build time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexKind {
    ExactFlat,
    CoarseIvf { n_lists: usize, n_probe: usize },
}

impl IndexKind {
    /// IVF with defaults `n_lists = ⌈√M⌉`, `n_probe = 8`.
    pub fn default_ivf(m: usize) -> Self {
        Self::CoarseIvf {
            n_lists: (m as f64).sqrt().ceil() as usize,
            n_probe: 8,
        }
    }
}

#[derive(Debug)]
enum Structure {
    Flat,
    Ivf {
        n_probe: usize,
        centroids: Matrix,
        posting_lists: Vec<Vec<u32>>,
    },
}

/// Immutable queryable structure over an inducing set. Concurrent queries
/// are safe and lock-free.
#[derive(Debug)]
pub struct NeighborIndex {
    inducing: Arc<InducingSet>,
    structure: Structure,
    max_iters: usize,
    seed: u64,
}

/// Ordered (ascending distance, ties by row id) neighbor hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub row_id: usize,
    pub distance: f64,
}

fn push_candidate(best: &mut Vec<(f64, usize)>, k: usize, d2: f64, id: usize) {
    // Keeps the k smallest (d2, id) pairs; linear insertion is fine at K≈50.
    if best.len() == k {
        let worst = *best.last().unwrap();
        if (d2, id) >= worst {
            return;
        }
        best.pop();
    }
    let pos = best.partition_point(|&e| e < (d2, id));
    best.insert(pos, (d2, id));
}

impl NeighborIndex {
    /// Builds an index covering every inducing row. CoarseIVF cells come from
    /// k-means++ over the inducing rows themselves.
    pub fn build(inducing: Arc<InducingSet>, kind: IndexKind) -> Result<Self> {
        Self::build_seeded(inducing, kind, 25, 0)
    }

    pub fn build_seeded(
        inducing: Arc<InducingSet>,
        kind: IndexKind,
        max_iters: usize,
        seed: u64,
    ) -> Result<Self> {
        let m = inducing.m();
        let structure = match kind {
            IndexKind::ExactFlat => Structure::Flat,
            IndexKind::CoarseIvf { n_lists, n_probe } => {
                if n_lists > m {
                    return Err(GapaError::TooFewRows { n_lists, rows: m });
                }
                if n_lists == 0 || n_probe == 0 {
                    return Err(GapaError::InvalidParameter {
                        what: "n_lists and n_probe must be >= 1".into(),
                    });
                }
                let centroids = kmeans_pp_rows(inducing.z(), n_lists, max_iters, seed)?;
                let mut posting_lists = vec![Vec::new(); n_lists];
                for r in 0..m {
                    let row = inducing.z().row(r);
                    let mut best = (0usize, f64::INFINITY);
                    for c in 0..n_lists {
                        let d = dist2(row, centroids.row(c));
                        if d < best.1 {
                            best = (c, d);
                        }
                    }
                    posting_lists[best.0].push(r as u32);
                }
                Structure::Ivf {
                    n_probe,
                    centroids,
                    posting_lists,
                }
            }
        };
        Ok(Self {
            inducing,
            structure,
            max_iters,
            seed,
        })
    }

    pub fn inducing(&self) -> &Arc<InducingSet> {
        &self.inducing
    }

    pub fn kind(&self) -> IndexKind {
        match &self.structure {
            Structure::Flat => IndexKind::ExactFlat,
            Structure::Ivf {
                n_probe,
                posting_lists,
                ..
            } => IndexKind::CoarseIvf {
                n_lists: posting_lists.len(),
                n_probe: *n_probe,
            },
        }
    }

    /// The K nearest inducing rows by Euclidean distance, ascending, ties
    /// broken by row id. CoarseIVF restricts the scan to the `n_probe`
    /// closest cells.
    pub fn query_knn(&self, z: &Vector, k: usize) -> Result<Vec<Neighbor>> {
        let m = self.inducing.m();
        if k == 0 || k > m {
            return Err(GapaError::InvalidParameter {
                what: format!("K={k} must be in 1..=M={m}"),
            });
        }
        if z.len() != self.inducing.dim() {
            return Err(GapaError::DimensionMismatch {
                context: "query width",
                expected: self.inducing.dim(),
                got: z.len(),
            });
        }
        let rows = self.inducing.z();
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        match &self.structure {
            Structure::Flat => {
                for r in 0..m {
                    push_candidate(&mut best, k, dist2(z.data(), rows.row(r)), r);
                }
            }
            Structure::Ivf {
                n_probe,
                centroids,
                posting_lists,
            } => {
                let probes = (*n_probe).min(centroids.rows());
                let mut cells: Vec<(f64, usize)> = Vec::with_capacity(probes + 1);
                for c in 0..centroids.rows() {
                    push_candidate(&mut cells, probes, dist2(z.data(), centroids.row(c)), c);
                }
                for (_, cell) in cells {
                    for &r in &posting_lists[cell] {
                        let r = r as usize;
                        push_candidate(&mut best, k, dist2(z.data(), rows.row(r)), r);
                    }
                }
            }
        }
        Ok(best
            .into_iter()
            .map(|(d2, row_id)| Neighbor {
                row_id,
                distance: d2.sqrt(),
            })
            .collect())
    }

    /// Appends this index as a "GAPAINDX" section after the inducing-set
    /// bytes already in `path`.
    pub fn append_to_inducing_file(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::OpenOptions::new().append(true).open(path)?);
        w.write_all(SECTION_MAGIC)?;
        match &self.structure {
            Structure::Flat => {
                w.write_all(&[0u8])?;
                write_u64(&mut w, self.max_iters as u64)?;
                write_u64(&mut w, self.seed)?;
            }
            Structure::Ivf {
                n_probe,
                centroids,
                posting_lists,
            } => {
                w.write_all(&[1u8])?;
                write_u64(&mut w, self.max_iters as u64)?;
                write_u64(&mut w, self.seed)?;
                write_u32(&mut w, posting_lists.len() as u32)?;
                write_u32(&mut w, *n_probe as u32)?;
                write_f64_slice(&mut w, centroids.data())?;
                for list in posting_lists {
                    write_u32(&mut w, list.len() as u32)?;
                    for id in list {
                        write_u32(&mut w, *id)?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads an index section from a reader positioned right after the
    /// inducing-set bytes.
    fn read_section<R: Read>(r: &mut R, inducing: Arc<InducingSet>) -> Result<Self> {
        read_magic(r, SECTION_MAGIC)?;
        let tag = read_u8(r, "index kind")?;
        let max_iters = read_u64(r, "index max_iters")? as usize;
        let seed = read_u64(r, "index seed")?;
        let structure = match tag {
            0 => Structure::Flat,
            1 => {
                let n_lists = read_u32(r, "n_lists")? as usize;
                let n_probe = read_u32(r, "n_probe")? as usize;
                let d = inducing.dim();
                let centroids =
                    Matrix::from_vec(n_lists, d, read_f64_vec(r, n_lists * d, "centroids")?)?;
                let mut posting_lists = Vec::with_capacity(n_lists);
                let mut seen = 0usize;
                for _ in 0..n_lists {
                    let len = read_u32(r, "posting list length")? as usize;
                    let mut list = Vec::with_capacity(len);
                    for _ in 0..len {
                        list.push(read_u32(r, "posting list id")?);
                    }
                    seen += len;
                    posting_lists.push(list);
                }
                if seen != inducing.m() {
                    return Err(GapaError::CorruptFile {
                        reason: format!(
                            "posting lists cover {seen} rows, inducing set has {}",
                            inducing.m()
                        ),
                    });
                }
                Structure::Ivf {
                    n_probe,
                    centroids,
                    posting_lists,
                }
            }
            other => {
                return Err(GapaError::CorruptFile {
                    reason: format!("unknown index kind tag {other}"),
                })
            }
        };
        Ok(Self {
            inducing,
            structure,
            max_iters,
            seed,
        })
    }
}

/// Loads an inducing file together with its appended index section. Files
/// without the section get a fresh `ExactFlat` index.
pub fn load_inducing_with_index(path: &Path) -> Result<(Arc<InducingSet>, NeighborIndex)> {
    let mut r = BufReader::new(File::open(path)?);
    let inducing = Arc::new(crate::inducing::read_inducing_set(&mut r)?);
    let mut probe = [0u8; 1];
    let has_section = r.read(&mut probe)? == 1;
    let index = if has_section {
        let mut chained = std::io::Cursor::new(probe).chain(r);
        NeighborIndex::read_section(&mut chained, Arc::clone(&inducing))?
    } else {
        NeighborIndex::build(Arc::clone(&inducing), IndexKind::ExactFlat)?
    };
    Ok((inducing, index))
}

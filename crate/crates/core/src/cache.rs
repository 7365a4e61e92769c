//! Offline phase (i): run the reference dataset through the frozen network
//! once and persist pre-activations at a chosen attachment point.
//!
//! Cache file layout:
//!
//! ```text
//! magic "GAPACACH" | u16 version | u32 layer_index | u32 width | u64 rows
//!   | 32-byte fingerprint | little-endian f32 rows (row-major)
//! ```
//!
//! Rows are stored in 32-bit floats (distances are robust to f32 and the
//! large-model caches are huge) and widened to f64 on load.

use crate::container::container_bytes;
use crate::error::{GapaError, Result};
use crate::fileio::*;
use crate::network::NetworkSpec;
use crate::tensor::{Matrix, Vector};
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 8] = b"GAPACACH";
const VERSION: u16 = 1;
const HEADER_LEN: u64 = 8 + 2 + 4 + 4 + 8 + 32;

/// Checksum binding a cache (and everything derived from it) to the exact
/// network weights and dataset it was built from.
pub fn fingerprint(net: &NetworkSpec, dataset_id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(container_bytes(net, None));
    h.update(dataset_id.as_bytes());
    h.finalize().into()
}

/// Handle to an on-disk matrix of pre-activations logged at one layer.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    path: PathBuf,
    layer_index: usize,
    width: usize,
    rows: usize,
    fingerprint: [u8; 32],
}

impl ActivationCache {
    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn fingerprint(&self) -> &[u8; 32] {
        &self.fingerprint
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Opens an existing cache file and validates its header.
    pub fn open(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        read_magic(&mut r, MAGIC)?;
        let version = read_u16(&mut r, "cache version")?;
        if version > VERSION {
            return Err(GapaError::SchemaVersionUnsupported {
                found: version as u32,
                supported: VERSION as u32,
            });
        }
        let layer_index = read_u32(&mut r, "layer index")? as usize;
        let width = read_u32(&mut r, "width")? as usize;
        let rows = read_u64(&mut r, "rows")? as usize;
        let fp = read_bytes(&mut r, 32, "fingerprint")?;
        let expected = HEADER_LEN + (rows as u64) * (width as u64) * 4;
        let actual = std::fs::metadata(path)?.len();
        if actual != expected {
            return Err(GapaError::CorruptFile {
                reason: format!("cache length {actual}, header implies {expected}"),
            });
        }
        Ok(Self {
            path: path.to_path_buf(),
            layer_index,
            width,
            rows,
            fingerprint: fp.try_into().unwrap(),
        })
    }

    /// Loads every row into memory, widened to f64.
    pub fn load_matrix(&self) -> Result<Matrix> {
        let mut out = Vec::with_capacity(self.rows * self.width);
        for block in self.stream_rows(8192)? {
            let block = block?;
            out.extend_from_slice(block.data());
        }
        Matrix::from_vec(self.rows, self.width, out)
    }

    /// Streams row blocks of at most `batch` rows, in order, each row
    /// exactly once.
    pub fn stream_rows(&self, batch: usize) -> Result<RowBlocks> {
        if batch == 0 {
            return Err(GapaError::InvalidParameter {
                what: "stream batch must be >= 1".into(),
            });
        }
        let mut file = BufReader::new(File::open(&self.path)?);
        file.seek(SeekFrom::Start(HEADER_LEN))?;
        Ok(RowBlocks {
            file,
            width: self.width,
            remaining: self.rows,
            batch,
        })
    }
}

/// Iterator over cache row blocks; each item is a `rows_in_block × width`
/// matrix.
pub struct RowBlocks {
    file: BufReader<File>,
    width: usize,
    remaining: usize,
    batch: usize,
}

impl Iterator for RowBlocks {
    type Item = Result<Matrix>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        let take = self.remaining.min(self.batch);
        let mut bytes = vec![0u8; take * self.width * 4];
        if let Err(e) = self.file.read_exact(&mut bytes) {
            self.remaining = 0;
            let _ = e;
            return Some(Err(GapaError::CorruptFile {
                reason: "cache rows truncated mid-stream".into(),
            }));
        }
        self.remaining -= take;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if !data.iter().all(|v| v.is_finite()) {
            self.remaining = 0;
            return Some(Err(GapaError::CorruptFile {
                reason: "non-finite entry in cache rows".into(),
            }));
        }
        Some(Matrix::from_vec(take, self.width, data))
    }
}

/// Runs `dataset` through the frozen network and logs the pre-activation
/// entering layer `layer` (one row per position) to `out_path`.
///
/// Items are sequences of input vectors; a plain feed-forward sample is a
/// one-position sequence.
pub fn build_cache(
    net: &NetworkSpec,
    dataset: &[Vec<Vector>],
    layer: usize,
    dataset_id: &str,
    out_path: &Path,
) -> Result<ActivationCache> {
    if dataset.is_empty() {
        return Err(GapaError::EmptyCache);
    }
    if !net.gapa_points().contains(&layer) {
        return Err(GapaError::InvalidParameter {
            what: format!("layer {layer} is not a GAPA attachment point"),
        });
    }
    let width = net.width_at(layer);
    let fp = fingerprint(net, dataset_id);

    let mut w = BufWriter::new(File::create(out_path)?);
    w.write_all(MAGIC)?;
    write_u16(&mut w, VERSION)?;
    write_u32(&mut w, layer as u32)?;
    write_u32(&mut w, width as u32)?;
    // Row count is not known up front for sequence data; patch it after the
    // pass. Placeholder here keeps the byte layout fixed.
    write_u64(&mut w, 0)?;
    w.write_all(&fp)?;

    let mut rows = 0usize;
    for item in dataset {
        let (_, tapped) = net.forward_with_tap(item, Some(layer))?;
        let tapped = tapped.expect("tap index is a validated layer");
        for z in &tapped {
            for v in z.iter() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
            rows += 1;
        }
    }
    w.flush()?;
    drop(w);

    let mut f = std::fs::OpenOptions::new().write(true).open(out_path)?;
    f.seek(SeekFrom::Start(8 + 2 + 4 + 4))?;
    f.write_all(&(rows as u64).to_le_bytes())?;
    f.sync_all()?;

    ActivationCache::open(out_path)
}

/// Builds an in-memory cache-shaped matrix without touching disk. Test and
/// harness helper for constructing inducing sets from synthetic rows.
pub fn write_cache_from_matrix(
    rows: &Matrix,
    layer_index: usize,
    fingerprint: [u8; 32],
    out_path: &Path,
) -> Result<ActivationCache> {
    let mut w = BufWriter::new(File::create(out_path)?);
    w.write_all(MAGIC)?;
    write_u16(&mut w, VERSION)?;
    write_u32(&mut w, layer_index as u32)?;
    write_u32(&mut w, rows.cols() as u32)?;
    write_u64(&mut w, rows.rows() as u64)?;
    w.write_all(&fingerprint)?;
    for v in rows.data() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    drop(w);
    ActivationCache::open(out_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ActivationTag, LayerSpec, TaskKind};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn identity_net(width: usize) -> NetworkSpec {
        NetworkSpec::new(
            vec![
                LayerSpec::Linear {
                    weight: Matrix::identity(width),
                    bias: Vector::zeros(width),
                },
                LayerSpec::Activation(ActivationTag::Identity),
            ],
            vec![1],
            TaskKind::Regression,
            width,
        )
        .unwrap()
    }

    fn single(v: Vec<f64>) -> Vec<Vector> {
        vec![Vector::from_vec(v).unwrap()]
    }

    #[test]
    fn identity_network_caches_inputs() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("l1.gapacache");
        let net = identity_net(2);
        let data = vec![single(vec![1.0, 2.0]), single(vec![3.0, 4.0])];
        let cache = build_cache(&net, &data, 1, "toy", &path).unwrap();
        assert_eq!(cache.rows(), 2);
        let m = cache.load_matrix().unwrap();
        assert_eq!(m.row(0), &[1.0, 2.0]);
        assert_eq!(m.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn single_sample_row_is_wx_plus_b() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("l1.gapacache");
        let w = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Vector::from_vec(vec![0.5, -0.5]).unwrap();
        let net = NetworkSpec::new(
            vec![
                LayerSpec::Linear {
                    weight: w,
                    bias: b,
                },
                LayerSpec::Activation(ActivationTag::Relu),
            ],
            vec![1],
            TaskKind::Regression,
            2,
        )
        .unwrap();
        let cache = build_cache(&net, &[single(vec![1.0, 1.0])], 1, "toy", &path).unwrap();
        let m = cache.load_matrix().unwrap();
        // W·x + b = [3.5, 6.5]
        assert_eq!(m.row(0), &[3.5, 6.5]);
    }

    #[test]
    fn cached_rows_match_recomputed_forward_oracle() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("l1.gapacache");
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w1 = Matrix::from_vec(6, 3, (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let b1 =
            Vector::from_vec((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w2 = Matrix::from_vec(4, 6, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let b2 =
            Vector::from_vec((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let net = NetworkSpec::new(
            vec![
                LayerSpec::Linear {
                    weight: w1.clone(),
                    bias: b1.clone(),
                },
                LayerSpec::Activation(ActivationTag::Tanh),
                LayerSpec::Linear {
                    weight: w2.clone(),
                    bias: b2.clone(),
                },
                LayerSpec::Activation(ActivationTag::Tanh),
            ],
            vec![1, 3],
            TaskKind::Regression,
            3,
        )
        .unwrap();
        let data: Vec<Vec<Vector>> = (0..100)
            .map(|_| single((0..3).map(|_| rng.gen_range(-2.0..2.0)).collect()))
            .collect();
        let cache = build_cache(&net, &data, 3, "toy", &path).unwrap();
        let m = cache.load_matrix().unwrap();
        for (i, item) in data.iter().enumerate() {
            // Independent recomputation: z3 = W2·tanh(W1·x + b1) + b2.
            let h = crate::tensor::matvec(&w1, &item[0])
                .unwrap()
                .add(&b1)
                .unwrap()
                .map(f64::tanh);
            let z = crate::tensor::matvec(&w2, &h).unwrap().add(&b2).unwrap();
            for (j, want) in z.iter().enumerate() {
                let got = m.get(i, j);
                assert!(
                    (got - want).abs() <= 1e-6,
                    "row {i} col {j}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn stream_rows_covers_everything_once() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("l1.gapacache");
        let net = identity_net(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<Vec<Vector>> = (0..37)
            .map(|_| single((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let cache = build_cache(&net, &data, 1, "toy", &path).unwrap();

        let full = cache.load_matrix().unwrap();
        let full_sum: f64 = full.data().iter().sum();

        // batch = rows → one block; batch = 1 → rows blocks.
        assert_eq!(cache.stream_rows(37).unwrap().count(), 1);
        assert_eq!(cache.stream_rows(1).unwrap().count(), 37);

        let mut streamed_sum = 0.0;
        let mut streamed_rows = 0;
        for block in cache.stream_rows(5).unwrap() {
            let block = block.unwrap();
            streamed_rows += block.rows();
            streamed_sum += block.data().iter().sum::<f64>();
        }
        assert_eq!(streamed_rows, 37);
        assert_eq!(streamed_sum, full_sum);
    }

    #[test]
    fn rebuild_is_byte_identical() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.gapacache");
        let p2 = dir.path().join("b.gapacache");
        let net = identity_net(2);
        let data = vec![single(vec![0.25, -1.5]), single(vec![9.0, 2.0])];
        build_cache(&net, &data, 1, "toy", &p1).unwrap();
        build_cache(&net, &data, 1, "toy", &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn non_gapa_layer_is_rejected() {
        let dir = tempdir().unwrap();
        let net = identity_net(2);
        let err = build_cache(
            &net,
            &[single(vec![0.0, 0.0])],
            0,
            "toy",
            &dir.path().join("x.gapacache"),
        );
        assert!(matches!(err, Err(GapaError::InvalidParameter { .. })));
    }

    #[test]
    fn truncated_cache_detected_on_open() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("l1.gapacache");
        let net = identity_net(2);
        build_cache(&net, &[single(vec![1.0, 2.0])], 1, "toy", &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            ActivationCache::open(&path),
            Err(GapaError::CorruptFile { .. })
        ));
    }

    #[test]
    fn fingerprint_tracks_network_and_dataset() {
        let net = identity_net(2);
        let other = identity_net(3);
        assert_eq!(fingerprint(&net, "a"), fingerprint(&net, "a"));
        assert_ne!(fingerprint(&net, "a"), fingerprint(&net, "b"));
        assert_ne!(fingerprint(&net, "a"), fingerprint(&other, "a"));
    }
}

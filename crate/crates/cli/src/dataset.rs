//! JSON-lines dataset files and the toy generators: two-moons (with a
//! far-field OOD split), gap regression in 1-D, and an angle-parameterized
//! rotation shift of 2-D inputs.

use gapa_core::error::{GapaError, Result};
use gapa_core::tensor::Vector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// One dataset sample. Classification rows carry `label`, regression rows
/// carry `target`; far-field rows are flagged `ood`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub x: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    #[serde(default)]
    pub ood: bool,
}

impl Sample {
    pub fn input(&self) -> Result<Vector> {
        Vector::from_vec(self.x.clone())
    }
}

pub fn write_samples(samples: &[Sample], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s).map_err(|e| GapaError::InvalidParameter {
            what: format!("serialize sample: {e}"),
        })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line).map_err(|e| GapaError::CorruptFile {
            reason: format!("dataset line {}: {e}", lineno + 1),
        })?;
        out.push(s);
    }
    if out.is_empty() {
        return Err(GapaError::InvalidParameter {
            what: format!("dataset {} has no samples", path.display()),
        });
    }
    Ok(out)
}

/// Toy dataset family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKind {
    TwoMoons,
    GapRegression1d,
    RotatedShift,
}

/// Knobs for [`gen_toy`]; unused fields are ignored per kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyParams {
    pub n_train: usize,
    pub n_test: usize,
    /// Far-field OOD points appended to the two-moons test split.
    pub n_far: usize,
    /// Two-moons coordinate noise.
    pub noise: f64,
    /// Rotation angle, degrees (RotatedShift only).
    pub angle_deg: f64,
}

impl Default for ToyParams {
    fn default() -> Self {
        Self {
            n_train: 500,
            n_test: 500,
            n_far: 250,
            noise: 0.15,
            angle_deg: 30.0,
        }
    }
}

/// A generated toy dataset: train split, test split (with OOD flags where
/// applicable).
#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn two_moons_points(n: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<(Vec<f64>, usize)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let t = rng.gen_range(0.0..std::f64::consts::PI);
        let (mut x, mut y) = if label == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        x += noise * rng.sample::<f64, _>(StandardNormal);
        y += noise * rng.sample::<f64, _>(StandardNormal);
        out.push((vec![x, y], label));
    }
    out
}

/// Centroid and radius (max distance from centroid) of a point set.
pub fn data_center_radius(points: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let d = points[0].len();
    let mut center = vec![0.0; d];
    for p in points {
        for (c, v) in center.iter_mut().zip(p) {
            *c += v;
        }
    }
    for c in &mut center {
        *c /= points.len() as f64;
    }
    let radius = points
        .iter()
        .map(|p| {
            p.iter()
                .zip(&center)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max);
    (center, radius)
}

/// Deterministic toy-dataset generation.
pub fn gen_toy(kind: ToyKind, params: &ToyParams, seed: u64) -> ToyDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        ToyKind::TwoMoons => {
            let train_pts = two_moons_points(params.n_train, params.noise, &mut rng);
            let test_pts = two_moons_points(params.n_test, params.noise, &mut rng);
            let (center, radius) = data_center_radius(
                &train_pts.iter().map(|(x, _)| x.clone()).collect::<Vec<_>>(),
            );
            let mut id = 0u64;
            let mut mk = |x: Vec<f64>, label: Option<usize>, ood: bool| {
                let s = Sample {
                    id,
                    x,
                    label,
                    target: None,
                    ood,
                };
                id += 1;
                s
            };
            let train: Vec<Sample> = train_pts
                .into_iter()
                .map(|(x, l)| mk(x, Some(l), false))
                .collect();
            let mut test: Vec<Sample> = test_pts
                .into_iter()
                .map(|(x, l)| mk(x, Some(l), false))
                .collect();
            // Far-field ring: distance from the data centroid strictly
            // beyond 3 data radii.
            for _ in 0..params.n_far {
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = radius * rng.gen_range(3.2..4.5);
                let x = vec![center[0] + r * theta.cos(), center[1] + r * theta.sin()];
                test.push(mk(x, None, true));
            }
            ToyDataset { train, test }
        }
        ToyKind::GapRegression1d => {
            // Two disjoint intervals with distinct noise levels; the gap
            // (−0.3, 0.3) holds no samples at all.
            let f = |x: f64| (4.0 * x).sin() + 0.3 * x;
            let sigma = |x: f64| if x < 0.0 { 0.05 } else { 0.3 };
            let draw = |n: usize, base: u64, rng: &mut ChaCha8Rng| -> Vec<Sample> {
                (0..n)
                    .map(|i| {
                        let x = if i % 2 == 0 {
                            rng.gen_range(-1.0..-0.3)
                        } else {
                            rng.gen_range(0.3..1.0)
                        };
                        let y = f(x) + sigma(x) * rng.sample::<f64, _>(StandardNormal);
                        Sample {
                            id: base + i as u64,
                            x: vec![x],
                            label: None,
                            target: Some(y),
                            ood: false,
                        }
                    })
                    .collect()
            };
            let train = draw(params.n_train, 0, &mut rng);
            let test = draw(params.n_test, params.n_train as u64, &mut rng);
            ToyDataset { train, test }
        }
        ToyKind::RotatedShift => {
            let base = gen_toy(ToyKind::TwoMoons, params, seed);
            let (center, _) = data_center_radius(
                &base.train.iter().map(|s| s.x.clone()).collect::<Vec<_>>(),
            );
            let a = params.angle_deg.to_radians();
            let (sin, cos) = a.sin_cos();
            let rotate = |s: &Sample| -> Sample {
                let dx = s.x[0] - center[0];
                let dy = s.x[1] - center[1];
                Sample {
                    x: vec![
                        center[0] + cos * dx - sin * dy,
                        center[1] + sin * dx + cos * dy,
                    ],
                    ..s.clone()
                }
            };
            // Train stays canonical; the shift applies to the test split.
            ToyDataset {
                train: base.train,
                test: base.test.iter().map(rotate).collect(),
            }
        }
    }
}

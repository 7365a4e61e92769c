//! `gen-toy`: writes a toy dataset (train/test JSONL + meta), optionally a
//! trained frozen backbone for it, and a ready-to-run pipeline config.

use crate::config::{NoiseHeadOptions, PipelineConfig};
use crate::dataset::{gen_toy, write_samples, ToyKind, ToyParams};
use crate::seeds::{stage_seed, Stage};
use crate::toytrain::{classifier_accuracy, train_classifier, train_regressor, TrainConfig};
use gapa_core::container::save_network;
use gapa_core::error::{GapaError, Result};
use serde::Serialize;
use std::fs;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct GenToyArgs {
    pub kind: ToyKind,
    pub params: ToyParams,
    pub seed: u64,
    /// Also train a tanh MLP on the train split and emit net + config.
    pub train_net: bool,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for GenToyArgs {
    fn default() -> Self {
        Self {
            kind: ToyKind::TwoMoons,
            params: ToyParams::default(),
            seed: 0,
            train_net: false,
            hidden: vec![16, 16],
            epochs: 1500,
            lr: 0.3,
        }
    }
}

#[derive(Serialize)]
struct Meta<'a> {
    kind: ToyKind,
    seed: u64,
    params: &'a ToyParams,
    n_train: usize,
    n_test: usize,
    train_accuracy: Option<f64>,
}

/// Generates the dataset files under `out_dir`. Returns the train accuracy
/// when a network was trained.
pub fn run_gen_toy(args: &GenToyArgs, out_dir: &Path) -> Result<Option<f64>> {
    fs::create_dir_all(out_dir)?;
    let ds = gen_toy(args.kind, &args.params, stage_seed(args.seed, Stage::GenToy));
    write_samples(&ds.train, &out_dir.join("train.jsonl"))?;
    write_samples(&ds.test, &out_dir.join("test.jsonl"))?;

    let mut train_accuracy = None;
    if args.train_net {
        let tcfg = TrainConfig {
            hidden: args.hidden.clone(),
            epochs: args.epochs,
            lr: args.lr,
            momentum: 0.9,
            seed: stage_seed(args.seed, Stage::Train),
        };
        let (net, is_regression) = match args.kind {
            ToyKind::TwoMoons | ToyKind::RotatedShift => {
                (train_classifier(&ds.train, 2, &tcfg)?, false)
            }
            ToyKind::GapRegression1d => {
                let mut rcfg = tcfg.clone();
                rcfg.lr = rcfg.lr.min(0.05);
                (train_regressor(&ds.train, &rcfg)?, true)
            }
        };
        if !is_regression {
            train_accuracy = Some(classifier_accuracy(&net, &ds.train)?);
        }
        save_network(&net, &out_dir.join("net.gapanet"))?;

        let cfg = PipelineConfig {
            network: "net.gapanet".into(),
            train_data: "train.jsonl".into(),
            test_data: "test.jsonl".into(),
            dataset_id: format!("{}-seed{}", kind_slug(args.kind), args.seed),
            out_dir: "run".into(),
            seed: args.seed,
            gapa_layers: None,
            m: None,
            k: default_k_for(&ds.train),
            method: crate::config::MethodChoice::Kmeanspp,
            index: crate::config::IndexChoice::Flat,
            jitter: 1e-6,
            head: crate::config::HeadChoice::Laplace,
            variant: crate::config::VariantChoice::A,
            noise_head: NoiseHeadOptions {
                enabled: is_regression,
                ..Default::default()
            },
            mc_samples: 512,
            top_k: 512,
        };
        let json =
            serde_json::to_string_pretty(&cfg).map_err(|e| GapaError::InvalidParameter {
                what: format!("serialize config: {e}"),
            })?;
        fs::write(out_dir.join("config.json"), json + "\n")?;
    }

    let meta = Meta {
        kind: args.kind,
        seed: args.seed,
        params: &args.params,
        n_train: ds.train.len(),
        n_test: ds.test.len(),
        train_accuracy,
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| GapaError::InvalidParameter {
        what: format!("serialize meta: {e}"),
    })?;
    fs::write(out_dir.join("meta.json"), json + "\n")?;
    Ok(train_accuracy)
}

fn kind_slug(kind: ToyKind) -> &'static str {
    match kind {
        ToyKind::TwoMoons => "two_moons",
        ToyKind::GapRegression1d => "gap_regression_1d",
        ToyKind::RotatedShift => "rotated_shift",
    }
}

/// K = 50 unless the train split is too small to support it.
fn default_k_for(train: &[crate::dataset::Sample]) -> usize {
    50.min(train.len().max(1))
}

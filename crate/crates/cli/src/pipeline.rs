//! The five pipeline stages: cache → induce → attach → infer → eval.
//! Each stage reads the artifacts of the previous one, verifies
//! fingerprints, and writes its own artifact into the run directory.

use crate::config::{HeadChoice, IndexChoice, PipelineConfig};
use crate::dataset::{read_samples, Sample};
use crate::seeds::{sample_seed, stage_seed, Stage};
use gapa_core::cache::{build_cache, fingerprint, ActivationCache};
use gapa_core::container::{load_network, load_network_with_head, save_network_with_head};
use gapa_core::error::{GapaError, Result};
use gapa_core::gpact::GapaLayer;
use gapa_core::heads::{
    fit_noise_head, laplace_bridge, mc_entropy_decomposition, NoiseHead, NoiseHeadConfig,
};
use gapa_core::inducing::{
    build_inducing_set, save_inducing_set, InducingConfig, InducingSet,
};
use gapa_core::metrics;
use gapa_core::neighbor::{load_inducing_with_index, IndexKind, NeighborIndex};
use gapa_core::network::{LayerSpec, NetworkSpec, TaskKind};
use gapa_core::propagate::AugmentedNetwork;
use gapa_core::tensor::{Matrix, Vector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

/// Attachment points for this run: the config subset, or everything the
/// network declares.
fn attach_points(cfg: &PipelineConfig, net: &NetworkSpec) -> Result<Vec<usize>> {
    match &cfg.gapa_layers {
        None => Ok(net.gapa_points().to_vec()),
        Some(list) => {
            for &l in list {
                if !net.gapa_points().contains(&l) {
                    return Err(GapaError::InvalidParameter {
                        what: format!("configured gapa layer {l} is not a network attachment point"),
                    });
                }
            }
            let mut v = list.clone();
            v.sort_unstable();
            v.dedup();
            Ok(v)
        }
    }
}

fn require_artifact(path: &Path, produced_by: &str) -> Result<()> {
    if !path.exists() {
        return Err(GapaError::InvalidParameter {
            what: format!(
                "missing artifact {} (run `{produced_by}` first)",
                path.display()
            ),
        });
    }
    Ok(())
}

/// Stage (i): log pre-activations of the train split at every attachment
/// point, one cache file per layer.
pub fn cmd_cache(cfg: &PipelineConfig) -> Result<Vec<ActivationCache>> {
    let net = load_network(&cfg.network)?;
    let samples = read_samples(&cfg.train_data)?;
    let dataset: Vec<Vec<Vector>> = samples
        .iter()
        .map(|s| s.input().map(|v| vec![v]))
        .collect::<Result<_>>()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut out = Vec::new();
    for layer in attach_points(cfg, &net)? {
        let path = cfg.cache_path(layer);
        out.push(build_cache(&net, &dataset, layer, &cfg.dataset_id, &path)?);
    }
    Ok(out)
}

/// Stage (ii): compress each cache into an inducing set (with kernel
/// hyperparameters) and append a neighbor index to the file.
pub fn cmd_induce(cfg: &PipelineConfig) -> Result<Vec<InducingSet>> {
    let net = load_network(&cfg.network)?;
    let expected_fp = fingerprint(&net, &cfg.dataset_id);
    let seed = stage_seed(cfg.seed, Stage::Induce);
    let mut out = Vec::new();
    for layer in attach_points(cfg, &net)? {
        let cache_path = cfg.cache_path(layer);
        require_artifact(&cache_path, "cache")?;
        let cache = ActivationCache::open(&cache_path)?;
        if cache.fingerprint() != &expected_fp {
            return Err(GapaError::FingerprintMismatch {
                context: "cache vs current network/dataset",
            });
        }
        let m = cfg.m.unwrap_or_else(|| cache.rows().min(20_000));
        if m < cfg.k {
            return Err(GapaError::InvalidParameter {
                what: format!("M = {m} must be >= K = {}", cfg.k),
            });
        }
        let mut icfg = InducingConfig::new(m, cfg.method.to_core(), seed);
        icfg.jitter = cfg.jitter;
        let set = build_inducing_set(&cache, &icfg)?;
        let path = cfg.inducing_path(layer);
        save_inducing_set(&set, &path)?;
        let kind = match cfg.index {
            IndexChoice::Flat => IndexKind::ExactFlat,
            IndexChoice::Ivf => IndexKind::default_ivf(set.m()),
        };
        let index = NeighborIndex::build_seeded(Arc::new(set.clone()), kind, 25, seed)?;
        index.append_to_inducing_file(&path)?;
        out.push(set);
    }
    Ok(out)
}

/// The attach manifest: which inducing files plug into which layers, plus
/// the inference knobs frozen at attach time.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelManifest {
    pub network: String,
    pub dataset_id: String,
    pub k: usize,
    pub jitter: f64,
    pub variant: crate::config::VariantChoice,
    pub head: HeadChoice,
    pub layers: Vec<ManifestLayer>,
    pub fingerprint_hex: String,
    /// Present when a noise head was fitted; the head itself lives in the
    /// rewritten network container.
    pub noise_head_feature_layer: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestLayer {
    pub layer_index: usize,
    pub inducing: String,
}

fn hex32(bytes: &[u8; 32]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Index of the layer whose *input* is the final pre-logit hidden state:
/// the last linear layer.
fn default_feature_layer(net: &NetworkSpec) -> Option<usize> {
    net.layers()
        .iter()
        .rposition(|l| matches!(l, LayerSpec::Linear { .. }))
}

/// Stage (iii): verify inducing artifacts, optionally fit the regression
/// noise head, and write the augmented-model manifest (plus a network
/// container carrying the head as an auxiliary section).
pub fn cmd_attach(cfg: &PipelineConfig) -> Result<ModelManifest> {
    let net = load_network(&cfg.network)?;
    let expected_fp = fingerprint(&net, &cfg.dataset_id);
    let points = attach_points(cfg, &net)?;
    let mut layers = Vec::new();
    for &layer in &points {
        let path = cfg.inducing_path(layer);
        require_artifact(&path, "induce")?;
        let (set, _) = load_inducing_with_index(&path)?;
        if set.fingerprint() != &expected_fp {
            return Err(GapaError::FingerprintMismatch {
                context: "inducing set vs current network/dataset",
            });
        }
        if cfg.k > set.m() {
            return Err(GapaError::InvalidParameter {
                what: format!("K = {} exceeds inducing size M = {}", cfg.k, set.m()),
            });
        }
        layers.push(ManifestLayer {
            layer_index: layer,
            inducing: path
                .file_name()
                .expect("inducing paths have file names")
                .to_string_lossy()
                .into_owned(),
        });
    }

    let mut noise_head_feature_layer = None;
    let mut fitted_head: Option<NoiseHead> = None;
    if cfg.noise_head.enabled {
        if net.task() != TaskKind::Regression {
            return Err(GapaError::InvalidParameter {
                what: "noise head applies to regression networks only".into(),
            });
        }
        let feature_layer = cfg
            .noise_head
            .feature_layer
            .or_else(|| default_feature_layer(&net))
            .ok_or_else(|| GapaError::InvalidParameter {
                what: "network has no linear layer to take features from".into(),
            })?;
        let train = read_samples(&cfg.train_data)?;
        let aug = build_augmented(cfg, &net, &points)?;
        let n = train.len();
        let width = net.width_at(feature_layer);
        let mut feats = Vec::with_capacity(n * width);
        let mut means = Vec::with_capacity(n);
        let mut epis = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for s in &train {
            let x = s.input()?;
            let (out, tapped) = net.forward_with_tap(
                std::slice::from_ref(&x),
                Some(feature_layer),
            )?;
            feats.extend_from_slice(tapped.expect("tap set")[0].data());
            means.push(out[0].get(0));
            let g = aug.propagate_vector(&x)?;
            epis.push(g.var().get(0));
            targets.push(s.target.ok_or_else(|| GapaError::InvalidParameter {
                what: format!("sample {} has no regression target", s.id),
            })?);
        }
        let features = Matrix::from_vec(n, width, feats)?;
        let nh_cfg = NoiseHeadConfig {
            hidden: cfg.noise_head.hidden,
            epochs: cfg.noise_head.epochs,
            lr: cfg.noise_head.lr,
            seed: stage_seed(cfg.seed, Stage::Attach),
        };
        let head = fit_noise_head(
            &features,
            &Vector::from_vec(targets)?,
            &Vector::from_vec(means)?,
            &Vector::from_vec(epis)?,
            &nh_cfg,
        )?;
        save_network_with_head(&net, Some(&head), &cfg.network_with_head_path())?;
        noise_head_feature_layer = Some(feature_layer);
        fitted_head = Some(head);
    }
    let _ = fitted_head;

    let manifest = ModelManifest {
        network: cfg.network.to_string_lossy().into_owned(),
        dataset_id: cfg.dataset_id.clone(),
        k: cfg.k,
        jitter: cfg.jitter,
        variant: cfg.variant,
        head: cfg.head,
        layers,
        fingerprint_hex: hex32(&expected_fp),
        noise_head_feature_layer,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(cfg.model_manifest_path(), json + "\n")?;
    Ok(manifest)
}

/// Builds the in-memory augmented network from inducing files.
fn build_augmented(
    cfg: &PipelineConfig,
    net: &NetworkSpec,
    points: &[usize],
) -> Result<AugmentedNetwork> {
    let mut gapa_layers = Vec::new();
    for &layer in points {
        let (set, index) = load_inducing_with_index(&cfg.inducing_path(layer))?;
        let tag = match net.layers()[layer] {
            LayerSpec::Activation(tag) => tag,
            _ => unreachable!("attach points index activation layers"),
        };
        gapa_layers.push(GapaLayer::with_index(tag, set, index, cfg.k, None)?);
    }
    AugmentedNetwork::new(net.clone(), gapa_layers, cfg.variant.to_core())
}

/// One prediction record, one JSON line per test sample.
#[derive(Debug, Serialize, Deserialize)]
pub struct Prediction {
    pub id: u64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
    #[serde(rename = "TU")]
    pub tu: f64,
    #[serde(rename = "AU")]
    pub au: f64,
    #[serde(rename = "EU")]
    pub eu: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    #[serde(default)]
    pub ood: bool,
}

/// Loads everything `infer`/`eval` need from the attach artifacts.
pub struct LoadedModel {
    pub net: NetworkSpec,
    pub aug: AugmentedNetwork,
    pub noise_head: Option<(NoiseHead, usize)>,
    pub manifest: ModelManifest,
}

pub fn load_model(cfg: &PipelineConfig) -> Result<LoadedModel> {
    let manifest_path = cfg.model_manifest_path();
    require_artifact(&manifest_path, "attach")?;
    let manifest: ModelManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)
        .map_err(|e| GapaError::CorruptFile {
            reason: format!("model manifest: {e}"),
        })?;
    let net = load_network(&cfg.network)?;
    let expected_fp = fingerprint(&net, &cfg.dataset_id);
    if hex32(&expected_fp) != manifest.fingerprint_hex {
        return Err(GapaError::FingerprintMismatch {
            context: "manifest vs current network/dataset",
        });
    }
    let points: Vec<usize> = manifest.layers.iter().map(|l| l.layer_index).collect();
    let aug = build_augmented(cfg, &net, &points)?;
    let noise_head = match manifest.noise_head_feature_layer {
        Some(feature_layer) => {
            let (_, head) = load_network_with_head(&cfg.network_with_head_path())?;
            let head = head.ok_or_else(|| GapaError::CorruptFile {
                reason: "manifest declares a noise head but the container has none".into(),
            })?;
            Some((head, feature_layer))
        }
        None => None,
    };
    Ok(LoadedModel {
        net,
        aug,
        noise_head,
        manifest,
    })
}

/// Stage (iv): propagate every test sample and write predictions JSONL.
pub fn cmd_infer(cfg: &PipelineConfig) -> Result<usize> {
    let model = load_model(cfg)?;
    let samples = read_samples(&cfg.test_data)?;
    let infer_seed = stage_seed(cfg.seed, Stage::Infer);
    let file = fs::File::create(cfg.predictions_path())?;
    let mut w = BufWriter::new(file);
    let mut count = 0usize;
    for s in &samples {
        let p = predict_one(cfg, &model, s, infer_seed)?;
        serde_json::to_writer(&mut w, &p).map_err(|e| GapaError::InvalidParameter {
            what: format!("serialize prediction: {e}"),
        })?;
        w.write_all(b"\n")?;
        count += 1;
    }
    w.flush()?;
    Ok(count)
}

fn predict_one(
    cfg: &PipelineConfig,
    model: &LoadedModel,
    s: &Sample,
    infer_seed: u64,
) -> Result<Prediction> {
    let x = s.input()?;
    let g = model.aug.propagate_vector(&x)?;
    let (mean, mut var) = (g.mean().clone(), g.var().clone());
    match model.net.task() {
        TaskKind::Classification | TaskKind::TokenLm => {
            let top_k = cfg.top_k.min(mean.len());
            let (dec, p_bar) = mc_entropy_decomposition(
                &mean,
                &var,
                cfg.mc_samples,
                top_k,
                sample_seed(infer_seed, s.id),
            )?;
            let probs = match model.manifest.head {
                HeadChoice::Laplace => laplace_bridge(&mean, &var)?,
                HeadChoice::Mc => p_bar,
            };
            Ok(Prediction {
                id: s.id,
                mean: mean.data().to_vec(),
                var: var.data().to_vec(),
                probs: Some(probs.data().to_vec()),
                tu: dec.total,
                au: dec.aleatoric,
                eu: dec.epistemic,
                label: s.label,
                target: s.target,
                ood: s.ood,
            })
        }
        TaskKind::Regression => {
            let epi = var.get(0);
            let ale = match &model.noise_head {
                Some((head, feature_layer)) => {
                    let (_, tapped) = model
                        .net
                        .forward_with_tap(std::slice::from_ref(&x), Some(*feature_layer))?;
                    head.predict_var(tapped.expect("tap set")[0].data())
                }
                None => 0.0,
            };
            let total = epi + ale;
            var.set(0, total);
            Ok(Prediction {
                id: s.id,
                mean: mean.data().to_vec(),
                var: var.data().to_vec(),
                probs: None,
                tu: total,
                au: ale,
                eu: epi,
                label: s.label,
                target: s.target,
                ood: s.ood,
            })
        }
    }
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line).map_err(|e| GapaError::CorruptFile {
                reason: format!("predictions line {}: {e}", lineno + 1),
            })?,
        );
    }
    if out.is_empty() {
        return Err(GapaError::InvalidParameter {
            what: format!("no predictions in {}", path.display()),
        });
    }
    Ok(out)
}

/// Stage (v): score the predictions file; emits a flat metric → value map.
pub fn cmd_eval(cfg: &PipelineConfig) -> Result<BTreeMap<String, serde_json::Value>> {
    let model = load_model(cfg)?;
    let preds_path = cfg.predictions_path();
    require_artifact(&preds_path, "infer")?;
    let preds = read_predictions(&preds_path)?;
    let samples = read_samples(&cfg.test_data)?;
    let by_id: BTreeMap<u64, &Sample> = samples.iter().map(|s| (s.id, s)).collect();

    let mut report: BTreeMap<String, serde_json::Value> = BTreeMap::new();
    let num = |v: f64| serde_json::Value::from(v);

    // Mean preservation: the propagated mean path must equal the frozen
    // forward pass bit-for-bit on every sample.
    let mut preserved = true;
    for p in &preds {
        let s = by_id.get(&p.id).ok_or_else(|| GapaError::InvalidParameter {
            what: format!("prediction id {} missing from the test set", p.id),
        })?;
        let want = model.net.forward_vector(&s.input()?)?;
        if want.data() != &p.mean[..] {
            preserved = false;
            break;
        }
    }
    report.insert(
        "mean_preservation".into(),
        serde_json::Value::from(if preserved { "pass" } else { "fail" }),
    );

    match model.net.task() {
        TaskKind::Classification | TaskKind::TokenLm => {
            let labeled: Vec<&Prediction> =
                preds.iter().filter(|p| p.label.is_some() && !p.ood).collect();
            if !labeled.is_empty() {
                // Accuracy from the argmax of the mean logits: the point
                // prediction, which GAPA preserves.
                let mut correct = 0usize;
                for p in &labeled {
                    let arg = argmax(&p.mean);
                    if arg == p.label.unwrap() {
                        correct += 1;
                    }
                }
                report.insert("accuracy".into(), num(correct as f64 / labeled.len() as f64));

                let c = labeled[0].mean.len();
                let probs_matrix = Matrix::from_vec(
                    labeled.len(),
                    c,
                    labeled
                        .iter()
                        .flat_map(|p| p.probs.clone().expect("classification probs"))
                        .collect(),
                )?;
                let labels: Vec<usize> = labeled.iter().map(|p| p.label.unwrap()).collect();
                let nll = -labeled
                    .iter()
                    .map(|p| {
                        let probs = p.probs.as_ref().expect("classification probs");
                        probs[p.label.unwrap()].max(1e-300).ln()
                    })
                    .sum::<f64>()
                    / labeled.len() as f64;
                report.insert("nll".into(), num(nll));
                report.insert("ece".into(), num(metrics::ece(&probs_matrix, &labels, 15)?));
            }
            // OOD detection: entropy (TU) and BALD (EU) scores against the
            // far-field flag, when both populations are present.
            let flags: Vec<bool> = preds.iter().map(|p| p.ood).collect();
            if flags.iter().any(|f| *f) && flags.iter().any(|f| !*f) {
                let tu: Vec<f64> = preds.iter().map(|p| p.tu).collect();
                let eu: Vec<f64> = preds.iter().map(|p| p.eu).collect();
                report.insert(
                    "ood_auroc_entropy".into(),
                    num(metrics::auroc(&tu, &flags)?),
                );
                report.insert("ood_auroc_bald".into(), num(metrics::auroc(&eu, &flags)?));
            }
        }
        TaskKind::Regression => {
            let targeted: Vec<&Prediction> =
                preds.iter().filter(|p| p.target.is_some()).collect();
            let y: Vec<f64> = targeted.iter().map(|p| p.target.unwrap()).collect();
            let mu: Vec<f64> = targeted.iter().map(|p| p.mean[0]).collect();
            let s2: Vec<f64> = targeted.iter().map(|p| p.var[0].max(1e-12)).collect();
            let sigma: Vec<f64> = s2.iter().map(|v| v.sqrt()).collect();
            report.insert("gaussian_nll".into(), num(metrics::gaussian_nll(&y, &mu, &s2)?));
            let crps = y
                .iter()
                .zip(&mu)
                .zip(&sigma)
                .map(|((yi, mi), si)| metrics::crps_gaussian(*yi, *mi, *si))
                .sum::<Result<f64>>()?
                / y.len() as f64;
            report.insert("crps".into(), num(crps));
            report.insert(
                "cqm".into(),
                num(metrics::cqm(&y, &mu, &sigma, &metrics::default_cqm_levels())?),
            );
            let rmse = (y
                .iter()
                .zip(&mu)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / y.len() as f64)
                .sqrt();
            report.insert("rmse".into(), num(rmse));

            // Homoscedastic reference: constant variance fit by MLE on the
            // train residuals of the same frozen backbone.
            let train = read_samples(&cfg.train_data)?;
            let mut resid2 = 0.0;
            let mut n = 0usize;
            for s in &train {
                if let Some(t) = s.target {
                    let m = model.net.forward_vector(&s.input()?)?.get(0);
                    resid2 += (t - m) * (t - m);
                    n += 1;
                }
            }
            let const_var = (resid2 / n as f64).max(1e-12);
            let baseline = metrics::gaussian_nll(&y, &mu, &vec![const_var; y.len()])?;
            report.insert("gaussian_nll_homoscedastic_baseline".into(), num(baseline));
        }
    }

    for stage in [Stage::Cache, Stage::Induce, Stage::Attach, Stage::Infer] {
        report.insert(
            format!("seed_{}", stage.name()),
            serde_json::Value::from(stage_seed(cfg.seed, stage)),
        );
    }
    report.insert("seed_root".into(), serde_json::Value::from(cfg.seed));
    report.insert(
        "n_predictions".into(),
        serde_json::Value::from(preds.len() as u64),
    );

    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(cfg.metrics_path(), json + "\n")?;
    Ok(report)
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut arg = 0;
    for (i, v) in xs.iter().enumerate().skip(1) {
        if *v > xs[arg] {
            arg = i;
        }
    }
    arg
}

//! End-to-end orchestration: train -> morph -> score -> calibrate ->
//! detect -> evaluate, with a versioned on-disk result bundle.
//!
//! Bundle layout under `<output_dir>/<dataset>-c<class>-s<seed>/`:
//!
//! ```text
//! config.toml            effective configuration
//! manifest.json          seed, split indices, dataset checksums
//! checkpoints/*.ckpt     detector VAE + plain-VAE baseline
//! logs/train_*.csv       step,l_r,l_kl,l_tc,l_reg,total
//! sc/<split>_<metric>.csv  structure-consistency vectors (cached)
//! thresholds_<metric>.toml per-code intervals at the default alpha
//! scores_<method>.csv    sample_id,label,score rows per scorer
//! fig3.csv / fig3.svg    threshold sweeps per metric
//! fig4.csv / fig4.svg    validation-size ablation
//! roc_<metric>.svg       ROC curves
//! table2.csv             AUC comparison across methods
//! gallery/               flagged clean samples (PGM/PPM)
//! ```
//!
//! Training checkpoints and SC caches are reused when their metadata and
//! checkpoint fingerprints match, so reruns and downstream commands are
//! incremental.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use oiad_core::baselines::{
    flatten_images, gmm_fit_bic, kde_select_bandwidth, pca_fit, vae_baseline_scores, GmmModel,
    KdeModel, PcaModel,
};
use oiad_core::consistency::{sc_vector, Metric, SCVector};
use oiad_core::detector::{
    calibrate, decide, sweep_alpha, ThresholdConfig, ThresholdMode, Verdict,
};
use oiad_core::eval::{auc_roc, confusion, Confusion, RocCurve};
use oiad_core::morph::{
    estimate_ranges, generate_all_morphs, ranges_for_codes, select_codes, CodeRange, MorphParams,
};
use oiad_core::nn::DetectorVae;
use oiad_core::train::{epoch_batch_pairs, TrainConfig, TrainState};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{fingerprint, load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::data::{
    load_dataset, make_splits, sha256_hex, write_manifest, ExperimentSplits, ImageBatch, Manifest,
    SplitSpec,
};
use crate::gallery::write_gallery;
use crate::report::{write_csv, write_svg_lines};

pub fn run_id(config: &RunConfig) -> String {
    format!(
        "{}-c{}-s{}",
        config.dataset, config.normal_class, config.seed
    )
}

/// Trains (or continues training) a model, streaming the loss log.
pub fn train_model(
    state: &mut TrainState<f32>,
    tc: &TrainConfig,
    train_data: &ImageBatch,
    start_epoch: u32,
    log_path: &Path,
    tag: &str,
) -> Result<u32> {
    use std::io::Write;
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(log_path)
        .with_context(|| format!("open training log {log_path:?}"))?;
    if start_epoch == 0 {
        writeln!(log, "step,l_r,l_kl,l_tc,l_reg,total").ok();
    }
    let n = train_data.len();
    let t0 = Instant::now();
    for epoch in start_epoch as usize..tc.epochs {
        let pairs = epoch_batch_pairs(n, tc.batch_size, tc.seed, epoch as u64);
        if pairs.is_empty() {
            bail!(
                "training set of {n} samples cannot form two batches of {}",
                tc.batch_size
            );
        }
        let mut epoch_lr = 0.0;
        let mut epoch_total = 0.0;
        for (a, b) in &pairs {
            let xa = train_data.data.gather_rows(a);
            let xb = train_data.data.gather_rows(b);
            let stats = state
                .train_step(&xa, &xb, tc)
                .with_context(|| format!("{tag}: training aborted at step {}", state.step))?;
            let bd = stats.breakdown;
            writeln!(
                log,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                state.step - 1,
                bd.l_r,
                bd.l_kl,
                bd.l_tc,
                bd.l_reg,
                bd.total
            )
            .ok();
            epoch_lr += bd.l_r;
            epoch_total += bd.total;
        }
        let steps = pairs.len() as f64;
        eprintln!(
            "[{tag}] epoch {:>3}/{} l_r {:>9.4} total {:>9.4} ({:.0}s)",
            epoch + 1,
            tc.epochs,
            epoch_lr / steps,
            epoch_total / steps,
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(tc.epochs as u32)
}

/// Loads a matching checkpoint or trains from scratch (continuing a
/// partially-trained checkpoint when epochs were raised).
pub fn load_or_train(
    ckpt_path: &Path,
    tc: &TrainConfig,
    train_data: &ImageBatch,
    log_path: &Path,
    tag: &str,
) -> Result<TrainState<f32>> {
    let arch = tc.dataset.arch();
    let (mut state, start_epoch) = match load_checkpoint(ckpt_path) {
        Ok((state, meta)) if meta_matches(&meta, tc) => {
            if meta.epoch as usize >= tc.epochs {
                eprintln!("[{tag}] reusing checkpoint {ckpt_path:?} (epoch {})", meta.epoch);
                return Ok(state);
            }
            eprintln!(
                "[{tag}] resuming {ckpt_path:?} from epoch {} to {}",
                meta.epoch, tc.epochs
            );
            (state, meta.epoch)
        }
        _ => {
            let _ = fs::remove_file(log_path);
            (TrainState::<f32>::new(arch, tc), 0)
        }
    };
    let epoch = train_model(&mut state, tc, train_data, start_epoch, log_path, tag)?;
    let meta = CheckpointMeta::new(tc, &arch, state.step, epoch);
    save_checkpoint(&state, &meta, ckpt_path)
        .with_context(|| format!("save checkpoint {ckpt_path:?}"))?;
    Ok(state)
}

fn meta_matches(meta: &CheckpointMeta, tc: &TrainConfig) -> bool {
    let mut a = meta.clone();
    a.step = 0;
    a.epoch = 0;
    a.epochs = tc.epochs;
    let b = CheckpointMeta::new(tc, &tc.dataset.arch(), 0, 0);
    a == b
}

/// SC vectors for one split under all three metrics.
#[derive(Clone, Debug, Default)]
pub struct ScBundle {
    pub mse: Vec<SCVector>,
    pub loss: Vec<SCVector>,
    pub ssim: Vec<SCVector>,
}

impl ScBundle {
    pub fn get(&self, metric: Metric) -> &Vec<SCVector> {
        match metric {
            Metric::Mse => &self.mse,
            Metric::Loss => &self.loss,
            Metric::Ssim => &self.ssim,
        }
    }

    fn push(&mut self, metric: Metric, sc: SCVector) {
        match metric {
            Metric::Mse => self.mse.push(sc),
            Metric::Loss => self.loss.push(sc),
            Metric::Ssim => self.ssim.push(sc),
        }
    }

    pub fn len(&self) -> usize {
        self.mse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mse.is_empty()
    }
}

/// Morphs every sample of a batch and scores it under all three metrics.
/// `id_base` separates RNG streams between splits.
pub fn compute_sc_bundle(
    model: &DetectorVae<f32>,
    batch: &ImageBatch,
    selected: &[CodeRange],
    params: &MorphParams,
    seed: u64,
    id_base: u64,
    tag: &str,
) -> Result<ScBundle> {
    let mut bundle = ScBundle::default();
    let t0 = Instant::now();
    for i in 0..batch.len() {
        let x = batch.data.gather_rows(&[i]);
        let morphs = generate_all_morphs(model, &x, selected, params, seed, id_base + i as u64);
        for metric in Metric::ALL {
            let sc = sc_vector(&x, &morphs, metric, model)
                .with_context(|| format!("{tag}: SC scoring failed on sample {i}"))?;
            bundle.push(metric, sc);
        }
        if (i + 1) % 50 == 0 || i + 1 == batch.len() {
            eprintln!(
                "[{tag}] scored {}/{} samples ({:.0}s)",
                i + 1,
                batch.len(),
                t0.elapsed().as_secs_f64()
            );
        }
    }
    Ok(bundle)
}

#[derive(Serialize, Deserialize, PartialEq, Debug)]
struct ScCacheMeta {
    fingerprint: String,
    codes: Vec<usize>,
    seed: u64,
    delta_r_frac: f64,
    batch: usize,
    morphs_per_code: usize,
    r0: f64,
    max_iters: usize,
    fractile_p: f64,
    counts: Vec<(String, usize)>,
}

fn sc_csv_path(dir: &Path, split: &str, metric: Metric) -> PathBuf {
    dir.join(format!("{split}_{}.csv", metric.name()))
}

fn write_sc_split(dir: &Path, split: &str, bundle: &ScBundle) -> Result<()> {
    for metric in Metric::ALL {
        let rows: Vec<String> = bundle
            .get(metric)
            .iter()
            .enumerate()
            .map(|(i, sc)| oiad_core::consistency::sc_csv_row(i, sc))
            .collect();
        let k = bundle.get(metric).first().map(|s| s.k()).unwrap_or(0);
        let mut header = String::from("sample_id,metric");
        for j in 0..k {
            header.push_str(&format!(",code_{j}"));
        }
        header.push_str(",sentinel_mask");
        write_csv(&sc_csv_path(dir, split, metric), &header, &rows)?;
    }
    Ok(())
}

fn read_sc_split(dir: &Path, split: &str, codes: &[usize]) -> Result<ScBundle> {
    let mut bundle = ScBundle::default();
    for metric in Metric::ALL {
        let path = sc_csv_path(dir, split, metric);
        let text = fs::read_to_string(&path).with_context(|| format!("read {path:?}"))?;
        for line in text.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != codes.len() + 3 {
                bail!("malformed SC row in {path:?}");
            }
            let mask = fields[fields.len() - 1];
            let sentinels: Vec<bool> = mask.chars().map(|c| c == '1').collect();
            let scores: Vec<f64> = fields[2..2 + codes.len()]
                .iter()
                .map(|s| s.parse::<f64>().unwrap_or(f64::NAN))
                .collect();
            bundle.push(
                metric,
                SCVector {
                    metric,
                    codes: codes.to_vec(),
                    scores,
                    sentinels,
                },
            );
        }
    }
    Ok(bundle)
}

/// Threshold persistence: TOML with the checkpoint fingerprint and the
/// per-code normal value ranges (so `detect` can morph new inputs without
/// re-deriving the validation scaffold).
#[derive(Serialize, Deserialize)]
pub struct ThresholdFile {
    pub metric: String,
    pub alpha: f64,
    pub one_sided: bool,
    pub fingerprint: String,
    pub codes: Vec<usize>,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub range_low: Vec<f64>,
    pub range_high: Vec<f64>,
    pub degenerate_codes: Vec<usize>,
}

pub fn thresholds_to_file(th: &ThresholdConfig, selected: &[CodeRange], path: &Path) -> Result<()> {
    assert_eq!(selected.len(), th.codes.len());
    let tf = ThresholdFile {
        metric: th.metric.name().to_string(),
        alpha: th.alpha,
        one_sided: th.mode == ThresholdMode::OneSided,
        fingerprint: th.fingerprint.clone(),
        codes: th.codes.clone(),
        low: th.intervals.iter().map(|&(l, _)| l).collect(),
        high: th.intervals.iter().map(|&(_, h)| h).collect(),
        range_low: selected.iter().map(|r| r.low).collect(),
        range_high: selected.iter().map(|r| r.high).collect(),
        degenerate_codes: th.degenerate_codes.clone(),
    };
    fs::write(path, toml::to_string_pretty(&tf)?).with_context(|| format!("write {path:?}"))?;
    Ok(())
}

pub fn thresholds_from_file(path: &Path) -> Result<(ThresholdConfig, Vec<CodeRange>)> {
    let text = fs::read_to_string(path).with_context(|| format!("read thresholds {path:?}"))?;
    let tf: ThresholdFile = toml::from_str(&text).context("parse thresholds")?;
    let metric = Metric::parse(&tf.metric)
        .with_context(|| format!("unknown metric {:?} in {path:?}", tf.metric))?;
    let selected: Vec<CodeRange> = tf
        .codes
        .iter()
        .zip(tf.range_low.iter().zip(&tf.range_high))
        .map(|(&code, (&low, &high))| CodeRange { code, low, high })
        .collect();
    Ok((
        ThresholdConfig {
            metric,
            alpha: tf.alpha,
            mode: if tf.one_sided {
                ThresholdMode::OneSided
            } else {
                ThresholdMode::TwoSided
            },
            codes: tf.codes,
            intervals: tf.low.into_iter().zip(tf.high).collect(),
            degenerate_codes: tf.degenerate_codes,
            fingerprint: tf.fingerprint,
        },
        selected,
    ))
}

/// Per-metric evaluation of one trained detector.
pub struct MetricEval {
    pub metric: Metric,
    pub thresholds: ThresholdConfig,
    pub cle_scores: Vec<f64>,
    pub ano_scores: Vec<f64>,
    pub confusion_default: Confusion,
    pub roc: RocCurve,
    pub sweep: Vec<oiad_core::detector::SweepRow>,
}

pub struct GalleryStats {
    pub n: usize,
    pub flagged: usize,
    pub alpha: f64,
    pub min_flagged_score: f64,
    pub max_unflagged_score: f64,
}

pub struct ExperimentResult {
    pub run_dir: PathBuf,
    pub fingerprint: String,
    pub codes: Vec<usize>,
    pub oiad: Vec<MetricEval>,
    pub vae_auc: f64,
    pub kde_auc: f64,
    pub gmm_auc: f64,
    pub gallery: GalleryStats,
    /// (val_size, metric, row at default alpha)
    pub fig4: Vec<(usize, Metric, oiad_core::detector::SweepRow)>,
}

impl ExperimentResult {
    pub fn metric_eval(&self, metric: Metric) -> &MetricEval {
        self.oiad.iter().find(|m| m.metric == metric).unwrap()
    }
}

fn cap_batch(batch: &ImageBatch, cap: usize) -> ImageBatch {
    if cap == 0 || cap >= batch.len() {
        batch.clone()
    } else {
        batch.gather(&(0..cap).collect::<Vec<_>>())
    }
}

/// Anomaly scores for a split against fixed thresholds.
fn scores_for(sc: &[SCVector], th: &ThresholdConfig) -> Result<Vec<f64>> {
    sc.iter()
        .map(|v| Ok(decide(v, th)?.anomaly_score))
        .collect()
}

/// The full experiment for one (dataset, class): train both models, score
/// the splits, calibrate, sweep, run the baselines, emit the bundle.
pub fn run_experiment(config: &RunConfig) -> Result<ExperimentResult> {
    config.validate().context("config validation")?;
    config
        .check_dataset_present()
        .context("dataset availability")?;
    let dataset = config.dataset_id()?;
    let tc = config.train_config()?;
    let run_dir = config.output_dir.join(run_id(config));
    for sub in ["checkpoints", "logs", "sc", "gallery"] {
        fs::create_dir_all(run_dir.join(sub)).with_context(|| format!("create {sub}"))?;
    }
    crate::config::echo_config(config, &run_dir.join("config.toml"))?;

    // --- Data.
    eprintln!("[data] loading {}", config.dataset);
    let full = load_dataset(dataset, &config.data_dir).context("load dataset")?;
    let spec = SplitSpec::new(config.normal_class, config.seed);
    let (splits, indices) = make_splits(&full, &spec, config.max_normals).context("make splits")?;
    let checksums = crate::data::dataset_files(dataset, &config.data_dir)
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_hex(p)?)))
        .collect::<Result<Vec<_>, crate::data::DataError>>()?;
    write_manifest(
        &Manifest {
            dataset: config.dataset.clone(),
            normal_class: config.normal_class,
            seed: config.seed,
            train_frac: spec.train_frac,
            cle_frac: spec.cle_frac,
            val_frac: spec.val_frac,
            max_normals: config.max_normals,
            checksums,
            indices,
        },
        &run_dir.join("manifest.json"),
    )?;
    eprintln!(
        "[data] train {} cle {} ano {} val {}",
        splits.train.len(),
        splits.cle.len(),
        splits.ano.len(),
        splits.val.len()
    );

    // --- Train the detector VAE and the plain-VAE baseline.
    let oiad_ckpt = run_dir.join("checkpoints/oiad.ckpt");
    let state = load_or_train(
        &oiad_ckpt,
        &tc,
        &splits.train,
        &run_dir.join("logs/train_oiad.csv"),
        "oiad",
    )?;
    let fp = fingerprint(&oiad_ckpt)?;

    let mut vae_tc = TrainConfig::plain_vae(dataset, config.normal_class, config.seed);
    vae_tc.epochs = tc.epochs;
    vae_tc.batch_size = tc.batch_size;
    vae_tc.lr_vae = tc.lr_vae;
    let vae_state = load_or_train(
        &run_dir.join("checkpoints/vae_baseline.ckpt"),
        &vae_tc,
        &splits.train,
        &run_dir.join("logs/train_vae.csv"),
        "vae",
    )?;

    // --- Morph scaffolding.
    let params = config.morph_params();
    let ranges = estimate_ranges(&state.model.encoder, &splits.val.data, params.fractile_p)
        .context("estimate code ranges")?;
    let codes = select_codes(&state.model, &splits.val.data, config.detector.k);
    let selected = ranges_for_codes(&ranges, &codes);
    eprintln!("[morph] selected codes {codes:?}");

    let val_sc_batch = cap_batch(&splits.val, config.eval.val_cap);
    let cle_batch = cap_batch(&splits.cle, config.eval.eval_cap);
    let ano_batch = cap_batch(&splits.ano, config.eval.eval_cap);

    // --- SC vectors (cached by checkpoint fingerprint + morph params).
    let sc_dir = run_dir.join("sc");
    let cache_meta = ScCacheMeta {
        fingerprint: fp.clone(),
        codes: codes.clone(),
        seed: config.seed,
        delta_r_frac: params.delta_r_frac,
        batch: params.batch,
        morphs_per_code: params.morphs_per_code,
        r0: params.r0,
        max_iters: params.max_iters,
        fractile_p: params.fractile_p,
        counts: vec![
            ("val".into(), val_sc_batch.len()),
            ("cle".into(), cle_batch.len()),
            ("ano".into(), ano_batch.len()),
        ],
    };
    let meta_path = sc_dir.join("meta.toml");
    let cache_valid = fs::read_to_string(&meta_path)
        .ok()
        .and_then(|t| toml::from_str::<ScCacheMeta>(&t).ok())
        .map(|m| m == cache_meta)
        .unwrap_or(false);

    let (val_sc, cle_sc, ano_sc) = if cache_valid {
        eprintln!("[sc] reusing cached SC vectors");
        (
            read_sc_split(&sc_dir, "val", &codes)?,
            read_sc_split(&sc_dir, "cle", &codes)?,
            read_sc_split(&sc_dir, "ano", &codes)?,
        )
    } else {
        let val_sc = compute_sc_bundle(
            &state.model,
            &val_sc_batch,
            &selected,
            &params,
            config.seed,
            0x0100_0000,
            "sc/val",
        )?;
        let cle_sc = compute_sc_bundle(
            &state.model,
            &cle_batch,
            &selected,
            &params,
            config.seed,
            0x0200_0000,
            "sc/cle",
        )?;
        let ano_sc = compute_sc_bundle(
            &state.model,
            &ano_batch,
            &selected,
            &params,
            config.seed,
            0x0300_0000,
            "sc/ano",
        )?;
        write_sc_split(&sc_dir, "val", &val_sc)?;
        write_sc_split(&sc_dir, "cle", &cle_sc)?;
        write_sc_split(&sc_dir, "ano", &ano_sc)?;
        fs::write(&meta_path, toml::to_string_pretty(&cache_meta)?)?;
        (val_sc, cle_sc, ano_sc)
    };

    let mode = if config.detector.one_sided {
        ThresholdMode::OneSided
    } else {
        ThresholdMode::TwoSided
    };

    // --- Per-metric calibration, scoring, sweep.
    let mut evals = Vec::new();
    let mut fig3_rows: Vec<String> = Vec::new();
    for metric in Metric::ALL {
        let th = calibrate(val_sc.get(metric), config.detector.alpha, metric, mode, &fp)
            .with_context(|| format!("calibrate {}", metric.name()))?;
        if !th.degenerate_codes.is_empty() {
            eprintln!(
                "[calibrate/{}] warning: degenerate intervals widened for codes {:?}",
                metric.name(),
                th.degenerate_codes
            );
        }
        thresholds_to_file(
            &th,
            &selected,
            &run_dir.join(format!("thresholds_{}.toml", metric.name())),
        )?;

        let cle_scores = scores_for(cle_sc.get(metric), &th)?;
        let ano_scores = scores_for(ano_sc.get(metric), &th)?;
        let flagged: Vec<bool> = cle_scores
            .iter()
            .chain(&ano_scores)
            .map(|&s| s > 0.0)
            .collect();
        let labels: Vec<bool> = std::iter::repeat(false)
            .take(cle_scores.len())
            .chain(std::iter::repeat(true).take(ano_scores.len()))
            .collect();
        let conf = confusion(&flagged, &labels);

        let all_scores: Vec<f64> = cle_scores.iter().chain(&ano_scores).copied().collect();
        let roc = auc_roc(&all_scores, &labels);

        let score_rows: Vec<String> = all_scores
            .iter()
            .zip(&labels)
            .enumerate()
            .map(|(i, (s, &l))| format!("{i},{},{s}", l as u8))
            .collect();
        write_csv(
            &run_dir.join(format!("scores_oiad_{}.csv", metric.name())),
            "sample_id,label,score",
            &score_rows,
        )?;
        let roc_pts: Vec<(f64, f64)> = roc.points.clone();
        write_svg_lines(
            &run_dir.join(format!("roc_{}.svg", metric.name())),
            &format!("ROC {} (AUC {:.3})", metric.name(), roc.auc),
            "FPR",
            "TPR",
            &[(metric.name().to_string(), roc_pts)],
        )?;

        let sweep = sweep_alpha(
            val_sc.get(metric),
            cle_sc.get(metric),
            ano_sc.get(metric),
            &config.eval.alpha_grid,
            metric,
            mode,
        )?;
        for row in &sweep {
            fig3_rows.push(format!(
                "{},{},{:.6},{:.6},{:.6}",
                metric.name(),
                row.alpha,
                row.tp,
                row.tn,
                row.accuracy
            ));
        }
        eprintln!(
            "[eval/{}] AUC {:.4}, default-alpha TP {:.3} TN {:.3}",
            metric.name(),
            roc.auc,
            conf.tp_rate,
            conf.tn_rate
        );
        evals.push(MetricEval {
            metric,
            thresholds: th,
            cle_scores,
            ano_scores,
            confusion_default: conf,
            roc,
            sweep,
        });
    }
    write_csv(
        &run_dir.join("fig3.csv"),
        "metric,alpha,tp,tn,accuracy",
        &fig3_rows,
    )?;
    let fig3_series: Vec<(String, Vec<(f64, f64)>)> = evals
        .iter()
        .flat_map(|e| {
            [
                (
                    format!("TP {}", e.metric.name()),
                    e.sweep.iter().map(|r| (r.alpha, r.tp)).collect::<Vec<_>>(),
                ),
                (
                    format!("TN {}", e.metric.name()),
                    e.sweep.iter().map(|r| (r.alpha, r.tn)).collect::<Vec<_>>(),
                ),
            ]
        })
        .collect();
    write_svg_lines(
        &run_dir.join("fig3.svg"),
        &format!("Sweep {} class {}", config.dataset, config.normal_class),
        "alpha",
        "rate",
        &fig3_series,
    )?;

    // --- Validation-size ablation (re-calibration on nested VAL subsets).
    let mut fig4 = Vec::new();
    let mut fig4_rows = Vec::new();
    for &size in &config.eval.val_sizes {
        let take = if size == 0 || size > val_sc.len() {
            val_sc.len()
        } else {
            size
        };
        if take < oiad_core::detector::MIN_CALIBRATION_SAMPLES {
            continue;
        }
        for metric in Metric::ALL {
            let subset: Vec<SCVector> = val_sc.get(metric)[..take].to_vec();
            let rows = sweep_alpha(
                &subset,
                cle_sc.get(metric),
                ano_sc.get(metric),
                &[config.detector.alpha],
                metric,
                mode,
            )?;
            let row = rows[0];
            fig4.push((take, metric, row));
            fig4_rows.push(format!(
                "{take},{},{:.6},{:.6},{:.6}",
                metric.name(),
                row.tp,
                row.tn,
                row.accuracy
            ));
        }
    }
    write_csv(
        &run_dir.join("fig4.csv"),
        "val_size,metric,tp,tn,accuracy",
        &fig4_rows,
    )?;
    let fig4_series: Vec<(String, Vec<(f64, f64)>)> = Metric::ALL
        .iter()
        .map(|&m| {
            (
                format!("TP {}", m.name()),
                fig4.iter()
                    .filter(|(_, mm, _)| *mm == m)
                    .map(|(s, _, r)| (*s as f64, r.tp))
                    .collect(),
            )
        })
        .collect();
    write_svg_lines(
        &run_dir.join("fig4.svg"),
        "Validation-size ablation",
        "validation samples",
        "TP rate",
        &fig4_series,
    )?;

    // --- Baselines.
    eprintln!("[baseline] plain VAE scoring");
    let vae_cle = vae_baseline_scores(&vae_state.model, &cle_batch.data);
    let vae_ano = vae_baseline_scores(&vae_state.model, &ano_batch.data);
    let labels: Vec<bool> = std::iter::repeat(false)
        .take(vae_cle.len())
        .chain(std::iter::repeat(true).take(vae_ano.len()))
        .collect();
    let vae_scores: Vec<f64> = vae_cle.iter().chain(&vae_ano).copied().collect();
    let vae_auc = auc_roc(&vae_scores, &labels).auc;
    let rows: Vec<String> = vae_scores
        .iter()
        .zip(&labels)
        .enumerate()
        .map(|(i, (s, &l))| format!("{i},{},{s}", l as u8))
        .collect();
    write_csv(&run_dir.join("scores_vae.csv"), "sample_id,label,score", &rows)?;

    eprintln!("[baseline] PCA + KDE / GMM");
    let (kde_auc, gmm_auc) = pca_baselines(config, &splits, &cle_batch, &ano_batch, &run_dir)?;

    // --- Unlabeled-scenario gallery: flagged clean samples at the default
    // calibration, under the configured metric.
    let gal_metric = config.metric()?;
    let gal_th = &evals
        .iter()
        .find(|e| e.metric == gal_metric)
        .unwrap()
        .thresholds;
    let mut picks = Vec::new();
    let mut min_flagged = f64::INFINITY;
    let mut max_unflagged: f64 = 0.0;
    for (i, sc) in cle_sc.get(gal_metric).iter().enumerate() {
        let rep = decide(sc, gal_th)?;
        if rep.verdict == Verdict::Anomalous {
            picks.push((i, rep.anomaly_score));
            min_flagged = min_flagged.min(rep.anomaly_score);
        } else {
            max_unflagged = max_unflagged.max(rep.anomaly_score);
        }
    }
    write_gallery(&cle_batch, &picks, &run_dir.join("gallery"))?;
    let gallery = GalleryStats {
        n: cle_batch.len(),
        flagged: picks.len(),
        alpha: config.detector.alpha,
        min_flagged_score: min_flagged,
        max_unflagged_score: max_unflagged,
    };
    eprintln!(
        "[gallery] flagged {}/{} clean samples at alpha {}",
        gallery.flagged, gallery.n, gallery.alpha
    );

    // --- Table II analogue.
    let mut t2 = Vec::new();
    let class = config.normal_class;
    let ds = &config.dataset;
    t2.push(format!("{ds},{class},kde,{kde_auc:.4}"));
    t2.push(format!("{ds},{class},ocsvm,na"));
    t2.push(format!("{ds},{class},gmm,{gmm_auc:.4}"));
    t2.push(format!("{ds},{class},vae,{vae_auc:.4}"));
    t2.push(format!("{ds},{class},dcae,na"));
    for e in &evals {
        t2.push(format!("{ds},{class},oiad_{},{:.4}", e.metric.name(), e.roc.auc));
    }
    write_csv(&run_dir.join("table2.csv"), "dataset,class,method,auc", &t2)?;

    Ok(ExperimentResult {
        run_dir,
        fingerprint: fp,
        codes,
        oiad: evals,
        vae_auc,
        kde_auc,
        gmm_auc,
        gallery,
        fig4,
    })
}

/// PCA projection + KDE and GMM baselines; model selection on VAL held-out
/// log-likelihood (KDE bandwidth and PCA width) and BIC (GMM components).
fn pca_baselines(
    config: &RunConfig,
    splits: &ExperimentSplits,
    cle_batch: &ImageBatch,
    ano_batch: &ImageBatch,
    run_dir: &Path,
) -> Result<(f64, f64)> {
    let train_flat = flatten_images(&splits.train.data);
    let val_flat = flatten_images(&splits.val.data);
    let cle_flat = flatten_images(&cle_batch.data);
    let ano_flat = flatten_images(&ano_batch.data);
    let d = train_flat.row_len();

    let max_q = config
        .baseline
        .pca_dims
        .iter()
        .copied()
        .max()
        .unwrap_or(100)
        .min(d);
    let t0 = Instant::now();
    let pca_full = pca_fit(&train_flat, max_q);
    eprintln!("[baseline] PCA fit ({:.0}s)", t0.elapsed().as_secs_f64());

    let mut best_kde: Option<(f64, usize, KdeModel, PcaModel)> = None;
    let mut best_gmm: Option<(f64, usize, GmmModel, PcaModel)> = None;
    for &q in &config.baseline.pca_dims {
        let q = q.min(d).min(max_q);
        let pca = pca_full.truncated(q);
        let train_p = pca.project(&train_flat);
        let val_p = pca.project(&val_flat);

        let kde = kde_select_bandwidth(&train_p, &val_p);
        let kde_ll = kde.mean_log_density(&val_p);
        let kde_h = kde.bandwidth;
        if best_kde.as_ref().map(|(b, ..)| kde_ll > *b).unwrap_or(true) {
            best_kde = Some((kde_ll, q, kde, pca.clone()));
        }

        let gmm = gmm_fit_bic(
            &train_p,
            config.baseline.gmm_components_min..=config.baseline.gmm_components_max,
            config.seed,
        )
        .context("GMM EM failed")?;
        let gmm_ll: f64 = (0..val_p.rows())
            .map(|i| gmm.log_likelihood(val_p.row(i)))
            .sum::<f64>()
            / val_p.rows().max(1) as f64;
        let gmm_c = gmm.weights.len();
        if best_gmm.as_ref().map(|(b, ..)| gmm_ll > *b).unwrap_or(true) {
            best_gmm = Some((gmm_ll, q, gmm, pca.clone()));
        }
        eprintln!(
            "[baseline] q={q}: KDE h={kde_h} ll {kde_ll:.2}; GMM c={gmm_c} ll {gmm_ll:.2} ({:.0}s)",
            t0.elapsed().as_secs_f64()
        );
    }

    let labels: Vec<bool> = std::iter::repeat(false)
        .take(cle_flat.rows())
        .chain(std::iter::repeat(true).take(ano_flat.rows()))
        .collect();

    let (_, kq, kde, kpca) = best_kde.unwrap();
    let cle_p = kpca.project(&cle_flat);
    let ano_p = kpca.project(&ano_flat);
    let kde_scores: Vec<f64> = (0..cle_p.rows())
        .map(|i| kde.score(cle_p.row(i)))
        .chain((0..ano_p.rows()).map(|i| kde.score(ano_p.row(i))))
        .collect();
    let kde_auc = auc_roc(&kde_scores, &labels).auc;
    let rows: Vec<String> = kde_scores
        .iter()
        .zip(&labels)
        .enumerate()
        .map(|(i, (s, &l))| format!("{i},{},{s}", l as u8))
        .collect();
    write_csv(&run_dir.join("scores_kde.csv"), "sample_id,label,score", &rows)?;

    let (_, gq, gmm, gpca) = best_gmm.unwrap();
    let cle_p = gpca.project(&cle_flat);
    let ano_p = gpca.project(&ano_flat);
    let gmm_scores: Vec<f64> = (0..cle_p.rows())
        .map(|i| gmm.score(cle_p.row(i)))
        .chain((0..ano_p.rows()).map(|i| gmm.score(ano_p.row(i))))
        .collect();
    let gmm_auc = auc_roc(&gmm_scores, &labels).auc;
    let rows: Vec<String> = gmm_scores
        .iter()
        .zip(&labels)
        .enumerate()
        .map(|(i, (s, &l))| format!("{i},{},{s}", l as u8))
        .collect();
    write_csv(&run_dir.join("scores_gmm.csv"), "sample_id,label,score", &rows)?;

    eprintln!(
        "[baseline] KDE q={kq} AUC {kde_auc:.4}; GMM q={gq} c={} AUC {gmm_auc:.4}",
        gmm.weights.len()
    );
    Ok((kde_auc, gmm_auc))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_id_is_deterministic() {
        let c = RunConfig::default();
        assert_eq!(run_id(&c), "mnist-c0-s7");
    }

    #[test]
    fn thresholds_toml_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("th.toml");
        let th = ThresholdConfig {
            metric: Metric::Ssim,
            alpha: 0.13,
            mode: ThresholdMode::TwoSided,
            codes: vec![3, 1, 4],
            intervals: vec![(0.1, 0.9), (0.2, 0.8), (0.3, 0.7)],
            degenerate_codes: vec![1],
            fingerprint: "deadbeef".into(),
        };
        let selected = vec![
            CodeRange { code: 3, low: -1.0, high: 1.0 },
            CodeRange { code: 1, low: -2.0, high: 2.0 },
            CodeRange { code: 4, low: -0.5, high: 0.5 },
        ];
        thresholds_to_file(&th, &selected, &p).unwrap();
        let (back, sel_back) = thresholds_from_file(&p).unwrap();
        assert_eq!(sel_back, selected);
        assert_eq!(back.metric, Metric::Ssim);
        assert_eq!(back.alpha, 0.13);
        assert_eq!(back.codes, vec![3, 1, 4]);
        assert_eq!(back.intervals, th.intervals);
        assert_eq!(back.degenerate_codes, vec![1]);
        assert_eq!(back.fingerprint, "deadbeef");
    }

    #[test]
    fn sc_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let codes = vec![0usize, 2];
        let mut bundle = ScBundle::default();
        for metric in Metric::ALL {
            bundle.push(
                metric,
                SCVector {
                    metric,
                    codes: codes.clone(),
                    scores: vec![0.25, 0.5],
                    sentinels: vec![false, false],
                },
            );
            bundle.push(
                metric,
                SCVector {
                    metric,
                    codes: codes.clone(),
                    scores: vec![1.5, f64::NAN],
                    sentinels: vec![false, true],
                },
            );
        }
        write_sc_split(dir.path(), "val", &bundle).unwrap();
        let back = read_sc_split(dir.path(), "val", &codes).unwrap();
        assert_eq!(back.len(), 2);
        for metric in Metric::ALL {
            let v = back.get(metric);
            assert_eq!(v[0].scores, vec![0.25, 0.5]);
            assert!(v[1].scores[1].is_nan());
            assert_eq!(v[1].sentinels, vec![false, true]);
        }
    }
}

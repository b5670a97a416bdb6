//! Command surface. Exit codes: 0 ok, 1 runtime failure, 2 usage or
//! configuration error.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use oiad_core::consistency::Metric;
use oiad_core::detector::{calibrate, decide, Verdict};
use oiad_core::eval::{auc_roc, confusion};
use oiad_core::morph::{estimate_ranges, ranges_for_codes, select_codes, stochastic_search};
use oiad_core::rng::substream;
use oiad_core::train::TrainConfig;

use crate::checkpoint::{fingerprint, load_checkpoint};
use crate::config::{parse_config, ConfigError, Overrides, RunConfig};
use crate::data::{load_dataset, load_idx, load_idx_images, make_splits, SplitSpec};
use crate::gallery::{load_png, write_gallery, write_image};
use crate::pipeline::{
    compute_sc_bundle, load_or_train, run_experiment, run_id, thresholds_from_file,
    thresholds_to_file,
};
use crate::report::write_csv;

#[derive(Parser)]
#[command(
    name = "oiad",
    about = "One-class image anomaly detection via disentangled latent morphing",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone, Default)]
pub struct CommonOpts {
    /// Run configuration file (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset id override: mnist | fmnist | cifar10.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Normal class override (0-9).
    #[arg(long)]
    pub normal_class: Option<u8>,
    /// Seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset root override (also OIAD_DATA_DIR).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Output root override.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

impl CommonOpts {
    pub fn load(&self) -> Result<RunConfig, ConfigError> {
        let ov = Overrides {
            dataset: self.dataset.clone(),
            normal_class: self.normal_class,
            seed: self.seed,
            data_dir: self.data_dir.clone(),
            output_dir: self.output_dir.clone(),
        };
        parse_config(self.config.as_deref(), &ov)
    }
}

#[derive(Subcommand)]
pub enum Command {
    /// Train the detector VAE on the normal class and save a checkpoint.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Checkpoint output path (default: <output>/<run>/checkpoints/oiad.ckpt).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Derive per-code thresholds (and normal ranges) from validation normals.
    Calibrate {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for thresholds_<metric>.toml (default: run directory).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Score input images against calibrated thresholds.
    Detect {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        thresholds: PathBuf,
        /// IDX image file to score.
        #[arg(long)]
        input: PathBuf,
        /// Optional IDX label file (enables accuracy reporting).
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Verdict CSV path (default: stdout summary only).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for flagged images.
        #[arg(long)]
        gallery: Option<PathBuf>,
    },
    /// Dump a morph gallery for one latent code of one image.
    Morph {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image: IDX file (see --index) or PNG.
        #[arg(long)]
        image: PathBuf,
        /// Image index when the input is an IDX file.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Latent code to perturb.
        #[arg(long)]
        code: usize,
        /// Morph count.
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Thresholds file carrying the code's normal range; derived from
        /// the validation split when omitted.
        #[arg(long)]
        thresholds: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a classical baseline and emit a score CSV.
    Baseline {
        #[command(flatten)]
        common: CommonOpts,
        /// kde | gmm | vae
        #[arg(long)]
        method: String,
        /// Score CSV path (default: <output>/<run>/scores_<method>.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full experiment: train, calibrate, sweep, baselines, gallery, tables.
    Run {
        /// Experiment configuration file.
        #[arg(long)]
        experiment: Option<PathBuf>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Summarize a finished run directory.
    Report { run_dir: PathBuf },
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, out } => cmd_train(&common, out.as_deref()),
        Command::Calibrate {
            common,
            checkpoint,
            out_dir,
        } => cmd_calibrate(&common, &checkpoint, out_dir.as_deref()),
        Command::Detect {
            common,
            checkpoint,
            thresholds,
            input,
            labels,
            out,
            gallery,
        } => cmd_detect(
            &common,
            &checkpoint,
            &thresholds,
            &input,
            labels.as_deref(),
            out.as_deref(),
            gallery.as_deref(),
        ),
        Command::Morph {
            common,
            checkpoint,
            image,
            index,
            code,
            count,
            thresholds,
            out,
        } => cmd_morph(
            &common,
            &checkpoint,
            &image,
            index,
            code,
            count,
            thresholds.as_deref(),
            &out,
        ),
        Command::Baseline {
            common,
            method,
            out,
        } => cmd_baseline(&common, &method, out.as_deref()),
        Command::Run { experiment, common } => {
            let mut common = common;
            if common.config.is_none() {
                common.config = experiment;
            }
            let config = common.load()?;
            let result = run_experiment(&config)?;
            println!("run complete: {}", result.run_dir.display());
            for e in &result.oiad {
                println!("oiad_{} auc {:.4}", e.metric.name(), e.roc.auc);
            }
            println!("vae auc {:.4}", result.vae_auc);
            println!("kde auc {:.4}", result.kde_auc);
            println!("gmm auc {:.4}", result.gmm_auc);
            Ok(())
        }
        Command::Report { run_dir } => cmd_report(&run_dir),
    }
}

fn load_splits(config: &RunConfig) -> Result<crate::data::ExperimentSplits> {
    config.check_dataset_present()?;
    let full = load_dataset(config.dataset_id()?, &config.data_dir)?;
    let spec = SplitSpec::new(config.normal_class, config.seed);
    let (splits, _) = make_splits(&full, &spec, config.max_normals)?;
    Ok(splits)
}

fn cmd_train(common: &CommonOpts, out: Option<&Path>) -> Result<()> {
    let config = common.load()?;
    let tc = config.train_config()?;
    let run_dir = config.output_dir.join(run_id(&config));
    std::fs::create_dir_all(run_dir.join("checkpoints"))?;
    std::fs::create_dir_all(run_dir.join("logs"))?;
    let ckpt = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir.join("checkpoints/oiad.ckpt"));
    let splits = load_splits(&config)?;
    eprintln!(
        "[train] {} class {} on {} samples",
        config.dataset,
        config.normal_class,
        splits.train.len()
    );
    load_or_train(
        &ckpt,
        &tc,
        &splits.train,
        &run_dir.join("logs/train_oiad.csv"),
        "oiad",
    )?;
    println!("checkpoint written to {}", ckpt.display());
    Ok(())
}

fn cmd_calibrate(common: &CommonOpts, ckpt: &Path, out_dir: Option<&Path>) -> Result<()> {
    let config = common.load()?;
    let (state, _meta) = load_checkpoint(ckpt)?;
    let fp = fingerprint(ckpt)?;
    let splits = load_splits(&config)?;
    let params = config.morph_params();
    let ranges = estimate_ranges(&state.model.encoder, &splits.val.data, params.fractile_p)?;
    let codes = select_codes(&state.model, &splits.val.data, config.detector.k);
    let selected = ranges_for_codes(&ranges, &codes);
    let val_batch = if config.eval.val_cap > 0 && config.eval.val_cap < splits.val.len() {
        splits.val.gather(&(0..config.eval.val_cap).collect::<Vec<_>>())
    } else {
        splits.val.clone()
    };
    let bundle = compute_sc_bundle(
        &state.model,
        &val_batch,
        &selected,
        &params,
        config.seed,
        0x0100_0000,
        "calibrate",
    )?;
    let dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.output_dir.join(run_id(&config)));
    std::fs::create_dir_all(&dir)?;
    let mode = if config.detector.one_sided {
        oiad_core::detector::ThresholdMode::OneSided
    } else {
        oiad_core::detector::ThresholdMode::TwoSided
    };
    for metric in Metric::ALL {
        let th = calibrate(bundle.get(metric), config.detector.alpha, metric, mode, &fp)?;
        if !th.degenerate_codes.is_empty() {
            eprintln!(
                "warning: degenerate intervals widened for codes {:?}",
                th.degenerate_codes
            );
        }
        let path = dir.join(format!("thresholds_{}.toml", metric.name()));
        thresholds_to_file(&th, &selected, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_detect(
    common: &CommonOpts,
    ckpt: &Path,
    thresholds: &Path,
    input: &Path,
    labels: Option<&Path>,
    out: Option<&Path>,
    gallery_dir: Option<&Path>,
) -> Result<()> {
    let config = common.load()?;
    let (state, _meta) = load_checkpoint(ckpt)?;
    let fp = fingerprint(ckpt)?;
    let (th, selected) = thresholds_from_file(thresholds)?;
    if th.fingerprint != fp {
        eprintln!(
            "warning: thresholds were calibrated for checkpoint {} but {} has fingerprint {}",
            th.fingerprint,
            ckpt.display(),
            fp
        );
    }
    let batch = match labels {
        Some(lp) => load_idx(input, lp)?,
        None => load_idx_images(input)?,
    };
    let params = config.morph_params();
    let bundle = compute_sc_bundle(
        &state.model,
        &batch,
        &selected,
        &params,
        config.seed,
        0x0400_0000,
        "detect",
    )?;
    let sc = bundle.get(th.metric);
    let mut rows = Vec::with_capacity(sc.len());
    let mut flagged = Vec::with_capacity(sc.len());
    let mut picks = Vec::new();
    for (i, v) in sc.iter().enumerate() {
        let rep = decide(v, &th)?;
        let anomalous = rep.verdict == Verdict::Anomalous;
        flagged.push(anomalous);
        if anomalous {
            picks.push((i, rep.anomaly_score));
        }
        let codes = rep
            .violating_codes
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join("|");
        rows.push(format!(
            "{i},{},{:.6},{codes}",
            if anomalous { "anomalous" } else { "normal" },
            rep.anomaly_score
        ));
    }
    if let Some(p) = out {
        write_csv(p, "sample_id,verdict,anomaly_score,violating_codes", &rows)?;
    } else {
        println!("sample_id,verdict,anomaly_score,violating_codes");
        for r in &rows {
            println!("{r}");
        }
    }
    if let Some(dir) = gallery_dir {
        write_gallery(&batch, &picks, dir)?;
        eprintln!("gallery: {} flagged images in {}", picks.len(), dir.display());
    }
    eprintln!(
        "flagged {}/{} inputs at alpha {}",
        picks.len(),
        batch.len(),
        th.alpha
    );
    if let Some(labs) = &batch.labels {
        let truth: Vec<bool> = labs.iter().map(|&l| l != config.normal_class).collect();
        if truth.iter().any(|&t| t) && truth.iter().any(|&t| !t) {
            let c = confusion(&flagged, &truth);
            eprintln!(
                "vs labels (normal_class {}): TP {:.3} TN {:.3} acc {:.3}",
                config.normal_class, c.tp_rate, c.tn_rate, c.accuracy
            );
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_morph(
    common: &CommonOpts,
    ckpt: &Path,
    image_path: &Path,
    index: usize,
    code: usize,
    count: usize,
    thresholds: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let config = common.load()?;
    let (state, _meta) = load_checkpoint(ckpt)?;
    let is_png = image_path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("png"))
        .unwrap_or(false);
    let batch = if is_png {
        load_png(image_path)?
    } else {
        load_idx_images(image_path)?
    };
    if index >= batch.len() {
        bail!("--index {index} out of range ({} images)", batch.len());
    }
    let x = batch.image(index);

    let range = match thresholds {
        Some(p) => {
            let (_, selected) = thresholds_from_file(p)?;
            *selected
                .iter()
                .find(|r| r.code == code)
                .with_context(|| format!("code {code} not in thresholds file"))?
        }
        None => {
            let splits = load_splits(&config)?;
            let params = config.morph_params();
            let ranges =
                estimate_ranges(&state.model.encoder, &splits.val.data, params.fractile_p)?;
            *ranges
                .iter()
                .find(|r| r.code == code)
                .with_context(|| format!("code {code} out of range"))?
        }
    };

    let mut params = config.morph_params();
    params.morphs_per_code = count;
    let post = state.model.encoder.encode(&x.data);
    let d = post.mu.row_len();
    if code >= d {
        bail!("--code {code} out of range (latent dim {d})");
    }
    let base = oiad_core::tensor::Tensor::from_vec(&[d], post.mu.data().to_vec());
    let mut rng = substream(config.seed, "morph-cli", code as u64);
    let set = stochastic_search(&state.model, &base, &range, &params, &mut rng)
        .context("stochastic search failed (base latent far outside the normal range)")?;

    std::fs::create_dir_all(out)?;
    write_image(&x.data, &out.join("original.pgm")).or_else(|_| {
        write_image(&x.data, &out.join("original.ppm"))
    })?;
    let recon = state.model.reconstruct(&x.data);
    write_image(&recon, &out.join("reconstruction.pgm"))
        .or_else(|_| write_image(&recon, &out.join("reconstruction.ppm")))?;
    let ext = if state.model.arch.channels == 1 { "pgm" } else { "ppm" };
    for i in 0..set.reconstructions.rows() {
        let img = set.reconstructions.gather_rows(&[i]);
        let value = set.perturbed.data()[i * d + code];
        write_image(&img, &out.join(format!("morph{i:03}_z{value:+.3}.{ext}")))?;
    }
    println!(
        "wrote {} morphs for code {code} (range [{:.3}, {:.3}]) to {}",
        set.reconstructions.rows(),
        range.low,
        range.high,
        out.display()
    );
    Ok(())
}

fn cmd_baseline(common: &CommonOpts, method: &str, out: Option<&Path>) -> Result<()> {
    use oiad_core::baselines::{
        flatten_images, gmm_fit_bic, kde_select_bandwidth, pca_fit, vae_baseline_scores,
    };
    let config = common.load()?;
    let splits = load_splits(&config)?;
    let run_dir = config.output_dir.join(run_id(&config));
    std::fs::create_dir_all(&run_dir)?;
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir.join(format!("scores_{method}.csv")));

    let labels: Vec<bool> = std::iter::repeat(false)
        .take(splits.cle.len())
        .chain(std::iter::repeat(true).take(splits.ano.len()))
        .collect();

    let scores: Vec<f64> = match method {
        "vae" => {
            std::fs::create_dir_all(run_dir.join("checkpoints"))?;
            std::fs::create_dir_all(run_dir.join("logs"))?;
            let mut tc =
                TrainConfig::plain_vae(config.dataset_id()?, config.normal_class, config.seed);
            let file_tc = config.train_config()?;
            tc.epochs = file_tc.epochs;
            tc.batch_size = file_tc.batch_size;
            tc.lr_vae = file_tc.lr_vae;
            let state = load_or_train(
                &run_dir.join("checkpoints/vae_baseline.ckpt"),
                &tc,
                &splits.train,
                &run_dir.join("logs/train_vae.csv"),
                "vae",
            )?;
            let mut s = vae_baseline_scores(&state.model, &splits.cle.data);
            s.extend(vae_baseline_scores(&state.model, &splits.ano.data));
            s
        }
        "kde" | "gmm" => {
            let train = flatten_images(&splits.train.data);
            let val = flatten_images(&splits.val.data);
            let cle = flatten_images(&splits.cle.data);
            let ano = flatten_images(&splits.ano.data);
            let d = train.row_len();
            let max_q = config.baseline.pca_dims.iter().copied().max().unwrap().min(d);
            let pca_full = pca_fit(&train, max_q);
            let mut best: Option<(f64, Box<dyn Fn(&[f64]) -> f64>, oiad_core::baselines::PcaModel)> =
                None;
            for &q in &config.baseline.pca_dims {
                let q = q.min(max_q);
                let pca = pca_full.truncated(q);
                let train_p = pca.project(&train);
                let val_p = pca.project(&val);
                if method == "kde" {
                    let kde = kde_select_bandwidth(&train_p, &val_p);
                    let ll = kde.mean_log_density(&val_p);
                    if best.as_ref().map(|(b, ..)| ll > *b).unwrap_or(true) {
                        best = Some((ll, Box::new(move |x| kde.score(x)), pca.clone()));
                    }
                } else {
                    let gmm = gmm_fit_bic(
                        &train_p,
                        config.baseline.gmm_components_min..=config.baseline.gmm_components_max,
                        config.seed,
                    )?;
                    let ll: f64 = (0..val_p.rows())
                        .map(|i| gmm.log_likelihood(val_p.row(i)))
                        .sum::<f64>()
                        / val_p.rows().max(1) as f64;
                    if best.as_ref().map(|(b, ..)| ll > *b).unwrap_or(true) {
                        best = Some((ll, Box::new(move |x| gmm.score(x)), pca.clone()));
                    }
                }
            }
            let (_, scorer, pca) = best.unwrap();
            let cle_p = pca.project(&cle);
            let ano_p = pca.project(&ano);
            (0..cle_p.rows())
                .map(|i| scorer(cle_p.row(i)))
                .chain((0..ano_p.rows()).map(|i| scorer(ano_p.row(i))))
                .collect()
        }
        other => bail!("unknown baseline method {other:?} (use kde, gmm or vae)"),
    };

    let rows: Vec<String> = scores
        .iter()
        .zip(&labels)
        .enumerate()
        .map(|(i, (s, &l))| format!("{i},{},{s}", l as u8))
        .collect();
    write_csv(&out_path, "sample_id,label,score", &rows)?;
    let roc = auc_roc(&scores, &labels);
    println!("{method} auc {:.4} ({} samples) -> {}", roc.auc, scores.len(), out_path.display());
    Ok(())
}

fn cmd_report(run_dir: &Path) -> Result<()> {
    let table = run_dir.join("table2.csv");
    let text = std::fs::read_to_string(&table)
        .with_context(|| format!("no table2.csv under {}; is the run finished?", run_dir.display()))?;
    println!("AUC-ROC by method ({})", run_dir.display());
    println!("{:<10} {:<7} {:<12} {:>8}", "dataset", "class", "method", "auc");
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() == 4 {
            println!("{:<10} {:<7} {:<12} {:>8}", f[0], f[1], f[2], f[3]);
        }
    }
    let fig3 = run_dir.join("fig3.csv");
    if let Ok(text) = std::fs::read_to_string(&fig3) {
        println!("\nthreshold sweep (alpha, tp, tn, accuracy):");
        for line in text.lines().skip(1) {
            println!("  {line}");
        }
    }
    Ok(())
}

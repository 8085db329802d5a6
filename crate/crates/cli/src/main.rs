//! Command-line interface: data generation, training, retrieval, probing,
//! uncertainty / modality-gap analytics, diversity maps, gradient checking.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numerical
//! failure. Every run echoes its resolved configuration and seed as `#`
//! comment lines so results are reproducible from the output alone.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use pm3e_core::analytics;
use pm3e_core::checkpoint;
use pm3e_core::config::RunConfig;
use pm3e_core::data;
use pm3e_core::error::Error;
use pm3e_core::gradcheck::grad_check;
use pm3e_core::model::{modality_name, parse_modality, ModelParams};
use pm3e_core::probe::{self, ProbeFeatureKind};
use pm3e_core::retrieval::{self, RetrievalConfig};
use pm3e_core::streams::stream_rng;
use pm3e_core::trainer;

#[derive(Parser)]
#[command(name = "pm3e", version, about = "Masked multimodal embedding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config file with one `key = value` per line; `#` starts a comment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)?;
            cfg.apply_text(&text)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic aligned-embedding dataset file.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        records: Option<usize>,
        #[arg(long)]
        species: Option<usize>,
        #[arg(long)]
        modalities: Option<usize>,
        #[arg(long)]
        d_in: Option<usize>,
        /// Skew species sampling so diversity rises with longitude.
        #[arg(long)]
        diversity_gradient: bool,
    },
    /// Train a model on a dataset file (0.8/0.1/0.1 split by seed).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long, default_value = "model.pm3c")]
        out: PathBuf,
    },
    /// Cross-modal retrieval; tunes delta on the validation split when asked.
    EvalRetrieval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Query modality name (image, satellite, location, audio, text, env).
        #[arg(long)]
        query: String,
        /// Target modality name.
        #[arg(long)]
        target: String,
        /// Mixing coefficient; 0 scores the raw query embedding.
        #[arg(long)]
        delta: Option<f64>,
        /// Grid-search delta on the validation split first.
        #[arg(long)]
        tune_delta: bool,
    },
    /// Linear probing of species labels on model representations.
    EvalProbe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Visible modalities, comma separated (default: image).
        #[arg(long)]
        visible: Option<String>,
        /// reconstructed | mu_token | modality_tokens | register_tokens |
        /// all_hidden | all (default: all).
        #[arg(long, default_value = "all")]
        feature_kind: String,
    },
    /// Mean sigma-L1 vs masked reconstruction error per visible set.
    AnalyzeUncertainty {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Centroid modality gap at input / projected / hidden stages.
    AnalyzeGap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// First modality of the pair.
        #[arg(long)]
        query: String,
        /// Second modality of the pair.
        #[arg(long)]
        target: String,
    },
    /// Species diversity / richness / uncertainty grid as TSV.
    DiversityMap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Grid dimensions as ROWSxCOLS.
        #[arg(long, default_value = "25x50")]
        grid: String,
        /// Gaussian smoothing sigma in cells; 0 disables.
        #[arg(long, default_value_t = 2.0)]
        smoothing: f64,
        /// Write the TSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference validation of the full model gradient.
    GradCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Encoder and input dimension of the throwaway model.
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 3)]
        modalities: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
}

fn echo_config(cfg: &RunConfig) {
    println!("# resolved configuration");
    for line in cfg.to_text().lines() {
        println!("# {line}");
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::NonFinite { .. } | Error::NotScalar(_) | Error::ShapeMismatch { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.exit_code() == 0 { 0u8 } else { 1u8 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::GenData {
            cfg,
            out,
            records,
            species,
            modalities,
            d_in,
            diversity_gradient,
        } => {
            let mut cfg = cfg.resolve()?;
            if let Some(m) = modalities {
                cfg.set("modality_count", &m.to_string())?;
            }
            if let Some(d) = d_in {
                cfg.set("d_in", &d.to_string())?;
            }
            if let Some(r) = records {
                cfg.set("records", &r.to_string())?;
            }
            if let Some(s) = species {
                cfg.set("species_count", &s.to_string())?;
            }
            if diversity_gradient {
                cfg.set("diversity_gradient", "true")?;
            }
            echo_config(&cfg);
            let ds = data::generate(&cfg.synth, cfg.seed)?;
            data::write_dataset(&ds, &out)?;
            println!(
                "wrote {} records x {} modalities to {}",
                ds.len(),
                ds.modality_count(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            cfg,
            data: path,
            out,
        } => {
            let mut cfg = cfg.resolve()?;
            let ds = data::read_dataset(&path)?;
            reconcile_dims(&mut cfg, &ds)?;
            echo_config(&cfg);
            let (train, val, test) = data::split(&ds, (0.8, 0.1, 0.1), cfg.seed)?;
            println!(
                "# split: train {} / val {} / test {}",
                train.len(),
                val.len(),
                test.len()
            );
            println!("epoch\ttrain_total\ttrain_recon\ttrain_vib\tval_total\tlr");
            let report = trainer::fit(&train, &val, &cfg, &out)?;
            for e in &report.epochs {
                println!(
                    "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.3e}",
                    e.epoch, e.train_total, e.train_recon, e.train_vib, e.val_total, e.lr
                );
            }
            println!(
                "# best epoch {} (val {:.6}); checkpoint {}; wall {:.1}s",
                report.best_epoch,
                report.best_val,
                report.checkpoint_path.display(),
                report.wall_seconds
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::EvalRetrieval {
            checkpoint,
            data: path,
            query,
            target,
            delta,
            tune_delta,
        } => {
            let (cfg, params) = checkpoint::load(&checkpoint)?;
            echo_config(&cfg);
            let ds = data::read_dataset(&path)?;
            let m = params.config.modality_count;
            let q = parse_modality(&query, m)?;
            let t = parse_modality(&target, m)?;
            let (_train, val, test) = data::split(&ds, (0.8, 0.1, 0.1), cfg.seed)?;
            let base = RetrievalConfig::new(q, t, delta.unwrap_or(cfg.delta))?;
            let used_delta = if tune_delta {
                let (best, _) = retrieval::tune_delta(&params, &val, &base)?;
                println!("# tuned delta = {best} on {} validation records", val.len());
                best
            } else {
                base.delta
            };
            let result = retrieval::evaluate(
                &params,
                &test,
                &RetrievalConfig {
                    delta: used_delta,
                    ..base
                },
            )?;
            println!("query_mod\ttarget_mod\tdelta\tR@1\tR@5\tR@10\tgallery_size");
            let r = |k: usize| {
                result
                    .recalls
                    .iter()
                    .find(|(kk, _)| *kk == k)
                    .map(|(_, v)| *v)
                    .unwrap_or(f64::NAN)
            };
            println!(
                "{}\t{}\t{:.2}\t{:.4}\t{:.4}\t{:.4}\t{}",
                modality_name(q),
                modality_name(t),
                result.delta,
                r(1),
                r(5),
                r(10),
                result.gallery_size
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::EvalProbe {
            checkpoint,
            data: path,
            visible,
            feature_kind,
        } => {
            let (cfg, params) = checkpoint::load(&checkpoint)?;
            echo_config(&cfg);
            let ds = data::read_dataset(&path)?;
            let m = params.config.modality_count;
            let visible = parse_visible(visible.as_deref().unwrap_or("image"), m)?;
            println!("# visible = {}", describe(&visible));
            let kinds: Vec<ProbeFeatureKind> = if feature_kind == "all" {
                ProbeFeatureKind::ALL.to_vec()
            } else {
                vec![ProbeFeatureKind::parse(&feature_kind)?]
            };
            let (train, _val, test) = data::split(&ds, (0.8, 0.1, 0.1), cfg.seed)?;
            let train_labels: Vec<u32> = train.records.iter().map(|r| r.species_id).collect();
            let test_labels: Vec<u32> = test.records.iter().map(|r| r.species_id).collect();
            println!("kind\tdim\ttop1");
            for kind in kinds {
                let train_f = probe::extract_features(&params, &train.records, &visible, kind)?;
                let test_f = probe::extract_features(&params, &test.records, &visible, kind)?;
                let clf = probe::train_linear_probe(&train_f, &train_labels, 1e-4)?;
                let top1 = probe::evaluate_probe(&clf, &test_f, &test_labels)?;
                println!("{}\t{}\t{:.4}", kind.name(), clf.dim, top1);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::AnalyzeUncertainty {
            checkpoint,
            data: path,
        } => {
            let (cfg, params) = checkpoint::load(&checkpoint)?;
            echo_config(&cfg);
            let ds = data::read_dataset(&path)?;
            let m = params.config.modality_count;
            let mut sets: Vec<Vec<usize>> = (0..m).map(|i| vec![i]).collect();
            for a in 0..m {
                for b in (a + 1)..m {
                    sets.push(vec![a, b]);
                }
            }
            let report = analytics::uncertainty_sweep(&params, &ds, &sets)?;
            println!("visible\tmean_sigma_l1\tmean_recon_mse");
            for row in &report.rows {
                println!(
                    "{}\t{:.6}\t{:.6}",
                    describe(&row.visible),
                    row.mean_sigma_l1,
                    row.mean_recon_mse
                );
            }
            println!(
                "# pearson {:.4}  spearman {:.4} over {} sets",
                report.pearson,
                report.spearman_rho,
                report.rows.len()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::AnalyzeGap {
            checkpoint,
            data: path,
            query,
            target,
        } => {
            let (cfg, params) = checkpoint::load(&checkpoint)?;
            echo_config(&cfg);
            let ds = data::read_dataset(&path)?;
            let m = params.config.modality_count;
            let a = parse_modality(&query, m)?;
            let b = parse_modality(&target, m)?;
            if a == b {
                return Err(Error::InvalidArgument(
                    "gap pair must be two distinct modalities".into(),
                ));
            }
            // Start from the bare pair, then add the remaining modalities one
            // at a time in modality order.
            let mut context = vec![a, b];
            let mut sets = vec![context.clone()];
            for mm in 0..m {
                if mm != a && mm != b {
                    context.push(mm);
                    sets.push(context.clone());
                }
            }
            let report = analytics::gap_sweep(&params, &ds, (a, b), &sets)?;
            println!("context\tinput_gap\tprojected_gap\thidden_gap");
            for row in &report.rows {
                println!(
                    "{}\t{:.6}\t{:.6}\t{:.6}",
                    describe(&row.context),
                    row.input_gap,
                    row.projected_gap,
                    row.hidden_gap
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::DiversityMap {
            checkpoint,
            data: path,
            grid,
            smoothing,
            out,
        } => {
            let (cfg, params) = checkpoint::load(&checkpoint)?;
            echo_config(&cfg);
            let ds = data::read_dataset(&path)?;
            let (rows, cols) = parse_grid(&grid)?;
            let sigma = analytics::location_sigma_l1(&params, &ds.records)?;
            let bbox = (
                cfg.synth.lat_min,
                cfg.synth.lat_max,
                cfg.synth.lon_min,
                cfg.synth.lon_max,
            );
            let grid = analytics::build_diversity_grid(
                &ds.records,
                &sigma,
                (rows, cols),
                bbox,
                smoothing,
            )?;
            let mut text =
                String::from("row\tcol\tlat_center\tlon_center\tshannon\trichness\tsigma_l1\n");
            for r in 0..grid.rows {
                for c in 0..grid.cols {
                    let cell = grid.cell(r, c);
                    if !cell.present {
                        continue;
                    }
                    text.push_str(&format!(
                        "{r}\t{c}\t{:.4}\t{:.4}\t{:.6}\t{:.6}\t{:.6}\n",
                        grid.lat_center(r),
                        grid.lon_center(c),
                        cell.shannon,
                        cell.richness,
                        cell.sigma_l1
                    ));
                }
            }
            let (sh, si) = grid.present_series();
            match out {
                Some(p) => {
                    std::fs::write(&p, &text)?;
                    println!("# wrote {} present cells to {}", sh.len(), p.display());
                }
                None => print!("{text}"),
            }
            if sh.len() >= 3 {
                let (rho, pval) = analytics::spearman(&si, &sh)?;
                println!("# spearman(sigma_l1, shannon) = {rho:.4} (p = {pval:.2e})");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::GradCheck {
            cfg,
            dim,
            modalities,
            batch,
            step,
        } => {
            let mut cfg = cfg.resolve()?;
            cfg.set("modality_count", &modalities.to_string())?;
            cfg.set("d_in", &dim.to_string())?;
            cfg.set("encoder_dim", &dim.to_string())?;
            cfg.set("species_count", "2")?;
            cfg.set("records", &batch.max(2).to_string())?;
            echo_config(&cfg);
            let started = std::time::Instant::now();
            let ds = data::generate(&cfg.synth, cfg.seed)?;
            let mut params = ModelParams::init(
                &cfg.model,
                cfg.loss.alpha_init,
                cfg.loss.beta_init,
                cfg.seed,
            )?;
            let mut mask_rng = stream_rng(cfg.seed, "mask");
            let vs = trainer::sample_visible_set(&mut mask_rng, modalities, false)?;
            println!("# visible = {}", describe(&vs.visible));
            let refs: Vec<&pm3e_core::EmbeddingRecord> = ds.records.iter().take(batch).collect();
            let report = grad_check(&mut params, &refs, &vs, &cfg.loss, step, cfg.seed)?;
            println!(
                "max_rel_err {:.3e} over {} scalars (worst: {}) in {:.2}s",
                report.max_rel_err,
                report.scalars_checked,
                report.worst_param,
                started.elapsed().as_secs_f64()
            );
            if report.max_rel_err < 1e-4 {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("error: gradient mismatch above 1e-4");
                Ok(ExitCode::from(3))
            }
        }
    }
}

fn reconcile_dims(cfg: &mut RunConfig, ds: &pm3e_core::Dataset) -> Result<(), Error> {
    let d = ds.dims.first().copied().unwrap_or(0);
    if ds.dims.iter().any(|&x| x != d) {
        return Err(Error::Data(
            "model requires a shared input dim across modalities".into(),
        ));
    }
    if cfg.model.modality_count != ds.modality_count() || cfg.model.d_in != d {
        println!(
            "# model dims set from dataset: modalities = {}, d_in = {d}",
            ds.modality_count()
        );
        cfg.set("modality_count", &ds.modality_count().to_string())?;
        cfg.set("d_in", &d.to_string())?;
    }
    Ok(())
}

fn parse_visible(spec: &str, modality_count: usize) -> Result<Vec<usize>, Error> {
    spec.split(',')
        .map(|s| parse_modality(s.trim(), modality_count))
        .collect()
}

fn describe(mods: &[usize]) -> String {
    mods.iter()
        .map(|&m| modality_name(m))
        .collect::<Vec<_>>()
        .join("+")
}

fn parse_grid(s: &str) -> Result<(usize, usize), Error> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::InvalidArgument(format!("grid must be ROWSxCOLS, got {s:?}")))?;
    let rows = r
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad grid rows {r:?}")))?;
    let cols = c
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad grid cols {c:?}")))?;
    Ok((rows, cols))
}

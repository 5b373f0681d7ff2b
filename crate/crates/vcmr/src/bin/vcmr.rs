//! `vcmr` — unified command-line entry point for the pipeline: corpus
//! curation, frame embedding, the three training stages, evaluation, and the
//! ablation drivers.
//!
//! Run directories are content-addressed by (command, config hash, seed)
//! under `--out-dir`; an existing directory is refused unless `--force` is
//! given. Every run directory receives the resolved config echo, per-key
//! provenance, and a `run.json` with the seed and artifact paths.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use vcmr::config::{parse_override, resolve_config, AppConfig, ResolvedConfig};
use vcmr::corpus::{detect_scenes, filter_by_scene_length, Manifest, SceneList, Split};
use vcmr::error::{Error, Result};
use vcmr::eval::{
    read_csv, run_resolution_ablation, run_scarcity_ablation, tag_group_report, write_csv,
    TagGroupMap,
};
use vcmr::features::{
    average_per_second, embed_frames, load_frames_dir, save_second_embeddings, FrameEmbedder,
    PrecomputedEmbedder, StubEmbedder,
};
use vcmr::models::{resolution_calculus, SampleCnn, SampleCnnConfig};
use vcmr::synth::{generate_corpus, SynthCorpusConfig};
use vcmr::train::{
    derive_rng, evaluate_tagging, finetune, pretrain_audio, pretrain_multimodal, Checkpoint,
};

/// Environment variable naming the default feature cache directory.
const CACHE_ENV: &str = "VCMR_CACHE_DIR";

#[derive(Parser)]
#[command(
    name = "vcmr",
    version,
    about = "Video-conditioned music representation learning pipeline",
    after_help = "Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure."
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML config file; keys not set here fall back to built-in defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (overrides the config file)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root under which run directories are created
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    /// Allow reusing an existing run directory
    #[arg(long, global = true)]
    force: bool,
    /// Override any config key, e.g. --set audio_pretrain.epochs=5 (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Disable every augmentation (all probabilities forced to 0)
    #[arg(long, global = true)]
    aug_off: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Filter a manifest by the 30-second scene rule
    Curate {
        #[arg(long)]
        manifest: PathBuf,
        /// Frame-difference threshold for scene detection when no
        /// scenes.txt sidecar exists next to the frames
        #[arg(long, default_value_t = 0.3)]
        scene_threshold: f64,
        /// Frame rate of the stored frames
        #[arg(long, default_value_t = 2.0)]
        frame_fps: f64,
    },
    /// Embed video frames and cache per-second context vectors
    EmbedFrames {
        #[arg(long)]
        manifest: PathBuf,
        /// "stub" (seeded random projection) or "external"
        /// (reads <video_path>/embeddings.feat)
        #[arg(long, default_value = "stub")]
        embedder: String,
        #[arg(long, env = CACHE_ENV)]
        cache_dir: PathBuf,
    },
    /// Stage 1: contrastive pre-training on audio alone
    PretrainAudio {
        #[arg(long)]
        manifest: PathBuf,
        /// Continue from a previous last.ckpt
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stage 2: multimodal contrastive pre-training against video context
    PretrainMultimodal {
        #[arg(long)]
        manifest: PathBuf,
        /// Stage-1 checkpoint to start from
        #[arg(long)]
        audio_ckpt: PathBuf,
        #[arg(long, env = CACHE_ENV)]
        cache_dir: PathBuf,
    },
    /// Stage 3: fine-tune the tagging head on a frozen backbone
    Finetune {
        #[arg(long)]
        manifest: PathBuf,
        /// Stage-1 best.ckpt or stage-2 backbone.ckpt
        #[arg(long)]
        backbone: PathBuf,
    },
    /// Score a split with overlap-window inference and report macro metrics
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Fine-tuned checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and evaluate audio-only and VCMR at every first-kernel value
    AblateResolution {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, env = CACHE_ENV)]
        cache_dir: PathBuf,
    },
    /// Fine-tune on shrinking training fractions, test on the full test set
    AblateScarcity {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
    },
    /// Group per-tag metrics into the four semantic categories
    ReportGroups {
        /// per_tag.csv produced by `evaluate`
        #[arg(long)]
        per_tag: PathBuf,
        /// tag→group table; defaults to the shipped MagnaTagATune mapping
        #[arg(long)]
        groups: Option<PathBuf>,
        #[arg(long, default_value = "roc_auc")]
        metric: String,
    },
    /// Print parameter count and the resolution table
    InspectModel {
        /// Inspect a checkpoint instead of the resolved config
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Generate a synthetic corpus (audio, video features, manifest)
    SynthCorpus {
        #[arg(long, default_value_t = 64)]
        n_tracks: usize,
        #[arg(long, default_value_t = 3.0)]
        duration_s: f64,
        #[arg(long, default_value_t = 512)]
        video_dim: usize,
        #[arg(long, default_value_t = 1.0)]
        audio_class_gain: f64,
        #[arg(long, default_value_t = 1.0)]
        video_class_gain: f64,
        /// Also write PGM frame directories and scene sidecars
        #[arg(long)]
        with_frames: bool,
    },
}

fn command_slug(command: &Command) -> &'static str {
    match command {
        Command::Curate { .. } => "curate",
        Command::EmbedFrames { .. } => "embed-frames",
        Command::PretrainAudio { .. } => "pretrain-audio",
        Command::PretrainMultimodal { .. } => "pretrain-multimodal",
        Command::Finetune { .. } => "finetune",
        Command::Evaluate { .. } => "evaluate",
        Command::AblateResolution { .. } => "ablate-resolution",
        Command::AblateScarcity { .. } => "ablate-scarcity",
        Command::ReportGroups { .. } => "report-groups",
        Command::InspectModel { .. } => "inspect-model",
        Command::SynthCorpus { .. } => "synth-corpus",
    }
}

fn resolve(global: &GlobalArgs) -> Result<ResolvedConfig> {
    let mut overrides: Vec<(String, String)> = global
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    if let Some(seed) = global.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if global.aug_off {
        for key in [
            "augment.pitch_shift_p",
            "augment.frequency_filter_p",
            "augment.reverb_p",
            "augment.gaussian_noise_p",
        ] {
            overrides.push((key.into(), "0.0".into()));
        }
    }
    resolve_config(global.config.as_deref(), &overrides)
}

fn config_hash(cfg: &AppConfig) -> Result<String> {
    let digest = Sha256::digest(cfg.to_toml()?.as_bytes());
    Ok(format!("{digest:x}")[..8].to_string())
}

/// Content-addressed run directory: `<out-dir>/<command>-<cfg hash>-s<seed>`.
/// Refuses an existing directory unless `--force` is given, then writes the
/// config echo, key provenance, and run metadata into it.
fn prepare_run_dir(
    global: &GlobalArgs,
    command: &Command,
    resolved: &ResolvedConfig,
) -> Result<PathBuf> {
    let slug = command_slug(command);
    let hash = config_hash(&resolved.config)?;
    let seed = resolved.config.seed;
    let dir = global.out_dir.join(format!("{slug}-{hash}-s{seed}"));
    if dir.exists() && !global.force {
        return Err(Error::InvalidInput(format!(
            "run directory {} already exists; pass --force to reuse it",
            dir.display()
        )));
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    std::fs::write(dir.join("config.toml"), resolved.config.to_toml()?)
        .map_err(|e| Error::io(dir.join("config.toml"), e))?;
    std::fs::write(dir.join("provenance.txt"), resolved.provenance_report())
        .map_err(|e| Error::io(dir.join("provenance.txt"), e))?;
    let started_unix = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let meta = serde_json::json!({
        "command": slug,
        "config_hash": hash,
        "seed": seed,
        "started_unix": started_unix,
    });
    std::fs::write(dir.join("run.json"), format!("{meta:#}\n"))
        .map_err(|e| Error::io(dir.join("run.json"), e))?;
    Ok(dir)
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        other => Err(Error::InvalidInput(format!(
            "unknown split `{other}` (expected train|valid|test)"
        ))),
    }
}

fn run_curate(
    manifest_path: &Path,
    threshold: f64,
    frame_fps: f64,
    cfg: &AppConfig,
    run_dir: &Path,
) -> Result<()> {
    let manifest = Manifest::load(manifest_path)?;
    let mut scenes = BTreeMap::new();
    for record in &manifest.records {
        let Some(video_path) = &record.video_path else { continue };
        let dir = PathBuf::from(video_path);
        let sidecar = dir.join("scenes.txt");
        let list = if sidecar.exists() {
            SceneList::load(&sidecar)?
        } else {
            let frames = load_frames_dir(&dir)?;
            let series: Vec<f64> = frames.iter().map(|f| f.mean_intensity()).collect();
            detect_scenes(&series, frame_fps, threshold)?
        };
        scenes.insert(record.track_id.clone(), list);
    }
    let outcome = filter_by_scene_length(&manifest, &scenes, cfg.eval.max_scene_s)?;
    let out_path = run_dir.join("manifest.jsonl");
    outcome.manifest.save(&out_path)?;
    for id in &outcome.skipped {
        eprintln!("warning: {id}: no scene information, skipped");
    }
    println!(
        "kept {} of {} video tracks (longest scene <= {} s) -> {}",
        outcome.manifest.records.len(),
        manifest.records.iter().filter(|r| r.video_path.is_some()).count(),
        cfg.eval.max_scene_s,
        out_path.display()
    );
    Ok(())
}

fn run_embed_frames(
    manifest_path: &Path,
    embedder_name: &str,
    cache_dir: &Path,
    cfg: &AppConfig,
) -> Result<()> {
    let manifest = Manifest::load(manifest_path)?;
    std::fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let stub = StubEmbedder::new(cfg.seed);
    let mut embedded = 0usize;
    for record in &manifest.records {
        let Some(video_path) = &record.video_path else { continue };
        let dir = PathBuf::from(video_path);
        let frames = load_frames_dir(&dir)?;
        let seq = match embedder_name {
            "stub" => embed_frames(&frames, &stub, cfg.eval.fps)?,
            "external" => {
                let ext = PrecomputedEmbedder::load(&dir.join("embeddings.feat"))?;
                embed_frames(&frames, &ext as &dyn FrameEmbedder, cfg.eval.fps)?
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown embedder `{other}` (expected stub|external)"
                )))
            }
        };
        let per_second = average_per_second(&seq, record.track_id.clone())?;
        save_second_embeddings(cache_dir, &per_second)?;
        embedded += 1;
    }
    println!("cached per-second features for {embedded} tracks in {}", cache_dir.display());
    Ok(())
}

fn print_report(report: &vcmr::train::EvalReport, run_dir: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> = report
        .tag_vocabulary
        .iter()
        .enumerate()
        .map(|(i, tag)| {
            let fmt = |v: &Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            vec![tag.clone(), fmt(&report.per_tag_roc[i]), fmt(&report.per_tag_pr[i])]
        })
        .collect();
    write_csv(&run_dir.join("per_tag.csv"), &["tag", "roc_auc", "pr_auc"], &rows)?;
    let summary = serde_json::json!({
        "n_tracks": report.n_tracks,
        "macro_roc_auc": report.macro_roc_auc,
        "macro_pr_auc": report.macro_pr_auc,
        "skipped_tags": report.skipped_tags,
    });
    std::fs::write(run_dir.join("metrics.json"), format!("{summary:#}\n"))
        .map_err(|e| Error::io(run_dir.join("metrics.json"), e))?;
    println!(
        "{} tracks  ROC-AUC {:.4}  PR-AUC {:.4}{}",
        report.n_tracks,
        report.macro_roc_auc,
        report.macro_pr_auc,
        if report.skipped_tags.is_empty() {
            String::new()
        } else {
            format!("  (skipped single-class tags: {})", report.skipped_tags.join(", "))
        }
    );
    Ok(())
}

fn run_report_groups(per_tag: &Path, groups: Option<&Path>, metric: &str) -> Result<()> {
    let map = match groups {
        Some(path) => TagGroupMap::load(path)?,
        None => TagGroupMap::default_mtat(),
    };
    let (header, rows) = read_csv(per_tag)?;
    let col = match metric {
        "roc_auc" => 1,
        "pr_auc" => 2,
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown metric `{other}` (expected roc_auc|pr_auc)"
            )))
        }
    };
    if header != ["tag", "roc_auc", "pr_auc"] {
        return Err(Error::Data(format!("{}: not a per_tag.csv file", per_tag.display())));
    }
    let vocab: Vec<String> = rows.iter().map(|r| r[0].clone()).collect();
    let per_tag_values: Vec<Option<f64>> = rows
        .iter()
        .map(|r| {
            if r[col].is_empty() {
                Ok(None)
            } else {
                r[col]
                    .parse()
                    .map(Some)
                    .map_err(|e| Error::Data(format!("bad metric value `{}`: {e}", r[col])))
            }
        })
        .collect::<Result<_>>()?;
    let report = tag_group_report(&per_tag_values, &vocab, &map)?;
    println!("group        {metric}   tags");
    for row in &report {
        println!("{:<12} {:.4}    {}", row.group.to_string(), row.mean, row.n_tags);
    }
    let csv_rows: Vec<Vec<String>> = report
        .iter()
        .map(|r| vec![r.group.to_string(), format!("{:.6}", r.mean), r.n_tags.to_string()])
        .collect();
    let out = per_tag.with_file_name("groups.csv");
    write_csv(&out, &["group", metric, "n_tags"], &csv_rows)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run_inspect(checkpoint: Option<&Path>, cfg: &AppConfig) -> Result<()> {
    let samplecnn = match checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            println!(
                "checkpoint: stage={} epoch={} best_epoch={} step_count={} seed={}",
                ckpt.stage, ckpt.epoch, ckpt.best_epoch, ckpt.step_count, ckpt.seed
            );
            if !ckpt.tag_vocabulary.is_empty() {
                println!("tag vocabulary: {} tags", ckpt.tag_vocabulary.len());
            }
            ckpt.config.samplecnn
        }
        None => cfg.samplecnn.clone(),
    };
    let mut rng = derive_rng(cfg.seed, &["init", "samplecnn"]);
    let model = SampleCnn::new(samplecnn.clone(), &mut rng)?;
    println!(
        "encoder: first_kernel={} blocks={} parameters={}",
        samplecnn.first_kernel,
        samplecnn.n_blocks,
        model.count_parameters()
    );
    println!("resolution table:");
    println!("  k  input_samples  duration_s");
    for k in 1..=8 {
        let cfg_k = SampleCnnConfig { first_kernel: k, ..samplecnn.clone() };
        let res = resolution_calculus(&cfg_k);
        println!("  {k}  {:>13}  {:>10.4}", res.input_samples, res.duration_s);
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let resolved = resolve(&cli.global)?;
    let cfg = &resolved.config;
    match &cli.command {
        Command::Curate { manifest, scene_threshold, frame_fps } => {
            let run_dir = prepare_run_dir(&cli.global, &cli.command, &resolved)?;
            run_curate(manifest, *scene_threshold, *frame_fps, cfg, &run_dir)
        }
        Command::EmbedFrames { manifest, embedder, cache_dir } => {
            run_embed_frames(manifest, embedder, cache_dir, cfg)
        }
        Command::PretrainAudio { manifest, resume } => {
            let run_dir = prepare_run_dir(&cli.global, &cli.command, &resolved)?;
            let manifest = Manifest::load(manifest)?;
            let outcome = pretrain_audio(&manifest, cfg, &run_dir, resume.as_deref())?;
            println!(
                "best epoch {} -> {}",
                outcome.best_epoch,
                outcome.checkpoint_path.display()
            );
            Ok(())
        }
        Command::PretrainMultimodal { manifest, audio_ckpt, cache_dir } => {
            let run_dir = prepare_run_dir(&cli.global, &cli.command, &resolved)?;
            let manifest = Manifest::load(manifest)?;
            let outcome = pretrain_multimodal(&manifest, audio_ckpt, cfg, cache_dir, &run_dir)?;
            println!(
                "best epoch {} -> exported audio encoder {}",
                outcome.best_epoch,
                outcome.export_path.as_ref().unwrap().display()
            );
            Ok(())
        }
        Command::Finetune { manifest, backbone } => {
            let run_dir = prepare_run_dir(&cli.global, &cli.command, &resolved)?;
            let manifest = Manifest::load(manifest)?;
            let outcome = finetune(&manifest, backbone, cfg, &run_dir)?;
            println!(
                "best epoch {} -> {}",
                outcome.best_epoch,
                outcome.checkpoint_path.display()
            );
            Ok(())
        }
        Command::Evaluate { manifest, checkpoint, split } => {
            let run_dir = prepare_run_dir(&cli.global, &cli.command, &resolved)?;
            let manifest = Manifest::load(manifest)?;
            let report =
                evaluate_tagging(&manifest, parse_split(split)?, checkpoint, cfg.eval.segment_overlap)?;
            print_report(&report, &run_dir)
        }
        Command::AblateResolution { manifest, cache_dir } => {
            let run_dir = prepare_run_dir(&cli.global, &cli.command, &resolved)?;
            let manifest = Manifest::load(manifest)?;
            let rows = run_resolution_ablation(&manifest, cache_dir, cfg, &run_dir)?;
            for r in &rows {
                println!(
                    "{:<11} k={} ({:.3} s)  ROC-AUC {:.4}  PR-AUC {:.4}",
                    r.model, r.first_kernel, r.duration_s, r.roc_auc, r.pr_auc
                );
            }
            Ok(())
        }
        Command::AblateScarcity { manifest, backbone } => {
            let run_dir = prepare_run_dir(&cli.global, &cli.command, &resolved)?;
            let manifest = Manifest::load(manifest)?;
            let (rows, warnings) = run_scarcity_ablation(&manifest, backbone, cfg, &run_dir)?;
            for r in &rows {
                println!(
                    "fraction {:>4}  ({} tracks)  ROC-AUC {:.4}  PR-AUC {:.4}",
                    r.fraction, r.n_train, r.roc_auc, r.pr_auc
                );
            }
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            Ok(())
        }
        Command::ReportGroups { per_tag, groups, metric } => {
            run_report_groups(per_tag, groups.as_deref(), metric)
        }
        Command::InspectModel { checkpoint } => run_inspect(checkpoint.as_deref(), cfg),
        Command::SynthCorpus {
            n_tracks,
            duration_s,
            video_dim,
            audio_class_gain,
            video_class_gain,
            with_frames,
        } => {
            let run_dir = prepare_run_dir(&cli.global, &cli.command, &resolved)?;
            let synth_cfg = SynthCorpusConfig {
                n_tracks: *n_tracks,
                duration_s: *duration_s,
                video_dim: *video_dim,
                audio_class_gain: *audio_class_gain,
                video_class_gain: *video_class_gain,
                with_frames: *with_frames,
                seed: cfg.seed,
                ..SynthCorpusConfig::default()
            };
            let corpus = generate_corpus(&synth_cfg, &run_dir)?;
            println!(
                "wrote {} tracks: {} (features in {})",
                corpus.manifest.records.len(),
                corpus.manifest_path.display(),
                corpus.cache_dir.display()
            );
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = dispatch(&cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

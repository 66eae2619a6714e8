use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use lxfuse::degrade::{apply_with_gray, DegradationKind, DegradationSpec, Severity};
use lxfuse::fusion::{count_params, AccountingPreset, LlmShape, ProjectionShape};
use lxfuse::gradcheck::check_stack;
use lxfuse::harness::{
    checkpoint, default_threads, evaluate, train, Condition, ConditionReport, Dataset, FusionMode, ModelConfig,
    ToyModel, TrainConfig, TrainTrace, Vocab,
};
use lxfuse::imageio::{read_pnm, write_pnm};
use lxfuse::Rng;
use lxfuse_annotate::mock::{ArgmaxSelector, HashScorer, MockGenerator};
use lxfuse_annotate::remote::{ChatClient, RemoteConfig, RemoteScorer};
use lxfuse_annotate::{final_select, refine_loop, AnnotationState, Generator, ImageRef, Scorer, Selector};
use serde::{Deserialize, Serialize};

use crate::config::{Backend, BenchPreset, RunConfig};
use crate::error::CliError;

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn ensure_out(cfg: &RunConfig) -> Result<&Path, CliError> {
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", cfg.out.display())))?;
    Ok(&cfg.out)
}

fn threads(cfg: &RunConfig) -> usize {
    if cfg.threads == 0 {
        default_threads()
    } else {
        cfg.threads
    }
}

pub fn train_set(cfg: &RunConfig) -> Result<Dataset, CliError> {
    match &cfg.data.train_manifest {
        Some(p) => Dataset::load_manifest(p).map_err(usage),
        None => Ok(Dataset::synthetic(
            cfg.data.train_seed,
            &cfg.scene,
            cfg.data.train_scenes,
        )?),
    }
}

pub fn eval_set(cfg: &RunConfig) -> Result<Dataset, CliError> {
    match &cfg.data.eval_manifest {
        Some(p) => Dataset::load_manifest(p).map_err(usage),
        None => Ok(Dataset::synthetic(
            cfg.data.eval_seed,
            &cfg.scene,
            cfg.data.eval_scenes,
        )?),
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    seed: u64,
    steps: usize,
    model: ModelConfig,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub trace: TrainTrace,
}

fn train_model(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    data: &Dataset,
    log: bool,
) -> Result<(ToyModel, TrainTrace), CliError> {
    let mut model = ToyModel::new(model_cfg.clone(), seed)?;
    let every = (train_cfg.steps / 10).max(1);
    let trace = train(&mut model, data, train_cfg, seed, |r| {
        if log && (r.step % every == 0 || r.step + 1 == train_cfg.steps) {
            eprintln!("[{}] step {:>5}  loss {:.4}", model_cfg.mode, r.step, r.loss);
        }
    })?;
    Ok((model, trace))
}

/// Trains from scratch and writes `model.ckpt` and `loss.csv` under `out`.
pub fn cmd_train(cfg: &RunConfig, log: bool) -> Result<TrainOutput, CliError> {
    let out = ensure_out(cfg)?;
    let data = train_set(cfg)?;
    let (model, trace) = train_model(&cfg.model, &cfg.train, cfg.seed, &data, log)?;
    let meta = serde_json::to_string(&CheckpointMeta {
        seed: cfg.seed,
        steps: cfg.train.steps,
        model: cfg.model.clone(),
    })
    .expect("meta serializes");
    let checkpoint = out.join("model.ckpt");
    checkpoint::save(&model, &meta, &checkpoint)?;
    let loss_csv = out.join("loss.csv");
    fs::write(&loss_csv, trace.to_csv())?;
    Ok(TrainOutput {
        checkpoint,
        loss_csv,
        trace,
    })
}

/// Loads `checkpoint` into a model built from `[model]` and evaluates all 13
/// conditions, writing `eval.csv`.
pub fn cmd_eval(cfg: &RunConfig, ckpt: &Path) -> Result<(ConditionReport, PathBuf), CliError> {
    let mut model = ToyModel::new(cfg.model.clone(), cfg.seed)?;
    checkpoint::load(&mut model, ckpt).map_err(|e| usage(format!("checkpoint {}: {e}", ckpt.display())))?;
    let data = eval_set(cfg)?;
    let report = evaluate(&model, &data, &Condition::all(), threads(cfg))?;
    let out = ensure_out(cfg)?;
    let path = out.join("eval.csv");
    fs::write(&path, report.to_csv())?;
    Ok((report, path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentChoice {
    On,
    Off,
    Both,
}

impl AugmentChoice {
    fn settings(self) -> &'static [bool] {
        match self {
            Self::On => &[true],
            Self::Off => &[false],
            Self::Both => &[true, false],
        }
    }
}

/// Trains and evaluates one model per (mode, augmentation) with the same
/// seed, data and schedule. Writes `ablation.csv`.
pub fn cmd_ablate(
    cfg: &RunConfig,
    modes: &[FusionMode],
    augment: AugmentChoice,
    log: bool,
) -> Result<(Vec<(FusionMode, bool, ConditionReport)>, PathBuf), CliError> {
    if modes.is_empty() {
        return Err(usage("no modes to ablate"));
    }
    let train_data = train_set(cfg)?;
    let eval_data = eval_set(cfg)?;
    let mut results = Vec::new();
    for &mode in modes {
        for &aug in augment.settings() {
            let model_cfg = ModelConfig {
                mode,
                ..cfg.model.clone()
            };
            let train_cfg = TrainConfig {
                augment: aug,
                ..cfg.train.clone()
            };
            let (model, _) = train_model(&model_cfg, &train_cfg, cfg.seed, &train_data, log)?;
            let report = evaluate(&model, &eval_data, &Condition::all(), threads(cfg))?;
            results.push((mode, aug, report));
        }
    }
    let mut csv = String::from("mode,augment,condition,kind,severity,n,correct,accuracy\n");
    for (mode, aug, report) in &results {
        for line in report.to_csv().lines().skip(1) {
            let _ = writeln!(csv, "{mode},{},{line}", if *aug { "on" } else { "off" });
        }
    }
    let path = ensure_out(cfg)?.join("ablation.csv");
    fs::write(&path, csv)?;
    Ok((results, path))
}

/// Applies one table entry to a PPM/PGM file and writes the 8-bit result.
pub fn cmd_degrade(
    input: &Path,
    kind: DegradationKind,
    severity: Severity,
    output: &Path,
    fog_gray: f64,
) -> Result<(), CliError> {
    let img = read_pnm(input).map_err(|e| usage(format!("{}: {e}", input.display())))?;
    let out = apply_with_gray(DegradationSpec::new(kind, severity), &img, fog_gray).map_err(usage)?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_pnm(output, &out.quantize_u8())?;
    Ok(())
}

fn run_preset(model: &ModelConfig) -> Result<AccountingPreset, CliError> {
    Ok(AccountingPreset {
        fusion: model.fusion(),
        grid: model.grid()?,
        projection: Some(ProjectionShape {
            dims: vec![model.d, model.d_dec],
            bias: true,
        }),
        llm: LlmShape {
            layers: 1,
            dim: model.d_dec,
            ffn_dim: 4 * model.d_dec,
            ffn_matrices: 2,
            vocab: Vocab.size(),
        },
    })
}

/// Parameter and FLOP accounting as `metric,value` rows; writes `bench.csv`.
pub fn cmd_bench(cfg: &RunConfig) -> Result<(String, PathBuf), CliError> {
    let preset = match cfg.bench.preset {
        BenchPreset::Full => AccountingPreset::full_scale(),
        BenchPreset::Run => run_preset(&cfg.model)?,
    };
    let rep = preset.report(cfg.bench.text_len)?;
    let fusion_params = count_params(&preset.fusion, None);
    let projection_params = preset.projection.as_ref().map_or(0, ProjectionShape::params);
    let block_flops: u64 = rep.blocks.iter().map(|b| b.total()).sum();
    let mut csv = String::from("metric,value\n");
    let mut row = |k: &str, v: String| {
        let _ = writeln!(csv, "{k},{v}");
    };
    row("preset", format!("{:?}", cfg.bench.preset).to_lowercase());
    row("fusion_params", fusion_params.to_string());
    row("projection_params", projection_params.to_string());
    row("total_params", preset.params().to_string());
    row("visual_tokens", rep.visual_tokens.to_string());
    row("text_len", rep.text_len.to_string());
    row("fused_path_flops", rep.fused_path.to_string());
    row("concat_path_flops", rep.concat_path.to_string());
    row("visual_ratio", format!("{:?}", rep.visual_ratio));
    row("fusion_block_flops", block_flops.to_string());
    row("projection_flops", rep.projection.to_string());
    row("fusion_overhead_flops", rep.fusion_overhead.to_string());
    row("base_path_flops", rep.base_path.to_string());
    row("overhead_percent", format!("{:?}", 100.0 * rep.overhead_fraction));
    for (i, b) in rep.blocks.iter().enumerate() {
        row(&format!("block{i}_radius"), format!("{:?}", b.radius));
        row(&format!("block{i}_pairs"), b.pairs.to_string());
        row(&format!("block{i}_flops"), b.total().to_string());
    }
    let path = ensure_out(cfg)?.join("bench.csv");
    fs::write(&path, &csv)?;
    Ok((csv, path))
}

pub struct GradcheckOutput {
    pub csv: String,
    pub failing: Vec<String>,
    pub path: PathBuf,
}

/// Finite-difference check of every fusion-stack parameter; writes
/// `gradcheck.csv` (`param,numel,max_rel_err,status`).
pub fn cmd_gradcheck(cfg: &RunConfig, fault: Option<&str>) -> Result<GradcheckOutput, CliError> {
    let report = check_stack(&cfg.gradcheck, fault).map_err(|e| match e {
        lxfuse::Error::InvalidArgument(m) => usage(m),
        other => other.into(),
    })?;
    let tol = cfg.gradcheck.tolerance;
    let mut csv = String::from("param,numel,max_rel_err,status\n");
    let mut failing = Vec::new();
    for r in &report {
        let ok = r.passes(tol);
        let _ = writeln!(
            csv,
            "{},{},{:e},{}",
            r.name,
            r.numel,
            r.max_rel_err,
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            failing.push(r.name.clone());
        }
    }
    let path = ensure_out(cfg)?.join("gradcheck.csv");
    fs::write(&path, &csv)?;
    Ok(GradcheckOutput { csv, failing, path })
}

#[derive(Debug, Deserialize)]
struct ImageRecord {
    id: String,
    #[serde(default, alias = "ir_path")]
    path: Option<PathBuf>,
}

fn read_images(manifest: &Path) -> Result<Vec<ImageRef>, CliError> {
    let text = fs::read_to_string(manifest).map_err(|e| usage(format!("{}: {e}", manifest.display())))?;
    let mut seen = std::collections::HashSet::new();
    let mut images = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: ImageRecord =
            serde_json::from_str(line).map_err(|e| usage(format!("{} line {}: {e}", manifest.display(), i + 1)))?;
        // harness manifests repeat an image once per question
        if seen.insert(r.id.clone()) {
            images.push(ImageRef { id: r.id, path: r.path });
        }
    }
    if images.is_empty() {
        return Err(usage(format!("{} lists no images", manifest.display())));
    }
    Ok(images)
}

fn check_token(remote: &RemoteConfig, section: &str) -> Result<(), CliError> {
    match &remote.token_env {
        Some(var) if std::env::var_os(var).is_none() => Err(usage(format!(
            "annotate.{section}.token_env names {var}, which is not set"
        ))),
        _ => Ok(()),
    }
}

#[derive(Debug, Serialize)]
struct FinalRecord<'a> {
    image_id: &'a str,
    caption: &'a str,
}

#[derive(Debug)]
pub struct AnnotateOutput {
    pub records: PathBuf,
    pub finals: PathBuf,
    pub images: usize,
}

fn annotate_one<G: Generator, S: Scorer, L: Selector>(
    gen: &mut G,
    scorer: &S,
    selector: &mut L,
    image: ImageRef,
    cfg: &RunConfig,
    records: &mut File,
) -> Result<(AnnotationState, String), CliError> {
    let state = match refine_loop(gen, scorer, image, cfg.annotate.rounds, cfg.annotate.fanout) {
        Ok(s) => s,
        Err(fail) => {
            records.write_all(fail.state.to_jsonl().as_bytes())?;
            return Err(CliError::Runtime(fail.to_string()));
        }
    };
    records.write_all(state.to_jsonl().as_bytes())?;
    let caption = final_select(selector, &state)?;
    Ok((state, caption))
}

/// Runs the refinement loop for every image in `manifest`, appending each
/// image's candidates to `annotations.jsonl` as soon as it finishes and its
/// final caption to `finals.jsonl`.
pub fn cmd_annotate(cfg: &RunConfig, manifest: &Path) -> Result<AnnotateOutput, CliError> {
    let images = read_images(manifest)?;
    if cfg.annotate.backend == Backend::Remote {
        check_token(&cfg.annotate.chat, "chat")?;
        check_token(&cfg.annotate.scorer, "scorer")?;
    }
    let out = ensure_out(cfg)?;
    let records_path = out.join("annotations.jsonl");
    let finals_path = out.join("finals.jsonl");
    let mut records = File::create(&records_path)?;
    let mut finals = File::create(&finals_path)?;
    let n = images.len();
    for image in images {
        let (_, caption) = match cfg.annotate.backend {
            Backend::Mock => {
                let seed = Rng::derive(cfg.seed, &image.id).next_u64();
                annotate_one(
                    &mut MockGenerator::new(seed),
                    &HashScorer,
                    &mut ArgmaxSelector,
                    image.clone(),
                    cfg,
                    &mut records,
                )?
            }
            Backend::Remote => {
                let mut chat = ChatClient::new(cfg.annotate.chat.clone(), cfg.annotate.prompts.clone());
                let scorer = RemoteScorer::new(cfg.annotate.scorer.clone());
                let mut selector = ChatClient::new(cfg.annotate.chat.clone(), cfg.annotate.prompts.clone());
                annotate_one(&mut chat, &scorer, &mut selector, image.clone(), cfg, &mut records)?
            }
        };
        let line = serde_json::to_string(&FinalRecord {
            image_id: &image.id,
            caption: &caption,
        })
        .expect("record serializes");
        writeln!(finals, "{line}")?;
    }
    Ok(AnnotateOutput {
        records: records_path,
        finals: finals_path,
        images: n,
    })
}

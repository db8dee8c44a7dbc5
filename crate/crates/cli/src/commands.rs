//! Command bodies. Each reads its inputs, writes under `outputs/`, and returns
//! the config echo recorded in the manifest.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use locret_core::caa::ResidualMode;
use locret_core::corpus::{gen_corpus, load_corpus, save_corpus_with, split_corpus, Corpus, GenSpec, ImageEncoding};
use locret_core::encoders::{encode_image, load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use locret_core::explain::{
    evaluate_explainability, ExplainOptions, RemoteBackend, RemoteConfig, ScoreSummary, StubBackend, TextGenBackend,
};
use locret_core::grounding::{aggregate_grounding, export_heatmap, grounding_records_with};
use locret_core::mining::embed_region_query;
use locret_core::retrieval::{
    build_index, conditioned_index, cross_modal_from_indexes, evaluate_lcmmr, lcmmr_from_index, query_filtered,
    save_index, Direction, Modality,
};
use locret_core::trainer::{train, Stage, TrainConfig};
use ndarray::Array2;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};
use crate::manifest::{to_toml, RunDir, RunManifest};
use crate::{
    BackendArg, Command, EncodingArg, ExplainArgs, GalleryArg, GenArgs, GroundingArgs, ModeArg, ModelInputs,
    PresetArg, QueryArgs, ResidualArg, RetrievalArgs, TrainArgs,
};

struct Echo {
    config: Value,
    toml: String,
    seeds: Vec<u64>,
}

impl Echo {
    fn of(args: &impl Serialize, seeds: Vec<u64>) -> Self {
        let config = serde_json::to_value(args).expect("arguments serialize");
        Self {
            toml: to_toml(&config),
            config,
            seeds,
        }
    }
}

pub fn execute(cmd: &Command, argv: &[String], cwd: &Path) -> CliResult<RunManifest> {
    let run_args = match cmd {
        Command::Gen(a) => &a.run,
        Command::Train(a) => &a.run,
        Command::EvalGrounding(a) => &a.run,
        Command::EvalRetrieval(a) => &a.run,
        Command::Query(a) => &a.run,
        Command::Explain(a) => &a.run,
        Command::Rerun(_) => unreachable!("rerun is dispatched separately"),
    };
    let mut run = RunDir::create(&run_args.run_dir, run_args.force)?;
    log::info!("{} -> {}", cmd.name(), run.root.display());
    let echo = match cmd {
        Command::Gen(a) => gen(a, &mut run)?,
        Command::Train(a) => train_cmd(a, &mut run)?,
        Command::EvalGrounding(a) => grounding(a, &mut run)?,
        Command::EvalRetrieval(a) => retrieval(a, &mut run)?,
        Command::Query(a) => query_cmd(a, &mut run)?,
        Command::Explain(a) => explain(a, &mut run)?,
        Command::Rerun(_) => unreachable!(),
    };
    run.finish(cmd.name(), argv, cwd, echo.config, &echo.toml, echo.seeds)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn write_lines<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut out = BufWriter::new(fs::File::create(path).map_err(|e| CliError::io(path, e))?);
    for r in rows {
        serde_json::to_writer(&mut out, r).map_err(|e| CliError::Core(e.into()))?;
        out.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    }
    out.flush().map_err(|e| CliError::io(path, e))
}

/// Loads a checkpoint and corpus, checking that their vocabularies agree.
fn load_model(m: &ModelInputs, run: &mut RunDir) -> CliResult<(ModelParams, Corpus)> {
    run.input(&m.checkpoint)?;
    run.input(&m.corpus)?;
    let params = load_checkpoint(&m.checkpoint)?;
    let corpus = load_corpus(&m.corpus)?;
    check_vocab(&params, &corpus)?;
    Ok((params, corpus))
}

fn check_vocab(params: &ModelParams, corpus: &Corpus) -> CliResult<()> {
    if params.config.vocab_size != corpus.vocab.len() {
        return Err(CliError::Argument(format!(
            "checkpoint vocabulary has {} tokens but the corpus has {}",
            params.config.vocab_size,
            corpus.vocab.len()
        )));
    }
    Ok(())
}

fn modality(m: ModeArg) -> Modality {
    match m {
        ModeArg::RegionQuery => Modality::RegionQuery,
        ModeArg::GlobalImage => Modality::GlobalImage,
    }
}

fn gen(a: &GenArgs, run: &mut RunDir) -> CliResult<Echo> {
    if a.train == 0 || a.test == 0 {
        return Err(CliError::Argument("--train and --test must both be positive".into()));
    }
    let total = a.train + a.test;
    let spec = GenSpec::standard(total, a.diseases, a.normal_fraction, a.seed);
    let corpus = gen_corpus(&spec)?;
    let (mut train_set, mut test_set) = split_corpus(&corpus, a.train as f64 / total as f64, a.seed)?;
    if a.no_boxes {
        for s in train_set.samples.iter_mut().chain(test_set.samples.iter_mut()) {
            s.boxes = None;
        }
    }
    let encoding = match a.encoding {
        EncodingArg::Base64 => ImageEncoding::Base64F32le,
        EncodingArg::Inline => ImageEncoding::Inline,
    };
    save_corpus_with(&train_set, &run.output("train.jsonl"), encoding)?;
    save_corpus_with(&test_set, &run.output("test.jsonl"), encoding)?;
    log::info!("wrote {} train and {} test samples", train_set.len(), test_set.len());
    let mut echo = Echo::of(a, vec![a.seed]);
    echo.config = json!({ "args": echo.config, "generator": spec });
    echo.toml = to_toml(&echo.config);
    Ok(echo)
}

#[derive(Serialize)]
struct TrainSummary {
    stage: Stage,
    seed: u64,
    epochs: usize,
    steps_per_epoch: usize,
    steps: usize,
    epoch_mean_loss: Vec<f64>,
    /// Relative to the outputs directory.
    checkpoint: String,
}

fn train_cmd(a: &TrainArgs, run: &mut RunDir) -> CliResult<Echo> {
    run.input(&a.corpus)?;
    if let Some(p) = &a.init {
        run.input(p)?;
    }
    let stage = Stage::try_from(a.stage).map_err(CliError::Argument)?;
    let mut cfg = match &a.config {
        Some(path) => {
            run.input(path)?;
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let cfg = TrainConfig::from_toml(&text)?;
            if cfg.stage != stage {
                return Err(CliError::Argument(format!(
                    "config file is for stage {} but --stage is {}",
                    u8::from(cfg.stage),
                    a.stage
                )));
            }
            cfg
        }
        None => {
            let name = match a.preset.unwrap_or(PresetArg::Desk) {
                PresetArg::Desk => "desk",
                PresetArg::Paper => "paper",
            };
            TrainConfig::preset(name, stage, 0)?
        }
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.lr_caa = lr;
        cfg.lr_encoder = lr;
    }
    if a.hard_region_negatives {
        cfg.mining.hard_region_negatives = true;
    }
    cfg.validate()?;

    let corpus = load_corpus(&a.corpus)?;
    let shape_flags = a.blocks.is_some() || a.heads.is_some() || a.residual_mode.is_some();
    let params = match &a.init {
        Some(path) => {
            if shape_flags {
                return Err(CliError::Argument(
                    "--blocks, --heads and --residual-mode apply only to fresh models".into(),
                ));
            }
            load_checkpoint(path)?
        }
        None if stage == Stage::Triplet => {
            return Err(CliError::Argument("stage 2 needs a stage-1 checkpoint via --init".into()))
        }
        None => {
            let mut mc = ModelConfig::desk(corpus.vocab.len(), corpus.max_len);
            if let Some(b) = a.blocks {
                mc.blocks = b;
            }
            if let Some(h) = a.heads {
                mc.heads = h;
            }
            if let Some(r) = a.residual_mode {
                mc.residual_mode = match r {
                    ResidualArg::Paper => ResidualMode::Paper,
                    ResidualArg::Primed => ResidualMode::Primed,
                };
            }
            ModelParams::init(mc, cfg.seed)?
        }
    };
    check_vocab(&params, &corpus)?;

    let (trained, mut report) = train(&cfg, &corpus, params)?;
    save_checkpoint(&trained, &run.output("model.ckpt"))?;
    report.checkpoint = Some("model.ckpt".into());
    report.save_log(&run.output("train_log.jsonl"))?;
    let means = report.epoch_means();
    log::info!("epoch mean losses {means:?}");
    write_json(
        &run.output("train_report.json"),
        &TrainSummary {
            stage,
            seed: cfg.seed,
            epochs: cfg.epochs,
            steps_per_epoch: report.steps_per_epoch,
            steps: report.steps.len(),
            epoch_mean_loss: means,
            checkpoint: "model.ckpt".into(),
        },
    )?;
    Ok(Echo {
        config: json!({ "train": cfg, "model": trained.config }),
        toml: cfg.to_toml(),
        seeds: vec![cfg.seed],
    })
}

#[derive(Serialize)]
struct GroundingSummary {
    count: usize,
    thresholds: Vec<f64>,
    miou: f64,
    miou_std: f64,
    cnr: f64,
    cnr_std: f64,
    baseline_miou: f64,
    seeds: Vec<u64>,
}

fn grounding(a: &GroundingArgs, run: &mut RunDir) -> CliResult<Echo> {
    let (params, corpus) = load_model(&a.model, run)?;
    let dir = run.output("heatmaps");
    if a.heatmaps > 0 {
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    }
    let mut exported = 0;
    let records = grounding_records_with(&params, &corpus, &a.thresholds, |map, rec| {
        if exported < a.heatmaps {
            let stem = format!(
                "{:03}_{}_{}_{}",
                exported,
                rec.id,
                rec.finding.region().unwrap_or("none"),
                rec.finding.disease()
            );
            export_heatmap(
                &map.upsampled,
                &dir.join(format!("{stem}.pgm")),
                &dir.join(format!("{stem}.raw")),
            )?;
            exported += 1;
        }
        Ok(())
    })?;
    write_lines(&run.output("grounding.jsonl"), &records)?;
    let result = aggregate_grounding(records, &a.seeds)?;
    log::info!("mIoU {:.4} (constant map {:.4}), CNR {:.3}", result.miou, result.baseline_miou, result.cnr);
    write_json(
        &run.output("grounding_summary.json"),
        &GroundingSummary {
            count: result.records.len(),
            thresholds: a.thresholds.clone(),
            miou: result.miou,
            miou_std: result.miou_std,
            cnr: result.cnr,
            cnr_std: result.cnr_std,
            baseline_miou: result.baseline_miou,
            seeds: result.seeds.clone(),
        },
    )?;
    Ok(Echo::of(a, a.seeds.clone()))
}

fn retrieval(a: &RetrievalArgs, run: &mut RunDir) -> CliResult<Echo> {
    let (params, corpus) = load_model(&a.model, run)?;
    let findings = build_index(&params, &corpus, Modality::RegionQuery)?;
    let images = build_index(&params, &corpus, Modality::GlobalImage)?;
    let reports = build_index(&params, &corpus, Modality::Report)?;
    let (region_query, global_image) = match a.gallery {
        GalleryArg::Conditioned => (
            evaluate_lcmmr(&params, &corpus, Modality::RegionQuery)?,
            evaluate_lcmmr(&params, &corpus, Modality::GlobalImage)?,
        ),
        GalleryArg::FindingIndex => (lcmmr_from_index(&findings, &corpus)?, lcmmr_from_index(&images, &corpus)?),
    };
    log::info!(
        "region-level Rank@1: region query {:.2}, global image {:.2}",
        region_query.region.precision_at(1).unwrap_or(f64::NAN),
        global_image.region.precision_at(1).unwrap_or(f64::NAN)
    );
    write_json(
        &run.output("lcmmr.json"),
        &json!({ "gallery": a.gallery, "region_query": region_query, "global_image": global_image }),
    )?;
    let cross = [Direction::Image2Report, Direction::Report2Image]
        .into_iter()
        .map(|d| cross_modal_from_indexes(&images, &reports, &corpus.samples, d))
        .collect::<Result<Vec<_>, _>>()?;
    write_json(&run.output("cross_modal.json"), &cross)?;
    save_index(&findings, &run.output("region_query.idx"))?;
    save_index(&images, &run.output("global_image.idx"))?;
    Ok(Echo::of(a, vec![]))
}

fn read_image(path: &Path, side: usize) -> CliResult<Array2<f32>> {
    let img = image::open(path)
        .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?
        .to_luma32f();
    let (w, h) = img.dimensions();
    if w as usize != side || h as usize != side {
        return Err(CliError::Argument(format!(
            "query image is {w}x{h} but the model expects {side}x{side}"
        )));
    }
    Ok(Array2::from_shape_vec((side, side), img.into_raw()).expect("dimensions checked"))
}

fn write_thumbnail(image: &Array2<f32>, path: &Path) -> CliResult<()> {
    let (h, w) = image.dim();
    let bytes: Vec<u8> = image.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .expect("buffer matches dimensions")
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}

fn query_cmd(a: &QueryArgs, run: &mut RunDir) -> CliResult<Echo> {
    let (params, corpus) = load_model(&a.model, run)?;
    if a.k == 0 {
        return Err(CliError::Argument("--k must be at least 1".into()));
    }
    if corpus.layout.region(&a.region).is_none() {
        return Err(CliError::Argument(format!("corpus has no region `{}`", a.region)));
    }
    let image = match (&a.image, &a.sample) {
        (Some(path), _) => {
            run.input(path)?;
            read_image(path, params.config.image_size)?
        }
        (None, Some(id)) => corpus
            .sample(id)
            .ok_or_else(|| CliError::Argument(format!("corpus has no sample `{id}`")))?
            .image
            .clone(),
        (None, None) => return Err(CliError::Argument("pass --image or --sample".into())),
    };
    let (q, index) = match a.mode {
        ModeArg::RegionQuery => {
            let tokens = corpus.vocab.region_query(&a.region)?;
            (
                embed_region_query(&params, &image, &tokens)?,
                conditioned_index(&params, &corpus, &a.region)?,
            )
        }
        ModeArg::GlobalImage => (
            encode_image(&params, &image)?.global,
            build_index(&params, &corpus, Modality::GlobalImage)?,
        ),
    };
    let keep = |e: &locret_core::retrieval::IndexEntry| a.sample.as_deref() != Some(e.sample_id.as_str());
    let available = index.entries.iter().filter(|e| keep(e)).count();
    if available == 0 {
        return Err(CliError::Argument("gallery is empty once the query sample is left out".into()));
    }
    let k = if a.k > available {
        log::warn!("k = {} exceeds the gallery size {available}; returning the full gallery", a.k);
        available
    } else {
        a.k
    };
    let gallery = query_filtered(&index, &q, k, keep)?;
    let thumbs = run.output("thumbnails");
    fs::create_dir_all(&thumbs).map_err(|e| CliError::io(&thumbs, e))?;
    let mut items = Vec::with_capacity(gallery.items.len());
    for (rank, it) in gallery.items.iter().enumerate() {
        let sample = corpus.sample(&it.sample_id).expect("index built from corpus");
        let thumb = format!("thumbnails/rank{:03}_{}.png", rank + 1, sample.id);
        write_thumbnail(&sample.image, &run.output(&thumb))?;
        items.push(json!({
            "rank": rank + 1,
            "id": it.id,
            "sample_id": it.sample_id,
            "score": it.score,
            "findings": sample.findings,
            "thumbnail": thumb,
        }));
    }
    write_json(
        &run.output("gallery.json"),
        &json!({
            "mode": a.mode,
            "region": a.region,
            "requested_k": a.k,
            "k": k,
            "items": items,
        }),
    )?;
    Ok(Echo::of(a, vec![]))
}

fn explain(a: &ExplainArgs, run: &mut RunDir) -> CliResult<Echo> {
    let (params, corpus) = load_model(&a.model, run)?;
    let backend: Box<dyn TextGenBackend> = match a.backend {
        BackendArg::Stub => Box::new(StubBackend::for_corpus(&corpus)),
        BackendArg::Remote => {
            let endpoint = a
                .endpoint
                .clone()
                .ok_or_else(|| CliError::Argument("--endpoint is required with --backend remote".into()))?;
            let cfg = RemoteConfig {
                endpoint,
                token_env: a.token_env.clone(),
                model: a.model_name.clone(),
                timeout_secs: a.timeout_secs,
            };
            Box::new(RemoteBackend::new(cfg).map_err(|e| CliError::Core(e.into()))?)
        }
    };
    let options = ExplainOptions {
        k: a.k,
        parallelism: a.parallelism,
    };
    let report = evaluate_explainability(&params, &corpus, modality(a.mode), backend.as_ref(), options)?;
    let path = run.output("explain.jsonl");
    let mut out = BufWriter::new(fs::File::create(&path).map_err(|e| CliError::io(&path, e))?);
    report.write_records(&mut out)?;
    out.flush().map_err(|e| CliError::io(&path, e))?;
    log::info!(
        "mean consistency: retrieval {:.3}, pseudo ground truth {:.3}",
        report.retrieval.mean,
        report.pseudo_gt.mean
    );
    let summary: [&ScoreSummary; 2] = [&report.retrieval, &report.pseudo_gt];
    write_json(
        &run.output("explain_summary.json"),
        &json!({ "backend": report.backend, "summaries": summary }),
    )?;
    Ok(Echo::of(a, vec![]))
}

//! End-to-end orchestration: dataset generation, two-stage training (the
//! detector first, then the diffusion refiner on top of the frozen
//! detector), inference dumps and metric reports.

use crate::acd::{self, AcdModel, EvalAnchorSet, PositionsCache};
use crate::ccd::{self, schedule::Schedule, CcdEvalInstance, Denoiser, PredictionRecord};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{self, ConfidenceRecord, ConfidenceRow, Detection, MapSuite};
use serde::Serialize;
use std::path::{Path, PathBuf};

pub const ACD_CHECKPOINT: &str = "acd_checkpoint.bin";
pub const CCD_CHECKPOINT: &str = "ccd_checkpoint.bin";
pub const ACD_LOSS: &str = "acd_loss.csv";
pub const CCD_LOSS: &str = "ccd_loss.csv";
pub const ACD_PREDICTIONS: &str = "acd_predictions.jsonl";
pub const CCD_PREDICTIONS: &str = "ccd_predictions.jsonl";
pub const ACD_METRICS: &str = "metrics_acd.csv";
pub const CCD_METRICS: &str = "metrics_ccd.csv";
pub const CCD_CONFIDENCE: &str = "confidence_ccd.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Acd,
    Ccd,
}

impl Stage {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "acd" => Ok(Stage::Acd),
            "ccd" => Ok(Stage::Ccd),
            other => Err(Error::config(format!(
                "unknown stage '{other}' (expected acd|ccd)"
            ))),
        }
    }
}

/// Writes a freshly generated synthetic dataset to `out_dir`.
pub fn generate_dataset(spec: &dataset::synth::SyntheticSpec, out_dir: &Path) -> Result<()> {
    let ds = dataset::synth::generate(spec)?;
    dataset::save_dataset(out_dir, &ds)
}

fn loss_csv(curve: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, loss) in curve.iter().enumerate() {
        out.push_str(&format!("{},{loss}\n", i + 1));
    }
    out
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    stage: &'a str,
    seed: u64,
    config_sha256: String,
    dataset: String,
    interactions: &'a str,
}

fn write_metadata(config: &RunConfig, out_dir: &Path, stage: &str) -> Result<()> {
    let meta = RunMetadata {
        stage,
        seed: config.seed,
        config_sha256: config.hash(),
        dataset: config.dataset.display().to_string(),
        interactions: config.interactions.as_str(),
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::validation(e.to_string()))?;
    std::fs::write(out_dir.join(format!("{stage}_run.json")), text)?;
    Ok(())
}

/// Trains the requested stage against the configured dataset, writing a
/// checkpoint, a loss curve and run metadata into the output directory.
pub fn train_stage(config: &RunConfig, stage: Stage) -> Result<PathBuf> {
    let out_dir = config.resolved_out_dir();
    std::fs::create_dir_all(&out_dir)?;
    let ds = dataset::load_dataset(&config.dataset)?;
    let cache = PositionsCache::build(&ds)?;
    let instances = acd::build_instances(&ds, &cache, Split::Train, &config.acd_config())?;

    match stage {
        Stage::Acd => {
            let mut model = AcdModel::init(
                ds.grid().0,
                ds.num_classes(),
                config.acd_config(),
                config.seed,
            )?;
            let curve = acd::train_acd(&mut model, &instances, &cache, config.seed)?;
            checkpoint::save_params(&model.params, &out_dir.join(ACD_CHECKPOINT))?;
            std::fs::write(out_dir.join(ACD_LOSS), loss_csv(&curve))?;
            write_metadata(config, &out_dir, "acd")?;
        }
        Stage::Ccd => {
            let acd_model = load_acd_model(config, &ds, &out_dir)?;
            let ccd_cfg = config.ccd_config();
            let sched = Schedule::linear(ccd_cfg.t_steps, ccd_cfg.beta_start, ccd_cfg.beta_end)?;
            let train_set = ccd_instances(&acd_model, &instances, &cache)?;
            let mut denoiser = Denoiser::init(
                2 * config.embed_dim,
                ds.num_classes(),
                ccd_cfg.denoiser_width,
                config.seed,
            )?;
            let curve = ccd::train_ccd(
                &mut denoiser,
                &train_set,
                &sched,
                config.seed,
                ccd_cfg.epochs,
                ccd_cfg.learning_rate,
            )?;
            checkpoint::save_params(&denoiser.params, &out_dir.join(CCD_CHECKPOINT))?;
            std::fs::write(out_dir.join(CCD_LOSS), loss_csv(&curve))?;
            write_metadata(config, &out_dir, "ccd")?;
        }
    }
    Ok(out_dir)
}

fn load_acd_model(config: &RunConfig, ds: &Dataset, out_dir: &Path) -> Result<AcdModel> {
    let params = checkpoint::load_params(&out_dir.join(ACD_CHECKPOINT))?;
    AcdModel::from_params(params, config.acd_config(), ds.grid().0, ds.num_classes())
}

fn load_denoiser(config: &RunConfig, ds: &Dataset, out_dir: &Path) -> Result<Denoiser> {
    let params = checkpoint::load_params(&out_dir.join(CCD_CHECKPOINT))?;
    Denoiser::from_params(
        params,
        2 * config.embed_dim,
        ds.num_classes(),
        config.denoiser_width,
    )
}

/// Frozen-detector summaries and priors for the diffusion stage.
pub fn ccd_instances(
    model: &AcdModel,
    instances: &[acd::TrainInstance],
    cache: &PositionsCache,
) -> Result<Vec<ccd::CcdTrainInstance>> {
    instances
        .iter()
        .map(|inst| {
            let fwd = model.forward(&inst.inputs(cache)?)?;
            Ok(ccd::CcdTrainInstance {
                summary: fwd.summary,
                prior: fwd.probs,
                class_id: inst.class_id,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct AcdDumpRow<'a> {
    video_id: &'a str,
    t: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    scores: &'a [f64],
    source: &'static str,
}

#[derive(Serialize)]
struct CcdDumpRow<'a> {
    video_id: &'a str,
    t: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    refined_class: usize,
    mean_scores: &'a [f64],
    iw: &'a [f64],
    source: &'static str,
}

/// Detector predictions over the filtered anchors of one split.
pub fn acd_predictions(
    model: &AcdModel,
    ds: &Dataset,
    cache: &PositionsCache,
    anchors: &EvalAnchorSet,
) -> Result<(Vec<Detection>, String)> {
    let _ = ds;
    let mut detections = Vec::new();
    let mut dump = String::new();
    for anchor in &anchors.anchors {
        let fwd = model.forward(&anchor.inputs(cache)?)?;
        let class_id = acd::argmax(&fwd.probs);
        let row = AcdDumpRow {
            video_id: &anchor.video_id,
            t: anchor.t,
            bbox: [anchor.bbox.x1, anchor.bbox.y1, anchor.bbox.x2, anchor.bbox.y2],
            scores: &fwd.probs,
            source: "acd",
        };
        dump.push_str(&serde_json::to_string(&row).map_err(|e| Error::validation(e.to_string()))?);
        dump.push('\n');
        detections.push(Detection {
            video_id: anchor.video_id.clone(),
            t: anchor.t,
            bbox: anchor.bbox,
            class_id,
            score: fwd.probs[class_id],
        });
    }
    Ok((detections, dump))
}

/// Diffusion-refined predictions with interval widths for the same anchors.
pub fn ccd_predictions(
    model: &AcdModel,
    denoiser: &Denoiser,
    ds: &Dataset,
    cache: &PositionsCache,
    anchors: &EvalAnchorSet,
    config: &RunConfig,
) -> Result<(Vec<PredictionRecord>, String)> {
    let _ = ds;
    let ccd_cfg = config.ccd_config();
    let sched = Schedule::linear(ccd_cfg.t_steps, ccd_cfg.beta_start, ccd_cfg.beta_end)?;
    let mut records = Vec::new();
    let mut dump = String::new();
    for anchor in &anchors.anchors {
        let fwd = model.forward(&anchor.inputs(cache)?)?;
        let inst = CcdEvalInstance {
            video_id: anchor.video_id.clone(),
            t: anchor.t,
            bbox: anchor.bbox,
            key: format!("{}/{}/{}", anchor.video_id, anchor.t, anchor.anchor_idx),
            summary: fwd.summary,
            prior: fwd.probs,
        };
        let rec = ccd::predict_with_confidence(
            &inst,
            ccd_cfg.n_samples,
            denoiser,
            &sched,
            config.seed,
            ccd_cfg.refine_rule,
        )?;
        let row = CcdDumpRow {
            video_id: &rec.video_id,
            t: rec.t,
            bbox: [rec.bbox.x1, rec.bbox.y1, rec.bbox.x2, rec.bbox.y2],
            refined_class: rec.refined_class,
            mean_scores: &rec.mean_scores,
            iw: &rec.iw,
            source: "ccd",
        };
        dump.push_str(&serde_json::to_string(&row).map_err(|e| Error::validation(e.to_string()))?);
        dump.push('\n');
        records.push(rec);
    }
    Ok((records, dump))
}

pub fn records_to_detections(records: &[PredictionRecord]) -> Vec<Detection> {
    records
        .iter()
        .map(|r| Detection {
            video_id: r.video_id.clone(),
            t: r.t,
            bbox: r.bbox,
            class_id: r.refined_class,
            score: r.mean_scores[r.refined_class],
        })
        .collect()
}

/// Matches refined predictions to ground truth (class-agnostic, IoU 0.5,
/// greedy by score) and keeps one record per matched ground truth with the
/// interval width at the true class.
pub fn confidence_records(
    records: &[PredictionRecord],
    ds: &Dataset,
    split: Split,
) -> Result<Vec<ConfidenceRecord>> {
    let gts = eval::split_ground_truths(ds, split);
    let dets = records_to_detections(records);
    let matched = eval::match_greedy(&dets, &gts, 0.5)?;
    let mut out = Vec::new();
    for (rank, &(is_tp, gt_idx)) in matched.detections.iter().enumerate() {
        if !is_tp {
            continue;
        }
        let det_idx = matched.order[rank];
        let gt = &gts[gt_idx.unwrap()];
        let rec = &records[det_idx];
        out.push(ConfidenceRecord {
            true_class: gt.class_id,
            predicted_class: rec.refined_class,
            iw_true_class: rec.iw[gt.class_id],
        });
    }
    Ok(out)
}

/// Everything one evaluation emits.
pub struct EvalOutcome {
    pub suite: MapSuite,
    pub confidence: Option<Vec<ConfidenceRow>>,
    pub records: Option<Vec<ConfidenceRecord>>,
}

/// Evaluates the requested prediction source on the test split, writing the
/// prediction dump, the metrics CSV and (for the diffusion source) the
/// confidence CSV.
pub fn eval_stage(config: &RunConfig, source: Stage) -> Result<EvalOutcome> {
    let out_dir = config.resolved_out_dir();
    std::fs::create_dir_all(&out_dir)?;
    let ds = dataset::load_dataset(&config.dataset)?;
    let cache = PositionsCache::build(&ds)?;
    let anchors = acd::build_eval_anchors(&ds, &cache, Split::Test, &config.acd_config(), config.anchor_threshold)?;
    let gts = eval::split_ground_truths(&ds, Split::Test);
    let model = load_acd_model(config, &ds, &out_dir)?;

    match source {
        Stage::Acd => {
            let (dets, dump) = acd_predictions(&model, &ds, &cache, &anchors)?;
            std::fs::write(out_dir.join(ACD_PREDICTIONS), dump)?;
            let suite = eval::map_suite(&dets, &gts, &ds)?;
            std::fs::write(
                out_dir.join(ACD_METRICS),
                eval::metrics_csv(&suite, &ds.manifest.class_names),
            )?;
            Ok(EvalOutcome {
                suite,
                confidence: None,
                records: None,
            })
        }
        Stage::Ccd => {
            let denoiser = load_denoiser(config, &ds, &out_dir)?;
            let (records, dump) = ccd_predictions(&model, &denoiser, &ds, &cache, &anchors, config)?;
            std::fs::write(out_dir.join(CCD_PREDICTIONS), dump)?;
            let dets = records_to_detections(&records);
            let suite = eval::map_suite(&dets, &gts, &ds)?;
            std::fs::write(
                out_dir.join(CCD_METRICS),
                eval::metrics_csv(&suite, &ds.manifest.class_names),
            )?;
            let conf_records = confidence_records(&records, &ds, Split::Test)?;
            let rows = eval::confidence_report(&conf_records);
            std::fs::write(
                out_dir.join(CCD_CONFIDENCE),
                eval::confidence_csv(&rows, &ds.manifest.class_names),
            )?;
            Ok(EvalOutcome {
                suite,
                confidence: Some(rows),
                records: Some(conf_records),
            })
        }
    }
}

/// mAP-mean per ablation variant plus the confidence artifacts of the final
/// diffusion stage, computed fully in memory over one dataset.
pub struct AblationOutcome {
    pub backbone: f64,
    pub temporal: f64,
    pub spatial: f64,
    pub stab: f64,
    pub ccd: f64,
    pub confidence_rows: Vec<ConfidenceRow>,
    pub confidence_records: Vec<ConfidenceRecord>,
}

/// Trains the four detector variants and the diffusion refiner on one
/// synthetic dataset and evaluates them on its test split.
pub fn run_ablation(ds: &Dataset, base: &RunConfig) -> Result<AblationOutcome> {
    use crate::acd::Interactions;
    let cache = PositionsCache::build(ds)?;
    let train_instances = acd::build_instances(ds, &cache, Split::Train, &base.acd_config())?;
    let anchors = acd::build_eval_anchors(ds, &cache, Split::Test, &base.acd_config(), base.anchor_threshold)?;
    let gts = eval::split_ground_truths(ds, Split::Test);

    let map_of = |interactions: Interactions| -> Result<(f64, AcdModel)> {
        let mut config = base.acd_config();
        config.interactions = interactions;
        let mut model = AcdModel::init(ds.grid().0, ds.num_classes(), config, base.seed)?;
        acd::train_acd(&mut model, &train_instances, &cache, base.seed)?;
        let (dets, _) = acd_predictions(&model, ds, &cache, &anchors)?;
        let suite = eval::map_suite(&dets, &gts, ds)?;
        Ok((suite.map_mean, model))
    };

    let (backbone, _) = map_of(Interactions::None)?;
    let (temporal, _) = map_of(Interactions::Temporal)?;
    let (spatial, _) = map_of(Interactions::Spatial)?;
    let (stab, stab_model) = map_of(Interactions::Both)?;

    let ccd_cfg = base.ccd_config();
    let sched = Schedule::linear(ccd_cfg.t_steps, ccd_cfg.beta_start, ccd_cfg.beta_end)?;
    let train_set = ccd_instances(&stab_model, &train_instances, &cache)?;
    let mut denoiser = Denoiser::init(
        2 * base.embed_dim,
        ds.num_classes(),
        ccd_cfg.denoiser_width,
        base.seed,
    )?;
    ccd::train_ccd(
        &mut denoiser,
        &train_set,
        &sched,
        base.seed,
        ccd_cfg.epochs,
        ccd_cfg.learning_rate,
    )?;
    let (records, _) = ccd_predictions(&stab_model, &denoiser, ds, &cache, &anchors, base)?;
    let dets = records_to_detections(&records);
    let suite = eval::map_suite(&dets, &gts, ds)?;
    let confidence_records = confidence_records(&records, ds, Split::Test)?;
    let confidence_rows = eval::confidence_report(&confidence_records);

    Ok(AblationOutcome {
        backbone,
        temporal,
        spatial,
        stab,
        ccd: suite.map_mean,
        confidence_rows,
        confidence_records,
    })
}

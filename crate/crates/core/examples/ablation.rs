//! Runs the detector ablation plus the diffusion refiner on a freshly
//! generated synthetic dataset, printing per-variant mAP and per-class
//! test accuracy.
//!
//!     cargo run --release -p actdet-core --example ablation [seed]

use actdet_core::acd::{self, AcdModel, Interactions, PositionsCache};
use actdet_core::ccd::{self, schedule::Schedule, Denoiser};
use actdet_core::config::RunConfig;
use actdet_core::dataset::{synth, Split};
use actdet_core::eval;
use actdet_core::pipeline;

fn per_class_accuracy(
    k: usize,
    instances: &[acd::TrainInstance],
    predict: impl Fn(&acd::TrainInstance) -> usize,
) -> Vec<f64> {
    let mut correct = vec![0usize; k];
    let mut total = vec![0usize; k];
    for inst in instances {
        total[inst.class_id] += 1;
        if predict(inst) == inst.class_id {
            correct[inst.class_id] += 1;
        }
    }
    (0..k)
        .map(|c| correct[c] as f64 / total[c].max(1) as f64)
        .collect()
}

fn main() {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    let spec = synth::default_spec(seed);
    let ds = synth::generate(&spec).expect("generate dataset");
    eprintln!("dataset: {} frames", ds.frames.len());

    let mut config = RunConfig::default();
    config.seed = seed;
    let k = ds.num_classes();

    let cache = PositionsCache::build(&ds).unwrap();
    let train = acd::build_instances(&ds, &cache, Split::Train, &config.acd_config()).unwrap();
    let test = acd::build_instances(&ds, &cache, Split::Test, &config.acd_config()).unwrap();
    let anchors = acd::build_eval_anchors(&ds, &cache, Split::Test, &config.acd_config(), 0.8).unwrap();
    let gts = eval::split_ground_truths(&ds, Split::Test);
    eprintln!("instances: train {}, test {}, eval anchors {}", train.len(), test.len(), anchors.anchors.len());

    let started = std::time::Instant::now();
    let mut stab_model = None;
    println!("variant,map_mean,per_class_acc");
    for variant in [
        Interactions::None,
        Interactions::Temporal,
        Interactions::Spatial,
        Interactions::Both,
    ] {
        let t0 = std::time::Instant::now();
        let mut acd_cfg = config.acd_config();
        acd_cfg.interactions = variant;
        let mut model = AcdModel::init(ds.grid().0, k, acd_cfg, seed).unwrap();
        let curve = acd::train_acd(&mut model, &train, &cache, seed).unwrap();
        let (dets, _) = pipeline::acd_predictions(&model, &ds, &cache, &anchors).unwrap();
        let suite = eval::map_suite(&dets, &gts, &ds).unwrap();
        let accs = per_class_accuracy(k, &test, |inst| {
            acd::argmax(&model.forward(&inst.inputs(&cache).unwrap()).unwrap().probs)
        });
        println!(
            "{},{:.4},{:?}  loss {:.3}->{:.3} ({:.0?})",
            variant.as_str(),
            suite.map_mean,
            accs.iter().map(|a| (a * 100.0).round() / 100.0).collect::<Vec<_>>(),
            curve[0],
            curve.last().unwrap(),
            t0.elapsed(),
        );
        if variant == Interactions::Both {
            stab_model = Some(model);
        }
    }

    let stab_model = stab_model.unwrap();
    let t0 = std::time::Instant::now();
    let ccd_cfg = config.ccd_config();
    let sched = Schedule::linear(ccd_cfg.t_steps, ccd_cfg.beta_start, ccd_cfg.beta_end).unwrap();
    let train_set = pipeline::ccd_instances(&stab_model, &train, &cache).unwrap();
    let mut denoiser = Denoiser::init(2 * config.embed_dim, k, ccd_cfg.denoiser_width, seed).unwrap();
    let curve = ccd::train_ccd(&mut denoiser, &train_set, &sched, seed, ccd_cfg.epochs, ccd_cfg.learning_rate).unwrap();
    let (records, _) = pipeline::ccd_predictions(&stab_model, &denoiser, &ds, &cache, &anchors, &config).unwrap();
    let dets = pipeline::records_to_detections(&records);
    let suite = eval::map_suite(&dets, &gts, &ds).unwrap();

    // Per-class accuracy of the refined predictions on matched instances.
    let test_set = pipeline::ccd_instances(&stab_model, &test, &cache).unwrap();
    let mut correct = vec![0usize; k];
    let mut total = vec![0usize; k];
    for (inst, ci) in test.iter().zip(&test_set) {
        let eval_inst = ccd::CcdEvalInstance {
            video_id: inst.video_id.clone(),
            t: inst.t,
            bbox: inst.bbox,
            key: format!("diag/{}/{}", inst.video_id, inst.t),
            summary: ci.summary.clone(),
            prior: ci.prior.clone(),
        };
        let rec = ccd::predict_with_confidence(&eval_inst, 40, &denoiser, &sched, seed, ccd_cfg.refine_rule).unwrap();
        total[inst.class_id] += 1;
        if rec.refined_class == inst.class_id {
            correct[inst.class_id] += 1;
        }
    }
    let accs: Vec<f64> = (0..k).map(|c| (correct[c] as f64 / total[c].max(1) as f64 * 100.0).round() / 100.0).collect();
    println!(
        "ccd,{:.4},{:?}  loss {:.3}->{:.3} ({:.0?})",
        suite.map_mean,
        accs,
        curve[0],
        curve.last().unwrap(),
        t0.elapsed(),
    );

    let conf_records = pipeline::confidence_records(&records, &ds, Split::Test).unwrap();
    let rows = eval::confidence_report(&conf_records);
    println!("\nclass,instances,accuracy,iw_correct(n),iw_incorrect(n)");
    for row in &rows {
        let fmt = |side: Option<(f64, usize)>| match side {
            Some((w, n)) => format!("{w:.2} ({n})"),
            None => "-".to_string(),
        };
        println!(
            "{},{},{:.3},{},{}",
            row.class_id,
            row.instances,
            row.accuracy,
            fmt(row.mean_iw_correct),
            fmt(row.mean_iw_incorrect)
        );
    }
    eprintln!("total {:.0?}", started.elapsed());
}

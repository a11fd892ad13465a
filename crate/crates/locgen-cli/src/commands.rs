//! Command implementations. Each command reads what it needs, runs one
//! pipeline stage, writes its artifacts into the given directory, and
//! prints a short summary. Artifacts are deterministic: rerunning a
//! command with the same inputs rewrites identical bytes.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde_json::json;

use locgen::dataio::{read_datasets, write_annotations, write_scenes};
use locgen::dpo::dpo_finetune;
use locgen::eval::{curve_sweep, evaluate_model, random_baseline, topk_sweep, EvalConfig};
use locgen::geometry::{quantize_to_bins, BBox};
use locgen::model::{
    build_nll_graph, encode_batch, load_checkpoint, params_hash, save_checkpoint, Example,
    ModelConfig, ModelParams,
};
use locgen::pretrain::pretrain;
use locgen::report::{
    write_config_echo, write_counts_csv, write_dpo_log, write_per_set_csv, write_pretrain_log,
    write_rate_chart, write_samples_jsonl, RatePoint, SampleRecord,
};
use locgen::rng::Rng;
use locgen::sampler::{sample_k_in_region, sample_k_locations};
use locgen::scene::{anchor_count, build_dataset, generate_scene, ClassId, Dataset};
use locgen::{autodiff, eval, Error, Result};

use crate::config::AppConfig;
use crate::SplitArg;

// Per-set draw streams for the sampling command.
const STREAM_SAMPLE: u64 = 0x73616d70;

fn dataset_paths(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    (dir.join("scenes.jsonl"), dir.join("annotations.jsonl"))
}

fn read_data(dir: &Path) -> Result<(Dataset, Dataset)> {
    let (scenes, annotations) = dataset_paths(dir);
    read_datasets(&scenes, &annotations)
}

fn pick_split<'d>(train: &'d Dataset, test: &'d Dataset, split: SplitArg) -> &'d Dataset {
    match split {
        SplitArg::Train => train,
        SplitArg::Test => test,
    }
}

/// The model and the data it runs on must agree on geometry and labels.
fn check_compat(model: &ModelConfig, dataset: &Dataset) -> Result<()> {
    let scene = dataset
        .scenes
        .first()
        .ok_or_else(|| Error::InvalidArgument("dataset contains no scenes".into()))?;
    if scene.image_size() != model.image_size || scene.num_classes() != model.num_classes {
        return Err(Error::InvalidConfig(format!(
            "model expects {} px / {} classes but the dataset has {} px / {} classes",
            model.image_size,
            model.num_classes,
            scene.image_size(),
            scene.num_classes()
        )));
    }
    Ok(())
}

fn eval_config(cfg: &AppConfig) -> EvalConfig {
    EvalConfig { k: cfg.eval_k, iou_threshold: cfg.iou_threshold, sampler: cfg.sampler.clone() }
}

fn split_stats(name: &str, dataset: &Dataset, lattice: u64) {
    let sets = dataset.sets.len();
    let pos: usize = dataset.sets.iter().map(|s| s.num_positives()).sum();
    let neg: usize = dataset.sets.iter().map(|s| s.num_negatives()).sum();
    let mean = (pos + neg) as f64 / sets.max(1) as f64;
    println!(
        "{name}: {} scenes, {sets} sets, {pos} plausible / {neg} implausible anchors \
         ({mean:.1} per set, {:.3}% of the {lattice}-anchor lattice)",
        dataset.scenes.len(),
        mean / lattice as f64 * 100.0
    );
}

pub fn gen_data(cfg: &AppConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let (train, test) = build_dataset(&cfg.data, cfg.seed)?;
    let (scenes, annotations) = dataset_paths(out);
    write_scenes(&scenes, &[&train, &test])?;
    write_annotations(&annotations, &[&train, &test])?;
    write_config_echo(&out.join("gen_config.json"), cfg)?;
    let lattice = anchor_count(cfg.data.scene.image_size, cfg.data.annotation.anchor_stride);
    split_stats("train", &train, lattice);
    split_stats("test", &test, lattice);
    Ok(())
}

pub fn train(cfg: &AppConfig, data: &Path, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let (train, test) = read_data(data)?;
    check_compat(&cfg.model, &train)?;
    let (params, logs) = pretrain(&train, Some(&test), &cfg.model, &cfg.pretrain, cfg.seed)?;
    let meta = json!({
        "phase": "pretrained",
        "seed": cfg.seed,
        "steps": cfg.pretrain.steps,
    });
    save_checkpoint(&out.join("model.ckpt"), &params, &meta)?;
    write_pretrain_log(&out.join("pretrain.csv"), &logs)?;
    write_config_echo(&out.join("train_config.json"), cfg)?;
    let last = logs.last().expect("at least one step");
    let heldout = last
        .heldout_loss
        .map(|h| format!("{h:.4}"))
        .unwrap_or_else(|| "n/a".into());
    println!(
        "trained {} steps: train loss {:.4}, heldout loss {heldout}, weights {:016x}",
        logs.len(),
        last.train_loss,
        params_hash(&params)
    );
    Ok(())
}

pub fn dpo(cfg: &AppConfig, data: &Path, model: &Path, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let (train, _) = read_data(data)?;
    let (params, _) = load_checkpoint(model)?;
    check_compat(params.config(), &train)?;
    let (tuned, logs) = dpo_finetune(&params, &train, &cfg.dpo, cfg.seed)?;
    let first = logs.first().expect("at least one step");
    let meta = json!({
        "phase": "preference-finetuned",
        "seed": cfg.seed,
        "steps": cfg.dpo.steps,
        "ref_hash": format!("{:016x}", first.ref_hash),
    });
    save_checkpoint(&out.join("model_dpo.ckpt"), &tuned, &meta)?;
    write_dpo_log(&out.join("dpo.csv"), &logs)?;
    write_config_echo(&out.join("dpo_config.json"), cfg)?;
    let last = logs.last().expect("at least one step");
    println!(
        "finetuned {} steps: loss {:.4} -> {:.4}, preference {:.3} -> {:.3}, weights {:016x}",
        logs.len(),
        first.dpo_loss,
        last.dpo_loss,
        first.mean_preference_prob,
        last.mean_preference_prob,
        params_hash(&tuned)
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn sample(
    cfg: &AppConfig,
    data: &Path,
    model: &Path,
    out: &Path,
    split: SplitArg,
    scene_id: Option<&str>,
    class: Option<u32>,
    k: u32,
    region: Option<&str>,
) -> Result<()> {
    let (train, test) = read_data(data)?;
    let dataset = pick_split(&train, &test, split);
    let (params, _) = load_checkpoint(model)?;
    check_compat(params.config(), dataset)?;

    let selected: Vec<usize> = match scene_id {
        Some(id) => {
            let class = class.expect("clap enforces --class with --scene");
            let idx = dataset
                .sets
                .iter()
                .position(|s| s.scene_id == id && s.class.0 == class)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "no annotation set for scene '{id}' class {class} in the {split:?} split"
                    ))
                })?;
            vec![idx]
        }
        None => (0..dataset.sets.len()).collect(),
    };

    let root = Rng::new(cfg.seed).split(STREAM_SAMPLE);
    let mut records = Vec::with_capacity(selected.len() * k as usize);
    for idx in selected {
        let set = &dataset.sets[idx];
        let scene = dataset.scene(&set.scene_id)?;
        let set_seed = root.split(idx as u64).next_u64();
        let samples = match region {
            Some(spec) => {
                let region = parse_region(spec, scene.image_size())?;
                sample_k_in_region(&params, scene, set.class, &region, &cfg.sampler, k, set_seed)?
            }
            None => sample_k_locations(&params, scene, set.class, &cfg.sampler, k, set_seed)?,
        };
        records.extend(samples.into_iter().map(|s| SampleRecord {
            scene_id: set.scene_id.clone(),
            class: set.class.0,
            bbox: [s.bbox.x1, s.bbox.y1, s.bbox.x2, s.bbox.y2],
            logprob: s.logprob,
        }));
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_samples_jsonl(out, &records)?;
    println!("wrote {} samples to {}", records.len(), out.display());
    Ok(())
}

fn parse_region(spec: &str, image_size: u32) -> Result<BBox> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(Error::Parse(format!("region must be x1,y1,x2,y2 — got '{spec}'")));
    }
    let mut vals = [0.0f64; 4];
    for (v, p) in vals.iter_mut().zip(&parts) {
        *v = p
            .parse()
            .map_err(|e| Error::Parse(format!("invalid region coordinate '{p}': {e}")))?;
    }
    BBox::new(vals[0], vals[1], vals[2], vals[3], image_size)
}

pub fn eval_cmd(
    cfg: &AppConfig,
    data: &Path,
    model: &Path,
    out: &Path,
    split: SplitArg,
    with_baseline: bool,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let (train, test) = read_data(data)?;
    let dataset = pick_split(&train, &test, split);
    let (params, _) = load_checkpoint(model)?;
    check_compat(params.config(), dataset)?;
    let econfig = eval_config(cfg);
    let report = evaluate_model(&params, dataset, &econfig, cfg.seed)?;

    let mut rows = vec![("model".to_string(), report.counts)];
    if with_baseline {
        let baseline = random_baseline(dataset, params.config().num_bins, &econfig, cfg.seed)?;
        rows.push(("baseline".to_string(), baseline.counts));
    }
    write_counts_csv(&out.join("eval_summary.csv"), "condition", &rows)?;
    write_per_set_csv(&out.join("eval_per_set.csv"), &report)?;
    let points: Vec<RatePoint> =
        rows.iter().map(|(label, counts)| RatePoint::from_counts(label, counts)).collect();
    write_rate_chart(&out.join("eval_rates.svg"), "detection rates", &points)?;
    write_config_echo(&out.join("eval_config.json"), cfg)?;
    for (label, counts) in &rows {
        println!(
            "{label}: tpr {:.4} fpr {:.4} (tp {} fp {} fn {} tn {} ignored {})",
            counts.tpr(),
            counts.fpr(),
            counts.tp,
            counts.fp,
            counts.fn_count,
            counts.tn,
            counts.ignored
        );
    }
    Ok(())
}

pub fn sweep_k(
    cfg: &AppConfig,
    data: &Path,
    model: &Path,
    out: &Path,
    ks: &[u32],
    split: SplitArg,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let (train, test) = read_data(data)?;
    let dataset = pick_split(&train, &test, split);
    let (params, _) = load_checkpoint(model)?;
    check_compat(params.config(), dataset)?;
    let sweep = curve_sweep(&params, dataset, ks, &eval_config(cfg), cfg.seed)?;
    let rows: Vec<(String, eval::EvalCounts)> =
        sweep.iter().map(|(k, r)| (k.to_string(), r.counts)).collect();
    write_counts_csv(&out.join("sweep_k.csv"), "k", &rows)?;
    let points: Vec<RatePoint> =
        rows.iter().map(|(k, counts)| RatePoint::from_counts(format!("k={k}"), counts)).collect();
    write_rate_chart(&out.join("sweep_k.svg"), "prediction budget sweep", &points)?;
    write_config_echo(&out.join("sweep_k_config.json"), cfg)?;
    for (k, counts) in &rows {
        println!("k={k}: tpr {:.4} fpr {:.4}", counts.tpr(), counts.fpr());
    }
    Ok(())
}

pub fn sweep_topk(
    cfg: &AppConfig,
    data: &Path,
    model: &Path,
    out: &Path,
    top_ks: &[u32],
    split: SplitArg,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let (train, test) = read_data(data)?;
    let dataset = pick_split(&train, &test, split);
    let (params, _) = load_checkpoint(model)?;
    check_compat(params.config(), dataset)?;
    let sweep = topk_sweep(&params, dataset, top_ks, &eval_config(cfg), cfg.seed)?;
    let rows: Vec<(String, eval::EvalCounts)> =
        sweep.iter().map(|(tk, r)| (tk.to_string(), r.counts)).collect();
    write_counts_csv(&out.join("sweep_topk.csv"), "top_k", &rows)?;
    let points: Vec<RatePoint> = rows
        .iter()
        .map(|(tk, counts)| RatePoint::from_counts(format!("top_k={tk}"), counts))
        .collect();
    write_rate_chart(&out.join("sweep_topk.svg"), "truncation sweep", &points)?;
    write_config_echo(&out.join("sweep_topk_config.json"), cfg)?;
    for (tk, counts) in &rows {
        println!("top_k={tk}: tpr {:.4} fpr {:.4}", counts.tpr(), counts.fpr());
    }
    Ok(())
}

/// Times the three hot paths on the configured model. Prints to stdout and
/// writes nothing.
pub fn bench(cfg: &AppConfig, reps: u32) -> Result<()> {
    let model = &cfg.model;
    model.validate()?;
    let params = ModelParams::init(model, cfg.seed)?;
    let mut scene_cfg = cfg.data.scene.clone();
    scene_cfg.image_size = model.image_size;
    scene_cfg.num_classes = model.num_classes;
    let scene = generate_scene(&scene_cfg, cfg.seed)?;

    let mut rng = Rng::new(cfg.seed).split(0x62656e63);
    let batch: Vec<Example<'_>> = (0..32)
        .map(|_| {
            let b = eval::uniform_valid_box(&mut rng, model.num_bins, 1, model.image_size)?;
            Ok(Example {
                scene: &scene,
                class: ClassId(rng.gen_range(u64::from(model.num_classes)) as u32),
                tokens: quantize_to_bins(&b, model.num_bins)?,
            })
        })
        .collect::<Result<_>>()?;
    let encoded = encode_batch(model, &batch)?;

    let start = Instant::now();
    for _ in 0..reps {
        let mut tape: autodiff::Tape<f32> = autodiff::Tape::new();
        let graph = build_nll_graph(&mut tape, &params, &encoded)?;
        tape.backward(graph.loss)?;
    }
    let step_ms = start.elapsed().as_secs_f64() * 1000.0 / f64::from(reps);

    let n_score = 200 * reps;
    let mut session = locgen::model::InferSession::new(&params, &scene, ClassId(0))?;
    let start = Instant::now();
    for _ in 0..n_score {
        let b = eval::uniform_valid_box(&mut rng, model.num_bins, 1, model.image_size)?;
        session.score_ids(quantize_to_bins(&b, model.num_bins)?.tokens())?;
    }
    let score_rate = f64::from(n_score) / start.elapsed().as_secs_f64();

    let start = Instant::now();
    let n_sample = 200 * reps;
    sample_k_locations(&params, &scene, ClassId(0), &cfg.sampler, n_sample, cfg.seed)?;
    let sample_rate = f64::from(n_sample) / start.elapsed().as_secs_f64();

    println!("model: {} parameters", params.num_params());
    println!("train step (batch 32, forward+backward): {step_ms:.1} ms");
    println!("sequence scoring: {score_rate:.0} boxes/s");
    println!("sampling:         {sample_rate:.0} boxes/s");
    Ok(())
}

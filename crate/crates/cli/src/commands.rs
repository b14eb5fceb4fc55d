//! The six pipeline commands. Each writes its artifacts plus a
//! `manifest.json` under the output directory and never modifies its input
//! directories.

use std::collections::BTreeMap;
use std::path::Path;

use boxrefine::embed::{load_net, pretrain, save_net, EmbedConfig, EmbedNet};
use boxrefine::eval::{self, CandidateInput, GtBox, Metrics, QueryInput};
use boxrefine::harness;
use boxrefine::pipeline;
use boxrefine::proxy::{save_table, table_init};
use boxrefine::refine::{
    perturb_boxes, refine_boxes, write_boxes_csv, write_trace_csv, RefineItem, RefineRecord,
};
use boxrefine::rng::Rng;
use boxrefine::roi::{self, BBox};
use boxrefine::synth::{read_scene_set, synth, write_scene_set, SceneSet, Split};

use crate::config::RunConfig;

type CmdResult = Result<(), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn paths_map(entries: &[(&str, &Path)]) -> BTreeMap<String, String> {
    entries
        .iter()
        .map(|(k, p)| (k.to_string(), p.display().to_string()))
        .collect()
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> CmdResult {
    let (set, _) = synth(&cfg.synth_config(), &Rng::new(cfg.seed)).map_err(err)?;
    write_scene_set(&set, out).map_err(err)?;
    cfg.write_manifest("synth", &paths_map(&[("out", out)]), out)
        .map_err(err)?;
    let n_boxes: usize = set.scenes.iter().map(|s| s.annotations.len()).sum();
    println!(
        "wrote {} scenes ({} boxes, {} identities) to {}",
        set.scenes.len(),
        n_boxes,
        set.n_ids,
        out.display()
    );
    Ok(())
}

pub fn cmd_pretrain(cfg: &RunConfig, scenes: &Path, out: &Path) -> CmdResult {
    let set = read_scene_set(scenes).map_err(err)?;
    let ecfg = EmbedConfig::new(set.n_ids);
    let crops =
        pipeline::split_gt_crops(&set, Split::Train, ecfg.crop_h, ecfg.crop_w).map_err(err)?;
    let net = EmbedNet::init(ecfg, &mut Rng::new(cfg.seed ^ 0xbee5));
    let (net, report) = pretrain(net, &crops, &cfg.pretrain_config()).map_err(err)?;

    std::fs::create_dir_all(out).map_err(err)?;
    save_net(&net, &out.join("net.emb")).map_err(err)?;
    let summary = serde_json::json!({
        "steps_run": report.steps_run,
        "final_accuracy": report.final_accuracy,
        "train_crops": crops.len(),
    });
    std::fs::write(
        out.join("pretrain.json"),
        serde_json::to_string_pretty(&summary).expect("serialize"),
    )
    .map_err(err)?;
    cfg.write_manifest("pretrain", &paths_map(&[("scenes", scenes), ("out", out)]), out)
        .map_err(err)?;
    println!(
        "pretrained on {} crops: accuracy {:.3} after {} steps -> {}",
        crops.len(),
        report.final_accuracy,
        report.steps_run,
        out.join("net.emb").display()
    );
    Ok(())
}

/// Runs the verification battery; returns Err if any tolerance is violated.
pub fn cmd_gradcheck(cfg: &RunConfig, out: Option<&Path>) -> CmdResult {
    let results = harness::gradcheck_battery(cfg.seed).map_err(err)?;
    let mut report = String::new();
    let mut all_pass = true;
    for r in &results {
        let line = r.line();
        println!("{line}");
        report.push_str(&line);
        report.push('\n');
        all_pass &= r.passed;
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(err)?;
        std::fs::write(dir.join("gradcheck.txt"), &report).map_err(err)?;
        cfg.write_manifest("gradcheck", &paths_map(&[("out", dir)]), dir)
            .map_err(err)?;
    }
    if all_pass {
        Ok(())
    } else {
        Err("gradcheck tolerances violated".to_string())
    }
}

/// Builds refinement items by perturbing gallery ground truth with the
/// configured IoU band.
fn gallery_items(set: &SceneSet, cfg: &RunConfig) -> Result<Vec<RefineItem>, String> {
    let mut prng = Rng::new(cfg.seed ^ 0x9e37_79b9);
    set.split_annotations(Split::Gallery)
        .iter()
        .map(|(si, ann)| {
            let init =
                perturb_boxes(&[ann.bbox], (cfg.iou_lo, cfg.iou_hi), &mut prng).map_err(err)?;
            Ok(RefineItem {
                scene: *si,
                identity: ann.identity,
                gt: ann.bbox,
                init: init[0],
            })
        })
        .collect()
}

pub fn cmd_refine(cfg: &RunConfig, scenes: &Path, net_path: &Path, out: &Path) -> CmdResult {
    let set = read_scene_set(scenes).map_err(err)?;
    let net = load_net(net_path).map_err(err)?;
    let items = gallery_items(&set, cfg)?;
    let rcfg = cfg.refine_config()?;
    let table = table_init(set.n_ids, rcfg.proxy_volume, net.cfg.embed_dim).map_err(err)?;
    let record = refine_boxes(&set, &items, &net, table.clone(), &rcfg).map_err(err)?;

    std::fs::create_dir_all(out).map_err(err)?;
    let init_boxes: Vec<BBox> = items.iter().map(|i| i.init).collect();
    write_boxes_csv(&items, &init_boxes, &out.join("boxes_initial.csv")).map_err(err)?;
    write_boxes_csv(&items, &record.final_boxes, &out.join("boxes_refined.csv")).map_err(err)?;
    write_trace_csv(&record, &out.join("trace.csv")).map_err(err)?;
    save_table(&table, &out.join("table.ptb")).map_err(err)?;
    cfg.write_manifest(
        "refine",
        &paths_map(&[("scenes", scenes), ("net", net_path), ("out", out)]),
        out,
    )
    .map_err(err)?;

    let init_iou = RefineRecord::mean_initial_iou(&items);
    let final_iou = record.mean_final_iou(&items);
    println!(
        "refined {} boxes over {} iterations ({}): mean IoU {:.4} -> {:.4} ({:+.4})",
        items.len(),
        rcfg.iterations,
        rcfg.loss_mode,
        init_iou,
        final_iou,
        final_iou - init_iou
    );
    Ok(())
}

fn read_boxes_csv(path: &Path) -> Result<Vec<(usize, BBox, usize)>, String> {
    let text = std::fs::read_to_string(path).map_err(err)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(format!("{}: line {}: expected 6 fields", path.display(), lineno + 1));
        }
        let f = |s: &str| -> Result<f64, String> {
            s.parse().map_err(|_| format!("bad number {s:?}"))
        };
        rows.push((
            parts[0].parse().map_err(|_| "bad scene index".to_string())?,
            BBox {
                m1: f(parts[1])?,
                n1: f(parts[2])?,
                m2: f(parts[3])?,
                n2: f(parts[4])?,
            },
            parts[5].parse().map_err(|_| "bad identity".to_string())?,
        ));
    }
    Ok(rows)
}

pub fn cmd_eval(
    cfg: &RunConfig,
    scenes: &Path,
    net_path: &Path,
    boxes: &Path,
    out: &Path,
) -> CmdResult {
    let set = read_scene_set(scenes).map_err(err)?;
    let net = load_net(net_path).map_err(err)?;
    let rows = read_boxes_csv(boxes)?;
    let (ch, cw) = (net.cfg.crop_h, net.cfg.crop_w);

    // Optional gallery-size sweep: subsample gallery scenes with the seed
    // until the candidate count fits.
    let mut keep_scene: Vec<bool> = vec![true; set.scenes.len()];
    if let Some(limit) = cfg.gallery_size {
        let mut gallery_scenes: Vec<usize> = (0..set.scenes.len())
            .filter(|&i| set.scenes[i].split == Split::Gallery)
            .collect();
        Rng::new(cfg.seed ^ 0x6a11).shuffle(&mut gallery_scenes);
        keep_scene = vec![false; set.scenes.len()];
        let mut kept_candidates = 0;
        for &si in &gallery_scenes {
            let in_scene = rows.iter().filter(|(s, _, _)| *s == si).count();
            if kept_candidates > 0 && kept_candidates + in_scene > limit {
                continue;
            }
            keep_scene[si] = true;
            kept_candidates += in_scene;
        }
        for (i, scene) in set.scenes.iter().enumerate() {
            if scene.split != Split::Gallery {
                keep_scene[i] = true;
            }
        }
    }

    let queries: Vec<QueryInput> = set
        .split_annotations(Split::Query)
        .into_iter()
        .map(|(si, ann)| {
            let crop = roi::crop_box(&set.scenes[si].image, &ann.bbox, ch, cw).map_err(err)?;
            Ok(QueryInput {
                crop: crop.v,
                identity: ann.identity,
            })
        })
        .collect::<Result<_, String>>()?;
    let candidates: Vec<CandidateInput> = rows
        .iter()
        .filter(|(si, _, _)| keep_scene[*si])
        .map(|(si, bbox, _)| {
            let crop = roi::crop_box(&set.scenes[*si].image, bbox, ch, cw).map_err(err)?;
            Ok(CandidateInput {
                scene: *si,
                bbox: *bbox,
                crop: crop.v,
            })
        })
        .collect::<Result<_, String>>()?;
    let gts: Vec<GtBox> = set
        .split_annotations(Split::Gallery)
        .into_iter()
        .filter(|(si, _)| keep_scene[*si])
        .map(|(si, ann)| GtBox {
            scene: si,
            identity: ann.identity,
            bbox: ann.bbox,
        })
        .collect();

    let result = eval::evaluate(&net, &queries, &candidates, &gts, cfg.cmc_depth).map_err(err)?;
    std::fs::create_dir_all(out).map_err(err)?;
    let metrics = Metrics::from_result(&result, cfg.seed);
    metrics.write(&out.join("metrics.json")).map_err(err)?;
    if cfg.pr_curves {
        let gts_per_query: Vec<usize> = queries
            .iter()
            .map(|q| gts.iter().filter(|g| g.identity == q.identity).count())
            .collect();
        eval::write_pr_curves(&result, &gts_per_query, out).map_err(err)?;
    }
    cfg.write_manifest(
        "eval",
        &paths_map(&[("scenes", scenes), ("net", net_path), ("boxes", boxes), ("out", out)]),
        out,
    )
    .map_err(err)?;
    println!(
        "evaluated {} queries against {} candidates: mAP {:.4}, rank-1 {:.4}, rank-5 {:.4}",
        queries.len(),
        candidates.len(),
        metrics.map,
        metrics.rank1,
        metrics.rank5
    );
    Ok(())
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> CmdResult {
    let seeds: Vec<u64> = (0..cfg.seeds as u64).map(|k| cfg.seed + k).collect();
    let rows = pipeline::run_ablation(
        &cfg.synth_config(),
        &cfg.pretrain_config(),
        &cfg.refine_config()?,
        (cfg.iou_lo, cfg.iou_hi),
        cfg.cmc_depth,
        &seeds,
    )
    .map_err(err)?;

    println!("{:<10} {:>8} {:>8} {:>10}", "mode", "rank-1", "mAP", "IoU delta");
    let mut csv = String::from("mode,rank1,map,iou_delta\n");
    for row in &rows {
        println!(
            "{:<10} {:>8.4} {:>8.4} {:>+10.4}",
            row.label, row.rank1, row.map, row.iou_delta
        );
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.label, row.rank1, row.map, row.iou_delta
        ));
    }
    std::fs::create_dir_all(out).map_err(err)?;
    std::fs::write(out.join("ablation.csv"), csv).map_err(err)?;
    cfg.write_manifest("ablate", &paths_map(&[("out", out)]), out)
        .map_err(err)?;
    Ok(())
}

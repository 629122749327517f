use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde_json::json;

use loopclose::atlas::{load_atlas, save_atlas, AtlasConfig, ImageRef};
use loopclose::eval::{
    evaluate, generate_synthetic_dataset, latency_benchmark, parse_pose, random_index, read_loopdb_layout,
    read_query_manifest, render_accuracy_table, write_query_manifest, QUERY_MANIFEST, SYNTHETIC_TIMESTAMP,
};
use loopclose::features::{
    encode_keypoint_file, ingest as ingest_keypoints, parse_keypoint_file, IngestOptions, KeypointSet,
    KEYPOINT_MAGIC,
};
use loopclose::net::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
use loopclose::query::{hex, INDEX_MAGIC};
use loopclose::train::{few_shot_adapt, holdout_split, prepare_samples, AdaptData, Trainer};
use loopclose::{build_index, create_atlas, EmbeddingIndex, LoopDetector, MapAtlas, Network, NetworkConfig, Raster};

use crate::{Context, Failure, Output};

type CmdResult = Result<Output, Failure>;

fn read_keypoints(path: &Path) -> Result<KeypointSet, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::Domain(format!("cannot read {}: {e}", path.display())))?;
    Ok(parse_keypoint_file(&bytes)?)
}

fn show(path: &Path) -> String {
    path.display().to_string()
}

pub fn atlas_init(ctx: &Context, dir: &Path, synthetic: Option<(usize, usize, f64)>) -> CmdResult {
    let (atlas, queries) = match synthetic {
        None => {
            let config = AtlasConfig {
                created_at: (!ctx.timestamps).then(|| SYNTHETIC_TIMESTAMP.to_string()),
                ..AtlasConfig::new(dir)
            };
            (create_atlas(&config)?, 0)
        }
        Some((submaps, frames, noise)) => {
            let (atlas, queries) = generate_synthetic_dataset(submaps, frames, noise, ctx.settings.seed)?;
            save_atlas(&atlas, dir)?;
            write_query_manifest(dir, &queries)?;
            (atlas, queries.len())
        }
    };
    let stats = atlas.stats();
    Ok(Output {
        json: json!({
            "atlas": show(dir),
            "created_at": atlas.created_at,
            "stats": stats,
            "queries": queries,
        }),
        text: format!(
            "created atlas {}: {} submaps, {} frames, {} queries\n",
            show(dir),
            stats.submaps,
            stats.total_frames,
            queries
        ),
    })
}

pub fn atlas_add(
    atlas_dir: &Path,
    image: &Path,
    keypoints: &Path,
    submap: Option<usize>,
    pose: Option<&Path>,
    link: bool,
) -> CmdResult {
    let mut atlas = load_atlas(atlas_dir)?;
    let raster = Raster::load(image)?;
    let keypoints = read_keypoints(keypoints)?.with_image_size(raster.width, raster.height)?;
    let pose = match pose {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Domain(format!("cannot read {}: {e}", p.display())))?;
            Some(parse_pose(&text)?)
        }
        None => None,
    };
    let image = if link {
        let abs = fs::canonicalize(image).map_err(|e| Failure::Domain(format!("{}: {e}", image.display())))?;
        ImageRef::Path(abs)
    } else {
        ImageRef::Inline(raster)
    };
    let sid = submap.unwrap_or_else(|| atlas.add_submap());
    let fid = atlas.add_frame(sid, image, keypoints, pose)?;
    save_atlas(&atlas, &atlas_dir_of(atlas_dir))?;
    Ok(Output {
        json: json!({ "submap": sid, "frame": fid, "stats": atlas.stats() }),
        text: format!("added frame {sid}/{fid}\n"),
    })
}

/// The directory holding an atlas given either it or its manifest.
fn atlas_dir_of(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

pub fn ingest(ctx: &Context, input: &Path, out: &Path, image: Option<&Path>) -> CmdResult {
    let mut set = read_keypoints(input)?;
    if let Some(img) = image {
        let r = Raster::load(img)?;
        set = set.with_image_size(r.width, r.height)?;
    }
    let opts = IngestOptions {
        window_px: ctx.settings.window_px,
        min_score: ctx.settings.min_score,
        window: ctx.settings.window_shape,
    };
    let (kept, report) = ingest_keypoints(&set, &opts);
    fs::write(out, encode_keypoint_file(&kept)).map_err(|e| Failure::Domain(format!("cannot write {}: {e}", out.display())))?;
    let mut text = String::new();
    let _ = writeln!(text, "input        {}", report.input);
    let _ = writeln!(text, "below score  {}", report.below_min_score);
    let _ = writeln!(text, "out of image {}", report.out_of_bounds);
    let _ = writeln!(text, "degenerate   {}", report.degenerate);
    let _ = writeln!(text, "suppressed   {}", report.suppressed);
    let _ = writeln!(text, "kept         {} -> {}", report.kept, show(out));
    Ok(Output {
        json: json!({ "out": show(out), "options": opts, "report": report }),
        text,
    })
}

pub fn train(
    ctx: &Context,
    atlas_path: &Path,
    out: &Path,
    init: Option<&Path>,
    metrics: Option<&Path>,
    submaps: Option<usize>,
) -> CmdResult {
    let s = &ctx.settings;
    let mut atlas = load_atlas(atlas_path)?;
    if let Some(n) = submaps {
        if n > atlas.submaps.len() {
            return Err(Failure::Domain(format!(
                "atlas has {} submaps, cannot train on {n}",
                atlas.submaps.len()
            )));
        }
        atlas.submaps.truncate(n);
    }
    let net = match init {
        Some(p) => load_checkpoint(p)?,
        None => Network::new(NetworkConfig {
            alpha: s.alpha,
            ..NetworkConfig::desk(atlas.submaps.len(), s.seed)
        })?,
    };
    let hyper = s.hyperparams();
    let mut trainer = Trainer::from_atlas(net, &atlas, hyper.clone())?;
    let metrics = metrics
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.parent().unwrap_or(Path::new("")).join("metrics.jsonl"));
    let mut log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics)
        .map_err(|e| Failure::Domain(format!("cannot open {}: {e}", metrics.display())))?;

    let start = Instant::now();
    let mut reports = Vec::with_capacity(hyper.epochs);
    let mut text = String::new();
    for _ in 0..hyper.epochs {
        let r = trainer.train_epoch()?;
        let line = serde_json::to_string(&r).expect("reports serialize");
        writeln!(log_file, "{line}").map_err(|e| Failure::Domain(format!("cannot write {}: {e}", metrics.display())))?;
        let row = format!(
            "epoch {:>3}  train_loss {:.4}  val_loss {:.4}  train_acc {:.3}  val_acc {:.3}",
            r.epoch, r.train_loss, r.val_loss, r.train_acc, r.val_acc
        );
        info!("{row}");
        reports.push(r);
    }
    if let Some(r) = reports.last() {
        let _ = writeln!(
            text,
            "{} epochs: train_loss {:.4} -> {:.4}, val_acc {:.3}",
            reports.len(),
            reports[0].train_loss,
            r.train_loss,
            r.val_acc
        );
    }
    let net = trainer.into_network();
    save_checkpoint(&net, out)?;
    let _ = writeln!(text, "saved {} ({} classes, {} parameters)", show(out), net.num_classes(), net.num_parameters());
    let mut doc = json!({
        "checkpoint": show(out),
        "metrics": show(&metrics),
        "classes": net.num_classes(),
        "parameters": net.num_parameters(),
        "fingerprint": hex(&net.fingerprint()),
        "hyperparams": hyper,
        "epochs": reports,
    });
    if ctx.timestamps {
        doc["elapsed_s"] = json!(start.elapsed().as_secs_f64());
    }
    Ok(Output { json: doc, text })
}

pub fn adapt(ctx: &Context, atlas_path: &Path, net_path: &Path, submap: usize, out: &Path) -> CmdResult {
    let s = &ctx.settings;
    let atlas = load_atlas(atlas_path)?;
    let net = load_checkpoint(net_path)?;
    if submap != net.num_classes() {
        return Err(Failure::Domain(format!(
            "network knows {} submaps, so the new submap must be {}, not {submap}",
            net.num_classes(),
            net.num_classes()
        )));
    }
    let frames = atlas.submap(submap)?.frames.len();
    if s.shots >= frames {
        return Err(Failure::Domain(format!(
            "submap {submap} has {frames} frames; {} shots leave none for evaluation",
            s.shots
        )));
    }
    let size = net.config().input_size;
    let split = holdout_split(&atlas, s.val_split);
    let old = |keys: &[(usize, usize)]| keys.iter().copied().filter(|k| k.0 < submap).collect::<Vec<_>>();
    let support: Vec<_> = (0..s.shots).map(|f| (submap, f)).collect();
    let holdout: Vec<_> = (s.shots..frames).map(|f| (submap, f)).collect();
    let data = AdaptData {
        support: prepare_samples(&atlas, &support, size)?,
        replay: prepare_samples(&atlas, &old(&split.train), size)?,
        new_holdout: prepare_samples(&atlas, &holdout, size)?,
        old_probe: prepare_samples(&atlas, &old(&split.val), size)?,
    };
    let hyper = s.hyperparams();
    let (adapted, report) = few_shot_adapt(&net, &data, s.steps, &hyper)?;
    save_checkpoint(&adapted, out)?;
    let mut text = String::new();
    let _ = writeln!(text, "submap {submap}: {} shots, {} steps", report.shots, report.steps);
    let _ = writeln!(text, "new submap accuracy  {:.3} -> {:.3}", report.new_acc_before, report.new_acc_after);
    let _ = writeln!(text, "old submap accuracy  {:.3} -> {:.3}", report.old_acc_before, report.old_acc_after);
    let _ = writeln!(text, "saved {}", show(out));
    Ok(Output {
        json: json!({ "checkpoint": show(out), "fingerprint": hex(&adapted.fingerprint()), "report": report }),
        text,
    })
}

fn load_or_build_index(atlas: &MapAtlas, net: &Network, cache: Option<&Path>) -> Result<EmbeddingIndex, Failure> {
    match cache {
        Some(p) if p.exists() => {
            let index = EmbeddingIndex::load(p)?;
            index.check_network(net)?;
            Ok(index)
        }
        Some(p) => {
            let index = build_index(atlas, net)?;
            index.save(p)?;
            Ok(index)
        }
        None => Ok(build_index(atlas, net)?),
    }
}

pub fn query(ctx: &Context, atlas_path: &Path, net_path: &Path, image: &Path, keypoints: &Path, cache: Option<&Path>) -> CmdResult {
    let s = &ctx.settings;
    let net = load_checkpoint(net_path)?;
    let atlas = load_atlas(atlas_path)?;
    let index = load_or_build_index(&atlas, &net, cache)?;
    let raster = Raster::load(image)?;
    let kps = read_keypoints(keypoints)?;
    let detector = LoopDetector::new(&index, &net)?;
    let ranked = detector.query_top_k(&raster, &kps, s.k)?;
    let detection = detector.detect(&raster, &kps, s.threshold)?;
    let text = ranked.iter().map(|r| format!("{r}\n")).collect();
    Ok(Output {
        json: json!({ "results": ranked, "detection": detection }),
        text,
    })
}

fn dir_label(path: &Path) -> String {
    fs::canonicalize(path)
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| show(path))
}

pub fn eval(
    ctx: &Context,
    atlas_path: Option<&Path>,
    loopdb: Option<&Path>,
    queries: Option<&Path>,
    net_path: &Path,
    dataset: Option<&str>,
    method: &str,
) -> CmdResult {
    let net = load_checkpoint(net_path)?;
    let (atlas, queries, source) = match (atlas_path, loopdb) {
        (_, Some(root)) => {
            let (atlas, queries) = read_loopdb_layout(root)?;
            (atlas, queries, root)
        }
        (Some(path), None) => {
            let atlas = load_atlas(path)?;
            let manifest = queries
                .map(Path::to_path_buf)
                .unwrap_or_else(|| atlas_dir_of(path).join(QUERY_MANIFEST));
            let queries = read_query_manifest(&manifest, &atlas)?;
            (atlas, queries, path)
        }
        (None, None) => return Err(Failure::Usage("one of --atlas or --loopdb is required".into())),
    };
    let index = build_index(&atlas, &net)?;
    let report = evaluate(&net, &index, &queries, ctx.settings.threshold)?;
    let dataset = dataset.map(str::to_string).unwrap_or_else(|| dir_label(source));
    let table = render_accuracy_table(&[(&dataset, method, &report)]);
    Ok(Output {
        json: json!({ "dataset": dataset, "method": method, "report": report, "table": table }),
        text: table,
    })
}

pub fn bench(ctx: &Context, atlas_path: Option<&Path>, entries: Option<usize>, net_path: &Path, bound_ms: Option<f64>) -> CmdResult {
    let s = &ctx.settings;
    let net = load_checkpoint(net_path)?;
    let index = match (atlas_path, entries) {
        (_, Some(n)) => random_index(&net, n, s.seed)?,
        (Some(p), None) => build_index(&load_atlas(p)?, &net)?,
        (None, None) => return Err(Failure::Usage("one of --atlas or --entries is required".into())),
    };
    let r = latency_benchmark(&index, &net, s.n_queries, s.seed)?;
    if let Some(bound) = bound_ms {
        if r.median_ms > bound {
            return Err(Failure::Domain(format!(
                "median latency {:.3} ms exceeds the {bound} ms bound",
                r.median_ms
            )));
        }
    }
    let text = format!(
        "{} queries over {} entries: median {:.3} ms, p95 {:.3} ms, max {:.3} ms\n",
        r.n_queries, r.n_entries, r.median_ms, r.p95_ms, r.max_ms
    );
    let json = if ctx.timestamps {
        serde_json::to_value(&r).expect("reports serialize")
    } else {
        json!({ "n_entries": r.n_entries, "n_queries": r.n_queries })
    };
    Ok(Output { json, text })
}

pub fn inspect(path: &Path) -> CmdResult {
    let magic = if path.is_file() {
        fs::read(path)
            .map_err(|e| Failure::Domain(format!("cannot read {}: {e}", path.display())))?
            .get(..4)
            .map(<[u8]>::to_vec)
    } else {
        None
    };
    let (json, text) = match magic.as_deref() {
        Some(m) if m == CHECKPOINT_MAGIC => {
            let net = load_checkpoint(path)?;
            let c = net.config();
            (
                json!({
                    "kind": "checkpoint",
                    "classes": net.num_classes(),
                    "parameters": net.num_parameters(),
                    "alpha": c.alpha,
                    "input_size": c.input_size,
                    "embed_dim": c.embed_dim,
                    "fingerprint": hex(&net.fingerprint()),
                }),
                format!(
                    "checkpoint: {} classes, {} parameters, alpha {}, fingerprint {}\n",
                    net.num_classes(),
                    net.num_parameters(),
                    c.alpha,
                    hex(&net.fingerprint())
                ),
            )
        }
        Some(m) if m == INDEX_MAGIC => {
            let index = EmbeddingIndex::load(path)?;
            let submaps = index.keys().map(|(s, _)| s + 1).max().unwrap_or(0);
            (
                json!({
                    "kind": "index",
                    "entries": index.len(),
                    "dim": index.dim(),
                    "submaps": submaps,
                    "fingerprint": hex(index.fingerprint()),
                }),
                format!(
                    "index: {} entries of dim {}, {} submaps, network {}\n",
                    index.len(),
                    index.dim(),
                    submaps,
                    hex(index.fingerprint())
                ),
            )
        }
        Some(m) if m == KEYPOINT_MAGIC => {
            let set = read_keypoints(path)?;
            (
                json!({ "kind": "keypoints", "count": set.len(), "dim": set.dim }),
                format!("keypoints: {} of dim {}\n", set.len(), set.dim),
            )
        }
        _ => {
            let atlas = load_atlas(path)?;
            let stats = atlas.stats();
            (
                json!({
                    "kind": "atlas",
                    "created_at": atlas.created_at,
                    "descriptor_dim": atlas.descriptor_dim,
                    "stats": stats,
                    "frames_per_submap": atlas.submaps.iter().map(|s| s.frames.len()).collect::<Vec<_>>(),
                }),
                format!(
                    "atlas: {} submaps, {} frames, {} keypoints\n",
                    stats.submaps, stats.total_frames, stats.total_keypoints
                ),
            )
        }
    };
    Ok(Output { json, text })
}

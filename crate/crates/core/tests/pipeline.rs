mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use common::*;
use signpipe::config::{ExperimentConfig, JobConfig, NormalizeScope};
use signpipe::export::{self, ShardIndex};
use signpipe::manifest;
use signpipe::pipeline::{self, ExecuteOptions, PipelineError, RunContext, RunReport, Stage, StageMarker};

fn run(job: &JobConfig) -> RunReport {
    pipeline::execute_job(job, &ExecuteOptions::default()).unwrap()
}

fn markers(job: &JobConfig) -> BTreeMap<Stage, StageMarker> {
    let dir = pipeline::run_dir(job);
    Stage::ALL
        .into_iter()
        .filter_map(|s| RunContext::read_marker(&dir, s).map(|m| (s, m)))
        .collect()
}

fn reused(report: &RunReport) -> Vec<(Stage, bool)> {
    report.stages.iter().map(|s| (s.stage, s.reused)).collect()
}

fn pose_job(root: &Path, name: &str, segments: usize) -> JobConfig {
    let manifest = synthetic_dataset(&root.join("data"), &SynthSpec::new(segments));
    parse_job(&pose_job_yaml(name, &manifest, &root.join("out")))
}

#[test]
fn fresh_run_writes_layout_and_balanced_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let job = pose_job(tmp.path(), "fresh", 5);
    let report = run(&job);
    let dir = pipeline::run_dir(&job);
    for f in ["manifest.csv", "rejects.csv", "report.json", "shards/shards.json"] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    assert!(!dir.join("tmp").exists());
    let m = markers(&job);
    assert_eq!(m.len(), 4);
    for marker in m.values() {
        assert!(marker.counts.balanced());
        assert_eq!(marker.counts.input, 5);
        assert_eq!(marker.input_hash.len(), 64);
    }
    assert_eq!(report.samples_exported, 5);
    let shards: Vec<_> = report.shards.iter().map(|s| dir.join(&s.path)).collect();
    let samples = export::read_shards(&shards).unwrap();
    let mut keys: Vec<_> = samples.iter().map(|s| s.key.clone()).collect();
    keys.sort();
    assert_eq!(keys, ["seg_0000", "seg_0001", "seg_0002", "seg_0003", "seg_0004"]);
    // the sample id keeps its dot; only the key is sanitized
    let meta = samples
        .iter()
        .find(|s| s.key == "seg_0003")
        .unwrap()
        .metadata()
        .unwrap();
    assert_eq!(meta.sample_id, "seg.0003");
    assert_eq!(meta.processor, "pose:synthetic");
    let on_disk: RunReport = serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(on_disk, report);
}

#[test]
fn pose_payload_is_normalized_float32() {
    let tmp = tempfile::tempdir().unwrap();
    let job = pose_job(tmp.path(), "payload", 2);
    let report = run(&job);
    let dir = pipeline::run_dir(&job);
    let samples = export::read_shard(&dir.join(&report.shards[0].path)).unwrap();
    let arr = export::decode_array(&samples[0].payloads["pose.npy"]).unwrap();
    assert_eq!(arr.element, export::Element::F4);
    // 1 s at 10 Hz, 33 keypoints, x y z visibility
    assert_eq!(arr.shape, vec![10, 33, 4]);
    for axis in 0..2 {
        let vals: Vec<f64> = arr.data.iter().skip(axis).step_by(4).copied().collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo.abs() < 1e-6 && (hi - 1.0).abs() < 1e-6, "axis {axis}: {lo}..{hi}");
    }
    assert_eq!(samples[0].caption(), Some("sign number 0"));
}

#[test]
fn second_run_reuses_every_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let job = pose_job(tmp.path(), "again", 6);
    run(&job);
    let before = markers(&job);
    let shards_before = tree_bytes(&pipeline::run_dir(&job).join("shards"));
    let report = run(&job);
    assert!(report.stages.iter().all(|s| s.reused));
    assert_eq!(markers(&job), before);
    assert_eq!(tree_bytes(&pipeline::run_dir(&job).join("shards")), shards_before);
}

#[test]
fn no_resume_recomputes_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let mut job = pose_job(tmp.path(), "nores", 4);
    run(&job);
    let before = markers(&job);
    let shards_before = tree_bytes(&pipeline::run_dir(&job).join("shards"));
    job.runtime.resume = false;
    let report = run(&job);
    assert!(report.stages.iter().all(|s| !s.reused));
    let after = markers(&job);
    for s in Stage::ALL {
        assert_eq!(after[&s].input_hash, before[&s].input_hash);
        assert_ne!(after[&s].completed_at, before[&s].completed_at);
    }
    assert_eq!(tree_bytes(&pipeline::run_dir(&job).join("shards")), shards_before);
}

#[test]
fn scope_change_reruns_postprocess_and_export_only() {
    let tmp = tempfile::tempdir().unwrap();
    let mut job = pose_job(tmp.path(), "scope", 4);
    let first = run(&job);
    let old = markers(&job);
    job.postprocess.normalize.scope = NormalizeScope::PerFrame;
    let second = run(&job);
    assert_eq!(
        reused(&second),
        vec![
            (Stage::Manifest, true),
            (Stage::Process, true),
            (Stage::Postprocess, false),
            (Stage::Export, false)
        ]
    );
    let new = markers(&job);
    for s in [Stage::Manifest, Stage::Process] {
        assert_eq!(new[&s].completed_at, old[&s].completed_at);
        assert_eq!(new[&s].input_hash, old[&s].input_hash);
    }
    for s in [Stage::Postprocess, Stage::Export] {
        assert_ne!(new[&s].input_hash, old[&s].input_hash);
    }
    assert_ne!(first.run_id, second.run_id);
}

#[test]
fn manifest_edit_changes_every_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let job = pose_job(tmp.path(), "edit", 4);
    run(&job);
    let old = markers(&job);
    let path = &job.dataset.source_path;
    let text = fs::read_to_string(path)
        .unwrap()
        .replace("sign number 2", "sign number two");
    fs::write(path, text).unwrap();
    let report = run(&job);
    assert!(report.stages.iter().all(|s| !s.reused));
    let new = markers(&job);
    for s in Stage::ALL {
        assert_ne!(new[&s].input_hash, old[&s].input_hash, "{s}");
    }
}

#[test]
fn seed_change_reruns_from_process() {
    let tmp = tempfile::tempdir().unwrap();
    let mut job = pose_job(tmp.path(), "seed", 3);
    run(&job);
    job.runtime.seed += 1;
    let report = run(&job);
    assert_eq!(
        reused(&report),
        vec![
            (Stage::Manifest, true),
            (Stage::Process, false),
            (Stage::Postprocess, false),
            (Stage::Export, false)
        ]
    );
}

#[test]
fn failed_stage_is_quarantined_under_tmp() {
    let tmp = tempfile::tempdir().unwrap();
    let mut job = pose_job(tmp.path(), "quarantine", 3);
    run(&job);
    // a preset naming a different backend fails the whole postprocess stage
    job.postprocess.preset_name = Some("holistic_85".into());
    job.processing.extractor.as_mut().unwrap().expected_keypoints = 532;
    let err = pipeline::execute_job(&job, &ExecuteOptions::default()).unwrap_err();
    assert!(
        matches!(
            err,
            PipelineError::StageFailure {
                stage: Stage::Postprocess,
                ..
            }
        ),
        "{err}"
    );
    let dir = pipeline::run_dir(&job);
    assert!(dir.join("tmp").join("postprocess").is_dir());
    assert!(!dir.join("postprocess").exists());
    assert!(RunContext::read_marker(&dir, Stage::Postprocess).is_none());
    assert!(RunContext::read_marker(&dir, Stage::Process).is_some());
    let report: RunReport = serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.status, "failed");
    assert!(report.error.unwrap().contains("postprocess"));

    // the fixed config is a new run that picks up the sibling's process output
    job.postprocess.preset_name = Some("synthetic_85".into());
    let ok = run(&job);
    assert_eq!(ok.stage(Stage::Process).map(|s| s.reused), Some(true));
    assert!(!pipeline::run_dir(&job).join("tmp").exists());
}

#[test]
fn preset_reduces_to_85_points() {
    let tmp = tempfile::tempdir().unwrap();
    let mut job = pose_job(tmp.path(), "preset", 2);
    job.processing.extractor.as_mut().unwrap().expected_keypoints = 532;
    job.postprocess.preset_name = Some("synthetic_85".into());
    job.postprocess.flatten = true;
    job.postprocess.drop_depth = true;
    let report = run(&job);
    let dir = pipeline::run_dir(&job);
    let samples = export::read_shard(&dir.join(&report.shards[0].path)).unwrap();
    let arr = export::decode_array(&samples[0].payloads["pose.npy"]).unwrap();
    assert_eq!(arr.shape, vec![10, 85 * 3]);
}

#[test]
fn unreachable_visibility_rejects_in_postprocess() {
    let tmp = tempfile::tempdir().unwrap();
    let mut job = pose_job(tmp.path(), "novalid", 3);
    job.postprocess.normalize.visibility_threshold = 1.0;
    let report = run(&job);
    let post = report.stage(Stage::Postprocess).unwrap();
    assert_eq!((post.counts.out, post.counts.rejected), (0, 3));
    assert_eq!(report.rejects.get("postprocess/NoValidPoints"), Some(&3));
    assert_eq!(report.samples_exported, 0);
    let rows = manifest::read_rejects_csv(&pipeline::run_dir(&job).join("rejects.csv")).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows
        .iter()
        .all(|r| r.stage == "postprocess" && r.reason == "NoValidPoints"));
    assert!(export::verify_shards(&pipeline::run_dir(&job).join("shards")).ok());

    // per-frame scope leaves empty frames at zero and notes them instead
    job.postprocess.normalize.scope = NormalizeScope::PerFrame;
    let report = run(&job);
    assert_eq!(report.samples_exported, 3);
    let notes = fs::read_to_string(pipeline::run_dir(&job).join("postprocess").join("notes.csv")).unwrap();
    assert_eq!(notes.lines().count(), 1 + 3 * 10);
}

#[test]
fn video_mode_crops_and_skips() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = SynthSpec::new(6);
    spec.scenes.insert(1, Scene::TwoPeople);
    spec.scenes.insert(4, Scene::Empty);
    let manifest = synthetic_dataset(&tmp.path().join("data"), &spec);
    let job = parse_job(&video_job_yaml("video", &manifest, &tmp.path().join("out")));
    let report = run(&job);
    assert_eq!(report.rejects.get("process/MultiPerson"), Some(&1));
    assert_eq!(report.rejects.get("process/NoDetection"), Some(&1));
    assert_eq!(report.samples_exported, 4);
    let dir = pipeline::run_dir(&job);
    let rows = manifest::read_rejects_csv(&dir.join("rejects.csv")).unwrap();
    let got: Vec<(&str, &str)> = rows.iter().map(|r| (r.sample_id.as_str(), r.reason.as_str())).collect();
    assert_eq!(got, [("seg.0001", "MultiPerson"), ("seg.0004", "NoDetection")]);
    let paths: Vec<_> = report.shards.iter().map(|s| dir.join(&s.path)).collect();
    for s in export::read_shards(&paths).unwrap() {
        let clip: serde_json::Value = serde_json::from_slice(&s.payloads["clip.json"]).unwrap();
        assert_eq!(clip["plan"]["out_w"], 224);
        // square up to pixel-grid rounding of a box that must stay covered
        let (w, h) = (clip["plan"]["w"].as_i64().unwrap(), clip["plan"]["h"].as_i64().unwrap());
        assert!((w - h).abs() <= 1, "{w}x{h}");
        assert_eq!(s.metadata().unwrap().processor, "video:synthetic");
    }
}

#[test]
fn manifest_bbox_bypasses_detection() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = SynthSpec::new(3);
    spec.scenes.insert(0, Scene::TwoPeople);
    spec.with_bbox = true;
    let manifest = synthetic_dataset(&tmp.path().join("data"), &spec);
    let job = parse_job(&video_job_yaml("bbox", &manifest, &tmp.path().join("out")));
    let report = run(&job);
    assert_eq!(report.samples_exported, 3);
    assert!(report.rejects.is_empty());
}

#[test]
fn sanitized_key_collisions_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let manifest = synthetic_dataset(&data, &SynthSpec::new(2));
    let mut text = fs::read_to_string(&manifest).unwrap();
    text.push_str("seg_0000,vid000,0.25,1.25,another,train,\n");
    fs::write(&manifest, text).unwrap();
    let job = parse_job(&pose_job_yaml("collide", &manifest, &tmp.path().join("out")));
    let report = run(&job);
    let m = report.stage(Stage::Manifest).unwrap();
    assert_eq!((m.counts.input, m.counts.out, m.counts.rejected), (3, 2, 1));
    assert_eq!(report.rejects.get("manifest/DuplicateKey"), Some(&1));
}

#[test]
fn worker_count_only_reruns_export() {
    let tmp = tempfile::tempdir().unwrap();
    let mut job = pose_job(tmp.path(), "workers", 7);
    run(&job);
    let old = markers(&job);
    let old_dir = pipeline::run_dir(&job);
    job.runtime.workers = 3;
    let report = run(&job);
    assert_ne!(pipeline::run_dir(&job), old_dir);
    assert_eq!(
        reused(&report),
        vec![
            (Stage::Manifest, true),
            (Stage::Process, true),
            (Stage::Postprocess, true),
            (Stage::Export, false)
        ]
    );
    let new = markers(&job);
    for s in [Stage::Manifest, Stage::Process, Stage::Postprocess] {
        assert_eq!(new[&s].completed_at, old[&s].completed_at);
        assert_eq!(
            new[&s].source_run.as_deref(),
            old_dir.file_name().and_then(|n| n.to_str())
        );
    }
    let idx = ShardIndex::read(&pipeline::run_dir(&job).join("shards")).unwrap();
    assert_eq!(idx.total_count(), 7);
    // (worker, seq) order
    let names: Vec<_> = idx.shards.iter().map(|s| s.path.clone()).collect();
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
}

#[test]
fn experiment_runs_in_order_and_stops_on_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let good = pose_job(tmp.path(), "exp", 2);
    let mut other = good.clone();
    other.output.max_samples_per_shard = 1;
    let exp = ExperimentConfig {
        experiment_name: "e".into(),
        jobs: vec![good.clone(), other.clone()],
        continue_on_error: false,
    };
    let out = pipeline::execute_experiment(&exp, &ExecuteOptions::default());
    assert_eq!(out.len(), 2);
    assert!(out.iter().all(|o| o.result.is_ok()));
    assert_ne!(out[0].run_id, out[1].run_id);

    let mut bad = good.clone();
    bad.dataset.source_path = tmp.path().join("missing.csv");
    let mut exp = ExperimentConfig {
        experiment_name: "e".into(),
        jobs: vec![bad, other],
        continue_on_error: false,
    };
    let out = pipeline::execute_experiment(&exp, &ExecuteOptions::default());
    assert_eq!(out.len(), 1);
    assert!(matches!(
        out[0].result,
        Err(PipelineError::StageFailure {
            stage: Stage::Manifest,
            ..
        })
    ));
    exp.continue_on_error = true;
    let out = pipeline::execute_experiment(&exp, &ExecuteOptions::default());
    assert_eq!(out.len(), 2);
    assert_eq!(out[1].index, 1);
    assert!(out[1].result.is_ok());
}

#[test]
fn unknown_components_fail_before_running() {
    let tmp = tempfile::tempdir().unwrap();
    let mut job = pose_job(tmp.path(), "unknown", 1);
    job.dataset.adapter_name = "how2sing_csv".into();
    let err = pipeline::execute_job(&job, &ExecuteOptions::default()).unwrap_err();
    assert!(err.is_validation());
    assert!(err.to_string().contains("how2sign_csv"), "{err}");
    assert!(!pipeline::run_dir(&job).exists());
}

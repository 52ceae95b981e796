//! End-to-end command tests on tiny datasets.

use std::path::{Path, PathBuf};

use facevq::cli::run_from_args;
use facevq::curator::{FaceBox, FaceFixture, FaceGeometry};
use facevq::dataset::{read_video, write_video, VideoMeta};
use facevq::synth::{face_clip, ClipSpec};
use facevq::video::VideoTensor;

const TINY: &str = r#"
version = 1
seed = 5

[data]
clip_frames = 4
held_out = 1

[model]
codebook_spatial = 16
codebook_temporal = 16
head_hidden = 8

[model.backbone]
spatial_ratio = 8
temporal_ratio = 2
latent_dim = 8
stem_channels = 4
layout = [
  { kind = "downsample", spatial = 2, temporal = 1 },
  { kind = "residual", channels = 8 },
  { kind = "downsample", spatial = 2, temporal = 2 },
  { kind = "downsample", spatial = 2, temporal = 1 },
  { kind = "residual", channels = 8 },
]

[model.lookup]
layers = 1
heads = 2
mlp_ratio = 2

[optim]
disc_warmup = 1

[stage1]
iterations = 3
batch = 1
resolution = 16
checkpoint_every = 2

[stage2]
iterations = 3
batch = 1
resolution = 16
checkpoint_every = 0

[extractor.pyramid]
patch = 4
widths = [4]
"#;

fn run(args: &[&str]) -> i32 {
    let mut v = vec!["facevq"];
    v.extend_from_slice(args);
    run_from_args(v)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dataset(root: &Path, videos: usize, frames: usize, size: usize) {
    let spec = ClipSpec {
        frames,
        size,
        max_speed: 1.0,
    };
    for i in 0..videos {
        let v = face_clip(&spec, i as u64);
        write_video(&root.join(format!("v{i:02}")), &v, &VideoMeta::for_video(&v, "synthetic")).unwrap();
    }
}

fn tiny_config(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    if !data.exists() {
        dataset(&data, 3, 4, 16);
    }
    let text = TINY.to_string()
        .replace("[data]\n", &format!("[data]\nroot = {:?}\n", s(&data)))
        .replace("seed = 5\n", &format!("seed = 5\noutput = {:?}\n", s(&dir.join("runs"))));
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "version = 1\nlatent = 3\n").unwrap();
    assert_eq!(run(&["train-stage1", "--config", s(&cfg)]), 2);
}

#[test]
fn stage2_without_stage1_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert_eq!(run(&["train-stage2", "--config", s(&cfg), "--dry-run"]), 2);
}

#[test]
fn missing_dataset_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    std::fs::remove_dir_all(dir.path().join("data")).unwrap();
    assert_eq!(run(&["train-stage1", "--config", s(&cfg), "--dry-run"]), 3);
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert_eq!(run(&["train-stage1", "--config", s(&cfg), "--dry-run"]), 0);
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn enhance_with_missing_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 1, 4, 16);
    let input = dir.path().join("v00");
    let missing = dir.path().join("none.safetensors");
    let out = dir.path().join("out");
    assert_eq!(run(&["enhance", "--checkpoint", s(&missing), "--input", s(&input), "--output", s(&out)]), 2);
}

#[test]
fn external_codec_failure_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    dataset(&dir.path().join("hq"), 1, 2, 16);
    let cfg = dir.path().join("codec.toml");
    std::fs::write(&cfg, "version = 1\n[degradation]\ncodec = \"external\"\n").unwrap();
    std::env::set_var(facevq::degrade::CODEC_ENV, dir.path().join("no-such-binary"));
    let out = dir.path().join("lq");
    let code = run(&["degrade", "--input", s(&dir.path().join("hq")), "--config", s(&cfg), "--out", s(&out)]);
    std::env::remove_var(facevq::degrade::CODEC_ENV);
    assert_eq!(code, 4);
}

#[test]
fn two_stage_training_then_enhance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert_eq!(run(&["train-stage1", "--config", s(&cfg)]), 0);
    let s1 = dir.path().join("runs/stage1");
    for f in ["stage1.safetensors", "stage1_00000002.safetensors", "train_log.jsonl", "run_manifest.json", "final_metrics.json", "config.toml"] {
        assert!(s1.join(f).is_file(), "{f}");
    }
    let log = std::fs::read_to_string(s1.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(s1.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["checkpoints"].as_object().unwrap().len(), 2);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);

    let cfg2 = tiny_config(dir.path());
    let text = std::fs::read_to_string(&cfg2)
        .unwrap()
        .replace("[stage2]\n", &format!("[stage2]\nstage1_checkpoint = {:?}\n", s(&s1.join("stage1.safetensors"))));
    std::fs::write(&cfg2, text).unwrap();
    assert_eq!(run(&["train-stage2", "--config", s(&cfg2)]), 0);
    let ck2 = dir.path().join("runs/stage2/stage2.safetensors");
    assert!(ck2.is_file());

    let input = dir.path().join("data/v00");
    let out = dir.path().join("enhanced");
    assert_eq!(run(&["enhance", "--checkpoint", s(&ck2), "--input", s(&input), "--output", s(&out), "--deflicker"]), 0);
    let (a, _) = read_video(&input).unwrap();
    let (b, meta) = read_video(&out).unwrap();
    assert_eq!(a.dims(), b.dims());
    assert_eq!(meta.unwrap().frames, 4);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(m["flags"]["deflicker"], "true");

    // A resolution the lookup was not trained for is a data error.
    let other = dir.path().join("other");
    dataset(&other, 1, 4, 24);
    assert_eq!(
        run(&["enhance", "--checkpoint", s(&ck2), "--input", s(&other.join("v00")), "--output", s(&dir.path().join("o2"))]),
        3
    );
}

#[test]
fn identical_runs_log_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let cfg = tiny_config(d.path());
        assert_eq!(run(&["train-stage1", "--config", s(&cfg), "--iters", "2"]), 0);
    }
    let la = std::fs::read_to_string(a.path().join("runs/stage1/train_log.jsonl")).unwrap();
    let lb = std::fs::read_to_string(b.path().join("runs/stage1/train_log.jsonl")).unwrap();
    assert_eq!(la, lb);
}

#[test]
fn degrade_flicker_marks_about_30_percent() {
    let dir = tempfile::tempdir().unwrap();
    let hq = dir.path().join("hq");
    dataset(&hq, 4, 50, 8);
    let out = dir.path().join("lq");
    assert_eq!(
        run(&["degrade", "--input", s(&hq), "--flicker", "brightness", "--p", "0.3", "--flicker-only", "--out", s(&out), "--workers", "2"]),
        0
    );
    let mut selected = 0;
    let mut total = 0;
    for i in 0..4 {
        let (_, meta) = read_video(&out.join(format!("v{i:02}"))).unwrap();
        let rec = meta.unwrap().flicker.unwrap();
        selected += rec.selected.iter().filter(|&&b| b).count();
        total += rec.selected.len();
    }
    let frac = selected as f64 / total as f64;
    assert!((0.2..=0.4).contains(&frac), "{frac}");
    assert!(out.join("run_manifest.json").is_file());
}

#[test]
fn degrade_is_reproducible_and_independent_of_workers() {
    let dir = tempfile::tempdir().unwrap();
    let hq = dir.path().join("hq");
    dataset(&hq, 3, 2, 16);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(run(&["degrade", "--input", s(&hq), "--out", s(&a), "--seed", "9"]), 0);
    assert_eq!(run(&["degrade", "--input", s(&hq), "--out", s(&b), "--seed", "9", "--workers", "3"]), 0);
    for i in 0..3 {
        let id = format!("v{i:02}");
        let (va, ma) = read_video(&a.join(&id)).unwrap();
        let (vb, mb) = read_video(&b.join(&id)).unwrap();
        assert_eq!(va, vb);
        assert_eq!(ma.unwrap().degradation, mb.unwrap().degradation);
    }
}

#[test]
fn evaluate_identical_pairs_reports_cap() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("v");
    dataset(&root, 2, 2, 16);
    let out = dir.path().join("eval");
    assert_eq!(run(&["evaluate", "--restored", s(&root), "--reference", s(&root), "--out", s(&out)]), 0);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["aggregate"]["psnr"], facevq::evalkit::PSNR_CAP);
    assert_eq!(m["aggregate"]["ssim"], 1.0);
    assert_eq!(m["clips"]["v00"]["psnr_capped"], true);
}

#[test]
fn profile_writes_png() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 1, 5, 16);
    let out = dir.path().join("p/profile.png");
    assert_eq!(run(&["profile", "--input", s(&dir.path().join("v00")), "--column", "3", "--output", s(&out)]), 0);
    let img = image::open(&out).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (5, 16));
    assert_eq!(run(&["profile", "--input", s(&dir.path().join("v00")), "--column", "16", "--output", s(&out)]), 3);
}

fn faces(t: usize, boxed: bool, nose_x: f64) -> FaceFixture {
    FaceFixture {
        boxes: (0..t)
            .map(|_| boxed.then_some(FaceBox { x: 4.0, y: 4.0, w: 8.0, h: 8.0 }))
            .collect(),
        landmarks: (0..t)
            .map(|_| {
                Some(FaceGeometry {
                    left_eye: (6.0, 6.0),
                    right_eye: (10.0, 6.0),
                    nose: (nose_x, 9.0),
                })
            })
            .collect(),
    }
}

#[test]
fn curate_counts_are_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("raw");
    dataset(&root, 4, 3, 16);
    let cases = [faces(3, true, 8.0), faces(3, false, 8.0), faces(3, true, 12.0), faces(3, true, 8.0)];
    for (i, f) in cases.iter().enumerate() {
        std::fs::write(root.join(format!("v{i:02}/faces.json")), serde_json::to_string(f).unwrap()).unwrap();
    }
    std::fs::write(root.join("v03/text.json"), r#"{"frames": [[{"confidence": 0.9}], [], []]}"#).unwrap();
    let out = dir.path().join("cur");
    assert_eq!(run(&["curate", "--input", s(&root), "--out", s(&out)]), 0);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("curation_report.json")).unwrap()).unwrap();
    let c = &r["counts"];
    let n: Vec<u64> = ["input", "after_a", "after_b", "after_c", "kept"].iter().map(|k| c[k].as_u64().unwrap()).collect();
    assert_eq!(n, vec![4, 3, 2, 1, 1]);
    assert!(out.join("v00").is_dir());
    let (v, _) = read_video(&out.join("v00")).unwrap();
    let cfg = facevq::curator::CurationConfig::default();
    assert_eq!(v.dims(), (3, cfg.target_size, cfg.target_size));
}

#[test]
fn curate_without_face_records_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 1, 2, 16);
    assert_eq!(run(&["curate", "--input", s(dir.path()), "--dry-run"]), 3);
}

#[test]
fn constant_video_round_trip_through_layout() {
    let dir = tempfile::tempdir().unwrap();
    let v = VideoTensor::constant(3, 8, 8, [0.2, 0.4, 0.6]);
    write_video(dir.path(), &v, &VideoMeta::for_video(&v, "c")).unwrap();
    let (back, _) = read_video(dir.path()).unwrap();
    let max = (back.frames() - v.frames()).mapv(f32::abs).fold(0.0f32, |a, &b| a.max(b));
    assert!(max <= 0.5 / 255.0 + 1e-6);
}

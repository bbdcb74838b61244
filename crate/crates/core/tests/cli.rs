use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmdn::data::{read_pts, write_pts};
use mmdn::heatmap::dump::{read_stack, write_stack};
use mmdn::heatmap::{BoundaryScheme, HeatmapKind};
use mmdn::landmarks::{LandmarkSet, Scheme};
use mmdn::metrics::EvalReport;
use mmdn::network::checkpoint;
use mmdn::network::synth::synthesize_sample;
use mmdn::network::{NetworkConfig, NetworkState};
use mmdn::search::corrupt_landmark_heatmap;
use tempfile::TempDir;

fn mmdn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmdn"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Writes `n` synthetic 68-point records with integral landmarks whose face
/// box is the whole `size × size` image, so the crop frame is the image
/// frame when `heatmap_size == size`.
fn write_records(dir: &Path, n: u64, size: usize) -> PathBuf {
    let mut manifest = String::new();
    for i in 0..n {
        let face = synthesize_sample(100 + i, size).unwrap();
        let pts = face.full.map(|p| [p[0].round(), p[1].round()]);
        let key = format!("face{i:02}");
        fs::write(dir.join(format!("{key}.pts")), write_pts(&pts)).unwrap();
        face.image
            .save_png(&dir.join(format!("{key}.png")))
            .unwrap();
        manifest.push_str(&format!("{key}.png\t{key}.pts\t0,0,{size},{size}\ttest\n"));
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest).unwrap();
    path
}

const SIZE_64: [&str; 4] = [
    "--set",
    "network.input_size=128",
    "--set",
    "network.heatmap_size=64",
];

#[test]
fn encode_writes_all_maps_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    write_records(tmp.path(), 1, 64);
    let mut args = vec!["--out", "a", "encode", "--manifest", "manifest.tsv"];
    args.extend(SIZE_64);
    ok(&mmdn(tmp.path(), &args));
    let pngs = fs::read_dir(tmp.path().join("a/encode/face00"))
        .unwrap()
        .count();
    assert_eq!(pngs, 81);
    let maps = read_stack(&tmp.path().join("a/encode/face00.hm")).unwrap();
    assert_eq!(maps.len(), 81);
    assert_eq!(
        maps.iter()
            .filter(|m| m.kind == HeatmapKind::Boundary)
            .count(),
        13
    );

    args[1] = "b";
    ok(&mmdn(tmp.path(), &args));
    let a = fs::read(tmp.path().join("a/encode/face00.hm")).unwrap();
    let b = fs::read(tmp.path().join("b/encode/face00.hm")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn empty_manifest_succeeds_without_outputs() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("empty.tsv"), "# nothing here\n").unwrap();
    ok(&mmdn(
        tmp.path(),
        &["--out", "o", "encode", "--manifest", "empty.tsv"],
    ));
    assert!(!tmp.path().join("o/encode").exists());
}

#[test]
fn missing_annotation_is_io_error_naming_it() {
    let tmp = TempDir::new().unwrap();
    fs::write(
        tmp.path().join("m.tsv"),
        "a.png\tgone.pts\t0,0,10,10\ttest\n",
    )
    .unwrap();
    let o = mmdn(tmp.path(), &["encode", "--manifest", "m.tsv"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gone.pts"));
}

fn summary_rows(out: &str) -> Vec<Vec<f64>> {
    out.lines()
        .skip(1)
        .map(|l| l.split('\t').skip(1).map(|c| c.parse().unwrap()).collect())
        .collect()
}

#[test]
fn search_recovers_ground_truth_maps() {
    let tmp = TempDir::new().unwrap();
    write_records(tmp.path(), 2, 64);
    let mut args = vec!["encode", "--manifest", "manifest.tsv"];
    args.extend(SIZE_64);
    ok(&mmdn(tmp.path(), &args));
    let out = ok(&mmdn(tmp.path(), &["search", "--heatmaps", "out/encode"]));
    for row in summary_rows(&out) {
        assert_eq!(row, vec![0.0, 0.0, 0.0, 0.0]);
    }
    let truth = read_pts(&tmp.path().join("out/encode/face01.pts")).unwrap();
    let searched = read_pts(&tmp.path().join("out/search/face01.search.pts")).unwrap();
    assert_eq!(searched.points, truth.points);
}

/// Replaces every landmark map with a copy carrying a spurious peak off its
/// boundary, perpendicular to the local boundary direction.
fn corrupt_dumps(dir: &Path) {
    let scheme = BoundaryScheme::builtin(Scheme::W68).unwrap();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|e| e != "hm") {
            continue;
        }
        let truth: LandmarkSet = read_pts(&path.with_extension("pts")).unwrap();
        let mut maps = read_stack(&path).unwrap();
        for i in 0..68 {
            let chain = scheme.polyline(scheme.boundary_of(i).unwrap());
            let at = chain.iter().position(|&j| j == i).unwrap();
            let prev = truth.points[chain[at.saturating_sub(1)]];
            let next = truth.points[chain[(at + 1).min(chain.len() - 1)]];
            let normal = [-(next[1] - prev[1]), next[0] - prev[0]];
            let normal = if normal == [0.0, 0.0] {
                [1.0, 0.0]
            } else {
                normal
            };
            maps[i] = corrupt_landmark_heatmap(truth.points[i], normal, 3.0, 64, 64).unwrap();
        }
        write_stack(&path, &maps).unwrap();
    }
}

#[test]
fn search_beats_argmax_on_corrupted_maps_and_window_one_is_argmax() {
    let tmp = TempDir::new().unwrap();
    write_records(tmp.path(), 6, 64);
    let mut args = vec!["encode", "--manifest", "manifest.tsv"];
    args.extend(SIZE_64);
    ok(&mmdn(tmp.path(), &args));
    corrupt_dumps(&tmp.path().join("out/encode"));

    let rows = summary_rows(&ok(&mmdn(
        tmp.path(),
        &["search", "--heatmaps", "out/encode"],
    )));
    assert_eq!(rows.len(), 6);
    let argmax: f64 = rows.iter().map(|r| r[1]).sum();
    let searched: f64 = rows.iter().map(|r| r[2]).sum();
    assert!(argmax > 0.0);
    assert!(searched <= argmax, "search {searched} vs argmax {argmax}");

    let rows = summary_rows(&ok(&mmdn(
        tmp.path(),
        &[
            "--out",
            "w1",
            "search",
            "--heatmaps",
            "out/encode",
            "--window",
            "1",
        ],
    )));
    for r in rows {
        assert_eq!(r[0], 0.0, "window 1 moved a landmark");
        assert_eq!(r[1], r[2]);
    }
}

#[test]
fn eval_closed_form_and_key_join() {
    let tmp = TempDir::new().unwrap();
    write_records(tmp.path(), 3, 100);
    let pred = tmp.path().join("pred");
    fs::create_dir(&pred).unwrap();
    for i in 0..3 {
        let gt = read_pts(&tmp.path().join(format!("face{i:02}.pts"))).unwrap();
        fs::write(
            pred.join(format!("face{i:02}.pts")),
            write_pts(&gt.map(|p| [p[0] + 3.0, p[1] + 4.0])),
        )
        .unwrap();
    }
    let report = |out: &str| -> EvalReport {
        toml::from_str(&fs::read_to_string(tmp.path().join(out).join("report.toml")).unwrap())
            .unwrap()
    };
    let args = [
        "--out",
        "a",
        "eval",
        "--manifest",
        "manifest.tsv",
        "--normalization",
        "face-size",
        "--pred",
        "pred",
    ];
    ok(&mmdn(tmp.path(), &args));
    let r = report("a");
    assert!((r.mean_nme - 0.05).abs() < 1e-9);
    assert_eq!(r.failure_rate, 0.0);
    assert!(tmp.path().join("a/ced.txt").exists());

    // Same files listed in another order.
    let shuffled = [
        "--out",
        "b",
        "eval",
        "--manifest",
        "manifest.tsv",
        "--normalization",
        "face-size",
        "--pred",
        "pred/face02.pts",
        "pred/face00.pts",
        "pred/face01.pts",
    ];
    ok(&mmdn(tmp.path(), &shuffled));
    assert_eq!(
        fs::read(tmp.path().join("a/report.toml")).unwrap(),
        fs::read(tmp.path().join("b/report.toml")).unwrap()
    );

    let o = mmdn(
        tmp.path(),
        &[
            "eval",
            "--manifest",
            "manifest.tsv",
            "--pred",
            "pred/face00.pts",
        ],
    );
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn eval_of_ground_truth_is_zero() {
    let tmp = TempDir::new().unwrap();
    write_records(tmp.path(), 2, 100);
    ok(&mmdn(
        tmp.path(),
        &[
            "eval",
            "--manifest",
            "manifest.tsv",
            "--pred",
            "face00.pts",
            "face01.pts",
        ],
    ));
    let r: EvalReport =
        toml::from_str(&fs::read_to_string(tmp.path().join("out/report.toml")).unwrap()).unwrap();
    assert_eq!((r.mean_nme, r.failure_rate), (0.0, 0.0));
}

#[test]
fn verify_reports_and_fails_on_injected_fault() {
    let tmp = TempDir::new().unwrap();
    let out = ok(&mmdn(tmp.path(), &["verify", "js"]));
    let names: Vec<&str> = out
        .lines()
        .map(|l| l.split_whitespace().nth(1).unwrap())
        .collect();
    assert_eq!(
        names,
        [
            "js/symmetry",
            "js/nonnegative",
            "js/upper_bound_ln2",
            "js/zero_on_equal"
        ]
    );
    assert!(out.lines().all(|l| l.starts_with("PASS")));

    let o = mmdn(
        tmp.path(),
        &["verify", "newton-schulz", "--ns-iterations", "1"],
    );
    assert_eq!(o.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL newton_schulz/"));

    ok(&mmdn(tmp.path(), &["verify", "all"]));
}

#[test]
fn error_classes_map_to_exit_codes() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(
        mmdn(tmp.path(), &["--set", "search.window=4", "verify", "js"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        mmdn(tmp.path(), &["--set", "no.such=1", "verify", "js"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        mmdn(
            tmp.path(),
            &["eval", "--manifest", "nope.tsv", "--pred", "x.pts"]
        )
        .status
        .code(),
        Some(3)
    );
    assert_eq!(
        mmdn(tmp.path(), &["--config", "nope.toml", "verify", "js"])
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn resolved_config_replays_the_run() {
    let tmp = TempDir::new().unwrap();
    ok(&mmdn(
        tmp.path(),
        &[
            "--seed",
            "11",
            "--set",
            "verify.js_pairs=50",
            "--out",
            "a",
            "verify",
            "js",
        ],
    ));
    ok(&mmdn(
        tmp.path(),
        &["--config", "a/resolved.toml", "--out", "b", "verify", "js"],
    ));
    for f in ["resolved.toml", "verify.toml"] {
        assert_eq!(
            fs::read(tmp.path().join("a").join(f)).unwrap(),
            fs::read(tmp.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

const SMALL_TRAIN: [&str; 6] = [
    "--set",
    "train.train_samples=8",
    "--set",
    "train.test_samples=4",
    "--set",
    "train.eval_every=0",
];

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["--out", out];
    args.extend(SMALL_TRAIN);
    args.push("train");
    args.extend(extra);
    mmdn(dir, &args)
}

#[test]
fn zero_iterations_writes_the_initialization() {
    let tmp = TempDir::new().unwrap();
    ok(&train(tmp.path(), "o", &["--iterations", "0"]));
    let cfg = NetworkConfig::default();
    let saved = checkpoint::load(&tmp.path().join("o/checkpoint.bin"), &cfg).unwrap();
    let fresh = NetworkState::build(cfg, 7).unwrap();
    assert_eq!(saved.params, fresh.params);
    assert_eq!(saved.iteration, 0);
}

#[test]
fn resume_matches_uninterrupted_run_bitwise() {
    let tmp = TempDir::new().unwrap();
    ok(&train(tmp.path(), "full", &["--iterations", "10"]));
    ok(&train(
        tmp.path(),
        "half",
        &["--iterations", "10", "--until", "5"],
    ));
    ok(&train(
        tmp.path(),
        "rest",
        &["--iterations", "10", "--resume", "half/checkpoint.bin"],
    ));
    let full = fs::read(tmp.path().join("full/checkpoint.bin")).unwrap();
    let rest = fs::read(tmp.path().join("rest/checkpoint.bin")).unwrap();
    assert!(full == rest, "resumed checkpoint differs");

    let log = fs::read_to_string(tmp.path().join("full/train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 11);
    let tail: Vec<&str> = log.lines().skip(6).collect();
    let resumed: Vec<&str> = fs::read_to_string(tmp.path().join("rest/train_log.tsv"))
        .unwrap()
        .leak()
        .lines()
        .skip(1)
        .collect();
    assert_eq!(tail, resumed);
}

#[test]
fn checkpoint_for_another_network_is_refused() {
    let tmp = TempDir::new().unwrap();
    ok(&train(tmp.path(), "a", &["--iterations", "0"]));
    let o = train(
        tmp.path(),
        "b",
        &[
            "--iterations",
            "1",
            "--resume",
            "a/checkpoint.bin",
            "--set",
            "network.ns_iterations=6",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_aborts_with_iteration() {
    let tmp = TempDir::new().unwrap();
    let o = train(
        tmp.path(),
        "o",
        &[
            "--iterations",
            "5",
            "--set",
            "train.base_lr=1e200",
            "--set",
            "train.grad_clip=0",
        ],
    );
    assert_eq!(
        o.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(String::from_utf8_lossy(&o.stderr).contains("iteration"));
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ensemble_uq::volume::{read_volume, Geometry, Label, LabelMap};
use ensemble_uq::TransformSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ensemble-uq"));
    c.env_remove("RUST_LOG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn random_map(seed: u64, n: usize, l: usize) -> LabelMap {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let g = Geometry::new([n; 3], [1.0; 3]).unwrap();
    let labels = (0..g.num_voxels())
        .map(|_| r.gen_range(0..l) as Label)
        .collect();
    LabelMap::new(g, l, labels).unwrap()
}

fn write_manifest(dir: &Path, members: &[LabelMap]) -> PathBuf {
    let entries: Vec<Value> = members
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let name = format!("m{i}.nii.gz");
            m.write(dir.join(&name)).unwrap();
            serde_json::json!({"member_id": format!("m{i}"), "model_tag": "unet", "path": name})
        })
        .collect();
    let path = dir.join("scan-a.json");
    std::fs::write(&path, serde_json::to_string(&entries).unwrap()).unwrap();
    path
}

#[test]
fn fuse_single_identity_member() {
    let dir = tempfile::tempdir().unwrap();
    let m = random_map(1, 6, 3);
    let manifest = write_manifest(dir.path(), std::slice::from_ref(&m));
    let out_dir = dir.path().join("out");
    let out = run(&[
        "fuse",
        "--manifest",
        s(&manifest),
        "--output-dir",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = json(out_dir.join("report.json"));
    assert_eq!(report["mean_uncertainty"], 0.0);
    assert_eq!(report["ensemble_size"], 1);
    assert_eq!(report["scan_id"], "scan-a");
    let fused =
        LabelMap::from_grid(&read_volume(out_dir.join("fused.nii.gz")).unwrap(), Some(3)).unwrap();
    assert_eq!(fused, m);
    let u = read_volume(out_dir.join("uncertainty.nii.gz")).unwrap();
    assert!(u.data().to_f64().iter().all(|&v| v == 0.0));
}

#[test]
fn fuse_six_members_reports_six() {
    let dir = tempfile::tempdir().unwrap();
    let members: Vec<_> = (0..6).map(|i| random_map(10 + i, 6, 4)).collect();
    let manifest = write_manifest(dir.path(), &members);
    let out_dir = dir.path().join("out");
    let out = run(&[
        "fuse",
        "--manifest",
        s(&manifest),
        "--output-dir",
        s(&out_dir),
        "--fusion",
        "mean-prob",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = json(out_dir.join("report.json"));
    assert_eq!(report["ensemble_size"], 6);
    let uc = report["mean_uncertainty"].as_f64().unwrap();
    assert!(uc > 0.0 && uc <= 0.25);
}

#[test]
fn fuse_inputs_flag_and_background_exclusion() {
    let dir = tempfile::tempdir().unwrap();
    let a = random_map(3, 5, 3);
    let b = random_map(4, 5, 3);
    a.write(dir.path().join("a.nii")).unwrap();
    b.write(dir.path().join("b.nii")).unwrap();
    let inputs = [
        s(&dir.path().join("a.nii")).to_string(),
        s(&dir.path().join("b.nii")).to_string(),
    ];
    let all = dir.path().join("all");
    let fg = dir.path().join("fg");
    let base = ["fuse", "--inputs", &inputs[0], &inputs[1], "--output-dir"];
    assert_eq!(code(&run(&[&base[..], &[s(&all)]].concat())), 0);
    assert_eq!(
        code(&run(
            &[&base[..], &[s(&fg), "--exclude-background"]].concat()
        )),
        0
    );
    let u_all = json(all.join("report.json"))["mean_uncertainty"]
        .as_f64()
        .unwrap();
    let u_fg = json(fg.join("report.json"))["mean_uncertainty"]
        .as_f64()
        .unwrap();
    assert_ne!(u_all, u_fg);
    assert_eq!(json(all.join("report.json"))["scan_id"], "a");
}

#[test]
fn missing_member_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), &[random_map(5, 4, 2)]);
    let mut entries = json(&manifest);
    entries
        .as_array_mut()
        .unwrap()
        .push(serde_json::json!({"member_id": "gone", "path": "gone.nii.gz"}));
    std::fs::write(&manifest, entries.to_string()).unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&[
        "fuse",
        "--manifest",
        s(&manifest),
        "--output-dir",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("gone.nii.gz"));
    let leftovers = std::fs::read_dir(&out_dir).map(|d| d.count()).unwrap_or(0);
    assert_eq!(leftovers, 0);
}

#[test]
fn mismatched_member_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), &[random_map(6, 4, 2), random_map(7, 5, 2)]);
    let out = run(&[
        "fuse",
        "--manifest",
        s(&manifest),
        "--output-dir",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn bad_manifest_exits_4_and_bad_flags_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.json");
    std::fs::write(&manifest, "[]").unwrap();
    let out = run(&[
        "fuse",
        "--manifest",
        s(&manifest),
        "--output-dir",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 4);
    std::fs::write(&manifest, "{not json").unwrap();
    assert_eq!(
        code(&run(&[
            "fuse",
            "--manifest",
            s(&manifest),
            "--output-dir",
            s(dir.path())
        ])),
        4
    );

    assert_eq!(
        code(&run(&[
            "fuse",
            "--manifest",
            s(&manifest),
            "--output-dir",
            "x",
            "--bogus"
        ])),
        1
    );
    assert_eq!(code(&run(&["fuse", "--output-dir", "x"])), 1);
    assert_eq!(code(&run(&["nope"])), 1);
}

#[test]
fn help_documents_flags() {
    let out = run(&["fuse", "--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in [
        "--manifest",
        "--inputs",
        "--output-dir",
        "--num-classes",
        "--fusion",
        "--exclude-background",
        "--threads",
        "--log",
    ] {
        assert!(text.contains(flag), "missing {flag}");
    }
    let top = String::from_utf8_lossy(&run(&["--help"]).stdout).into_owned();
    for sub in ["fuse", "metrics", "rank", "synth", "tta"] {
        assert!(top.contains(sub));
    }
    assert!(String::from_utf8_lossy(&run(&["metrics", "--help"]).stdout).contains("--denominator"));
    let rank = String::from_utf8_lossy(&run(&["rank", "--help"]).stdout).into_owned();
    assert!(rank.contains("--mode") && rank.contains("--budget"));
    assert!(String::from_utf8_lossy(&run(&["synth", "--help"]).stdout).contains("--seed"));
}

#[test]
fn env_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), &[random_map(8, 4, 2)]);
    let out_dir = dir.path().join("env-out");
    let out = bin()
        .args(["fuse", "--manifest", s(&manifest)])
        .env("ENSEMBLE_UQ_OUTPUT_DIR", &out_dir)
        .env("ENSEMBLE_UQ_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(out_dir.join("report.json").exists());
}

fn cube_fixture() -> (LabelMap, LabelMap) {
    // gt: class 1 in x<4, class 2 in z>=6; pred moves the class-1 boundary
    let g = Geometry::new([8; 3], [1.0; 3]).unwrap();
    let mut gt = vec![0 as Label; 512];
    let mut pred = vec![0 as Label; 512];
    for v in 0..512 {
        let [x, _, z] = g.coords(v);
        gt[v] = if z >= 6 {
            2
        } else if x < 4 {
            1
        } else {
            0
        };
        pred[v] = if z >= 6 {
            2
        } else if x < 3 {
            1
        } else {
            0
        };
    }
    (
        LabelMap::new(g.clone(), 3, pred).unwrap(),
        LabelMap::new(g, 3, gt).unwrap(),
    )
}

#[test]
fn metrics_reports_dsc_groups_and_effort() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = cube_fixture();
    pred.write(dir.path().join("pred.nii.gz")).unwrap();
    gt.write(dir.path().join("gt.nii.gz")).unwrap();
    let groups = dir.path().join("groups.json");
    std::fs::write(&groups, r#"{"one": [1], "both": [1, 2]}"#).unwrap();
    let out_dir = dir.path().join("m");
    let out = run(&[
        "metrics",
        "--pred",
        s(&dir.path().join("pred.nii.gz")),
        "--gt",
        s(&dir.path().join("gt.nii.gz")),
        "--groups",
        s(&groups),
        "--output-dir",
        s(&out_dir),
        "--csv",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m = json(out_dir.join("metrics.json"));
    // class 1: |gt| = 4*8*6 = 192, |pred| = 144, overlap 144
    let d1 = m["classes"][1]["dsc"].as_f64().unwrap();
    assert_eq!(d1, 2.0 * 144.0 / (192.0 + 144.0));
    assert_eq!(m["classes"][2]["dsc"], 1.0);
    assert_eq!(m["correction"]["differing_voxels"], 48);
    assert_eq!(m["correction"]["percentage"], 100.0 * 48.0 / 512.0);
    let groups = m["groups"].as_array().unwrap();
    assert_eq!(groups[0]["group"], "both");
    assert_eq!(groups[0]["table_cell"], "0.93_{-0.05}^{+0.05}");
    assert_eq!(groups[1]["table_cell"], "0.86_{-0.00}^{+0.00}");
    let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn metrics_identity_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (_, gt) = cube_fixture();
    gt.write(dir.path().join("gt.nii")).unwrap();
    random_map(1, 7, 3)
        .write(dir.path().join("small.nii"))
        .unwrap();
    let gt_path = dir.path().join("gt.nii");
    let out_dir = dir.path().join("m");
    let out = run(&[
        "metrics",
        "--pred",
        s(&gt_path),
        "--gt",
        s(&gt_path),
        "--output-dir",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m = json(out_dir.join("metrics.json"));
    assert_eq!(m["groups"][0]["median"], 1.0);
    assert_eq!(m["groups"][0]["detection_ratio"], 1.0);
    assert_eq!(m["correction"]["differing_voxels"], 0);

    let out = run(&[
        "metrics",
        "--pred",
        s(&dir.path().join("small.nii")),
        "--gt",
        s(&gt_path),
        "--output-dir",
        s(&dir.path().join("bad")),
    ]);
    assert_eq!(code(&out), 3);
    assert!(!dir.path().join("bad").join("metrics.json").exists());
}

fn write_reports(dir: &Path, ucs: &[(&str, f64)]) {
    std::fs::create_dir_all(dir).unwrap();
    for (id, uc) in ucs {
        let report = serde_json::json!({"scan_id": id, "ensemble_size": 6, "mean_uncertainty": uc,
            "num_voxels": 10, "num_classes": 3});
        std::fs::write(dir.join(format!("{id}.json")), report.to_string()).unwrap();
    }
}

fn selected(path: &Path) -> Vec<String> {
    json(path)["selected"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect()
}

#[test]
fn rank_selects_by_mode_and_budget() {
    let dir = tempfile::tempdir().unwrap();
    let reports = dir.path().join("reports");
    write_reports(&reports, &[("a", 0.03), ("b", 0.01), ("c", 0.02)]);
    let low = dir.path().join("low");
    let high = dir.path().join("high");
    assert_eq!(
        code(&run(&[
            "rank",
            "--inputs",
            s(&reports),
            "--output-dir",
            s(&low),
            "--budget",
            "2"
        ])),
        0
    );
    assert_eq!(selected(&low.join("ranking.json")), ["b", "c"]);
    let out = run(&[
        "rank",
        "--inputs",
        s(&reports),
        "--output-dir",
        s(&high),
        "--budget",
        "2",
        "--mode",
        "highest",
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(selected(&high.join("ranking.json")), ["a", "c"]);
    let ranking = json(high.join("ranking.json"));
    assert_eq!(ranking["scans"][0]["rank"], 1);
    assert_eq!(ranking["scans"][2]["selected"], false);

    let one = dir.path().join("one");
    write_reports(&one, &[("only", 0.2)]);
    let out_dir = dir.path().join("one-out");
    assert_eq!(
        code(&run(&[
            "rank",
            "--inputs",
            s(&one),
            "--output-dir",
            s(&out_dir),
            "--budget",
            "5"
        ])),
        0
    );
    assert_eq!(selected(&out_dir.join("ranking.json")), ["only"]);
    assert_eq!(
        code(&run(&[
            "rank",
            "--inputs",
            s(&one),
            "--output-dir",
            s(&out_dir),
            "--budget",
            "0"
        ])),
        4
    );
}

#[test]
fn synth_is_reproducible_and_handles_zero_noise() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let args = [
        "synth",
        "--seed",
        "7",
        "--num-scans",
        "10",
        "--size",
        "16",
        "--members",
        "3",
        "--output-dir",
    ];
    assert_eq!(code(&run(&[&args[..], &[s(&a)]].concat())), 0);
    assert_eq!(
        code(&run(&[&args[..], &[s(&b), "--threads", "1"]].concat())),
        0
    );
    let bytes = |d: &Path| std::fs::read(d.join("experiment.json")).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    let record = json(a.join("experiment.json"));
    assert!(record["summary"]["spearman"].is_number());
    assert!(a.join("experiment.csv").exists());

    let zero = dir.path().join("zero");
    let out = run(&[
        &args[..],
        &[
            s(&zero),
            "--eps-min",
            "0",
            "--eps-max",
            "0",
            "--boundary-flip",
            "0",
        ],
    ]
    .concat());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let record = json(zero.join("experiment.json"));
    assert!(record["summary"]["spearman"].is_null());
    assert!(record["summary"]["undefined_reason"].is_string());

    let out = run(&[
        "synth",
        "--num-scans",
        "3",
        "--output-dir",
        s(&dir.path().join("bad")),
    ]);
    assert_eq!(code(&out), 4);
}

#[test]
fn tta_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let m = random_map(9, 10, 4);
    let input = dir.path().join("in.nii.gz");
    m.write(&input).unwrap();
    let spec = r#"{"kind": "integer-offset", "offset": [2, -1, 3]}"#;
    let fwd = dir.path().join("fwd.nii.gz");
    let back = dir.path().join("back.nii.gz");
    assert_eq!(
        code(&run(&[
            "tta",
            "--spec",
            spec,
            "--input",
            s(&input),
            "--output",
            s(&fwd)
        ])),
        0
    );
    let out = run(&[
        "tta",
        "--spec",
        spec,
        "--input",
        s(&fwd),
        "--output",
        s(&back),
        "--invert",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let restored = LabelMap::from_grid(&read_volume(&back).unwrap(), Some(4)).unwrap();
    let mask = ensemble_uq::tta::valid_mask(&TransformSpec::offset(2, -1, 3), [10; 3]).unwrap();
    for v in 0..m.num_voxels() {
        if mask.data().get(v) != 0.0 {
            assert_eq!(restored.labels()[v], m.labels()[v]);
        }
    }

    let same = dir.path().join("same.nii.gz");
    assert_eq!(
        code(&run(&[
            "tta",
            "--spec",
            r#"{"kind": "identity"}"#,
            "--input",
            s(&input),
            "--output",
            s(&same)
        ])),
        0
    );
    assert_eq!(read_volume(&same).unwrap(), read_volume(&input).unwrap());

    let singular = dir.path().join("singular.json");
    std::fs::write(
        &singular,
        r#"{"kind": "affine", "matrix": [[1, 2, 3], [2, 4, 6], [0, 0, 1]]}"#,
    )
    .unwrap();
    let out = run(&[
        "tta",
        "--spec",
        s(&singular),
        "--input",
        s(&input),
        "--output",
        s(&dir.path().join("x.nii")),
    ]);
    assert_eq!(code(&out), 5);
    assert!(stderr(&out).contains("determinant"));
    assert!(!dir.path().join("x.nii").exists());
}

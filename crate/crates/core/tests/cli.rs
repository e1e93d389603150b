use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tsproto::io::{write_feature_set, Precision};
use tsproto::sim::{synth_generate, SimConfig};
use tsproto::{generate_all_groups, Hyperparams};

fn tsproto(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsproto"))
        .args(args)
        .output()
        .expect("spawn tsproto")
}

fn small_config() -> SimConfig {
    SimConfig {
        n_per_class: 30,
        epochs: 2,
        steps_per_epoch: 3,
        ..SimConfig::default()
    }
}

fn fixture(dir: &Path) -> PathBuf {
    let path = dir.join("data.pfs1");
    write_feature_set(&path, &synth_generate(&small_config()).unwrap(), Precision::F64).unwrap();
    path
}

fn config_file(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    let sim = toml::to_string(&small_config()).unwrap();
    fs::write(&path, format!("seeds = [0]\n[sim]\n{sim}")).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn select_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path());
    let out = dir.path().join("sel.json");
    let o = tsproto(&["select", "--in", s(&data), "--out", s(&out), "--k", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let json: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    let set = synth_generate(&small_config()).unwrap();
    let h = Hyperparams {
        k: 4,
        ..Hyperparams::default()
    };
    let want = generate_all_groups(&set, &h).unwrap();
    let groups = json["result"]["groups"].as_array().unwrap();
    assert_eq!(groups.len(), want.len());
    for (g, p) in groups.iter().zip(want.values()) {
        let ids: Vec<u64> = g["indices"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
        assert_eq!(ids, p.indices);
    }
    assert_eq!(json["manifest"]["hyper"]["k"], 4);
    assert!(dir.path().join("sel.manifest.json").exists());
    assert!(dir.path().join("sel.indices.csv").exists());
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(tsproto(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(tsproto(&["select"]).status.code(), Some(2));
    assert_eq!(tsproto(&["select", "--k", "0", "--in", "x.pfs1"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[hyper]\nkay = 3\n").unwrap();
    let o = tsproto(&["validate", "--config", s(&cfg), "--in", "x.pfs1"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(tsproto(&["--help"]).status.code(), Some(0));
}

#[test]
fn corrupted_input_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path());
    let mut bytes = fs::read(&data).unwrap();
    bytes[0] = b'X';
    fs::write(&data, bytes).unwrap();
    let o = tsproto(&["validate", "--in", s(&data)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("BadMagic"));

    let truncated = dir.path().join("short.pfs1");
    fs::write(&truncated, &fs::read(fixture(dir.path())).unwrap()[..100]).unwrap();
    let o = tsproto(&["select", "--in", s(&truncated)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("TruncatedPayload"));
}

#[test]
fn invalid_csv_names_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("dup.csv");
    fs::write(
        &csv,
        "instance_id,class_id,level_id,ft_0,fs_0\n1,0,0,1.0,2.0\n1,0,0,3.0,4.0\n",
    )
    .unwrap();
    let o = tsproto(&["validate", "--in", s(&csv)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 3"));
}

#[test]
fn stdout_when_no_out() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path());
    let o = tsproto(&["weights", "--in", s(&data), "--group", "1:0"]);
    assert!(o.status.success());
    let json: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(json["manifest"]["group"]["class_id"], 1);
    assert_eq!(json["result"]["instances"].as_array().unwrap().len(), 30);
}

/// Runs `args` twice in fresh directories holding the same inputs and
/// returns every produced file, keyed by name, for each run.
fn twice(args: &[&str]) -> [Vec<(String, Vec<u8>)>; 2] {
    let root = tempfile::tempdir().unwrap();
    let inputs = root.path().join("inputs");
    fs::create_dir(&inputs).unwrap();
    let data = fixture(&inputs);
    let cfg = config_file(&inputs);
    let run = |name: &str| {
        let dir = root.path().join(name);
        fs::create_dir(&dir).unwrap();
        let sub = args[0];
        let out = match sub {
            "synth" => dir.join("out.pfs1"),
            "convert" => dir.join("out.csv"),
            _ => dir.join("out.json"),
        };
        let sim_out = inputs.join("sim.json");
        let mut argv: Vec<String> = args.iter().map(|a| a.to_string()).collect();
        argv.extend(["--config".into(), s(&cfg).into(), "--out".into(), s(&out).into()]);
        match sub {
            "report" => argv.extend(["--in".into(), s(&sim_out).into()]),
            "synth" => {}
            _ => argv.extend(["--in".into(), s(&data).into()]),
        }
        if sub == "report" && !sim_out.exists() {
            let o = tsproto(&["simulate", "--config", s(&cfg), "--in", s(&data), "--out", s(&sim_out)]);
            assert!(o.status.success());
        }
        let argv: Vec<&str> = argv.iter().map(String::as_str).collect();
        let o = tsproto(&argv);
        assert!(o.status.success(), "{sub}: {}", String::from_utf8_lossy(&o.stderr));
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect();
        files.push(("stdout".into(), o.stdout));
        files.sort();
        files
    };
    [run("a"), run("b")]
}

#[test]
fn every_subcommand_is_deterministic() {
    let cases: &[&[&str]] = &[
        &["validate"],
        &["select"],
        &["select", "--method", "kmeans_teacher"],
        &["select", "--method", "random", "--seed", "3"],
        &["project"],
        &["weights"],
        &["losses"],
        &["compare-bases"],
        &["simulate"],
        &["report"],
        &["synth"],
        &["convert"],
    ];
    for args in cases {
        let [a, b] = twice(args);
        assert!(!a.is_empty());
        let names: Vec<&String> = a.iter().map(|(n, _)| n).collect();
        assert_eq!(names, b.iter().map(|(n, _)| n).collect::<Vec<_>>(), "{args:?}");
        for ((name, x), (_, y)) in a.iter().zip(&b) {
            // data-file results print the output path, which differs per run
            if name == "stdout" && matches!(args[0], "synth" | "convert") {
                continue;
            }
            assert!(x == y, "{args:?}: {name} differs");
        }
    }
}

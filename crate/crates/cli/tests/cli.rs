use std::path::Path;
use std::process::{Command, Output};

fn guidedseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_guidedseg")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = guidedseg(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn synth(dir: &Path) {
    ok(&["synth", "--out", dir.to_str().unwrap(), "--seed", "4", "--images", "40", "--video-sequences", "4"]);
}

#[test]
fn synth_train_eval_bench_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let (d, ckpt, fgbg) = (data.to_str().unwrap(), tmp.path().join("g.ckpt"), tmp.path().join("f.ckpt"));
    let out = ok(&["train", "--data", d, "--mode", "video", "--out", ckpt.to_str().unwrap(), "--episodes", "30", "--log-every", "10"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("trained 30 episodes"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("episode     30"));
    ok(&["train", "--data", d, "--mode", "video", "--out", fgbg.to_str().unwrap(), "--episodes", "10", "--head", "unguided"]);

    let report = tmp.path().join("eval.json");
    let baseline = format!("fgbg={}", fgbg.display());
    ok(&[
        "eval", "--ckpt", ckpt.to_str().unwrap(), "--data", d, "--mode", "video", "--shots", "1,2", "--points", "1,dense",
        "--episodes", "5", "--report", report.to_str().unwrap(), "--baseline", &baseline,
    ]);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let cells = v["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 4);
    for c in cells {
        assert_eq!(c["n"], 5);
        for key in ["S", "P", "mean_iu", "std_iu", "guidance_ms", "infer_ms"] {
            assert!(!c[key].is_null(), "{key}");
        }
    }
    assert_eq!(cells[1]["P"], "dense");
    assert_eq!(v["baselines"]["fgbg"].as_array().unwrap().len(), 4);
    assert_eq!(v["config"]["eval"]["classes"], "all");

    let bench = tmp.path().join("bench.json");
    ok(&["bench", "--ckpt", ckpt.to_str().unwrap(), "--data", d, "--report", bench.to_str().unwrap(), "--reps", "20"]);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&bench).unwrap()).unwrap();
    assert!(v["timing"]["ratio"].as_f64().unwrap() > 1.0);
    assert!(v["hardware"]["arch"].is_string());
}

#[test]
fn same_seed_gives_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a);
    synth(&b);
    for name in ["index.json", "images/000011.png", "labels/000042.png"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    let train = |out: &Path| {
        ok(&["train", "--data", a.to_str().unwrap(), "--mode", "semantic", "--out", out.to_str().unwrap(), "--episodes", "15"]);
        std::fs::read(out).unwrap()
    };
    assert_eq!(train(&tmp.path().join("1.ckpt")), train(&tmp.path().join("2.ckpt")));
}

#[test]
fn exit_codes_separate_config_and_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let d = data.to_str().unwrap();
    let ckpt = tmp.path().join("m.ckpt");
    let c = ckpt.to_str().unwrap();

    // unknown flag value and invalid model combination
    assert_eq!(guidedseg(&["train", "--data", d, "--mode", "nope", "--out", c]).status.code(), Some(2));
    let early_proto = guidedseg(&["train", "--data", d, "--mode", "semantic", "--out", c, "--fusion", "early", "--head", "proto"]);
    assert_eq!(early_proto.status.code(), Some(2));
    assert_eq!(guidedseg(&["train", "--data", d, "--mode", "semantic", "--out", c, "--episodes", "0"]).status.code(), Some(2));

    // missing dataset and corrupt checkpoint
    let missing = tmp.path().join("missing");
    assert_eq!(guidedseg(&["train", "--data", missing.to_str().unwrap(), "--mode", "semantic", "--out", c]).status.code(), Some(3));
    std::fs::write(&ckpt, b"garbage").unwrap();
    let report = tmp.path().join("r.json");
    let eval = guidedseg(&["eval", "--ckpt", c, "--data", d, "--mode", "semantic", "--report", report.to_str().unwrap()]);
    assert_eq!(eval.status.code(), Some(3));

    // early fusion has no update path to benchmark
    ok(&["train", "--data", d, "--mode", "semantic", "--out", c, "--episodes", "2", "--fusion", "early"]);
    let bench = guidedseg(&["bench", "--ckpt", c, "--data", d, "--report", report.to_str().unwrap()]);
    assert_eq!(bench.status.code(), Some(2));
}

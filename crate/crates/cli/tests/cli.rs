use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use entroprune::eval::capture_dumps;
use entroprune::{zoo, ConvGeometry, LayerDump, NetworkSpec, Tensor};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_entroprune"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn noise(shape: Vec<usize>, seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// LeNet with random weights plus dumps of conv1 and fc1 on random images.
fn lenet_fixture() -> TempDir {
    let tmp = TempDir::new().unwrap();
    let mut net = zoo::lenet();
    zoo::init_weights(&mut net, 7);
    net.save(tmp.path().join("net/net.json")).unwrap();
    let images = noise(vec![20, 1, 28, 28], 1);
    for d in capture_dumps(&net, &images, &["conv1", "fc1"]).unwrap() {
        d.save(tmp.path().join("dumps").join(&d.layer_id)).unwrap();
    }
    images.save(tmp.path().join("images.tdf")).unwrap();
    let labels = Tensor::new(vec![20], (0..20).map(|i| (i % 10) as f64).collect()).unwrap();
    labels.save(tmp.path().join("labels.tdf")).unwrap();
    tmp
}

fn assert_single_error_line(o: &Output, code: i32) {
    assert_eq!(o.status.code(), Some(code), "stderr: {}", stderr(o));
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error[")).collect();
    assert_eq!(lines.len(), 1, "{err}");
}

#[test]
fn sparsify_layer_writes_artifacts() {
    let tmp = lenet_fixture();
    let o = run(tmp.path(), &["sparsify-layer", "dumps/conv1", "--out", "res", "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(summary["layer_id"], "conv1");
    for f in ["result.json", "lambda.tdf", "qhat.tdf"] {
        assert!(tmp.path().join("res").join(f).is_file(), "{f}");
    }
}

#[test]
fn missing_input_tensor_names_the_file() {
    let tmp = lenet_fixture();
    fs::remove_file(tmp.path().join("dumps/conv1/X.tdf")).unwrap();
    let o = run(tmp.path(), &["sparsify-layer", "dumps/conv1"]);
    assert_single_error_line(&o, 2);
    assert!(stderr(&o).contains("X.tdf"), "{}", stderr(&o));
}

#[test]
fn positive_entropy_weight_is_rejected() {
    let tmp = lenet_fixture();
    let o = run(tmp.path(), &["sparsify-layer", "dumps/conv1", "--eps-w", "0.01"]);
    assert_single_error_line(&o, 2);
    assert!(stderr(&o).contains("eps_w must be < 0"), "{}", stderr(&o));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn singular_system_exits_with_solver_code() {
    let tmp = TempDir::new().unwrap();
    let g = ConvGeometry::new(1, 1, 0, 2, 1).unwrap();
    let dump = LayerDump::new("flat", g, Tensor::zeros(vec![3, 2, 2, 2]), noise(vec![3, 1, 2, 2], 2)).unwrap();
    dump.save(tmp.path().join("d")).unwrap();
    let o = run(tmp.path(), &["sparsify-layer", "d", "--eps-l2", "0"]);
    assert_single_error_line(&o, 3);
    assert!(stderr(&o).starts_with("error[solver]"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let o = run(tmp.path(), &["sparsify-layer", "d", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sparsify_net_prunes_and_reports() {
    let tmp = lenet_fixture();
    let o = run(
        tmp.path(),
        &["sparsify-net", "dumps", "--net", "net/net.json", "--out", "pruned", "--json", "--jobs", "2"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let after = report["totals"]["params_after"].as_u64().unwrap();
    let pruned = NetworkSpec::load(tmp.path().join("pruned/pruned_net.json")).unwrap();
    assert_eq!(pruned.param_count(), after);
    assert!(after < 61_706);
    for f in ["report.json", "report.txt", "layers/conv1/result.json", "layers/fc1/result.json"] {
        assert!(tmp.path().join("pruned").join(f).is_file(), "{f}");
    }
}

#[test]
fn sparsify_net_is_byte_reproducible() {
    let tmp = lenet_fixture();
    for out in ["a", "b"] {
        let o = run(tmp.path(), &["sparsify-net", "dumps", "--net", "net/net.json", "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let mut files: Vec<_> = fs::read_dir(tmp.path().join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    files.sort();
    assert!(files.len() > 3);
    for f in files {
        let (a, b) = (tmp.path().join("a").join(&f), tmp.path().join("b").join(&f));
        if a.is_file() {
            assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap(), "{f:?}");
        }
    }
}

#[test]
fn sparsify_net_without_network_file_fails() {
    let tmp = lenet_fixture();
    let o = run(tmp.path(), &["sparsify-net", "dumps", "--net", "nope.json"]);
    assert_single_error_line(&o, 2);
    assert!(stderr(&o).contains("nope.json"));
}

#[test]
fn sparsify_net_rejects_unknown_dump_layer() {
    let tmp = lenet_fixture();
    let meta = tmp.path().join("dumps/conv1/meta.json");
    let text = fs::read_to_string(&meta).unwrap().replace("\"conv1\"", "\"conv9\"");
    fs::write(&meta, text).unwrap();
    let o = run(tmp.path(), &["sparsify-net", "dumps", "--net", "net/net.json"]);
    assert_single_error_line(&o, 2);
    assert!(stderr(&o).contains("conv9"), "{}", stderr(&o));
}

#[test]
fn eval_prints_accuracy() {
    let tmp = lenet_fixture();
    let o = run(tmp.path(), &["eval", "net/net.json", "--images", "images.tdf", "--labels", "labels.tdf"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("accuracy="), "{}", stdout(&o));
    let o = run(
        tmp.path(),
        &["eval", "net/net.json", "--images", "images.tdf", "--labels", "labels.tdf", "--json", "--limit", "5"],
    );
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["samples"], 5);
    assert!((0.0..=1.0).contains(&v["accuracy"].as_f64().unwrap()));
}

#[test]
fn eval_rejects_count_mismatch() {
    let tmp = lenet_fixture();
    Tensor::new(vec![3], vec![0.0, 1.0, 2.0]).unwrap().save(tmp.path().join("labels.tdf")).unwrap();
    let o = run(tmp.path(), &["eval", "net/net.json", "--images", "images.tdf", "--labels", "labels.tdf"]);
    assert_single_error_line(&o, 2);
}

#[test]
fn report_identical_networks() {
    let tmp = TempDir::new().unwrap();
    let o = run(tmp.path(), &["init", "lenet", "--no-weights", "--out", "base"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(tmp.path(), &["report", "base/net.json", "base/net.json", "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["totals"]["sparsity"], 0.0);
    assert_eq!(v["totals"]["params_before"], 61_706);
}

#[test]
fn report_on_pruned_vgg() {
    let tmp = TempDir::new().unwrap();
    assert!(run(tmp.path(), &["init", "vgg16", "--no-weights", "--out", "base"]).status.success());
    let o = run(
        tmp.path(),
        &["init", "vgg16-pruned", "--config", "conv_all+fc", "--no-weights", "--out", "small"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(
        tmp.path(),
        &["report", "base/net.json", "small/net.json", "--group", "deep=conv8,conv9", "--json"],
    );
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let s = v["totals"]["sparsity"].as_f64().unwrap();
    assert!((s - 0.887).abs() < 1e-3, "{s}");
    assert_eq!(v["groups"][0]["name"], "deep");
    let text = run(tmp.path(), &["report", "base/net.json", "small/net.json"]);
    assert!(stdout(&text).contains("88.75%"), "{}", stdout(&text));
}

#[test]
fn report_topology_mismatch_exits_2() {
    let tmp = TempDir::new().unwrap();
    assert!(run(tmp.path(), &["init", "vgg16", "--no-weights", "--out", "a"]).status.success());
    assert!(run(tmp.path(), &["init", "lenet", "--no-weights", "--out", "b"]).status.success());
    let o = run(tmp.path(), &["report", "a/net.json", "b/net.json"]);
    assert_single_error_line(&o, 2);
    assert!(stderr(&o).starts_with("error[structure]"), "{}", stderr(&o));
}

#[test]
fn init_rejects_unknown_pruned_config() {
    let tmp = TempDir::new().unwrap();
    let o = run(tmp.path(), &["init", "vgg16-pruned", "--config", "nope"]);
    assert_single_error_line(&o, 2);
    assert!(stderr(&o).contains("conv_all+fc"));
}

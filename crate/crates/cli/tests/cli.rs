use revsnn_cli::bench::CSV_HEADER;
use revsnn_cli::idx::{encode_images, encode_labels};
use revsnn_cli::verify::PROPERTIES;
use revsnn_cli::{run, EXIT_OK, EXIT_PROPERTY_FAILED, EXIT_USAGE};
use serde_json::Value;
use std::path::Path;

const SMALL: &str = "\
[model]
family = resnet

[run]
T = 2
batch_size = 8
epochs = 1

[dataset]
source = synthetic
task = two_gaussians
num_samples = 64
test_samples = 32
num_classes = 2
image_size = 8

[verify]
reconstruction_blocks = 4
gradient_sequences = 2
training_seeds = 1
training_epochs = 5

[bench]
families = resnet, former
depths = 1, 4
timesteps = 1, 2
dims = 16
base_depth = 4
base_timesteps = 2
base_dim = 16
batch = 2
spatial = 4
tokens = 16
";

fn invoke(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = run(std::iter::once("revsnn").chain(args.iter().copied()), &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(invoke(&["--help"]).0, EXIT_OK);
    assert_eq!(invoke(&["frobnicate"]).0, EXIT_USAGE);
    assert_eq!(invoke(&["train", "--engine", "magic"]).0, EXIT_USAGE);
    assert_eq!(invoke(&["verify", "--fault", "gremlins"]).0, EXIT_USAGE);
    let (code, text) = invoke(&["verify", "--only", "no_such_property"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(text.contains("no_such_property"), "{text}");
}

#[test]
fn malformed_config_reports_line_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[model]\nfamily = resnet\nblocks = one\n");
    let (code, text) = invoke(&["train", "--config", &cfg]);
    assert_eq!(code, EXIT_USAGE);
    assert!(text.contains("line 3") && text.contains("blocks"), "{text}");

    let cfg = write_config(dir.path(), "[model]\nfamily = resnet\nwarp_drive = 9\n");
    assert_eq!(invoke(&["train", "--config", &cfg]).0, EXIT_USAGE);

    let missing = dir.path().join("absent.toml");
    assert_eq!(invoke(&["train", "--config", missing.to_str().unwrap()]).0, EXIT_USAGE);
}

#[test]
fn verify_report_has_one_entry_per_property_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let (code, text) = invoke(&["verify", "--config", &cfg, "--out-dir", out.to_str().unwrap()]);
        assert_eq!(code, EXIT_OK, "{text}");
        assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), PROPERTIES.len(), "{text}");
        reports.push(read_json(&out.join("verify_report.json")));
    }
    let names: Vec<&str> = reports[0]["properties"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, PROPERTIES);
    assert_eq!(reports[0]["passed"], Value::Bool(true));

    let strip = |mut r: Value| {
        let o = r.as_object_mut().unwrap();
        o.remove("timestamp_unix");
        o.remove("wall_ms");
        for p in o["properties"].as_array_mut().unwrap() {
            let p = p.as_object_mut().unwrap();
            p.remove("wall_ms");
            p["measured"].as_object_mut().unwrap().remove("wall_ms");
        }
        r
    };
    let second = strip(reports.pop().unwrap());
    assert_eq!(strip(reports.pop().unwrap()), second);
}

#[test]
fn fault_flag_flips_selected_properties() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("fault");
    let (code, text) = invoke(&[
        "verify",
        "--config",
        &cfg,
        "--out-dir",
        out.to_str().unwrap(),
        "--fault",
        "skip_reset",
        "--only",
        "reconstruction,shape_preservation",
    ]);
    assert_eq!(code, EXIT_PROPERTY_FAILED, "{text}");
    let report = read_json(&out.join("verify_report.json"));
    let props = report["properties"].as_array().unwrap();
    assert_eq!(props.len(), 2);
    let passed = |name: &str| props.iter().find(|p| p["name"] == name).unwrap()["passed"].clone();
    assert_eq!(passed("reconstruction"), Value::Bool(false));
    assert_eq!(passed("shape_preservation"), Value::Bool(true));
    assert_eq!(report["fault"], Value::String("skip_reset".into()));
}

#[test]
fn bench_writes_parseable_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("bench");
    let (code, text) = invoke(&["bench", "--config", &cfg, "--out-dir", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK, "{text}");
    let mut reader = csv::Reader::from_path(out.join("bench.csv")).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(str::to_string).collect();
    assert_eq!(header, CSV_HEADER);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    // Two families, two modes, three distinct sweep points each.
    assert_eq!(rows.len(), 12);
    for r in &rows {
        assert!(["resnet", "former"].contains(&&r[0]));
        assert!(["oracle", "reversible"].contains(&&r[1]));
        assert!(r[6].parse::<f64>().unwrap() > 0.0);
        assert!(r[7].parse::<u64>().unwrap() > 0);
    }
    let summary = read_json(&out.join("bench_summary.json"));
    assert!(summary["fits"].as_array().is_some_and(|f| !f.is_empty()));
}

#[test]
fn inspect_preset_reports_full_size_counts() {
    let (code, text) = invoke(&["inspect", "--preset", "revsresnet21", "--json"]);
    assert_eq!(code, EXIT_OK, "{text}");
    let v: Value = serde_json::from_str(&text).unwrap();
    let params = v["params"].as_u64().unwrap() as f64;
    assert!((params / 11.05e6 - 1.0).abs() < 0.05, "{params}");
    assert_eq!(v["weight_layers"].as_u64(), Some(21));

    let (code, table) = invoke(&["inspect", "--preset", "revsformer-2-384"]);
    assert_eq!(code, EXIT_OK);
    assert!(table.contains("RevSFormer"), "{table}");
    assert_eq!(invoke(&["inspect", "--preset", "alexnet"]).0, EXIT_USAGE);
}

#[test]
fn inspect_counterpart_of_configured_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (code, text) = invoke(&["inspect", "--config", &cfg, "--counterpart", "--json"]);
    assert_eq!(code, EXIT_OK, "{text}");
    let v: Value = serde_json::from_str(&text).unwrap();
    assert!(v["name"].as_str().unwrap().starts_with("MS-ResNet"), "{text}");
}

#[test]
fn train_on_idx_files() {
    let dir = tempfile::tempdir().unwrap();
    let (n, side) = (12usize, 4usize);
    let pixels: Vec<u8> = (0..n * side * side).map(|i| if (i / (side * side)) % 2 == 0 { 200 } else { 10 }).collect();
    let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    std::fs::write(dir.path().join("img.idx"), encode_images(n, side, side, &pixels)).unwrap();
    std::fs::write(dir.path().join("lbl.idx"), encode_labels(&labels)).unwrap();
    let text = format!(
        "[model]\nfamily = resnet\nblocks = 1\nchannels = 2\n\n[run]\nT = 2\nbatch_size = 4\nepochs = 2\n\n\
         [dataset]\nsource = idx\nnum_classes = 2\nimages = \"{0}/img.idx\"\nlabels = \"{0}/lbl.idx\"\n",
        dir.path().display()
    );
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("train");
    let (code, stdout) = invoke(&["train", "--config", &cfg, "--out-dir", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK, "{stdout}");
    let metrics = std::fs::read_to_string(out.join("train_metrics.jsonl")).unwrap();
    let epochs: Vec<Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(epochs.len(), 2);
    assert!(epochs.iter().all(|e| e["loss"].as_f64().unwrap().is_finite()));
    let summary = read_json(&out.join("train_summary.json"));
    assert_eq!(summary["epochs"].as_array().unwrap().len(), 2);
    assert!(out.join("params.json").exists() && out.join("config.txt").exists());

    let bad = write_config(dir.path(), &text.replace("lbl.idx", "img.idx"));
    assert_eq!(invoke(&["train", "--config", &bad]).0, EXIT_USAGE);
}

#[test]
fn engines_train_identically_from_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let mut params = Vec::new();
    for engine in ["oracle", "reversible"] {
        let out = dir.path().join(engine);
        let (code, text) = invoke(&["train", "--config", &cfg, "--engine", engine, "--epochs", "2", "--out-dir", out.to_str().unwrap()]);
        assert_eq!(code, EXIT_OK, "{text}");
        params.push(read_json(&out.join("params.json")));
    }
    assert_eq!(params[0], params[1]);
}

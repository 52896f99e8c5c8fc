//! Runs the `stormlab` binary against small generated datasets.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use stormlab::assessment::{vlm_vis, Assessor};
use stormlab::backends::DEFAULT_RATING_TEMPLATE;
use stormlab::image::{read_png, write_png16};
use stormlab::toy::desk_experts;
use stormlab::{Image, ImageSample, Source};
use tempfile::TempDir;

const SMALL_CONFIG: &str = r#"
w1 = 0.5
w2 = 0.2
w3 = 0.05
w4 = 0.2
ema_decay = 0.9
batch_labeled = 2
batch_unlabeled = 2
iterations_per_round = 3
rounds = 2
assessment_interval = 2
seed = 0
learning_rate = 0.001
checkpoint_interval = 2
prompt_epochs = 5
"#;

fn stormlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stormlab"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = stormlab(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A tiny toy dataset plus a short training config.
fn dataset() -> (TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    ok(&["toy", "--out", p(&ds), "--size", "16", "--labeled", "4", "--unlabeled", "4", "--heldout", "2", "--seed", "3"]);
    fs::write(tmp.path().join("small.toml"), SMALL_CONFIG).unwrap();
    (tmp, ds)
}

/// Every file below `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    if dir.is_dir() {
        walk(dir, dir, &mut out);
    } else {
        out.insert(PathBuf::new(), fs::read(dir).unwrap());
    }
    out
}

fn json_lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn scene(seed: usize) -> Image {
    Image::from_fn(8, 8, |y, x, c| 0.1 + 0.8 * (((y * 3 + x * 5 + c * 7 + seed) % 11) as f64 / 10.0))
        .unwrap()
        .quantized16()
}

#[test]
fn assess_empty_dir_gives_empty_table() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("imgs");
    fs::create_dir(&dir).unwrap();
    let out = tmp.path().join("t.jsonl");
    ok(&["assess", p(&dir), "--experts", "dark-channel", "--out", p(&out)]);
    assert_eq!(fs::read_to_string(&out).unwrap(), "");
}

#[test]
fn assess_matches_direct_ensemble() {
    let tmp = tempfile::tempdir().unwrap();
    let (imgs, refs) = (tmp.path().join("imgs"), tmp.path().join("refs"));
    fs::create_dir(&imgs).unwrap();
    fs::create_dir(&refs).unwrap();
    let mut gt = BTreeMap::new();
    let mut samples = Vec::new();
    for (i, id) in ["a", "b", "c"].into_iter().enumerate() {
        let clean = scene(i);
        let degraded = Image::from_clamped(8, 8, clean.as_slice().iter().map(|v| v * 0.6 + 0.3 * i as f64 / 2.0).collect())
            .unwrap()
            .quantized16();
        write_png16(&refs.join(format!("{id}.png")), &clean).unwrap();
        write_png16(&imgs.join(format!("{id}.png")), &degraded).unwrap();
        gt.insert(id.to_string(), clean);
        samples.push(ImageSample::new(id, degraded, None, Source::Real).unwrap());
    }
    let out = tmp.path().join("t.jsonl");
    ok(&["assess", p(&imgs), "--reference", p(&refs), "--out", p(&out)]);
    let direct = Assessor::new(DEFAULT_RATING_TEMPLATE)
        .unwrap()
        .ensemble(&samples, &desk_experts(&gt))
        .unwrap();
    assert_eq!(fs::read_to_string(&out).unwrap(), direct.to_jsonl());
}

#[test]
fn unreadable_image_is_listed_and_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("imgs");
    fs::create_dir(&dir).unwrap();
    write_png16(&dir.join("fine.png"), &scene(0)).unwrap();
    fs::write(dir.join("broken.png"), b"not a png").unwrap();
    let out = tmp.path().join("t.jsonl");
    let res = stormlab(&["assess", p(&dir), "--experts", "dark-channel", "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(2));
    let lines = json_lines(&out);
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["image_id"], "fine");
    assert_eq!(lines[1]["error"]["image_id"], "broken");
}

#[test]
fn repeated_invocations_are_byte_identical() {
    let (tmp, ds) = dataset();
    let t = tmp.path();
    let run = |tag: &str| -> Vec<BTreeMap<PathBuf, Vec<u8>>> {
        let o = |name: &str| t.join(format!("{name}-{tag}"));
        let reference = ds.join("reference");
        ok(&["assess", p(&ds.join("unlabeled")), "--reference", p(&reference), "--out", p(&o("assess"))]);
        ok(&[
            "init-db",
            p(&ds.join("unlabeled")),
            "--candidates",
            p(&ds.join("candidates/identity")),
            "--candidates",
            p(&ds.join("candidates/prior")),
            "--reference",
            p(&reference),
            "--db",
            p(&o("db")),
        ]);
        ok(&["describe", p(&ds.join("unlabeled")), "--scenes", p(&ds.join("scenes.tsv")), "--out", p(&o("pairs"))]);
        ok(&["train", "--config", p(&t.join("small.toml")), "--data", p(&ds), "--out", p(&o("run"))]);
        let model = o("run").join("model.bin");
        ok(&["eval", "--model", p(&model), p(&ds.join("test")), "--reference", p(&reference), "--out", p(&o("eval"))]);
        ["assess", "db", "pairs", "run", "eval"].iter().map(|n| snapshot(&o(n))).collect()
    };
    let first = run("1");
    let second = run("2");
    assert!(first.iter().all(|s| !s.is_empty()));
    assert_eq!(first, second);

    let again = t.join("ds-again");
    ok(&["toy", "--out", p(&again), "--size", "16", "--labeled", "4", "--unlabeled", "4", "--heldout", "2", "--seed", "3"]);
    assert_eq!(snapshot(&again), snapshot(&ds));
}

#[test]
fn single_candidate_db_mirrors_the_candidate() {
    let (tmp, ds) = dataset();
    let db = tmp.path().join("db");
    ok(&[
        "init-db",
        p(&ds.join("unlabeled")),
        "--candidates",
        p(&ds.join("candidates/smooth")),
        "--reference",
        p(&ds.join("reference")),
        "--db",
        p(&db),
    ]);
    let labels: Vec<_> = fs::read_dir(db.join("labels")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(labels.len(), 4);
    for label in labels {
        let cand = ds.join("candidates/smooth").join(label.file_name().unwrap());
        assert_eq!(read_png(&label).unwrap(), read_png(&cand).unwrap());
    }
}

#[test]
fn missing_candidate_exits_2_naming_the_image() {
    let (tmp, ds) = dataset();
    fs::remove_file(ds.join("candidates/prior/real001.png")).unwrap();
    let res = stormlab(&[
        "init-db",
        p(&ds.join("unlabeled")),
        "--candidates",
        p(&ds.join("candidates/identity")),
        "--candidates",
        p(&ds.join("candidates/prior")),
        "--reference",
        p(&ds.join("reference")),
        "--db",
        p(&tmp.path().join("db")),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("real001"));
    assert!(!tmp.path().join("db").exists());
}

#[test]
fn dry_run_trains_nothing() {
    let (tmp, ds) = dataset();
    let out = tmp.path().join("run");
    let res = ok(&["train", "--config", p(&tmp.path().join("small.toml")), "--data", p(&ds), "--out", p(&out), "--dry-run"]);
    assert!(String::from_utf8_lossy(&res.stdout).starts_with("ok"));
    assert!(!out.join("model.bin").exists());
    assert!(!out.join("checkpoints").exists());
}

#[test]
fn bad_config_exits_1() {
    let (tmp, ds) = dataset();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, SMALL_CONFIG.replace("batch_labeled = 2", "batch_labeled = 0")).unwrap();
    let res = stormlab(&["train", "--config", p(&bad), "--data", p(&ds), "--out", p(&tmp.path().join("run"))]);
    assert_eq!(res.status.code(), Some(1));
    let res = stormlab(&["train", "--config", p(&tmp.path().join("nope.toml")), "--data", p(&ds), "--out", p(&tmp.path().join("run"))]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn identity_eval_equals_raw_input_scores() {
    let (tmp, ds) = dataset();
    let out = tmp.path().join("eval.jsonl");
    let reference = ds.join("reference");
    ok(&["eval", "--model", "identity", p(&ds.join("test")), "--reference", p(&reference), "--out", p(&out)]);

    let mut gt = BTreeMap::new();
    let mut samples = Vec::new();
    for cond in ["haze", "rain", "snow"] {
        for entry in fs::read_dir(ds.join("test").join(cond)).unwrap() {
            let path = entry.unwrap().path();
            let id = path.file_stem().unwrap().to_str().unwrap().to_string();
            gt.insert(id.clone(), read_png(&reference.join(format!("{id}.png"))).unwrap());
            samples.push(ImageSample::new(id, read_png(&path).unwrap(), None, Source::Real).unwrap());
        }
    }
    let table = Assessor::new(DEFAULT_RATING_TEMPLATE)
        .unwrap()
        .ensemble(&samples, &desk_experts(&gt))
        .unwrap();
    let vis = vlm_vis(&table).unwrap();
    let rows: Vec<Value> = json_lines(&out).into_iter().filter(|l| l["kind"] == "image").collect();
    assert_eq!(rows.len(), samples.len());
    for row in rows {
        let key = row["image_id"].as_str().unwrap();
        let id = key.split_once('/').unwrap().1;
        assert_eq!(row["vlm_vis"].as_f64().unwrap(), vis[id]);
        for (expert, score) in row["scores"].as_object().unwrap() {
            assert_eq!(score.as_f64().unwrap(), table.get(id, expert).unwrap());
        }
    }
}

#[test]
fn eval_aggregates_recompute_from_rows() {
    let (tmp, ds) = dataset();
    let out = tmp.path().join("eval.jsonl");
    ok(&["eval", "--model", "identity", p(&ds.join("test")), "--reference", p(&ds.join("reference")), "--out", p(&out)]);
    let lines = json_lines(&out);
    assert_eq!(lines[0]["kind"], "meta");
    let rows: Vec<&Value> = lines.iter().filter(|l| l["kind"] == "image").collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let conds: Vec<&Value> = lines.iter().filter(|l| l["kind"] == "condition").collect();
    assert_eq!(conds.len(), 3);
    for c in conds {
        let name = c["condition"].as_str().unwrap();
        let mine: Vec<&&Value> = rows.iter().filter(|r| r["condition"] == name).collect();
        assert_eq!(c["count"].as_u64().unwrap() as usize, mine.len());
        let vis: Vec<f64> = mine.iter().map(|r| r["vlm_vis"].as_f64().unwrap()).collect();
        assert!((c["vlm_vis"].as_f64().unwrap() - mean(&vis)).abs() <= 1e-9);
        for (expert, m) in c["mean_scores"].as_object().unwrap() {
            let s: Vec<f64> = mine.iter().map(|r| r["scores"][expert].as_f64().unwrap()).collect();
            assert!((m.as_f64().unwrap() - mean(&s)).abs() <= 1e-9);
        }
    }
    let overall = lines.iter().find(|l| l["kind"] == "overall").unwrap();
    let all: Vec<f64> = rows.iter().map(|r| r["vlm_vis"].as_f64().unwrap()).collect();
    assert_eq!(overall["count"].as_u64().unwrap() as usize, all.len());
    assert!((overall["vlm_vis"].as_f64().unwrap() - mean(&all)).abs() <= 1e-9);
}

#[test]
fn describe_validation_rate_depends_on_rewriter() {
    let (tmp, ds) = dataset();
    let args = |rewriter: &'static str, out: &Path| {
        let res = ok(&[
            "describe",
            p(&ds.join("unlabeled")),
            "--scenes",
            p(&ds.join("scenes.tsv")),
            "--rewriter",
            rewriter,
            "--out",
            p(out),
        ]);
        String::from_utf8_lossy(&res.stdout).trim().to_string()
    };
    assert_eq!(args("lexicon", &tmp.path().join("a.jsonl")), "validated 4/4 (100.0%)");
    assert_eq!(args("echo", &tmp.path().join("b.jsonl")), "validated 0/4 (0.0%)");
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(stormlab(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(stormlab(&["--help"]).status.code(), Some(0));
}

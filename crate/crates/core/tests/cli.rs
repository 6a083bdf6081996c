use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use pivot_distill::cli::{read_metrics, MetricsRecord};
use pivot_distill::corpus::{read_lines, read_manifest};
use pivot_distill::evaluation::{corpus_bleu, BleuReport, MAX_ORDER};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pivot-distill"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small corpus plus a teacher, a source-pivot model and an interrupted
/// then resumed student, shared by the tests below.
struct Lab {
    dir: TempDir,
}

impl Lab {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

const STUDENT_FLAGS: &[&str] = &[
    "--direction",
    "x-y",
    "--method",
    "word-sampling",
    "--epochs",
    "2",
    "--batch-size",
    "16",
    "--eval-interval",
    "10",
    "--emb",
    "8",
    "--hidden",
    "8",
    "--lr",
    "0.01",
    "--run",
    "student",
    "-q",
];

fn lab() -> &'static Lab {
    static LAB: OnceLock<Lab> = OnceLock::new();
    LAB.get_or_init(|| {
        let lab = Lab {
            dir: tempfile::tempdir().unwrap(),
        };
        let gen = lab.path("gen.json");
        fs::write(&gen, r#"{"train_xz": 160, "train_zy": 240, "dev": 24, "test": 24}"#).unwrap();
        ok(&["gen-corpus", "--out", s(&lab.path("corpus")), "--config", s(&gen)]);
        let common = [
            "--epochs",
            "3",
            "--batch-size",
            "16",
            "--eval-interval",
            "15",
            "--emb",
            "8",
            "--hidden",
            "8",
            "--lr",
            "0.01",
            "-q",
        ];
        let corpus = lab.path("corpus");
        let mut args = vec![
            "train",
            "--corpus",
            s(&corpus),
            "--out",
            s(&lab.path("teacher")).to_owned().leak(),
            "--direction",
            "z-y",
        ];
        args.extend(common);
        ok(&args);
        let tv = lab.path("teacher").join("vocab.src");
        let mut args = vec![
            "train",
            "--corpus",
            s(&corpus),
            "--out",
            s(&lab.path("xz")).to_owned().leak(),
            "--direction",
            "x-z",
            "--tgt-vocab",
            s(&tv).to_owned().leak(),
        ];
        args.extend(common);
        ok(&args);

        let teacher = lab.path("teacher");
        let student = lab.path("student");
        let mut args = vec![
            "train",
            "--corpus",
            s(&corpus),
            "--teacher",
            s(&teacher),
            "--out",
            s(&student),
        ];
        args.extend(STUDENT_FLAGS);
        args.extend(["--max-updates", "7"]);
        let out = ok(&args);
        assert!(out.trim_end().ends_with("model.pdst"), "{out}");
        ok(&["train", "--out", s(&student), "--resume", "-q"]);
        lab
    })
}

fn without_time(records: &[MetricsRecord]) -> Vec<(String, u64, String, u64, String)> {
    records
        .iter()
        .map(|r| {
            (
                r.run.clone(),
                r.update,
                r.metric.clone(),
                r.value.to_bits(),
                r.method.clone(),
            )
        })
        .collect()
}

fn same_checkpoints(a: &Path, b: &Path) {
    let names = |d: &Path| {
        let mut v: Vec<String> = fs::read_dir(d.join("checkpoints"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        v.sort();
        v
    };
    assert_eq!(names(a), names(b));
    for n in names(a) {
        assert_eq!(
            fs::read(a.join("checkpoints").join(&n)).unwrap(),
            fs::read(b.join("checkpoints").join(&n)).unwrap(),
            "{n}"
        );
    }
    assert_eq!(
        fs::read(a.join("model.pdst")).unwrap(),
        fs::read(b.join("model.pdst")).unwrap()
    );
}

#[test]
fn gen_corpus_is_reproducible_and_creates_directories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("g.json");
    fs::write(
        &cfg,
        r#"{"train_xz": 30, "train_zy": 30, "dev": 5, "test": 5, "seed": 9}"#,
    )
    .unwrap();
    let a = dir.path().join("nested/a");
    let b = dir.path().join("b");
    ok(&["gen-corpus", "--out", s(&a), "--config", s(&cfg)]);
    ok(&["gen-corpus", "--out", s(&b), "--config", s(&cfg)]);
    assert_eq!(read_manifest(&a).unwrap(), read_manifest(&b).unwrap());
    assert_eq!(read_manifest(&a).unwrap().generator.seed, 9);
}

#[test]
fn capacity_error_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("g.json");
    fs::write(
        &cfg,
        r#"{"latent_vocab": 5, "surface_vocab": 5, "min_len": 1, "max_len": 1}"#,
    )
    .unwrap();
    let out = run(&["gen-corpus", "--out", s(&dir.path().join("c")), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("capacity"));
}

#[test]
fn invalid_method_is_a_usage_error() {
    let out = run(&["train", "--method", "word-magic"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for m in [
        "mle",
        "sent-greedy",
        "sent-beam",
        "sent-kbest",
        "word-greedy",
        "word-beam",
        "word-sampling",
    ] {
        assert!(err.contains(m), "{m} missing from: {err}");
    }
}

#[test]
fn mle_on_missing_source_target_data_is_refused() {
    let lab = lab();
    let out = run(&[
        "train",
        "--corpus",
        s(&lab.path("corpus")),
        "--out",
        s(&lab.path("never")),
        "--direction",
        "x-y",
        "--method",
        "mle",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!lab.path("never").exists());
}

#[test]
fn evaluate_matches_library_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let (h, r) = (dir.path().join("h"), dir.path().join("r"));
    fs::write(&h, "The cat sat on the mat\na b c d\n").unwrap();
    fs::write(&r, "the cat sat on the mat\na b c e\n").unwrap();
    let json = ok(&["evaluate", "--hyp", s(&h), "--ref", s(&r), "--json"]);
    let report: BleuReport = serde_json::from_str(&json).unwrap();
    let lines = |p: &Path| read_lines(p).unwrap();
    assert_eq!(report, corpus_bleu(&lines(&h), &lines(&r), MAX_ORDER, false).unwrap());
    let lower: BleuReport = serde_json::from_str(&ok(&[
        "evaluate",
        "--hyp",
        s(&h),
        "--ref",
        s(&r),
        "--json",
        "--lowercase",
    ]))
    .unwrap();
    assert!(lower.bleu > report.bleu);
    let text = ok(&["evaluate", "--hyp", s(&r), "--ref", s(&r)]);
    assert!(text.starts_with("BLEU = 100.00"), "{text}");
    let same: BleuReport = serde_json::from_str(&ok(&[
        "evaluate",
        "--hyp",
        s(&r),
        "--ref",
        s(&r),
        "--json",
        "--lowercase",
    ]))
    .unwrap();
    assert_eq!(same.bleu, 1.0);
    fs::write(&h, "one line\n").unwrap();
    assert_eq!(
        run(&["evaluate", "--hyp", s(&h), "--ref", s(&r)]).status.code(),
        Some(3)
    );
}

#[test]
fn metrics_stream_follows_schema() {
    let lab = lab();
    let text = fs::read_to_string(lab.path("student").join("metrics.jsonl")).unwrap();
    let mut last = 0;
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let obj = v.as_object().unwrap();
        assert_eq!(obj.len(), 6);
        assert!(obj["run"].is_string() && obj["metric"].is_string() && obj["method"].is_string());
        assert!(obj["update"].is_u64() && obj["t"].is_f64() && obj["value"].is_number());
        let u = obj["update"].as_u64().unwrap();
        assert!(u >= last);
        last = u;
    }
    let records = read_metrics(&lab.path("student").join("metrics.jsonl")).unwrap();
    let names: Vec<&str> = records
        .iter()
        .filter(|r| r.update == 0)
        .map(|r| r.metric.as_str())
        .collect();
    assert_eq!(names, ["valid_loss", "dev_bleu", "j_sent_greedy", "j_word_greedy"]);
    assert!(records
        .iter()
        .all(|r| r.method == "word-sampling" && r.run == "student"));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let lab = lab();
    let whole = lab.path("student_whole");
    let mut args = vec![
        "train",
        "--corpus",
        s(&lab.path("corpus")).to_owned().leak(),
        "--teacher",
    ];
    let teacher = lab.path("teacher");
    args.push(s(&teacher));
    args.extend(["--out", s(&whole)]);
    args.extend(STUDENT_FLAGS);
    ok(&args);
    let a = read_metrics(&lab.path("student").join("metrics.jsonl")).unwrap();
    let b = read_metrics(&whole.join("metrics.jsonl")).unwrap();
    assert_eq!(without_time(&a), without_time(&b));
    same_checkpoints(&lab.path("student"), &whole);
}

#[test]
fn manifest_reproduces_run() {
    let lab = lab();
    let again = lab.path("teacher_again");
    ok(&[
        "train",
        "--config",
        s(&lab.path("teacher").join("manifest.json")),
        "--out",
        s(&again),
        "-q",
    ]);
    let a = read_metrics(&lab.path("teacher").join("metrics.jsonl")).unwrap();
    let b = read_metrics(&again.join("metrics.jsonl")).unwrap();
    assert_eq!(without_time(&a), without_time(&b));
    same_checkpoints(&lab.path("teacher"), &again);
}

#[test]
fn tampered_corpus_is_detected_on_rerun() {
    let lab = lab();
    let copy = lab.path("corpus_copy");
    fs::create_dir_all(&copy).unwrap();
    for e in fs::read_dir(lab.path("corpus")).unwrap() {
        let e = e.unwrap();
        fs::copy(e.path(), copy.join(e.file_name())).unwrap();
    }
    let mut lines = read_lines(&copy.join("train.zy.y")).unwrap();
    lines[0].push_str(" y1");
    fs::write(copy.join("train.zy.y"), lines.join("\n") + "\n").unwrap();
    let out = run(&[
        "train",
        "--config",
        s(&lab.path("teacher").join("manifest.json")),
        "--corpus",
        s(&copy),
        "--out",
        s(&lab.path("tampered")),
        "-q",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest"));
}

#[test]
fn direct_decode_reproduces_logged_dev_bleu() {
    let lab = lab();
    let student = lab.path("student");
    let records = read_metrics(&student.join("metrics.jsonl")).unwrap();
    let logged = records.iter().rfind(|r| r.metric == "dev_bleu").unwrap();
    let ckpt = student.join("checkpoints").join(format!("u{:07}.pdst", logged.update));
    let hyp = lab.path("dev.student.hyp");
    ok(&[
        "decode",
        "--model",
        s(&ckpt),
        "--input",
        s(&lab.path("corpus").join("dev.x")),
        "--output",
        s(&hyp),
        "--k",
        "1",
    ]);
    let report: BleuReport = serde_json::from_str(&ok(&[
        "evaluate",
        "--hyp",
        s(&hyp),
        "--ref",
        s(&lab.path("corpus").join("dev.y")),
        "--json",
    ]))
    .unwrap();
    assert!(
        (report.bleu - logged.value).abs() < 1e-9,
        "{} vs {}",
        report.bleu,
        logged.value
    );
}

#[test]
fn width_one_decode_equals_greedy() {
    use pivot_distill::cli::LoadedModel;
    use pivot_distill::model::{default_max_len, greedy_decode};
    let lab = lab();
    let model = LoadedModel::open(&lab.path("teacher")).unwrap();
    let input = lab.path("corpus").join("dev.z");
    let hyp = lab.path("dev.teacher.k1");
    ok(&[
        "decode",
        "--model",
        s(&lab.path("teacher")),
        "--input",
        s(&input),
        "--output",
        s(&hyp),
        "--k",
        "1",
    ]);
    let expected: Vec<String> = read_lines(&input)
        .unwrap()
        .iter()
        .map(|l| {
            let x = model.src_vocab.encode(l);
            model
                .tgt_vocab
                .decode(&greedy_decode(&model.params, &x, default_max_len(x.len())).unwrap())
        })
        .collect();
    assert_eq!(read_lines(&hyp).unwrap(), expected);
}

#[test]
fn pivot_decode_writes_both_files_and_counts_searches() {
    let lab = lab();
    let input = lab.path("corpus").join("test.x");
    let (out, piv, timing) = (
        lab.path("test.chain"),
        lab.path("test.chain.z"),
        lab.path("timing.json"),
    );
    ok(&[
        "decode",
        "--model",
        s(&lab.path("xz")),
        "--via-pivot",
        s(&lab.path("teacher")),
        "--input",
        s(&input),
        "--output",
        s(&out),
        "--pivot-output",
        s(&piv),
        "--timing",
        s(&timing),
    ]);
    let n = read_lines(&input).unwrap().len();
    assert_eq!(read_lines(&out).unwrap().len(), n);
    assert_eq!(read_lines(&piv).unwrap().len(), n);
    let t: serde_json::Value = serde_json::from_str(&fs::read_to_string(&timing).unwrap()).unwrap();
    assert_eq!(t["mode"], "via-pivot");
    let failures = t["failures"].as_u64().unwrap() as usize;
    assert_eq!(t["beam_searches"].as_u64().unwrap() as usize, 2 * n - failures);
}

#[test]
fn mismatched_pivot_vocabulary_is_a_config_error() {
    let lab = lab();
    let out = run(&[
        "decode",
        "--model",
        s(&lab.path("student")),
        "--via-pivot",
        s(&lab.path("teacher")),
        "--input",
        s(&lab.path("corpus").join("test.x")),
        "--output",
        s(&lab.path("bad.out")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn verify_kl_grid_has_five_rows_and_zero_teacher_column() {
    let lab = lab();
    let json = lab.path("kl.json");
    let text = ok(&[
        "verify-kl",
        "--teacher",
        s(&lab.path("teacher")),
        "--student",
        s(&lab.path("student")),
        "--corpus",
        s(&lab.path("corpus")),
        "--teacher-column",
        "--json",
        s(&json),
        "--limit",
        "12",
    ]);
    let table: pivot_distill::cli::KlTable = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let labels: Vec<&str> = table.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(
        labels,
        [
            "j_sent_greedy",
            "j_sent_beam",
            "j_word_greedy",
            "j_word_beam",
            "j_word_sampling"
        ]
    );
    assert_eq!(table.columns.last().map(String::as_str), Some("teacher"));
    for r in &table.rows {
        assert_eq!(r.values.len(), table.columns.len());
        if r.label.starts_with("j_word") {
            assert!(r.values.last().unwrap().abs() < 1e-12, "{}", r.label);
        }
    }
    assert_eq!(text.lines().count(), 6);
    let one = run(&[
        "verify-kl",
        "--teacher",
        s(&lab.path("teacher")),
        "--checkpoints",
        s(&lab.path("student").join("model.pdst")),
        "--corpus",
        s(&lab.path("corpus")),
    ]);
    assert_eq!(one.status.code(), Some(3));
}

#[test]
fn peakedness_appends_a_record() {
    let lab = lab();
    let metrics = lab.path("peak.jsonl");
    let out = ok(&[
        "peakedness",
        "--model",
        s(&lab.path("teacher")),
        "--input",
        s(&lab.path("corpus").join("dev.z")),
        "--metrics",
        s(&metrics),
    ]);
    let v: f64 = out.trim().parse().unwrap();
    assert!(v > 0.0 && v <= 1.0);
    let r = read_metrics(&metrics).unwrap();
    assert_eq!(r.len(), 1);
    assert_eq!(
        (r[0].metric.as_str(), r[0].run.as_str(), r[0].method.as_str()),
        ("peakedness", "teacher", "mle")
    );
}

#[test]
fn teacher_is_not_modified_by_student_training() {
    let lab = lab();
    let before = fs::read(lab.path("teacher").join("model.pdst")).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(lab.path("student").join("manifest.json")).unwrap()).unwrap();
    let recorded = manifest["provenance"]["teacher_model"].as_str().unwrap();
    let actual = pivot_distill::corpus::sha256_file(&lab.path("teacher").join("model.pdst")).unwrap();
    assert_eq!(recorded, actual);
    assert_eq!(before, fs::read(lab.path("teacher").join("model.pdst")).unwrap());
}

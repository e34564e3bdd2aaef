use serde_json::Value;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::{Arc, Mutex};

fn asset(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../assets")
        .join(rel)
        .display()
        .to_string()
}

struct Setup {
    dir: tempfile::TempDir,
    flip_rate: f64,
    corpus: String,
    backend: String,
    http_url: Option<String>,
    extra: String,
}

impl Setup {
    fn new() -> Self {
        Setup {
            dir: tempfile::tempdir().unwrap(),
            flip_rate: 0.0,
            corpus: "pretrain_pos = 20\npretrain_neg = 20\nsft_total = 0\nsft_pos_rate = 0.0\neval_total = 60\neval_pos_rate = 0.5\nseed = 11\n".into(),
            backend: "mock".into(),
            http_url: None,
            extra: String::new(),
        }
    }

    fn config(&self) -> PathBuf {
        let text = format!(
            r#"
[paths]
guidelines = "{guidelines}"
out = "out"

[annotator]
backend = "{backend}"
mock = {{ flip_rate = {flip}, seed = 5 }}
{http}

[annotator.client]
max_tokens_ceiling = 2048
max_parallelism = 8

[annotator.client.retry]
max_attempts = 2
base_delay_ms = 1
factor = 1
jitter = false

[corpus]
{corpus}

[generation]
parallelism = 4

[pack]
strategy = "two_stage"
seed = 3

[eval]
model = "mock"
{extra}
"#,
            guidelines = asset("guidelines/desk.guide"),
            backend = self.backend,
            http = self
                .http_url
                .as_ref()
                .map(|u| format!("http = {{ base_url = \"{u}\", timeout_ms = 5000 }}"))
                .unwrap_or_default(),
            flip = self.flip_rate,
            corpus = self.corpus,
            extra = self.extra,
        );
        let path = self.dir.path().join("pipeline.toml");
        std::fs::write(&path, text).unwrap();
        path
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn run(&self, args: &[&str]) -> Output {
        let config = self.config();
        Command::new(env!("CARGO_BIN_EXE_modfactory"))
            .arg("--config")
            .arg(&config)
            .args(args)
            .env("MODFACTORY_ANNOTATOR_TOKEN", "secret-token")
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} exited {:?}\nstdout: {}\nstderr: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn json(&self, rel: &str) -> Value {
        serde_json::from_str(&std::fs::read_to_string(self.out().join(rel)).unwrap()).unwrap()
    }

    fn jsonl(&self, rel: &str) -> Vec<Value> {
        std::fs::read_to_string(self.out().join(rel))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    fn bytes(&self, rel: &str) -> Vec<u8> {
        std::fs::read(self.out().join(rel)).unwrap()
    }
}

const STAGES: [&str; 6] = ["synth", "generate", "filter", "pack", "eval", "report"];

#[test]
fn noise_free_pipeline_reaches_the_ceiling() {
    let s = Setup::new();
    for cmd in STAGES {
        s.ok(&[cmd]);
    }
    let metrics = s.json("metrics.json");
    for issue in ["ssc", "uc", "fe"] {
        let m = &metrics["per_issue"][issue];
        assert_eq!(m["accuracy"], 1.0, "{issue}");
        assert_eq!(m["f1"], 1.0, "{issue}");
        assert_eq!(m["auc"], 1.0, "{issue}");
    }
    assert_eq!(metrics["overall_auc"], 1.0);
    assert_eq!(s.json("filter_report.json")["per_issue"]["fe"]["cot"]["discarded"], 0);
    let report = std::fs::read_to_string(s.out().join("report.md")).unwrap();
    assert!(report.contains("| mock | **100.00** |"), "{report}");
}

#[test]
fn two_stage_plan_starts_with_a_caption_stage() {
    let s = Setup::new();
    for cmd in ["synth", "generate", "filter"] {
        s.ok(&[cmd]);
    }
    s.ok(&["pack", "--strategy", "two_stage"]);
    let plan = s.json("plans/two_stage.json");
    let stages = plan["stages"].as_array().unwrap();
    assert_eq!(stages.len(), 2);
    assert_eq!(stages[0]["stage_id"], "caption");
    assert_eq!(stages[0]["task_filter"], serde_json::json!(["caption"]));
    assert_eq!(
        stages[0]["trainable_components"],
        serde_json::json!(["vision_encoder", "projector"])
    );
    assert_eq!(stages[1]["stage_id"], "mix_all");

    let caption = s.json("manifests/two_stage.caption.json");
    let tasks: Vec<&String> = caption["counts"]
        .as_object()
        .unwrap()
        .values()
        .flat_map(|t| t.as_object().unwrap().keys())
        .collect();
    assert!(tasks.iter().all(|t| *t == "caption"), "{tasks:?}");
    let summary = s.json("summaries/two_stage.json");
    assert_eq!(summary[1]["per_task"].as_object().unwrap().len(), 4);
}

#[test]
fn reruns_skip_and_forced_reruns_are_byte_identical() {
    let s = Setup::new();
    for cmd in STAGES {
        s.ok(&[cmd]);
    }
    let files = [
        "corpus.jsonl",
        "samples.jsonl",
        "filtered.jsonl",
        "manifests/two_stage.mix_all.json",
        "metrics.json",
        "report.md",
    ];
    let before: Vec<Vec<u8>> = files.iter().map(|f| s.bytes(f)).collect();
    assert!(s.ok(&["generate"]).contains("up to date"));
    for cmd in STAGES {
        s.ok(&["--force", "--parallelism", "1", cmd]);
    }
    for (f, b) in files.iter().zip(&before) {
        assert!(s.bytes(f) == *b, "{f} changed on rerun");
    }
}

#[test]
fn editing_an_output_invalidates_its_stamp() {
    let s = Setup::new();
    s.ok(&["synth"]);
    std::fs::write(s.out().join("corpus.jsonl"), "").unwrap();
    assert!(s.ok(&["synth"]).starts_with("synth: "));
    assert!(!s.bytes("corpus.jsonl").is_empty());
}

#[test]
fn seed_flag_changes_the_corpus() {
    let s = Setup::new();
    s.ok(&["synth"]);
    let first = s.bytes("corpus.jsonl");
    s.ok(&["--seed", "99", "synth"]);
    assert!(s.bytes("corpus.jsonl") != first);
}

#[test]
fn filter_discard_rate_matches_the_closed_form() {
    let mut s = Setup::new();
    s.flip_rate = 0.2;
    // Only fe gets videos: 2000 negatives, 3 sub-questions each.
    s.corpus = concat!(
        "pretrain_pos = 0\npretrain_neg = 0\nsft_total = 0\nsft_pos_rate = 0.0\neval_total = 0\neval_pos_rate = 0.0\nseed = 4\n",
        "overrides = { fe = { pretrain_pos = 0, pretrain_neg = 2000, sft_total = 0, sft_pos_rate = 0.0, eval_total = 0, eval_pos_rate = 0.0 } }"
    )
    .into();
    for cmd in ["synth", "generate", "filter"] {
        s.ok(&[cmd]);
    }
    let cot = &s.json("filter_report.json")["per_issue"]["fe"]["cot"];
    let discarded = cot["discarded"].as_f64().unwrap();
    let total = discarded + cot["kept"].as_f64().unwrap();
    assert_eq!(total, 2000.0);
    let p = 1.0 - 0.8f64.powi(3);
    let sigma = (p * (1.0 - p) / total).sqrt();
    let rate = discarded / total;
    assert!((rate - p).abs() < 3.0 * sigma, "discard rate {rate} vs {p}");
}

#[test]
fn sft_probabilities_are_scored_against_human_labels() {
    let mut s = Setup::new();
    s.ok(&["synth"]);
    let preds: String = s
        .jsonl("corpus.jsonl")
        .iter()
        .filter(|v| v["split"] == "eval")
        .flat_map(|v| {
            let id = v["video_id"].as_str().unwrap().to_string();
            v["human_labels"]
                .as_object()
                .unwrap()
                .iter()
                .map(move |(issue, label)| {
                    let p = if label == "positive" { 0.9 } else { 0.2 };
                    format!("{{\"video_id\":\"{id}\",\"issue_id\":\"{issue}\",\"probability\":{p}}}\n")
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let path = s.dir.path().join("preds.jsonl");
    std::fs::write(&path, preds).unwrap();
    s.extra = format!("sft_predictions = \"{}\"", path.display());
    s.ok(&["eval", "--mode", "sft"]);
    assert_eq!(s.json("metrics.json")["mode"], "sft");
    assert_eq!(s.json("metrics.json")["overall_auc"], 1.0);
    let report = s.ok(&["report"]);
    assert!(report.contains("### SFT evaluation (%)"), "{report}");
}

#[test]
fn config_errors_exit_2_without_writing() {
    let mut s = Setup::new();
    s.extra = "threshold = 1.5".into();
    let out = s.run(&["synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("eval.threshold"));
    assert!(!s.out().exists());

    let s = Setup::new();
    assert_eq!(s.run(&["--parallelism", "0", "synth"]).status.code(), Some(2));
    let missing = s.dir.path().join("nope.toml");
    let out = Command::new(env!("CARGO_BIN_EXE_modfactory"))
        .args(["--config", missing.to_str().unwrap(), "validate"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!s.out().exists());

    let mut s = Setup::new();
    s.extra = "sft_predictions = \"/does/not/exist.jsonl\"".into();
    assert_eq!(s.run(&["validate"]).status.code(), Some(2));

    let mut s = Setup::new();
    s.backend = "http".into();
    assert_eq!(s.run(&["validate"]).status.code(), Some(2));
}

#[test]
fn missing_upstream_outputs_are_data_errors() {
    let s = Setup::new();
    let out = s.run(&["filter"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run `generate` first"));
    s.ok(&["synth"]);
    assert_eq!(s.run(&["report"]).status.code(), Some(4));
}

#[test]
fn validate_prints_decomposition_diagnostics() {
    let s = Setup::new();
    let guide = std::fs::read_to_string(asset("guidelines/desk.guide")).unwrap();
    let guide = guide.replacen("  maps_to: [exposed]\n", "  maps_to: []\n", 1);
    let path = s.dir.path().join("g.guide");
    std::fs::write(&path, guide).unwrap();
    let config = std::fs::read_to_string(s.config())
        .unwrap()
        .replace(&asset("guidelines/desk.guide"), path.to_str().unwrap());
    let cfg_path = s.dir.path().join("edited.toml");
    std::fs::write(&cfg_path, config).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_modfactory"))
        .args(["--config", cfg_path.to_str().unwrap(), "validate"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("warning[ssc]: uncovered clause #1"), "{stdout}");
    assert!(
        stdout.contains("sub-question `exposed` is referenced by no clause"),
        "{stdout}"
    );
}

/// A minimal HTTP/1.1 annotator that answers every request with "no violation".
struct StubServer {
    url: String,
    auth_headers: Arc<Mutex<Vec<String>>>,
}

/// Request line, lowercased headers, body.
type RawRequest = (String, Vec<(String, String)>, String);

fn read_request(stream: &mut std::net::TcpStream) -> Option<RawRequest> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line).ok()?;
    let mut headers = Vec::new();
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).ok()?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        let (k, v) = line.split_once(':')?;
        headers.push((k.trim().to_ascii_lowercase(), v.trim().to_string()));
    }
    let len: usize = headers
        .iter()
        .find(|(k, _)| k == "content-length")
        .map_or(0, |(_, v)| v.parse().unwrap_or(0));
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some((request_line, headers, String::from_utf8_lossy(&body).into_owned()))
}

impl StubServer {
    fn start(status: u16) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let auth_headers = Arc::new(Mutex::new(Vec::new()));
        let seen = auth_headers.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let seen = seen.clone();
                std::thread::spawn(move || {
                    let Some((line, headers, body)) = read_request(&mut stream) else {
                        return;
                    };
                    assert!(line.starts_with("POST /v1/annotate "), "{line}");
                    if let Some((_, v)) = headers.iter().find(|(k, _)| k == "authorization") {
                        seen.lock().unwrap().push(v.clone());
                    }
                    let request: Value = serde_json::from_str(&body).unwrap();
                    let prompt = request["prompt"].as_str().unwrap();
                    let text = if prompt.contains("Select all that apply") {
                        "D. None of the above. Nothing relevant is visible."
                    } else {
                        "No. Nothing relevant is visible."
                    };
                    let payload = serde_json::json!({
                        "text": text,
                        "label_logits": { "yes": -2.0, "no": 2.0 },
                        "latency_ms": 1
                    })
                    .to_string();
                    let reason = if status == 200 { "OK" } else { "Internal Server Error" };
                    let _ = write!(
                        stream,
                        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                        payload.len()
                    );
                });
            }
        });
        StubServer { url, auth_headers }
    }
}

fn http_setup(server: &StubServer) -> Setup {
    let mut s = Setup::new();
    s.corpus = "pretrain_pos = 2\npretrain_neg = 2\nsft_total = 0\nsft_pos_rate = 0.0\neval_total = 4\neval_pos_rate = 0.5\nseed = 11\n".into();
    s.backend = "http".into();
    s.http_url = Some(server.url.clone());
    s
}

#[test]
fn http_backend_generates_and_evaluates() {
    let server = StubServer::start(200);
    let s = http_setup(&server);
    for cmd in ["synth", "generate", "filter", "eval"] {
        let out = s.run(&[cmd]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let samples = s.jsonl("samples.jsonl");
    assert!(!samples.is_empty());
    let backend = samples[0]["provenance"]["backend"].as_str().unwrap();
    assert!(backend.starts_with("http:http://127.0.0.1:"), "{backend}");
    let auth = server.auth_headers.lock().unwrap();
    assert!(!auth.is_empty());
    assert!(auth.iter().all(|h| h == "Bearer secret-token"));
    // Every answer is "no", so positives are missed and the AUC is chance.
    assert_eq!(s.json("metrics.json")["overall_auc"], 0.5);
}

#[test]
fn backend_failures_exit_3_and_are_logged() {
    let server = StubServer::start(500);
    let s = http_setup(&server);
    assert!(s.run(&["synth"]).status.success());
    let out = s.run(&["generate"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let log = s.jsonl("generation_log.jsonl");
    assert_eq!(log[0]["event"], "summary");
    assert!(log[0]["failures"].as_u64().unwrap() > 0);
    assert!(log[1]["error"].as_str().unwrap().contains("HTTP 500"), "{}", log[1]);
    // No stamp was recorded, so a rerun tries again instead of reporting up to date.
    let again = s.run(&["generate"]);
    assert_eq!(again.status.code(), Some(3));
}

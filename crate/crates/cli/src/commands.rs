use crate::config::{BackendKind, Loaded};
use crate::stamp::{Fingerprint, Stamps};
use modfactory_core::annotator::{AnnotatorClient, Backend, HttpBackend, MockAnnotator};
use modfactory_core::corpus::{generate_synthetic_corpus, load_corpus, store_corpus, Split, VideoRecord};
use modfactory_core::datagen::{
    consistency_filter, DatagenError, GenerationFailure, Generator, InstructionSample, TemplateKind,
};
use modfactory_core::eval::{
    build_report, compute_report, group_by_issue, ingest_sft, load_fixture, load_sft_predictions, run_zero_shot,
    Consistency, EvalError, EvalFailure, EvalMode, EvalRecord,
};
use modfactory_core::guideline::validate_decomposition;
use modfactory_core::jsonl::{read_jsonl, write_jsonl};
use modfactory_core::mixture::{
    build_stage_plan, pack_plan, summarize_mixture, write_manifest, SampleStore, Strategy, SummaryOptions,
};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Backend,
    Data,
}

impl Kind {
    pub fn exit_code(self) -> u8 {
        match self {
            Kind::Config => 2,
            Kind::Backend => 3,
            Kind::Data => 4,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

pub type Outcome<T = ()> = Result<T, Failure>;

pub fn fail<T>(kind: Kind, message: impl Display) -> Outcome<T> {
    Err(Failure {
        kind,
        error: anyhow::anyhow!("{message}"),
    })
}

pub trait Tag<T> {
    fn tag(self, kind: Kind, context: impl Display) -> Outcome<T>;

    fn or_data(self, context: impl Display) -> Outcome<T>
    where
        Self: Sized,
    {
        self.tag(Kind::Data, context)
    }

    fn or_config(self, context: impl Display) -> Outcome<T>
    where
        Self: Sized,
    {
        self.tag(Kind::Config, context)
    }
}

impl<T, E> Tag<T> for Result<T, E>
where
    E: Into<anyhow::Error>,
{
    fn tag(self, kind: Kind, context: impl Display) -> Outcome<T> {
        self.map_err(|e| Failure {
            kind,
            error: e.into().context(context.to_string()),
        })
    }
}

fn datagen_kind(e: &DatagenError) -> Kind {
    match e {
        DatagenError::Annotator(_) => Kind::Backend,
        _ => Kind::Data,
    }
}

fn eval_kind(e: &EvalError) -> Kind {
    match e {
        EvalError::Annotator(_) => Kind::Backend,
        _ => Kind::Data,
    }
}

#[derive(Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum GenerationLogLine<'a> {
    Summary {
        backend: String,
        videos: usize,
        samples: usize,
        failures: usize,
    },
    Failure(&'a GenerationFailure),
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    let text = serde_json::to_string_pretty(value).expect("output serializes");
    std::fs::write(path, text + "\n").or_data(format!("writing {}", path.display()))
}

pub struct Pipeline {
    pub loaded: Loaded,
    pub stamps: Stamps,
    pub out: PathBuf,
}

impl Pipeline {
    pub fn new(loaded: Loaded, force: bool) -> Self {
        let out = loaded.config.paths.out.clone();
        Pipeline {
            stamps: Stamps::new(&out, force),
            loaded,
            out,
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn prepare_out(&self, subdirs: &[&str]) -> Outcome {
        for d in std::iter::once("").chain(subdirs.iter().copied()) {
            let dir = self.out.join(d);
            std::fs::create_dir_all(&dir).or_data(format!("creating {}", dir.display()))?;
        }
        Ok(())
    }

    fn corpus_path(&self) -> PathBuf {
        self.loaded
            .config
            .paths
            .corpus
            .clone()
            .unwrap_or_else(|| self.path("corpus.jsonl"))
    }

    fn require(&self, path: &Path, producer: &str) -> Outcome {
        if path.is_file() {
            Ok(())
        } else {
            fail(
                Kind::Data,
                format!("{} is missing; run `{producer}` first", path.display()),
            )
        }
    }

    fn corpus(&self) -> Outcome<Vec<VideoRecord>> {
        let path = self.corpus_path();
        self.require(&path, "synth")?;
        load_corpus(&path).or_data(format!("reading {}", path.display()))
    }

    fn fingerprint(&self, command: &str) -> Fingerprint {
        let templates: Vec<&str> = TemplateKind::ALL
            .iter()
            .map(|k| self.loaded.templates.get(*k).template_text.as_str())
            .collect();
        Fingerprint::new(command)
            .value("guidelines", &self.loaded.guidelines_text)
            .value("templates", &templates)
    }

    /// What decides the annotator's answers. Parallelism and retry settings do not.
    fn backend_identity(&self) -> serde_json::Value {
        let a = &self.loaded.config.annotator;
        match a.backend {
            BackendKind::Mock => serde_json::json!({ "mock": a.mock }),
            BackendKind::Http => serde_json::json!({ "http": a.http.as_ref().map(|h| &h.base_url) }),
        }
    }

    fn client(&self, videos: &[VideoRecord]) -> Outcome<AnnotatorClient> {
        let a = &self.loaded.config.annotator;
        let backend: Arc<dyn Backend> = match a.backend {
            BackendKind::Mock => {
                let config = a.mock.expect("validated config has a mock section");
                let guidelines = Arc::new(self.loaded.guidelines.clone());
                Arc::new(MockAnnotator::new(config, guidelines, videos).or_else(|e| fail(Kind::Config, e))?)
            }
            BackendKind::Http => {
                let h = a.http.as_ref().expect("validated config has an http section");
                Arc::new(HttpBackend::from_env(&h.base_url, Duration::from_millis(h.timeout_ms)))
            }
        };
        Ok(AnnotatorClient::new(backend, a.client))
    }

    fn skip(&self, key: &str, fp: &Fingerprint) -> bool {
        let fresh = self.stamps.is_fresh(key, fp);
        if fresh {
            tracing::info!(command = key, "inputs unchanged; skipping");
            println!("{key}: up to date");
        }
        fresh
    }

    fn record(&self, key: &str, fp: &Fingerprint, outputs: &[PathBuf]) -> Outcome {
        self.stamps
            .record(key, fp, outputs)
            .or_data(format!("writing stamp for {key}"))
    }

    pub fn validate(&self) -> Outcome {
        let g = &self.loaded.guidelines;
        let mut warnings = 0;
        for issue in g.iter() {
            let diagnostics = validate_decomposition(issue);
            for d in &diagnostics {
                tracing::warn!(issue = %d.issue_id, kind = ?d.kind, "{}", d.message);
                println!("{d}");
            }
            warnings += diagnostics.len();
            println!(
                "issue {}: {} sub-questions, {} clauses, {} warnings",
                issue.issue_id,
                issue.sub_questions.len(),
                issue.clauses.len(),
                diagnostics.len()
            );
        }
        println!(
            "config ok: guidelines {} ({} issues), backend {:?}, {warnings} warnings",
            g.version,
            g.len(),
            self.loaded.config.annotator.backend
        );
        Ok(())
    }

    pub fn synth(&self) -> Outcome {
        let c = &self.loaded.config;
        if c.paths.corpus.is_some() {
            return fail(
                Kind::Config,
                "paths.corpus is set, so the pipeline reads that file; remove it to synthesize a corpus",
            );
        }
        let fp = self.fingerprint("synth").value("corpus", &c.corpus);
        if self.skip("synth", &fp) {
            return Ok(());
        }
        let videos = generate_synthetic_corpus(&self.loaded.guidelines, &c.corpus).or_config("synthesizing corpus")?;
        self.prepare_out(&[])?;
        let path = self.path("corpus.jsonl");
        store_corpus(&videos, &path, false).or_data(format!("writing {}", path.display()))?;
        self.record("synth", &fp, &[path])?;
        let count = |s: Split| videos.iter().filter(|v| v.split == s).count();
        tracing::info!(
            videos = videos.len(),
            pretrain = count(Split::Pretrain),
            sft = count(Split::Sft),
            eval = count(Split::Eval),
            "corpus written"
        );
        println!(
            "synth: {} videos (pretrain {}, sft {}, eval {})",
            videos.len(),
            count(Split::Pretrain),
            count(Split::Sft),
            count(Split::Eval)
        );
        Ok(())
    }

    pub fn generate(&self) -> Outcome {
        let c = &self.loaded.config;
        let corpus_path = self.corpus_path();
        self.require(&corpus_path, "synth")?;
        let mut settings = c.generation.clone();
        settings.parallelism = 0;
        let fp = self
            .fingerprint("generate")
            .value("generation", &settings)
            .value("backend", &self.backend_identity())
            .file("corpus", &corpus_path)
            .or_data("hashing corpus")?;
        if self.skip("generate", &fp) {
            return Ok(());
        }
        let videos = self.corpus()?;
        let client = self.client(&videos)?;
        let generator = Generator::new(
            &self.loaded.guidelines,
            &self.loaded.templates,
            &client,
            c.generation.clone(),
        );
        let output = generator.generate_pretraining_samples(&videos).map_err(|e| Failure {
            kind: datagen_kind(&e),
            error: anyhow::Error::new(e).context("generating samples"),
        })?;

        self.prepare_out(&[])?;
        let samples_path = self.path("samples.jsonl");
        let log_path = self.path("generation_log.jsonl");
        write_jsonl(&samples_path, &output.samples).or_data("writing samples")?;
        let summary = GenerationLogLine::Summary {
            backend: client.backend_id(),
            videos: videos.iter().filter(|v| v.split == Split::Pretrain).count(),
            samples: output.samples.len(),
            failures: output.failures.len(),
        };
        let lines: Vec<GenerationLogLine> = std::iter::once(summary)
            .chain(output.failures.iter().map(GenerationLogLine::Failure))
            .collect();
        write_jsonl(&log_path, &lines).or_data("writing generation log")?;
        tracing::info!(
            samples = output.samples.len(),
            failures = output.failures.len(),
            "generation finished"
        );
        println!(
            "generate: {} samples, {} failures",
            output.samples.len(),
            output.failures.len()
        );
        if !output.failures.is_empty() {
            self.stamps.clear("generate");
            for f in output.failures.iter().take(5) {
                tracing::error!(video = %f.video_id, issue = %f.issue_id, task = %f.task, "{}", f.error);
            }
            return fail(
                Kind::Backend,
                format!(
                    "{} annotator requests failed; see {}",
                    output.failures.len(),
                    log_path.display()
                ),
            );
        }
        self.record("generate", &fp, &[samples_path, log_path])
    }

    pub fn filter(&self) -> Outcome {
        let samples_path = self.path("samples.jsonl");
        let corpus_path = self.corpus_path();
        self.require(&samples_path, "generate")?;
        self.require(&corpus_path, "synth")?;
        let fp = Fingerprint::new("filter")
            .file("samples", &samples_path)
            .and_then(|f| f.file("corpus", &corpus_path))
            .or_data("hashing inputs")?;
        if self.skip("filter", &fp) {
            return Ok(());
        }
        let videos = self.corpus()?;
        let mut samples: Vec<InstructionSample> =
            read_jsonl(&samples_path).or_data(format!("reading {}", samples_path.display()))?;
        let report = consistency_filter(&mut samples, &videos).or_data("filtering samples")?;
        let store = SampleStore::from_samples(samples).or_data("indexing samples")?;
        let filtered_path = self.path("filtered.jsonl");
        let report_path = self.path("filter_report.json");
        store.store(&filtered_path).or_data("writing filtered samples")?;
        write_json(&report_path, &report)?;
        self.record("filter", &fp, &[filtered_path, report_path])?;
        tracing::info!(
            kept = report.total_kept(),
            discarded = report.total_discarded(),
            "filter finished"
        );
        println!(
            "filter: {} kept, {} discarded",
            report.total_kept(),
            report.total_discarded()
        );
        Ok(())
    }

    pub fn pack(&self, strategy: Option<&str>) -> Outcome {
        let p = &self.loaded.config.pack;
        let strategies: Vec<Strategy> = match strategy {
            None => vec![p.strategy],
            Some("all") => Strategy::ALL.to_vec(),
            Some(s) => vec![s.parse().or_config("--strategy")?],
        };
        let filtered_path = self.path("filtered.jsonl");
        self.require(&filtered_path, "filter")?;
        let mut store = None;
        for strategy in strategies {
            let key = format!("pack.{strategy}");
            let fp = Fingerprint::new("pack")
                .value("strategy", &strategy)
                .value("pack", p)
                .file("filtered", &filtered_path)
                .or_data("hashing samples")?;
            if self.skip(&key, &fp) {
                continue;
            }
            if store.is_none() {
                store =
                    Some(SampleStore::load(&filtered_path).or_data(format!("reading {}", filtered_path.display()))?);
            }
            let store = store.as_ref().expect("store loaded above");
            let plan = build_stage_plan(strategy)
                .with_epochs(p.epochs)
                .or_config("pack.epochs")?;
            let manifests = pack_plan(store, &plan, p.seed).or_data(format!("packing {strategy}"))?;
            let options = SummaryOptions {
                require_nonempty: true,
                compare_to_reference: p.compare_to_reference,
            };
            let summaries = manifests
                .iter()
                .map(|m| summarize_mixture(m, options))
                .collect::<Result<Vec<_>, _>>()
                .or_data(format!("summarizing {strategy}"))?;

            self.prepare_out(&["plans", "manifests", "summaries"])?;
            let mut outputs = vec![self.path(&format!("plans/{strategy}.json"))];
            write_json(&outputs[0], &plan)?;
            for m in &manifests {
                let path = self.path(&format!("manifests/{strategy}.{}.json", m.stage.stage_id));
                write_manifest(m, &path).or_data("writing manifest")?;
                outputs.push(path);
            }
            let summary_path = self.path(&format!("summaries/{strategy}.json"));
            write_json(&summary_path, &summaries)?;
            outputs.push(summary_path);
            self.record(&key, &fp, &outputs)?;
            for s in &summaries {
                tracing::info!(strategy = %strategy, stage = %s.stage_id, samples = s.grand_total, "manifest written");
                println!("pack {strategy}: stage {} with {} samples", s.stage_id, s.grand_total);
            }
        }
        Ok(())
    }

    pub fn eval(&self, mode: Option<EvalMode>) -> Outcome {
        let c = &self.loaded.config;
        let mode = mode.unwrap_or(c.eval.mode);
        let corpus_path = self.corpus_path();
        self.require(&corpus_path, "synth")?;
        let fp = self
            .fingerprint("eval")
            .value("mode", &mode)
            .file("corpus", &corpus_path)
            .or_data("hashing corpus")?;
        let fp = match mode {
            EvalMode::ZeroShot => {
                let mut settings = c.eval.zero_shot.clone();
                settings.parallelism = 0;
                fp.value("zero_shot", &settings)
                    .value("backend", &self.backend_identity())
            }
            EvalMode::Sft => {
                let Some(preds) = &c.eval.sft_predictions else {
                    return fail(Kind::Config, "sft evaluation needs eval.sft_predictions");
                };
                fp.value("threshold", &c.eval.threshold)
                    .file("predictions", preds)
                    .or_data("hashing predictions")?
            }
        };
        if self.skip("eval", &fp) {
            return Ok(());
        }
        let videos = self.corpus()?;
        let (records, failures, consistency) = match mode {
            EvalMode::ZeroShot => {
                let client = self.client(&videos)?;
                let out = run_zero_shot(
                    &videos,
                    &self.loaded.guidelines,
                    &self.loaded.templates,
                    &client,
                    &c.eval.zero_shot,
                )
                .map_err(|e| Failure {
                    kind: eval_kind(&e),
                    error: anyhow::Error::new(e).context("zero-shot evaluation"),
                })?;
                let mut tally: BTreeMap<&str, usize> = BTreeMap::new();
                for v in &out.consistency {
                    let name = match v {
                        Consistency::Consistent => "consistent",
                        Consistency::Inconsistent => "inconsistent",
                        Consistency::Indeterminate => "indeterminate",
                    };
                    *tally.entry(name).or_default() += 1;
                }
                let tally: BTreeMap<String, usize> = tally.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
                (out.records, out.failures, Some(tally))
            }
            EvalMode::Sft => {
                let path = c.eval.sft_predictions.as_ref().expect("checked above");
                let preds = load_sft_predictions(path).or_data(format!("reading {}", path.display()))?;
                let records = ingest_sft(&preds, &videos, c.eval.threshold).or_data("ingesting SFT predictions")?;
                (records, Vec::new(), None)
            }
        };
        if records.is_empty() {
            return fail(Kind::Data, "no evaluation records were produced");
        }
        let report =
            compute_report(&group_by_issue(&records, &self.loaded.guidelines), mode).or_data("computing metrics")?;

        self.prepare_out(&[])?;
        let records_path = self.path("eval_records.jsonl");
        let metrics_path = self.path("metrics.json");
        write_jsonl(&records_path, &records).or_data("writing eval records")?;
        write_json(
            &metrics_path,
            &MetricsFile {
                report: &report,
                consistency,
                failures: &failures,
            },
        )?;
        for (issue, m) in &report.per_issue {
            tracing::info!(issue = %issue, accuracy = m.accuracy, f1 = m.f1, auc = m.auc.unwrap_or(f64::NAN), "issue metrics");
        }
        println!(
            "eval {}: {} records, overall AUC {}",
            match mode {
                EvalMode::ZeroShot => "zero_shot",
                EvalMode::Sft => "sft",
            },
            records.len(),
            report.overall_auc.map_or("-".into(), |a| format!("{a:.4}"))
        );
        if !failures.is_empty() {
            self.stamps.clear("eval");
            return fail(
                Kind::Backend,
                format!(
                    "{} evaluation requests failed; see {}",
                    failures.len(),
                    metrics_path.display()
                ),
            );
        }
        self.record("eval", &fp, &[records_path, metrics_path])
    }

    pub fn report(&self) -> Outcome {
        let c = &self.loaded.config;
        let records_path = self.path("eval_records.jsonl");
        self.require(&records_path, "eval")?;
        let mut fp = Fingerprint::new("report")
            .value("model", &c.eval.model)
            .value("issues", &self.loaded.guidelines.issues.keys().collect::<Vec<_>>())
            .file("records", &records_path)
            .or_data("hashing records")?;
        if let Some(r) = &c.eval.reference_fixture {
            fp = fp.file("reference", r).or_data("hashing reference fixture")?;
        }
        if self.skip("report", &fp) {
            return Ok(());
        }
        let records: Vec<EvalRecord> =
            read_jsonl(&records_path).or_data(format!("reading {}", records_path.display()))?;
        let Some(mode) = records.first().map(|r| r.mode) else {
            return fail(Kind::Data, format!("{} has no records", records_path.display()));
        };
        if records.iter().any(|r| r.mode != mode) {
            return fail(Kind::Data, format!("{} mixes evaluation modes", records_path.display()));
        }
        let reference = match &c.eval.reference_fixture {
            Some(p) => Some(load_fixture(p).or_data("reading reference fixture")?),
            None => None,
        };
        let (_, text) = build_report(
            &group_by_issue(&records, &self.loaded.guidelines),
            mode,
            &c.eval.model,
            reference.as_ref(),
        )
        .or_data("building report")?;
        self.prepare_out(&[])?;
        let path = self.path("report.md");
        std::fs::write(&path, &text).or_data(format!("writing {}", path.display()))?;
        self.record("report", &fp, std::slice::from_ref(&path))?;
        print!("{text}");
        Ok(())
    }
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    #[serde(flatten)]
    report: &'a modfactory_core::eval::MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    consistency: Option<BTreeMap<String, usize>>,
    #[serde(skip_serializing_if = "<[EvalFailure]>::is_empty")]
    failures: &'a [EvalFailure],
}

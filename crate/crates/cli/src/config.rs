use clap::ValueEnum;
use modfactory_core::annotator::{ClientConfig, MockAnnotatorConfig};
use modfactory_core::corpus::CorpusSpec;
use modfactory_core::datagen::{GenerationSettings, TemplateSet};
use modfactory_core::eval::{EvalMode, ZeroShotSettings, DEFAULT_THRESHOLD};
use modfactory_core::guideline::{parse_guideline_set, GuidelineSet};
use modfactory_core::mixture::Strategy;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub guidelines: PathBuf,
    /// Directory with one `<kind>.txt` per prompt template. Built-in templates when absent.
    #[serde(default)]
    pub templates: Option<PathBuf>,
    /// An existing corpus JSONL. When absent, `synth` writes one into the output directory.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpSettings {
    pub base_url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    60_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatorSettings {
    pub backend: BackendKind,
    #[serde(default)]
    pub mock: Option<MockAnnotatorConfig>,
    #[serde(default)]
    pub http: Option<HttpSettings>,
    #[serde(default)]
    pub client: ClientConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackSettings {
    pub strategy: Strategy,
    pub seed: u64,
    #[serde(default = "one")]
    pub epochs: u32,
    #[serde(default)]
    pub compare_to_reference: bool,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    #[serde(default = "default_mode")]
    pub mode: EvalMode,
    /// Row label in the rendered report.
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub zero_shot: ZeroShotSettings,
    /// JSONL of `{video_id, issue_id, probability}` from a fine-tuned head.
    #[serde(default)]
    pub sft_predictions: Option<PathBuf>,
    /// A published table rendered under the measured one.
    #[serde(default)]
    pub reference_fixture: Option<PathBuf>,
}

fn default_mode() -> EvalMode {
    EvalMode::ZeroShot
}

fn default_model() -> String {
    "model".into()
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            mode: default_mode(),
            model: default_model(),
            threshold: default_threshold(),
            zero_shot: ZeroShotSettings::default(),
            sft_predictions: None,
            reference_fixture: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub annotator: AnnotatorSettings,
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub generation: GenerationSettings,
    pub pack: PackSettings,
    #[serde(default)]
    pub eval: EvalSettings,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
    pub backend: Option<BackendKind>,
    pub out: Option<PathBuf>,
}

/// A validated configuration with its inputs loaded.
pub struct Loaded {
    pub config: PipelineConfig,
    pub guidelines: GuidelineSet,
    pub guidelines_text: String,
    pub templates: TemplateSet,
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn err<T>(message: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(message.into()))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn require_file(what: &str, p: &Path) -> Result<(), ConfigError> {
    if p.is_file() {
        Ok(())
    } else {
        err(format!("{what} {} does not exist", p.display()))
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(e.to_string()))
    }

    /// Paths in the file are relative to `base`; the `--out` override is taken as given.
    pub fn apply(&mut self, base: &Path, overrides: &Overrides) {
        self.paths.guidelines = resolve(base, &self.paths.guidelines);
        self.paths.templates = self.paths.templates.as_deref().map(|p| resolve(base, p));
        self.paths.corpus = self.paths.corpus.as_deref().map(|p| resolve(base, p));
        self.paths.out = match &overrides.out {
            Some(out) => out.clone(),
            None => resolve(base, &self.paths.out),
        };
        self.eval.sft_predictions = self.eval.sft_predictions.as_deref().map(|p| resolve(base, p));
        self.eval.reference_fixture = self.eval.reference_fixture.as_deref().map(|p| resolve(base, p));

        if let Some(seed) = overrides.seed {
            self.corpus.seed = seed;
            self.pack.seed = seed;
            if let Some(m) = &mut self.annotator.mock {
                m.seed = seed;
            }
        }
        if let Some(n) = overrides.parallelism {
            self.generation.parallelism = n;
            self.eval.zero_shot.parallelism = n;
            self.annotator.client.max_parallelism = self.annotator.client.max_parallelism.max(n);
        }
        if let Some(b) = overrides.backend {
            self.annotator.backend = b;
        }
        self.eval.zero_shot.threshold = self.eval.threshold;
    }

    fn check(&self, guidelines: &GuidelineSet) -> Result<(), ConfigError> {
        require_file("guidelines file", &self.paths.guidelines)?;
        if let Some(dir) = &self.paths.templates {
            if !dir.is_dir() {
                return err(format!("templates directory {} does not exist", dir.display()));
            }
        }
        if let Some(p) = &self.paths.corpus {
            require_file("corpus file", p)?;
        }
        if let Some(p) = &self.eval.sft_predictions {
            require_file("SFT prediction file", p)?;
        }
        if let Some(p) = &self.eval.reference_fixture {
            require_file("reference fixture", p)?;
        }
        if self.paths.out.is_file() {
            return err(format!("output path {} is a file", self.paths.out.display()));
        }

        let a = &self.annotator;
        match a.backend {
            BackendKind::Mock => match &a.mock {
                Some(m) => m.validate().map_err(|e| ConfigError(format!("annotator.mock: {e}")))?,
                None => return err("annotator.backend is mock but [annotator.mock] is missing"),
            },
            BackendKind::Http => match &a.http {
                Some(h) if h.base_url.starts_with("http://") || h.base_url.starts_with("https://") => {
                    if h.timeout_ms == 0 {
                        return err("annotator.http.timeout_ms must be positive");
                    }
                }
                Some(h) => {
                    return err(format!(
                        "annotator.http.base_url `{}` is not an http(s) URL",
                        h.base_url
                    ))
                }
                None => return err("annotator.backend is http but [annotator.http] is missing"),
            },
        }
        let ceiling = a.client.max_parallelism;
        for (name, n) in [
            ("generation.parallelism", self.generation.parallelism),
            ("eval.zero_shot.parallelism", self.eval.zero_shot.parallelism),
        ] {
            if n == 0 || n > ceiling {
                return err(format!(
                    "{name} = {n} must be between 1 and annotator.client.max_parallelism ({ceiling})"
                ));
            }
        }
        for (name, n) in [
            ("generation.max_tokens", self.generation.max_tokens),
            ("eval.zero_shot.max_tokens", self.eval.zero_shot.max_tokens),
        ] {
            if n == 0 || n > a.client.max_tokens_ceiling {
                return err(format!(
                    "{name} = {n} must be between 1 and annotator.client.max_tokens_ceiling ({})",
                    a.client.max_tokens_ceiling
                ));
            }
        }
        if a.client.retry.max_attempts == 0 {
            return err("annotator.client.retry.max_attempts must be positive");
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return err(format!("eval.threshold = {} is outside [0, 1]", self.eval.threshold));
        }
        if self.eval.model.trim().is_empty() {
            return err("eval.model is empty");
        }
        if self.pack.epochs == 0 {
            return err("pack.epochs must be positive");
        }
        self.corpus
            .validate(guidelines)
            .map_err(|e| ConfigError(format!("corpus: {e}")))?;
        Ok(())
    }
}

/// Reads, overrides and validates a config file and loads the inputs it names.
/// Nothing is written.
pub fn load(path: &Path, overrides: &Overrides) -> Result<Loaded, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
    let mut config = PipelineConfig::parse(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    config.apply(base, overrides);

    require_file("guidelines file", &config.paths.guidelines)?;
    let guidelines_text = std::fs::read_to_string(&config.paths.guidelines)
        .map_err(|e| ConfigError(format!("cannot read {}: {e}", config.paths.guidelines.display())))?;
    let guidelines = parse_guideline_set(&guidelines_text)
        .map_err(|e| ConfigError(format!("{}: {e}", config.paths.guidelines.display())))?;
    config.check(&guidelines)?;
    let templates = match &config.paths.templates {
        Some(dir) => TemplateSet::load_dir(dir).map_err(|e| ConfigError(format!("templates: {e}")))?,
        None => TemplateSet::default(),
    };
    Ok(Loaded {
        config,
        guidelines,
        guidelines_text,
        templates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[paths]
guidelines = "g.guide"

[annotator]
backend = "mock"
mock = { flip_rate = 0.0, seed = 1 }

[corpus]
pretrain_pos = 2
pretrain_neg = 2
sft_total = 0
sft_pos_rate = 0.0
eval_total = 4
eval_pos_rate = 0.5
seed = 3

[pack]
strategy = "two_stage"
seed = 9
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = PipelineConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.paths.out, PathBuf::from("out"));
        assert_eq!(c.pack.epochs, 1);
        assert_eq!(c.eval.mode, EvalMode::ZeroShot);
        assert_eq!(c.corpus.counts.eval_total, 4);
        assert_eq!(c.corpus.frames_per_video, 4);
    }

    #[test]
    fn seeds_are_required() {
        let without = MINIMAL.replace("seed = 9\n", "");
        assert!(PipelineConfig::parse(&without).unwrap_err().0.contains("seed"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("[pack]", "[pack]\nstrategi = \"x\"");
        assert!(PipelineConfig::parse(&text).is_err());
    }

    #[test]
    fn overrides_reach_every_seed_and_parallelism() {
        let mut c = PipelineConfig::parse(MINIMAL).unwrap();
        c.apply(
            Path::new("/cfg"),
            &Overrides {
                seed: Some(77),
                parallelism: Some(32),
                backend: None,
                out: None,
            },
        );
        assert_eq!(
            (c.corpus.seed, c.pack.seed, c.annotator.mock.unwrap().seed),
            (77, 77, 77)
        );
        assert_eq!(c.generation.parallelism, 32);
        assert_eq!(c.annotator.client.max_parallelism, 32);
        assert_eq!(c.paths.guidelines, PathBuf::from("/cfg/g.guide"));
        assert_eq!(c.paths.out, PathBuf::from("/cfg/out"));
    }
}

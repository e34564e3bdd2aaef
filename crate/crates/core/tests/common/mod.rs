#![allow(dead_code)]

use modfactory_core::annotator::{
    AnnotationRequest, AnnotationResponse, AnnotatorClient, AnnotatorError, Backend, ClientConfig, MockAnnotator,
    MockAnnotatorConfig, RequestRoute,
};
use modfactory_core::corpus::{generate_synthetic_corpus, CorpusSpec, SplitCounts, VideoRecord};
use modfactory_core::guideline::{parse_guideline_set, GuidelineSet};
use std::path::PathBuf;
use std::sync::Arc;

pub fn asset(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets").join(rel)
}

pub fn desk_guidelines() -> GuidelineSet {
    parse_guideline_set(&std::fs::read_to_string(asset("guidelines/desk.guide")).unwrap()).unwrap()
}

pub fn pretrain(pos: usize, neg: usize) -> SplitCounts {
    SplitCounts {
        pretrain_pos: pos,
        pretrain_neg: neg,
        ..SplitCounts::EMPTY
    }
}

pub fn corpus(g: &GuidelineSet, counts: SplitCounts, seed: u64) -> Vec<VideoRecord> {
    generate_synthetic_corpus(g, &CorpusSpec::new(counts, seed)).unwrap()
}

pub fn mock(g: &GuidelineSet, videos: &[VideoRecord], config: MockAnnotatorConfig) -> Arc<MockAnnotator> {
    Arc::new(MockAnnotator::new(config, Arc::new(g.clone()), videos).unwrap())
}

pub fn client(backend: Arc<dyn Backend>) -> AnnotatorClient {
    AnnotatorClient::new(backend, ClientConfig::default()).with_sleeper(|_| {})
}

/// Wraps a backend and overrides responses for one video.
pub struct Sabotage {
    pub inner: Arc<dyn Backend>,
    pub video_id: String,
    /// `None` makes matching requests time out; `Some(text)` replaces the response text.
    pub text: Option<String>,
}

impl Backend for Sabotage {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }

    fn call(&self, request: &AnnotationRequest) -> Result<AnnotationResponse, AnnotatorError> {
        let video = match &request.route {
            Some(RequestRoute::Caption { video_id, .. })
            | Some(RequestRoute::BinaryVqa { video_id, .. })
            | Some(RequestRoute::MultiChoice { video_id, .. })
            | Some(RequestRoute::Classify { video_id, .. }) => video_id.as_str(),
            None => "",
        };
        if video != self.video_id {
            return self.inner.call(request);
        }
        match &self.text {
            None => Err(AnnotatorError::Timeout { after_ms: 10 }),
            Some(t) => Ok(AnnotationResponse {
                text: t.clone(),
                label_logits: None,
                latency_ms: 0,
            }),
        }
    }
}

mod common;

use common::*;
use modfactory_core::annotator::{AnnotatorClient, MockAnnotatorConfig};
use modfactory_core::answer::AnswerFormat;
use modfactory_core::corpus::{Split, VideoRecord};
use modfactory_core::datagen::{
    consistency_filter, cot_response, DatagenError, FilterReason, GenerationSettings, Generator, TaskKind, TemplateSet,
    VqaAnswers,
};
use modfactory_core::guideline::{GuidelineSet, IssueSpec};
use modfactory_core::{Answer, Label};
use proptest::prelude::*;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

struct Fixture {
    g: GuidelineSet,
    videos: Vec<VideoRecord>,
    templates: TemplateSet,
}

fn fixture(pos: usize, neg: usize) -> Fixture {
    let g = desk_guidelines();
    let videos = corpus(&g, pretrain(pos, neg), 21);
    Fixture {
        g,
        videos,
        templates: TemplateSet::default(),
    }
}

fn noise_free(f: &Fixture) -> AnnotatorClient {
    client(mock(&f.g, &f.videos, MockAnnotatorConfig::noise_free(4)))
}

fn home(v: &VideoRecord) -> (&String, Label) {
    let (i, l) = v.human_labels.iter().next().unwrap();
    (i, *l)
}

#[test]
fn caption_mentions_violating_cue() {
    let f = fixture(10, 10);
    let c = noise_free(&f);
    let gen = Generator::new(&f.g, &f.templates, &c, GenerationSettings::default());
    let fe = f.g.issue("fe").unwrap();
    let mut hits = 0;
    for v in f.videos.iter().filter(|v| v.human_labels.contains_key("fe")) {
        let s = gen.generate_caption(v, fe).unwrap();
        assert_eq!(s.task, TaskKind::Caption);
        assert!(s.diagnostics.is_empty(), "{:?}", s.diagnostics);
        assert_eq!(s.prompt, "Describe the video regarding the fake engagement issue.");
        if v.latent("fe", "engagement_bait") {
            assert!(s.response.contains("engagement bait"), "{}", s.response);
            hits += 1;
        }
        s.check().unwrap();
    }
    assert!(hits > 0);
}

#[test]
fn timeout_skips_sample_and_logs_failure() {
    let f = fixture(3, 3);
    let target = f.videos[0].video_id.clone();
    let backend = Arc::new(Sabotage {
        inner: mock(&f.g, &f.videos, MockAnnotatorConfig::noise_free(4)),
        video_id: target.clone(),
        text: None,
    });
    let c = client(backend);
    let gen = Generator::new(&f.g, &f.templates, &c, GenerationSettings::default());
    let issue = f.g.issue(home(&f.videos[0]).0).unwrap();
    assert!(matches!(
        gen.generate_caption(&f.videos[0], issue),
        Err(DatagenError::Annotator(_))
    ));

    let out = gen.generate_pretraining_samples(&f.videos).unwrap();
    assert!(out.samples.iter().all(|s| s.video_id != target));
    // caption + 3 binary + multi time out; CoT cannot be assembled.
    assert_eq!(out.failures.len(), 6);
    assert!(out.failures.iter().all(|e| e.video_id == target));
    assert_eq!(out.failures.iter().filter(|e| e.task == TaskKind::Cot).count(), 1);
}

#[test]
fn hundred_captions_have_distinct_ids() {
    let f = fixture(50, 50);
    let c = noise_free(&f);
    let gen = Generator::new(&f.g, &f.templates, &c, GenerationSettings::default());
    let ssc = f.g.issue("ssc").unwrap();
    let videos: Vec<_> = f.videos.iter().filter(|v| v.human_labels.contains_key("ssc")).collect();
    assert_eq!(videos.len(), 100);
    let ids: BTreeSet<String> = videos
        .iter()
        .map(|v| gen.generate_caption(v, ssc).unwrap().sample_id)
        .collect();
    assert_eq!(ids.len(), 100);
}

#[test]
fn binary_answers_echo_truth_through_polarity() {
    let f = fixture(20, 20);
    let c = noise_free(&f);
    let gen = Generator::new(&f.g, &f.templates, &c, GenerationSettings::default());
    for v in &f.videos {
        let issue = f.g.issue(home(v).0).unwrap();
        for q in &issue.sub_questions {
            let s = gen.generate_binary_vqa(v, issue, q).unwrap();
            let violating = v.latent(&issue.issue_id, &q.subq_id);
            assert_eq!(s.derived_label, Some(Label::from_violation(violating)));
            let literal = q.answer_for(violating);
            assert!(
                s.response.starts_with(&format!("{}. ", literal.token())),
                "{}",
                s.response
            );
            assert!(s.prompt.contains(&q.question_text));
            assert_eq!(s.subq_id.as_deref(), Some(q.subq_id.as_str()));
        }
    }
}

#[test]
fn maybe_is_filtered_as_unparseable() {
    let f = fixture(2, 2);
    let target = f.videos[1].clone();
    let c = client(Arc::new(Sabotage {
        inner: mock(&f.g, &f.videos, MockAnnotatorConfig::noise_free(4)),
        video_id: target.video_id.clone(),
        text: Some("Maybe, it is hard to say.".into()),
    }));
    let gen = Generator::new(&f.g, &f.templates, &c, GenerationSettings::default());
    let issue = f.g.issue(home(&target).0).unwrap();
    let s = gen
        .generate_binary_vqa(&target, issue, &issue.sub_questions[0])
        .unwrap();
    assert!(s.filtered);
    assert_eq!(s.filter_reason, Some(FilterReason::UnparseableAnswer));
    assert_eq!(s.derived_label, None);
    s.check().unwrap();

    let multi = gen
        .generate_multichoice_vqa(&target, issue, &f.g.iter().collect::<Vec<_>>())
        .unwrap();
    assert_eq!(multi.filter_reason, Some(FilterReason::UnparseableAnswer));
}

#[test]
fn multichoice_selects_home_issue_or_none() {
    let f = fixture(10, 10);
    let c = noise_free(&f);
    let gen = Generator::new(&f.g, &f.templates, &c, GenerationSettings::default());
    let options: Vec<&IssueSpec> = f.g.iter().collect();
    for v in &f.videos {
        let (issue_id, label) = home(v);
        let s = gen
            .generate_multichoice_vqa(v, f.g.issue(issue_id).unwrap(), &options)
            .unwrap();
        assert_eq!(s.derived_label, Some(label));
        for (i, l) in &s.issue_labels {
            assert_eq!(*l == Label::Positive, i == issue_id && label.is_positive());
        }
        if !label.is_positive() {
            assert!(s.response.contains("None of the above"));
        }
    }
}

#[test]
fn multichoice_letters_decode_for_every_subset() {
    let f = fixture(1, 0);
    let c = noise_free(&f);
    let gen = Generator::new(&f.g, &f.templates, &c, GenerationSettings::default());
    let options: Vec<&IssueSpec> = f.g.iter().collect();
    let v = &f.videos[0];
    let req = gen.multi_request(v, &options).unwrap();
    for mask in 0u32..8 {
        let letters: Vec<&str> = (0..3)
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| ["A", "B", "C"][i])
            .collect();
        let text = if letters.is_empty() {
            "D. None of the above.".to_string()
        } else {
            format!("{}. Because.", letters.join(", "))
        };
        let resp = modfactory_core::annotator::AnnotationResponse {
            text,
            label_logits: None,
            latency_ms: 0,
        };
        let s = gen.multi_sample(v, options[0], &options, 0, &req, resp);
        for (i, issue) in options.iter().enumerate() {
            let expected = Label::from_violation(mask >> i & 1 == 1);
            assert_eq!(s.issue_labels[&issue.issue_id], expected, "mask {mask:03b}");
        }
    }
}

fn answers_for(issue: &IssueSpec, bits: u32) -> VqaAnswers {
    issue
        .sub_questions
        .iter()
        .enumerate()
        .map(|(i, q)| {
            (
                q.subq_id.clone(),
                (q.answer_for(bits >> i & 1 == 1), format!("reason {i}.")),
            )
        })
        .collect()
}

#[test]
fn cot_conclusion_follows_aggregation_exhaustively() {
    let g = desk_guidelines();
    for issue in g.iter() {
        let n = issue.sub_questions.len();
        for bits in 0..(1u32 << n) {
            let (text, label) = cot_response(issue, &answers_for(issue, bits)).unwrap();
            assert_eq!(label.is_positive(), bits != 0);
            for q in &issue.sub_questions {
                assert!(text.contains(&q.question_text));
            }
            assert!(text.ends_with(&format!("The final conclusion is {label}.")));
        }
    }
}

#[test]
fn cot_fe_example_concludes_positive() {
    let f = fixture(1, 0);
    let c = noise_free(&f);
    let gen = Generator::new(&f.g, &f.templates, &c, GenerationSettings::default());
    let fe = f.g.issue("fe").unwrap();
    let mut answers = answers_for(fe, 0);
    answers.insert(
        "engagement_bait".into(),
        (Answer::Yes, "The video shows engagement bait.".into()),
    );
    let s = gen.generate_cot(&f.videos[0], fe, &answers).unwrap();
    assert_eq!(s.derived_label, Some(Label::Positive));
    assert!(s.response.contains("Step 3:"));
    assert!(s.response.contains("1 of 3 sub-questions indicate a violation"));

    answers.remove("fake_giveaway");
    assert!(matches!(
        gen.generate_cot(&f.videos[0], fe, &answers),
        Err(DatagenError::MissingAnswer { subq_id, .. }) if subq_id == "fake_giveaway"
    ));
}

proptest! {
    #[test]
    fn cot_label_equals_aggregate(issue_idx in 0usize..3, bits in 0u32..8) {
        let g = desk_guidelines();
        let issue = g.iter().nth(issue_idx).unwrap();
        let answers = answers_for(issue, bits);
        let plain: BTreeMap<String, Answer> = answers.iter().map(|(k, (a, _))| (k.clone(), *a)).collect();
        let (_, label) = cot_response(issue, &answers).unwrap();
        prop_assert_eq!(label, issue.aggregate(&plain).unwrap());
    }
}

#[test]
fn batch_counts_and_noise_free_filter() {
    let f = fixture(25, 25);
    let c = noise_free(&f);
    let gen = Generator::new(&f.g, &f.templates, &c, GenerationSettings::default());
    let mut out = gen.generate_pretraining_samples(&f.videos).unwrap();
    assert!(out.failures.is_empty());
    // 150 pairs, each issue has 3 sub-questions: 1 + 3 + 1 + 1 samples per pair.
    assert_eq!(out.samples.len(), 150 * 6);
    for task in TaskKind::ALL {
        let per = if task == TaskKind::VqaBinary { 450 } else { 150 };
        assert_eq!(out.samples.iter().filter(|s| s.task == task).count(), per, "{task}");
    }
    for s in &out.samples {
        s.check().unwrap();
    }
    let report = consistency_filter(&mut out.samples, &f.videos).unwrap();
    assert_eq!(report.total_discarded(), 0);
    assert_eq!(report.total_kept(), 900);
    assert_eq!(report.tally("fe", TaskKind::Cot).kept, 50);
}

#[test]
fn generation_is_identical_across_parallelism() {
    let f = fixture(15, 15);
    let g_cfg = MockAnnotatorConfig::noise_free(4).with_flip_rate(0.2);
    let run = |parallelism| {
        let c = client(mock(&f.g, &f.videos, g_cfg));
        let settings = GenerationSettings {
            parallelism,
            ..Default::default()
        };
        let out = Generator::new(&f.g, &f.templates, &c, settings)
            .generate_pretraining_samples(&f.videos)
            .unwrap();
        serde_json::to_string(&out.samples).unwrap()
    };
    let one = run(1);
    assert_eq!(one, run(8));
    assert_eq!(one, run(16));
}

#[test]
fn noisy_filter_keeps_only_consistent_samples() {
    let f = fixture(200, 200);
    let c = client(mock(
        &f.g,
        &f.videos,
        MockAnnotatorConfig::noise_free(4).with_flip_rate(0.2),
    ));
    let gen = Generator::new(&f.g, &f.templates, &c, GenerationSettings::default());
    let mut samples = gen.generate_pretraining_samples(&f.videos).unwrap().samples;
    let report = consistency_filter(&mut samples, &f.videos).unwrap();
    assert!(report.total_discarded() > 0);
    let labels: BTreeMap<&str, &VideoRecord> = f.videos.iter().map(|v| (v.video_id.as_str(), v)).collect();
    for s in samples.iter().filter(|s| !s.filtered) {
        let human = labels[s.video_id.as_str()].human_labels[&s.issue_id];
        match s.task {
            TaskKind::Cot | TaskKind::VqaMulti => assert_eq!(s.derived_label, Some(human)),
            TaskKind::VqaBinary if human == Label::Negative => assert_eq!(s.derived_label, Some(Label::Negative)),
            _ => {}
        }
    }
    assert!(samples
        .iter()
        .filter(|s| s.task == TaskKind::Caption)
        .all(|s| !s.filtered));

    let again = consistency_filter(&mut samples, &f.videos).unwrap();
    assert_eq!(again, report);
}

#[test]
fn filter_rejects_unknown_video_and_missing_label() {
    let f = fixture(3, 3);
    let c = noise_free(&f);
    let gen = Generator::new(&f.g, &f.templates, &c, GenerationSettings::default());
    let mut samples = gen.generate_pretraining_samples(&f.videos).unwrap().samples;
    let original = samples.clone();

    let mut fewer = f.videos.clone();
    fewer.pop();
    assert!(matches!(
        consistency_filter(&mut samples, &fewer),
        Err(DatagenError::UnknownVideo(_))
    ));

    let mut unlabeled = f.videos.clone();
    unlabeled[0].human_labels.clear();
    assert!(matches!(
        consistency_filter(&mut samples, &unlabeled),
        Err(DatagenError::MissingHumanLabel { .. })
    ));
    assert_eq!(samples, original);
}

#[test]
fn non_pretrain_videos_are_rejected() {
    let mut f = fixture(1, 0);
    for v in &mut f.videos {
        v.split = Split::Eval;
    }
    let c = noise_free(&f);
    let gen = Generator::new(&f.g, &f.templates, &c, GenerationSettings::default());
    let issue = f.g.issue(home(&f.videos[0]).0).unwrap();
    assert!(matches!(
        gen.generate_caption(&f.videos[0], issue),
        Err(DatagenError::NotPretrain(_))
    ));
    assert!(gen.generate_pretraining_samples(&f.videos).unwrap().samples.is_empty());
}

#[test]
fn reason_first_samples_parse() {
    let f = fixture(10, 10);
    let mut cfg = MockAnnotatorConfig::noise_free(4);
    cfg.answer_format = AnswerFormat::ReasonThenAnswer;
    let c = client(mock(&f.g, &f.videos, cfg));
    let settings = GenerationSettings {
        answer_format: AnswerFormat::ReasonThenAnswer,
        ..Default::default()
    };
    let mut samples = Generator::new(&f.g, &f.templates, &c, settings)
        .generate_pretraining_samples(&f.videos)
        .unwrap()
        .samples;
    let report = consistency_filter(&mut samples, &f.videos).unwrap();
    assert_eq!(report.total_discarded(), 0);
}

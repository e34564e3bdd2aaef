use crate::guideline::{AggregationRule, GuidelineClause, GuidelineSet, IssueSpec, Polarity, SubQuestion};

fn plain_issue(id: &str, n: usize) -> IssueSpec {
    IssueSpec {
        issue_id: id.into(),
        title: format!("{id} issue"),
        guideline_text: "text".into(),
        clauses: vec![GuidelineClause {
            text: "c".into(),
            maps_to: (0..n).map(|i| format!("q{i}")).collect(),
        }],
        sub_questions: (0..n)
            .map(|i| SubQuestion::new(&format!("q{i}"), &format!("Is signal {i} present?")))
            .collect(),
        aggregation: AggregationRule::AnyPositive,
    }
}

/// Issues with 3, 3 and 4 generic sub-questions.
pub(crate) fn three_issue_set() -> GuidelineSet {
    GuidelineSet::new(
        "1",
        vec![plain_issue("ssc", 3), plain_issue("uc", 3), plain_issue("fe", 4)],
    )
    .unwrap()
}

/// Two issues, one of which has an inverted-polarity sub-question.
pub(crate) fn mixed_polarity_set() -> GuidelineSet {
    let mut uc = plain_issue("uc", 2);
    uc.title = "unoriginal content".into();
    uc.sub_questions[1] = SubQuestion::new("q1", "Is the content original?")
        .with_polarity(Polarity::NoIsViolation)
        .with_cue("original content");
    let mut fe = plain_issue("fe", 3);
    fe.title = "fake engagement".into();
    fe.sub_questions[0] = SubQuestion::new("q0", "Does the video contain engagement bait?").with_cue("engagement bait");
    GuidelineSet::new("1", vec![uc, fe]).unwrap()
}

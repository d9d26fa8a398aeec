use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rnr_core::embed::EmbedClient;
use rnr_core::eval::{
    bleu, discrepancy, discrepancy_from_cosine, mc_accuracy, rouge_l, run_eval, token_f1, EvalExample,
    EvalSettings, LabelExtractor, Metric,
};
use rnr_core::ingest::{Answer, ExamItem};
use rnr_core::pipeline::{Mode, Pipeline};
use rnr_core::provider::{ChatMessage, FnChat, MockEmbedder, ProviderError};

fn labels(s: &[&str]) -> Answer {
    Answer::Labels(s.iter().map(|l| l.to_string()).collect::<BTreeSet<_>>())
}

fn mc_item(answer: &[&str]) -> ExamItem {
    ExamItem {
        stem: "Which apply?".into(),
        options: ["A", "B", "C", "D"].iter().map(|l| (l.to_string(), format!("option {l}"))).collect(),
        answer: labels(answer),
        explanation: String::new(),
    }
}

#[test]
fn token_f1_vectors() {
    assert_eq!(token_f1("the same words", "the same words"), (1.0, 1.0, 1.0));
    assert_eq!(token_f1("alpha beta", "gamma delta"), (0.0, 0.0, 0.0));
    assert_eq!(token_f1("a b c", "b c d"), (2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0));
    assert_eq!(token_f1("", ""), (1.0, 1.0, 1.0));
    assert_eq!(token_f1("a", ""), (0.0, 0.0, 0.0));
    // Precision and recall swap with the arguments.
    let (p, r, _) = token_f1("a b c e", "a b");
    let (p2, r2, _) = token_f1("a b", "a b c e");
    assert_eq!((p, r), (r2, p2));
}

#[test]
fn rouge_l_vectors() {
    assert_eq!(rouge_l("the cat sat", "the cat sat"), 1.0);
    assert_eq!(rouge_l("", "the cat"), 0.0);
    // LCS 2 of 3 predicted and 2 of 2 reference tokens.
    let (p, r, b2) = (2.0 / 3.0, 1.0, 1.2f64 * 1.2);
    let want = (1.0 + b2) * p * r / (r + b2 * p);
    assert!((rouge_l("the cat sat", "the cat") - want).abs() < 1e-12);
    assert_eq!(rouge_l("  the cat sat \n", "the cat"), rouge_l("the cat sat", "the cat"));
}

#[test]
fn bleu_vectors() {
    assert!((bleu("a b c d e", &["a b c d e"]) - 1.0).abs() < 1e-12);
    assert_eq!(bleu("", &["a b"]), 0.0);
    // Matched n-grams 4/5, 3/4, 2/3, 1/2; same length so no brevity penalty.
    let want = (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
    assert!((bleu("a b c d e", &["a b c d f"]) - want).abs() < 1e-12);
    assert_eq!(bleu(" a b c d e ", &["a b c d f"]), bleu("a b c d e", &["a b c d f"]));
}

#[test]
fn multiple_choice_vectors() {
    assert_eq!(mc_accuracy("The answer is B.", &mc_item(&["B"])), 1.0);
    assert_eq!(mc_accuracy("AB", &mc_item(&["A", "B"])), 1.0);
    assert_eq!(mc_accuracy("A", &mc_item(&["A", "B"])), 0.0);
    assert_eq!(mc_accuracy("no idea", &mc_item(&["A"])), 0.0);
}

#[test]
fn discrepancy_vectors() {
    let client = EmbedClient::new(Arc::new(MockEmbedder::new(256, 3)));
    let text = "contingent liabilities arising from guarantees";
    assert!(discrepancy(text, text, &client).unwrap().abs() < 1e-9);
    assert_eq!(discrepancy_from_cosine(-0.4), 1.0);
    let a = discrepancy("loan to my wife", text, &client).unwrap();
    let b = discrepancy(text, "loan to my wife", &client).unwrap();
    assert_eq!(a, b);
    let closer = discrepancy("liabilities arising from guarantees", text, &client).unwrap();
    assert!(closer < a);
}

fn settings(metrics: Vec<Metric>) -> EvalSettings {
    EvalSettings {
        mode: Mode::NoRetrieval,
        metrics,
        ks: vec![4],
        parallelism: 4,
        extractor: LabelExtractor::FirstRun,
        config_snapshot: serde_json::json!({}),
    }
}

fn question_of(messages: &[ChatMessage]) -> String {
    let prompt = &messages.last().unwrap().content;
    prompt.rsplit("Question: ").next().unwrap().lines().next().unwrap().to_string()
}

#[test]
fn gold_stub_scores_one_everywhere() {
    let gold: BTreeMap<String, String> = [("what is two plus two", "four"), ("capital of france", "paris")]
        .into_iter()
        .map(|(q, a)| (q.to_string(), a.to_string()))
        .collect();
    let dataset: Vec<EvalExample> = gold
        .iter()
        .enumerate()
        .map(|(i, (q, a))| EvalExample {
            example_id: format!("ex{i}"),
            question: q.clone(),
            options: BTreeMap::new(),
            answer: Answer::Text(a.clone()),
            gold_chunk: None,
        })
        .collect();
    let reader = FnChat::new("stub", move |m| Ok(gold[&question_of(m)].clone()));
    let p = Pipeline::new(Arc::new(reader));
    let reports = run_eval(&dataset, &p, &settings(vec![Metric::Acc, Metric::F1, Metric::RougeL, Metric::Bleu])).unwrap();
    for v in reports[0].aggregates.values() {
        assert!((v - 1.0).abs() < 1e-12);
    }
}

#[test]
fn accuracy_accounting_reproduces_a_fixed_rate() {
    // 622 of 1000 multiple-choice items answered correctly.
    let dataset: Vec<EvalExample> = (0..1000)
        .map(|i| EvalExample {
            example_id: format!("q{i:04}"),
            question: format!("item {i}"),
            options: [("A", "yes"), ("B", "no")].iter().map(|(l, t)| (l.to_string(), t.to_string())).collect(),
            answer: labels(&["A"]),
            gold_chunk: None,
        })
        .collect();
    let reader = FnChat::new("stub", |m| {
        let q = question_of(m);
        let i: usize = q.trim_start_matches("item ").parse().unwrap();
        Ok(if i < 622 { "A".into() } else { "B".into() })
    });
    let p = Pipeline::new(Arc::new(reader));
    let r = &run_eval(&dataset, &p, &settings(vec![Metric::Acc])).unwrap()[0];
    assert!((r.aggregates["acc"] - 0.622).abs() < 1e-12);
    assert!(r.check_means(1e-9));
}

#[test]
fn failed_examples_are_counted_and_excluded() {
    let dataset: Vec<EvalExample> = (0..10)
        .map(|i| EvalExample {
            example_id: format!("e{i}"),
            question: format!("question {i}"),
            options: BTreeMap::new(),
            answer: Answer::Text(format!("answer {i}")),
            gold_chunk: None,
        })
        .collect();
    let reader = FnChat::new("stub", |m| {
        let q = question_of(m);
        if q == "question 3" {
            Err(ProviderError::Rejected("boom".into()))
        } else {
            Ok(q.replace("question", "answer"))
        }
    });
    let p = Pipeline::new(Arc::new(reader));
    let r = &run_eval(&dataset, &p, &settings(vec![Metric::Acc])).unwrap()[0];
    assert_eq!(r.failure_count(), 1);
    assert_eq!(r.per_example.len(), 9);
    assert_eq!(r.aggregates["acc"], 1.0);
}

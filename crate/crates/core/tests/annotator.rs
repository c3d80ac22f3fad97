use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use viewsel_core::annotate::{
    annotate_dataset, generate_caption, match_view, match_view_direct, parse_label, AnnotateJob, LabeledView,
    PromptTemplate, TemplateRole, TemplateSet,
};
use viewsel_core::gateway::{Gateway, MockBackend, MockScript, ResponseCache};
use viewsel_core::scene::{read_jsonl, QAInstance, SceneManifest, ViewRecord};
use viewsel_core::{CameraPose, Label};

fn scene(dir: &Path, id: &str, n: usize) -> SceneManifest {
    let views = (0..n)
        .map(|i| {
            let name = format!("{id}_{i}.ppm");
            std::fs::write(dir.join(&name), format!("{id}-{i}")).unwrap();
            ViewRecord {
                view_id: format!("v{i}"),
                frame_index: i as u64,
                image_path: Some(name),
                pose: CameraPose::identity(),
            }
        })
        .collect();
    SceneManifest {
        scene_id: id.into(),
        views,
        base_dir: Some(dir.to_path_buf()),
    }
}

fn qa(id: &str, scene: &str, q: &str, a: &str) -> QAInstance {
    QAInstance {
        question_id: id.into(),
        scene_id: scene.into(),
        question: q.into(),
        answers: vec![a.into()],
    }
}

fn mock(json: &str) -> Arc<MockBackend> {
    Arc::new(MockBackend::new(serde_json::from_str::<MockScript>(json).unwrap()))
}

#[test]
fn caption_is_verbatim_and_cached() {
    let m = mock(r#"{"rules":[{"when":{"tag":"caption"},"replies":["  The black couch faces the coffee table. "]}]}"#);
    let gw = Gateway::new(Some(m.clone()), ResponseCache::in_memory());
    let t = PromptTemplate::default_for(TemplateRole::Rephrase);
    let q = "What is the black couch facing?";
    let c = generate_caption(&gw, "m", "q1", q, "coffee table", &t).unwrap();
    assert_eq!(c.text, "  The black couch faces the coffee table. ");
    let again = generate_caption(&gw, "m", "q1", q, "coffee table", &t).unwrap();
    assert_eq!(again, c);
    assert_eq!(m.call_count(), 1);

    let sent = m.requests()[0].text();
    assert!(sent.contains(q));
    assert!(sent.contains("coffee table"));
    assert!(sent.contains("Rewrite the question and its answer as one short image caption"));
}

#[test]
fn empty_caption_is_an_error() {
    let m = mock(r#"{"rules":[{"replies":["   "]}]}"#);
    let gw = Gateway::new(Some(m), ResponseCache::in_memory());
    let t = PromptTemplate::default_for(TemplateRole::Rephrase);
    assert!(generate_caption(&gw, "m", "q1", "q", "a", &t).is_err());
}

#[test]
fn match_replies_map_to_labels() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("v.ppm");
    std::fs::write(&img, "x").unwrap();
    let t = PromptTemplate::default_for(TemplateRole::Match);
    for (reply, want) in [
        ("A", Label::Positive),
        ("The image is too blurry to tell.", Label::Uncertain),
        ("Option B, the cabinet is absent.", Label::Negative),
    ] {
        let m = mock(&format!(r#"{{"rules":[{{"replies":[{}]}}]}}"#, serde_json::to_string(reply).unwrap()));
        let gw = Gateway::new(Some(m.clone()), ResponseCache::in_memory());
        let l = match_view(&gw, "m", "A lamp on a desk.", &img, &t).unwrap();
        assert_eq!(l.value, want, "{reply}");
        assert_eq!(l.raw, reply);
        let sent = &m.requests()[0];
        assert_eq!(sent.image_count(), 1);
        assert!(sent.text().contains("Step 1"));
        assert!(sent.text().contains("A lamp on a desk."));
    }
    let missing = dir.path().join("missing.ppm");
    let gw = Gateway::new(Some(mock(r#"{"rules":[{"replies":["A"]}]}"#)), ResponseCache::in_memory());
    assert!(match_view(&gw, "m", "c", &missing, &t).is_err());
}

#[test]
fn direct_match_carries_question_and_answer() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("v.ppm");
    std::fs::write(&img, "x").unwrap();
    let m = mock(r#"{"rules":[{"replies":["C"]}]}"#);
    let gw = Gateway::new(Some(m.clone()), ResponseCache::in_memory());
    let t = PromptTemplate::default_for(TemplateRole::MatchDirect);
    let l = match_view_direct(&gw, "m", "Where is the bed?", "by the window", &img, &t).unwrap();
    assert_eq!(l.value, Label::Uncertain);
    match_view_direct(&gw, "m", "Where is the bed?", "by the window", &img, &t).unwrap();
    assert_eq!(m.call_count(), 1);
    let text = m.requests()[0].text();
    assert!(text.contains("Where is the bed?") && text.contains("by the window"));
    assert!(!text.contains("{caption}") && !text.contains("Caption:"));
}

#[test]
fn parser_reply_corpus() {
    let cases: &[(&str, Label)] = &[
        ("A", Label::Positive),
        ("B", Label::Negative),
        ("C", Label::Uncertain),
        ("a", Label::Positive),
        ("b", Label::Negative),
        ("c", Label::Uncertain),
        ("A.", Label::Positive),
        ("B.", Label::Negative),
        ("(A)", Label::Positive),
        ("(b)", Label::Negative),
        ("[C]", Label::Uncertain),
        ("A)", Label::Positive),
        ("B: no", Label::Negative),
        ("Answer: A", Label::Positive),
        ("Answer: B", Label::Negative),
        ("Answer: C", Label::Uncertain),
        ("answer - b", Label::Negative),
        ("Option A", Label::Positive),
        ("Option B, the cabinet is absent.", Label::Negative),
        ("Option C because it is dark", Label::Uncertain),
        ("**A**", Label::Positive),
        ("*B*", Label::Negative),
        ("`C`", Label::Uncertain),
        ("\"A\"", Label::Positive),
        ("'b'", Label::Negative),
        ("  A  ", Label::Positive),
        ("\nB\n", Label::Negative),
        ("A, the lamp is on the desk", Label::Positive),
        ("B. The desk is empty.", Label::Negative),
        ("My answer is B.", Label::Negative),
        ("I choose C.", Label::Uncertain),
        ("The answer is (A).", Label::Positive),
        ("Final: b", Label::Negative),
        ("A/B", Label::Positive),
        ("B or C", Label::Negative),
        ("The image is too blurry to tell.", Label::Uncertain),
        ("Yes", Label::Uncertain),
        ("No", Label::Uncertain),
        ("", Label::Uncertain),
        ("   ", Label::Uncertain),
        ("ABC", Label::Uncertain),
        ("Bathroom", Label::Uncertain),
        ("Cabinet visible", Label::Uncertain),
        ("AB", Label::Uncertain),
        ("A1", Label::Uncertain),
        ("option-c", Label::Uncertain),
        ("D", Label::Uncertain),
        ("E. none", Label::Uncertain),
        ("选项A", Label::Uncertain),
        ("→ B ←", Label::Negative),
    ];
    assert_eq!(cases.len(), 50);
    for (reply, want) in cases {
        assert_eq!(parse_label(reply), *want, "reply {reply:?}");
    }
}

fn run(
    dir: &Path,
    qas: &[QAInstance],
    scenes: &BTreeMap<String, SceneManifest>,
    gw: &Gateway,
    parallelism: usize,
) -> viewsel_core::annotate::AnnotateSummary {
    let templates = TemplateSet::default();
    let labels = dir.join("out/labels.jsonl");
    let captions = dir.join("out/captions.jsonl");
    let job = AnnotateJob {
        qa: qas,
        scenes,
        templates: &templates,
        model: "m",
        parallelism,
        views_per_scene: 64,
        direct: false,
        labels_path: &labels,
        captions_path: &captions,
    };
    annotate_dataset(&job, gw).unwrap()
}

const PLANTED: &str = r#"{"rules":[
  {"when":{"tag":"caption","contains":["Q1 text"]},"replies":["caption one"]},
  {"when":{"tag":"caption","contains":["Q2 text"]},"replies":["caption two"]},
  {"when":{"tag":"match","contains":["caption one"],"image_any":["s_1.ppm","s_4.ppm"]},"replies":["A"]},
  {"when":{"tag":"match","contains":["caption one"],"image_any":["s_2.ppm"]},"replies":["The image is too blurry to tell."]},
  {"when":{"tag":"match"},"replies":["B"]}
]}"#;

#[test]
fn call_counts_resume_and_planted_labels() {
    let dir = tempfile::tempdir().unwrap();
    let mut scenes = BTreeMap::new();
    scenes.insert("s".to_string(), scene(dir.path(), "s", 6));
    let qas = vec![qa("q1", "s", "Q1 text", "x"), qa("q2", "s", "Q2 text", "y")];

    let cache_root = dir.path().join("cache");
    let m = mock(PLANTED);
    let gw = Gateway::new(Some(m.clone()), ResponseCache::on_disk(&cache_root));
    let summary = run(dir.path(), &qas, &scenes, &gw, 4);
    assert_eq!(m.calls_with_tag("caption"), 2);
    assert_eq!(m.calls_with_tag("match"), 12);
    assert_eq!(summary.captions_generated, 2);
    assert_eq!((summary.positive, summary.negative, summary.uncertain), (2, 9, 1));

    let rows: Vec<LabeledView> = read_jsonl(&dir.path().join("out/labels.jsonl")).unwrap();
    assert_eq!(rows.len(), 12);
    let positives: Vec<(&str, &str)> = rows
        .iter()
        .filter(|r| r.label == Label::Positive)
        .map(|r| (r.question_id.as_str(), r.view_id.as_str()))
        .collect();
    assert_eq!(positives, vec![("q1", "v1"), ("q1", "v4")]);
    // rows come out in view order regardless of worker interleaving
    let q1_views: Vec<&str> = rows.iter().filter(|r| r.question_id == "q1").map(|r| r.view_id.as_str()).collect();
    assert_eq!(q1_views, vec!["v0", "v1", "v2", "v3", "v4", "v5"]);

    // rerun on complete output: nothing is sent, not even to the cache
    let m2 = mock(PLANTED);
    let gw2 = Gateway::new(Some(m2.clone()), ResponseCache::on_disk(&cache_root));
    let again = run(dir.path(), &qas, &scenes, &gw2, 4);
    assert_eq!(m2.call_count(), 0);
    assert_eq!(again.skipped_views, 12);
    assert_eq!(gw2.stats().cache_hits + gw2.stats().cache_misses, 0);

    // fresh output but warm cache: every request is a cache hit
    std::fs::remove_dir_all(dir.path().join("out")).unwrap();
    let m3 = mock(PLANTED);
    let gw3 = Gateway::new(Some(m3.clone()), ResponseCache::on_disk(&cache_root));
    run(dir.path(), &qas, &scenes, &gw3, 2);
    assert_eq!(m3.call_count(), 0);
    assert_eq!(gw3.stats().cache_hits, 14);
    let warm: Vec<LabeledView> = read_jsonl(&dir.path().join("out/labels.jsonl")).unwrap();
    assert_eq!(warm, rows);
}

#[test]
fn interrupted_run_resumes_without_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let mut scenes = BTreeMap::new();
    scenes.insert("s".to_string(), scene(dir.path(), "s", 6));
    let qas = vec![qa("q1", "s", "Q1 text", "x"), qa("q2", "s", "Q2 text", "y")];
    let m = mock(PLANTED);
    let gw = Gateway::new(Some(m), ResponseCache::in_memory());
    run(dir.path(), &qas, &scenes, &gw, 3);
    let labels = dir.path().join("out/labels.jsonl");
    let full: Vec<LabeledView> = read_jsonl(&labels).unwrap();

    // keep the first 8 rows plus a torn ninth line
    let text = std::fs::read_to_string(&labels).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let mut cut = lines[..8].join("\n");
    cut.push('\n');
    cut.push_str(&lines[8][..10]);
    std::fs::write(&labels, cut).unwrap();

    let m2 = mock(PLANTED);
    let gw2 = Gateway::new(Some(m2.clone()), ResponseCache::in_memory());
    let s = run(dir.path(), &qas, &scenes, &gw2, 3);
    assert_eq!(s.skipped_views, 8);
    assert_eq!(m2.calls_with_tag("match"), 4);
    assert_eq!(m2.calls_with_tag("caption"), 0, "caption reused from the captions file");
    let resumed: Vec<LabeledView> = read_jsonl(&labels).unwrap();
    assert_eq!(resumed, full);
}

#[test]
fn gateway_failures_become_uncertain_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut scenes = BTreeMap::new();
    scenes.insert("s".to_string(), scene(dir.path(), "s", 3));
    let qas = vec![qa("q1", "s", "Q1 text", "x")];
    let m = mock(
        r#"{"rules":[{"when":{"tag":"caption"},"replies":["cap"]},
        {"when":{"image_any":["s_1.ppm"]},"replies":[{"fatal":"refused"}]},
        {"replies":["A"]}]}"#,
    );
    let gw = Gateway::new(Some(m), ResponseCache::in_memory());
    let s = run(dir.path(), &qas, &scenes, &gw, 1);
    assert_eq!(s.view_errors, 1);
    let rows: Vec<LabeledView> = read_jsonl(&dir.path().join("out/labels.jsonl")).unwrap();
    assert_eq!(rows[1].label, Label::Uncertain);
    assert!(rows[1].error.as_deref().unwrap().contains("refused"));
    assert_eq!(rows[0].label, Label::Positive);
}

#[test]
fn unknown_scene_is_rejected_before_any_call() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = BTreeMap::new();
    let qas = vec![qa("q1", "ghost", "Q", "A")];
    let m = mock(r#"{"rules":[{"replies":["A"]}]}"#);
    let gw = Gateway::new(Some(m.clone()), ResponseCache::in_memory());
    let templates = TemplateSet::default();
    let labels = dir.path().join("l.jsonl");
    let captions = dir.path().join("c.jsonl");
    let job = AnnotateJob {
        qa: &qas,
        scenes: &scenes,
        templates: &templates,
        model: "m",
        parallelism: 1,
        views_per_scene: 64,
        direct: false,
        labels_path: &labels,
        captions_path: &captions,
    };
    assert!(annotate_dataset(&job, &gw).is_err());
    assert_eq!(m.call_count(), 0);
}

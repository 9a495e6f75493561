use std::fs;
use std::path::Path;
use std::sync::Arc;

use studysim_core::config::Config;
use studysim_core::domain::Strategy;
use studysim_core::finetune::ExportMode;
use studysim_core::lm::{Backend, MockBackend};
use studysim_core::manifest::{list_files, RunManifest};
use studysim_core::orchestrator::{Pipeline, PipelineError, SplitSelection, StrategyChoice};
use studysim_core::testkit::{Fixture, FixtureSpec};

fn fixture() -> Fixture {
    let mut spec = FixtureSpec::new(2, 4);
    spec.exam_overrides = vec![(0, 2, 9)];
    Fixture::build(spec)
}

fn config(root: &Path) -> Config {
    let mut c = Config {
        seed: 7,
        workers: 3,
        ..Config::default()
    };
    c.simulation.trials = 2;
    c.simulation.utility_trials = 1;
    c.corpus.train_chapters = 2;
    c.corpus.test_chapters = 1;
    c.paths.runs_dir = root.join("runs");
    c.paths.cache_dir = root.join("cache");
    c
}

fn backend(fx: &Fixture) -> Arc<dyn Backend> {
    Arc::new(MockBackend::new(fx.mock_script()).unwrap())
}

fn zero_shot() -> StrategyChoice {
    StrategyChoice::new(Strategy::ZeroShot, None).unwrap()
}

fn full_run(fx: &Fixture, corpus: &Path, root: &Path) -> Pipeline {
    let mut p = Pipeline::create(config(root), backend(fx), corpus).unwrap();
    p.ingest(corpus, true).unwrap();
    let s = zero_shot();
    p.generate(&s, SplitSelection::TrainTest).unwrap();
    p.run_exams(&s, SplitSelection::Test).unwrap();
    p.utility(&s, SplitSelection::Train).unwrap();
    p.metrics(&s).unwrap();
    p.filter(&s, None).unwrap();
    p.emit_finetune(&s, None, ExportMode::Subject, None)
        .unwrap();
    p.report().unwrap();
    p
}

#[test]
fn end_to_end_run_writes_every_stage() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    fx.write_corpus(&corpus).unwrap();
    let p = full_run(&fx, &corpus, dir.path());
    let files = list_files(p.run_dir()).unwrap();
    for expected in [
        "corpus_stats.csv",
        "rejected.json",
        "sft_dataset.jsonl",
        "generate/zero-shot/qa_pairs.jsonl",
        "run/zero-shot/scores.json",
        "run/zero-shot/exam_scores.md",
        "utility/zero-shot/utilities.csv",
        "metrics/zero-shot/correlations.json",
        "filter/zero-shot/theta-0.1/accepted.json",
        "filter/zero-shot/threshold_sweep.csv",
        "report.md",
        "manifest.json",
        "accounting.json",
    ] {
        assert!(
            files.iter().any(|f| f == expected),
            "missing {expected}: {files:?}"
        );
    }
    assert!(files
        .iter()
        .any(|f| f.starts_with("finetune/zero-shot/theta-0.1/subject/")));
    let rejected = fs::read_to_string(p.run_dir().join("rejected.json")).unwrap();
    assert!(rejected.contains("microbiology-02-chapter-2"));
    let latest = fs::read_to_string(dir.path().join("runs/latest")).unwrap();
    assert_eq!(latest.trim(), p.run_id());

    // 3 sections, 2 trials, 6 split chapters; the fourth chemistry chapter is unassigned.
    let pairs = p.generated_pairs("zero-shot").unwrap();
    assert_eq!(pairs.len(), 3 * 2 * 6);
    let report = fs::read_to_string(p.run_dir().join("report.md")).unwrap();
    assert!(report.contains("| Subject | No-study | zero-shot |"));
}

#[test]
fn rerun_with_shared_cache_is_identical_and_free() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    fx.write_corpus(&corpus).unwrap();
    let a = full_run(&fx, &corpus, &dir.path().join("a"));

    let root_b = dir.path().join("b");
    let mut cfg = config(&root_b);
    cfg.paths.cache_dir = dir.path().join("a/cache");
    cfg.workers = 1;
    let counting = Arc::new(MockBackend::new(fx.mock_script()).unwrap());
    let mut b = Pipeline::create(cfg, counting.clone(), &corpus).unwrap();
    b.ingest(&corpus, true).unwrap();
    let s = zero_shot();
    b.generate(&s, SplitSelection::TrainTest).unwrap();
    b.run_exams(&s, SplitSelection::Test).unwrap();
    b.utility(&s, SplitSelection::Train).unwrap();
    b.metrics(&s).unwrap();
    b.filter(&s, None).unwrap();
    b.emit_finetune(&s, None, ExportMode::Subject, None)
        .unwrap();
    b.report().unwrap();
    assert_eq!(counting.calls(), 0);
    assert_eq!(a.run_id(), b.run_id());

    let skip = |f: &String| f != "cache.jsonl" && f != "accounting.json";
    let fa: Vec<String> = list_files(a.run_dir())
        .unwrap()
        .into_iter()
        .filter(skip)
        .collect();
    let fb: Vec<String> = list_files(b.run_dir())
        .unwrap()
        .into_iter()
        .filter(skip)
        .collect();
    assert_eq!(fa, fb);
    for f in &fa {
        assert_eq!(
            fs::read(a.run_dir().join(f)).unwrap(),
            fs::read(b.run_dir().join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn missing_upstream_stage_is_a_dependency_error() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    fx.write_corpus(&corpus).unwrap();

    let err = Pipeline::open(config(dir.path()), backend(&fx), None)
        .err()
        .unwrap();
    assert_eq!(err.exit_code(), 3);

    let mut p = Pipeline::create(config(dir.path()), backend(&fx), &corpus).unwrap();
    let err = p
        .generate(&zero_shot(), SplitSelection::TrainTest)
        .unwrap_err();
    assert!(matches!(err, PipelineError::Dependency { ref stage, .. } if stage == "ingest"));
    p.ingest(&corpus, true).unwrap();
    let err = p.utility(&zero_shot(), SplitSelection::Train).unwrap_err();
    assert_eq!(err.exit_code(), 3);

    // Tampering with an output invalidates the stage for its consumers.
    let chapter = p.run_dir().join("chapters/chemistry-01-chapter-1.json");
    let mut text = fs::read_to_string(&chapter).unwrap();
    text.push(' ');
    fs::write(&chapter, text).unwrap();
    let err = p
        .generate(&zero_shot(), SplitSelection::TrainTest)
        .unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}

#[test]
fn open_checks_config_and_backend() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    fx.write_corpus(&corpus).unwrap();
    let mut p = Pipeline::create(config(dir.path()), backend(&fx), &corpus).unwrap();
    p.ingest(&corpus, true).unwrap();
    let id = p.run_id().to_string();
    drop(p);

    let mut more_workers = config(dir.path());
    more_workers.workers = 1;
    let reopened = Pipeline::open(more_workers, backend(&fx), Some(&id)).unwrap();
    assert!(RunManifest::load(reopened.run_dir())
        .unwrap()
        .stages
        .contains_key("ingest"));

    let mut other_seed = config(dir.path());
    other_seed.seed = 8;
    let err = Pipeline::open(other_seed, backend(&fx), Some(&id))
        .err()
        .unwrap();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn other_strategies_run_through_generation() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    fx.write_corpus(&corpus).unwrap();
    let mut p = Pipeline::create(config(dir.path()), backend(&fx), &corpus).unwrap();
    p.ingest(&corpus, true).unwrap();
    for strategy in [Strategy::FewShot, Strategy::CoT, Strategy::BloomBased] {
        let s = StrategyChoice::new(strategy, None).unwrap();
        p.generate(&s, SplitSelection::Test).unwrap();
        p.run_exams(&s, SplitSelection::Test).unwrap();
        assert!(!p.generated_pairs(&s.label()).unwrap().is_empty());
    }
    let ft = StrategyChoice::new(Strategy::FineTuned, Some("ft:gpt-4o-mini:org:x".into())).unwrap();
    assert_eq!(ft.label(), "fine-tuned-ft_gpt-4o-mini_org_x");
    p.generate(&ft, SplitSelection::Test).unwrap();
    assert_eq!(
        StrategyChoice::new(Strategy::FineTuned, None)
            .unwrap_err()
            .exit_code(),
        2
    );
}

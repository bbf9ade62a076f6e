use startkit::sandbox::{load_corpus, run_scenario};

#[test]
fn every_scenario_behaves_as_declared() {
    let corpus = load_corpus().unwrap();
    let mut failed = Vec::new();
    for scenario in &corpus {
        let dir = tempfile::tempdir().unwrap();
        let report = run_scenario(scenario, dir.path(), None).unwrap();
        println!("{}", report.summary());
        if !report.passed() {
            failed.push(format!("{report:#?}"));
        }
    }
    assert!(failed.is_empty(), "{}", failed.join("\n"));
}

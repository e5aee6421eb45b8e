use cmdrec_core::logs::{sessions_from_texts, LogSchema};
use cmdrec_core::preprocess::{
    build_trigger_map, prepare_session, run_pipeline, PipelineConfig, PipelineReport, TriggerConfig, TriggerDecision,
};
use cmdrec_core::synth::{generate, GeneratorSpec};

fn check(spec: &GeneratorSpec) -> PipelineReport {
    let out = generate(spec).unwrap();
    for t in &out.truth.triggers {
        assert!(t.support >= 20, "spec {} plants a trigger with support {}", spec.seed, t.support);
    }
    let (sessions, _) = sessions_from_texts(&out.log_texts(), &LogSchema::default());
    let result = run_pipeline(&sessions, &PipelineConfig::standard(), &out.truth.lexicon, None);
    assert_eq!(result.sequences.len(), out.truth.sequences.len(), "seed {}", spec.seed);
    for (got, want) in result.sequences.iter().zip(&out.truth.sequences) {
        assert_eq!(got, want, "seed {}", spec.seed);
    }
    result.report
}

#[test]
fn clean_spec_round_trips() {
    let report = check(&GeneratorSpec { sessions: 300, seed: 1, ..Default::default() });
    assert_eq!(report.undo.undos + report.filter.aborted + report.substitute.removed_ambiguous, 0);
}

#[test]
fn noisy_multilingual_spec_round_trips() {
    let report = check(&GeneratorSpec { sessions: 300, ..GeneratorSpec::noisy(2) });
    assert!(report.filter.removed_by_rule.values().sum::<usize>() > 0);
    assert!(report.filter.aborted > 0);
    assert!(report.undo.undos > 0 && report.undo.redos > 0 && report.undo.anomalies > 0);
    assert!(report.substitute.substituted > 0 && report.substitute.removed_unfinished > 0);
    assert!(report.substitute.removed_ambiguous > 0);
}

#[test]
fn planted_triggers_are_recovered() {
    let spec = GeneratorSpec { sessions: 400, ..GeneratorSpec::noisy(4) };
    let out = generate(&spec).unwrap();
    let (sessions, _) = sessions_from_texts(&out.log_texts(), &LogSchema::default());
    let config = PipelineConfig::standard();
    let mut report = PipelineReport::default();
    let prepared: Vec<_> =
        sessions.iter().map(|s| prepare_session(s, &config, &out.truth.lexicon, &mut report)).collect();
    let map = build_trigger_map(&prepared, &config.triggers, &config.ambiguous);
    let mut found = map.triggers();
    found.sort();
    let mut planted: Vec<_> = out.truth.triggers.iter().map(|t| (t.tool, t.event_loc)).collect();
    planted.sort();
    assert_eq!(found, planted);
    for e in map.entries.values() {
        let total: f64 = e.distribution().iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-9);
        if let TriggerDecision::TriggersEvent(_) = e.decision {
            assert!(!e.insufficient_data);
        }
    }
}

#[test]
fn trigger_decisions_survive_corpus_duplication() {
    let spec = GeneratorSpec { sessions: 200, ..GeneratorSpec::noisy(9) };
    let out = generate(&spec).unwrap();
    let (sessions, _) = sessions_from_texts(&out.log_texts(), &LogSchema::default());
    let config = PipelineConfig::standard();
    let mut report = PipelineReport::default();
    let prepared: Vec<_> = sessions.iter().map(|s| prepare_session(s, &config, &out.truth.lexicon, &mut report)).collect();
    let once = build_trigger_map(&prepared, &config.triggers, &config.ambiguous);
    for copies in [2usize, 3] {
        let repeated: Vec<_> = (0..copies).flat_map(|_| prepared.iter().cloned()).collect();
        let scaled = TriggerConfig { n_min: config.triggers.n_min * copies, ..config.triggers };
        let many = build_trigger_map(&repeated, &scaled, &config.ambiguous);
        assert_eq!(once.entries.len(), many.entries.len());
        for (key, e) in &once.entries {
            let m = &many.entries[key];
            assert_eq!(m.decision, e.decision, "{key:?} x{copies}");
            assert_eq!(m.insufficient_data, e.insufficient_data);
            for ((o1, p1), (o2, p2)) in e.distribution().iter().zip(m.distribution()) {
                assert_eq!(*o1, o2);
                assert!((p1 - p2).abs() < 1e-12);
            }
        }
    }
}

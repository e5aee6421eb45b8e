#![allow(dead_code)]

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use cmdrec_core::logs::{format_log_line, header_line, sessions_from_texts, Action, CommandEvent, LogSchema, Timestamp};
use cmdrec_core::preprocess::{run_pipeline, CleanItem, PipelineConfig};
use cmdrec_core::synth::{generate, GeneratorSpec};
use cmdrec_service::commands::{preprocess, train_cmd, PreprocessArgs, TrainArgs};
use cmdrec_service::config::FileConfig;
use cmdrec_service::{LogTailer, OnlinePipeline, SessionStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

/// The planted loop every fixture session follows.
pub const CYCLE: [(&str, i64); 4] = [("Wall", 1001), ("Door", 1002), ("Window", 1003), ("Slab", 1004)];

pub fn next_in_cycle(name: &str) -> &'static str {
    let i = CYCLE.iter().position(|(n, _)| *n == name).expect("cycle command");
    CYCLE[(i + 1) % CYCLE.len()].0
}

pub const T0: i64 = 1_700_000_000_000;

/// `Event` + `End Event` lines for one completed command.
pub fn command_lines(session: &str, ms: i64, name: &str, loc: i64) -> Vec<String> {
    [Action::Event, Action::EndEvent]
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let e = CommandEvent::undo(*a, name, loc);
            format_log_line(session, Timestamp(ms + i as i64), e.category(), &e.message())
        })
        .collect()
}

/// Sessions walking the cycle from a random start.
pub fn cycle_log(sessions: usize, len: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = vec![header_line()];
    for s in 0..sessions {
        let start = rng.random_range(0..CYCLE.len());
        for i in 0..len {
            let (name, loc) = CYCLE[(start + i) % CYCLE.len()];
            let ms = T0 + s as i64 * 10_000_000 + i as i64 * 2_000;
            lines.extend(command_lines(&format!("s{s:04}"), ms, name, loc));
        }
    }
    lines.join("\n") + "\n"
}

pub fn append(path: &Path, text: &str) {
    let mut f = OpenOptions::new().create(true).append(true).open(path).unwrap();
    f.write_all(text.as_bytes()).unwrap();
    f.flush().unwrap();
}

/// A preprocessed cycle corpus and a mistral checkpoint trained on it.
pub struct Fixture {
    pub dir: TempDir,
    pub data: PathBuf,
    pub checkpoint: PathBuf,
}

pub fn trained_fixture(epochs: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let logs = dir.path().join("logs");
    std::fs::create_dir_all(&logs).unwrap();
    std::fs::write(logs.join("a.log"), cycle_log(240, 14, 1)).unwrap();
    let data = dir.path().join("data");
    let cfg = FileConfig::default();
    preprocess(&cfg, &PreprocessArgs { logs: vec![logs], out: data.clone(), lexicon: None, triggers: None, seed: None })
        .unwrap();
    let run = dir.path().join("run");
    train_cmd(
        &cfg,
        &TrainArgs {
            data: data.clone(),
            run: run.clone(),
            preset: Some("mistral".into()),
            epochs: Some(epochs),
            lr: Some(3e-3),
            batch_size: Some(16),
            seed: None,
            scheme: None,
            init: None,
            lora_rank: None,
        },
    )
    .unwrap();
    Fixture { dir, data, checkpoint: run.join("model.ckpt") }
}

/// Streams a generated corpus through tailers and the session store with
/// random byte boundaries, then compares every buffer with the batch pipeline
/// run under the same trigger map. Returns the number of sessions compared.
pub fn online_matches_batch(spec: &GeneratorSpec, stream_seed: u64) -> usize {
    let out = generate(spec).unwrap();
    let texts = out.log_texts();
    let (sessions, _) = sessions_from_texts(&texts, &LogSchema::default());
    let config = PipelineConfig::standard();
    let inferred = run_pipeline(&sessions, &config, &out.truth.lexicon, None);
    let batch = run_pipeline(&sessions, &config, &out.truth.lexicon, Some(&inferred.trigger_map));

    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<PathBuf> = (0..texts.len()).map(|i| dir.path().join(format!("f{i}.log"))).collect();
    let mut tailers: Vec<LogTailer> = paths.iter().map(|p| LogTailer::new(p.clone())).collect();
    let mut store = SessionStore::new(OnlinePipeline {
        config: config.clone(),
        lexicon: out.truth.lexicon.clone(),
        triggers: inferred.trigger_map.clone(),
        max_len: usize::MAX,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
    let mut cursor = vec![0usize; texts.len()];
    while cursor.iter().zip(&texts).any(|(c, t)| *c < t.len()) {
        for (f, text) in texts.iter().enumerate() {
            if cursor[f] >= text.len() || rng.random_bool(0.3) {
                continue;
            }
            let mut end = (cursor[f] + rng.random_range(1..4000)).min(text.len());
            while !text.is_char_boundary(end) {
                end += 1;
            }
            append(&paths[f], &text[cursor[f]..end]);
            cursor[f] = end;
        }
        for t in &mut tailers {
            let records = t.poll().unwrap();
            store.ingest(&records);
        }
    }
    for t in &mut tailers {
        let records = t.poll().unwrap();
        store.ingest(&records);
    }

    let want: HashMap<&str, &[CleanItem]> =
        batch.sequences.iter().map(|s| (s.session_id.as_str(), s.items.as_slice())).collect();
    for id in store.ids() {
        let got = store.get(&id).unwrap().buffer();
        let expected = want.get(id.as_str()).copied().unwrap_or(&[]);
        assert_eq!(got, expected, "session {id}, spec seed {}, stream seed {stream_seed}", spec.seed);
    }
    for id in want.keys() {
        assert!(store.get(id).is_some(), "session {id} missing online");
    }
    want.len()
}

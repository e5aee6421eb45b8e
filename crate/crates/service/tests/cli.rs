use std::path::Path;
use std::process::Command;

fn cmdrec(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_cmdrec")).args(args).env("RUST_LOG", "warn").output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(out.status.success(), "{args:?}\n{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    stdout
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_preprocess_train_eval_stats() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, data, run) = (dir.path().join("corpus"), dir.path().join("data"), dir.path().join("run"));
    cmdrec(&["synth", "--out", p(&corpus), "--sessions", "150", "--seed", "3", "--noisy"]);
    let logs = corpus.join("logs");
    assert!(std::fs::read_dir(&logs).unwrap().count() > 0);

    let lexicon = corpus.join("truth/lexicon.tsv");
    let out = cmdrec(&["preprocess", "--logs", p(&logs), "--out", p(&data), "--lexicon", p(&lexicon)]);
    assert!(out.contains("train /"), "{out}");
    for f in ["train.tsv", "validation.tsv", "vocab.tsv", "time_norm.json", "triggers.tsv", "pipeline.toml"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let config = dir.path().join("cmdrec.toml");
    std::fs::write(&config, "[train]\nbatch_size = 16\nlr = 0.003\n").unwrap();
    let out = cmdrec(&["--config", p(&config), "train", "--data", p(&data), "--run", p(&run), "--preset", "llama2", "--epochs", "1"]);
    assert!(out.contains("epoch   1"), "{out}");
    let ckpt = run.join("model.ckpt");
    assert!(ckpt.exists() && run.join("metrics.jsonl").exists());

    let out = cmdrec(&["eval", "--data", p(&data), "--checkpoint", p(&ckpt), "--k", "1,5"]);
    assert!(out.to_lowercase().contains("recall"), "{out}");

    let lora_run = dir.path().join("lora");
    cmdrec(&["train", "--data", p(&data), "--run", p(&lora_run), "--init", p(&ckpt), "--lora-rank", "2", "--epochs", "1"]);

    let out = cmdrec(&["stats", "--data", p(&data)]);
    assert!(out.contains("validation"));
    cmdrec(&["stats", "--logs", p(&logs)]);
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "[serve]\nbogus = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cmdrec"))
        .args(["--config", config.to_str().unwrap(), "stats", "--data", "nowhere"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

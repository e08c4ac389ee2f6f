use std::fs;
use std::path::Path;
use std::process::Command;

const TINY: &str = r#"
episodes = 4
steps_per_episode = 5
eval_scenarios = 2
seeds = [3]
rbf_draws = 200
snr_grid_db = [0.0, 10.0]

[td3]
warmup_episodes = 1
batch_size = 8
actor_hidden = [16]
critic_hidden = [16]
eval_interval = 2
tail_episodes = 2
"#;

fn cli(dir: &Path, args: &[&str]) -> std::process::Output {
    let config = dir.join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    Command::new(env!("CARGO_BIN_EXE_crx-isac"))
        .args(args)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("out"))
        .env("CRX_ISAC_THREADS", "1")
        .output()
        .unwrap()
}

#[test]
fn train_then_eval_reuses_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(dir.path(), &["train", "--strategy", "cr_ma_td3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let results = dir.path().join("out");
    assert!(results.join("checkpoint_CR_MA_TD3_seed3.json").exists());
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(results.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["overrides"]["episodes"], "4");

    let trained = fs::read_to_string(results.join("train.csv")).unwrap();
    let out = cli(dir.path(), &["eval", "--strategy", "CR_MA_TD3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let evaluated = fs::read_to_string(results.join("eval.csv")).unwrap();
    let rows = |s: &str| s.lines().skip(1).map(str::to_owned).collect::<Vec<_>>();
    assert_eq!(rows(&trained), rows(&evaluated));
}

#[test]
fn snr_sweep_writes_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(dir.path(), &["sweep-snr", "--strategy", "FPA_RBF", "--seed", "9"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("out/sweep_snr.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| l.starts_with("FPA_RBF")).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.split(',').nth(1) == Some("9")));
}

#[test]
fn bad_input_is_an_error_exit() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(dir.path(), &["train", "--strategy", "TD3"]);
    assert_eq!(out.status.code(), Some(2));
    fs::write(dir.path().join("bad.toml"), "n_elements = 8\nwidth = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_crx-isac"))
        .args(["verify", "--config"])
        .arg(dir.path().join("bad.toml"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("width"));
}

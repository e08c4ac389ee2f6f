//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1-7 are the oracle checks at full size. Criteria 8-10 train desk
//! scale agents (N = 8, K = 2, L_p = 2, 300 episodes); the ten-seed strategy
//! comparison of criterion 9 also provides the three seeds of criterion 8.
//! Criterion 11 repeats a short training and sweep and compares bytes.
//!
//! `CRX_ACCEPTANCE=oracles` restricts the run to criteria 1-7 and 11.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use crx_isac::harness::{self, EvaluationRecord, ExperimentConfig, Profile, RunInfo, StrategyRun, StrategyTag, SweepAxis};
use crx_isac::verify::{self, CheckOutcome};
use crx_isac::Result;

struct Line {
    id: usize,
    passed: bool,
    detail: String,
}

fn oracle_line(id: usize, outcome: CheckOutcome, budget_s: Option<f64>) -> Line {
    let in_time = budget_s.is_none_or(|b| outcome.elapsed_s < b);
    let budget = budget_s.map_or(String::new(), |b| format!(", budget {b} s"));
    Line {
        id,
        passed: outcome.passed() && in_time,
        detail: format!("{}{budget}", outcome.to_string().trim_start_matches("PASS ").trim_start_matches("FAIL ")),
    }
}

fn oracles(desk: &ExperimentConfig) -> Result<Vec<Line>> {
    let env = desk.env_config(StrategyTag::CrMaTd3)?;
    Ok(vec![
        oracle_line(1, verify::crb_matches_inverse_fim(100, 11)?, Some(5.0)),
        oracle_line(2, verify::fim_matches_likelihood(20, 12)?, Some(30.0)),
        oracle_line(3, verify::derivatives_match_differences(100, 13)?, Some(2.0)),
        oracle_line(4, verify::sinr_matches_monte_carlo(10, 100_000, 14)?, Some(60.0)),
        oracle_line(5, verify::decoding_is_feasible(&env, 10_000, 15)?, Some(5.0)),
        oracle_line(6, verify::crb_snr_slope(&env, 16)?, None),
        oracle_line(7, verify::network_gradients_match_differences(17)?, Some(10.0)),
    ])
}

fn crb_of(runs: &[StrategyRun], records: &[EvaluationRecord], strategy: StrategyTag, seed: u64) -> f64 {
    runs.iter()
        .zip(records)
        .find(|(r, _)| r.strategy == strategy && r.seed == seed)
        .map(|(_, rec)| rec.crb_db)
        .expect("every strategy was run for every seed")
}

/// Criteria 8 and 9 from one set of ten-seed runs.
fn learning_criteria(desk: &ExperimentConfig) -> Result<Vec<Line>> {
    let mut cfg = desk.clone();
    cfg.seeds = (0..10).collect();
    let started = Instant::now();
    let runs = harness::run_strategies(&StrategyTag::ALL, &cfg)?;
    let per_training = started.elapsed().as_secs_f64() / (3 * cfg.seeds.len()) as f64;
    let records: Vec<EvaluationRecord> = runs.iter().map(|r| r.record(&cfg, cfg.snr_db)).collect::<Result<_>>()?;

    let mut lines = Vec::new();
    let mut all_seeds = true;
    let mut parts = Vec::new();
    for seed in 0..3u64 {
        let run = runs
            .iter()
            .find(|r| r.strategy == StrategyTag::CrMaTd3 && r.seed == seed)
            .expect("seed was trained");
        let trained = run.training.as_ref().expect("learned strategy").tail_eval_reward(cfg.td3.tail_episodes);
        let random = harness::random_policy_reward(StrategyTag::CrMaTd3, &cfg, seed)?;
        // "at least twice the random mean", read as a gain over random of at least |random|
        let ok = trained - random >= random.abs();
        all_seeds &= ok;
        parts.push(format!("seed {seed}: trained {trained:.5} random {random:.5}{}", if ok { "" } else { " (short)" }));
    }
    lines.push(Line {
        id: 8,
        passed: all_seeds && per_training < 900.0,
        detail: format!("{}; {per_training:.0} s per training", parts.join("; ")),
    });

    let mut ordered = 0;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let c = |s| crb_of(&runs, &records, s, seed);
        let (cr, ma, fpa, rbf) = (
            c(StrategyTag::CrMaTd3),
            c(StrategyTag::MaTd3),
            c(StrategyTag::FpaTd3),
            c(StrategyTag::FpaRbf),
        );
        if cr <= ma && ma <= fpa && fpa <= rbf {
            ordered += 1;
        }
        rows.push(format!("{seed}:[{cr:.1} {ma:.1} {fpa:.1} {rbf:.1}]"));
    }
    lines.push(Line {
        id: 9,
        passed: ordered >= 8,
        detail: format!("ordering CR_MA <= MA <= FPA <= RBF held on {ordered}/10 seeds; CRB dB {}", rows.join(" ")),
    });

    // the SINR threshold is a free parameter; re-assess the trained policies at neighbouring values
    let mut sens = Vec::new();
    for gamma_db in [0.0, 5.0, 10.0] {
        let mut alt = cfg.clone();
        alt.sinr_threshold_db = gamma_db;
        let mut feasible = 0.0;
        let mut reward = 0.0;
        for run in runs.iter().filter(|r| r.strategy == StrategyTag::CrMaTd3) {
            let env = alt.env_config(StrategyTag::CrMaTd3)?;
            let a = run.policy.assess(&env, &run.scenarios, alt.noise_power(alt.snr_db))?;
            feasible += a.feasibility;
            reward += a.mean_reward;
        }
        let n = cfg.seeds.len() as f64;
        sens.push(format!("Γ={gamma_db} dB: feasible {:.3}, reward {:.5}", feasible / n, reward / n));
    }
    println!("info  SINR-threshold sensitivity of CR_MA_TD3 policies trained at 5 dB: {}", sens.join("; "));
    Ok(lines)
}

fn region_criterion(desk: &ExperimentConfig) -> Result<Line> {
    let mut cfg = desk.clone();
    cfg.strategy = StrategyTag::CrMaTd3;
    let (_, records) = harness::region_sweep(&cfg)?;
    let summary = harness::summarize(&records, SweepAxis::Region);
    let means: Vec<f64> = summary.iter().map(|s| s.2).collect();
    let inversions = means.windows(2).filter(|w| w[1] > w[0]).count();
    let points: Vec<String> = summary.iter().map(|s| format!("{}λ {:.2} dB", s.1, s.2)).collect();
    Ok(Line {
        id: 10,
        passed: means.len() == 4 && inversions <= 1,
        detail: format!("{inversions} adjacent inversions; {}", points.join(", ")),
    })
}

fn csv_files(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            let name = path.file_name().expect("file").to_string_lossy().into_owned();
            out.push((name, fs::read(&path)?));
        }
    }
    out.sort();
    Ok(out)
}

fn determinism_criterion(desk: &ExperimentConfig) -> Result<Line> {
    let mut cfg = desk.clone();
    cfg.episodes = 40;
    cfg.seeds = vec![5];
    cfg.rbf_draws = 2000;
    let info = RunInfo {
        command: "acceptance".into(),
        profile: Profile::Desk,
        wall_time_s: 0.0,
    };
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir()?;
        let (runs, records) = harness::snr_sweep(&cfg, &[StrategyTag::FpaRbf, StrategyTag::CrMaTd3])?;
        harness::emit_results(dir.path(), "snr_sweep", &cfg, &info, &records, Some(SweepAxis::Snr), &runs)?;
        snapshots.push(csv_files(dir.path())?);
    }
    let identical = snapshots[0] == snapshots[1] && !snapshots[0].is_empty();
    let bytes: usize = snapshots[0].iter().map(|(_, b)| b.len()).sum();
    Ok(Line {
        id: 11,
        passed: identical,
        detail: format!("{} CSV files ({bytes} bytes) compared across two runs", snapshots[0].len()),
    })
}

fn main() -> ExitCode {
    let desk = ExperimentConfig::desk();
    let oracles_only = std::env::var("CRX_ACCEPTANCE").is_ok_and(|v| v == "oracles");
    let mut lines = Vec::new();
    let mut errors = Vec::new();
    let mut collect = |r: Result<Vec<Line>>, what: &str| match r {
        Ok(mut l) => lines.append(&mut l),
        Err(e) => errors.push(format!("{what}: {e}")),
    };
    collect(oracles(&desk), "oracles");
    if !oracles_only {
        collect(learning_criteria(&desk), "criteria 8-9");
        collect(region_criterion(&desk).map(|l| vec![l]), "criterion 10");
    }
    collect(determinism_criterion(&desk).map(|l| vec![l]), "criterion 11");
    lines.sort_by_key(|l| l.id);
    for l in &lines {
        println!("{} criterion {:>2}: {}", if l.passed { "PASS" } else { "FAIL" }, l.id, l.detail);
    }
    for e in &errors {
        println!("ERROR {e}");
    }
    let failed = lines.iter().filter(|l| !l.passed).count() + errors.len();
    println!("acceptance: {} passed, {failed} failed", lines.len() + errors.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

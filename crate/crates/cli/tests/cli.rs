//! End-to-end runs of the `scengen` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn scengen(out: &Path, args: &[&str]) -> Output {
    let transcript = fixtures().join("transcript.json");
    Command::new(env!("CARGO_BIN_EXE_scengen"))
        .arg("--replay")
        .arg(transcript)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn fixture(rel: &str) -> String {
    fixtures().join(rel).to_string_lossy().into_owned()
}

fn small_config(dir: &Path, body: &str) -> String {
    let path = dir.join("small.toml");
    std::fs::write(&path, format!("{body}[search]\npopulation_size = 6\ngenerations = 3\n")).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn extract_and_logicalize_reproduce_golden_files() {
    let tmp = TempDir::new().unwrap();
    for name in ["curve_rear_end", "overtake_three_lane", "straight_cut_in"] {
        let o = scengen(tmp.path(), &["extract", &fixture(&format!("reports/{name}.txt"))]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let ips = tmp.path().join(format!("{name}.ips"));
        assert_eq!(
            std::fs::read_to_string(&ips).unwrap(),
            std::fs::read_to_string(fixture(&format!("golden/{name}.ips"))).unwrap()
        );
        let o = scengen(tmp.path(), &["logicalize", &ips.to_string_lossy()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let lsc = std::fs::read_to_string(tmp.path().join(format!("{name}.lsc"))).unwrap();
        assert_eq!(lsc, std::fs::read_to_string(fixture(&format!("golden/{name}.lsc"))).unwrap());
    }
}

#[test]
fn failures_map_to_exit_codes() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&scengen(tmp.path(), &["extract", &fixture("reports/illegible.txt")])), 3);
    assert_eq!(code(&scengen(tmp.path(), &["extract", "no-such-report.txt"])), 2);
    assert_eq!(code(&scengen(tmp.path(), &["search", "no-such-scenario.lsc"])), 2);
    let incomplete = fixture("defaults_incomplete.toml");
    let ips = fixture("golden/overtake_three_lane.ips");
    assert_eq!(code(&scengen(tmp.path(), &["logicalize", &ips, "--defaults", &incomplete])), 3);
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "repetitions = 0\n").unwrap();
    let bad = bad.to_string_lossy();
    assert_eq!(code(&scengen(tmp.path(), &["--config", &bad, "search", &fixture("scenarios/toy_cut_in.lsc")])), 2);
    std::fs::write(tmp.path().join("broken.toml"), "repetitions = [").unwrap();
    let broken = tmp.path().join("broken.toml").to_string_lossy().into_owned();
    assert_eq!(code(&scengen(tmp.path(), &["--config", &broken, "config"])), 2);
    std::fs::write(tmp.path().join("typo.toml"), "[search]\ngeneratons = 3\n").unwrap();
    let typo = tmp.path().join("typo.toml").to_string_lossy().into_owned();
    assert_eq!(code(&scengen(tmp.path(), &["--config", &typo, "config"])), 2);
    assert_eq!(code(&scengen(tmp.path(), &["no-such-command"])), 2);
}

#[test]
fn run_continues_past_a_failed_report() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), "");
    let o = scengen(
        tmp.path(),
        &["--config", &cfg, "run", &fixture("reports/illegible.txt"), &fixture("reports/straight_cut_in.txt")],
    );
    assert_eq!(code(&o), 3);
    assert!(tmp.path().join("straight_cut_in/history.jsonl").is_file());
    assert!(!tmp.path().join("illegible.ips").exists());
}

#[test]
fn search_is_deterministic_and_honours_generations() {
    let tmp = TempDir::new().unwrap();
    let scenario = fixture("scenarios/toy_cut_in.lsc");
    let mut histories = Vec::new();
    for (i, jobs) in ["1", "4"].iter().enumerate() {
        let out = tmp.path().join(i.to_string());
        let args = ["--seed", "11", "--jobs", jobs, "search", &scenario, "--population", "8", "--generations", "4"];
        let o = scengen(&out, &args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        histories.push(std::fs::read(out.join("toy_cut_in/history.jsonl")).unwrap());
        let critical: Vec<serde_json::Value> =
            serde_json::from_str(&std::fs::read_to_string(out.join("toy_cut_in/critical.json")).unwrap()).unwrap();
        for c in &critical {
            let idx = c["sim_index"].as_u64().unwrap();
            assert!(out.join(format!("toy_cut_in/critical/{idx}.ctc")).is_file());
            assert!(c["fitness"]["mhd"].as_f64().unwrap() < 4.5);
        }
    }
    assert_eq!(histories[0], histories[1]);
    assert_eq!(String::from_utf8_lossy(&histories[0]).lines().count(), 32);

    let out = tmp.path().join("one");
    let o = scengen(&out, &["search", &scenario, "--population", "8", "--generations", "1"]);
    assert_eq!(code(&o), 0);
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(out.join("toy_cut_in/history.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 8);
    assert!(lines.iter().all(|l| l["generation"] == 1));

    let o = scengen(&out, &["search", &scenario, "--random", "--population", "8", "--generations", "2"]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_to_string(out.join("toy_cut_in-random/history.jsonl")).unwrap().lines().count(), 16);
}

fn population_stats(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().clone();
    r.records()
        .map(|rec| headers.iter().zip(rec.unwrap().iter()).map(|(h, v)| (h.into(), v.into())).collect())
        .collect()
}

#[test]
fn campaign_summary_matches_per_run_metrics() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), "");
    let out = tmp.path().join("out");
    let o = scengen(
        &out,
        &[
            "--config",
            &cfg,
            "campaign",
            "--repetitions",
            "2",
            &fixture("scenarios/toy_cut_in.lsc"),
            &fixture("golden/straight_cut_in.lsc"),
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let runs = read_csv(&out.join("metrics.csv"));
    assert_eq!(runs.len(), 8);
    let summary = read_csv(&out.join("summary.csv"));
    assert_eq!(summary.len(), 4);
    for row in &summary {
        let mine: Vec<&BTreeMap<String, String>> =
            runs.iter().filter(|r| r["scenario"] == row["scenario"] && r["method"] == row["method"]).collect();
        assert_eq!(mine.len(), 2);
        for metric in ["n_types", "type_expos_rate", "sim_for_first_type", "sim_for_all_types"] {
            let values: Vec<f64> = mine.iter().filter_map(|r| r[metric].parse().ok()).collect();
            let (mean_cell, std_cell) = (&row[&format!("{metric}_mean")], &row[&format!("{metric}_std")]);
            if values.is_empty() {
                assert_eq!(mean_cell, "not reached");
                continue;
            }
            let (mean, std) = population_stats(&values);
            assert!((mean_cell.parse::<f64>().unwrap() - mean).abs() < 1e-12, "{metric}");
            assert!((std_cell.parse::<f64>().unwrap() - std).abs() < 1e-12, "{metric}");
        }
    }
    for f in ["summary.json", "plot_cumulative_types.csv", "plot_type_counts.csv", "config.toml"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    assert_eq!(std::fs::read_dir(out.join("histories")).unwrap().count(), 8);
}

#[test]
fn single_repetition_has_zero_spread() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), "random_baseline = false\n");
    let out = tmp.path().join("out");
    let o = scengen(&out, &["--config", &cfg, "campaign", "--repetitions", "1", &fixture("scenarios/toy_cut_in.lsc")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = read_csv(&out.join("summary.csv"));
    assert_eq!(summary.len(), 1);
    assert_eq!(summary[0]["n_types_std"], "0");
    assert_eq!(summary[0]["type_expos_rate_std"], "0");

    let empty = small_config(tmp.path(), "");
    assert_eq!(code(&scengen(&out, &["--config", &empty, "campaign"])), 2);
}

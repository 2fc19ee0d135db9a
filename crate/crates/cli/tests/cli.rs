use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn swarmsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swarmsim"))
        .args(args)
        .env_remove("SWARMSIM_OUT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn run_preset_writes_one_row_per_isp() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&swarmsim(&["run", "--preset", "homogeneous-100x10-k4", "--seed", "2", "--out", out]));
    let run = dir.path().join("homogeneous-100x10-k4-s2");
    let isp = read(&run.join("isp_metrics.csv"));
    assert_eq!(isp.lines().count(), 11);
    assert!(isp.starts_with("isp,n_peers,overhead,p95"));
    assert_eq!(read(&run.join("peers.csv")).lines().count(), 102);
    let manifest: serde_json::Value = serde_json::from_str(&read(&run.join("manifest.json"))).unwrap();
    assert_eq!(manifest["seed"], 2);
    assert_eq!(manifest["policy"], "locality");
    for f in ["scenario.toml", "isp_metrics.csv", "peers.csv", "partitions.csv", "events.jsonl"] {
        assert!(manifest["files"][f].is_string(), "{f} missing from manifest");
    }
}

#[test]
fn same_invocation_twice_gives_identical_csvs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(&swarmsim(&[
            "run",
            "--preset",
            "heterogeneous-90x3-k2",
            "--seed",
            "7",
            "--out",
            d.path().to_str().unwrap(),
        ]));
    }
    for f in ["isp_metrics.csv", "peers.csv", "partitions.csv", "events.jsonl", "manifest.json"] {
        let x = read(&a.path().join("heterogeneous-90x3-k2-s7").join(f));
        let y = read(&b.path().join("heterogeneous-90x3-k2-s7").join(f));
        assert_eq!(x, y, "{f} differs");
    }
}

#[test]
fn exported_scenario_reruns_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let out = swarmsim(&["export-scenario", "--preset", "homogeneous-40x4-k2", "--seed", "5"]);
    ok(&out);
    let file = dir.path().join("s.toml");
    fs::write(&file, &out.stdout).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&swarmsim(&["run", file.to_str().unwrap(), "--out", a.to_str().unwrap()]));
    ok(&swarmsim(&["run", "--preset", "homogeneous-40x4-k2", "--seed", "5", "--out", b.to_str().unwrap()]));
    for f in ["isp_metrics.csv", "peers.csv", "scenario.toml"] {
        let x = read(&a.join("homogeneous-40x4-k2-s5").join(f));
        assert_eq!(x, read(&b.join("homogeneous-40x4-k2-s5").join(f)), "{f}");
    }
    assert_eq!(
        read(&a.join("homogeneous-40x4-k2-s5/scenario.toml")),
        String::from_utf8(out.stdout).unwrap()
    );
}

#[test]
fn missing_file_is_a_usage_error() {
    let out = swarmsim(&["run", "does/not/exist.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does/not/exist.toml"));
    let out = swarmsim(&["run", "--preset", "homogeneous-10x3-k2"]);
    assert_eq!(out.status.code(), Some(2));
    let out = swarmsim(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_scenario_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = swarmsim(&["export-scenario", "--preset", "homogeneous-40x4-k2"]);
    let text = String::from_utf8(out.stdout).unwrap().replacen("t_max = ", "t_max = \"soon\" #", 1);
    let file = dir.path().join("bad.toml");
    fs::write(&file, &text).unwrap();
    let line = text.lines().position(|l| l.starts_with("t_max")).unwrap() + 1;
    let out = swarmsim(&["validate", file.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&format!("line {line}")), "{err}");
}

#[test]
fn sweep_aggregates_repetitions() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("ks.toml");
    fs::write(
        &spec,
        "base = \"homogeneous-40x4-k2\"\nparameter = \"k_outgoing\"\nvalues = [1, 40]\nrepetitions = 2\n",
    )
    .unwrap();
    let o = dir.path().to_str().unwrap();
    ok(&swarmsim(&["sweep", spec.to_str().unwrap(), "--out", o, "--jobs", "2"]));
    let csv = read(&dir.path().join("ks/sweep.csv"));
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("1,2,0,"));
    assert_eq!(fs::read_dir(dir.path().join("ks/runs")).unwrap().count(), 4);
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "base = \"homogeneous-40x4-k2\"\nparameter = \"k_outgoing\"\nvalues = []\n").unwrap();
    assert_eq!(swarmsim(&["sweep", bad.to_str().unwrap(), "--out", o]).status.code(), Some(2));
}

#[test]
fn estimate_with_curves_file() {
    let dir = tempfile::tempdir().unwrap();
    let census = dir.path().join("census.csv");
    fs::write(
        &census,
        "torrent_id,content_bytes\nsolo,1000\nas_id,peer_count\n1,1\n2,1\n3,1\n4,1\n",
    )
    .unwrap();
    let curves = dir.path().join("curves.csv");
    fs::write(&curves, "peers_per_as,locality,locality_pm_rr\n5,0.4,0.45\n50,0.9,0.95\n").unwrap();
    let o = dir.path().join("est");
    ok(&swarmsim(&[
        "estimate",
        census.to_str().unwrap(),
        "--curves",
        curves.to_str().unwrap(),
        "--out",
        o.to_str().unwrap(),
    ]));
    let totals = read(&o.join("totals.csv"));
    assert!(totals.contains("bittorrent,3000\n"), "{totals}");
    assert!(totals.contains("locality,3000\n"), "{totals}");
    assert!(totals.contains("ideal,3000\n"), "{totals}");
    assert_eq!(read(&o.join("cumulative.csv")).lines().count(), 2);
    assert_eq!(read(&o.join("per_as.csv")).lines().count(), 5);
    let broken = dir.path().join("broken.csv");
    fs::write(&broken, "torrent_id,content_bytes\nx,10\n1,zero\n").unwrap();
    let out = swarmsim(&["estimate", broken.to_str().unwrap(), "--curves", curves.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn estimate_calibrates_from_run_directories() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let r = runs.to_str().unwrap();
    for p in ["homogeneous-60x6-bt", "homogeneous-60x6-k2", "homogeneous-60x6-k2-pm-rr"] {
        ok(&swarmsim(&["run", "--preset", p, "--seed", "3", "--out", r]));
    }
    let census = dir.path().join("census.csv");
    ok(&swarmsim(&[
        "gen-census",
        "--torrents",
        "40",
        "--max-ases",
        "20",
        "--out",
        census.to_str().unwrap(),
    ]));
    let o = dir.path().join("est");
    let out = swarmsim(&[
        "estimate",
        census.to_str().unwrap(),
        "--calibrate-from",
        r,
        "--out",
        o.to_str().unwrap(),
    ]);
    ok(&out);
    let curves = read(&o.join("curves.csv"));
    let row = curves.lines().find(|l| l.starts_with("10,")).expect("anchor at 10 peers");
    let plain: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
    assert!(plain > 0.3, "{curves}");
    // The census has ASes well beyond 10 peers.
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn presets_and_validate() {
    let out = swarmsim(&["presets"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("partition-pm"));
    let dir = tempfile::tempdir().unwrap();
    let census = dir.path().join("c.csv");
    ok(&swarmsim(&["gen-census", "--torrents", "5", "--out", census.to_str().unwrap()]));
    let out = swarmsim(&["validate", census.to_str().unwrap()]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("valid census"));
}

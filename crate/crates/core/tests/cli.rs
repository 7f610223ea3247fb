use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fpindex::minutiae::{MinutiaeSet, DEFAULT_SIGMA, MAP_SIZE};
use fpindex::synth::{random_templates, well_separated_set};

fn fpindex(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpindex"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\nstderr: {}", o.status.code(), stderr(&o));
    o
}

/// A small synthetic gallery and probe set written by the `synth` subcommand.
fn synth_dir(n: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let n = n.to_string();
    ok(fpindex(
        &["--seed", "7", "synth", "--n", &n, "--probes", "5", "--out-dir", "."],
        dir.path(),
    ));
    dir
}

#[test]
fn verify_identical_templates_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let t = &random_templates(1, 3)[0];
    fs::write(dir.path().join("t1"), t.to_text()).unwrap();
    fs::write(dir.path().join("t2"), t.to_text()).unwrap();
    let o = ok(fpindex(&["verify", "--a", "t1", "--b", "t2"], dir.path()));
    assert_eq!(stdout(&o), "score\t1.000000\tcosine\n");
}

#[test]
fn verify_accepts_compressed_templates() {
    let dir = tempfile::tempdir().unwrap();
    let t = &random_templates(1, 4)[0];
    fs::write(dir.path().join("a.bin"), t.compress().to_bytes()).unwrap();
    fs::write(dir.path().join("b.txt"), t.to_text()).unwrap();
    let o = ok(fpindex(&["verify", "--a", "a.bin", "--b", "b.txt"], dir.path()));
    let line = stdout(&o);
    let score: f64 = line.split('\t').nth(1).unwrap().parse().unwrap();
    assert!((score - 1.0).abs() < 0.01, "{line}");
}

#[test]
fn verify_with_minutiae_prints_fused_score() {
    let dir = synth_dir(20);
    let o = ok(fpindex(
        &[
            "verify",
            "--a",
            "probes/p00000.txt",
            "--b",
            "probes/p00000.txt",
            "--minutiae-a",
            "probes/p00000.min",
            "--minutiae-b",
            "probes/p00000.min",
        ],
        dir.path(),
    ));
    let out = stdout(&o);
    assert!(out.contains("minutiae\t1.000000"), "{out}");
    assert!(out.ends_with("score\t2.000000\tfused\n"), "{out}");
}

#[test]
fn missing_gallery_exits_one_and_names_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("p.txt"), random_templates(1, 1)[0].to_text()).unwrap();
    let o = fpindex(
        &["search", "--gallery", "no/such/gallery.dpgl", "--probe", "p.txt"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no/such/gallery.dpgl"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["search", "--gallery", "g", "--probe", "p", "--bogus"],
        vec!["search", "--gallery", "g"],
        vec!["frobnicate"],
        vec!["search", "--gallery", "g", "--probe", "p", "--rerank"],
        vec!["bench", "--n", "10"],
        vec!["--threads", "0", "verify", "--a", "x", "--b", "y"],
    ] {
        let o = fpindex(&args, dir.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn every_subcommand_has_help() {
    let dir = tempfile::tempdir().unwrap();
    for sub in [
        vec!["enroll"],
        vec!["search"],
        vec!["pq-train"],
        vec!["pq-search"],
        vec!["verify"],
        vec!["mmap"],
        vec!["mmap", "encode"],
        vec!["mmap", "decode"],
        vec!["bench"],
        vec!["synth"],
    ] {
        let mut args = sub.clone();
        args.push("--help");
        let o = ok(fpindex(&args, dir.path()));
        assert!(stdout(&o).contains("Usage:"), "{sub:?}");
    }
}

#[test]
fn enroll_then_search_finds_mate_first() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ts = random_templates(30, 11);
    let mut manifest = String::from("# id finger template\n");
    for (i, t) in ts.iter().enumerate() {
        let name = format!("t{i}.txt");
        fs::write(d.join(&name), t.to_text()).unwrap();
        manifest.push_str(&format!("subj{i} {} {name}\n", i % 10));
    }
    fs::write(d.join("m.txt"), manifest).unwrap();
    let o = ok(fpindex(&["enroll", "--manifest", "m.txt", "--out", "g.dpgl"], d));
    assert_eq!(stdout(&o), "enrolled\t30\ttotal\t30\n");

    let o = ok(fpindex(&["search", "--gallery", "g.dpgl", "--probe", "t17.txt", "--k", "5"], d));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 5);
    let first: Vec<&str> = lines[0].split('\t').collect();
    assert_eq!(&first[..3], &["1", "subj17", "7"]);

    // Re-enrolling the same keys is a conflict.
    let o = fpindex(&["enroll", "--manifest", "m.txt", "--out", "g.dpgl", "--append"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("duplicate"), "{}", stderr(&o));
}

#[test]
fn rerank_and_pq_search_rank_mate_first() {
    let dir = synth_dir(300);
    let d = dir.path();
    let truth = fs::read_to_string(d.join("probes.tsv")).unwrap();
    let first = truth.lines().nth(1).unwrap();
    let cols: Vec<&str> = first.split('\t').collect();
    let (probe, minutiae, mate) = (cols[0], cols[1], cols[2]);

    let o = ok(fpindex(
        &[
            "search", "--gallery", "gallery.dpgl", "--probe", probe, "--k", "20", "--rerank",
            "--minutiae", minutiae, "--fusion", "minmax",
        ],
        d,
    ));
    assert_eq!(stdout(&o).lines().count(), 20);
    assert_eq!(stdout(&o).lines().next().unwrap().split('\t').nth(1), Some(mate));

    ok(fpindex(
        &["pq-train", "--gallery", "gallery.dpgl", "--out", "g.dppq", "--m", "16", "--z", "16"],
        d,
    ));
    let o = ok(fpindex(
        &["pq-search", "--index", "g.dppq", "--gallery", "gallery.dpgl", "--probe", probe, "--k", "3"],
        d,
    ));
    assert_eq!(stdout(&o).lines().next().unwrap().split('\t').nth(1), Some(mate));
}

#[test]
fn outputs_are_byte_deterministic() {
    let a = synth_dir(100);
    let b = synth_dir(100);
    for f in ["gallery.dpgl", "probes.tsv", "probes/p00003.txt", "probes/p00003.min"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    for d in [a.path(), b.path()] {
        ok(fpindex(
            &["--seed", "5", "pq-train", "--gallery", "gallery.dpgl", "--out", "g.dppq", "--m", "8", "--z", "16"],
            d,
        ));
    }
    assert_eq!(fs::read(a.path().join("g.dppq")).unwrap(), fs::read(b.path().join("g.dppq")).unwrap());

    let search = |threads: &str| {
        stdout(&ok(fpindex(
            &[
                "--threads", threads, "search", "--gallery", "gallery.dpgl", "--probe",
                "probes/p00001.txt", "--k", "50",
            ],
            a.path(),
        )))
    };
    assert_eq!(search("1"), search("4"));
}

/// Greedy one-to-one matching within 1 px and pi/12.
fn recovered(truth: &MinutiaeSet, got: &MinutiaeSet) -> usize {
    let mut used = vec![false; got.len()];
    let mut hits = 0;
    for t in truth.minutiae() {
        let found = got.minutiae().iter().enumerate().position(|(j, g)| {
            let d = f64::from(t.x - g.x).hypot(f64::from(t.y - g.y));
            let mut da = (f64::from(t.theta) - f64::from(g.theta)).rem_euclid(2.0 * PI);
            da = da.min(2.0 * PI - da);
            !used[j] && d <= 1.0 && da <= PI / 12.0
        });
        if let Some(j) = found {
            used[j] = true;
            hits += 1;
        }
    }
    hits
}

#[test]
fn mmap_encode_decode_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for i in 0..5 {
        let set = well_separated_set(&mut rng, 12, MAP_SIZE, 8.0, 4.0 * DEFAULT_SIGMA as f32);
        fs::write(d.join("in.min"), set.to_text()).unwrap();
        ok(fpindex(&["mmap", "encode", "--minutiae", "in.min", "--out", "map.bin"], d));
        let o = ok(fpindex(&["mmap", "decode", "--map", "map.bin", "--out", "out.min"], d));
        assert_eq!(stdout(&o), format!("decoded\t{}\n", set.len()), "set {i}");
        let got = MinutiaeSet::parse_text(&fs::read_to_string(d.join("out.min")).unwrap()).unwrap();
        assert_eq!(recovered(&set, &got), set.len(), "set {i}");
    }
}

#[test]
fn bench_report_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = ok(fpindex(
        &["--seed", "2", "bench", "--n", "500", "--probes", "40", "--backend", "exact", "--report", "r.json"],
        d,
    ));
    assert!(stdout(&o).starts_with("backend\texact\tn\t500\tprobes\t40"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["version"], 1);
    assert_eq!(report["gallery_size"], 500);
    assert_eq!(report["cmc"].as_array().unwrap().len(), 100);
    assert_eq!(report["tar_at_far"].as_array().unwrap().len(), 4);

    let manifest = |op: &str, value: f64| {
        format!(
            r#"{{"version": 1, "name": "int", "description": "small integer-score run", "seed": 1,
                "config": {{"kind": "integer-score", "pairs": 50}},
                "expected": [{{"metric": "max_abs_diff", "op": "{op}", "value": {value}}}]}}"#
        )
    };
    fs::write(d.join("pass.json"), manifest("<=", 1e-6)).unwrap();
    fs::write(d.join("fail.json"), manifest(">", 1.0)).unwrap();
    let o = ok(fpindex(&["bench", "--manifest", "pass.json"], d));
    assert!(stdout(&o).contains("max_abs_diff"));
    let o = fpindex(&["bench", "--manifest", "fail.json"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

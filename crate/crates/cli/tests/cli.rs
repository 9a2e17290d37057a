use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_game-ddp");

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn out_arg(dir: &Path) -> String {
    dir.to_str().unwrap().to_string()
}

fn read(path: PathBuf) -> String {
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&read(dir.join("manifest.json"))).unwrap()
}

fn numeric_rows(text: &str) -> Vec<Vec<f64>> {
    text.lines()
        .skip(1)
        .map(|l| {
            l.split(',')
                .map(|v| {
                    if v == "true" {
                        1.0
                    } else if v == "false" {
                        0.0
                    } else {
                        v.parse().unwrap()
                    }
                })
                .collect()
        })
        .collect()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&run(&["solve"], &[])), 1);
    let o = run(&["solve", "--problem", "nope"], &[]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("owner_dog"));
    assert_eq!(
        code(&run(&["solve", "--problem", "lq", "--param", "T"], &[])),
        1
    );
    assert_eq!(
        code(&run(
            &[
                "solve",
                "--problem",
                "lq",
                "--reg",
                "1",
                "--reg-adaptive",
                "1"
            ],
            &[]
        )),
        1
    );
    assert_eq!(
        code(&run(&["list-problems"], &[("GAME_DDP_THREADS", "many")])),
        1
    );
    assert_eq!(code(&run(&["--help"], &[])), 0);
}

#[test]
fn list_problems_names_every_problem() {
    let o = run(&["list-problems"], &[]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for id in ["owner_dog", "lq", "single_agent", "random_smooth"] {
        assert!(text.contains(id), "{id} missing from\n{text}");
    }
}

#[test]
fn solve_writes_listed_outputs_and_converges_on_lq() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &[
            "solve",
            "--problem",
            "lq",
            "--seed",
            "2",
            "--out",
            &out_arg(dir.path()),
            "--dump-derivatives",
            "--dump-newton",
        ],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(dir.path());
    let outputs: Vec<&str> = m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    for f in [
        "trajectory.csv",
        "trajectory.json",
        "report.csv",
        "derivatives.json",
        "newton.json",
        "manifest.json",
    ] {
        assert!(outputs.contains(&f), "{f} not listed in {outputs:?}");
        assert!(dir.path().join(f).exists(), "{f} not written");
    }
    assert_eq!(m["command"], "solve");
    assert_eq!(m["problem"]["problem"], "lq");
    assert!(m["timings"]["wall_seconds"].as_f64().unwrap() >= 0.0);
    let report = numeric_rows(&read(dir.path().join("report.csv")));
    assert_eq!(report.len(), 2);
    assert!(report[1][1] <= 1e-8);
}

#[test]
fn solve_is_byte_reproducible_across_runs_and_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = |d: &Path| {
        vec![
            "solve".to_string(),
            "--problem".into(),
            "random_smooth".into(),
            "--seed".into(),
            "4".into(),
            "--out".into(),
            out_arg(d),
        ]
    };
    let sa: Vec<String> = args(a.path());
    let sb: Vec<String> = args(b.path());
    let oa = run(
        &sa.iter().map(String::as_str).collect::<Vec<_>>(),
        &[("GAME_DDP_THREADS", "1")],
    );
    let ob = run(
        &sb.iter().map(String::as_str).collect::<Vec<_>>(),
        &[("GAME_DDP_THREADS", "4")],
    );
    assert_eq!(code(&oa), code(&ob));
    for f in ["trajectory.csv", "trajectory.json", "report.csv"] {
        assert_eq!(
            read(a.path().join(f)),
            read(b.path().join(f)),
            "{f} differs"
        );
    }
    assert_eq!(manifest(a.path())["threads"], 1);
    assert_eq!(manifest(b.path())["threads"], 4);
}

#[test]
fn owner_dog_run_matches_golden_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &[
            "solve",
            "--problem",
            "owner_dog",
            "--reg",
            "400",
            "--max-iters",
            "100",
            "--out",
            &out_arg(dir.path()),
        ],
        &[],
    );
    assert_eq!(code(&o), 2);
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/owner_dog_reg400");
    for f in ["report.csv", "trajectory.csv"] {
        let got = numeric_rows(&read(dir.path().join(f)));
        let want = numeric_rows(&read(golden.join(f)));
        assert_eq!(got.len(), want.len(), "{f}");
        for (g, w) in got.iter().zip(&want) {
            for (a, b) in g.iter().zip(w) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{f}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn config_file_and_params_select_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("game.toml");
    std::fs::write(&cfg, "problem = \"owner_dog\"\nT = 5\nx0 = [0.0, 0.5]\n").unwrap();
    let out = dir.path().join("run");
    let o = run(
        &[
            "solve",
            "--config",
            cfg.to_str().unwrap(),
            "--param",
            "T=3",
            "--max-iters",
            "2",
            "--out",
            &out_arg(&out),
        ],
        &[],
    );
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = numeric_rows(&read(out.join("trajectory.csv")));
    assert_eq!(rows.len(), 4);
    assert_eq!(&rows[0][1..3], &[0.0, 0.5]);
}

#[test]
fn inputs_file_warm_starts_the_solver() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    assert_eq!(
        code(&run(
            &[
                "solve",
                "--problem",
                "lq",
                "--seed",
                "1",
                "--out",
                &out_arg(&first)
            ],
            &[]
        )),
        0
    );
    let second = dir.path().join("second");
    let traj = first.join("trajectory.csv");
    let o = run(
        &[
            "solve",
            "--problem",
            "lq",
            "--seed",
            "1",
            "--inputs",
            traj.to_str().unwrap(),
            "--out",
            &out_arg(&second),
        ],
        &[],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(numeric_rows(&read(second.join("report.csv"))).len(), 1);
}

#[test]
fn snapshots_are_written_every_n_accepted_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &[
            "solve",
            "--problem",
            "owner_dog",
            "--reg",
            "400",
            "--max-iters",
            "6",
            "--snapshot-every",
            "3",
            "--out",
            &out_arg(dir.path()),
        ],
        &[],
    );
    assert_eq!(code(&o), 2);
    let mut names: Vec<String> = std::fs::read_dir(dir.path().join("snapshots"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["iter_0000.csv", "iter_0003.csv", "iter_0006.csv"]);
}

#[test]
fn compare_newton_reports_gap_and_respects_cap() {
    let o = run(
        &[
            "compare-newton",
            "--problem",
            "random_smooth",
            "--seed",
            "1",
        ],
        &[],
    );
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("relative gap"));
    assert_eq!(
        code(&run(
            &["compare-newton", "--problem", "lq", "--cap", "3"],
            &[]
        )),
        4
    );
    assert_eq!(
        code(&run(
            &[
                "compare-newton",
                "--problem",
                "random_smooth",
                "--seed",
                "1",
                "--rtol",
                "1e-300"
            ],
            &[]
        )),
        7
    );
}

#[test]
fn check_derivatives_catches_an_injected_fault() {
    assert_eq!(
        code(&run(&["check-derivatives", "--problem", "owner_dog"], &[])),
        0
    );
    let o = run(
        &[
            "check-derivatives",
            "--problem",
            "owner_dog",
            "--inject-fault",
        ],
        &[],
    );
    assert_eq!(code(&o), 6);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn convergence_study_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &[
            "convergence-study",
            "--problem",
            "owner_dog",
            "--directions",
            "2",
            "--epsilons",
            "1e-1,1e-2,1e-3",
            "--out",
            &out_arg(dir.path()),
        ],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let slopes: serde_json::Value =
        serde_json::from_str(&read(dir.path().join("slopes.json"))).unwrap();
    assert!((slopes["du_gap_slope"].as_f64().unwrap() - 2.0).abs() < 0.3);
    let order: serde_json::Value =
        serde_json::from_str(&read(dir.path().join("order.json"))).unwrap();
    assert!(order["newton"]["order"].as_f64().unwrap() >= 1.5);
    let closeness = read(dir.path().join("closeness.csv"));
    assert!(closeness.starts_with("epsilon,direction_id,quantity,value\n"));
    assert!(read(dir.path().join("iterate_errors.csv")).starts_with("method,iter,error\n"));
    assert_eq!(
        code(&run(
            &[
                "convergence-study",
                "--problem",
                "owner_dog",
                "--epsilons",
                "1e-3,1e-2",
                "--out",
                &out_arg(dir.path())
            ],
            &[]
        )),
        1
    );
}

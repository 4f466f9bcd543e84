use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn boxchain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boxchain"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    for args in [&["--help"][..], &["simulate", "--help"], &["--version"]] {
        let o = boxchain(args);
        assert_eq!(o.status.code(), Some(0), "{args:?}");
        assert!(!o.stdout.is_empty());
    }
    assert!(stdout(&boxchain(&["simulate", "--help"])).contains("honest_rate_per_min"));
}

#[test]
fn bad_flags_exit_one_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.csv");
    let cases: Vec<Vec<String>> = vec![
        vec!["--bogus".into()],
        vec!["attack".into(), "--trials".into(), "many".into()],
        vec!["simulate".into(), "--output".into(), path(&out).into()],
        vec![
            "--config".into(),
            path(&dir.path().join("missing.cfg")).into(),
            "--output".into(),
            path(&out).into(),
            "simulate".into(),
        ],
        vec![],
    ];
    for args in cases {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = boxchain(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(!o.stderr.is_empty());
        assert!(!out.exists(), "{args:?} wrote output");
    }
}

#[test]
fn bad_config_names_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "seed = 1\ntau_sec = soon\n").unwrap();
    let o = boxchain(&["--config", path(&cfg), "simulate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("config line 2"));
}

#[test]
fn forged_genesis_raises_the_alarm() {
    let cfg = scenarios().join("forged.cfg");
    let o = boxchain(&["--config", path(&cfg), "simulate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("integrity alarm"));
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenarios().join("corpus/malicious.cfg");
    let mut texts = Vec::new();
    for run in ["a", "b"] {
        let sub = dir.path().join(run);
        let csv = dir.path().join(format!("{run}.csv"));
        let o = boxchain(&[
            "--config",
            path(&cfg),
            "--seed",
            "5",
            "--output",
            path(&csv),
            "simulate",
            "--dump-dir",
            path(&sub),
        ]);
        assert_eq!(o.status.code(), Some(0));
        texts.push([
            std::fs::read_to_string(&csv).unwrap(),
            std::fs::read_to_string(sub.join("ledger.dump")).unwrap(),
            std::fs::read_to_string(sub.join("boxes.dump")).unwrap(),
            stdout(&o),
        ]);
    }
    assert_eq!(texts[0], texts[1]);
    let other = boxchain(&["--config", path(&cfg), "--seed", "6", "simulate"]);
    assert_ne!(stdout(&other), texts[0][3]);
}

#[test]
fn attack_results_ignore_thread_count() {
    let base = ["attack", "--trials", "200000", "--tau-sec", "5", "--seed", "3"];
    let one = boxchain(&[&base[..], &["--parallel-trials", "1"]].concat());
    let four = boxchain(&[&base[..], &["--parallel-trials", "4"]].concat());
    assert_eq!(one.status.code(), Some(0));
    assert_eq!(stdout(&one), stdout(&four));
    assert!(stdout(&one).contains("covers=true"));
}

#[test]
fn fixture_dump_replays_to_the_same_boxes() {
    let dir = tempfile::tempdir().unwrap();
    let o = boxchain(&["fixture", "--dump"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.starts_with("B1={2,3,4}\n"));
    let dump = dir.path().join("fixture.dump");
    std::fs::write(&dump, &text).unwrap();
    let r = boxchain(&["simulate", "--replay", path(&dump)]);
    assert_eq!(r.status.code(), Some(0));
    let replayed = stdout(&r);
    assert!(replayed.contains("boxes_match=true"), "{replayed}");
    assert!(replayed.contains("boxers=4 7 11 14 18 20"));
}

#[test]
fn decompose_prints_one_line_per_layer() {
    let chain = boxchain(&["decompose", path(&scenarios().join("chain3.edges"))]);
    assert_eq!(stdout(&chain), "1\n2\n3\n");
    let fixture = boxchain(&["decompose", path(&scenarios().join("fixture20.edges"))]);
    assert_eq!(stdout(&fixture).lines().count(), 7);
    let cyclic = boxchain(&["decompose", path(&scenarios().join("cyclic.edges"))]);
    assert_eq!(cyclic.status.code(), Some(1));
}

#[test]
fn stoch_calculators() {
    let o = boxchain(&["stoch", "attack", "--lambda-per-min", "30", "--tau-sec", "10"]);
    assert_eq!(stdout(&o).trim(), "p_attack=4.53999297625e-05");
    let o = boxchain(&["stoch", "pmf", "--mu", "2", "--k", "2"]);
    assert!(stdout(&o).contains("0.270670566473"));
}

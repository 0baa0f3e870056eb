use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bitalign"))
        .args(args)
        .current_dir(cwd)
        .env("BITALIGN_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn tiny_dataset(dir: &Path, name: &str, extra: &[&str]) -> String {
    let mut args = vec!["gen-data", "--out", name, "--train", "8", "--val", "4"];
    args.extend_from_slice(extra);
    let o = run(&args, dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

fn hash_line(out: &str) -> String {
    out.lines().find(|l| l.starts_with("dataset sha256")).unwrap().to_string()
}

#[test]
fn every_command_has_help() {
    let dir = tempfile::tempdir().unwrap();
    let flags: &[(&str, &[&str])] = &[
        ("gen-data", &["--spec", "--out", "--seed", "--mode", "--force"]),
        ("train", &["--data", "--config", "--out", "--steps", "--force"]),
        ("eval", &["--data", "--ckpt", "--report", "--split"]),
        ("infer", &["--image", "--depth", "--label", "--ckpt", "--out"]),
        ("gradcheck", &["--module", "--seeds"]),
        ("params", &["--config", "--paper-scale"]),
        ("flops", &["--config"]),
        ("head-stats", &["--data", "--ckpt", "--out"]),
        ("ablate", &["--data", "--suite", "--out", "--steps", "--jobs"]),
    ];
    for (cmd, want) in flags {
        let o = run(&[cmd, "--help"], dir.path());
        assert_eq!(code(&o), 0, "{cmd}");
        let text = stdout(&o);
        for f in *want {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["params", "--bogus"], dir.path())), 1);
    assert_eq!(code(&run(&["no-such-command"], dir.path())), 1);
    assert_eq!(code(&run(&["gradcheck", "--module", "nope"], dir.path())), 1);
    assert_eq!(code(&run(&["train", "--data", "missing", "--out", "m.ckpt"], dir.path())), 1);
    std::fs::write(dir.path().join("bad.json"), "{\"classes\": 1}").unwrap();
    assert_eq!(code(&run(&["gen-data", "--spec", "bad.json", "--out", "d"], dir.path())), 1);
    std::fs::write(dir.path().join("typo.json"), "{\"clases\": 4}").unwrap();
    assert_eq!(code(&run(&["gen-data", "--spec", "typo.json", "--out", "d"], dir.path())), 1);
}

#[test]
fn gen_data_is_deterministic_and_records_mode() {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny_dataset(dir.path(), "a", &["--mode", "depth-critical", "--seed", "3"]);
    let b = tiny_dataset(dir.path(), "b", &["--mode", "depth-critical", "--seed", "3"]);
    let c = tiny_dataset(dir.path(), "c", &["--mode", "depth-critical", "--seed", "4"]);
    assert!(a.contains("train=8 val=4"));
    assert_eq!(hash_line(&a), hash_line(&b));
    assert_ne!(hash_line(&a), hash_line(&c));
    let meta = std::fs::read_to_string(dir.path().join("a/meta.json")).unwrap();
    assert!(meta.contains("\"mode\": \"depth-critical\""));
}

#[test]
fn outputs_are_not_overwritten_without_force() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path(), "ds", &[]);
    let again = run(&["gen-data", "--out", "ds", "--train", "8", "--val", "4"], dir.path());
    assert_eq!(code(&again), 1);
    let train = ["train", "--data", "ds", "--out", "m.ckpt", "--steps", "0"];
    assert_eq!(code(&run(&train, dir.path())), 0);
    let before = std::fs::read(dir.path().join("m.ckpt")).unwrap();
    assert_eq!(code(&run(&train, dir.path())), 1);
    let mut forced = train.to_vec();
    forced.push("--force");
    assert_eq!(code(&run(&forced, dir.path())), 0);
    assert_eq!(std::fs::read(dir.path().join("m.ckpt")).unwrap(), before);
}

#[test]
fn train_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path(), "ds", &[]);

    let o = run(&["train", "--data", "ds", "--out", "m.ckpt", "--steps", "2"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("beta = 22 (default)"));
    assert!(text.contains("alpha = 0.8 (default)"));
    assert!(text.contains("lambda = (0.07, 1, 1) (default)"));
    let trace = std::fs::read_to_string(dir.path().join("m.ckpt.loss.csv")).unwrap();
    let rows: Vec<&str> = trace.lines().collect();
    assert_eq!(rows[0], "step,total,cls,tcls,cos,conc");
    assert_eq!(rows.len(), 3);
    assert!(rows[1..].iter().all(|r| r.split(',').count() == 6));

    let o = run(&["eval", "--data", "ds", "--ckpt", "m.ckpt", "--report", "r.json"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = std::fs::read_to_string(dir.path().join("r.json")).unwrap();
    for key in ["mean_kld", "mean_sim", "mean_nss", "checkpoint_sha256"] {
        assert!(report.contains(key));
    }

    let o = run(
        &[
            "infer", "--image", "ds/val/val_00001.rgb.ppm", "--depth", "ds/val/val_00001.depth.pgm", "--label", "cut",
            "--ckpt", "m.ckpt", "--out", "map.pgm",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let pgm = std::fs::read(dir.path().join("map.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n64 64\n255\n"));
    assert_eq!(pgm.len(), 13 + 64 * 64);
    assert_eq!(pgm[13..].iter().copied().max(), Some(255));
    let csv = std::fs::read_to_string(dir.path().join("map.csv")).unwrap();
    assert_eq!(csv.lines().count(), 64);
    assert!(csv.lines().all(|l| l.split(',').count() == 64));

    let o = run(
        &[
            "infer", "--image", "ds/val/val_00001.rgb.ppm", "--depth", "ds/val/val_00001.depth.pgm", "--label", "fly",
            "--ckpt", "m.ckpt", "--out", "x.pgm",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 1);

    let o = run(&["head-stats", "--data", "ds", "--ckpt", "m.ckpt", "--out", "h.csv"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let h = std::fs::read_to_string(dir.path().join("h.csv")).unwrap();
    // Four validation samples cover labels 0..4; unseen labels get no row.
    let labels: Vec<&str> = h.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["hold", "cut", "pour", "press"]);
}

#[test]
fn gradcheck_exit_reflects_outcome() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--module", "losses"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("3 of 3 checks passed"));
}

#[test]
fn params_paper_scale_reports_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["params", "--paper-scale"], dir.path());
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("d_down = 17"));
    // 2·(384·17 + 17) + (17·384 + 384) + 256·17
    let block = 2 * (384 * 17 + 17) + (17 * 384 + 384) + 256 * 17;
    assert!(text.contains(&format!("= {block}\n")));
    assert!(text.contains(&format!("bpm chain = 12 × {block} = {}", 12 * block)));
    assert_eq!(code(&run(&["flops", "--paper-scale"], dir.path())), 0);
}

#[test]
fn ablate_fusion_emits_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path(), "ds", &[]);
    let o = run(
        &["ablate", "--data", "ds", "--suite", "fusion", "--out", "abl", "--steps", "1", "--jobs", "2"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("abl/fusion.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[0].contains("kld,sim,nss"));
    let names: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(names, ["PT", "TFG", "PT+tcls", "TFG+tcls"]);
    assert!(rows[1..].iter().all(|r| r.ends_with(",ok")));
}

#[test]
fn ablate_reports_failed_variants_with_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path(), "ds", &[]);
    // A batch larger than the split fails every run after the table is opened.
    std::fs::write(dir.path().join("big.cfg"), "optim.batch = 64\n").unwrap();
    let o = run(
        &["ablate", "--data", "ds", "--suite", "adapter", "--out", "abl", "--steps", "1", "--config", "big.cfg"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    let csv = std::fs::read_to_string(dir.path().join("abl/adapter.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.contains("failed:"));
}

use std::path::Path;
use std::process::{Command, Output};

fn camforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_camforge")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(camforge(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(camforge(&["eval", "--trials", "x"]).status.code(), Some(2));
    assert_eq!(camforge(&[]).status.code(), Some(2));
}

#[test]
fn runtime_errors_print_one_parseable_line() {
    let out = camforge(&["analyze", "--preset", "resnet"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: kind=config msg="), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("w.camw");
    std::fs::write(&bogus, b"not a weight file").unwrap();
    let out = camforge(&["embed", "--preset", "tiny", "--weights", s(&bogus), "--out", s(&dir.path().join("e")), s(&bogus)]);
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error: kind=bad_magic"));
}

#[test]
fn embed_score_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    assert!(camforge(&["init", "--preset", "tiny", "--seed", "4", "--out", s(&p("w.camw"))]).status.success());
    let out = camforge(&["toy-data", "--utterances", "3", "--duration-seconds", "0.5", "--out", s(&p("data"))]);
    assert!(out.status.success());

    for name in ["e1.camw", "e2.camw"] {
        let out = camforge(&["embed", "--preset", "tiny", "--weights", s(&p("w.camw")), "--out", s(&p(name)), s(&p("data"))]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(std::fs::read(p("e1.camw")).unwrap(), std::fs::read(p("e2.camw")).unwrap());

    std::fs::write(p("trials"), "spk0_utt0 spk0_utt1 target\nspk0_utt0 spk1_utt0 nontarget\n").unwrap();
    std::fs::write(p("enroll"), "spk0 spk0_utt1 spk0_utt2\n").unwrap();
    let out = camforge(&["score", "--embeddings", s(&p("e1.camw")), "--trials", s(&p("trials")), "--out", s(&p("scores"))]);
    assert!(out.status.success());
    let scores = std::fs::read_to_string(p("scores")).unwrap();
    assert_eq!(scores.lines().count(), 2);
    assert!(scores.lines().all(|l| l.rsplit(' ').next().unwrap().split('.').nth(1).unwrap().len() == 6));

    let out = camforge(&["eval", "--trials", s(&p("trials")), "--scores", s(&p("scores"))]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("EER ") && text.contains(" minDCF "), "{text}");

    std::fs::write(p("trials2"), "spk0 spk0_utt0 target\nspk0 spk1_utt1 nontarget\n").unwrap();
    let out = camforge(&[
        "score", "--embeddings", s(&p("e1.camw")), "--trials", s(&p("trials2")), "--enroll", s(&p("enroll")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 2);
}

#[test]
fn bench_reports_a_single_thread() {
    let out = camforge(&["bench", "--preset", "tiny", "--duration-seconds", "1", "--repeats", "3"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("threads=1") && text.contains("rtf_median"), "{text}");
    assert_eq!(camforge(&["bench", "--preset", "tiny", "--repeats", "2"]).status.code(), Some(1));
}

use std::path::Path;
use std::process::{Command, Output};

fn elib(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elib"))
        .current_dir(dir)
        .args(args)
        .env_remove("ELIB_INJECT")
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn stages_run_independently() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    stdout(&elib(d, &["gen-model", "--preset", "tiny", "--seed", "3", "--out", "tiny.elib"]));
    let q = stdout(&elib(d, &["quantize", "--model", "tiny.elib", "--scheme", "Q4_1", "--out", "tiny.q4_1.elib"]));
    assert!(q.contains("q4_1"), "{q}");

    std::fs::write(d.join("text.txt"), "abcabcabcabc ".repeat(20)).unwrap();
    let ppl: f64 = stdout(&elib(d, &["ppl", "--model", "tiny.q4_1.elib", "--corpus", "text.txt", "--context", "32"]))
        .trim()
        .parse()
        .unwrap();
    assert!(ppl.is_finite() && ppl > 1.0);

    let flops = stdout(&elib(d, &["flops", "--threads", "1,2", "--dim", "64", "--reps", "3"]));
    assert_eq!(flops.lines().count(), 2);
    assert!(flops.starts_with("threads=1 gflops="));
}

#[test]
fn bad_input_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(!elib(d, &["gen-model", "--preset", "huge", "--out", "x.elib"]).status.success());
    assert!(!elib(d, &["quantize", "--model", "missing.elib", "--scheme", "q4_0", "--out", "y"]).status.success());
    assert!(!elib(d, &["flops", "--dim", "8"]).status.success());

    std::fs::write(d.join("bad.cfg"), "original_model = m.elib\nquantization_params = q4_0\ntopn_typo = 3\n").unwrap();
    let out = elib(d, &["bench", "--config", "bad.cfg", "--out", "o"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("topn_typo"));
}

#[test]
fn bench_with_skips_exits_zero_and_report_rerenders() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    stdout(&elib(d, &["gen-model", "--out", "tiny.elib"]));
    std::fs::write(
        d.join("b.cfg"),
        "original_model = tiny.elib\nquantization_params = q8_0, q4_0\n\n[benchmark_params]\niteration = 1\nmax_new_tokens = 4\nflops_dim = 64\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_elib"))
        .current_dir(d)
        .args(["bench", "--config", "b.cfg", "--out", "out", "--format", "table"])
        .env("ELIB_INJECT", "q8_0:1:memory_overflow")
        .output()
        .unwrap();
    let text = stdout(&out);
    assert!(text.contains("1 skipped"), "{text}");
    assert!(d.join("out/report.json").exists());
    let table = std::fs::read_to_string(d.join("out/report.txt")).unwrap();
    let rerendered = stdout(&elib(d, &["report", "--input", "out/report.json"]));
    assert_eq!(rerendered, table);
    let csv = stdout(&elib(d, &["report", "--input", "out/report.json", "--format", "csv"]));
    assert_eq!(csv.lines().count(), 2);
}

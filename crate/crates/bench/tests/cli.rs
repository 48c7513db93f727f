use std::fs;
use std::net::TcpListener;
use std::process::{Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_ptg-bench");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn ptg-bench")
}

#[test]
fn nodeps_prints_a_table() {
    let out = run(&["--bench", "nodeps", "--threads", "2", "--tasks", "50", "--spin", "1e-6"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 2, "{text}");
}

#[test]
fn cholesky_trace_goes_to_the_output_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("chol.txt");
    let out = run(&[
        "--bench", "cholesky", "--ranks", "2", "--threads", "2", "--N", "64",
        "--block-size", "16", "--trace", "--output", path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
    let text = fs::read_to_string(&path).unwrap();
    // 4 blocks: 4 potrf, 6 trsm, 10 gemm.
    let traced = text.lines().skip_while(|l| !l.starts_with('#')).skip(1).count();
    assert_eq!(traced, 20, "{text}");
    assert!(text.contains("potrf"));
}

#[test]
fn bad_arguments_fail_cleanly() {
    let out = run(&["--bench", "gemm2d", "--N", "100", "--block-size", "64"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ptg-bench:"));
    let out = run(&["--bench", "nodeps", "--transport", "tcp"]);
    assert!(!out.status.success());
}

#[test]
fn gemm_across_two_tcp_processes() {
    let ports: Vec<u16> = (0..2)
        .map(|_| TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port())
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("ranks.txt");
    fs::write(&table, format!("0 127.0.0.1:{}\n1 127.0.0.1:{}\n", ports[0], ports[1])).unwrap();
    let table = table.to_str().unwrap().to_owned();
    let children: Vec<_> = (0..2)
        .map(|rank| {
            Command::new(BIN)
                .args([
                    "--bench", "gemm2d", "--transport", "tcp", "--rank-table", &table,
                    "--rank", &rank.to_string(), "--N", "64", "--block-size", "16",
                    "--threads", "2",
                ])
                .stdout(Stdio::piped())
                .stderr(Stdio::piped())
                .spawn()
                .expect("spawn ptg-bench")
        })
        .collect();
    let children: Vec<Output> = children
        .into_iter()
        .map(|c| c.wait_with_output().unwrap())
        .collect();
    for (rank, out) in children.iter().enumerate() {
        assert!(
            out.status.success(),
            "rank {rank}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

//! End-to-end runs of the `oxds` binary: the synth -> train -> eval flow,
//! report formats and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn oxds(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oxds"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn synth_args<'a>() -> Vec<&'a str> {
    vec![
        "synth",
        "--categories",
        "5",
        "--domains",
        "2",
        "--dim",
        "8",
        "--feat-dim",
        "12",
        "--per-class",
        "6",
        "--sigma",
        "0.05",
        "--kappa",
        "2",
        "--seed",
        "9",
        "--out",
        "data",
    ]
}

fn train_args(domain: &str) -> Vec<&str> {
    vec![
        "train",
        "--manifest",
        "data/manifest.txt",
        "--domain",
        domain,
        "--models",
        "models",
        "--lr",
        "0.1",
        "--epochs",
        "12",
        "--seed",
        "3",
    ]
}

#[test]
fn full_workflow_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let out = oxds(root, &synth_args());
    assert!(out.status.success(), "{out:?}");

    for domain in ["d0", "d1"] {
        let out = oxds(root, &train_args(domain));
        assert!(out.status.success(), "{out:?}");
        let text = stdout(&out);
        assert!(text.contains("initial loss"));
        assert!(text.contains("epoch 12 loss"));
    }

    let out = oxds(
        root,
        &[
            "eval",
            "--manifest",
            "data/manifest.txt",
            "--models",
            "models",
            "--sources",
            "d0,d1",
            "--targets",
            "d0,d1",
            "--metrics",
            "map,nn,ft,st,e,dcg",
            "--out",
            "report.csv",
        ],
    );
    assert!(out.status.success(), "{out:?}");
    let report = std::fs::read_to_string(root.join("report.csv")).unwrap();
    assert!(report.starts_with("metric,source_domains,target_domains,k,value,queries,skipped\n"));
    // 6 metrics x 4 pairs + header.
    assert_eq!(report.lines().count(), 1 + 6 * 4);

    let out = oxds(
        root,
        &[
            "search",
            "--manifest",
            "data/manifest.txt",
            "--models",
            "models",
            "--query-id",
            "d0_c00_000",
            "--targets",
            "d1",
            "--k",
            "3",
        ],
    );
    assert!(out.status.success(), "{out:?}");
    assert_eq!(stdout(&out).lines().count(), 4); // header + 3 rows

    let out = oxds(
        root,
        &[
            "hash",
            "--manifest",
            "data/manifest.txt",
            "--models",
            "models",
            "--sources",
            "d0",
            "--targets",
            "d1",
            "--bits",
            "6",
            "--iterations",
            "20",
        ],
    );
    assert!(out.status.success(), "{out:?}");
    assert!(stdout(&out).starts_with("# binary=true\n"));

    let out = oxds(
        root,
        &[
            "embed",
            "--manifest",
            "data/manifest.txt",
            "--models",
            "models",
            "--domains",
            "d0,d1",
            "--out",
            "embedded.feat",
        ],
    );
    assert!(out.status.success(), "{out:?}");
    let embedded = std::fs::read_to_string(root.join("embedded.feat")).unwrap();
    assert!(embedded.starts_with("OXDS-FEAT 1 60 8\n"));
}

#[test]
fn fewshot_over_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut synth = synth_args();
    synth.extend(["--zero-shot-frac", "0.4"]);
    assert!(oxds(root, &synth).status.success());
    for domain in ["d0", "d1"] {
        assert!(oxds(root, &train_args(domain)).status.success());
    }
    let out = oxds(
        root,
        &[
            "fewshot",
            "--manifest",
            "data/manifest.txt",
            "--models",
            "models",
            "--mode",
            "n-shot-source",
            "--source-domain",
            "d0",
            "--target-domain",
            "d1",
            "--n",
            "1",
            "--runs",
            "5",
            "--out",
            "fewshot.csv",
        ],
    );
    assert!(out.status.success(), "{out:?}");
    assert!(stdout(&out).contains("accuracy"));
    let csv = std::fs::read_to_string(root.join("fewshot.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("accuracy,d0,d1,1,"));
}

#[test]
fn identical_seeds_give_identical_reports() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for root in [dir_a.path(), dir_b.path()] {
        assert!(oxds(root, &synth_args()).status.success());
        for domain in ["d0", "d1"] {
            assert!(oxds(root, &train_args(domain)).status.success());
        }
        let out = oxds(
            root,
            &[
                "eval",
                "--manifest",
                "data/manifest.txt",
                "--models",
                "models",
                "--sources",
                "d0+d1",
                "--targets",
                "d0+d1",
                "--metrics",
                "map,ia_map@k",
                "--seed",
                "11",
                "--out",
                "report.csv",
            ],
        );
        assert!(out.status.success(), "{out:?}");
    }
    let a = std::fs::read(dir_a.path().join("report.csv")).unwrap();
    let b = std::fs::read(dir_b.path().join("report.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert!(oxds(root, &synth_args()).status.success());

    // Validation problems exit with 2.
    let out = oxds(
        root,
        &[
            "eval",
            "--manifest",
            "data/manifest.txt",
            "--models",
            "models",
            "--sources",
            "d0",
            "--targets",
            "d1",
        ],
    );
    assert_eq!(out.status.code(), Some(2), "missing models: {out:?}");

    let out = oxds(
        root,
        &[
            "train",
            "--manifest",
            "absent.txt",
            "--domain",
            "d0",
            "--models",
            "models",
        ],
    );
    assert_eq!(out.status.code(), Some(2), "missing manifest: {out:?}");

    let out = oxds(root, &["eval", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2), "clap: {out:?}");

    // Bad metric name.
    assert!(oxds(root, &train_args("d0")).status.success());
    assert!(oxds(root, &train_args("d1")).status.success());
    let out = oxds(
        root,
        &[
            "eval",
            "--manifest",
            "data/manifest.txt",
            "--models",
            "models",
            "--sources",
            "d0",
            "--targets",
            "d1",
            "--metrics",
            "wat",
        ],
    );
    assert_eq!(out.status.code(), Some(2), "unknown metric: {out:?}");
}

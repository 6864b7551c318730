use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "\
patches = 4
groups = 2
d1 = 8
d_pos = 4
genes = 16
layers = 1
heads = 2
mlp_width = 8
head_hidden = 8
epochs = 3
batch_size = 16
gen.patients = 60
gen.informative_genes = 4
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ammasurv"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.cfg");
    fs::write(&p, SMALL).unwrap();
    p
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_twice_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        let o = run(&["generate", "--config", s(&cfg), "--seed", "7", "--out", s(d)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let fa = files(&a);
    assert!(fa.iter().any(|(p, _)| p == Path::new("manifest.tsv")));
    assert!(fa.len() > 100);
    // config echoes differ only in `out`
    let strip = |v: Vec<(PathBuf, Vec<u8>)>| -> Vec<(PathBuf, Vec<u8>)> {
        v.into_iter().filter(|(p, _)| p != Path::new("config.txt")).collect()
    };
    assert_eq!(strip(fa), strip(files(&b)));
}

#[test]
fn train_evaluate_and_rerun_from_echo() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("run");
    let o = run(&["train", "--config", s(&cfg), "--seed", "3", "--out", s(&out), "--trace"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(out.join("metrics.tsv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch\ttrain_loss\tval_cindex");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].split('\t').count() == 3);
    let test_line = lines[4];
    assert!(test_line.starts_with("test_cindex\t"));
    assert!(out.join("trace/layer0_head0_gene.txt").exists());

    let o = run(&["evaluate", "--checkpoint", s(&out.join("model.ckpt"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8(o.stdout).unwrap().trim(), test_line);

    // The echo alone reproduces the metrics bit for bit.
    let again = tmp.path().join("again");
    let o = run(&["train", "--config", s(&out.join("config.txt")), "--out", s(&again)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(again.join("metrics.tsv")).unwrap(), metrics);
}

#[test]
fn manifest_input_matches_generator_input() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let data = tmp.path().join("data");
    assert!(
        run(&["generate", "--config", s(&cfg), "--seed", "5", "--out", s(&data)])
            .status
            .success()
    );
    let manifest_cfg = tmp.path().join("manifest.cfg");
    let text: String = SMALL
        .lines()
        .filter(|l| !l.starts_with("gen."))
        .map(|l| format!("{l}\n"))
        .collect::<String>()
        + "manifest = data/manifest.tsv\n";
    fs::write(&manifest_cfg, text).unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(run(&["train", "--config", s(&cfg), "--seed", "5", "--out", s(&a)])
        .status
        .success());
    let o = run(&["train", "--config", s(&manifest_cfg), "--seed", "5", "--out", s(&b)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read_to_string(a.join("metrics.tsv")).unwrap(),
        fs::read_to_string(b.join("metrics.tsv")).unwrap()
    );
}

#[test]
fn ablate_writes_four_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("abl");
    let o = run(&["ablate", "--config", s(&cfg), "--seed", "2", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("ablation.tsv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    let modes: Vec<&str> = rows.iter().map(|r| r.split('\t').next().unwrap()).collect();
    assert_eq!(modes, ["default", "symmetric", "random_gene", "uninduced_concat"]);
    for r in rows {
        let v: f64 = r.split('\t').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn gradcheck_reports_small_error() {
    let o = run(&["gradcheck"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let last = text.lines().last().unwrap();
    let v: f64 = last.split('\t').nth(1).unwrap().parse().unwrap();
    assert!(v < 1e-2, "{last}");
}

#[test]
fn bad_configs_fail_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        ("heads = 3\nd1 = 64\nd_pos = 16\n", "divisible"),
        ("layer = 2\n", "layer"),
        ("epochs = many\n", "epochs"),
        ("batch_size = 1\n", "batch_size"),
    ];
    for (text, needle) in cases {
        let p = tmp.path().join("bad.cfg");
        fs::write(&p, text).unwrap();
        let o = run(&["train", "--config", s(&p), "--out", s(&tmp.path().join("x"))]);
        assert!(!o.status.success());
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(needle), "{text:?}: {err}");
    }
    let o = run(&["train", "--config", s(&tmp.path().join("missing.cfg"))]);
    assert!(!o.status.success());
    let o = run(&["evaluate", "--checkpoint", s(&tmp.path().join("missing.ckpt"))]);
    assert!(!o.status.success());
    let o = run(&["train", "--mode", "sideways"]);
    assert!(!o.status.success());
}

#[test]
fn uneven_gene_groups_warn() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("uneven.cfg");
    fs::write(&p, SMALL.replace("genes = 16", "genes = 17")).unwrap();
    let o = run(&["generate", "--config", s(&p), "--out", s(&tmp.path().join("g"))]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("last 1 are dropped"));
}

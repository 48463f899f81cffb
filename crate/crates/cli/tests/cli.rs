use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cliquestream")).args(args).output().expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

const SMALL: &str = r#"name = "cli-small"
seeds = [7]
experiments = ["fig2_convergence", "fig3_stretch", "startup_delay"]
[plane]
node_count = 600
[fig2]
sources = 4
pairs_per_source = 10
bins = 4
[trees]
group_sizes = [30]
[startup]
channels = 2
joins = 10
"#;

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn reference_config_validates() {
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/reference.toml");
    let o = bin(&["validate", cfg]);
    assert!(o.status.success(), "{}", text(&o.stderr));
}

#[test]
fn invalid_config_lists_every_problem_with_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "name = \"bad\"\nseeds = [1]\nexperiments = []\n[substrate]\nb = 0\nclique_min = 64\nclique_max = 100\n").unwrap();
    for args in [vec!["validate", cfg.to_str().unwrap()], vec!["run", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]] {
        let o = bin(&args);
        assert!(!o.status.success());
        let err = text(&o.stderr);
        assert!(err.contains("bad.toml:3: experiments"), "{err}");
        assert!(err.contains("bad.toml:5: substrate.b"), "{err}");
        assert!(err.contains("bad.toml:7: substrate.clique_max"), "{err}");
    }
}

#[test]
fn event_cap_abort_names_the_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cap.toml");
    fs::write(&cfg, format!("{SMALL}[sim]\nevent_cap = 50\n")).unwrap();
    let o = bin(&["run", cfg.to_str().unwrap(), "--out", dir.path().join("out").to_str().unwrap()]);
    assert!(!o.status.success());
    let err = text(&o.stderr);
    assert!(err.contains("cli-small") && err.contains("event cap"), "{err}");
}

#[test]
fn runs_write_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = bin(&["run", cfg.to_str().unwrap(), "--out", a.to_str().unwrap(), "--seed-override", "7,8", "--jobs", "3"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let digests = text(&o.stdout);
    assert_eq!(digests.lines().count(), 6, "{digests}");
    let o = bin(&["run", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--seed-override", "7,8"]);
    assert!(o.status.success());
    assert_eq!(text(&o.stdout), digests);

    let fa = read_all(&a);
    assert_eq!(fa, read_all(&b));
    let names: Vec<&str> = fa.iter().map(|f| f.0.as_str()).collect();
    for n in ["fig2_convergence_seed7.csv", "fig3_stretch_seed8.csv", "startup_delay_seed7.csv", "summary.json", "digests.txt"] {
        assert!(names.contains(&n), "{n} missing from {names:?}");
    }
    assert!(names.iter().any(|n| n.starts_with("trees/") && n.ends_with(".edges.csv")));
    let csv = text(&fa.iter().find(|f| f.0 == "fig3_stretch_seed7.csv").unwrap().1);
    assert!(csv.starts_with("scenario_tag,metric,group_size,value,seed\n"));
}

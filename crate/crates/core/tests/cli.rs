mod common;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use common::{fedkappa, fedkappa_ok, path_str, write_config};
use fedkappa::client::TrainHistory;
use fedkappa::eval::matrix_from_csv;
use fedkappa::nn::ParamVector;

fn small_data(root: &Path) -> PathBuf {
    let data = root.join("data");
    fedkappa_ok(&["gen-data", "--scale", "400", "--seed", "8", "--out", path_str(&data), "--create"]);
    data
}

fn stderr(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn missing_output_directory_needs_create() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("nope");
    let r = fedkappa(&["gen-data", "--scale", "400", "--out", path_str(&out)]);
    assert!(!r.status.success());
    assert!(stderr(&r).contains(path_str(&out)), "{}", stderr(&r));
    assert!(!out.exists());
}

#[test]
fn default_profiles_give_seven_sites_and_reproduce() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        fedkappa_ok(&["gen-data", "--seed", "1", "--out", path_str(d), "--create"]);
    }
    for i in 1..=7 {
        let name = format!("site{i}.fkds");
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap(), "{name}");
    }
    assert!(!a.join("site8.fkds").exists());
    let c = tmp.path().join("c");
    fedkappa_ok(&["gen-data", "--seed", "2", "--out", path_str(&c), "--create"]);
    assert_ne!(std::fs::read(a.join("site1.fkds")).unwrap(), std::fs::read(c.join("site1.fkds")).unwrap());
}

#[test]
fn zero_rounds_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let r = fedkappa(&["federate", "--simulate", "--data", path_str(&data), "--rounds", "0", "--out", path_str(tmp.path())]);
    assert!(!r.status.success());
    assert!(stderr(&r).contains("invalid configuration"), "{}", stderr(&r));
}

#[test]
fn one_site_local_run_is_loadable_and_selection_is_max() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let cfg = tmp.path().join("one.toml");
    write_config(&cfg, 4, 8, 1);
    fedkappa_ok(&["train-local", "--data", path_str(&data), "--config", path_str(&cfg), "--out", path_str(tmp.path())]);
    let dir = tmp.path().join("local/site1");
    let best = ParamVector::load(&dir.join("best.fkpv")).unwrap();
    best.check(&fedkappa::nn::ModelSpec::desk_default()).unwrap();
    let h = TrainHistory::load(&dir.join("history.jsonl")).unwrap();
    assert_eq!(h.len(), 4);
    let chosen = &h.records[h.best_index().unwrap()];
    assert_eq!(chosen.params_digest, best.digest());
    let top = h.records.iter().filter_map(|r| r.val_kappa).fold(f64::NEG_INFINITY, f64::max);
    assert!(chosen.val_kappa.is_none_or(|k| k == top));
    assert!(!tmp.path().join("local/site2").exists());
}

fn manifest_artifacts(root: &Path) -> BTreeSet<PathBuf> {
    let mut all = BTreeSet::new();
    for e in std::fs::read_dir(root).unwrap() {
        let p = e.unwrap().path();
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        if name.starts_with("manifest-") {
            let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
            assert!(v["config_digest"].is_string());
            assert!(v["finished_at"].as_f64().unwrap() >= v["started_at"].as_f64().unwrap());
            for a in v["artifacts"].as_array().unwrap() {
                all.insert(PathBuf::from(a.as_str().unwrap()));
            }
        }
    }
    all
}

fn files_under(dir: &Path, out: &mut BTreeSet<PathBuf>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files_under(&p, out);
        } else if !p.file_name().unwrap().to_string_lossy().starts_with("manifest-") {
            out.insert(p);
        }
    }
}

#[test]
fn full_pipeline_manifests_report_and_missing_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("run");
    let data = small_data(tmp.path());
    let cfg = tmp.path().join("fed.toml");
    write_config(&cfg, 2, 8, 3);
    let (d, c, r) = (path_str(&data), path_str(&cfg), path_str(&root));
    fedkappa_ok(&["train-local", "--data", d, "--config", c, "--out", r, "--create"]);
    fedkappa_ok(&["federate", "--simulate", "--data", d, "--config", c, "--out", r]);
    let fed = root.join("federated");
    fedkappa_ok(&["finetune", "--models", path_str(&fed), "--data", d, "--config", c, "--out", r, "--epochs", "2"]);
    for m in ["local", "federated", "finetuned"] {
        fedkappa_ok(&["eval-matrix", "--models", path_str(&root.join(m)), "--data", d, "--config", c, "--out", r]);
    }
    let first = fedkappa_ok(&["report", "--out", r]);
    let report = std::fs::read_to_string(root.join("report/report.txt")).unwrap();
    assert_eq!(String::from_utf8_lossy(&first.stdout), report);
    fedkappa_ok(&["report", "--out", r]);
    assert_eq!(std::fs::read_to_string(root.join("report/report.txt")).unwrap(), report);

    let fed_matrix = matrix_from_csv(&std::fs::read_to_string(root.join("federated.csv")).unwrap()).unwrap();
    assert_eq!(fed_matrix.k(), 3);
    assert!(fed_matrix.global_row.is_some());
    assert!(matrix_from_csv(&std::fs::read_to_string(root.join("local.csv")).unwrap()).unwrap().global_row.is_none());
    for i in 1..=3 {
        let line = report.lines().find(|l| l.starts_with(&format!("site{i} "))).unwrap();
        assert_eq!(line.split_whitespace().count(), 4, "{line}");
    }
    assert!(report.contains("fine-tuned vs federated"));

    let listed = manifest_artifacts(&root);
    let mut present = BTreeSet::new();
    files_under(&root, &mut present);
    assert_eq!(listed, present);

    let best = fed.join("site2/best.fkpv");
    std::fs::remove_file(&best).unwrap();
    let r1 = fedkappa(&["finetune", "--models", path_str(&fed), "--data", d, "--config", c, "--out", r]);
    assert!(!r1.status.success());
    assert!(stderr(&r1).contains(path_str(&best)), "{}", stderr(&r1));
    let csv = root.join("local.csv");
    std::fs::remove_file(&csv).unwrap();
    let r2 = fedkappa(&["report", "--out", r]);
    assert!(stderr(&r2).contains(path_str(&csv)), "{}", stderr(&r2));
    let site = data.join("site3.fkds");
    std::fs::remove_file(&site).unwrap();
    let r3 = fedkappa(&["eval-matrix", "--models", path_str(&fed), "--data", d, "--config", c, "--out", r]);
    assert!(stderr(&r3).contains(path_str(&site)), "{}", stderr(&r3));
}

#[test]
fn data_directory_defines_the_roster_without_a_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    std::fs::create_dir(&data).unwrap();
    let profiles = tmp.path().join("p.toml");
    let text = (1..=2)
        .map(|i| {
            format!(
                "[[site]]\nsite_id = \"c{i}\"\nn_train = 40\nn_val = 12\nn_test = 12\nclass_prior = [0.25, 0.25, 0.25, 0.25]\n\
                 intensity_mean = 0.5\nintensity_std = 0.2\nimages_per_patient = 2.0\nresolution = 32\nseed = {i}\n"
            )
        })
        .collect::<String>();
    std::fs::write(&profiles, text).unwrap();
    fedkappa_ok(&["gen-data", "--profiles", path_str(&profiles), "--out", path_str(&data)]);
    fedkappa_ok(&["federate", "--simulate", "--data", path_str(&data), "--rounds", "1", "--out", path_str(tmp.path())]);
    for id in ["c1", "c2"] {
        assert!(tmp.path().join(format!("federated/{id}/best.fkpv")).exists());
    }
    let cfg = std::fs::read_to_string(tmp.path().join("federated/config.toml")).unwrap();
    assert!(cfg.contains("roster = [\"c1\", \"c2\"]"), "{cfg}");
}

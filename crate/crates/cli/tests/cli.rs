use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn data(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn ipdmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ipdmix"))
        .args(args)
        .env_remove("IPDMIX_OUT")
        .output()
        .unwrap()
}

fn out_dir(tmp: &TempDir, name: &str) -> String {
    tmp.path().join(name).to_string_lossy().into_owned()
}

fn records(path: impl AsRef<Path>) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap())
        .collect()
}

fn manifest(dir: &str) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(Path::new(dir).join("manifest.json")).unwrap())
        .unwrap()
}

#[test]
fn exact_selection_on_uniform_design() {
    let tmp = TempDir::new().unwrap();
    let out = out_dir(&tmp, "sel");
    let o = ipdmix(&[
        "select",
        "--ad",
        &data("uniform_pi_ad.csv"),
        "--sigma-alpha",
        "0.025",
        "--k1",
        "2",
        "--method",
        "exact",
        "--out",
        &out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = records(Path::new(&out).join("selection.csv"));
    let chosen: Vec<&str> = rows
        .iter()
        .filter(|r| &r[4] == "true")
        .map(|r| &r[1])
        .collect();
    assert_eq!(chosen, ["1", "10"]);
    let m = manifest(&out);
    assert_eq!(m["status"], "ok");
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn sequential_selection_of_every_study() {
    let tmp = TempDir::new().unwrap();
    let out = out_dir(&tmp, "sel");
    let o = ipdmix(&[
        "select",
        "--ad",
        &data("uniform_pi_ad.csv"),
        "--sigma-alpha",
        "0.025",
        "--k1",
        "10",
        "--method",
        "ssa",
        "--out",
        &out,
    ]);
    assert!(o.status.success());
    let rows = records(Path::new(&out).join("selection.csv"));
    assert!(rows.iter().all(|r| &r[4] == "true"));
}

#[test]
fn sequential_objective_never_beats_exact() {
    let tmp = TempDir::new().unwrap();
    let file = tmp.path().join("ad.csv");
    let mut w = csv::Writer::from_path(&file).unwrap();
    w.write_record(["study_id", "beta_hat", "var_hat", "n_t", "n_c"])
        .unwrap();
    let mut state = 12345u64;
    for j in 0..11 {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        let nt = 2 + (state >> 33) % 20;
        let nc = 2 + (state >> 45) % 20;
        let var = 0.5 + ((state >> 20) % 100) as f64 / 50.0;
        w.write_record([
            format!("t{j}"),
            "0.1".into(),
            var.to_string(),
            nt.to_string(),
            nc.to_string(),
        ])
        .unwrap();
    }
    w.flush().unwrap();
    let file = file.to_string_lossy().into_owned();
    let objective = |method: &str| {
        let out = out_dir(&tmp, method);
        let o = ipdmix(&[
            "select",
            "--ad",
            &file,
            "--sigma-alpha",
            "0.3",
            "--k1",
            "4",
            "--method",
            method,
            "--out",
            &out,
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        records(Path::new(&out).join("selection_summary.csv"))[0][2]
            .parse::<f64>()
            .unwrap()
    };
    assert!(objective("ssa") <= objective("exact") * (1.0 + 1e-12));
}

#[test]
fn re_curve_rows_and_endpoint() {
    let tmp = TempDir::new().unwrap();
    let out = out_dir(&tmp, "curve");
    let o = ipdmix(&[
        "re-curve",
        "--ad",
        &data("uniform_pi_ad.csv"),
        "--sigma-alpha",
        "0.025",
        "--k1-range",
        "2..10",
        "--out",
        &out,
    ]);
    assert!(o.status.success());
    let rows = records(Path::new(&out).join("re_curve.csv"));
    assert_eq!(rows.len(), 9);
    let last = rows.last().unwrap();
    assert_eq!(&last[0], "10");
    assert!((last[1].parse::<f64>().unwrap() - 1.0).abs() < 1e-12);
    assert!((last[3].parse::<f64>().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn bathtub_curve_at_eighty_percent_ipd() {
    let tmp = TempDir::new().unwrap();
    let out = out_dir(&tmp, "curve");
    let o = ipdmix(&[
        "re-curve",
        "--ad",
        &data("bathtub_pi_ad.csv"),
        "--sigma-alpha",
        "0.025",
        "--k1-range",
        "8",
        "--out",
        &out,
    ]);
    assert!(o.status.success());
    let rows = records(Path::new(&out).join("re_curve.csv"));
    let max_re: f64 = rows[0][1].parse().unwrap();
    println!("bathtub design, 8 of 10 studies as IPD: best RE {max_re:.4}");
    assert!(max_re < 0.95 && max_re > 0.9);
}

#[test]
fn all_ad_linear_estimate_reports_ad_ma_only() {
    let tmp = TempDir::new().unwrap();
    let out = out_dir(&tmp, "est");
    let o = ipdmix(&[
        "estimate",
        "--ad",
        &data("uniform_pi_ad.csv"),
        "--sigma-alpha",
        "0.025",
        "--out",
        &out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = records(Path::new(&out).join("estimate.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][0], "ad_ma");
    assert!(String::from_utf8_lossy(&o.stderr).contains("not estimable"));
}

#[test]
fn trial_estimate_orders_the_variances() {
    let tmp = TempDir::new().unwrap();
    let out = out_dir(&tmp, "est");
    let o = ipdmix(&[
        "estimate",
        "--ad",
        &data("beta_blocker.csv"),
        "--model",
        "logistic",
        "--expand-tables",
        "--k1",
        "5",
        "--method",
        "ssa",
        "--pilot-count",
        "5",
        "--independent",
        "--out",
        &out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = records(Path::new(&out).join("estimate.csv"));
    let labels: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(labels, ["ipd_ma", "ipd_ad_ma", "ad_ma"]);
    let v: Vec<f64> = rows.iter().map(|r| r[5].parse().unwrap()).collect();
    assert!(v[0] <= v[1] && v[1] <= v[2], "{v:?}");
    assert_eq!(&rows[1][2], "5");
}

fn write_ipd(path: &Path, separated: bool) {
    let mut w = csv::Writer::from_path(path).unwrap();
    w.write_record(["study_id", "y", "x"]).unwrap();
    for s in 0..4 {
        for i in 0..12 {
            let x = i % 2;
            let y = if separated && s == 0 {
                x as f64
            } else {
                ((i * 7 + s * 3) % 5) as f64 / 2.0 + x as f64
            };
            let y = if separated {
                if s == 0 {
                    y
                } else {
                    ((i + s) % 3 == 0) as u8 as f64
                }
            } else {
                y
            };
            w.write_record([format!("s{s}"), y.to_string(), x.to_string()])
                .unwrap();
        }
    }
    w.flush().unwrap();
}

#[test]
fn linear_estimate_from_ipd_with_pilots() {
    let tmp = TempDir::new().unwrap();
    let file = tmp.path().join("ipd.csv");
    write_ipd(&file, false);
    let out = out_dir(&tmp, "est");
    let o = ipdmix(&[
        "estimate",
        "--ipd",
        file.to_str().unwrap(),
        "--pilot",
        "s0,s1,s2",
        "--ipd-studies",
        "s0,s2",
        "--out",
        &out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = records(Path::new(&out).join("estimate.csv"));
    let labels: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(labels, ["ipd_ma", "ipd_ad_ma", "ad_ma"]);
    assert_eq!(&rows[1][1], "s0 s2");
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let out = out_dir(&tmp, "x");
    let missing = ipdmix(&[
        "select",
        "--ad",
        "/no/such/file.csv",
        "--sigma-alpha",
        "0.1",
        "--k1",
        "2",
        "--out",
        &out,
    ]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(manifest(&out)["status"], "error");

    let usage = ipdmix(&["select", "--k1"]);
    assert_eq!(usage.status.code(), Some(2));

    let file = tmp.path().join("sep.csv");
    write_ipd(&file, true);
    let out = out_dir(&tmp, "sep");
    let sep = ipdmix(&[
        "estimate",
        "--ipd",
        file.to_str().unwrap(),
        "--model",
        "logistic",
        "--out",
        &out,
    ]);
    assert_eq!(
        sep.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&sep.stderr)
    );

    let out = out_dir(&tmp, "cap");
    let cap = ipdmix(&[
        "re-curve",
        "--ad",
        &data("beta_blocker.csv"),
        "--sigma-alpha",
        "0.1",
        "--cap",
        "100",
        "--out",
        &out,
    ]);
    assert_eq!(cap.status.code(), Some(3));
}

#[test]
fn config_file_sits_under_flags() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.ini");
    fs::write(
        &cfg,
        format!(
            "sigma_alpha = 0.025\nmethod = ssa\n[select]\nk1 = 3\nad = {}\n",
            data("uniform_pi_ad.csv")
        ),
    )
    .unwrap();
    let out = out_dir(&tmp, "a");
    let o = ipdmix(&[
        "select",
        "--config",
        cfg.to_str().unwrap(),
        "--k1",
        "2",
        "--out",
        &out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = records(Path::new(&out).join("selection_summary.csv"));
    assert_eq!(&summary[0][0], "ssa");
    assert_eq!(&summary[0][1], "2");
    assert_eq!(&summary[0][5], "0.025");
}

#[test]
fn output_directory_from_environment() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("env-out");
    let o = Command::new(env!("CARGO_BIN_EXE_ipdmix"))
        .args([
            "select",
            "--ad",
            &data("uniform_pi_ad.csv"),
            "--sigma-alpha",
            "0.025",
            "--k1",
            "2",
        ])
        .env("IPDMIX_OUT", &out)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(out.join("selection.csv").exists() && out.join("manifest.json").exists());
}

#[test]
fn simulation_reproduces_across_workers() {
    let tmp = TempDir::new().unwrap();
    let run = |name: &str, workers: &str| {
        let out = out_dir(&tmp, name);
        let o = ipdmix(&[
            "simulate",
            "--scenario",
            "mixture_match",
            "--reps",
            "5",
            "--seed",
            "7",
            "--workers",
            workers,
            "--out",
            &out,
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = run("a", "1");
    let b = run("b", "4");
    let read = |d: &str| fs::read(Path::new(d).join("match.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(ma["config_hash"], mb["config_hash"]);
    assert_eq!(ma["seed"], 7);
    assert_eq!(ma["scenario"]["replicates"], 5);
}

#[test]
fn fixed_design_and_trial_workflow_simulations() {
    let tmp = TempDir::new().unwrap();
    let out = out_dir(&tmp, "fixed");
    assert!(
        ipdmix(&["simulate", "--scenario", "uniform_pi", "--out", &out])
            .status
            .success()
    );
    assert_eq!(
        records(Path::new(&out).join("re_landscape.csv")).len(),
        1023
    );

    let out = out_dir(&tmp, "trials");
    let o = ipdmix(&[
        "simulate",
        "--scenario",
        "beta_blocker",
        "--ad",
        &data("beta_blocker.csv"),
        "--seed",
        "3",
        "--out",
        &out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = records(Path::new(&out).join("workflow.csv"));
    assert_eq!(rows.len(), 4);
}

#[test]
fn summaries_load_back_as_ad() {
    let tmp = TempDir::new().unwrap();
    let file = tmp.path().join("ipd.csv");
    write_ipd(&file, false);
    let out = out_dir(&tmp, "sum");
    assert!(
        ipdmix(&["summarize", "--ipd", file.to_str().unwrap(), "--out", &out])
            .status
            .success()
    );
    let summary = Path::new(&out).join("summary.csv");
    let sel = out_dir(&tmp, "sel");
    let o = ipdmix(&[
        "select",
        "--ad",
        summary.to_str().unwrap(),
        "--sigma-alpha",
        "0.1",
        "--k1",
        "2",
        "--out",
        &sel,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

//! End-to-end tests of the `pbcell` binary: exit codes, output files, and
//! the manifest contract.

use std::path::Path;
use std::process::{Command, Output};

use pbcell::geometry::CellMesh;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_pbcell")
}

fn run(cmd: &str, config: &str, out: &Path) -> Output {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(&cfg_path, config).unwrap();
    Command::new(bin())
        .arg(cmd)
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

const SLAB: &str = "\
[geometry]
kind = slab
n_cells = 64
grading = 1.02

[electrolyte]
valences = -1, 1
concentrations = 0.5, 0.5
";

fn manifest_files(out: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    let mut files = Vec::new();
    let mut in_files = false;
    for line in text.lines() {
        if line == "files:" {
            in_files = true;
            continue;
        }
        if in_files {
            if let Some(f) = line.strip_prefix("  ") {
                files.push(f.to_string());
            } else {
                break;
            }
        }
    }
    files
}

#[test]
fn solve_zero_sigma_writes_zero_field() {
    let out = tempfile::tempdir().unwrap();
    let cfg = format!("{SLAB}\n[bc]\nkind = neumann\nvalue = 0\n\n[run]\nbeta = 1\n");
    let o = run("solve", &cfg, out.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let field = std::fs::read_to_string(out.path().join("psi.pbfield")).unwrap();
    for line in field.lines().skip(1) {
        let v: f64 = line.trim().parse().unwrap();
        assert!(v.abs() <= 1e-12);
    }
}

#[test]
fn missing_electrolyte_is_config_error() {
    let out = tempfile::tempdir().unwrap();
    let o = run("solve", "[geometry]\nkind = slab\n", out.path());
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("electrolyte"), "stderr: {err}");
}

#[test]
fn dirichlet_large_beta_report_has_monotone_energy() {
    let out = tempfile::tempdir().unwrap();
    let cfg = format!(
        "[geometry]\nkind = slab\nn_cells = 400\ngrading = 1.03\n\n\
         [electrolyte]\nvalences = -1, 1\nconcentrations = 0.5, 0.5\n\n\
         [bc]\nkind = dirichlet\nvalue = 1\n\n[run]\nbeta = 1e4\n"
    );
    let o = run("solve", &cfg, out.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = std::fs::read_to_string(out.path().join("report.txt")).unwrap();
    let energies: Vec<f64> = report
        .lines()
        .skip_while(|l| *l != "iter,energy,residual")
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(energies.len() >= 2);
    // monotone up to the round-off of evaluating the energy itself
    for w in energies.windows(2) {
        assert!(
            w[1] <= w[0] + 1e-10 * w[0].abs().max(1.0),
            "energy not monotone: {energies:?}"
        );
    }
}

#[test]
fn single_beta_sweep_warns_and_exits_zero() {
    let out = tempfile::tempdir().unwrap();
    let cfg = format!(
        "{SLAB}\n[bc]\nkind = neumann\nvalue = -1\n\n[sweep]\nbetas = 10\napproximants = zero\n"
    );
    let o = run("sweep", &cfg, out.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("warning"), "stderr: {err}");
    let rates = std::fs::read_to_string(out.path().join("rates.csv")).unwrap();
    assert_eq!(rates.lines().count(), 1, "rates CSV should be header-only");
    assert!(out.path().join("sweep.csv").is_file());
}

#[test]
fn unknown_approximant_is_config_error() {
    let out = tempfile::tempdir().unwrap();
    let cfg = format!(
        "{SLAB}\n[bc]\nkind = neumann\nvalue = -1\n\n[sweep]\nbetas = 1, 10\napproximants = wavelet\n"
    );
    let o = run("sweep", &cfg, out.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn failed_slope_check_exits_three_but_writes_csvs() {
    let out = tempfile::tempdir().unwrap();
    // The solution norm grows with beta in the small-beta regime, so a
    // "decays steeply" check on it must fail.
    let cfg = format!(
        "{SLAB}\n[bc]\nkind = neumann\nvalue = -1\n\n\
         [sweep]\nbetas = 1, 10, 100\napproximants = zero\ncheck = zero L2 <= -99\n"
    );
    let o = run("sweep", &cfg, out.path());
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.path().join("sweep.csv").is_file());
    assert!(out.path().join("rates.csv").is_file());
}

#[test]
fn mesh_prints_counts_and_roundtrips() {
    let out = tempfile::tempdir().unwrap();
    let cfg = "[geometry]\nkind = slab\nn_cells = 4\n\n\
               [electrolyte]\nvalences = -1, 1\nconcentrations = 0.5, 0.5\n";
    let o = run("mesh", cfg, out.path());
    assert_eq!(o.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("nodes 5"), "stdout: {stdout}");

    let text = std::fs::read_to_string(out.path().join("mesh.pbmesh")).unwrap();
    let mesh = CellMesh::parse(&text).unwrap();
    assert_eq!(mesh.serialize(), text, "mesh write/load must round-trip");
}

#[test]
fn layer_profile_starts_at_zeta() {
    let out = tempfile::tempdir().unwrap();
    let cfg = format!("{SLAB}\n[layer]\nzeta = 2\n");
    let o = run("layer", &cfg, out.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.path().join("profile.pblayer")).unwrap();
    let first = text.lines().nth(1).unwrap();
    let mut it = first.split_whitespace();
    let xi: f64 = it.next().unwrap().parse().unwrap();
    let v: f64 = it.next().unwrap().parse().unwrap();
    assert_eq!(xi, 0.0);
    assert_eq!(v, 2.0);
}

#[test]
fn bounds_on_converged_solve_passes() {
    let out = tempfile::tempdir().unwrap();
    let cfg = format!("{SLAB}\n[bc]\nkind = neumann\nvalue = -1\n\n[run]\nbeta = 10\n");
    let o = run("bounds", &cfg, out.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.path().join("bounds.txt")).unwrap();
    assert!(text.contains("violations = 0"), "{text}");
}

#[test]
fn manifest_names_every_other_file() {
    let out = tempfile::tempdir().unwrap();
    let cfg = format!("{SLAB}\n[bc]\nkind = neumann\nvalue = -1\n\n[run]\nbeta = 10\n");
    let o = run("solve", &cfg, out.path());
    assert_eq!(o.status.code(), Some(0));
    let listed = manifest_files(out.path());
    let mut on_disk: Vec<String> = std::fs::read_dir(out.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "manifest.txt")
        .collect();
    on_disk.sort();
    let mut listed_sorted = listed.clone();
    listed_sorted.sort();
    assert_eq!(listed_sorted, on_disk);
}

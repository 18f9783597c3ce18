use std::path::Path;
use std::process::{Command, Output};

use anisoline::report::parse_report_csv;

fn anisoline(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anisoline")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let (header, rows) = parse_report_csv(csv).unwrap();
    let k = header.iter().position(|h| h == name).unwrap();
    rows.iter().map(|r| r[k].unwrap()).collect()
}

#[test]
fn fit_paraboloid_defaults_converges() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fit");
    let o = anisoline(&["fit", "paraboloid", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("level,dof,max_error,mean_error\n"));
    let dofs = column(&csv, "dof");
    assert!(dofs.windows(2).all(|w| w[1] > w[0]));
    for f in ["report.json", "surface.obj", "mesh.json", "spline.json", "mesh_level_0.svg", "effective_config.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn fit_with_zero_tolerance_hits_the_level_cap() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fit");
    let o = anisoline(&["fit", "paraboloid", "--tolerance", "0", "--max-levels", "3", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(column(&csv, "level"), vec![0.0, 1.0, 2.0, 3.0]);
}

#[test]
fn fit_missing_file_leaves_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let o = anisoline(&["fit", path(&dir.path().join("absent.csv")), "--out", path(&out)]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("absent.csv"));
    assert!(!out.exists());
}

#[test]
fn fit_reports_csv_position() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.csv");
    std::fs::write(&input, "s,t,z\n0,0,1\n0.5,0.5,oops\n").unwrap();
    let out = dir.path().join("o");
    let o = anisoline(&["fit", path(&input), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3, column 3"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn fit_height_field_csv_with_config_file_and_override() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("s,t,z\n");
    for j in 0..=20 {
        for i in 0..=20 {
            let (s, t) = (i as f64 / 20.0, j as f64 / 20.0);
            text.push_str(&format!("{s},{t},{}\n", s * s - 0.5 * t));
        }
    }
    let input = dir.path().join("h.csv");
    std::fs::write(&input, text).unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# base\ntolerance = 0.5\ngrid = 3x3\nstrategy = cross_only\n").unwrap();
    let out = dir.path().join("o");
    let o = anisoline(&["fit", path(&input), "--config", path(&cfg), "--tolerance", "0.01", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let eff = std::fs::read_to_string(out.join("effective_config.txt")).unwrap();
    assert!(eff.contains("tolerance = 1e-2"), "{eff}");
    assert!(eff.contains("grid = 3x3"));
    assert!(eff.contains("strategy = cross_only"));
}

#[test]
fn bad_config_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "tolerance = 0.1\nspeed = fast\n").unwrap();
    let o = anisoline(&["fit", "cone", "--config", path(&cfg), "--out", path(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn solve_lshape_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("l");
    let o = anisoline(&["solve", "lshape", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("convergence.csv")).unwrap();
    assert!(csv.starts_with("level,dof,eta_total,L2,H1\n"));
    let levels = column(&csv, "level");
    assert!(levels.len() >= 4, "{csv}");
    for k in 0..levels.len() {
        assert!(out.join(format!("mesh_param_level_{k}.svg")).exists());
        assert!(out.join(format!("mesh_phys_level_{k}.svg")).exists());
    }
    let vtk = std::fs::read_to_string(out.join("solution.vtk")).unwrap();
    assert!(vtk.starts_with("# vtk DataFile Version 3.0\n"));
    assert!(vtk.contains("SCALARS u double 1"));
}

#[test]
fn solve_patch_linear_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    let o = anisoline(&["solve", "patch_linear", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("convergence.csv")).unwrap();
    assert!(column(&csv, "L2").iter().all(|&e| e <= 1e-9), "{csv}");
}

#[test]
fn solve_problem_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("sq.json");
    std::fs::write(&p, r#"{"problem": "square_sin", "grid": [3, 3]}"#).unwrap();
    let out = dir.path().join("o");
    let o = anisoline(&["solve", path(&p), "--max-levels", "1", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let eff = std::fs::read_to_string(out.join("effective_config.txt")).unwrap();
    assert!(eff.contains("grid = 3x3") && eff.contains("problem = square_sin"), "{eff}");
}

#[test]
fn solve_unknown_problem_lists_registry() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = anisoline(&["solve", "heat", "--out", path(&out)]);
    assert_ne!(o.status.code(), Some(0));
    let e = stderr(&o);
    for name in ["lshape", "square_sin", "patch_linear"] {
        assert!(e.contains(name), "{e}");
    }
    assert!(!out.exists());
}

#[test]
fn verify_defaults_pass_and_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let a = anisoline(&["verify", "--out", path(&dir.path().join("a"))]);
    assert_eq!(a.status.code(), Some(0), "{}", stdout(&a));
    assert!(stdout(&a).contains("trials 200 (depth <= 5"));
    let b = anisoline(&["verify", "--out", path(&dir.path().join("b"))]);
    assert_eq!(stdout(&a), stdout(&b));
    let c = anisoline(&["verify", "--seed", "99", "--trials", "30", "--out", path(&dir.path().join("c"))]);
    assert_eq!(c.status.code(), Some(0));
    assert_ne!(stdout(&a), stdout(&c));
}

#[test]
fn verify_with_injected_fault_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = anisoline(&["verify", "--trials", "10", "--inject-fault", "--out", path(&dir.path().join("f"))]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("verify: FAIL"));
}

#[test]
fn thread_cap_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let run = |threads: &str, sub: &str| {
        Command::new(env!("CARGO_BIN_EXE_anisoline"))
            .env("ANISOLINE_THREADS", threads)
            .args(["verify", "--trials", "25", "--out", path(&dir.path().join(sub))])
            .output()
            .unwrap()
    };
    let one = run("1", "one");
    let three = run("3", "three");
    assert_eq!(one.status.code(), Some(0));
    assert_eq!(stdout(&one), stdout(&three));
}

#[test]
fn mesh_demo_script_writes_four_figures() {
    let dir = tempfile::tempdir().unwrap();
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("scripts/groups.demo");
    let out = dir.path().join("d");
    let o = anisoline(&["mesh-demo", path(&script), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut svgs: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".svg"))
        .collect();
    svgs.sort();
    assert_eq!(svgs, ["level_0_marks.svg", "level_1.svg", "level_1_marks.svg", "level_2.svg"]);
    let marks = std::fs::read_to_string(out.join("level_1_marks.svg")).unwrap();
    assert_eq!(marks.matches("class=\"group\"").count(), 3);
    assert!(marks.contains("H>C"));
    assert!(stdout(&o).contains("3 groups"));
}

#[test]
fn mesh_demo_empty_script_draws_initial_mesh_only() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("empty.demo");
    std::fs::write(&script, "# no passes\n\n").unwrap();
    let out = dir.path().join("d");
    let o = anisoline(&["mesh-demo", path(&script), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let svgs: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".svg"))
        .collect();
    assert_eq!(svgs, ["level_0.svg"]);
}

#[test]
fn mesh_demo_rejects_old_level_marks() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("stale.demo");
    std::fs::write(&script, "grid 2 1\n0:C\n1:C\n").unwrap();
    let out = dir.path().join("d");
    let o = anisoline(&["mesh-demo", path(&script), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("script line 3") && e.contains("only cells of the current level"), "{e}");
    assert!(!out.exists());
}

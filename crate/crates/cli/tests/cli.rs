use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::Vector3;
use restshape::mesh::{box_mesh, parse_medit, parse_tet, write_tet};
use restshape::TetMesh;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_restshape"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn cube() -> TetMesh {
    box_mesh([1, 1, 1], Vector3::repeat(0.05), Vector3::zeros())
}

fn beam() -> TetMesh {
    box_mesh([3, 1, 1], Vector3::new(0.02, 0.02, 0.02), Vector3::zeros())
}

/// Writes `mesh` and a config referencing it; returns the config path.
fn setup(dir: &Path, name: &str, mesh: &TetMesh, extra: &str) -> PathBuf {
    fs::write(dir.join(format!("{name}.tet")), write_tet(mesh)).unwrap();
    let cfg = format!("{{\n  \"mesh_path\": \"{name}.tet\"{extra}\n}}\n");
    let p = dir.join(format!("{name}.json"));
    fs::write(&p, cfg).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const BOTTOM: &str = ",\n  \"load\": {\"fixed_selector\": \"bottom:1e-6\"}";
const LEFT_END: &str = ",\n  \"load\": {\"fixed_selector\": [0, 4, 8, 12]}";

#[test]
fn equilibrium_writes_artifacts_and_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let cfg = setup(d.path(), "cube", &cube(), BOTTOM);
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["equilibrium", "--config", s(&cfg), "--output", s(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["static.tet", "stress.csv", "solve.json"] {
        let x = fs::read(a.join(f)).unwrap();
        assert_eq!(x, fs::read(b.join(f)).unwrap(), "{f} differs between runs");
    }
    let solve: serde_json::Value = serde_json::from_slice(&fs::read(a.join("solve.json")).unwrap()).unwrap();
    assert_eq!(solve["converged"], true);
    assert!(solve["residual_inf_n"].as_f64().unwrap() <= solve["tol_force_n"].as_f64().unwrap());
    let sagged = parse_tet(&fs::read_to_string(a.join("static.tet")).unwrap()).unwrap();
    assert!(sagged.bbox().1.z < 0.05);
}

#[test]
fn free_body_under_gravity_is_a_numerical_failure() {
    let d = tempfile::tempdir().unwrap();
    let cfg = setup(d.path(), "cube", &cube(), ",\n  \"load\": {\"fixed_selector\": \"none\"}");
    let o = run(&["equilibrium", "--config", s(&cfg), "--output", s(&d.path().join("o"))]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("no static equilibrium"), "{}", stderr(&o));
}

#[test]
fn malformed_objective_is_a_config_error_with_line() {
    let d = tempfile::tempdir().unwrap();
    let cfg = setup(d.path(), "beam", &beam(), ",\n  \"objective\": {\"match\": {\"reg_weight\": \"high\"}}");
    let o = run(&["optimize", "--config", s(&cfg), "--output", s(&d.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("beam.json:3:"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["equilibrium"])), 2);
    let d = tempfile::tempdir().unwrap();
    let cfg = setup(d.path(), "cube", &cube(), BOTTOM);
    let o = run(&["simulate", "--config", s(&cfg), "--output", s(&d.path().join("o"))]);
    assert_eq!(code(&o), 2, "missing dynamics block");
    let o = run(&["optimize", "--config", s(&cfg), "--output", s(&d.path().join("o"))]);
    assert_eq!(code(&o), 2, "missing objective block");
    fs::write(d.path().join("bad.tet"), "tet 1\n4 1\nv 0 0 0\n").unwrap();
    let bad = d.path().join("bad.json");
    fs::write(&bad, "{\"mesh_path\": \"bad.tet\"}").unwrap();
    let o = run(&["equilibrium", "--config", s(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line"), "{}", stderr(&o));
}

#[test]
fn optimize_reduces_matching_loss() {
    let d = tempfile::tempdir().unwrap();
    let extra = format!("{LEFT_END},\n  \"objective\": {{\"match\": {{}}}},\n  \"optimizer\": {{\"method\": \"adam\", \"step_size\": 1e-3, \"max_iters\": 60}},\n  \"checkpoint_every\": 5");
    let cfg = setup(d.path(), "beam", &beam(), &extra);
    let out = d.path().join("o");
    let o = run(&["optimize", "--config", s(&cfg), "--output", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["plastic.txt", "rest.tet", "static_opt.tet", "trace.csv", "report.json", "checkpoint.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    let (l0, l1) = (report["initial_loss"].as_f64().unwrap(), report["final_loss"].as_f64().unwrap());
    assert!(l1 < 0.5 * l0, "loss {l0} -> {l1}");
    assert_eq!(report["config"]["optimizer"]["max_iters"], 60);
    assert_eq!(report["config"]["material"]["young_pa"], 5e4);
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("iter,objective,loss,reg,grad_inf,newton_iters,accepted\n"));
}

#[test]
fn already_optimal_input_stops_immediately() {
    let d = tempfile::tempdir().unwrap();
    let extra = format!(
        ",\n  \"load\": {{\"gravity_m_s2\": [0, 0, 0], \"fixed_selector\": [0, 4, 8, 12]}},\n  \"objective\": {{\"match\": {{}}}}"
    );
    let cfg = setup(d.path(), "beam", &beam(), &extra);
    let out = d.path().join("o");
    let o = run(&["optimize", "--config", s(&cfg), "--output", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.lines().count() - 1 <= 2, "{trace}");
}

#[test]
fn metrics_counts_components() {
    let d = tempfile::tempdir().unwrap();
    let a = cube();
    let b = box_mesh([1, 1, 1], Vector3::repeat(0.05), Vector3::new(0.2, 0.0, 0.0));
    let n = a.num_vertices();
    let two = TetMesh::new(
        a.positions().iter().chain(b.positions()).copied().collect(),
        a.elements().iter().copied().chain(b.elements().iter().map(|e| e.map(|i| i + n))).collect(),
    )
    .unwrap();
    for (name, mesh, cc) in [("one", a, 1), ("two", two, 2)] {
        let cfg = setup(d.path(), name, &mesh, BOTTOM);
        let out = d.path().join(name);
        let o = run(&["metrics", "--config", s(&cfg), "--output", s(&out), "--require-converged"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
        assert_eq!(m["cc"], cc);
        assert!(m["silhouette_loss"].is_null());
        assert!(m["mean_stress_pa"].as_f64().unwrap() > 0.0);
        assert_eq!(m["standable"], true);
        let csv = fs::read_to_string(out.join("fracture.csv")).unwrap();
        assert_eq!(csv.lines().count(), 65);
    }
}

#[test]
fn metrics_pair_adds_silhouette_loss() {
    let d = tempfile::tempdir().unwrap();
    let cfg = setup(d.path(), "cube", &cube(), BOTTOM);
    fs::write(d.path().join("target.tet"), write_tet(&cube())).unwrap();
    let out = d.path().join("o");
    let o = run(&["metrics", "--config", s(&cfg), "--output", s(&out), "--pair", s(&d.path().join("target.tet"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    let l = m["silhouette_loss"].as_f64().unwrap();
    assert!((0.0..0.05).contains(&l), "{l}");
}

#[test]
fn metrics_failure_only_fails_when_required() {
    let d = tempfile::tempdir().unwrap();
    let cfg = setup(d.path(), "cube", &cube(), "");
    let out = d.path().join("o");
    let o = run(&["metrics", "--config", s(&cfg), "--output", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["cc"], 1);
    assert!(m["error"].is_string());
    let o = run(&["metrics", "--config", s(&cfg), "--output", s(&out), "--require-converged"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn batch_metrics_reports_both_means() {
    let d = tempfile::tempdir().unwrap();
    let c1 = setup(d.path(), "small", &cube(), BOTTOM);
    let c2 = setup(d.path(), "long", &beam(), BOTTOM);
    let out = d.path().join("batch");
    let o = run(&["metrics", "--config", s(&c1), "--config", s(&c2), "--output", s(&out), "--jobs", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("small/metrics.json").exists());
    assert!(out.join("long/metrics.json").exists());
    let b: serde_json::Value = serde_json::from_slice(&fs::read(out.join("batch_metrics.json")).unwrap()).unwrap();
    assert_eq!(b["objects"].as_array().unwrap().len(), 2);
    assert!(b["mean_stress_per_object_pa"].as_f64().unwrap() > 0.0);
    assert!(b["mean_stress_pooled_pa"].as_f64().unwrap() > 0.0);
}

#[test]
fn simulate_emits_expected_frames() {
    let d = tempfile::tempdir().unwrap();
    let extra = format!("{BOTTOM},\n  \"dynamics\": {{\"duration_s\": 0.5, \"frame_stride\": 4, \"settings\": {{\"dt\": 0.008333333333333333}}}}");
    let cfg = setup(d.path(), "cube", &cube(), &extra);
    let out = d.path().join("o");
    let o = run(&["simulate", "--config", s(&cfg), "--output", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("identity"), "missing field warning: {}", stderr(&o));
    let frames = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("frame_"))
        .count();
    assert_eq!(frames, (0.5f64 / (0.008333333333333333 * 4.0)).ceil() as usize);
    assert!(out.join("frame_000000.obj").exists());
    let traj = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + 61);
    // starting at equilibrium with the base fixed, nothing moves
    let rep: serde_json::Value = serde_json::from_slice(&fs::read(out.join("simulate.json")).unwrap()).unwrap();
    assert!(rep["max_step_drift_m"].as_f64().unwrap() < 1e-8 * 0.05 * 3f64.sqrt());
}

#[test]
fn simulate_uses_optimized_field() {
    let d = tempfile::tempdir().unwrap();
    let extra = format!(
        "{LEFT_END},\n  \"objective\": {{\"match\": {{}}}},\n  \"optimizer\": {{\"max_iters\": 20}},\n  \"dynamics\": {{\"duration_s\": 0.05, \"initial\": \"rest\"}}"
    );
    let cfg = setup(d.path(), "beam", &beam(), &extra);
    let out = d.path().join("o");
    assert_eq!(code(&run(&["optimize", "--config", s(&cfg), "--output", s(&out)])), 0);
    let o = run(&["simulate", "--config", s(&cfg), "--output", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!stderr(&o).contains("identity"), "{}", stderr(&o));
    assert!(out.join("simulate.json").exists());
}

#[test]
fn convert_round_trips_formats() {
    let d = tempfile::tempdir().unwrap();
    let m = beam();
    let tet = d.path().join("m.tet");
    fs::write(&tet, write_tet(&m)).unwrap();
    let medit = d.path().join("m.mesh");
    let back = d.path().join("back.tet");
    let obj = d.path().join("m.obj");
    assert_eq!(code(&run(&["convert", s(&tet), s(&medit)])), 0);
    assert_eq!(code(&run(&["convert", s(&medit), s(&back)])), 0);
    assert_eq!(code(&run(&["convert", s(&tet), s(&obj)])), 0);
    assert_eq!(parse_medit(&fs::read_to_string(&medit).unwrap()).unwrap().num_elements(), m.num_elements());
    assert_eq!(fs::read(&tet).unwrap(), fs::read(&back).unwrap());
    let faces = fs::read_to_string(&obj).unwrap().lines().filter(|l| l.starts_with("f ")).count();
    // 3x1x1 cells: 14 unit squares, two triangles each
    assert_eq!(faces, 28);
    assert_eq!(code(&run(&["convert", s(&tet), s(&d.path().join("m.stl"))])), 2);
}

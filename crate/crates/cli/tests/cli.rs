use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fuzzycsg::document;
use fuzzycsg::fuzzy::OpKind;
use fuzzycsg::io::{OccupancyGrid, PointSampleDataset, SliceImage};
use fuzzycsg::primitives::{Point, Primitive, SpherePrimitive};
use fuzzycsg::target::{bundled_target, BoundingBox};
use fuzzycsg::tree::{ControlConfig, CsgExpr, CsgTree};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fuzzycsg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_tree(dir: &Path, name: &str, tree: &CsgTree) -> String {
    let path = dir.join(name);
    fs::write(&path, document::serialize(tree)).unwrap();
    path.to_str().unwrap().to_owned()
}

fn circle(x: f64, y: f64, r: f64) -> Primitive {
    Primitive::Sphere(SpherePrimitive::new(Point::xy(x, y), r, 30.0).unwrap())
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn default_fit_on_two_circles_converges() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let res = run(&["fit", "bundled:two-circles", "-o", p(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let manifest = json(&out.join("manifest.json"));
    let mse = manifest["holdout_mse"].as_f64().unwrap();
    assert!(mse < 1e-3, "held-out MSE {mse}");
    assert_eq!(manifest["iterations_completed"], 5000);
    let loss = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 5001);
    let tree = document::deserialize(&fs::read_to_string(out.join("tree.json")).unwrap()).unwrap();
    assert_eq!(tree.node_count().primitives, 16);

    // The fit uses two of sixteen leaves, so pruning must remove nodes.
    let pruned = dir.path().join("pruned.json");
    let res = run(&[
        "prune",
        p(&out.join("tree.json")),
        "--target",
        "bundled:two-circles",
        "--points",
        "20000",
        "-o",
        p(&pruned),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let report = json(&dir.path().join("pruned.report.json"));
    let before = report["before"]["total"].as_u64().unwrap();
    let after = report["after"]["total"].as_u64().unwrap();
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn repeated_seed_gives_identical_manifest() {
    let dir = TempDir::new().unwrap();
    let mut manifests = Vec::new();
    for run_name in ["a", "b"] {
        let out = dir.path().join(run_name);
        let res = run(&[
            "--seed",
            "7",
            "fit",
            "bundled:soft-blob",
            "--iterations",
            "60",
            "--batch-size",
            "512",
            "--holdout-points",
            "2000",
            "-o",
            p(&out),
        ]);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
        manifests.push(fs::read(out.join("manifest.json")).unwrap());
        assert_eq!(json(&out.join("manifest.json"))["seed"], 7);
    }
    assert_eq!(manifests[0], manifests[1]);
}

#[test]
fn missing_target_exits_with_input_error() {
    let dir = TempDir::new().unwrap();
    let res = run(&[
        "fit",
        p(&dir.path().join("nope.json")),
        "-o",
        p(&dir.path().join("out")),
    ]);
    assert_eq!(code(&res), 2);
    assert!(!res.stderr.is_empty());
    let res = run(&[
        "fit",
        "bundled:no-such-shape",
        "-o",
        p(&dir.path().join("out")),
    ]);
    assert_eq!(code(&res), 2);
}

#[test]
fn config_errors_exit_with_input_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, "[fit]\nsteps = 3\n").unwrap();
    let out = dir.path().join("out");
    assert_eq!(
        code(&run(&[
            "--config",
            p(&cfg),
            "fit",
            "bundled:two-circles",
            "-o",
            p(&out)
        ])),
        2
    );
    fs::write(&cfg, "[fit.adam]\nlr = -1.0\n").unwrap();
    assert_eq!(
        code(&run(&[
            "--config",
            p(&cfg),
            "fit",
            "bundled:two-circles",
            "-o",
            p(&out)
        ])),
        2
    );
    assert_eq!(
        code(&run(&[
            "--threads",
            "0",
            "fit",
            "bundled:two-circles",
            "-o",
            p(&out)
        ])),
        2
    );
    assert_eq!(
        code(&run(&[
            "fit",
            "bundled:two-circles",
            "--mode",
            "fuzzy",
            "-o",
            p(&out)
        ])),
        2
    );
}

#[test]
fn config_file_values_reach_the_fit() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.toml");
    fs::write(
        &cfg,
        "[fit]\niterations = 15\nmode = \"fixed-godel\"\nholdout_points = 500\n[fit.sampler]\nbatch_size = 256\n[model]\ndepth = 2\nprimitive = \"sphere\"\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let res = run(&[
        "--config",
        p(&cfg),
        "--threads",
        "1",
        "fit",
        "bundled:two-circles",
        "-o",
        p(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["iterations_completed"], 15);
    assert_eq!(m["config"]["mode"], "fixed-godel");
    assert_eq!(m["model"]["primitive"], "sphere");
    let tree = document::deserialize(&fs::read_to_string(out.join("tree.json")).unwrap()).unwrap();
    assert_eq!(tree.node_count().primitives, 4);
}

#[test]
fn prune_rejects_zero_threshold_and_bad_documents() {
    let dir = TempDir::new().unwrap();
    let tree = write_tree(
        dir.path(),
        "t.json",
        &CsgTree::single_leaf(circle(0.0, 0.0, 0.5)),
    );
    let out = dir.path().join("o.json");
    assert_eq!(
        code(&run(&["prune", &tree, "--threshold", "0", "-o", p(&out)])),
        2
    );
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"version\": 1, \"dimension\": 2").unwrap();
    assert_eq!(code(&run(&["prune", p(&bad), "-o", p(&out)])), 2);
}

#[test]
fn pruning_a_minimal_tree_changes_nothing() {
    let dir = TempDir::new().unwrap();
    let tree = CsgTree::from_expr(
        2,
        ControlConfig::default(),
        &CsgExpr::product(
            OpKind::Union,
            CsgExpr::Leaf(circle(-0.4, 0.0, 0.3)),
            CsgExpr::Leaf(circle(0.4, 0.0, 0.3)),
        ),
    )
    .unwrap();
    let input = write_tree(dir.path(), "t.json", &tree);
    let out = dir.path().join("o.json");
    let report = dir.path().join("r.json");
    let res = run(&[
        "prune",
        &input,
        "--points",
        "5000",
        "-o",
        p(&out),
        "--report",
        p(&report),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let r = json(&report);
    assert_eq!(r["deletions"].as_array().unwrap().len(), 0);
    assert_eq!(r["output_mse"].as_f64().unwrap(), 0.0);
    assert_eq!(
        fs::read_to_string(&out).unwrap(),
        fs::read_to_string(&input).unwrap()
    );
}

#[test]
fn eval_against_own_samples_has_zero_error() {
    let dir = TempDir::new().unwrap();
    let tree = bundled_target("four-primitives").unwrap();
    let input = write_tree(dir.path(), "t.json", &tree);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let points = BoundingBox::unit(2).sample_n(500, &mut rng);
    let data = dir.path().join("d.csv");
    PointSampleDataset::from_tree(&tree, points)
        .unwrap()
        .write(&data)
        .unwrap();
    let out = dir.path().join("e.csv");
    let res = run(&["eval", &input, "--points", p(&data), "-o", p(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let stdout = String::from_utf8(res.stdout).unwrap();
    assert!(stdout.contains("mse 0.000000e0"), "{stdout}");
    let csv = fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "x,y,occupancy,target");
    assert_eq!(csv.lines().count(), 501);
}

#[test]
fn eval_matches_between_stack_and_batched_paths() {
    let dir = TempDir::new().unwrap();
    // A constant leaf makes the tree irregular, forcing per-point stack evaluation.
    let irregular = CsgTree::from_expr(
        2,
        ControlConfig::default(),
        &CsgExpr::product(
            OpKind::Union,
            CsgExpr::product(
                OpKind::Intersection,
                CsgExpr::Leaf(circle(0.0, 0.0, 0.6)),
                CsgExpr::Constant(1.0),
            ),
            CsgExpr::Leaf(circle(0.5, 0.5, 0.2)),
        ),
    )
    .unwrap();
    assert!(!irregular.is_full());
    let input = write_tree(dir.path(), "t.json", &irregular);
    let out = dir.path().join("e.csv");
    let res = run(&[
        "--seed",
        "5",
        "eval",
        &input,
        "--uniform",
        "300",
        "-o",
        p(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let csv = fs::read_to_string(&out).unwrap();
    let mut points = Vec::new();
    let mut values = Vec::new();
    for line in csv.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        points.push(Point::xy(f[0], f[1]));
        values.push(f[2]);
    }
    assert_eq!(irregular.eval(&points).unwrap(), values);
}

#[test]
fn eval_against_reference_tree_reports_mse() {
    let dir = TempDir::new().unwrap();
    let tree = write_tree(
        dir.path(),
        "t.json",
        &CsgTree::single_leaf(circle(-0.4, 0.0, 0.3)),
    );
    let out = dir.path().join("e.csv");
    let res = run(&[
        "eval",
        &tree,
        "--uniform",
        "20000",
        "--reference",
        "bundled:two-circles",
        "-o",
        p(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let stdout = String::from_utf8(res.stdout).unwrap();
    let mse: f64 = stdout.split("mse").nth(1).unwrap().trim().parse().unwrap();
    assert!(mse > 0.01 && mse < 0.2, "{mse}");
}

#[test]
fn eval_dimension_mismatch_exits_with_input_error() {
    let dir = TempDir::new().unwrap();
    let tree = write_tree(
        dir.path(),
        "t.json",
        &CsgTree::single_leaf(circle(0.0, 0.0, 0.5)),
    );
    let data = dir.path().join("d.csv");
    fs::write(&data, "dim=3,count=1\n0.1,0.2,0.3,1\n").unwrap();
    let out = dir.path().join("e.csv");
    assert_eq!(
        code(&run(&["eval", &tree, "--points", p(&data), "-o", p(&out)])),
        2
    );
}

#[test]
fn render_full_tree_is_white_and_repeatable() {
    let dir = TempDir::new().unwrap();
    let full = CsgTree::from_expr(2, ControlConfig::default(), &CsgExpr::Constant(1.0)).unwrap();
    let tree = write_tree(dir.path(), "t.json", &full);
    let a = dir.path().join("a.pgm");
    let b = dir.path().join("b.pgm");
    assert_eq!(
        code(&run(&[
            "render-slice",
            &tree,
            "--resolution",
            "32",
            "-o",
            p(&a)
        ])),
        0
    );
    let img = SliceImage::from_pgm(&fs::read(&a).unwrap()).unwrap();
    assert_eq!((img.width, img.height), (32, 32));
    assert!(img.pixels.iter().all(|&v| v == 255));

    let disk = write_tree(
        dir.path(),
        "d.json",
        &bundled_target("four-primitives").unwrap(),
    );
    assert_eq!(
        code(&run(&["render-slice", &disk, "--isoline", "-o", p(&a)])),
        0
    );
    assert_eq!(
        code(&run(&["render-slice", &disk, "--isoline", "-o", p(&b)])),
        0
    );
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn render_slice_argument_errors() {
    let dir = TempDir::new().unwrap();
    let sphere = CsgTree::single_leaf(Primitive::Sphere(
        SpherePrimitive::new(Point::xyz(0.0, 0.0, 0.0), 0.5, 30.0).unwrap(),
    ));
    let tree = write_tree(dir.path(), "s.json", &sphere);
    let out = dir.path().join("o.pgm");
    assert_eq!(
        code(&run(&[
            "render-slice",
            &tree,
            "--axis",
            "2",
            "--offset",
            "1.5",
            "-o",
            p(&out)
        ])),
        2
    );
    assert_eq!(code(&run(&["render-slice", &tree, "-o", p(&out)])), 2);
    assert_eq!(
        code(&run(&[
            "render-slice",
            &tree,
            "--axis",
            "2",
            "--offset",
            "-0.2",
            "--resolution",
            "1",
            "-o",
            p(&out)
        ])),
        2
    );
    let res = run(&[
        "render-slice",
        &tree,
        "--axis",
        "2",
        "--offset",
        "-0.2",
        "--resolution",
        "16",
        "-o",
        p(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn export_grid_round_trips() {
    let dir = TempDir::new().unwrap();
    let shape = bundled_target("soft-blob").unwrap();
    let tree = write_tree(dir.path(), "t.json", &shape);
    let out = dir.path().join("g.bin");
    let res = run(&["export-grid", &tree, "--dims", "12,7", "-o", p(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let grid = OccupancyGrid::read(&out).unwrap();
    assert_eq!(grid.dims, vec![12, 7]);
    let want = shape
        .eval(&OccupancyGrid::cell_centers(
            &[12, 7],
            &BoundingBox::unit(2),
        ))
        .unwrap();
    assert_eq!(grid.values, want);
    assert_eq!(
        code(&run(&["export-grid", &tree, "--dims", "12", "-o", p(&out)])),
        2
    );
}

#[test]
fn compare_single_mode_gives_one_row() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.toml");
    fs::write(
        &cfg,
        "[fit]\nholdout_points = 1000\n[prune]\npoints = 2000\n",
    )
    .unwrap();
    let out = dir.path().join("c.json");
    let res = run(&[
        "--config",
        p(&cfg),
        "compare",
        "bundled:two-circles",
        "--modes",
        "fixed-godel",
        "--iterations",
        "10",
        "--batch-size",
        "256",
        "--depth",
        "1",
        "-o",
        p(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let rows = json(&out);
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["mode"], "fixed-godel");
    assert!(
        rows[0]["nodes_before"]["total"].as_u64().unwrap()
            >= rows[0]["nodes_after"]["total"].as_u64().unwrap()
    );
    assert_eq!(String::from_utf8(res.stdout).unwrap().lines().count(), 2);
}

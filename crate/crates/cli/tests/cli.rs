use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use darkforge::illumination::{align_exposure, IlluminanceBand};
use darkforge::imaging::{encode_ppm, render_reference_isp, write_bayer, write_ppm};
use darkforge::noise::{add_noise, NoiseModel, NoiseOptions};
use darkforge::rng::RngStream;
use darkforge::synth::demo;

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_darkforge"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    let o = run(&["synth", "--bogus"], &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&run(&["frobnicate"], &[])), 2);
    assert_eq!(code(&run(&[], &[])), 2);
    assert_eq!(code(&run(&["--help"], &[])), 0);
    assert_eq!(code(&run(&["diffuse-demo", "--steps", "0"], &[])), 2);
    let o = run(&["isp", "/nonexistent.siedraw", "/tmp/x.ppm"], &[]);
    assert_eq!(code(&o), 1);
    assert!(!o.stderr.is_empty());
}

#[test]
fn synth_is_deterministic_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    assert_eq!(
        code(&run(
            &[
                "demo-data",
                "--out",
                s(&data),
                "--count",
                "3",
                "--width",
                "192",
                "--height",
                "128"
            ],
            &[]
        )),
        0
    );
    let sources = data.join("sources.json");
    let noise = data.join("noise.json");
    let standards = data.join("standards");
    let mut trees = Vec::new();
    for (i, threads) in ["1", "3", "1"].iter().enumerate() {
        let out = d.join(format!("out{i}"));
        let o = run(
            &[
                "synth",
                "--sources",
                s(&sources),
                "--seed",
                "7",
                "--noise",
                s(&noise),
                "--out",
                s(&out),
                "--crop",
                "160x96",
                "--standards",
                s(&standards),
            ],
            &[("DARKFORGE_THREADS", threads)],
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("9 entries: 9 ok"));
        trees.push(tree(&out));
    }
    assert_eq!(trees[0].len(), 19);
    assert!(trees[0].contains_key(Path::new("manifest.json")));
    assert_eq!(trees[0], trees[1]);
    assert_eq!(trees[0], trees[2]);

    // surrogate standards are generated into the output when none are given
    let out = d.join("surrogate");
    let o = run(
        &[
            "synth",
            "--sources",
            s(&sources),
            "--noise",
            s(&noise),
            "--out",
            s(&out),
            "--crop",
            "160x96",
            "--band",
            "1e-3",
        ],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("standards/1e-3.siedraw").is_file());
    let o = run(
        &[
            "verify",
            "--manifest",
            s(&out.join("manifest.json")),
            "--json",
            s(&d.join("r.json")),
        ],
        &[],
    );
    assert!([0, 1].contains(&code(&o)));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["bands"][0]["pairs"], 3);
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cap = demo::scene(128, 96, 3);
    fs::create_dir_all(d.join("std")).unwrap();
    write_bayer(&cap, d.join("cap.siedraw")).unwrap();
    write_ppm(
        &render_reference_isp(&cap, [1.0; 3]).unwrap(),
        d.join("ref.ppm"),
    )
    .unwrap();
    fs::write(
        d.join("sources.json"),
        r#"{"pairs": [{"cap": "cap.siedraw", "ref": "ref.ppm", "id": "a"}]}"#,
    )
    .unwrap();
    NoiseModel::constant(0.0, 0.0)
        .save(d.join("zero.json"))
        .unwrap();
    let band = IlluminanceBand::Band1e3;
    // noise-free dataset against a noise-free planted standard: passes
    write_bayer(
        &align_exposure(&cap, band.surrogate_expo(), 0.0)
            .unwrap()
            .frame,
        d.join("std/1e-3.siedraw"),
    )
    .unwrap();
    let out = d.join("out");
    let o = run(
        &[
            "synth",
            "--sources",
            s(&d.join("sources.json")),
            "--noise",
            s(&d.join("zero.json")),
            "--out",
            s(&out),
            "--crop",
            "128x96",
            "--band",
            "1e-3",
            "--standards",
            s(&d.join("std")),
        ],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = out.join("manifest.json");
    let o = run(
        &[
            "verify",
            "--manifest",
            s(&manifest),
            "--standards",
            s(&d.join("std")),
        ],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("band"));
    let o = run(
        &["verify", "--manifest", s(&manifest), "--dump-histograms"],
        &[],
    );
    assert_eq!(code(&o), 0);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(
        report["entries"][0]["histogram"].as_array().unwrap().len(),
        256
    );

    // a heavily noised standard of the same scene: fails
    let noisy = add_noise(
        &align_exposure(&cap, band.surrogate_expo(), 0.0)
            .unwrap()
            .frame,
        40_000.0,
        &demo::noise_model(),
        RngStream::new(1, 1),
        NoiseOptions::default(),
    )
    .unwrap();
    fs::create_dir_all(d.join("noisy")).unwrap();
    write_bayer(&noisy, d.join("noisy/1e-3.siedraw")).unwrap();
    let o = run(
        &[
            "verify",
            "--manifest",
            s(&manifest),
            "--standards",
            s(&d.join("noisy")),
        ],
        &[],
    );
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("1e-3"));

    fs::remove_file(
        out.join("1e-3")
            .join(if out.join("1e-3/train/a_1e-3.ppm").exists() {
                "train"
            } else {
                "eval"
            })
            .join("a_1e-3.ppm"),
    )
    .unwrap();
    let o = run(&["verify", "--manifest", s(&manifest)], &[]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("a_1e-3"));
}

#[test]
fn isp_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let cap = demo::scene(64, 48, 1);
    let (input, output) = (dir.path().join("in.siedraw"), dir.path().join("out.ppm"));
    write_bayer(&cap, &input).unwrap();
    assert_eq!(
        code(&run(
            &["isp", s(&input), s(&output), "--wb", "2,1,1.5"],
            &[]
        )),
        0
    );
    assert_eq!(
        fs::read(&output).unwrap(),
        encode_ppm(&render_reference_isp(&cap, [2.0, 1.0, 1.5]).unwrap())
    );
}

#[test]
fn diffuse_demo_csv() {
    let args = [
        "diffuse-demo",
        "--T",
        "200",
        "--steps",
        "10",
        "--seed",
        "3",
        "--samples",
        "50",
    ];
    let a = run(&args, &[]);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    let text = String::from_utf8(a.stdout.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "x0,x1");
    assert_eq!(lines.len(), 51);
    assert!(lines[1..]
        .iter()
        .all(|l| l.split(',').all(|v| v.parse::<f64>().unwrap().is_finite())));
    assert_eq!(run(&args, &[("DARKFORGE_THREADS", "2")]).stdout, a.stdout);
    let other = run(
        &[
            "diffuse-demo",
            "--T",
            "200",
            "--steps",
            "10",
            "--seed",
            "4",
            "--samples",
            "50",
        ],
        &[],
    );
    assert_ne!(other.stdout, a.stdout);
}

fn write_tensor(path: &Path, shape: &[usize], f: impl Fn(usize) -> f64) {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(f).collect();
    fs::write(
        path,
        serde_json::json!({ "shape": shape, "data": data }).to_string(),
    )
    .unwrap();
}

#[test]
fn losses_report_and_gradcheck() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    write_tensor(&p("a.json"), &[4, 4, 3], |i| {
        0.1 + 0.8 * ((i * 37 % 97) as f64 / 97.0)
    });
    write_tensor(&p("b.json"), &[4, 4, 3], |i| {
        0.1 + 0.8 * ((i * 53 % 89) as f64 / 89.0)
    });
    write_tensor(&p("c.json"), &[4, 4, 3], |i| {
        0.1 + 0.8 * ((i * 71 % 83) as f64 / 83.0)
    });

    let o = run(
        &[
            "losses",
            "--loss",
            "cdl",
            "--inputs",
            s(&p("a.json")),
            s(&p("a.json")),
        ],
        &[],
    );
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["value"], 0.0);

    let o = run(
        &[
            "losses",
            "--loss",
            "icl",
            "--gradcheck",
            "--grad-out",
            s(&p("g.json")),
            "--inputs",
            s(&p("a.json")),
            s(&p("b.json")),
            s(&p("c.json")),
        ],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["value"].as_f64().unwrap() > 0.0);
    assert!(v["max_rel_error"].as_f64().unwrap() < 1e-5);
    let g: serde_json::Value = serde_json::from_slice(&fs::read(p("g.json")).unwrap()).unwrap();
    assert_eq!(g["shape"], serde_json::json!([4, 4, 3]));

    let o = run(
        &[
            "losses",
            "--loss",
            "ccl",
            "--bins",
            "16",
            "--bandwidth",
            "0.05",
            "--gradcheck",
            "--inputs",
            s(&p("a.json")),
            s(&p("b.json")),
        ],
        &[],
    );
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["max_rel_error"].as_f64().unwrap() < 1e-5, "{v}");

    let o = run(
        &[
            "losses",
            "--loss",
            "con",
            "--inputs",
            s(&p("a.json")),
            s(&p("b.json")),
            s(&p("b.json")),
            s(&p("b.json")),
        ],
        &[],
    );
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let cdl = run(
        &[
            "losses",
            "--loss",
            "cdl",
            "--inputs",
            s(&p("a.json")),
            s(&p("b.json")),
        ],
        &[],
    );
    let cdl: serde_json::Value = serde_json::from_slice(&cdl.stdout).unwrap();
    assert_eq!(v["value"], cdl["value"]);

    assert_eq!(
        code(&run(
            &["losses", "--loss", "icl", "--inputs", s(&p("a.json"))],
            &[]
        )),
        2
    );
    write_tensor(&p("odd.json"), &[2, 3, 3], |_| 0.5);
    assert_eq!(
        code(&run(
            &[
                "losses",
                "--loss",
                "cdl",
                "--inputs",
                s(&p("a.json")),
                s(&p("odd.json"))
            ],
            &[]
        )),
        1
    );
}

#[test]
fn metrics_report() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let a = render_reference_isp(&demo::scene(64, 64, 1), [1.0; 3]).unwrap();
    let b = render_reference_isp(&demo::scene(64, 64, 2), [1.0; 3]).unwrap();
    write_ppm(&a, p("a.ppm")).unwrap();
    write_ppm(&b, p("b.ppm")).unwrap();
    fs::write(
        p("pairs.json"),
        r#"[{"name": "same", "output": "a.ppm", "reference": "a.ppm"}, {"name": "diff", "output": "b.ppm", "reference": "a.ppm"}]"#,
    )
    .unwrap();
    let o = run(
        &[
            "metrics",
            "--pairs",
            s(&p("pairs.json")),
            "--out",
            s(&p("report.json")),
        ],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value =
        serde_json::from_slice(&fs::read(p("report.json")).unwrap()).unwrap();
    assert_eq!(v["images"][0]["psnr_db"], "inf");
    assert_eq!(v["images"][0]["ssim"], 1.0);
    assert!(v["images"][1]["psnr_db"].as_f64().unwrap() > 0.0);
    assert_eq!(v["lpips"], "unavailable");
    let again = run(
        &[
            "metrics",
            "--pairs",
            s(&p("pairs.json")),
            "--window",
            "block8",
        ],
        &[],
    );
    assert_eq!(code(&again), 0);
}

#[test]
fn calibrate_recovers_model() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let meta = demo::meta();
    let mut flats = Vec::new();
    let mut darks = Vec::new();
    for (iso, k, sigma) in [(100.0f32, 1.0, 2.0), (1600.0, 4.0, 6.0)] {
        let model = NoiseModel::constant(k, sigma);
        let ramp: Vec<u16> = (0..256 * 256)
            .map(|i| 600 + (i % 256) as u16 * 40)
            .collect();
        let clean = darkforge::imaging::BayerFrame::new(256, 256, meta, ramp)
            .unwrap()
            .with_iso(iso)
            .unwrap();
        let black = darkforge::imaging::BayerFrame::filled(256, 256, meta, meta.black_level)
            .unwrap()
            .with_iso(iso)
            .unwrap();
        for i in 0..8u64 {
            let f = p(&format!("flat{iso}_{i}.siedraw"));
            write_bayer(
                &add_noise(
                    &clean,
                    f64::from(iso),
                    &model,
                    RngStream::new(i, 1),
                    NoiseOptions::default(),
                )
                .unwrap(),
                &f,
            )
            .unwrap();
            flats.push(f);
            let d = p(&format!("dark{iso}_{i}.siedraw"));
            write_bayer(
                &add_noise(
                    &black,
                    f64::from(iso),
                    &model,
                    RngStream::new(i, 2),
                    NoiseOptions::default(),
                )
                .unwrap(),
                &d,
            )
            .unwrap();
            darks.push(d);
        }
    }
    let mut args = vec![
        "calibrate".to_string(),
        "--out".into(),
        p("model.json").to_string_lossy().into_owned(),
        "--flats".into(),
    ];
    args.extend(flats.iter().map(|f| f.to_string_lossy().into_owned()));
    args.push("--darks".into());
    args.extend(darks.iter().map(|f| f.to_string_lossy().into_owned()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = run(&refs, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let model = NoiseModel::load(p("model.json")).unwrap();
    assert_eq!(model.gain_points.len(), 2);
    assert!((model.gain(100.0) / 1.0 - 1.0).abs() < 0.05, "{model:?}");
    assert!((model.gain(1600.0) / 4.0 - 1.0).abs() < 0.05);
    assert!((model.read_sigma(1600.0) / 6.0 - 1.0).abs() < 0.05);
    assert_eq!(model.dark_bank.len(), 2);
}

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use darkforge::diffusion::{
    linear_schedule, sample, sample_ancestral, samples_to_csv, GaussianMixture, GmmDenoiser,
    Tensor, DEFAULT_BETA_END, DEFAULT_BETA_START,
};
use darkforge::enhance::{
    default_bandwidth, finite_diff_check, loss_ccl, loss_cdl, loss_con, loss_icl, FeatureMap,
    GradCheck,
};
use darkforge::illumination::{IlluminanceBand, KL_THRESHOLD};
use darkforge::imaging::{
    load_bayer, read_ppm, render_reference_isp, write_bayer, write_ppm, WhiteBalance,
};
use darkforge::metrics::{evaluate, SsimOptions, SsimWindow};
use darkforge::noise::{calibrate_from_frames, NoiseModel};
use darkforge::rng::RngStream;
use darkforge::synth::{
    build_dataset, demo, pair_iso, pair_stream, surrogate_standard, verify_dataset,
    DatasetManifest, SourceManifest, SourcePair, SynthConfig, VerifyOptions,
};
use serde::{Deserialize, Serialize};

use crate::{
    CalibrateArgs, DemoArgs, DiffuseArgs, Failure, IspArgs, LossArgs, LossName, MetricsArgs,
    Sampler, SynthArgs, VerifyArgs, Window,
};

type Result<T = ()> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn parent(path: &Path) -> PathBuf {
    path.parent()
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn write_output(out: Option<&Path>, text: &str) -> Result {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn load_frames(paths: &[PathBuf]) -> Result<Vec<darkforge::imaging::BayerFrame>> {
    Ok(paths
        .iter()
        .map(|p| load_bayer(p).with_context(|| format!("reading {}", p.display())))
        .collect::<anyhow::Result<_>>()?)
}

pub fn calibrate(a: CalibrateArgs) -> Result {
    let model = calibrate_from_frames(&load_frames(&a.flats)?, &load_frames(&a.darks)?)?;
    model
        .save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    for (iso, k) in &model.gain_points {
        println!("iso {iso}: gain {k:.6} DN/e");
    }
    for (iso, s) in &model.read_points {
        println!("iso {iso}: read sigma {s:.6} DN");
    }
    Ok(())
}

fn standard_file(dir: &Path, band: IlluminanceBand) -> PathBuf {
    dir.join(format!("{}.siedraw", band.tag()))
}

pub fn synth(a: SynthArgs) -> Result {
    let sources = SourceManifest::load(&a.sources)?;
    let base = parent(&a.sources);
    let model =
        NoiseModel::load(&a.noise).with_context(|| format!("reading {}", a.noise.display()))?;
    let gains = WhiteBalance::new(a.wb).map_err(|e| usage(e.to_string()))?;
    let bands: BTreeSet<IlluminanceBand> = if a.bands.is_empty() {
        IlluminanceBand::ALL.into_iter().collect()
    } else {
        a.bands.iter().copied().collect()
    };

    let mut refs: BTreeMap<IlluminanceBand, Vec<PathBuf>> = BTreeMap::new();
    for spec in &a.standard {
        let (band, path) = spec
            .split_once('=')
            .ok_or_else(|| usage(format!("--standard expects BAND=PATH, got {spec:?}")))?;
        let band: IlluminanceBand = band
            .parse()
            .map_err(|e: darkforge::illumination::IlluminationError| usage(e.to_string()))?;
        refs.entry(band).or_default().push(PathBuf::from(path));
    }
    if let Some(dir) = &a.standards {
        for &band in &bands {
            refs.insert(band, vec![standard_file(dir, band)]);
        }
    }
    if refs.is_empty() {
        // surrogates rendered from the first source by id, so source order does not matter
        let first: &SourcePair = sources
            .pairs
            .iter()
            .min_by(|x, y| x.id.cmp(&y.id))
            .ok_or_else(|| anyhow!("source manifest lists no pairs"))?;
        let cap_path = base.join(&first.cap);
        let cap =
            load_bayer(&cap_path).with_context(|| format!("reading {}", cap_path.display()))?;
        let dir = a.out.join("standards");
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for &band in &bands {
            let path = standard_file(&dir, band);
            write_bayer(&surrogate_standard(&cap, band, &model, a.seed)?, &path)?;
            refs.insert(band, vec![path]);
        }
        eprintln!(
            "darkforge: no standards given; wrote surrogates to {}",
            dir.display()
        );
    }

    let configs = bands
        .iter()
        .map(|&band| {
            let standard_refs = refs
                .get(&band)
                .cloned()
                .ok_or_else(|| usage(format!("no standard for band {band}")))?;
            Ok(SynthConfig {
                standard_refs,
                crop: a.crop,
                bins: a.bins,
                gains,
                dark_bank: a.dark_bank,
                ..SynthConfig::new(band, a.seed)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = build_dataset(&sources, &base, &configs, &model, &a.out)?;
    let ok = manifest.ok_entries().count();
    let failed = manifest.entries.len() - ok;
    println!(
        "{} entries: {ok} ok, {failed} failed",
        manifest.entries.len()
    );
    for e in manifest.entries.iter().filter(|e| e.error.is_some()) {
        eprintln!(
            "darkforge: {}: {}",
            e.pair_id,
            e.error.as_deref().unwrap_or_default()
        );
    }
    for (e, o) in manifest.ok_entries().filter(|(_, o)| o.fields.kl_warning) {
        eprintln!(
            "darkforge: {}: KL {:.4} above {KL_THRESHOLD}",
            e.pair_id, o.fields.achieved_kl
        );
    }
    Ok(())
}

pub fn verify(a: VerifyArgs) -> Result {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let root = parent(&a.manifest);
    let standards = match &a.standards {
        Some(dir) => {
            let bands: BTreeSet<IlluminanceBand> =
                manifest.entries.iter().map(|e| e.band).collect();
            let mut map = BTreeMap::new();
            for band in bands {
                let path = standard_file(dir, band);
                map.insert(
                    band,
                    load_bayer(&path).with_context(|| format!("reading {}", path.display()))?,
                );
            }
            Some(map)
        }
        None => None,
    };
    let opts = VerifyOptions {
        bins: a.bins,
        gains: WhiteBalance::new(a.wb).map_err(|e| usage(e.to_string()))?,
        dump_histograms: a.dump_histograms,
    };
    let report = verify_dataset(&manifest, &root, standards.as_ref(), opts)?;
    match (&a.json, a.dump_histograms) {
        (Some(path), _) => {
            write_output(Some(path), &report.to_json()?)?;
            print!("{}", report.to_text());
        }
        (None, true) => print!("{}", report.to_json()?),
        (None, false) => print!("{}", report.to_text()),
    }
    if report.passes() {
        Ok(())
    } else {
        let over: Vec<&str> = report
            .bands
            .iter()
            .filter(|b| b.mean_kl > KL_THRESHOLD)
            .map(|b| b.band.tag())
            .collect();
        Err(anyhow!(
            "mean KL above {KL_THRESHOLD} in band(s) {}",
            over.join(", ")
        )
        .into())
    }
}

/// Two well-separated 2-D components.
pub fn default_mixture() -> GaussianMixture {
    GaussianMixture::new(
        vec![0.3, 0.7],
        vec![vec![-2.0, 0.5], vec![1.5, -1.0]],
        vec![
            vec![vec![0.3, 0.1], vec![0.1, 0.2]],
            vec![vec![0.5, -0.2], vec![-0.2, 0.4]],
        ],
    )
    .expect("built-in mixture is valid")
}

pub fn diffuse_demo(a: DiffuseArgs) -> Result {
    let gmm = match &a.gmm {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let gmm: GaussianMixture =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            gmm.validate()?;
            gmm
        }
        None => default_mixture(),
    };
    if a.steps == 0 || a.steps > a.train_steps {
        return Err(usage(format!("--steps must lie in 1..={}", a.train_steps)));
    }
    let schedule = linear_schedule(a.train_steps, DEFAULT_BETA_START, DEFAULT_BETA_END)
        .map_err(|e| usage(e.to_string()))?;
    let denoiser = GmmDenoiser {
        gmm: &gmm,
        schedule: &schedule,
    };
    let shape = [a.samples, gmm.dim()];
    let rng = RngStream::new(a.seed, 0);
    let x = match a.sampler {
        Sampler::Ddim => sample(&denoiser, None, &shape, a.steps, &schedule, rng)?,
        Sampler::Ancestral => sample_ancestral(&denoiser, None, &shape, &schedule, rng)?,
    };
    write_output(a.out.as_deref(), &samples_to_csv(&x))
}

#[derive(Serialize, Deserialize)]
struct TensorFile {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn read_tensor(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let t: TensorFile =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(Tensor::new(t.shape, t.data).with_context(|| path.display().to_string())?)
}

#[derive(Serialize)]
struct LossReport {
    loss: &'static str,
    value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_rel_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    coords: Option<usize>,
}

pub fn losses(a: LossArgs) -> Result {
    let tensors = a
        .inputs
        .iter()
        .map(|p| read_tensor(p))
        .collect::<Result<Vec<_>>>()?;
    let expect = |n: usize, name: &str| {
        if tensors.len() == n {
            Ok(())
        } else {
            Err(usage(format!(
                "{name} takes {n} inputs, got {}",
                tensors.len()
            )))
        }
    };
    let map = |t: &Tensor| FeatureMap::from_tensor(t);
    let bandwidth = a.bandwidth.unwrap_or_else(|| default_bandwidth(a.bins));
    let check = GradCheck {
        step: a.step,
        coords: a.coords,
        seed: a.seed,
    };

    let (name, value, grad, x, objective): (
        _,
        _,
        Option<Tensor>,
        Option<Vec<f64>>,
        Option<Box<dyn Fn(&[f64]) -> f64 + Sync>>,
    ) = match a.loss {
        LossName::Icl => {
            expect(3, "icl")?;
            let (fhat, ftilde, fraw) = (map(&tensors[0])?, map(&tensors[1])?, map(&tensors[2])?);
            let loss = loss_icl(&fhat, &ftilde, &fraw)?;
            let x = fhat.data.clone();
            let f = move |v: &[f64]| {
                loss_icl(&fhat.with_data(v.to_vec()).unwrap(), &ftilde, &fraw)
                    .map_or(f64::NAN, |l| l.value)
            };
            (
                "icl",
                loss.value,
                Some(loss.grad.to_tensor()),
                Some(x),
                Some(Box::new(f)),
            )
        }
        LossName::Ccl => {
            expect(2, "ccl")?;
            let (fhat, reference) = (map(&tensors[0])?, map(&tensors[1])?);
            let (tau, bins) = (a.tau, a.bins);
            let loss = loss_ccl(&fhat, &reference, tau, bins, bandwidth)?;
            let x = fhat.data.clone();
            let f = move |v: &[f64]| {
                loss_ccl(
                    &fhat.with_data(v.to_vec()).unwrap(),
                    &reference,
                    tau,
                    bins,
                    bandwidth,
                )
                .map_or(f64::NAN, |l| l.value)
            };
            (
                "ccl",
                loss.value,
                Some(loss.grad.to_tensor()),
                Some(x),
                Some(Box::new(f)),
            )
        }
        LossName::Cdl => {
            expect(2, "cdl")?;
            let loss = loss_cdl(&tensors[0], &tensors[1])?;
            let (xhat, x0) = (tensors[0].clone(), tensors[1].clone());
            let f = move |v: &[f64]| {
                loss_cdl(
                    &Tensor {
                        data: v.to_vec(),
                        ..xhat.clone()
                    },
                    &x0,
                )
                .map_or(f64::NAN, |l| l.value)
            };
            (
                "cdl",
                loss.value,
                Some(loss.grad),
                Some(tensors[0].data.clone()),
                Some(Box::new(f)),
            )
        }
        LossName::Con => {
            if tensors.is_empty() || tensors.len() % 2 == 1 {
                return Err(usage("con takes (input, reconstruction) pairs"));
            }
            if a.gradcheck || a.grad_out.is_some() {
                return Err(usage("con has no gradient output"));
            }
            let pairs: Vec<(&Tensor, &Tensor)> =
                tensors.chunks(2).map(|p| (&p[0], &p[1])).collect();
            ("con", loss_con(&pairs)?, None, None, None)
        }
    };

    let mut report = LossReport {
        loss: name,
        value,
        max_rel_error: None,
        coords: None,
    };
    if let (true, Some(grad), Some(x), Some(f)) = (a.gradcheck, &grad, &x, &objective) {
        report.max_rel_error = Some(finite_diff_check(f, x, &grad.data, check)?);
        report.coords = Some(check.coords.min(x.len()));
    }
    if let (Some(path), Some(grad)) = (&a.grad_out, grad) {
        let json = serde_json::to_string(&TensorFile {
            shape: grad.shape,
            data: grad.data,
        })?;
        write_output(Some(path), &(json + "\n"))?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[derive(Deserialize)]
struct PairSpec {
    name: String,
    output: PathBuf,
    reference: PathBuf,
}

pub fn metrics(a: MetricsArgs) -> Result {
    let text =
        fs::read_to_string(&a.pairs).with_context(|| format!("reading {}", a.pairs.display()))?;
    let specs: Vec<PairSpec> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", a.pairs.display()))?;
    let base = parent(&a.pairs);
    let pairs = specs
        .into_iter()
        .map(|s| {
            let load = |p: &Path| {
                read_ppm(base.join(p))
                    .with_context(|| format!("{}: reading {}", s.name, p.display()))
            };
            Ok((s.name.clone(), load(&s.output)?, load(&s.reference)?))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let window = match a.window {
        Window::Gaussian => SsimWindow::Gaussian,
        Window::Block8 => SsimWindow::Block8,
    };
    let report = evaluate(
        &pairs,
        SsimOptions {
            window,
            peak: a.peak,
            ..Default::default()
        },
    )?;
    write_output(a.out.as_deref(), &report.to_json())
}

pub fn isp(a: IspArgs) -> Result {
    let frame = load_bayer(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let img = render_reference_isp(&frame, a.wb)?;
    write_ppm(&img, &a.output).with_context(|| format!("writing {}", a.output.display()))?;
    Ok(())
}

pub fn demo_data(a: DemoArgs) -> Result {
    if a.count == 0 {
        return Err(usage("--count must be positive"));
    }
    if a.width % 2 == 1 || a.height % 2 == 1 || a.width < 2 || a.height < 2 {
        return Err(usage("--width and --height must be even"));
    }
    for sub in ["caps", "refs", "standards"] {
        fs::create_dir_all(a.out.join(sub))
            .with_context(|| format!("creating {}", a.out.display()))?;
    }
    let model = demo::noise_model();
    model.save(a.out.join("noise.json"))?;
    let mut pairs = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let id = format!("scene{i:04}");
        let cap = demo::scene(a.width, a.height, a.seed.wrapping_add(i as u64));
        write_bayer(&cap, a.out.join("caps").join(format!("{id}.siedraw")))?;
        write_ppm(
            &render_reference_isp(&cap, [1.0; 3])?,
            a.out.join("refs").join(format!("{id}.ppm")),
        )?;
        pairs.push(SourcePair {
            cap: format!("caps/{id}.siedraw"),
            reference: format!("refs/{id}.ppm"),
            id,
        });
    }
    // standards: a separate scene darkened into each band, noised at an ISO drawn from its range
    let backdrop = demo::scene(a.width, a.height, a.seed.wrapping_add(1 << 32));
    for band in IlluminanceBand::ALL {
        let iso = pair_iso(
            band,
            RngStream::new(a.seed, pair_stream(&format!("standard_{band}"))),
        );
        let frame = demo::planted_standard(&backdrop, band.surrogate_expo(), iso, &model, a.seed)?;
        write_bayer(&frame, standard_file(&a.out.join("standards"), band))?;
    }
    let json = serde_json::to_string_pretty(&SourceManifest { pairs })?;
    fs::write(a.out.join("sources.json"), json + "\n")?;
    println!("wrote {} sources to {}", a.count, a.out.display());
    Ok(())
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use motionssl_core::augment::{bevmix, flip_map, random_flip, temporal_sample, FlipAxis, MixPair};
use motionssl_core::container::{ArrayData, Container};
use motionssl_core::ground::GroundConfig;
use motionssl_core::msrm::{refine as refine_labels, MsrmConfig, Provenance};
use motionssl_core::synthworld::{generate, EvalReport, ErrorAccumulator, SceneConfig, SpeedBucket};
use motionssl_core::trainer::{
    evaluate_params, train_ssl as fit, EpochRecord, ParamVector, PredictorConfig, Sample,
    SslConfig,
};
use motionssl_core::{voxelize as voxelize_cloud, BevSequence, GridSpec, MotionField, PointCloud};

use crate::config::{defaults, pick, FileConfig, RunConfig};
use crate::{
    AugmentArgs, CliError, EvalArgs, FlipArg, MsrmArgs, RefineArgs, SynthArgs, TrainArgs,
    VoxelizeArgs,
};

pub const SYNTH_SCENES: usize = 200;
pub const SYNTH_TEST_SCENES: usize = 50;
pub const SYNTH_LABELED_FRAC: f64 = 0.05;

fn read(path: &Path) -> Result<Container, CliError> {
    Container::read(path).map_err(|e| match e {
        motionssl_core::Error::Io(io) => CliError::Data(format!("{}: {io}", path.display())),
        other => CliError::Data(format!("{}: {other}", path.display())),
    })
}

fn write(c: &Container, path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    c.write(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn check_fraction(name: &str, v: f64) -> Result<f64, CliError> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(CliError::Usage(format!("{name} must lie in [0, 1], got {v}")))
    }
}

pub(crate) fn msrm_config(args: &MsrmArgs, file: &FileConfig) -> MsrmConfig {
    let mut c = defaults().0;
    let f = &file.msrm;
    c.regen.k = pick(args.k, f.k, c.regen.k);
    c.mu = pick(args.mu, f.mu, c.mu);
    c.regen.beta = pick(args.beta, f.beta, c.regen.beta);
    c.regen.gamma = pick(args.gamma, f.gamma, c.regen.gamma);
    c.regen.theta_w = pick(args.theta_w, f.theta_w, c.regen.theta_w);
    c.matching.theta_c = pick(args.theta_c, f.theta_c, c.matching.theta_c);
    c.matching.sinkhorn.epsilon = pick(args.epsilon, f.epsilon, c.matching.sinkhorn.epsilon);
    c.matching.sinkhorn.max_iters = pick(args.sinkhorn_iters, f.sinkhorn_iters, c.matching.sinkhorn.max_iters);
    let exclude = args.exclude_ground || f.exclude_ground.unwrap_or(false);
    c.exclude_ground = exclude.then(GroundConfig::default);
    c
}

/// Derives a per-scene seed so scenes can be generated independently.
fn scene_seed(seed: u64, split: u64, index: usize) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(split.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(index as u64);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn synth(args: &SynthArgs, file: &FileConfig) -> Result<(), CliError> {
    let f = &file.synth;
    let seed = pick(args.seed.seed, file.seed, 0);
    let n = pick(args.scenes, f.scenes, SYNTH_SCENES);
    let n_test = pick(args.test_scenes, f.test_scenes, SYNTH_TEST_SCENES);
    let frac = check_fraction("labeled-frac", pick(args.labeled_frac, f.labeled_frac, SYNTH_LABELED_FRAC))?;
    let mut base = f.scene.clone().unwrap_or_default();
    base.n_objects = args.objects.unwrap_or(base.n_objects);
    base.validate()?;
    let n_labeled = (frac * n as f64).round() as usize;

    let jobs: Vec<(&str, u64, usize)> = (0..n)
        .map(|i| (if i < n_labeled { "labeled" } else { "unlabeled" }, 0, i))
        .chain((0..n_test).map(|i| ("test", 1, i)))
        .collect();
    let written: Vec<(String, String)> = jobs
        .par_iter()
        .map(|&(split, tag, i)| {
            let cfg = SceneConfig {
                seed: scene_seed(seed, tag, i),
                ..base.clone()
            };
            let scene = generate(&cfg)?;
            let mut c = Container::new();
            c.put_sequence("occupancy", &scene.sequence)?;
            c.put_map("future", &scene.future)?;
            if split != "unlabeled" {
                c.put_motion("motion", &scene.motion, cfg.horizon_seconds)?;
            }
            let spec = scene.sequence.spec();
            c.push(
                "ground",
                vec![spec.rows(), spec.cols()],
                ArrayData::U8(scene.ground_mask.iter().map(|&g| u8::from(g)).collect()),
                Some("mask"),
                None,
            )?;
            c.set_meta("scene.seed", json!(cfg.seed));
            let rel = format!("{split}/scene_{i:05}.bmt1");
            write(&c, &args.out.join(&rel))?;
            Ok((split.to_string(), rel))
        })
        .collect::<Result<_, CliError>>()?;

    let mut splits: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for key in ["labeled", "unlabeled", "test"] {
        splits.insert(key.into(), vec![]);
    }
    for (split, rel) in written {
        splits.entry(split).or_default().push(rel);
    }
    let manifest = json!({
        "seed": seed,
        "labeled_frac": frac,
        "scene": base,
        "splits": splits,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(args.out.join("manifest.json"), text + "\n")
        .map_err(|e| CliError::Data(format!("manifest: {e}")))?;
    log::info!("wrote {n} training scenes ({n_labeled} labeled) and {n_test} test scenes");
    Ok(())
}

#[derive(Debug, serde::Deserialize)]
struct CsvPoint {
    frame: i32,
    x: f64,
    y: f64,
    z: f64,
}

pub(crate) fn voxelize(args: &VoxelizeArgs, file: &FileConfig) -> Result<(), CliError> {
    let spec = file.grid.unwrap_or_default();
    let horizon = pick(args.horizon, None, 1.0);
    let mut reader = csv::Reader::from_path(&args.input)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.input.display())))?;
    let mut frames: BTreeMap<i32, Vec<[f64; 3]>> = BTreeMap::new();
    for (line, row) in reader.deserialize::<CsvPoint>().enumerate() {
        let p = row.map_err(|e| CliError::Data(format!("{} row {}: {e}", args.input.display(), line + 1)))?;
        frames.entry(p.frame).or_default().push([p.x, p.y, p.z]);
    }
    if frames.is_empty() {
        return Err(CliError::Data(format!("{}: no points", args.input.display())));
    }
    let maps = frames
        .into_iter()
        .map(|(t, pts)| Ok(voxelize_cloud(&PointCloud::new(pts, t)?, &spec)))
        .collect::<Result<Vec<_>, motionssl_core::Error>>()?;
    let seq = BevSequence::new(maps, horizon)?;
    let mut c = Container::new();
    c.put_sequence("occupancy", &seq)?;
    write(&c, &args.out)
}

#[derive(Debug, Serialize)]
struct RefineSummary {
    cells: usize,
    kept: usize,
    selected: usize,
    regenerated: usize,
    mean_delta: Option<f64>,
    transport_converged: bool,
}

pub(crate) fn refine(args: &RefineArgs, file: &FileConfig) -> Result<(), CliError> {
    let cfg = msrm_config(&args.msrm, file);
    let input = read(&args.input)?;
    let seq = input.sequence("occupancy")?;
    let future = input.map("future")?;
    let pseudo = input.motion(&args.motion)?;
    let out = refine_labels(&pseudo, seq.current(), &future, &cfg)?;
    let (rows, cols) = (pseudo.rows(), pseudo.cols());
    let summary = RefineSummary {
        cells: out.cells.len(),
        kept: out.labels.len(),
        selected: out.labels.count(Provenance::Selected),
        regenerated: out.labels.count(Provenance::Regenerated),
        mean_delta: out.mean_delta(),
        transport_converged: out.transport_converged,
    };

    let mut c = Container::new();
    c.put_map("current", seq.current())?;
    let horizon = input
        .require(&args.motion)?
        .header
        .horizon_seconds
        .unwrap_or(seq.horizon_seconds);
    c.put_motion("labels", &out.to_motion_field(rows, cols), horizon)?;
    c.put_cells("cells", &out.cells)?;
    let kept = motionssl_core::CellSet {
        coords: out.labels.kept_idx.iter().map(|&i| out.cells.coords[i]).collect(),
        source_frame: out.cells.source_frame,
    };
    c.put_cells("kept", &kept)?;
    c.push(
        "provenance",
        vec![out.labels.len()],
        ArrayData::U8(
            out.labels
                .provenance
                .iter()
                .map(|p| u8::from(*p == Provenance::Regenerated))
                .collect(),
        ),
        Some("0=selected,1=regenerated"),
        None,
    )?;
    c.push(
        "delta",
        vec![rows, cols],
        ArrayData::F32(out.delta_grid(rows, cols).iter().map(|&d| d as f32).collect()),
        Some("cells"),
        None,
    )?;
    if let (true, Some(plan)) = (args.dump_plan, &out.plan) {
        c.push(
            "plan",
            vec![plan.rows(), plan.cols()],
            ArrayData::F32(plan.values().iter().map(|&v| v as f32).collect()),
            None,
            None,
        )?;
    }
    c.set_meta("mu", json!(cfg.mu));
    c.set_meta("summary", serde_json::to_value(&summary).expect("summary serializes"));
    write(&c, &args.out)?;
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    Ok(())
}

fn flip_name(axis: FlipAxis) -> &'static str {
    match axis {
        FlipAxis::X => "x",
        FlipAxis::Y => "y",
        FlipAxis::None => "none",
    }
}

fn labels_or_empty(c: &Container, seq: &BevSequence) -> Result<MotionField, CliError> {
    Ok(match c.get("motion") {
        Some(_) => c.motion("motion")?,
        None => MotionField::zeros(seq.spec().rows(), seq.spec().cols()),
    })
}

pub(crate) fn augment(args: &AugmentArgs, file: &FileConfig) -> Result<(), CliError> {
    let seed = pick(args.seed.seed, file.seed, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = read(&args.input)?;
    let mut seq = input.sequence("occupancy")?;
    let mut labels = labels_or_empty(&input, &seq)?;
    let mut future = input.get("future").map(|_| input.map("future")).transpose()?;
    let horizon = input
        .get("motion")
        .and_then(|m| m.header.horizon_seconds)
        .unwrap_or(seq.horizon_seconds);

    if let Some(path) = &args.bevmix {
        let other = read(path)?;
        let fg_seq = other.sequence("occupancy")?;
        let fg_labels = labels_or_empty(&other, &fg_seq)?;
        let mixed = bevmix(
            MixPair {
                foreground: (&fg_seq, &fg_labels),
                background: (&seq, &labels),
            },
            &GroundConfig::default(),
        )?;
        seq = mixed.sequence;
        labels = mixed.labels;
        // The mixed scene has no matching future frame.
        future = None;
    }
    if args.ts {
        let (s, l) = temporal_sample(&seq, &labels)?;
        seq = s;
        labels = l;
    }
    let axis = match args.flip {
        FlipArg::X => FlipAxis::X,
        FlipArg::Y => FlipAxis::Y,
        FlipArg::None => FlipAxis::None,
        FlipArg::Random => FlipAxis::random(&mut rng),
    };
    let (seq, labels) = random_flip(&seq, &labels, axis);
    let future = future.map(|f| flip_map(&f, axis));

    let mut c = Container::new();
    c.put_sequence("occupancy", &seq)?;
    c.put_motion("motion", &labels, horizon)?;
    if let Some(f) = &future {
        c.put_map("future", f)?;
    }
    c.set_meta(
        "augment",
        json!({
            "flip": flip_name(axis),
            "temporal": args.ts,
            "bevmix": args.bevmix.is_some(),
            "seed": seed,
        }),
    );
    write(&c, &args.out)
}

fn scene_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bmt1"))
        .collect();
    files.sort();
    Ok(files)
}

fn load_samples(dir: &Path, need_labels: bool) -> Result<Vec<Sample>, CliError> {
    let files = scene_files(dir)?;
    files
        .par_iter()
        .map(|path| {
            let c = read(path)?;
            let labels = match (c.get("motion"), need_labels) {
                (Some(_), _) => Some(c.motion("motion")?),
                (None, true) => {
                    return Err(CliError::Data(format!("{}: no motion labels", path.display())))
                }
                (None, false) => None,
            };
            Ok(Sample {
                sequence: c.sequence("occupancy")?,
                labels,
                future: c.get("future").map(|_| c.map("future")).transpose()?,
            })
        })
        .collect()
}

fn vec_arg<const N: usize>(name: &str, v: &Option<Vec<usize>>) -> Result<Option<[usize; N]>, CliError> {
    v.as_ref()
        .map(|v| {
            <[usize; N]>::try_from(v.as_slice())
                .map_err(|_| CliError::Usage(format!("--{name} takes {N} comma-separated values")))
        })
        .transpose()
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    phase: &'a str,
    epoch: usize,
    loss_s: f64,
    loss_u: f64,
    loss: f64,
    pseudo_cells: usize,
    static_mean: Option<f64>,
    static_median: Option<f64>,
    slow_mean: Option<f64>,
    slow_median: Option<f64>,
    fast_mean: Option<f64>,
    fast_median: Option<f64>,
}

impl<'a> CsvRow<'a> {
    fn new(r: &'a EpochRecord) -> Self {
        let e = r.eval;
        let stat = |b: SpeedBucket| e.map(|e| *e.bucket(b));
        CsvRow {
            phase: match r.phase {
                motionssl_core::trainer::Phase::Teacher => "teacher",
                motionssl_core::trainer::Phase::Ssl => "ssl",
            },
            epoch: r.epoch,
            loss_s: r.loss_s,
            loss_u: r.loss_u,
            loss: r.loss,
            pseudo_cells: r.pseudo_cells,
            static_mean: stat(SpeedBucket::Static).and_then(|s| s.mean),
            static_median: stat(SpeedBucket::Static).and_then(|s| s.median),
            slow_mean: stat(SpeedBucket::Slow).and_then(|s| s.mean),
            slow_median: stat(SpeedBucket::Slow).and_then(|s| s.median),
            fast_mean: stat(SpeedBucket::Fast).and_then(|s| s.mean),
            fast_median: stat(SpeedBucket::Fast).and_then(|s| s.median),
        }
    }
}

fn ssl_config(args: &TrainArgs, file: &FileConfig, first: &BevSequence) -> Result<SslConfig, CliError> {
    let f = &file.train;
    let mut c = defaults().1;
    c.msrm = msrm_config(&args.msrm, file);
    c.train.seed = pick(args.seed.seed, file.seed, 0);
    c.train.epochs = pick(args.epochs, f.epochs, c.train.epochs);
    c.ssl_epochs = pick(args.ssl_epochs, f.ssl_epochs, c.ssl_epochs);
    c.train.batch_size = pick(args.batch_size, f.batch_size, c.train.batch_size);
    c.train.adam.lr = pick(args.lr, f.lr, c.train.adam.lr);
    c.alpha = pick(args.alpha, f.alpha, c.alpha);
    c.labeled_fraction = check_fraction(
        "labeled-frac",
        pick(args.labeled_frac, f.labeled_frac, c.labeled_fraction),
    )?;
    c.temporal_prob = pick(args.temporal_prob, f.temporal_prob, c.temporal_prob);
    c.bevmix_prob = pick(args.bevmix_prob, f.bevmix_prob, c.bevmix_prob);
    c.steps_per_epoch = args.steps_per_epoch.or(f.steps_per_epoch);
    let mut p = PredictorConfig::for_sequence(first);
    p.hidden = pick(vec_arg("hidden", &args.hidden)?, f.hidden, p.hidden);
    p.kernels = pick(vec_arg("kernels", &args.kernels)?, f.kernels, p.kernels);
    c.train.predictor = p;
    c.validate()?;
    Ok(c)
}

pub(crate) fn train_ssl(
    args: &TrainArgs,
    file: &FileConfig,
    threads: usize,
    verbosity: u8,
) -> Result<(), CliError> {
    let labeled = load_samples(&args.labeled, true)?;
    let first = labeled
        .first()
        .ok_or_else(|| CliError::Data(format!("{}: no scenes", args.labeled.display())))?;
    let unlabeled = match &args.unlabeled {
        Some(dir) => load_samples(dir, false)?
            .into_iter()
            .map(|s| Sample { labels: None, ..s })
            .collect(),
        None => vec![],
    };
    let eval = args.eval.as_deref().map(|d| load_samples(d, true)).transpose()?;
    let ssl = ssl_config(args, file, &first.sequence)?;
    let run = RunConfig {
        command: "train-ssl",
        seed: ssl.train.seed,
        threads,
        verbosity,
        msrm: ssl.msrm.clone(),
        ssl: ssl.clone(),
    };
    log::info!("{run:?}");
    let outcome = fit(&labeled, &unlabeled, &ssl, eval.as_deref())?;

    let mut c = outcome.teacher.to_container()?;
    c.set_meta("predictor", serde_json::to_value(ssl.train.predictor).expect("config serializes"));
    c.put_grid(first.sequence.spec());
    write(&c, &args.out)?;

    let csv_path = args.csv.clone().unwrap_or_else(|| args.out.with_extension("csv"));
    let mut w = csv::Writer::from_path(&csv_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", csv_path.display())))?;
    for r in &outcome.history {
        w.serialize(CsvRow::new(r))
            .map_err(|e| CliError::Data(format!("{}: {e}", csv_path.display())))?;
    }
    w.flush()
        .map_err(|e| CliError::Data(format!("{}: {e}", csv_path.display())))?;
    Ok(())
}

pub(crate) fn load_params(path: &Path) -> Result<(PredictorConfig, ParamVector), CliError> {
    let c = read(path)?;
    let cfg: PredictorConfig = c
        .meta("predictor")
        .cloned()
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| CliError::Data(format!("{}: predictor metadata: {e}", path.display())))?
        .ok_or_else(|| CliError::Data(format!("{}: no predictor metadata", path.display())))?;
    Ok((cfg, ParamVector::from_container(&c)?))
}

fn report_rows(report: &EvalReport) -> Vec<(String, usize, Option<f64>, Option<f64>)> {
    SpeedBucket::ALL
        .iter()
        .map(|&b| {
            let s = report.bucket(b);
            (b.name().to_string(), s.count, s.mean, s.median)
        })
        .collect()
}

pub(crate) fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let report = match (&args.pred, &args.gt, &args.params, &args.data) {
        (Some(pred), Some(gt), None, None) => {
            let p = read(pred)?;
            let g = read(gt)?;
            let spec: GridSpec = g.grid().or_else(|_| p.grid())?;
            let mut acc = ErrorAccumulator::default();
            acc.add(&p.motion(&args.pred_name)?, &g.motion(&args.gt_name)?, &spec)?;
            acc.report()
        }
        (None, _, Some(params), Some(data)) => {
            let (cfg, values) = load_params(params)?;
            let samples = load_samples(data, true)?;
            evaluate_params(&cfg, &values, &samples)?
        }
        _ => {
            return Err(CliError::Usage(
                "eval needs either --pred with --gt, or --params with --data".into(),
            ))
        }
    };
    let rows = report_rows(&report);
    if let Some(out) = &args.out {
        let mut w = csv::Writer::from_path(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
        w.write_record(["bucket", "count", "mean", "median"])
            .and_then(|_| {
                rows.iter().try_for_each(|(b, n, mean, median)| {
                    w.serialize((b, n, mean, median))
                })
            })
            .and_then(|_| w.flush().map_err(csv::Error::from))
            .map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    }
    let json: BTreeMap<&str, serde_json::Value> = rows
        .iter()
        .map(|(b, n, mean, median)| (b.as_str(), json!({"count": n, "mean": mean, "median": median})))
        .collect();
    println!("{}", serde_json::to_string(&json).expect("report serializes"));
    Ok(())
}

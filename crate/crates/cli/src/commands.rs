use std::fs;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use partlatent::applications::{
    add_part, cascaded_complete, interpolate_part, mix_and_refine, remove_part, replace_part,
};
use partlatent::diffusion::{
    decode_shape, encode_shape, is_structurally_valid, median, sample as sample_latents, LabelInit, LossWeights,
    ModelOptions, ShapeLatent, ShapeModel, TrainConfig,
};
use partlatent::geometry::PointCloud;
use partlatent::metrics::{evaluate, EvalOptions, DEFAULT_EMD_POINTS, DEFAULT_EVAL_POINTS};
use partlatent::ply;
use partlatent::ssm::{fit_ssm as fit_one, PartSsm, DEFAULT_Q};
use partlatent::synthetic::{generate_dataset, read_dataset, write_dataset, Dataset, FamilyConfig, MANIFEST_FILE};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::{CliError, CompleteArgs, EditArgs, EvalArgs, FitSsmArgs, MakeDataArgs, SampleArgs, ServeArgs, TrainArgs};

const LATENTS_FORMAT: &str = "partlatent-latents";
const LATENTS_VERSION: u32 = 1;
const SSM_REPORT: &str = "report.json";

fn ssm_file(id: usize) -> String {
    format!("ssm_{id}.pssm")
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn load_model(path: &Path) -> Result<ShapeModel, CliError> {
    ShapeModel::load(path).map_err(|e| CliError {
        message: format!("{}: {}", path.display(), e),
        ..CliError::from(e)
    })
}

#[derive(Serialize)]
struct DataSummary<'a> {
    out: &'a Path,
    shapes: usize,
    categories: Vec<&'a str>,
    points_per_part: usize,
}

pub fn make_data(a: MakeDataArgs, c: &Config) -> Result<(), CliError> {
    let out: PathBuf = c.required(a.out, "out")?;
    let n = c.get(a.n, "n", 2000usize)?;
    let family = FamilyConfig {
        points_per_part: c.get(a.points, "points", 256usize)?,
        amplitude: c.get(a.amplitude, "amplitude", 1.0f64)?,
        ..FamilyConfig::default()
    };
    let seed = c.get(a.seed, "seed", 0u64)?;
    if n == 0 {
        return Err(CliError::usage("--n must be positive"));
    }
    let data = generate_dataset(&family, n, seed)?.dataset;
    write_dataset(&data, &out)?;
    log::info!("wrote {n} shapes to {}", out.display());
    print_json(&DataSummary {
        out: &out,
        shapes: data.shapes.len(),
        categories: data.categories.iter().map(|c| c.name.as_str()).collect(),
        points_per_part: data.points_per_part,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct SsmReport {
    categories: Vec<SsmReportEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SsmReportEntry {
    id: usize,
    name: String,
    file: String,
    samples: usize,
    requested_q: usize,
    q: usize,
    clamped: bool,
    eigenvalues: Vec<f64>,
    /// Cumulative explained-variance ratio after each component.
    explained_variance: Vec<f64>,
}

pub fn fit_ssm(a: FitSsmArgs, c: &Config) -> Result<(), CliError> {
    let data_dir: PathBuf = c.required(a.data, "data")?;
    let out: PathBuf = c.required(a.out, "out")?;
    let q = c.get(a.q, "q", DEFAULT_Q)?;
    let data = read_dataset(&data_dir)?;
    create_dir(&out)?;
    let mut entries = Vec::new();
    for cat in &data.categories {
        let parts = data.parts_of(cat.id);
        let fit = fit_one(&parts, q)?;
        let file = ssm_file(cat.id as usize);
        fit.ssm.save(&out.join(&file))?;
        log::info!(
            "{}: {} parts, q = {}{}",
            cat.name,
            fit.samples,
            fit.ssm.q(),
            if fit.clamped() { " (clamped to data rank)" } else { "" }
        );
        entries.push(SsmReportEntry {
            id: cat.id as usize,
            name: cat.name.clone(),
            file,
            samples: fit.samples,
            requested_q: fit.requested_q,
            q: fit.ssm.q(),
            clamped: fit.clamped(),
            eigenvalues: fit.ssm.eigenvalues().to_vec(),
            explained_variance: fit.ssm.explained_variance(),
        });
    }
    let report = SsmReport { categories: entries };
    write_json(&out.join(SSM_REPORT), &report)?;
    print_json(&report)
}

fn load_ssms(dir: &Path) -> Result<(Vec<String>, Vec<PartSsm>), CliError> {
    let text = fs::read_to_string(dir.join(SSM_REPORT))
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", dir.join(SSM_REPORT).display())))?;
    let report: SsmReport = serde_json::from_str(&text)?;
    let mut names = Vec::new();
    let mut ssms = Vec::new();
    for (i, e) in report.categories.iter().enumerate() {
        if e.id != i {
            return Err(CliError::data(format!("{SSM_REPORT}: categories out of order at {i}")));
        }
        names.push(e.name.clone());
        ssms.push(PartSsm::load(&dir.join(&e.file))?);
    }
    Ok((names, ssms))
}

fn label_init(raw: &str) -> Result<LabelInit, CliError> {
    match raw.replace('_', "-").as_str() {
        "noised-padding" => Ok(LabelInit::NoisedPadding),
        "pure-noise" => Ok(LabelInit::PureNoise),
        other => Err(CliError::usage(format!("--label-init: unknown value '{other}'"))),
    }
}

pub fn train(a: TrainArgs, c: &Config) -> Result<(), CliError> {
    let data_dir: PathBuf = c.required(a.data, "data")?;
    let ssm_dir: PathBuf = c.required(a.ssm, "ssm")?;
    let out: PathBuf = c.required(a.out, "out")?;
    let loss_log = c.optional(a.loss_log, "loss-log")?.unwrap_or_else(|| {
        let mut s = out.clone().into_os_string();
        s.push(".loss.csv");
        PathBuf::from(s)
    });
    let d = TrainConfig::default();
    let steps = c.get(a.steps, "steps", d.steps)?;
    let cfg = TrainConfig {
        steps,
        batch_size: c.get(a.batch_size, "batch-size", d.batch_size)?,
        lr: c.get(a.lr, "lr", d.lr)?,
        // Default warm-up covers the first 10% of a shortened run.
        warmup: c.get(a.warmup, "warmup", d.warmup.min(steps / 10))?,
        final_lr_fraction: c.get(a.final_lr_fraction, "final-lr-fraction", d.final_lr_fraction)?,
        clip_norm: c.get(a.clip_norm, "clip-norm", d.clip_norm)?,
        ema_decay: c.get(a.ema_decay, "ema-decay", d.ema_decay)?,
        seed: c.get(a.seed, "seed", d.seed)?,
    };
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let o = ModelOptions::default();
    let options = ModelOptions {
        model_dim: c.get(a.model_dim, "model-dim", o.model_dim)?,
        blocks: c.get(a.blocks, "blocks", o.blocks)?,
        heads: c.get(a.heads, "heads", o.heads)?,
        time_dim: c.get(a.time_dim, "time-dim", o.time_dim)?,
        ff_mult: c.get(a.ff_mult, "ff-mult", o.ff_mult)?,
        diffusion_steps: c.get(a.diffusion_steps, "diffusion-steps", o.diffusion_steps)?,
        weights: LossWeights {
            mse: c.get(a.weight_mse, "weight-mse", o.weights.mse)?,
            ce: c.get(a.weight_ce, "weight-ce", o.weights.ce)?,
            kl: c.get(a.weight_kl, "weight-kl", o.weights.kl)?,
        },
        noisy_labels: c.get(a.noisy_labels, "noisy-labels", o.noisy_labels)?,
        label_init: match c.optional(a.label_init, "label-init")? {
            Some(raw) => label_init(&raw)?,
            None => o.label_init,
        },
    };
    let log_every = c.get(a.log_every, "log-every", 100usize)?.max(1);

    let data = read_dataset(&data_dir)?;
    let (names, ssms) = load_ssms(&ssm_dir)?;
    if names.len() != data.m() || names.iter().zip(&data.categories).any(|(n, c)| *n != c.name) {
        return Err(CliError::data("shape models do not match the dataset categories"));
    }
    let mut model = ShapeModel::new(names, ssms, options, cfg.seed)?;
    let latents = data
        .shapes
        .iter()
        .map(|s| encode_shape(&model.layout, &model.codebook, &model.ssms, s))
        .collect::<Result<Vec<_>, _>>()?;
    log::info!(
        "training on {} shapes, {} parameters, {} steps",
        latents.len(),
        model.denoiser.parameter_count(),
        cfg.steps
    );
    let mut csv = String::from("step,lr,total,mse,ce,kl\n");
    let history = partlatent::diffusion::train(&mut model, &latents, &cfg, |step, l| {
        csv.push_str(&format!(
            "{step},{},{},{},{},{}\n",
            cfg.lr_at(step),
            l.total,
            l.mse,
            l.ce,
            l.kl
        ));
        if step % log_every == 0 || step + 1 == cfg.steps {
            log::info!(
                "step {step}: loss {:.4} (mse {:.4}, ce {:.4}, kl {:.4})",
                l.total,
                l.mse,
                l.ce,
                l.kl
            );
        }
    })?;
    model.save(&out)?;
    fs::write(&loss_log, csv)?;
    let totals: Vec<f64> = history.iter().map(|h| h.total).collect();
    let w = (totals.len() / 10).max(1);
    log::info!(
        "median loss: first 10% {:.4}, last 10% {:.4}; wrote {} and {}",
        median(&totals[..w]),
        median(&totals[totals.len() - w..]),
        out.display(),
        loss_log.display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct LatentsFile {
    format: String,
    version: u32,
    categories: Vec<String>,
    geometry_dims: Vec<usize>,
    shapes: Vec<ShapeLatent>,
}

fn write_latents(path: &Path, model: &ShapeModel, shapes: Vec<ShapeLatent>) -> Result<(), CliError> {
    write_json(
        path,
        &LatentsFile {
            format: LATENTS_FORMAT.into(),
            version: LATENTS_VERSION,
            categories: model.category_names.clone(),
            geometry_dims: model.layout.geometry_dims.clone(),
            shapes,
        },
    )
}

fn read_latents(path: &Path, model: &ShapeModel) -> Result<Vec<ShapeLatent>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    let file: LatentsFile = serde_json::from_str(&text)?;
    if file.format != LATENTS_FORMAT || file.version != LATENTS_VERSION {
        return Err(CliError::data(format!(
            "{}: not a version {LATENTS_VERSION} latents file",
            path.display()
        )));
    }
    if file.geometry_dims != model.layout.geometry_dims || file.categories != model.category_names {
        return Err(CliError::data(format!(
            "{}: latents do not match the model",
            path.display()
        )));
    }
    for s in &file.shapes {
        s.validate(&model.layout)?;
    }
    Ok(file.shapes)
}

/// Writes `shape_NNNN.ply` per latent plus `latents.json`.
fn write_shapes(out: &Path, model: &ShapeModel, latents: Vec<ShapeLatent>, stem: &str) -> Result<(), CliError> {
    create_dir(out)?;
    for (i, l) in latents.iter().enumerate() {
        let id = format!("{stem}_{i:04}");
        let shape = decode_shape(&model.layout, &model.codebook, &model.ssms, l, &id)?;
        let mut file = std::io::BufWriter::new(fs::File::create(out.join(format!("{id}.ply")))?);
        ply::write_shape(&mut file, &shape)?;
        file.flush()?;
    }
    write_latents(&out.join("latents.json"), model, latents)
}

pub fn sample(a: SampleArgs, c: &Config) -> Result<(), CliError> {
    let model = load_model(&c.required::<PathBuf>(a.model, "model")?)?;
    let n = c.get(a.n, "n", 16usize)?;
    let seed = c.get(a.seed, "seed", 0u64)?;
    let out: PathBuf = c.required(a.out, "out")?;
    if n == 0 {
        return Err(CliError::usage("--n must be positive"));
    }
    let latents = sample_latents(&model, n, seed)?;
    let valid = latents
        .iter()
        .filter(|l| is_structurally_valid(&model.layout, &model.codebook, l))
        .count();
    log::info!("{valid}/{n} samples structurally valid");
    write_shapes(&out, &model, latents, "shape")
}

#[derive(Serialize)]
struct CompletionReport<'a> {
    category: usize,
    name: &'a str,
    ambiguous: bool,
    distances: &'a [f64],
    latent: &'a [f64],
    row: usize,
    fit_residual: f64,
    warnings: &'a [String],
}

pub fn complete(a: CompleteArgs, c: &Config) -> Result<(), CliError> {
    let model = load_model(&c.required::<PathBuf>(a.model, "model")?)?;
    let input: PathBuf = c.required(a.input, "input")?;
    let k = c.get(a.k, "k", 3usize)?;
    let seed = c.get(a.seed, "seed", 0u64)?;
    let out: PathBuf = c.required(a.out, "out")?;
    let reader = std::io::BufReader::new(
        fs::File::open(&input).map_err(|e| CliError::data(format!("cannot open {}: {e}", input.display())))?,
    );
    let points = ply::read_points(reader)?;
    let cloud = PointCloud::new(points.into_iter().map(|p| p.point).collect())?;
    let done = cascaded_complete(&model, &cloud, k, seed)?;
    for w in &done.warnings {
        log::warn!("{w}");
    }
    let cat = done.matched.category as usize;
    create_dir(&out)?;
    write_json(
        &out.join("completion.json"),
        &CompletionReport {
            category: cat,
            name: &model.category_names[cat],
            ambiguous: done.matched.ambiguous,
            distances: &done.matched.distances,
            latent: &done.latent,
            row: done.row,
            fit_residual: done.residual,
            warnings: &done.warnings,
        },
    )?;
    log::info!("observed part identified as {}", model.category_names[cat]);
    write_shapes(&out, &model, done.latents, "completion")
}

fn category_arg(model: &ShapeModel, raw: Option<String>) -> Result<usize, CliError> {
    let raw = raw.ok_or_else(|| CliError::usage("--category is required for this operation"))?;
    model
        .category_names
        .iter()
        .position(|n| *n == raw)
        .or_else(|| raw.parse::<usize>().ok().filter(|i| *i < model.m()))
        .ok_or_else(|| CliError::usage(format!("--category: unknown category '{raw}'")))
}

fn latent_arg(model: &ShapeModel, category: usize, raw: Option<String>) -> Result<Vec<f64>, CliError> {
    let q = model.layout.geometry_dims[category];
    let Some(raw) = raw else {
        return Ok(vec![0.0; q]);
    };
    let z = raw
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::usage(format!("--z: {e}")))?;
    if z.len() != q || z.iter().any(|v| !v.is_finite()) {
        return Err(CliError::usage(format!(
            "--z must hold {q} finite values for this category"
        )));
    }
    Ok(z)
}

fn pick(shapes: &[ShapeLatent], index: usize, what: &str) -> Result<ShapeLatent, CliError> {
    shapes
        .get(index)
        .cloned()
        .ok_or_else(|| CliError::usage(format!("{what} index {index} outside 0..{}", shapes.len())))
}

pub fn edit(a: EditArgs, c: &Config) -> Result<(), CliError> {
    let model = load_model(&c.required::<PathBuf>(a.model, "model")?)?;
    let latents_path: PathBuf = c.required(a.latents, "latents")?;
    let op: String = c.required(a.op, "op")?;
    let out: PathBuf = c.required(a.out, "out")?;
    let shapes = read_latents(&latents_path, &model)?;
    let shape = pick(&shapes, c.get(a.index, "index", 0usize)?, "--index")?;
    let category = c.optional(a.category, "category")?;
    let z = c.optional(a.z, "z")?;
    let other = || -> Result<ShapeLatent, CliError> {
        let path = c
            .optional(a.other.clone(), "other")?
            .unwrap_or_else(|| latents_path.clone());
        let others = read_latents(&path, &model)?;
        pick(&others, c.get(a.other_index, "other-index", 0usize)?, "--other-index")
    };
    let (layout, cb) = (&model.layout, &model.codebook);
    let edited = match op.as_str() {
        "add" => {
            let cat = category_arg(&model, category)?;
            add_part(layout, cb, &shape, cat, &latent_arg(&model, cat, z)?)?
        }
        "replace" => {
            let cat = category_arg(&model, category)?;
            replace_part(layout, cb, &shape, cat, &latent_arg(&model, cat, z)?)?
        }
        "remove" => remove_part(layout, cb, &shape, category_arg(&model, category)?)?,
        "interpolate" => {
            let row = c.required(a.row, "row")?;
            let alpha = c.required(a.alpha, "alpha")?;
            interpolate_part(layout, cb, &shape, &other()?, row, alpha)?
        }
        "mix" => {
            let cat = category_arg(&model, category)?;
            let seed = c.get(a.seed, "seed", 0u64)?;
            mix_and_refine(&model, &shape, &other()?, cat, seed)?.1
        }
        other => return Err(CliError::usage(format!("--op: unknown operation '{other}'"))),
    };
    write_shapes(&out, &model, vec![edited], "edited")
}

fn load_set(path: &Path, limit: Option<usize>) -> Result<Vec<PointCloud<f64>>, CliError> {
    let clouds: Vec<PointCloud<f64>> = if path.join(MANIFEST_FILE).is_file() {
        let data: Dataset = read_dataset(path)?;
        let take = limit.unwrap_or(data.shapes.len());
        data.shapes
            .iter()
            .take(take)
            .map(|s| s.to_cloud())
            .collect::<Result<_, _>>()?
    } else {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ply"))
            .collect();
        files.sort();
        files.truncate(limit.unwrap_or(files.len()));
        files
            .iter()
            .map(|f| -> Result<PointCloud<f64>, CliError> {
                let reader = std::io::BufReader::new(fs::File::open(f)?);
                let pts = ply::read_points(reader).map_err(|e| CliError::data(format!("{}: {e}", f.display())))?;
                Ok(PointCloud::new(pts.into_iter().map(|p| p.point).collect())?)
            })
            .collect::<Result<_, _>>()?
    };
    if clouds.is_empty() {
        return Err(CliError::data(format!("{}: no shapes found", path.display())));
    }
    Ok(clouds)
}

pub fn eval(a: EvalArgs, c: &Config) -> Result<(), CliError> {
    let gen_dir: PathBuf = c.required(a.gen, "gen")?;
    let ref_dir: PathBuf = c.required(a.reference, "ref")?;
    let limit = c.optional(a.limit, "limit")?;
    let options = EvalOptions {
        eval_points: c.get(a.eval_points, "eval-points", DEFAULT_EVAL_POINTS)?,
        emd_points: c.get(a.emd_points, "emd-points", DEFAULT_EMD_POINTS)?,
        seed: c.get(a.seed, "seed", 0u64)?,
    };
    if options.eval_points == 0 {
        return Err(CliError::usage("--eval-points must be positive"));
    }
    let out = c.optional(a.out, "out")?;
    let gen = load_set(&gen_dir, limit)?;
    let refs = load_set(&ref_dir, limit)?;
    log::info!(
        "evaluating {} generated against {} reference shapes",
        gen.len(),
        refs.len()
    );
    let report = evaluate(&gen, &refs, &options)?;
    eprint!("{}", report.to_table());
    match out {
        Some(path) => write_json(&path, &report),
        None => print_json(&report),
    }
}

pub fn serve(a: ServeArgs, c: &Config) -> Result<(), CliError> {
    let model = load_model(&c.required::<PathBuf>(a.model, "model")?)?;
    let host: String = c.get(a.host, "host", "127.0.0.1".to_string())?;
    let port = c.get(a.port, "port", 8080u16)?;
    let ip: IpAddr = host
        .parse()
        .map_err(|_| CliError::usage(format!("--host: invalid address '{host}'")))?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime
        .block_on(partlatent_service::serve(Arc::new(model), SocketAddr::new(ip, port)))
        .map_err(|e| CliError::data(format!("server: {e}")))
}

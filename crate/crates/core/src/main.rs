use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{Value, json};

use flowedit::config::{ConfigError, DatasetSpec, RunConfig};
use flowedit::data::{self, ShapeSample};
use flowedit::edit::{self, Lookup};
use flowedit::engine::{AttrWeight, Category, EditRequest, Engine, EngineError, SolverChoice, TrajectorySummary, WordScale};
use flowedit::eval;
use flowedit::flow::{self, Trainer};
use flowedit::io::{self, Archive, Checkpoint, Kind, NoiseMeta};
use flowedit::model::{ArchConfig, Model};
use flowedit::ode::{Direction, SolverFamily};
use flowedit::server;
use flowedit::tensor::Tensor;

#[derive(Parser)]
#[command(name = "flowedit", version, about = "Flow-matching U-ViT training, sampling and semantic editing")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SolverArgs {
    #[arg(long, default_value = "dopri5")]
    solver: SolverFamily,
    /// Steps for fixed-step solvers.
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 1e-5)]
    atol: f64,
    #[arg(long, default_value_t = 1e-5)]
    rtol: f64,
}

impl SolverArgs {
    fn choice(&self) -> SolverChoice {
        SolverChoice {
            solver: self.solver,
            steps: self.steps,
            atol: self.atol,
            rtol: self.rtol,
        }
    }
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Checkpoint; defaults to `<output_dir>/checkpoint.fe`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Direction bank for attribute edits.
    #[arg(long)]
    bank: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset container; generated from `--data-n` and `--data-seed` otherwise.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 400)]
    data_n: usize,
    #[arg(long, default_value_t = 7)]
    data_seed: u64,
}

impl DataArgs {
    fn load(&self) -> Result<Vec<ShapeSample>> {
        match &self.dataset {
            Some(p) => Ok(io::dataset_from_archive(&Archive::load_kind(p, Kind::Dataset)?)?),
            None => Ok(data::gen_shapes(self.data_n, self.data_seed)),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes a checkpoint, the loss history and the resolved config.
    Train {
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate a shapes dataset container.
    Dataset {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample images (or points, for 2-D models) from noise seeds.
    Sample {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Consecutive seeds starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value = "")]
        prompt: String,
        #[command(flatten)]
        solver: SolverArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Invert an image to its noise latent.
    Invert {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "")]
        prompt: String,
        #[command(flatten)]
        solver: SolverArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect semantic directions on an euler inversion grid.
    CollectDirections {
        #[command(flatten)]
        model: ModelArgs,
        /// Attribute name stored in the bank; repeatable.
        #[arg(long = "attribute", required = true)]
        attributes: Vec<String>,
        /// Comma-separated labels a positive sample must carry (default: the attribute).
        #[arg(long)]
        pos_filter: Option<String>,
        /// Comma-separated labels a negative sample must carry (default: not positive).
        #[arg(long)]
        neg_filter: Option<String>,
        /// Grid size N; defaults to the config's time grid.
        #[arg(long)]
        grid: Option<usize>,
        /// Prompt used while inverting.
        #[arg(long, default_value = "")]
        prompt: String,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate with attribute offsets and optional reweighting.
    Edit {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, conflicts_with_all = ["image", "seed"])]
        noise: Option<PathBuf>,
        #[arg(long, conflicts_with = "seed")]
        image: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        prompt: Option<String>,
        /// `name=weight`; repeatable.
        #[arg(long = "attr")]
        attrs: Vec<String>,
        #[arg(long, default_value_t = 0.5)]
        t_edit: f64,
        /// `word=scale`; repeatable.
        #[arg(long = "reweight")]
        reweights: Vec<String>,
        #[arg(long)]
        nearest: bool,
        #[command(flatten)]
        solver: SolverArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rescale attention to a prompt word during generation.
    Reweight {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        target: String,
        #[arg(long)]
        scale: f32,
        #[arg(long, default_value_t = 1.0)]
        t_edit: f64,
        /// Restrict to these blocks (comma separated).
        #[arg(long, value_delimiter = ',')]
        blocks: Option<Vec<usize>>,
        #[arg(long)]
        allow_negative: bool,
        #[command(flatten)]
        solver: SolverArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Principal components of inverted latents at one grid time.
    Pca {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        grid_time: f64,
        #[arg(long, default_value_t = 4)]
        components: usize,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long, default_value = "")]
        prompt: String,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-token attention heatmaps for one block and grid step.
    AttnMaps {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 0)]
        block: usize,
        #[arg(long, default_value_t = 50)]
        step: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Acceptance-metric report for a trained checkpoint.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        /// Number of seeds or test images per metric.
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value = "large")]
        attribute: String,
        #[arg(long, default_value_t = 2.0)]
        weight: f64,
        #[arg(long, default_value_t = 0.5)]
        t_edit: f64,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

type Result<T> = std::result::Result<T, EngineError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            let body = json!({"error": {"category": category, "message": e.to_string()}});
            eprintln!("{body}");
            ExitCode::from(category.exit_code() as u8)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn checkpoint_path(cfg: &RunConfig, m: &ModelArgs) -> PathBuf {
    m.checkpoint
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("checkpoint.fe"))
}

fn engine(cfg: &RunConfig, m: &ModelArgs) -> Result<Engine> {
    Engine::load(checkpoint_path(cfg, m), m.bank.as_deref())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| EngineError::Invalid(e.to_string()))?;
    text.push('\n');
    Ok(io::write_file(path, text.as_bytes())?)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Records the command line, inputs and output digests next to an output.
fn manifest(out: &Path, inputs: &[&Path], outputs: &[&Path], extra: Value) -> Result<()> {
    let digest = |p: &Path| -> Result<Value> {
        Ok(json!({"path": p.display().to_string(), "sha256": io::sha256_hex(&io::read_file(p)?)}))
    };
    let m = json!({
        "command": std::env::args().collect::<Vec<_>>(),
        "inputs": inputs.iter().map(|p| digest(p)).collect::<Result<Vec<_>>>()?,
        "outputs": outputs.iter().map(|p| digest(p)).collect::<Result<Vec<_>>>()?,
        "details": extra,
    });
    write_json(&sibling(out, ".manifest.json"), &m)
}

fn parse_pairs<T: std::str::FromStr>(items: &[String], what: &str) -> Result<Vec<(String, T)>> {
    items
        .iter()
        .map(|s| {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| EngineError::Invalid(format!("{what} '{s}' is not name=value")))?;
            let v = v
                .trim()
                .parse()
                .map_err(|_| EngineError::Invalid(format!("{what} '{s}' has a non-numeric value")))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

fn save_images(batch: &Tensor, out: &Path) -> Result<Vec<PathBuf>> {
    let images = batch.unstack();
    if images.len() == 1 {
        io::save_png(&images[0], out)?;
        return Ok(vec![out.to_path_buf()]);
    }
    let stem = out.with_extension("");
    images
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let p = PathBuf::from(format!("{}_{i}.png", stem.display()));
            io::save_png(x, &p)?;
            Ok(p)
        })
        .collect()
}

fn label_filter(spec: &str) -> Result<Vec<String>> {
    let labels: Vec<String> = spec.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    if let Some(bad) = labels.iter().find(|l| !data::LABELS.contains(&l.as_str())) {
        return Err(flowedit::edit::EditError::UnknownAttribute(bad.clone()).into());
    }
    Ok(labels)
}

fn matches(s: &ShapeSample, labels: &[String]) -> bool {
    labels.iter().all(|l| s.attrs.has_label(l) == Some(true))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Train {
            steps,
            seed,
            lr,
            batch_size,
            out,
            resume,
        } => {
            let mut cfg = cfg;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(l) = lr {
                cfg.train.adam.lr = l;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            cfg.validate()?;
            train(&cfg, resume.as_deref())
        }
        Command::Dataset { n, seed, out } => {
            let samples = data::gen_shapes(n, seed);
            io::dataset_to_archive(&samples, seed)?.save(&out)?;
            let digest = data::shapes_digest(&samples);
            manifest(&out, &[], &[&out], json!({"n": n, "seed": seed, "dataset_digest": digest}))?;
            println!("{}", json!({"dataset": out.display().to_string(), "digest": digest}));
            Ok(())
        }
        Command::Sample {
            model,
            seed,
            count,
            prompt,
            solver,
            out,
        } => {
            let e = engine(&cfg, &model)?;
            let seeds: Vec<u64> = (seed..seed + count.max(1) as u64).collect();
            let (x, traj) = e.sample(&seeds, &prompt, &solver.choice())?;
            let written = match e.meta.arch {
                ArchConfig::Mlp(_) => {
                    let mut csv = String::from("x,y\n");
                    for r in x.unstack() {
                        csv.push_str(&format!("{},{}\n", r.data()[0], r.data()[1]));
                    }
                    io::write_file(&out, csv.as_bytes())?;
                    vec![out.clone()]
                }
                ArchConfig::Uvit(_) => save_images(&x, &out)?,
            };
            let summary = TrajectorySummary::new(solver.solver, &traj);
            let ck = checkpoint_path(&cfg, &model);
            let refs: Vec<&Path> = written.iter().map(PathBuf::as_path).collect();
            manifest(&out, &[&ck], &refs, json!({"seeds": seeds, "prompt": prompt, "solver": solver.choice(), "evaluations": summary.evaluations}))?;
            println!("{}", json!({"outputs": refs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(), "evaluations": summary.evaluations}));
            Ok(())
        }
        Command::Invert {
            model,
            image,
            prompt,
            solver,
            out,
        } => {
            let e = engine(&cfg, &model)?;
            let x = io::load_png(&image)?;
            let (noise, traj) = e.invert(&x, &prompt, &solver.choice())?;
            let summary = TrajectorySummary::new(solver.solver, &traj);
            let ids = e.prompt_ids(&prompt)?;
            let mut meta = NoiseMeta {
                prompts: vec![ids],
                info: Default::default(),
            };
            meta.info.insert("prompt".into(), json!(prompt));
            meta.info.insert("trajectory".into(), serde_json::to_value(&summary).unwrap_or(Value::Null));
            io::save_noise(&noise, &meta, &out)?;
            write_json(&sibling(&out, ".json"), &summary)?;
            manifest(&out, &[&checkpoint_path(&cfg, &model), &image], &[&out], json!({"prompt": prompt}))?;
            println!("{}", serde_json::to_string(&summary).unwrap_or_default());
            Ok(())
        }
        Command::CollectDirections {
            model,
            attributes,
            pos_filter,
            neg_filter,
            grid,
            prompt,
            data,
            out,
        } => {
            let e = engine(&cfg, &model)?;
            if attributes.len() > 1 && (pos_filter.is_some() || neg_filter.is_some()) {
                return Err(EngineError::Invalid("--pos-filter/--neg-filter need a single --attribute".into()));
            }
            let samples = data.load()?;
            let n = grid.unwrap_or(cfg.flow.time_grid_n);
            let ids = e.prompt_ids(&prompt)?;
            let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
            let us = edit::collect_u_trajectories(&e.model, &images, &[ids], n, 100)?;
            let mut bank = edit::DirectionBank::new(n, edit::Provenance::Inversion, e.model.latent_shape());
            for name in &attributes {
                let pos_labels = label_filter(pos_filter.as_deref().unwrap_or(name))?;
                let neg_labels = neg_filter.as_deref().map(label_filter).transpose()?;
                let mut pos = Vec::new();
                let mut neg = Vec::new();
                for (u, s) in us.iter().zip(&samples) {
                    let p = matches(s, &pos_labels);
                    let q = match &neg_labels {
                        Some(l) => matches(s, l),
                        None => !p,
                    };
                    if p {
                        pos.push(u.clone());
                    } else if q {
                        neg.push(u.clone());
                    }
                }
                let directions = edit::compute_direction(&pos, &neg)?;
                log::info!("{name}: {} positives, {} negatives", pos.len(), neg.len());
                bank.insert(
                    name.clone(),
                    edit::DirectionSet {
                        directions,
                        positives: pos.len(),
                        negatives: neg.len(),
                    },
                )?;
            }
            io::save_bank(&bank, &out)?;
            let counts: Vec<Value> = bank
                .attributes
                .iter()
                .map(|(k, s)| json!({"attribute": k, "positives": s.positives, "negatives": s.negatives}))
                .collect();
            manifest(&out, &[&checkpoint_path(&cfg, &model)], &[&out], json!({"grid": n, "prompt": prompt, "attributes": counts}))?;
            println!("{}", json!({"bank": out.display().to_string(), "grid": n, "attributes": counts}));
            Ok(())
        }
        Command::Edit {
            model,
            noise,
            image,
            seed,
            prompt,
            attrs,
            t_edit,
            reweights,
            nearest,
            solver,
            out,
        } => {
            let e = engine(&cfg, &model)?;
            let (x0, default_prompt) = if let Some(p) = &noise {
                let (n, meta) = io::load_noise(p)?;
                let text = meta.info.get("prompt").and_then(Value::as_str).unwrap_or("").to_string();
                (n, text)
            } else if let Some(p) = &image {
                let text = prompt.clone().unwrap_or_default();
                let (n, _) = e.invert(&io::load_png(p)?, &text, &solver.choice())?;
                (n, text)
            } else {
                (e.noise(&[seed.unwrap_or(0)])?, String::new())
            };
            let prompt = prompt.unwrap_or(default_prompt);
            let req = EditRequest {
                attrs: parse_pairs::<f64>(&attrs, "attribute")?
                    .into_iter()
                    .map(|(attribute, weight)| AttrWeight { attribute, weight })
                    .collect(),
                t_edit,
                solver: solver.choice(),
                reweights: parse_pairs::<f32>(&reweights, "reweight")?
                    .into_iter()
                    .map(|(word, scale)| WordScale { word, scale })
                    .collect(),
                lookup: if nearest { Lookup::Nearest } else { Lookup::Linear },
                ..EditRequest::default()
            };
            let o = e.edit(&x0, &prompt, &req)?;
            let written = save_images(&o.image, &out)?;
            let refs: Vec<&Path> = written.iter().map(PathBuf::as_path).collect();
            let ck = checkpoint_path(&cfg, &model);
            let mut inputs: Vec<&Path> = vec![&ck];
            inputs.extend(model.bank.as_deref());
            inputs.extend(noise.as_deref());
            inputs.extend(image.as_deref());
            manifest(&out, &inputs, &refs, json!({"request": req, "prompt": prompt, "seed": seed}))?;
            println!("{}", json!({"outputs": refs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(), "relative_edit_error": o.relative_edit_error}));
            Ok(())
        }
        Command::Reweight {
            model,
            seed,
            prompt,
            target,
            scale,
            t_edit,
            blocks,
            allow_negative,
            solver,
            out,
        } => {
            let e = engine(&cfg, &model)?;
            let ids = e.prompt_ids(&prompt)?;
            if e.vocabulary()?.find_target_tokens(&ids, &[target.as_str()]).is_empty() && e.vocabulary()?.id(&target).is_some() {
                log::warn!("'{target}' does not occur in the prompt; output equals the unedited sample");
            }
            let req = EditRequest {
                t_edit,
                solver: solver.choice(),
                reweights: vec![WordScale { word: target, scale }],
                reweight_blocks: blocks,
                allow_negative,
                ..EditRequest::default()
            };
            let o = e.edit(&e.noise(&[seed])?, &prompt, &req)?;
            io::save_png(&o.image.unstack()[0], &out)?;
            manifest(&out, &[&checkpoint_path(&cfg, &model)], &[&out], json!({"request": req, "prompt": prompt, "seed": seed}))?;
            println!("{}", json!({"output": out.display().to_string(), "relative_edit_error": o.relative_edit_error}));
            Ok(())
        }
        Command::Pca {
            model,
            grid_time,
            components,
            grid,
            prompt,
            data,
            out,
        } => {
            let e = engine(&cfg, &model)?;
            if !(0.0..=1.0).contains(&grid_time) {
                return Err(EngineError::Invalid(format!("grid time {grid_time} outside [0, 1]")));
            }
            let n = grid.unwrap_or(cfg.flow.time_grid_n);
            let j = (grid_time * n as f64).round() as usize;
            let samples = data.load()?;
            let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
            let us = edit::collect_u_trajectories(&e.model, &images, &[e.prompt_ids(&prompt)?], n, 100)?;
            let at: Vec<Tensor> = us.into_iter().map(|u| u[j].clone()).collect();
            let pca = edit::pca_directions(&at, components)?;
            let mut a = Archive::new(
                Kind::Components,
                json!({"grid": n, "index": j, "t": j as f64 / n as f64, "explained_variance": pca.explained_variance}),
            )?;
            a.push("mean", pca.mean.clone());
            for (i, c) in pca.components.iter().enumerate() {
                a.push(format!("component/{i}"), c.clone());
            }
            a.save(&out)?;
            let total: f64 = pca.explained_variance.iter().sum();
            let report = json!({
                "t": j as f64 / n as f64,
                "samples": at.len(),
                "explained_variance": pca.explained_variance,
                "fraction_of_listed": pca.explained_variance.iter().map(|v| v / total.max(f64::MIN_POSITIVE)).collect::<Vec<_>>(),
            });
            write_json(&sibling(&out, ".json"), &report)?;
            manifest(&out, &[&checkpoint_path(&cfg, &model)], &[&out], report.clone())?;
            println!("{report}");
            Ok(())
        }
        Command::AttnMaps {
            model,
            prompt,
            block,
            step,
            seed,
            out,
        } => {
            let e = engine(&cfg, &model)?;
            let maps = e.attention(&prompt, block, step, seed)?;
            let max = maps
                .heatmaps
                .iter()
                .flat_map(|h| h.values.iter().copied())
                .fold(0.0f32, f32::max);
            std::fs::create_dir_all(&out).map_err(|source| io::IoError::File {
                path: out.display().to_string(),
                source,
            })?;
            let [gh, gw] = maps.grid;
            let mut written = Vec::new();
            for h in &maps.heatmaps {
                let v: Vec<f32> = h.values.iter().map(|x| if max > 0.0 { x / max } else { 0.0 }).collect();
                let img = Tensor::new([1, gh, gw], v)?;
                let p = out.join(format!("token_{}_{}.png", h.position, h.token.trim_matches(['<', '>'])));
                io::save_png(&img, &p)?;
                written.push(p);
            }
            let json_path = out.join("maps.json");
            write_json(&json_path, &maps)?;
            let refs: Vec<&Path> = written.iter().map(PathBuf::as_path).collect();
            manifest(&json_path, &[&checkpoint_path(&cfg, &model)], &refs, json!({"prompt": prompt, "block": block, "step": step, "seed": seed}))?;
            println!("{}", json!({"dir": out.display().to_string(), "t": maps.t, "tokens": maps.heatmaps.len()}));
            Ok(())
        }
        Command::Eval {
            model,
            n,
            attribute,
            weight,
            t_edit,
            data,
            out,
        } => {
            let e = engine(&cfg, &model)?;
            let report = evaluate(&cfg, &e, n, &attribute, weight, t_edit, &data)?;
            if let Some(o) = &out {
                write_json(o, &report)?;
            }
            println!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
            Ok(())
        }
        Command::Serve { model, port, host } => {
            let engine = match engine(&cfg, &model) {
                Ok(e) => Some(e),
                Err(err) if model.checkpoint.is_none() && err.category() == Category::MissingFile => {
                    log::warn!("no checkpoint: {err}; serving 503 until restarted with one");
                    None
                }
                Err(err) => return Err(err),
            };
            let addr: std::net::SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| EngineError::Invalid(format!("bad address: {e}")))?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| EngineError::Invalid(e.to_string()))?;
            rt.block_on(server::serve(server::AppState::new(engine), addr))
                .map_err(|source| io::IoError::File {
                    path: addr.to_string(),
                    source,
                })?;
            Ok(())
        }
    }
}

fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let data = cfg.train_set()?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.meta.arch != cfg.model {
                return Err(ConfigError::Invalid("checkpoint architecture differs from the config".into()).into());
            }
            ck.into_trainer()?
        }
        None => Trainer::new(Model::init(cfg.model.clone(), cfg.train.seed)?, &cfg.train, cfg.flow.sigma_min),
    };
    let remaining = cfg.train.steps.saturating_sub(trainer.step);
    let every = (cfg.train.steps / 20).max(1);
    trainer.run(&data, remaining, |step, loss| {
        if step % every == 0 {
            log::info!("step {step} loss {loss:.5}");
        }
    })?;
    let dir = &cfg.output_dir;
    let ck_path = dir.join("checkpoint.fe");
    Checkpoint::from_trainer(&trainer, &cfg.flow, &cfg.train, cfg.vocabulary()).save(&ck_path)?;
    let losses_path = dir.join("losses.json");
    let smooth = flow::ema(&trainer.losses, 0.02);
    write_json(&losses_path, &json!({"first_step": trainer.step - trainer.losses.len() as u64 + 1, "loss": trainer.losses, "ema": smooth}))?;
    let config_path = dir.join("config.toml");
    io::write_file(&config_path, cfg.to_toml()?.as_bytes())?;
    let dataset_digest = match (&cfg.dataset, &cfg.model) {
        (DatasetSpec::Shapes { n, seed }, _) => data::shapes_digest(&data::gen_shapes(*n, *seed)),
        _ => io::sha256_hex(&data.latents.to_le_bytes()),
    };
    manifest(
        &ck_path,
        &[],
        &[&ck_path, &losses_path, &config_path],
        json!({"step": trainer.step, "final_loss_ema": smooth.last(), "dataset_digest": dataset_digest}),
    )?;
    println!(
        "{}",
        json!({"checkpoint": ck_path.display().to_string(), "step": trainer.step, "final_loss_ema": smooth.last()})
    );
    Ok(())
}

fn evaluate(cfg: &RunConfig, e: &Engine, n: usize, attribute: &str, weight: f64, t_edit: f64, data: &DataArgs) -> Result<Value> {
    let model = &e.model;
    if let DatasetSpec::TwoMoons { noise_sd, seed, .. } = cfg.dataset {
        let held = data::two_moons(2 * n, noise_sd, seed + 1_000_003);
        let rows = held.unstack();
        let (a, b) = rows.split_at(n);
        let (a, b) = (Tensor::stack(a)?, Tensor::stack(b)?);
        let seeds: Vec<u64> = (0..n as u64).collect();
        let (gen, _) = e.sample(&seeds, "", &SolverChoice::default())?;
        let baseline = eval::energy_distance(&a, &b);
        let ed = eval::energy_distance(&gen, &a);
        return Ok(json!({"energy_distance": ed, "baseline": baseline, "ratio": ed / baseline}));
    }
    let empty = e.prompt_ids("")?;
    let vocab = e.vocabulary()?;
    let test = data::gen_shapes(n, 99);
    let images = Tensor::stack(&test.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
    let prompts = test
        .iter()
        .map(|s| vocab.tokenize(&s.caption, model.prompt_length()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let cycle = eval::cycle_error(model, &images, &prompts, 1e-5)?;
    let samples = data.load()?;
    let bank = match &e.bank {
        Some(b) => b.clone(),
        None => eval::collect_bank(model, &samples, &empty, &[attribute], cfg.flow.time_grid_n, 100)?,
    };
    let (oracle, sign) = eval::oracle_for_label(attribute).ok_or_else(|| edit::EditError::UnknownAttribute(attribute.into()))?;
    let seeds: Vec<u64> = (0..n as u64).collect();
    let setup = eval::EditSetup {
        model,
        bank: &bank,
        prompt: empty.clone(),
        solver: flowedit::ode::SolverSpec::dopri5(1e-5, Direction::Generate),
        x0: eval::seed_noise(model, &seeds)?,
    };
    let base = setup.baseline()?;
    let mut flips = serde_json::Map::new();
    for w in [weight, -weight] {
        let ed = setup.edit(vec![(attribute.to_string(), w)], t_edit, Lookup::Linear)?;
        let c = eval::FlipCount::between(&ed, &base, oracle);
        let toward = if w * sign > 0.0 { c.increase_rate() } else { c.decrease_rate() };
        flips.insert(format!("w={w}"), json!({"counts": c, "rate_toward_label": toward}));
    }
    let sweep = eval::t_edit_sweep(&setup, attribute, weight, &[0.05, 0.1, 0.3, 0.5, 1.0])?;
    let grids = [10, 25, 50, cfg.flow.time_grid_n];
    let interp_n = n.min(10);
    let banks = grids
        .iter()
        .map(|&g| eval::collect_bank(model, &samples, &empty, &[attribute], g, 100))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let table = eval::interpolation_table(
        model,
        &banks,
        &empty,
        &eval::seed_noise(model, &seeds[..interp_n])?,
        attribute,
        weight,
        t_edit,
        1e-5,
    )?;
    Ok(json!({
        "cycle_error": cycle,
        "edit_flip": flips,
        "t_edit_sweep": sweep,
        "interpolation": table,
    }))
}

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use prvr_core::csvfmt::{field, sig9};
use prvr_core::data::{generate_synthetic, load_dataset, make_batches, queries_in, split_pools, write_dataset, SyntheticSpec};
use prvr_core::evaluation::{evaluate, MvGroupReport};
use prvr_core::model::{load_checkpoint, save_checkpoint, CheckpointHeader, ModelState, CHECKPOINT_VERSION};
use prvr_core::training::{fit_with, probe_targets, schedule_at_epoch, training_pools, write_log, TrainConfig};
use prvr_core::Error;
use serde_json::{Map, Value};

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        self.code
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite { .. } => EXIT_NUMERICAL,
            _ => EXIT_INPUT,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::input(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn create(path: &Path) -> CliResult<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| io_err(path, e))?))
}

fn read_json(path: &Path) -> CliResult<Value> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn pretty(v: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// `PRVR_THREADS` caps the worker count. Every stage currently runs on one
/// thread, so the value is only validated.
fn worker_cap() -> CliResult<Option<usize>> {
    match std::env::var("PRVR_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::input(format!("PRVR_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

pub fn synth(spec_path: &Path, out: &Path) -> CliResult {
    let spec: SyntheticSpec = serde_json::from_value(read_json(spec_path)?)
        .map_err(|e| CliError::input(format!("{}: {e}", spec_path.display())))?;
    let ds = generate_synthetic(&spec)?;
    write_dataset(&ds, out)?;
    println!(
        "wrote {} videos and {} queries to {}",
        ds.videos.len(),
        ds.queries.len(),
        out.display()
    );
    Ok(())
}

/// A run config is a training config plus optional `data` and `out` paths.
struct RunConfig {
    train: TrainConfig,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
}

fn parse_run_config(value: Value, origin: &Path) -> CliResult<RunConfig> {
    let Value::Object(mut map) = value else {
        return Err(CliError::input(format!("{}: expected a JSON object", origin.display())));
    };
    let mut path_field = |key: &str| -> CliResult<Option<PathBuf>> {
        match map.remove(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(PathBuf::from(s))),
            Some(other) => Err(CliError::input(format!(
                "{}: field `{key}` must be a string, got {other}",
                origin.display()
            ))),
        }
    };
    let data = path_field("data")?;
    let out = path_field("out")?;
    let train: TrainConfig = serde_json::from_value(Value::Object(map))
        .map_err(|e| CliError::input(format!("{}: {e}", origin.display())))?;
    Ok(RunConfig { train, data, out })
}

fn resolved_json(run: &RunConfig) -> Value {
    let Value::Object(mut map) = serde_json::to_value(&run.train).expect("config serializes") else {
        unreachable!("config is an object")
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map_or(Value::Null, |p| Value::String(p.display().to_string()));
    map.insert("data".into(), path(&run.data));
    map.insert("out".into(), path(&run.out));
    Value::Object(map.into_iter().collect::<Map<_, _>>())
}

fn header_for(cfg: &TrainConfig, state_dims: prvr_core::data::Dims, epoch: usize) -> CheckpointHeader {
    CheckpointHeader {
        version: CHECKPOINT_VERSION,
        dims: state_dims,
        model: cfg.model.clone(),
        branches: cfg.branches,
        sigma: cfg.sigma,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        epoch,
        tensors: Vec::new(),
    }
}

pub fn snapshot_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join("snapshots").join(format!("epoch_{epoch}.ckpt"))
}

pub fn train(config: Option<&Path>, data: Option<PathBuf>, out: Option<PathBuf>, snapshot_epochs: Vec<usize>) -> CliResult {
    worker_cap()?;
    let mut run = match config {
        Some(path) => parse_run_config(read_json(path)?, path)?,
        None => RunConfig {
            train: TrainConfig::default(),
            data: None,
            out: None,
        },
    };
    if data.is_some() {
        run.data = data;
    }
    if out.is_some() {
        run.out = out;
    }
    if !snapshot_epochs.is_empty() {
        run.train.snapshot_epochs = snapshot_epochs;
    }
    let data = run.data.clone().ok_or_else(|| CliError::input("no dataset: pass --data or set \"data\""))?;
    let out = run.out.clone().ok_or_else(|| CliError::input("no output directory: pass --out or set \"out\""))?;
    run.train.validate()?;
    let ds = load_dataset(&data)?;
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    write_file(&out.join("config.resolved.json"), pretty(&resolved_json(&run)))?;

    let cfg = &run.train;
    let dims = ds.dims;
    let observer = |epoch: usize, state: &ModelState| -> prvr_core::Result<()> {
        if cfg.snapshot_epochs.contains(&epoch) {
            save_checkpoint(&snapshot_path(&out, epoch), state, &header_for(cfg, dims, epoch))?;
        }
        Ok(())
    };
    let outcome = match fit_with(cfg, &ds, observer) {
        Ok(o) => o,
        Err(e @ Error::NonFinite { .. }) => {
            if let Error::NonFinite {
                epoch,
                step,
                video_ids,
                query_ids,
            } = &e
            {
                let dump = serde_json::json!({
                    "epoch": epoch,
                    "step": step,
                    "video_ids": video_ids,
                    "query_ids": query_ids,
                });
                write_file(&out.join("nonfinite.json"), pretty(&dump))?;
            }
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };

    let mut log = create(&out.join("train_log.jsonl"))?;
    write_log(&mut log, &outcome.logs).map_err(|e| io_err(&out, e))?;
    log.flush().map_err(|e| io_err(&out, e))?;
    let trained = outcome.best_epoch.map_or(0, |e| e + 1);
    save_checkpoint(&out.join("model.ckpt"), &outcome.best, &header_for(cfg, dims, trained))?;
    let best = outcome.best_epoch.map(|e| &outcome.logs[e].validation);
    println!(
        "{}",
        serde_json::json!({
            "epochs": outcome.logs.len(),
            "best_epoch": outcome.best_epoch,
            "best_validation": best,
            "checkpoint": out.join("model.ckpt").display().to_string(),
        })
    );
    Ok(())
}

fn write_mv_csv(path: &Path, groups: &MvGroupReport) -> CliResult {
    let mut w = create(path)?;
    let mut body = String::from("bin_lo,bin_hi,count,r1,r5,r10,r100,sum_r\n");
    for b in &groups.bins {
        let cells = match &b.recall {
            Some(r) => [r.r1, r.r5, r.r10, r.r100, r.sum_r].map(sig9).join(","),
            None => ",,,,".into(),
        };
        body.push_str(&format!("{},{},{},{cells}\n", sig9(b.lo), sig9(b.hi), b.count));
    }
    w.write_all(body.as_bytes()).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

pub fn eval(model: &Path, data: &Path, sigma: Option<f64>, mv_bins: usize, split: &str, out: Option<&Path>) -> CliResult {
    worker_cap()?;
    let (state, header) = load_checkpoint(model)?;
    let ds = load_dataset(data)?.capped(header.model.max_frames);
    let pools = split_pools(&ds, header.seed);
    let videos = match split {
        "train" => pools.train,
        "val" => pools.val,
        "test" => pools.test,
        other => return Err(CliError::input(format!("unknown split {other:?}, expected train, val or test"))),
    };
    let queries = queries_in(&ds, &videos);
    if queries.is_empty() {
        return Err(CliError::input(format!("the {split} split has no queries")));
    }
    let sigma = sigma.unwrap_or_else(|| header.branches.effective_sigma(header.sigma));
    let (report, margin, ranks) = evaluate(&state, &ds, &videos, &queries, sigma, mv_bins)?;
    let json = pretty(&report);
    print!("{json}");
    if let Some(out) = out {
        write_file(&out.join("report.json"), &json)?;
        write_mv_csv(&out.join("mv_groups.csv"), &report.mv_groups)?;
        let hist_path = out.join("margin_histogram.csv");
        let mut w = create(&hist_path)?;
        margin.write_histogram_csv(&mut w).map_err(|e| io_err(&hist_path, e))?;
        w.flush().map_err(|e| io_err(&hist_path, e))?;
        let mut body = String::from("query_id,video_id,rank\n");
        for r in &ranks {
            let q = &ds.queries[r.query];
            body.push_str(&format!("{},{},{}\n", field(&q.id), field(&ds.videos[q.video].id), r.rank));
        }
        write_file(&out.join("ranks.csv"), body)?;
    }
    Ok(())
}

pub fn inspect_targets(run_dir: &Path, data: &Path, epochs: &[usize], probe_size: usize, out: Option<&Path>) -> CliResult {
    worker_cap()?;
    let config_path = run_dir.join("config.resolved.json");
    let cfg = parse_run_config(read_json(&config_path)?, &config_path)?.train;
    let ds = load_dataset(data)?.capped(cfg.model.max_frames);
    let pools = training_pools(&cfg, &ds)?;
    let probe = make_batches(&ds, &pools.train, probe_size, cfg.seed, 0)?.remove(0);
    let steps_per_epoch = make_batches(&ds, &pools.train, cfg.batch_size, cfg.seed, 0)?.len();
    let default_out = run_dir.join("targets");
    let out = out.unwrap_or(&default_out);
    let video_ids = probe.video_ids(&ds);
    let query_ids = probe.query_ids(&ds);
    for &epoch in epochs {
        let path = snapshot_path(run_dir, epoch);
        if !path.exists() {
            return Err(CliError::input(format!(
                "no snapshot for epoch {epoch} at {} (train with --snapshot-epochs)",
                path.display()
            )));
        }
        let (state, _) = load_checkpoint(&path)?;
        let sched = schedule_at_epoch(&cfg, epoch, steps_per_epoch)?;
        let probe_t = probe_targets(&state, &ds, &probe, &cfg, sched)?;
        let dir = out.join(format!("epoch_{epoch}"));
        let mut branches = vec![("exploration", &probe_t.exploration)];
        if let Some(t) = &probe_t.inheritance {
            branches.push(("inheritance", t));
        }
        let mut summary = Map::new();
        summary.insert("epoch".into(), epoch.into());
        summary.insert("alpha".into(), sched.alpha.into());
        summary.insert("beta".into(), sched.beta.into());
        for (name, targets) in branches {
            for (dir_name, matrix, rows, cols) in [
                ("t2v", targets.t2v_matrix(), &query_ids, &video_ids),
                ("v2t", targets.v2t_matrix(), &video_ids, &query_ids),
            ] {
                let path = dir.join(format!("{name}_{dir_name}.csv"));
                let mut w = create(&path)?;
                matrix.write_csv(&mut w, rows, cols).map_err(|e| io_err(&path, e))?;
                w.flush().map_err(|e| io_err(&path, e))?;
            }
            summary.insert(
                name.into(),
                serde_json::json!({
                    "max_off_diagonal": targets.max_off_diagonal(),
                    "off_diagonal_mass": targets.off_diagonal_mass(),
                }),
            );
        }
        println!("{}", Value::Object(summary));
    }
    Ok(())
}

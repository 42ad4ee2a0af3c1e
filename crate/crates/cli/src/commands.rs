//! The five commands. Results go to the given writer as CSV; diagnostics
//! go to the log.

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use exa_core::dataset::{self, build_dataset, category_histogram, read_dataset, write_dataset, Sample, SampleMeta};
use exa_core::flops::ledger;
use exa_core::geometry::{BoundingBox, ClassId, FaceCategory};
use exa_core::heatmap::Heatmap;
use exa_core::metrics::{evaluate, oracle_output, uniform_output, EvalReport, ImageOutput};
use exa_core::model::check::composed_loss_error;
use exa_core::model::network::Geometry as ModelGeometry;
use exa_core::model::{forward, predict, predict_all, train, ModelConfig, Params, TrainState};
use exa_tensor::gradcheck::{op_suite, DEFAULT_TOLERANCE};
use exa_tensor::{OpKind, Tape};
use serde::{Deserialize, Serialize};

use crate::manifest::Manifest;
use crate::{Baseline, CheckFailed, EvalArgs, FlopsArgs, Geometry, Global, GradcheckArgs, RunConfig, SynthArgs, TrainArgs};

pub const CHECKPOINT: &str = "checkpoint.exat";
pub const MODEL_CONFIG: &str = "model.json";
pub const TRAIN_CONFIG: &str = "train.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const SNAPSHOTS: &str = "snapshots";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const PREDICTIONS: &str = "predictions.jsonl";
pub const FLOPS_CSV: &str = "flops.csv";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> exa_core::Error + '_ {
    move |e| exa_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).map_err(io_err(path))?;
    Ok(())
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("value serializes")
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes") + "\n"
}

pub fn synth(g: &Global, a: &SynthArgs, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let mut run = RunConfig::load(g.config.as_deref())?;
    let d = &mut run.dataset;
    d.scenes = a.scenes.unwrap_or(d.scenes);
    d.crops_per_image = a.crops.unwrap_or(d.crops_per_image);
    d.k = a.k.unwrap_or(d.k);
    d.input_size = a.input_size.unwrap_or(d.input_size);
    d.validate()?;
    log::info!("synthesizing {} scenes x {} crops", d.scenes, d.crops_per_image);
    let samples = build_dataset(d, g.seed)?;
    write_dataset(&g.out, &samples)?;
    let args = serde_json::json!({
        "scenes": d.scenes, "crops": d.crops_per_image, "k": d.k, "input_size": d.input_size,
    });
    let mut m = Manifest::new("synth", g.seed, args, to_json(&run.dataset));
    m.output(&g.out, dataset::SAMPLES_FILE)?;
    m.output(&g.out, dataset::IMAGES_FILE)?;
    m.write(&g.out)?;

    let hist = category_histogram(samples.iter().map(|s| &s.meta));
    let faces: usize = hist.values().sum();
    writeln!(stdout, "category,faces,percent")?;
    for c in FaceCategory::ALL {
        let n = hist.get(&c).copied().unwrap_or(0);
        let pct = if faces > 0 { 100.0 * n as f64 / faces as f64 } else { 0.0 };
        writeln!(stdout, "{},{n},{pct:.2}", c.label())?;
    }
    writeln!(stdout, "total,{faces},100.00")?;
    writeln!(stdout, "samples,{},", samples.len())?;
    Ok(())
}

fn check_compatible(cfg: &ModelConfig, metas: &[SampleMeta]) -> anyhow::Result<()> {
    if let Some(m) = metas.iter().find(|m| m.k as usize != cfg.k || m.input_size as usize != cfg.input_size) {
        return Err(exa_core::Error::Config(format!(
            "sample {} has k={} and input {} but the model expects k={} and input {}",
            m.id, m.k, m.input_size, cfg.k, cfg.input_size
        ))
        .into());
    }
    Ok(())
}

/// Face-class probability map of one sample at pixel resolution.
fn snapshot(cfg: &ModelConfig, geo: &ModelGeometry, params: &Params, sample: &Sample) -> exa_core::Result<Vec<u8>> {
    let p = predict(cfg, geo, params, &sample.image.to_chw())?;
    Ok(p.heatmap.upsample(cfg.stride).to_pgm(ClassId::Face.index()))
}

pub fn train_cmd(g: &Global, a: &TrainArgs, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let mut run = RunConfig::load(g.config.as_deref())?;
    let (m, t) = (&mut run.model, &mut run.train);
    m.mu = a.mu.unwrap_or(m.mu);
    if let Some(s) = &a.scales {
        m.scales = s.clone();
    }
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.lr = a.lr.unwrap_or(t.lr);
    t.max_steps = a.max_steps.or(t.max_steps);
    m.validate()?;
    t.validate()?;
    if m.is_dense() {
        log::info!("single unit scale at full retention: dense reference decoder");
    }
    let samples = read_dataset(&a.data)?;
    let metas: Vec<SampleMeta> = samples.iter().map(|s| s.meta.clone()).collect();
    check_compatible(m, &metas)?;
    create_dir(&g.out.join(SNAPSHOTS))?;

    let state = match &a.resume {
        Some(p) => TrainState::load(m, p)?,
        None => TrainState::new(Params::init(m, g.seed)?),
    };
    let log_path = g.out.join(TRAIN_LOG);
    let file = if state.step > 0 {
        OpenOptions::new().create(true).append(true).open(&log_path)
    } else {
        fs::File::create(&log_path)
    }
    .map_err(io_err(&log_path))?;
    let mut log = BufWriter::new(file);
    let geo = ModelGeometry::new(m)?;
    let ckpt = g.out.join(CHECKPOINT);
    let mut snapshots = BTreeSet::new();
    let mut hook = |epoch: usize, st: &TrainState| -> exa_core::Result<()> {
        st.save(&ckpt)?;
        let name = format!("{SNAPSHOTS}/epoch_{epoch:03}.pgm");
        let path = g.out.join(&name);
        fs::write(&path, snapshot(m, &geo, &st.params, &samples[0])?).map_err(|e| exa_core::Error::Io { path, source: e })?;
        snapshots.insert(name);
        log::info!("epoch {epoch} done at step {}", st.step);
        Ok(())
    };
    let state = train(m, t, &samples, g.seed, state, &mut log, &mut hook)?;
    log.flush().map_err(io_err(&log_path))?;
    drop(log);
    state.save(&ckpt)?;
    write_file(&g.out.join(MODEL_CONFIG), pretty(&run.model).as_bytes())?;
    write_file(&g.out.join(TRAIN_CONFIG), pretty(&run.train).as_bytes())?;

    let args = serde_json::json!({
        "data": a.data, "resume": a.resume, "epochs": run.train.epochs, "mu": run.model.mu,
        "scales": run.model.scales, "max_steps": run.train.max_steps,
    });
    let mut man = Manifest::new("train", g.seed, args, to_json(&run));
    man.input(dataset::SAMPLES_FILE, &a.data.join(dataset::SAMPLES_FILE))?;
    man.input(dataset::IMAGES_FILE, &a.data.join(dataset::IMAGES_FILE))?;
    if let Some(r) = &a.resume {
        man.input("resume", r)?;
    }
    for name in [CHECKPOINT, MODEL_CONFIG, TRAIN_CONFIG] {
        man.output(&g.out, name)?;
    }
    for name in &snapshots {
        man.output(&g.out, name)?;
    }
    man.write(&g.out)?;
    writeln!(stdout, "steps,params")?;
    writeln!(stdout, "{},{}", state.step, state.params.numel())?;
    Ok(())
}

/// One stored prediction, as written by `eval --export`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredPrediction {
    pub id: u64,
    pub boxes: Option<Vec<BoundingBox>>,
    pub heatmap: Heatmap,
}

fn read_predictions(path: &Path) -> anyhow::Result<Vec<ImageOutput>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: StoredPrediction = serde_json::from_str(&line).map_err(|e| exa_core::Error::Format {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 1),
        })?;
        out.push(ImageOutput {
            id: p.id,
            boxes: p.boxes,
            heatmap: p.heatmap,
        });
    }
    Ok(out)
}

/// Model configuration for a checkpoint: the run configuration when one
/// was given, else `model.json` beside the checkpoint.
fn model_config_for(g: &Global, run: &RunConfig, checkpoint: &Path) -> anyhow::Result<ModelConfig> {
    if g.config.is_some() {
        return Ok(run.model.clone());
    }
    let beside = checkpoint.parent().unwrap_or(Path::new(".")).join(MODEL_CONFIG);
    if !beside.exists() {
        return Ok(run.model.clone());
    }
    let text = fs::read_to_string(&beside).map_err(io_err(&beside))?;
    Ok(serde_json::from_str(&text).map_err(|e| exa_core::Error::Config(format!("{}: {e}", beside.display())))?)
}

/// Runs a trained model over samples.
pub fn model_outputs(cfg: &ModelConfig, params: &Params, samples: &[Sample]) -> exa_core::Result<Vec<ImageOutput>> {
    let images: Vec<Vec<f32>> = samples.iter().map(|s| s.image.to_chw()).collect();
    let preds = predict_all(cfg, params, &images)?;
    Ok(preds
        .into_iter()
        .zip(samples)
        .map(|(p, s)| ImageOutput {
            id: s.meta.id,
            boxes: Some(p.boxes),
            heatmap: p.heatmap,
        })
        .collect())
}

pub fn eval_cmd(g: &Global, a: &EvalArgs, stdout: &mut dyn Write) -> anyhow::Result<EvalReport> {
    let run = RunConfig::load(g.config.as_deref())?;
    let samples = read_dataset(&a.data)?;
    let metas: Vec<SampleMeta> = samples.iter().map(|s| s.meta.clone()).collect();
    let mut inputs: Vec<(String, PathBuf)> = vec![
        (dataset::SAMPLES_FILE.into(), a.data.join(dataset::SAMPLES_FILE)),
        (dataset::IMAGES_FILE.into(), a.data.join(dataset::IMAGES_FILE)),
    ];
    let mut config = to_json(&run.model);
    let (method, outputs) = match (a.baseline, &a.predictions, &a.checkpoint) {
        (Some(b), _, _) => {
            let cell = run.model.stride as f64;
            let f = match b {
                Baseline::Uniform => uniform_output,
                Baseline::OracleGt => oracle_output,
            };
            let outs = metas.iter().map(|m| f(m, cell)).collect::<exa_core::Result<Vec<_>>>()?;
            let name = if b == Baseline::Uniform { "uniform" } else { "oracle-gt" };
            (name.to_string(), outs)
        }
        (None, Some(p), _) => {
            inputs.push((PREDICTIONS.into(), p.clone()));
            ("predictions".to_string(), read_predictions(p)?)
        }
        (None, None, Some(c)) => {
            let cfg = model_config_for(g, &run, c)?;
            check_compatible(&cfg, &metas)?;
            let state = TrainState::load(&cfg, c)?;
            inputs.push((CHECKPOINT.into(), c.clone()));
            config = to_json(&cfg);
            ("model".to_string(), model_outputs(&cfg, &state.params, &samples)?)
        }
        (None, None, None) => {
            return Err(exa_core::Error::Config("eval needs --checkpoint, --predictions or --baseline".into()).into());
        }
    };
    let report = evaluate(&method, &metas, &outputs)?;
    create_dir(&g.out)?;
    write_file(&g.out.join(REPORT_JSON), pretty(&report).as_bytes())?;
    write_file(&g.out.join(REPORT_CSV), report.to_csv().as_bytes())?;
    let args = serde_json::json!({
        "data": a.data, "checkpoint": a.checkpoint, "predictions": a.predictions,
        "baseline": a.baseline.map(|b| format!("{b:?}")), "export": a.export,
    });
    let mut man = Manifest::new("eval", g.seed, args, config);
    for (label, path) in &inputs {
        man.input(label, path)?;
    }
    man.output(&g.out, REPORT_JSON)?;
    man.output(&g.out, REPORT_CSV)?;
    if a.export {
        let path = g.out.join(PREDICTIONS);
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        for o in &outputs {
            let p = StoredPrediction {
                id: o.id,
                boxes: o.boxes.clone(),
                heatmap: o.heatmap.clone(),
            };
            writeln!(w, "{}", serde_json::to_string(&p).expect("prediction serializes")).map_err(io_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
        man.output(&g.out, PREDICTIONS)?;
    }
    man.write(&g.out)?;
    write!(stdout, "{}", report.to_csv())?;
    Ok(report)
}

/// Decoder FLOPs counted by the tape during one forward pass.
pub fn measured_decoder_flops(cfg: &ModelConfig, seed: u64) -> exa_core::Result<u64> {
    let geo = ModelGeometry::new(cfg)?;
    let params = Params::init(cfg, seed)?;
    let mut tape = Tape::<f32>::new();
    let bound = params.load(&mut tape, false);
    let image = vec![0.5f32; 3 * cfg.input_size * cfg.input_size];
    Ok(forward(&mut tape, &bound, cfg, &geo, &image)?.decoder_flops)
}

/// Nearest-rank percentile of ascending values.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((q / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

pub fn flops_cmd(g: &Global, a: &FlopsArgs, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let run = RunConfig::load(g.config.as_deref())?;
    let mut cfg = match a.geometry {
        Geometry::Full => ModelConfig::full_geometry(),
        Geometry::Config => run.model.clone(),
    };
    cfg.mu = a.mu.unwrap_or(cfg.mu);
    if let Some(s) = &a.scales {
        cfg.scales = s.clone();
    }
    cfg.validate()?;
    let dense = ModelConfig {
        mu: 100.0,
        ..cfg.clone()
    };
    let sel = ledger(&cfg)?;
    let full = ledger(&dense)?;
    let measured = measured_decoder_flops(&cfg, g.seed)?;
    let measured_full = measured_decoder_flops(&dense, g.seed)?;

    let geo = ModelGeometry::new(&cfg)?;
    let params = Params::init(&cfg, g.seed)?;
    let image = vec![0.5f32; 3 * cfg.input_size * cfg.input_size];
    let mut times = Vec::with_capacity(a.runs);
    for _ in 0..a.runs {
        let start = Instant::now();
        predict(&cfg, &geo, &params, &image)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);

    let chain = |l: &exa_core::flops::FlopLedger| l.token_chain().iter().map(|t| t.to_string()).collect::<Vec<_>>().join(">");
    let mut csv = String::from("metric,value\n");
    let mut row = |k: &str, v: String| csv.push_str(&format!("{k},{v}\n"));
    row("input_size", cfg.input_size.to_string());
    row("stride", cfg.stride.to_string());
    row("k", cfg.k.to_string());
    row("d", cfg.d.to_string());
    row("mu", cfg.mu.to_string());
    row("scales", cfg.scales.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(">"));
    row("tokens", chain(&sel));
    row("tokens_full_retention", chain(&full));
    row("stem_flops", sel.stem.to_string());
    row("encoder_flops", sel.encoder.to_string());
    row("decoder_flops", sel.decoder.to_string());
    row("heads_flops", sel.heads.to_string());
    row("total_flops", sel.total().to_string());
    row("decoder_flops_full_retention", full.decoder.to_string());
    row("decoder_ratio", format!("{:.6}", sel.decoder as f64 / full.decoder as f64));
    row("decoder_flops_measured", measured.to_string());
    row("decoder_flops_full_retention_measured", measured_full.to_string());
    row("runs", a.runs.to_string());
    row("latency_p50_ms", format!("{:.3}", percentile(&times, 50.0)));
    row("latency_p95_ms", format!("{:.3}", percentile(&times, 95.0)));
    create_dir(&g.out)?;
    write_file(&g.out.join(FLOPS_CSV), csv.as_bytes())?;
    write!(stdout, "{csv}")?;
    Ok(())
}

pub fn gradcheck_cmd(g: &Global, a: &GradcheckArgs, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let flip = match &a.inject_sign_flip {
        Some(name) => Some(
            OpKind::from_name(name)
                .ok_or_else(|| exa_core::Error::Config(format!("unknown op {name}")))?,
        ),
        None => None,
    };
    writeln!(stdout, "check,seed,max_rel_err,status")?;
    let mut failed = BTreeSet::new();
    for seed in g.seed..g.seed + a.seeds {
        let mut rows = op_suite(seed, flip)?
            .into_iter()
            .map(|r| (r.name, r.max_rel_err))
            .collect::<Vec<_>>();
        rows.push(("model_loss".to_string(), composed_loss_error(seed, flip)?));
        for (name, err) in rows {
            let ok = err <= DEFAULT_TOLERANCE;
            if !ok {
                failed.insert(name.clone());
            }
            writeln!(stdout, "{name},{seed},{err:.3e},{}", if ok { "pass" } else { "FAIL" })?;
        }
    }
    if !failed.is_empty() {
        return Err(CheckFailed(failed.into_iter().collect()).into());
    }
    Ok(())
}

pub fn run(cli: &crate::Cli, stdout: &mut dyn Write) -> anyhow::Result<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        crate::Command::Synth(a) => synth(&cli.global, a, stdout),
        crate::Command::Train(a) => train_cmd(&cli.global, a, stdout),
        crate::Command::Eval(a) => eval_cmd(&cli.global, a, stdout).map(|_| ()),
        crate::Command::Flops(a) => flops_cmd(&cli.global, a, stdout),
        crate::Command::Gradcheck(a) => gradcheck_cmd(&cli.global, a, stdout),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f64> = (1..=200).map(f64::from).collect();
        assert_eq!(percentile(&v, 95.0), 190.0);
        assert_eq!(percentile(&v, 50.0), 100.0);
        assert_eq!(percentile(&[3.0], 95.0), 3.0);
    }

    #[test]
    fn stored_prediction_round_trips() {
        let p = StoredPrediction {
            id: 7,
            boxes: Some(vec![]),
            heatmap: Heatmap::zeros(2, 3, 4, 16.0),
        };
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<StoredPrediction>(&text).unwrap(), p);
    }
}

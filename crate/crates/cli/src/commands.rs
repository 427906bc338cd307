use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ctxcrf::config::RunConfig;
use ctxcrf::data::netpbm::{read_mask, write_mask};
use ctxcrf::data::{evaluate, gen_synthetic, load_dataset, save_dataset, LabelMask, MetricReport};
use ctxcrf::graph::{build_graph, candidate_targets, sample_connections, SamplingSpec};
use ctxcrf::nn::GradCheckConfig;
use ctxcrf::pipeline::{ablation_table, predict_all, run_ablation, synthetic_split, synthetic_study_config, train_model};
use ctxcrf::{gradsuite, Error, ModelParams};

use crate::{EvalArgs, Failure, GradcheckArgs, InspectArgs, PredictArgs, SynthArgs, TrainArgs};

pub struct Context {
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl Context {
    /// The file given with `--config`, or `fallback`, with `--seed` applied.
    fn config(&self, fallback: fn() -> RunConfig) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config_path {
            Some(p) => RunConfig::load(p)?,
            None => fallback(),
        };
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        Ok(cfg)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_text(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, text).map_err(io_err(p)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::Io(format!("stdout: {e}"))),
    }
}

/// Re-validates after flag overrides, reporting problems as config errors.
fn checked(cfg: RunConfig) -> Result<RunConfig, Failure> {
    cfg.validate()?;
    Ok(cfg)
}

pub fn synth(ctx: &Context, a: &SynthArgs) -> Result<(), Failure> {
    let mut cfg = ctx.config(RunConfig::default)?;
    if let Some(n) = a.num_images {
        cfg.synth.num_images = n;
    }
    let cfg = checked(cfg)?;
    let data = gen_synthetic(&cfg.synth, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let manifest = save_dataset(&a.out, &data)?;
    println!("{}", manifest.display());
    Ok(())
}

pub fn train(ctx: &Context, a: &TrainArgs) -> Result<(), Failure> {
    let fallback = if a.ablation { synthetic_study_config } else { RunConfig::default };
    let mut cfg = ctx.config(fallback)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let cfg = checked(cfg)?;
    if a.ablation {
        let (train_set, test_set) = synthetic_split(&cfg)?;
        let rows = run_ablation(&cfg, &train_set, &test_set)?;
        return write_text(a.table.as_deref(), &ablation_table(&rows));
    }
    let (manifest, out) = match (&a.manifest, &a.out) {
        (Some(m), Some(o)) => (m, o),
        _ => return Err(Failure::Other("--manifest and --out are required".into())),
    };
    let data = load_dataset(manifest, Some(cfg.model.num_classes))?;
    let log_path = a.log.clone().unwrap_or_else(|| out.with_extension("log"));
    let file = File::create(&log_path).map_err(io_err(&log_path))?;
    let mut log = BufWriter::new(file);
    let (model, stats) = train_model(&cfg, &data, Some(&mut log))?;
    log.flush().map_err(io_err(&log_path))?;
    model.save(out)?;
    if let Some(last) = stats.last() {
        log::info!("final unary loss {:.4}", last.unary_loss_mean);
    }
    Ok(())
}

pub fn predict(ctx: &Context, a: &PredictArgs) -> Result<(), Failure> {
    let cfg = checked(ctx.config(RunConfig::default)?)?;
    let model = ModelParams::load(&a.checkpoint)?;
    let samples = load_dataset(&a.manifest, Some(model.num_classes()))?;
    let preds = predict_all(&model, &samples, &cfg.train, &cfg.refine)?;
    create_dir(&a.out)?;
    for (s, p) in samples.iter().zip(&preds) {
        write_mask(&a.out.join(format!("{}.pgm", s.id)), &p.labels)?;
        if a.scores {
            let shape = p.coarse.shape();
            let doc = serde_json::json!({
                "id": s.id,
                "height": shape[0],
                "width": shape[1],
                "classes": shape[2],
                "marginals": p.coarse.data(),
            });
            let path = a.out.join(format!("{}.scores.json", s.id));
            fs::write(&path, doc.to_string()).map_err(io_err(&path))?;
        }
    }
    Ok(())
}

pub fn eval(ctx: &Context, a: &EvalArgs) -> Result<(), Failure> {
    let cfg = ctx.config(RunConfig::default)?;
    let k = a.num_classes.unwrap_or(cfg.model.num_classes);
    let truth = load_dataset(&a.manifest, Some(k))?;
    let preds = truth
        .iter()
        .map(|s| {
            let m = read_mask(&a.predictions.join(format!("{}.pgm", s.id)))?;
            m.check_classes(k)?;
            Ok(m)
        })
        .collect::<Result<Vec<LabelMask>, Error>>()?;
    let masks: Vec<LabelMask> = truth.into_iter().map(|s| s.mask).collect();
    let evaluation = evaluate(&preds, &masks, k)?;
    let names = if cfg.synth.num_classes == k { cfg.synth.class_names() } else { Vec::new() };
    let report = MetricReport {
        evaluation: &evaluation,
        class_names: &names,
    };
    write_text(a.out.as_deref(), &report.to_tsv())?;
    if let Some(p) = &a.json {
        write_text(Some(p), &report.to_json())?;
    }
    Ok(())
}

pub fn inspect(ctx: &Context, a: &InspectArgs) -> Result<(), Failure> {
    let cfg = checked(ctx.config(RunConfig::default)?)?;
    let (h, w) = (a.height, a.width);
    let sampling = if a.no_sampling { SamplingSpec { grid: None } } else { cfg.model.sampling };
    let graph = build_graph(h, w, &cfg.model.relations, sampling, cfg.model.num_classes)?;
    let mut out = format!("grid\t{h}x{w}\n");
    // counts at the central node, whose box is the least clipped
    let (r, c) = (h / 2, w / 2);
    out.push_str("relation\tbox_side\tcentral_candidates\tcentral_sampled\n");
    for spec in &cfg.model.relations {
        let cand = candidate_targets(h, w, spec, r, c).len();
        let sampled = match sampling.grid {
            Some(g) => sample_connections(h, w, spec, r, c, g).len(),
            None => cand,
        };
        out.push_str(&format!("{}\t{}\t{cand}\t{sampled}\n", spec.kind, spec.side(h, w)));
    }
    out.push_str(&graph.stats().to_string());
    write_text(None, &out)
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<(), Failure> {
    let cfg = GradCheckConfig {
        tolerance: a.tolerance,
        ..GradCheckConfig::default()
    };
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let entries = gradsuite::run_suite(&seeds, &cfg)?;
    let mut out = String::from("check\tworst_seed\tmax_rel_error\tstatus\n");
    let mut failed = Vec::new();
    for name in gradsuite::CHECKS {
        let worst = entries
            .iter()
            .filter(|e| e.name == name)
            .max_by(|x, y| x.report.max_rel_error.total_cmp(&y.report.max_rel_error))
            .expect("every check ran");
        let ok = entries.iter().filter(|e| e.name == name).all(|e| e.report.passed());
        if !ok {
            failed.push(name);
        }
        out.push_str(&format!(
            "{name}\t{}\t{:.3e}\t{}\n",
            worst.seed,
            worst.report.max_rel_error,
            if ok { "ok" } else { "FAILED" }
        ));
    }
    write_text(None, &out)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed: {}", failed.join(", "))))
    }
}

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ngsan::data::{generate_dataset, read_dataset, validate_example, write_dataset, SceneExample, Vocabulary};
use ngsan::experiment::{gradcheck_config, parse_matrix, run_ablation, run_gradcheck, Cell};
use ngsan::geometry::{sweep_geometric_weights, write_sweep, GsaVariant};
use ngsan::model::{load_checkpoint, save_checkpoint, EncoderVariant, Model, ModelConfig};
use ngsan::parallel::Execution;
use ngsan::train::{evaluate, train, EpochStats};
use ngsan::RngState;

use crate::config::{write_json, write_text, CliError, RunConfig};
use crate::{AblateArgs, Cli, Command, DecodeArgs, EvalArgs, GenDataArgs, GradcheckArgs, ModelArgs, ParamsArgs, SweepArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

pub fn dispatch(cli: Cli) -> Result<()> {
    let root = cli.out_root;
    match cli.command {
        Command::GenData(a) => gen_data(a, &root),
        Command::Train(a) => train_cmd(a, &root),
        Command::Eval(a) => eval_cmd(a, &root),
        Command::Decode(a) => decode_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a, &root),
        Command::Params(a) => params_cmd(a),
        Command::SweepGeometry(a) => sweep_cmd(a, &root),
        Command::Ablate(a) => ablate_cmd(a, &root),
    }
}

fn out_dir(out: Option<PathBuf>, root: &Path, name: &str) -> PathBuf {
    out.unwrap_or_else(|| root.join(name))
}

fn load_data(dir: &Path) -> Result<(Vec<SceneExample>, Vocabulary)> {
    if !dir.is_dir() {
        return Err(CliError::io(dir, "dataset directory not found"));
    }
    let (scenes, vocab) = read_dataset(dir)?;
    if scenes.is_empty() {
        return Err(CliError::Invalid(format!("{}: dataset has no scenes", dir.display())));
    }
    Ok((scenes, vocab))
}

/// Sizes the vocabulary, feature width and caption budget from the data.
fn fit_to_data(cfg: &mut ModelConfig, scenes: &[SceneExample], vocab: &Vocabulary) -> Result<()> {
    cfg.vocab_size = vocab.len();
    cfg.feat_dim = scenes[0].features.cols();
    let longest = scenes.iter().map(|s| s.caption.len()).max().unwrap_or(0);
    cfg.max_len = cfg.max_len.max(longest);
    for (i, ex) in scenes.iter().enumerate() {
        validate_example(ex, vocab, cfg.feat_dim).map_err(|e| CliError::Invalid(format!("scene {}: {e}", i + 1)))?;
    }
    Ok(())
}

fn check_compatible(model: &Model, scenes: &[SceneExample], vocab: &Vocabulary) -> Result<()> {
    let cfg = model.config();
    if cfg.vocab_size != vocab.len() {
        return Err(CliError::Invalid(format!(
            "checkpoint vocabulary has {} tokens, dataset has {}",
            cfg.vocab_size,
            vocab.len()
        )));
    }
    for (i, ex) in scenes.iter().enumerate() {
        validate_example(ex, vocab, cfg.feat_dim).map_err(|e| CliError::Invalid(format!("scene {}: {e}", i + 1)))?;
    }
    Ok(())
}

fn label(cfg: &ModelConfig) -> String {
    Cell {
        variant: cfg.encoder_variant,
        gsa: cfg.gsa_variant,
    }
    .label()
}

fn apply_overrides(run: &mut RunConfig, a: &ModelArgs) {
    let (m, t) = (&mut run.model, &mut run.train);
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.passes_per_epoch {
        t.passes_per_epoch = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if a.clip_norm.is_some() {
        t.clip_norm = a.clip_norm;
    }
    if let Some(v) = a.width {
        m.model_width = v;
        m.attention.d_k = v;
        m.attention.d = v / m.attention.h.max(1);
    }
    if let Some(v) = a.heads {
        m.attention.h = v;
        m.attention.d = m.model_width / v.max(1);
    }
    if let Some(v) = a.layers {
        m.layers = v;
    }
    if let Some(v) = a.dropout {
        m.attention.dropout_p = v;
    }
}

fn base_run(command: &str, a: &ModelArgs) -> Result<RunConfig> {
    let mut run = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    run.command = Some(command.to_string());
    apply_overrides(&mut run, a);
    Ok(run)
}

fn gen_data(a: GenDataArgs, root: &Path) -> Result<()> {
    let out = out_dir(a.out, root, "data");
    let (scenes, vocab) = generate_dataset(a.count, a.n_max, &mut RngState::new(a.seed))?;
    for ex in &scenes {
        validate_example(ex, &vocab, ex.features.cols())?;
    }
    write_dataset(&out, &scenes, &vocab).map_err(|e| CliError::io(&out, e))?;
    let mut run = RunConfig {
        command: Some("gen-data".into()),
        out: Some(out.clone()),
        ..RunConfig::default()
    };
    run.option("count", a.count);
    run.option("n_max", a.n_max);
    run.option("seed", a.seed);
    run.write(&out)?;
    println!("wrote {} scenes, {} tokens to {}", scenes.len(), vocab.len(), out.display());
    Ok(())
}

fn history_csv(history: &[EpochStats]) -> String {
    let mut s = String::from("epoch,lr,steps,mean_loss\n");
    for h in history {
        let _ = writeln!(s, "{},{:e},{},{:?}", h.epoch, h.lr, h.steps, h.mean_loss);
    }
    s
}

fn train_cmd(a: TrainArgs, root: &Path) -> Result<()> {
    let mut run = base_run("train", &a.model)?;
    if let Some(v) = a.variant {
        run.model.encoder_variant = v;
    }
    if let Some(g) = a.gsa {
        run.model.gsa_variant = g;
    }
    let (scenes, vocab) = load_data(&a.data)?;
    fit_to_data(&mut run.model, &scenes, &vocab)?;
    run.model.validate()?;
    run.train.validate()?;
    let out = out_dir(a.out, root, "train");
    run.data = Some(a.data.clone());
    run.out = Some(out.clone());
    run.checkpoint = Some(out.join("checkpoint.json"));
    run.write(&out)?;

    let mut model = Model::new(run.model.clone(), run.train.seed)?;
    println!("audit: {} parameters {}", label(&run.model), model.count_parameters());
    let start = Instant::now();
    let history = train(&mut model, &scenes, &run.train, Execution::default(), |s| {
        println!("epoch {:>3} lr {:.3e} steps {:>5} loss {:.6}", s.epoch, s.lr, s.steps, s.mean_loss);
    })?;
    write_text(&out.join("train_log.csv"), &history_csv(&history))?;
    save_checkpoint(&model, run.checkpoint.as_ref().unwrap()).map_err(|e| CliError::io(&out, e))?;
    let metrics = evaluate(&model, &scenes, &vocab, 1, Execution::default())?;
    write_json(&out.join("metrics.json"), &metrics)?;
    println!(
        "train-set exact match {:.4}, relation accuracy {:.4}; checkpoint {}",
        metrics.exact_match_rate,
        metrics.relation_token_accuracy,
        run.checkpoint.as_ref().unwrap().display()
    );
    eprintln!("trained in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn read_model(path: &Path) -> Result<Model> {
    if !path.is_file() {
        return Err(CliError::io(path, "checkpoint not found"));
    }
    Ok(load_checkpoint(path)?)
}

fn eval_cmd(a: EvalArgs, root: &Path) -> Result<()> {
    let model = read_model(&a.checkpoint)?;
    let (scenes, vocab) = load_data(&a.data)?;
    check_compatible(&model, &scenes, &vocab)?;
    let out = out_dir(a.out, root, "eval");
    let mut run = RunConfig {
        command: Some("eval".into()),
        model: model.config().clone(),
        data: Some(a.data.clone()),
        checkpoint: Some(a.checkpoint.clone()),
        out: Some(out.clone()),
        ..RunConfig::default()
    };
    run.option("beam", a.beam);
    run.write(&out)?;
    let metrics = evaluate(&model, &scenes, &vocab, a.beam as usize, Execution::default())?;
    write_json(&out.join("metrics.json"), &metrics)?;
    println!("{}", serde_json::to_string_pretty(&metrics).expect("metrics serialize"));
    Ok(())
}

fn decode_cmd(a: DecodeArgs) -> Result<()> {
    let model = read_model(&a.checkpoint)?;
    let (scenes, vocab) = load_data(&a.data)?;
    check_compatible(&model, &scenes, &vocab)?;
    let max_len = model.config().max_len;
    for (i, ex) in scenes.iter().take(a.limit).enumerate() {
        let d = model.decode(&ex.features, &ex.boxes, a.beam as usize, max_len)?;
        let n = ex.caption.len();
        let mark = if d.finished && d.tokens == ex.caption[1..n - 1] { "=" } else { "x" };
        println!("{i:>4} {mark} {:.4}  {}", d.log_prob, vocab.render(&d.tokens));
        println!("            ref {}", vocab.render(&ex.caption[1..n - 1]));
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs, root: &Path) -> Result<()> {
    let cfg = gradcheck_config(a.variant, a.gsa);
    let out = out_dir(a.out, root, "gradcheck");
    let mut run = RunConfig {
        command: Some("gradcheck".into()),
        model: cfg.clone(),
        out: Some(out.clone()),
        ..RunConfig::default()
    };
    run.option("seed", a.seed);
    run.option("corrupt_backward", a.corrupt_backward);
    run.write(&out)?;
    let report = run_gradcheck(&cfg, a.seed, a.corrupt_backward, Execution::default())?;
    for e in &report.entries {
        println!(
            "{:<4} {:<28} {:>6} rel_err {:.3e}",
            if e.passed { "ok" } else { "FAIL" },
            e.name,
            e.scalars,
            e.rel_error
        );
    }
    write_json(&out.join("gradcheck.json"), &report)?;
    let failed = report.entries.iter().filter(|e| !e.passed).count();
    println!(
        "{}: {} parameters, {failed} failed, worst {:.3e} (tolerance {:e})",
        report.label,
        report.entries.len(),
        report.worst(),
        report.tolerance
    );
    if failed > 0 {
        return Err(CliError::Invalid(format!("gradient check failed for {failed} parameters")));
    }
    Ok(())
}

fn params_cmd(a: ParamsArgs) -> Result<()> {
    let base = match (&a.config, a.full_scale) {
        (Some(path), _) => RunConfig::load(path)?.model,
        (None, true) => ModelConfig::full_scale(a.vocab, a.feat_dim),
        (None, false) => ModelConfig::default(),
    };
    println!(
        "width {} heads {} ffn {} layers {} d_g {} vocab {} feat_dim {}",
        base.model_width, base.attention.h, base.ffn_width, base.layers, base.attention.d_g, base.vocab_size, base.feat_dim
    );
    let plain = |v| Model::new(base.clone().with_variant(v, GsaVariant::QueryDependent), 0).map(|m| m.count_parameters());
    let sa = plain(EncoderVariant::Sa)?;
    println!("sa       {sa:>12}");
    println!("nsa      {:>12}", plain(EncoderVariant::Nsa)?);
    for variant in [EncoderVariant::Gsa, EncoderVariant::Ng] {
        for g in [GsaVariant::ContentIndependent, GsaVariant::QueryDependent, GsaVariant::KeyDependent] {
            let cfg = base.clone().with_variant(variant, g);
            let total = Model::new(cfg.clone(), 0)?.count_parameters();
            let nsa_like = if variant == EncoderVariant::Ng { plain(EncoderVariant::Nsa)? } else { sa };
            println!(
                "{:<8} {total:>12}  +{} over {} (closed form {}, {:.3}%)",
                label(&cfg),
                total - nsa_like,
                if variant == EncoderVariant::Ng { "nsa" } else { "sa" },
                cfg.geometry_overhead(),
                100.0 * (total - nsa_like) as f64 / nsa_like as f64
            );
        }
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs, root: &Path) -> Result<()> {
    let model = read_model(&a.checkpoint)?;
    let cfg = model.config().clone();
    if !cfg.encoder_variant.geometric() || cfg.gsa_variant != GsaVariant::ContentIndependent {
        return Err(CliError::Invalid(format!(
            "the sweep needs a content-independent geometric encoder, checkpoint is {}",
            label(&cfg)
        )));
    }
    if a.layer >= cfg.layers || a.head >= cfg.attention.h {
        return Err(CliError::Invalid(format!(
            "layer {} head {} out of range ({} layers, {} heads)",
            a.layer, a.head, cfg.layers, cfg.attention.h
        )));
    }
    let value = |name: &str| model.params.value(model.params.lookup(name).expect("geometric parameters present")).clone();
    let w_phi = value(&format!("enc.{}.gsa.w_g", a.layer)).row(a.head).to_vec();
    let slices = sweep_geometric_weights(&value("enc.geometry.W_g"), &value("enc.geometry.b_g"), &w_phi, a.step, cfg.distance_clamp)?;
    let out = out_dir(a.out, root, "sweep");
    let mut run = RunConfig {
        command: Some("sweep-geometry".into()),
        model: cfg,
        checkpoint: Some(a.checkpoint.clone()),
        out: Some(out.clone()),
        ..RunConfig::default()
    };
    run.option("step", a.step);
    run.option("layer", a.layer);
    run.option("head", a.head);
    run.write(&out)?;
    for path in write_sweep(&out, &slices).map_err(|e| CliError::io(&out, e))? {
        println!("{}", path.display());
    }
    Ok(())
}

fn ablate_cmd(a: AblateArgs, root: &Path) -> Result<()> {
    let cells = parse_matrix(&a.matrix)?;
    if a.seeds == 0 {
        return Err(CliError::Invalid("--seeds must be at least 1".into()));
    }
    if !(a.test_fraction > 0.0 && a.test_fraction < 1.0) {
        return Err(CliError::Invalid("--test-fraction must lie in (0, 1)".into()));
    }
    let mut run = base_run("ablate", &a.model)?;
    let (scenes, vocab) = load_data(&a.data)?;
    fit_to_data(&mut run.model, &scenes, &vocab)?;
    run.model.validate()?;
    run.train.validate()?;
    if scenes.len() < 2 {
        return Err(CliError::Invalid("ablation needs at least two scenes".into()));
    }
    let n_test = ((scenes.len() as f64 * a.test_fraction).round() as usize).clamp(1, scenes.len() - 1);
    let (train_set, test_set) = scenes.split_at(scenes.len() - n_test);
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let out = out_dir(a.out, root, "ablate");
    run.data = Some(a.data.clone());
    run.out = Some(out.clone());
    run.option("matrix", &a.matrix);
    run.option("seeds", &seeds);
    run.option("test_fraction", a.test_fraction);
    run.write(&out)?;
    let table = run_ablation(&run.model, &run.train, &cells, &seeds, train_set, test_set, &vocab, Execution::default())?;
    write_json(&out.join("ablation.json"), &table)?;
    let mut csv = String::from("cell,runs,median_relation_token_accuracy,median_exact_match_rate\n");
    for r in &table.rows {
        let _ = writeln!(csv, "{},{},{:?},{:?}", r.cell, r.runs, r.median_relation_token_accuracy, r.median_exact_match_rate);
        println!(
            "{:<10} runs {} median relation accuracy {:.4} median exact match {:.4}",
            r.cell, r.runs, r.median_relation_token_accuracy, r.median_exact_match_rate
        );
    }
    write_text(&out.join("ablation.csv"), &csv)?;
    Ok(())
}

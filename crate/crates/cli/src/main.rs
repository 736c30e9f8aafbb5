//! tsasr: one executable for the whole pipeline — synthesize the feature
//! corpus, train model variants, decode utterances, run the SIR-sweep
//! evaluation, and self-check the numerics.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.
//! Configuration layers: config file < TSASR_* environment < flags; the
//! effective settings are echoed to stderr at startup.

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use tsasr_core::eval::{sir_sweep, SweepConfig};
use tsasr_core::mixture::toy::{
    generate_toy_corpus, load_manifest, load_world, save_manifest, save_world, ToyCorpusConfig,
    ToySample,
};
use tsasr_core::model::{
    batch_decode, build_bias, init_params, ModelConfig, StreamingDecoder, Variant,
    MAX_SYMBOLS_PER_FRAME,
};
use tsasr_core::tensor::Tensor;
use tsasr_core::training::{
    load_state, run_stage, warm_start, Stage, StageConfig, StageInit, StageOutput, TrainSample,
};
use tsasr_core::{checkpoint, seeds};

/// Fixed default seed; never time-derived.
const DEFAULT_SEED: u64 = 1234;
const VERSION_LINE: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (checkpoint format TSCKPT01, train state format json-v1)"
);

#[derive(Parser)]
#[command(name = "tsasr", version = VERSION_LINE, about = "Target-speaker transducer ASR pipeline")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML config file (run settings and model architecture)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; every command forks from it deterministically
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More diagnostics on stderr (repeatable)
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    /// Desk-scale synthetic-corpus mode
    #[arg(long, global = true)]
    toy: bool,
    /// Run redundant float64 cross-checks where available
    #[arg(long, global = true)]
    f64_verify: bool,
    /// Bound worker threads
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

/// Optional config file contents; every field can be overridden by
/// environment or flags.
#[derive(Debug, Default, Deserialize)]
struct FileConfig {
    seed: Option<u64>,
    toy: Option<bool>,
    jobs: Option<usize>,
    model: Option<ModelConfig>,
}

/// Settings after the file < environment < flags merge.
#[derive(Debug, Serialize)]
struct Effective {
    seed: u64,
    toy: bool,
    jobs: Option<usize>,
    config_file: Option<String>,
    #[serde(skip)]
    model: Option<ModelConfig>,
    #[serde(skip)]
    verbose: u8,
    #[serde(skip)]
    f64_verify: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic feature corpus (world + split manifests)
    Synth(SynthArgs),
    /// Train one stage of one model
    Train(TrainArgs),
    /// Decode one utterance with a trained checkpoint
    Decode(DecodeArgs),
    /// SIR-sweep evaluation over trained checkpoints
    Eval(EvalArgs),
    /// Fast invariant suite; exit 0 iff every check passes
    Selfcheck,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Samples in the pretrain split
    #[arg(long)]
    n_pretrain: Option<usize>,
    /// Samples in the main split
    #[arg(long)]
    n_main: Option<usize>,
    /// Samples in the finetune split
    #[arg(long)]
    n_finetune: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_stage)]
    stage: Stage,
    /// Training manifest (JSON lines, one sample per line)
    #[arg(long)]
    data: PathBuf,
    /// Output directory (best.ckpt, state.json, metrics.jsonl)
    #[arg(long)]
    out: PathBuf,
    /// Initial checkpoint(s): one to continue from, or
    /// `streaming.ckpt,offline.ckpt` to warm-start from two donors
    #[arg(long, value_delimiter = ',')]
    init: Vec<PathBuf>,
    /// Model variant for fresh or warm-started parameters
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Override the stage's epoch count
    #[arg(long)]
    epochs: Option<usize>,
    /// Resume from a saved training state
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Manifest to pick the utterance from
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Sample index within --manifest
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Enrollment features as a tensor JSON file (alternative to --manifest)
    #[arg(long)]
    enrollment: Option<PathBuf>,
    /// Command/mixture features as a tensor JSON file
    #[arg(long)]
    input: Option<PathBuf>,
    /// Wake-word transcript, space- or comma-separated token ids
    #[arg(long)]
    wake_text: Option<String>,
    /// Emit (token, frame) events as they are produced
    #[arg(long)]
    streaming: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoints to evaluate, comma-separated
    #[arg(long, value_delimiter = ',', required = true)]
    ckpt: Vec<PathBuf>,
    /// World file from `synth`
    #[arg(long)]
    world: PathBuf,
    /// Report destination; table text here, rows at <out>.jsonl,
    /// full record at <out>.json
    #[arg(long)]
    out: PathBuf,
    /// SIR grid as lo:hi:step dB
    #[arg(long, default_value = "-5:5:1", allow_hyphen_values = true)]
    grid: String,
    /// Enrollment conditions: both, on, off
    #[arg(long, default_value = "both")]
    overlap: String,
    #[arg(long, default_value_t = 40)]
    samples_per_cell: usize,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

type Result<T> = std::result::Result<T, CliError>;

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    match s {
        "pretrain" => Ok(Stage::Pretrain),
        "main" => Ok(Stage::Main),
        "finetune" => Ok(Stage::Finetune),
        _ => Err(format!("unknown stage '{s}' (pretrain|main|finetune)")),
    }
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    match s {
        "baseline" => Ok(Variant::Baseline),
        "attentive" => Ok(Variant::Attentive),
        "robust" => Ok(Variant::Robust),
        _ => Err(format!(
            "unknown variant '{s}' (baseline|attentive|robust)"
        )),
    }
}

fn env_u64(name: &str) -> Result<Option<u64>> {
    match std::env::var(name) {
        Ok(v) => v
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{name}='{v}' is not an integer"))),
        Err(_) => Ok(None),
    }
}

fn env_flag(name: &str) -> Result<Option<bool>> {
    match std::env::var(name) {
        Ok(v) => match v.as_str() {
            "1" | "true" | "yes" => Ok(Some(true)),
            "0" | "false" | "no" => Ok(Some(false)),
            _ => Err(CliError::Usage(format!(
                "{name}='{v}' is not a boolean (1/0/true/false)"
            ))),
        },
        Err(_) => Ok(None),
    }
}

fn resolve(global: &GlobalArgs) -> Result<Effective> {
    let config_path = global
        .config
        .clone()
        .or_else(|| std::env::var("TSASR_CONFIG").ok().map(PathBuf::from));
    let file: FileConfig = match &config_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
            toml::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    if let Some(m) = &file.model {
        m.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let seed = global
        .seed
        .or(env_u64("TSASR_SEED")?)
        .or(file.seed)
        .unwrap_or(DEFAULT_SEED);
    let toy = if global.toy {
        true
    } else {
        env_flag("TSASR_TOY")?.or(file.toy).unwrap_or(false)
    };
    let jobs = global
        .jobs
        .or(env_u64("TSASR_JOBS")?.map(|v| v as usize))
        .or(file.jobs);
    Ok(Effective {
        seed,
        toy,
        jobs,
        config_file: config_path.map(|p| p.display().to_string()),
        model: file.model,
        verbose: global.verbose,
        f64_verify: global.f64_verify,
    })
}

fn info(eff: &Effective, msg: &str) {
    if eff.verbose > 0 {
        eprintln!("info: {msg}");
    }
}

fn parse_wake_text(text: &str) -> Result<Vec<usize>> {
    let tokens: std::result::Result<Vec<usize>, _> = text
        .split([' ', ','])
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect();
    match tokens {
        Ok(t) if !t.is_empty() => Ok(t),
        _ => Err(CliError::Usage(format!(
            "wake text '{text}' must be token ids like \"3 7\""
        ))),
    }
}

fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || CliError::Usage(format!("grid '{spec}' must be lo:hi:step, e.g. -5:5:1"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].parse().map_err(|_| bad())?;
    let step: f64 = parts[2].parse().map_err(|_| bad())?;
    if !(step > 0.0 && hi >= lo) {
        return Err(bad());
    }
    // Report columns run high-to-low, matching the sweep convention.
    let mut vals = Vec::new();
    let mut v = lo;
    while v <= hi + 1e-9 {
        vals.push(v);
        v += step;
    }
    vals.reverse();
    Ok(vals)
}

fn parse_overlap(spec: &str) -> Result<Vec<bool>> {
    match spec {
        "both" => Ok(vec![false, true]),
        "on" => Ok(vec![true]),
        "off" => Ok(vec![false]),
        _ => Err(CliError::Usage(format!(
            "overlap '{spec}' must be both, on, or off"
        ))),
    }
}

fn load_samples(path: &Path) -> Result<Vec<ToySample>> {
    load_manifest(path).map_err(|e| runtime(format!("manifest {}: {e}", path.display())))
}

fn cmd_synth(eff: &Effective, args: &SynthArgs) -> Result<()> {
    if !eff.toy {
        return Err(CliError::Usage(
            "synth supports the synthetic feature corpus; pass --toy".into(),
        ));
    }
    let mut cc = ToyCorpusConfig::default();
    if let Some(n) = args.n_pretrain {
        cc.n_pretrain = n;
    }
    if let Some(n) = args.n_main {
        cc.n_main = n;
    }
    if let Some(n) = args.n_finetune {
        cc.n_finetune = n;
    }
    let corpus = generate_toy_corpus(&cc, eff.seed).map_err(runtime)?;
    std::fs::create_dir_all(&args.out).map_err(runtime)?;
    save_world(&corpus.world, &args.out.join("world.json")).map_err(runtime)?;
    for (name, split) in [
        ("pretrain", &corpus.pretrain),
        ("main", &corpus.main),
        ("finetune", &corpus.finetune),
    ] {
        save_manifest(split, &args.out.join(format!("{name}.jsonl"))).map_err(runtime)?;
        println!("wrote {} samples to {name}.jsonl", split.len());
    }
    println!(
        "world: {} speakers, {} content tokens, out {}",
        corpus.world.config.n_speakers,
        corpus.world.config.n_tokens,
        args.out.display()
    );
    Ok(())
}

fn model_config_for(eff: &Effective, variant: Variant) -> ModelConfig {
    match &eff.model {
        Some(m) => {
            let mut m = m.clone();
            m.variant = variant;
            m
        }
        None if eff.toy => ModelConfig::toy(variant),
        None => {
            let mut m = ModelConfig::default();
            m.variant = variant;
            m
        }
    }
}

fn cmd_train(eff: &Effective, args: &TrainArgs) -> Result<()> {
    let toy_samples = load_samples(&args.data)?;
    let samples: Vec<TrainSample> = toy_samples.iter().map(TrainSample::from_toy).collect();
    info(
        eff,
        &format!("{} training samples from {}", samples.len(), args.data.display()),
    );

    let stage_seed = seeds::fork(eff.seed, &format!("stage-{}", args.stage));
    let mut stage_cfg = StageConfig::toy(args.stage, stage_seed);
    if let Some(e) = args.epochs {
        stage_cfg.epochs = e;
    }

    let (cfg, init) = if let Some(state_path) = &args.resume {
        let state = load_state(state_path).map_err(runtime)?;
        let variant = args.variant.unwrap_or(Variant::Baseline);
        let cfg = model_config_for(eff, variant);
        info(eff, &format!("resuming from {}", state_path.display()));
        (cfg, StageInit::Resume(state))
    } else {
        match args.init.len() {
            0 => {
                let variant = args.variant.unwrap_or(Variant::Baseline);
                let cfg = model_config_for(eff, variant);
                let init_seed = seeds::fork(eff.seed, &format!("init-{}-{variant}", args.stage));
                let params = init_params(&cfg, init_seed).map_err(runtime)?;
                info(eff, &format!("fresh {variant} parameters, seed {init_seed}"));
                (cfg, StageInit::Fresh(params))
            }
            1 => {
                let (cfg, params) = checkpoint::load(&args.init[0]).map_err(runtime)?;
                info(
                    eff,
                    &format!("continuing {} from {}", cfg.variant, args.init[0].display()),
                );
                (cfg, StageInit::Fresh(params))
            }
            2 => {
                let variant = args.variant.ok_or_else(|| {
                    CliError::Usage(
                        "--variant is required when warm-starting from two donors".into(),
                    )
                })?;
                let cfg = model_config_for(eff, variant);
                let (_, streaming) = checkpoint::load(&args.init[0]).map_err(runtime)?;
                let (_, offline) = checkpoint::load(&args.init[1]).map_err(runtime)?;
                let fresh_seed = seeds::fork(eff.seed, &format!("warm-{variant}"));
                let (params, sources) =
                    warm_start(&cfg, &streaming, &offline, fresh_seed).map_err(runtime)?;
                if eff.verbose > 1 {
                    for (path, src) in &sources {
                        eprintln!("info: warm start {path} <- {src:?}");
                    }
                }
                info(eff, &format!("warm-started {variant} from two donors"));
                (cfg, StageInit::Fresh(params))
            }
            n => {
                return Err(CliError::Usage(format!(
                    "--init takes one checkpoint or two donors, got {n}"
                )))
            }
        }
    };

    std::fs::create_dir_all(&args.out).map_err(runtime)?;
    let ckpt = args.out.join("best.ckpt");
    let state_path = args.out.join("state.json");
    let metrics = args.out.join("metrics.jsonl");
    let (_, report) = run_stage(
        &cfg,
        &stage_cfg,
        &samples,
        init,
        &StageOutput {
            checkpoint_path: Some(&ckpt),
            state_path: Some(&state_path),
            metrics_path: Some(&metrics),
        },
    )
    .map_err(runtime)?;
    let summary = serde_json::json!({
        "stage": args.stage.to_string(),
        "epochs_run": report.epochs_run,
        "steps": report.steps,
        "skip_count": report.skip_count,
        "initial_train_loss": report.initial_train_loss,
        "final_train_loss": report.final_train_loss,
        "best_val_loss": report.best_val_loss,
        "checkpoint": ckpt.display().to_string(),
    });
    println!("{summary}");
    Ok(())
}

fn cmd_decode(eff: &Effective, args: &DecodeArgs) -> Result<()> {
    let (cfg, params) = checkpoint::load(&args.ckpt).map_err(runtime)?;
    if let Some(file_model) = &eff.model {
        if file_model.hash() != cfg.hash() {
            return Err(CliError::Runtime(format!(
                "integrity: config file model hash {} does not match checkpoint {}",
                file_model.hash(),
                cfg.hash()
            )));
        }
    }
    info(eff, &format!("checkpoint variant {}", cfg.variant));

    let (enrollment, command) = match (&args.manifest, &args.enrollment, &args.input) {
        (Some(m), None, None) => {
            let samples = load_samples(m)?;
            let s = samples.get(args.index).ok_or_else(|| {
                CliError::Usage(format!(
                    "index {} outside manifest of {} samples",
                    args.index,
                    samples.len()
                ))
            })?;
            (s.enrollment.clone(), s.command.clone())
        }
        (None, Some(e), Some(i)) => {
            let load_tensor = |p: &Path| -> Result<Tensor> {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| runtime(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", p.display())))
            };
            (load_tensor(e)?, load_tensor(i)?)
        }
        _ => {
            return Err(CliError::Usage(
                "provide --manifest (with --index) or both --enrollment and --input".into(),
            ))
        }
    };

    let wake_tokens = match (&args.wake_text, cfg.variant) {
        (Some(t), _) => Some(parse_wake_text(t)?),
        (None, Variant::Robust) => {
            return Err(CliError::Usage(
                "--wake-text is required for the text-guided (robust) variant".into(),
            ))
        }
        (None, _) => None,
    };
    if wake_tokens.is_some() && cfg.variant != Variant::Robust {
        info(eff, "wake text ignored by this variant");
    }

    let bias = build_bias(&cfg, &params, &enrollment, wake_tokens.as_deref()).map_err(runtime)?;
    let hyp = if args.streaming {
        let mut dec =
            StreamingDecoder::new(&cfg, &params, &bias, MAX_SYMBOLS_PER_FRAME).map_err(runtime)?;
        for t in 0..command.row_count() {
            for (token, frame) in dec.push_frame(command.row(t)).map_err(runtime)? {
                println!("token {token} @frame {frame}");
            }
        }
        dec.into_hypothesis()
    } else {
        batch_decode(&cfg, &params, &command, &bias, MAX_SYMBOLS_PER_FRAME).map_err(runtime)?
    };
    if eff.f64_verify {
        let batch =
            batch_decode(&cfg, &params, &command, &bias, MAX_SYMBOLS_PER_FRAME).map_err(runtime)?;
        let mut dec =
            StreamingDecoder::new(&cfg, &params, &bias, MAX_SYMBOLS_PER_FRAME).map_err(runtime)?;
        for t in 0..command.row_count() {
            dec.push_frame(command.row(t)).map_err(runtime)?;
        }
        let stream = dec.into_hypothesis();
        if stream.tokens != batch.tokens
            || stream.frame_indices != batch.frame_indices
            || stream.log_score.to_bits() != batch.log_score.to_bits()
        {
            return Err(CliError::Runtime(
                "f64-verify: streaming and batch decodes disagree".into(),
            ));
        }
        eprintln!("f64-verify: streaming equals batch decode bit-exactly");
    }
    let rendered: Vec<String> = hyp.tokens.iter().map(|t| t.to_string()).collect();
    println!("transcript: {}", rendered.join(" "));
    Ok(())
}

fn cmd_eval(eff: &Effective, args: &EvalArgs) -> Result<()> {
    let world = load_world(&args.world).map_err(runtime)?;
    let sweep = SweepConfig {
        sir_grid: parse_grid(&args.grid)?,
        overlap: parse_overlap(&args.overlap)?,
        samples_per_cell: args.samples_per_cell,
        snr_range: [0.0, 20.0],
        seed: eff.seed,
    };
    let paths: Vec<&Path> = args.ckpt.iter().map(|p| p.as_path()).collect();
    for p in &paths {
        if !p.exists() {
            return Err(CliError::Usage(format!("missing checkpoint {}", p.display())));
        }
    }
    let report = sir_sweep(&world, &paths, &sweep).map_err(runtime)?;
    let table = report.table(&sweep);
    std::fs::write(&args.out, &table).map_err(runtime)?;
    let jsonl = args.out.with_extension("jsonl");
    std::fs::write(&jsonl, report.rows_jsonl()).map_err(runtime)?;
    let json = args.out.with_extension("json");
    let full = serde_json::to_string_pretty(&report).map_err(runtime)?;
    std::fs::write(&json, full).map_err(runtime)?;
    print!("{table}");
    info(
        eff,
        &format!(
            "report: {} (+ .jsonl, .json), manifest hash {}",
            args.out.display(),
            report.manifest_hash
        ),
    );
    Ok(())
}

// ---- selfcheck ----

struct Check {
    name: &'static str,
    run: fn() -> std::result::Result<String, String>,
}

fn selfcheck_checks() -> Vec<Check> {
    use tsasr_core::model::{model_loss, ParamBinding};
    use tsasr_core::tensor::{grad_check, Tape};
    use tsasr_core::transducer::{
        path_enumeration_loss, transducer_loss_value, LatticeDims,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    vec![
        Check {
            name: "tensor-op gradients",
            run: || {
                let mut rng = ChaCha8Rng::seed_from_u64(41);
                let a = rand_tensor(&mut rng, vec![3, 4]);
                let b = rand_tensor(&mut rng, vec![4, 2]);
                let g = rand_tensor(&mut rng, vec![2]);
                let err = grad_check(
                    |tape, vars| {
                        let m = tape.matmul(vars[0], vars[1])?;
                        let s = tape.softmax_rows(m)?;
                        let t = tape.tanh(s);
                        let ln = tape.layer_norm_rows(t, vars[2], vars[2], 1e-5)?;
                        Ok(tape.sum_all(ln))
                    },
                    &[a, b, g],
                    1e-5,
                )
                .map_err(|e| e.to_string())?;
                if err > 1e-4 {
                    return Err(format!("relative error {err:.2e} exceeds 1e-4"));
                }
                Ok(format!("max relative error {err:.2e}"))
            },
        },
        Check {
            name: "attention gradients",
            run: || {
                use tsasr_core::model::{contextual_bias_attention, text_guided_attention};
                let cfg = {
                    let mut c = ModelConfig::toy(Variant::Robust);
                    c.d_model = 4;
                    c.d_h = 4;
                    c.d_a = 4;
                    c.d_l = 4;
                    c.attention_dim = 4;
                    c.attention_heads = 1;
                    c
                };
                let mut rng = ChaCha8Rng::seed_from_u64(42);
                let mut worst: f64 = 0.0;
                for which in 0..2usize {
                    let prefix = if which == 0 { "fuse.att" } else { "txt.att" };
                    let names = ["q.w", "q.b", "k.w", "k.b", "v.w", "v.b", "o.w", "o.b"];
                    let mut params: Vec<Tensor> = vec![
                        rand_tensor(&mut rng, vec![2, 4]),
                        rand_tensor(&mut rng, vec![3, 4]),
                    ];
                    for n in names {
                        let shape = if n.ends_with(".w") { vec![4, 4] } else { vec![4] };
                        params.push(rand_tensor(&mut rng, shape));
                    }
                    let cfg = cfg.clone();
                    let err = grad_check(
                        move |tape, vars| {
                            let pairs = names
                                .iter()
                                .enumerate()
                                .map(|(i, n)| (format!("{prefix}.{n}"), vars[i + 2]));
                            let pb = ParamBinding::from_vars(pairs);
                            let out = if which == 0 {
                                contextual_bias_attention(tape, &pb, &cfg, vars[0], vars[1])
                            } else {
                                text_guided_attention(tape, &pb, &cfg, vars[0], vars[1])
                            }
                            .map_err(|_| {
                                tsasr_core::tensor::TensorError::NonFinite("attention")
                            })?;
                            let t = tape.tanh(out);
                            Ok(tape.sum_all(t))
                        },
                        &params,
                        1e-5,
                    )
                    .map_err(|e| e.to_string())?;
                    worst = worst.max(err);
                }
                if worst > 1e-4 {
                    return Err(format!("relative error {worst:.2e} exceeds 1e-4"));
                }
                Ok(format!("both units, max relative error {worst:.2e}"))
            },
        },
        Check {
            name: "model gradients end-to-end",
            run: || {
                let mut cfg = ModelConfig::toy(Variant::Robust);
                cfg.feature_dim = 3;
                cfg.d_model = 4;
                cfg.d_h = 4;
                cfg.d_a = 4;
                cfg.d_l = 4;
                cfg.attention_heads = 1;
                cfg.attention_dim = 4;
                cfg.vocab_size = 5;
                cfg.causal_context = 2;
                let mut params = init_params(&cfg, 3).map_err(|e| e.to_string())?;
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                for path in ["fuse.att.o.w", "fuse.att.o.b"] {
                    let t = params.get_mut(path).map_err(|e| e.to_string())?;
                    for v in t.data_mut() {
                        *v = rng.gen_range(-0.3..0.3);
                    }
                }
                let names: Vec<String> = params.paths().cloned().collect();
                let tensors: Vec<Tensor> =
                    names.iter().map(|p| params.get(p).unwrap().clone()).collect();
                let enr = rand_tensor(&mut rng, vec![3, 3]);
                let cmd = rand_tensor(&mut rng, vec![4, 3]);
                let cfg2 = cfg.clone();
                let names2 = names.clone();
                let err = grad_check(
                    move |tape, vars| {
                        let pb = ParamBinding::from_vars(
                            names2.iter().cloned().zip(vars.iter().copied()),
                        );
                        model_loss(tape, &pb, &cfg2, &enr, &cmd, Some(&[2]), &[1, 3])
                            .map_err(|_| tsasr_core::tensor::TensorError::NonFinite("loss"))
                    },
                    &tensors,
                    1e-5,
                )
                .map_err(|e| e.to_string())?;
                if err > 1e-4 {
                    return Err(format!("relative error {err:.2e} exceeds 1e-4"));
                }
                Ok(format!("max relative error {err:.2e}"))
            },
        },
        Check {
            name: "transducer loss vs path enumeration",
            run: || {
                let mut rng = ChaCha8Rng::seed_from_u64(11);
                let mut worst: f64 = 0.0;
                for _ in 0..25 {
                    let dims = LatticeDims {
                        t_len: rng.gen_range(1..=4),
                        u_len: rng.gen_range(0..=3),
                        vocab: rng.gen_range(2..=4),
                    };
                    let labels: Vec<usize> =
                        (0..dims.u_len).map(|_| rng.gen_range(1..dims.vocab)).collect();
                    let raw = rand_tensor(&mut rng, vec![dims.rows(), dims.vocab]);
                    let mut tape = Tape::new();
                    let v = tape.leaf(raw);
                    let lat = tape.log_softmax_rows(v).map_err(|e| e.to_string())?;
                    let lattice = tape.value(lat).clone();
                    let dp = transducer_loss_value(&lattice, dims, &labels)
                        .map_err(|e| e.to_string())?;
                    let (brute, _) = path_enumeration_loss(&lattice, dims, &labels)
                        .map_err(|e| e.to_string())?;
                    worst = worst.max((dp - brute).abs());
                }
                if worst > 1e-10 {
                    return Err(format!("max deviation {worst:.2e} exceeds 1e-10"));
                }
                Ok(format!("25 lattices, max deviation {worst:.2e}"))
            },
        },
        Check {
            name: "streaming equals batch decode",
            run: || {
                let mut rng = ChaCha8Rng::seed_from_u64(12);
                for (i, variant) in [Variant::Baseline, Variant::Attentive, Variant::Robust]
                    .into_iter()
                    .enumerate()
                {
                    let mut cfg = ModelConfig::toy(variant);
                    cfg.causal_context = 3;
                    let mut params = init_params(&cfg, 60 + i as u64).map_err(|e| e.to_string())?;
                    if variant != Variant::Baseline {
                        for path in ["fuse.att.o.w", "fuse.att.o.b"] {
                            let t = params.get_mut(path).map_err(|e| e.to_string())?;
                            for v in t.data_mut() {
                                *v = rng.gen_range(-0.3..0.3);
                            }
                        }
                    }
                    let enr = rand_tensor(&mut rng, vec![5, cfg.feature_dim]);
                    let cmd = rand_tensor(&mut rng, vec![9, cfg.feature_dim]);
                    let wake = vec![1, 2];
                    let bias = build_bias(&cfg, &params, &enr, Some(&wake))
                        .map_err(|e| e.to_string())?;
                    let batch = batch_decode(&cfg, &params, &cmd, &bias, 4)
                        .map_err(|e| e.to_string())?;
                    let mut dec = StreamingDecoder::new(&cfg, &params, &bias, 4)
                        .map_err(|e| e.to_string())?;
                    for t in 0..cmd.row_count() {
                        dec.push_frame(cmd.row(t)).map_err(|e| e.to_string())?;
                    }
                    let stream = dec.into_hypothesis();
                    if stream.tokens != batch.tokens
                        || stream.log_score.to_bits() != batch.log_score.to_bits()
                    {
                        return Err(format!("{variant}: streaming != batch"));
                    }
                }
                Ok("3 variants bit-exact".into())
            },
        },
        Check {
            name: "mixture SIR and SNR fidelity",
            run: || {
                let world = tsasr_core::mixture::toy::ToyWorld::generate(
                    &tsasr_core::mixture::toy::ToyConfig::default(),
                    77,
                )
                .map_err(|e| e.to_string())?;
                let mut worst: f64 = 0.0;
                for i in 0..50 {
                    let sir = -5.0 + (i as f64) * 0.2;
                    let cell = tsasr_core::mixture::toy::generate_eval_cell(
                        &world,
                        1,
                        sir,
                        true,
                        [0.0, 20.0],
                        900 + i,
                    );
                    let s = &cell[0];
                    let a = s.achieved_sir_db.ok_or("missing achieved SIR")?;
                    worst = worst.max((a - sir).abs());
                    worst = worst.max((s.achieved_snr_db - s.snr_db).abs());
                }
                if worst > 1e-6 {
                    return Err(format!("max deviation {worst:.2e} dB exceeds 1e-6"));
                }
                Ok(format!("50 mixtures, max deviation {worst:.2e} dB"))
            },
        },
        Check {
            name: "token error rate oracle",
            run: || {
                use tsasr_core::eval::align_counts;
                fn oracle(a: &[usize], b: &[usize]) -> usize {
                    let mut prev: Vec<usize> = (0..=b.len()).collect();
                    for i in 1..=a.len() {
                        let mut cur = vec![i; b.len() + 1];
                        for j in 1..=b.len() {
                            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
                            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
                        }
                        prev = cur;
                    }
                    prev[b.len()]
                }
                let mut rng = ChaCha8Rng::seed_from_u64(13);
                for _ in 0..200 {
                    let a: Vec<usize> =
                        (0..rng.gen_range(0..=6)).map(|_| rng.gen_range(1..=3)).collect();
                    let b: Vec<usize> =
                        (0..rng.gen_range(0..=6)).map(|_| rng.gen_range(1..=3)).collect();
                    let c = align_counts(&a, &b);
                    if c.edits() != oracle(&a, &b) {
                        return Err(format!("{a:?} vs {b:?}: {} != {}", c.edits(), oracle(&a, &b)));
                    }
                }
                Ok("200 random pairs agree".into())
            },
        },
        Check {
            name: "checkpoint round-trip",
            run: || {
                let cfg = ModelConfig::toy(Variant::Baseline);
                let params = init_params(&cfg, 14).map_err(|e| e.to_string())?;
                let dir = std::env::temp_dir().join("tsasr-selfcheck");
                std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
                let p = dir.join("rt.ckpt");
                checkpoint::save(&p, &cfg, &params).map_err(|e| e.to_string())?;
                let (cfg2, params2) = checkpoint::load(&p).map_err(|e| e.to_string())?;
                if cfg2 != cfg {
                    return Err("config changed across round trip".into());
                }
                for (path, t) in params.iter() {
                    let u = params2.get(path).map_err(|e| e.to_string())?;
                    if t.bits_hash() != u.bits_hash() {
                        return Err(format!("parameter {path} not bit-identical"));
                    }
                }
                let mut bytes = std::fs::read(&p).map_err(|e| e.to_string())?;
                let mid = bytes.len() / 2;
                bytes[mid] ^= 0x10;
                let corrupt = dir.join("corrupt.ckpt");
                std::fs::write(&corrupt, &bytes).map_err(|e| e.to_string())?;
                if checkpoint::load(&corrupt).is_ok() {
                    return Err("corrupted checkpoint loaded".into());
                }
                Ok("bit-exact, corruption detected".into())
            },
        },
    ]
}

fn cmd_selfcheck() -> Result<()> {
    let mut checks = selfcheck_checks();
    // Operators can point the suite at a specific checkpoint file.
    if let Ok(path) = std::env::var("TSASR_SELFCHECK_CKPT") {
        let leaked: &'static str = Box::leak(format!("checkpoint integrity ({path})").into_boxed_str());
        checks.push(Check {
            name: leaked,
            run: || {
                let path = std::env::var("TSASR_SELFCHECK_CKPT").map_err(|e| e.to_string())?;
                checkpoint::load(Path::new(&path))
                    .map(|(cfg, _)| format!("loads cleanly, variant {}", cfg.variant))
                    .map_err(|e| e.to_string())
            },
        });
    }
    let mut failed = 0usize;
    for check in &checks {
        let t = std::time::Instant::now();
        match (check.run)() {
            Ok(detail) => println!(
                "ok   {:<40} {:>6.2}s  {detail}",
                check.name,
                t.elapsed().as_secs_f64()
            ),
            Err(detail) => {
                failed += 1;
                println!(
                    "FAIL {:<40} {:>6.2}s  {detail}",
                    check.name,
                    t.elapsed().as_secs_f64()
                );
            }
        }
    }
    if failed > 0 {
        return Err(CliError::Runtime(format!(
            "{failed} of {} checks failed",
            checks.len()
        )));
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let eff = resolve(&cli.global)?;
    eprintln!(
        "effective config: {}",
        serde_json::to_string(&eff).expect("effective config serializes")
    );
    if let Some(n) = eff.jobs {
        // Ignore double initialization (e.g. library already built a pool).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.cmd {
        Command::Synth(args) => cmd_synth(&eff, args),
        Command::Train(args) => cmd_train(&eff, args),
        Command::Decode(args) => cmd_decode(&eff, args),
        Command::Eval(args) => cmd_eval(&eff, args),
        Command::Selfcheck => cmd_selfcheck(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            match e {
                CliError::Usage(_) => ExitCode::from(2),
                CliError::Runtime(_) => ExitCode::from(1),
            }
        }
    }
}

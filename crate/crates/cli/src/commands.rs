//! Implementations of the five subcommands. Each returns `Ok(())` for exit
//! code 0 or a [`CmdError`] carrying the exit code (1 usage/config,
//! 2 divergence, 3 verification failure).

use std::f64::consts::LN_2;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use trellisnet::data::{
    apply_permutation, downsample_2x2, gen_copy_sequence, load_char_corpus_files,
    load_char_corpus_single, load_idx_images, load_idx_labels, pixel_permutation, CharCorpus,
    COPY_VOCAB,
};
use trellisnet::equivalence::{verify_equivalence_fixed, RnnCell};
use trellisnet::rnn::{run_truncated, run_truncated_lstm};
use trellisnet::tensor::{finite_diff_gradient, max_abs_diff, Tape, Tensor, TensorError};
use trellisnet::training::{
    collect_grads, eval_lanes, eval_lm_stream, run_copy_training, run_lm_training,
    run_pixel_training, write_metrics_csv, CopyTaskOptions, Heads, LaneInput, LanePlan,
    LmTaskOptions, MetricsRow, Model, Optimizer, PixelTaskOptions, PlateauScheduler, TrainError,
};
use trellisnet::trellis::{
    network_forward, ForwardOpts, HistoryPad, TrellisConfig, TrellisParams,
};

use crate::checkpoint::{self, RnnCheckpoint};
use crate::config::{RunConfig, TaskConfig};
use crate::CmdError;

pub const VERIFY_TOL_VANILLA: f64 = 1e-9;
pub const VERIFY_TOL_LSTM: f64 = 1e-8;

fn verify_tolerance(cell: RnnCell) -> f64 {
    match cell {
        RnnCell::Vanilla => VERIFY_TOL_VANILLA,
        RnnCell::Lstm => VERIFY_TOL_LSTM,
    }
}

fn parse_cell(name: &str) -> Result<RnnCell, CmdError> {
    match name {
        "vanilla" => Ok(RnnCell::Vanilla),
        "lstm" => Ok(RnnCell::Lstm),
        other => Err(CmdError::usage(format!("unknown cell {other:?} (expected \"vanilla\" or \"lstm\")"))),
    }
}

fn cell_name(cell: RnnCell) -> &'static str {
    match cell {
        RnnCell::Vanilla => "vanilla",
        RnnCell::Lstm => "lstm",
    }
}

// ── train ───────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub max_steps: Option<usize>,
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CmdError> {
    let mut run = RunConfig::from_file(&args.config)?;
    if let Some(v) = args.seed {
        run.task.seed = v;
    }
    if let Some(v) = args.epochs {
        run.task.epochs = v;
    }
    if let Some(v) = args.batch {
        run.task.batch = v;
    }
    if let Some(v) = args.lr {
        run.optimizer.lr = v;
    }
    if let Some(v) = args.max_steps {
        run.task.max_steps = v;
    }
    // Resolve the seed (TRELLIS_SEED env wins) so the checkpoint echoes the
    // value that was actually used.
    run.task.seed = run.effective_seed()?;

    let rows = match run.task.kind.as_str() {
        "copy" => train_copy(&run)?,
        "char_lm" => train_char_lm(&run)?,
        "mnist" => train_mnist(&run)?,
        other => return Err(CmdError::usage(format!("unknown task kind {other:?}"))),
    };
    let (rows, model) = rows;
    std::fs::create_dir_all(&args.out)?;
    let metrics_path = args.out.join("metrics.csv");
    write_metrics_csv(&metrics_path, &rows)?;
    let ckpt_dir = args.out.join("checkpoint");
    checkpoint::save_model(&ckpt_dir, &run, &model)?;
    eprintln!("wrote {} and {}", metrics_path.display(), ckpt_dir.display());
    if let Some(last) = rows.last() {
        println!(
            "done task={} epochs_logged={} final_split={} final_loss={} final_metric={}",
            run.task.kind, last.epoch, last.split, last.loss, last.metric
        );
    }
    Ok(())
}

fn make_optimizer(run: &RunConfig, model: &Model) -> Result<Optimizer, CmdError> {
    Ok(Optimizer::new(
        run.optimizer_kind()?,
        run.optimizer.lr,
        run.regularization.weight_decay,
        &model.param_sizes(),
    ))
}

fn init_model(run: &RunConfig, heads: impl FnOnce(&TrellisConfig, &mut ChaCha8Rng) -> Heads, seed: u64) -> Result<Model, CmdError> {
    let config = run.trellis_config()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trellis = TrellisParams::init(&config, run.model.weight_norm, &mut rng);
    let heads = heads(&config, &mut rng);
    Ok(Model { trellis, config, heads })
}

fn train_copy(run: &RunConfig) -> Result<(Vec<MetricsRow>, Model), CmdError> {
    let seed = run.task.seed;
    let mut model = init_model(
        run,
        |c, rng| Heads::token_head(c.p, COPY_VOCAB, COPY_VOCAB, c.q, rng),
        seed,
    )?;
    let mut opt = make_optimizer(run, &model)?;
    let reg = run.regularization();
    let task = CopyTaskOptions {
        delay: run.task.delay,
        payload: run.task.payload,
        batch: run.task.batch,
        max_steps: run.task.max_steps,
        eval_every: run.task.eval_every,
        eval_sequences: run.task.eval_sequences,
        target_accuracy: run.task.target_accuracy,
        seed,
    };
    let result = run_copy_training(&mut model, &mut opt, &reg, &task)?;
    println!(
        "copy: steps={} final_accuracy={:.4} target_reached={}",
        result.steps, result.final_accuracy, result.reached
    );
    Ok((result.rows, model))
}

fn load_corpus(task: &TaskConfig) -> Result<CharCorpus, CmdError> {
    match task.paths.len() {
        1 => Ok(load_char_corpus_single(&task.paths[0], task.frac_train, task.frac_valid)?),
        3 => Ok(load_char_corpus_files(&task.paths[0], &task.paths[1], &task.paths[2])?),
        n => Err(CmdError::usage(format!(
            "char_lm needs 1 corpus path (fraction split) or 3 paths (train/valid/test), got {n}"
        ))),
    }
}

fn train_char_lm(run: &RunConfig) -> Result<(Vec<MetricsRow>, Model), CmdError> {
    let corpus = load_corpus(&run.task)?;
    let classes = corpus.num_classes();
    let seed = run.task.seed;
    let mut model = init_model(
        run,
        |c, rng| Heads::token_head(c.p, classes, classes, c.q, rng),
        seed,
    )?;
    let mut opt = make_optimizer(run, &model)?;
    let reg = run.regularization();
    let mut sched = PlateauScheduler::new(run.optimizer.plateau_factor, run.optimizer.patience);
    let task = LmTaskOptions {
        bptt: run.task.bptt_len,
        batch: run.task.batch,
        epochs: run.task.epochs,
        seed,
        target_train_bpc: None,
    };
    let result = run_lm_training(
        &mut model,
        &mut opt,
        &reg,
        Some(&mut sched),
        &corpus.train,
        &corpus.valid,
        &task,
    )?;
    println!("char_lm: steps={} rows={}", result.steps, result.rows.len());
    Ok((result.rows, model))
}

fn load_mnist(task: &TaskConfig) -> Result<(Vec<(Vec<f64>, u8)>, Vec<(Vec<f64>, u8)>), CmdError> {
    if task.paths.len() != 1 {
        return Err(CmdError::usage(format!(
            "mnist needs 1 directory path containing the idx files, got {}",
            task.paths.len()
        )));
    }
    let dir = &task.paths[0];
    let load_split = |images: &str, labels: &str| -> Result<Vec<(Vec<f64>, u8)>, CmdError> {
        let images = load_idx_images(&dir.join(images))?;
        let labels = load_idx_labels(&dir.join(labels))?;
        if images.len() != labels.len() {
            return Err(CmdError::usage(format!(
                "image/label count mismatch: {} vs {}",
                images.len(),
                labels.len()
            )));
        }
        let perm = if task.permute {
            let len = if task.downsample { images[0].len() / 4 } else { images[0].len() };
            Some(pixel_permutation(len, task.permute_seed))
        } else {
            None
        };
        Ok(images
            .into_iter()
            .zip(labels)
            .map(|(img, label)| {
                let side = (img.len() as f64).sqrt() as usize;
                let img = if task.downsample { downsample_2x2(&img, side) } else { img };
                let img = match &perm {
                    Some(p) => apply_permutation(&img, p),
                    None => img,
                };
                (img, label)
            })
            .collect())
    };
    let train = load_split("train-images.idx3-ubyte", "train-labels.idx1-ubyte")?;
    let test = load_split("test-images.idx3-ubyte", "test-labels.idx1-ubyte")?;
    Ok((train, test))
}

fn train_mnist(run: &RunConfig) -> Result<(Vec<MetricsRow>, Model), CmdError> {
    if run.model.p != 1 {
        return Err(CmdError::usage(format!(
            "mnist feeds one pixel per step, so model.p must be 1 (got {})",
            run.model.p
        )));
    }
    let (train, test) = load_mnist(&run.task)?;
    let seed = run.task.seed;
    let mut model = init_model(run, |c, rng| Heads::raw_head(10, c.q, rng), seed)?;
    let mut opt = make_optimizer(run, &model)?;
    let reg = run.regularization();
    let mut sched = PlateauScheduler::new(run.optimizer.plateau_factor, run.optimizer.patience);
    let task = PixelTaskOptions { epochs: run.task.epochs, batch: run.task.batch, seed };
    let result =
        run_pixel_training(&mut model, &mut opt, &reg, Some(&mut sched), &train, &test, &task)?;
    println!("mnist: final_test_accuracy={:.4}", result.final_test_accuracy);
    Ok((result.rows, model))
}

// ── eval ────────────────────────────────────────────────────────────────────

pub fn cmd_eval(checkpoint_dir: &Path, data: Option<&Path>) -> Result<(), CmdError> {
    let (mut run, model) = checkpoint::load_model(checkpoint_dir)?;
    if let Some(path) = data {
        run.task.paths = vec![path.to_path_buf()];
    }
    let report = match run.task.kind.as_str() {
        "char_lm" => {
            let corpus = load_corpus(&run.task)?;
            let expected = model
                .heads
                .embedding
                .as_ref()
                .map(|e| e.cols())
                .ok_or_else(|| CmdError::usage("char_lm checkpoint lacks an embedding"))?;
            if corpus.num_classes() != expected {
                return Err(CmdError::usage(format!(
                    "corpus has {} classes but the checkpoint embedding expects {expected}",
                    corpus.num_classes()
                )));
            }
            let loss =
                eval_lm_stream(&model, &corpus.valid, run.task.batch, run.task.bptt_len)?;
            json!({
                "task": "char_lm",
                "split": "valid",
                "loss": loss,
                "bpc": loss / LN_2,
            })
        }
        "copy" => {
            // The same held-out set the training loop evaluated on.
            let mut rng = ChaCha8Rng::seed_from_u64(run.task.seed.wrapping_add(1));
            let set: Vec<(Vec<usize>, Vec<Option<usize>>)> = (0..run.task.eval_sequences)
                .map(|_| gen_copy_sequence(run.task.delay, run.task.payload, &mut rng))
                .collect();
            let lanes: Vec<LanePlan> = set
                .iter()
                .map(|(input, targets)| LanePlan {
                    input: LaneInput::Tokens(input),
                    targets: targets.clone(),
                    pad: HistoryPad::zeros(model.config.q, model.config.p),
                })
                .collect();
            let eval = eval_lanes(&model, &lanes)?;
            json!({
                "task": "copy",
                "split": "eval",
                "loss": eval.loss,
                "accuracy": eval.accuracy,
            })
        }
        "mnist" => {
            let (_, test) = load_mnist(&run.task)?;
            let t_len = test[0].0.len();
            let (loss, accuracy) = trellisnet::training::eval_pixel_set(&model, &test, t_len)?;
            json!({
                "task": "mnist",
                "split": "test",
                "loss": loss,
                "accuracy": accuracy,
            })
        }
        other => return Err(CmdError::usage(format!("unknown task kind {other:?}"))),
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

// ── verify ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct VerifyArgs {
    pub cell: String,
    pub layers: usize,
    pub hidden: usize,
    pub input_dim: usize,
    pub truncation: usize,
    pub seq_len: usize,
    pub trials: usize,
    pub seed: u64,
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<(), CmdError> {
    let cell = parse_cell(&args.cell)?;
    let tol = verify_tolerance(cell);
    let report = verify_equivalence_fixed(
        cell,
        args.layers,
        args.hidden,
        args.input_dim,
        args.truncation,
        args.seq_len,
        args.trials,
        args.seed,
    )?;
    let pass = report.max_abs_err <= tol;
    let out = json!({
        "cell": cell_name(cell),
        "layers": args.layers,
        "hidden": args.hidden,
        "input_dim": args.input_dim,
        "truncation": args.truncation,
        "seq_len": args.seq_len,
        "trials": args.trials,
        "seed": args.seed,
        "tolerance": tol,
        "max_abs_err": report.max_abs_err,
        "pass": pass,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    if pass {
        Ok(())
    } else {
        Err(CmdError::Verification(format!(
            "max abs error {:.3e} exceeds tolerance {tol:.1e}",
            report.max_abs_err
        )))
    }
}

// ── convert ─────────────────────────────────────────────────────────────────

pub fn cmd_convert(rnn_dir: &Path, truncation: usize, out: &Path, verify: bool) -> Result<(), CmdError> {
    if truncation == 0 {
        return Err(CmdError::usage("truncation must be >= 1"));
    }
    let rnn = checkpoint::load_rnn(rnn_dir)?;
    let emb = match &rnn {
        RnnCheckpoint::Vanilla(p) => trellisnet::equivalence::embed_vanilla(p, truncation),
        RnnCheckpoint::Lstm(p) => trellisnet::equivalence::embed_lstm(p, truncation),
    }
    .map_err(|e| CmdError::usage(e.to_string()))?;
    checkpoint::save_embedded(out, &emb)?;
    println!(
        "converted {} cell (layers={}, hidden={}) to trellis depth={} q={}",
        cell_name(emb.cell),
        emb.layers,
        emb.hidden,
        emb.config.depth,
        emb.config.q
    );
    if verify {
        let loaded = checkpoint::load_embedded(out)?;
        let tol = verify_tolerance(loaded.cell);
        let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
        let mut max_err = 0.0f64;
        for _ in 0..5 {
            let t_len = 12;
            let x = Tensor::from_fn(vec![loaded.input_dim, t_len], |_| rng.gen_range(-1.0..1.0));
            let got = loaded.run(&x)?;
            let want = match &rnn {
                RnnCheckpoint::Vanilla(p) => run_truncated(p, &x, truncation),
                RnnCheckpoint::Lstm(p) => run_truncated_lstm(p, &x, truncation),
            };
            max_err = max_err.max(max_abs_diff(&got, &want));
        }
        println!("verify: max_abs_err={max_err:.3e} tolerance={tol:.1e}");
        if max_err > tol {
            return Err(CmdError::Verification(format!(
                "converted checkpoint deviates from the source recurrence by {max_err:.3e} (tolerance {tol:.1e})"
            )));
        }
    }
    Ok(())
}

// ── gradcheck ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct GradcheckArgs {
    pub seed: u64,
    pub q: usize,
    pub depth: usize,
    pub vocab: usize,
    pub seq_len: usize,
    /// Test hook: perturb one analytic gradient entry so the check must fail.
    pub corrupt: bool,
}

/// Scratch-tape LM loss of a model on fixed tokens; a deterministic pure
/// function of the parameters, as the finite-difference probe requires.
fn lm_loss(model: &Model, tokens: &[usize], targets: &[Option<usize>]) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let (bp, bh) = model.bind(&mut tape, None)?;
    let x = bh.encode_tokens(&mut tape, tokens)?;
    let pad = HistoryPad::zeros(model.config.q, model.config.p);
    let out = network_forward(&mut tape, &x, &bp, &model.config, &pad, &ForwardOpts::default())?;
    let logits = bh.decode(&mut tape, &out.z2)?;
    let ce = tape.softmax_cross_entropy(&logits, targets)?;
    Ok(ce.scalar_value())
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), CmdError> {
    const EPSILON: f64 = 1e-5;
    const TOLERANCE: f64 = 1e-4;
    for (name, v) in [("q", args.q), ("depth", args.depth), ("vocab", args.vocab), ("seq-len", args.seq_len)] {
        if v == 0 {
            return Err(CmdError::usage(format!("{name} must be >= 1")));
        }
    }
    let config = TrellisConfig {
        p: args.q,
        q: args.q,
        depth: args.depth,
        dilations: vec![1; args.depth],
        activation: trellisnet::trellis::Activation::LstmGate,
        aux_every: 0,
        inject_every: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let trellis = TrellisParams::init(&config, false, &mut rng);
    let heads = Heads::token_head(config.p, args.vocab, args.vocab, config.q, &mut rng);
    let model = Model { trellis, config, heads };

    let tokens: Vec<usize> = (0..args.seq_len).map(|_| rng.gen_range(0..args.vocab)).collect();
    let targets: Vec<Option<usize>> = tokens
        .iter()
        .skip(1)
        .map(|&t| Some(t))
        .chain([Some(rng.gen_range(0..args.vocab))])
        .collect();

    // Analytic gradients via one taped forward/backward pass.
    let mut tape = Tape::new();
    let (bp, bh) = model.bind(&mut tape, None)?;
    let x = bh.encode_tokens(&mut tape, &tokens)?;
    let pad = HistoryPad::zeros(model.config.q, model.config.p);
    let out = network_forward(&mut tape, &x, &bp, &model.config, &pad, &ForwardOpts::default())?;
    let logits = bh.decode(&mut tape, &out.z2)?;
    let ce = tape.softmax_cross_entropy(&logits, &targets)?;
    let grads = tape.backprop(&ce)?;
    let mut handles = bp.handles();
    handles.extend(bh.handles());
    let mut analytic = collect_grads(&grads, &handles)?;
    if args.corrupt {
        analytic[0][0] += 1e-2;
    }

    // Finite-difference estimate, parameter by parameter.
    let names: Vec<&'static str> = model.fields().iter().map(|(n, _)| *n).collect();
    let values: Vec<Tensor> = model.fields().iter().map(|(_, t)| (*t).clone()).collect();
    let template = model.clone();
    let numeric = finite_diff_gradient(
        |params| {
            let mut m = template.clone();
            for ((_, slot), value) in m.fields_mut().into_iter().zip(params.iter()) {
                *slot = value.detached();
            }
            lm_loss(&m, &tokens, &targets)
                .map_err(|e| TensorError::InvalidArgument { op: "gradcheck", detail: e.to_string() })
        },
        &values,
        EPSILON,
    )?;

    // Relative error per entry: exact zeros and finite-difference noise are
    // excused by the absolute floor, everything else must agree relatively.
    let rel = |a: f64, b: f64| -> f64 {
        if a.abs() < 1e-6 && b.abs() < 1e-6 {
            0.0
        } else {
            (a - b).abs() / a.abs().max(b.abs())
        }
    };
    let mut worst = ("", 0usize, 0.0f64, 0.0f64, 0.0f64);
    for ((name, ana), num) in names.iter().zip(analytic.iter()).zip(numeric.iter()) {
        let mut field_max = 0.0f64;
        for (i, (&a, &b)) in ana.iter().zip(num.iter()).enumerate() {
            let r = rel(a, b);
            field_max = field_max.max(r);
            if r > worst.2 {
                worst = (name, i, r, a, b);
            }
        }
        println!("param {name:<10} entries {:>6} max_rel_err {field_max:.3e}", ana.len());
    }
    let pass = worst.2 < TOLERANCE;
    println!(
        "worst: param {} index {} rel_err {:.3e} (backprop {:.6e} vs finite-diff {:.6e})",
        worst.0, worst.1, worst.2, worst.3, worst.4
    );
    println!("gradcheck {}: max_rel_err {:.3e} tolerance {TOLERANCE:.1e}", if pass { "PASS" } else { "FAIL" }, worst.2);
    if pass {
        Ok(())
    } else {
        Err(CmdError::Verification(format!(
            "gradient mismatch at {}[{}]: relative error {:.3e}",
            worst.0, worst.1, worst.2
        )))
    }
}

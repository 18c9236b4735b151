use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use marginlab::data::{self, Dataset, Split, SyntheticSpec};
use marginlab::eval;
use marginlab::losses::{self, LossVariant};
use marginlab::model::{self, CheckpointMeta};
use marginlab::numerics::Matrix;
use marginlab::train::{self, GradCheckReport};
use marginlab::{LabeledLogits, MarginConfig, Model, ModelDims};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::CliError;

pub const TRIALS_FILE: &str = "trials.txt";
pub const ECHO_FILE: &str = "effective_config.txt";
const GRAD_TOL: f64 = 1e-4;

type CliResult<T = ()> = Result<T, CliError>;

fn io_err(what: impl std::fmt::Display) -> impl FnOnce(std::io::Error) -> CliError {
    move |e| CliError::Path(format!("{what}: {e}"))
}

/// Creates `dir` and writes the effective configuration into it.
fn echo_config(dir: &Path, cfg: &RunConfig) -> CliResult {
    fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    let path = dir.join(ECHO_FILE);
    fs::write(&path, cfg.to_text()).map_err(io_err(format!("writing {}", path.display())))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(io_err(format!("creating {}", path.display())))
}

fn finish(mut out: BufWriter<File>, path: &Path) -> CliResult {
    out.flush()
        .map_err(io_err(format!("writing {}", path.display())))
}

fn load_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    data::load_dataset(&cfg.data_dir)
        .map_err(CliError::at(format!("dataset {}", cfg.data_dir.display())))
}

fn load_model(cfg: &RunConfig, dataset: &Dataset) -> CliResult<(Model, CheckpointMeta)> {
    let path = cfg.checkpoint_path();
    let (model, meta) = model::load_checkpoint::<f64>(&path)
        .map_err(CliError::at(format!("checkpoint {}", path.display())))?;
    let dims = model.dims();
    if dims.d_in != dataset.features.cols() || dims.classes != dataset.num_speakers() {
        return Err(CliError::Config(format!(
            "checkpoint expects d_in {} and {} classes, dataset has d_in {} and {} speakers",
            dims.d_in,
            dims.classes,
            dataset.features.cols(),
            dataset.num_speakers()
        )));
    }
    Ok((model, meta))
}

pub fn gen_data(cfg: &RunConfig) -> CliResult {
    let spec = cfg.synthetic_spec();
    spec.validate()?;
    echo_config(&cfg.data_dir, cfg)?;
    let dataset = data::generate_synthetic(&spec)?;
    let trials = data::make_trials(&dataset, cfg.num_target, cfg.num_nontarget, cfg.trial_seed)?;
    let dir = &cfg.data_dir;
    data::save_dataset(dir, &dataset)
        .map_err(CliError::at(format!("dataset {}", dir.display())))?;
    let trial_path = dir.join(TRIALS_FILE);
    data::save_trials(&trial_path, &trials).map_err(CliError::at(trial_path.display()))?;
    println!(
        "wrote {} utterances of {} speakers and {} trials to {} (seed {})",
        dataset.len(),
        dataset.num_speakers(),
        trials.len(),
        dir.display(),
        spec.seed
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> CliResult {
    let train_cfg = cfg.train_config()?;
    echo_config(&cfg.out_dir, cfg)?;
    let dataset = load_dataset(cfg)?;
    let dims = cfg.model_dims(dataset.features.cols(), dataset.num_speakers());
    let init = Model::init(dims, cfg.bias, cfg.model_seed)?;
    let (model, history) = train::train_dataset(&dataset, init, &train_cfg)?;

    let ckpt = cfg.checkpoint_path();
    let meta = CheckpointMeta {
        seed: cfg.model_seed,
        step: history.steps,
    };
    model::save_checkpoint(&ckpt, &model, meta).map_err(CliError::at(ckpt.display()))?;
    let hist_path = cfg.out_dir.join("history.csv");
    let mut out = create(&hist_path)?;
    history.write_csv(&mut out)?;
    finish(out, &hist_path)?;

    let last = history.epochs.last().expect("at least one epoch");
    println!(
        "trained {} for {} epochs ({} steps): mean loss {:.6}, train accuracy {:.2}%",
        train_cfg.loss.variant(),
        last.epoch,
        history.steps,
        last.mean_loss,
        100.0 * last.train_acc
    );
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> CliResult {
    echo_config(&cfg.out_dir, cfg)?;
    let dataset = load_dataset(cfg)?;
    let (model, _) = load_model(cfg, &dataset)?;
    let trial_path = cfg.data_dir.join(TRIALS_FILE);
    let trials = data::load_trials(&trial_path).map_err(CliError::at(trial_path.display()))?;

    let store = eval::embed_split(&model, &dataset, Split::Heldout)?;
    let emb_path = cfg.out_dir.join("embeddings.txt");
    data::save_embeddings(&emb_path, &store).map_err(CliError::at(emb_path.display()))?;
    let scores = eval::score_trials(&store, &trials)?;
    let result = eval::compute_eer(&scores)?;
    let det = eval::det_points(&scores)?;

    let score_path = cfg.out_dir.join("scores.csv");
    let mut out = create(&score_path)?;
    eval::write_scores_csv(&mut out, &scores)?;
    finish(out, &score_path)?;
    let det_path = cfg.out_dir.join("det.csv");
    let mut out = create(&det_path)?;
    eval::write_det_csv(&mut out, &det)?;
    finish(out, &det_path)?;

    println!(
        "{} target / {} non-target trials, threshold {:.6}",
        result.num_target, result.num_nontarget, result.threshold
    );
    println!("EER: {:.3}%", 100.0 * result.eer);
    Ok(())
}

/// Seeded logits whose scaled values stay within ±6.
fn probe_batch(rng: &mut ChaCha8Rng, s: f64) -> CliResult<LabeledLogits> {
    let (n, c) = (6, 8);
    let spread = f64::min(1.0, 6.0 / s);
    let values: Vec<f64> = (0..n * c)
        .map(|_| rng.random_range(-spread..=spread))
        .collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    Ok(LabeledLogits::new(Matrix::from_vec(n, c, values)?, labels)?)
}

pub fn grad_check(cfg: &RunConfig, corrupt: bool) -> CliResult {
    echo_config(&cfg.out_dir, cfg)?;
    let eps = cfg.grad_eps;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.model_seed);
    let batch = probe_batch(&mut rng, cfg.s)?;
    let sample = data::generate_synthetic(&SyntheticSpec {
        num_speakers: 5,
        utts_per_speaker: 4,
        d_in: 6,
        ..cfg.synthetic_spec()
    })?;
    let dims = ModelDims {
        d_in: 6,
        hidden: 8,
        d_emb: 4,
        classes: 5,
    };
    let model = Model::init(dims, cfg.bias, cfg.model_seed)?;

    let mut failures = 0;
    println!(
        "{:<16} {:>12} {:>12}  result",
        "variant", "logit err", "model err"
    );
    for variant in LossVariant::ALL {
        let loss = MarginConfig::new(variant, cfg.m, cfg.s)?.with_floor_mode(cfg.floor_mode);
        let mut analytic = losses::evaluate(&batch, &loss).grad;
        if corrupt {
            analytic[(0, 0)] += 1e-2;
        }
        let logit_err = losses::compare_logit_gradient(&batch, &loss, eps, &analytic)?;
        let report = model_check(&sample, &model, &loss, eps, corrupt)?;
        let ok = logit_err <= GRAD_TOL && report.passes(GRAD_TOL);
        if !ok {
            failures += 1;
        }
        println!(
            "{:<16} {:>12.3e} {:>12.3e}  {}",
            variant.name(),
            logit_err,
            report.max_rel_error.max(report.max_abs_error_small),
            if ok { "PASS" } else { "FAIL" }
        );
    }
    if failures > 0 {
        return Err(CliError::Numerical(format!(
            "{failures} variant(s) exceed the {GRAD_TOL:e} gradient tolerance"
        )));
    }
    Ok(())
}

fn model_check(
    sample: &Dataset,
    model: &Model,
    loss: &MarginConfig,
    eps: f64,
    corrupt: bool,
) -> CliResult<GradCheckReport<f64>> {
    let (x, y) = (&sample.features, &sample.labels);
    if !corrupt {
        return Ok(train::whole_model_grad_check(x, y, model, loss, eps)?);
    }
    let (logits, trace) = model.forward(x)?;
    let out = losses::evaluate(&LabeledLogits::new(logits, y.clone())?, loss);
    let mut grads = model.backward(&trace, &out.grad)?;
    grads.encoder.w1[(0, 0)] += 1e-2;
    Ok(train::compare_model_gradient(
        x, y, model, loss, eps, &grads,
    )?)
}

pub fn loss_probe(cfg: &RunConfig) -> CliResult {
    let deltas = cfg.delta_grid()?;
    if cfg.probe_variants.is_empty() || cfg.probe_m.is_empty() || cfg.probe_s.is_empty() {
        return Err(CliError::Config(
            "empty probe grid (variants, m or s list)".into(),
        ));
    }
    let mut configs = Vec::new();
    for &v in &cfg.probe_variants {
        for &m in &cfg.probe_m {
            for &s in &cfg.probe_s {
                configs.push(MarginConfig::new(v, m, s)?.with_floor_mode(cfg.floor_mode));
            }
        }
    }
    echo_config(&cfg.out_dir, cfg)?;
    let path = cfg.out_dir.join("loss_probe.csv");
    let mut out = create(&path)?;
    let write_err = io_err(format!("writing {}", path.display()));
    (|| -> std::io::Result<()> {
        writeln!(out, "variant,m,s,delta,loss")?;
        for loss in &configs {
            for &delta in &deltas {
                let z = Matrix::from_vec(1, 2, vec![0.5 * delta, -0.5 * delta]).expect("1×2");
                let data = LabeledLogits::new(z, vec![0]).expect("|Δ/2| ≤ 1");
                let value = losses::evaluate(&data, loss).value;
                writeln!(
                    out,
                    "{},{},{},{},{:.16e}",
                    loss.variant(),
                    loss.m(),
                    loss.s(),
                    delta,
                    value
                )?;
            }
        }
        Ok(())
    })()
    .map_err(write_err)?;
    finish(out, &path)?;
    println!(
        "wrote {} rows to {}",
        configs.len() * deltas.len(),
        path.display()
    );
    Ok(())
}

pub fn diag(cfg: &RunConfig) -> CliResult {
    let loss = cfg.margin()?;
    if !(0.0 < cfg.hard_threshold
        && cfg.hard_threshold < cfg.easy_threshold
        && cfg.easy_threshold < 1.0)
    {
        return Err(CliError::Config(format!(
            "need 0 < hard_threshold ({}) < easy_threshold ({}) < 1",
            cfg.hard_threshold, cfg.easy_threshold
        )));
    }
    echo_config(&cfg.out_dir, cfg)?;
    let dataset = load_dataset(cfg)?;
    let (model, _) = load_model(cfg, &dataset)?;
    let rows = dataset.rows(Split::Train);
    let (x, y) = dataset.subset(&rows);
    let (logits, _) = model.forward(&x)?;
    let data = LabeledLogits::new(logits, y)?;
    let report = losses::hardness_report(&data, &loss, cfg.easy_threshold, cfg.hard_threshold)?;

    let path = cfg.out_dir.join("hardness.csv");
    let mut out = create(&path)?;
    (|| -> std::io::Result<()> {
        writeln!(out, "utt,posterior,set,approx_error")?;
        for (&row, s) in rows.iter().zip(&report.samples) {
            let err = s
                .approx_error
                .map(|e| format!("{e:.16e}"))
                .unwrap_or_default();
            writeln!(
                out,
                "{},{:.16e},{},{err}",
                dataset.utt_ids[row],
                s.posterior,
                s.set.name()
            )?;
        }
        Ok(())
    })()
    .map_err(io_err(format!("writing {}", path.display())))?;
    finish(out, &path)?;

    use losses::HardnessSet::*;
    println!(
        "{} samples: {} easy ({:.1}%), {} hard, {} unclassified",
        report.samples.len(),
        report.count(Easy),
        100.0 * report.fraction(Easy),
        report.count(Hard),
        report.count(Unclassified)
    );
    Ok(())
}

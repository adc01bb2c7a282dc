//! Training harness: identity-balanced batches through the encoder and the
//! multi-granularity losses, SGD with step decay, per-epoch held-out
//! alignment metrics, and checkpointing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::batch::{LabeledBatch, Modality};
use crate::checkpoint::CheckpointMeta;
use crate::config::{BaselineLoss, DataSource, RunConfig};
use crate::data::{self, ToySample};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_retrieval, modality_gap, split_for_direction, Direction, RetrievalReport,
};
use crate::losses::update_centers;
use crate::math::BnMode;
use crate::mgs::mgs_losses;
use crate::model::Model;

/// Stream separator for the sampler RNG so it never collides with the
/// initializer stream.
const SAMPLER_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;
const PROBE_STREAM: u64 = 0x517C_C1B7_2722_0A95;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Column order of the metrics CSV (stable interface).
pub const METRICS_COLUMNS: &str = "epoch,lr,objective,loss_discrimination,loss_id_local,\
loss_align_local,loss_id_global,loss_align_global,modality_gap,fisher_ratio,plans_converged";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub config_hash: String,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub final_gap: f64,
    pub final_fisher: f64,
    pub epochs_run: usize,
}

/// Owned dataset plus identity counts, whatever the source.
pub struct LoadedData {
    pub train: Vec<ToySample>,
    pub test: Vec<ToySample>,
    pub dim: usize,
    pub num_train_identities: usize,
}

pub fn load_data(cfg: &RunConfig) -> Result<LoadedData> {
    match cfg.data.source {
        DataSource::Synth => {
            let ds = data::generate_dataset(&cfg.data.synth)?;
            Ok(LoadedData {
                train: ds.train,
                test: ds.test,
                dim: ds.dim,
                num_train_identities: ds.num_train_identities,
            })
        }
        DataSource::File => {
            let train = data::load_feature_file(Path::new(&cfg.data.train_file))?;
            let test = data::load_feature_file(Path::new(&cfg.data.test_file))?;
            let dim = train.dim();
            if test.dim() != dim {
                return Err(Error::Config(format!(
                    "train file dim {} vs test file dim {}",
                    dim,
                    test.dim()
                )));
            }
            let num_train_identities =
                train.identities.iter().copied().max().map_or(0, |m| m + 1);
            Ok(LoadedData {
                train: data::batch_to_samples(&train),
                test: data::batch_to_samples(&test),
                dim,
                num_train_identities,
            })
        }
    }
}

fn samples_to_arrays(samples: &[ToySample], dim: usize) -> (Array2<f64>, Vec<usize>, Vec<Modality>) {
    let n = samples.len();
    let inputs = Array2::from_shape_fn((n, dim), |(i, k)| samples[i].input[k]);
    let ids = samples.iter().map(|s| s.identity).collect();
    let mods = samples.iter().map(|s| s.modality).collect();
    (inputs, ids, mods)
}

/// Held-out alignment metrics on eval-mode fused features: the mean-distance
/// modality gap and the intra/inter variance ratio.
pub fn heldout_metrics(model: &mut Model, test: &[ToySample], beta: f64) -> Result<(f64, f64)> {
    let (inputs, ids, mods) = samples_to_arrays(test, model.shape.input_dim);
    let features = model.inference_features(&inputs, &mods, beta)?;
    let batch = LabeledBatch::new(features, ids, mods)?;
    let fv = batch.features_of(Modality::Visible);
    let ft = batch.features_of(Modality::Thermal);
    let gap = modality_gap(&fv, &ft)?.mean_distance;
    let fisher = crate::eval::fisher_ratio(&batch)?;
    Ok((gap, fisher))
}

/// Both-direction retrieval reports on eval-mode fused features.
pub fn evaluate_model(
    model: &mut Model,
    test: &[ToySample],
    beta: f64,
) -> Result<(RetrievalReport, RetrievalReport)> {
    let (inputs, ids, mods) = samples_to_arrays(test, model.shape.input_dim);
    let features = model.inference_features(&inputs, &mods, beta)?;
    let batch = LabeledBatch::new(features, ids, mods)?;
    let (qv, gt) = split_for_direction(&batch, Direction::VisibleToThermal)?;
    let v2t = evaluate_retrieval(&qv, &gt, Direction::VisibleToThermal)?;
    let (qt, gv) = split_for_direction(&batch, Direction::ThermalToVisible)?;
    let t2v = evaluate_retrieval(&qt, &gv, Direction::ThermalToVisible)?;
    Ok((v2t, t2v))
}

struct MetricsWriter {
    rows: String,
    path: PathBuf,
}

impl MetricsWriter {
    fn new(path: PathBuf, config_hash: &str) -> Self {
        let mut rows = String::new();
        rows.push_str(&format!("# config_hash={}\n", config_hash));
        rows.push_str(METRICS_COLUMNS);
        rows.push('\n');
        MetricsWriter { rows, path }
    }

    #[allow(clippy::too_many_arguments)]
    fn row(
        &mut self,
        epoch: usize,
        lr: f64,
        objective: f64,
        terms: [f64; 5],
        gap: f64,
        fisher: f64,
        converged: bool,
    ) {
        self.rows.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            epoch,
            lr,
            objective,
            terms[0],
            terms[1],
            terms[2],
            terms[3],
            terms[4],
            gap,
            fisher,
            converged as u8
        ));
    }

    fn flush(&self) -> Result<()> {
        let mut f = fs::File::create(&self.path).map_err(|e| Error::io(&self.path, e))?;
        f.write_all(self.rows.as_bytes()).map_err(|e| Error::io(&self.path, e))
    }
}

/// Run the full training loop and write `metrics.csv` plus
/// `checkpoint.bin` under `out_dir`. On a non-finite loss or gradient the
/// last epoch's parameters are written before the error is returned.
pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<(Model, TrainOutcome)> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let hash = cfg.hash();
    let data = load_data(cfg)?;
    if data.dim != cfg.encoder.input_dim {
        return Err(Error::Config(format!(
            "data dim {} vs encoder input_dim {}",
            data.dim, cfg.encoder.input_dim
        )));
    }
    if data.num_train_identities < cfg.batch.identities {
        return Err(Error::Config(format!(
            "batch wants {} identities, train split has {}",
            cfg.batch.identities, data.num_train_identities
        )));
    }
    let mut model = Model::new(
        &cfg.encoder,
        cfg.mgs.parts,
        cfg.mgs.gem_p,
        data.num_train_identities,
        cfg.run.seed,
    )?;
    let opts = cfg.loss_options();
    let schedule = cfg.optim.schedule();
    let mut sampler_rng = ChaCha8Rng::seed_from_u64(cfg.run.seed ^ SAMPLER_STREAM);
    let mut centers: Option<Array2<f64>> = match cfg.ablation.baseline_loss {
        BaselineLoss::Center => Some(Array2::zeros((
            data.num_train_identities,
            cfg.mgs.parts * cfg.encoder.map_c,
        ))),
        _ => None,
    };

    let metrics_path = out_dir.join(METRICS_FILE);
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);
    let mut metrics = MetricsWriter::new(metrics_path.clone(), &hash);
    let meta = CheckpointMeta {
        schema_version: 1,
        config_hash: hash.clone(),
        encoder: cfg.encoder.clone(),
        parts: cfg.mgs.parts,
        num_identities: data.num_train_identities,
        beta: cfg.mgs.beta,
        gem_p: cfg.mgs.gem_p,
        trainable_part_weights: cfg.ablation.trainable_part_weights,
    };

    // Initial row: losses on a no-update probe batch, held-out metrics at
    // initialization.
    {
        let mut probe_rng = ChaCha8Rng::seed_from_u64(cfg.run.seed ^ PROBE_STREAM);
        let batch =
            data::sample_batch(&data.train, data.num_train_identities, &cfg.batch, &mut probe_rng)?;
        let (features, _) = model.forward(
            &batch.features,
            &batch.modalities,
            BnMode::TrainFrozen,
            cfg.ablation.trainable_part_weights,
        )?;
        let heads = model.heads();
        let out = mgs_losses(
            &features,
            &batch.identities,
            &batch.modalities,
            &heads,
            &opts,
            centers.as_ref(),
        )?;
        let terms = [
            out.terms.discrimination,
            out.terms.id_local,
            out.terms.alignment_local,
            out.terms.id_global,
            out.terms.alignment_global,
        ];
        let objective = out.objective;
        let converged = out.plans_converged;
        drop(out);
        drop(heads);
        model.store.zero_grads();
        let (gap, fisher) = heldout_metrics(&mut model, &data.test, cfg.mgs.beta)?;
        metrics.row(0, schedule.at_epoch(0), objective, terms, gap, fisher, converged);
    }

    let mut last_good = (model.store.clone(), model.norm.clone());
    let mut final_gap = f64::NAN;
    let mut final_fisher = f64::NAN;
    let mut epochs_run = 0usize;
    'training: for epoch in 0..cfg.optim.epochs {
        let lr = schedule.at_epoch(epoch);
        let mut sum_objective = 0.0;
        let mut sum_terms = [0.0f64; 5];
        let mut all_converged = true;
        for _ in 0..cfg.optim.iters_per_epoch {
            let batch = data::sample_batch(
                &data.train,
                data.num_train_identities,
                &cfg.batch,
                &mut sampler_rng,
            )?;
            let (features, cache) = model.forward(
                &batch.features,
                &batch.modalities,
                BnMode::Train,
                cfg.ablation.trainable_part_weights,
            )?;
            let step = (|| -> Result<()> {
                let heads = model.heads();
                let out = mgs_losses(
                    &features,
                    &batch.identities,
                    &batch.modalities,
                    &heads,
                    &opts,
                    centers.as_ref(),
                )?;
                drop(heads);
                if !out.objective.is_finite() {
                    return Err(Error::Numerical(format!(
                        "objective became non-finite at epoch {}",
                        epoch + 1
                    )));
                }
                sum_objective += out.objective;
                sum_terms[0] += out.terms.discrimination;
                sum_terms[1] += out.terms.id_local;
                sum_terms[2] += out.terms.alignment_local;
                sum_terms[3] += out.terms.id_global;
                sum_terms[4] += out.terms.alignment_global;
                all_converged &= out.plans_converged;
                model.backward(cache.as_ref().expect("train mode caches"), &out)?;
                model.store.clip_grad_norm(cfg.optim.clip_grad_norm);
                model.store.sgd_step(lr)?;
                Ok(())
            })();
            if let Err(e) = step {
                // Keep the last good parameters on disk for postmortems.
                model.store = last_good.0;
                model.norm = last_good.1;
                model.save(&checkpoint_path, &meta)?;
                metrics.flush()?;
                return Err(e);
            }
            if let Some(c) = centers.as_mut() {
                update_centers(
                    c,
                    &features.holistic,
                    &batch.identities,
                    cfg.ablation.center_update_rate,
                );
            }
        }
        let iters = cfg.optim.iters_per_epoch as f64;
        let (gap, fisher) = heldout_metrics(&mut model, &data.test, cfg.mgs.beta)?;
        final_gap = gap;
        final_fisher = fisher;
        metrics.row(
            epoch + 1,
            lr,
            sum_objective / iters,
            [
                sum_terms[0] / iters,
                sum_terms[1] / iters,
                sum_terms[2] / iters,
                sum_terms[3] / iters,
                sum_terms[4] / iters,
            ],
            gap,
            fisher,
            all_converged,
        );
        last_good = (model.store.clone(), model.norm.clone());
        epochs_run = epoch + 1;
        if !model.store.all_finite() {
            metrics.flush()?;
            break 'training;
        }
    }
    if cfg.optim.epochs == 0 {
        let (gap, fisher) = heldout_metrics(&mut model, &data.test, cfg.mgs.beta)?;
        final_gap = gap;
        final_fisher = fisher;
    }
    metrics.flush()?;
    model.save(&checkpoint_path, &meta)?;
    Ok((
        model,
        TrainOutcome {
            config_hash: hash,
            metrics_path,
            checkpoint_path,
            final_gap,
            final_fisher,
            epochs_run,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.synth.num_identities = 8;
        cfg.data.synth.train_identities = 6;
        cfg.data.synth.samples_per_identity_per_modality = 6;
        cfg.batch.identities = 3;
        cfg.batch.visible_per_identity = 2;
        cfg.batch.thermal_per_identity = 2;
        cfg.optim.epochs = 2;
        cfg.optim.iters_per_epoch = 2;
        cfg
    }

    #[test]
    fn train_writes_metrics_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_config();
        let (_, outcome) = train(&cfg, dir.path()).unwrap();
        let text = fs::read_to_string(&outcome.metrics_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# config_hash="));
        assert_eq!(lines[1], METRICS_COLUMNS);
        // header comment + columns + epoch0 + 2 epochs
        assert_eq!(lines.len(), 5);
        assert!(outcome.checkpoint_path.exists());
        assert!(outcome.final_gap.is_finite());
    }

    #[test]
    fn zero_epochs_emits_initial_metrics_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_config();
        cfg.optim.epochs = 0;
        let (_, outcome) = train(&cfg, dir.path()).unwrap();
        let text = fs::read_to_string(&outcome.metrics_path).unwrap();
        let rows: Vec<&str> = text.lines().skip(2).collect();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].starts_with("0,"));
    }

    #[test]
    fn identical_seeds_identical_metrics() {
        let cfg = quick_config();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let (_, o1) = train(&cfg, d1.path()).unwrap();
        let (_, o2) = train(&cfg, d2.path()).unwrap();
        let b1 = fs::read(&o1.metrics_path).unwrap();
        let b2 = fs::read(&o2.metrics_path).unwrap();
        assert_eq!(b1, b2);
        // Checkpoints are byte-identical too.
        assert_eq!(
            fs::read(&o1.checkpoint_path).unwrap(),
            fs::read(&o2.checkpoint_path).unwrap()
        );
    }

    #[test]
    fn different_seed_changes_metrics() {
        let mut cfg = quick_config();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let (_, o1) = train(&cfg, d1.path()).unwrap();
        cfg.run.seed = 8888;
        let (_, o2) = train(&cfg, d2.path()).unwrap();
        assert_ne!(fs::read(&o1.metrics_path).unwrap(), fs::read(&o2.metrics_path).unwrap());
    }

    #[test]
    fn evaluate_model_reports_both_directions() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_config();
        let (mut model, _) = train(&cfg, dir.path()).unwrap();
        let data = load_data(&cfg).unwrap();
        let (v2t, t2v) = evaluate_model(&mut model, &data.test, cfg.mgs.beta).unwrap();
        assert_eq!(v2t.direction, Direction::VisibleToThermal);
        assert_eq!(t2v.direction, Direction::ThermalToVisible);
        assert!(v2t.rank_1 >= 0.0 && v2t.rank_1 <= 1.0);
        assert!(t2v.rank_10 >= t2v.rank_1);
    }
}

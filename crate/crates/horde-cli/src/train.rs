//! The training command: seeded end-to-end loop with metrics logging,
//! periodic evaluation, checkpointing, and divergence abort.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use horde_core::data::{BatchSampler, BatchSpec, Dataset};
use horde_core::eval::{pool_feature_maps, recall_at_k};
use horde_core::model::{
    extract_features, order1_head, save_checkpoint, TrainModel,
};
use horde_core::optim::Adam;
use horde_core::scalar::derive_seed;
use horde_core::tensor::Tensor;

use crate::config::RunConfig;
use crate::metrics::{MetricsRecord, MetricsWriter};

pub const CHECKPOINT_SUBDIR: &str = "checkpoint";
pub const METRICS_FILE: &str = "metrics.jsonl";
/// Images per inference chunk during evaluation.
pub const EVAL_CHUNK: usize = 100;

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub steps_run: u64,
    pub final_loss: Option<f64>,
}

/// Recall@K of the order-1 embedding on a dataset split.
pub fn evaluate_split(
    model_params: &std::collections::HashMap<String, Tensor<f64>>,
    backbone: &horde_core::model::BackboneConfig,
    split: &Dataset<f64>,
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    let features = extract_features(backbone, model_params, split.images()?, EVAL_CHUNK)?;
    let head = order1_head(model_params)?;
    let pooled = pool_feature_maps(&features);
    let e = head.output_dim();
    let mut rows = Vec::with_capacity(pooled.len() * e);
    for p in &pooled {
        rows.extend_from_slice(&head.apply(p));
    }
    let emb = Tensor::new(vec![pooled.len(), e], rows).expect("embedding shape");
    let result = recall_at_k(&emb, &emb, &split.labels, &split.labels, ks, true)?;
    Ok(result.recall_at)
}

fn params_of(model: &TrainModel<f64>) -> Vec<(String, Tensor<f64>)> {
    model
        .graph
        .param_values()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect()
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let (train_ds, test_ds) = cfg.load_splits()?;
    let spec = BatchSpec {
        classes_per_batch: cfg.batch.classes_per_batch,
        images_per_class: cfg.batch.images_per_class,
        seed: derive_seed(cfg.seed, "sampler"),
    };
    let labels = spec.canonical_labels();
    let mut model = horde_core::model::build_train_graph::<f64>(&cfg.model, &labels, cfg.seed)
        .context("building training graph")?;
    let mut sampler = BatchSampler::new(&train_ds, spec)?;
    let mut adam = Adam::new(cfg.optimizer);

    std::fs::create_dir_all(&cfg.out_dir)?;
    let ckpt_dir = cfg.out_dir.join(CHECKPOINT_SUBDIR);
    let metrics_path = cfg.out_dir.join(METRICS_FILE);
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    let echo = cfg.echo();

    // step-0 checkpoint: equals initialization
    save_checkpoint(&ckpt_dir, &echo, 0, cfg.seed, &params_of(&model))?;

    let started = Instant::now();
    let mut last_ckpt_step = 0u64;
    let mut final_loss = None;
    for step in 1..=cfg.steps {
        let (images, _batch_labels) = sampler.next_batch()?;
        let out = model.graph.forward(&[("images", &images)])?;
        let total = out["loss_total"].item();
        let dml = out["loss_dml"].item();
        let orders: Vec<f64> = model
            .order_loss_names
            .iter()
            .map(|n| out[n].item())
            .collect();
        if !total.is_finite() {
            metrics.flush()?;
            bail!(
                "loss diverged (non-finite) at step {step}; \
                 last good checkpoint is step {last_ckpt_step} in {}",
                ckpt_dir.display()
            );
        }
        model.graph.zero_grads();
        model.graph.backward_scalar("loss_total")?;
        adam.step(&mut model.graph);
        final_loss = Some(total);

        let eval_due = cfg.eval_every > 0 && step % cfg.eval_every == 0;
        let last = step == cfg.steps;
        if eval_due || last {
            let params: std::collections::HashMap<String, Tensor<f64>> = model
                .graph
                .param_values()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect();
            let recall = evaluate_split(&params, &cfg.model.backbone, &test_ds, &cfg.eval_ks)?;
            metrics.append(&MetricsRecord {
                step,
                wall_time: started.elapsed().as_secs_f64(),
                event: "eval".into(),
                loss_total: total,
                loss_dml: dml,
                loss_orders: orders,
                recall_at: Some(recall),
            })?;
            save_checkpoint(&ckpt_dir, &echo, step, cfg.seed, &params_of(&model))?;
            last_ckpt_step = step;
        } else {
            metrics.append(&MetricsRecord {
                step,
                wall_time: started.elapsed().as_secs_f64(),
                event: "step".into(),
                loss_total: total,
                loss_dml: dml,
                loss_orders: orders,
                recall_at: None,
            })?;
        }
    }
    metrics.flush()?;
    Ok(TrainOutcome {
        checkpoint_dir: ckpt_dir,
        metrics_path,
        steps_run: cfg.steps,
        final_loss,
    })
}

//! Rough per-phase timing of one training step at acceptance scale.
use horde_core::data::{synth_digits, BatchSampler, BatchSpec};
use horde_core::losses::LossConfig;
use horde_core::model::{build_train_graph, ModelConfig, StackMode};
use horde_core::optim::{Adam, AdamConfig};
use std::time::Instant;

fn main() {
    let ds = synth_digits::<f64>(100, 5, "train");
    let spec = BatchSpec { classes_per_batch: 5, images_per_class: 8, seed: 1 };
    let labels = spec.canonical_labels();
    let cfg = ModelConfig {
        backbone: Default::default(),
        horde: true,
        orders: 4,
        sketch_dim: 256,
        embed_dim: 32,
        stack_mode: StackMode::TrainableCascaded,
        order_heads: None,
        loss: LossConfig::contrastive(0.5),
    };
    let mut model = build_train_graph::<f64>(&cfg, &labels, 3).unwrap();
    let mut sampler = BatchSampler::new(&ds, spec).unwrap();
    let mut adam = Adam::new(AdamConfig::with_lr(1e-5));
    let (images, _) = sampler.next_batch().unwrap();
    for _ in 0..3 {
        model.graph.forward(&[("images", &images)]).unwrap();
        model.graph.zero_grads();
        model.graph.backward_scalar("loss_total").unwrap();
        adam.step(&mut model.graph);
    }
    let reps = 20;
    let t0 = Instant::now();
    for _ in 0..reps {
        model.graph.forward(&[("images", &images)]).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64;
    let t1 = Instant::now();
    for _ in 0..reps {
        model.graph.forward(&[("images", &images)]).unwrap();
        model.graph.zero_grads();
        model.graph.backward_scalar("loss_total").unwrap();
    }
    let fwd_bwd = t1.elapsed().as_secs_f64() / reps as f64;
    let t2 = Instant::now();
    for _ in 0..reps {
        adam.step(&mut model.graph);
    }
    let opt = t2.elapsed().as_secs_f64() / reps as f64;
    println!("forward: {:.1} ms, forward+backward: {:.1} ms, adam: {:.1} ms", fwd * 1e3, fwd_bwd * 1e3, opt * 1e3);
}

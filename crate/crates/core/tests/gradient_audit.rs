//! Finite differences against backprop through the full generator objective.

use std::sync::Arc;

use cosimgen_core::encoders::HashedBagOfWords;
use cosimgen_core::losses::{self, permute_negatives};
use cosimgen_core::model::CoSimGen;
use cosimgen_core::synthetic::shapes_dataset;
use cosimgen_core::trainer::{generator_objective, StepInputs, TrainConfig};
use cosimgen_core::{Graph, ParamId, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> TrainConfig {
    let mut c = TrainConfig::desk(4);
    c.model.resolution = 8;
    c.model.base_width = 4;
    c.model.multipliers = vec![1, 2];
    c.model.d_model = 8;
    c.model.d_feat = 6;
    c.model.d_base = 8;
    c.model.num_steps = 10;
    c.model.beta_start = 0.01;
    c.model.beta_end = 0.2;
    c.model.disc_widths = vec![4, 4];
    c
}

fn setup() -> (CoSimGen, StepInputs, f64) {
    let c = tiny();
    let model = CoSimGen::new(c.model.clone(), Arc::new(HashedBagOfWords::default()), 3).unwrap();
    let data = shapes_dataset(3, 8, 4).unwrap();
    let batch = data.batch(&[0, 1, 2]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let steps = vec![2, 5, 8];
    let eps = Tensor::randn(batch.x0.shape(), &mut rng);
    let x_t = model.schedule.q_sample_batch(&batch.x0, &steps, &eps).unwrap();
    let negatives = Some(permute_negatives(&batch.conditions, &mut rng).unwrap());
    let inputs = StepInputs { x_t, eps, steps, conditions: batch.conditions, prompts: batch.prompts, negatives };
    (model, inputs, c.beta)
}

fn objective(model: &CoSimGen, inputs: &StepInputs, beta: f64) -> f64 {
    let mut g = Graph::new();
    let o = generator_objective(&mut g, model, inputs, beta).unwrap();
    g.value(o.total).item()
}

/// The `count` entries with the largest analytic gradient among parameters matching `select`.
fn strongest(model: &CoSimGen, grads: &cosimgen_core::Gradients, select: &dyn Fn(&str) -> bool, count: usize) -> Vec<(ParamId, usize, f64)> {
    let mut all = Vec::new();
    for id in model.generator_ids() {
        if !select(model.store.name(id)) {
            continue;
        }
        if let Some(gr) = grads.param(id) {
            all.extend(gr.data().iter().enumerate().map(|(k, &v)| (id, k, v)));
        }
    }
    all.sort_by(|a, b| b.2.abs().total_cmp(&a.2.abs()));
    all.truncate(count);
    all
}

#[test]
fn analytic_gradients_match_central_differences() {
    let (mut model, inputs, beta) = setup();
    let mut g = Graph::new();
    let o = generator_objective(&mut g, &model, &inputs, beta).unwrap();
    assert!(o.l_trip.is_some() && o.l_adv.is_some());
    assert!(o.report.l_trip > 0.0, "triplet hinge inactive: {:?}", o.report);
    let grads = g.backward(o.total).unwrap();
    drop(g);

    let groups: [(&str, &dyn Fn(&str) -> bool); 5] = [
        ("W_c", &|n| n == "class.w_c"),
        ("text projection", &|n| n.starts_with("text.proj")),
        ("spatial projectors", &|n| n.starts_with("unet.spatial")),
        ("spectral projectors", &|n| n.contains(".spectral.")),
        ("U-Net conv", &|n| n.starts_with("unet.") && n.contains("conv")),
    ];
    let h = 1e-5;
    for (group, select) in groups {
        let picks = strongest(&model, &grads, select, 4);
        assert!(picks.len() >= 3, "{group}: only {} entries", picks.len());
        for (id, k, analytic) in picks {
            assert!(analytic != 0.0, "{group}: zero gradient");
            let orig = model.store.get(id).data()[k];
            model.store.value_mut(id).data_mut()[k] = orig + h;
            let up = objective(&model, &inputs, beta);
            model.store.value_mut(id).data_mut()[k] = orig - h;
            let down = objective(&model, &inputs, beta);
            model.store.value_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
            assert!(rel < 1e-3, "{group} {}[{k}]: analytic {analytic} numeric {numeric}", model.store.name(id));
        }
    }
}

#[test]
fn adversarial_term_leaves_discriminator_untouched() {
    let (model, inputs, _) = setup();
    let mut g = Graph::new();
    let o = generator_objective(&mut g, &model, &inputs, 0.1).unwrap();
    let adv = o.l_adv.unwrap();
    let grads = g.backward(adv).unwrap();
    for id in model.discriminator_ids() {
        assert!(grads.param(id).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)), "{}", model.store.name(id));
    }
    assert!(model.generator_ids().iter().any(|&id| grads.param(id).is_some_and(|t| t.data().iter().any(|&v| v != 0.0))));
}

#[test]
fn discriminator_loss_leaves_generator_untouched() {
    let (model, inputs, _) = setup();
    let mut g = Graph::new();
    let o = generator_objective(&mut g, &model, &inputs, 0.1).unwrap();
    let real = g.input(Tensor::zeros(g.shape(o.x0_hat)));
    let l = losses::discriminator_loss(&mut g, &model.disc, &model.store, real, o.x0_hat).unwrap();
    let grads = g.backward(l).unwrap();
    for id in model.generator_ids() {
        assert!(grads.param(id).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)), "{}", model.store.name(id));
    }
    assert!(model.discriminator_ids().iter().any(|&id| grads.param(id).is_some_and(|t| t.data().iter().any(|&v| v != 0.0))));
}

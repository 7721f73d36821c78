use dpgdiff::checkpoint::{load_checkpoint, save_checkpoint};
use dpgdiff::dataset::{filter_and_split, DatasetSplit, FilterConfig};
use dpgdiff::diffusion::DiffusionSchedule;
use dpgdiff::network::{ModelConfig, Variant};
use dpgdiff::synthetic::{generate_synthetic, SyntheticConfig};
use dpgdiff::trainer::{batch_gradients, build_examples, fit, fit_with, ExampleMode, FitOptions, TrainConfig, TrainState};

fn small_split(users: usize, seed: u64) -> DatasetSplit {
    let syn = SyntheticConfig {
        n_users: users,
        n_items_x: 20,
        n_items_y: 20,
        n_shared_interests: 2,
        n_specific_interests: 2,
        rng_seed: seed,
        ..SyntheticConfig::default()
    };
    let (events, _) = generate_synthetic(&syn).unwrap();
    let filter = FilterConfig {
        min_user_interactions: 1,
        min_per_domain: 1,
        ..FilterConfig::default()
    };
    filter_and_split(&events, &filter).unwrap()
}

fn model_cfg(split: &DatasetSplit, variant: Variant) -> ModelConfig {
    ModelConfig {
        d: 16,
        n_heads: 2,
        diffusion_steps: 20,
        variant,
        ..ModelConfig::default()
    }
    .with_tables(split.table_sizes())
}

#[test]
fn loss_halves_within_two_hundred_steps() {
    let split = small_split(8, 1);
    let cfg = model_cfg(&split, Variant::Diff);
    let train = TrainConfig {
        epochs: 200,
        batch_size: 8,
        lr: 3e-3,
        warmup_epochs: 0,
        example_mode: ExampleMode::LastOnly,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&cfg, &train).unwrap();
    let log = fit(&split, &mut state, &train).unwrap();
    assert_eq!(log.steps.len(), 200);
    let first = log.steps[0].losses.l_total;
    let last = log.steps[199].losses.l_total;
    assert!(last < 0.5 * first, "loss {first} -> {last}");
    assert!(state.model.params.is_finite());
}

#[test]
fn warm_up_leaves_the_step_embedding_untouched() {
    let split = small_split(6, 2);
    let cfg = model_cfg(&split, Variant::Full);
    let train = TrainConfig::default();
    let state = TrainState::new(&cfg, &train).unwrap();
    let sched = DiffusionSchedule::build(cfg.schedule()).unwrap();
    let batch = build_examples(&split.train, ExampleMode::AllPrefixes)[..6].to_vec();
    let step = state.model.layout.step_emb;

    let (losses, grads) = batch_gradients(&state.model, &sched, &batch, &train, true, 5).unwrap();
    assert_eq!((losses.l_diff, losses.l_tri_cl), (0.0, 0.0));
    assert_eq!(losses.l_total, losses.l_rec);
    assert!(grads[step].data.iter().all(|&g| g == 0.0));

    let (losses, grads) = batch_gradients(&state.model, &sched, &batch, &train, false, 5).unwrap();
    assert!(losses.l_diff > 0.0 && losses.l_tri_cl > 0.0);
    assert!(grads[step].data.iter().any(|&g| g != 0.0));
    for (row, _) in state.model.frozen_rows().iter().map(|&(p, r)| (grads[p].row(r), p)) {
        assert!(row.iter().all(|&g| g == 0.0));
    }
}

#[test]
fn resuming_from_a_checkpoint_is_step_exact() {
    let split = small_split(10, 3);
    let cfg = model_cfg(&split, Variant::Full);
    let train = TrainConfig {
        epochs: 3,
        batch_size: 16,
        warmup_epochs: 1,
        eval_every: 1,
        eval_negatives: 5,
        eval_steps: Some(4),
        ..TrainConfig::default()
    };
    let mut straight = TrainState::new(&cfg, &train).unwrap();
    let full_log = fit(&split, &mut straight, &train).unwrap();

    let mut first = TrainState::new(&cfg, &train).unwrap();
    let opts = FitOptions { max_steps: Some(5) };
    let head = fit_with(&split, &mut first, &train, &opts, |_, _| Ok(())).unwrap();
    assert_eq!(first.global_step, 5);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &first, &train).unwrap();
    let (mut resumed, train_back) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(train_back, train);
    let tail = fit(&split, &mut resumed, &train_back).unwrap();

    let joined: Vec<_> = head.steps.iter().chain(&tail.steps).collect();
    assert_eq!(joined.len(), full_log.steps.len());
    for (a, b) in joined.iter().zip(&full_log.steps) {
        assert_eq!(*a, b);
    }
    assert_eq!(resumed, straight);
}

mod common;

use bmc_core::baselines::{multitask_bound, run_baseline, BaselineConfig, BaselineMethod};
use bmc_core::protocol::run_full_stream;
use bmc_core::streams::{generate_stream, StreamKind, StreamParams, TaskStream};
use bmc_core::BmcConfig;
use common::toy_training;

fn two_tasks(seed: u64) -> TaskStream {
    let p = StreamParams {
        n_tasks: 2,
        classes_per_task: 2,
        dim: 8,
        train_per_task: 200,
        val_per_task: 100,
        separation: 3.0,
        noise: 1.0,
    };
    generate_stream(StreamKind::SplitSynthetic, &p, seed).unwrap()
}

#[test]
fn sgd_forgets_the_first_task() {
    let mut t = toy_training();
    t.train_epochs = 5;
    for seed in 0..3 {
        let r = run_baseline(&two_tasks(seed), BaselineMethod::Sgd, &BaselineConfig::default(), &t, seed).unwrap();
        let h = r.history.rows();
        let chance = 1.0 / 4.0;
        assert!(h[0][0] > 0.8, "seed {seed}: task 1 never learned ({})", h[0][0]);
        assert!(h[1][0] < 2.0 * chance, "seed {seed}: {}", h[1][0]);
    }
}

#[test]
fn replay_with_unlimited_memory_beats_sgd() {
    let mut t = toy_training();
    t.train_epochs = 5;
    let cfg = BaselineConfig {
        memory_capacity: 10_000,
        ..BaselineConfig::default()
    };
    for seed in 0..3 {
        let s = two_tasks(seed);
        let sgd = run_baseline(&s, BaselineMethod::Sgd, &cfg, &t, seed).unwrap();
        let er = run_baseline(&s, BaselineMethod::Er, &cfg, &t, seed).unwrap();
        assert!(er.mean_accuracy() >= sgd.mean_accuracy(), "seed {seed}: {} < {}", er.mean_accuracy(), sgd.mean_accuracy());
    }
}

#[test]
fn multitask_bound_dominates_continual_methods() {
    let mut t = toy_training();
    t.train_epochs = 3;
    t.rehearsal_epochs = 3;
    let p = StreamParams {
        n_tasks: 4,
        classes_per_task: 2,
        dim: 8,
        train_per_task: 100,
        val_per_task: 50,
        separation: 3.0,
        noise: 1.0,
    };
    let bmc = BmcConfig {
        experts: 2,
        buffer_capacity: 50,
        memory_capacity: 200,
        serial: true,
        ..BmcConfig::default()
    };
    let cfg = BaselineConfig {
        memory_capacity: 200,
        ..BaselineConfig::default()
    };
    for seed in 0..3 {
        let s = generate_stream(StreamKind::SplitSynthetic, &p, seed).unwrap();
        let bound = multitask_bound(&s, &t, seed).unwrap().mean;
        for m in [BaselineMethod::Sgd, BaselineMethod::Er, BaselineMethod::Oewc] {
            let acc = run_baseline(&s, m, &cfg, &t, seed).unwrap().mean_accuracy();
            assert!(bound >= acc, "seed {seed} {m:?}: {acc} > {bound}");
        }
        let acc = run_full_stream(&s, &bmc, &t, seed).unwrap().mean_accuracy();
        assert!(bound >= acc, "seed {seed} bmc: {acc} > {bound}");
    }
}

#[test]
fn all_methods_share_the_evaluation_path() {
    let s = two_tasks(9);
    let t = toy_training();
    for m in [BaselineMethod::Sgd, BaselineMethod::Er, BaselineMethod::Oewc] {
        let r = run_baseline(&s, m, &BaselineConfig::default(), &t, 1).unwrap();
        assert_eq!(r.history.rows().len(), 2);
        assert_eq!(r.history.rows()[1].len(), 2);
        let model = r.final_model.as_ref().unwrap();
        let tasks: Vec<_> = s.tasks().iter().collect();
        assert_eq!(&bmc_core::streams::evaluate_cil(model, &tasks).unwrap(), r.history.rows().last().unwrap());
    }
}

use tab2vox::dataset::{generate_synthetic, make_folds, DemandPanel, FoldSplit, SyntheticSpec};
use tab2vox::harness::{clean_panel, fold_panel};
use tab2vox::search_engine::*;
use tab2vox::supernet3d::{GenoEdge, OpKind, SupernetConfig};

fn planted(items: usize) -> (DemandPanel, FoldSplit) {
    let spec = SyntheticSpec {
        items,
        ..Default::default()
    };
    let (raw, _) = generate_synthetic(&spec).unwrap();
    let clean = clean_panel(&raw).unwrap();
    let fold = make_folds(&clean, 3).unwrap().remove(0);
    let (panel, _) = fold_panel(&clean, &fold);
    (panel, fold)
}

fn tiny_config(epochs: usize) -> SearchConfig {
    SearchConfig {
        supernet: SupernetConfig {
            cells: 2,
            nodes: 1,
            width: 4,
            stem_multiplier: 1,
            ..Default::default()
        },
        bilevel: BilevelConfig {
            epochs,
            batch_size: 4,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn logits(state: &SearchState<f64>) -> Vec<f64> {
    state
        .embedding
        .logits
        .iter()
        .chain(&state.arch.normal)
        .chain(&state.arch.reduce)
        .flatten()
        .copied()
        .collect()
}

fn weights(state: &SearchState<f64>) -> Vec<f64> {
    state.network.store.tensors.iter().flat_map(|t| t.data().to_vec()).collect()
}

fn one_step(config: &SearchConfig) -> (SearchState<f64>, SearchState<f64>) {
    let (panel, fold) = planted(20);
    let data = SearchData::<f64>::prepare(&panel, &fold, &config.embedding).unwrap();
    let before = data.initial_state(config).unwrap();
    let mut after = before.clone();
    let (tx, ty) = data.train.all(&after.scaler);
    let (vx, vy) = data.validation.all(&after.scaler);
    search_step(&mut after, &data.space, (&tx, &ty), (&vx, &vy), &config.bilevel).unwrap();
    (before, after)
}

#[test]
fn zero_learning_rates_only_advance_counters() {
    let mut config = tiny_config(1);
    config.bilevel.weight_lr = 0.0;
    config.bilevel.arch_lr = 0.0;
    let (before, after) = one_step(&config);
    assert_eq!(weights(&before), weights(&after));
    assert_eq!(logits(&before), logits(&after));
    assert_eq!(after.steps, before.steps + 1);
}

#[test]
fn update_rules_are_isolated() {
    let mut config = tiny_config(1);
    config.bilevel.arch_lr = 0.0;
    let (before, after) = one_step(&config);
    assert_ne!(weights(&before), weights(&after));
    assert_eq!(logits(&before), logits(&after));

    let mut config = tiny_config(1);
    config.bilevel.weight_lr = 0.0;
    let (before, after) = one_step(&config);
    assert_eq!(weights(&before), weights(&after));
    assert_ne!(logits(&before), logits(&after));
}

#[test]
fn logit_update_follows_finite_difference_slope() {
    let mut config = tiny_config(1);
    config.bilevel.weight_lr = 0.0;
    config.bilevel.arch_weight_decay = 0.0;
    let (panel, fold) = planted(20);
    let data = SearchData::<f64>::prepare(&panel, &fold, &config.embedding).unwrap();
    let state = data.initial_state(&config).unwrap();
    let (tx, ty) = data.train.all(&state.scaler);
    let (vx, vy) = data.validation.all(&state.scaler);
    let mut stepped = state.clone();
    search_step(&mut stepped, &data.space, (&tx, &ty), (&vx, &vy), &config.bilevel).unwrap();
    let moved: Vec<f64> = logits(&stepped).iter().zip(logits(&state)).map(|(a, b)| a - b).collect();

    let eps = 1e-4;
    let mut checked = 0;
    let n_embed: usize = state.embedding.logits.iter().map(Vec::len).sum();
    let n_normal: usize = state.arch.normal.iter().map(Vec::len).sum();
    for (k, delta) in moved.iter().enumerate() {
        let shifted = |h: f64| {
            let mut s = state.clone();
            let flat = s
                .embedding
                .logits
                .iter_mut()
                .chain(s.arch.normal.iter_mut())
                .chain(s.arch.reduce.iter_mut())
                .flat_map(|v| v.iter_mut())
                .nth(k)
                .unwrap();
            *flat += h;
            evaluate_search_loss(&s, &data.space, &vx, &vy).unwrap()
        };
        let slope = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
        if slope.abs() > 1e-6 {
            assert_eq!(
                delta.signum(),
                -slope.signum(),
                "logit {k} (embedding block ends at {n_embed}, normal at {})",
                n_embed + n_normal
            );
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn zero_epochs_derive_index_zero_everywhere() {
    let mut config = tiny_config(0);
    config.bilevel.alpha_init_noise = 0.0;
    config.supernet.nodes = 2;
    let (panel, fold) = planted(20);
    let out = run_search::<f64>(&panel, &fold, &config, None).unwrap();
    assert!(out.history.is_empty());
    let g = &out.genotype;
    g.validate().unwrap();
    let first_real = config.supernet.ops.iter().copied().find(|&k| k != OpKind::None).unwrap();
    let pick = |from| GenoEdge { from, op: first_real };
    let expect = vec![[pick(0), pick(1)], [pick(0), pick(1)]];
    assert_eq!(g.normal, expect);
    assert_eq!(g.reduce, expect);
    let emb = g.embedding.as_ref().unwrap();
    for (order, c) in emb.orders.iter().zip(&emb.clusterings) {
        assert_eq!(order, &(0..c.count()).collect::<Vec<_>>());
    }
}

#[test]
fn same_seed_same_search() {
    let config = tiny_config(2);
    let (panel, fold) = planted(20);
    let a = run_search::<f64>(&panel, &fold, &config, None).unwrap();
    let b = run_search::<f64>(&panel, &fold, &config, None).unwrap();
    assert_eq!(a.genotype, b.genotype);
    assert_eq!(a.history, b.history);
    assert_eq!(a.history.len(), 2);
    a.genotype.validate().unwrap();
    assert!(a.state.is_finite());
}

#[test]
fn planted_panel_validation_loss_does_not_rise() {
    let mut config = SearchConfig::default();
    config.bilevel.epochs = 10;
    let (panel, fold) = planted(10);
    let out = run_search::<f64>(&panel, &fold, &config, None).unwrap();
    let last = out.history.last().unwrap().val_loss;
    assert!(last <= out.initial_val_loss, "{last} > {}", out.initial_val_loss);
}

#[test]
fn checkpoint_replay_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("checkpoint.json");
    let (panel, fold) = planted(20);
    let full = run_search::<f64>(&panel, &fold, &tiny_config(4), None).unwrap();

    let mut first = tiny_config(2);
    first.bilevel.checkpoint_every = 1;
    run_search::<f64>(&panel, &fold, &first, Some(&ckpt)).unwrap();
    let mut state: SearchState<f64> = load_checkpoint(&ckpt).unwrap();
    assert_eq!(state.epoch, 2);
    let config = tiny_config(4);
    let data = SearchData::<f64>::prepare(&panel, &fold, &config.embedding).unwrap();
    continue_search(&mut state, &data, &config, None).unwrap();
    assert_eq!(state.history, full.history);
    assert_eq!(derive(&state, &data.space).unwrap(), full.genotype);
}

#[test]
fn retraining_covers_test_items_and_repeats() {
    let config = tiny_config(1);
    let (panel, fold) = planted(20);
    let g = run_search::<f64>(&panel, &fold, &config, None).unwrap().genotype;
    let ids: Vec<String> = fold.test.iter().map(|&i| panel.items()[i].clone()).collect();
    for epochs in [0, 2] {
        let bilevel = BilevelConfig {
            epochs,
            batch_size: 4,
            ..Default::default()
        };
        let (fa, ra) = train_derived::<f64>(&g, &panel, &fold, &config.supernet, &bilevel).unwrap();
        let (_, rb) = train_derived::<f64>(&g, &panel, &fold, &config.supernet, &bilevel).unwrap();
        assert_eq!(ra.items, ids);
        assert_eq!(ra.model, TAB2VOX_MODEL_ID);
        assert_eq!(ra.forecast, rb.forecast);
        assert_eq!(fa.history.len(), epochs);
        assert!(ra.forecast.iter().all(|&v| v >= 0.0 && v.is_finite()));
        ra.validate().unwrap();
    }
}

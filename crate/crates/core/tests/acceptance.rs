//! Acceptance suite. Each criterion prints one PASS/FAIL line; the test fails
//! if any criterion does.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tab2vox::dataset::{generate_synthetic, make_folds, SyntheticSpec};
use tab2vox::embedding::*;
use tab2vox::evaluation::*;
use tab2vox::harness::{self, clean_panel, fold_panel, RunConfig};
use tab2vox::nn::{ConvSpec, Tape, Tensor};
use tab2vox::scalar::softmax;
use tab2vox::search_engine::*;
use tab2vox::selector::*;
use tab2vox::supernet3d::*;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn close(got: f64, want: f64, tol: f64, what: &str) -> Result<(), String> {
    check((got - want).abs() <= tol, format!("{what}: got {got}, want {want} ± {tol}"))
}

fn ramp(shape: &[usize], phase: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|i| (i as f64 * 0.61 + phase).sin()).collect()).unwrap()
}

fn fixture() -> SelectionProblem {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/four_group_selection.json");
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn random_problem(rng: &mut ChaCha8Rng) -> SelectionProblem {
    let ni = rng.random_range(1..=5);
    let nj = rng.random_range(1..=6);
    let matrix = |rng: &mut ChaCha8Rng, hi: f64| -> Vec<Vec<f64>> {
        (0..ni)
            .map(|_| (0..nj).map(|_| (rng.random::<f64>() * hi * 100.0).round() / 100.0).collect())
            .collect()
    };
    let accuracy = matrix(rng, 1.0);
    let std = matrix(rng, 0.2);
    SelectionProblem {
        groups: (0..ni)
            .map(|i| GroupEntry {
                id: format!("g{i}"),
                size: rng.random_range(1..200),
            })
            .collect(),
        models: (0..nj)
            .map(|j| ModelEntry {
                id: format!("m{j}"),
                runtime_seconds: rng.random_range(0.0..5.0),
            })
            .collect(),
        accuracy,
        std,
        budget_seconds: rng.random_bool(0.7).then(|| rng.random_range(0.0..5.0)),
        w1: rng.random_range(0.0..1.0),
        w2: rng.random_range(0.0..1.0),
    }
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn four_group_selection() -> Outcome {
    let p = fixture();
    let start = Instant::now();
    let r = solve_selection(&p).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    check(
        r.models == ["tab2vox", "xgboost", "dt", "lasso"],
        format!("picked {:?}", r.models),
    )?;
    close(r.objective, 0.6555, 0.0015, "objective")?;
    check(secs < 1.0, format!("took {secs}s"))?;
    Ok(format!("{:?} objective {:.6} in {:.3}ms", r.models, r.objective, secs * 1e3))
}

fn unbounded_budget_is_argmax() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for k in 0..100 {
        let mut p = random_problem(&mut rng);
        p.budget_seconds = None;
        let r = solve_selection(&p).map_err(|e| e.to_string())?;
        let want: Vec<usize> = p.accuracy.iter().map(|row| argmax_lowest(row)).collect();
        check(r.assignment == want, format!("instance {k}: {:?} vs {want:?}", r.assignment))?;
    }
    Ok("100 instances".into())
}

fn candidate_counts() -> Outcome {
    let c = [
        LevelClustering::new(Axis::Feature, vec![0, 1, 2, 3, 4, 0, 1]).unwrap(),
        LevelClustering::new(Axis::Base, vec![0, 1, 2, 2]).unwrap(),
        LevelClustering::new(Axis::Equipment, vec![0, 1, 1]).unwrap(),
    ];
    let joint = enumerate_candidates(&c, MappingMode::Joint, 2000).map_err(|e| e.to_string())?;
    let fact = enumerate_candidates(&c, MappingMode::Factorized, 2000).map_err(|e| e.to_string())?;
    check(joint.joint_size() == 1440, format!("joint size {}", joint.joint_size()))?;
    check(fact.axis_sizes() == [120, 6, 2], format!("axis sizes {:?}", fact.axis_sizes()))?;
    check(fact.param_count() == 128, format!("factorized parameters {}", fact.param_count()))?;
    Ok("joint 1440, factorized 128".into())
}

fn metric_suite() -> Outcome {
    let tol = 1e-9;
    let m = |r: tab2vox::Result<f64>| r.map_err(|e| e.to_string());
    close(m(rmse(&[1.0, 2.0], &[1.0, 2.0]))?, 0.0, tol, "rmse A=F")?;
    close(m(rmse(&[0.0, 0.0], &[3.0, 4.0]))?, 12.5f64.sqrt(), tol, "rmse (3,4)")?;
    close(m(rmse(&[1.0], &[4.0]))?, 3.0, tol, "rmse single")?;
    close(m(mae(&[1.0, 2.0], &[1.0, 2.0]))?, 0.0, tol, "mae A=F")?;
    close(m(mae(&[1.0, 1.0], &[0.0, 2.0]))?, 1.0, tol, "mae (1,-1)")?;
    close(m(mae(&[0.0, 0.0], &[3.0, 4.0]))?, 3.5, tol, "mae (3,4)")?;
    close(m(minmax_accuracy(&[5.0, 5.0], &[5.0, 5.0]))?, 1.0, tol, "minmax equal")?;
    close(m(minmax_accuracy(&[2.0, 8.0], &[4.0, 4.0]))?, 0.5, tol, "minmax (2,8)")?;
    close(m(minmax_accuracy(&[0.0], &[0.0]))?, 1.0, tol, "minmax zeros")?;
    close(m(arithmetic_mean_forecast(&[2.0, 4.0, 6.0]))?, 4.0, tol, "arithmetic mean")?;
    close(m(ses_forecast(&[3.0, 9.0, 5.0], 1.0))?, 5.0, tol, "ses alpha 1")?;
    close(m(wma_forecast(&[2.0, 4.0, 6.0], &WMA_WEIGHTS))?, 4.6, tol, "wma")?;

    let accs = [0.6, 0.62, 0.64, 0.66, 0.63];
    let results: Vec<ForecastResult> = accs
        .iter()
        .enumerate()
        .map(|(k, &a)| ForecastResult {
            model: "m".into(),
            fold: k,
            items: vec!["i".into()],
            actual: vec![1.0],
            forecast: vec![a],
            runtime_seconds: 0.0,
        })
        .collect();
    let report = compare_models(&results).map_err(|e| e.to_string())?;
    let s = report.best_model();
    let var = accs.iter().map(|a| (a - 0.63f64).powi(2)).sum::<f64>() / 5.0;
    close(s.minmax_mean, 0.63, tol, "fold mean")?;
    close(s.minmax_std, var.sqrt(), tol, "fold std")?;
    let same: Vec<ForecastResult> = (0..5)
        .map(|k| ForecastResult {
            fold: k,
            ..results[0].clone()
        })
        .collect();
    let flat = compare_models(&same).map_err(|e| e.to_string())?;
    let f = flat.best_model();
    check(f.minmax_std == 0.0 && f.rmse_std == 0.0 && f.mae_std == 0.0, "identical folds give nonzero std")?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let n = rng.random_range(1..20);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..100.0)).collect();
        let f: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..100.0)).collect();
        let (r, e) = (m(rmse(&a, &f))?, m(mae(&a, &f))?);
        check(r >= e - 1e-12, format!("rmse {r} < mae {e}"))?;
        let base = m(minmax_accuracy(&a, &f))?;
        for lambda in [0.5, 3.0] {
            let sa: Vec<f64> = a.iter().map(|v| v * lambda).collect();
            let sf: Vec<f64> = f.iter().map(|v| v * lambda).collect();
            close(m(minmax_accuracy(&sa, &sf))?, base, 1e-12, "minmax scaling")?;
        }
    }
    Ok("examples, 1000 random vectors, scale invariance".into())
}

fn embedding_panel() -> tab2vox::dataset::DemandPanel {
    let spec = SyntheticSpec {
        items: 3,
        bases: 3,
        equipment: 2,
        years: 2,
        features: 4,
        seed: 9,
        ..Default::default()
    };
    generate_synthetic(&spec).unwrap().0
}

fn embedding_suite() -> Outcome {
    let panel = embedding_panel();
    let clusterings = [
        LevelClustering::new(Axis::Feature, vec![0, 0, 1, 2]).unwrap(),
        LevelClustering::new(Axis::Base, vec![0, 1, 1]).unwrap(),
        LevelClustering::new(Axis::Equipment, vec![0, 1]).unwrap(),
    ];
    let e = |r: tab2vox::Result<Tensor<f64>>| r.map_err(|e| e.to_string());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for mode in [MappingMode::Factorized, MappingMode::Joint] {
        let space = enumerate_candidates(&clusterings, mode, 2000).map_err(|e| e.to_string())?;
        for _ in 0..20 {
            let mut params = EmbeddingParams::<f64>::zeros(&space);
            params.logits.iter_mut().flatten().for_each(|v| *v = rng.random_range(-3.0..3.0));
            for l in &params.logits {
                close(softmax(l).iter().sum(), 1.0, 1e-12, "softmax sum")?;
            }
            let shift = rng.random_range(-20.0..20.0);
            let mut shifted = params.clone();
            shifted.logits.iter_mut().flatten().for_each(|v| *v += shift);
            let a = e(mixed_embed(&panel, 1, &space, &params))?;
            let b = e(mixed_embed(&panel, 1, &space, &shifted))?;
            check(a.max_abs_diff(&b) <= 1e-9, format!("shift changed output by {}", a.max_abs_diff(&b)))?;
            check(
                derive_embedding(&params, &space).unwrap() == derive_embedding(&shifted, &space).unwrap(),
                "shift changed the derived orders",
            )?;
        }
    }

    let space = enumerate_candidates(&clusterings, MappingMode::Factorized, 2000).unwrap();
    for t in 0..space.joint_size() {
        let triple = space.joint_triple(t);
        let mut params = EmbeddingParams::<f64>::zeros(&space);
        for (a, pick) in triple.into_iter().enumerate() {
            params.logits[a].iter_mut().for_each(|v| *v = -1e4);
            params.logits[a][pick] = 0.0;
        }
        let mixed = e(mixed_embed(&panel, 0, &space, &params))?;
        let vox = e(voxelize(&panel, 0, &clusterings, &space.orders_for(triple)))?;
        check(mixed == vox, format!("one-hot mixture differs from voxel for {triple:?}"))?;
    }

    // feature blocks {0,1}, {2}, {3}: swapping the first two blocks moves member
    // slots [0,1,2,3] to [2,0,1,3]
    let ident = [vec![0, 1, 2], vec![0, 1], vec![0, 1]];
    let swapped = [vec![1, 0, 2], vec![0, 1], vec![0, 1]];
    let base = e(voxelize(&panel, 2, &clusterings, &ident))?;
    let moved = e(voxelize(&panel, 2, &clusterings, &swapped))?;
    let slot = [2, 0, 1, 3];
    let [y, f, b, q] = [2, 4, 3, 2];
    for yy in 0..y {
        for ff in 0..f {
            for bb in 0..b {
                for qq in 0..q {
                    let at = |fi: usize| ((yy * f + fi) * b + bb) * q + qq;
                    check(
                        moved.data()[at(ff)] == base.data()[at(slot[ff])],
                        "block swap is not the index permutation",
                    )?;
                }
            }
        }
    }

    let two = enumerate_candidates(
        &[
            LevelClustering::new(Axis::Feature, vec![0, 1, 1, 0]).unwrap(),
            LevelClustering::single(Axis::Base, 3).unwrap(),
            LevelClustering::single(Axis::Equipment, 2).unwrap(),
        ],
        MappingMode::Joint,
        2000,
    )
    .unwrap();
    let mut params = EmbeddingParams::<f64>::zeros(&two);
    params.logits[0] = vec![3f64.ln(), 0.0];
    let mix = e(mixed_embed(&panel, 0, &two, &params))?;
    let o1 = e(voxelize(&panel, 0, two.clusterings(), &two.orders_for(two.joint_triple(0))))?;
    let o2 = e(voxelize(&panel, 0, two.clusterings(), &two.orders_for(two.joint_triple(1))))?;
    for k in 0..mix.len() {
        close(mix.data()[k], 0.75 * o1.data()[k] + 0.25 * o2.data()[k], 1e-12, "ln 3 mixture")?;
    }
    params.logits[0] = vec![0.0, 20.0];
    let dom = e(mixed_embed(&panel, 0, &two, &params))?;
    check(dom.max_abs_diff(&o2) <= 1e-6, "+20 logit does not dominate")?;

    let p = EmbeddingParams::<f64> {
        mode: MappingMode::Factorized,
        logits: vec![vec![0.1, 2.3, -1.0], vec![0.5, 0.2, 0.5]],
    };
    check(derive_indices(&p) == [1, 0], format!("derived {:?}", derive_indices(&p)))?;
    Ok("softmax, shift, one-hot, block permutation, hand mixtures".into())
}

/// Central-difference check of an analytic gradient produced by `f`.
fn grad_case<F>(name: &str, point: &[f64], f: F) -> Result<f64, String>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let err = gradient_check(f, point, 1e-3).map_err(|e| e.to_string())?;
    check(err < 1e-4, format!("{name}: relative error {err:e}"))?;
    Ok(err)
}

fn scalar_of(tape: &Tape<f64>, v: tab2vox::nn::Var) -> f64 {
    tape.value(v).data()[0]
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let shape = [2, 3, 4, 3, 2];
    let x = ramp(&shape, 0.3);
    let target = ramp(&shape, 1.7).data().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;

    let clusterings = [
        LevelClustering::new(Axis::Feature, vec![0, 1, 2, 0]).unwrap(),
        LevelClustering::new(Axis::Base, vec![0, 1, 1]).unwrap(),
        LevelClustering::new(Axis::Equipment, vec![0, 1]).unwrap(),
    ];
    for mode in [MappingMode::Factorized, MappingMode::Joint] {
        let space = enumerate_candidates(&clusterings, mode, 2000).unwrap();
        let template = EmbeddingParams::<f64>::zeros(&space);
        let point: Vec<f64> = (0..space.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |p: &[f64]| {
            let mut params = template.clone();
            let mut it = p.iter();
            params.logits.iter_mut().flatten().for_each(|v| *v = *it.next().unwrap());
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let vars = embedding_vars(&mut tape, &params, true);
            let y = mixed_embed_on_tape(&mut tape, xv, &space, &vars).unwrap();
            let loss = tape.mse(y, &target).unwrap();
            let grads = tape.backward(loss);
            let g = vars.iter().flat_map(|v| grads.get(*v).unwrap().data().to_vec()).collect();
            (scalar_of(&tape, loss), g)
        };
        worst = worst.max(grad_case(&format!("embedding {mode:?}"), &point, f)?);
    }

    for stride in [1, 2] {
        let mut store = ParamStore::<f64>::default();
        let mut prng = ChaCha8Rng::seed_from_u64(stride as u64);
        let prims: Vec<Primitive> = OpKind::ALL
            .iter()
            .map(|&k| Primitive::build(k, 3, 3, stride, &mut store, &mut prng).unwrap())
            .collect();
        let out_shape = Primitive::Identity.out_shape(x.dims5(), 3, stride);
        let tgt = ramp(&out_shape, 0.9).data().to_vec();
        let point: Vec<f64> = (0..OpKind::ALL.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |p: &[f64]| {
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&store, true, false);
            let xv = tape.constant(x.clone());
            let a = tape.leaf(Tensor::from_vec(&[p.len()], p.to_vec()).unwrap(), true);
            let outs: Vec<_> = prims.iter().map(|pr| pr.forward(&mut tape, &mut ctx, xv).unwrap()).collect();
            let y = tape.mix(a, &outs, &out_shape).unwrap();
            let loss = tape.mse(y, &tgt).unwrap();
            let grads = tape.backward(loss);
            (scalar_of(&tape, loss), grads.get(a).unwrap().data().to_vec())
        };
        worst = worst.max(grad_case(&format!("mixed op stride {stride}"), &point, f)?);
    }

    for (name, spec) in [
        ("conv 3x3x3", ConvSpec::cube(3, 1)),
        ("conv 3x3x3 stride 2", ConvSpec::cube(3, 2)),
        (
            "dilated depthwise conv",
            ConvSpec {
                dilation: 2,
                groups: 3,
                ..ConvSpec::cube(3, 1)
            },
        ),
    ] {
        let wshape = [3, 3 / spec.groups, 3, 3, 3];
        let point = ramp(&wshape, 0.2).data().iter().map(|v| v * 0.3).collect::<Vec<_>>();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = tape.leaf(Tensor::from_vec(&wshape, point.clone()).unwrap(), true);
        let y = tape.conv3d(xv, w, spec).unwrap();
        let tgt = ramp(tape.value(y).shape(), 0.4).data().to_vec();
        let f = |p: &[f64]| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let w = tape.leaf(Tensor::from_vec(&wshape, p.to_vec()).unwrap(), true);
            let y = tape.conv3d(xv, w, spec).unwrap();
            let loss = tape.mse(y, &tgt).unwrap();
            let grads = tape.backward(loss);
            (scalar_of(&tape, loss), grads.get(w).unwrap().data().to_vec())
        };
        worst = worst.max(grad_case(name, &point, f)?);
    }

    for reduction in [false, true] {
        let mut store = ParamStore::<f64>::default();
        let mut prng = ChaCha8Rng::seed_from_u64(21);
        let cell = Cell::mixed(1, 3, reduction, &OpKind::ALL, &mut store, &mut prng).unwrap();
        let n_alpha = edge_count(1) * OpKind::ALL.len();
        let point: Vec<f64> = (0..n_alpha).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = if reduction { [2, 3, 2, 2, 1] } else { shape };
        let tgt = ramp(&out, 2.2).data().to_vec();
        let f = |p: &[f64]| {
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&store, true, false);
            let xv = tape.constant(x.clone());
            let alphas: Vec<_> = p
                .chunks(OpKind::ALL.len())
                .map(|c| tape.leaf(Tensor::from_vec(&[c.len()], c.to_vec()).unwrap(), true))
                .collect();
            let y = cell.forward(&mut tape, &mut ctx, xv, xv, &alphas).unwrap();
            let loss = tape.mse(y, &tgt).unwrap();
            let grads = tape.backward(loss);
            let g = alphas.iter().flat_map(|a| grads.get(*a).unwrap().data().to_vec()).collect();
            (scalar_of(&tape, loss), g)
        };
        worst = worst.max(grad_case(&format!("cell edge logits (reduction {reduction})"), &point, f)?);
    }

    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, format!("took {secs}s"))?;
    Ok(format!("max relative error {worst:.2e} in {secs:.1}s"))
}

fn shape_suite() -> Outcome {
    for dims in [[4, 3, 2], [5, 1, 3], [1, 1, 1]] {
        let shape = [2, 3, dims[0], dims[1], dims[2]];
        let x = ramp(&shape, 0.0);
        for kind in OpKind::ALL {
            let one = primitive_forward(kind, &x, 1, 4).map_err(|e| e.to_string())?;
            check(one.shape() == shape, format!("{kind} stride 1 on {shape:?} gave {:?}", one.shape()))?;
            let half = primitive_forward(kind, &x, 2, 4).map_err(|e| e.to_string())?;
            let want = [2, 3, dims[0].div_ceil(2), dims[1].div_ceil(2), dims[2].div_ceil(2)];
            check(half.shape() == want, format!("{kind} stride 2 on {shape:?} gave {:?}", half.shape()))?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for nodes in 1..=4 {
        for _ in 0..25 {
            let mut arch = ArchParams::<f64>::zeros(&OpKind::ALL, nodes);
            for v in arch.normal.iter_mut().chain(arch.reduce.iter_mut()).flatten() {
                *v = rng.random_range(-2.0..2.0);
            }
            if rng.random_bool(0.5) {
                // make `none` the favourite everywhere
                for row in arch.normal.iter_mut() {
                    row[0] = 10.0;
                }
            }
            let g = derive_genotype(&arch);
            g.validate().map_err(|e| e.to_string())?;
            for (node, pair) in g.normal.iter().chain(&g.reduce).enumerate().map(|(k, p)| (k % nodes, p)) {
                check(pair.iter().all(|e| e.op != OpKind::None), "none in genotype")?;
                check(pair[0].from != pair[1].from, "duplicate input")?;
                check(pair.iter().all(|e| e.from < node + 2), "input from a later node")?;
            }
        }
    }
    Ok("11 ops x strides 1, 2 on 3 grids; 100 derived genotypes".into())
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut infeasible = 0;
    for k in 0..100 {
        let p = random_problem(&mut rng);
        let plain = solve_selection(&p);
        let plain_oracle = brute_force_oracle_weighted(&p, 1.0, 0.0);
        let robust = solve_selection_robust(&p, p.w1, p.w2);
        let robust_oracle = brute_force_oracle(&p);
        for (what, a, b) in [("plain", &plain, &plain_oracle), ("robust", &robust, &robust_oracle)] {
            match (a, b) {
                (Ok(a), Ok(b)) => check(a == b, format!("instance {k} {what}: {a:?} vs {b:?}"))?,
                (Err(tab2vox::Error::Infeasible), Err(tab2vox::Error::Infeasible)) => infeasible += 1,
                _ => return Err(format!("instance {k} {what}: {a:?} vs {b:?}")),
            }
        }
        let mut last = f64::NEG_INFINITY;
        for t in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0, f64::INFINITY] {
            let mut q = p.clone();
            q.budget_seconds = Some(t).filter(|t| t.is_finite());
            if let Ok(r) = solve_selection(&q) {
                check(r.objective >= last, format!("instance {k}: objective fell at T = {t}"))?;
                last = r.objective;
            }
        }
    }
    Ok(format!("100 instances, {infeasible} infeasible cases agreed, budget sweeps monotone"))
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let (raw, _) = generate_synthetic(&SyntheticSpec::default()).map_err(|e| e.to_string())?;
    let clean = clean_panel(&raw).map_err(|e| e.to_string())?;
    let fold = make_folds(&clean, 1).map_err(|e| e.to_string())?.remove(0);
    let (panel, _) = fold_panel(&clean, &fold);
    let config = SearchConfig {
        bilevel: BilevelConfig {
            epochs: 10,
            ..Default::default()
        },
        ..Default::default()
    };
    let out = run_search::<f32>(&panel, &fold, &config, None).map_err(|e| e.to_string())?;
    let last = out.history.last().ok_or("no history")?.val_loss;
    check(
        last <= out.initial_val_loss,
        format!("validation loss rose from {} to {last}", out.initial_val_loss),
    )?;
    let train = BilevelConfig {
        epochs: 20,
        ..Default::default()
    };
    let (_, derived) =
        train_derived::<f32>(&out.genotype, &panel, &fold, &config.supernet, &train).map_err(|e| e.to_string())?;
    let mean = run_baseline(BaselineKind::ArithmeticMean, &panel, &fold).map_err(|e| e.to_string())?;
    let (da, ma) = (derived.minmax_accuracy().unwrap(), mean.minmax_accuracy().unwrap());
    let secs = start.elapsed().as_secs_f64();
    check(da >= ma, format!("derived accuracy {da:.4} below arithmetic mean {ma:.4}"))?;
    check(secs < 1800.0, format!("took {secs}s"))?;
    Ok(format!(
        "val loss {:.4} -> {last:.4}, accuracy {da:.4} vs mean {ma:.4}, {secs:.0}s",
        out.initial_val_loss
    ))
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Result tables carry measured run times in their last column.
fn without_runtimes(text: &str) -> String {
    text.lines()
        .map(|l| match l.rfind(',') {
            Some(k) if !l.starts_with('#') => &l[..k],
            _ => l,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn determinism() -> Outcome {
    let mut overrides = BTreeMap::new();
    for k in BaselineKind::ALL {
        overrides.insert(k.name().to_string(), 1.0);
    }
    overrides.insert(TAB2VOX_MODEL_ID.to_string(), 2.0);
    let run = |dir: &Path| -> tab2vox::Result<()> {
        let mut cfg = RunConfig {
            out: dir.to_path_buf(),
            seed: 4,
            folds: vec![0, 1],
            ..Default::default()
        };
        cfg.synthetic = SyntheticSpec {
            items: 30,
            bases: 2,
            equipment: 2,
            years: 4,
            features: 3,
            ..Default::default()
        };
        cfg.supernet = SupernetConfig {
            cells: 2,
            nodes: 1,
            width: 4,
            ..Default::default()
        };
        cfg.search.epochs = 2;
        cfg.train.epochs = 2;
        cfg.selection.runtime_overrides = overrides.clone();
        harness::stage_synth(&cfg)?;
        harness::stage_ingest(&cfg)?;
        harness::stage_search(&cfg)?;
        harness::stage_train(&cfg)?;
        harness::stage_evaluate(&cfg)?;
        harness::stage_select(&cfg)?;
        harness::stage_report(&cfg)?;
        Ok(())
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run(a.path()).map_err(|e| e.to_string())?;
    run(b.path()).map_err(|e| e.to_string())?;
    let files = files_under(a.path());
    check(files == files_under(b.path()), "runs wrote different file sets")?;
    let mut compared = 0;
    for rel in &files {
        let name = rel.file_name().unwrap().to_string_lossy();
        if name == "timings.csv" {
            continue;
        }
        let (x, y) = (fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap());
        let same = if name == "results.csv" {
            without_runtimes(&String::from_utf8_lossy(&x)) == without_runtimes(&String::from_utf8_lossy(&y))
        } else {
            x == y
        };
        check(same, format!("{} differs between runs", rel.display()))?;
        compared += 1;
    }
    Ok(format!("{compared} files identical across two runs"))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("selection on the four-group accuracy table", four_group_selection),
        ("unbounded budget picks per-group argmax", unbounded_budget_is_argmax),
        ("candidate-space counts", candidate_counts),
        ("metric suite", metric_suite),
        ("embedding suite", embedding_suite),
        ("gradient suite", gradient_suite),
        ("supernet shape suite", shape_suite),
        ("oracle equivalence", oracle_equivalence),
        ("end-to-end smoke", end_to_end),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                println!("FAIL {name}: {why}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

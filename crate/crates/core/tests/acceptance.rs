//! Acceptance suite. Each test covers one numbered criterion at its
//! stated tolerance and prints one PASS/FAIL line; heavy fixtures (the
//! full reference pipeline and the five-seed method grid) are shared
//! through process-wide lazies. Run with `--nocapture` to see the lines.

use sgunlearn_core::autodiff::{
    conjugate_gradient_solve, gradient_check, hessian_vector_product, Tape, Tensor,
};
use sgunlearn_core::harness::{
    artifact_digests, cmd_sweep, pick_default_target, run_full_pipeline, ExperimentConfig,
    Paths, RunRecord,
};
use sgunlearn_core::img::Image;
use sgunlearn_core::leakage::{run_leakage_test, AttackKind, AttackSpec, Verdict};
use sgunlearn_core::metrics::{
    evaluate_a1a2a3, mae, perceptual_proxy, ssim, MetricReport, ROI_RESIZE,
};
use sgunlearn_core::model::{
    scene_loss, train, GeneratorModel, ScenePlan, Task, TrainConfig,
};
use sgunlearn_core::scene_graph::roi_of;
use sgunlearn_core::synth::{generate_dataset, Dataset, DatasetConfig};
use sgunlearn_core::unlearn::{
    influence_redact, run_method, select_removal, MethodConfig, MethodId, Scope, UnlearnRequest,
};
use std::sync::OnceLock;
use std::time::Instant;

fn verdict_line(criterion: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {criterion} {} - {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn reference_config(out: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../configs/reference.toml"
    ))
    .expect("reference config must parse");
    cfg.output.dir = out.to_string_lossy().into_owned();
    cfg
}

// ---- shared fixture: the full reference pipeline (criteria 7, 8, 11) ----

struct ReferenceRun {
    dir: tempfile::TempDir,
    cfg: ExperimentConfig,
    manifest_hash: String,
    pipeline_seconds: f64,
}

fn reference_run() -> &'static ReferenceRun {
    static RUN: OnceLock<ReferenceRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = reference_config(dir.path());
        let t0 = Instant::now();
        let manifest_hash = run_full_pipeline(&cfg).expect("reference pipeline");
        let pipeline_seconds = t0.elapsed().as_secs_f64();
        ReferenceRun {
            dir,
            cfg,
            manifest_hash,
            pipeline_seconds,
        }
    })
}

// ---- shared fixture: the five-seed method grid (criteria 5, 6, 9) ----

struct SeedOutcome {
    seed: u64,
    a1_sft: f64,
    a2_sft: f64,
    a1_pa: f64,
    a2_pa: f64,
    a3_pa: f64,
    a1_ns: f64,
    a2_ns: f64,
    a3_ns: f64,
    a3_featmk: f64,
    pa_verdict: Verdict,
    control_fuzzy_recovery: f64,
}

const GRID_SEEDS: [u64; 5] = [7, 8, 9, 10, 11];

fn seed_grid() -> &'static Vec<SeedOutcome> {
    static GRID: OnceLock<Vec<SeedOutcome>> = OnceLock::new();
    GRID.get_or_init(|| GRID_SEEDS.iter().map(|&s| run_seed(s)).collect())
}

fn run_seed(seed: u64) -> SeedOutcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = reference_config(tmp.path());
    cfg.dataset.seed = seed;
    cfg.train.seed = seed;
    let dataset = generate_dataset(&cfg.dataset).unwrap();
    let target = pick_default_target(&dataset).expect("person-like target");
    let request = UnlearnRequest::new([target.clone()], Scope::Object);
    let (original, _) = train(&dataset, &cfg.train).unwrap();
    let train_idx: Vec<usize> = dataset.train_indices().collect();

    let eval = |model: &GeneratorModel, name: &str| -> MetricReport {
        evaluate_a1a2a3(
            &original,
            model,
            &dataset,
            &train_idx,
            &request,
            Task::Reconstruction,
            name,
        )
        .unwrap()
    };

    let run = |method: MethodId| {
        run_method(
            method,
            &original,
            &dataset,
            &request.with_scope(method.scope()),
            &cfg.method_cfg,
            &cfg.train,
        )
        .unwrap()
    };

    let sft = run(MethodId::SampleFt);
    let pa = run(MethodId::ObjMkPa);
    let ns = run(MethodId::ObjMkNs);
    let fmk = run(MethodId::FeatMk);

    let r_sft = eval(&sft.model, "Sample-FT");
    let r_pa = eval(&pa.model, "Obj-MK-PA");
    let r_ns = eval(&ns.model, "Obj-MK-NS");
    let r_fmk = eval(&fmk.model, "Feat-MK");

    let specs = AttackSpec::standard_three(&target, &dataset.vocab);
    let pa_report =
        run_leakage_test(&pa.model, &original, &dataset, &specs, cfg.attack.tau).unwrap();
    let control =
        run_leakage_test(&original, &original, &dataset, &specs, cfg.attack.tau).unwrap();
    let control_fuzzy = control
        .results
        .iter()
        .find(|r| r.kind == AttackKind::Fuzzy && r.applicable)
        .map(|r| r.recovery_unl)
        .unwrap_or(f64::NAN);

    SeedOutcome {
        seed,
        a1_sft: r_sft.a1.ssim,
        a2_sft: r_sft.a2.ssim,
        a1_pa: r_pa.a1.ssim,
        a2_pa: r_pa.a2.ssim,
        a3_pa: r_pa.a3.ssim,
        a1_ns: r_ns.a1.ssim,
        a2_ns: r_ns.a2.ssim,
        a3_ns: r_ns.a3.ssim,
        a3_featmk: r_fmk.a3.ssim,
        pa_verdict: pa_report.verdict,
        control_fuzzy_recovery: control_fuzzy,
    }
}

// ---- criterion 1: autodiff soundness ----

#[test]
fn criterion_01_autodiff_soundness() {
    let t0 = Instant::now();
    let mut worst: (String, f64) = (String::new(), 0.0);
    let mut check = |name: &str, f: &dyn Fn(&[f64]) -> f64, theta: &[f64], analytic: &[f64]| {
        let report = gradient_check(f, theta, analytic, 1e-5, 1e-3);
        if report.max_rel_error > worst.1 {
            worst = (name.to_string(), report.max_rel_error);
        }
        assert!(
            report.passed(),
            "primitive {name}: max rel error {}",
            report.max_rel_error
        );
    };

    // Every forward primitive, each driven through a scalar loss.
    let theta: Vec<f64> = (0..48).map(|i| ((i * 37 % 19) as f64 - 9.0) * 0.11 + 0.013).collect();

    macro_rules! primitive {
        ($name:expr, $build:expr) => {{
            let build = $build;
            let f = |t: &[f64]| -> f64 {
                let (tape, loss) = build(t);
                tape.value(loss).item()
            };
            let (tape, loss) = build(&theta);
            let grads = tape.backward(loss).unwrap();
            let var = tape.param_var("theta").unwrap();
            let analytic = grads
                .get(var)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; theta.len()]);
            check($name, &f, &theta, &analytic);
        }};
    }

    primitive!("matmul", |t: &[f64]| {
        let mut tape = Tape::new();
        let w = tape.param("theta", Tensor::new(vec![8, 6], t.to_vec()));
        let x = tape.constant(Tensor::new(
            vec![6, 1],
            vec![0.3, -0.2, 0.5, 0.9, -0.7, 0.1],
        ));
        let y = tape.matmul(w, x).unwrap();
        let tgt = tape.constant(Tensor::new(vec![8, 1], vec![0.1; 8]));
        let loss = tape.mse_loss(y, tgt).unwrap();
        (tape, loss)
    });
    primitive!("add", |t: &[f64]| {
        let mut tape = Tape::new();
        let a = tape.param("theta", Tensor::from_vec(t.to_vec()));
        let b = tape.constant(Tensor::from_vec(vec![0.25; 48]));
        let y = tape.add(a, b).unwrap();
        let tgt = tape.constant(Tensor::from_vec(vec![0.0; 48]));
        let loss = tape.mse_loss(y, tgt).unwrap();
        (tape, loss)
    });
    primitive!("scale_shift", |t: &[f64]| {
        let mut tape = Tape::new();
        let a = tape.param("theta", Tensor::from_vec(t.to_vec()));
        let y = tape.affine(a, -1.7, 0.4);
        let tgt = tape.constant(Tensor::from_vec(vec![0.0; 48]));
        let loss = tape.mse_loss(y, tgt).unwrap();
        (tape, loss)
    });
    primitive!("relu", |t: &[f64]| {
        let mut tape = Tape::new();
        let a = tape.param("theta", Tensor::from_vec(t.to_vec()));
        let y = tape.relu(a);
        let m = tape.mean(y);
        let loss = tape.scale(m, 2.0);
        (tape, loss)
    });
    primitive!("leaky_relu", |t: &[f64]| {
        let mut tape = Tape::new();
        let a = tape.param("theta", Tensor::from_vec(t.to_vec()));
        let y = tape.leaky_relu(a, 0.1);
        let m = tape.mean(y);
        let loss = tape.scale(m, 2.0);
        (tape, loss)
    });
    primitive!("tanh", |t: &[f64]| {
        let mut tape = Tape::new();
        let a = tape.param("theta", Tensor::from_vec(t.to_vec()));
        let y = tape.tanh(a);
        let tgt = tape.constant(Tensor::from_vec(vec![0.2; 48]));
        let loss = tape.mse_loss(y, tgt).unwrap();
        (tape, loss)
    });
    primitive!("concat_slice_reshape", |t: &[f64]| {
        let mut tape = Tape::new();
        let a = tape.param("theta", Tensor::new(vec![48], t.to_vec()));
        let left = tape.slice(a, &[(0, 20)]).unwrap();
        let right = tape.slice(a, &[(20, 48)]).unwrap();
        let joined = tape.concat(&[right, left], 0).unwrap();
        let shaped = tape.reshape(joined, vec![6, 8]).unwrap();
        let tgt = tape.constant(Tensor::new(vec![6, 8], vec![0.05; 48]));
        let loss = tape.mse_loss(shaped, tgt).unwrap();
        (tape, loss)
    });
    primitive!("conv2d", |t: &[f64]| {
        let mut tape = Tape::new();
        // 45 kernel weights + 3 bias + leave 0 unused: [5,1,3,3] kernel.
        let k = tape.param("theta", Tensor::new(vec![48], t.to_vec()));
        let kernel = tape.slice(k, &[(0, 45)]).unwrap();
        let kernel = tape.reshape(kernel, vec![5, 1, 3, 3]).unwrap();
        let img = tape.constant(Tensor::new(
            vec![1, 4, 4],
            (0..16).map(|i| (i as f64) * 0.07 - 0.4).collect(),
        ));
        let y = tape.conv2d(img, kernel, None).unwrap();
        let tgt = tape.constant(Tensor::new(vec![5, 4, 4], vec![0.1; 80]));
        let loss = tape.mse_loss(y, tgt).unwrap();
        (tape, loss)
    });
    primitive!("upsample_mean", |t: &[f64]| {
        let mut tape = Tape::new();
        let a = tape.param("theta", Tensor::new(vec![3, 4, 4], t.to_vec()));
        let y = tape.upsample2x(a).unwrap();
        let m = tape.mean(y);
        let loss = tape.scale(m, 3.0);
        (tape, loss)
    });
    primitive!("l1_loss", |t: &[f64]| {
        let mut tape = Tape::new();
        let a = tape.param("theta", Tensor::from_vec(t.to_vec()));
        let tgt = tape.constant(Tensor::from_vec(vec![0.5; 48]));
        let loss = tape.l1_loss(a, tgt).unwrap();
        (tape, loss)
    });
    primitive!("place_roi", |t: &[f64]| {
        let mut tape = Tape::new();
        let a = tape.param("theta", Tensor::from_vec(t.to_vec()));
        let emb = tape.slice(a, &[(0, 6)]).unwrap();
        let rect = sgunlearn_core::scene_graph::PixelRect {
            x0: 1,
            y0: 2,
            x1: 4,
            y1: 5,
        };
        let canvas = tape.place_roi(emb, 6, 6, rect).unwrap();
        let tgt = tape.constant(Tensor::new(vec![6, 6, 6], vec![0.03; 216]));
        let loss = tape.mse_loss(canvas, tgt).unwrap();
        (tape, loss)
    });

    // Full SG2I loss on a 2-sample instance.
    let ds = generate_dataset(&DatasetConfig {
        n_samples: 2,
        image_size: 16,
        objects_min: 2,
        objects_max: 3,
        seed: 99,
        ..DatasetConfig::default()
    })
    .unwrap();
    let model = GeneratorModel::init(16, &ds.vocab, 4);
    let full_loss = |flat: &[f64]| -> f64 {
        let mut probe = model.clone();
        probe.params.unflatten(flat);
        let mut total = 0.0;
        for s in &ds.samples {
            let mut tape = Tape::new();
            let plan = ScenePlan::reconstruction(&s.graph);
            let (loss, _, _) = scene_loss(
                &probe, &mut tape, &s.graph, &s.image, &s.image, &plan, &[], 0.0,
            )
            .unwrap();
            total += tape.value(loss).item();
        }
        total
    };
    let flat = model.params.flatten();
    let mut grad = vec![0.0; flat.len()];
    for s in &ds.samples {
        let mut tape = Tape::new();
        let plan = ScenePlan::reconstruction(&s.graph);
        let (loss, _, _) =
            scene_loss(&model, &mut tape, &s.graph, &s.image, &s.image, &plan, &[], 0.0).unwrap();
        let g = tape.backward(loss).unwrap();
        for (acc, v) in grad.iter_mut().zip(model.params.flat_gradient(&tape, &g)) {
            *acc += v;
        }
    }
    let report = gradient_check(full_loss, &flat, &grad, 1e-5, 1e-3);
    assert!(
        report.passed(),
        "full SG2I loss gradient check: max rel error {}",
        report.max_rel_error
    );
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = elapsed < 60.0;
    verdict_line(
        "C01",
        pass,
        &format!(
            "all primitives + full loss within rel tol 1e-3 (worst primitive {} at {:.2e}, full loss {:.2e}); {elapsed:.1}s < 60s",
            worst.0, worst.1, report.max_rel_error
        ),
    );
    assert!(pass);
}

// ---- criterion 2: influence machinery ----

#[test]
fn criterion_02_influence_machinery() {
    // Quadratic surrogate: linear generator + MSE, H = (2/n) X'X.
    let (n, d) = (40usize, 24usize);
    let mut state = 0xA4C4_u64 + 4099;
    let mut next = || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
    };
    let x_mat: Vec<f64> = (0..n * d).map(|_| next()).collect();
    let y: Vec<f64> = (0..n).map(|_| next()).collect();
    let theta: Vec<f64> = (0..d).map(|_| next() * 0.3).collect();
    let damping = 0.01;

    let grad_fn = |t: &[f64]| -> Vec<f64> {
        let mut g = vec![0.0; d];
        for i in 0..n {
            let row = &x_mat[i * d..(i + 1) * d];
            let r: f64 = row.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() - y[i];
            for j in 0..d {
                g[j] += 2.0 * r * row[j] / n as f64;
            }
        }
        g
    };
    // Removal-loss analogue: gradient over the first 6 rows.
    let g_removal: Vec<f64> = {
        let mut g = vec![0.0; d];
        for i in 0..6 {
            let row = &x_mat[i * d..(i + 1) * d];
            let r: f64 = row.iter().zip(&theta).map(|(a, b)| a * b).sum::<f64>() - y[i];
            for j in 0..d {
                g[j] += 2.0 * r * row[j] / 6.0;
            }
        }
        g
    };

    let eps = sgunlearn_core::autodiff::default_hvp_epsilon(&theta);
    let apply_h = |v: &[f64]| hessian_vector_product(&grad_fn, &theta, v, eps).unwrap();
    let ours = conjugate_gradient_solve(apply_h, &g_removal, damping, 1e-12, 200).unwrap();
    assert!(ours.converged);

    // Dense oracle: materialize H + damping I and Gaussian-eliminate.
    let mut h_dense = vec![vec![0.0; d]; d];
    for i in 0..n {
        let row = &x_mat[i * d..(i + 1) * d];
        for a in 0..d {
            for b in 0..d {
                h_dense[a][b] += 2.0 * row[a] * row[b] / n as f64;
            }
        }
    }
    for (a, row) in h_dense.iter_mut().enumerate() {
        row[a] += damping;
    }
    let exact = dense_solve(&h_dense, &g_removal);
    let rel = {
        let num: f64 = ours
            .x
            .iter()
            .zip(&exact)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = exact.iter().map(|v| v * v).sum::<f64>().sqrt();
        num / den
    };
    assert!(rel < 1e-4, "CG+HVP vs dense solve: rel error {rel}");

    // HVP on the diagonal quadratic, exact to 1e-8.
    let diag_grad = |t: &[f64]| vec![2.0 * t[0], 4.0 * t[1]];
    let hv = hessian_vector_product(diag_grad, &[0.2, -0.4], &[1.0, 1.0], 1e-4).unwrap();
    let hv_err = (hv[0] - 2.0).abs().max((hv[1] - 4.0).abs());
    assert!(hv_err < 1e-8, "diag(2,4) HVP error {hv_err}");

    // lambda = 0 and empty removal are bit-exact identities on the real
    // generator.
    let ds = generate_dataset(&DatasetConfig {
        n_samples: 6,
        image_size: 16,
        objects_min: 2,
        objects_max: 3,
        seed: 31,
        ..DatasetConfig::default()
    })
    .unwrap();
    let tcfg = TrainConfig {
        epochs: 2,
        batch_size: 3,
        ..TrainConfig::default()
    };
    let (model, _) = train(&ds, &tcfg).unwrap();
    let target = pick_default_target(&ds).unwrap();
    let removal =
        select_removal(&UnlearnRequest::new([target], Scope::Object), &ds).unwrap();
    let zero_lambda = MethodConfig {
        lambda_redact: 0.0,
        cg_max_iter: 1,
        ..MethodConfig::default()
    };
    let (m0, _) = influence_redact(&model, &ds, &removal, &zero_lambda).unwrap();
    let bit_exact_lambda = m0.params == model.params;
    let empty = sgunlearn_core::unlearn::RemovalSet {
        scope: Scope::Object,
        sample_indices: Default::default(),
        categories: Default::default(),
        object_ids: Default::default(),
    };
    let (m1, _) = influence_redact(
        &model,
        &ds,
        &empty,
        &MethodConfig {
            cg_max_iter: 1,
            ..MethodConfig::default()
        },
    )
    .unwrap();
    let bit_exact_empty = m1.params == model.params;
    assert!(bit_exact_lambda && bit_exact_empty);

    verdict_line(
        "C02",
        true,
        &format!(
            "CG+HVP vs dense solve rel {rel:.2e} < 1e-4; diag HVP err {hv_err:.2e} < 1e-8; lambda=0 and empty removal bit-exact"
        ),
    );
}

fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(row, rhs)| {
            let mut r = row.clone();
            r.push(*rhs);
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())
            .unwrap();
        m.swap(col, pivot);
        for row in 0..n {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in col..=n {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    (0..n).map(|i| m[i][n] / m[i][i]).collect()
}

// ---- criterion 3: removal-set algebra ----

#[test]
fn criterion_03_removal_set_algebra() {
    use sgunlearn_core::scene_graph::{pad_graph, BBox, ObjectNode, SceneGraph};
    use sgunlearn_core::synth::{default_vocabulary, render_scene, RenderedSample, PAD_TARGET};
    use std::collections::BTreeSet;

    let node = |id: &str, category: &str, b: [f64; 4]| ObjectNode {
        id: id.into(),
        category: category.into(),
        attributes: vec![],
        identity_key: 1,
        bbox: BBox::new(b[0], b[1], b[2], b[3]),
    };
    let graphs = vec![
        vec![node("girl-A", "girl", [0.1, 0.1, 0.6, 0.6])],
        vec![node("girl-B", "girl", [0.3, 0.3, 0.8, 0.8])],
        vec![node("boy-C", "boy", [0.2, 0.2, 0.7, 0.7])],
    ];
    let samples: Vec<RenderedSample> = graphs
        .into_iter()
        .enumerate()
        .map(|(i, nodes)| {
            let g = pad_graph(&SceneGraph::new(nodes, vec![]), PAD_TARGET).unwrap();
            RenderedSample {
                image: render_scene(&g, 16, i as u64).unwrap(),
                graph: g,
                seed: i as u64,
            }
        })
        .collect();
    let ds = Dataset {
        config: DatasetConfig {
            n_samples: 3,
            image_size: 16,
            ..DatasetConfig::default()
        },
        vocab: default_vocabulary(),
        samples,
        train_count: 3,
    };

    let req = |scope| UnlearnRequest::new(["girl-A"], scope);
    let sample = select_removal(&req(Scope::Sample), &ds).unwrap();
    let feature = select_removal(&req(Scope::Feature), &ds).unwrap();
    let object = select_removal(&req(Scope::Object), &ds).unwrap();
    let fixture_ok = sample.sample_indices == BTreeSet::from([0])
        && feature.expanded_object_ids(&ds)
            == BTreeSet::from(["girl-A".to_string(), "girl-B".to_string()])
        && object.expanded_object_ids(&ds) == BTreeSet::from(["girl-A".to_string()]);
    assert!(fixture_ok, "Definitions 1-3 fixture mismatch");

    // Property over 100 random datasets: object subset of feature
    // expansion; every removed object lives in a removed sample.
    let mut checked = 0;
    for seed in 0..100u64 {
        let ds = generate_dataset(&DatasetConfig {
            n_samples: 5,
            image_size: 16,
            objects_min: 2,
            objects_max: 5,
            seed: 1000 + seed,
            ..DatasetConfig::default()
        })
        .unwrap();
        let target = ds.samples[0]
            .graph
            .non_pad_nodes()
            .next()
            .unwrap()
            .id
            .clone();
        let req = UnlearnRequest::new([target], Scope::Object);
        let obj = select_removal(&req, &ds).unwrap();
        let feat = select_removal(&req.with_scope(Scope::Feature), &ds).unwrap();
        let samp = select_removal(&req.with_scope(Scope::Sample), &ds).unwrap();
        let obj_ids = obj.expanded_object_ids(&ds);
        assert!(obj_ids.is_subset(&feat.expanded_object_ids(&ds)));
        for id in &obj_ids {
            let (si, _) = ds.find_object(id).unwrap();
            assert!(samp.sample_indices.contains(&si));
        }
        checked += 1;
    }
    verdict_line(
        "C03",
        true,
        &format!("Definitions 1-3 fixture exact; scope monotonicity held on {checked}/100 random datasets"),
    );
}

// ---- criterion 4: metric identities ----

#[test]
fn criterion_04_metric_identities() {
    // Perfect scores on identical images.
    let mut img = Image::new(20, 20);
    for (i, b) in img.data.iter_mut().enumerate() {
        *b = (i * 37 % 251) as u8;
    }
    assert_eq!(mae(&img, &img).unwrap(), 0.0);
    assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(perceptual_proxy(&img, &img).unwrap(), 0.0);

    // Brute-force oracle on a 5-sample instance with two unrelated models.
    let ds = generate_dataset(&DatasetConfig {
        n_samples: 5,
        image_size: 16,
        objects_min: 2,
        objects_max: 4,
        seed: 55,
        ..DatasetConfig::default()
    })
    .unwrap();
    let orig = GeneratorModel::init(16, &ds.vocab, 1);
    let unl = GeneratorModel::init(16, &ds.vocab, 2);
    let target = pick_default_target(&ds).unwrap();
    let request = UnlearnRequest::new([target.clone()], Scope::Object);
    let idx: Vec<usize> = ds.train_indices().collect();
    let grid = evaluate_a1a2a3(&orig, &unl, &ds, &idx, &request, Task::Reconstruction, "x")
        .unwrap();

    let brute = brute_force_grid(&orig, &unl, &ds, &target);
    let close = |a: f64, b: f64| (a - b).abs() < 1e-10 || (a.is_nan() && b.is_nan());
    let all_close = close(grid.a1.ssim, brute.0[0])
        && close(grid.a1.lp, brute.0[1])
        && close(grid.a1.mae, brute.0[2])
        && close(grid.a2.ssim, brute.1[0])
        && close(grid.a2.lp, brute.1[1])
        && close(grid.a2.mae, brute.1[2])
        && close(grid.a3.ssim, brute.2[0])
        && close(grid.a3.lp, brute.2[1])
        && close(grid.a3.mae, brute.2[2]);
    assert!(all_close, "grid {grid:?} vs brute force {brute:?}");

    // Complement transforms hold exactly.
    let complements_ok = (grid.c_a1_ssim() - (1.0 - grid.a1.ssim)).abs() == 0.0
        && (grid.c_a2_lp() - (1.0 - grid.a2.lp)).abs() == 0.0
        && (grid.c_a2_mae() - (255.0 - grid.a2.mae)).abs() == 0.0
        && (grid.c_a3_lp() - (1.0 - grid.a3.lp)).abs() == 0.0
        && (grid.c_a3_mae() - (255.0 - grid.a3.mae)).abs() == 0.0;
    assert!(complements_ok);

    verdict_line(
        "C04",
        true,
        "perfect self-scores; grid equals brute-force oracle to 1e-10; complements exact",
    );
}

/// Independent per-ROI re-computation of the grid: explicit population
/// rules, no batching, flat means for A1/A2 and per-sample means for A3.
fn brute_force_grid(
    orig: &GeneratorModel,
    unl: &GeneratorModel,
    ds: &Dataset,
    target: &str,
) -> ([f64; 3], [f64; 3], [f64; 3]) {
    use sgunlearn_core::img::resize_bilinear_f64;
    use sgunlearn_core::model::reconstruct;

    let score = |si: usize, ni: usize| -> (f64, f64, f64) {
        let s = &ds.samples[si];
        let a = reconstruct(orig, &s.image, &s.graph).unwrap();
        let b = reconstruct(unl, &s.image, &s.graph).unwrap();
        let node = &s.graph.nodes[ni];
        let rect = roi_of(node, a.width, a.height).unwrap();
        let rs = |img: &Image| {
            let c = img.crop(&rect);
            let f = resize_bilinear_f64(
                &c.to_f64_chw(),
                3,
                c.height,
                c.width,
                ROI_RESIZE,
                ROI_RESIZE,
            );
            Image::from_f64_chw(&f, ROI_RESIZE, ROI_RESIZE)
        };
        (
            ssim(&rs(&a), &rs(&b)).unwrap(),
            perceptual_proxy(&rs(&a), &rs(&b)).unwrap(),
            mae(&a.crop(&rect), &b.crop(&rect)).unwrap(),
        )
    };

    let (tsi, tni) = ds.find_object(target).unwrap();
    let target_cat = ds.samples[tsi].graph.nodes[tni].category.clone();

    let a1 = vec![score(tsi, tni)];
    let mut a2 = Vec::new();
    for (ni, node) in ds.samples[tsi].graph.nodes.iter().enumerate() {
        if !node.is_pad() && node.id != target {
            a2.push(score(tsi, ni));
        }
    }
    let mut a3_by_sample: Vec<Vec<(f64, f64, f64)>> = Vec::new();
    for si in ds.train_indices() {
        if si == tsi {
            continue;
        }
        let mut scores = Vec::new();
        for (ni, node) in ds.samples[si].graph.nodes.iter().enumerate() {
            if !node.is_pad() && node.category == target_cat {
                scores.push(score(si, ni));
            }
        }
        if !scores.is_empty() {
            a3_by_sample.push(scores);
        }
    }
    let mean3 = |v: &[(f64, f64, f64)]| -> [f64; 3] {
        let n = v.len() as f64;
        [
            v.iter().map(|x| x.0).sum::<f64>() / n,
            v.iter().map(|x| x.1).sum::<f64>() / n,
            v.iter().map(|x| x.2).sum::<f64>() / n,
        ]
    };
    let a3 = if a3_by_sample.is_empty() {
        [f64::NAN; 3]
    } else {
        let per: Vec<[f64; 3]> = a3_by_sample.iter().map(|v| mean3(v)).collect();
        let n = per.len() as f64;
        [
            per.iter().map(|x| x[0]).sum::<f64>() / n,
            per.iter().map(|x| x[1]).sum::<f64>() / n,
            per.iter().map(|x| x[2]).sum::<f64>() / n,
        ]
    };
    (mean3(&a1), mean3(&a2), a3)
}

// ---- criteria 5 and 6: Observation 2 and 3 orderings ----

#[test]
fn criterion_05_observation2_sample_ft_ordering() {
    let grid = seed_grid();
    let mut holds = 0;
    let mut details = Vec::new();
    for o in grid.iter() {
        let ok = o.a1_sft < 0.9 && o.a2_sft < o.a2_pa;
        holds += ok as usize;
        details.push(format!(
            "seed {}: A1(SFT) {:.3}, A2(SFT) {:.3} vs A2(PA) {:.3} -> {}",
            o.seed,
            o.a1_sft,
            o.a2_sft,
            o.a2_pa,
            if ok { "ok" } else { "violated" }
        ));
    }
    let pass = holds >= 4;
    verdict_line(
        "C05",
        pass,
        &format!("Sample-FT removes but degrades retained content on {holds}/5 seeds ({})", details.join("; ")),
    );
    assert!(pass, "{details:?}");
}

#[test]
fn criterion_06_observation3_masking_dominates() {
    let grid = seed_grid();
    let mut holds = 0;
    let mut details = Vec::new();
    for o in grid.iter() {
        let pa_ok = o.a1_pa < 0.9 && o.a2_pa >= 0.85 && o.a3_pa >= 0.85;
        let ns_ok = o.a1_ns < 0.9 && o.a2_ns >= 0.85 && o.a3_ns >= 0.85;
        let feat_ok = o.a3_pa > o.a3_featmk && o.a3_ns > o.a3_featmk;
        let ok = pa_ok && ns_ok && feat_ok;
        holds += ok as usize;
        details.push(format!(
            "seed {}: PA(A1 {:.3}, A2 {:.3}, A3 {:.3}) NS(A1 {:.3}, A2 {:.3}, A3 {:.3}) FeatMK(A3 {:.3}) -> {}",
            o.seed, o.a1_pa, o.a2_pa, o.a3_pa, o.a1_ns, o.a2_ns, o.a3_ns, o.a3_featmk,
            if ok { "ok" } else { "violated" }
        ));
    }
    let pass = holds >= 4;
    verdict_line(
        "C06",
        pass,
        &format!("masking methods dominate on {holds}/5 seeds ({})", details.join("; ")),
    );
    assert!(pass, "{details:?}");
}

// ---- criterion 7: runtime ordering ----

#[test]
fn criterion_07_runtime_ordering() {
    let run = reference_run();
    let paths = Paths::new(run.dir.path());
    let mut redaction = Vec::new();
    let mut finetune = Vec::new();
    let mut retrain = Vec::new();
    for entry in std::fs::read_dir(paths.runs()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().map(|e| e == "json") != Some(true) {
            continue;
        }
        let record: RunRecord =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        match record.method.as_str() {
            "Retrain" => retrain.push(record.wall_ms as f64),
            "Train" => {}
            m => match MethodId::parse(m).map(|id| id.class()) {
                Some("Redaction") => redaction.push(record.wall_ms as f64),
                Some("Fine-tune") => finetune.push(record.wall_ms as f64),
                _ => {}
            },
        }
    }
    // All nine baselines plus the retrain oracle must have run.
    assert_eq!(redaction.len(), 2, "two redaction-class methods");
    assert_eq!(finetune.len(), 7, "seven fine-tune-class methods");
    assert_eq!(retrain.len(), 1, "one retrain oracle");
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (r, f, t) = (mean(&redaction), mean(&finetune), mean(&retrain));
    let ordering = r < f && f < t;
    let ratios = t / f >= 3.0 && f / r >= 10.0;
    let pass = ordering && ratios;
    verdict_line(
        "C07",
        pass,
        &format!(
            "mean wall ms: Redaction {r:.0} < Fine-tune {f:.0} < Retrain {t:.0}; Retrain/FT {:.1}x (>=3), FT/Redaction {:.1}x (>=10)",
            t / f,
            f / r
        ),
    );
    assert!(pass);
}

// ---- criterion 8: lambda sweep and module ablation ----

#[test]
fn criterion_08_lambda_sweep_and_module_ablation() {
    let run = reference_run();
    let rows = cmd_sweep(&run.cfg).expect("sweep");
    let grl: Vec<_> = rows.iter().filter(|r| r.partitions == "grl").collect();
    assert_eq!(grl.len(), run.cfg.sweep.lambda_grid.len());
    let mut strictly_increasing = true;
    for w in grl.windows(2) {
        if !(w[1].theta_delta_norm > w[0].theta_delta_norm) {
            strictly_increasing = false;
        }
    }

    let all_label = "encoder+grl+layout+decoder";
    let max_lambda = run
        .cfg
        .sweep
        .lambda_grid
        .iter()
        .cloned()
        .fold(f64::MIN, f64::max);
    let a2_of = |parts: &str| -> f64 {
        rows.iter()
            .find(|r| r.partitions == parts && r.lambda == max_lambda)
            .and_then(|r| r.report.as_ref())
            .map(|rep| rep.a2.ssim)
            .unwrap_or(f64::NAN)
    };
    let a2_grl = a2_of("grl");
    let a2_all = a2_of(all_label);
    let ablation_ok = a2_all <= a2_grl;
    let pass = strictly_increasing && ablation_ok;
    verdict_line(
        "C08",
        pass,
        &format!(
            "|theta' - theta*| strictly increasing over {} lambdas; A2_SSIM(all) {a2_all:.3} <= A2_SSIM(grl) {a2_grl:.3} at lambda {max_lambda}",
            grl.len()
        ),
    );
    assert!(pass);
}

// ---- criterion 9: leakage robustness ----

#[test]
fn criterion_09_leakage_robustness() {
    let grid = seed_grid();
    let mut holds = 0;
    let mut details = Vec::new();
    for o in grid.iter() {
        let ok = o.pa_verdict == Verdict::Robust && o.control_fuzzy_recovery >= 0.5;
        holds += ok as usize;
        details.push(format!(
            "seed {}: verdict {:?}, control fuzzy recovery {:.3} -> {}",
            o.seed,
            o.pa_verdict,
            o.control_fuzzy_recovery,
            if ok { "ok" } else { "violated" }
        ));
    }
    let pass = holds >= 4;
    verdict_line(
        "C09",
        pass,
        &format!(
            "Obj-MK-PA robust to all applicable attacks (tau 0.05) with a non-vacuous control on {holds}/5 seeds ({})",
            details.join("; ")
        ),
    );
    assert!(pass, "{details:?}");
}

// ---- criterion 10: end-to-end determinism ----

#[test]
fn criterion_10_end_to_end_determinism() {
    let mk = |dir: &std::path::Path| {
        let mut cfg = reference_config(dir);
        cfg.dataset.n_samples = 24;
        cfg.dataset.seed = 70;
        cfg.train.seed = 70;
        cfg.train.epochs = 6;
        cfg.method_cfg.epochs_ft = 2;
        cfg.method_cfg.cg_max_iter = 1;
        cfg.methods.list = vec![
            "Sample-FT".into(),
            "Obj-IF".into(),
            "Obj-MK-PA".into(),
            "Obj-MK-NS".into(),
        ];
        cfg.attack.methods = vec!["Obj-MK-PA".into()];
        cfg
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let h1 = run_full_pipeline(&mk(d1.path())).unwrap();
    let h2 = run_full_pipeline(&mk(d2.path())).unwrap();
    let a = artifact_digests(d1.path()).unwrap();
    let b = artifact_digests(d2.path()).unwrap();
    let identical = h1 == h2 && a == b;
    verdict_line(
        "C10",
        identical,
        &format!(
            "manifest hashes equal; {} artifacts byte-identical with timing fields excluded",
            a.len()
        ),
    );
    assert_eq!(h1, h2, "manifest hashes differ");
    for (path, digest) in &a {
        assert_eq!(Some(digest), b.get(path), "artifact {path} differs");
    }
    assert_eq!(a.len(), b.len());
}

// ---- criterion 11: full pipeline wall time ----

#[test]
fn criterion_11_full_reference_pipeline_runtime() {
    let run = reference_run();
    let pass = run.pipeline_seconds < 1800.0;
    verdict_line(
        "C11",
        pass,
        &format!(
            "gen-data + train + unlearn x9 + retrain + evaluate x2 + attack + report in {:.0}s < 1800s (manifest {})",
            run.pipeline_seconds,
            &run.manifest_hash[..12]
        ),
    );
    assert!(pass);
}

// ---- auxiliary: unlearned-object latents drift (consumed by Fig. 6 flow) ----

#[test]
fn latents_of_unlearned_object_move() {
    let run = reference_run();
    let paths = Paths::new(run.dir.path());
    let read = |name: &str| -> Vec<(String, Vec<f64>)> {
        let text =
            std::fs::read_to_string(paths.reports().join(format!("latents_{name}.csv"))).unwrap();
        text.lines()
            .skip(1)
            .map(|l| {
                let fields: Vec<&str> = l.split(',').collect();
                (
                    fields[1].to_string(),
                    fields[3..].iter().map(|v| v.parse().unwrap()).collect(),
                )
            })
            .collect()
    };
    let orig = read("Original");
    let unl = read("Obj-MK-PA");
    assert_eq!(orig.len(), unl.len());

    // The requested object's refined embedding must move.
    let dataset_dir = paths.data();
    let ds = sgunlearn_core::synth::load_dataset(dataset_dir).unwrap();
    let target = pick_default_target(&ds).unwrap();
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let pos = orig.iter().position(|(id, _)| *id == target).unwrap();
    let moved = dist(&orig[pos].1, &unl[pos].1);
    assert!(
        moved > 0.0,
        "unlearned object's latent did not move at all"
    );
}

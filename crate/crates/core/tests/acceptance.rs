//! Acceptance suite. Runs every criterion in order on one thread, prints one
//! PASS/FAIL line per criterion and exits non-zero if any failed.
//!
//! Criteria run sequentially so the timing benchmark is not disturbed and the
//! super-resolution check can reuse the model trained for the smoothing check.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pit_core::attention::{loc_pos_att, pos_att, position_weights, self_att, self_pos_att, HeadWeights, LambdaMode};
use pit_core::autodiff::Tape;
use pit_core::config::RunConfig;
use pit_core::data::{Split, TaskSpec};
use pit_core::geometry::{pairwise_sq_dist, quantile_radii, Mesh};
use pit_core::gradcheck::{full_suite, run_gradcheck, GradcheckConfig};
use pit_core::harness::{
    scaling_benchmark, super_resolution_sweep, theorem1_experiment, ScalingConfig, Theorem1Config,
};
use pit_core::model::{PiTConfig, PiTModel, Variant};
use pit_core::training::{evaluate, train, Adam, Metric, TrainConfig};
use pit_core::Tensor2;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn max_abs_diff(a: &Tensor2, b: &Tensor2) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
    Tensor2::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn cloud(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Mesh {
    Mesh::point_cloud(Tensor2::from_fn(n, dim, |_, _| rng.random::<f64>())).unwrap()
}

fn gradients() -> Outcome {
    let base = GradcheckConfig::default();
    let reports = full_suite(&base).unwrap();
    let worst = reports.iter().map(|r| r.max_error()).fold(0.0, f64::max);
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{}/{}", r.variant.name(), r.lambda_mode.name()))
        .collect();
    let checked: usize = reports.iter().map(|r| r.params.len()).sum();
    outcome(
        failed.is_empty() && worst < 1e-5,
        format!("{checked} parameter tensors over 4 variants x 2 modes, max rel error {worst:.2e} {failed:?}"),
    )
}

fn kernel_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, c, dv) = (40, 3, 4);
    let mesh = cloud(&mut rng, n, 2);
    let d = pairwise_sq_dist(&mesh, &mesh).unwrap();
    let lambda = 7.5;
    let head = HeadWeights {
        lambda,
        w_v: random(&mut rng, c, dv),
        w_q: Some(random(&mut rng, c, dv)),
        w_k: Some(random(&mut rng, c, dv)),
    };
    let pos = HeadWeights::positional(lambda, head.w_v.clone());
    let u = random(&mut rng, n, c);
    let v = random(&mut rng, n, c);

    let mut notes = Vec::new();
    let mut ok = true;
    let mut check = |name: &str, err: f64, tol: f64| {
        if !(err <= tol) {
            ok = false;
        }
        notes.push(format!("{name} {err:.1e}"));
    };

    let field = quantile_radii(&d, 0.3).unwrap();
    let mut row_err = 0.0_f64;
    for w in [
        position_weights(&d, lambda, None).unwrap(),
        position_weights(&d, lambda, Some(&field)).unwrap(),
    ] {
        for i in 0..w.rows() {
            let s: f64 = (0..w.cols()).map(|j| w.get(i, j)).sum();
            row_err = row_err.max((s - 1.0).abs());
        }
    }
    check("rows", row_err, 1e-12);

    let (alpha, beta) = (1.7, -0.6);
    let mix = u.scale(alpha).add(&v.scale(beta)).unwrap();
    let lhs = pos_att(&mix, &d, &pos).unwrap();
    let rhs = pos_att(&u, &d, &pos)
        .unwrap()
        .scale(alpha)
        .add(&pos_att(&v, &d, &pos).unwrap().scale(beta))
        .unwrap();
    check("linear", max_abs_diff(&lhs, &rhs), 1e-10);

    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let pm = Mesh::point_cloud(Tensor2::from_fn(n, 2, |i, j| mesh.points().get(perm[i], j))).unwrap();
    let pu = Tensor2::from_fn(n, c, |i, j| u.get(perm[i], j));
    let pd = pairwise_sq_dist(&pm, &pm).unwrap();
    let mut perm_err = 0.0_f64;
    for (base, moved) in [
        (pos_att(&u, &d, &pos).unwrap(), pos_att(&pu, &pd, &pos).unwrap()),
        (self_att(&u, &head).unwrap(), self_att(&pu, &head).unwrap()),
        (
            self_pos_att(&u, &d, &head).unwrap(),
            self_pos_att(&pu, &pd, &head).unwrap(),
        ),
    ] {
        let back = Tensor2::from_fn(n, dv, |i, j| base.get(perm[i], j));
        perm_err = perm_err.max(max_abs_diff(&back, &moved));
    }
    check("perm", perm_err, 1e-12);

    let whole = quantile_radii(&d, 1.0).unwrap();
    let loc = loc_pos_att(&u, &whole, &d, &pos).unwrap();
    check("local(q=1)", max_abs_diff(&loc, &pos_att(&u, &d, &pos).unwrap()), 1e-12);

    let zero_qk = HeadWeights {
        w_q: Some(Tensor2::zeros(c, dv)),
        w_k: Some(Tensor2::zeros(c, dv)),
        ..head.clone()
    };
    let sp = self_pos_att(&u, &d, &zero_qk).unwrap();
    check(
        "selfpos(QK=0)",
        max_abs_diff(&sp, &pos_att(&u, &d, &pos).unwrap()),
        1e-12,
    );
    let no_lambda = HeadWeights {
        lambda: 0.0,
        ..head.clone()
    };
    let sp = self_pos_att(&u, &d, &no_lambda).unwrap();
    check("selfpos(l=0)", max_abs_diff(&sp, &self_att(&u, &head).unwrap()), 1e-12);

    outcome(ok, notes.join(", "))
}

fn smooth_field(y: &[f64]) -> Vec<f64> {
    vec![(2.0 * PI * y[0]).sin() * (PI * y[1]).cos() + 0.5 * (2.0 * PI * (y[0] + y[1])).cos()]
}

fn quadrature_convergence() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for lambda in [1.0, 10.0] {
        let cfg = Theorem1Config {
            dim: 2,
            lambda,
            w_v: Tensor2::identity(1),
            n_list: vec![64, 256, 1024],
            repetitions: 20,
            seed: 0,
        };
        let rep = theorem1_experiment(&cfg, &smooth_field).unwrap();
        let medians: Vec<String> = rep.rows.iter().map(|r| format!("{:.3e}", r.median)).collect();
        let good = rep.medians_decrease() && (-0.75..=-0.25).contains(&rep.slope);
        ok &= good;
        notes.push(format!(
            "lambda {lambda}: medians [{}] slope {:.3}",
            medians.join(" "),
            rep.slope
        ));
    }
    outcome(ok, notes.join("; "))
}

fn smoothing_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.task = TaskSpec {
        n_train: 256,
        n_test: 64,
        resolution: 64,
        output_resolution: 64,
        ..cfg.task
    };
    cfg.model.encoding_dim = 32;
    cfg.model.depth = 4;
    cfg.model.latent_shape = vec![32];
    cfg.train.epochs = 500;
    cfg.train.batch_size = 4;
    cfg.train.metric = Metric::RelL2Mean;
    cfg.sync();
    cfg
}

fn learn_smoothing(trained: &mut Option<(PiTModel, TaskSpec)>) -> Outcome {
    let cfg = smoothing_run_config();
    let tr = cfg.task.generate(Split::Train).unwrap();
    let te = cfg.task.generate(Split::Test).unwrap();
    let mut model = PiTModel::build_for(cfg.model.clone(), &tr.input_mesh, cfg.seed).unwrap();
    let log = train(&mut model, &tr, &te, &cfg.train, |_| {}).unwrap();
    let err = log.test_metric;
    let last = log.epochs.last().unwrap().loss;
    *trained = Some((model, cfg.task.clone()));
    outcome(
        err < 0.05,
        format!("test rel l2 {err:.4} (bar 0.05), final train loss {last:.4}"),
    )
}

fn super_resolution(trained: &Option<(PiTModel, TaskSpec)>) -> Outcome {
    let Some((model, task)) = trained else {
        return outcome(false, "no trained model");
    };
    let rep = super_resolution_sweep(model, task, &[64, 128, 256], Metric::RelL2Mean).unwrap();
    let (e64, e256) = (rep.error_at(64).unwrap(), rep.error_at(256).unwrap());
    let errs: Vec<String> = rep.errors.iter().map(|e| format!("{e:.4}")).collect();
    outcome(
        e256 <= 2.0 * e64,
        format!("rel l2 at 64/128/256 = [{}], ratio {:.3}", errs.join(" "), e256 / e64),
    )
}

fn scaling() -> Outcome {
    let model = PiTConfig {
        encoding_dim: 32,
        mlp_hidden: 32,
        latent_shape: vec![64],
        ..PiTConfig::default()
    };
    let rep = scaling_benchmark(&model, &ScalingConfig::default()).unwrap();
    let ratio = rep.end_ratio();
    let times: Vec<String> = rep.seconds.iter().map(|s| format!("{:.1}ms", s * 1e3)).collect();
    outcome(
        rep.fit.r_squared >= 0.95 && ratio < 4.5,
        format!(
            "forward [{}], R^2 {:.4}, ratio {:.2}",
            times.join(" "),
            rep.fit.r_squared,
            ratio
        ),
    )
}

fn table_model(dim: usize, dv: usize, decoder_block: bool) -> PiTModel {
    let cfg = PiTConfig {
        dim,
        encoding_dim: dv,
        mlp_hidden: dv,
        depth: 4,
        heads: 2,
        decoder_block,
        latent_shape: vec![4; dim],
        ..PiTConfig::default()
    };
    PiTModel::build(cfg, Mesh::periodic_unit_grid(&vec![4; dim]).unwrap(), 0).unwrap()
}

fn parameter_counts() -> Outcome {
    let darcy = table_model(2, 128, false);
    let burgers = table_model(1, 64, true);
    let (d, b) = (darcy.count_params(), burgers.count_params());
    let agree = darcy.config.param_count() == d && burgers.config.param_count() == b;
    outcome(
        d == 313_613 && b == 95_503 && agree,
        format!("darcy {d} (want 313613), burgers {b} (want 95503)"),
    )
}

fn lambda_integrity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, batch) = (12, 2);
    let mesh = cloud(&mut rng, n, 1);
    let cfg = PiTConfig {
        encoding_dim: 8,
        mlp_hidden: 8,
        depth: 2,
        latent_shape: vec![6],
        lambda_mode: LambdaMode::Tan,
        quantile_in: 0.5,
        quantile_out: 0.5,
        ..PiTConfig::default()
    };
    let mut model = PiTModel::build_for(cfg, &mesh, 5).unwrap();
    let mut adam = Adam::with_defaults(&model.store);
    let upper = PI / 2.0 - 1e-4;
    let (mut violations, mut at_zero, mut at_upper) = (0, 0, 0);
    for _ in 0..1000 {
        let mut tape = Tape::new();
        let x = tape.constant(random(&mut rng, batch * n, 1));
        let y = model.forward(&mut tape, x, batch, &mesh, &mesh).unwrap();
        let scale = rng.random_range(-50.0..50.0);
        let target = tape.constant(random(&mut rng, batch * n, 1).scale(scale));
        let r = tape.sub(y, target).unwrap();
        let sq = tape.square(r).unwrap();
        let loss = tape.mean(sq).unwrap();
        model.store.zero_grad();
        tape.backward_into(loss, &mut model.store).unwrap();
        adam.step(&mut model.store, 0.05).unwrap();
        for (_, p) in model.store.iter() {
            if !p.name.ends_with("lambda") {
                continue;
            }
            let raw = p.value.data()[0];
            let eff = LambdaMode::Tan.effective(raw);
            if !(0.0..=upper).contains(&raw) || !(eff >= 0.0) {
                violations += 1;
            }
            at_zero += usize::from(raw == 0.0);
            at_upper += usize::from(raw == upper);
        }
    }
    outcome(
        violations == 0,
        format!("{violations} violations; projections hit 0 {at_zero} and the upper bound {at_upper} times"),
    )
}

fn ablation_plumbing() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let task = TaskSpec::default();
    let tr = task.generate(Split::Train).unwrap();
    let te = task.generate(Split::Test).unwrap();
    for variant in [Variant::SelfAttA, Variant::SelfAttB] {
        for lambda_mode in [LambdaMode::Square, LambdaMode::Tan] {
            let rep = run_gradcheck(&GradcheckConfig {
                variant,
                lambda_mode,
                ..GradcheckConfig::default()
            })
            .unwrap();
            ok &= rep.passed();
        }
        let cfg = PiTConfig {
            variant,
            ..PiTConfig::default()
        };
        let mut model = PiTModel::build_for(cfg, &tr.input_mesh, 0).unwrap();
        let tc = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        match train(&mut model, &tr, &te, &tc, |_| {}) {
            Ok(log) => {
                let err = evaluate(&model, &te, Metric::RelL2Mean).unwrap();
                ok &= log.epochs.len() == 1 && err.is_finite();
                notes.push(format!(
                    "{}: {} params, 1-epoch test rel l2 {err:.3}",
                    variant.name(),
                    model.count_params()
                ));
            }
            Err(e) => {
                ok = false;
                notes.push(format!("{}: {e}", variant.name()));
            }
        }
    }
    outcome(ok, notes.join("; "))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.cfg");
    std::fs::write(
        &config,
        "seed = 13\ntask.n_train = 16\ntask.n_test = 4\ntask.resolution = 32\ntask.output_resolution = 32\n\
         model.encoding_dim = 16\nmodel.mlp_hidden = 16\nmodel.depth = 2\nmodel.latent_shape = 16\n\
         train.epochs = 5\ntrain.batch_size = 4\n",
    )
    .unwrap();
    let mut bytes = Vec::new();
    let mut logs = Vec::new();
    for run in 0..2 {
        let ckpt = dir.path().join(format!("m{run}.pitd"));
        let args = [
            "pit",
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
        ];
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = pit_core::cli::run(args, &mut out, &mut err);
        if code != 0 {
            return outcome(false, format!("train exited {code}: {}", String::from_utf8_lossy(&err)));
        }
        bytes.push(std::fs::read(&ckpt).unwrap());
        // Drop the wall-clock column before comparing logs.
        let text = String::from_utf8(out).unwrap();
        logs.push(
            text.lines()
                .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
                .collect::<Vec<_>>(),
        );
    }
    outcome(
        bytes[0] == bytes[1] && logs[0] == logs[1],
        format!(
            "{} checkpoint bytes, identical = {}",
            bytes[0].len(),
            bytes[0] == bytes[1]
        ),
    )
}

fn main() {
    let mut trained = None;
    let mut failures = 0;
    let mut run = |index: usize, name: &str, budget: Duration, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f));
        let took = start.elapsed();
        let (pass, detail) = match result {
            Ok(o) => (o.pass && took <= budget, o.detail),
            Err(p) => (
                false,
                p.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into()),
            ),
        };
        failures += usize::from(!pass);
        println!(
            "criterion {index:>2} {name}: {} ({detail}; {:.1}s of {}s)",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            budget.as_secs()
        );
    };
    run(1, "gradient correctness", Duration::from_secs(30), &mut gradients);
    run(2, "kernel algebra", Duration::from_secs(10), &mut kernel_algebra);
    run(
        3,
        "quadrature convergence",
        Duration::from_secs(120),
        &mut quadrature_convergence,
    );
    run(4, "smoothing operator", Duration::from_secs(600), &mut || {
        learn_smoothing(&mut trained)
    });
    run(5, "zero-shot super-resolution", Duration::from_secs(60), &mut || {
        super_resolution(&trained)
    });
    run(6, "complexity scaling", Duration::from_secs(60), &mut scaling);
    run(7, "parameter counts", Duration::from_secs(1), &mut parameter_counts);
    run(8, "lambda constraint", Duration::from_secs(30), &mut lambda_integrity);
    run(9, "ablation plumbing", Duration::from_secs(60), &mut ablation_plumbing);
    run(10, "determinism", Duration::from_secs(60), &mut determinism);
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}

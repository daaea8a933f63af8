//! Acceptance suite. Every test prints one `PASS`/`FAIL` line to stderr
//! (bypassing output capture) and then asserts on the same verdict.

use std::io::Write as _;
use std::time::Instant;

use lion_core::deq::{Activation, DeqCell, SolverConfig};
use lion_core::harness::{
    pretrain_backbone, run_protocol, verify_proposition1, PretrainConfig, Pretrained, Prop1Config, Protocol,
    ProtocolConfig, TaskSpec, TunedModel,
};
use lion_core::lion::{
    param_count_report, Affine, Backbone, Classifier, GatePair, PromptConfig, PromptModel, TuneMode,
};
use lion_core::numerics::Param;
use lion_core::persist::{
    records_from_csv, records_to_csv, tuned_from_checkpoint, tuned_to_checkpoint, Checkpoint, RunConfig, RunRecord,
};
use lion_core::rng;
use lion_core::robust_opt::{
    partition, train, train_sgd, OptState, Repartition, ShrinkRule, ThresholdRule, TrainConfig, Trainable,
};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::Rng as _;

fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{tag}] criterion {n} ({name}): {detail}");
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    let diff: Vec<f64> = got.iter().zip(want).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(want).max(1e-300)
}

fn bits(t: &[f64]) -> Vec<u64> {
    t.iter().map(|v| v.to_bits()).collect()
}

fn param_bits(params: &[Param]) -> Vec<Vec<u64>> {
    params.iter().map(|p| bits(p.value.data())).collect()
}

fn backbone_bits(b: &Backbone) -> Vec<(String, Vec<u64>)> {
    b.named_tensors()
        .into_iter()
        .map(|(n, t)| (n, bits(t.data())))
        .collect()
}

/// Seeded tanh cell with `W` normalised to spectral norm 0.9, plus an input
/// and a cotangent, for case `i` of the 20-case suites.
fn suite_case(i: u64) -> (DeqCell, Vec<f64>, Vec<f64>) {
    let mut r = rng::substream(2024, 7, i);
    let h = r.random_range(2..=16);
    let d = r.random_range(2..=16);
    let cell = DeqCell::init(h, d, 0.9, Activation::Tanh, &mut r).unwrap();
    let x = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
    let y = (0..h).map(|_| r.random_range(-1.0..1.0)).collect();
    (cell, x, y)
}

// Reference equilibrium cell on raw slices, written independently of the library.

struct Raw {
    h: usize,
    d: usize,
    w: Vec<f64>,
    u: Vec<f64>,
    b: Vec<f64>,
}

impl Raw {
    fn of(cell: &DeqCell) -> Self {
        Raw {
            h: cell.w.rows(),
            d: cell.u.cols(),
            w: cell.w.data().to_vec(),
            u: cell.u.data().to_vec(),
            b: cell.b.data().to_vec(),
        }
    }

    fn pre(&self, z: &[f64], x: &[f64]) -> Vec<f64> {
        (0..self.h)
            .map(|i| {
                let wz: f64 = (0..self.h).map(|j| self.w[i * self.h + j] * z[j]).sum();
                let ux: f64 = (0..self.d).map(|j| self.u[i * self.d + j] * x[j]).sum();
                wz + ux + self.b[i]
            })
            .collect()
    }

    fn step(&self, z: &[f64], x: &[f64]) -> Vec<f64> {
        self.pre(z, x).into_iter().map(f64::tanh).collect()
    }

    fn equilibrium(&self, x: &[f64], z0: &[f64]) -> Vec<f64> {
        let mut z = z0.to_vec();
        for _ in 0..20_000 {
            let next = self.step(&z, x);
            let delta = next.iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            z = next;
            if delta < 1e-15 {
                break;
            }
        }
        z
    }

    /// Flat `(x, W, U, b)` layout shared by both oracles.
    fn pack(&self, x: &[f64]) -> Vec<f64> {
        [x, &self.w, &self.u, &self.b].concat()
    }

    fn unpack(&self, flat: &[f64]) -> (Vec<f64>, Raw) {
        let (d, h) = (self.d, self.h);
        let (x, rest) = flat.split_at(d);
        let (w, rest) = rest.split_at(h * h);
        let (u, b) = rest.split_at(h * d);
        let raw = Raw {
            h,
            d,
            w: w.to_vec(),
            u: u.to_vec(),
            b: b.to_vec(),
        };
        (x.to_vec(), raw)
    }

    fn finite_differences(&self, x: &[f64], y: &[f64], step: f64) -> Vec<f64> {
        let base = self.pack(x);
        let z_star = self.equilibrium(x, &vec![0.0; self.h]);
        let objective = |flat: &[f64]| {
            let (xv, cell) = self.unpack(flat);
            cell.equilibrium(&xv, &z_star)
                .iter()
                .zip(y)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        (0..base.len())
            .map(|k| {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus[k] += step;
                minus[k] -= step;
                (objective(&plus) - objective(&minus)) / (2.0 * step)
            })
            .collect()
    }

    fn unrolled(&self, x: &[f64], y: &[f64], iters: usize) -> Vec<f64> {
        let (h, d) = (self.h, self.d);
        let mut zs = vec![vec![0.0; h]];
        let mut pres = Vec::new();
        for _ in 0..iters {
            let pre = self.pre(zs.last().unwrap(), x);
            zs.push(pre.iter().map(|p| p.tanh()).collect());
            pres.push(pre);
        }
        let (mut gx, mut gw, mut gu, mut gb) = (vec![0.0; d], vec![0.0; h * h], vec![0.0; h * d], vec![0.0; h]);
        let mut adj = y.to_vec();
        for k in (0..iters).rev() {
            let s: Vec<f64> = (0..h).map(|i| adj[i] * (1.0 - pres[k][i].tanh().powi(2))).collect();
            for i in 0..h {
                for j in 0..h {
                    gw[i * h + j] += s[i] * zs[k][j];
                }
                for j in 0..d {
                    gu[i * d + j] += s[i] * x[j];
                    gx[j] += s[i] * self.u[i * d + j];
                }
                gb[i] += s[i];
            }
            adj = (0..h).map(|j| (0..h).map(|i| self.w[i * h + j] * s[i]).sum()).collect();
        }
        [gx, gw, gu, gb].concat()
    }
}

#[test]
fn criterion_1_implicit_gradients_match_oracles() {
    let start = Instant::now();
    let solver = SolverConfig::default();
    let (mut worst_fd, mut worst_unroll) = (0.0f64, 0.0f64);
    for i in 0..20 {
        let (cell, x, y) = suite_case(i);
        let fwd = cell.solve_forward(&x, &solver, None).unwrap();
        assert!(fwd.converged, "case {i} did not converge");
        let g = cell.vjp(fwd.z_star.data(), &x, &y, &solver).unwrap();
        let implicit = [g.x.as_slice(), g.w.data(), g.u.data(), g.b.data()].concat();
        let raw = Raw::of(&cell);
        worst_fd = worst_fd.max(rel_err(&implicit, &raw.finite_differences(&x, &y, 1e-5)));
        worst_unroll = worst_unroll.max(rel_err(&implicit, &raw.unrolled(&x, &y, 500)));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "implicit gradients",
        worst_fd <= 1e-4 && worst_unroll <= 1e-5 && secs < 30.0,
        &format!("20 cells, max rel err vs FD {worst_fd:.2e} (<= 1e-4), vs unrolled {worst_unroll:.2e} (<= 1e-5), {secs:.1}s"),
    );
}

#[test]
fn criterion_2_solver_contract() {
    let anderson = SolverConfig::default();
    let picard = SolverConfig::picard();
    let tol = anderson.tol;
    let (mut faster, mut worst_residual, mut worst_spread) = (0, 0.0f64, 0.0f64);
    let mut all_converged = true;
    for i in 0..20 {
        let (cell, x, _) = suite_case(i);
        let raw = Raw::of(&cell);
        let residual = |z: &[f64]| {
            let fz = raw.step(z, &x);
            norm(&fz.iter().zip(z).map(|(a, b)| a - b).collect::<Vec<_>>())
        };
        let a = cell.solve_forward(&x, &anderson, None).unwrap();
        let p = cell.solve_forward(&x, &picard, None).unwrap();
        all_converged &= a.converged && p.converged;
        worst_residual = worst_residual
            .max(residual(a.z_star.data()))
            .max(residual(p.z_star.data()));
        if a.iterations < p.iterations {
            faster += 1;
        }
        let mut r = rng::substream(2024, 8, i);
        let h = cell.state_dim();
        let inits: Vec<Vec<f64>> = (0..5)
            .map(|k| {
                (0..h)
                    .map(|_| if k == 0 { 0.0 } else { r.random_range(-3.0..3.0) })
                    .collect()
            })
            .collect();
        let sols: Vec<Vec<f64>> = inits
            .iter()
            .map(|z0| {
                let rep = cell.solve_forward(&x, &anderson, Some(z0)).unwrap();
                all_converged &= rep.converged;
                worst_residual = worst_residual.max(residual(rep.z_star.data()));
                rep.z_star.into_data()
            })
            .collect();
        for s in &sols[1..] {
            let diff: Vec<f64> = s.iter().zip(&sols[0]).map(|(a, b)| a - b).collect();
            worst_spread = worst_spread.max(norm(&diff));
        }
    }
    verdict(
        2,
        "solver contract",
        all_converged && worst_residual <= tol && faster >= 18 && worst_spread <= 10.0 * tol,
        &format!(
            "max residual {worst_residual:.2e} (<= {tol:e}), Anderson faster on {faster}/20 (>= 18), \
             max spread over 5 inits {worst_spread:.2e} (<= {:e})",
            10.0 * tol
        ),
    );
}

#[test]
fn criterion_3_gate_simplex() {
    let mut runner = TestRunner::new(PropConfig {
        cases: 2000,
        ..PropConfig::default()
    });
    let mut checked = 0usize;
    let mut result = runner.run(&(-1000.0f64..=1000.0, -1000.0f64..=1000.0), |(ga, gb)| {
        let (a, b) = GatePair::new(ga, gb).coeffs();
        prop_assert_eq!(a + b, 1.0);
        prop_assert!(
            a > 0.0 && a < 1.0 && b > 0.0 && b < 1.0,
            "({}, {}) -> ({}, {})",
            ga,
            gb,
            a,
            b
        );
        Ok(())
    });
    checked += 2000;
    for (ga, gb) in [
        (1000.0, -1000.0),
        (-1000.0, 1000.0),
        (1000.0, 1000.0),
        (0.0, 0.0),
        (36.0, 0.0),
        (-37.5, 0.0),
    ] {
        let (a, b) = GatePair::new(ga, gb).coeffs();
        checked += 1;
        if !(a + b == 1.0 && a > 0.0 && a < 1.0 && b > 0.0 && b < 1.0) && result.is_ok() {
            result = Err(proptest::test_runner::TestError::Fail(
                format!("({ga}, {gb}) -> ({a}, {b})").into(),
                (ga, gb),
            ));
        }
    }
    verdict(
        3,
        "gate simplex",
        result.is_ok(),
        &match &result {
            Ok(()) => format!("{checked} gate pairs in [-1000, 1000]: alpha + beta == 1 exactly, both in (0, 1)"),
            Err(e) => e.to_string(),
        },
    );
}

fn small_pretrained(seed: u64) -> (Pretrained, lion_core::harness::Task) {
    let spec = TaskSpec {
        train_samples: 200,
        test_samples: 200,
        ..TaskSpec::desk(seed)
    };
    let task = spec.build().unwrap();
    let cfg = PretrainConfig {
        hidden: vec![64],
        ..PretrainConfig::default()
    };
    (pretrain_backbone(&task.source_train, &cfg, seed).unwrap(), task)
}

fn short_run(epochs: usize, seed: u64) -> ProtocolConfig {
    ProtocolConfig {
        train: TrainConfig {
            epochs,
            seed,
            patience: None,
            ..TrainConfig::default()
        },
        ..ProtocolConfig::default()
    }
}

#[test]
fn criterion_4_backbone_frozen() {
    let (pre, task) = small_pretrained(3);
    let before = backbone_bits(&pre.backbone);
    let run = run_protocol(
        Protocol::Lion,
        &pre,
        &task.target_train,
        &task.target_test,
        &short_run(15, 3),
    )
    .unwrap();
    let after = backbone_bits(run.model.backbone());
    let steps = run.log.steps.len();
    let pass = before == after && run.model.backbone().frozen && steps > 0;
    verdict(
        4,
        "frozen backbone",
        pass,
        &format!(
            "{} backbone tensors bit-identical after {} epochs / {steps} LION steps",
            before.len(),
            run.result.epochs
        ),
    );
}

#[test]
fn criterion_5_proposition_1() {
    let start = Instant::now();
    let rep = verify_proposition1(&Prop1Config::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let min_out = rep.output_side_losses.iter().copied().fold(f64::INFINITY, f64::min);
    let pass = rep.input_side_loss <= 1e-3
        && rep.output_side_losses.len() == 10
        && min_out >= 0.5
        && rep.control_loss <= 1e-3
        && secs < 60.0;
    verdict(
        5,
        "input/output asymmetry",
        pass,
        &format!(
            "input side {:.2e} (<= 1e-3), output side min over {} restarts {min_out:.3} (>= 0.5), \
             control {:.2e} (<= 1e-3), {secs:.1}s, verdict `{}`",
            rep.input_side_loss,
            rep.output_side_losses.len(),
            rep.control_loss,
            rep.verdict()
        ),
    );
}

fn prompt_model(seed: u64) -> (PromptModel, lion_core::harness::Dataset) {
    let (pre, task) = small_pretrained(seed);
    let cfg = PromptConfig {
        classes: task.target_train.classes,
        ..PromptConfig::default()
    };
    (PromptModel::new(pre.backbone, &cfg, seed).unwrap(), task.target_train)
}

#[test]
fn criterion_6_robust_optimizer_semantics() {
    // Partition: exhaustive, exclusive, cutoff at the ceil(tau*M)-th smallest score.
    let mut runner = TestRunner::new(PropConfig {
        cases: 500,
        ..PropConfig::default()
    });
    let strategy = (proptest::collection::vec(0.0f64..10.0, 1..300), 2u32..200)
        .prop_flat_map(|(scores, den)| (Just(scores), 1..den, Just(den)));
    let partition_ok = runner
        .run(&strategy, |(mut scores, num, den)| {
            // Coarse values force ties at the cutoff.
            scores.iter_mut().for_each(|s| *s = (*s * 4.0).round() / 4.0);
            let m = scores.len();
            let k = (num as usize * m).div_ceil(den as usize);
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            let cutoff = sorted[k.clamp(1, m) - 1];
            let p = partition(&scores, ThresholdRule::Quantile(num as f64 / den as f64)).unwrap();
            prop_assert_eq!(p.threshold_value, cutoff);
            prop_assert_eq!(p.crucial.len(), m);
            let non = p.noncrucial_mask();
            prop_assert_eq!(p.crucial_count() + non.iter().filter(|&&b| b).count(), m);
            for i in 0..m {
                prop_assert!(p.crucial[i] != non[i]);
                prop_assert_eq!(p.crucial[i], scores[i] >= cutoff);
            }
            Ok(())
        })
        .is_ok();

    // All-crucial setting against plain gradient descent on the prompt model.
    let (model, data) = prompt_model(5);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 32,
        seed: 5,
        patience: None,
    };
    let mut robust = model.clone();
    let mut plain = model.clone();
    let all_crucial = OptState {
        eta: 0.05,
        threshold: ThresholdRule::Quantile(1e-9),
        ..OptState::default()
    };
    let log = train(&mut robust, &data, &all_crucial, &cfg).unwrap();
    train_sgd(&mut plain, &data, 0.05, &cfg).unwrap();
    let bitwise = log.steps.iter().all(|s| s.crucial_fraction == 1.0)
        && param_bits(&robust.export_params()) == param_bits(&plain.export_params());

    // Soft-threshold shrinkage between repartitions.
    let mut shrunk = model;
    let state = OptState {
        eta: 0.05,
        threshold: ThresholdRule::Quantile(0.4),
        repartition: Repartition::EverySteps(5),
        rule: ShrinkRule::SoftThreshold,
    };
    let log = train(&mut shrunk, &data, &state, &cfg).unwrap();
    let (mut pairs, mut violations) = (0, 0);
    for w in log.steps.windows(2) {
        if let (Some(a), Some(b), true) = (
            w[0].noncrucial_mean_abs,
            w[1].noncrucial_mean_abs,
            w[0].generation == w[1].generation,
        ) {
            pairs += 1;
            if b > a {
                violations += 1;
            }
        }
    }
    verdict(
        6,
        "robust optimizer",
        partition_ok && bitwise && violations == 0 && pairs > 0,
        &format!(
            "partition property {} over 500 cases; all-crucial == SGD bitwise: {bitwise}; \
             non-crucial mean |theta| increases {violations} times over {pairs} in-generation steps",
            if partition_ok { "holds" } else { "violated" }
        ),
    );
}

#[test]
fn criterion_7_desk_transfer() {
    let start = Instant::now();
    let seeds = 0..5u64;
    let n = seeds.clone().count() as f64;
    // (variant, head sum, lion sum)
    let mut sums = [("base", 0.0, 0.0), ("ir50", 0.0, 0.0), ("8shot", 0.0, 0.0)];
    let mut worst_ratio = 0.0f64;
    for seed in seeds {
        let base = TaskSpec::desk(seed);
        let task = base.build().unwrap();
        let pre = pretrain_backbone(&task.source_train, &PretrainConfig::default(), seed).unwrap();
        let full = Classifier::new(
            pre.backbone.clone(),
            Affine::zeros(pre.backbone.output_dim(), base.classes),
            TuneMode::Full,
        )
        .unwrap()
        .trainable_count();
        let cfg = short_run(100, seed);
        let variants = [
            base.clone(),
            TaskSpec {
                imbalance_ratio: Some(50.0),
                ..base.clone()
            },
            TaskSpec {
                shots: Some(8),
                ..base.clone()
            },
        ];
        for (slot, spec) in sums.iter_mut().zip(&variants) {
            let t = spec.build().unwrap();
            let head = run_protocol(Protocol::HeadTuning, &pre, &t.target_train, &t.target_test, &cfg).unwrap();
            let lion = run_protocol(Protocol::Lion, &pre, &t.target_train, &t.target_test, &cfg).unwrap();
            slot.1 += head.result.accuracy;
            slot.2 += lion.result.accuracy;
            worst_ratio = worst_ratio.max(lion.result.trainable_params as f64 / full as f64);
        }
    }
    let means: Vec<(&str, f64, f64)> = sums.iter().map(|&(v, h, l)| (v, h / n, l / n)).collect();
    let pass =
        means[0].2 >= means[0].1 + 0.02 && means[1].2 >= means[1].1 && means[2].2 >= means[2].1 && worst_ratio <= 0.10;
    let table: Vec<String> = means
        .iter()
        .map(|(v, h, l)| format!("{v} head {h:.4} lion {l:.4}"))
        .collect();
    verdict(
        7,
        "desk transfer",
        pass,
        &format!(
            "5 seeds: {}; lion/full params {:.3} (<= 0.10); {:.0}s",
            table.join(", "),
            worst_ratio,
            start.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_8_complexity_formulas() {
    let rows = param_count_report(768, 64, 12, 50, 16, 10);
    let count = |m: &str| rows.iter().find(|r| r.method == m).map(|r| r.count);
    let got = (count("adapter"), count("vpt"), count("lion"));
    let want = (Some(2 * 768 * 64 * 12), Some(50 * 12 * 768), Some(16 * 64));
    verdict(
        8,
        "complexity formulas",
        got == want && want == (Some(1_179_648), Some(460_800), Some(1_024)),
        &format!("adapter/vpt/lion = {got:?}"),
    );
}

#[test]
fn criterion_9_persistence() {
    let dir = tempfile::tempdir().unwrap();
    let (pre, task) = small_pretrained(9);
    let run = run_protocol(
        Protocol::Lion,
        &pre,
        &task.target_train,
        &task.target_test,
        &short_run(5, 9),
    )
    .unwrap();

    let first = dir.path().join("a.ckpt");
    let second = dir.path().join("b.ckpt");
    tuned_to_checkpoint(Protocol::Lion, &run.model)
        .unwrap()
        .save(&first)
        .unwrap();
    let (protocol, loaded) = tuned_from_checkpoint(&Checkpoint::load(&first).unwrap()).unwrap();
    tuned_to_checkpoint(protocol, &loaded).unwrap().save(&second).unwrap();
    let same_bytes = std::fs::read(&first).unwrap() == std::fs::read(&second).unwrap();
    let same_accuracy = loaded.accuracy(&task.target_test).unwrap() == run.result.accuracy;
    let same_params = match (&run.model, &loaded) {
        (TunedModel::Lion(a), TunedModel::Lion(b)) => param_bits(&a.export_params()) == param_bits(&b.export_params()),
        _ => false,
    };

    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("seed", "17"),
        ("tau", "0.35"),
        ("eta", "0.0125"),
        ("ir", "50"),
        ("shift", "rotation"),
    ] {
        cfg.set(k, v).unwrap();
    }
    let config_ok = RunConfig::parse(&cfg.serialize()).unwrap() == cfg;

    let records = vec![RunRecord {
        run_id: "lion-blobs-s9".into(),
        protocol: "lion".into(),
        dataset: "blobs+invertible_linear".into(),
        seed: 9,
        accuracy: run.result.accuracy,
        trainable_params: run.result.trainable_params,
        epochs: run.result.epochs,
        wall_time_s: run.result.wall_time,
    }];
    let csv_ok = records_from_csv(&records_to_csv(&records).unwrap()).unwrap() == records;

    verdict(
        9,
        "persistence",
        same_bytes && same_accuracy && same_params && protocol == Protocol::Lion && config_ok && csv_ok,
        &format!(
            "checkpoint save/load/save identical: {same_bytes}, reloaded accuracy equal: {same_accuracy}, \
             config round-trip: {config_ok}, csv round-trip: {csv_ok}"
        ),
    );
}

//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use blamebox_core::blame::{bayes_update, entropy, likelihood, likelihoods, posterior, Belief};
use blamebox_core::domain::{
    ExperienceDb, Fingerprint, FunctionId, FunctionRegistry, Observation, SensorSeries, SkillId,
};
use blamebox_core::fpf::{deviation_mass, fit_fpf, BlameConfig};
use blamebox_core::harness::{
    build_study, gen_sensor_suite, run_scenario, ScenarioConfig, ScenarioRun, SensorSynthSpec,
};
use blamebox_core::mom::{cosine_objective, random_model, MomConfig, MomDetector, MomModel};
use blamebox_core::planner::{expected_information_gain, select_skill};
use blamebox_core::report::ReportBundle;
use blamebox_core::rng::substream;
use blamebox_core::store::{load_db, load_fpf, load_mom, save_db, save_model, StoredModel};
use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;

const SEEDS: u64 = 10;

fn verdict(criterion: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    // Written to the raw handle so the line shows even when the test passes
    // and libtest captures its output.
    let line = format!("\n[{tag}] criterion {criterion}: {name} ({detail})\n");
    let _ = std::io::Write::write_all(&mut std::io::stderr(), line.as_bytes());
}

fn scenario(name: &str, seed: u64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::builtin(name).unwrap();
    cfg.seed = seed;
    cfg
}

fn runs(name: &str) -> Vec<(ScenarioRun, Duration)> {
    (0..SEEDS)
        .into_par_iter()
        .map(|seed| {
            let start = Instant::now();
            let run = run_scenario(&scenario(name, seed)).unwrap();
            (run, start.elapsed())
        })
        .collect()
}

fn fid(run: &ScenarioRun, name: &str) -> FunctionId {
    run.study.registry().id(name).unwrap()
}

#[test]
fn criterion_1_and_2_fig3() {
    let results = runs("fig3");
    let mut pass1 = 0;
    let mut pass2 = 0;
    let mut lines = Vec::new();
    for (seed, (run, elapsed)) in results.iter().enumerate() {
        let b = run.trace.final_belief().unwrap();
        let f1 = fid(run, "f1");
        let f2 = fid(run, "f2");
        let others_max = (0..b.len())
            .filter(|&i| i != f1.0 && i != f2.0)
            .map(|i| b.probs()[i])
            .fold(0.0, f64::max);
        let ok1 = b.argmax() == f2
            && b.get(f2) >= 0.95
            && others_max <= 0.01
            && run.trace.steps.len() <= 60
            && elapsed.as_secs_f64() <= 60.0;
        pass1 += ok1 as usize;

        let choices = run.trace.choices();
        let switch = (1..choices.len())
            .find(|&i| choices[i - 1] == 0 && choices[i] == 1)
            .map(|i| i + 1);
        let ok2 = choices.first() == Some(&0) && switch.is_some_and(|s| (5..=40).contains(&s));
        pass2 += ok2 as usize;
        lines.push(format!(
            "seed {seed}: p(f2)={:.4} others<={others_max:.2e} steps={} switch={switch:?} {:.2}s",
            b.get(f2),
            run.trace.steps.len(),
            elapsed.as_secs_f64()
        ));
    }
    for l in &lines {
        println!("  {l}");
    }
    verdict(1, "fig3 converges to f2", pass1 >= 9, &format!("{pass1}/10 seeds"));
    verdict(
        2,
        "fig3 switches a1 -> a2 within steps 5..=40",
        pass2 >= 8,
        &format!("{pass2}/10 seeds"),
    );
    assert!(pass1 >= 9, "criterion 1: {pass1}/10");
    assert!(pass2 >= 8, "criterion 2: {pass2}/10");
}

#[test]
fn criterion_3_fig4_gain_ordering() {
    let outcomes: Vec<(bool, String)> = (0..SEEDS)
        .into_par_iter()
        .map(|seed| {
            let study = build_study(&scenario("fig4", seed)).unwrap();
            let belief = Belief::uniform(study.registry().len()).unwrap();
            let sel = select_skill(&belief, &study.skills, &study.blame, &study.planner, 1).unwrap();
            let g = &sel.gains;
            let diff = (g[1].gain - g[2].gain).abs();
            let se = (g[1].std_error.powi(2) + g[2].std_error.powi(2)).sqrt();
            let ok = diff <= 2.0 * se && g[1].gain > g[3].gain && g[2].gain > g[3].gain;
            let detail = format!(
                "seed {seed}: a1={:.5} a2={:.5} a3={:.5} a4={:.5} |a2-a3|={diff:.5} 2se={:.5}",
                g[0].gain,
                g[1].gain,
                g[2].gain,
                g[3].gain,
                2.0 * se
            );
            (ok, detail)
        })
        .collect();
    for (_, d) in &outcomes {
        println!("  {d}");
    }
    let pass = outcomes.iter().filter(|(ok, _)| *ok).count();
    verdict(
        3,
        "fig4 gains: a2 ~ a3 > a4 at the uniform prior",
        pass * 2 > SEEDS as usize,
        &format!("{pass}/10 seeds"),
    );
    assert!(pass * 2 > SEEDS as usize, "criterion 3: {pass}/10");
}

#[test]
fn criterion_4_fig5_alternation() {
    let results = runs("fig5");
    let mut pass = 0;
    for (seed, (run, _)) in results.iter().enumerate() {
        let choices = run.trace.choices();
        let window: Vec<usize> = choices.iter().skip(2).take(20).copied().collect();
        let a1 = window.iter().filter(|&&c| c == 0).count();
        let a2 = window.iter().filter(|&&c| c == 1).count();
        let p2 = run.trace.final_belief().unwrap().get(fid(run, "f2"));
        let ok = a1 >= 5 && a2 >= 5 && p2 >= 0.95;
        pass += ok as usize;
        println!(
            "  seed {seed}: steps 3-22 a1={a1} a2={a2} p(f2)={p2:.4} steps={}",
            choices.len()
        );
    }
    verdict(
        4,
        "fig5 alternates a1/a2 and converges to f2",
        pass * 2 > SEEDS as usize,
        &format!("{pass}/10 seeds"),
    );
    assert!(pass * 2 > SEEDS as usize, "criterion 4: {pass}/10");
}

#[test]
fn criterion_5_exoneration() {
    let results = runs("exoneration");
    let mut pass = 0;
    for (seed, (run, _)) in results.iter().enumerate() {
        let specs = &run.study.specs;
        let reg = run.study.registry();
        let steps = &run.trace.steps;
        let failing: BTreeSet<usize> = specs
            .iter()
            .filter(|s| run.study.world.fails(s))
            .map(|s| s.id.0)
            .collect();
        let used_by = |skills: &dyn Fn(usize) -> bool| -> BTreeSet<FunctionId> {
            specs
                .iter()
                .filter(|s| skills(s.id.0))
                .flat_map(|s| s.functions.iter().map(|p| p.function))
                .collect()
        };
        let in_failing = used_by(&|i| failing.contains(&i));
        let in_passing = used_by(&|i| !failing.contains(&i));
        let expected: BTreeSet<FunctionId> = in_failing.difference(&in_passing).copied().collect();

        let first_success = steps.iter().position(|s| s.success);
        let drop_ok = match first_success {
            Some(i) => {
                let before = if i == 0 {
                    &run.trace.initial_belief
                } else {
                    &steps[i - 1].posterior
                };
                let after = &steps[i].posterior;
                specs[steps[i].skill]
                    .functions
                    .iter()
                    .all(|p| after[p.function.0] * 10.0 <= before[p.function.0])
            }
            None => false,
        };
        let b = run.trace.final_belief().unwrap();
        let threshold = 1.0 / b.len() as f64;
        let candidates: BTreeSet<FunctionId> = (0..b.len())
            .filter(|&i| b.probs()[i] > threshold)
            .map(FunctionId)
            .collect();
        let ok = drop_ok && candidates == expected;
        pass += ok as usize;
        let names = |s: &BTreeSet<FunctionId>| s.iter().map(|&f| reg.name(f).to_string()).collect::<Vec<_>>().join(",");
        println!(
            "  seed {seed}: first success at step {:?}, drop>=10x {drop_ok}, candidates [{}] expected [{}], choices {:?}",
            first_success.map(|i| i + 1),
            names(&candidates),
            names(&expected),
            run.trace.choices()
        );
    }
    verdict(
        5,
        "exoneration by the succeeding skill",
        pass * 2 > SEEDS as usize,
        &format!("{pass}/10 seeds"),
    );
    assert!(pass * 2 > SEEDS as usize, "criterion 5: {pass}/10");
}

#[test]
fn criterion_6_localizer_ambiguity() {
    let results = runs("localizer-ambiguity");
    let mut pass = 0;
    for (seed, (run, _)) in results.iter().enumerate() {
        let b = run.trace.final_belief().unwrap();
        let group = |names: &[&str]| names.iter().map(|n| b.get(fid(run, n))).sum::<f64>();
        let localiser = group(&["localise"]);
        let cartesian = group(&["plan_cartesian", "cartesian_ptp", "compute_ik"]);
        let max = b.probs().iter().copied().fold(0.0, f64::max);
        let ok = max < 0.9 && localiser >= 0.05 && cartesian >= 0.05;
        pass += ok as usize;
        println!(
            "  seed {seed}: max={max:.3} localiser={localiser:.3} cartesian={cartesian:.3} steps={}",
            run.trace.steps.len()
        );
    }
    verdict(
        6,
        "co-occurring groups stay ambiguous",
        pass * 2 > SEEDS as usize,
        &format!("{pass}/10 seeds"),
    );
    assert!(pass * 2 > SEEDS as usize, "criterion 6: {pass}/10");
}

#[test]
fn criterion_7_mom_detection() {
    let spec = SensorSynthSpec::default_suite();
    let tau = spec.anomaly.onset;
    let mut rng = substream(7, "sensor-suite", 0);
    let suite = gen_sensor_suite(&spec, 30, 10, 10, &mut rng).unwrap();
    let cfg = MomConfig::default();
    let start = Instant::now();
    let (det, losses) = MomDetector::fit(&suite.train, &cfg).unwrap();
    let elapsed = start.elapsed();
    let w = cfg.smoothing_window;
    let hits = suite
        .negative
        .iter()
        .filter(|s| {
            let t = det.detect(s).unwrap().t_fail;
            t.is_some_and(|t| t.abs_diff(tau) <= 2 * w)
        })
        .count();
    let false_alarms = suite
        .positive
        .iter()
        .filter(|s| det.detect(s).unwrap().t_fail.is_some())
        .count();
    let neg: Vec<Option<usize>> = suite.negative.iter().map(|s| det.detect(s).unwrap().t_fail).collect();
    println!(
        "  loss {:.5} -> {:.5}, negatives t_fail {neg:?}, training {:.1}s",
        losses[0],
        losses.last().unwrap(),
        elapsed.as_secs_f64()
    );
    let ok = hits >= 9 && false_alarms <= 2 && elapsed.as_secs() <= 300;
    verdict(
        7,
        "MOM flags shifted sequences near the onset",
        ok,
        &format!("{hits}/10 negatives located, {false_alarms}/10 false alarms"),
    );
    assert!(ok);
}

#[test]
fn criterion_8_gradient_check() {
    let mut rng = substream(8, "gradient-check", 0);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let model = random_model(3, 2, 1.0, &mut rng).unwrap();
        let seq = SensorSeries::new(Array2::from_shape_fn((3, 5), |_| rng.random_range(-1.0..1.0)), 0.1).unwrap();
        let data = vec![seq];
        let (_, grad) = model.loss_and_gradient(&data).unwrap();
        let loss_at = |params: Vec<f64>| {
            let m = MomModel::from_params(3, 2, params).unwrap();
            cosine_objective(&data[0], &m.reconstruct(&data[0]).unwrap()).unwrap()
        };
        for i in 0..grad.len() {
            let mut plus = model.params().to_vec();
            plus[i] += h;
            let mut minus = model.params().to_vec();
            minus[i] -= h;
            let fd = (loss_at(plus) - loss_at(minus)) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    let ok = worst <= 1e-4;
    verdict(
        8,
        "analytic gradient matches central differences",
        ok,
        &format!("max relative error {worst:.2e}"),
    );
    assert!(ok);
}

/// Random `F = 4`, `T = 8` model and executions for the invariant sweep.
fn random_case<R: Rng>(
    rng: &mut R,
) -> (
    FunctionRegistry,
    Vec<blamebox_core::fpf::FpfModel>,
    Observation,
    BlameConfig,
) {
    let reg = FunctionRegistry::numbered(4).unwrap();
    let used: Vec<bool> = (0..4).map(|_| rng.random_bool(0.6)).collect();
    let draw =
        |rng: &mut R| Array2::from_shape_fn((4, 8), |(f, _)| if used[f] { rng.random_range(0.0..4.0) } else { 0.0 });
    let obs: Vec<Observation> = (0..3)
        .map(|_| Observation {
            skill: SkillId(0),
            sensors: SensorSeries::placeholder(8, 0.1),
            fingerprint: Fingerprint::new(draw(rng), 0.1).unwrap(),
            success: true,
        })
        .collect();
    let db = ExperienceDb::with_length(SkillId(0), 8, obs, &reg).unwrap();
    let cfg = BlameConfig {
        alpha: rng.random_range(0.0..2.0),
        window_steps: rng.random_range(1..10),
        ..BlameConfig::default()
    };
    let fpf = fit_fpf(&db, &cfg).unwrap();
    let exec = Observation {
        skill: SkillId(0),
        sensors: SensorSeries::placeholder(8, 0.1),
        fingerprint: Fingerprint::new(draw(rng), 0.1).unwrap(),
        success: rng.random_bool(0.5),
    };
    (reg, vec![fpf], exec, cfg)
}

#[test]
fn criterion_9_invariant_suite() {
    const N: usize = 10_000;
    let mut rng = substream(9, "invariants", 0);
    let mut failures: Vec<String> = Vec::new();

    for _ in 0..N {
        let (_, fpfs, exec, cfg) = random_case(&mut rng);
        let w: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0) + 1e-9).collect();
        let prior = Belief::from_weights(w).unwrap();
        let t_fail = rng.random_range(0..8);
        let (post, _) = bayes_update(&prior, &fpfs, &exec, exec.success, Some(t_fail), &cfg).unwrap();
        let s: f64 = post.probs().iter().sum();
        if (s - 1.0).abs() > 1e-9 || post.probs().iter().any(|p| !p.is_finite()) {
            failures.push(format!("normalization {s}"));
        }
        for f in 0..4 {
            let l = likelihood(
                &fpfs[0],
                &exec.fingerprint,
                FunctionId(f),
                exec.success,
                Some(t_fail),
                &cfg,
            )
            .unwrap();
            if !(cfg.epsilon_floor..=0.75).contains(&l) {
                failures.push(format!("likelihood {l} out of range"));
            }
            let used = fpfs[0].is_active(FunctionId(f)) || exec.fingerprint.is_active(FunctionId(f));
            if !exec.success && used && l < 0.5 {
                failures.push(format!("failure likelihood {l} < 0.5 for a used function"));
            }
        }
    }

    for _ in 0..N {
        let mean = rng.random_range(-10.0..10.0);
        let var = 10f64.powf(rng.random_range(-6.0..3.0));
        let d = rng.random_range(0.0..5.0) * var.sqrt();
        let d2 = d + rng.random_range(0.0..2.0) * var.sqrt();
        let a = deviation_mass(mean + d, mean, var).unwrap();
        let b = deviation_mass(mean - d, mean, var).unwrap();
        let c = deviation_mass(mean + d2, mean, var).unwrap();
        // mean ± d rounds differently on each side, so symmetry is only up to reassociation
        if !(0.0..0.5).contains(&a) || (a - b).abs() > 1e-12 || c < a {
            failures.push(format!("deviation_mass at d={d}: {a} {b} {c}"));
        }
    }

    for _ in 0..N {
        let k = rng.random_range(1..500);
        let n = k + rng.random_range(0..50);
        let mut p = vec![0.0; n];
        p[..k].iter_mut().for_each(|v| *v = 1.0 / k as f64);
        let h = entropy(&Belief::from_weights(p).unwrap());
        if (h - (k as f64).ln()).abs() > 1e-12 {
            failures.push(format!("entropy of uniform over {k}: {h}"));
        }
    }

    for i in 0..N {
        let (_, fpfs, exec, cfg) = random_case(&mut rng);
        let obs = Observation { success: true, ..exec };
        let db = ExperienceDb::with_length(SkillId(0), 8, vec![obs], &FunctionRegistry::numbered(4).unwrap()).unwrap();
        let mut p = vec![0.0; 4];
        p[i % 4] = 1.0;
        let g = expected_information_gain(&Belief::new(p).unwrap(), &db, &fpfs[0], &cfg, 2, &mut rng).unwrap();
        if g.gain.abs() > 1e-9 {
            failures.push(format!("point-mass gain {}", g.gain));
        }
    }

    // Exhaustive oracle on a T = 4, two-function toy: f2 used, f1 not.
    let reg = FunctionRegistry::numbered(2).unwrap();
    let obs: Vec<Observation> = [[1.0, 2.0, 3.0, 2.0], [2.0, 2.5, 1.0, 3.0], [1.5, 1.0, 2.0, 2.5]]
        .iter()
        .map(|row| {
            let mut c = Array2::zeros((2, 4));
            c.row_mut(1).assign(&ndarray::arr1(row));
            Observation {
                skill: SkillId(0),
                sensors: SensorSeries::placeholder(4, 0.1),
                fingerprint: Fingerprint::new(c, 0.1).unwrap(),
                success: true,
            }
        })
        .collect();
    let db = ExperienceDb::with_length(SkillId(0), 4, obs, &reg).unwrap();
    let cfg = BlameConfig {
        alpha: 0.3,
        window_steps: 3,
        ..BlameConfig::default()
    };
    let fpf = fit_fpf(&db, &cfg).unwrap();
    let prior = Belief::uniform(2).unwrap();
    let mut exact = 0.0;
    let mut count = 0.0;
    for o in db.observations() {
        for success in [true, false] {
            for t in 0..4 {
                let ls = likelihoods(&fpf, &o.fingerprint, success, Some(t), &cfg).unwrap();
                exact += entropy(&posterior(&prior, &ls).unwrap());
                count += 1.0;
            }
        }
    }
    let exact_gain = entropy(&prior) - exact / count;
    let mut oracle_fail = 0;
    for _ in 0..100 {
        let g = expected_information_gain(&prior, &db, &fpf, &cfg, 64, &mut rng).unwrap();
        if (g.gain - exact_gain).abs() > 3.0 * g.std_error.max(1e-15) {
            oracle_fail += 1;
        }
    }
    // Three-sigma bands miss about 0.3% of the time; allow a handful.
    if oracle_fail > 5 || exact_gain <= 0.0 {
        failures.push(format!(
            "EIG oracle: {oracle_fail}/100 outside 3 SE, exact {exact_gain}"
        ));
    }

    let ok = failures.is_empty();
    verdict(
        9,
        "randomized invariants",
        ok,
        &format!(
            "{} violations over 4 x {N} cases, exact toy gain {exact_gain:.5}",
            failures.len()
        ),
    );
    assert!(ok, "{:?}", &failures[..failures.len().min(10)]);
}

#[test]
fn criterion_10_determinism_and_persistence() {
    let mut cfg = scenario("fig3", 3);
    cfg.planner.max_iterations = 25;
    let render = || {
        let run = run_scenario(&cfg).unwrap();
        ReportBundle::from_trace(&run.trace, &[]).unwrap()
    };
    let a = render();
    let b = render();
    let dir = tempfile::tempdir().unwrap();
    a.write(&dir.path().join("a")).unwrap();
    b.write(&dir.path().join("b")).unwrap();
    let identical = a.files().iter().all(|(name, _)| {
        std::fs::read(dir.path().join("a").join(name)).unwrap()
            == std::fs::read(dir.path().join("b").join(name)).unwrap()
    });

    let study = build_study(&scenario("fig3", 5)).unwrap();
    let skill = &study.skills[1];
    save_db(&skill.db, study.registry(), &dir.path().join("db")).unwrap();
    let (reg, db) = load_db(&dir.path().join("db")).unwrap();
    let db_ok = &reg == study.registry() && db == skill.db;

    save_model(&dir.path().join("fpf.json"), &StoredModel::Fpf(skill.fpf.clone())).unwrap();
    let fpf_ok = load_fpf(&dir.path().join("fpf.json")).unwrap() == skill.fpf;

    let spec = SensorSynthSpec::with_shape(4, 30, 0.01, 20);
    let suite = gen_sensor_suite(&spec, 4, 1, 1, &mut substream(10, "persist", 0)).unwrap();
    let (det, _) = MomDetector::fit(
        &suite.train,
        &MomConfig {
            epochs: 5,
            ..MomConfig::default()
        },
    )
    .unwrap();
    save_model(&dir.path().join("mom.json"), &StoredModel::Mom(det.clone())).unwrap();
    let back = load_mom(&dir.path().join("mom.json")).unwrap();
    let probe = &suite.negative[0];
    let mom_ok = back == det && back.model.reconstruct(probe).unwrap() == det.model.reconstruct(probe).unwrap();

    let ok = identical && db_ok && fpf_ok && mom_ok;
    verdict(
        10,
        "deterministic reports and exact round trips",
        ok,
        &format!("reports identical {identical}, db {db_ok}, fpf {fpf_ok}, mom {mom_ok}"),
    );
    assert!(ok);
}

//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Criteria 7 to 11 share one desk-scale campaign (about three CPU hours on
//! one core). Set `AOI_ACCEPTANCE_DIR` to keep its artifacts and trained
//! models between runs; otherwise a temporary directory is used.

#[path = "common/learner_checks.rs"]
mod learner_checks;
#[path = "common/pins.rs"]
mod pins;
#[path = "common/safety.rs"]
mod safety;

use std::path::{Path, PathBuf};
use std::time::Instant;

use aoi_core::decpomdp::MaskMode;
use aoi_core::harness::{
    render_summary, rerun_cell, run_experiment, spread, summarize, write_metrics, CampaignResult, ExperimentSpec,
    Method, Spread, Sweep, SweepMode,
};
use aoi_core::qmix::Algorithm;
use aoi_core::world::{World, WorldConfig};

struct Outcome {
    id: u32,
    pass: bool,
    detail: String,
    seconds: f64,
}

fn timed<F: FnOnce() -> (bool, String)>(id: u32, budget_s: f64, f: F) -> Outcome {
    let start = Instant::now();
    let (ok, detail) = f();
    let seconds = start.elapsed().as_secs_f64();
    finish(id, ok, detail, seconds, budget_s)
}

fn finish(id: u32, ok: bool, detail: String, seconds: f64, budget_s: f64) -> Outcome {
    let in_time = seconds <= budget_s;
    let detail = if in_time {
        detail
    } else {
        format!("{detail}; over the {budget_s:.0} s budget")
    };
    let o = Outcome {
        id,
        pass: ok && in_time,
        detail,
        seconds,
    };
    println!(
        "criterion {:>2} {}  {} ({:.1} s)",
        o.id,
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        o.seconds
    );
    o
}

fn criterion_1() -> Outcome {
    timed(1, 1.0, || {
        let checks = pins::physics_checks();
        let worst = checks
            .iter()
            .map(|(n, g, w)| (pins::rel_err(*g, *w), n.clone()))
            .fold((0.0, String::new()), |a, b| if b.0 > a.0 { b } else { a });
        let ok = checks.iter().all(|(_, g, w)| pins::rel_err(*g, *w) <= pins::PIN_REL_TOL);
        (
            ok,
            format!("closed-form pins: {} values, max rel err {:.1e} ({})", checks.len(), worst.0, worst.1),
        )
    })
}

fn criterion_2() -> Outcome {
    timed(2, 30.0, || {
        let r = safety::los_monte_carlo(20, 100_000);
        let worst = r.iter().map(|x| x.3).fold(0.0, f64::max);
        (
            r.iter().all(|x| x.3 <= 3.0),
            format!("LoS Monte Carlo: 20 geometries x 1e5 draws, worst deviation {worst:.2} sigma"),
        )
    })
}

fn criterion_3() -> Outcome {
    timed(3, 60.0, || {
        let world = World::new(WorldConfig::table_i(3, 15)).unwrap();
        let r = safety::drift_bounds(&world, 100_000);
        (
            r.time_violations == 0 && r.energy_violations == 0,
            format!(
                "slack drift: {} transitions, {} time and {} energy violations",
                r.transitions, r.time_violations, r.energy_violations
            ),
        )
    })
}

fn criterion_4() -> Outcome {
    timed(4, 300.0, || {
        let world = World::new(WorldConfig::table_i(3, 15)).unwrap();
        let r = safety::mask_safety(&world, 1000);
        (
            r.all_safe(),
            format!(
                "mask safety: {} episodes, {} collided, {} away from stop, {} over budget, {} kinematic violations",
                r.episodes, r.collided, r.not_at_stop, r.over_budget, r.kinematic_violations
            ),
        )
    })
}

fn criterion_5() -> Outcome {
    timed(5, 120.0, || {
        let (fd, analytic) = learner_checks::mixer_monotonicity(1000);
        let mismatches = learner_checks::igm_mismatches(200);
        (
            fd >= -1e-9 && mismatches == 0,
            format!(
                "mixer: min finite-difference slope {fd:.3e} (analytic {analytic:.3e}) over 1000 draws, \
                 {mismatches}/200 argmin mismatches"
            ),
        )
    })
}

fn criterion_6() -> Outcome {
    timed(6, 120.0, || {
        let mut report = learner_checks::gradient_check(Algorithm::Qmix);
        report.extend(
            learner_checks::gradient_check(Algorithm::Idqn)
                .into_iter()
                .map(|(g, e, n)| (format!("idqn.{g}"), e, n)),
        );
        let (group, worst) = report
            .iter()
            .map(|(g, e, _)| (g.clone(), *e))
            .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
        (
            report.iter().all(|(_, e, _)| *e < 1e-4),
            format!("gradient check: {} parameter groups, max rel err {worst:.1e} ({group})", report.len()),
        )
    })
}

struct Campaign {
    root: PathBuf,
    desk: CampaignResult,
    desk_seconds: f64,
    unmasked: CampaignResult,
    xi: CampaignResult,
    xi_seconds: f64,
    lambda: CampaignResult,
    lambda_seconds: f64,
    single: CampaignResult,
    single_seconds: f64,
}

fn run(spec: &ExperimentSpec, out: &Path) -> (CampaignResult, f64) {
    let start = Instant::now();
    let r = run_experiment(spec, out).expect("campaign");
    for (cell, e) in &r.failures {
        println!("  cell {} failed: {e}", cell.dir_name());
    }
    (r, start.elapsed().as_secs_f64())
}

fn campaign(root: &Path) -> Campaign {
    let base = ExperimentSpec {
        model_cache: Some(root.join("models")),
        ..ExperimentSpec::desk()
    };
    let (desk, desk_seconds) = run(&base, &root.join("desk"));
    println!("{}", render_summary(&summarize(&desk.rows())));

    let mut unmasked_spec = ExperimentSpec {
        name: "unmasked".into(),
        methods: vec![Method::Qmix],
        traces: false,
        ..base.clone()
    };
    unmasked_spec.learner.mask = MaskMode::Unmasked;
    let (unmasked, _) = run(&unmasked_spec, &root.join("unmasked"));

    let sweep = |name: &str, parameter: &str, values: Vec<f64>| ExperimentSpec {
        name: name.into(),
        methods: vec![Method::Qmix],
        sweep: Some(Sweep {
            parameter: parameter.into(),
            values,
            mode: SweepMode::EvalOnly,
        }),
        ..base.clone()
    };
    let (xi, xi_seconds) = run(&sweep("xi", "xi_th_db", vec![3.0, 5.0, 7.0]), &root.join("xi"));
    let (lambda, lambda_seconds) = run(&sweep("lambda", "lambda_n", vec![0.3, 0.6, 0.9]), &root.join("lambda"));

    let mut single_spec = ExperimentSpec {
        name: "single".into(),
        methods: vec![Method::Qmix, Method::Idqn],
        ..base.clone()
    };
    single_spec.world.num_uavs = 1;
    let (single, single_seconds) = run(&single_spec, &root.join("single"));

    Campaign {
        root: root.to_path_buf(),
        desk,
        desk_seconds,
        unmasked,
        xi,
        xi_seconds,
        lambda,
        lambda_seconds,
        single,
        single_seconds,
    }
}

fn median(values: &[f64]) -> f64 {
    spread(values).median
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Per seed: (first-500 mean, last-500 mean) of the training cost.
fn curve_windows(result: &CampaignResult, method: Method) -> Vec<(f64, f64)> {
    result
        .results
        .iter()
        .filter(|r| r.cell.method == method)
        .filter_map(|r| r.curve.as_ref())
        .map(|c| {
            let costs: Vec<f64> = c.iter().map(|p| p.cumulative_cost).collect();
            let w = 500.min(costs.len());
            (mean(&costs[..w]), mean(&costs[costs.len() - w..]))
        })
        .collect()
}

fn learned_seconds(result: &CampaignResult, method: Method) -> f64 {
    result
        .results
        .iter()
        .filter(|r| r.cell.method == method)
        .map(|r| r.wall_time)
        .sum()
}

fn aoi_by(result: &CampaignResult, method: Method, value: Option<f64>) -> Vec<f64> {
    result
        .results
        .iter()
        .filter(|r| r.cell.method == method && r.cell.sweep_value == value)
        .map(|r| r.row.total_average_aoi)
        .collect()
}

fn criterion_7(c: &Campaign) -> Outcome {
    let masked = curve_windows(&c.desk, Method::Qmix);
    let unmasked = curve_windows(&c.unmasked, Method::Qmix);
    let first = median(&masked.iter().map(|w| w.0).collect::<Vec<_>>());
    let last = median(&masked.iter().map(|w| w.1).collect::<Vec<_>>());
    let last_unmasked = median(&unmasked.iter().map(|w| w.1).collect::<Vec<_>>());
    let drop = 1.0 - last / first;
    let ok = masked.len() == 5 && unmasked.len() == 5 && drop >= 0.30 && last <= last_unmasked;
    let seconds = learned_seconds(&c.desk, Method::Qmix) + learned_seconds(&c.unmasked, Method::Qmix);
    finish(
        7,
        ok,
        format!(
            "learning: median cost {first:.0} -> {last:.0} ({:.1}% drop, need 30%); final-500 masked {last:.0} vs \
             unmasked {last_unmasked:.0}",
            100.0 * drop
        ),
        seconds,
        4.0 * 3600.0,
    )
}

fn criterion_8(c: &Campaign) -> Outcome {
    let med = |m| median(&aoi_by(&c.desk, m, None));
    let (q, n, i, k) = (med(Method::Qmix), med(Method::Nearest), med(Method::Idqn), med(Method::Cluster));
    let margin = ((n - q) / n).max((i - q) / i);
    let ok = c.desk.failures.is_empty() && q < n && q < i && margin >= 0.05;
    finish(
        8,
        ok,
        format!(
            "ordering: median AoI qmix {q:.2}, nearest {n:.2}, idqn {i:.2} (cluster {k:.2}); best margin {:.1}%",
            100.0 * margin
        ),
        c.desk_seconds,
        6.0 * 3600.0,
    )
}

fn criterion_9(c: &Campaign) -> Outcome {
    let medians = |r: &CampaignResult, values: &[f64]| -> Vec<f64> {
        values.iter().map(|&v| median(&aoi_by(r, Method::Qmix, Some(v)))).collect()
    };
    let xi = medians(&c.xi, &[3.0, 5.0, 7.0]);
    let lambda = medians(&c.lambda, &[0.3, 0.6, 0.9]);
    let xi_ok = xi.windows(2).all(|w| w[1] >= w[0]);
    let lambda_ok = lambda.windows(2).all(|w| w[1] <= w[0]);
    let within = c.xi_seconds <= 7200.0 && c.lambda_seconds <= 7200.0;
    finish(
        9,
        xi_ok && lambda_ok && within,
        format!(
            "trends: AoI over xi 3/5/7 dB = {:.2}/{:.2}/{:.2}, over lambda 0.3/0.6/0.9 = {:.2}/{:.2}/{:.2}",
            xi[0], xi[1], xi[2], lambda[0], lambda[1], lambda[2]
        ),
        c.xi_seconds.max(c.lambda_seconds),
        2.0 * 3600.0,
    )
}

fn criterion_10(c: &Campaign) -> Outcome {
    let q: Spread = spread(&aoi_by(&c.single, Method::Qmix, None));
    let i: Spread = spread(&aoi_by(&c.single, Method::Idqn, None));
    let overlap = q.q1.max(i.q1) <= q.q3.min(i.q3);
    finish(
        10,
        overlap && q.n == 5 && i.n == 5,
        format!(
            "single UAV: qmix IQR [{:.2}, {:.2}], idqn IQR [{:.2}, {:.2}]",
            q.q1, q.q3, i.q1, i.q3
        ),
        c.single_seconds,
        3600.0,
    )
}

fn criterion_11(c: &Campaign) -> Outcome {
    timed(11, 600.0, || {
        let mut details = Vec::new();
        let mut ok = true;
        for (cell, method, seed) in [("qmix_base_0", Method::Qmix, 0), ("cluster_base_3", Method::Cluster, 3)] {
            let meta = c.root.join("desk/cells").join(cell).join("cell.json");
            let original = c
                .desk
                .results
                .iter()
                .find(|r| r.cell.method == method && r.cell.seed == seed)
                .map(|r| r.row.clone());
            let Some(original) = original else {
                ok = false;
                details.push(format!("{cell} missing"));
                continue;
            };
            let rerun = rerun_cell(&meta).expect("re-run");
            let a = c.root.join(format!("{cell}.original.csv"));
            let b = c.root.join(format!("{cell}.rerun.csv"));
            write_metrics(&a, &[original]).unwrap();
            write_metrics(&b, &[rerun]).unwrap();
            let same = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();
            ok &= same;
            details.push(format!("{cell} {}", if same { "identical" } else { "differs" }));
        }
        (ok, format!("determinism: re-run from metadata: {}", details.join(", ")))
    })
}

fn main() {
    let outcomes_fast = vec![
        criterion_1(),
        criterion_2(),
        criterion_3(),
        criterion_4(),
        criterion_5(),
        criterion_6(),
    ];
    let keep = std::env::var_os("AOI_ACCEPTANCE_DIR").map(PathBuf::from);
    let temp = tempfile::tempdir().unwrap();
    let root = keep.unwrap_or_else(|| temp.path().to_path_buf());
    std::fs::create_dir_all(&root).unwrap();
    println!("campaign artifacts in {}", root.display());
    let c = campaign(&root);
    let mut outcomes = outcomes_fast;
    outcomes.extend([criterion_7(&c), criterion_8(&c), criterion_9(&c), criterion_10(&c), criterion_11(&c)]);

    println!();
    for o in &outcomes {
        println!("criterion {:>2} {}", o.id, if o.pass { "PASS" } else { "FAIL" });
    }
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!("acceptance: {} of {} criteria passed", outcomes.len() - failed, outcomes.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

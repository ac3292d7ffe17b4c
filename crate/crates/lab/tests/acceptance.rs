//! Acceptance criteria, run in order in a single process so that the
//! wall-clock budgets are measured without competing test threads.
//! Prints one PASS/FAIL line per criterion and exits non-zero on failure.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use qds_core::hp::{evans_hudson_flow, exp_vector, DiscretizedExponentialVector, ToyFockGrid};
use qds_core::linalg::{self, C64};
use qds_core::lindblad::{adjoint_shell_op, g_op, shell_commutator_op, Flavor};
use qds_core::tensor_algebra::{self, matrix_unit_basis, pauli, Capacity, LocalOperator, ShellFamily};
use qds_lab::config::{parse_model, StudySpec};
use qds_lab::study::{run_study, Record, StudyResult};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EXAMPLES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/config/examples");

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

fn example(name: &str) -> String {
    std::fs::read_to_string(format!("{EXAMPLES}/{name}")).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn run_text(text: &str) -> StudyResult {
    let spec = parse_model(text).unwrap();
    run_study(&spec, &Capacity::default()).unwrap()
}

fn worst<'a>(records: impl Iterator<Item = &'a Record>) -> f64 {
    records.map(|r| r.value).fold(0.0, f64::max)
}

fn metric<'a>(result: &'a StudyResult, name: &'a str) -> impl Iterator<Item = &'a Record> + 'a {
    result
        .records
        .iter()
        .filter(move |r| r.metric == name && !r.negative_control)
}

/// Shell families with N = 2, d = 1 and a random subset of levels in {0, 1, 2}
/// that always contains level 2.
fn random_families(seed: u64, count: usize) -> Vec<ShellFamily> {
    let cap = Capacity::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let mut levels = vec![2];
            if i % 2 == 0 {
                levels.insert(0, 0);
            }
            if i % 3 != 0 {
                levels.insert(levels.len() - 1, 1);
            }
            ShellFamily::random(&mut rng, 2, 1, &levels, &cap).unwrap()
        })
        .collect()
}

fn adjoint_identity() -> Outcome {
    let cap = Capacity::default();
    let mut defect = 0.0f64;
    for family in random_families(101, 20) {
        for level in 0..=2 {
            let c = shell_commutator_op(&family, level, &cap).unwrap();
            let c_star = adjoint_shell_op(&family, level, &cap).unwrap();
            defect = defect.max(linalg::max_abs_diff(c_star.matrix(), &linalg::adjoint(c.matrix())));
        }
    }
    outcome(
        defect <= 1e-12,
        format!("max entrywise defect {defect:.2e} over 20 families, levels 0..=2"),
    )
}

/// `−½(r*r x − r* x r − r x r* + x r r*)`, straight from matrices.
fn g_direct(r: &LocalOperator, x: &LocalOperator) -> LocalOperator {
    let (a, a_adj) = (r.matrix(), linalg::adjoint(r.matrix()));
    let x = x.matrix();
    let m = a_adj.dot(a).dot(x) - a_adj.dot(x).dot(a) - a.dot(x).dot(&a_adj) + x.dot(a).dot(&a_adj);
    LocalOperator::new(r.window().clone(), r.local_dim(), m.mapv(|z| z * -0.5)).unwrap()
}

fn restriction_tower() -> Outcome {
    let cap = Capacity::default();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut tower = 0.0f64;
    let mut oracle = 0.0f64;
    let mut inputs = 0usize;
    for family in random_families(202, 3) {
        let c: Vec<_> = (0..=2)
            .map(|m| shell_commutator_op(&family, m, &cap).unwrap())
            .collect();
        let g: Vec<_> = (0..=2).map(|m| g_op(&family, m, &cap).unwrap()).collect();
        for m in 0..=2 {
            let big = c[m].window();
            let r_m = family.partial_sum(m, &cap).unwrap();
            for p in 0..=m {
                // At p = m the tower is trivial; the level-2 basis has 1024
                // elements, so that case is probed with random elements.
                let probes = if p == m && m == 2 {
                    (0..8)
                        .map(|_| LocalOperator::new(big.clone(), 2, linalg::random_matrix(&mut rng, 32, 32)).unwrap())
                        .collect()
                } else {
                    matrix_unit_basis(c[p].window(), 2)
                };
                for e in probes {
                    inputs += 1;
                    let lifted = e.embed_into(big).unwrap();
                    let c_low = c[p].apply(&e).unwrap().embed_into(big).unwrap();
                    let g_low = g[p].apply(&e).unwrap().embed_into(big).unwrap();
                    let c_high = c[m].apply(&lifted).unwrap();
                    let g_high = g[m].apply(&lifted).unwrap();
                    tower = tower
                        .max(c_high.max_diff(&c_low).unwrap())
                        .max(g_high.max_diff(&g_low).unwrap());
                    let c_ref = tensor_algebra::commutator(&r_m, &lifted).unwrap();
                    oracle = oracle
                        .max(c_high.max_diff(&c_ref).unwrap())
                        .max(g_high.max_diff(&g_direct(&r_m, &lifted)).unwrap());
                }
            }
        }
    }
    let pass = tower <= 1e-12 && oracle <= 1e-12;
    outcome(
        pass,
        format!("{inputs} embedded inputs, tower defect {tower:.2e}, direct C/G oracle defect {oracle:.2e}"),
    )
}

fn cp_results() -> Vec<StudyResult> {
    let algebra = example("random_cp_sweep.toml");
    let gns = algebra
        .replace("flavor = \"algebra_form\"", "flavor = \"gns_form\"")
        .replace("level = 1\ntimes", "level = 0\ntimes");
    vec![run_text(&algebra), run_text(&gns)]
}

fn conservativity_and_cp(results: &[StudyResult]) -> Outcome {
    let mut detail = Vec::new();
    let mut pass = true;
    for r in results {
        let identity = worst(metric(r, "identity_defect"));
        let min_choi = metric(r, "min_choi_eigenvalue")
            .map(|r| r.value)
            .fold(f64::INFINITY, f64::min);
        let models = metric(r, "identity_annihilation").count();
        let times: Vec<f64> = {
            let mut t: Vec<f64> = metric(r, "identity_defect").map(|r| r.params.t).collect();
            t.dedup();
            t.sort_by(f64::total_cmp);
            t.dedup();
            t
        };
        pass &= models == 10 && times == [0.1, 0.3, 1.0] && identity <= 1e-10 && min_choi >= -1e-10;
        let flavor = &r.records[0].params.flavor;
        detail.push(format!(
            "{flavor}: {models} models, |T_t(I)-I| {identity:.1e}, min Choi eig {min_choi:.1e}"
        ));
    }
    outcome(pass, detail.join("; "))
}

fn generator_consistency(results: &[StudyResult]) -> Outcome {
    let ratios: Vec<f64> = results
        .iter()
        .flat_map(|r| metric(r, "fd_halving_ratio").map(|r| r.value))
        .collect();
    let (lo, hi) = ratios.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let pass = !ratios.is_empty() && ratios.iter().all(|r| (r - 2.0).abs() <= 0.3);
    outcome(pass, format!("{} halving ratios in [{lo:.4}, {hi:.4}]", ratios.len()))
}

fn dilation_convergence() -> Outcome {
    let text = example("sigma_x_convergence.toml");
    let spec = parse_model(&text).unwrap();
    assert!(matches!(spec.flavor, Flavor::GnsForm));
    assert_eq!(spec.grid.steps, [256, 512, 1024]);
    let r = run_study(&spec, &Capacity::default()).unwrap();
    let orders: Vec<f64> = r.fits.iter().filter_map(|f| f.order).collect();
    let decreasing = r.curves.iter().all(|c| c.points.windows(2).all(|w| w[1].1 < w[0].1));
    let pass = r.fits.len() == 5 && orders.len() == 5 && r.passes() && decreasing;
    outcome(
        pass,
        format!(
            "fitted orders {:?}, step unitarity {:.1e}",
            orders.iter().map(|o| format!("{o:.4}")).collect::<Vec<_>>(),
            worst(metric(&r, "step_unitarity_defect"))
        ),
    )
}

fn compatibility() -> Outcome {
    let r = run_text(&example("two_shell_compatibility.toml"));
    let mismatch = worst(metric(&r, "mismatch"));
    let control: Vec<&Record> = r.negative_controls().collect();
    let flagged = control.len() == 1 && control[0].value > 1e-10;
    let pass = r.passes() && mismatch <= 1e-10 && flagged;
    outcome(
        pass,
        format!(
            "basis mismatch {mismatch:.2e}, negative control {:.2e}",
            control.first().map_or(f64::NAN, |c| c.value)
        ),
    )
}

fn dual_process() -> Outcome {
    let r = run_text(&example("random_dual.toml"));
    let dual = worst(metric(&r, "dual_mismatch"));
    let involution = worst(metric(&r, "involution_mismatch"));
    let models = metric(&r, "dual_mismatch").count();
    let pass = models == 10 && dual <= 1e-12 && involution <= 1e-12;
    outcome(
        pass,
        format!("{models} models, dual {dual:.1e}, dual-of-dual {involution:.1e}"),
    )
}

fn ito_assembly() -> Outcome {
    let r = run_text(&example("random_ito.toml"));
    let StudySpec::ItoCheck { channels, .. } = parse_model(&example("random_ito.toml")).unwrap().study else {
        unreachable!()
    };
    let defects = [
        "conservativity_defect",
        "theta00_identity_defect",
        "scattering_unitarity_defect",
    ]
    .map(|m| worst(metric(&r, m)));
    let models = metric(&r, "conservativity_defect").count();
    let controls: Vec<&Record> = r.negative_controls().collect();
    let smallest = controls.iter().map(|c| c.value).fold(f64::INFINITY, f64::min);
    let pass = channels == [1, 2]
        && models == 20
        && defects.iter().all(|&d| d <= 1e-10)
        && controls.len() == 20
        && controls.iter().all(|c| c.pass);
    outcome(
        pass,
        format!(
            "{models} coefficient sets, defects {:.1e}/{:.1e}/{:.1e}, corrupted L00 flagged with defect >= {smallest:.2}",
            defects[0], defects[1], defects[2]
        ),
    )
}

fn evans_hudson() -> Outcome {
    let text = example("sigma_x_evans_hudson.toml");
    let r = run_text(&text);
    let leak = worst(metric(&r, "support_leak"));
    let leak_rows = metric(&r, "support_leak").count();
    let order = r.fits.first().and_then(|f| f.order).unwrap_or(f64::NAN);

    // Closed form: the sigma_x shell damps sigma_z at rate 2.
    let cap = Capacity::default();
    let (sx, _, sz) = pauli();
    let shells = ShellFamily::from_site_operators(2, 1, vec![(0, sx)], &cap).unwrap();
    let inner = shells.window(0, &cap).unwrap();
    let ambient = tensor_algebra::make_window(1, 1, 2, &cap).unwrap();
    let x = LocalOperator::new(inner.clone(), 2, sz.clone())
        .unwrap()
        .embed_into(&ambient)
        .unwrap();
    let want = LocalOperator::new(inner, 2, sz.mapv(|z| z * (-1.0f64).exp()))
        .unwrap()
        .embed_into(&ambient)
        .unwrap();
    let grid = ToyFockGrid::new(0.5, 1024).unwrap();
    let flow = evans_hudson_flow(&shells, 0, &x, grid, &cap).unwrap();
    let closed_form = flow.last().max_diff(&want).unwrap();

    let pass = r.passes() && (order - 1.0).abs() <= 0.15 && leak_rows == 3 && leak <= 1e-12 && closed_form <= 2e-4;
    outcome(
        pass,
        format!("order {order:.4}, |flow - e^-1 sz| {closed_form:.2e} at K=1024, max support leak {leak:.1e}"),
    )
}

fn exponential_pairing() -> Outcome {
    let grid = ToyFockGrid::new(1.0, 1024).unwrap();
    let e1 = exp_vector(|_| vec![linalg::ONE], grid, 1).unwrap();
    let pairing = e1.inner(&e1).unwrap();
    let e = std::f64::consts::E;
    let rel = (pairing - C64::new(e, 0.0)).norm() / e;
    let vacuum = DiscretizedExponentialVector::vacuum(grid, 1).norm_sqr();
    outcome(
        rel <= 3e-3 && vacuum == 1.0,
        format!(
            "<e(1),e(1)> = {:.6} (rel. dev {rel:.2e}), vacuum norm {vacuum}",
            pairing.re
        ),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: usize, name: &str, budget: u64, f: &mut dyn FnMut() -> Outcome| {
        let started = Instant::now();
        let o = f();
        let elapsed = started.elapsed();
        let in_time = elapsed < Duration::from_secs(budget);
        let pass = o.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "{} {id:>2} {name}: {} [{:.2}s / {budget}s]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64()
        );
    };

    report(1, "adjoint identity", 5, &mut adjoint_identity);
    report(2, "restriction tower", 10, &mut restriction_tower);
    report(3, "conservativity and complete positivity", 30, &mut || {
        conservativity_and_cp(&cp_results())
    });
    report(4, "generator consistency", 10, &mut || {
        generator_consistency(&cp_results())
    });
    report(5, "dilation convergence", 60, &mut dilation_convergence);
    report(6, "compatibility", 60, &mut compatibility);
    report(7, "dual process", 10, &mut dual_process);
    report(8, "Ito unitarity conditions", 10, &mut ito_assembly);
    report(9, "Evans-Hudson flow", 60, &mut evans_hudson);
    report(10, "exponential-vector pairing", 1, &mut exponential_pairing);

    if failed == 0 {
        println!("acceptance: 10/10 criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} of 10 criteria FAIL");
        ExitCode::FAILURE
    }
}

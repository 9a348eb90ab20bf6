use deepdp::problems::make_lq_control;
use deepdp::{build_problem, ProblemInstance, ProblemParams, Scheme, TimeGrid, TrainConfig, PROBLEM_IDS};

fn tiny(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        first_step_iters: 20,
        iters_per_step: 5,
        gamma_iters: 5,
        gamma_first_iters: 10,
        seed,
        ..Default::default()
    }
}

#[test]
fn catalog_builds_with_defaults() {
    for id in PROBLEM_IDS {
        let p = build_problem(id, &ProblemParams::default()).unwrap();
        assert!(p.dim() >= 1, "{id}");
    }
    assert!(build_problem("heston", &ProblemParams::default()).is_err());
}

#[test]
fn every_pde_scheme_runs_on_the_public_api() {
    let grid = TimeGrid::new(1.0, 4, 2).unwrap();
    let ProblemInstance::Pde(cva) = build_problem("cva", &ProblemParams::default()).unwrap() else {
        unreachable!()
    };
    for scheme in Scheme::ALL.into_iter().filter(|s| s.is_semilinear()) {
        let r = deepdp::semilinear::solve(&cva, &grid, scheme, &tiny(1)).unwrap();
        assert!(r.estimate_y0.is_finite(), "{scheme}");
        let expected = if scheme == Scheme::DeepBsde { 1 } else { 4 };
        assert_eq!(r.step_losses.len(), expected, "{scheme}");
    }
    for id in ["merton", "scott1", "noleverage1"] {
        let ProblemInstance::Pde(p) = build_problem(id, &ProblemParams::default()).unwrap() else {
            unreachable!()
        };
        for scheme in Scheme::ALL.into_iter().filter(|s| s.is_fully_nonlinear()) {
            let r = deepdp::fully_nonlinear::solve(&p, &grid, scheme, &tiny(2)).unwrap();
            assert!(r.estimate_y0.is_finite(), "{id} {scheme}");
            assert_eq!(r.value_nets.len(), 4);
        }
    }
}

#[test]
fn control_schemes_return_one_policy_per_step() {
    let lq = make_lq_control(3, 1.0, 1.0, 0.5, 1.0).unwrap();
    for scheme in [Scheme::NnContPi, Scheme::HybridNow] {
        let r = deepdp::control::solve(&lq, scheme, &tiny(3)).unwrap();
        assert_eq!(r.policies.len(), 3);
        assert!(r.estimate.is_finite() && r.std_error >= 0.0);
        assert!(r.estimate >= lq.optimal_cost() - 4.0 * r.std_error);
    }
}

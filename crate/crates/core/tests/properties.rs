//! Property tests over randomly drawn small models.

use std::sync::Arc;

use datasched_core::chain::{build_kernel_exact, deep_ck_marginal, EmpiricalSpace, LocalKernel, StateSpace};
use datasched_core::learning::{q_target, virtual_step, VirtualMdpConfig};
use datasched_core::linear::{
    elapsed_cost_closed_form, elapsed_cost_finite_sum, riccati_step, LinearNetworkModel, ObservationModel,
};
use datasched_core::planning::{
    cost_bound, value_iteration, MapEstimator, MeanEstimator, PlanningModel, SupNormFeeCost, TableCost,
    ValueIterationOptions,
};
use datasched_core::{Action, Observation, PlanningState};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn stochastic(dim: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(0.01f64..1.0, dim * dim).prop_map(move |w| {
        let mut m = DMatrix::from_row_slice(dim, dim, &w);
        for i in 0..dim {
            let s: f64 = m.row(i).sum();
            m.row_mut(i).scale_mut(1.0 / s);
        }
        m
    })
}

fn local_model() -> impl Strategy<Value = (u32, DMatrix<f64>)> {
    (1u32..=6, 2usize..=3).prop_flat_map(|(n, d)| (Just(n), stochastic(d)))
}

fn symmetric_stable(max_dim: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (1..=max_dim).prop_flat_map(|d| {
        (prop::collection::vec(-1.0f64..1.0, d * d), 0.05f64..0.97).prop_map(move |(w, radius)| {
            let m = DMatrix::from_row_slice(d, d, &w);
            let s = (&m + m.transpose()) * 0.5;
            let rho = s.clone().symmetric_eigen().eigenvalues.amax().max(1e-9);
            s * (radius / rho)
        })
    })
}

fn psd(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, d * d).prop_map(move |w| {
        let b = DMatrix::from_row_slice(d, d, &w);
        &b * b.transpose()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn deep_ck_marginals_match_exact_kernel((n, local) in local_model()) {
        let d = local.nrows();
        let states = StateSpace::new((0..d).map(|i| i as f64).collect()).unwrap();
        let space = Arc::new(EmpiricalSpace::new(n, &states).unwrap());
        let lk = LocalKernel::decoupled(local).unwrap();
        let kernel = build_kernel_exact(&lk, space.clone()).unwrap();
        for (i, atom) in space.atoms().iter().enumerate() {
            prop_assert!((kernel.matrix().row(i).sum() - 1.0).abs() < 1e-12);
            for target in 0..d {
                let ck = deep_ck_marginal(atom, target, &lk).unwrap();
                let mut exact = vec![0.0; n as usize + 1];
                for (j, next) in space.atoms().iter().enumerate() {
                    exact[next.count(target) as usize] += kernel.matrix()[(i, j)];
                }
                for (a, b) in ck.iter().zip(&exact) {
                    prop_assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn values_bounded_and_scale_linearly(
        local in stochastic(2),
        n in 1u32..=4,
        raw in prop::collection::vec(0.0f64..1.0, 50),
        scale in 0.1f64..20.0,
        q in 0.0f64..=1.0,
        gamma in 0.3f64..0.9,
    ) {
        let states = StateSpace::new(vec![0.0, 1.0]).unwrap();
        let space = Arc::new(EmpiricalSpace::new(n, &states).unwrap());
        let kernel = build_kernel_exact(&LocalKernel::decoupled(local).unwrap(), space.clone()).unwrap();
        let len = space.len();
        let base = TableCost::from_fn((*space).clone(), |i, j, a| raw[(i * len + j) * 2 + a.index()]).unwrap();
        let scaled = TableCost::from_fn((*space).clone(), |i, j, a| scale * raw[(i * len + j) * 2 + a.index()]).unwrap();
        let opts = ValueIterationOptions::default();
        let k = 12;
        let m1 = PlanningModel { kernel: &kernel, cost: &base, estimator: &MapEstimator, q, gamma };
        let m2 = PlanningModel { kernel: &kernel, cost: &scaled, estimator: &MapEstimator, q, gamma };
        let v1 = value_iteration(&m1, k, &opts).unwrap();
        let v2 = value_iteration(&m2, k, &opts).unwrap();
        let c_max = cost_bound(&base, &space);
        for x in 0..len {
            for y in 0..=k {
                let v = v1.value(x, y);
                prop_assert!(v >= -1e-9 && v <= c_max / (1.0 - gamma) + 1e-9);
                prop_assert!((v2.value(x, y) - scale * v).abs() <= 1e-6 * (1.0 + scale * v));
            }
        }
    }

    #[test]
    fn higher_fee_never_lowers_values(local in stochastic(2), n in 1u32..=4, fee in 0.0f64..1.0, extra in 0.0f64..1.0) {
        let states = StateSpace::new(vec![0.0, 1.0]).unwrap();
        let space = Arc::new(EmpiricalSpace::new(n, &states).unwrap());
        let kernel = build_kernel_exact(&LocalKernel::decoupled(local).unwrap(), space.clone()).unwrap();
        let cheap = SupNormFeeCost::new(fee);
        let dear = SupNormFeeCost::new(fee + extra);
        let opts = ValueIterationOptions::default();
        let a = value_iteration(&PlanningModel { kernel: &kernel, cost: &cheap, estimator: &MeanEstimator, q: 0.8, gamma: 0.8 }, 10, &opts).unwrap();
        let b = value_iteration(&PlanningModel { kernel: &kernel, cost: &dear, estimator: &MeanEstimator, q: 0.8, gamma: 0.8 }, 10, &opts).unwrap();
        for x in 0..space.len() {
            for y in 0..=10 {
                prop_assert!(b.value(x, y) >= a.value(x, y) - 1e-9);
            }
        }
    }

    #[test]
    fn elapsed_cost_closed_form_matches_sum(a in symmetric_stable(8), y in 0usize..=50, seed in prop::collection::vec(-1.0f64..1.0, 64)) {
        let d = a.nrows();
        let b = DMatrix::from_fn(d, d, |i, j| seed[i * 8 + j]);
        let sigma = &b * b.transpose();
        let model = LinearNetworkModel::new(a, sigma, 0.9, 0.85, 0.3).unwrap();
        for action in Action::ALL {
            let closed = elapsed_cost_closed_form(y, action, &model).unwrap();
            let sum = elapsed_cost_finite_sum(y, action, &model);
            prop_assert!((closed - sum).abs() <= 1e-9 * sum.abs().max(1.0), "{closed} vs {sum}");
        }
    }

    #[test]
    fn riccati_keeps_covariance_psd_and_collection_helps(
        a in symmetric_stable(3),
        seeds in (psd(3), psd(3), psd(3)),
    ) {
        let d = a.nrows();
        let (w, p, xi) = seeds;
        let cut = |m: &DMatrix<f64>| m.view((0, 0), (d, d)).into_owned();
        let model = LinearNetworkModel::new(a, cut(&w), 0.9, 0.85, 1.0).unwrap();
        let obs = ObservationModel { c: DMatrix::identity(d, d), sigma_xi: cut(&xi) + DMatrix::identity(d, d) * 1e-3 };
        let p = cut(&p);
        let open = riccati_step(&p, Action::Estimate, &model, &obs).unwrap();
        let closed = riccati_step(&p, Action::Collect, &model, &obs).unwrap();
        prop_assert!(closed.trace() <= open.trace() + 1e-9);
        let min_eig = closed.clone().symmetric_eigen().eigenvalues.min();
        prop_assert!(min_eig >= -1e-9);
        prop_assert!((&closed - closed.transpose()).amax() == 0.0);
    }

    #[test]
    fn virtual_transition_stays_in_bounds(k in 0usize..30, atoms in 1usize..10, steps in prop::collection::vec((any::<bool>(), 0usize..10), 1..200)) {
        let cfg = VirtualMdpConfig { k, anchor: 0, q: 0.9, gamma: 0.9 };
        let mut s = PlanningState::new(0, 0);
        for (blank, m) in steps {
            let o = if blank { Observation::Blank } else { Observation::Data(m % atoms) };
            s = virtual_step(s, o, &cfg);
            prop_assert!(s.elapsed <= k && s.last < atoms);
        }
    }

    #[test]
    fn q_target_interpolates(q in -10.0f64..10.0, c in 0.0f64..5.0, next in 0.0f64..10.0, alpha in 0.0f64..=1.0, gamma in 0.0f64..1.0) {
        let sample = c + gamma * next;
        let t = q_target(q, c, next, alpha, gamma);
        prop_assert!(t >= q.min(sample) - 1e-12 && t <= q.max(sample) + 1e-12);
    }
}

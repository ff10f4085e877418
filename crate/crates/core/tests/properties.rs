use std::sync::{Arc, OnceLock};

use lod_homog::bench::{make_solver, worst_case_error, Bench, SolverHandle, SolverKind};
use lod_homog::coefficients::{exp1_twofreq, Raster};
use lod_homog::corrector::{compute_all_correctors, LodContext, Oversampling};
use lod_homog::effective::{eta_estimator, spectral_bounds, LocalTensorField};
use lod_homog::fem::{sym_eigenvalues, CoefficientField, FeSpace, SpaceKind, Tensor};
use lod_homog::geometry::{build_uniform_mesh, refine_uniform};
use lod_homog::sparse::dot;
use proptest::prelude::*;

fn context(kind: SpaceKind) -> LodContext {
    let c = Arc::new(build_uniform_mesh(4).unwrap());
    let f = Arc::new(refine_uniform(&c, 2));
    let coeff = CoefficientField::from_scalar_fn(f.clone(), exp1_twofreq(0.25, 0.125)).unwrap();
    LodContext::new(FeSpace::new(c, kind).unwrap(), FeSpace::new(f, kind).unwrap(), coeff).unwrap()
}

fn handles(kind: SpaceKind) -> Vec<SolverHandle> {
    let ctx = context(kind);
    let set = compute_all_correctors(&ctx, Oversampling::Layers(1)).unwrap();
    let bench = Arc::new(Bench::new(Arc::new(ctx)).unwrap());
    [
        SolverKind::Reference,
        SolverKind::StandardFem,
        SolverKind::QuasiLocal,
        SolverKind::Local,
        SolverKind::BestApproximation,
    ]
    .into_iter()
    .map(|k| make_solver(&bench, k, Some(&set)).unwrap())
    .collect()
}

fn dirichlet() -> &'static [SolverHandle] {
    static H: OnceLock<Vec<SolverHandle>> = OnceLock::new();
    H.get_or_init(|| handles(SpaceKind::Dirichlet))
}

fn periodic() -> &'static [SolverHandle] {
    static H: OnceLock<Vec<SolverHandle>> = OnceLock::new();
    H.get_or_init(|| handles(SpaceKind::PeriodicMeanFree))
}

const FULL: usize = 17 * 17;

fn vector() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, FULL)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn rotation(theta: f64) -> Tensor {
    let (s, c) = theta.sin_cos();
    Tensor::new(c, -s, s, c)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn solution_operators_are_linear(f in vector(), g in vector(), alpha in -3.0f64..3.0) {
        for h in dirichlet().iter().chain(periodic()) {
            let combo: Vec<f64> = f.iter().zip(&g).map(|(a, b)| alpha * a + b).collect();
            let lhs = h.apply(&combo);
            let (sf, sg) = (h.apply(&f), h.apply(&g));
            let rhs: Vec<f64> = sf.iter().zip(&sg).map(|(a, b)| alpha * a + b).collect();
            let scale = max_abs(&rhs).max(max_abs(&sf)).max(max_abs(&sg)).max(1e-300);
            let diff: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
            prop_assert!(max_abs(&diff) <= 1e-12 * scale, "{:?}", h.kind);
        }
    }

    #[test]
    fn periodic_solutions_are_mean_free(f in vector()) {
        for h in periodic() {
            let u = h.apply(&f);
            let m = h.bench().ctx.fine.mass_vector();
            let mean = dot(&m, &u);
            prop_assert!(mean.abs() <= 1e-11 * max_abs(&u).max(1.0), "{:?}: {mean}", h.kind);
        }
    }

    #[test]
    fn interpolation_reproduces_coarse_functions(v in prop::collection::vec(-5.0f64..5.0, 9)) {
        static CTX: OnceLock<LodContext> = OnceLock::new();
        let ctx = CTX.get_or_init(|| context(SpaceKind::Dirichlet));
        let back = ctx.interpolation.matvec(&ctx.prolongation.matvec(&v));
        for (a, b) in back.iter().zip(&v) {
            prop_assert!((a - b).abs() <= 1e-12 * max_abs(&v).max(1.0));
        }
    }

    #[test]
    fn spectral_bounds_are_rotation_invariant(
        a in 0.1f64..5.0, b in 0.1f64..5.0, c in -0.5f64..0.5, theta in 0.0f64..6.3,
    ) {
        let t = Tensor::new(a, c, c, b);
        let r = rotation(theta);
        let (lo, hi) = spectral_bounds(&[t]);
        let (lo2, hi2) = spectral_bounds(&[r * t * r.transpose()]);
        prop_assert!((lo - lo2).abs() <= 1e-12 * hi && (hi - hi2).abs() <= 1e-12 * hi);
        let (e1, e2) = sym_eigenvalues(&t);
        prop_assert!((lo - e1.min(e2)).abs() <= 1e-12 * hi);
    }

    #[test]
    fn constant_fields_have_zero_indicator(a in 0.1f64..5.0, b in 0.1f64..5.0, scale in 0.01f64..100.0) {
        let mesh = Arc::new(build_uniform_mesh(4).unwrap());
        let t = Tensor::new(a, 0.0, 0.0, b) * scale;
        let field = LocalTensorField::from_tensors(mesh.clone(), vec![t; mesh.num_elements()]).unwrap();
        let r = eta_estimator(&field);
        prop_assert_eq!(r.eta, Some(0.0));
        prop_assert!((r.alpha_h - a.min(b) * scale).abs() <= 1e-12 * scale * 5.0);
    }

    #[test]
    fn raster_roundtrip(rows in 1usize..6, cols in 1usize..6, seed in 0u64..1000) {
        let values: Vec<f64> = (0..rows * cols).map(|i| 1.0 + ((i as u64 * 31 + seed) % 17) as f64).collect();
        let mut text = format!("{rows} {cols}\n");
        for r in 0..rows {
            let line: Vec<String> = (0..cols).map(|c| values[r * cols + c].to_string()).collect();
            text.push_str(&line.join(" "));
            text.push('\n');
        }
        let raster = Raster::parse(&text).unwrap();
        for r in 0..rows {
            for c in 0..cols {
                let p = [(c as f64 + 0.5) / cols as f64, (r as f64 + 0.5) / rows as f64];
                prop_assert_eq!(raster.eval(p), values[r * cols + c]);
            }
        }
    }
}

#[test]
fn power_iteration_history_is_nondecreasing() {
    let hs = dirichlet();
    for h in &hs[1..] {
        let w = worst_case_error(&hs[0], h, 1e-10);
        for pair in w.history.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-13, "{:?}", h.kind);
        }
    }
}

use markov_renewal::family::Family;
use markov_renewal::kernel::{default_snap_tol, dist_convolve, kernel_power, lattice_type, stationary_drift, Dist, LatticeType, SemiMarkovKernel};
use markov_renewal::perron::{harmonic_transform, perron_pair, QSMatrix, DEFAULT_TOL};
use markov_renewal::renewal::{renewal_measure, uv_transform, RenewalOptions, UvDirection};
use markov_renewal::Exec;
use nalgebra::DMatrix;
use proptest::prelude::*;

const STEP: f64 = 0.01;

fn arb_family() -> impl Strategy<Value = Family> {
    prop_oneof![
        (0.5..3.0f64).prop_map(|rate| Family::Exp { rate }),
        (-1.0..1.0f64, 0.2..1.0f64).prop_map(|(mean, sd)| Family::Normal { mean, sd }),
        (-1.0..1.0f64, 0.1..1.5f64).prop_map(|(a, w)| Family::Uniform { a, b: a + w }),
        (-20..20i32).prop_map(|k| Family::Point { x: k as f64 * 0.05 }),
    ]
}

/// Irreducible nonnegative matrix: random entries plus a cycle through all states.
fn arb_matrix(max_m: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (1..=max_m).prop_flat_map(|m| {
        proptest::collection::vec(prop_oneof![Just(0.0), 0.01..2.0f64], m * m).prop_map(move |e| {
            let mut q = DMatrix::from_row_slice(m, m, &e);
            for i in 0..m {
                q[(i, (i + 1) % m)] += 0.5;
            }
            q
        })
    })
}

fn max_cell_diff(a: &Dist, b: &Dist) -> f64 {
    let (a, b) = (&a.mass, &b.mass);
    let lo = a.start.min(b.start);
    let hi = (a.start + a.cells.len() as i64).max(b.start + b.cells.len() as i64);
    let cells = (lo..hi).map(|k| (a.cell(k) - b.cell(k)).abs()).fold(0.0, f64::max);
    let atoms = (a.atom_total() - b.atom_total()).abs();
    cells.max(atoms)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dist_convolution_associative(f in arb_family(), g in arb_family(), h in arb_family()) {
        let (f, g, h) = (Dist::from_family(f, STEP), Dist::from_family(g, STEP), Dist::from_family(h, STEP));
        let left = dist_convolve(&dist_convolve(&f, &g).unwrap(), &h).unwrap();
        let right = dist_convolve(&f, &dist_convolve(&g, &h).unwrap()).unwrap();
        prop_assert!(max_cell_diff(&left, &right) < 1e-9);
        let swapped = dist_convolve(&g, &f).unwrap();
        prop_assert!(max_cell_diff(&dist_convolve(&f, &g).unwrap(), &swapped) < 1e-9);
    }

    #[test]
    fn perron_data_normalised(q in arb_matrix(8)) {
        let pd = perron_pair(&QSMatrix::new(q.clone()).unwrap(), DEFAULT_TOL).unwrap();
        prop_assert!((pd.u.sum() - 1.0).abs() < 1e-10);
        prop_assert!((pd.u.dot(&pd.v) - 1.0).abs() < 1e-10);
        prop_assert!(pd.u.iter().chain(pd.v.iter()).all(|&x| x > 0.0));
        let scale = pd.rho * q.norm().max(1.0);
        prop_assert!((&q * &pd.v - pd.rho * &pd.v).amax() < 1e-8 * scale);
        prop_assert!((q.transpose() * &pd.u - pd.rho * &pd.u).amax() < 1e-8 * scale);
    }

    #[test]
    fn harmonic_transform_is_stochastic(q in arb_matrix(6)) {
        let pd = perron_pair(&QSMatrix::new(q.clone()).unwrap(), DEFAULT_TOL).unwrap();
        let qs = QSMatrix::new(q / pd.rho).unwrap();
        let pd = perron_pair(&qs, DEFAULT_TOL).unwrap();
        let h = harmonic_transform(&qs, &pd).unwrap();
        for i in 0..h.p.nrows() {
            prop_assert!((h.p.row(i).sum() - 1.0).abs() < 1e-9);
        }
        // π is stationary for the transform
        let pi_t = pd.pi.transpose() * &h.p;
        prop_assert!((pi_t.transpose() - &pd.pi).amax() < 1e-9);
    }

    #[test]
    fn kernel_power_totals_match_matrix_power(q in arb_matrix(3), fams in proptest::collection::vec(arb_family(), 9), n in 0usize..4) {
        let m = q.nrows();
        let fams: Vec<Option<Family>> = (0..m * m).map(|k| (q[(k / m, k % m)] > 0.0).then(|| fams[k].clone())).collect();
        let k = SemiMarkovKernel::from_families(QSMatrix::new(q.clone()).unwrap(), &fams, 0.05).unwrap();
        let totals = kernel_power(&k, n, Exec::Sequential).unwrap().totals();
        let want = (0..n).fold(DMatrix::identity(m, m), |acc, _| acc * &q);
        prop_assert!((totals - &want).amax() < 1e-9 * want.amax().max(1.0));
    }

    #[test]
    fn lattice_invariant_under_relabelling(
        offsets in proptest::collection::vec(0..4i32, 3),
        jumps in proptest::collection::vec(-2..3i32, 9),
        perm in Just([0usize, 1, 2]).prop_shuffle(),
    ) {
        // every increment lies in γ(j) − γ(i) + 2ℤ for γ = offsets / 2
        let build = |order: &[usize]| {
            let mut fams = Vec::new();
            for a in 0..3 {
                for b in 0..3 {
                    let (i, j) = (order[a], order[b]);
                    let x = 0.5 * (offsets[j] - offsets[i]) as f64 + 2.0 * jumps[i * 3 + j] as f64;
                    fams.push(Some(Family::Point { x }));
                }
            }
            let k = SemiMarkovKernel::from_families(QSMatrix::new(DMatrix::from_element(3, 3, 1.0 / 3.0)).unwrap(), &fams, STEP).unwrap();
            let pd = perron_pair(&k.weights, DEFAULT_TOL).unwrap();
            lattice_type(&k, &pd, default_snap_tol(&k))
        };
        let base = build(&[0, 1, 2]);
        let relabelled = build(&perm);
        match (base, relabelled) {
            (LatticeType::Arithmetic { span: d0, shifts: g0 }, LatticeType::Arithmetic { span: d1, shifts: g1 }) => {
                prop_assert!((d0 - d1).abs() < 1e-9);
                for a in 0..3 {
                    for b in 0..3 {
                        let x = g0[perm[a]] - g0[perm[b]];
                        let y = g1[a] - g1[b];
                        let r = (x - y) / d0;
                        prop_assert!((r - r.round()).abs() < 1e-6, "shift differences disagree: {g0:?} {g1:?}");
                    }
                }
            }
            (a, b) => prop_assert!(false, "expected arithmetic kernels, got {a:?} and {b:?}"),
        }
    }
}

#[test]
fn execution_modes_agree_on_renewal_measure() {
    let e = Some(Family::Exp { rate: 1.0 });
    let n = Some(Family::Normal { mean: 0.5, sd: 1.0 });
    let k = SemiMarkovKernel::from_families(QSMatrix::from_rows(&[vec![0.0, 2.0], vec![0.5, 0.0]]).unwrap(), &[None, e, n, None], 0.02).unwrap();
    let pd = perron_pair(&k.weights, DEFAULT_TOL).unwrap();
    let st = stationary_drift(&k, &pd).unwrap();
    let run = |exec| renewal_measure(&k, &pd, &st, (-5.0, 15.0), &RenewalOptions { exec, ..Default::default() }).unwrap();
    assert_eq!(run(Exec::Sequential), run(Exec::Parallel));
}

#[test]
fn uv_transform_round_trip() {
    let e = Some(Family::Exp { rate: 1.0 });
    let k = SemiMarkovKernel::from_families(QSMatrix::from_rows(&[vec![0.0, 2.0], vec![0.5, 0.0]]).unwrap(), &[None, e.clone(), e, None], 0.02).unwrap();
    let pd = perron_pair(&k.weights, DEFAULT_TOL).unwrap();
    let st = stationary_drift(&k, &pd).unwrap();
    let v = renewal_measure(&k, &pd, &st, (-5.0, 15.0), &RenewalOptions::default()).unwrap();
    let back = uv_transform(&uv_transform(&v, &pd, UvDirection::VToU), &pd, UvDirection::UToV);
    for (a, b) in v.entries.iter().zip(&back.entries) {
        for (x, y) in a.cells.iter().zip(&b.cells) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}

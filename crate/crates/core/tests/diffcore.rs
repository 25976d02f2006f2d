mod tensor {
    use prefdiff::diffcore::*;
    use prefdiff::Error;

    #[test]
    fn rejects_non_finite_and_bad_shape() {
        assert!(Tensor::<f64>::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::<f64>::new(vec![1], vec![f64::INFINITY]).is_err());
        assert!(matches!(
            Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::BadShape { .. })
        ));
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let id = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(a.matmul(&id).unwrap(), a);
    }

    #[test]
    fn matmul_transposes() {
        let a = Tensor::<f64>::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let ata = a.matmul_t(true, &a, false).unwrap();
        assert_eq!(ata.shape(), &[3, 3]);
        assert_eq!(ata.data()[0], 17.0);
        let aat = a.matmul_t(false, &a, true).unwrap();
        assert_eq!(aat.data(), &[14.0, 32.0, 32.0, 77.0]);
        let err = a.matmul(&a).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn stable_log_sigmoid() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((log_sigmoid(-5000.0f64) + 5000.0).abs() < 1e-9);
        assert!(log_sigmoid(5000.0f64).abs() < 1e-300);
        assert!((log_sigmoid(1.3f64) - (1.0 / (1.0 + (-1.3f64).exp())).ln()).abs() < 1e-15);
    }

    #[test]
    fn f32_gemm_dispatch() {
        let a = Tensor::<f32>::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::<f32>::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }
}

mod graph {
    use prefdiff::diffcore::*;
    use prefdiff::Error;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_and_log_values() {
        let g = Graph::new();
        let x = g.param(t(&[], &[0.0]));
        let s = x.sigmoid().unwrap();
        assert_eq!(s.item().unwrap(), 0.5);
        let one = g.constant(t(&[], &[1.0]));
        assert_eq!(one.ln().unwrap().item().unwrap(), 0.0);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.25]);
    }

    #[test]
    fn squared_norm_gradient() {
        let g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = x.square().unwrap().sum().unwrap();
        assert_eq!(g.backward(y).unwrap().wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_backward_fails() {
        let g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn stop_gradient_detaches_one_branch() {
        let g = Graph::new();
        let x = g.param(t(&[], &[3.0]));
        let y = x.stop_gradient().mul(x).unwrap();
        assert_eq!(y.item().unwrap(), 9.0);
        assert_eq!(g.backward(y).unwrap().wrt(x).data(), &[3.0]);

        let g = Graph::new();
        let x = g.param(t(&[2], &[1.0, -2.0]));
        let n = x.square().unwrap().sum().unwrap().stop_gradient();
        assert_eq!(n.item().unwrap(), 5.0);
        let grads = g.backward(n).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 0.0]);
        assert!(!grads.reached(x));
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let unused = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = x.sum().unwrap();
        assert_eq!(g.backward(y).unwrap().wrt(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn shape_errors_name_operation() {
        let g = Graph::new();
        let a = g.param(t(&[2], &[1.0, 2.0]));
        let b = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let msg = a.add(b).unwrap_err().to_string();
        assert!(msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn screening_flags_non_finite() {
        let g = Graph::new().with_screening(true);
        let x = g.constant(t(&[1], &[-1.0]));
        assert!(matches!(x.ln(), Err(Error::NonFinite { op: "ln" })));
    }

    #[test]
    fn gather_scatters_gradient() {
        let g = Graph::new();
        let table = g.param(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let rows = table.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(rows.value().data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let grads = g.backward(rows.sum().unwrap()).unwrap();
        assert_eq!(grads.wrt(table).data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}

mod gradcheck {
    use prefdiff::diffcore::*;
    use prefdiff::Error;

    #[test]
    fn quadratic_is_exact() {
        let p = vec![Tensor::<f64>::vector(vec![0.7, -1.3, 2.1]).unwrap()];
        let r = finite_diff_check(
            |g, v| {
                let c = g.constant(Tensor::vector(vec![1.0, 2.0, -0.5]).unwrap());
                v[0].sub(c)?.square()?.sum()?.scale(1.5)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn non_finite_evaluation_names_parameter() {
        // ln(x) at x = 1e-7 with step 1e-6 probes a negative argument.
        let p = vec![
            Tensor::<f64>::vector(vec![2.0]).unwrap(),
            Tensor::<f64>::vector(vec![3.0, 1e-7]).unwrap(),
        ];
        let err = finite_diff_check(
            |_g, v| v[0].sum()?.add(v[1].ln()?.sum()?),
            &p,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, Error::FiniteDiffNonFinite { tensor: 1, index: 1 }), "{err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let p = vec![Tensor::<f64>::vector(vec![1.0]).unwrap()];
        assert!(finite_diff_check(|_g, v| v[0].sum(), &p, 0.0).is_err());
    }
}

mod properties {
    use prefdiff::diffcore::*;
    use prefdiff::Result;
    use proptest::prelude::*;

    const OPS: [&str; 20] = [
        "add", "sub", "mul", "matmul", "broadcast_rows", "add_row", "concat", "silu", "relu", "sigmoid", "ln",
        "log_sigmoid", "square", "scale", "neg", "add_scalar", "sum", "mean", "row_sum", "gather_rows",
    ];

    fn mat(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], v[..rows * cols].to_vec()).unwrap()
    }

    /// Applies primitive `op` to the parameters and reduces to a scalar
    /// through a fixed random weighting, so every output element matters.
    fn apply<'g>(op: &str, g: &'g Graph<f64>, v: &[Var<'g, f64>], w: &Tensor<f64>) -> Result<Var<'g, f64>> {
        let (a, b) = (v[0], v[1]);
        let out = match op {
            "add" => a.add(b)?,
            "sub" => a.sub(b)?,
            "mul" => a.mul(b)?,
            "matmul" => a.matmul(v[2])?,
            "broadcast_rows" => v[3].broadcast_rows(2)?,
            "add_row" => a.add_row(v[3])?,
            "concat" => Var::concat(&[a, b])?.gather_rows(&[0, 1])?.matmul(v[4])?,
            "silu" => a.silu()?,
            "relu" => a.relu()?,
            "sigmoid" => a.sigmoid()?,
            "ln" => a.square()?.add_scalar(0.5)?.ln()?,
            "log_sigmoid" => a.scale(3.0)?.log_sigmoid()?,
            "square" => a.square()?,
            "scale" => a.scale(-1.7)?,
            "neg" => a.neg()?,
            "add_scalar" => a.add_scalar(0.25)?.square()?,
            "sum" => return a.mul(g.constant(w.clone()))?.sum()?.square(),
            "mean" => return a.mul(g.constant(w.clone()))?.mean()?.square(),
            "row_sum" => return a.row_sum()?.square()?.sum(),
            "gather_rows" => a.gather_rows(&[1, 0, 1])?.gather_rows(&[0, 2])?,
            _ => unreachable!(),
        };
        out.mul(g.constant(w.clone()))?.sum()
    }

    fn params(v: &[f64]) -> Vec<Tensor<f64>> {
        vec![
            mat(2, 3, &v[0..]),
            mat(2, 3, &v[6..]),
            mat(3, 3, &v[12..]),
            mat(1, 3, &v[21..]),
            mat(6, 3, &v[24..]),
        ]
    }

    // Keep relu inputs clear of the kink.
    fn away_from_zero(x: f64) -> f64 {
        if x.abs() < 0.05 { x.signum().max(0.0) * 0.1 + 0.05 } else { x }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn every_primitive_matches_central_differences(
            raw in proptest::collection::vec(-2.0f64..2.0, 42),
            wv in proptest::collection::vec(-1.0f64..1.0, 6),
        ) {
            let p = params(&raw.iter().copied().map(away_from_zero).collect::<Vec<_>>());
            let w = mat(2, 3, &wv);
            for op in OPS {
                let rep = finite_diff_check(|g, v| apply(op, g, v, &w), &p, 1e-6).unwrap();
                prop_assert!(rep.max_rel_err < 1e-5 || max_abs_gap(op, &p, &w) < 1e-9, "{op}: {rep:?}");
            }
        }

        #[test]
        fn stop_gradient_never_changes_values_and_backward_is_deterministic(
            raw in proptest::collection::vec(-2.0f64..2.0, 42),
            wv in proptest::collection::vec(-1.0f64..1.0, 6),
        ) {
            let p = params(&raw);
            let w = mat(2, 3, &wv);
            let g = Graph::new();
            let v: Vec<_> = p.iter().map(|t| g.param(t.clone())).collect();
            let plain = v[0].mul(v[1]).unwrap().sigmoid().unwrap();
            let held = v[0].stop_gradient().mul(v[1]).unwrap().sigmoid().unwrap();
            prop_assert_eq!(&*plain.value(), &*held.value());
            let out = plain.mul(g.constant(w.clone())).unwrap().sum().unwrap();
            let a = g.backward(out).unwrap();
            let b = g.backward(out).unwrap();
            for &x in &v {
                prop_assert_eq!(a.wrt(x), b.wrt(x));
            }
        }
    }

    /// Largest |autodiff - central difference| in absolute terms, for
    /// gradients that are zero up to rounding where a relative error means nothing.
    fn max_abs_gap(op: &str, p: &[Tensor<f64>], w: &Tensor<f64>) -> f64 {
        let g = Graph::new();
        let v: Vec<_> = p.iter().map(|t| g.param(t.clone())).collect();
        let out = apply(op, &g, &v, w).unwrap();
        let grads = g.backward(out).unwrap();
        let mut worst = 0.0f64;
        for (ti, t) in p.iter().enumerate() {
            for ei in 0..t.len() {
                let f = |d: f64| {
                    let mut q = p.to_vec();
                    let mut data = q[ti].data().to_vec();
                    data[ei] += d;
                    q[ti] = Tensor::new(q[ti].shape().to_vec(), data).unwrap();
                    let g = Graph::new();
                    let v: Vec<_> = q.iter().map(|t| g.constant(t.clone())).collect();
                    apply(op, &g, &v, w).unwrap().item().unwrap()
                };
                let cd = (f(1e-6) - f(-1e-6)) / 2e-6;
                worst = worst.max((grads.wrt(v[ti]).data()[ei] - cd).abs());
            }
        }
        worst
    }

    #[test]
    fn two_layer_network_matches_central_differences() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut draw = |rows: usize, cols: usize| {
            let d: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(&mut r)).collect();
            Tensor::new(vec![rows, cols], d).unwrap()
        };
        let x = draw(6, 3);
        let y = draw(6, 2);
        let p = vec![draw(3, 8), draw(1, 8), draw(8, 2), draw(1, 2)];
        let rep = finite_diff_check(
            |g, v| {
                let h = g.constant(x.clone()).matmul(v[0])?.add_row(v[1])?.silu()?;
                let out = h.matmul(v[2])?.add_row(v[3])?;
                out.sub(g.constant(y.clone()))?.square()?.mean()
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }
}

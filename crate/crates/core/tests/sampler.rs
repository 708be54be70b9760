use tpf_core::distributions::{
    build_proxy, sample_input, FeedInBounds, InputDistribution, TruncatedNormal,
};
use tpf_core::grid::{residual, GridSpec, GridState, ScenarioInput};
use tpf_core::instances::InstanceSpec;
use tpf_core::numerics::{norm_inf, DenseMatrix, RngStream};
use tpf_core::sampler::{
    effective_sample_rate, generate_direct, generate_importance, golden_residuals, resample,
    Dataset, GenerateOptions, Generator, SINGLE_PASS_CERTIFICATE,
};
use tpf_core::solver::{Solver, SolverConfig};
use tpf_core::stats::{weighted_mean, weighted_mean_se};

fn instance(name: &str) -> (GridSpec, InputDistribution) {
    name.parse::<InstanceSpec>().unwrap().build().unwrap()
}

const SERIAL: GenerateOptions = GenerateOptions {
    parallel: false,
    log_jacobian: false,
};

fn active_flows(spec: &GridSpec, state: &GridState) -> Vec<f64> {
    spec.active_edges()
        .iter()
        .map(|e| state.mdot[e.0])
        .collect()
}

#[test]
fn direct_samples_meet_certificate() {
    let (spec, dist) = instance("L5_1.5");
    let data = generate_direct(
        &spec,
        &dist,
        50,
        &SolverConfig::default(),
        &RngStream::new(3),
        GenerateOptions::default(),
    )
    .unwrap();
    assert_eq!(data.len(), 50);
    assert_eq!(data.generator, Generator::Direct);
    assert!(data.proxy.is_none());
    for s in &data.samples {
        assert_eq!(s.weight, 1.0);
        assert!(norm_inf(&residual(&spec, &s.state, &s.input).unwrap()) <= 1e-6);
    }
    assert!(data.telemetry.solver_iterations > 0);
    assert_eq!(data.timing.per_sample.len(), 50);
}

#[test]
fn importance_samples_never_iterate() {
    let (spec, dist) = instance("C6_1");
    let data = generate_importance(
        &spec,
        &dist,
        200,
        &SolverConfig::default(),
        &RngStream::new(4),
        GenerateOptions::default(),
    )
    .unwrap();
    let t = data.telemetry;
    assert_eq!(t.solver_iterations, 0);
    assert_eq!(t.setup_solves, 2);
    assert_eq!(t.hydraulic_solves, t.attempts);
    assert!(t.max_residual <= SINGLE_PASS_CERTIFICATE);
    for s in &data.samples {
        assert!(norm_inf(&residual(&spec, &s.state, &s.input).unwrap()) <= SINGLE_PASS_CERTIFICATE);
    }
    let mean_w = data.weights().iter().sum::<f64>() / data.len() as f64;
    assert!((mean_w - 1.0).abs() < 1e-12);
}

#[test]
fn dataset_files_are_reproducible_and_thread_independent() {
    let (spec, dist) = instance("L6_1.6");
    let cfg = SolverConfig::default();
    let rng = RngStream::new(11);
    let a = generate_importance(&spec, &dist, 64, &cfg, &rng, GenerateOptions::default()).unwrap();
    let b = generate_importance(&spec, &dist, 64, &cfg, &rng, GenerateOptions::default()).unwrap();
    let c = generate_importance(&spec, &dist, 64, &cfg, &rng, SERIAL).unwrap();
    assert_eq!(a.to_tsv(&spec), b.to_tsv(&spec));
    assert_eq!(a.to_tsv(&spec), c.to_tsv(&spec));
    let d = generate_direct(&spec, &dist, 16, &cfg, &rng, GenerateOptions::default()).unwrap();
    let e = generate_direct(&spec, &dist, 16, &cfg, &rng, SERIAL).unwrap();
    assert_eq!(d.to_tsv(&spec), e.to_tsv(&spec));
}

#[test]
fn tsv_round_trip() {
    let (spec, dist) = instance("C4_1");
    let opts = GenerateOptions {
        parallel: true,
        log_jacobian: true,
    };
    let data = generate_importance(
        &spec,
        &dist,
        20,
        &SolverConfig::default(),
        &RngStream::new(8),
        opts,
    )
    .unwrap();
    let text = data.to_tsv(&spec);
    let back = Dataset::from_tsv(&spec, &text).unwrap();
    assert_eq!(back.to_tsv(&spec), text);
    assert_eq!(back.samples, data.samples);
    assert_eq!(back.telemetry, data.telemetry);
    assert_eq!(back.proxy, data.proxy);

    let (other, _) = instance("C5_1");
    assert!(Dataset::from_tsv(&other, &text).is_err());
}

#[test]
fn importance_states_match_iterative_solves() {
    let (spec, dist) = instance("L4_1.4");
    let data = generate_importance(
        &spec,
        &dist,
        20,
        &SolverConfig::default(),
        &RngStream::new(9),
        GenerateOptions::default(),
    )
    .unwrap();
    let solver = Solver::new(&spec, SolverConfig::default()).unwrap();
    for s in data.samples.iter().filter(|s| s.weight > 0.0) {
        if s.state.mdot.iter().any(|m| m.abs() < 0.05) {
            continue;
        }
        let (x, _) = solver.solve_combined(&s.input).unwrap();
        for (a, b) in x.to_vector().iter().zip(s.state.to_vector()) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }
}

/// Scales the power covariance by `scale^2` and pins the feed-in
/// temperatures at mid-range.
fn shrunk(spec: &GridSpec, dist: &InputDistribution, scale: f64) -> InputDistribution {
    let mu = dist.powers().mean().to_vec();
    let rows: Vec<Vec<f64>> = (0..mu.len())
        .map(|r| {
            dist.powers()
                .cov()
                .row(r)
                .iter()
                .map(|v| v * scale * scale)
                .collect()
        })
        .collect();
    let mid = dist.feed_in().midpoint();
    InputDistribution::for_grid(
        spec,
        mu,
        DenseMatrix::from_rows(&rows).unwrap(),
        FeedInBounds::new(mid.clone(), mid).unwrap(),
    )
    .unwrap()
}

#[test]
fn weight_spread_is_scale_free_as_spread_vanishes() {
    // The proxy covariance rescales the power covariance entrywise, while
    // the flow-to-power map couples coordinates. Both Gaussians shrink
    // together, so the weight spread settles at a nonzero limit instead of
    // vanishing.
    let (spec, dist) = instance("L4_1.4");
    let esr = |scale| {
        let narrow = shrunk(&spec, &dist, scale);
        let data = generate_importance(
            &spec,
            &narrow,
            400,
            &SolverConfig::default(),
            &RngStream::new(6),
            GenerateOptions::default(),
        )
        .unwrap();
        effective_sample_rate(&data.weights())
    };
    let (coarse, fine) = (esr(1e-3), esr(1e-5));
    assert!((coarse - fine).abs() < 1e-3, "{coarse} vs {fine}");
    assert!(fine > 0.9 && fine < 0.999, "{fine}");
}

#[test]
fn resampling_keeps_weighted_moments() {
    let (spec, dist) = instance("L4_1.4");
    let data = generate_importance(
        &spec,
        &dist,
        4000,
        &SolverConfig::default(),
        &RngStream::new(10),
        GenerateOptions::default(),
    )
    .unwrap();
    let flat = resample(&data, &mut RngStream::new(12));
    assert_eq!(flat.len(), data.len());
    assert_eq!(flat.generator, Generator::Resampled);
    assert_eq!(flat.source, Some(Generator::Importance));
    assert!(flat.weights().iter().all(|&w| w == 1.0));
    let (w, ones) = (data.weights(), vec![1.0; flat.len()]);
    for i in 0..spec.active_edges().len() {
        let (x, y) = (data.power_column(i), flat.power_column(i));
        let se = weighted_mean_se(&x, &w).hypot(weighted_mean_se(&y, &ones));
        let gap = (weighted_mean(&x, &w) - weighted_mean(&y, &ones)).abs();
        assert!(gap <= 4.0 * se, "coordinate {i}: gap {gap} se {se}");
    }
}

#[test]
fn direct_scenarios_lie_in_proxy_support() {
    let (spec, dist) = instance("L5_1.5");
    let cfg = SolverConfig::default();
    let proxy = build_proxy(&spec, &dist, &cfg).unwrap();
    let data = generate_direct(
        &spec,
        &dist,
        50,
        &cfg,
        &RngStream::new(13),
        GenerateOptions::default(),
    )
    .unwrap();
    for s in &data.samples {
        assert!(proxy
            .log_density(&active_flows(&spec, &s.state))
            .is_finite());
    }
}

#[test]
fn input_mean_matches_quadrature() {
    // one coordinate truncated at zero one standard deviation below the mean
    let (mu, sigma) = (10.0, 10.0);
    let q = TruncatedNormal::new(
        vec![mu],
        DenseMatrix::from_diagonal(&[sigma * sigma]),
        vec![1.0],
    )
    .unwrap();
    let dist = InputDistribution::new(q, FeedInBounds::new(vec![], vec![]).unwrap());
    let n = 20_000;
    let draws = sample_input(&dist, &mut RngStream::new(14), n).unwrap();
    let values: Vec<f64> = draws.iter().map(|s| s.q[0]).collect();
    assert!(values.iter().all(|&v| v >= 0.0));
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();

    // Simpson's rule on [0, mu + 12 sigma]
    let (a, b, m) = (0.0, mu + 12.0 * sigma, 20_000);
    let h = (b - a) / m as f64;
    let (mut z, mut first) = (0.0, 0.0);
    for k in 0..=m {
        let x = a + k as f64 * h;
        let f = (-0.5 * ((x - mu) / sigma).powi(2)).exp();
        let c = if k == 0 || k == m {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        z += c * f;
        first += c * f * x;
    }
    let exact = first / z;
    assert!(
        (mean - exact).abs() <= 4.0 * sd / (n as f64).sqrt(),
        "{mean} vs {exact}"
    );
}

#[test]
fn proxy_inherits_correlation_structure() {
    let (spec, dist) = instance("L4_1.4");
    let cfg = SolverConfig::default();
    let proxy = build_proxy(&spec, &dist, &cfg).unwrap();
    let (cq, cm) = (dist.powers().cov(), proxy.flows().cov());
    let signs = dist.powers().signs();
    let n = cq.rows();
    for i in 0..n {
        for j in 0..n {
            let rq = cq[(i, j)] / (cq[(i, i)] * cq[(j, j)]).sqrt();
            let rm = cm[(i, j)] / (cm[(i, i)] * cm[(j, j)]).sqrt();
            assert!((rm - signs[i] * signs[j] * rq).abs() < 1e-12);
        }
    }
    // 200 kW over roughly 48 K of temperature drop
    for (&m, &e) in proxy.flows().mean().iter().zip(spec.active_edges()) {
        if !spec.is_supply_edge(e) {
            assert!((0.8..1.2).contains(&m), "{m}");
        }
    }

    let diag = DenseMatrix::from_diagonal(&cq.diagonal());
    let independent = InputDistribution::for_grid(
        &spec,
        dist.powers().mean().to_vec(),
        diag,
        dist.feed_in().clone(),
    )
    .unwrap();
    let proxy = build_proxy(&spec, &independent, &cfg).unwrap();
    let cm = proxy.flows().cov();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                assert_eq!(cm[(i, j)], 0.0);
            }
        }
    }
}

#[test]
fn golden_file_reproduces_residuals() {
    let (spec, dist) = instance("C5_1");
    let data = generate_importance(
        &spec,
        &dist,
        10,
        &SolverConfig::default(),
        &RngStream::new(15),
        GenerateOptions::default(),
    )
    .unwrap();
    let text = golden_residuals(&spec, &data, 8, &mut RngStream::new(16)).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(json["version"], 1);
    let grid = GridSpec::from_json(&json["grid"].to_string()).unwrap();
    assert_eq!(grid.content_hash(), spec.content_hash());
    let layout = json["state_layout"].as_array().unwrap();
    let (nv, ne) = (spec.node_count(), spec.edge_count());
    assert_eq!(
        layout
            .iter()
            .map(|v| v.as_u64().unwrap() as usize)
            .collect::<Vec<_>>(),
        vec![0, nv, nv + ne, 2 * nv + ne]
    );
    assert_eq!(
        json["residual_layout"]["len"].as_u64().unwrap() as usize,
        spec.residual_layout().len
    );

    let floats = |v: &serde_json::Value| {
        v.as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .collect::<Vec<f64>>()
    };
    let cases = json["cases"].as_array().unwrap();
    assert_eq!(cases.len(), 8);
    for case in cases {
        let state = GridState::from_vector(&spec, &floats(&case["x"])).unwrap();
        let input = ScenarioInput {
            q: floats(&case["q"]),
            t_fi: floats(&case["t_fi"]),
        };
        let stored = floats(&case["residual"]);
        assert_eq!(residual(&spec, &state, &input).unwrap(), stored);
        match case["kind"].as_str().unwrap() {
            "stored" => assert!(norm_inf(&stored) <= SINGLE_PASS_CERTIFICATE),
            "perturbed" => assert!(norm_inf(&stored) > 1e-3),
            other => panic!("unexpected case kind {other}"),
        }
    }
}

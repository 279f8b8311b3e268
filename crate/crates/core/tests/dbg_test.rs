#[test]
fn dbg_stationary() {
    use fblab_core::geometry::*;
    use fblab_core::free_boundary::*;
    use std::time::Instant;
    let geom = GeometrySpec {
        box_shape: BoxShape::Rect { x0: -1.0, y0: -1.0, x1: 1.0, y1: 1.0 },
        obstacle: ObstacleSpec::flat(),
        direction: [0.3, 1.0],
        coeff: CoeffField::Identity,
        delta: 0.25,
    };
    let mut cfg = FbConfig::default();
    cfg.front_tolerance = 0.04;
    cfg.displacement_tol = 0.02;
    let datum = move |p: [f64; 2]| (1.3 * (p[1] - (-0.15 + 0.5*p[0]*p[0]))).max(0.0);
    for stage in [vec![65usize], vec![65, 129], vec![65, 129, 257]] {
        let t0 = Instant::now();
        let (a, _mask) = solve_stationary_continued(&geom, &stage, &datum, &cfg).unwrap();
        println!("stages {:?}: converged={} iters={} took {:.1?} maxd={:.4} ell={}", stage, a.converged, a.iterations, t0.elapsed(), a.stats.max_d, a.elliptic_iterations);
        if t0.elapsed().as_secs() > 400 { break; }
    }
}

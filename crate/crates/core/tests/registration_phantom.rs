use longct_core::metrics::dice;
use longct_core::phantom::{generate_study, PhantomConfig};
use longct_core::registration::{register_masks_with_report, warp, RegistrationConfig, WarpKind};

#[test]
fn recovers_phantom_deformations() {
    let cfg = PhantomConfig { deformation_amplitude: 4.0, ..Default::default() };
    for index in 0..2 {
        let s = generate_study(&cfg, index).unwrap();
        let tps = s.study.timepoints();
        let (m0, m1) = (&tps[0].lung_mask, &tps[1].lung_mask);
        let t0 = std::time::Instant::now();
        let (t, report) = register_masks_with_report(m0, m1, &RegistrationConfig::default()).unwrap();
        let d = dice(&warp(m0, &t, WarpKind::Label).unwrap(), m1, 1).unwrap();
        let est = t.displacement_field();
        let truth = &s.displacements[0];
        let (mut err, mut n, mut base) = (0.0, 0usize, 0.0);
        for ((e, u), &m) in est.data().iter().zip(truth.data()).zip(m1.data()) {
            if m == 1 {
                let sq: f32 = (0..3).map(|a| (e[a] - u[a]).powi(2)).sum();
                err += f64::from(sq.sqrt());
                base += f64::from((0..3).map(|a| u[a].powi(2)).sum::<f32>().sqrt());
                n += 1;
            }
        }
        let mean_err = err / n as f64;
        println!(
            "study {index}: dice {:.4} -> {d:.4}, mean error {mean_err:.3} (identity {:.3}), {:?}, iters {:?}",
            report.dice_before,
            base / n as f64,
            t0.elapsed(),
            report.levels.iter().map(|l| l.iterations).collect::<Vec<_>>()
        );
        assert!(d >= 0.95);
        assert!(mean_err <= 2.0);
    }
}

use dycast_core::data::{generate_synthetic, zscore_normalize, Nonlinearity, SynthSpec, TruthEdge};
use dycast_core::training::{train_on_window, RunConfig};

fn main() {
    let spec = SynthSpec {
        n: 5,
        t: 1000,
        edges: vec![
            TruthEdge { cause: 0, effect: 1, beta: 0.8, lag: 1 },
            TruthEdge { cause: 1, effect: 2, beta: 0.8, lag: 2 },
            TruthEdge { cause: 3, effect: 4, beta: 0.7, lag: 3 },
        ],
        noise_std: 0.1,
        nonlinearity: Nonlinearity::None,
        seed: 1111,
    };
    let (ds, _) = zscore_normalize(&generate_synthetic(&spec).unwrap()).unwrap();
    for target in 0..5 {
        let mut cfg = RunConfig::default();
        cfg.log_interval = 0;
        cfg.epochs = 2000;
        cfg.patience = 100_000;
        let t0 = std::time::Instant::now();
        let report = train_on_window(&ds, target, &cfg, ds.t_len()).unwrap();
        let val = &report.val_loss;
        // Longest run of epochs where val fails to improve on the previous epoch.
        let mut worst_run = 0usize;
        let mut worst_at = 0usize;
        let mut run = 0usize;
        let mut first_fire = None;
        for e in 1..val.len() {
            if val[e] < val[e - 1] {
                run = 0;
            } else {
                run += 1;
                if run > worst_run {
                    worst_run = run;
                    worst_at = e;
                }
                if run >= 15 && first_fire.is_none() {
                    first_fire = Some(e);
                }
            }
        }
        // Keras-style: epochs since last new global best.
        let mut best = f64::INFINITY;
        let mut since = 0usize;
        let mut keras_fire = None;
        for (e, &v) in val.iter().enumerate() {
            if v < best {
                best = v;
                since = 0;
            } else {
                since += 1;
                if since >= 15 && keras_fire.is_none() {
                    keras_fire = Some(e);
                }
            }
        }
        println!(
            "target {target}: {} epochs in {:.1}s, best {} val {:.4} l_init {:.4} | prev-epoch rule: worst run {} @ {}, fires {:?} | keras fires {:?}",
            val.len(),
            t0.elapsed().as_secs_f64(),
            report.best_epoch,
            val[report.best_epoch],
            report.l_init,
            worst_run,
            worst_at,
            first_fire,
            keras_fire
        );
    }
}

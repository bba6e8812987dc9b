use dycast_core::data::{generate_synthetic, Nonlinearity, SynthSpec, TruthEdge};
use dycast_core::eval::evaluate_graph;
use dycast_core::pipeline::run_pipeline;
use dycast_core::training::RunConfig;
use std::time::Instant;

fn main() {
    let seeds: Vec<u64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("seed"))
        .collect();
    let seeds = if seeds.is_empty() { vec![1111] } else { seeds };
    let t0 = Instant::now();
    let mut f1s = Vec::new();
    for seed in seeds {
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
            seed,
        };
        let ds = generate_synthetic(&spec).unwrap();
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.log_interval = 0;
        cfg.patience = 100_000;
        let out = run_pipeline(&ds, &cfg, 1).unwrap();
        for f in &out.findings {
            let r = &out.reports[f.target];
            eprintln!(
                "seed {seed} target {} epochs {} best {} l_init {:.4}",
                f.target,
                r.train_loss.len(),
                r.best_epoch,
                r.l_init
            );
            for c in &f.findings {
                eprintln!(
                    "    ch {} w {:.3} delay {} validated {} inconclusive {} base {:.4} shuf {:.4} delta {:+.4} gain {:+.4}",
                    c.channel,
                    c.weight,
                    c.delay,
                    c.outcome.validated,
                    c.outcome.inconclusive,
                    c.outcome.l_base,
                    c.outcome.l_shuffled_mean,
                    c.outcome.delta,
                    c.outcome.gain
                );
            }
        }
        let truth = ds.truth().unwrap();
        let rep = evaluate_graph(&out.graph, truth, false).unwrap();
        eprintln!(
            "seed {seed}: F1 {:.3} P {:.3} R {:.3} DEA {:?}",
            rep.f1, rep.precision, rep.recall, rep.dea
        );
        for e in &out.graph.edges {
            eprintln!("    edge {} -> {} delay {} score {:.3}", e.cause, e.effect, e.delay, e.score);
        }
        f1s.push(rep.f1);
    }
    let mean = f1s.iter().sum::<f64>() / f1s.len() as f64;
    eprintln!("mean F1 {:.3} over {:?} in {:.1}s", mean, f1s, t0.elapsed().as_secs_f64());
}

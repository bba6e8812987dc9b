//! Scratch probe: watch the val curve of the lag-2 pair fit that the
//! lagged_target unit test runs, and dump trained kernels/alpha.

use dycast_core::data::{generate_synthetic, zscore_normalize, Nonlinearity, SynthSpec, TruthEdge};
use dycast_core::discovery::estimate_delay;
use dycast_core::training::{train_target, RunConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lag: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2);
    let t: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(300);
    let spec = SynthSpec {
        n: 2,
        t,
        edges: vec![TruthEdge { cause: 0, effect: 1, beta: 0.9, lag }],
        noise_std: 0.05,
        nonlinearity: Nonlinearity::None,
        seed: 11,
    };
    let (ds, _) = zscore_normalize(&generate_synthetic(&spec).unwrap()).unwrap();
    let mut cfg = RunConfig::default();
    cfg.log_interval = 0;
    let report = train_target(&ds, 1, &cfg).unwrap();
    for e in (0..report.val_loss.len()).step_by(100) {
        println!(
            "epoch {e:4} train {:.6} val {:.6}",
            report.train_loss[e], report.val_loss[e]
        );
    }
    println!(
        "lag {lag} T {t}: best epoch {} val {:.6} l_init {:.6}",
        report.best_epoch, report.val_loss[report.best_epoch], report.l_init
    );
    let p = &report.params;
    println!("alpha softmax: {:?}", dycast_core::tensor::softmax(p.channel_alpha.values()).unwrap());
    for (b, blk) in p.blocks.iter().enumerate() {
        for c in 0..2 {
            println!("block {b} dil {} ch {c} kernel {:?}", blk.dilation, blk.kernels.row(c));
        }
    }
    for c in 0..2 {
        println!("delay ch{c}: {}", estimate_delay(p, c).unwrap());
    }
}

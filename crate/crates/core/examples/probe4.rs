//! Scratch probe: trainability canary (noise-free lagged target, penalties
//! off) and a lambda matrix over the acceptance chain, with alpha/kernel
//! readouts and all-channel shuffle deltas.

use dycast_core::data::{
    generate_synthetic, zscore_normalize, Dataset, Nonlinearity, SynthSpec, TruthEdge,
};
use dycast_core::discovery::{estimate_delay, shuffle_test};
use dycast_core::tensor::{softmax, Tensor2};
use dycast_core::training::{train_target, RunConfig, TrainReport};

fn dump(report: &TrainReport, ds: &Dataset, target: usize, cfg: &RunConfig) {
    for e in (0..report.val_loss.len()).step_by(200) {
        println!(
            "  epoch {e:4} train {:.6} val {:.6}",
            report.train_loss[e], report.val_loss[e]
        );
    }
    println!(
        "  best epoch {} val {:.6} l_init {:.6}",
        report.best_epoch, report.val_loss[report.best_epoch], report.l_init
    );
    let p = &report.params;
    let w = softmax(p.channel_alpha.values()).unwrap();
    let ws: Vec<String> = w.iter().map(|x| format!("{x:.3}")).collect();
    println!("  alpha softmax: [{}]", ws.join(", "));
    let n = p.channel_count();
    for c in 0..n {
        let mut parts = Vec::new();
        for (b, blk) in p.blocks.iter().enumerate() {
            let kr = blk.kernels.row(c);
            let k = kr.len();
            let (mut am, mut mx) = (0, -1.0);
            for (j, &v) in kr.iter().enumerate() {
                if v.abs() > mx {
                    mx = v.abs();
                    am = j;
                }
            }
            parts.push(format!("b{b} off {} |k| {:.4}", (k - 1 - am) * blk.dilation, mx));
        }
        let d = estimate_delay(p, c).unwrap();
        println!("  ch{c} delay {d:2} [{}]", parts.join(" | "));
    }
    for c in 0..n {
        if c == target {
            continue;
        }
        let o = shuffle_test(p, ds, target, c, 10, cfg.significance, 777, report.l_init).unwrap();
        println!(
            "  shuffle ch{c}: base {:.4} shuf {:.4} delta {:+.4} gain {:+.4} validated {} inconclusive {}",
            o.l_base, o.l_shuffled_mean, o.delta, o.gain, o.validated, o.inconclusive
        );
    }
    // Attention transport summary: is each head routing diagonally (kernels
    // carry the lag) or at an offset (attention carries the lag)?
    let out = dycast_core::model::model_forward(ds.values(), p).unwrap();
    for rec in &out.attention {
        let w = &rec.weights;
        let t_len = w.rows();
        let (mut pruned, mut diag, mut mx, mut live) = (0usize, 0.0, 0.0, 0usize);
        let mut offs: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
        for i in 0..t_len {
            let row = w.row(i);
            let sum: f64 = row[..=i].iter().sum();
            if sum == 0.0 {
                pruned += 1;
                continue;
            }
            live += 1;
            diag += row[i];
            let (mut am, mut m) = (0, -1.0);
            for (j, &v) in row[..=i].iter().enumerate() {
                if v > m {
                    m = v;
                    am = j;
                }
            }
            mx += m;
            *offs.entry(i - am).or_insert(0) += 1;
        }
        let mut top: Vec<(usize, usize)> = offs.into_iter().collect();
        top.sort_by(|a, b| b.1.cmp(&a.1));
        top.truncate(4);
        let l = live.max(1) as f64;
        println!(
            "  attn b{} h{}: pruned {}/{} diag_mean {:.3} max_mean {:.3} top offsets {:?}",
            rec.block,
            rec.head,
            pruned,
            t_len,
            diag / l,
            mx / l,
            top
        );
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("canary");
    match mode {
        "canary" => {
            // Perfectly predictable lagged target: last channel = 0.9 *
            // X0[t-2], other channels unit noise. Invariant wants val < 1%
            // of target variance within 2000 epochs with penalties off at
            // T=1000, N <= 5.
            let n: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2);
            let t_len = 1000;
            let src = generate_synthetic(&SynthSpec {
                n: n - 1,
                t: t_len,
                edges: vec![],
                noise_std: 1.0,
                nonlinearity: Nonlinearity::None,
                seed: 7,
            })
            .unwrap();
            let mut vals = Tensor2::zeros(n, t_len);
            for c in 0..n - 1 {
                for t in 0..t_len {
                    vals.set(c, t, src.values().get(c, t));
                }
            }
            for t in 2..t_len {
                vals.set(n - 1, t, 0.9 * src.values().get(0, t - 2));
            }
            let names = (0..n).map(|i| format!("X{}", i + 1)).collect();
            let ds = Dataset::new(names, vals, "canary").unwrap();
            let (ds, _) = zscore_normalize(&ds).unwrap();
            let mut cfg = RunConfig::default();
            cfg.log_interval = 0;
            cfg.lambda_kernel = 0.0;
            cfg.lambda_mask = 0.0;
            println!("canary: noise-free lag-2, lambdas 0, T={t_len}, N={n}");
            let report = train_target(&ds, n - 1, &cfg).unwrap();
            dump(&report, &ds, n - 1, &cfg);
        }
        "chain" => {
            let target: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2);
            let lk: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
            let lm: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
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
            let mut cfg = RunConfig::default();
            cfg.log_interval = 0;
            cfg.lambda_kernel = lk;
            cfg.lambda_mask = lm;
            println!("chain target {target} lk {lk} lm {lm}");
            let report = train_target(&ds, target, &cfg).unwrap();
            dump(&report, &ds, target, &cfg);
        }
        other => panic!("unknown mode {other}"),
    }
}

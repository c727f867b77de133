// Scratch calibration harness for the headline experiments (dev tool).
use debias_core::datagen::{gen_biased_domains, gen_rotated, lodo_split, ConfoundSpec, RotatedSource, RotatedSpec, Split};
use debias_core::losses::LossWeights;
use debias_core::metrics::{c2st_multi, C2stConfig};
use debias_core::trainer::{train, Strategy, TrainConfig};
use rayon::prelude::*;
use std::time::Instant;

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "confound".into());
    match which.as_str() {
        "confound" => confound(),
        "rotated" => rotated(),
        "probe" => probe(),
        _ => eprintln!("usage: calibrate [confound|rotated|probe]"),
    }
}

// Linear-extractor diagnostic: effective input-space classifier energy on
// common dims vs slot dims, per strategy.
fn probe() {
    let (spec, base) = cfgs();
    let data = gen_biased_domains(&spec, 42).unwrap();
    let split = lodo_split(&data, "ext").unwrap();
    let internal: Vec<_> = split.internal.iter().map(|&i| &data[i]).collect();
    let ext = &data[split.external[0]];
    let d_common = spec.d_common;
    for strategy in [Strategy::Erm, Strategy::E2eCe, Strategy::Mct] {
        let mut cfg = base.clone();
        cfg.strategy = strategy;
        cfg.seed = 0;
        cfg.hidden_dims = vec![16];
        let out = train(&cfg, &internal).unwrap();
        // effective linear map: logit diff column (class1 - class0)
        let w_ext = &out.model.net.layers()[0].weight; // 18 x 16
        let wvw = &out.model.bank.w_vw; // 17 x 2
        let mut v = vec![0.0f64; w_ext.rows()];
        for i in 0..w_ext.rows() {
            for j in 0..w_ext.cols() {
                v[i] += w_ext.at(i, j) * (wvw.at(j, 1) - wvw.at(j, 0));
            }
        }
        let e_common: f64 = v[..d_common].iter().map(|x| x * x).sum::<f64>().sqrt();
        let e_slots: f64 = v[d_common..].iter().map(|x| x * x).sum::<f64>().sqrt();
        let ext_acc = out.model.score_vw(&ext.split_x(Split::Test), &ext.split_y(Split::Test)).unwrap();
        let mut self_acc = 0.0;
        for d in &internal {
            self_acc += out.model.score_vw(&d.split_x(Split::Test), &d.split_y(Split::Test)).unwrap() / 3.0;
        }
        println!(
            "{:<8} common={:.4} slots={:.4} ratio={:.3} self={:.3} ext={:.3}",
            strategy.name(), e_common, e_slots, e_slots / e_common, self_acc, ext_acc
        );
    }
}

fn cfgs() -> (ConfoundSpec, TrainConfig) {
    let steps: usize = std::env::var("STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(2000);
    let eps: f64 = std::env::var("EPS").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0);
    let samples: usize = std::env::var("SAMPLES").ok().and_then(|v| v.parse().ok()).unwrap_or(10_000);
    let mu: f64 = std::env::var("MU").ok().and_then(|v| v.parse().ok()).unwrap_or(1.6);
    let cs: f64 = std::env::var("CS").ok().and_then(|v| v.parse().ok()).unwrap_or(0.5);
    let spec = ConfoundSpec {
        n_internal: 3,
        d_common: 6,
        d_bias: 4,
        n_classes: 2,
        mu,
        common_scale: cs,
        rho: vec![1.0, 1.0, 1.0],
        rho_external: -0.5,
        sigma: 1.0,
        samples_per_domain: samples,
    };
    let cfg = TrainConfig {
        strategy: Strategy::Mct,
        epsilon: eps,
        eta: 0.05,
        steps,
        batch_size: 64,
        hidden_dims: std::env::var("HIDDEN")
            .map(|v| v.split(',').map(|x| x.parse().unwrap()).collect())
            .unwrap_or_else(|_| vec![32, 32, 16]),
        weights: LossWeights {
            c1: 1.0,
            c2: std::env::var("C2").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0),
            c3: std::env::var("C3").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0),
            lambda: 0.1,
            gamma: 0.1,
        },
        ..Default::default()
    };
    (spec, cfg)
}

fn confound() {
    let (spec, base) = cfgs();
    let data = gen_biased_domains(&spec, 42).unwrap();
    let names: Vec<String> = data.iter().map(|d| d.name.clone()).collect();
    let start = Instant::now();

    let cells: Vec<(usize, u64, Strategy)> = (0..names.len())
        .flat_map(|h| {
            (0..5u64).flat_map(move |s| {
                [Strategy::Erm, Strategy::E2eCe, Strategy::Mct]
                    .into_iter()
                    .map(move |st| (h, s, st))
            })
        })
        .collect();

    let results: Vec<_> = cells
        .par_iter()
        .map(|&(h, seed, strategy)| {
            let split = lodo_split(&data, &names[h]).unwrap();
            let internal: Vec<_> = split.internal.iter().map(|&i| &data[i]).collect();
            let mut cfg = base.clone();
            cfg.strategy = strategy;
            cfg.seed = seed;
            let out = train(&cfg, &internal).unwrap();
            let ext = &data[split.external[0]];
            let ext_acc = out.model.score_vw(&ext.split_x(Split::Test), &ext.split_y(Split::Test)).unwrap();
            let mut self_acc = 0.0;
            let mut bias_acc = 0.0;
            for (i, d) in internal.iter().enumerate() {
                let x = d.split_x(Split::Test);
                let y = d.split_y(Split::Test);
                self_acc += out.model.score_vw(&x, &y).unwrap() / internal.len() as f64;
                if strategy.models_bias() {
                    let logits = out.model.predict_bias(i, &x).unwrap();
                    bias_acc += out.model.score_logits(&logits, &y).unwrap() / internal.len() as f64;
                }
            }
            let emb: Vec<_> = internal
                .iter()
                .map(|d| out.model.embed(&d.split_x(Split::Test)).unwrap())
                .collect();
            let mut c2st_acc = 0.0;
            for p in 0..3 {
                let c = C2stConfig { seed: seed * 10 + p, steps: 300, ..Default::default() };
                c2st_acc += c2st_multi(&emb, &c).unwrap().accuracy / 3.0;
            }
            (h, seed, strategy, ext_acc, self_acc, bias_acc, c2st_acc)
        })
        .collect();

    println!("=== confound calibration ({:.1}s) ===", start.elapsed().as_secs_f64());
    for h in 0..names.len() {
        println!("--- holdout {} ---", names[h]);
        let mut ok_a = 0;
        let mut ok_b = 0;
        let mut ok_c = 0;
        let mut ok_d = 0;
        let mut m_ext = [0.0f64; 3];
        let mut m_c2st = [0.0f64; 3];
        for seed in 0..5u64 {
            let get = |st: Strategy| results.iter().find(|r| r.0 == h && r.1 == seed && r.2 == st).unwrap();
            let erm = get(Strategy::Erm);
            let ce = get(Strategy::E2eCe);
            let mct = get(Strategy::Mct);
            let a = mct.3 >= ce.3 && ce.3 >= erm.3 && mct.3 - erm.3 >= 0.05;
            let pd = |r: &(usize, u64, Strategy, f64, f64, f64, f64)| (r.4 - r.3) / r.4;
            let b = pd(mct) < pd(erm);
            let c = mct.6 <= erm.6 - 0.03;
            let d = mct.5 >= mct.4;
            ok_a += a as u32;
            ok_b += b as u32;
            ok_c += c as u32;
            ok_d += d as u32;
            for (k, r) in [&erm, &ce, &mct].iter().enumerate() {
                m_ext[k] += r.3 / 5.0;
                m_c2st[k] += r.6 / 5.0;
            }
            if std::env::var("VERBOSE").is_ok() {
                println!(
                    "seed {seed}: ext erm={:.3} ce={:.3} mct={:.3} | self erm={:.3} mct={:.3} | bias(mct)={:.3} | c2st erm={:.3} mct={:.3} | a={a} b={b} c={c} d={d}",
                    erm.3, ce.3, mct.3, erm.4, mct.4, mct.5, erm.6, mct.6
                );
            }
        }
        println!(
            "holdout {}: a={ok_a}/5 b={ok_b}/5 c={ok_c}/5 d={ok_d}/5 | ext erm/ce/mct={:.3}/{:.3}/{:.3} c2st={:.3}/{:.3}/{:.3}",
            names[h], m_ext[0], m_ext[1], m_ext[2], m_c2st[0], m_c2st[1], m_c2st[2]
        );
    }
}

fn rotated() {
    let steps: usize = std::env::var("STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(2500);
    let eps: f64 = std::env::var("EPS").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0);
    let samples: usize = std::env::var("SAMPLES").ok().and_then(|v| v.parse().ok()).unwrap_or(1500);
    let noise: f64 = std::env::var("NOISE").ok().and_then(|v| v.parse().ok()).unwrap_or(0.10);
    let spec = RotatedSpec { samples_per_domain: samples, noise_sigma: noise, ..Default::default() };
    let data = gen_rotated(&spec, 42, &RotatedSource::Procedural).unwrap();
    let start = Instant::now();
    let split = lodo_split(&data, "rot075").unwrap();
    let internal: Vec<_> = split.internal.iter().map(|&i| &data[i]).collect();
    let ext = &data[split.external[0]];

    let cells: Vec<(u64, Strategy)> = (0..5u64)
        .flat_map(|s| {
            [Strategy::Erm, Strategy::Crossgrad, Strategy::Mct]
                .into_iter()
                .map(move |st| (s, st))
        })
        .collect();
    let results: Vec<_> = cells
        .par_iter()
        .map(|&(seed, strategy)| {
            let cfg = TrainConfig {
                strategy,
                epsilon: eps,
                eta: 0.05,
                steps,
                batch_size: 64,
                hidden_dims: vec![64, 32],
                weights: LossWeights { c1: 1.0, c2: 1.0, c3: 1.0, lambda: 0.1, gamma: 0.1 },
                seed,
                ..Default::default()
            };
            let out = train(&cfg, &internal).unwrap();
            let acc = out.model.score_vw(&ext.split_x(Split::Test), &ext.split_y(Split::Test)).unwrap();
            (seed, strategy, acc)
        })
        .collect();
    println!("=== rotated calibration ({:.1}s) ===", start.elapsed().as_secs_f64());
    let mut ok = 0;
    for seed in 0..5u64 {
        let get = |st: Strategy| results.iter().find(|r| r.0 == seed && r.1 == st).unwrap().2;
        let (erm, cg, mct) = (get(Strategy::Erm), get(Strategy::Crossgrad), get(Strategy::Mct));
        let pass = mct >= cg && cg >= erm;
        ok += pass as u32;
        println!("seed {seed}: erm={erm:.4} crossgrad={cg:.4} mct={mct:.4} pass={pass}");
    }
    println!("ordering holds in {ok}/5 seeds");
}

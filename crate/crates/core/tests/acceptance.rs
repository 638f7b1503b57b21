//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line, so
//! `cargo test --test acceptance -- --nocapture` reads as a checklist. The
//! two full-scale training runs are `#[ignore]`d: run them with
//! `cargo test --release --test acceptance -- --ignored --nocapture`.

mod common;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use mixscene::config::{Backbone, Config};
use mixscene::datasets::{generate_multimnist, load_dataset, SceneLayout};
use mixscene::digits::DigitSet;
use mixscene::generation::{overlap_penalty, render_scene, DecodedGlimpse};
use mixscene::inference::Mode;
use mixscene::latents::{gumbel_softmax, LatentGrid, PosteriorParams, PriorParams};
use mixscene::manipulation::{assign_clusters, decompose, deterministic_infer, recompose, shuffle_objects, swap_category};
use mixscene::metrics::{average_precision, clustering_acc, clustering_nmi, iou, BoxXyxy, Detection};
use mixscene::model::Model;
use mixscene::objective::{cell_kls, kl_bernoulli, kl_categorical, kl_gaussian_diag, total_loss};
use mixscene::trainer::{read_metrics_log, train, METRICS_FILE};

fn verdict(name: &str, ok: bool, detail: &str) {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail}");
}

fn vec1(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn digits_for_training(n: usize) -> DigitSet {
    match std::env::var_os("MIXSCENE_MNIST_DIR") {
        Some(dir) => DigitSet::load_mnist(Path::new(&dir)).unwrap(),
        None => DigitSet::synthetic(n, 0),
    }
}

fn block_means(values: &[f64], blocks: usize) -> Vec<f64> {
    let per = values.len() / blocks;
    (0..blocks)
        .map(|b| values[b * per..(b + 1) * per].iter().sum::<f64>() / per as f64)
        .collect()
}

#[test]
fn scaled_training_cpu_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let digits = digits_for_training(2000);
    let layout = SceneLayout {
        image_size: 64,
        max_objects: 3,
    };
    generate_multimnist(&digits, 500, 1, &dir.path().join("train"), "train", &layout).unwrap();
    let data = load_dataset(&dir.path().join("train")).unwrap();
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml")).unwrap();
    let cfg = Config::from_toml_str(&text, &["train.log_every=10".into(), "train.checkpoint_every=0".into()]).unwrap();
    assert_eq!(cfg.train.total_steps, 1000);
    let out = dir.path().join("run");
    train(&cfg, &data, &out, None).unwrap();
    let rows = read_metrics_log(&out.join(METRICS_FILE)).unwrap();
    let recon: Vec<f64> = rows.iter().map(|r| r.loss.recon).collect();
    let smoothed = block_means(&recon, 5);
    let monotone = smoothed.windows(2).all(|w| w[1] < w[0]);
    let at = |s: u64| recon[rows.iter().position(|r| r.step == s).unwrap()];
    let early = (at(40) + at(50) + at(60)) / 3.0;
    let mid = (at(490) + at(500) + at(510)) / 3.0;
    let detail = format!(
        "1000 steps, recon means per 200 steps {:?}; around step 50 {early:.0}, around step 500 {mid:.0}",
        smoothed.iter().map(|v| v.round()).collect::<Vec<_>>()
    );
    verdict("scaled training (CPU smoke, monotone smoothed recon)", monotone && mid < early, &detail);
}

/// Trains on generated scenes and evaluates on a held-out split.
fn full_scale_run(steps: u64) -> mixscene::metrics::EvalReport {
    let dir = tempfile::tempdir().unwrap();
    let digits = digits_for_training(60_000);
    let layout = SceneLayout::default();
    generate_multimnist(&digits, 10_000, 1, &dir.path().join("train"), "train", &layout).unwrap();
    generate_multimnist(&digits, 1_000, 2, &dir.path().join("held"), "test", &layout).unwrap();
    let train_set = load_dataset(&dir.path().join("train")).unwrap();
    let held = load_dataset(&dir.path().join("held")).unwrap();
    let mut cfg = Config::default();
    cfg.train.batch_size = 16;
    cfg.train.total_steps = steps;
    cfg.train.eval_every = steps;
    train(&cfg, &train_set, &dir.path().join("run"), Some(&held)).unwrap().report.unwrap()
}

#[test]
#[ignore = "10k steps of the full model; days on one CPU core"]
fn scaled_training_full() {
    let r = full_scale_run(10_000);
    verdict(
        "scaled training (10k scenes, 10k steps, AP >= 0.70)",
        r.ap >= 0.70,
        &format!("AP {:.4} ACC {:.4} NMI {:.4}", r.ap, r.acc, r.nmi),
    );
}

#[test]
#[ignore = "100k steps of the full model; nightly at best"]
fn extended_training() {
    let r = full_scale_run(100_000);
    let ok = r.acc >= 0.50 && r.nmi >= 0.40;
    // A miss here is reported, not fatal.
    println!(
        "{} extended training (100k steps, ACC >= 0.50, NMI >= 0.40): ACC {:.4} NMI {:.4}",
        if ok { "PASS" } else { "WARN" },
        r.acc,
        r.nmi
    );
}

fn tiny_model(dtype: DType) -> Model {
    let mut cfg = Config::default();
    let m = &mut cfg.model;
    m.image_height = 16;
    m.image_width = 16;
    m.grid_h = 2;
    m.grid_w = 2;
    m.what_dim = 2;
    m.num_clusters = 2;
    m.glimpse_h = 4;
    m.glimpse_w = 4;
    m.anchor_h = 8.0;
    m.anchor_w = 8.0;
    m.backbone = Backbone::Compact;
    m.feature_channels = 4;
    m.compact_channels = 4;
    m.head_channels = 4;
    m.head_layers = 1;
    m.encoder_hidden = vec![6];
    m.decoder_input = 6;
    m.decoder_channels = vec![4, 4];
    m.mixture_init_std = 1.0;
    cfg.train.seed = 5;
    Model::with_dtype(&cfg, dtype).unwrap()
}

fn random_images(b: usize, h: usize, seed: u64, dtype: DType) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..b * 3 * h * h).map(|_| rng.random::<f64>()).collect();
    Tensor::from_vec(v, (b, 3, h, h), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

fn log_normal(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -0.5 * z * z - std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

#[test]
fn elbo_decomposition_identity() {
    let model = tiny_model(DType::F64);
    let x = random_images(1, 16, 3, DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let inf = model.encoder.infer(&x, Mode::Deterministic, &mut rng).unwrap();
    let mut prior = model.prior_at(0);
    prior.pres_prob = 0.3;
    let post = &inf.posterior;
    let (g, c, a) = (4, 2, 2);

    // Appearance posterior for each category.
    let what_by_k: Vec<(Tensor, Tensor)> = (0..c)
        .map(|k| {
            let mut oh = vec![0.0; c];
            oh[k] = 1.0;
            let z = Tensor::new(oh, &Device::Cpu).unwrap().unsqueeze(0).unwrap().repeat((g, 1)).unwrap();
            model.encoder.encode_what(&inf.glimpses, &z).unwrap()
        })
        .collect();

    // Analytic side from the library, enumerating the category exactly.
    let q_pres = vec1(&post.pres_prob);
    let q_cat: Vec<Vec<f64>> = {
        let l = vec1(&post.cat_logits);
        (0..g)
            .map(|i| {
                let m = l[i * c..(i + 1) * c].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = l[i * c..(i + 1) * c].iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|v| v / s).collect()
            })
            .collect()
    };
    let mut analytic = 0.0;
    let mut per_k = Vec::new();
    for (k, (mean, log_std)) in what_by_k.iter().enumerate() {
        let p = PosteriorParams {
            what_mean: mean.reshape((1, g, a)).unwrap(),
            what_log_std: log_std.reshape((1, g, a)).unwrap(),
            ..post.clone()
        };
        let mut oh = vec![0.0; g * c];
        for i in 0..g {
            oh[i * c + k] = 1.0;
        }
        let grid = LatentGrid {
            z_cat: Tensor::from_vec(oh, (1, g, c), &Device::Cpu).unwrap(),
            ..inf.latents.clone()
        };
        per_k.push(cell_kls(&p, &grid, &prior).unwrap());
    }
    for i in 0..g {
        let kl = &per_k[0];
        let what: f64 = (0..c).map(|k| q_cat[i][k] * vec1(&per_k[k].what)[i]).sum();
        analytic += vec1(&kl.pres)[i]
            + q_pres[i] * (vec1(&kl.where_)[i] + vec1(&kl.depth)[i] + vec1(&kl.cat)[i] + what);
    }

    // Monte Carlo side: exact discrete draws and log q - log p by hand.
    let wm = vec1(&post.where_mean);
    let ws: Vec<f64> = vec1(&post.where_log_std).iter().map(|v| v.exp()).collect();
    let dm = vec1(&post.depth_mean);
    let ds: Vec<f64> = vec1(&post.depth_log_std).iter().map(|v| v.exp()).collect();
    let what: Vec<(Vec<f64>, Vec<f64>)> = what_by_k
        .iter()
        .map(|(m, s)| (vec1(m), vec1(s).iter().map(|v| v.exp()).collect()))
        .collect();
    let (mu, sigma) = prior.mixture.to_vecs().unwrap();
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let mut total = 0.0;
        for i in 0..g {
            let p = prior.pres_prob;
            if rng.random::<f64>() >= q_pres[i] {
                total += (1.0 - q_pres[i]).ln() - (1.0 - p).ln();
                continue;
            }
            total += q_pres[i].ln() - p.ln();
            for d in 0..4 {
                let (m, s) = (wm[i * 4 + d], ws[i * 4 + d]);
                let z = m + s * std_normal.sample(&mut rng);
                total += log_normal(z, m, s) - log_normal(z, prior.where_mean, prior.where_std);
            }
            let z = dm[i] + ds[i] * std_normal.sample(&mut rng);
            total += log_normal(z, dm[i], ds[i]) - log_normal(z, prior.depth_mean, prior.depth_std);
            let k = if rng.random::<f64>() < q_cat[i][0] { 0 } else { 1 };
            total += q_cat[i][k].ln() - prior.cat_pi[k].ln();
            for d in 0..a {
                let (m, s) = (what[k].0[i * a + d], what[k].1[i * a + d]);
                let z = m + s * std_normal.sample(&mut rng);
                total += log_normal(z, m, s) - log_normal(z, mu[k][d], sigma[k][d]);
            }
        }
        samples.push(total);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let dev = (mean - analytic).abs();
    verdict(
        "ELBO decomposition identity",
        dev <= 3.0 * se,
        &format!("MC {mean:.5} +- {se:.5} vs five-term sum {analytic:.5} ({:.2} SE)", dev / se),
    );
}

/// Simpson's rule on `[lo, hi]` with `n` (even) intervals.
fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * h);
    }
    s * h / 3.0
}

#[test]
fn kl_closed_forms_match_numerical_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (q, p): (f64, f64) = (rng.random_range(0.01..0.99), rng.random_range(0.01..0.99));
        let brute: f64 = [(q, p), (1.0 - q, 1.0 - p)].iter().map(|(a, b)| a * (a / b).ln()).sum();
        worst = worst.max((kl_bernoulli(q, p) - brute).abs());

        let d = rng.random_range(1..4);
        let qm: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ql: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..0.5)).collect();
        let pm: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let pl: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..1.0)).collect();
        let quad: f64 = (0..d)
            .map(|j| {
                let (m, s) = (qm[j], ql[j].exp());
                let f = |x: f64| {
                    let lq = log_normal(x, m, s);
                    lq.exp() * (lq - log_normal(x, pm[j], pl[j].exp()))
                };
                simpson(f, m - 14.0 * s, m + 14.0 * s, 20_000)
            })
            .sum();
        worst = worst.max((kl_gaussian_diag(&qm, &ql, &pm, &pl) - quad).abs());

        let c = rng.random_range(2..11);
        let logits: Vec<f64> = (0..c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
        let pi: Vec<f64> = raw.iter().map(|v| v / raw.iter().sum::<f64>()).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let brute: f64 = (0..c)
            .map(|k| {
                let qk = logits[k].exp() / z;
                qk * (qk / pi[k]).ln()
            })
            .sum();
        worst = worst.max((kl_categorical(&logits, &pi) - brute).abs());
    }
    verdict(
        "KL closed forms vs numerical oracles",
        worst < 1e-6,
        &format!("100 instances each of Bernoulli, Gaussian, categorical; max abs error {worst:.2e}"),
    );
}

/// AP by re-running the greedy matching from scratch for every cutoff.
fn ap_oracle(dets: &[Vec<Detection>], gts: &[Vec<BoxXyxy>], thr: f64) -> f64 {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    let mut all: Vec<(f64, usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(s, d)| d.iter().enumerate().map(move |(i, x)| (x.score, s, i)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut pr = Vec::new();
    for cut in 1..=all.len() {
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0;
        for &(_, s, i) in &all[..cut] {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts[s].iter().enumerate() {
                let v = iou(&dets[s][i].bbox, g);
                if !used[s][j] && v >= thr && best.is_none_or(|b| v > b.1) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                used[s][j] = true;
                tp += 1;
            }
        }
        pr.push((tp as f64 / n_gt as f64, tp as f64 / cut as f64));
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for k in 0..pr.len() {
        let envelope = pr[k..].iter().map(|p| p.1).fold(0.0, f64::max);
        ap += (pr[k].0 - prev_r) * envelope;
        prev_r = pr[k].0;
    }
    ap
}

fn random_box<R: Rng>(rng: &mut R) -> BoxXyxy {
    let (x, y) = (rng.random_range(0.0..20.0), rng.random_range(0.0..20.0));
    [x, y, x + rng.random_range(2.0..8.0), y + rng.random_range(2.0..8.0)]
}

#[test]
fn metrics_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ap_err: f64 = 0.0;
    for _ in 0..50 {
        let scenes = rng.random_range(1..=20);
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for _ in 0..scenes {
            let g: Vec<BoxXyxy> = (0..rng.random_range(0..=10)).map(|_| random_box(&mut rng)).collect();
            let mut d = Vec::new();
            for _ in 0..rng.random_range(0..=10) {
                let bbox = if !g.is_empty() && rng.random_bool(0.6) {
                    let t = g[rng.random_range(0..g.len())];
                    let j = rng.random_range(-1.0..1.0);
                    [t[0] + j, t[1] - j, t[2] + j, t[3]]
                } else {
                    random_box(&mut rng)
                };
                d.push(Detection {
                    bbox,
                    score: rng.random(),
                    cluster: 0,
                });
            }
            gts.push(g);
            dets.push(d);
        }
        if gts.iter().all(Vec::is_empty) {
            gts[0].push(random_box(&mut rng));
        }
        ap_err = ap_err.max((average_precision(&dets, &gts, 0.5) - ap_oracle(&dets, &gts, 0.5)).abs());
    }

    let mut acc_err: f64 = 0.0;
    for _ in 0..20 {
        let (c, cp) = (rng.random_range(1..6), rng.random_range(1..6));
        let pairs: Vec<(usize, u8)> = (0..rng.random_range(1..60))
            .map(|_| (rng.random_range(0..c), rng.random_range(0..cp) as u8))
            .collect();
        let hand: usize = (0..c)
            .map(|k| {
                (0..cp)
                    .map(|j| pairs.iter().filter(|p| p.0 == k && p.1 as usize == j).count())
                    .max()
                    .unwrap()
            })
            .sum();
        let got = clustering_acc(&pairs, c, cp).unwrap();
        acc_err = acc_err.max((got - hand as f64 / pairs.len() as f64).abs());
    }

    let mut nmi_err: f64 = 0.0;
    for _ in 0..20 {
        let classes = rng.random_range(2..8);
        let labels: Vec<u8> = (0..rng.random_range(10..50)).map(|_| rng.random_range(0..classes)).collect();
        let mut relabel: Vec<usize> = (0..classes as usize).collect();
        relabel.reverse();
        let same: Vec<(usize, u8)> = labels.iter().map(|&l| (relabel[l as usize], l)).collect();
        if same.iter().map(|p| p.1).collect::<std::collections::BTreeSet<_>>().len() > 1 {
            nmi_err = nmi_err.max((clustering_nmi(&same).unwrap() - 1.0).abs());
        }
        let (kc, jc) = (rng.random_range(1..5), rng.random_range(1..5) as u8);
        let reps = rng.random_range(1..4);
        let product: Vec<(usize, u8)> = (0..kc)
            .flat_map(|k| (0..jc).flat_map(move |j| std::iter::repeat_n((k, j), reps)))
            .collect();
        nmi_err = nmi_err.max(clustering_nmi(&product).unwrap().abs());
    }
    verdict(
        "metrics oracle equivalence",
        ap_err < 1e-9 && acc_err < 1e-12 && nmi_err < 1e-9,
        &format!("AP 50 instances max err {ap_err:.1e}; ACC 20 partitions max err {acc_err:.1e}; NMI identical/independent max err {nmi_err:.1e}"),
    );
}

fn random_grid(rng: &mut ChaCha8Rng, g: usize, a: usize, c: usize, pres: &[f64]) -> LatentGrid {
    let dev = Device::Cpu;
    let mut r = |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
    LatentGrid {
        z_pres: Tensor::from_vec(pres.to_vec(), (1, g), &dev).unwrap(),
        z_what: Tensor::from_vec(r(g * a, -1.0, 1.0), (1, g, a), &dev).unwrap(),
        z_cat: Tensor::from_vec(vec![0.5; g * c], (1, g, c), &dev).unwrap(),
        z_where: Tensor::from_vec(r(g * 4, -1.0, 1.0), (1, g, 4), &dev).unwrap(),
        z_depth: Tensor::from_vec(r(g, -2.0, 2.0), (1, g), &dev).unwrap(),
    }
}

fn random_glimpses(rng: &mut ChaCha8Rng, n: usize, h: usize) -> DecodedGlimpse {
    let dev = Device::Cpu;
    let mut r = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.random()).collect() };
    DecodedGlimpse {
        rgb: Tensor::from_vec(r(n * 3 * h * h), (n, 3, h, h), &dev).unwrap(),
        alpha: Tensor::from_vec(r(n * h * h), (n, 1, h, h), &dev).unwrap(),
    }
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let idx = Tensor::new(perm.iter().map(|&p| p as u32).collect::<Vec<_>>(), &Device::Cpu).unwrap();
    t.index_select(&idx, 1).unwrap()
}

#[test]
fn renderer_and_overlap_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut cfg = tiny_model(DType::F64).config.model.clone();
    cfg.image_height = 24;
    cfg.image_width = 24;
    cfg.grid_h = 3;
    cfg.grid_w = 3;
    let g = 9;
    let h = cfg.glimpse_h;

    // Disjoint canvases and a lone object incur no overlap.
    let dev = Device::Cpu;
    let mut canvases = vec![0.0f64; 3 * 3 * 8 * 8];
    for obj in 0..3 {
        for ch in 0..3 {
            for px in 0..8 {
                canvases[((obj * 3 + ch) * 8 + obj * 2) * 8 + px] = 0.7;
            }
        }
    }
    let rgb = Tensor::from_vec(canvases, (1, 3, 3, 8, 8), &dev).unwrap();
    let disjoint = overlap_penalty(&rgb, &Tensor::ones((1, 3), DType::F64, &dev).unwrap()).unwrap();
    let single_pres = Tensor::new(&[[0.0f64, 1.0, 0.0]], &dev).unwrap();
    let full = Tensor::ones((1, 3, 3, 8, 8), DType::F64, &dev).unwrap();
    let single = overlap_penalty(&full, &single_pres).unwrap();
    let overlap_zero = vec1(&disjoint)[0] == 0.0 && vec1(&single)[0] == 0.0;

    let mut in_range = true;
    let mut max_perm_dev: f64 = 0.0;
    for trial in 0..20 {
        let pres: Vec<f64> = (0..g).map(|_| rng.random::<f64>()).collect();
        let grid = random_grid(&mut rng, g, cfg.what_dim, cfg.num_clusters, &pres);
        let glimpses = random_glimpses(&mut rng, g, h);
        let base = render_scene(&glimpses, &grid, &cfg).unwrap();
        let img = vec1(&base.image);
        in_range &= img.iter().all(|v| (0.0..=1.0).contains(v));

        // Reorder the objects; each keeps its own box, so the scene is the same.
        let mut perm: Vec<usize> = (0..g).collect();
        for i in (1..g).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let rgb = permute_rows(&base.rgb, &perm);
        let alpha = permute_rows(&base.alpha, &perm);
        let pres_p = permute_rows(&grid.z_pres, &perm);
        let depth_p = permute_rows(&grid.z_depth, &perm);
        let again = mixscene::generation::composite(&rgb, &alpha, &pres_p, &depth_p).unwrap();
        let dev_here = vec1(&again)
            .iter()
            .zip(&img)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        max_perm_dev = max_perm_dev.max(dev_here);
        let _ = trial;
    }
    verdict(
        "renderer/overlap properties",
        overlap_zero && in_range && max_perm_dev <= 1e-12,
        &format!(
            "overlap 0 for disjoint and single objects: {overlap_zero}; output in [0,1]: {in_range}; \
             20 permutations max deviation {max_perm_dev:.1e} (f64 summation order)"
        ),
    );
}

/// Central differences with step `eps` against autograd for `f` at the
/// variables `vars`, probing `per_var` random entries of each.
fn grad_check(vars: &[(String, Var)], f: &dyn Fn() -> Tensor, eps: f64, per_var: usize, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let loss = f();
    let grads = loss.backward().unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (_, var) in vars {
        let Some(g) = grads.get(var.as_tensor()) else { continue };
        let g = vec1(g);
        let base = vec1(var.as_tensor());
        let shape = var.dims().to_vec();
        for _ in 0..per_var.min(base.len()) {
            let i = rng.random_range(0..base.len());
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
                vec1(&f())[0]
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            var.set(&Tensor::from_vec(base.clone(), shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
            let scale = g[i].abs().max(fd.abs());
            if scale > 1e-4 {
                worst = worst.max((g[i] - fd).abs() / scale);
                checked += 1;
            }
        }
    }
    (worst, checked)
}

#[test]
fn gradient_checks() {
    let mut model = tiny_model(DType::F64);
    model.config.model.hard_pres = false;
    model.config.model.hard_cat = false;
    let model = Model::with_dtype(&model.config, DType::F64).unwrap();
    let x = random_images(2, 16, 8, DType::F64);
    let prior: PriorParams = model.prior_at(100);
    let weights = model.config.weights_at(100);
    let loss = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let out = model.forward(&x, Mode::Train, &mut rng).unwrap();
        total_loss(&out, &prior, &weights, 0.15).unwrap().0
    };
    let vars = model.store.trainable();
    // The loss is around 4e4: a 1e-6 step leaves ~1e-5 of f64 round-off in
    // the difference quotient, while 1e-4 already straddles ReLU kinks.
    let (loss_err, loss_n) = grad_check(&vars, &loss, 1e-5, 3, 1);

    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let cfg = model.config.model.clone();
    let g = cfg.num_cells();
    let glimpses = random_glimpses(&mut rng, g, cfg.glimpse_h);
    let pres = vec![0.9, 0.6, 0.8, 0.7];
    let grid = random_grid(&mut rng, g, cfg.what_dim, cfg.num_clusters, &pres);
    let depth = Var::from_tensor(&grid.z_depth).unwrap();
    let where_ = Var::from_tensor(&grid.z_where).unwrap();
    let w: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = Tensor::from_vec(w, (1, 3, 16, 16), &Device::Cpu).unwrap();
    let render = || {
        let grid = LatentGrid {
            z_depth: depth.as_tensor().clone(),
            z_where: where_.as_tensor().clone(),
            ..grid.clone()
        };
        let img = render_scene(&glimpses, &grid, &cfg).unwrap().image;
        (img * &w).unwrap().sum_all().unwrap().reshape(1).unwrap()
    };
    let render_vars = vec![("z_depth".to_string(), depth.clone()), ("z_where".to_string(), where_.clone())];
    let (render_err, render_n) = grad_check(&render_vars, &render, 1e-6, 16, 2);
    verdict(
        "gradient checks",
        loss_err < 1e-3 && render_err < 1e-3 && loss_n > 10 && render_n > 10,
        &format!(
            "total_loss: {loss_n} entries, max rel err {loss_err:.1e}; render_scene (depth, box): {render_n} entries, max rel err {render_err:.1e}"
        ),
    );
}

#[test]
fn gumbel_softmax_hard_frequencies() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let draws = 100_000;
    let mut worst_sigma: f64 = 0.0;
    for _ in 0..10 {
        let c = rng.random_range(2..8);
        let logits: Vec<f64> = (0..c).map(|_| rng.random_range(-2.5..2.5)).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let mut counts = vec![0usize; c];
        for _ in 0..draws {
            let y = gumbel_softmax(&logits, 1.0, &mut rng, true).unwrap();
            counts[y.iter().position(|&v| v == 1.0).unwrap()] += 1;
        }
        for k in 0..c {
            let p = logits[k].exp() / z;
            let sd = (draws as f64 * p * (1.0 - p)).sqrt();
            worst_sigma = worst_sigma.max((counts[k] as f64 - draws as f64 * p).abs() / sd);
        }
    }
    verdict(
        "Gumbel-Softmax hard-sample statistics",
        worst_sigma <= 3.0,
        &format!("10 logit vectors x 1e5 draws; worst deviation {worst_sigma:.2} sigma"),
    );
}

#[test]
fn determinism() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::make_dataset(&dir.path().join("data"), 16, 1, 32, "train");
    let mut cfg = common::small_config();
    cfg.train.total_steps = 200;
    cfg.train.log_every = 10;
    cfg.train.checkpoint_every = 0;
    let a = train(&cfg, &data, &dir.path().join("a"), None).unwrap();
    train(&cfg, &data, &dir.path().join("b"), None).unwrap();
    let la = std::fs::read(dir.path().join("a").join(METRICS_FILE)).unwrap();
    let lb = std::fs::read(dir.path().join("b").join(METRICS_FILE)).unwrap();

    let x = data.batch(&(0..8).collect::<Vec<_>>(), DType::F32).unwrap();
    let bits = |g: &LatentGrid| -> Vec<u32> {
        [&g.z_pres, &g.z_what, &g.z_cat, &g.z_where, &g.z_depth]
            .iter()
            .flat_map(|t| t.flatten_all().unwrap().to_vec1::<f32>().unwrap())
            .map(f32::to_bits)
            .collect()
    };
    let first = bits(&deterministic_infer(&a.state.model, &x).unwrap());
    let stable = (0..3).all(|_| bits(&deterministic_infer(&a.state.model, &x).unwrap()) == first);
    verdict(
        "determinism",
        la == lb && stable,
        &format!("two 200-step runs, {} log bytes identical: {}; deterministic_infer bitwise stable: {stable}", la.len(), la == lb),
    );
}

#[test]
fn manipulation_invariants_on_trained_latents() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::make_dataset(&dir.path().join("data"), 16, 2, 32, "train");
    let mut cfg = common::small_config();
    cfg.train.total_steps = 150;
    cfg.train.checkpoint_every = 0;
    let model = train(&cfg, &data, &dir.path().join("run"), None).unwrap().state.model;
    let x = data.batch(&(0..16).collect::<Vec<_>>(), DType::F32).unwrap();
    let grid = deterministic_infer(&model, &x).unwrap();
    let mp = &model.mixture;
    let objs = decompose(&grid, mp).unwrap();
    let as_vecs = |g: &LatentGrid| -> Vec<Vec<f64>> {
        [&g.z_pres, &g.z_what, &g.z_cat, &g.z_where, &g.z_depth].iter().map(|t| vec1(t)).collect()
    };
    let round_trip = as_vecs(&recompose(&grid, &objs).unwrap()) == as_vecs(&grid);

    let original: Vec<usize> = objs.iter().map(|o| o.cluster).collect();
    let target = (original.first().copied().unwrap_or(0) + 1) % cfg.model.num_clusters;
    let swapped = swap_category(&objs, target, mp).unwrap();
    let back = assign_clusters(&swapped, &original, mp).unwrap();
    let swap_identity = back == objs && as_vecs(&recompose(&grid, &back).unwrap()) == as_vecs(&grid);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shuffled = shuffle_objects(&grid, &mut rng).unwrap();
    let key = |o: &mixscene::manipulation::ObjectLatent| -> (usize, Vec<u64>) {
        let mut v: Vec<u64> = o.z_what().iter().map(|f| f.to_bits()).collect();
        v.push(o.z_depth.to_bits());
        v.push(o.cluster as u64);
        (o.scene, v)
    };
    let multiset = |objs: &[mixscene::manipulation::ObjectLatent]| -> BTreeMap<(usize, Vec<u64>), usize> {
        let mut m = BTreeMap::new();
        for o in objs {
            *m.entry(key(o)).or_insert(0) += 1;
        }
        m
    };
    let after = decompose(&shuffled, mp).unwrap();
    let preserved = multiset(&after) == multiset(&objs);
    verdict(
        "manipulation invariants",
        !objs.is_empty() && round_trip && swap_identity && preserved,
        &format!(
            "{} objects from a 150-step checkpoint; decompose/recompose exact: {round_trip}; \
             swap and swap back: {swap_identity}; shuffle keeps the multiset: {preserved}",
            objs.len()
        ),
    );
}

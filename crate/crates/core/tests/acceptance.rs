//! Acceptance checks, one line per criterion. Runs as a plain binary so the
//! PASS/FAIL lines are always printed.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use ccp_dml::ccp::{self, init_proxies, projection_objective, CcpConfig, ObjectiveAnchors, ProxySet};
use ccp_dml::config::ExperimentConfig;
use ccp_dml::data::{self, Dataset, MPerClassSampler, SamplerConfig};
use ccp_dml::kcenter::{covering_radius, exact_k_center, farthest_first, Centers, PointCloud};
use ccp_dml::losses::{self, generalized_contrastive, violation_indicator, LossSpec, PairBatch};
use ccp_dml::metrics;
use ccp_dml::net::{adam_step, norm_clip, AdamConfig, AdamState, EmbeddingNetwork};
use ccp_dml::{runner, seeds};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 gradient suite", gradient_suite),
        ("2 markov invariant", markov_invariant),
        ("3 metric oracle", metric_oracle),
        ("4 k-center", k_center),
        ("5 ccp vs baseline", ccp_vs_baseline),
        ("6 reduction identities", reduction_identities),
        ("7 determinism", determinism),
        ("8 lipschitz checks", lipschitz_checks),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let secs = start.elapsed().as_secs_f64();
        println!(
            "criterion {name}: {} ({secs:.1}s) {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

fn normal_vec(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * gauss(r)).collect()
}

/// Random rows inside the unit ball.
fn ball_rows(r: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<f64> {
    (0..rows)
        .flat_map(|_| {
            let v = normal_vec(r, dim, 0.5);
            norm_clip(&v)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` around `x`.
fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-5;
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn random_spec(kind: usize, r: &mut ChaCha8Rng) -> LossSpec {
    match kind {
        0 => LossSpec::generalized_contrastive(r.random_range(0.0..0.3), r.random_range(0.2..1.0)),
        1 => LossSpec::contrastive_c1(r.random_range(0.2..1.0)),
        2 => {
            let mp = r.random_range(0.0..0.3);
            LossSpec::contrastive_c2(mp, mp + r.random_range(0.1..0.8))
        }
        3 => LossSpec::triplet(r.random_range(0.05..0.5)),
        _ => LossSpec::multi_similarity(r.random_range(1.0..3.0), r.random_range(5.0..40.0), r.random_range(0.0..0.8)),
    }
    .unwrap()
}

fn gradient_suite() -> Outcome {
    let mut r = rng(11);
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let mut note = |name: String, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(if e.is_nan() { f64::INFINITY } else { e });
    };
    let instances = 100;

    for kind in 0..5 {
        for t in 0..instances {
            let spec = random_spec(kind, &mut r);
            let (b, d) = (r.random_range(3..8), r.random_range(2..5));
            let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..3)).collect();
            let emb = ball_rows(&mut r, b, d);
            let with_anchors = t % 2 == 1;
            let a = 4;
            let anchor_labels: Vec<usize> = (0..a).map(|i| i % 3).collect();
            let anchors = ball_rows(&mut r, a, d);
            let eval = |e: &[f64], an: &[f64]| {
                let batch = PairBatch::new(d, e, &labels);
                let batch = if with_anchors { batch.with_anchors(an, &anchor_labels) } else { batch };
                losses::batch_loss_and_grads(&spec, &batch).unwrap()
            };
            let out = eval(&emb, &anchors);
            let num = numeric_grad(&emb, |e| eval(e, &anchors).loss);
            note(format!("{}", spec.kind()), rel_err(&out.grad_embeddings, &num));
            if with_anchors {
                let num = numeric_grad(&anchors, |an| eval(&emb, an).loss);
                note(format!("{}", spec.kind()), rel_err(&out.grad_anchors, &num));
            }
        }
    }

    for _ in 0..instances {
        let dims = [r.random_range(2..6), r.random_range(3..9), r.random_range(2..6), r.random_range(1..4)];
        let depth = r.random_range(2..=4);
        let dims = &dims[..depth];
        let mut net = EmbeddingNetwork::init(dims, &mut r).unwrap();
        for b in 0..net.num_layers() {
            for x in net.biases_mut(b) {
                *x = 0.3 * gauss(&mut r);
            }
        }
        let bsz = r.random_range(1..5);
        let x = normal_vec(&mut r, bsz * dims[0], 1.5);
        let g = normal_vec(&mut r, bsz * dims[depth - 1], 1.0);
        let analytic = net.backward(&x, &g).unwrap();
        let theta = net.params().to_vec();
        let mut probe = net.clone();
        let num = numeric_grad(&theta, |p| {
            probe.set_params(p).unwrap();
            let out = probe.embed_batch(&x).unwrap();
            out.iter().zip(&g).map(|(o, gi)| o * gi).sum::<f64>() / bsz as f64
        });
        note("network".into(), rel_err(&analytic, &num));
    }

    // projection objective in both anchor modes, gradients in θ and ρ
    let ds = data::split(data::synth_blobs(3, 12, 4, 0.2, 5).unwrap(), 0.25, 5).unwrap();
    for t in 0..instances {
        let net = EmbeddingNetwork::init(&[4, 6, 3], &mut r).unwrap();
        let mut theta_prev = net.params().to_vec();
        theta_prev.iter_mut().for_each(|p| *p += 0.05 * gauss(&mut r));
        let lambda = r.random_range(0.0..2.0);
        let spec = random_spec(t % 5, &mut r);
        let by = ds.by_class(&ds.train);
        let sel: BTreeMap<usize, Vec<usize>> = by.iter().map(|(&c, m)| (c, vec![m[0], m[1]])).collect();
        let mut proxies = init_proxies(&net, &sel, &ds).unwrap();
        proxies.proxies.iter_mut().for_each(|p| *p += 0.1 * gauss(&mut r));
        proxies.clip();
        let idx: Vec<usize> = ds.train.iter().copied().step_by(3).take(6).collect();
        let (x, y) = (ds.gather(&idx), ds.gather_labels(&idx));
        let anchor_ids: Vec<usize> = sel.values().flatten().copied().collect();
        let (ax, ay) = (ds.gather(&anchor_ids), ds.gather_labels(&anchor_ids));
        let sample_mode = t % 2 == 1;
        let value = |n: &EmbeddingNetwork, p: &ProxySet| {
            let anchors = if sample_mode {
                ObjectiveAnchors::Samples { inputs: &ax, labels: &ay }
            } else {
                ObjectiveAnchors::Proxies(p)
            };
            projection_objective(n, anchors, &x, &y, &theta_prev, lambda, &spec).unwrap()
        };
        let out = value(&net, &proxies);
        let mut probe = net.clone();
        let num = numeric_grad(net.params(), |p| {
            probe.set_params(p).unwrap();
            value(&probe, &proxies).value
        });
        note("projection objective (theta)".into(), rel_err(&out.grad_net, &num));
        if !sample_mode {
            let mut pp = proxies.clone();
            let num = numeric_grad(&proxies.proxies, |p| {
                pp.proxies.copy_from_slice(p);
                value(&net, &pp).value
            });
            note("projection objective (rho)".into(), rel_err(&out.grad_proxies, &num));
        }
        // the regularizer contributes exactly λ(θ − θ_prev)
        let plain = projection_objective(&net, ObjectiveAnchors::Proxies(&proxies), &x, &y, &theta_prev, 0.0, &spec).unwrap();
        let with = projection_objective(&net, ObjectiveAnchors::Proxies(&proxies), &x, &y, &theta_prev, lambda, &spec).unwrap();
        let extra: Vec<f64> = with.grad_net.iter().zip(&plain.grad_net).map(|(a, b)| a - b).collect();
        let expect: Vec<f64> = net.params().iter().zip(&theta_prev).map(|(a, b)| lambda * (a - b)).collect();
        note("regularizer".into(), rel_err(&extra, &expect));
    }

    let max = worst.values().cloned().fold(0.0, f64::max);
    let detail = worst
        .iter()
        .map(|(k, v)| format!("{k} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(max < 1e-4, format!("{instances} instances each; worst relative error: {detail}"))
}

fn markov_invariant() -> Outcome {
    let mut r = rng(12);
    let mut checked = 0;
    let mut exceptions = 0;
    for _ in 0..2000 {
        let u = ball_rows(&mut r, 1, 3);
        let v = ball_rows(&mut r, 1, 3);
        let d = ccp_dml::dist(&u, &v);
        let same = r.random_bool(0.5);
        let beta = r.random_range(0.05..1.5);
        for alpha in [0.01, 0.1, 1.0] {
            let ind = f64::from(violation_indicator(d, same, beta));
            if ind > generalized_contrastive(d, same, alpha, beta) / alpha {
                exceptions += 1;
            }
            checked += 1;
        }
    }
    // boundary pairs, where the indicator just fires
    for beta in [0.1, 0.5, 1.0] {
        for same in [true, false] {
            for alpha in [0.01, 0.1, 1.0] {
                let ind = f64::from(violation_indicator(beta, same, beta));
                exceptions += usize::from(ind > generalized_contrastive(beta, same, alpha, beta) / alpha);
                checked += 1;
            }
        }
    }
    outcome(exceptions == 0, format!("{checked} pair/alpha checks, {exceptions} exceptions"))
}

/// Leave-one-out metrics computed straight from the definitions.
fn naive_metrics(emb: &[f64], labels: &[usize], dim: usize) -> Option<(f64, f64, f64)> {
    let n = labels.len();
    let (mut p1, mut pr, mut map, mut queries) = (0.0, 0.0, 0.0, 0usize);
    for q in 0..n {
        let r = (0..n).filter(|&j| j != q && labels[j] == labels[q]).count();
        if r == 0 {
            continue;
        }
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != q)
            .map(|j| {
                let mut s = 0.0;
                for k in 0..dim {
                    let t = emb[q * dim + k] - emb[j * dim + k];
                    s += t * t;
                }
                (s.sqrt(), j)
            })
            .collect();
        // insertion sort on (distance, index)
        for i in 1..others.len() {
            let mut k = i;
            while k > 0 && (others[k - 1].0 > others[k].0 || (others[k - 1].0 == others[k].0 && others[k - 1].1 > others[k].1)) {
                others.swap(k - 1, k);
                k -= 1;
            }
        }
        let hit = |i: usize| labels[others[i].1] == labels[q];
        p1 += if hit(0) { 1.0 } else { 0.0 };
        pr += (0..r).filter(|&i| hit(i)).count() as f64 / r as f64;
        let mut ap = 0.0;
        for i in 0..r {
            if hit(i) {
                let prec = (0..=i).filter(|&k| hit(k)).count() as f64 / (i + 1) as f64;
                ap += prec;
            }
        }
        map += ap / r as f64;
        queries += 1;
    }
    (queries > 0).then(|| {
        let m = queries as f64;
        (p1 / m, pr / m, map / m)
    })
}

fn metric_oracle() -> Outcome {
    let mut r = rng(13);
    let mut mismatches = 0;
    let mut done = 0;
    while done < 200 {
        let n = r.random_range(2..=50);
        let dim = r.random_range(1..4);
        let classes = r.random_range(1..6);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        // a coarse grid produces many exact ties
        let grid = done % 2 == 0;
        let emb: Vec<f64> = (0..n * dim)
            .map(|_| if grid { r.random_range(0..4) as f64 * 0.25 } else { r.random_range(-1.0..1.0) })
            .collect();
        let Some(oracle) = naive_metrics(&emb, &labels, dim) else {
            assert!(metrics::evaluate(&emb, &labels, dim).is_err());
            continue;
        };
        let rep = metrics::evaluate(&emb, &labels, dim).unwrap();
        if (rep.p_at_1, rep.p_at_r, rep.map_at_r) != oracle {
            mismatches += 1;
        }
        done += 1;
    }
    outcome(mismatches == 0, format!("{done} instances, {mismatches} not bit-equal to the naive oracle"))
}

fn k_center() -> Outcome {
    let mut r = rng(14);
    let (mut bound_fail, mut mono_fail, mut worst) = (0, 0, 0.0f64);
    for _ in 0..200 {
        let n = r.random_range(3..=12);
        let dim = r.random_range(1..4);
        let cloud = PointCloud::new(dim, normal_vec(&mut r, n * dim, 1.0)).unwrap();
        let mut prev_greedy = f64::INFINITY;
        let mut prev_exact = f64::INFINITY;
        for k in 1..=3.min(n) {
            let t = farthest_first(&cloud, &[], k).unwrap();
            let greedy = covering_radius(&cloud, Centers::Indices(&t.order)).unwrap();
            let (_, exact) = exact_k_center(&cloud, k).unwrap();
            if greedy > 2.0 * exact + 1e-12 {
                bound_fail += 1;
            }
            if exact > 0.0 {
                worst = worst.max(greedy / exact);
            }
            if greedy > prev_greedy || exact > prev_exact {
                mono_fail += 1;
            }
            prev_greedy = greedy;
            prev_exact = exact;
        }
    }
    outcome(
        bound_fail == 0 && mono_fail == 0,
        format!("200 instances; ratio greedy/exact max {worst:.3}, {bound_fail} bound and {mono_fail} monotonicity failures"),
    )
}

/// Settings shared by the three runs of criterion 5.
const COMPARISON: &str = "
data.source = synth
data.classes = 10
data.per_class = 120
data.dim = 16
data.spread = 0.04
net.dims = 16, 64, 32, 2
loss.kind = generalized_contrastive
loss.alpha = 0.2
loss.beta = 0.5
ccp.max_steps = 10000
ccp.eval_every = 25
ccp.proxies_per_class = 4
ccp.pool_budget = 16
ccp.lambda = 2e-4
sampler.batch_size = 32
sampler.samples_per_class = 4
";

struct ModeResult {
    map_best: f64,
    radius_final: f64,
    radius_best: f64,
}

fn run_mode(mode: &str, seed: u64) -> ModeResult {
    let cfg = ExperimentConfig::from_text(&format!("{COMPARISON}mode = {mode}\nseed = {seed}\n")).unwrap();
    let ds = cfg.load_dataset().unwrap();
    let train = cfg.training_config();
    let out = ccp::run_ccp(&train, &ds).unwrap();
    let (a, b) = (train.constraint_alpha, train.constraint_beta);
    let best = runner::test_report(&out.net, &ds, a, b).unwrap();
    let mut last = out.net.clone();
    last.set_params(&out.final_params).unwrap();
    let fin = runner::test_report(&last, &ds, a, b).unwrap();
    ModeResult {
        map_best: best.map_at_r,
        radius_final: fin.avg_covering_radius.unwrap(),
        radius_best: best.avg_covering_radius.unwrap(),
    }
}

fn ccp_vs_baseline() -> Outcome {
    let (mut wins, mut tighter, mut tighter_best, mut sample_ok) = (0, 0, 0, 0);
    let mut rows = Vec::new();
    for seed in 0..3 {
        let base = run_mode("baseline_proxy", seed);
        let ccp = run_mode("ccp", seed);
        let samp = run_mode("sample_based", seed);
        wins += usize::from(ccp.map_best > base.map_best);
        tighter += usize::from(ccp.radius_final < base.radius_final);
        tighter_best += usize::from(ccp.radius_best < base.radius_best);
        sample_ok += usize::from(samp.map_best >= ccp.map_best - 0.015);
        rows.push(format!(
            "seed {seed}: MAP@R base {:.4} ccp {:.4} sample {:.4}, radius base {:.4} ccp {:.4}",
            base.map_best, ccp.map_best, samp.map_best, base.radius_final, ccp.radius_final
        ));
    }
    let pass = wins >= 2 && tighter >= 2 && sample_ok >= 2;
    outcome(
        pass,
        format!(
            "ccp MAP@R wins {wins}/3, lower final radius {tighter}/3 (at best checkpoint {tighter_best}/3), \
             sample-based within 1.5 points {sample_ok}/3 [{}]",
            rows.join("; ")
        ),
    )
}

fn small_problem() -> (Dataset, CcpConfig) {
    let ds = data::split(data::holdout_test(data::synth_blobs(4, 40, 8, 0.08, 21).unwrap(), 0.2, 21).unwrap(), 0.25, 21)
        .unwrap()
        .standardize()
        .unwrap();
    let cfg = CcpConfig {
        layer_dims: vec![8, 16, 2],
        loss: LossSpec::generalized_contrastive(0.1, 0.5).unwrap(),
        batch_size: 8,
        samples_per_class: 2,
        eval_every: 10,
        max_steps: 400,
        global_patience: 8,
        seed: 21,
        ..CcpConfig::default()
    };
    (ds, cfg)
}

/// Plain proxy-based training written directly against the primitives: one
/// random sample per class as proxy, Adam on network and proxies, early
/// stopping on validation MAP@R.
fn plain_proxy_dml(ds: &Dataset, cfg: &CcpConfig) -> (Vec<f64>, Vec<f64>) {
    let mut net = EmbeddingNetwork::init(&cfg.layer_dims, &mut seeds::stream(cfg.seed, seeds::INIT)).unwrap();
    let mut sampler = MPerClassSampler::new(
        ds,
        SamplerConfig {
            batch_size: cfg.batch_size,
            samples_per_class: cfg.samples_per_class,
            seed: cfg.seed,
        },
    )
    .unwrap();
    let picks = data::sample_per_class(ds, &ds.train, 1, &mut seeds::stream(cfg.seed, seeds::POOL)).unwrap();
    let classes: Vec<usize> = picks.keys().copied().collect();
    let ids: Vec<usize> = picks.values().map(|v| v[0]).collect();
    let mut proxies = net.embed_batch(&ds.gather(&ids)).unwrap();
    let d = net.output_dim();
    let mut net_opt = AdamState::new(net.num_params(), cfg.adam);
    let mut proxy_opt = AdamState::new(proxies.len(), AdamConfig { weight_decay: 0.0, ..cfg.adam });
    let (vx, vy) = (ds.gather(&ds.val), ds.gather_labels(&ds.val));
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut maps = Vec::new();
    let mut bad = 0;
    let mut step = 0;
    while step < cfg.max_steps && bad < cfg.global_patience {
        let batch = sampler.next_batch();
        let (x, y) = (ds.gather(&batch), ds.gather_labels(&batch));
        let (emb, cache) = net.forward_batch(&x).unwrap();
        let out = losses::batch_loss_and_grads(&cfg.loss, &PairBatch::new(d, &emb, &y).with_anchors(&proxies, &classes)).unwrap();
        let up: Vec<f64> = out.grad_embeddings.iter().map(|g| g * y.len() as f64).collect();
        let grad = net.backward_cached(&cache, &up).unwrap();
        adam_step(&mut net, &grad, &mut net_opt).unwrap();
        proxy_opt.step(&mut proxies, &out.grad_anchors).unwrap();
        for p in proxies.chunks_mut(d) {
            let c = norm_clip(p);
            p.copy_from_slice(&c);
        }
        step += 1;
        if step % cfg.eval_every == 0 {
            let map = metrics::evaluate(&net.embed_batch(&vx).unwrap(), &vy, d).unwrap().map_at_r;
            maps.push(map);
            if best.as_ref().is_none_or(|(b, _)| map > *b) {
                best = Some((map, net.params().to_vec()));
                bad = 0;
            } else {
                bad += 1;
            }
        }
    }
    if let Some((_, p)) = best {
        net.set_params(&p).unwrap();
    }
    (net.params().to_vec(), maps)
}

fn reduction_identities() -> Outcome {
    let (ds, cfg) = small_problem();
    let base = ccp::run_ccp(&cfg.clone().baseline(), &ds).unwrap();
    let (plain_params, plain_maps) = plain_proxy_dml(&ds, &cfg.clone().baseline());
    let trace_maps: Vec<f64> = base.trace.iter().filter(|t| t.kind == "eval").map(|t| t.val_map_at_r).collect();
    let bit_equal = base.net.params() == &plain_params[..] && trace_maps == plain_maps;

    let single = |lambda: f64| {
        let c = CcpConfig {
            lambda,
            max_projections: 1,
            ..cfg.clone()
        };
        ccp::run_ccp(&c, &ds).unwrap().projections[0].displacement
    };
    let (free, pinned) = (single(0.0), single(1e6));
    let ratio = pinned / free;
    outcome(
        bit_equal && ratio < 1e-3,
        format!(
            "baseline vs plain proxy loop bit-equal: {bit_equal} ({} evals); displacement lambda=0 {free:.4e}, lambda=1e6 {pinned:.4e}, ratio {ratio:.2e}",
            plain_maps.len()
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut same = 0;
    let modes = ["baseline_proxy", "ccp", "sample_based"];
    for mode in modes {
        let cfg = ExperimentConfig::from_text(&format!(
            "mode = {mode}\nseed = 5\ndata.classes = 5\ndata.per_class = 40\ndata.dim = 8\nnet.dims = 8, 16, 2\n\
             ccp.max_steps = 400\nccp.eval_every = 10\nccp.proxies_per_class = 2\nccp.pool_budget = 6\n\
             sampler.batch_size = 10\nsampler.samples_per_class = 2\n"
        ))
        .unwrap();
        let a = dir.path().join(format!("{mode}-a"));
        let b = dir.path().join(format!("{mode}-b"));
        runner::run(&cfg, &a).unwrap();
        runner::run(&cfg, &b).unwrap();
        let ta = std::fs::read(a.join(runner::TRACE_FILE)).unwrap();
        let tb = std::fs::read(b.join(runner::TRACE_FILE)).unwrap();
        same += usize::from(!ta.is_empty() && ta == tb);
    }
    outcome(same == modes.len(), format!("{same}/{} modes produced byte-identical trace.csv twice", modes.len()))
}

fn lipschitz_checks() -> Outcome {
    let mut r = rng(18);
    let mut clip_viol = 0;
    for _ in 0..10_000 {
        let dim = r.random_range(1..6);
        let scale = r.random_range(0.1..3.0);
        let u = normal_vec(&mut r, dim, scale);
        let v = normal_vec(&mut r, dim, scale);
        let lhs = ccp_dml::dist(&norm_clip(&u), &norm_clip(&v));
        if lhs > 2.0 * ccp_dml::dist(&u, &v) * (1.0 + 1e-12) {
            clip_viol += 1;
        }
    }

    let mut bound_viol = 0;
    let mut tightest = 0.0f64;
    let mut bounds = Vec::new();
    for _ in 0..3 {
        let dims = [r.random_range(2..6), r.random_range(3..8), r.random_range(3..8), r.random_range(2..4)];
        let mut net = EmbeddingNetwork::init(&dims, &mut r).unwrap();
        for l in 0..net.num_layers() {
            for b in net.biases_mut(l) {
                *b = 0.2 * gauss(&mut r);
            }
        }
        let bound = net.pair_loss_lipschitz_bound();
        bounds.push(bound);
        let (alpha, beta) = (0.1, 0.5);
        for _ in 0..10_000 {
            let d0 = dims[0];
            let x = normal_vec(&mut r, 2 * d0, 1.0);
            let eps = r.random_range(1e-4..1.0);
            let xt: Vec<f64> = x.iter().map(|v| v + eps * gauss(&mut r)).collect();
            let same = r.random_bool(0.5);
            let loss = |z: &[f64]| {
                let a = net.forward_raw(&z[..d0]).unwrap();
                let b = net.forward_raw(&z[d0..]).unwrap();
                generalized_contrastive(ccp_dml::dist(&a, &b), same, alpha, beta)
            };
            let lhs = (loss(&x) - loss(&xt)).abs();
            let rhs = bound * ccp_dml::dist(&x, &xt);
            if lhs > rhs * (1.0 + 1e-9) {
                bound_viol += 1;
            }
            if rhs > 0.0 {
                tightest = tightest.max(lhs / rhs);
            }
        }
    }
    outcome(
        clip_viol == 0 && bound_viol == 0,
        format!(
            "norm_clip: {clip_viol} violations in 1e4 pairs; loss bound: {bound_viol} violations in 3 x 1e4 pairs \
             (bounds {:?}, max observed fraction of bound {tightest:.3})",
            bounds.iter().map(|b| (b * 100.0).round() / 100.0).collect::<Vec<_>>()
        ),
    )
}

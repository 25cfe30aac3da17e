//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a hard criterion fails. Soft criteria print their per-seed
//! data and are reported, but do not change the exit status.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use treefed::fedstyle::{extract_stats, mix, mixed_stats, sample_lambda, StyleStats};
use treefed::fusion::{disseminate, FusionConfig};
use treefed::grid::{Image, Mask};
use treefed::inference::{chain_weights, SelectionStrategy};
use treefed::metrics::{dice, hd95, BinaryMask};
use treefed::orchestrator::{
    client_rng, generate_dataset, init_seed, leave_one_out, leave_one_out_multi, Client,
    ExperimentConfig, Federation, LooReport, RunOptions, Topology,
};
use treefed::params::{FlatParams, LayerPartition, Layout};
use treefed::sim::{default_domains, generate_domain, train_local, Architecture, ToyModel};
use treefed::tree::{build_tree, ClientId, NodeTree, ThresholdSchedule};
use treefed::fusion::FusionMode;

struct Outcome {
    name: &'static str,
    pass: bool,
    soft: bool,
    detail: String,
}

fn record(results: &mut Vec<Outcome>, name: &'static str, soft: bool, f: impl FnOnce() -> (bool, String)) {
    let start = Instant::now();
    let (pass, detail) = f();
    let status = match (pass, soft) {
        (true, _) => "PASS",
        (false, false) => "FAIL",
        (false, true) => "FAIL (soft)",
    };
    println!("{status}: {name} [{:.1}s] {detail}", start.elapsed().as_secs_f64());
    results.push(Outcome {
        name,
        pass,
        soft,
        detail,
    });
}

// ---------------------------------------------------------------- FedAvg

/// Plain FedAvg written independently of the library's aggregation code.
fn reference_fedavg(
    init: &[f64],
    clients: &[(ClientId, Vec<treefed::sim::SegSample>)],
    cfg: &ExperimentConfig,
    rounds: usize,
) -> Vec<Vec<f64>> {
    let arch = cfg.arch();
    let mut global = init.to_vec();
    let mut history = Vec::new();
    for round in 0..rounds {
        let mut sum = vec![0.0; global.len()];
        let mut total = 0.0;
        for (id, data) in clients {
            let params = FlatParams::new(global.clone(), arch.layout(), data.len() as u64).unwrap();
            let model = ToyModel::from_params(arch, params).unwrap();
            let mut rng = client_rng(cfg.seed, *id, round);
            let out = train_local(&model, data, &cfg.train_config(), None, &mut rng);
            let n = data.len() as f64;
            for (s, v) in sum.iter_mut().zip(out.model.params().values()) {
                *s += n * v;
            }
            total += n;
        }
        global = sum.into_iter().map(|s| s / total).collect();
        history.push(global.clone());
    }
    history
}

fn fedavg_degeneracy() -> (bool, String) {
    let mut worst = 0.0f64;
    let mut details = Vec::new();
    for seed in 0..3u64 {
        let mut cfg = ExperimentConfig {
            seed,
            topology: Topology::Star,
            ..Default::default()
        };
        cfg.fusion.mode = FusionMode::Direct;
        cfg.style.enabled = false;
        cfg.inference.selection = SelectionStrategy::Root;
        cfg.train.local_epochs = 2;
        cfg.train.batch_size = 4;
        for (i, d) in cfg.domains.iter_mut().enumerate() {
            d.n_samples = 6 + 2 * i;
            d.size = 12;
        }
        let data: Vec<(ClientId, _)> = cfg
            .domains
            .iter()
            .map(|d| (d.domain_id, generate_domain(d)))
            .collect();
        let clients = cfg
            .domains
            .iter()
            .zip(&data)
            .map(|(d, (_, s))| Client {
                id: d.domain_id,
                name: d.name.clone(),
                data: s.clone(),
            })
            .collect();
        let init = ToyModel::init(cfg.arch(), init_seed(seed));
        let reference = reference_fedavg(init.params().values(), &data, &cfg, 10);
        let moved = reference[9]
            .iter()
            .zip(init.params().values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if moved < 1e-3 {
            return (false, format!("seed {seed}: reference barely trained ({moved:.1e})"));
        }
        let mut fed = Federation::new(cfg, clients).unwrap();
        let mut seed_worst = 0.0f64;
        for want in &reference {
            fed.run_round().unwrap();
            let root = &fed.tree().unwrap().root().params;
            let diff = root
                .values()
                .iter()
                .zip(want)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            seed_worst = seed_worst.max(diff);
        }
        worst = worst.max(seed_worst);
        details.push(format!("seed{seed}={seed_worst:.2e}"));
    }
    (
        worst <= 1e-9,
        format!("max abs diff {worst:.2e} over 10 rounds x 4 clients ({})", details.join(" ")),
    )
}

// ------------------------------------------------------------------ tree

fn random_leaves(rng: &mut ChaCha8Rng, layout: &Layout) -> Vec<(ClientId, FlatParams)> {
    let n = rng.random_range(1..=8);
    let dim = layout.total_len();
    let n_centers = rng.random_range(1..=3);
    let centers: Vec<Vec<f64>> = (0..n_centers)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let spread = [0.01, 0.1, 0.5][rng.random_range(0..3)];
    (0..n)
        .map(|i| {
            let c = &centers[rng.random_range(0..n_centers)];
            let v: Vec<f64> = c.iter().map(|x| x + spread * rng.random_range(-1.0..1.0)).collect();
            let count = rng.random_range(1..50);
            (i as ClientId * 3 + 1, FlatParams::new(v, layout.clone(), count).unwrap())
        })
        .collect()
}

fn random_schedule(rng: &mut ChaCha8Rng) -> ThresholdSchedule {
    ThresholdSchedule::new(
        rng.random_range(0.3..0.999),
        rng.random_range(-0.2..0.2),
        rng.random_range(1..=4),
    )
    .unwrap()
}

fn random_layout(rng: &mut ChaCha8Rng) -> Layout {
    Layout::from_lengths([("body", rng.random_range(2..6)), ("head", rng.random_range(1..4))]).unwrap()
}

fn check_tree(tree: &NodeTree, schedule: &ThresholdSchedule) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for node in tree.nodes() {
        if node.is_leaf() {
            continue;
        }
        let mut sum = vec![0.0; node.params.values().len()];
        let mut total = 0.0;
        for &c in &node.children {
            let child = &tree.node(c).params;
            let n = child.sample_count() as f64;
            for (s, v) in sum.iter_mut().zip(child.values()) {
                *s += n * v;
            }
            total += n;
        }
        for (a, s) in node.params.values().iter().zip(&sum) {
            worst = worst.max((a - s / total).abs());
        }
    }
    let roots: Vec<_> = tree.nodes().iter().filter(|n| n.parent.is_none()).collect();
    if roots.len() != 1 || roots[0].id != tree.root_id() {
        return Err(format!("{} parentless nodes", roots.len()));
    }
    let depth = tree.root().level;
    if depth > schedule.height || depth == 0 {
        return Err(format!("depth {depth} outside 1..={}", schedule.height));
    }
    for level in 0..=depth {
        let mut seen = std::collections::BTreeSet::new();
        for n in tree.nodes_at_level(level) {
            for c in &n.source_clients {
                if !seen.insert(*c) {
                    return Err(format!("client {c} twice at level {level}"));
                }
            }
        }
        if &seen != tree.clients() {
            return Err(format!("level {level} does not cover every client"));
        }
    }
    Ok(worst)
}

fn tree_invariants() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    let mut depths = BTreeMap::new();
    for i in 0..100 {
        let layout = random_layout(&mut rng);
        let leaves = random_leaves(&mut rng, &layout);
        let schedule = random_schedule(&mut rng);
        let tree = build_tree(&leaves, &schedule).unwrap();
        match check_tree(&tree, &schedule) {
            Ok(w) => worst = worst.max(w),
            Err(e) => return (false, format!("instance {i}: {e}")),
        }
        *depths.entry(tree.depth()).or_insert(0) += 1;
    }
    (
        worst <= 1e-12,
        format!("100 instances, max average error {worst:.2e}, depth histogram {depths:?}"),
    )
}

// -------------------------------------------------------------- fedstyle

fn fedstyle_checks() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut identity_ok = true;
    let mut moment_err = 0.0f64;
    for _ in 0..200 {
        let channels = rng.random_range(1..=3);
        let (h, w) = (rng.random_range(3..7), rng.random_range(3..7));
        let batch: Vec<Image> = (0..rng.random_range(1..5))
            .map(|_| Image::new(channels, h, w, (0..channels * h * w).map(|_| rng.random_range(-2.0..3.0)).collect()))
            .collect();
        let own = extract_stats(&batch).unwrap();
        let partner = StyleStats {
            mean: (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect(),
            std: (0..channels).map(|_| rng.random_range(0.1..2.0)).collect(),
        };
        let same = mix(&batch, &own, &partner, 1.0, 0.0).unwrap();
        identity_ok &= same
            .iter()
            .zip(&batch)
            .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

        let lambda = rng.random_range(0.0..1.0);
        let out = mix(&batch, &own, &partner, lambda, 0.0).unwrap();
        let got = extract_stats(&out).unwrap();
        let target = mixed_stats(&own, &partner, lambda);
        for c in 0..channels {
            moment_err = moment_err
                .max((got.mean[c] - target.mean[c]).abs())
                .max((got.std[c] - target.std[c]).abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let n = 100_000;
    let mean = (0..n).map(|_| sample_lambda(0.1, &mut rng)).sum::<f64>() / n as f64;
    let pass = identity_ok && moment_err <= 1e-9 && (mean - 0.5).abs() <= 0.01;
    (
        pass,
        format!("lambda=1 bit-identical: {identity_ok}; max moment error {moment_err:.2e}; Beta(0.1,0.1) mean {mean:.4}"),
    )
}

// ---------------------------------------------------------------- fusion

fn fusion_checks() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut outside = 0usize;
    let mut fixed_changed = 0usize;
    let mut noop_broken = 0usize;
    for _ in 0..100 {
        let layout = random_layout(&mut rng);
        let leaves = random_leaves(&mut rng, &layout);
        let tree = build_tree(&leaves, &random_schedule(&mut rng)).unwrap();
        let partition = LayerPartition::with_fixed(&layout, &["head"]).unwrap();
        let cfg = FusionConfig::new(rng.random_range(0.0..=1.0), rng.random_range(0.05..0.95), partition.clone())
            .unwrap();
        let out = disseminate(&tree, &cfg).unwrap();
        let head = layout.get("head").unwrap().range();
        for node in tree.nodes() {
            let Some(parent) = node.parent else { continue };
            let old = node.params.values();
            let new = out.tree.node(node.id).params.values();
            let par = out.tree.node(parent).params.values();
            for i in 0..old.len() {
                if head.contains(&i) {
                    fixed_changed += (old[i].to_bits() != new[i].to_bits()) as usize;
                } else {
                    let (lo, hi) = (old[i].min(par[i]), old[i].max(par[i]));
                    outside += (new[i] < lo - 1e-12 || new[i] > hi + 1e-12) as usize;
                }
            }
        }
        let zero = FusionConfig::new(0.0, cfg.omega, partition).unwrap();
        let still = disseminate(&tree, &zero).unwrap();
        for leaf in tree.leaves() {
            let client = *leaf.source_clients.iter().next().unwrap();
            let same = still.leaves[&client]
                .values()
                .iter()
                .zip(leaf.params.values())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            noop_broken += (!same) as usize;
        }
    }
    (
        outside == 0 && fixed_changed == 0 && noop_broken == 0,
        format!(
            "100 trees: {outside} values off-segment, {fixed_changed} fixed values changed, {noop_broken} leaves moved with epsilon0=0"
        ),
    )
}

// --------------------------------------------------------------- weights

fn ensemble_weights() -> (bool, String) {
    let mut ok = true;
    let mut worst_sum = 0.0f64;
    for len in 1..=8 {
        for d in [0.0, 0.1, 0.5, 1.0, 3.0] {
            let w = chain_weights(len, d).weights;
            worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
            if d > 0.0 {
                ok &= w.windows(2).all(|p| p[0] > p[1]);
            }
        }
    }
    let w = chain_weights(3, 0.5).weights;
    let hand = [0.5065, 0.3072, 0.1863];
    let close = w.iter().zip(hand).all(|(a, b)| (a - b).abs() <= 1e-4);
    (
        ok && worst_sum <= 1e-12 && close,
        format!("max |sum-1| {worst_sum:.1e}; strictly decreasing {ok}; (0.5, 3) -> {w:.4?}"),
    )
}

// --------------------------------------------------------------- metrics

fn brute_boundary(h: usize, w: usize, m: &[bool]) -> Vec<(usize, usize)> {
    let get = |r: isize, c: isize| {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            false
        } else {
            m[r as usize * w + c as usize]
        }
    };
    let mut out = Vec::new();
    for r in 0..h as isize {
        for c in 0..w as isize {
            if get(r, c) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dr, dc)| !get(r + dr, c + dc)) {
                out.push((r as usize, c as usize));
            }
        }
    }
    out
}

fn brute_hd95(h: usize, w: usize, p: &[bool], t: &[bool]) -> f64 {
    let (pe, te) = (!p.contains(&true), !t.contains(&true));
    if pe && te {
        return 0.0;
    }
    if pe || te {
        return f64::INFINITY;
    }
    let (bp, bt) = (brute_boundary(h, w, p), brute_boundary(h, w, t));
    let nearest = |from: &[(usize, usize)], to: &[(usize, usize)]| -> Vec<f64> {
        from.iter()
            .map(|&(r, c)| {
                to.iter()
                    .map(|&(r2, c2)| {
                        let (dr, dc) = (r as f64 - r2 as f64, c as f64 - c2 as f64);
                        dr * dr + dc * dc
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect()
    };
    let mut d = nearest(&bp, &bt);
    d.extend(nearest(&bt, &bp));
    d.sort_by(f64::total_cmp);
    let pos = 0.95 * (d.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    d[lo] + (pos - lo as f64) * (d[hi] - d[lo])
}

fn brute_dice(p: &[bool], t: &[bool]) -> f64 {
    let inter = p.iter().zip(t).filter(|(a, b)| **a && **b).count();
    let total = p.iter().filter(|x| **x).count() + t.iter().filter(|x| **x).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

fn gradient_check() -> f64 {
    let arch = Architecture::default();
    let mut worst = 0.0f64;
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let size = 5;
        let img = Image::gray(size, size, (0..size * size).map(|_| rng.random()).collect());
        let mask = Mask::new(size, size, (0..size * size).map(|_| rng.random_range(0..3)).collect());
        let model = ToyModel::init(arch, seed);
        let batch = [(&img, &mask)];
        let (_, grad) = model.loss_and_grad(&batch);
        let step = 1e-5;
        for i in 0..grad.len() {
            let mut plus = model.clone();
            plus.params_mut().values_mut()[i] += step;
            let mut minus = model.clone();
            minus.params_mut().values_mut()[i] -= step;
            let fd = (plus.loss(&batch) - minus.loss(&batch)) / (2.0 * step);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}

fn metric_oracles() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let mut mismatches = 0usize;
    for _ in 0..200 {
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let density: f64 = rng.random_range(0.0..1.0);
        let mut draw = || -> Vec<bool> { (0..h * w).map(|_| rng.random_bool(density)).collect() };
        let (p, t) = (draw(), draw());
        let (pm, tm) = (BinaryMask::new(h, w, &p), BinaryMask::new(h, w, &t));
        let d = dice(pm, tm).unwrap();
        let hd = hd95(pm, tm).unwrap();
        let (bd, bh) = (brute_dice(&p, &t), brute_hd95(h, w, &p, &t));
        if d != bd || !(hd == bh || (hd - bh).abs() <= 1e-12) {
            mismatches += 1;
        }
    }
    let grad = gradient_check();
    (
        mismatches == 0 && grad < 1e-4,
        format!("{mismatches}/200 metric mismatches; gradient check max relative error {grad:.2e}"),
    )
}

// ------------------------------------------------------------ desk scale

struct DeskRuns {
    seeds: Vec<u64>,
    tree_weighted: Vec<LooReport>,
    tree_root: Vec<LooReport>,
    star: Vec<LooReport>,
    ordering_secs: f64,
}

fn desk_runs() -> DeskRuns {
    let start = Instant::now();
    let seeds: Vec<u64> = (0..5).collect();
    let mut runs = DeskRuns {
        seeds: seeds.clone(),
        tree_weighted: Vec::new(),
        tree_root: Vec::new(),
        star: Vec::new(),
        ordering_secs: 0.0,
    };
    for &seed in &seeds {
        let cfg = ExperimentConfig {
            seed,
            ..Default::default()
        };
        let data = generate_dataset(&cfg);
        let mut both = leave_one_out_multi(
            &cfg,
            &data,
            &[SelectionStrategy::AllWeighted, SelectionStrategy::Root],
            &RunOptions::default(),
        )
        .unwrap();
        runs.tree_root.push(both.pop().unwrap());
        runs.tree_weighted.push(both.pop().unwrap());

        let mut star = cfg.clone();
        star.topology = Topology::Star;
        star.fusion.mode = FusionMode::Direct;
        star.style.enabled = false;
        star.inference.selection = SelectionStrategy::Root;
        runs.star.push(leave_one_out(&star, &data, &RunOptions::default()).unwrap());
    }
    runs.ordering_secs = start.elapsed().as_secs_f64();
    runs
}

fn fold_table(label: &str, reports: &[LooReport], seeds: &[u64]) -> String {
    let mut out = String::new();
    for (seed, r) in seeds.iter().zip(reports) {
        let d: Vec<String> = r.fold_dice().iter().map(|x| format!("{x:.4}")).collect();
        out += &format!(
            "    {label:<14} seed={seed} folds=[{}] mean={:.4} std={:.4}\n",
            d.join(", "),
            r.mean_dice(),
            r.dice_std()
        );
    }
    out
}

fn seed_mean_folds(reports: &[LooReport]) -> Vec<f64> {
    let n = reports[0].folds.len();
    (0..n)
        .map(|k| reports.iter().map(|r| r.fold_dice()[k]).sum::<f64>() / reports.len() as f64)
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn desk_ordering(runs: &DeskRuns) -> (bool, String) {
    let tree = seed_mean_folds(&runs.tree_weighted);
    let star = seed_mean_folds(&runs.star);
    let wins = tree.iter().zip(&star).filter(|(t, s)| t >= s).count();
    let tree_std = mean(runs.tree_weighted.iter().map(|r| r.dice_std()));
    let star_std = mean(runs.star.iter().map(|r| r.dice_std()));
    let pass = wins >= 3 && tree_std <= star_std && runs.ordering_secs < 600.0;
    let names: Vec<&str> = runs.tree_weighted[0].folds.iter().map(|f| f.held_out.as_str()).collect();
    let mut detail = format!(
        "tree >= star in {wins}/4 folds; mean cross-fold std tree {tree_std:.4} vs star {star_std:.4}; {:.0}s\n",
        runs.ordering_secs
    );
    for (k, name) in names.iter().enumerate() {
        detail += &format!("    fold {name}: tree {:.4} star {:.4}\n", tree[k], star[k]);
    }
    detail += &fold_table("tree", &runs.tree_weighted, &runs.seeds);
    detail += &fold_table("star", &runs.star, &runs.seeds);
    (pass, detail.trim_end().to_string())
}

fn ablation_selection(runs: &DeskRuns) -> (bool, String) {
    let weighted = mean(runs.tree_weighted.iter().map(|r| r.mean_dice()));
    let root = mean(runs.tree_root.iter().map(|r| r.mean_dice()));
    let mut detail = format!("all-weighted {weighted:.4} vs root-only {root:.4}\n");
    detail += &fold_table("all-weighted", &runs.tree_weighted, &runs.seeds);
    detail += &fold_table("root-only", &runs.tree_root, &runs.seeds);
    (weighted >= root, detail.trim_end().to_string())
}

fn ablation_fusion(runs: &DeskRuns) -> (bool, String) {
    let direct: Vec<LooReport> = runs
        .seeds
        .iter()
        .map(|&seed| {
            let mut cfg = ExperimentConfig {
                seed,
                ..Default::default()
            };
            cfg.fusion.mode = FusionMode::Direct;
            leave_one_out(&cfg, &generate_dataset(&cfg), &RunOptions::default()).unwrap()
        })
        .collect();
    let progressive = mean(runs.tree_weighted.iter().map(|r| r.mean_dice()));
    let direct_mean = mean(direct.iter().map(|r| r.mean_dice()));
    let mut detail = format!("progressive {progressive:.4} vs direct {direct_mean:.4}\n");
    detail += &fold_table("progressive", &runs.tree_weighted, &runs.seeds);
    detail += &fold_table("direct", &direct, &runs.seeds);
    (progressive >= direct_mean, detail.trim_end().to_string())
}

// ----------------------------------------------------------- determinism

fn determinism() -> (bool, String) {
    let mut cfg = ExperimentConfig {
        seed: 5,
        rounds: 3,
        ..Default::default()
    };
    cfg.domains = default_domains().into_iter().take(3).collect();
    for d in &mut cfg.domains {
        d.n_samples = 6;
        d.size = 12;
    }
    let run = || {
        let data = generate_dataset(&cfg);
        let r = leave_one_out(&cfg, &data, &RunOptions { explain: true, ..Default::default() }).unwrap();
        let dumps: String = r.folds.iter().map(|f| f.tree_dump.clone() + &f.round_logs + &f.explain).collect();
        (r.format(), dumps)
    };
    let (a_report, a_dump) = run();
    let (b_report, b_dump) = run();
    (
        a_report == b_report && a_dump == b_dump,
        format!(
            "report {} bytes, tree dumps and logs {} bytes, identical: {}",
            a_report.len(),
            a_dump.len(),
            a_report == b_report && a_dump == b_dump
        ),
    )
}

fn main() -> ExitCode {
    // accept and ignore libtest flags such as --nocapture
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filter.is_empty() && !filter.iter().any(|f| "acceptance".contains(f.as_str())) {
        return ExitCode::SUCCESS;
    }
    let mut results = Vec::new();
    record(&mut results, "FedAvg degeneracy (star, direct, no style)", false, fedavg_degeneracy);
    record(&mut results, "tree invariants on random leaf sets", false, tree_invariants);
    record(&mut results, "style mixing identity, moments and Beta mean", false, fedstyle_checks);
    record(&mut results, "fusion convexity, conservation and no-op", false, fusion_checks);
    record(&mut results, "ensemble chain weights", false, ensemble_weights);
    record(&mut results, "metric oracles and gradient check", false, metric_oracles);
    record(&mut results, "end-to-end determinism", false, determinism);
    let runs = desk_runs();
    record(&mut results, "desk-scale generalization ordering vs star", false, || desk_ordering(&runs));
    record(&mut results, "ablation: all-weighted >= root-only selection", true, || {
        ablation_selection(&runs)
    });
    record(&mut results, "ablation: progressive >= direct fusion", true, || ablation_fusion(&runs));

    let hard_failures: Vec<&Outcome> = results.iter().filter(|r| !r.pass && !r.soft).collect();
    let soft_failures = results.iter().filter(|r| !r.pass && r.soft).count();
    println!(
        "acceptance: {} passed, {} hard failures, {} soft failures",
        results.iter().filter(|r| r.pass).count(),
        hard_failures.len(),
        soft_failures
    );
    for f in &hard_failures {
        eprintln!("hard failure: {}: {}", f.name, f.detail);
    }
    if hard_failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

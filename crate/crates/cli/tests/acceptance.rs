//! End-to-end acceptance checks. Prints one `PASS`/`FAIL` line per
//! criterion and exits nonzero if any fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use contra::dataset::{generate_synthetic, load_dataset, write_dataset, ContextWindow, FeatureDataset, GenConfig, Split};
use contra::eval::{neighbour_similarity_analysis, rank_queries, report, RetrievalReport, SimilarityMatrix};
use contra::losses::{loss_cml, loss_nei, loss_total, loss_uniformity, LossConfig, LossInputs, Negatives};
use contra::model::{load_checkpoint, save_checkpoint, Aggregation, ContextMode, Mode, Model, ModelConfig};
use contra::tensor::{Graph, Tensor};
use contra::trainer::{toy_gradcheck, train, LogRecord, ToyDims, TrainConfig, TrainOutput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = Result<String, String>;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const CLOSED_FORM_TOL: f64 = 1e-9;
const ORACLE_MATRICES: usize = 1000;
const IDENTITY_TOL: f64 = 1e-10;
const CONTEXT_GAIN: f64 = 10.0;
const EXPERIMENT_BUDGET: Duration = Duration::from_secs(15 * 60);
const NEI_MIN_SEEDS: usize = 4;
const MID_MIN_SEEDS: usize = 3;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let r = toy_gradcheck(0, ToyDims::Small).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let detail = format!(
        "max rel err {:.2e} over {} coords (worst {}[{}]), {:.1}s",
        r.max_rel_err,
        r.coords,
        r.worst_param,
        r.worst_index,
        elapsed.as_secs_f64()
    );
    check(r.max_rel_err < GRAD_TOL && elapsed < GRAD_BUDGET, detail.clone())?;
    Ok(detail)
}

fn constant(g: &mut Graph<f64>, rows: usize, cols: usize, data: Vec<f64>) -> contra::Var {
    g.constant(Tensor::matrix(rows, cols, data).unwrap())
}

fn loss_closed_forms() -> Outcome {
    let mut g = Graph::<f64>::new();
    let e = constant(&mut g, 2, 2, vec![1.0, 0.0, 1.0, 0.0]);
    let l = loss_cml(&mut g, e, e, 0.07, None).map_err(|e| e.to_string())?;
    let cml = g.item(l);
    check((cml - 3f64.ln()).abs() <= CLOSED_FORM_TOL, format!("cml {cml} vs ln 3"))?;

    let a = constant(&mut g, 1, 2, vec![1.0, 0.0]);
    let p = constant(&mut g, 1, 2, vec![0.6, 0.8]);
    let n = constant(&mut g, 1, 2, vec![0.6, -0.8]);
    let negs = Negatives { embs: n, owner: vec![0] };
    let (l, _) = loss_nei(&mut g, a, p, Some(&negs), 0.07).map_err(|e| e.to_string())?;
    let nei = g.item(l);
    check((nei - 2f64.ln()).abs() <= CLOSED_FORM_TOL, format!("nei {nei} vs ln 2"))?;

    let u = constant(&mut g, 2, 2, vec![1.0, 0.0, -1.0, 0.0]);
    let l = loss_uniformity(&mut g, u).map_err(|e| e.to_string())?;
    let uni = g.item(l);
    check((uni + 8.0).abs() <= CLOSED_FORM_TOL, format!("uniformity {uni} vs -8"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = LossConfig { lambda_nei: 12.0, lambda_uni: 2.0, ..LossConfig::default() };
    for trial in 0..20 {
        let mut g = Graph::<f64>::new();
        let mut unit = |g: &mut Graph<f64>, rows: usize| {
            let data: Vec<f64> = (0..rows * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v = constant(g, rows, 6, data);
            g.l2_normalize_rows(v).unwrap()
        };
        let clips = unit(&mut g, 4);
        let texts = unit(&mut g, 4);
        let nc = unit(&mut g, 3);
        let nt = unit(&mut g, 3);
        let inputs = LossInputs {
            clips,
            texts,
            clip_negatives: Some(Negatives { embs: nc, owner: vec![0, 2, 3] }),
            text_negatives: Some(Negatives { embs: nt, owner: vec![1, 1, 3] }),
            excluded: None,
        };
        let (total, bd) = loss_total(&mut g, &inputs, &cfg).map_err(|e| e.to_string())?;
        check(
            g.item(total) == bd.total && bd.total == bd.weighted_sum::<f64>(&cfg),
            format!("breakdown identity broken on trial {trial}: {bd:?}"),
        )?;
    }
    Ok(format!("cml {cml:.12}, nei {nei:.12}, uniformity {uni:.12}, breakdown identity exact on 20 batches"))
}

/// Rank by sorting the gallery on descending similarity, ties by index.
fn sort_rank(row: &[f64], truth: &[usize]) -> usize {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.iter().position(|g| truth.contains(g)).unwrap() + 1
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ties = 0;
    for trial in 0..ORACLE_MATRICES {
        let rows = rng.random_range(2..=50);
        let cols = rng.random_range(2..=50);
        let levels = if trial % 2 == 0 { 5 } else { 1 << 30 };
        let values: Vec<f64> = (0..rows * cols)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64 * 2.0 - 1.0)
            .collect();
        let truth: Vec<Vec<usize>> = (0..rows)
            .map(|_| {
                let k = rng.random_range(1..=3);
                (0..k).map(|_| rng.random_range(0..cols)).collect()
            })
            .collect();
        let sim = SimilarityMatrix::from_values(rows, cols, values.clone()).map_err(|e| e.to_string())?;
        let got = rank_queries(&sim, &truth).map_err(|e| e.to_string())?;
        let want: Vec<usize> = (0..rows).map(|q| sort_rank(&values[q * cols..(q + 1) * cols], &truth[q])).collect();
        check(got == want, format!("ranks differ on matrix {trial}"))?;
        ties += (0..rows)
            .filter(|&q| {
                let row = &values[q * cols..(q + 1) * cols];
                truth[q].iter().any(|&t| row.iter().enumerate().any(|(g, &s)| g != t && s == row[t]))
            })
            .count();

        let r = report(Some(&got), None).map_err(|e| e.to_string())?;
        let d = r.s2c.as_ref().unwrap();
        let mut sorted = want.clone();
        sorted.sort_unstable();
        let pct = |k: usize| 100.0 * want.iter().filter(|&&x| x <= k).count() as f64 / rows as f64;
        check(
            d.r1 == pct(1) && d.r5 == pct(5) && d.r10 == pct(10) && d.mr == sorted[(rows - 1) / 2],
            format!("report differs on matrix {trial}: {d:?}"),
        )?;
        check(r.rsum == pct(1) + pct(5) + pct(10), format!("rsum differs on matrix {trial}"))?;
    }
    Ok(format!("{ORACLE_MATRICES} matrices exact, {ties} queries with tied correct items"))
}

fn feature(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn window<'a>(feats: &[&'a [f32]]) -> ContextWindow<'a> {
    ContextWindow {
        centre_video: "probe",
        centre_index: 0,
        m: feats.len() / 2,
        features: feats.to_vec(),
        padded_mask: vec![false; feats.len()],
        source_indices: (0..feats.len()).collect(),
    }
}

fn encoder_identities() -> Outcome {
    let cfg = |m: usize| ModelConfig {
        m,
        d: 8,
        d_v: 6,
        d_w: 5,
        heads: 2,
        d_inner: 12,
        d_text_hidden: 10,
        pos_init_std: 0.1,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let feats: Vec<Vec<f32>> = (0..5).map(|_| feature(&mut rng, 6)).collect();
    let refs: Vec<&[f32]> = feats.iter().map(Vec::as_slice).collect();

    let m0: Model<f32> = Model::new(cfg(0), &mut ChaCha8Rng::seed_from_u64(1)).map_err(|e| e.to_string())?;
    let windows: Vec<ContextWindow<'_>> = refs.iter().map(|f| window(&[f])).collect();
    let mut g = Graph::new();
    let a = m0.embed_clip_windows(&mut g, &windows, &mut Mode::Eval).map_err(|e| e.to_string())?;
    let b = m0.embed_clip_single(&mut g, &refs, &mut Mode::Eval).map_err(|e| e.to_string())?;
    check(g.value(a).data() == g.value(b).data(), "m=0 window path differs from single-clip path")?;

    let mut bare: Model<f64> = Model::new(cfg(2), &mut ChaCha8Rng::seed_from_u64(2)).map_err(|e| e.to_string())?;
    let zero: Vec<String> = bare
        .params
        .iter()
        .map(|(_, n, _)| n.to_string())
        .filter(|n| n.starts_with("clip.g.") || (n.starts_with("clip.l") && n.ends_with(".v")))
        .collect();
    for n in &zero {
        bare.params.by_name_mut(n).unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let proj = bare.params.by_name("clip.proj").unwrap().clone();
    let pos = bare.params.by_name("clip.pos").unwrap().clone();
    let mut worst: f64 = 0.0;
    let w = window(&refs);
    let (out, _) = bare.embed_clip_context(&w, &mut Mode::Eval).map_err(|e| e.to_string())?;
    let mut want: Vec<f64> = (0..8)
        .map(|c| (0..6).map(|i| refs[2][i] as f64 * proj.get(i, c)).sum::<f64>() + pos.get(2, c))
        .collect();
    let norm = want.iter().map(|x| x * x).sum::<f64>().sqrt();
    want.iter_mut().for_each(|x| *x /= norm);
    for (x, y) in out.iter().zip(&want) {
        worst = worst.max((x - y).abs());
    }
    check(worst <= IDENTITY_TOL, format!("zeroed value/readout deviates by {worst:e}"))?;

    let mut tied: Model<f64> = Model::new(cfg(1), &mut ChaCha8Rng::seed_from_u64(3)).map_err(|e| e.to_string())?;
    let pos = tied.params.by_name_mut("clip.pos").unwrap();
    let row: Vec<f64> = pos.data()[..8].to_vec();
    pos.data_mut().chunks_mut(8).for_each(|r| r.copy_from_slice(&row));
    let three = [refs[0], refs[1], refs[2]];
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut perm_worst: f64 = 0.0;
    for p in perms {
        let centre = p[1];
        let others: Vec<usize> = (0..3).filter(|&i| i != centre).collect();
        let canon = window(&[three[others[0]], three[centre], three[others[1]]]);
        let permuted = window(&[three[p[0]], three[p[1]], three[p[2]]]);
        let a = tied.embed_clip_context(&canon, &mut Mode::Eval).map_err(|e| e.to_string())?.0;
        let b = tied.embed_clip_context(&permuted, &mut Mode::Eval).map_err(|e| e.to_string())?.0;
        for (x, y) in a.iter().zip(&b) {
            perm_worst = perm_worst.max((x - y).abs());
        }
    }
    check(perm_worst <= IDENTITY_TOL, format!("permutation changes the centre output by {perm_worst:e}"))?;
    Ok(format!("m=0 bitwise, zeroed branch within {worst:.1e}, 6 permutations within {perm_worst:.1e}"))
}

/// The four training runs per seed shared by the trend criteria.
struct SeedRuns {
    m0: TrainOutput<f32>,
    m1: TrainOutput<f32>,
    out_avg: TrainOutput<f32>,
    no_nei: TrainOutput<f32>,
}

struct Experiment {
    data: Vec<FeatureDataset>,
    runs: Vec<SeedRuns>,
    context_time: Duration,
    total_time: Duration,
}

fn run_experiment() -> Result<Experiment, String> {
    let start = Instant::now();
    let mut context_time = Duration::ZERO;
    let mut data = Vec::new();
    let mut runs = Vec::new();
    for seed in SEEDS {
        let ds = generate_synthetic(&GenConfig::default(), seed).map_err(|e| e.to_string())?;
        let base = TrainConfig { seed, eval_every: 0, ..TrainConfig::desk_scale() };
        let run = |overrides: &[(&str, Value)]| -> Result<(TrainOutput<f32>, Duration), String> {
            let o: Vec<(String, Value)> = overrides.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
            let cfg = base.with_overrides(&o).map_err(|e| e.to_string())?;
            let t = Instant::now();
            let out = train::<f32>(&ds, &cfg, &mut |_| Ok(())).map_err(|e| format!("seed {seed}: {e}"))?;
            Ok((out, t.elapsed()))
        };
        let (m0, t0) = run(&[("model.m", json!(0))])?;
        let (m1, t1) = run(&[])?;
        context_time += t0 + t1;
        let (out_avg, _) = run(&[("model.aggregation", json!(Aggregation::OutAvg))])?;
        let (no_nei, _) = run(&[("loss.terms", json!(["cml", "uni"]))])?;
        runs.push(SeedRuns { m0, m1, out_avg, no_nei });
        data.push(ds);
    }
    Ok(Experiment { data, runs, context_time, total_time: start.elapsed() })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn context_benefit(ex: &Experiment) -> Outcome {
    let m0: Vec<f64> = ex.runs.iter().map(|r| r.m0.final_report.rsum).collect();
    let m1: Vec<f64> = ex.runs.iter().map(|r| r.m1.final_report.rsum).collect();
    let gain = mean(&m1) - mean(&m0);
    let detail = format!(
        "mean RSum m=1 {:.1} vs m=0 {:.1} (gain {gain:+.1}, need >= {CONTEXT_GAIN}); per seed m0 {m0:?} m1 {m1:?}; {:.0}s",
        mean(&m1),
        mean(&m0),
        ex.context_time.as_secs_f64()
    );
    check(gain >= CONTEXT_GAIN && ex.context_time < EXPERIMENT_BUDGET, detail.clone())?;
    Ok(detail)
}

fn neighbour_direction(ex: &Experiment) -> Outcome {
    let mut hits = 0;
    let mut deltas = Vec::new();
    for (r, ds) in ex.runs.iter().zip(&ex.data) {
        let with = neighbour_similarity_analysis(&r.m1.model, &r.m0.model, ds, Split::Test).map_err(|e| e.to_string())?;
        let without =
            neighbour_similarity_analysis(&r.no_nei.model, &r.m0.model, ds, Split::Test).map_err(|e| e.to_string())?;
        if with.mean_delta < without.mean_delta {
            hits += 1;
        }
        deltas.push(format!("{:.3}/{:.3}", with.mean_delta, without.mean_delta));
    }
    let detail = format!("with < without in {hits}/5 seeds (need {NEI_MIN_SEEDS}); with/without {deltas:?}");
    check(hits >= NEI_MIN_SEEDS, detail.clone())?;
    Ok(detail)
}

fn aggregation_direction(ex: &Experiment) -> Outcome {
    let pairs: Vec<(f64, f64)> =
        ex.runs.iter().map(|r| (r.m1.final_report.rsum, r.out_avg.final_report.rsum)).collect();
    let hits = pairs.iter().filter(|(mid, avg)| mid >= avg).count();
    let detail = format!("mid >= out_avg in {hits}/5 seeds (need {MID_MIN_SEEDS}); mid/out_avg {pairs:?}");
    check(hits >= MID_MIN_SEEDS, detail.clone())?;
    Ok(detail)
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run_manifest.json" {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_contra"))
        .args(args)
        .env_remove("CONTRA_THREADS")
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
}

fn determinism(tmp: &Path) -> Outcome {
    let data = tmp.join("data");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    cli(&["generate", "--out", &s(&data), "--seed", "7"])?;
    let mut trees = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.join(name);
        cli(&[
            "train", "--data", &s(&data), "--out", &s(&out), "--preset", "desk", "--seed", "7",
            "--override", "total_iters=200", "--override", "warmup_iters=20", "--override", "eval_every=50",
        ])?;
        trees.push(files_under(&out));
    }
    let names: Vec<&str> = trees[0].iter().map(|(n, _)| n.as_str()).collect();
    for needed in ["train_log.jsonl", "final/params.bin", "best/params.bin"] {
        check(names.contains(&needed), format!("{needed} not written"))?;
    }
    check(trees[0] == trees[1], "outputs differ between identical runs")?;
    let bytes: usize = trees[0].iter().map(|(_, b)| b.len()).sum();
    Ok(format!("{} files ({bytes} bytes) identical across two runs", trees[0].len()))
}

fn format_fidelity(tmp: &Path, ex: &Experiment) -> Outcome {
    let (a, b) = (tmp.join("ds_a"), tmp.join("ds_b"));
    write_dataset(&ex.data[0], &a).map_err(|e| e.to_string())?;
    let back = load_dataset(&a).map_err(|e| e.to_string())?;
    check(back == ex.data[0], "dataset changed across a round trip")?;
    write_dataset(&back, &b).map_err(|e| e.to_string())?;
    check(files_under(&a) == files_under(&b), "rewritten dataset is not byte-identical")?;

    let mut checkpoints = 0;
    for r in &ex.runs {
        for model in [&r.m0.model, &r.m1.model, &r.out_avg.model, &r.no_nei.model] {
            let (p, q) = (tmp.join("ck_a"), tmp.join("ck_b"));
            save_checkpoint(model, &p).map_err(|e| e.to_string())?;
            let back: Model<f32> = load_checkpoint(&p).map_err(|e| e.to_string())?;
            let same = back.config == model.config
                && back.params.iter().zip(model.params.iter()).all(|(x, y)| x.1 == y.1 && x.2 == y.2);
            check(same, "checkpoint changed across a round trip")?;
            save_checkpoint(&back, &q).map_err(|e| e.to_string())?;
            check(files_under(&p) == files_under(&q), "rewritten checkpoint is not byte-identical")?;
            checkpoints += 1;
        }
    }
    let wide: Model<f64> = Model::new(
        ModelConfig { d: 8, d_v: 4, d_w: 4, d_inner: 8, d_text_hidden: 8, context_mode: ContextMode::Both, ..ModelConfig::default() },
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .map_err(|e| e.to_string())?;
    let p = tmp.join("ck_wide");
    save_checkpoint(&wide, &p).map_err(|e| e.to_string())?;
    let back: Model<f64> = load_checkpoint(&p).map_err(|e| e.to_string())?;
    check(back.params.iter().zip(wide.params.iter()).all(|(x, y)| x.2 == y.2), "f64 checkpoint changed")?;

    let mut reports: Vec<RetrievalReport> = Vec::new();
    for r in &ex.runs {
        for out in [&r.m0, &r.m1, &r.out_avg, &r.no_nei] {
            reports.push(out.final_report.clone());
            reports.extend(out.log.iter().filter_map(|rec| match rec {
                LogRecord::Eval { report, .. } => Some(report.clone()),
                LogRecord::Iter { .. } => None,
            }));
        }
    }
    for dir in ["a", "b"] {
        let text = fs::read_to_string(tmp.join(dir).join("train_log.jsonl")).map_err(|e| e.to_string())?;
        for line in text.lines() {
            let rec: LogRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
            if let LogRecord::Eval { report, .. } = rec {
                reports.push(report);
            }
        }
        let summary: Value = serde_json::from_slice(&fs::read(tmp.join(dir).join("report.json")).unwrap())
            .map_err(|e| e.to_string())?;
        for key in ["final", "best"] {
            reports.push(serde_json::from_value(summary[key].clone()).map_err(|e| e.to_string())?);
        }
    }
    for rep in &reports {
        let parsed: RetrievalReport = serde_json::from_str(&rep.to_json()).map_err(|e| e.to_string())?;
        check(&parsed == rep, "report JSON does not round-trip")?;
        parsed.check().map_err(|e| e.to_string())?;
        for d in [&parsed.s2c, &parsed.c2s].into_iter().flatten() {
            check(d.r1 <= d.r5 && d.r5 <= d.r10, format!("recalls out of order: {d:?}"))?;
        }
    }
    Ok(format!("dataset and {checkpoints} checkpoints bit-exact; {} reports parse and satisfy the identities", reports.len()))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 gradient correctness", gradient_correctness()),
        ("2 loss closed forms", loss_closed_forms()),
        ("3 metric oracle", metric_oracle()),
        ("4 encoder identities", encoder_identities()),
    ];
    match run_experiment() {
        Ok(ex) => {
            eprintln!("trend experiment: 20 runs in {:.0}s", ex.total_time.as_secs_f64());
            results.push(("5 context benefit", context_benefit(&ex)));
            results.push(("6 neighbour-loss direction", neighbour_direction(&ex)));
            results.push(("7 determinism", determinism(tmp.path())));
            results.push(("8 aggregation direction", aggregation_direction(&ex)));
            results.push(("9 format fidelity", format_fidelity(tmp.path(), &ex)));
        }
        Err(e) => {
            for name in ["5 context benefit", "6 neighbour-loss direction", "8 aggregation direction", "9 format fidelity"] {
                results.push((name, Err(format!("experiment failed: {e}"))));
            }
            results.push(("7 determinism", determinism(tmp.path())));
            results.sort_by_key(|(n, _)| n.split(' ').next().unwrap().parse::<u32>().unwrap());
        }
    }
    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS  AC{name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  AC{name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

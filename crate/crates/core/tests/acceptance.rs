//! Acceptance gate. Runs every criterion, prints one line each and exits
//! non-zero if any hard criterion fails.

mod common;

use std::process::Command;
use std::time::{Duration, Instant};

use finercut::analysis::{classify_mask, count_macs, eval_perplexity};
use finercut::calib::CalibrationSet;
use finercut::metrics::{angular_distance, euclidean_distance, js_divergence};
use finercut::model::{LayerMask, Model};
use finercut::search::{
    brute_force_oracle, greedy_prune, mask_objective, reference_logits, target_count, PruneConfig,
};
use finercut::tensor::log_softmax;
use finercut::toy::{
    gen_toy_model, gen_toy_tokens, toy_config, zero_attention_output, zero_head, ZeroSublayers,
};
use finercut::MetricKind;
use rand::SeedableRng;

enum Verdict {
    Pass(String),
    Fail(String),
    Warn(String),
}

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn toy(
    seed: u64,
    n_blocks: usize,
    d_model: usize,
    special: &ZeroSublayers,
) -> Result<Model, String> {
    gen_toy_model(seed, &toy_config(n_blocks, d_model, 64), special).map_err(err)
}

fn calib(seed: u64, count: usize, len: usize) -> Result<CalibrationSet, String> {
    CalibrationSet::new(gen_toy_tokens(seed, 64, count, len)).map_err(err)
}

fn metric_analytics() -> Check {
    let pi2 = angular_distance(&[1.0, 0.0], &[0.0, 1.0]).map_err(err)?;
    ensure(
        (pi2 - std::f64::consts::FRAC_PI_2).abs() <= 1e-9,
        format!("angular orthogonal = {pi2}"),
    )?;
    let zero = angular_distance(&[2.0, 0.0], &[1.0, 0.0]).map_err(err)?;
    ensure(zero.abs() <= 1e-9, format!("angular parallel = {zero}"))?;
    let five = euclidean_distance(&[3.0, 0.0], &[0.0, 4.0]).map_err(err)?;
    ensure((five - 5.0).abs() <= 1e-9, format!("euclidean = {five}"))?;
    let z = [0.3f32, -1.2, 2.5, 0.0];
    let same = js_divergence(&z, &z).map_err(err)?;
    ensure(same == 0.0, format!("js(z, z) = {same}"))?;
    let ln2 = js_divergence(&[10.0, -10.0], &[-10.0, 10.0]).map_err(err)?;
    let reference = common::js_ref(&[10.0, -10.0], &[-10.0, 10.0]);
    ensure(
        (ln2 - std::f64::consts::LN_2).abs() <= 1e-6,
        format!("js saturated = {ln2}"),
    )?;
    ensure(
        (ln2 - reference).abs() <= 1e-12,
        format!("js saturated {ln2} vs reference {reference}"),
    )?;
    Ok(format!("js([10,-10],[-10,10]) = {ln2:.12}"))
}

fn mask_identity() -> Check {
    let tokens = [3u32, 1, 4, 1, 5, 9, 2, 6];
    for seed in 0..10 {
        let mut model = toy(seed, 4, 16, &ZeroSublayers::default())?;
        let plain = model.forward(&tokens).map_err(err)?;
        let empty = model
            .forward_masked(&tokens, &LayerMask::empty(4))
            .map_err(err)?;
        ensure(
            plain.bit_eq(&empty),
            format!("seed {seed}: empty mask changed logits"),
        )?;

        let block = (seed % 4) as usize;
        zero_attention_output(&mut model, block).map_err(err)?;
        let before = model.forward(&tokens).map_err(err)?;
        let after = model
            .forward_masked(
                &tokens,
                &LayerMask::from_indices(4, &[2 * block]).map_err(err)?,
            )
            .map_err(err)?;
        ensure(
            before.bit_eq(&after),
            format!("seed {seed}: masking zero-Wo block {block} changed logits"),
        )?;
    }
    Ok("10 models bit-identical".into())
}

fn constructed_minimizer() -> Check {
    // L = 6: the window opens at block floor(6 * 0.4) = 2
    let special = ZeroSublayers {
        zero_attn_out_blocks: vec![],
        zero_ffn_down_blocks: vec![4],
    };
    let model = toy(11, 6, 32, &special)?;
    let calib = calib(12, 4, 8)?;
    let mut parts = Vec::new();
    for kind in MetricKind::ALL {
        let trace =
            greedy_prune(&model, &calib, &PruneConfig::new(1.0 / 12.0, kind)).map_err(err)?;
        let step = &trace.steps[0];
        ensure(
            step.layer == 9,
            format!("{kind}: step 1 chose {}", step.layer),
        )?;
        ensure(
            step.q_min <= 1e-12,
            format!("{kind}: q_min = {:e}", step.q_min),
        )?;
        parts.push(format!("{kind} q_min={:e}", step.q_min));
    }
    Ok(format!("selected sublayer 9; {}", parts.join(", ")))
}

fn oracle_equivalence() -> Check {
    for seed in 0..5 {
        let model = toy(100 + seed, 4, 16, &ZeroSublayers::default())?;
        let calib = calib(200 + seed, 5, 8)?;
        for kind in MetricKind::ALL {
            let config = PruneConfig::new(1.0 / 8.0, kind).full_window();
            let greedy = greedy_prune(&model, &calib, &config).map_err(err)?;
            let oracle = brute_force_oracle(&model, &calib, 1, kind, 1000, 0).map_err(err)?;
            ensure(
                greedy.final_mask == oracle.mask,
                format!(
                    "seed {seed} {kind}: greedy {:?} vs oracle {:?}",
                    greedy.final_mask.set_indices(),
                    oracle.mask.set_indices()
                ),
            )?;
        }
    }
    let model = toy(300, 6, 16, &ZeroSublayers::default())?;
    let calib = calib(301, 5, 8)?;
    let kind = MetricKind::JensenShannon;
    let greedy = greedy_prune(&model, &calib, &PruneConfig::new(2.0 / 12.0, kind)).map_err(err)?;
    let greedy_q = greedy.steps.last().map(|s| s.q_min).unwrap_or(f64::NAN);
    let oracle = brute_force_oracle(&model, &calib, 2, kind, 1000, 0).map_err(err)?;
    ensure(
        greedy_q >= oracle.objective,
        format!(
            "k=2 greedy {greedy_q:e} below oracle {:e}",
            oracle.objective
        ),
    )?;
    Ok(format!(
        "k=1 exact on 5 models x 3 metrics; k=2 greedy {:?} {greedy_q:.6e} >= oracle {:?} {:.6e}",
        greedy.final_mask.set_indices(),
        oracle.mask.set_indices(),
        oracle.objective
    ))
}

fn target_count_fixtures() -> Check {
    let t80 = target_count(80, 0.25).map_err(err)?;
    let t32 = target_count(32, 0.25).map_err(err)?;
    ensure(
        t80 == 40 && t32 == 16,
        format!("target counts {t80}, {t32}"),
    )?;
    let n80 = common::mask_from_notation(80, common::LLAMA3_70B_25).popcount();
    let n32 = common::mask_from_notation(32, common::LLAMA3_8B_25).popcount();
    ensure(
        n80 == t80 && n32 == t32,
        format!("fixture entry counts {n80}, {n32}"),
    )?;
    Ok("40 of 160 and 16 of 64".into())
}

fn classification_fixture() -> Check {
    let r = classify_mask(&common::mask_from_notation(80, common::LLAMA3_70B_25));
    let got = (r.attention_pruned, r.ffn_pruned, r.blocks_pruned);
    ensure(got == (34, 6, 5), format!("attention/ffn/blocks = {got:?}"))?;
    Ok(format!("attention 34, ffn 6, blocks 5 ({})", r.notation()))
}

/// Soft check: the flag says whether the ratio is inside tolerance.
fn mac_ratio() -> Result<(bool, String), String> {
    let c = common::llama3_70b_config();
    let mask = common::mask_from_notation(80, common::LLAMA3_70B_25);
    let full = count_macs(&c, &LayerMask::empty(80), 8192).map_err(err)?;
    let pruned = count_macs(&c, &mask, 8192).map_err(err)?;
    let ratio = pruned as f64 / full as f64;
    let msg = format!(
        "ratio {ratio:.4} (full {:.1} GMACs, pruned {:.1} GMACs; target 0.800 +/- 0.02)",
        full as f64 / 1e9,
        pruned as f64 / 1e9
    );
    Ok(((ratio - 0.8).abs() <= 0.02, msg))
}

fn perplexity_sanity() -> Check {
    let mut model = toy(21, 3, 16, &ZeroSublayers::default())?;
    let corpus = calib(22, 6, 12)?;
    let empty = LayerMask::empty(3);

    let masked = eval_perplexity(&model, &empty, &corpus).map_err(err)?;
    let mut nll = 0.0f64;
    let mut count = 0usize;
    for seq in corpus.sequences() {
        let logits = model.forward(seq).map_err(err)?;
        for i in 0..seq.len() - 1 {
            let row: Vec<f64> = logits.position(i).iter().map(|&v| v as f64).collect();
            nll -= log_softmax(&row).map_err(err)?[seq[i + 1] as usize];
            count += 1;
        }
    }
    let unmasked = (nll / count as f64).exp();
    ensure(
        masked.perplexity == unmasked,
        format!("empty mask {} vs unmasked {unmasked}", masked.perplexity),
    )?;

    zero_head(&mut model).map_err(err)?;
    let uniform = eval_perplexity(&model, &empty, &corpus)
        .map_err(err)?
        .perplexity;
    let rel = (uniform - 64.0).abs() / 64.0;
    ensure(rel <= 1e-3, format!("uniform perplexity {uniform}"))?;
    Ok(format!(
        "uniform {uniform:.6} for |V| = 64; empty mask exact"
    ))
}

fn determinism_under_parallelism() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let bin = env!("CARGO_BIN_EXE_finercut");
    let path = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let run = |threads: &str, args: &[&str]| -> Result<(), String> {
        let o = Command::new(bin)
            .args(args)
            .env("FINERCUT_THREADS", threads)
            .output()
            .map_err(err)?;
        ensure(
            o.status.success(),
            format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr).trim()),
        )
    };
    let (model, tokens) = (path("model.lpck"), path("calib.txt"));
    run(
        "1",
        &[
            "gen-toy",
            "--out",
            &model,
            "--seed",
            "9",
            "--blocks",
            "6",
            "--d-model",
            "32",
        ],
    )?;
    run(
        "1",
        &[
            "gen-tokens",
            "--out",
            &tokens,
            "--seed",
            "10",
            "--vocab",
            "64",
            "--count",
            "10",
            "--len",
            "16",
        ],
    )?;
    let mut traces = Vec::new();
    for threads in ["1", "4"] {
        let out = path(&format!("trace-{threads}.json"));
        run(
            threads,
            &[
                "prune", "--model", &model, "--calib", &tokens, "--ratio", "0.25", "--metric",
                "js", "--out", &out,
            ],
        )?;
        traces.push(std::fs::read(&out).map_err(err)?);
    }
    ensure(
        traces[0] == traces[1],
        "traces differ between 1 and 4 threads",
    )?;
    Ok(format!(
        "{} byte trace identical for 1 and 4 threads",
        traces[0].len()
    ))
}

fn end_to_end() -> Check {
    use rand::seq::index::sample;

    let model = toy(42, 8, 32, &ZeroSublayers::default())?;
    let calib = calib(43, 10, 16)?;
    let kind = MetricKind::JensenShannon;
    let trace = greedy_prune(&model, &calib, &PruneConfig::new(0.25, kind)).map_err(err)?;
    ensure(
        trace.final_mask.popcount() == 4,
        format!("pruned {}", trace.final_mask.popcount()),
    )?;
    let original = reference_logits(&model, &calib).map_err(err)?;
    let greedy_q =
        mask_objective(&model, &trace.final_mask, &calib, kind, &original).map_err(err)?;

    // window: blocks floor(8 * 0.4) = 3 onward, flat indices 6..16
    let window: Vec<usize> = (6..16).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(44);
    let mut total = 0.0;
    for _ in 0..20 {
        let picks: Vec<usize> = sample(&mut rng, window.len(), 4)
            .into_iter()
            .map(|i| window[i])
            .collect();
        let mask = LayerMask::from_indices(8, &picks).map_err(err)?;
        total += mask_objective(&model, &mask, &calib, kind, &original).map_err(err)?;
    }
    let random_mean = total / 20.0;
    ensure(
        greedy_q <= random_mean,
        format!("greedy {greedy_q:.6e} above random mean {random_mean:.6e}"),
    )?;
    Ok(format!(
        "greedy {} objective {greedy_q:.6e} <= random mean {random_mean:.6e}",
        classify_mask(&trace.final_mask).notation()
    ))
}

fn timed<F: FnOnce() -> Check>(limit: Duration, f: F) -> Verdict {
    let start = Instant::now();
    let result = f();
    let elapsed = start.elapsed();
    match result {
        Ok(msg) if elapsed <= limit => Verdict::Pass(format!("{msg} [{:.2?}]", elapsed)),
        Ok(msg) => Verdict::Fail(format!(
            "{msg} but took {:.2?} (limit {:?})",
            elapsed, limit
        )),
        Err(msg) => Verdict::Fail(format!("{msg} [{:.2?}]", elapsed)),
    }
}

fn main() {
    let secs = Duration::from_secs;
    let criteria: Vec<(&str, Verdict)> = vec![
        ("metric analytics", timed(secs(1), metric_analytics)),
        ("mask identity", timed(secs(10), mask_identity)),
        (
            "constructed minimizer",
            timed(secs(30), constructed_minimizer),
        ),
        ("oracle equivalence", timed(secs(120), oracle_equivalence)),
        (
            "target count fixtures",
            timed(secs(1), target_count_fixtures),
        ),
        (
            "classification fixture",
            timed(secs(1), classification_fixture),
        ),
        (
            "mac ratio",
            match mac_ratio() {
                Ok((true, msg)) => Verdict::Pass(msg),
                Ok((false, msg)) => Verdict::Warn(msg),
                Err(msg) => Verdict::Fail(msg),
            },
        ),
        ("perplexity sanity", timed(secs(10), perplexity_sanity)),
        (
            "determinism under parallelism",
            timed(secs(120), determinism_under_parallelism),
        ),
        ("end-to-end desk run", timed(secs(300), end_to_end)),
    ];

    let mut failed = 0;
    for (i, (name, verdict)) in criteria.iter().enumerate() {
        let (tag, msg) = match verdict {
            Verdict::Pass(m) => ("PASS", m),
            Verdict::Warn(m) => ("WARN", m),
            Verdict::Fail(m) => {
                failed += 1;
                ("FAIL", m)
            }
        };
        println!("{tag} {:>2} {name}: {msg}", i + 1);
    }
    println!(
        "acceptance: {} of {} criteria failed",
        failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

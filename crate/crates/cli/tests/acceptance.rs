//! Acceptance suite. Every criterion prints one PASS/FAIL line with its
//! measured runtime against its budget; the process exits non-zero if any
//! criterion fails. Runs without the libtest harness so the lines are always shown.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use ssfo_cli::commands::{self, sweep_point};
use ssfo_cli::{checkpoint, Config};
use ssfo_core::displacement::{measure_displacement, measured_hidden_step, DisplacementReport};
use ssfo_core::metrics::{average_ranks, csl, lcs_len, pearson, rouge_l_f1, rouge_n_f1, span_em, spearman, Correlation};
use ssfo_core::model::argmax;
use ssfo_core::objective::{self, dpo_loss, loss, LossConfig, PairLogps};
use ssfo_core::selfsup::{build_prompt_query_only, build_trap_suite, generate_pairs, repeat_tasks, TrapSuite};
use ssfo_core::trainer::{align, pretrain_mle, Alignment};
use ssfo_core::{rng, PreferencePair, ToyLM, TokenId, TrapProbe, Trainable, Vocabulary};

/// Pearson r between ΔP(z_c) and ΔP(z_p) under the default pipeline, recorded
/// from the first run.
const DISPLACEMENT_R: f64 = -0.4682148808910757;
/// Retained fraction of generated pairs under the default pipeline.
const RETAINED_FRACTION: f64 = 0.92;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn timed(id: usize, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = f();
    let elapsed = start.elapsed();
    let pass = outcome.pass && elapsed < budget;
    println!(
        "{} criterion {id} ({name}): {} [{:.2} s / {} s budget]",
        if pass { "PASS" } else { "FAIL" },
        outcome.detail,
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    pass
}

fn vocab_of_size(v: usize) -> Vocabulary {
    Vocabulary::with_specials((0..v - 4).map(|i| format!("t{i}"))).unwrap()
}

fn payload(vocab: &Vocabulary) -> Vec<TokenId> {
    (0..vocab.len() as TokenId).filter(|&t| !vocab.is_special(t)).collect()
}

fn random_model<R: Rng>(r: &mut R) -> ToyLM {
    let v = r.random_range(6..=16);
    let d = r.random_range(2..=8);
    let mut m = ToyLM::random(vocab_of_size(v), d, r).unwrap();
    for b in m.bias.iter_mut() {
        *b = r.random_range(-0.5..0.5);
    }
    m
}

fn random_pair<R: Rng>(vocab: &Vocabulary, r: &mut R) -> PreferencePair {
    let words = payload(vocab);
    let s = vocab.specials();
    let mut responses = words.clone();
    responses.extend([s.eos, s.idk, s.sep]);
    let mut draw = |pool: &[TokenId], max: usize| -> Vec<TokenId> {
        (0..r.random_range(1..=max)).map(|_| pool[r.random_range(0..pool.len())]).collect()
    };
    PreferencePair {
        query: draw(&words, 4),
        context: draw(&words, 4),
        chosen: draw(&responses, 3),
        rejected: draw(&responses, 3),
        chosen_seed: 0,
        rejected_seed: 0,
    }
}

fn criterion_1() -> Outcome {
    let mut r = rng::seeded(101);
    let mut worst_dpo = 0.0f64;
    let mut worst_ln2 = 0.0f64;
    for _ in 0..1000 {
        let mut lp = || r.random_range(-40.0..0.0);
        let lps = PairLogps::new(lp(), lp(), lp(), lp()).unwrap();
        let beta = r.random_range(0.01..2.0);
        let lambda = r.random_range(1.0..3.0);
        let cfg = LossConfig::new(beta, 1.0).unwrap();
        worst_dpo = worst_dpo.max((loss(&lps, &cfg) - dpo_loss(&lps, beta)).abs());
        let at_ref = PairLogps::new(lps.policy_chosen, lps.policy_rejected, lps.policy_chosen, lps.policy_rejected).unwrap();
        let cfg = LossConfig::new(beta, lambda).unwrap();
        worst_ln2 = worst_ln2.max((loss(&at_ref, &cfg) - std::f64::consts::LN_2).abs());
    }
    Outcome::new(
        worst_dpo <= 1e-12 && worst_ln2 <= 1e-12,
        format!("max |L(λ=1) − L_dpo| = {worst_dpo:.1e}, max |L(ref) − ln 2| = {worst_ln2:.1e}"),
    )
}

fn pair_loss(m: &ToyLM, reference: &ToyLM, pair: &PreferencePair, cfg: &LossConfig) -> f64 {
    loss(&objective::pair_logps(m, reference, pair).unwrap(), cfg)
}

fn criterion_2() -> Outcome {
    const STEP: f64 = 1e-6;
    let mut checked = 0usize;
    let mut failures = 0usize;
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let mut r = rng::seeded(200 + seed);
        let model = random_model(&mut r);
        let mut reference = model.clone();
        for block in reference.param_blocks_mut() {
            block.iter_mut().for_each(|x| *x += r.random_range(-0.3..0.3));
        }
        let pair = random_pair(&model.vocab, &mut r);
        for lambda in [1.0, 1.3, 1.5] {
            let cfg = LossConfig::new(0.5, lambda).unwrap();
            for mask in Trainable::ALL {
                let analytic = objective::pair_gradient(&model, &reference, &pair, &cfg, mask).unwrap().total();
                for (b, block) in analytic.blocks().iter().enumerate() {
                    let trainable = if b == 3 { mask.unembedding() } else { mask.body() };
                    for (i, &a) in block.iter().enumerate() {
                        let numeric = if trainable {
                            let mut plus = model.clone();
                            plus.param_blocks_mut()[b][i] += STEP;
                            let mut minus = model.clone();
                            minus.param_blocks_mut()[b][i] -= STEP;
                            (pair_loss(&plus, &reference, &pair, &cfg) - pair_loss(&minus, &reference, &pair, &cfg))
                                / (2.0 * STEP)
                        } else {
                            0.0
                        };
                        let err = (a - numeric).abs();
                        let tol = (1e-5 * a.abs().max(numeric.abs())).max(1e-9);
                        worst = worst.max(err / tol);
                        failures += usize::from(err > tol);
                        checked += 1;
                    }
                }
            }
        }
    }
    Outcome::new(failures == 0, format!("{checked} coordinates, {failures} outside tolerance, worst error/tolerance {worst:.3}"))
}

fn criterion_3() -> Outcome {
    let mut worst = 0.0f64;
    let mut compared = 0usize;
    let mut mismatched_zeros = 0usize;
    for seed in 0..20 {
        let mut r = rng::seeded(300 + seed);
        let model = random_model(&mut r);
        let pair = random_pair(&model.vocab, &mut r);
        // Policy = reference: c′₁ = β/2 whatever λ is, so only the explicit λ factor differs.
        let component = |lambda: f64| {
            objective::pair_gradient(&model, &model, &pair, &LossConfig::new(0.1, lambda).unwrap(), Trainable::All)
                .unwrap()
                .rejected_component()
                .flatten()
        };
        let base = component(1.0);
        for lambda in [1.1, 1.3, 1.5] {
            for (x, y) in component(lambda).iter().zip(&base) {
                if *y == 0.0 {
                    mismatched_zeros += usize::from(*x != 0.0);
                } else {
                    worst = worst.max((x / y - lambda).abs());
                    compared += 1;
                }
            }
        }
    }
    Outcome::new(
        worst <= 1e-12 && mismatched_zeros == 0,
        format!("{compared} coordinates, max |ratio − λ| = {worst:.1e}"),
    )
}

fn criterion_4() -> Outcome {
    let cfg = LossConfig::new(0.1, 1.0).unwrap();
    let eta = 1.0;
    let mut r = rng::seeded(404);
    let mut worst = 0.0f64;
    let mut rank_failures = 0;
    for _ in 0..100 {
        let model = random_model(&mut r);
        let words = payload(&model.vocab);
        let z_c = words[r.random_range(0..words.len())];
        let z_p = loop {
            let z = words[r.random_range(0..words.len())];
            if z != z_c {
                break z;
            }
        };
        let prompt = random_pair(&model.vocab, &mut r).prompt(&model.vocab);
        let probe = TrapProbe::new(&model.vocab, prompt, z_c, z_p).unwrap();
        let measured = measured_hidden_step(&model, &probe, &cfg, eta).unwrap().delta();
        // Oracle: plain loops over the unembedding rows.
        let d = model.hidden_dim();
        let inner: Vec<f64> = (0..model.vocab_size())
            .map(|z| {
                (0..d)
                    .map(|k| model.unembed.get(z, k) * (model.unembed.get(z_c as usize, k) - model.unembed.get(z_p as usize, k)))
                    .sum()
            })
            .collect();
        for (m, ip) in measured.iter().zip(&inner) {
            let expected = eta * 0.05 * ip;
            worst = worst.max((m - expected).abs() / expected.abs().max(1e-9));
        }
        let rho = spearman(&inner, &measured).unwrap();
        let same_ranks = average_ranks(&inner) == average_ranks(&measured);
        if !same_ranks || !matches!(rho, Correlation::Defined(v) if (v - 1.0).abs() <= 1e-12) {
            rank_failures += 1;
        }
    }
    Outcome::new(
        worst <= 1e-6 && rank_failures == 0,
        format!("η = {eta}: max relative error {worst:.1e}, probes with Spearman ≠ 1: {rank_failures}"),
    )
}

struct Trained {
    suite: TrapSuite,
    model: ToyLM,
}

fn criterion_5(cfg: &Config, out: &mut Option<Trained>) -> Outcome {
    let suite = build_trap_suite(&cfg.suite()).unwrap();
    let init = ToyLM::random(suite.vocab().clone(), cfg.hidden_dim, &mut rng::stream(cfg.seed, "init")).unwrap();
    let (model, log) = pretrain_mle(&init, &suite.corpus, &cfg.pretrain()).unwrap();
    let memorized = suite
        .tasks
        .iter()
        .zip(&suite.probes)
        .filter(|(t, p)| argmax(&model.logits(&build_prompt_query_only(suite.vocab(), t)).unwrap()) == p.z_p)
        .count();
    let n = suite.probes.len();
    let detail = format!(
        "{memorized}/{n} proverbs complete to their memorized ending without context (NLL {:.3} → {:.3})",
        log.nll[0],
        log.nll.last().unwrap()
    );
    let pass = memorized as f64 >= 0.95 * n as f64;
    *out = Some(Trained { suite, model });
    Outcome::new(pass, detail)
}

struct Aligned {
    pairs: Vec<PreferencePair>,
    report: DisplacementReport,
    retained_fraction: f64,
}

fn criterion_6(cfg: &Config, trained: &Trained, out: &mut Option<Aligned>) -> Outcome {
    let tasks = repeat_tasks(&trained.suite.tasks, cfg.n_tasks);
    let generation = generate_pairs(&trained.model, &tasks, &cfg.sampling()).unwrap();
    let alignment: Alignment = align(&trained.model, &generation.pairs, &cfg.align().unwrap()).unwrap();
    let margins = alignment.log.margins();
    let increasing = margins.windows(2).all(|w| w[1] > w[0]);
    let report = measure_displacement(&trained.model, &alignment.policy, &trained.suite.probes).unwrap();
    let r = report.pearson_r.value();
    let pass = increasing && report.mean_dp_zc > 0.0 && report.mean_dp_zp < 0.0 && r.is_some_and(|r| r < 0.0);
    let detail = format!(
        "margin strictly increasing: {increasing}; mean ΔP(z_c) = {:+.4}, mean ΔP(z_p) = {:+.4}, r = {} ({} pairs)",
        report.mean_dp_zc,
        report.mean_dp_zp,
        report.pearson_r,
        generation.retained
    );
    *out = Some(Aligned { retained_fraction: generation.retained_fraction(), pairs: generation.pairs, report });
    Outcome::new(pass, detail)
}

fn criterion_7(cfg: &Config, trained: &Trained, aligned: &Aligned) -> Outcome {
    let lambdas = [1.0, 1.1, 1.2, 1.3, 1.4, 1.5];
    let ems: Vec<f64> = lambdas
        .iter()
        .map(|&l| {
            sweep_point(cfg, l, &trained.model, &aligned.pairs, &trained.suite.tasks, &trained.suite.probes)
                .unwrap()
                .1
                .span_em
        })
        .collect();
    let trend = pearson(&lambdas, &ems).unwrap();
    let pass = trend.value().is_some_and(|r| r >= 0.0) && ems[5] >= ems[0];
    let mut listing = String::new();
    for (l, em) in lambdas.iter().zip(&ems) {
        let _ = write!(listing, " {l:.1}:{em:.3}");
    }
    Outcome::new(pass, format!("span EM by λ [{} ], r(λ, EM) = {trend}", listing))
}

fn criterion_8() -> Outcome {
    let mut r = rng::seeded(808);
    let mut lcs_mismatches = 0;
    for _ in 0..1000 {
        let a: Vec<u8> = (0..r.random_range(0..=8)).map(|_| r.random_range(0..3)).collect();
        let b: Vec<u8> = (0..r.random_range(0..=8)).map(|_| r.random_range(0..3)).collect();
        // Brute force: longest subsequence of `a` (over all 2^|a| masks) that is a subsequence of `b`.
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let sub: Vec<u8> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
            let mut it = b.iter();
            if sub.iter().all(|x| it.any(|y| y == x)) {
                best = best.max(sub.len());
            }
        }
        lcs_mismatches += usize::from(lcs_len(&a, &b) != best);
    }
    let hand = [
        span_em("The capital is Paris.", &["paris"]) == 1,
        span_em("Ferraro", &["Geraldine Ferraro"]) == 0,
        span_em("It was Geraldine Ferraro!", &["Geraldine Ferraro"]) == 1,
        span_em("anything", &[""]) == 0,
        rouge_n_f1("the cat sat", &["the cat sat down"], 1).unwrap() == 2.0 * 0.75 / 1.75,
        rouge_n_f1("the cat", &["the cat sat"], 2).unwrap() == 2.0 * 0.5 / 1.5,
        rouge_l_f1("a b c d", &["a c d"]) == 2.0 * 0.75 / 1.75,
        rouge_l_f1("", &["a"]) == 0.0,
    ];
    let table: [(&[bool], usize); 8] = [
        (&[false, false, false], 0),
        (&[false, false, true], 0),
        (&[false, true, false], 0),
        (&[false, true, true], 0),
        (&[true, false, false], 1),
        (&[true, false, true], 1),
        (&[true, true, false], 2),
        (&[true, true, true], 3),
    ];
    let csl_ok = table.iter().all(|(v, want)| csl(v).unwrap() == *want);
    let hand_ok = hand.iter().all(|&h| h);
    Outcome::new(
        lcs_mismatches == 0 && hand_ok && csl_ok,
        format!("LCS mismatches {lcs_mismatches}/1000, hand examples pass: {hand_ok}, CSL table exact: {csl_ok}"),
    )
}

fn run_pipeline(cfg: &Config, root: &Path) {
    let (suite, model, pairs, aligned, probe) =
        (root.join("suite"), root.join("pretrain"), root.join("pairs"), root.join("align"), root.join("probe"));
    commands::cmd_suite(cfg, &suite).unwrap();
    commands::cmd_pretrain(cfg, &suite, &model).unwrap();
    commands::cmd_genpairs(cfg, &suite, &model, &pairs).unwrap();
    commands::cmd_align(cfg, &model, &pairs, &aligned).unwrap();
    commands::cmd_probe(cfg, &suite, &model, &aligned, &probe).unwrap();
}

/// Every file under `root` except timing records, as (relative path, bytes).
fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for stage in fs::read_dir(root).unwrap() {
        let stage = stage.unwrap().path();
        for file in fs::read_dir(&stage).unwrap() {
            let file = file.unwrap().path();
            let name = file.file_name().unwrap().to_string_lossy().into_owned();
            if name == ssfo_cli::manifest::TIMING_FILE {
                continue;
            }
            let rel = format!("{}/{name}", stage.file_name().unwrap().to_string_lossy());
            out.push((rel, fs::read(&file).unwrap()));
        }
    }
    out.sort();
    out
}

fn criterion_9(cfg: &Config) -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(cfg, a.path());
    run_pipeline(cfg, b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let differing: Vec<&str> =
        ta.iter().zip(&tb).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    let same_files = ta.len() == tb.len() && differing.is_empty();

    let aligned = a.path().join("align");
    let model = checkpoint::load(&aligned, "align").unwrap();
    let copy = tempfile::tempdir().unwrap();
    checkpoint::save(&model, copy.path()).unwrap();
    let reloaded = checkpoint::load(copy.path(), "align").unwrap();
    let bits_equal = model
        .param_blocks()
        .iter()
        .zip(reloaded.param_blocks())
        .all(|(x, y)| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    let payload_equal = fs::read(aligned.join(checkpoint::PAYLOAD_FILE)).unwrap()
        == fs::read(copy.path().join(checkpoint::PAYLOAD_FILE)).unwrap();
    Outcome::new(
        same_files && bits_equal && payload_equal,
        format!(
            "{} files compared across two runs, differing: {:?}; checkpoint round trip bit-exact: {}",
            ta.len(),
            differing,
            bits_equal && payload_equal
        ),
    )
}

fn main() {
    let cfg = Config::default();
    let secs = Duration::from_secs;
    let mut results = vec![timed(1, "loss identities", secs(1), criterion_1)];
    results.push(timed(2, "gradient correctness", secs(30), criterion_2));
    results.push(timed(3, "λ-scaling of suppression", secs(1), criterion_3));
    results.push(timed(4, "theory-mode logit change", secs(10), criterion_4));
    let mut trained = None;
    results.push(timed(5, "planted memorization", secs(30), || criterion_5(&cfg, &mut trained)));
    let trained = trained.expect("pretrained model");
    let mut aligned = None;
    results.push(timed(6, "displacement", secs(60), || criterion_6(&cfg, &trained, &mut aligned)));
    let aligned = aligned.expect("aligned model");
    results.push(timed(7, "λ-sweep direction", secs(300), || criterion_7(&cfg, &trained, &aligned)));
    results.push(timed(8, "metric oracles", secs(10), criterion_8));
    results.push(timed(9, "determinism and persistence", secs(120), || criterion_9(&cfg)));

    println!("regression: displacement r = {:?}, retained fraction = {:?}", aligned.report.pearson_r, aligned.retained_fraction);
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, &p)| !p).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
    let r = aligned.report.pearson_r.value().expect("defined correlation");
    assert!((r - DISPLACEMENT_R).abs() < 1e-9, "displacement r drifted: {r}");
    assert!((aligned.retained_fraction - RETAINED_FRACTION).abs() < 1e-12);
}

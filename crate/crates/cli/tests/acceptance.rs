//! One PASS/FAIL line per acceptance criterion, each under its runtime budget.

#[path = "../../core/tests/common/mod.rs"]
mod common;
mod support;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use bioserc::attention::{attend, attention_weights, masked_attention, multi_head_in, AttentionParams, AttentionVars};
use bioserc::bios::render_bio_prompt;
use bioserc::corpus::{load_dataset, synthetic, LabelVocabulary, Split};
use bioserc::encoder::pool_in;
use bioserc::eval::weighted_f1;
use bioserc::gradcheck::{check, check_model, random_projection};
use bioserc::instruct::*;
use bioserc::model::{attention_speaker_in, baseline_speaker_in, classify_in, mlp_speaker_in};
use bioserc::train::{score, train};
use bioserc::{ErcModel, Matrix, ModelConfig, RelationKind, RelationMask, ToyEncoder, ToyEncoderConfig, Variant};
use common::oracles::{all_sequences, brute_force_weighted_f1, mask_violations};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{bioserc, run, stderr, stdout, toy_config};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn masks(seq: &[usize]) -> [RelationMask; 3] {
    let names: Vec<String> = seq.iter().map(|s| format!("S{s}")).collect();
    [RelationKind::Global, RelationKind::Intra, RelationKind::Inter].map(|k| RelationMask::build(k, &names).unwrap())
}

fn mask_oracle() -> Check {
    let seqs = all_sequences(3, 6);
    let full = seqs.iter().filter(|s| s.len() == 6).count();
    ensure!(full == 729, "{full} length-6 sequences");
    for seq in &seqs {
        let [g, a, r] = masks(seq);
        let v = mask_violations(seq, g.allowed(), a.allowed(), r.allowed());
        ensure!(v.is_empty(), "{seq:?}: {v:?}");
        for m in [&g, &a, &r] {
            ensure!(m.is_symmetric(), "{seq:?} asymmetric");
            for i in 0..seq.len() {
                for k in 0..seq.len() {
                    let e = m.entry(i, k);
                    ensure!(e == 0.0 || e == f64::NEG_INFINITY, "{seq:?} entry {e}");
                }
            }
        }
    }
    Ok(format!("{} sequences (729 of length 6), no violations", seqs.len()))
}

fn attention_math() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    let mut fully_masked = 0;
    for _ in 0..2000 {
        let n = rng.random_range(1..=6usize);
        let d = rng.random_range(1..=4usize);
        let seq: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let (q, k, v) = (rand_matrix(&mut rng, n, d), rand_matrix(&mut rng, n, d), rand_matrix(&mut rng, n, d));
        for m in masks(&seq) {
            let w = ok(attention_weights(&q, &k, Some(m.allowed())))?;
            let out = ok(masked_attention(&q, &k, &v, &m))?;
            for i in 0..n {
                let row = w.row(i);
                let sum: f64 = row.iter().sum();
                if (0..n).any(|j| m.is_allowed(i, j)) {
                    worst = worst.max((sum - 1.0).abs());
                    ensure!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
                } else {
                    fully_masked += 1;
                    ensure!(sum == 0.0, "fully masked row sums to {sum}");
                    ensure!(out.row(i).iter().all(|x| *x == 0.0), "fully masked row is not zero");
                }
                for j in 0..n {
                    ensure!(m.is_allowed(i, j) || row[j] == 0.0, "masked weight {}", row[j]);
                }
            }
        }
        let diag = ok(masked_attention(&q, &k, &v, &RelationMask::diagonal(n)))?;
        ensure!(diag == v, "self-only mask changed v");
    }
    Ok(format!("2000 cases, max |row sum - 1| = {worst:.1e}, {fully_masked} fully masked rows"))
}

const EPS: f64 = 1e-4;

fn gradient_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut m = |r, c| rand_matrix(&mut rng, r, c);
    let mut layer_worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, errs: Vec<f64>| {
        layer_worst.push((name, errs.into_iter().fold(0.0, f64::max)));
    };

    record("pool_utterance", ok(check(&[m(3, 4), m(4, 4)], EPS, |g, v| {
        let p = pool_in(g, v[0], v[1])?;
        random_projection(g, p, 1)
    }))?);
    let speakers = ["A", "B", "A", "C", "B"];
    for (kind, name) in [
        (RelationKind::Global, "masked_attention[global]"),
        (RelationKind::Intra, "masked_attention[intra]"),
        (RelationKind::Inter, "masked_attention[inter]"),
    ] {
        let mask = RelationMask::build(kind, &speakers).unwrap();
        record(name, ok(check(&[m(5, 3), m(5, 3), m(5, 4)], EPS, |g, v| {
            let out = attend(g, v[0], v[1], v[2], Some(mask.allowed()))?;
            random_projection(g, out, 2)
        }))?);
    }
    let p = AttentionParams::<f64>::init(4, 2, 2, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let mut inputs = vec![m(4, 4)];
    for h in &p.heads {
        inputs.extend([h.w_q.clone(), h.w_k.clone(), h.w_v.clone()]);
    }
    inputs.push(p.w_o.clone());
    let mask = RelationMask::build(RelationKind::Inter, &["A", "B", "A", "B"]).unwrap();
    record("multi_head", ok(check(&inputs, EPS, |g, v| {
        let vars = AttentionVars {
            heads: vec![(v[1], v[2], v[3]), (v[4], v[5], v[6])],
            w_o: v[7],
        };
        let out = multi_head_in(g, v[0], Some(mask.allowed()), &vars)?;
        random_projection(g, out, 3)
    }))?);
    record("speaker[baseline]", ok(check(&[m(5, 4), m(5, 4), m(4, 4), m(4, 4)], EPS, |g, v| {
        let s = baseline_speaker_in(g, v[0], v[1], v[2], v[3])?;
        random_projection(g, s, 4)
    }))?);
    record("speaker[bios_mlp]", ok(check(&[m(5, 4), m(4, 4), m(1, 4)], EPS, |g, v| {
        let s = mlp_speaker_in(g, v[0], v[1], v[2])?;
        random_projection(g, s, 5)
    }))?);
    record("speaker[bios_attention]", ok(check(&[m(5, 4), m(5, 4), m(3, 4), m(4, 4)], EPS, |g, v| {
        let s = attention_speaker_in(g, v[0], v[1], v[2], v[3])?;
        random_projection(g, s, 6)
    }))?);
    record("classify", ok(check(&[m(5, 4), m(5, 4), m(5, 3), m(4, 3), m(4, 3)], EPS, |g, v| {
        let logits = classify_in(g, v[0], v[1], v[2], v[3], v[4])?;
        let probs = g.softmax(logits);
        random_projection(g, probs, 7)
    }))?);
    record("loss", ok(check(&[m(5, 3)], EPS, |g, v| g.cross_entropy(v[0], &[0, 2, 1, 1, 0])))?);

    for (name, e) in &layer_worst {
        ensure!(*e < 1e-5, "{name}: relative error {e:.2e} >= 1e-5");
    }
    let layer_max = layer_worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);

    let conv = common::small_conversation();
    let vocab = synthetic::vocabulary();
    let enc = common::toy_encoder(4);
    let bios = common::mock_bios(&conv);
    let mut e2e_max = 0.0f64;
    for variant in [Variant::Baseline, Variant::BiosMlp, Variant::BiosAttention] {
        for trainable in [0, 1] {
            let mut cfg = ModelConfig::new(variant, 4, vocab.len());
            cfg.head_dim = 2;
            cfg.trainable_encoder_layers = trainable;
            let model = ok(ErcModel::init(cfg, &vocab, &enc))?;
            let inputs = ok(model.prepare(&conv, &enc, Some(&bios), &vocab))?;
            for (name, e) in ok(check_model(&model, &inputs, EPS))? {
                ensure!(e < 1e-4, "{variant:?} (encoder layers {trainable}): {name} relative error {e:.2e}");
                e2e_max = e2e_max.max(e);
            }
        }
    }
    Ok(format!(
        "{} layer checks max {layer_max:.1e} < 1e-5; end-to-end over 3 variants x 2 encoder settings max {e2e_max:.1e} < 1e-4",
        layer_worst.len()
    ))
}

fn metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for t in 0..1000 {
        let k = rng.random_range(2..=7usize);
        let n = rng.random_range(1..=60usize);
        let gold: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let a = ok(weighted_f1(&gold, &pred))?;
        let b = brute_force_weighted_f1(&gold, &pred, k);
        ensure!(a == b, "instance {t}: {a} != {b}");
    }
    let f = ok(weighted_f1(&["a", "a", "b"], &["a", "b", "b"]))?;
    ensure!(f == 2.0 / 3.0, "gold=[a,a,b] pred=[a,b,b] gave {f}");
    Ok("1000 random instances equal the brute-force oracle exactly; [a,a,b]/[a,b,b] = 2/3".into())
}

fn goldens_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/goldens")
}

fn prompt_goldens() -> Check {
    let golden = |name: &str| ok(std::fs::read_to_string(goldens_dir().join(name)));
    let vocab = ok(LabelVocabulary::new("golden", &["neutral", "joy"]))?;
    let conv = ok(load_dataset(goldens_dir().join("conversation.jsonl"), &vocab))?.remove(0);
    let bio = "B is supportive and warm.";
    let bio_prompt = ok(render_bio_prompt(&conv, "A"))?.rendered_text;
    let cases = [
        ("bio_prompt_speaker_a.txt", bio_prompt),
        ("ft_prompt_train_with_bio.txt", ok(render_ft_prompt(&conv, 1, Some(bio), Some("joy")))?),
        ("ft_prompt_train_without_bio.txt", ok(render_ft_prompt(&conv, 1, None, Some("joy")))?),
        ("ft_prompt_inference_with_bio.txt", ok(render_ft_prompt(&conv, 1, Some(bio), None))?),
    ];
    for (name, rendered) in &cases {
        ensure!(*rendered == golden(name)?, "{name} differs from the rendered prompt");
    }
    ensure!(cases[0].1.contains("provide an answer within 250 words"), "word limit phrase missing");
    ensure!(cases[1].1.contains("You are an expert at analyzing the emotion"), "expert phrase missing");
    Ok(format!("{} goldens match byte-exactly", cases.len()))
}

fn mlp_invariant() -> Check {
    let vocab = synthetic::vocabulary();
    let enc = common::toy_encoder(4);
    let model = ok(ErcModel::init(ModelConfig::new(Variant::BiosMlp, 4, vocab.len()), &vocab, &enc))?;
    let convs = synthetic::generate(20, 8, Split::Test, 4);
    let mut rows = 0;
    for conv in &convs {
        let bios = common::mock_bios(conv);
        let inputs = ok(model.prepare(conv, &enc, Some(&bios), &vocab))?;
        let (_, _, speaker) = ok(model.representations(&inputs))?;
        let mut first: HashMap<&str, usize> = HashMap::new();
        for (i, u) in conv.utterances.iter().enumerate() {
            let j = *first.entry(u.speaker_id.as_str()).or_insert(i);
            ensure!(speaker.row(i) == speaker.row(j), "{} turn {i} differs from turn {j}", conv.conversation_id);
            rows += 1;
        }
    }
    Ok(format!("{} conversations, {rows} speaker vectors identical per speaker", convs.len()))
}

fn lora_identity() -> Check {
    let convs = synthetic::generate(4, 5, Split::Train, 3);
    let vocab = synthetic::vocabulary();
    let ex = ok(build_training_examples(&convs, None, &vocab))?;
    let texts: Vec<&str> = ex.iter().flat_map(|e| [e.prompt.as_str(), e.completion.as_str()]).collect();
    let mut lm = ok(ToyCausalLm::<f64>::new(ToyLmConfig::default(), TokenVocab::build(texts)))?;
    let spans = [LossSpan::Full, LossSpan::Completion];
    let base: Vec<f64> = spans.iter().map(|s| mean_example_loss(&lm, &ex, *s).unwrap()).collect();
    let cfg = LoraConfig::default();
    ok(lm.attach_lora(&cfg, 9))?;
    ensure!(lm.adapters().values().all(|a| a.b.as_slice().iter().all(|x| *x == 0.0)), "B not zero at init");
    for (s, b) in spans.iter().zip(&base) {
        let with = ok(mean_example_loss(&lm, &ex, *s))?;
        ensure!(with.to_bits() == b.to_bits(), "{s:?} loss {with} != base {b}");
    }
    let (mut formula, mut full) = (0, 0);
    for name in &cfg.targets {
        let (m, n) = ok(lm.base_weight(name))?.shape();
        ensure!(lora_parameter_count(m, n, cfg.rank) == cfg.rank * (m + n), "formula");
        formula += cfg.rank * (m + n);
        full += m * n;
    }
    let enumerated: usize = lm.adapters().values().map(|a| a.a.as_slice().len() + a.b.as_slice().len()).sum();
    ensure!(enumerated == formula, "enumerated {enumerated} != r(m+n) {formula}");
    ensure!(lm.adapter_parameter_count() == formula, "reported count differs");
    ensure!(formula < full, "adapter count {formula} not below full count {full}");
    Ok(format!(
        "B=0 loss bit-identical; adapter params {formula} = sum r(m+n) < full {full} (total model {})",
        lm.full_parameter_count()
    ))
}

fn overfit_f1(variant: Variant) -> Result<f64, String> {
    let convs = synthetic::generate(5, 6, Split::Train, 11);
    let vocab = synthetic::vocabulary();
    let enc = ok(ToyEncoder::<f64>::new(ToyEncoderConfig::default()))?;
    let mut cfg = ModelConfig::new(variant, enc.config().hidden_dim, vocab.len());
    cfg.max_steps = Some(200);
    cfg.epochs = 1000;
    let model = ok(ErcModel::init(cfg, &vocab, &enc))?;
    let inputs = convs
        .iter()
        .map(|c| model.prepare(c, &enc, Some(&common::mock_bios(c)), &vocab))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let out = ok(train(model, &inputs, &[]))?;
    ensure!(out.steps <= 200, "{} steps", out.steps);
    ok(score(&out.best, &inputs))
}

fn cli_ok(work: &Path, envs: &[(&str, &str)], args: &[&str]) -> Result<String, String> {
    let mut cmd = bioserc(work);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let o = run(cmd, args);
    ensure!(o.status.success(), "bioserc {args:?} failed: {}", stderr(&o));
    Ok(stdout(&o))
}

fn overfit_and_pipeline() -> Check {
    let mut scores = Vec::new();
    for v in [Variant::Baseline, Variant::BiosMlp, Variant::BiosAttention] {
        let f1 = overfit_f1(v)?;
        ensure!(f1 >= 0.95, "{} reached training weighted-F1 {f1}", v.as_str());
        scores.push(format!("{}={f1:.3}", v.as_str()));
    }
    let start = Instant::now();
    let work = ok(tempfile::tempdir())?;
    let cfg = toy_config();
    let cfg = cfg.to_str().unwrap();
    cli_ok(work.path(), &[], &["extract-bios", "--config", cfg])?;
    let baseline_report = work.path().join("out/baseline/eval_test.json");
    let baseline_report = baseline_report.to_str().unwrap();
    for variant in ["baseline", "bios_mlp", "bios_attention"] {
        let env = [("BIOSERC__MODEL__VARIANT", variant)];
        cli_ok(work.path(), &env, &["train", "--config", cfg])?;
        let mut args = vec!["evaluate", "--config", cfg];
        if variant != "baseline" {
            args.extend(["--baseline", baseline_report]);
        }
        cli_ok(work.path(), &env, &args)?;
        let report = work.path().join(format!("out/{variant}/eval_test.json"));
        ensure!(report.exists(), "{} missing", report.display());
    }
    Ok(format!(
        "training weighted-F1 within 200 steps: {}; extract-bios -> train -> evaluate for all variants in {:.1}s",
        scores.join(", "),
        start.elapsed().as_secs_f64()
    ))
}

fn dataset_stats() -> Check {
    let work = ok(tempfile::tempdir())?;
    let files = support::write_stats_fixtures(work.path());
    let mut args = vec!["stats".to_string()];
    for (name, path) in &files {
        args.extend(["--name".into(), name.clone()]);
        args.push(path.to_string_lossy().into_owned());
    }
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = cli_ok(work.path(), &[], &args)?;
    let expected = [
        "dataset\ttrain_dialogues\tdev_dialogues\ttest_dialogues\ttrain_utterances\tdev_utterances\ttest_utterances\tavg_speakers",
        "IEMOCAP\t108\t12\t31\t5163\t647\t1623\t2.00",
        "EmoryNLP\t659\t89\t79\t7551\t954\t984\t3.34",
        "MELD\t1039\t114\t280\t9989\t1109\t2610\t2.72",
    ];
    let lines: Vec<&str> = out.lines().collect();
    ensure!(lines == expected, "stats output:\n{out}");
    Ok("IEMOCAP 108/12/31, EmoryNLP 659/89/79, MELD 1039/114/280 dialogues and all utterance and speaker columns match".into())
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn pipeline_once(work: &Path) -> Result<(Vec<String>, BTreeMap<PathBuf, Vec<u8>>), String> {
    let cfg = toy_config();
    let cfg = cfg.to_str().unwrap();
    let grid = [("BIOSERC__MODEL__SEEDS", "[0, 1]"), ("BIOSERC__MODEL__WINDOWS", "[2]")];
    let mut outputs = vec![cli_ok(work, &[], &["extract-bios", "--config", cfg])?];
    for variant in ["baseline", "bios_attention", "ft-llm"] {
        let mut env = grid.to_vec();
        env.push(("BIOSERC__MODEL__VARIANT", variant));
        for cmd in ["train", "evaluate", "predict"] {
            outputs.push(cli_ok(work, &env, &[cmd, "--config", cfg])?);
        }
    }
    Ok((outputs, snapshot(work)))
}

fn determinism() -> Check {
    let work = ok(tempfile::tempdir())?;
    let (out_a, files_a) = pipeline_once(work.path())?;
    ok(std::fs::remove_dir_all(work.path().join("out")))?;
    ok(std::fs::remove_file(work.path().join("biographies.jsonl")))?;
    let (out_b, files_b) = pipeline_once(work.path())?;
    ensure!(out_a == out_b, "command output differs between runs");
    ensure!(
        files_a.keys().eq(files_b.keys()),
        "artifact sets differ: {:?} vs {:?}",
        files_a.keys().collect::<Vec<_>>(),
        files_b.keys().collect::<Vec<_>>()
    );
    for (path, bytes) in &files_a {
        ensure!(files_b[path] == *bytes, "{} differs between runs", path.display());
    }
    let reports = files_a.keys().filter(|p| p.to_string_lossy().contains("eval_")).count();
    Ok(format!(
        "{} artifacts ({reports} evaluation reports, checkpoints, predictions) byte-identical across repeated runs",
        files_a.len()
    ))
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    check: fn() -> Check,
}

fn main() {
    let secs = Duration::from_secs;
    let criteria = [
        Criterion { name: "mask oracle", budget: secs(5), check: mask_oracle },
        Criterion { name: "attention math", budget: secs(5), check: attention_math },
        Criterion { name: "gradient checks", budget: secs(60), check: gradient_checks },
        Criterion { name: "metric oracle", budget: secs(10), check: metric_oracle },
        Criterion { name: "prompt goldens", budget: secs(1), check: prompt_goldens },
        Criterion { name: "bios_mlp shared speaker vector", budget: secs(1), check: mlp_invariant },
        Criterion { name: "LoRA identity at init and parameter count", budget: secs(60), check: lora_identity },
        Criterion { name: "overfit and end-to-end pipeline", budget: secs(300), check: overfit_and_pipeline },
        Criterion { name: "dataset stats", budget: secs(60), check: dataset_stats },
        Criterion { name: "determinism", budget: secs(300), check: determinism },
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(c.check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > c.budget => Err(format!("{detail}; took longer than the {:?} budget", c.budget)),
            r => r,
        };
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(e) => {
                failed += 1;
                ("FAIL", e)
            }
        };
        println!("{tag} {} [{:.2}s / {}s]: {detail}", c.name, elapsed.as_secs_f64(), c.budget.as_secs());
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

//! End-to-end acceptance run. Each criterion prints one PASS/FAIL line
//! (written straight to stderr so it shows without `--nocapture`); the
//! test fails if any criterion fails.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use send_diar::autodiff::{grad_check, AutodiffError, Graph, ParamStore, Tensor};
use send_diar::corpus::{Dataset, SimConfig, Simulator};
use send_diar::nnet::{AttentionAligner, AttentionConfig, Fcn, Fsmn, FsmnConfig, Linear, SelfAttentionEncoder};
use send_diar::pse::{build_valid_table, decode, encode, valid_label_count, FrameLabels, OverflowPolicy, SpeakerSet};
use send_diar::recipes::{desk_sim, run_recipe, Recipe, RecipeConfig};
use send_diar::scoring::{der, der_bruteforce_oracle, der_counts, DerCounts, DerMode};
use send_diar::send::{train, Head, PostNet, SendConfig, SendModel, SlotRole, SpeakerBank, TrainConfig};
use send_diar::sendti::{
    evaluate_words, text_only_report, train_ti, SendTiConfig, SendTiModel, TextConfig, TextSource, TokenSequence,
};
use send_diar::similarity::{cosine_sim, sigma_dot_sim, similarity_node, Metric};

// Pinned tolerances.
const GRAD_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 2e-3;
const SCORER_TOL: f64 = 1e-12;
const SATURATION_TOL: f64 = 1e-6;
const DESK_DER: f64 = 0.05;
const ORACLE_DER: f64 = 0.01;
const CHANCE_BAND: f64 = 0.05;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(n: usize, name: &str, limit: Option<Duration>, run: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let mut out = run();
    let elapsed = start.elapsed();
    if let Some(limit) = limit {
        if elapsed > limit {
            out.pass = false;
            out.detail += &format!("; exceeded {:.0}s", limit.as_secs_f64());
        }
    }
    let line = format!(
        "{} criterion {n} ({name}): {} [{:.1}s]\n",
        if out.pass { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64()
    );
    let mut err = std::io::stderr();
    err.write_all(line.as_bytes()).unwrap();
    err.flush().unwrap();
    out.pass
}

fn random(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn pse_codec() -> Outcome {
    let mut failures = Vec::new();
    for n in 1..=10usize {
        let mut seen = std::collections::HashSet::new();
        for mask in 0u64..(1 << n) {
            let members: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| i + 1).collect();
            let set = SpeakerSet::new(members, n).unwrap();
            let code = encode(&set, n).unwrap();
            if code != mask || decode(code, n).unwrap() != set || !seen.insert(code) {
                failures.push(format!("n={n} mask={mask}"));
            }
        }
    }
    let mut tables = 0;
    for n in 1..=16usize {
        for k in 1..=4usize.min(n) {
            let brute = (0u64..(1 << n)).filter(|m| m.count_ones() as usize <= k).count();
            let table = build_valid_table(k, n).unwrap();
            if table.len() != brute || valid_label_count(k, n) as usize != brute {
                failures.push(format!("table k={k} n={n}: {} vs {brute}", table.len()));
            }
            tables += 1;
        }
    }
    let c697 = valid_label_count(3, 16);
    let c4 = valid_label_count(2, 2);
    Outcome {
        pass: failures.is_empty() && c697 == 697 && c4 == 4,
        detail: format!(
            "round trips for N<=10, {tables} tables vs brute force, C(3,16)={c697}, C(2,2)={c4}, {} mismatches",
            failures.len()
        ),
    }
}

fn similarity_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0;
    for _ in 0..100_000 {
        let d = rng.gen_range(1..=32);
        let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
        let h: Vec<f64> = (0..d).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
        let e: Vec<f64> = (0..d).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
        let c = cosine_sim(&h, &e).unwrap().value;
        let s = sigma_dot_sim(&h, &e).unwrap();
        if !(-1.0..=1.0).contains(&c) || s.abs() > d as f64 {
            violations += 1;
        }
    }
    let mut worst: f64 = 0.0;
    for d in [1usize, 8, 64] {
        let big = vec![1000.0; d];
        let neg = vec![-1000.0; d];
        worst = worst.max((sigma_dot_sim(&big, &big).unwrap() - d as f64).abs());
        worst = worst.max((sigma_dot_sim(&big, &neg).unwrap() + d as f64).abs());
    }
    Outcome {
        pass: violations == 0 && worst <= SATURATION_TOL,
        detail: format!("1e5 fuzzed pairs, {violations} bound violations, saturation error {worst:.1e}"),
    }
}

fn send_config(head: Head, post_net: PostNet, metric: Metric) -> SendConfig {
    SendConfig {
        feature_dim: 6,
        embedding_dim: 8,
        encoding_dim: 8,
        capacity: 4,
        max_overlap: 2,
        metric,
        head,
        post_net,
        speech_blocks: 2,
        speech_hidden: 7,
        speech_filter: 3,
        speaker_layers: 2,
        speaker_hidden: 6,
        post_blocks: 1,
        post_hidden: 5,
        post_filter: 3,
        post_fcn_hidden: 6,
    }
}

fn ti_config() -> SendTiConfig {
    SendTiConfig {
        feature_dim: 6,
        embedding_dim: 8,
        encoding_dim: 8,
        capacity: 4,
        vocab_size: 7,
        speech_blocks: 1,
        speech_hidden: 6,
        speech_filter: 3,
        speaker_layers: 2,
        speaker_hidden: 6,
        text_blocks: 1,
        text_heads: 2,
        text_ffn: 6,
        positional: true,
        post_net: PostNet::FsmnFcn,
        post_blocks: 1,
        post_hidden: 4,
        post_filter: 3,
        post_fcn_hidden: 6,
    }
}

fn bank(rng: &mut impl Rng) -> SpeakerBank {
    let embeddings = (0..4).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    SpeakerBank::new(embeddings, vec![SlotRole::Positive; 4]).unwrap()
}

/// Random labels with at most two of four speakers per frame.
fn random_labels(rng: &mut impl Rng, t: usize) -> FrameLabels {
    let rows: Vec<Vec<u8>> = (0..t)
        .map(|_| {
            let mut row = vec![0u8; 4];
            for _ in 0..rng.gen_range(0..=2) {
                row[rng.gen_range(0..4)] = 1;
            }
            row
        })
        .collect();
    FrameLabels::from_rows(&rows).unwrap()
}

fn tanh_sum(g: &mut Graph, y: send_diar::autodiff::NodeId) -> send_diar::autodiff::NodeId {
    let t = g.tanh(y);
    g.sum(t)
}

fn gradient_integrity() -> Outcome {
    let (t, l, d) = (8, 4, 8);
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    let mut record = |err: Result<f64, AutodiffError>| {
        worst = worst.max(err.unwrap_or(f64::INFINITY));
        checks += 1;
    };
    let combos: Vec<(Head, PostNet, Metric)> = [Head::Pse, Head::Multilabel]
        .into_iter()
        .flat_map(|h| [PostNet::None, PostNet::Fcn, PostNet::FsmnFcn].into_iter().map(move |p| (h, p)))
        .filter(|&(h, p)| !(h == Head::Pse && p == PostNet::None))
        .flat_map(|(h, p)| [Metric::Cosine, Metric::Dot, Metric::SigmaDot].into_iter().map(move |m| (h, p, m)))
        .collect();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", d, 5, true, &mut rng);
        let fsmn_cfg = FsmnConfig {
            num_blocks: 2,
            hidden_units: 6,
            filter_size: 5,
            projection_dim: d,
        };
        let fsmn = Fsmn::new(&mut store, "fsmn", d, &fsmn_cfg, &mut rng);
        let fcn = Fcn::new(&mut store, "fcn", &[d, 6, 4], &mut rng);
        let attn_cfg = AttentionConfig {
            model_dim: d,
            num_heads: 2,
            num_blocks: 1,
            ffn_dim: 6,
            positional: true,
        };
        let enc = SelfAttentionEncoder::new(&mut store, "enc", &attn_cfg, &mut rng);
        let align = AttentionAligner::new(&mut store, "align", d, &mut rng);
        // Move the aligner off its uniform starting point.
        let q = align.query.weight;
        store.get_mut(q).value = random(&mut rng, d, d);
        let x = random(&mut rng, t, d);
        let u = random(&mut rng, l, d);
        let e = random(&mut rng, 4, 5);
        let blocks: [&dyn Fn(&mut Graph) -> Result<_, AutodiffError>; 5] = [
            &|g| {
                let xn = g.input(x.clone());
                let y = lin.forward(g, xn)?;
                Ok(tanh_sum(g, y))
            },
            &|g| {
                let xn = g.input(x.clone());
                let y = fsmn.forward(g, xn)?;
                Ok(tanh_sum(g, y))
            },
            &|g| {
                let xn = g.input(x.clone());
                let y = fcn.forward(g, xn)?;
                Ok(tanh_sum(g, y))
            },
            &|g| {
                let un = g.input(u.clone());
                let y = enc.forward(g, un)?.output;
                Ok(tanh_sum(g, y))
            },
            &|g| {
                let un = g.input(u.clone());
                let xn = g.input(x.clone());
                let y = align.forward(g, un, xn)?.aggregated;
                Ok(tanh_sum(g, y))
            },
        ];
        for b in blocks {
            record(grad_check(&store, b, GRAD_EPS));
        }
        for metric in [Metric::Cosine, Metric::Dot, Metric::SigmaDot] {
            record(grad_check(
                &store,
                |g| {
                    let xn = g.input(x.clone());
                    let h = lin.forward(g, xn)?;
                    let en = g.input(e.clone());
                    let a = similarity_node(g, h, en, metric)?;
                    Ok(tanh_sum(g, a))
                },
                GRAD_EPS,
            ));
        }

        let (head, post, metric) = combos[seed as usize % combos.len()];
        let model = SendModel::new(send_config(head, post, metric), seed).unwrap();
        let feats = random(&mut rng, t, 6);
        let b = bank(&mut rng);
        let targets = model.net.targets(&random_labels(&mut rng, t), &OverflowPolicy::Reject).unwrap();
        record(grad_check(
            &model.store,
            |g| {
                let xn = g.input(feats.clone());
                let bn = g.input(b.to_tensor());
                model
                    .net
                    .loss_node(g, xn, bn, &targets)
                    .map_err(|e| AutodiffError::Shape(e.to_string()))
            },
            GRAD_EPS,
        ));

        let mut ti = SendTiModel::new(ti_config(), seed).unwrap();
        let q = ti.net.aligner.query.weight;
        ti.store.get_mut(q).value = random(&mut rng, d, d);
        let tokens = TokenSequence::plain((0..l).map(|_| rng.gen_range(0..7)).collect(), 7).unwrap();
        let word_targets: Vec<usize> = (0..l).map(|_| rng.gen_range(0..5)).collect();
        record(grad_check(
            &ti.store,
            |g| {
                let xn = g.input(feats.clone());
                let bn = g.input(b.to_tensor());
                ti.net
                    .loss_node(g, xn, bn, &tokens, &word_targets)
                    .map_err(|e| AutodiffError::Shape(e.to_string()))
            },
            GRAD_EPS,
        ));
    }
    Outcome {
        pass: worst < GRAD_TOL,
        detail: format!("{checks} checks over 20 seeds, worst relative error {worst:.2e} (tol {GRAD_TOL:.0e})"),
    }
}

fn scorer_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut mismatches, mut both_err, mut self_nonzero) = (0, 0, 0);
    for _ in 0..1000 {
        let t = rng.gen_range(1..=50);
        let n = rng.gen_range(1..=5);
        let density = rng.gen_range(0.0..0.9);
        let gen = |rng: &mut ChaCha8Rng| {
            let data = (0..t * n).map(|_| u8::from(rng.gen_bool(density))).collect();
            FrameLabels::from_flat(t, n, data).unwrap()
        };
        let r = gen(&mut rng);
        let h = gen(&mut rng);
        for mode in [DerMode::Full, DerMode::IgnoreOverlap] {
            match (der(&r, &h, mode), der_bruteforce_oracle(&r, &h, mode)) {
                (Ok(a), Ok(b)) => {
                    let diffs = [a.der - b.der, a.miss - b.miss, a.false_alarm - b.false_alarm, a.confusion - b.confusion];
                    if diffs.iter().any(|x| x.abs() > SCORER_TOL) {
                        mismatches += 1;
                    }
                }
                (Err(_), Err(_)) => both_err += 1,
                _ => mismatches += 1,
            }
            if let Ok(s) = der(&r, &r, mode) {
                if s.der != 0.0 {
                    self_nonzero += 1;
                }
            }
        }
    }
    Outcome {
        pass: mismatches == 0 && self_nonzero == 0,
        detail: format!(
            "1000 pairs x 2 modes, {mismatches} disagreements (tol {SCORER_TOL:.0e}), {both_err} shared errors, der(x,x)!=0 {self_nonzero} times"
        ),
    }
}

fn desk_training() -> Outcome {
    let sim_cfg = SimConfig {
        train_samples: 2000,
        ..desk_sim()
    };
    let sim = Simulator::new(sim_cfg.clone()).unwrap();
    let data = Dataset::generate_with(&sim).unwrap();
    let summary = data.manifest().summary;
    let counts: Vec<usize> = data.train.iter().map(|s| s.num_speakers()).collect();
    let speakers_ok = counts.iter().all(|&k| (2..=4).contains(&k));
    let mut oracle = DerCounts::default();
    for s in &data.validation {
        oracle = oracle + der_counts(&s.labels, &sim.oracle_decode(s, 2), DerMode::Full).unwrap();
    }
    let oracle_der = oracle.report(DerMode::Full).unwrap().der;

    let cfg = RecipeConfig::desk();
    let model_cfg = SendConfig {
        head: Head::Pse,
        capacity: 4,
        max_overlap: 2,
        ..cfg.model.clone()
    };
    let mut model = SendModel::new(model_cfg, 1).unwrap();
    let train_cfg = TrainConfig {
        seed: 1,
        epochs: 8,
        ..cfg.train.clone()
    };
    let start = Instant::now();
    let mut reached: Option<(usize, f64)> = None;
    let mut last = f64::NAN;
    train(&mut model, &data, &train_cfg, &mut |r| {
        let d = r.validation_der.unwrap();
        last = d;
        if reached.is_none() && d < DESK_DER {
            reached = Some((r.epoch + 1, start.elapsed().as_secs_f64()));
        }
    })
    .unwrap();
    let pass = speakers_ok && summary.overlap_ratio > 0.0 && oracle_der < ORACLE_DER && reached.is_some_and(|(_, s)| s < 600.0);
    Outcome {
        pass,
        detail: format!(
            "overlap ratio {:.3}, oracle DER {:.2}% (< {:.0}%), validation DER {} after {} epochs, first below {:.0}% {}",
            summary.overlap_ratio,
            100.0 * oracle_der,
            100.0 * ORACLE_DER,
            format!("{:.2}%", 100.0 * last),
            train_cfg.epochs,
            100.0 * DESK_DER,
            reached.map_or("never".to_string(), |(e, s)| format!("at epoch {e} ({s:.0}s)"))
        ),
    }
}

fn postnet_ordering() -> Outcome {
    let table = run_recipe(Recipe::PostnetPse, &RecipeConfig::desk(), &mut |_| {}).unwrap();
    let mut err = std::io::stderr();
    err.write_all(table.to_string().as_bytes()).unwrap();
    let v = |row: &str| table.value(row, "der").unwrap();
    let pse = v("fsmn_fcn/pse");
    let ml = v("fsmn_fcn/multilabel");
    let fcn_pse = v("fcn/pse");
    let fcn_ml = v("fcn/multilabel");
    let none = v("none/multilabel");
    Outcome {
        pass: pse <= ml && fcn_pse <= fcn_ml && pse <= none && ml <= none,
        detail: format!(
            "mean DER over 5 seeds: pse {:.2}% vs multilabel {:.2}% (fsmn_fcn), {:.2}% vs {:.2}% (fcn); fsmn_fcn {:.2}% vs none {:.2}%",
            100.0 * pse,
            100.0 * ml,
            100.0 * fcn_pse,
            100.0 * fcn_ml,
            100.0 * ml,
            100.0 * none
        ),
    }
}

/// Criteria 7 and 8 share trained word models.
fn word_models() -> (Outcome, Outcome) {
    let cfg = RecipeConfig::desk();
    let data = Dataset::generate(&cfg.text_sim).unwrap();
    let seed0 = data.config.seed;
    let mut means = [0.0; 2];
    let mut kept = None;
    for &seed in &cfg.seeds {
        for (k, separators) in [true, false].into_iter().enumerate() {
            let text = TextConfig {
                separators,
                source: TextSource::Grand,
                error_rate: cfg.error_rate,
            };
            let mut model = SendTiModel::new(cfg.ti_model.clone(), seed).unwrap();
            let train_cfg = TrainConfig {
                seed,
                ..cfg.ti_train.clone()
            };
            train_ti(&mut model, &data, &train_cfg, &text, &mut |_| {}).unwrap();
            means[k] += evaluate_words(&model, &data.validation, &text, seed0).unwrap().wder / cfg.seeds.len() as f64;
            if kept.is_none() && separators {
                kept = Some((model, text));
            }
        }
    }
    let sc = Outcome {
        pass: means[0] <= means[1],
        detail: format!(
            "mean wDER over {} seeds: with separators {:.2}%, without {:.2}%",
            cfg.seeds.len(),
            100.0 * means[0],
            100.0 * means[1]
        ),
    };
    let (model, text) = kept.unwrap();
    let r = text_only_report(&model, &data.validation, &text, seed0).unwrap();
    let text_only = Outcome {
        pass: (r.accuracy - r.chance).abs() <= CHANCE_BAND && r.words > 0,
        detail: format!(
            "masked accuracy {:.2}% vs chance {:.0}% (band {:.0} points) over {} words, swap difference {:.1e}, unmasked {:.2}%",
            100.0 * r.accuracy,
            100.0 * r.chance,
            100.0 * CHANCE_BAND,
            r.words,
            r.max_swap_difference,
            100.0 * r.unmasked_accuracy
        ),
    };
    (sc, text_only)
}

fn determinism() -> Outcome {
    let sim = SimConfig {
        train_samples: 8,
        validation_samples: 4,
        pool_speakers: 20,
        validation_speakers: 4,
        embedding_dim: 8,
        feature_dim: 8,
        context: 1,
        ..SimConfig::default()
    };
    let dirs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    let mut manifests = Vec::new();
    let mut reports = Vec::new();
    let mut scores = Vec::new();
    let mut params = Vec::new();
    for dir in &dirs {
        let data = Dataset::generate(&sim).unwrap();
        data.save(dir.path()).unwrap();
        manifests.push(std::fs::read(dir.path().join("manifest.toml")).unwrap());
        let model_cfg = SendConfig {
            feature_dim: sim.input_dim(),
            embedding_dim: 8,
            encoding_dim: 8,
            speech_blocks: 1,
            speech_hidden: 8,
            speech_filter: 3,
            speaker_layers: 1,
            speaker_hidden: 8,
            post_blocks: 1,
            post_hidden: 4,
            post_filter: 3,
            post_fcn_hidden: 8,
            capacity: 4,
            max_overlap: 2,
            ..SendConfig::default()
        };
        let loaded = Dataset::load(dir.path()).unwrap();
        let mut model = SendModel::new(model_cfg, 5).unwrap();
        let train_cfg = TrainConfig {
            seed: 5,
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &loaded, &train_cfg, &mut |_| {}).unwrap();
        reports.push(report.to_jsonl());
        let ckpt = dir.path().join("ckpt");
        model.save(&ckpt).unwrap();
        let mut files: Vec<_> = std::fs::read_dir(&ckpt)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_owned(), std::fs::read(&p).unwrap())
            })
            .collect();
        files.sort();
        params.push(files);
        let posts = send_diar::send::validation_posteriors(&model, &loaded.validation).unwrap();
        let counts = send_diar::send::evaluate(&posts, model.table(), None).unwrap();
        scores.push(counts.report(DerMode::Full).unwrap().to_json());
    }
    let same = manifests[0] == manifests[1] && reports[0] == reports[1] && params[0] == params[1] && scores[0] == scores[1];
    Outcome {
        pass: same,
        detail: format!(
            "two seeded simulate/train/score runs: manifests {}, training reports {}, checkpoints {}, score reports {}",
            if manifests[0] == manifests[1] { "identical" } else { "differ" },
            if reports[0] == reports[1] { "identical" } else { "differ" },
            if params[0] == params[1] { "identical" } else { "differ" },
            if scores[0] == scores[1] { "identical" } else { "differ" }
        ),
    }
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    results.push(report(1, "power-set codec", Some(Duration::from_secs(10)), pse_codec));
    results.push(report(2, "similarity bounds", Some(Duration::from_secs(5)), similarity_bounds));
    results.push(report(3, "gradient integrity", Some(Duration::from_secs(120)), gradient_integrity));
    results.push(report(4, "scorer equivalence", Some(Duration::from_secs(30)), scorer_equivalence));
    results.push(report(5, "desk-scale training", Some(Duration::from_secs(600)), desk_training));
    results.push(report(6, "post-net and head ordering", None, postnet_ordering));
    let mut text_only = None;
    results.push(report(7, "separator effect", None, || {
        let (sc, t) = word_models();
        text_only = Some(t);
        sc
    }));
    results.push(report(8, "text-only degradation", None, || text_only.take().unwrap()));
    results.push(report(9, "determinism", None, determinism));
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, p)| !**p).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

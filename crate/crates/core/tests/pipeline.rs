mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::{bench_fixture, tiny_file};
use elib::config::{parse_config, BenchConfig};
use elib::harness::{
    adapt_and_deploy, guarded_inference, quantized_path, run_benchmark, Guard, OutcomeResult,
    RunOutcome,
};
use elib::metrics::{median, DeviceProfile, MetricsReport, RunStatus, SkipReason};
use elib::model::{generate_model, quantize_model, ModelFile, ModelSpec};
use elib::quant::QuantScheme;
use elib::report::{from_json, render_table, to_csv, to_json, ReportDocument};
use elib::runtime::{allocate_kv_cache, generate, prefill, BackendKind, ExecCtx, GenerationParams, Model};
use elib::textio::BOS;

fn prompt(text: &str) -> Vec<u32> {
    std::iter::once(BOS).chain(text.bytes().map(u32::from)).collect()
}

/// Q8_0 should be near-lossless. Random-weight models amplify weight noise,
/// so the 0.05 bound is checked on the median of a seed x prompt grid, with
/// every case held to 0.1.
#[test]
fn q8_0_logits_track_f32() {
    let mut worst = Vec::new();
    for seed in [1, 2, 3, 7, 42, 1234] {
        let source = generate_model(ModelSpec::tiny(), seed).unwrap();
        let f32_model = Model::from_file(source.clone()).unwrap();
        let q8 = Model::from_file(quantize_model(&source, QuantScheme::Q8_0).unwrap()).unwrap();
        for text in ["Hello, world", "a", "The quick brown fox", "Once upon a time there was"] {
            let p = prompt(text);
            let run = |m: &Model| {
                let mut kv = allocate_kv_cache(&m.spec, 1, 32, 4).unwrap();
                prefill(m, &mut kv, &p, &mut ExecCtx::naive()).unwrap()
            };
            let (a, b) = (run(&f32_model), run(&q8));
            let w = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
            assert!(w <= 0.1, "seed {seed} {text:?}: max |dlogit| {w}");
            worst.push(w as f64);
        }
    }
    let median = median(&worst).unwrap();
    assert!(median <= 0.05, "median max |dlogit| {median}");
}

#[test]
fn f16_cache_stays_close_to_f32_cache() {
    let model = Model::from_file(tiny_file()).unwrap();
    let p = prompt("cache precision");
    let run = |databyte| {
        let mut kv = allocate_kv_cache(&model.spec, 1, 32, databyte).unwrap();
        prefill(&model, &mut kv, &p, &mut ExecCtx::naive()).unwrap()
    };
    let (a, b) = (run(4), run(2));
    let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(worst < 0.05, "{worst}");
}

#[test]
fn quantized_container_survives_disk() {
    let dir = tempfile::tempdir().unwrap();
    let source = tiny_file();
    for scheme in QuantScheme::QUANTIZED {
        let q = quantize_model(&source, scheme).unwrap();
        let path = quantized_path(&dir.path().join("tiny.elib"), scheme);
        q.save(&path).unwrap();
        let back = ModelFile::load(&path).unwrap();
        assert_eq!(back.scheme, scheme);
        assert_eq!(back.param_bytes(), q.param_bytes());
        assert_eq!(back.tensors, q.tensors);
    }
}

fn generous_guard() -> Guard {
    Guard {
        timeout: Duration::from_secs(60),
        stall_grace: Duration::from_secs(1),
        memory_limit_bytes: None,
        batch: 1,
        databyte: 4,
        inject: None,
    }
}

fn deployed(dir: &std::path::Path) -> (elib::harness::DeployedModel, BenchConfig) {
    let path = bench_fixture(dir, "q4_0", 1, "");
    let mut config = parse_config(&path).unwrap();
    config.benchmark_params.max_new_tokens = 12;
    let model_path = dir.join("tiny.q4_0.elib");
    quantize_model(&tiny_file(), QuantScheme::Q4_0).unwrap().save(&model_path).unwrap();
    let device = config.device_params.device().unwrap();
    let d = adapt_and_deploy(&model_path, &config, &device, 20).unwrap().unwrap();
    (d, config)
}

#[test]
fn guarded_inference_limits() {
    let dir = tempfile::tempdir().unwrap();
    let (d, config) = deployed(dir.path());
    let mut params = config.benchmark_params.generation();
    params.eos_token = None;
    let prompts = vec![prompt("Once upon a time")];

    let traces = guarded_inference(&d, &prompts, &params, &generous_guard()).unwrap().unwrap();
    assert_eq!(traces[0].1.n_generated_tokens, 12);

    let tight = Guard {
        timeout: Duration::from_secs_f64(0.001),
        ..generous_guard()
    };
    let (reason, _) = guarded_inference(&d, &prompts, &params, &tight).unwrap().unwrap_err();
    assert_eq!(reason, SkipReason::Timeout);

    let starved = Guard {
        memory_limit_bytes: Some(d.model.param_bytes + d.kv_bytes - 1),
        ..generous_guard()
    };
    let (reason, _) = guarded_inference(&d, &prompts, &params, &starved).unwrap().unwrap_err();
    assert_eq!(reason, SkipReason::MemoryOverflow);

    let stalled = Guard {
        timeout: Duration::from_millis(200),
        stall_grace: Duration::from_millis(100),
        inject: Some(SkipReason::Deadlock),
        ..generous_guard()
    };
    let start = Instant::now();
    let (reason, _) = guarded_inference(&d, &prompts, &params, &stalled).unwrap().unwrap_err();
    assert_eq!(reason, SkipReason::Deadlock);
    assert!(start.elapsed() < Duration::from_secs(5));
}

#[test]
fn small_device_skips_with_memory_overflow() {
    let dir = tempfile::tempdir().unwrap();
    let path = bench_fixture(dir.path(), "q4_0, q8_0", 1, "");
    let mut config = parse_config(&path).unwrap();
    config.device_params.profile = None;
    config.device_params.inline = Some(DeviceProfile {
        name: "pocket".into(),
        peak_bandwidth: 1e9,
        ram_bytes: 1 << 16,
        thread_counts: vec![2],
    });
    let doc = run_benchmark(&config).unwrap();
    assert_eq!(doc.outcomes.len(), 2);
    assert!(doc
        .outcomes
        .iter()
        .all(|o| o.skip_reason() == Some(SkipReason::MemoryOverflow)));
    assert!(doc.aggregates.is_empty());
}

#[test]
fn empty_scheme_list_gives_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = bench_fixture(dir.path(), "", 2, "");
    let config = parse_config(&path).unwrap();
    let doc = run_benchmark(&config).unwrap();
    assert!(doc.outcomes.is_empty());
    assert!(doc.aggregates.is_empty());
    assert_eq!(to_csv(&doc).unwrap().lines().count(), 1);
}

#[test]
fn missing_model_is_a_setup_error() {
    let config = BenchConfig::new("/nonexistent/model.elib", vec![QuantScheme::Q4_0]);
    assert!(run_benchmark(&config).is_err());
}

#[test]
fn naive_backend_matches_threaded_and_reports_single_thread_flops() {
    let dir = tempfile::tempdir().unwrap();
    let path = bench_fixture(dir.path(), "q5_0", 1, "");
    let threaded = run_benchmark(&parse_config(&path).unwrap()).unwrap();
    let mut config = parse_config(&path).unwrap();
    config.device_params.backend = BackendKind::Naive;
    let naive = run_benchmark(&config).unwrap();
    let (a, b) = (threaded.outcomes[0].report().unwrap(), naive.outcomes[0].report().unwrap());
    assert_eq!(a.generated, b.generated);
    assert_eq!(a.perplexity, b.perplexity);
    assert_eq!(b.flops_by_threads.keys().copied().collect::<Vec<_>>(), vec![1]);
    assert_eq!(a.flops_by_threads.keys().copied().collect::<Vec<_>>(), vec![1, 4]);
    let table = render_table(&naive);
    let row = table.lines().nth(2).unwrap();
    let cells: Vec<&str> = row.split('|').map(str::trim).collect();
    assert_eq!(&cells[4..6], ["-", "-"]);
}

#[test]
fn generation_stops_at_eos() {
    let model = Model::from_file(tiny_file()).unwrap();
    let mut kv = allocate_kv_cache(&model.spec, 1, 64, 4).unwrap();
    let mut ctx = ExecCtx::naive();
    let probe = GenerationParams {
        max_new_tokens: 8,
        eos_token: None,
        ..GenerationParams::default()
    };
    let p = prompt("stop");
    let (free, _) = generate(&model, &mut ctx, &mut kv, &p, &probe, Instant::now(), 0.0, &mut ()).unwrap();
    // declare the third greedy token to be the terminator
    let stop = GenerationParams {
        eos_token: Some(free[2]),
        ..probe
    };
    let mut kv = allocate_kv_cache(&model.spec, 1, 64, 4).unwrap();
    let (toks, trace) = generate(&model, &mut ctx, &mut kv, &p, &stop, Instant::now(), 0.0, &mut ()).unwrap();
    let first = free.iter().position(|&t| t == free[2]).unwrap();
    assert_eq!(toks, free[..=first]);
    assert_eq!(trace.n_generated_tokens, toks.len());
}

fn sample_row(scheme: QuantScheme, backend: BackendKind, threads: usize) -> MetricsReport {
    MetricsReport {
        device: "macbook_m2".into(),
        scheme,
        backend,
        threads,
        flops_by_threads: BTreeMap::from([(4, 12.5), (8, 20.25)]),
        throughput: Some(40.0),
        ttlm: 0.125,
        ttft: 0.0625,
        tpot: Some(0.025),
        mbu: Some(1.25),
        mbu_flag: Some(elib::metrics::MBU_FLAG.into()),
        achieved_bandwidth: Some(6.25e10),
        perplexity: Some(12.3456),
        latency_ok: None,
        param_bytes: 1000,
        kv_bytes: 200,
        kv_filled_bytes: 100,
        flop_count: 123_456,
        n_prompt_tokens: 10,
        n_generated_tokens: 8,
        generated: vec![vec![1, 2, 3]],
        status: RunStatus::Ok,
    }
}

fn sample_doc() -> ReportDocument {
    let mut no_t4 = sample_row(QuantScheme::Q4_0, BackendKind::Threaded, 8);
    no_t4.flops_by_threads.remove(&4);
    no_t4.mbu = Some(0.5);
    no_t4.mbu_flag = None;
    no_t4.perplexity = None;
    let rows = vec![
        sample_row(QuantScheme::Q8_0, BackendKind::Threaded, 8),
        no_t4,
        sample_row(QuantScheme::Q5_1, BackendKind::Naive, 1),
    ];
    let outcomes = rows
        .iter()
        .map(|r| RunOutcome {
            scheme: r.scheme,
            iteration: 1,
            result: OutcomeResult::Ok(Box::new(r.clone())),
        })
        .chain(std::iter::once(RunOutcome {
            scheme: QuantScheme::Q4_1,
            iteration: 1,
            result: OutcomeResult::Skipped {
                reason: SkipReason::Deadlock,
                detail: "no token progress for 2.000 s".into(),
            },
        }))
        .collect();
    ReportDocument {
        tool_version: "0.1.0".into(),
        config: BenchConfig::new(PathBuf::from("tiny.elib"), vec![QuantScheme::Q8_0, QuantScheme::Q4_0]),
        device: DeviceProfile::preset("macbook_m2").unwrap(),
        outcomes,
        aggregates: rows,
    }
}

const GOLDEN_TABLE: &str = "\
| Platform     | Backend     | Scheme  | GFLOPS(t4)  | GFLOPS(t8)  | Tok/S     | TTLM       | TTFT       | MBU     | PPL       |
|--------------|-------------|---------|-------------|-------------|-----------|------------|------------|---------|-----------|
| macbook_m2   | threaded/8  | Q4_0    | -           | 20.250      | 40.00     | 0.1250     | 0.0625     | 0.500   | -         |
| macbook_m2   | naive/1     | Q5_1    | 12.500      | 20.250      | 40.00     | 0.1250     | 0.0625     | 1.250*  | 12.346    |
| macbook_m2   | threaded/8  | Q8_0    | 12.500      | 20.250      | 40.00     | 0.1250     | 0.0625     | 1.250*  | 12.346    |
";

#[test]
fn table_matches_golden() {
    assert_eq!(render_table(&sample_doc()), GOLDEN_TABLE);
}

#[test]
fn csv_flattens_aggregates_only() {
    let doc = sample_doc();
    let text = to_csv(&doc).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), doc.aggregates.len() + 1);
    assert_eq!(
        lines[0],
        "device,backend,scheme,threads,gflops_t4,gflops_t8,tok_per_s,ttlm_s,ttft_s,tpot_s,mbu,\
         mbu_flag,perplexity,param_bytes,kv_bytes,flop_count,n_generated_tokens"
    );
    assert_eq!(
        lines[1],
        "macbook_m2,threaded,q4_0,8,,20.250000,40.000000,0.125000,0.062500,0.025000,0.500000,,,1000,200,123456,8"
    );
    assert!(!text.contains("q4_1"));
}

#[test]
fn json_round_trip_is_identity() {
    let doc = sample_doc();
    let text = to_json(&doc).unwrap();
    assert_eq!(from_json(&text).unwrap(), doc);
    assert!(text.contains("\"reason\": \"deadlock\""));
    for key in ["gflops", "tok_per_s", "ttlm_s", "ttft_s", "tpot_s", "mbu", "perplexity"] {
        assert!(text.contains(&format!("\"{key}\"")), "{key}");
    }
}

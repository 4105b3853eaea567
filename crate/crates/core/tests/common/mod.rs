#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use elib::model::{generate_model, ModelFile, ModelSpec};

pub const TINY_SEED: u64 = 7;

/// Runs one acceptance check, prints a PASS/FAIL line that bypasses libtest
/// output capture, and fails the test on error or when over the time limit.
pub fn criterion(id: u32, title: &str, limit: Duration, check: impl FnOnce() -> Result<String, String>) {
    let start = Instant::now();
    let result = check();
    let elapsed = start.elapsed();
    let verdict = match &result {
        Ok(_) if elapsed > limit => Err(format!(
            "took {:.2} s, limit {:.0} s",
            elapsed.as_secs_f64(),
            limit.as_secs_f64()
        )),
        Ok(detail) => Ok(detail.clone()),
        Err(e) => Err(e.clone()),
    };
    let line = match &verdict {
        Ok(detail) => format!(
            "criterion {id:>2} PASS  {title} [{:.2} s] {detail}",
            elapsed.as_secs_f64()
        ),
        Err(e) => format!(
            "criterion {id:>2} FAIL  {title} [{:.2} s] {e}",
            elapsed.as_secs_f64()
        ),
    };
    let _ = writeln!(std::io::stderr().lock(), "{line}");
    if let Err(e) = verdict {
        panic!("criterion {id} failed: {e}");
    }
}

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn tiny_file() -> ModelFile {
    generate_model(ModelSpec::tiny(), TINY_SEED).expect("tiny model")
}

pub const CORPUS_TEXT: &str = "the cat sat on the mat and the dog sat on the log. \
a bird in the hand is worth two in the bush, or so they say. \
all that glitters is not gold; still waters run deep and slow. \
the quick brown fox jumps over the lazy dog while the cat watches. ";

/// Writes a tiny model, prompts and corpus into `dir` plus a config with the
/// given schemes and extra `[benchmark_params]` lines. Returns the config path.
pub fn bench_fixture(dir: &Path, schemes: &str, iterations: usize, extra: &str) -> PathBuf {
    tiny_file().save(dir.join("tiny.elib")).unwrap();
    std::fs::write(dir.join("prompts.txt"), "Once upon a time\nThe cat sat\n").unwrap();
    std::fs::write(dir.join("corpus.txt"), CORPUS_TEXT.repeat(2)).unwrap();
    let cfg = format!(
        "original_model = tiny.elib\n\
         quantization_params = {schemes}\n\
         prompt_data = prompts.txt\n\
         corpus = corpus.txt\n\
         \n\
         [benchmark_params]\n\
         iteration = {iterations}\n\
         max_new_tokens = 8\n\
         context_len = 64\n\
         flops_dim = 64\n\
         {extra}\n\
         \n\
         [device_params]\n\
         profile = macbook_m2\n\
         thread_counts = 1, 4\n\
         backend = threaded\n"
    );
    let path = dir.join("bench.cfg");
    std::fs::write(&path, cfg).unwrap();
    path
}

const TIMING_KEYS: [&str; 9] = [
    "gflops",
    "tok_per_s",
    "ttlm_s",
    "ttft_s",
    "tpot_s",
    "mbu",
    "mbu_flag",
    "achieved_bandwidth",
    "latency_ok",
];

/// Drops wall-clock derived fields from a serialized report value.
pub fn strip_timing(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            for key in TIMING_KEYS {
                map.remove(key);
            }
            // skip details quote measured durations
            map.remove("detail");
            map.values_mut().for_each(strip_timing);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

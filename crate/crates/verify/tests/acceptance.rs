//! Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any
//! fails.

use std::collections::HashMap;
use std::process::ExitCode;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ptg_bench::blocks::Dense;
use ptg_bench::cholesky::{self, CholeskyConfig, TaskCounts};
use ptg_bench::gemm2d::{self, GemmConfig, GemmInput};
use ptg_bench::launch::Launch;
use ptg_bench::micro;
use ptg_runtime::codec::{self, ElemType, TypeDesc, Value, View};
use ptg_runtime::sim::{simulate, SimConfig};
use ptg_runtime::{Taskflow, ThreadPool};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// Criteria 1 and 2 share one batch of simulations.
fn completion_protocol() -> (Verdict, Verdict) {
    const RUNS: u64 = 1000;
    const TIME_LIMIT: Duration = Duration::from_secs(120);
    const PASS_BUDGET: u64 = 1_000_000;
    let start = Instant::now();
    let mut violations = Vec::new();
    let mut timeouts = Vec::new();
    let mut max_rounds = 0;
    let mut messages = 0;
    let mut ranks_seen = [0usize; 9];
    for seed in 0..RUNS {
        let mut config = SimConfig::random(seed);
        config.pass_budget = PASS_BUDGET;
        let outcome = match simulate(&config) {
            Ok(o) => o,
            Err(e) => {
                violations.push(format!("seed {seed}: {e}"));
                continue;
            }
        };
        ranks_seen[config.n_ranks] += 1;
        messages += outcome.user_messages;
        max_rounds = max_rounds.max(outcome.rounds);
        if !outcome.reached_shutdown {
            timeouts.push(seed);
        }
        for v in &outcome.violations {
            violations.push(format!("seed {seed}: {v}"));
        }
    }
    let elapsed = start.elapsed();
    for v in violations.iter().take(5) {
        println!("    {v}");
    }
    let coverage = (1..=8).all(|n| ranks_seen[n] > 0);
    let safety = verdict(
        violations.is_empty() && elapsed < TIME_LIMIT && coverage,
        format!(
            "{RUNS} simulations (seeds 0..{RUNS}, 1-8 ranks, {messages} user messages), \
             {} violations, {:.1}s (limit {}s)",
            violations.len(),
            elapsed.as_secs_f64(),
            TIME_LIMIT.as_secs()
        ),
    );
    let liveness = verdict(
        timeouts.is_empty(),
        format!(
            "{} of {RUNS} runs missed SHUTDOWN within {PASS_BUDGET} passes; longest run {max_rounds} passes{}",
            timeouts.len(),
            if timeouts.is_empty() {
                String::new()
            } else {
                format!(", seeds {:?}", &timeouts[..timeouts.len().min(10)])
            }
        ),
    );
    (safety, liveness)
}

/// Random DAG over `n` tasks with edges from lower to higher index. Task j
/// waits on up to 16 distinct earlier tasks; tasks without predecessors are
/// seeded once.
fn random_dag(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|j| {
            let want = rng.random_range(1..=16usize);
            if j == 0 || rng.random_bool(0.02) {
                return Vec::new();
            }
            let mut preds = sample(rng, j, want.min(j)).into_vec();
            preds.sort_unstable();
            preds
        })
        .collect()
}

fn ptg_exactness() -> Verdict {
    const SEEDS: u64 = 100;
    let mut failures = Vec::new();
    let mut total_tasks = 0;
    let mut max_indegree = 0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(0xda60 ^ seed);
        let n = rng.random_range(1..=10_000);
        let threads = rng.random_range(1..=8);
        let preds = random_dag(&mut rng, n);
        let mut succs = vec![Vec::new(); n];
        for (j, p) in preds.iter().enumerate() {
            for &i in p {
                succs[i].push(j);
            }
        }
        max_indegree = max_indegree.max(preds.iter().map(Vec::len).max().unwrap_or(0));
        total_tasks += n;

        let pool = ThreadPool::new(threads, None).unwrap();
        let tf = Taskflow::<u32>::new(&pool);
        let clock = Arc::new(AtomicU64::new(0));
        let stamps: Arc<Vec<(AtomicU64, AtomicU64, AtomicU32)>> = Arc::new(
            (0..n)
                .map(|_| (AtomicU64::new(0), AtomicU64::new(0), AtomicU32::new(0)))
                .collect(),
        );
        let indegree: Vec<usize> = preds.iter().map(|p| p.len().max(1)).collect();
        let succs = Arc::new(succs);
        let salt = rng.next_u64() as usize;
        let weak = tf.downgrade();
        let (c, st, sc) = (Arc::clone(&clock), Arc::clone(&stamps), Arc::clone(&succs));
        tf.set_indegree(move |&k| indegree[k as usize])
            .set_mapping(move |&k| ((k as usize).wrapping_mul(2654435761) ^ salt) % threads)
            .set_priority(|&k| (k % 5) as f64)
            .set_binding(|&k| k % 7 != 0)
            .set_task(move |k| {
                let slot = &st[k as usize];
                slot.0.store(c.fetch_add(1, Ordering::SeqCst) + 1, Ordering::SeqCst);
                slot.2.fetch_add(1, Ordering::SeqCst);
                slot.1.store(c.fetch_add(1, Ordering::SeqCst) + 1, Ordering::SeqCst);
                for &s in &sc[k as usize] {
                    weak.fulfill_promise(s as u32);
                }
            });
        for (k, p) in preds.iter().enumerate() {
            if p.is_empty() {
                tf.fulfill_promise(k as u32);
            }
        }
        if let Err(e) = pool.join() {
            failures.push(format!("seed {seed}: {e}"));
            continue;
        }
        let runs: Vec<u32> = stamps.iter().map(|s| s.2.load(Ordering::SeqCst)).collect();
        if let Some(k) = runs.iter().position(|&r| r != 1) {
            failures.push(format!("seed {seed}: task {k} ran {} times", runs[k]));
            continue;
        }
        let late = preds.iter().enumerate().find_map(|(j, p)| {
            let start = stamps[j].0.load(Ordering::SeqCst);
            p.iter()
                .find(|&&i| stamps[i].1.load(Ordering::SeqCst) >= start)
                .map(|&i| (i, j))
        });
        if let Some((i, j)) = late {
            failures.push(format!("seed {seed}: task {j} started before {i} ended"));
        }
        if tf.resident_keys() != 0 {
            failures.push(format!("seed {seed}: {} keys left in shards", tf.resident_keys()));
        }
    }
    for f in failures.iter().take(5) {
        println!("    {f}");
    }
    verdict(
        failures.is_empty(),
        format!(
            "{SEEDS} random DAGs, {total_tasks} tasks, indegree up to {max_indegree}, \
             1-8 threads: {} violations",
            failures.len()
        ),
    )
}

fn overhead() -> Verdict {
    const THREADS: usize = 4;
    const TASKS: usize = 4000;
    let cpus = thread::available_parallelism().map_or(1, |n| n.get());
    let long = micro::nodeps(THREADS, TASKS, Duration::from_micros(100), false).unwrap();
    let short = micro::nodeps(THREADS, TASKS, Duration::from_micros(1), false).unwrap();
    let single = micro::nodeps(1, TASKS, Duration::from_micros(100), false).unwrap();
    verdict(
        long.efficiency() >= 0.90,
        format!(
            "nodeps, {THREADS} threads, {TASKS} x 100us: efficiency {:.3} (need >= 0.90); \
             1us tasks {:.3} (reported only); 1 thread x 100us {:.3}; host exposes {cpus} CPU(s)",
            long.efficiency(),
            short.efficiency(),
            single.efficiency()
        ),
    )
}

fn cholesky_factor(ranks: usize, threads: usize) -> Result<(Dense, TaskCounts), String> {
    let config = CholeskyConfig {
        matrix_size: 256,
        block_size: 64,
        n_threads: threads,
        seed: 2024,
        trace: false,
    };
    let out = Launch::loopback(ranks)
        .run(|comm| cholesky::run_rank(comm, &config))
        .map_err(|e| e.to_string())?;
    let counts = out.iter().fold(TaskCounts::default(), |c, (_, r)| c + r.counts);
    let l = out
        .into_iter()
        .find_map(|(_, r)| r.factor)
        .ok_or("no factor on rank 0")?;
    Ok((l, counts))
}

fn cholesky_correctness() -> Verdict {
    let start = Instant::now();
    let a = Dense::random_spd(256, 2024);
    let (single, distributed) = match (cholesky_factor(1, 4), cholesky_factor(4, 2)) {
        (Ok((s, _)), Ok((d, _))) => (s, d),
        (Err(e), _) | (_, Err(e)) => return verdict(false, e),
    };
    let r1 = cholesky::residual(&a, &single);
    let r4 = cholesky::residual(&a, &distributed);
    let diff = cholesky::max_block_diff(&single, &distributed);
    verdict(
        r1 <= 1e-10 && r4 <= 1e-10 && diff <= 1e-12,
        format!(
            "N=256 b=64: residual {r1:.2e} (1x4), {r4:.2e} (4x2), limit 1e-10; \
             blockwise difference {diff:.2e}, limit 1e-12; {:.1}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn gemm_correctness() -> Verdict {
    let config = GemmConfig {
        matrix_size: 256,
        block_size: 64,
        n_threads: 2,
        seed: 77,
        input: GemmInput::Random,
    };
    let out = match Launch::loopback(4).run(|comm| gemm2d::run_rank(comm, &config)) {
        Ok(out) => out,
        Err(e) => return verdict(false, e.to_string()),
    };
    let tasks: usize = out.iter().map(|(_, r)| r.tasks).sum();
    let Some(c) = out.into_iter().find_map(|(_, r)| r.product) else {
        return verdict(false, "no product on rank 0");
    };
    let (a, b) = config.inputs();
    let error = c.max_abs_diff(&a.matmul(&b));
    let limit = 1e-10 * 256.0;
    verdict(
        error <= limit && tasks == 64,
        format!("N=256 b=64, 4 ranks, {tasks} tasks: max error {error:.2e}, limit {limit:.2e}"),
    )
}

fn task_counts() -> Verdict {
    let expected = TaskCounts {
        potrf: 8,
        trsm: 28,
        gemm: 84,
    };
    let enumerated = cholesky::enumerate_dag(8);
    let closed = TaskCounts::closed_form(8);
    let config = CholeskyConfig {
        matrix_size: 128,
        block_size: 16,
        n_threads: 2,
        seed: 5,
        trace: false,
    };
    let executed = Launch::loopback(4)
        .run(|comm| cholesky::run_rank(comm, &config))
        .map(|out| out.iter().fold(TaskCounts::default(), |c, (_, r)| c + r.counts));
    let detail = format!(
        "n=8: executed {executed:?}, enumerated {enumerated:?}, closed form {closed:?}"
    );
    let ok = matches!(&executed, Ok(c) if *c == expected)
        && matches!(&enumerated, Ok(c) if *c == expected)
        && closed == expected;
    verdict(ok, detail)
}

fn random_desc(rng: &mut ChaCha8Rng, depth: u32) -> TypeDesc {
    match rng.random_range(0..if depth < 3 { 3 } else { 2 }) {
        0 => TypeDesc::Scalar(ElemType::ALL[rng.random_range(0..ElemType::ALL.len())]),
        1 => TypeDesc::View(ElemType::ALL[rng.random_range(0..ElemType::ALL.len())]),
        _ => TypeDesc::Tuple(
            (0..rng.random_range(0..4))
                .map(|_| random_desc(rng, depth + 1))
                .collect(),
        ),
    }
}

fn random_bytes(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    let mut out = vec![0; n];
    rng.fill_bytes(&mut out);
    out
}

fn random_value(rng: &mut ChaCha8Rng, desc: &TypeDesc) -> Value {
    match desc {
        TypeDesc::Scalar(e) => {
            let bytes = random_bytes(rng, 8);
            let b2 = [bytes[0], bytes[1]];
            let b4 = [bytes[0], bytes[1], bytes[2], bytes[3]];
            let b8: [u8; 8] = bytes.try_into().unwrap();
            match e {
                ElemType::U8 => Value::U8(b8[0]),
                ElemType::I8 => Value::I8(b8[0] as i8),
                ElemType::U16 => Value::U16(u16::from_le_bytes(b2)),
                ElemType::I16 => Value::I16(i16::from_le_bytes(b2)),
                ElemType::U32 => Value::U32(u32::from_le_bytes(b4)),
                ElemType::I32 => Value::I32(i32::from_le_bytes(b4)),
                ElemType::U64 => Value::U64(u64::from_le_bytes(b8)),
                ElemType::I64 => Value::I64(i64::from_le_bytes(b8)),
                ElemType::F32 => Value::F32(f32::from_bits(u32::from_le_bytes(b4))),
                ElemType::F64 => Value::F64(f64::from_bits(u64::from_le_bytes(b8))),
            }
        }
        TypeDesc::View(e) => {
            let len = rng.random_range(0..40);
            Value::View(View::from_bytes(*e, random_bytes(rng, len * e.width())).unwrap())
        }
        TypeDesc::Tuple(items) => Value::Tuple(items.iter().map(|d| random_value(rng, d)).collect()),
    }
}

/// Byte layout written out independently of the codec: little-endian
/// scalars, tuples as the concatenation of their fields, views as a u64 byte
/// count followed by the bytes.
fn reference_encoding(out: &mut Vec<u8>, value: &Value) {
    match value {
        Value::U8(x) => out.push(*x),
        Value::I8(x) => out.push(*x as u8),
        Value::U16(x) => out.extend(x.to_le_bytes()),
        Value::I16(x) => out.extend(x.to_le_bytes()),
        Value::U32(x) => out.extend(x.to_le_bytes()),
        Value::I32(x) => out.extend(x.to_le_bytes()),
        Value::U64(x) => out.extend(x.to_le_bytes()),
        Value::I64(x) => out.extend(x.to_le_bytes()),
        Value::F32(x) => out.extend(x.to_bits().to_le_bytes()),
        Value::F64(x) => out.extend(x.to_bits().to_le_bytes()),
        Value::Tuple(items) => items.iter().for_each(|v| reference_encoding(out, v)),
        Value::View(v) => {
            out.extend((v.as_bytes().len() as u64).to_le_bytes());
            out.extend_from_slice(v.as_bytes());
        }
    }
}

fn codec_round_trip() -> Verdict {
    const CASES: u64 = 10_000;
    let mut failures = Vec::new();
    let mut bytes_total = 0;
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let signature: Vec<TypeDesc> = (0..rng.random_range(0..6))
            .map(|_| random_desc(&mut rng, 0))
            .collect();
        let values: Vec<Value> = signature.iter().map(|d| random_value(&mut rng, d)).collect();
        let am_id = rng.next_u32() % 1_000_000;
        let frame = codec::encode(am_id, &values);
        let mut expected = am_id.to_le_bytes().to_vec();
        values.iter().for_each(|v| reference_encoding(&mut expected, v));
        bytes_total += frame.len();
        let ok = frame == expected
            && matches!(codec::decode(&frame, &signature),
                Ok((id, ref back)) if id == am_id && *back == values
                    && codec::encode(id, back) == frame);
        if !ok {
            failures.push(seed);
        }
    }
    verdict(
        failures.is_empty(),
        format!(
            "{CASES} random signatures ({bytes_total} bytes): {} failures{}",
            failures.len(),
            if failures.is_empty() {
                String::new()
            } else {
                format!(", seeds {:?}", &failures[..failures.len().min(10)])
            }
        ),
    )
}

fn main() -> ExitCode {
    let mut results: HashMap<u32, Verdict> = HashMap::new();
    let (safety, liveness) = completion_protocol();
    results.insert(1, safety);
    results.insert(2, liveness);
    results.insert(3, ptg_exactness());
    results.insert(4, overhead());
    results.insert(5, cholesky_correctness());
    results.insert(6, gemm_correctness());
    results.insert(7, task_counts());
    results.insert(8, codec_round_trip());

    let names = [
        "",
        "completion safety",
        "completion liveness",
        "task graph exactness",
        "scheduling overhead",
        "cholesky correctness",
        "gemm correctness",
        "cholesky task counts",
        "codec round trip",
    ];
    let mut failed = 0;
    for id in 1..=8 {
        let v = &results[&id];
        failed += usize::from(!v.pass);
        println!(
            "{} [{id}] {}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            names[id as usize],
            v.detail
        );
    }
    println!("acceptance: {} of 8 criteria passed", 8 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

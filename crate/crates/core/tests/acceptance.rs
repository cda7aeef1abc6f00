//! Acceptance suite: one pass/fail line per criterion, non-zero exit status
//! if any criterion fails.

mod common;

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tensorslice::bench::{run_bench, BenchConfig, BenchRow, Experiment};
use tensorslice::executor::{execute, execute_all_slicings, Engine};
use tensorslice::expr::{parse, CheckMode, ContractionSpec, ValidatedContraction};
use tensorslice::kernels::ReferenceBackend;
use tensorslice::metric::{invert_metric, lower_index, raise_index, spherical_metric, MetricTensor};
use tensorslice::oracle::{contract_naive, contract_naive_counted, DEFAULT_WORK_CAP};
use tensorslice::planner::{classify, enumerate_slicings, plan, ContractionClass, KernelKind, PlanError, Policy, SlicingPair};
use tensorslice::tensor::{Fill, Tensor, Variance};

use common::{max_rel_err, random_case};

type Outcome = Result<String, String>;

const SQUARE_DIRECT: &str = "R[+a,-e] = A[+a,+b,+g] * B[-e,-b,-g]";
const SQUARE_COPY: &str = "R[+b,-e] = A[+a,+b,+g] * B[-g,-a,-e]";
const XY_SAME_ORDER: &str = "R[+a,+b,+c,+d] = X[+i,+a,+j,+b] * Y[-i,+c,-j,+d]";
const XY_SWAPPED: &str = "R[+a,+b,+c,+d] = X[+i,+a,+j,+b] * Y[-j,+c,-i,+d]";
const MATMUL: &str = "C[+i,-k] = A[+i,+j] * B[-j,-k]";
const FULL: &str = "K[] = T[+a,+b,+g] * S[-a,-b,-g]";

fn spec(text: &str) -> ContractionSpec {
    parse(text, CheckMode::Strict).unwrap_or_else(|e| panic!("{text}: {e}"))
}

fn uniform(text: &str, n: usize) -> ValidatedContraction {
    let s = spec(text);
    let extents = s.all_labels().into_iter().map(|l| (l, n)).collect();
    ValidatedContraction::from_extents(&s, &extents).unwrap()
}

fn check(ok: bool, fails: &mut Vec<String>, msg: impl FnOnce() -> String) {
    if !ok {
        fails.push(msg());
    }
}

/// The 18 double contractions of `A[a,b,g]` with an order-3 `B` holding two
/// of A's labels and a free `e`, in every mode order.
fn double_contractions() -> Vec<String> {
    let pairs = [("b", "g"), ("a", "g"), ("a", "b")];
    let mut out = Vec::new();
    for (x, y) in pairs {
        let free_a = ["a", "b", "g"].into_iter().find(|l| *l != x && *l != y).unwrap();
        let orders = [[x, y, "e"], [y, x, "e"], [x, "e", y], [y, "e", x], ["e", x, y], ["e", y, x]];
        for o in orders {
            let b: Vec<String> = o.iter().map(|l| format!("-{l}")).collect();
            out.push(format!("R[+{free_a},-e] = A[+a,+b,+g] * B[{}]", b.join(",")));
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let all = double_contractions();
    let mut c31 = Vec::new();
    let mut c32 = 0;
    for t in &all {
        match classify(&spec(t)) {
            ContractionClass::ThreeOne => c31.push(t.clone()),
            ContractionClass::ThreeTwo => c32 += 1,
            other => return Err(format!("{t} classified as {other}")),
        }
    }
    let mut fails = Vec::new();
    check(all.len() == 18, &mut fails, || format!("generated {} contractions", all.len()));
    check(
        classify(&spec("R[+b,-e] = A[+a,+b,+g] * B[-g,-a,-e]")) == ContractionClass::ThreeOne,
        &mut fails,
        || "A[a,b,g]*B[g,a,e] is not 3.1".into(),
    );
    check(
        classify(&spec("R[+a,-e] = A[+a,+b,+g] * B[-e,-b,-g]")) == ContractionClass::ThreeTwo,
        &mut fails,
        || "A[a,b,g]*B[e,b,g] is not 3.2".into(),
    );
    check(c31.len() == 13 && c32 == 5, &mut fails, || {
        format!(
            "expected 13 in 3.1 and 5 in 3.2, observed {} and {c32}; 3.1 cases: {}",
            c31.len(),
            c31.join(" | ")
        )
    });
    if fails.is_empty() {
        Ok(format!("{} in 3.1, {c32} in 3.2", c31.len()))
    } else {
        Err(fails.join("; "))
    }
}

fn criterion_2() -> Outcome {
    let catalogs: [(&str, &[(&str, KernelKind)]); 5] = [
        (
            MATMUL,
            &[
                ("10/00", KernelKind::Gemv),
                ("00/01", KernelKind::Gemv),
                ("01/10", KernelKind::Ger),
                ("10/01", KernelKind::Dot),
            ],
        ),
        (
            SQUARE_COPY,
            &[
                ("100/010", KernelKind::CopyGemm),
                ("001/100", KernelKind::CopyGemm),
                ("001/101", KernelKind::Gemv),
                ("101/110", KernelKind::Ger),
            ],
        ),
        (SQUARE_DIRECT, &[("010/010", KernelKind::Gemm), ("001/001", KernelKind::Gemm)]),
        (
            XY_SWAPPED,
            &[
                ("0011/1100", KernelKind::CopyGemm),
                ("0101/0101", KernelKind::Dot),
                ("1011/1011", KernelKind::Ger),
            ],
        ),
        (XY_SAME_ORDER, &[("0011/0011", KernelKind::Gemm)]),
    ];
    let mut fails = Vec::new();
    let mut matched = 0;
    for (text, entries) in catalogs {
        let rows = enumerate_slicings(&uniform(text, 4));
        for (s, kind) in entries {
            let pair: SlicingPair = s.parse().unwrap();
            match rows.iter().find(|r| r.slicing == pair) {
                Some(r) if r.report.kernel == *kind => matched += 1,
                Some(r) => fails.push(format!("{text}: {pair} gives {}, expected {kind}", r.report.kernel)),
                None => fails.push(format!("{text}: {pair} not enumerated")),
            }
        }
    }
    let direct_gemms = enumerate_slicings(&uniform(SQUARE_DIRECT, 4))
        .into_iter()
        .filter(|r| r.report.kernel == KernelKind::Gemm)
        .count();
    check(direct_gemms == 2, &mut fails, || {
        format!("direct square contraction has {direct_gemms} GEMM slicings, expected 2")
    });
    if fails.is_empty() {
        Ok(format!("{matched} catalog entries matched"))
    } else {
        Err(fails.join("; "))
    }
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let c = random_case(&mut rng, 6);
        let p = plan(&c.v, &Policy::Auto).map_err(|e| format!("{}: {e}", c.text))?;
        let (got, _) = execute(&p, &c.left, &c.right, &ReferenceBackend).map_err(|e| format!("{}: {e}", c.text))?;
        let want = contract_naive(&c.v, &c.left, &c.right).map_err(|e| e.to_string())?;
        let err = max_rel_err(&got, &want);
        if err > 1e-12 {
            return Err(format!("{} (slicing {}): relative error {err:e}", c.text, p.slicing));
        }
        worst = worst.max(err);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4096);
    let mut worst_pair = 0.0f64;
    let mut runs_total = 0;
    for _ in 0..50 {
        let c = random_case(&mut rng, 6);
        let runs = execute_all_slicings(&c.v, &c.left, &c.right, &ReferenceBackend, DEFAULT_WORK_CAP)
            .map_err(|e| format!("{}: {e}", c.text))?;
        runs_total += runs.len();
        for (i, a) in runs.iter().enumerate() {
            for b in &runs[i + 1..] {
                let err = max_rel_err(&a.output, &b.output);
                if err > 1e-12 {
                    return Err(format!("{}: {} vs {} differ by {err:e}", c.text, a.slicing, b.slicing));
                }
                worst_pair = worst_pair.max(err);
            }
        }
    }
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(120) {
        return Err(format!("took {elapsed:?}, limit 2 min"));
    }
    Ok(format!(
        "1000 auto plans, worst error {worst:.1e}; {runs_total} slicings over 50 specs, worst pairwise {worst_pair:.1e}"
    ))
}

fn criterion_4() -> Outcome {
    let mut fails = Vec::new();
    let mut auto = |text: &str, want: &[KernelKind]| {
        let p = plan(&uniform(text, 4), &Policy::Auto).unwrap();
        check(want.contains(&p.kernel), &mut fails, || format!("{text}: auto chose {}", p.kernel));
    };
    auto(FULL, &[KernelKind::Dot]);
    for t in [
        "R[+a] = T[+a,+b,+g] * G[-b,-g]",
        "R[+g] = T[+a,+b,+g] * G[-a,-b]",
        "R[+b] = T[+a,+b,+g] * G[-a,-g]",
    ] {
        auto(t, &[KernelKind::Gemv, KernelKind::CopyGemv]);
    }
    auto(SQUARE_COPY, &[KernelKind::CopyGemm]);
    auto(XY_SWAPPED, &[KernelKind::CopyGemm]);
    auto(SQUARE_DIRECT, &[KernelKind::Gemm]);
    auto(XY_SAME_ORDER, &[KernelKind::Gemm]);

    let forced = plan(
        &uniform("R[+g] = T[+a,+b,+g] * G[-a,-b]", 4),
        &Policy::ForceSlicing("100/10".parse().unwrap()),
    );
    match forced {
        Ok(p) if p.kernel == KernelKind::CopyGemv => {}
        other => fails.push(format!("forced 100/10 on R[g] = T[a,b,g]*G[a,b]: {other:?}")),
    }

    for (text, req) in [
        (FULL, "R3"),
        ("R[+g] = T[+a,+b,+g] * G[-a,-b]", "R3"),
        (SQUARE_COPY, "R1"),
    ] {
        match plan(&uniform(text, 4), &Policy::ForceKernel(KernelKind::Gemm)) {
            Err(PlanError::KernelUnreachable { reason, .. }) if reason.starts_with(req) => {}
            other => fails.push(format!("forcing GEMM on {text}: expected {req} violation, got {other:?}")),
        }
    }
    if fails.is_empty() {
        Ok("classes 1, 2, 3.1, 3.2 follow their recipes; forced GEMM names R3/R3/R1".into())
    } else {
        Err(fails.join("; "))
    }
}

fn symmetric_metric(n: usize, seed: u64) -> MetricTensor {
    let r = Tensor::new(&[n, n], &[Variance::Down, Variance::Down], Fill::SeededRandom(seed)).unwrap();
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = if i == j { n as f64 } else { 0.0 };
            g[i + j * n] = 0.5 * (r.data()[i + j * n] + r.data()[j + i * n]) + d;
        }
    }
    invert_metric(&Tensor::new(&[n, n], &[Variance::Down, Variance::Down], Fill::FromValues(g)).unwrap()).unwrap()
}

fn contract(text: &str, l: &Tensor, r: &Tensor) -> Tensor {
    let s = spec(text);
    Engine::default().contract(&s, l, r, &Policy::Auto).unwrap().0
}

fn naive(text: &str, l: &Tensor, r: &Tensor) -> Tensor {
    let s = spec(text);
    contract_naive(&ValidatedContraction::new(&s, l, r).unwrap(), l, r).unwrap()
}

fn criterion_5() -> Outcome {
    use Variance::*;
    let mut fails = Vec::new();

    // Spherical lowering of a (2,0)-tensor against the closed form.
    let (r, th) = (2.0f64, PI / 3.0);
    let m = spherical_metric(r, th).unwrap();
    let s = Tensor::new(&[3, 3], &[Up, Up], Fill::SeededRandom(5)).unwrap();
    let low = lower_index(&lower_index(&s, 0, &m).unwrap(), 1, &m).unwrap();
    let s2 = th.sin().powi(2);
    let w = [1.0, r * r, r * r * s2];
    let mut worst = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let want = w[i] * w[j] * s.data()[i + 3 * j];
            let got = low.data()[i + 3 * j];
            worst = worst.max((got - want).abs() / want.abs());
        }
    }
    // The three entries spelled out in closed form.
    let closed = [
        (0, 1, r * r),
        (2, 2, r.powi(4) * th.sin().powi(4)),
        (1, 2, r.powi(4) * s2),
    ];
    for (i, j, f) in closed {
        let want = f * s.data()[i + 3 * j];
        worst = worst.max((low.data()[i + 3 * j] - want).abs() / want.abs());
    }
    check(worst <= 1e-12, &mut fails, || format!("spherical lowering off by {worst:e}"));
    check(low.variance() == [Down, Down], &mut fails, || "lowered tensor keeps upper indices".into());

    // Raising after lowering returns the input, for spherical and general metrics.
    let g = symmetric_metric(4, 9);
    let t = Tensor::new(&[4, 3, 4], &[Up, Down, Up], Fill::SeededRandom(6)).unwrap();
    let mut worst_round = 0.0f64;
    for (metric, tensor) in [(&m, &s), (&g, &t)] {
        for mode in 0..tensor.rank() {
            if tensor.variance()[mode] != Up || tensor.extents()[mode] != metric.dimension() {
                continue;
            }
            let back = raise_index(&lower_index(tensor, mode, metric).unwrap(), mode, metric).unwrap();
            worst_round = worst_round.max(max_rel_err(&back, tensor));
        }
    }
    check(worst_round <= 1e-10, &mut fails, || format!("raise after lower off by {worst_round:e}"));

    // Lowering the contracted index in either operand gives the same result.
    let n = 4;
    let t3 = Tensor::new(&[n, n, n], &[Up, Up, Up], Fill::SeededRandom(7)).unwrap();
    let s20 = Tensor::new(&[n, n], &[Up, Up], Fill::SeededRandom(8)).unwrap();
    let lhs = contract("R[+a,+b,+r] = T[+a,+b,-g] * S[+g,+r]", &lower_index(&t3, 2, &g).unwrap(), &s20);
    let rhs = contract("R[+a,+b,+r] = T[+a,+b,+g] * S[-g,+r]", &t3, &lower_index(&s20, 0, &g).unwrap());
    let eq3 = max_rel_err(&lhs, &rhs);
    check(eq3 <= 1e-12, &mut fails, || format!("lowering in T vs in S differ by {eq3:e}"));

    // Six placements: which mode of T is lowered, and which mode of S it meets.
    let mut worst_six = 0.0f64;
    let t_labels = ["a", "b", "g"];
    for mode in (0..3).rev() {
        for s_pos in 0..2 {
            let lowered = lower_index(&t3, mode, &g).unwrap();
            let t_idx: Vec<String> = t_labels
                .iter()
                .enumerate()
                .map(|(i, l)| if i == mode { "-s".to_string() } else { format!("+{l}") })
                .collect();
            let s_idx = if s_pos == 0 { "+s,+r" } else { "+r,+s" };
            let free: Vec<String> = t_labels
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != mode)
                .map(|(_, l)| format!("+{l}"))
                .chain(["+r".to_string()])
                .collect();
            let text = format!("R[{}] = T[{}] * S[{s_idx}]", free.join(","), t_idx.join(","));
            let got = contract(&text, &lowered, &s20);

            let explicit_t = {
                let up: Vec<String> = t_labels
                    .iter()
                    .enumerate()
                    .map(|(i, l)| if i == mode { "+m".to_string() } else { format!("+{l}") })
                    .collect();
                let out: Vec<String> = t_labels
                    .iter()
                    .enumerate()
                    .map(|(i, l)| if i == mode { "-s".to_string() } else { format!("+{l}") })
                    .collect();
                naive(&format!("T[{}] = T[{}] * G[-m,-s]", out.join(","), up.join(",")), &t3, g.g())
            };
            let want = naive(&text, &explicit_t, &s20);
            worst_six = worst_six.max(max_rel_err(&got, &want));
        }
    }
    check(worst_six <= 1e-12, &mut fails, || format!("metric placements off by {worst_six:e}"));

    if fails.is_empty() {
        Ok(format!(
            "spherical {worst:.1e}, round trip {worst_round:.1e}, operand swap {eq3:.1e}, six placements {worst_six:.1e}"
        ))
    } else {
        Err(fails.join("; "))
    }
}

fn gflops(rows: &[BenchRow], size: usize, kernel: KernelKind) -> Option<f64> {
    rows.iter()
        .filter(|r| r.size == size && r.kernel == kernel.to_string() && r.is_ok())
        .filter_map(|r| r.gflops)
        .reduce(f64::max)
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let mut fails = Vec::new();
    let mut lines = Vec::new();

    let square = BenchConfig {
        sizes: vec![150, 200],
        kernels: vec![KernelKind::Gemm, KernelKind::CopyGemm, KernelKind::Gemv],
        repetitions: 5,
        verify: true,
        ..BenchConfig::new(Experiment::Square3d)
    };
    let rows = run_bench(&square).map_err(|e| e.to_string())?;
    for r in rows.iter().filter(|r| r.status == "verify-failed") {
        fails.push(format!("{} {} size {} failed verification", r.expression, r.kernel, r.size));
    }
    for size in [150, 200] {
        let (Some(gemm), Some(copy), Some(gemv)) = (
            gflops(&rows, size, KernelKind::Gemm),
            gflops(&rows, size, KernelKind::CopyGemm),
            gflops(&rows, size, KernelKind::Gemv),
        ) else {
            fails.push(format!("square3d size {size}: missing rows"));
            continue;
        };
        lines.push(format!("square3d {size}: GEMM {gemm:.2} COPY+GEMM {copy:.2} GEMV {gemv:.2}"));
        check(gemm > gemv, &mut fails, || format!("size {size}: GEMM {gemm:.2} <= GEMV {gemv:.2}"));
        if size >= 200 {
            check(gemm > copy, &mut fails, || format!("size {size}: GEMM {gemm:.2} <= COPY+GEMM {copy:.2}"));
        } else {
            check(gemm >= copy, &mut fails, || format!("size {size}: GEMM {gemm:.2} < COPY+GEMM {copy:.2}"));
        }
    }

    let gr = BenchConfig {
        sizes: vec![200],
        repetitions: 5,
        verify: true,
        ..BenchConfig::new(Experiment::Gr4d)
    };
    let rows = run_bench(&gr).map_err(|e| e.to_string())?;
    check(rows.len() == 4 && rows.iter().all(BenchRow::is_ok), &mut fails, || {
        format!("gr4d rows: {:?}", rows.iter().map(|r| (&r.kernel, &r.status)).collect::<Vec<_>>())
    });
    let dot = gflops(&rows, 200, KernelKind::Dot).unwrap_or(f64::INFINITY);
    let others: Vec<(String, f64)> = rows
        .iter()
        .filter(|r| r.kernel != "DOT")
        .map(|r| (r.kernel.clone(), r.gflops.unwrap_or(0.0)))
        .collect();
    lines.push(format!(
        "gr4d 200: DOT {dot:.2} {}",
        others.iter().map(|(k, g)| format!("{k} {g:.2}")).collect::<Vec<_>>().join(" ")
    ));
    for (k, g) in &others {
        check(dot < *g, &mut fails, || format!("gr4d: DOT {dot:.2} not slower than {k} {g:.2}"));
    }

    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(600), &mut fails, || format!("took {elapsed:?}, limit 10 min"));
    if fails.is_empty() {
        Ok(lines.join("; "))
    } else {
        Err(format!("{} [{}]", fails.join("; "), lines.join("; ")))
    }
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut plans = 0;
    for _ in 0..100 {
        let c = random_case(&mut rng, 6);
        let product: u64 = c.v.extents().values().map(|&e| e as u64).product();
        let (_, madds) = contract_naive_counted(&c.v, &c.left, &c.right, DEFAULT_WORK_CAP).map_err(|e| e.to_string())?;
        if madds != product {
            return Err(format!("{}: oracle counted {madds}, expected {product}", c.text));
        }
        for row in enumerate_slicings(&c.v) {
            let p = plan(&c.v, &Policy::ForceSlicing(row.slicing.clone())).map_err(|e| e.to_string())?;
            let (_, stats) = execute(&p, &c.left, &c.right, &ReferenceBackend).map_err(|e| e.to_string())?;
            if p.flops != 2 * madds || stats.flops != p.flops {
                return Err(format!(
                    "{} {}: plan {} executed {} oracle {}",
                    c.text,
                    row.slicing,
                    p.flops,
                    stats.flops,
                    2 * madds
                ));
            }
            plans += 1;
        }
    }
    Ok(format!("{plans} plans over 100 specs match twice the oracle's multiply-add count"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("1 double-contraction classes", criterion_1),
        ("2 slicing catalogs", criterion_2),
        ("3 oracle equivalence", criterion_3),
        ("4 recipe conformance", criterion_4),
        ("5 metric operations", criterion_5),
        ("6 performance ordering", criterion_6),
        ("7 flop accounting", criterion_7),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {name} ({secs:.2}s): {detail}"),
            Err(detail) => {
                println!("FAIL criterion {name} ({secs:.2}s): {detail}");
                failed.push(name);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: {} failed: {}", failed.len(), failed.join(", "));
        std::process::exit(1);
    }
}

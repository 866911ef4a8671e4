//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use noma_core::harq::{self, BackendSpec, GainSpec, HarqConfig, Protocol, UeSpec};
use noma_core::pairing::{self, PowerAllocation, RateDemand};
use noma_core::phy::{
    compose_received, draw_channel_with, transmit_symbols, AccessMode, ChannelRealization, CodeConfig, FadingModel,
    FrameConfig, ModScheme, UeTxConfig,
};
use noma_core::rx::{mmse_decode_all, sic_decode, ChainDecoder, LinkContext, RxPolicy};
use noma_core::seqdesign::{self, GenerateOptions, PiKind, SignatureMatrix};
use noma_core::sim::{self, Curve, ExperimentConfig, RunOptions, Scenario};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn main() {
    let criteria: Vec<(&str, Duration, fn() -> Verdict)> = vec![
        ("1 WBE equality", Duration::from_secs(1), wbe_equality),
        ("2 Grassmann coherence", Duration::from_secs(30), grassmann_coherence),
        ("3 MU-MIMO floor", Duration::from_secs(600), mu_mimo_floor),
        ("4 NOMA/MU-MIMO gap shrinks with G", Duration::from_secs(600), gap_shrinks),
        ("5 smart HARQ retransmissions", Duration::from_secs(60), smart_harq),
        ("6 receiver adaptation", Duration::from_secs(60), receiver_adaptation),
        ("7 power allocation", Duration::from_secs(120), power_allocation),
        ("8 determinism", Duration::from_secs(900), determinism),
        ("9 loopback", Duration::from_secs(60), loopback),
    ];
    let mut failed = 0;
    for (name, limit, f) in criteria {
        let start = Instant::now();
        let v = f();
        let took = start.elapsed();
        let pass = v.pass && took <= limit;
        failed += usize::from(!pass);
        let timing = if took > limit { format!("{:.1} s, over {} s limit", took.as_secs_f64(), limit.as_secs()) } else { format!("{:.1} s", took.as_secs_f64()) };
        println!("{} criterion {name}: {} ({timing})", if pass { "PASS" } else { "FAIL" }, v.detail);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}

/// Direct double sum of squared inner products over the matrix entries.
fn tsc_oracle(s: &SignatureMatrix) -> f64 {
    let m = s.entries();
    let mut total = 0.0;
    for i in 0..m.ncols() {
        for j in 0..m.ncols() {
            let mut ip = Complex64::new(0.0, 0.0);
            for r in 0..m.nrows() {
                ip += m[(r, i)].conj() * m[(r, j)];
            }
            total += ip.norm_sqr();
        }
    }
    total
}

fn coherence_oracle(s: &SignatureMatrix) -> f64 {
    let m = s.entries();
    let mut mu: f64 = 0.0;
    for i in 0..m.ncols() {
        for j in 0..m.ncols() {
            if i != j {
                let ip: Complex64 = (0..m.nrows()).map(|r| m[(r, i)].conj() * m[(r, j)]).sum();
                mu = mu.max(ip.norm());
            }
        }
    }
    mu
}

fn wbe_equality() -> Verdict {
    let mut worst: f64 = 0.0;
    for (k, l) in [(6, 4), (8, 4), (12, 6)] {
        let g = match seqdesign::generate(k, l, PiKind::TotalSquaredCorrelation, GenerateOptions::default()) {
            Ok(g) => g,
            Err(e) => return verdict(false, format!("K={k} L={l}: {e}")),
        };
        let bound = (k * k) as f64 / l as f64;
        worst = worst.max((tsc_oracle(&g.matrix) - bound).abs());
    }
    verdict(worst <= 1e-6, format!("max |tsc - K^2/L| = {worst:.2e} (tol 1e-6)"))
}

fn grassmann_coherence() -> Verdict {
    let (k, l) = (4usize, 3usize);
    let bound = (((k - l) as f64) / ((l * (k - 1)) as f64)).sqrt();
    let g = match seqdesign::generate(k, l, PiKind::WorstCaseCoherence, GenerateOptions::default()) {
        Ok(g) => g,
        Err(e) => return verdict(false, e.to_string()),
    };
    let mu = coherence_oracle(&g.matrix);
    verdict((mu - bound).abs() <= 1e-3, format!("mu = {mu:.6}, bound = {bound:.6} (tol 1e-3)"))
}

fn bler_config(users: usize, grid: Vec<f64>, trials: usize, early_stop: usize, compare: Vec<usize>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { scenario: Scenario::BlerNoma, ..ExperimentConfig::default() };
    cfg.link.users = users;
    cfg.noma.l = 4;
    cfg.sim.snr_db = grid;
    cfg.sim.trials = trials;
    cfg.sim.early_stop_errors = early_stop;
    cfg.sim.batch = 250;
    cfg.sim.seed = 11;
    cfg.mimo.compare_groups = compare;
    cfg
}

fn mean_bler(c: &Curve) -> Vec<(f64, f64)> {
    c.points.iter().map(|p| (p.snr_db, p.mean_bler())).collect()
}

fn mu_mimo_floor() -> Verdict {
    let cfg = bler_config(6, vec![20.0, 30.0], 10_000, 0, vec![1]);
    let r = match sim::run_bler_sweep(&cfg, &RunOptions::default()) {
        Ok(r) => r,
        Err(e) => return verdict(false, e.to_string()),
    };
    let noma = mean_bler(r.curve("noma").expect("noma curve"));
    let mimo = mean_bler(r.curve("mu_mimo_g1").expect("mimo curve"));
    let (m20, m30) = (mimo[0].1, mimo[1].1);
    let (n20, n30) = (noma[0].1, noma[1].1);
    let floor = m20 > 0.0 && m30 <= 2.0 * m20 && m30 >= 0.5 * m20;
    let descending = n30 <= 0.5 * n20;
    verdict(
        floor && descending,
        format!("MU-MIMO G=1 BLER {m20:.4e} -> {m30:.4e}; NOMA BLER {n20:.4e} -> {n30:.4e} (20 -> 30 dB, 1e4 trials)"),
    )
}

/// Log-interpolated SNR where the curve first reaches `target`.
fn snr_at(curve: &[(f64, f64)], target: f64) -> Option<f64> {
    let i = curve.iter().position(|&(_, b)| b <= target)?;
    if i == 0 {
        return Some(curve[0].0);
    }
    let (s0, b0) = curve[i - 1];
    let (s1, b1) = curve[i];
    if b1 == 0.0 {
        return Some(s1);
    }
    let t = (b0.ln() - target.ln()) / (b0.ln() - b1.ln());
    Some(s0 + t * (s1 - s0))
}

fn min_nonzero(curve: &[(f64, f64)]) -> f64 {
    curve.iter().map(|&(_, b)| b).filter(|&b| b > 0.0).fold(f64::INFINITY, f64::min)
}

/// SNR gap MU-MIMO minus NOMA at the lowest BLER both curves reach, or
/// infinity when that level is above 1e-1.
fn gap(noma: &[(f64, f64)], mimo: &[(f64, f64)]) -> (f64, f64) {
    let target = min_nonzero(noma).max(min_nonzero(mimo));
    if target > 0.1 {
        return (f64::INFINITY, target);
    }
    match (snr_at(noma, target), snr_at(mimo, target)) {
        (Some(a), Some(b)) => (b - a, target),
        _ => (f64::INFINITY, target),
    }
}

fn gap_shrinks() -> Verdict {
    let grid: Vec<f64> = (0..17).map(|i| -10.0 + 2.5 * i as f64).collect();
    let cfg = bler_config(6, grid, 2000, 200, vec![1, 3]);
    let r = match sim::run_bler_sweep(&cfg, &RunOptions::default()) {
        Ok(r) => r,
        Err(e) => return verdict(false, e.to_string()),
    };
    let noma = mean_bler(r.curve("noma").expect("noma"));
    let (g1, t1) = gap(&noma, &mean_bler(r.curve("mu_mimo_g1").expect("g1")));
    let (g3, t3) = gap(&noma, &mean_bler(r.curve("mu_mimo_g3").expect("g3")));
    verdict(
        g3 < g1,
        format!("gap G=1 {g1:.2} dB at BLER {t1:.2e}, gap G=3 {g3:.2} dB at BLER {t3:.2e}"),
    )
}

/// Independent replay of one two-UE episode with static gains: per copy
/// SINR `p / (1 + undecoded co-located power)`, accumulated against the
/// threshold. Returns the retransmission count per UE.
fn harq_oracle(p: [f64; 2], theta: [f64; 2], m: usize, smart: bool) -> [usize; 2] {
    #[derive(Clone, Copy, PartialEq)]
    enum St {
        Unsent,
        Live,
        Decoded,
        Dropped,
    }
    let mut st = [St::Unsent; 2];
    let mut tx = [0usize; 2];
    let mut copies: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    let mut obs: Vec<Vec<usize>> = Vec::new();
    let mut gate = false;
    let acc = |u: usize, st: &[St; 2], copies: &[Vec<usize>; 2], obs: &[Vec<usize>]| -> f64 {
        copies[u]
            .iter()
            .map(|&c| {
                let interf: f64 = obs[c].iter().filter(|&&j| j != u && st[j] != St::Decoded).map(|&j| p[j]).sum();
                p[u] / (1.0 + interf)
            })
            .sum()
    };
    for _slot in 0..64 {
        if st.iter().all(|s| matches!(s, St::Decoded | St::Dropped)) {
            break;
        }
        let wants = |u: usize| matches!(st[u], St::Unsent | St::Live);
        let mut sent: Vec<usize> = Vec::new();
        if wants(0) {
            sent.push(0);
        }
        // a gated UE2 may only send new data
        if wants(1) && !(smart && gate && st[1] != St::Unsent) {
            sent.push(1);
        }
        if sent.is_empty() {
            break;
        }
        let o = obs.len();
        obs.push(sent.clone());
        for &u in &sent {
            copies[u].push(o);
            tx[u] += 1;
            st[u] = St::Live;
        }
        let mut order = sent.clone();
        order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
        for u in order {
            if acc(u, &st, &copies, &obs) >= theta[u] * (1.0 - 1e-12) {
                st[u] = St::Decoded;
            }
        }
        loop {
            let hit = (0..2).find(|&u| {
                !sent.contains(&u) && st[u] == St::Live && acc(u, &st, &copies, &obs) >= theta[u] * (1.0 - 1e-12)
            });
            match hit {
                Some(u) => st[u] = St::Decoded,
                None => break,
            }
        }
        for &u in &sent {
            if st[u] == St::Live && tx[u] > m {
                st[u] = St::Dropped;
            }
        }
        if smart {
            if gate && st[0] != St::Live {
                gate = false;
            }
            if !gate && sent.len() == 2 && st[0] == St::Live && st[1] != St::Decoded {
                gate = true;
            }
        }
    }
    [tx[0].saturating_sub(1), tx[1].saturating_sub(1)]
}

fn two_state(g: &GainSpec) -> [(f64, f64); 2] {
    match *g {
        GainSpec::TwoState { low, high, p_low } => [(low, p_low), (high, 1.0 - p_low)],
        GainSpec::Fixed(x) => [(x, 1.0), (x, 0.0)],
        GainSpec::Rayleigh { .. } => panic!("oracle needs discrete gains"),
    }
}

fn smart_harq() -> Verdict {
    let ts = |low: f64, high: f64| GainSpec::TwoState { low, high, p_low: 0.5 };
    let ue = |gain: GainSpec, rate: f64, power: f64| UeSpec { gain, power, rate };
    let instances: Vec<(Vec<UeSpec>, usize)> = vec![
        (vec![ue(ts(1.5, 3.0), 1.0, 1.0), ue(ts(0.6, 1.2), 1.0, 1.0)], 4),
        (vec![ue(ts(1.5, 3.0), 1.0, 1.0), ue(ts(0.6, 1.2), 0.5, 1.0)], 4),
        (vec![ue(ts(0.8, 2.0), 1.0, 1.0), ue(ts(0.5, 1.0), 1.0, 1.0)], 4),
        (vec![ue(ts(2.0, 4.0), 1.5, 1.0), ue(ts(0.3, 0.6), 0.8, 2.0)], 4),
        (
            vec![
                ue(GainSpec::TwoState { low: 1.0, high: 2.5, p_low: 0.3 }, 1.0, 1.0),
                ue(GainSpec::TwoState { low: 0.4, high: 1.1, p_low: 0.7 }, 1.0, 1.0),
            ],
            4,
        ),
    ];
    let episodes = 4000u64;
    let mut ok = true;
    let mut worst_z: f64 = 0.0;
    let mut lines = Vec::new();
    for (i, (ues, m)) in instances.into_iter().enumerate() {
        let cfg = HarqConfig { protocol: Protocol::SmartHarq, max_retx: m, ues: ues.clone(), ..HarqConfig::default() };
        let theta = [ues[0].threshold(), ues[1].threshold()];
        let (mut exact_smart, mut exact_base) = (0.0, 0.0);
        for &(g0, w0) in &two_state(&ues[0].gain) {
            for &(g1, w1) in &two_state(&ues[1].gain) {
                let p = [g0 * ues[0].power, g1 * ues[1].power];
                let s = harq_oracle(p, theta, m, true)[1] as f64;
                let b = harq_oracle(p, theta, m, false)[1] as f64;
                if w0 * w1 > 0.0 && s > b {
                    ok = false;
                }
                exact_smart += w0 * w1 * s;
                exact_base += w0 * w1 * b;
            }
        }
        let mut smart = Vec::new();
        let mut base = Vec::new();
        for e in 0..episodes {
            let seed = sim::episode_seed(7, e);
            smart.push(harq::run_smart_harq(&cfg, &BackendSpec::Abstract, seed).expect("episode").retransmissions[1]);
            base.push(harq::run_baseline_rtd(&cfg, &BackendSpec::Abstract, seed).expect("episode").retransmissions[1]);
        }
        let s = sim::Stat::from_samples(&smart);
        let b = sim::Stat::from_samples(&base);
        let z = (s.mean - exact_smart).abs() / s.se.max(1e-12);
        worst_z = worst_z.max(if (s.mean - exact_smart).abs() < 1e-12 { 0.0 } else { z });
        if (s.mean - exact_smart).abs() > 3.0 * s.se + 1e-12 || s.mean > b.mean || exact_smart > exact_base {
            ok = false;
        }
        lines.push(format!("#{i} sim {:.3} oracle {exact_smart:.3} baseline {:.3}", s.mean, b.mean));
    }
    verdict(ok, format!("UE2 E[retx]: {}; max |z| {worst_z:.2}", lines.join(", ")))
}

fn receiver_adaptation() -> Verdict {
    let gamma = 4.0;
    // receiver level: one SIC pass per matched seed
    let frame = FrameConfig {
        n_prb: 1,
        data_symbols: 12,
        subcarriers_per_prb: 12,
        receive_antennas: 1,
        mode: AccessMode::MuMimo { groups: 1, users_per_group: 2 },
    };
    let ues: Vec<UeTxConfig> = [10f64.powf(0.9), 10f64.powf(0.3)]
        .iter()
        .enumerate()
        .map(|(k, &power)| UeTxConfig {
            power,
            signature: k,
            modulation: ModScheme::Qpsk,
            tbs_bytes: 8,
            code: CodeConfig::default(),
        })
        .collect();
    let (mut full_total, mut skip_total, mut first_failed) = (0.0, 0.0, 0);
    let mut exact = true;
    for e in 0..1000u64 {
        let mut rng = sim::trial_rng(3, 0, 0, e);
        let ch = draw_channel_with(&frame, FadingModel::BlockFlat, &mut rng);
        let tbs: Vec<Vec<u8>> = ues.iter().map(|u| (0..u.info_bits()).map(|_| rng.random_range(0..2u8)).collect()).collect();
        let syms: Vec<_> = ues
            .iter()
            .zip(&tbs)
            .map(|(u, tb)| transmit_symbols(tb, u, &frame.layout(u.signature).unwrap()).unwrap())
            .collect();
        let y = compose_received(&frame, &ues, &syms, &ch, 1.0, &mut rng).unwrap();
        let ctx = LinkContext::new(&frame, &ues, &ch, 1.0).unwrap();
        let order = ctx.default_order();
        let mut dec = ChainDecoder { ues: &ues };
        let full = sic_decode(&ctx, &y, &order, &mut dec, RxPolicy::FullSic, gamma).unwrap();
        let skip = sic_decode(&ctx, &y, &order, &mut dec, RxPolicy::SkipOnFirstFailure, gamma).unwrap();
        let adapted = harq::apply_rx_adaptation(RxPolicy::SkipOnFirstFailure, &full, gamma);
        full_total += full.decode_cost;
        skip_total += skip.decode_cost;
        let failed = !full.outcomes[0].crc_pass;
        first_failed += usize::from(failed);
        let expect = if failed { gamma } else { 0.0 };
        if full.decode_cost - skip.decode_cost != expect
            || adapted.outcomes != skip.outcomes
            || adapted.decode_cost != skip.decode_cost
        {
            exact = false;
        }
    }
    // protocol level: baseline HARQ episodes with each block sent once, so
    // both policies see identical slot inputs
    let cfg = HarqConfig {
        max_retx: 0,
        full_buffer: true,
        max_slots: 12,
        ues: vec![
            UeSpec { gain: GainSpec::Rayleigh { mean: 2.0 }, power: 1.0, rate: 1.0 },
            UeSpec { gain: GainSpec::Rayleigh { mean: 1.0 }, power: 1.0, rate: 1.0 },
        ],
        ..HarqConfig::default()
    };
    let skip_cfg = HarqConfig { rx_policy: RxPolicy::SkipOnFirstFailure, ..cfg.clone() };
    let (mut ep_full, mut ep_skip, mut ep_fail) = (0.0, 0.0, 0);
    for e in 0..1000u64 {
        let seed = sim::episode_seed(5, e);
        let f = harq::run_episode(&cfg, &BackendSpec::Abstract, seed).unwrap();
        let s = harq::run_episode(&skip_cfg, &BackendSpec::Abstract, seed).unwrap();
        ep_full += f.metrics.decode_cost;
        ep_skip += s.metrics.decode_cost;
        for (a, b) in f.slot_costs.iter().zip(&s.slot_costs) {
            let expect = if b.first_failures > 0 { cfg.gamma() * b.first_failures as f64 } else { 0.0 };
            ep_fail += usize::from(b.first_failures > 0);
            if a.decode_cost - b.decode_cost != expect {
                exact = false;
            }
        }
    }
    let ok = exact && skip_total <= full_total && ep_skip <= ep_full && first_failed > 0 && ep_fail > 0;
    verdict(
        ok,
        format!(
            "receiver: cost {skip_total} vs {full_total} over 1000 slots ({first_failed} first failures); \
             HARQ: cost {ep_skip} vs {ep_full} over 1000 episodes ({ep_fail} slots with a first failure); \
             per-slot saving exactly Gamma: {exact}"
        ),
    )
}

fn power_allocation() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut worst, mut feasible, mut bad_infeasible) = (0.0f64, 0, 0);
    for _ in 0..10_000 {
        let gs = rng.random_range(0.5..10.0);
        let gw = rng.random_range(0.05..gs);
        let rs = rng.random_range(0.1..3.0);
        let rw = rng.random_range(0.1..3.0);
        let p_max = rng.random_range(1.0..100.0);
        match pairing::allocate_powers(gs, gw, rs, rw, p_max) {
            PowerAllocation::Feasible { p_strong, p_weak } => {
                feasible += 1;
                let strong = (1.0 + p_strong * gs / (1.0 + p_weak * gw)).log2();
                let weak = (1.0 + p_weak * gw).log2();
                worst = worst.max((strong - rs).abs()).max((weak - rw).abs());
            }
            PowerAllocation::Infeasible => {
                let pw = (rw.exp2() - 1.0) / gw;
                let ps = (rs.exp2() - 1.0) * (1.0 + pw * gw) / gs;
                if pw <= p_max && ps <= p_max {
                    bad_infeasible += 1;
                }
            }
        }
    }
    let mut max_z: f64 = 0.0;
    let n = 1_000_000;
    let (ra, rb, budget) = (1.0, 0.5, 2.0);
    let means = [0.5, 1.0, 2.0, 4.0, 8.0];
    for &ma in &means {
        for &mb in &means {
            let a = RateDemand { ue_id: 0, rate: ra, mean_gain: ma };
            let b = RateDemand { ue_id: 1, rate: rb, mean_gain: mb };
            let p = pairing::success_probability(&a, &b, budget).unwrap();
            let (ea, eb) = (Exp::new(1.0 / ma).unwrap(), Exp::new(1.0 / mb).unwrap());
            let (ta, tb) = (ra.exp2() - 1.0, rb.exp2() - 1.0);
            let hits = (0..n)
                .filter(|_| {
                    let (ga, gb): (f64, f64) = (ea.sample(&mut rng), eb.sample(&mut rng));
                    ga * budget >= ta * (gb * budget + 1.0) && gb * budget >= tb
                })
                .count();
            let est = hits as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt().max(1e-12);
            max_z = max_z.max((est - p).abs() / sigma);
        }
    }
    let ok = worst <= 1e-9 && bad_infeasible == 0 && feasible > 0 && max_z <= 3.0;
    verdict(
        ok,
        format!(
            "max rate residual {worst:.2e} over {feasible} feasible of 1e4 instances, {bad_infeasible} wrongly infeasible; \
             closed form vs 1e6 samples max |z| {max_z:.2} on 5x5 grid"
        ),
    )
}

fn determinism() -> Verdict {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut names: Vec<_> = std::fs::read_dir(&configs)
        .expect("configs directory")
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    names.sort();
    let dir = tempfile::tempdir().unwrap();
    let mut mismatched = Vec::new();
    for path in &names {
        let cfg = match ExperimentConfig::load(path) {
            Ok(c) => c,
            Err(e) => return verdict(false, e.to_string()),
        };
        let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
        let mut files = Vec::new();
        for (run, workers) in [(0, 1), (1, 1), (2, 8)] {
            let r = match sim::run_experiment(&cfg, &RunOptions { workers, cancel: None }) {
                Ok(r) => r,
                Err(e) => return verdict(false, format!("{stem}: {e}")),
            };
            let written = sim::persist(&r, &dir.path().join(format!("{stem}_{run}"))).unwrap();
            files.push(written.iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>());
        }
        if files[0] != files[1] || files[0] != files[2] {
            mismatched.push(stem);
        }
    }
    verdict(
        mismatched.is_empty() && !names.is_empty(),
        format!("{} shipped configs run twice serially and once on 8 workers; mismatched: {mismatched:?}", names.len()),
    )
}

fn loopback() -> Verdict {
    let k = 4;
    let sig = match seqdesign::generate(k, 4, PiKind::TotalSquaredCorrelation, GenerateOptions::default()) {
        Ok(g) => g.matrix,
        Err(e) => return verdict(false, e.to_string()),
    };
    let frame = FrameConfig::new(AccessMode::NomaWsma { signatures: sig });
    let mut report = Vec::new();
    let mut ok = true;
    for (scheme, tbs_bytes) in [(ModScheme::Qpsk, 20), (ModScheme::Qam16, 60)] {
        let ues: Vec<UeTxConfig> = (0..k)
            .map(|s| UeTxConfig { power: 1.0, signature: s, modulation: scheme, tbs_bytes, code: CodeConfig::default() })
            .collect();
        let ch = ChannelRealization::identity(k, frame.receive_antennas, frame.re_count());
        let mut rng = ChaCha8Rng::seed_from_u64(tbs_bytes as u64);
        let (mut recovered, mut blocks) = (0, 0);
        while blocks < 1000 {
            let tbs: Vec<Vec<u8>> = ues.iter().map(|u| (0..u.info_bits()).map(|_| rng.random_range(0..2u8)).collect()).collect();
            let syms: Vec<_> = ues
                .iter()
                .zip(&tbs)
                .map(|(u, tb)| transmit_symbols(tb, u, &frame.layout(u.signature).unwrap()).unwrap())
                .collect();
            let y = compose_received(&frame, &ues, &syms, &ch, 0.0, &mut rng).unwrap();
            let ctx = LinkContext::new(&frame, &ues, &ch, 0.0).unwrap();
            let outcomes = mmse_decode_all(&ctx, &y, &mut ChainDecoder { ues: &ues }).unwrap();
            for o in outcomes {
                blocks += 1;
                recovered += usize::from(o.crc_pass && o.bits == tbs[o.ue]);
            }
        }
        ok &= recovered == blocks;
        report.push(format!("{scheme:?}/TBS {tbs_bytes}: {recovered}/{blocks}"));
    }
    verdict(ok, report.join(", "))
}

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use moonshot_core::harness::{self, equivocation_vocabulary, CampaignSpec, MutantOptions};
use moonshot_core::sim::explore::{explore, ExploreOptions};
use moonshot_core::*;

const EXPLORE_DEPTH: usize = 10;
const EXPLORE_STATES: u64 = 2_183_570;
const REPLAY_DIGEST: &str = "417908fda7de7cab7635e2bc07db01fae3403250ebef8f78d4bc02720f7da11f";

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn base(f: usize, max_steps: u64) -> SimConfig {
    SimConfig {
        f,
        byzantine: BTreeSet::from([ValidatorId(0)]),
        max_steps,
        drop_probability: Rational::new(1, 20).unwrap(),
        duplicate_probability: Rational::new(1, 50).unwrap(),
        ..SimConfig::default()
    }
}

fn safety_campaign(f: usize, seeds: u64, max_steps: u64) -> Result<String, String> {
    let spec = CampaignSpec {
        base: base(f, max_steps),
        seeds: 0..seeds,
        adversaries: AdversaryStrategy::GENERATED.to_vec(),
        rotate_byzantine: true,
        jobs: jobs(),
    };
    let sum = harness::campaign(&spec).map_err(|e| e.to_string())?;
    let line = sum.render().lines().next().unwrap_or_default().to_string();
    if sum.is_safe() && sum.runs == seeds {
        Ok(line)
    } else {
        Err(sum.render().replace('\n', " | "))
    }
}

fn liveness() -> Result<String, String> {
    let cfg = SimConfig {
        f: 1,
        byzantine: BTreeSet::from([ValidatorId(3)]),
        max_steps: 2000,
        quiescent_timers: true,
        ..SimConfig::default()
    };
    let spec = CampaignSpec::new(cfg, 0..1000);
    let reports = harness::run_seeds(&CampaignSpec { jobs: jobs(), ..spec }).map_err(|e| e.to_string())?;
    let ok = reports.iter().filter(|r| r.is_safe() && r.min_commits() >= 10).count();
    let worst = reports.iter().map(|r| r.min_commits()).min().unwrap_or(0);
    let line = format!("{ok}/1000 seeds with every honest validator at >= 10 commits (worst {worst})");
    if ok >= 990 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn mutants() -> Result<String, String> {
    let opts = MutantOptions {
        jobs: jobs(),
        ..MutantOptions::default()
    };
    let res = harness::kill_all(&opts).map_err(|e| e.to_string())?;
    let lines: Vec<String> = res.iter().map(|r| r.render()).collect();
    let killed = res.iter().filter(|r| r.kill.is_some()).count();
    let line = format!("{killed}/{} killed: {}", res.len(), lines.join("; "));
    if killed == res.len() {
        Ok(line)
    } else {
        Err(line)
    }
}

fn exploration() -> Result<String, String> {
    let byz = ValidatorId(1);
    let cfg = SimConfig {
        byzantine: BTreeSet::from([byz]),
        ..SimConfig::default()
    };
    let mut opts = ExploreOptions::new(EXPLORE_DEPTH);
    opts.timers = true;
    opts.vocabulary = equivocation_vocabulary(byz, cfg.n());
    let r = explore(&cfg, &opts).map_err(|e| e.to_string())?;
    let line = r.render().trim_end().replace('\n', " | ");
    if r.complete && r.violations.is_empty() && r.states == EXPLORE_STATES {
        Ok(line)
    } else {
        Err(format!("{line} (expected {EXPLORE_STATES} states)"))
    }
}

fn replay_determinism() -> Result<String, String> {
    let spec = CampaignSpec {
        base: base(1, 2000),
        seeds: 0..100,
        adversaries: AdversaryStrategy::GENERATED.to_vec(),
        rotate_byzantine: true,
        jobs: 1,
    };
    let mut digest = Sha256::new();
    let mut bytes = 0;
    for seed in spec.seeds.clone() {
        let cfg = spec.config_for(seed);
        let (report, trace) = run_traced(&cfg).map_err(|e| e.to_string())?;
        let (_, again) = run_traced(&cfg).map_err(|e| e.to_string())?;
        if trace != again {
            return Err(format!("seed {seed}: rerun produced different trace bytes"));
        }
        let replayed = replay_str(&trace).map_err(|e| format!("seed {seed}: {e}"))?;
        if replayed.render() != report.render() {
            return Err(format!("seed {seed}: replayed report differs"));
        }
        digest.update(trace.as_bytes());
        bytes += trace.len();
    }
    let hex: String = digest.finalize().iter().map(|b| format!("{b:02x}")).collect();
    let line = format!("100 traces, {bytes} bytes, sha256 {hex}");
    if hex == REPLAY_DIGEST {
        Ok(line)
    } else {
        Err(format!("{line} (pinned {REPLAY_DIGEST})"))
    }
}

fn quorum_intersection() -> Result<(), String> {
    for f in 1..=3usize {
        let n = validator_count(f);
        let q = quorum_size(f);
        let quorums: Vec<u32> = (0u32..(1 << n)).filter(|m| m.count_ones() as usize == q).collect();
        for byz in (0u32..(1 << n)).filter(|m| m.count_ones() as usize == f) {
            for &a in &quorums {
                if let Some(&b) = quorums.iter().find(|&&b| a & b & !byz == 0) {
                    return Err(format!("f={f}: quorums {a:b} and {b:b} share no honest member"));
                }
            }
        }
    }
    Ok(())
}

fn ancestry_oracle() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for t in 0..1000 {
        let mut tree = BlockTree::new();
        let mut parent_of: BTreeMap<BlockId, BlockId> = BTreeMap::new();
        let mut blocks = vec![Block::genesis().clone()];
        let size = rng.gen_range(1..40);
        for k in 0..size {
            let p = blocks[rng.gen_range(0..blocks.len())].clone();
            let b = Block::child_of(&p, View(p.view().0 + rng.gen_range(1..4)), Payload::tagged(0, ValidatorId(0), k));
            parent_of.insert(b.id(), p.id());
            blocks.push(b);
        }
        // Insert in shuffled order so orphans get exercised too.
        let mut order: Vec<Block> = blocks[1..].to_vec();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for b in order {
            tree.insert_block(b).map_err(|e| format!("tree {t}: {e}"))?;
        }
        let brute = |a: BlockId, mut d: BlockId| loop {
            if a == d {
                return true;
            }
            match parent_of.get(&d) {
                Some(&p) => d = p,
                None => return false,
            }
        };
        for a in &blocks {
            for d in &blocks {
                let got = tree.is_ancestor(a.id(), d.id()).map_err(|e| format!("tree {t}: {e}"))?;
                if got != brute(a.id(), d.id()) {
                    return Err(format!("tree {t}: is_ancestor({:?}, {:?}) = {got}", a.id(), d.id()));
                }
            }
        }
    }
    Ok(())
}

fn handler_invariants() -> Result<(), String> {
    for seed in 0..10_000u64 {
        let out = common::random_sequence(seed, 1 + (seed % 2) as usize, 300);
        if let Some(v) = out.violations.first() {
            return Err(format!("sequence {seed}: {v}"));
        }
        out.budget.map_err(|e| format!("sequence {seed}: vote budget {e}"))?;
        out.uniqueness.map_err(|e| format!("sequence {seed}: uniqueness {e}"))?;
    }
    Ok(())
}

fn unit_properties() -> Result<String, String> {
    quorum_intersection()?;
    ancestry_oracle()?;
    handler_invariants()?;
    Ok("quorum intersection f=1..3, 1000 ancestry trees, 10000 handler sequences".into())
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(u32, &str, fn() -> Result<String, String>); 7] = [
        (1, "safety_small", || safety_campaign(1, 100_000, 2000)),
        (2, "safety_medium", || safety_campaign(2, 10_000, 3000)),
        (3, "liveness_smoke", liveness),
        (4, "mutation_kill", mutants),
        (5, "bounded_exploration", exploration),
        (6, "replay_determinism", replay_determinism),
        (7, "unit_properties", unit_properties),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let res = f();
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(msg) => println!("PASS {id} {name}: {msg} [{secs:.1}s]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {id} {name}: {msg} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

use atomrag::decomposer::{collect_trajectory, CollectionConfig};
use atomrag::evaluation::exact_match;
use atomrag::solver::{solve_decompose, solve_naive_rag, SolverConfig};
use atomrag::synthetic::{ChainSpec, MockStyle, SyntheticBench};

fn bench(hops: &[usize], per: usize, seed: u64) -> SyntheticBench {
    let spec = ChainSpec {
        seed,
        hop_counts: hops.iter().flat_map(|&k| std::iter::repeat_n(k, per)).collect(),
        ..ChainSpec::default()
    };
    SyntheticBench::generate(&spec).unwrap()
}

#[test]
fn gold_decomposition_solves_every_chain_and_naive_rag_does_not() {
    let b = bench(&[1, 2, 3, 4, 5], 8, 11);
    let gw = b.mock_gateway(MockStyle::Gold);
    let kb = b.build_kb(&gw).unwrap();
    let cfg = SolverConfig::default();
    let mut decomposed = 0;
    let mut naive = 0;
    for r in &b.records {
        let d = solve_decompose(&kb, &r.question, &cfg, &gw).unwrap();
        decomposed += exact_match(&d.answer, &r.gold_answers) as usize;
        let n = solve_naive_rag(&kb, &r.question, &cfg, &gw, false).unwrap();
        naive += exact_match(&n.answer, &r.gold_answers) as usize;
    }
    assert_eq!(decomposed, 40);
    assert!(naive <= 20, "naive solved {naive}");
}

#[test]
fn exploration_recovers_near_miss_chains() {
    let b = bench(&[1, 2, 3, 4], 5, 12);
    let gw = b.mock_gateway(MockStyle::NearMiss);
    let kb = b.build_kb(&gw).unwrap();
    let cfg = CollectionConfig::default();
    let mut explored = 0;
    let mut greedy = 0;
    for r in &b.records {
        let (c, _) = collect_trajectory(&kb, &r.question, &r.gold_answers, &cfg, &gw).unwrap();
        explored += exact_match(&c.trajectory.final_answer, &r.gold_answers) as usize;
        let d = solve_decompose(&kb, &r.question, &cfg.solver, &gw).unwrap();
        greedy += exact_match(&d.answer, &r.gold_answers) as usize;
    }
    println!("explored {explored}/20 greedy {greedy}/20");
    assert!(explored >= 16, "explored {explored}");
    assert_eq!(greedy, 0);
}

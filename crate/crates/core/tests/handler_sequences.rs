mod common;

#[test]
fn random_handler_sequences_keep_vote_budget_and_unique_certificates() {
    let mut votes = 0;
    let mut certs = 0;
    for seed in 0..2000 {
        let f = 1 + (seed % 2) as usize;
        let out = common::random_sequence(seed, f, 300);
        assert!(out.violations.is_empty(), "seed {seed}: {:?}", out.violations);
        assert_eq!(out.budget, Ok(()), "seed {seed}");
        assert_eq!(out.uniqueness, Ok(()), "seed {seed}");
        votes += out.votes;
        certs += out.certificates;
    }
    // The sequences must actually exercise voting and aggregation.
    assert!(votes > 20_000, "only {votes} votes");
    assert!(certs > 2_000, "only {certs} certificates");
}

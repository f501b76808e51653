use notionlab::adversaries::{AttackScript, GuessRule};
use notionlab::challenger::GameConfig;
use notionlab::harness::{estimate_advantage, transcripts, Bounds, Exec, QuerySampler};
use notionlab::notions;
use notionlab::protocols::{LeakageFunction, ProtocolSpec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const NOTIONS: [&str; 6] = ["S!O", "SM!L", "(SR)!O", "(SM)!L", "C!O", "(2S)!L"];

fn sampled_script(notion: &str, seed: u64, guess: GuessRule) -> AttackScript {
    let n = notions::parse(notion).unwrap();
    let sample = QuerySampler::new(&n, &Bounds::default()).sample(&mut ChaCha8Rng::seed_from_u64(seed));
    AttackScript { notion: n.name, steps: sample.steps, guess }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn execution_mode_does_not_change_results(idx in 0..NOTIONS.len(), seed in any::<u64>(), leak in 0usize..3) {
        let leaks = [vec![], vec![LeakageFunction::CommCount], vec![LeakageFunction::MessageLengths]];
        let protocol = ProtocolSpec::leaky(&leaks[leak]);
        let script = sampled_script(NOTIONS[idx], seed, GuessRule::Uniform);
        let n = notions::parse(NOTIONS[idx]).unwrap();
        let seq = estimate_advantage(&n, &protocol, &script, 64, seed, GameConfig::default(), Exec::Sequential).unwrap();
        let par = estimate_advantage(&n, &protocol, &script, 64, seed, GameConfig::default(), Exec::Parallel).unwrap();
        prop_assert_eq!(seq, par);
        prop_assert_eq!(
            transcripts(&n, &protocol, &script, 16, seed, Exec::Sequential),
            transcripts(&n, &protocol, &script, 16, seed, Exec::Parallel)
        );
    }

    #[test]
    fn scripts_survive_serialization(idx in 0..NOTIONS.len(), seed in any::<u64>()) {
        let script = sampled_script(NOTIONS[idx], seed, GuessRule::Constant { bit: 1 });
        let back: AttackScript = serde_json::from_str(&serde_json::to_string(&script).unwrap()).unwrap();
        prop_assert_eq!(back, script);
    }
}

use difftune_core::env::arith::*;
use difftune_core::paramspace;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ground_truth_always_verifies(seed in any::<u64>(), pseed in any::<u64>()) {
        let spec = parameter_spec();
        let config = paramspace::sample_uniform(&spec, pseed);
        let params = ArithParams::from_config(&config).unwrap();
        prop_assert!(params.check().is_ok());
        if let Ok(problem) = generate_problem(&params, seed) {
            prop_assert!(verify(&problem, &problem.ground_truth));
            prop_assert!(score_response(&problem, &format_final(&problem.ground_truth)));
            prop_assert_eq!(generate_problem(&params, seed).unwrap(), problem);
        }
    }

    #[test]
    fn final_answers_round_trip(seq in prop::collection::vec(prop::sample::select(ArithOperator::ALL.to_vec()), 1..12)) {
        prop_assert_eq!(parse_final(&format_final(&seq)), Some(seq));
    }

    #[test]
    fn enumeration_is_sorted_and_sound(x in 2i64..30, seq in prop::collection::vec(prop::sample::select(ArithOperator::ALL.to_vec()), 1..4)) {
        let Ok(y) = eval_sequence(&seq, &Num::int(x)) else { return Ok(()) };
        let problem = ArithProblem { x: Num::int(x), y, ground_truth: seq.clone(), prompt: String::new() };
        let sols = enumerate_solutions(&problem, &ArithOperator::ALL, seq.len(), 10_000);
        prop_assert!(sols.contains(&seq));
        prop_assert!(sols.iter().all(|s| verify(&problem, s)));
        prop_assert!(sols.windows(2).all(|w| w[0] < w[1]));
        if let Search::Found(best) = shortest_solution(&problem, &ArithOperator::ALL, seq.len(), 100_000) {
            let shortest = sols.iter().map(Vec::len).min().unwrap();
            prop_assert_eq!(best.len(), shortest);
            prop_assert!(verify(&problem, &best));
        } else {
            prop_assert!(false, "shortest search failed");
        }
    }
}

#[test]
fn over_long_answers_are_rejected() {
    let problem = ArithProblem { x: Num::int(3), y: Num::int(0), ground_truth: vec![ArithOperator::Sub], prompt: String::new() };
    assert!(verify(&problem, &[ArithOperator::Sub; 16]));
    assert!(!verify(&problem, &[ArithOperator::Sub; 17]));
}

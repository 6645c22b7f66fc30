use difftune_core::env::spatial::*;
use proptest::prelude::*;

fn moves() -> impl Strategy<Value = Vec<MoveDir>> {
    prop::sample::subsequence(MoveDir::ALL.to_vec(), 1..=4)
}

fn rotations() -> impl Strategy<Value = Vec<u32>> {
    prop::sample::subsequence(ROTATIONS.to_vec(), 1..=5)
}

/// Enabled flags get a non-empty set and up to `max` actions in total.
fn params(widths: std::ops::RangeInclusive<u32>, max: u32) -> impl Strategy<Value = SpatialParams> {
    (widths, any::<bool>(), prop::array::uniform4(any::<bool>()), moves(), rotations(), moves(), rotations(), prop::array::uniform4(0..=max))
        .prop_map(move |(width, wrap, on, bm, br, pm, pr, counts)| {
            let mut left = max;
            let mut take = |enabled: bool, want: u32| {
                let n = if enabled { want.min(left) } else { 0 };
                left -= n;
                n
            };
            let nbr = take(on[1], counts[0]);
            let nbm = take(on[0], counts[1]);
            let npr = take(on[3], counts[2]);
            let npm = take(on[2], counts[3]);
            SpatialParams {
                width,
                wrap_around: wrap,
                board_moves: on[0],
                board_allowed_moves: if on[0] { bm } else { vec![] },
                board_rotates: on[1],
                board_allowed_rotations: if on[1] { br } else { vec![] },
                particle_moves: on[2],
                particle_allowed_moves: if on[2] { pm } else { vec![] },
                particle_rotates: on[3],
                particle_allowed_rotations: if on[3] { pr } else { vec![] },
                number_of_board_rotation_actions: nbr,
                number_of_particle_rotation_actions: npr,
                number_of_board_movement_actions: nbm,
                number_of_particle_movement_actions: npm,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn generated_problems_are_consistent(p in params(5..=20, 12), seed in any::<u64>()) {
        let problem = generate_problem(&p, seed).unwrap();
        prop_assert_eq!(&generate_problem(&p, seed).unwrap(), &problem);
        prop_assert_eq!(compute_ground_truth(&problem).unwrap(), problem.ground_truth.clone());
        prop_assert!(verify_answer(&problem, &answer_json(&problem.ground_truth)));
        let end = run_actions(&problem.initial_state, &problem.actions).unwrap();
        for particle in &end.particles {
            // particles never leave the board
            prop_assert!(end.board.contains(particle.position));
            prop_assert!(end.board.tile_at(particle.position).is_ok());
        }
        let keys: Vec<_> = problem.answer_schema.iter().map(|f| f.key.clone()).collect();
        let truth: Vec<_> = problem.ground_truth.keys().cloned().collect();
        prop_assert_eq!(keys, truth);
    }

    #[test]
    fn four_quarter_turns_are_identity(p in params(5..=12, 10), seed in any::<u64>()) {
        let problem = generate_problem(&p, seed).unwrap();
        let start = run_actions(&problem.initial_state, &problem.actions).unwrap();
        let quarter = SpatialAction::BoardRotate { degrees: 90 };
        let turned = run_actions(&start, &[quarter.clone(), quarter.clone(), quarter.clone(), quarter]).unwrap();
        prop_assert_eq!(&turned, &start);
        for degrees in [0, 360] {
            prop_assert_eq!(&apply_action(&start, &SpatialAction::BoardRotate { degrees }).unwrap(), &start);
        }
    }

    #[test]
    fn tile_numbering_is_a_bijection(w in 5u32..=30) {
        let mut seen = vec![false; (w * w) as usize];
        for row in 0..w {
            for col in 0..w {
                let t = tile_of(w, centroid(w, row, col)).unwrap();
                prop_assert!(t >= 1 && t <= w * w);
                prop_assert!(!std::mem::replace(&mut seen[(t - 1) as usize], true));
            }
        }
    }
}

#[test]
fn wrong_answers_are_rejected() {
    let p = SpatialParams {
        width: 8,
        wrap_around: true,
        board_moves: false,
        board_allowed_moves: vec![],
        board_rotates: true,
        board_allowed_rotations: vec![90],
        particle_moves: true,
        particle_allowed_moves: vec![MoveDir::Forward],
        particle_rotates: false,
        particle_allowed_rotations: vec![],
        number_of_board_rotation_actions: 1,
        number_of_particle_rotation_actions: 0,
        number_of_board_movement_actions: 0,
        number_of_particle_movement_actions: 3,
    };
    for seed in 0..50 {
        let problem = generate_problem(&p, seed).unwrap();
        let mut wrong = problem.ground_truth.clone();
        let (_, v) = wrong.first_mut().unwrap();
        *v = match v {
            AnswerValue::Int(i) => AnswerValue::Int(*i + 1),
            AnswerValue::Real(r) => AnswerValue::Real(*r + 1.0),
            AnswerValue::Label(l) => AnswerValue::Label(if l == "EAST" { "WEST" } else { "EAST" }.into()),
        };
        assert!(!verify_answer(&problem, &answer_json(&wrong)));
        assert!(!verify_answer(&problem, "no json here"));
    }
}

//! Property tests over randomly generated text, control codes and move
//! sequences.

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sass_sched::depgraph::DepGraph;
use sass_sched::ir::{ControlCode, Kernel};
use sass_sched::machine::{simulate, MachineConfig};
use sass_sched::perturb::{apply, candidates, move_at, sample_action, Direction, MoveOptions};
use sass_sched::testing::{run_tests, BufferSpec, Distribution, ElemKind, RunOptions, TestPlan};
use sass_sched::text::{parse_kernel, serialize_kernel};

use common::*;

fn control_code() -> impl Strategy<Value = ControlCode> {
    (0u8..64, prop::option::of(0u8..6), prop::option::of(0u8..6), any::<bool>(), 0u8..16)
        .prop_map(|(w, r, wr, y, s)| ControlCode::new(w, r, wr, y, s).unwrap())
}

const BODIES: &[&str] = &[
    "MOV R2, c[0x0][0x160] ;",
    "LDG.E.64 R8, [R2.64+0x8] ;",
    "@!P0 STG.E [R6.64], R16 ;",
    "IMAD.WIDE R18, R0, 0x4, R2 ;",
    "LDGSTS.E.BYPASS.128 [R7+0x100], [R4.64], !PT ;",
    "ISETP.GE.U32.AND P0, PT, R1, 0x10, PT ;",
    "BAR.SYNC 0x0 ;",
    "EXIT ;",
    "NOP;",
];

fn line() -> impl Strategy<Value = String> {
    prop_oneof![
        4 => (prop::option::of(control_code()), 0usize..BODIES.len(), "[ \t]{0,4}")
            .prop_map(|(cc, b, indent)| match cc {
                Some(cc) => format!("{indent}{cc} {}", BODIES[b]),
                None => format!("{indent}{}", BODIES[b]),
            }),
        1 => "[ \t]{0,3}".prop_map(String::from),
        1 => "[a-z ]{0,12}".prop_map(|c| format!("// {c}")),
        1 => "[a-z]{1,6}".prop_map(|l| format!(".L_{l}:")),
        1 => "[0-9a-f]{4}".prop_map(|a| format!("        /*{a}*/  {} /* 0x{a}00 */", BODIES[0])),
    ]
}

fn io_plan(ret: usize, len: usize) -> TestPlan {
    TestPlan {
        ret_ptr: ret,
        buffers: (0..3)
            .map(|arg| BufferSpec {
                arg,
                len,
                kind: ElemKind::Int32,
                dist: if arg == ret { Distribution::Zero } else { Distribution::Full },
            })
            .collect(),
        sample_count: 8,
        seed: 1,
    }
}

fn kernels() -> Vec<(Kernel, usize)> {
    vec![
        (parse(&corpus("vec_add.sass")), 2),
        (parse(&corpus("async_copy.sass")), 1),
        (parse(&corpus("predicated.sass")), 1),
        (parse(&latency_kernel(7)), 1),
        (parse(&producer_consumer_kernel(3)), 1),
    ]
}

fn sorted_lines(k: &Kernel) -> Vec<String> {
    let mut v: Vec<String> = k.schedule().iter().map(|i| i.text().to_string()).collect();
    v.sort();
    v
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn control_code_text_round_trip(cc in control_code()) {
        let text = cc.to_string();
        prop_assert_eq!(text.parse::<ControlCode>().unwrap(), cc);
        prop_assert_eq!(text.len(), 21);
    }

    #[test]
    fn kernel_text_round_trip(lines in prop::collection::vec(line(), 0..30), nl in any::<bool>()) {
        let mut text = lines.join("\n");
        if nl {
            text.push('\n');
        }
        let k = parse_kernel(&text).unwrap();
        prop_assert_eq!(serialize_kernel(&k), text.clone());
        let again = parse_kernel(&serialize_kernel(&k)).unwrap();
        prop_assert_eq!(again, k);
    }

    #[test]
    fn moves_permute_and_invert(which in 0usize..5, seed in any::<u64>(), steps in 1usize..20) {
        let (k0, _) = &kernels()[which];
        let cs = candidates(k0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut k = k0.clone();
        let mut g = DepGraph::build(&k);
        for _ in 0..steps {
            let a = sample_action(&cs, &mut rng).unwrap();
            let pos = candidates(&k).position(a.candidate).unwrap();
            let Ok(m) = apply(&k, &g, a, &MoveOptions::default()) else { continue };
            prop_assert_eq!(sorted_lines(&m.kernel), sorted_lines(&k));
            prop_assert_eq!(m.kernel.len(), k.len());
            let moved_to = match a.direction {
                Direction::Up => pos - 1,
                Direction::Down => pos + 1,
            };
            prop_assert_eq!(m.kernel.schedule()[moved_to].text(), k.schedule()[pos].text());
            let back = move_at(&m.kernel, &m.graph, moved_to, a.direction.reverse(), &MoveOptions::default())
                .unwrap();
            prop_assert_eq!(&back.kernel, &k);
            k = m.kernel;
            g = m.graph;
        }
    }

    #[test]
    fn legal_moves_preserve_outputs(which in 0usize..5, seed in any::<u64>(), steps in 1usize..40) {
        let (k0, ret) = &kernels()[which];
        let cs = candidates(k0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut k = k0.clone();
        let mut g = DepGraph::build(&k);
        for _ in 0..steps {
            let a = sample_action(&cs, &mut rng).unwrap();
            if let Ok(m) = apply(&k, &g, a, &MoveOptions::default()) {
                k = m.kernel;
                g = m.graph;
            }
        }
        let v = run_tests(k0, &k, &io_plan(*ret, 64), &RunOptions::default()).unwrap();
        prop_assert!(v.is_pass(), "{:?}", v.first_failure);
    }

    #[test]
    fn longer_latency_never_speeds_up(seed in 0u64..500, extra in 1u32..300) {
        let k = parse(&latency_kernel(seed));
        let base = MachineConfig::default();
        let slow = MachineConfig { global_mem_latency: base.global_mem_latency + extra, ..base.clone() };
        let fast = simulate(&k, &base);
        let slowed = simulate(&k, &slow);
        prop_assert!(slowed.total_cycles >= fast.total_cycles);
        prop_assert_eq!(fast.issue_cycles.len(), k.len());
        prop_assert!(fast.issue_cycles.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(fast.total_cycles > *fast.issue_cycles.last().unwrap());
    }
}

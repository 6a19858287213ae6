use proptest::prelude::*;

use specguard_core::corpus::fuzz;
use specguard_core::dependence::{eval_binop, Summary};
use specguard_core::ir::BinOp;
use specguard_core::sim::{simulate, SimConfig};
use specguard_core::{
    analyze, build_cfg, instruction_distance, parse_program, print_program, AnalysisConfig, CacheGeometry,
    MispredictPolicy, Report, SpecWindow,
};

fn summary() -> impl Strategy<Value = (Summary, u64)> {
    prop_oneof![
        any::<u64>().prop_map(|v| (Summary::exact(v), v)),
        (0u64..1 << 20, 0u64..1 << 20, any::<prop::sample::Index>()).prop_map(|(a, b, i)| {
            let (lo, hi) = (a.min(b), a.max(b));
            (Summary::interval(lo, hi), lo + i.index((hi - lo + 1) as usize) as u64)
        }),
        any::<u64>().prop_map(|v| (Summary::Top, v)),
    ]
}

fn binop() -> impl Strategy<Value = BinOp> {
    prop::sample::select(vec![
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::And,
        BinOp::Or,
        BinOp::Xor,
        BinOp::Shl,
        BinOp::Shr,
        BinOp::Lt,
        BinOp::Le,
        BinOp::Gt,
        BinOp::Ge,
        BinOp::Eq,
        BinOp::Ne,
    ])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cache_set_is_line_modulo_sets(sets in 0u32..8, ways in 1u32..16, line in 0u32..8, addr in any::<u64>()) {
        let g = CacheGeometry::new(1 << sets, ways, 1 << line).unwrap();
        prop_assert_eq!(g.line_of(addr), addr / (1u64 << line));
        prop_assert_eq!(g.set_of(addr), (addr / (1u64 << line)) % (1u64 << sets));
    }

    #[test]
    fn abstract_ops_contain_concrete_results(op in binop(), (a, x) in summary(), (b, y) in summary()) {
        prop_assert!(eval_binop(op, a, b).contains(op.eval(x, y)));
        prop_assert!(a.join(b).contains(x) && a.join(b).contains(y));
        prop_assert!(a.leq(a.join(b)));
    }

    #[test]
    fn print_parse_fixpoint(seed in any::<u64>()) {
        let f = fuzz::generate(seed);
        let printed = print_program(&f.program);
        let again = parse_program(&printed).unwrap();
        prop_assert_eq!(&again, &f.program);
        prop_assert_eq!(print_program(&again), printed);
    }

    #[test]
    fn distance_triangle_inequality(seed in any::<u64>()) {
        let p = fuzz::generate(seed).program;
        let cfg = build_cfg(&p).unwrap();
        let n = p.num_instructions() as u32;
        let ids: Vec<_> = (0..n).step_by(3).map(specguard_core::InstId).collect();
        for &a in &ids {
            for &b in &ids {
                for &c in &ids {
                    if let (Some(ab), Some(bc)) = (instruction_distance(&cfg, a, b), instruction_distance(&cfg, b, c)) {
                        let ac = instruction_distance(&cfg, a, c);
                        prop_assert!(ac.is_some_and(|ac| ac <= ab + bc));
                    }
                }
            }
        }
    }

    #[test]
    fn squashing_restores_committed_state(seed in any::<u64>(), sew in 1u32..600) {
        let f = fuzz::generate(seed);
        let spec = SimConfig { policy: MispredictPolicy::always(), window: SpecWindow::new(sew).unwrap(), ..SimConfig::default() };
        for input in &f.inputs {
            let a = simulate(&f.program, input, &SimConfig::default()).unwrap();
            let b = simulate(&f.program, input, &spec).unwrap();
            prop_assert_eq!(&a.registers, &b.registers);
            prop_assert_eq!(&a.memory, &b.memory);
            prop_assert_eq!(a.committed_shape(), b.committed_shape());
            prop_assert!(b.transient().all(|e| e.depth <= sew));
            prop_assert_eq!(a.transient().count(), 0);
            prop_assert_eq!(&b, &simulate(&f.program, input, &spec).unwrap());
        }
    }

    #[test]
    fn report_json_round_trips(seed in any::<u64>()) {
        let f = fuzz::generate(seed);
        let c = AnalysisConfig::default();
        let r = Report::new("fuzz", &c, &analyze(&f.program, &c).unwrap());
        prop_assert_eq!(Report::from_json(&r.to_json()).unwrap(), r.clone());
        prop_assert_eq!(r.counts.tb, r.detections.iter().map(|d| d.tb).collect::<std::collections::BTreeSet<_>>().len());
    }

    #[test]
    fn analysis_is_deterministic(seed in any::<u64>()) {
        let f = fuzz::generate(seed);
        let c = AnalysisConfig::default();
        let a = Report::new("x", &c, &analyze(&f.program, &c).unwrap());
        let b = Report::new("x", &c, &analyze(&f.program, &c).unwrap());
        prop_assert_eq!(a, b);
    }
}

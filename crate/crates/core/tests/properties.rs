use cat_core::bundle::{decode_bundle, encode_bundle, Policy, PolicyManifest, PolicySet};
use cat_core::corpus::{generate_kernel, mutate, MutationKind};
use cat_core::emulator::{RecordingHost, RunConfig, Status};
use cat_core::instrument::{build_baseline, build_bundle};
use cat_core::isa::{decode_instruction, encode_instruction, Instruction, Mem, Mnemonic, Operand, Reg, MAX_SUBSET_LEN};
use cat_core::loader::{load, scan_placeholders, EnclaveLayout};
use cat_core::pipeline::{admit, execute};
use cat_core::verifier::verify;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

const LADDER: [Policy; 4] = [Policy::P1, Policy::P2, Policy::P5, Policy::P6];

fn manifest(last: Policy) -> PolicyManifest {
    PolicyManifest::with_policies(PolicySet::up_to(last))
}

fn reg() -> impl Strategy<Value = Reg> {
    (0u8..16).prop_map(Reg::from_index)
}

fn mem() -> impl Strategy<Value = Mem> {
    let index = prop_oneof![Just(None), (reg(), prop::sample::select(vec![1u8, 2, 4, 8])).prop_map(Some)];
    let disp = prop_oneof![Just(0i32), -128i32..128, any::<i32>()];
    (reg(), index, disp).prop_map(|(base, index, disp)| Mem { base, index, disp })
}

fn operand() -> impl Strategy<Value = Operand> {
    prop_oneof![
        reg().prop_map(Operand::Reg),
        reg().prop_map(Operand::Reg32),
        prop_oneof![-200i64..200, any::<i32>().prop_map(i64::from), any::<i64>()].prop_map(Operand::Imm),
        mem().prop_map(Operand::Mem),
        (0i64..0x10000).prop_map(Operand::Rel),
    ]
}

fn candidate() -> impl Strategy<Value = Instruction> {
    (prop::sample::select(Mnemonic::ALL.to_vec()), operand(), operand()).prop_map(|(m, a, b)| {
        let ops = [a, b];
        Instruction::new(m, ops[..m.arity()].to_vec())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn encode_decode_round_trip(instr in candidate(), offset in 0u64..0x8000) {
        let Ok(enc) = encode_instruction(&instr, offset) else { return Ok(()) };
        let mut image = vec![0x90; offset as usize];
        image.extend_from_slice(&enc.bytes);
        let dec = decode_instruction(&image, offset).unwrap();
        prop_assert_eq!(dec.mnemonic, instr.mnemonic);
        prop_assert_eq!(&dec.operands, &instr.operands);
        prop_assert_eq!(dec.length as usize, enc.bytes.len());
        prop_assert!(enc.bytes.len() <= MAX_SUBSET_LEN);
    }

    #[test]
    fn decoder_never_panics_on_mutated_code(seed in any::<u64>(), edits in prop::collection::vec((any::<usize>(), any::<u8>()), 1..8)) {
        let mut code = build_bundle(&generate_kernel(seed % 64).source, &manifest(Policy::P6)).unwrap().code;
        for (at, byte) in edits {
            let n = code.len();
            code[at % n] = byte;
        }
        let mut off = 0u64;
        while (off as usize) < code.len() {
            match decode_instruction(&code, off) {
                Ok(i) => {
                    prop_assert!(i.length as usize <= MAX_SUBSET_LEN);
                    prop_assert!(off + i.length as u64 <= code.len() as u64);
                    off += i.length as u64;
                }
                Err(_) => off += 1,
            }
        }
    }

    #[test]
    fn bundle_round_trip(seed in 0u64..200, level in 0usize..4) {
        let b = build_bundle(&generate_kernel(seed).source, &manifest(LADDER[level])).unwrap();
        let bytes = encode_bundle(&b);
        prop_assert_eq!(decode_bundle(&bytes).unwrap(), b);
    }

    #[test]
    fn truncated_bundles_fail_cleanly(seed in 0u64..50, cut in any::<prop::sample::Index>()) {
        let bytes = encode_bundle(&build_bundle(&generate_kernel(seed).source, &manifest(Policy::P5)).unwrap());
        let n = cut.index(bytes.len());
        prop_assert!(decode_bundle(&bytes[..n]).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn producer_output_is_accepted(seed in any::<u64>(), level in 0usize..4) {
        let m = manifest(LADDER[level]);
        let b = build_bundle(&generate_kernel(seed).source, &m).unwrap();
        let report = verify(&load(&b, &EnclaveLayout::default()).unwrap(), &m);
        prop_assert!(report.accepted, "{}", report.to_text());
    }

    #[test]
    fn single_edit_mutants_are_rejected(seed in any::<u64>(), kind in prop::sample::select(MutationKind::ALL.to_vec())) {
        let m = manifest(Policy::P6);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        if let Some(x) = mutate(&generate_kernel(seed).source, &m, kind, &mut rng).unwrap() {
            let report = verify(&load(&x.bundle, &EnclaveLayout::default()).unwrap(), &m);
            prop_assert!(!report.accepted, "{}", x.description);
            prop_assert!(kind.expected().iter().any(|k| report.has(*k)), "{}: {}", x.description, report.to_text());
        }
    }

    #[test]
    fn rewriting_removes_every_placeholder(seed in any::<u64>(), level in 0usize..4) {
        let b = build_bundle(&generate_kernel(seed).source, &manifest(LADDER[level])).unwrap();
        let admitted = admit(&b, &EnclaveLayout::default()).unwrap();
        prop_assert!(scan_placeholders(&admitted.image.bytes).is_empty());
    }

    #[test]
    fn instrumentation_preserves_results(seed in any::<u64>(), level in 0usize..4) {
        let k = generate_kernel(seed);
        let layout = EnclaveLayout::default();
        let mut base_host = RecordingHost::default();
        let base = execute(&build_baseline(&k.source).unwrap(), &layout, &k.input, &mut base_host, &RunConfig::default()).unwrap();
        let mut host = RecordingHost::default();
        let b = build_bundle(&k.source, &manifest(LADDER[level])).unwrap();
        let out = execute(&b, &layout, &k.input, &mut host, &RunConfig::default()).unwrap();
        prop_assert_eq!(base.status, Status::Completed);
        prop_assert_eq!(out.status, Status::Completed);
        prop_assert_eq!(out.data_snapshot, base.data_snapshot);
        prop_assert_eq!(host.sent, base_host.sent);
        prop_assert!(out.untrusted_writes_outside(layout.writable_window()).is_empty());
    }
}

#[path = "common/gradcheck.rs"]
mod gradcheck;

use dualora::losses::Strategy;
use dualora::model::Phase;
use dualora::numerics::Distance;
use gradcheck::{check_full_loss, check_op, cns_l2, OPS, TOLERANCE};

#[test]
fn every_op_matches_finite_differences() {
    let mut failures = Vec::new();
    for op in OPS {
        let err = check_op(op);
        if !(err < TOLERANCE) {
            failures.push(format!("{op}: {err:.3e}"));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn cns_loss_adapter_gradients() {
    let err = check_full_loss(&cns_l2(), Phase::Finetune, None);
    assert!(err < TOLERANCE, "{err:.3e}");
}

#[test]
fn cns_l1_loss_adapter_gradients() {
    let s = Strategy::Cns { kind: Distance::L1, weight: 0.1 };
    let err = check_full_loss(&s, Phase::Finetune, None);
    assert!(err < TOLERANCE, "{err:.3e}");
}

#[test]
fn cns_loss_base_gradients() {
    let err = check_full_loss(&cns_l2(), Phase::Pretrain, Some(3));
    assert!(err < TOLERANCE, "{err:.3e}");
}

#[test]
fn baseline_strategy_gradients() {
    for s in [Strategy::Voc, Strategy::Mix, Strategy::Random, Strategy::Both] {
        let err = check_full_loss(&s, Phase::Finetune, None);
        assert!(err < TOLERANCE, "{}: {err:.3e}", s.id());
    }
}

//! Target classifiers and membership attackers.

mod attacker;
mod target;

pub use attacker::{
    build_attacker, build_blackbox_attacker, build_whitebox_attacker, rank_rows, AttackMode, Attacker, AttackerSpec,
    AttackerWidths, StreamInput,
};
pub use target::{assemble_target, build_target, Classifier, TargetKind, TargetSpec};

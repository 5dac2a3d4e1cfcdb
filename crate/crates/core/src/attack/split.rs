use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Row indices behind each attack slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub known_train: Vec<usize>,
    pub unknown_train: Vec<usize>,
    pub known_test: Vec<usize>,
    pub unknown_test: Vec<usize>,
}

/// Four-way member/non-member partition. The attacker learns from the known
/// halves and is scored on the unknown halves.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackSplits {
    pub known_train: Dataset,
    pub known_test: Dataset,
    pub unknown_train: Dataset,
    pub unknown_test: Dataset,
    pub indices: SplitIndices,
}

fn halve(n: usize, what: &str, rng: &mut StreamRng) -> Result<(Vec<usize>, Vec<usize>)> {
    let known = n / 2;
    if known == 0 || n - known == 0 {
        return Err(Error::Attack(format!("{what} set of {n} rows cannot fill both halves")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let unknown = order.split_off(known);
    Ok((order, unknown))
}

/// Random 50/50 partitions of both sets, `⌊n/2⌋` rows on the known side.
pub fn split_for_attack(train: &Dataset, test: &Dataset, rng: &mut StreamRng) -> Result<AttackSplits> {
    let (known_train, unknown_train) = halve(train.len(), "train", rng)?;
    let (known_test, unknown_test) = halve(test.len(), "test", rng)?;
    Ok(AttackSplits {
        known_train: train.subset(&known_train)?,
        known_test: test.subset(&known_test)?,
        unknown_train: train.subset(&unknown_train)?,
        unknown_test: test.subset(&unknown_test)?,
        indices: SplitIndices {
            known_train,
            unknown_train,
            known_test,
            unknown_test,
        },
    })
}

//! Ledger execution against hand-computed states, rejection of malformed
//! blocks, and chain-file integrity.

mod common;

use flobc::codec::Canonical;
use flobc::ids::{TrainerId, ValidatorId};
use flobc::ledger::{
    decode_chain, encode_chain, query, verify_chain, verify_chain_bytes, Block, Chain, GenesisSpec, LedgerError,
    QueryKey, QueryValue, RoundAction, Transaction, TxKind,
};
use flobc::params::{FlatParams, GradientUpdate, ModelVersion};
use flobc::time::VirtualTime;

const V0: ValidatorId = ValidatorId(0);
const ETA: f64 = 10.0;

fn t(i: u32) -> TrainerId {
    TrainerId(i)
}

fn genesis(scoring: bool) -> Chain {
    let spec = GenesisSpec {
        model: ModelVersion::new(0, FlatParams::new(vec![0.0, 0.0]).unwrap()),
        trainers: vec![t(0), t(1), t(2)],
        scoring,
    };
    let block = Chain::genesis_block(spec, VirtualTime(0), Some(VirtualTime(100)), V0).unwrap();
    Chain::from_genesis(block).unwrap()
}

fn update(trainer: u32, base: u64, delta: &[f64]) -> GradientUpdate {
    GradientUpdate::new(t(trainer), base, delta.to_vec(), 5).unwrap()
}

fn wrap(kinds: Vec<TxKind>) -> Vec<Transaction> {
    kinds.into_iter().enumerate().map(|(i, k)| Transaction::new(k, V0, i as u64)).collect()
}

fn share(round: u64, u: GradientUpdate) -> TxKind {
    TxKind::ShareGradient { round, update: u }
}

fn control(round: u64, action: RoundAction) -> TxKind {
    TxKind::RoundControl { round, action }
}

fn open(round: u64, at: u64) -> TxKind {
    control(round, RoundAction::Open { at: VirtualTime(at), deadline: Some(VirtualTime(at + 100)) })
}

/// Round 0 with two accepted updates and one rejected trainer:
/// accuracy changes +0.1, +0.3, -0.2 under eta = 10.
fn round_zero(chain: &Chain) -> Vec<TxKind> {
    let mut kinds = vec![
        share(0, update(0, 0, &[1.0, 2.0])),
        share(0, update(1, 0, &[3.0, -2.0])),
        TxKind::TrustAdjust { trainer: t(0), new_raw: 1.0 + ETA * 0.1 },
        TxKind::TrustAdjust { trainer: t(1), new_raw: 1.0 + ETA * 0.3 },
        TxKind::TrustAdjust { trainer: t(2), new_raw: 0.0 },
        control(0, RoundAction::Close),
    ];
    let after = chain.state().preview(&wrap(kinds.clone())).unwrap();
    let applied: Vec<_> = [t(0), t(1)].into_iter().zip(after.release_weights(&[t(0), t(1)]).unwrap()).collect();
    let model = after.aggregate_release(&applied).unwrap();
    kinds.push(TxKind::ReleaseModel { model, applied });
    kinds.push(open(1, 100));
    kinds
}

#[test]
fn close_block_matches_hand_computed_state() {
    let mut chain = genesis(true);
    let block = chain.build_block(wrap(round_zero(&chain)), V0).unwrap();
    chain.append(block).unwrap();
    let s = chain.state();

    // Raw trust (2, 4, 0): shares 1/3, 2/3, 0; the release renormalizes over
    // the two accepted trainers, which here changes nothing.
    let phi: Vec<f64> = s.trust.phi_vector().into_iter().map(|(_, p)| p).collect();
    for (got, want) in phi.iter().zip([1.0 / 3.0, 2.0 / 3.0, 0.0]) {
        assert!((got - want).abs() < 1e-15, "{phi:?}");
    }
    let want = [1.0 / 3.0 * 1.0 + 2.0 / 3.0 * 3.0, 1.0 / 3.0 * 2.0 + 2.0 / 3.0 * -2.0];
    assert_eq!(s.current_model.version, 1);
    for (got, want) in s.current_model.params.values().iter().zip(want) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
    assert!(s.current_model.is_consistent());
    assert_eq!(s.round_state.round_id, 1);
    assert!(!s.round_state.closed && s.round_state.submitted.is_empty());
    assert!(s.pending_updates.is_empty());
    assert_eq!(query(s, QueryKey::LatestVersion), QueryValue::LatestVersion(1));
    assert_eq!(query(s, QueryKey::Round), QueryValue::Round(s.round_state.clone()));

    // Replaying the chain reproduces the state and the hashes.
    assert!(verify_chain(chain.blocks()).ok);
    assert_eq!(chain.state_at(1).unwrap().state_hash(), s.state_hash());
}

#[test]
fn unscored_ledger_releases_plain_mean() {
    let mut chain = genesis(false);
    let mut kinds = vec![
        share(0, update(0, 0, &[1.0, 2.0])),
        share(0, update(2, 0, &[3.0, -2.0])),
        control(0, RoundAction::Close),
    ];
    let applied = vec![(t(0), 0.5), (t(2), 0.5)];
    let after = chain.state().preview(&wrap(kinds.clone())).unwrap();
    kinds.push(TxKind::ReleaseModel { model: after.aggregate_release(&applied).unwrap(), applied });
    kinds.push(open(1, 100));
    chain.append(chain.build_block(wrap(kinds), V0).unwrap()).unwrap();
    assert_eq!(chain.state().current_model.params.values(), &[2.0, 0.0]);
    let QueryValue::Trust(phi) = query(chain.state(), QueryKey::Trust) else { panic!() };
    assert!(phi.iter().all(|(_, p)| (p - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn round_without_accepted_updates_keeps_the_model() {
    let mut chain = genesis(true);
    let kinds = vec![TxKind::TrustAdjust { trainer: t(1), new_raw: 0.5 }, control(0, RoundAction::Close), open(1, 100)];
    chain.append(chain.build_block(wrap(kinds), V0).unwrap()).unwrap();
    assert_eq!(chain.state().current_model.version, 0);
    assert_eq!(chain.state().trust.raw(t(1)), Some(0.5));
}

/// Builds a block from `kinds` with a correct state hash if the kinds apply,
/// otherwise with the parent's state hash; either way `check` must say why.
fn refused(chain: &Chain, kinds: Vec<TxKind>) -> LedgerError {
    let txs = wrap(kinds);
    let block = match chain.build_block(txs.clone(), V0) {
        Ok(b) => b,
        Err(e) => return e,
    };
    chain.check(&block).expect_err("block should be refused")
}

#[test]
fn malformed_blocks_are_refused() {
    let chain = genesis(true);
    let good = round_zero(&chain);

    let stale = vec![share(0, update(0, 7, &[1.0, 1.0]))];
    assert!(matches!(refused(&chain, stale), LedgerError::StaleUpdate { .. }));

    let dup = vec![share(0, update(0, 0, &[1.0, 1.0])), share(0, update(0, 0, &[2.0, 1.0]))];
    assert!(matches!(refused(&chain, dup), LedgerError::Sync(_) | LedgerError::InvalidTx { .. }));

    let wrong_dim = vec![share(0, update(0, 0, &[1.0, 1.0, 1.0]))];
    assert!(matches!(refused(&chain, wrong_dim), LedgerError::InvalidTx { .. }));

    let unknown = vec![share(0, update(9, 0, &[1.0, 1.0]))];
    assert!(matches!(refused(&chain, unknown), LedgerError::InvalidTx { .. }));

    let after_close = vec![control(0, RoundAction::Close), share(0, update(0, 0, &[1.0, 1.0]))];
    assert!(matches!(refused(&chain, after_close), LedgerError::InvalidTx { index: 1, .. }));

    let mut uniform = good.clone();
    if let TxKind::ReleaseModel { applied, .. } = &mut uniform[6] {
        applied[0].1 = 0.5;
        applied[1].1 = 0.5;
    }
    assert!(matches!(refused(&chain, uniform), LedgerError::InvalidTx { .. }));

    let mut bad_model = good.clone();
    if let TxKind::ReleaseModel { model, .. } = &mut bad_model[6] {
        *model = ModelVersion::new(1, FlatParams::new(vec![9.0, 9.0]).unwrap());
    }
    assert!(matches!(refused(&chain, bad_model), LedgerError::InvalidTx { .. }));

    let mut missing = good.clone();
    if let TxKind::ReleaseModel { applied, .. } = &mut missing[6] {
        applied.pop();
    }
    assert!(matches!(refused(&chain, missing), LedgerError::InvalidTx { .. }));

    let skip = vec![control(0, RoundAction::Close), open(2, 100)];
    assert!(matches!(refused(&chain, skip), LedgerError::InvalidTx { .. } | LedgerError::Sync(_)));

    let reopen = vec![open(1, 100)];
    assert!(matches!(refused(&chain, reopen), LedgerError::InvalidTx { .. } | LedgerError::Sync(_)));

    let unscored = genesis(false);
    let adjust = vec![TxKind::TrustAdjust { trainer: t(0), new_raw: 2.0 }];
    assert!(matches!(refused(&unscored, adjust), LedgerError::InvalidTx { .. }));

    let negative = vec![TxKind::TrustAdjust { trainer: t(0), new_raw: -1.0 }];
    assert!(matches!(refused(&chain, negative), LedgerError::Reputation(_)));

    let genesis_again = vec![TxKind::Genesis(GenesisSpec {
        model: ModelVersion::new(0, FlatParams::new(vec![0.0, 0.0]).unwrap()),
        trainers: vec![t(0)],
        scoring: true,
    })];
    assert_eq!(refused(&chain, genesis_again), LedgerError::MisplacedGenesis);
}

#[test]
fn headers_and_payload_digests_are_checked() {
    let chain = genesis(true);
    let block = chain.build_block(wrap(round_zero(&chain)), V0).unwrap();
    assert!(chain.check(&block).is_ok());

    let mut b = block.clone();
    b.height = 2;
    assert!(matches!(chain.check(&b), Err(LedgerError::HeightMismatch { .. })));

    let mut b = block.clone();
    b.prev_hash = flobc::params::Digest::of(b"elsewhere");
    assert!(matches!(chain.check(&b), Err(LedgerError::BrokenLink { .. })));

    let mut b = block.clone();
    b.state_hash = flobc::params::Digest::of(b"wrong");
    assert!(matches!(chain.check(&b), Err(LedgerError::StateHashMismatch { .. })));

    let mut b = block.clone();
    b.txs[2].kind = TxKind::TrustAdjust { trainer: t(0), new_raw: 2.5 };
    assert!(matches!(chain.check(&b), Err(LedgerError::TxDigestMismatch { index: 2 })));
}

fn three_block_chain() -> Vec<Block> {
    let mut chain = genesis(true);
    chain.append(chain.build_block(wrap(round_zero(&chain)), V0).unwrap()).unwrap();
    let mut kinds = vec![share(1, update(1, 1, &[0.5, 0.25])), control(1, RoundAction::Close)];
    let after = chain.state().preview(&wrap(kinds.clone())).unwrap();
    let applied: Vec<_> = vec![(t(1), after.release_weights(&[t(1)]).unwrap()[0])];
    kinds.push(TxKind::ReleaseModel { model: after.aggregate_release(&applied).unwrap(), applied });
    kinds.push(open(2, 200));
    chain.append(chain.build_block(wrap(kinds), V0).unwrap()).unwrap();
    chain.blocks().to_vec()
}

#[test]
fn chain_file_round_trips_and_every_flipped_byte_is_caught() {
    let blocks = three_block_chain();
    let bytes = encode_chain(&blocks);
    assert_eq!(decode_chain(&bytes).unwrap(), blocks);
    let v = verify_chain_bytes(&bytes);
    assert!(v.ok && v.verified == 3, "{v:?}");

    for mask in [0x01u8, 0x80] {
        let bad = common::flip_failures(&bytes, 0..bytes.len(), mask);
        assert!(bad.is_empty(), "{}", bad.join("\n"));
    }
}

#[test]
fn resealed_edits_fail_at_the_edited_height() {
    let blocks = three_block_chain();
    for h in 1..blocks.len() {
        let mut edited = blocks.clone();
        // Change a delta and re-seal the transaction so only replay can tell.
        let tx = &mut edited[h].txs[0];
        let TxKind::ShareGradient { round, update } = &tx.kind else { panic!("first tx shares a gradient") };
        let mut delta = update.delta().to_vec();
        delta[0] += 1.0;
        *tx = Transaction::new(share(*round, update.with_delta(delta).unwrap()), tx.author, tx.nonce);
        let v = verify_chain_bytes(&encode_chain(&edited));
        assert!(!v.ok);
        assert_eq!(v.failure.unwrap().0, h as u64);
    }
    // Dropping a middle block breaks the link at its successor's position.
    let mut gap = blocks.clone();
    gap.remove(1);
    let v = verify_chain(&gap);
    assert_eq!(v.failure.unwrap().0, 1);
    assert_eq!(verify_chain(&[]).failure.unwrap().0, 0);
}

#[test]
fn block_encoding_is_canonical() {
    for b in three_block_chain() {
        let bytes = b.to_bytes();
        let back = Block::from_bytes(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.digest(), b.digest());
    }
}
